"""Detection matching, precision/recall-style metrics and throughput timing."""
from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, fields
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

Z_95 = 1.95996


@dataclass(frozen=True)
class MatchConfig:
    radius: float = 12.0

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError(f"match radius must be positive, got {self.radius}")


@dataclass(frozen=True)
class CountTally:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn) < 0:
            raise ValueError(f"negative count in {self}")

    @property
    def n_gt(self) -> int:
        return self.tp + self.fn

    def __add__(self, other: "CountTally") -> "CountTally":
        return CountTally(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


def match_frame(detections, ground_truth, cfg: MatchConfig = MatchConfig()) -> CountTally:
    """One-to-one greedy matching of detections to ground truth by ascending distance.

    ``detections`` rows are (row, col[, score]); ``ground_truth`` rows are
    (row, col). Pairs farther apart than ``cfg.radius`` never match. Equal
    distances are broken by coordinates, so the result does not depend on
    input order.
    """
    det = np.asarray(detections, dtype=np.float64)
    det = det.reshape(-1, det.shape[-1] if det.ndim == 2 else 2)[:, :2]
    gt = np.asarray(ground_truth, dtype=np.float64).reshape(-1, 2)
    if len(det) == 0 or len(gt) == 0:
        return CountTally(0, len(det), len(gt))
    d2 = ((det[:, None, :] - gt[None, :, :]) ** 2).sum(axis=-1)
    di, gi = np.nonzero(d2 <= cfg.radius ** 2)
    order = np.lexsort((gt[gi, 1], gt[gi, 0], det[di, 1], det[di, 0], d2[di, gi]))
    used_d, used_g = set(), set()
    for k in order:
        a, b = int(di[k]), int(gi[k])
        if a in used_d or b in used_g:
            continue
        used_d.add(a)
        used_g.add(b)
    tp = len(used_d)
    return CountTally(tp, len(det) - tp, len(gt) - tp)


def confidence_interval(p_hat: float, n: int, z: float = Z_95) -> float:
    """Half-width of the Wald normal-approximation interval for a proportion."""
    if n <= 0:
        raise ValueError("confidence interval needs n >= 1")
    if not 0.0 <= p_hat <= 1.0:
        raise ValueError(f"proportion must be in [0, 1], got {p_hat}")
    return z * math.sqrt(p_hat * (1.0 - p_hat) / n)


@dataclass(frozen=True)
class MetricsReport:
    """All rates in percent; ``None`` marks an undefined ratio (zero denominator)."""

    precision: float | None
    recall: float | None
    f1: float | None
    fnr: float | None
    fpr: float | None
    err: float | None
    f1_ci: float | None
    err_ci: float | None
    tally: CountTally = CountTally()

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "tally"}


def compute_metrics(tally: CountTally, n_gt: int | None = None) -> MetricsReport:
    """Precision, recall, F1, FNR, FPR and ERR = FNR + FPR, as percentages.

    FNR and FPR are both normalized by the number of ground-truth people, so
    FPR can exceed 100. F1's interval uses ``TP + FP + FN`` trials and ERR's
    uses the ground-truth count; proportions outside [0, 1] are clipped for
    the interval only.
    """
    if n_gt is None:
        n_gt = tally.n_gt
    if n_gt != tally.tp + tally.fn:
        raise ValueError(f"inconsistent tally: n_gt={n_gt} but TP+FN={tally.tp + tally.fn}")
    tp, fp, fn = tally.tp, tally.fp, tally.fn
    precision = 100.0 * tp / (tp + fp) if tp + fp else None
    recall = 100.0 * tp / n_gt if n_gt else None
    # harmonic mean of P and R, as one division so it is correctly rounded
    f1 = None if precision is None or recall is None else 100.0 * (2 * tp) / (2 * tp + fp + fn)
    fnr = 100.0 * fn / n_gt if n_gt else None
    fpr = 100.0 * fp / n_gt if n_gt else None
    err = fnr + fpr if n_gt else None
    trials = tp + fp + fn
    f1_ci = 100.0 * confidence_interval(f1 / 100.0, trials) if f1 is not None and trials else None
    err_ci = 100.0 * confidence_interval(min(err / 100.0, 1.0), n_gt) if err is not None else None
    return MetricsReport(precision, recall, f1, fnr, fpr, err, f1_ci, err_ci, tally)


def f1_from_rates(precision: float, recall: float) -> float:
    return 2.0 * precision * recall / (precision + recall)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

REPORT_COLUMNS = ("condition", "TP", "FP", "FN", "Precision", "Recall", "F1", "F1_CI",
                  "FNR", "FPR", "ERR", "ERR_CI")
CONDITION_ORDER = ("single", "two", "multi", "no-people")


def _fmt(v) -> str:
    return "NA" if v is None else f"{v:.2f}"


def _exact(v) -> str:
    return "NA" if v is None else repr(float(v))


def aggregate_by_condition(tallies: Iterable[tuple[str, CountTally]]) -> dict[str, CountTally]:
    """Sum per-frame tallies per condition tag, with a ``Totals`` entry."""
    groups: dict[str, CountTally] = {}
    total = CountTally()
    for condition, t in tallies:
        groups[condition] = groups.get(condition, CountTally()) + t
        total = total + t
    ordered = {c: groups[c] for c in CONDITION_ORDER if c in groups}
    ordered.update({c: t for c, t in sorted(groups.items()) if c not in ordered})
    ordered["Totals"] = total
    return ordered


def report_rows(groups: Mapping[str, CountTally], fmt=_fmt) -> list[list[str]]:
    rows = []
    for condition, t in groups.items():
        m = compute_metrics(t)
        rows.append([condition, str(t.tp), str(t.fp), str(t.fn), fmt(m.precision), fmt(m.recall),
                     fmt(m.f1), fmt(m.f1_ci), fmt(m.fnr), fmt(m.fpr), fmt(m.err), fmt(m.err_ci)])
    return rows


def report_csv(groups: Mapping[str, CountTally]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    # full precision so ERR == FNR + FPR survives a round trip through the file
    writer.writerows(report_rows(groups, _exact))
    return buf.getvalue()


def report_table(groups: Mapping[str, CountTally]) -> str:
    """Aligned text table: Precision, Recall, F1 +- CI, FNR, FPR, ERR +- CI (all %)."""
    header = ["Condition", "Precision", "Recall", "F1", "FNR", "FPR", "ERR"]
    body = []
    for row in report_rows(groups):
        cond, _, _, _, p, r, f1, f1ci, fnr, fpr, err, errci = row
        body.append([cond, p, r, f"{f1} +- {f1ci}", fnr, fpr, f"{err} +- {errci}"])
    widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
    lines = ["  ".join(h.ljust(w) if i == 0 else h.rjust(w) for i, (h, w) in enumerate(zip(header, widths)))]
    lines.append("  ".join("-" * w for w in widths))
    for r in body:
        lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# timing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BenchmarkResult:
    frame_seconds: tuple[float, ...]
    warmup: int

    @property
    def timed_frames(self) -> int:
        return len(self.frame_seconds)

    @property
    def mean_seconds(self) -> float:
        return float(np.mean(self.frame_seconds))

    @property
    def mean_fps(self) -> float:
        return 1.0 / self.mean_seconds

    @property
    def min_fps(self) -> float:
        return 1.0 / max(self.frame_seconds)

    @property
    def max_fps(self) -> float:
        return 1.0 / min(self.frame_seconds)


def benchmark_fps(infer: Callable[[np.ndarray], object], frames: Sequence[np.ndarray],
                  warmup: int = 2, clock: Callable[[], float] = time.perf_counter) -> BenchmarkResult:
    """Time ``infer`` on each frame (batch of one). The first ``warmup`` calls are discarded."""
    if warmup < 0:
        raise ValueError("warmup must be >= 0")
    if len(frames) <= warmup:
        raise ValueError(f"need more than {warmup} frames, got {len(frames)}")
    times = []
    for i, frame in enumerate(frames):
        start = clock()
        infer(frame)
        elapsed = clock() - start
        if i >= warmup:
            times.append(elapsed)
    return BenchmarkResult(tuple(times), warmup)
