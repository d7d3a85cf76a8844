"""Two-term confidence-map loss and the end-to-end training loop."""
from __future__ import annotations

import contextlib
import copy
import csv
import io
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .confmap import TargetSpec, render_target
from .data import derive_seed
from .model import DPDNet, get_variant
from .optim import Adam
from .tensor import NonFiniteError, Tensor, backward, is_deterministic, mse, no_grad, set_deterministic

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lam: float = 1.0
    epochs: int = 50
    lr: float = 1e-3
    batch_size: int = 8
    val_fraction: float = 0.1
    seed: int = 0
    filter_scale: float = 1.0
    variant: str = "std"
    sigma: float | None = None
    deterministic: bool = False

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if not 0 < self.val_fraction < 1:
            raise ValueError("validation fraction must be in (0, 1)")
        get_variant(self.variant)

    @property
    def target_sigma(self) -> float:
        return self.sigma if self.sigma is not None else get_variant(self.variant).sigma


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    seconds: float


@dataclass
class TrainRecord:
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int = -1
    config: dict = field(default_factory=dict)

    @property
    def train_losses(self) -> list[float]:
        return [e.train_loss for e in self.epochs]

    @property
    def val_losses(self) -> list[float]:
        return [e.val_loss for e in self.epochs]

    def to_csv(self, include_time: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "seconds"] if include_time else ["epoch", "train_loss", "val_loss"])
        for e in self.epochs:
            row = [e.epoch, repr(e.train_loss), repr(e.val_loss)]
            w.writerow(row + [f"{e.seconds:.3f}"] if include_time else row)
        return buf.getvalue()


def dpdnet_loss(refined: Tensor, main: Tensor, target, lam: float = 1.0) -> Tensor:
    """Refined-map squared error plus ``lam`` times the main-map squared error.

    Each term is the batch mean of per-frame squared L2 norms.
    """
    target = target if isinstance(target, Tensor) else Tensor(target, dtype=refined.dtype)
    if not (refined.shape == main.shape == target.shape):
        raise ValueError(f"loss shape mismatch: {refined.shape}, {main.shape}, {target.shape}")
    loss = mse(refined, target)
    if lam:
        loss = loss + mse(main, target) * lam
    return loss


def render_targets(labels: Sequence, size: Sequence[int], sigma: float) -> np.ndarray:
    spec = TargetSpec(sigma)
    h, w = size
    return np.stack([render_target(lab, spec, h, w) for lab in labels])[..., None]


def split_indices(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    if n < 2:
        raise TrainingError(f"need at least 2 frames to hold out a validation set, got {n}")
    rng = np.random.default_rng(derive_seed(seed, "split"))
    order = rng.permutation(n)
    n_val = min(n - 1, max(1, int(round(n * val_fraction))))
    return np.sort(order[n_val:]), np.sort(order[:n_val])


@contextlib.contextmanager
def _eval_mode(model: DPDNet):
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            yield
    finally:
        model.train(was_training)


def predict_maps(model: DPDNet, frames: np.ndarray, batch_size: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Inference-mode forward over ``frames`` (N, H, W, 1); returns (main, refined) maps."""
    mains, refined = [], []
    with _eval_mode(model):
        for start in range(0, len(frames), batch_size):
            a, b = model(Tensor(frames[start:start + batch_size]))
            mains.append(a.data)
            refined.append(b.data)
    return np.concatenate(mains), np.concatenate(refined)


def validate(model: DPDNet, frames: np.ndarray, targets: np.ndarray, lam: float = 1.0,
             batch_size: int = 8) -> float:
    """Loss over a dataset in inference mode (frozen batch norm, no updates)."""
    if len(frames) == 0:
        return 0.0
    main, refined = predict_maps(model, frames, batch_size)
    n = len(frames)
    r = ((refined.astype(np.float64) - targets) ** 2).reshape(n, -1).sum(axis=1).mean()
    m = ((main.astype(np.float64) - targets) ** 2).reshape(n, -1).sum(axis=1).mean()
    return float(r + lam * m)


def _snapshot(model: DPDNet) -> dict:
    return {k: np.array(v, copy=True) for k, v in model.state_dict().items()}


def train(frames: np.ndarray, labels: Sequence, config: TrainConfig = TrainConfig(),
          model: DPDNet | None = None,
          on_epoch: Callable[[EpochStats], None] | None = None) -> tuple[DPDNet, TrainRecord]:
    """Fit a DPDNet with Adam; return the parameters of the best validation epoch.

    ``frames`` is (N, H, W) or (N, H, W, 1) normalized depth at the variant's
    input size; ``labels[i]`` holds head (row, col) positions in those
    coordinates.
    """
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim == 3:
        frames = frames[..., None]
    if len(frames) == 0:
        raise TrainingError("empty dataset")
    if len(labels) != len(frames):
        raise TrainingError(f"{len(frames)} frames but {len(labels)} label lists")
    variant = get_variant(config.variant)
    if tuple(frames.shape[1:3]) != variant.input_size:
        raise TrainingError(f"frames are {frames.shape[1:3]}, {variant.name} variant needs {variant.input_size}")

    previous_mode = is_deterministic()
    set_deterministic(config.deterministic or previous_mode)
    try:
        targets = render_targets(labels, variant.input_size, config.target_sigma)
        train_idx, val_idx = split_indices(len(frames), config.val_fraction, config.seed)
        if model is None:
            model = DPDNet(variant, config.filter_scale, seed=derive_seed(config.seed, "init"))
        model.train()
        opt = Adam(model.parameters(), lr=config.lr)
        shuffle_rng = np.random.default_rng(derive_seed(config.seed, "shuffle"))
        record = TrainRecord(config=asdict(config))
        best_val, best_state = np.inf, None

        for epoch in range(1, config.epochs + 1):
            start = time.perf_counter()
            order = shuffle_rng.permutation(train_idx)
            total = 0.0
            for b, lo in enumerate(range(0, len(order), config.batch_size)):
                idx = np.sort(order[lo:lo + config.batch_size])
                opt.zero_grad()
                try:
                    main, refined = model(Tensor(frames[idx]))
                    loss = dpdnet_loss(refined, main, targets[idx], config.lam)
                    backward(loss)
                    opt.step()
                except NonFiniteError as exc:
                    raise TrainingError(f"non-finite values at epoch {epoch}, batch {b}: {exc}") from exc
                if not all(np.isfinite(p.data).all() for p in opt.params):
                    raise TrainingError(f"non-finite parameters after the update at epoch {epoch}, batch {b}")
                total += loss.item() * len(idx)
            train_loss = total / len(order)
            try:
                val_loss = validate(model, frames[val_idx], targets[val_idx], config.lam, config.batch_size)
            except NonFiniteError as exc:
                raise TrainingError(f"non-finite validation loss at epoch {epoch}: {exc}") from exc
            stats = EpochStats(epoch, train_loss, val_loss, time.perf_counter() - start)
            record.epochs.append(stats)
            logger.info("epoch %d train %.4f val %.4f (%.1fs)", epoch, train_loss, val_loss, stats.seconds)
            if on_epoch is not None:
                on_epoch(stats)
            if val_loss < best_val:
                best_val, best_state = val_loss, _snapshot(model)
                record.best_epoch = epoch
        model.load_state_dict(best_state)
        model.eval()
        return model, record
    finally:
        set_deterministic(previous_mode)


def clone_model(model: DPDNet) -> DPDNet:
    return copy.deepcopy(model)
