"""scikit-learn style wrappers around preprocessing, training and decoding.

``X`` is always a stack of raw depth frames ``(n_frames, height, width)`` in
millimetres at the sensor's native size; ``y`` is a list with one ``(k, 2)``
array of head (row, col) positions per frame, also in native pixels.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .confmap import extract_peaks, rescale_detections
from .data import NORM_DIVISOR_MM, DepthFrame, prepare_input, rescale_labels
from .evaluation import CountTally, MatchConfig, compute_metrics, match_frame
from .model import DPDNet, get_variant, load_checkpoint, save_checkpoint
from .training import TrainConfig, predict_maps, train


def _check_frames(X) -> np.ndarray:
    X = check_array(X, allow_nd=True, dtype=None, ensure_2d=False, ensure_min_samples=1)
    if X.ndim == 4 and X.shape[-1] == 1:
        X = X[..., 0]
    if X.ndim != 3:
        raise ValueError(f"expected frames shaped (n, height, width), got {X.shape}")
    return X


def _check_labels(y, n: int) -> list[np.ndarray]:
    if y is None or len(y) != n:
        raise ValueError(f"need one label array per frame ({n})")
    return [np.asarray(p, dtype=np.float64).reshape(-1, 2) for p in y]


def detect_frames(model: DPDNet, inputs: np.ndarray, native_size, tau: float = 0.5,
                  peak_radius: int = 3, min_separation: float | None = None,
                  batch_size: int = 8) -> tuple[list[np.ndarray], np.ndarray]:
    """Forward normalized ``inputs`` and decode peaks back into ``native_size`` pixels.

    Returns per-frame ``(k, 3)`` (row, col, score) arrays and the refined maps.
    ``min_separation`` is in map pixels and defaults to twice the variant's sigma.
    """
    sep = 2.0 * model.variant.sigma if min_separation is None else min_separation
    if inputs.ndim == 3:
        inputs = inputs[..., None]
    _, refined = predict_maps(model, inputs, batch_size)
    dets = []
    for conf in refined:
        peaks = extract_peaks(conf, tau, peak_radius, sep)
        dets.append(rescale_detections(peaks, model.variant.input_size, native_size))
    return dets, refined


class DepthPreprocessor(TransformerMixin, BaseEstimator):
    """Fill invalid pixels, resize to the variant's input and scale to [0, 1]."""

    def __init__(self, variant: str = "std", norm_divisor: float = NORM_DIVISOR_MM):
        self.variant = variant
        self.norm_divisor = norm_divisor

    def fit(self, X, y=None):
        X = _check_frames(X)
        self.native_size_ = tuple(X.shape[1:3])
        self.input_size_ = get_variant(self.variant).input_size
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "input_size_")
        X = _check_frames(X)
        return np.stack([
            prepare_input(DepthFrame(f), self.input_size_, self.norm_divisor).depth for f in X
        ])[..., None]


class DPDnetDetector(BaseEstimator):
    """Overhead people detector: ``fit`` trains, ``predict`` returns head positions."""

    def __init__(self, variant: str = "std", filter_scale: float = 1.0, epochs: int = 50,
                 lr: float = 1e-3, batch_size: int = 8, lam: float = 1.0, val_fraction: float = 0.1,
                 tau: float = 0.5, peak_radius: int = 3, min_separation: float | None = None,
                 match_radius: float = 12.0, norm_divisor: float = NORM_DIVISOR_MM,
                 random_state: int = 0, deterministic: bool = False):
        self.variant = variant
        self.filter_scale = filter_scale
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.lam = lam
        self.val_fraction = val_fraction
        self.tau = tau
        self.peak_radius = peak_radius
        self.min_separation = min_separation
        self.match_radius = match_radius
        self.norm_divisor = norm_divisor
        self.random_state = random_state
        self.deterministic = deterministic

    def _train_config(self) -> TrainConfig:
        return TrainConfig(lam=self.lam, epochs=self.epochs, lr=self.lr, batch_size=self.batch_size,
                           val_fraction=self.val_fraction, seed=self.random_state,
                           filter_scale=self.filter_scale, variant=self.variant,
                           deterministic=self.deterministic)

    def fit(self, X, y):
        X = _check_frames(X)
        labels = _check_labels(y, len(X))
        self.preprocessor_ = DepthPreprocessor(self.variant, self.norm_divisor).fit(X)
        inputs = self.preprocessor_.transform(X)
        size = self.preprocessor_.input_size_
        scaled = [rescale_labels(p, X.shape[1:3], size) for p in labels]
        self.model_, self.history_ = train(inputs, scaled, self._train_config())
        self.native_size_ = tuple(X.shape[1:3])
        return self

    def _inputs(self, X):
        check_is_fitted(self, "model_")
        X = _check_frames(X)
        if tuple(X.shape[1:3]) != self.native_size_:
            raise ValueError(f"frames are {X.shape[1:3]}, detector was fitted on {self.native_size_}")
        return self.preprocessor_.transform(X)

    def transform(self, X) -> np.ndarray:
        """Refined confidence maps at the model resolution, shaped (n, h, w)."""
        inputs = self._inputs(X)
        _, refined = predict_maps(self.model_, inputs, self.batch_size)
        return refined[..., 0]

    def predict(self, X) -> list[np.ndarray]:
        """Per-frame (k, 3) arrays of (row, col, score) in native pixels."""
        inputs = self._inputs(X)
        dets, _ = detect_frames(self.model_, inputs, self.native_size_, self.tau,
                                self.peak_radius, self.min_separation, self.batch_size)
        return dets

    def score(self, X, y) -> float:
        """Detection F1 as a fraction; 0.0 when undefined."""
        dets = self.predict(X)
        labels = _check_labels(y, len(dets))
        cfg = MatchConfig(self.match_radius)
        tally = sum((match_frame(d, g, cfg) for d, g in zip(dets, labels)), CountTally())
        f1 = compute_metrics(tally).f1
        return 0.0 if f1 is None else f1 / 100.0

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        save_checkpoint(self.model_, path)

    @classmethod
    def from_checkpoint(cls, path, native_size, **params) -> "DPDnetDetector":
        """Detector around a saved model, ready to ``predict`` on ``native_size`` frames."""
        model = load_checkpoint(path)
        est = cls(variant=model.variant.name, filter_scale=model.filter_scale, **params)
        est.model_ = model
        est.history_ = None
        est.native_size_ = tuple(native_size)
        est.preprocessor_ = DepthPreprocessor(est.variant, est.norm_divisor)
        est.preprocessor_.native_size_ = est.native_size_
        est.preprocessor_.input_size_ = model.variant.input_size
        return est
