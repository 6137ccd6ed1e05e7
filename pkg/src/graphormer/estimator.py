"""Scikit-learn style facade over the mesh-regression pipeline.

GraphormerMeshRegressor wraps config -> train_loop -> forward behind the
familiar fit/predict/get_params surface so the model composes with pipelines
and parameter search; the heavy lifting lives in the library modules.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .config import PRESETS, ConfigError, apply_overrides
from .mesh import InputError, MeshSample
from .model import GraphormerModel
from .train import evaluate, train_loop


def check_image_batch(images, image_size: int) -> np.ndarray:
    """Validate an (N, H, W) image batch in [0, 1]; returns a float64 array."""
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise InputError(f"expected images of shape (N, H, W), got {arr.shape}")
    if arr.shape[1] != image_size or arr.shape[2] != image_size:
        raise InputError(
            f"images are {arr.shape[1]}x{arr.shape[2]}, model expects {image_size}x{image_size}"
        )
    if not np.all(np.isfinite(arr)):
        raise InputError("images contain non-finite values")
    return arr


def check_samples(samples, n_joints: int, n_fine: int, image_size: int) -> list[MeshSample]:
    """Validate that samples match the configured template and image size."""
    if not samples:
        raise InputError("expected a non-empty sequence of MeshSample")
    for i, s in enumerate(samples):
        if not isinstance(s, MeshSample):
            raise InputError(f"sample {i} is {type(s).__name__}, expected MeshSample")
        if s.gt_joints3d.shape != (n_joints, 3):
            raise InputError(
                f"sample {i}: joints shape {s.gt_joints3d.shape} != ({n_joints}, 3)"
            )
        if s.gt_fine_vertices.shape != (n_fine, 3):
            raise InputError(
                f"sample {i}: vertices shape {s.gt_fine_vertices.shape} != ({n_fine}, 3)"
            )
        if s.silhouette.shape != (image_size, image_size):
            raise InputError(
                f"sample {i}: silhouette shape {s.silhouette.shape} != "
                f"({image_size}, {image_size})"
            )
    return list(samples)


class GraphormerMeshRegressor(BaseEstimator):
    """Estimator API: fit on MeshSample sequences, predict fine meshes from images.

    Parameters mirror the main config knobs; anything else goes through
    `overrides` as dotted config keys. score() returns the negative PA-MPJPE
    (template units x1000), so higher is better as sklearn expects.
    """

    def __init__(
        self,
        preset: str = "desk",
        epochs: int | None = None,
        lr: float | None = None,
        batch_size: int | None = None,
        seed: int = 0,
        holdout_fraction: float = 0.2,
        overrides: dict | None = None,
    ):
        self.preset = preset
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed
        self.holdout_fraction = holdout_fraction
        self.overrides = overrides

    def _build_config(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}")
        overrides = dict(self.overrides or {})
        if self.epochs is not None:
            overrides["train.epochs"] = int(self.epochs)
        if self.lr is not None:
            overrides["train.lr"] = float(self.lr)
        if self.batch_size is not None:
            overrides["train.batch_size"] = int(self.batch_size)
        overrides["train.seed"] = int(self.seed)
        return apply_overrides(PRESETS[self.preset](), overrides).validate()

    def fit(self, X, y=None):
        """Train on a sequence of MeshSample; a tail fraction is held out for the
        per-epoch evaluation the training loop logs."""
        config = self._build_config()
        model = GraphormerModel(config)
        samples = check_samples(
            X, config.n_joints, model.template.n_fine, config.data.image_size
        )
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise InputError(
                f"holdout_fraction must be in [0, 1), got {self.holdout_fraction}"
            )
        n_hold = max(1, int(len(samples) * self.holdout_fraction)) if len(samples) > 1 else 0
        train_samples = samples[: len(samples) - n_hold] if n_hold else samples
        eval_samples = samples[len(samples) - n_hold :] if n_hold else samples
        result = train_loop(
            config, train_samples, eval_samples, template=model.template, model=model
        )
        self.config_ = config
        self.model_ = result.model
        self.template_ = result.model.template
        self.log_rows_ = result.log_rows
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise InputError("estimator is not fitted; call fit first")

    def predict(self, X) -> np.ndarray:
        """Fine vertex positions, shape (N, V_fine, 3), from (N, H, W) images."""
        self._check_fitted()
        images = check_image_batch(X, self.config_.data.image_size)
        out = [
            self.model_.forward(img, training=False).fine_vertices.data for img in images
        ]
        return np.stack(out, axis=0)

    def predict_joints(self, X) -> np.ndarray:
        """3D joint positions, shape (N, J, 3), from (N, H, W) images."""
        self._check_fitted()
        images = check_image_batch(X, self.config_.data.image_size)
        out = [self.model_.forward(img, training=False).joints3d.data for img in images]
        return np.stack(out, axis=0)

    def score(self, X, y=None) -> float:
        """Negative PA-MPJPE over MeshSample ground truth (higher is better)."""
        self._check_fitted()
        samples = check_samples(
            X, self.config_.n_joints, self.template_.n_fine, self.config_.data.image_size
        )
        return -evaluate(self.model_, samples)["pa_mpjpe"]
