"""scikit-learn style front end for layout learning on synthetic scenes."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .compositor import PlacedFields, SceneModel, init_layout_set
from .eval import EvalConfig, GroundTruthScene, IouScorer, best_assignment
from .field import MlpField
from .losses import LossWeights, MockGuidance
from .renderer import CameraRanges, RenderConfig
from .trainer import SceneTarget, TrainConfig, run_mode


def _check_points(X) -> np.ndarray:
    X = check_array(X, dtype=np.float64)
    if X.shape[1] != 3:
        raise ValueError(f"expected points of shape (n, 3), got {X.shape}")
    return X


class LayoutLearner(BaseEstimator, TransformerMixin):
    """Learns K fields and N layouts from mock guidance built on a known scene.

    ``fit(X)`` takes a :class:`GroundTruthScene` (its arrangements are the
    "prompt" images) or a ``SceneModel``.  After fitting, ``transform`` maps
    world points to per-field densities under layout 0, ``predict`` labels each
    point with its densest field (``-1`` for empty space), and ``score`` is the
    mean matched IoU against a ground-truth scene.
    """

    def __init__(self, n_fields=2, n_layouts=4, mode="generate", steps=600, peak_lr=5e-3, start_lr=1e-6,
                 end_lr=2.5e-4, warmup_steps=30, resolution=20, samples_per_ray=24, near=1.5, far=4.5,
                 hidden=32, depth=2, octaves=4, empty_weight=0.05, assets=None, target_volume=None,
                 density_threshold=0.5, random_state=0):
        self.n_fields = n_fields
        self.n_layouts = n_layouts
        self.mode = mode
        self.steps = steps
        self.peak_lr = peak_lr
        self.start_lr = start_lr
        self.end_lr = end_lr
        self.warmup_steps = warmup_steps
        self.resolution = resolution
        self.samples_per_ray = samples_per_ray
        self.near = near
        self.far = far
        self.hidden = hidden
        self.depth = depth
        self.octaves = octaves
        self.empty_weight = empty_weight
        self.assets = assets
        self.target_volume = target_volume
        self.density_threshold = density_threshold
        self.random_state = random_state

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            steps=self.steps, peak_lr=self.peak_lr, start_lr=self.start_lr, end_lr=self.end_lr,
            warmup_steps=self.warmup_steps, mode=self.mode, n_fields=self.n_fields, n_layouts=self.n_layouts,
            seed=self.random_state, weights=LossWeights(empty=self.empty_weight),
            render=RenderConfig(self.resolution, self.resolution, self.samples_per_ray, self.near, self.far),
            cameras=CameraRanges(elevation=(-60.0, 0.0)),
        )

    def _init_model(self) -> SceneModel:
        rng = np.random.default_rng(np.random.SeedSequence(self.random_state).spawn(1)[0])
        assets = list(self.assets or [])
        fields = assets + [MlpField(self.octaves, self.hidden, self.depth, rng=rng)
                           for _ in range(self.n_fields - len(assets))]
        return SceneModel(fields, init_layout_set(self.n_layouts, self.n_fields, rng))

    def fit(self, X, y=None):
        scene = X.as_scene() if isinstance(X, GroundTruthScene) else X
        if not isinstance(scene, SceneModel):
            raise TypeError("fit expects a GroundTruthScene or SceneModel")
        if self.assets is not None and len(self.assets) > self.n_fields:
            raise ValueError("more assets than fields")
        cfg = self._train_config()
        model = self._init_model()
        recon = None if self.target_volume is None else SceneTarget(self.target_volume)
        trainer = run_mode(model, cfg, MockGuidance(SceneTarget(scene)), recon_target=recon)
        self.model_ = model
        self.history_ = [r.record() for r in trainer.history]
        self.n_layout_scalars_ = model.layout_scalar_count()
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = _check_points(X)
        cols = [np.asarray(PlacedFields.from_model(self.model_, 0, [k]).query(X).density)
                for k in range(self.model_.n_fields)]
        return np.stack(cols, axis=1)

    def predict(self, X):
        dens = self.transform(X)
        label = np.argmax(dens, axis=1)
        label[dens.max(axis=1) <= self.density_threshold] = -1
        return label

    def score(self, X, y=None):
        check_is_fitted(self, "model_")
        if not isinstance(X, GroundTruthScene):
            raise TypeError("score expects a GroundTruthScene")
        m = IouScorer().matrix(self.model_, X, EvalConfig(density_threshold=self.density_threshold))
        return best_assignment(m).mean
