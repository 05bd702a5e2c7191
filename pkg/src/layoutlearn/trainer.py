"""Layout-learning optimization loop and its run modes.

One step: sample a camera and a layout, render the composite plus per-field
alpha maps, inject the SDS gradient into the image, add per-field
regularizers, back-propagate, and take an Adam step where layout parameters
use a larger learning rate.  ``decompose`` additionally ties layout 0 to a
target volume through a reconstruction loss.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import IO, Callable, Sequence

import numpy as np

from . import diff as D
from .compositor import SceneModel, sample_layout
from .losses import LossWeights, NoiseSchedule, acc_loss, empty_loss, recon_loss, sds_pixel_gradient
from .renderer import (
    DEFAULT_CHUNK,
    Camera,
    CameraRanges,
    ConfigError,
    RenderConfig,
    render,
    render_backprop,
    sample_camera,
)

logger = logging.getLogger(__name__)

MODES = ("generate", "arrange", "decompose", "conditional")
PAPER_STEPS = 15000
PAPER_WARMUP = 3000
PAPER_BLOB_DECAY = 1000


class StepAborted(RuntimeError):
    """A step failed before the optimizer update; the model is untouched and the step may be retried."""


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3000
    peak_lr: float = 1e-4
    start_lr: float = 1e-9
    end_lr: float = 1e-6
    warmup_steps: int | None = None  # None: 3000/15000 of ``steps``
    blob_decay_steps: int | None = None  # None: 1000/15000 of ``steps``
    layout_lr_multiplier: float = 10.0
    seed: int = 0
    mode: str = "generate"
    n_fields: int = 3
    n_layouts: int = 4
    prompt: str = ""
    weights: LossWeights = field(default_factory=LossWeights)
    render: RenderConfig = field(default_factory=RenderConfig)
    cameras: CameraRanges = field(default_factory=CameraRanges)
    textureless_prob: float = 0.1
    cfg_strength: float | None = None  # None: the provider's own default
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    beta1: float = 0.9
    beta2: float = 0.99
    adam_eps: float = 1e-8
    freeze_fields: tuple = ()
    freeze_transforms: tuple = ()  # field index k (all layouts) or (n, k) pairs
    chunk: int | None = DEFAULT_CHUNK

    def __post_init__(self):
        if self.steps <= 0:
            raise ConfigError("steps must be positive")
        if min(self.peak_lr, self.start_lr, self.end_lr) <= 0:
            raise ConfigError("learning rates must be positive")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.n_fields < 1 or self.n_layouts < 1:
            raise ConfigError("n_fields and n_layouts must be >= 1")
        if not 0.0 <= self.textureless_prob <= 1.0:
            raise ConfigError("textureless_prob must be a probability")

    @property
    def warmup(self) -> int:
        if self.warmup_steps is not None:
            return int(self.warmup_steps)
        return max(1, round(PAPER_WARMUP * self.steps / PAPER_STEPS))

    @property
    def blob_decay(self) -> int:
        if self.blob_decay_steps is not None:
            return int(self.blob_decay_steps)
        return max(1, round(PAPER_BLOB_DECAY * self.steps / PAPER_STEPS))


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Log-linear warmup ``start -> peak`` then log-linear decay ``peak -> end``."""
    if not 0 <= step <= cfg.steps:
        raise ValueError(f"step {step} outside [0, {cfg.steps}]")
    w = min(cfg.warmup, cfg.steps)
    if step <= w:
        frac, lo, hi = step / w, cfg.start_lr, cfg.peak_lr
    else:
        frac, lo, hi = (step - w) / max(cfg.steps - w, 1), cfg.peak_lr, cfg.end_lr
    return float(math.exp(math.log(lo) + frac * (math.log(hi) - math.log(lo))))


class Adam:
    """Adam with per-entry learning-rate multipliers; frozen entries are skipped entirely."""

    def __init__(self, store: D.ParamStore, beta1: float = 0.9, beta2: float = 0.99, eps: float = 1e-8):
        self.store = store
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {n: np.zeros_like(e.value) for n, e in store.entries.items()}
        self.v = {n: np.zeros_like(e.value) for n, e in store.entries.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1**self.t, 1.0 - b2**self.t
        for name, entry in self.store.entries.items():
            if entry.frozen:
                continue
            g = self.store.grads[name]
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            entry.value -= (lr * entry.lr_mult) * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_vector(self) -> np.ndarray:
        parts = [np.array([float(self.t)])]
        for name in self.store.entries:
            parts += [self.m[name].ravel(), self.v[name].ravel()]
        return np.concatenate(parts)

    def load_state_vector(self, vec: np.ndarray) -> None:
        self.t = int(vec[0])
        off = 1
        for name, entry in self.store.entries.items():
            n = entry.value.size
            self.m[name] = vec[off:off + n].reshape(entry.value.shape).copy()
            self.v[name] = vec[off + n:off + 2 * n].reshape(entry.value.shape).copy()
            off += 2 * n
        if off != vec.size:
            raise ValueError(f"optimizer state has {vec.size} floats, expected {off}")


@dataclass(frozen=True)
class View:
    """Everything a guidance target needs to reproduce the rendered view."""

    camera: Camera
    layout: int
    background: np.ndarray
    textureless: bool
    render: RenderConfig


class SceneTarget:
    """Renders a reference scene (a SceneModel or a bare field) for a :class:`View`.

    Layout ``n`` of the view selects arrangement ``n mod N_ref`` of the
    reference.  Renders use bin-midpoint samples, so they are deterministic;
    foreground colour and alpha are cached per view and composited over the
    requested background on every call.
    """

    def __init__(self, scene, samples_per_ray: int | None = None, max_cache: int = 512):
        self.scene = scene
        self.samples_per_ray = samples_per_ray
        self.max_cache = max_cache
        self._cache: dict = {}

    def _foreground(self, camera: Camera, layout: int, textureless: bool, cfg: RenderConfig):
        if self.samples_per_ray is not None:
            cfg = replace(cfg, samples_per_ray=self.samples_per_ray)
        n_ref = self.scene.n_layouts if isinstance(self.scene, SceneModel) else 1
        key = (camera, layout % n_ref, textureless, cfg.width, cfg.height, cfg.samples_per_ray, cfg.near, cfg.far)
        hit = self._cache.get(key)
        if hit is None:
            out = render(self.scene, layout % n_ref, camera, cfg, rng=None, background=np.zeros(3),
                         textureless=textureless, per_field=False)
            hit = (out.rgb, out.alpha)
            if len(self._cache) >= self.max_cache:
                self._cache.pop(next(iter(self._cache)))
            self._cache[key] = hit
        return hit

    def __call__(self, view: View) -> np.ndarray:
        fg, alpha = self._foreground(view.camera, view.layout, view.textureless, view.render)
        return fg + (1.0 - alpha)[..., None] * np.asarray(view.background)


@dataclass
class StepReport:
    step: int
    layout: int
    loss_total: float
    loss_sds: float
    loss_empty: list
    loss_acc: list
    loss_rec: float
    lr: float
    t: float
    seconds: float

    def record(self) -> dict:
        return {
            "step": self.step,
            "layout": self.layout,
            "loss_total": self.loss_total,
            "loss_sds": self.loss_sds,
            "loss_empty": self.loss_empty,
            "loss_acc": self.loss_acc,
            "loss_rec": self.loss_rec,
            "lr": self.lr,
        }


def apply_freeze(model: SceneModel, cfg: TrainConfig) -> None:
    for k in cfg.freeze_fields:
        if not 0 <= k < model.n_fields:
            raise ConfigError(f"freeze field index {k} outside [0, {model.n_fields})")
        model.freeze_field(k)
    for item in cfg.freeze_transforms:
        if isinstance(item, (tuple, list)):
            n, k = item
            model.freeze_transform(int(n), int(k))
        else:
            for n in range(model.n_layouts):
                model.freeze_transform(n, int(item))


class Trainer:
    """Runs optimization steps on a :class:`SceneModel`.

    ``provider`` supplies ``denoise``; if it also has ``condition(prompt, view)``
    the trainer asks it for the per-view conditioning (the mock provider turns
    views into target images).  ``recon_target`` maps a :class:`View` to the
    image layout 0 must reproduce (decompose mode).
    """

    def __init__(self, model: SceneModel, cfg: TrainConfig, provider, recon_target: Callable | None = None,
                 log: IO[str] | None = None):
        self.model = model
        self.cfg = cfg
        self.provider = provider
        self.recon_target = recon_target
        self.log = log
        self.rng = np.random.default_rng(cfg.seed)
        self.optimizer = Adam(model.store, cfg.beta1, cfg.beta2, cfg.adam_eps)
        self.step_index = 0
        self.history: list[StepReport] = []

        expected = 8 * model.n_layouts * model.n_fields
        count = model.layout_scalar_count()
        if count != expected:
            raise AssertionError(f"layout scalar count {count} != 8NK = {expected}")
        logger.info("learnable layout scalars: %d (N=%d, K=%d)", count, model.n_layouts, model.n_fields)
        if cfg.mode == "decompose" and recon_target is None:
            raise ConfigError("decompose mode needs a target volume")

    def _conditioning(self, view: View):
        cond = getattr(self.provider, "condition", None)
        return cond(self.cfg.prompt, view) if cond is not None else self.cfg.prompt

    def train_step(self) -> StepReport:
        cfg, model, rng = self.cfg, self.model, self.rng
        t0 = time.perf_counter()
        lr = lr_at(min(self.step_index, cfg.steps), cfg)
        model.set_blob_scale(max(0.0, 1.0 - self.step_index / cfg.blob_decay))

        camera = sample_camera(rng, cfg.cameras)
        n = sample_layout(model.n_layouts, rng)
        textureless = bool(rng.random() < cfg.textureless_prob)
        if isinstance(cfg.render.background, str):
            background = rng.random(3)
        else:
            background = np.asarray(cfg.render.background, dtype=np.float64)
        view = View(camera, n, background, textureless, cfg.render)
        w = cfg.weights
        share_recon = cfg.mode == "decompose" and n == 0 and not textureless
        recon_img = self.recon_target(replace(view, layout=0)) if share_recon else None

        def loss_fn(out):
            prompt = self._conditioning(view)
            g, t = sds_pixel_gradient(out.rgb.value, prompt, self.provider, cfg.schedule, rng, cfg.cfg_strength)
            total = D.sum_(D.mul(out.rgb, g))
            empties, accs = [], []
            for a_k in out.per_field_alpha:
                e = empty_loss(a_k, w)
                ac = acc_loss(a_k, w.acc)
                total = D.add(total, D.add(D.mul(w.empty, e), ac))
                empties.append(float(D.value_of(e)))
                accs.append(float(D.value_of(ac)))
            rec = 0.0
            if recon_img is not None:
                r = recon_loss(out.rgb, recon_img, w.rec)
                total = D.add(total, r)
                rec = float(D.value_of(r))
            return total, (float(np.mean(g * g)), empties, accs, rec, t)

        model.store.zero_grad()
        try:
            _, _, (sds, empties, accs, rec, t) = render_backprop(
                model, n, camera, cfg.render, rng, loss_fn, background=background,
                textureless=textureless, chunk=cfg.chunk)
            if cfg.mode == "decompose" and not share_recon:
                v0 = View(camera, 0, background, False, cfg.render)
                target = self.recon_target(v0)
                rec, _, _ = render_backprop(
                    model, 0, camera, cfg.render, rng, lambda out: recon_loss(out.rgb, target, w.rec),
                    background=background, textureless=False, chunk=cfg.chunk)
        except Exception as exc:
            model.store.zero_grad()
            raise StepAborted(f"step {self.step_index} aborted: {exc}") from exc

        self.optimizer.step(lr)
        model.store.zero_grad()
        total = sds + w.empty * sum(empties) + sum(accs) + rec
        report = StepReport(self.step_index, n, total, sds, empties, accs, rec, lr, t,
                            time.perf_counter() - t0)
        self.history.append(report)
        if self.log is not None:
            self.log.write(json.dumps(report.record()) + "\n")
        self.step_index += 1
        return report

    def run(self, steps: int | None = None, callback: Callable[[StepReport], None] | None = None) -> SceneModel:
        steps = self.cfg.steps if steps is None else steps
        for _ in range(steps):
            report = self.train_step()
            if callback is not None:
                callback(report)
        return self.model


def check_mode_assets(model: SceneModel, cfg: TrainConfig, recon_target=None) -> None:
    from .field import MlpField

    if cfg.mode == "arrange":
        if all(isinstance(f, MlpField) for f in model.fields):
            raise ConfigError("arrange mode needs at least one frozen asset field")
    if cfg.mode == "decompose" and recon_target is None:
        raise ConfigError("decompose mode needs a target volume")
    if cfg.mode == "conditional" and not cfg.freeze_fields:
        raise ConfigError("conditional mode needs at least one frozen field")


def run_mode(model: SceneModel, cfg: TrainConfig, provider, recon_target=None, log: IO[str] | None = None,
             callback=None) -> Trainer:
    """Configure freezing for ``cfg.mode`` and train; returns the finished trainer.

    * ``generate``: fields and layouts train (minus any configured freezes).
    * ``arrange``: every field frozen; only the 8NK layout scalars move.
    * ``decompose``: layout 0 also matches ``recon_target`` renders.
    * ``conditional``: ``freeze_fields`` stay fixed, the rest trains.
    """
    check_mode_assets(model, cfg, recon_target)
    if cfg.mode == "arrange":
        for k in range(model.n_fields):
            model.freeze_field(k)
    apply_freeze(model, cfg)
    trainer = Trainer(model, cfg, provider, recon_target, log)
    trainer.run(callback=callback)
    return trainer


def layout_scalar_report(model: SceneModel) -> str:
    return f"layout scalars: {model.layout_scalar_count()} (8 x N={model.n_layouts} x K={model.n_fields})"


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))
    return float("inf") if mse == 0 else float(-10.0 * np.log10(mse))


def field_views(n_views: int = 8, elevation: float = -30.0) -> Sequence[tuple[float, float]]:
    return tuple((360.0 * i / n_views, elevation) for i in range(n_views))
