"""Disentanglement scoring: per-field score matrices, optimal matching, occupancy IoU."""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .compositor import LayoutSet, PlacedFields, SceneModel
from .diff import ContractError
from .renderer import Camera, RenderConfig, render

MAX_ASSIGNMENT_K = 8


@dataclass(frozen=True)
class EvalConfig:
    num_views: int = 12
    view_spacing: float = 30.0
    elevation: float = -30.0
    seeds: int = 3
    scorer: str = "iou-oracle"  # or "bridge"
    grid_resolution: int = 64
    density_threshold: float = 0.5
    bounds: tuple = (-1.5, 1.5)
    render: RenderConfig = field(default_factory=lambda: RenderConfig(background=(1.0, 1.0, 1.0)))

    def __post_init__(self):
        if not math.isclose(self.num_views * self.view_spacing, 360.0):
            raise ValueError("num_views * view_spacing must equal 360 degrees")
        if self.seeds < 1:
            raise ValueError("need at least one seed")
        if self.scorer not in ("iou-oracle", "bridge"):
            raise ValueError(f"unknown scorer {self.scorer!r}")

    def views(self) -> list[Camera]:
        return [Camera(i * self.view_spacing, self.elevation) for i in range(self.num_views)]


class GroundTruthScene:
    """Known objects plus one or more world arrangements of them.

    Arrangement 0 is the reference pose used for scoring.  ``as_scene()``
    returns a frozen :class:`SceneModel` whose layouts are the arrangements, which
    is what mock guidance renders as its target.
    """

    def __init__(self, objects: Sequence, arrangements):
        self.objects = list(objects)
        arr = np.asarray(arrangements, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.shape[1:] != (len(self.objects), 8):
            raise ValueError(f"arrangements must have shape (N, {len(self.objects)}, 8), got {arr.shape}")
        self.arrangements = arr

    @property
    def n_objects(self) -> int:
        return len(self.objects)

    def object_field(self, j: int, arrangement: int = 0) -> PlacedFields:
        return PlacedFields([self.objects[j]], [self.arrangements[arrangement, j]])

    def scene_field(self, arrangement: int = 0) -> PlacedFields:
        return PlacedFields(self.objects, list(self.arrangements[arrangement]))

    def as_scene(self) -> SceneModel:
        model = SceneModel(self.objects, LayoutSet.from_array(self.arrangements))
        model.store.freeze("")
        return model

    def check_bounded(self, cfg: EvalConfig = EvalConfig()) -> bool:
        """True if every object's density stays below the threshold on the eval box faces."""
        lo, hi = cfg.bounds
        ax = np.linspace(lo, hi, 17)
        g = np.stack(np.meshgrid(ax, ax, indexing="ij"), -1).reshape(-1, 2)
        faces = []
        for axis in range(3):
            for v in (lo, hi):
                pts = np.insert(g, axis, v, axis=1)
                faces.append(pts)
        pts = np.concatenate(faces)
        return all(np.max(np.asarray(self.object_field(j).query(pts).density)) < cfg.density_threshold
                   for j in range(self.n_objects))


def _grid(resolution: int, bounds) -> np.ndarray:
    lo, hi = bounds
    step = (hi - lo) / resolution
    ax = lo + step * (np.arange(resolution) + 0.5)
    return np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1).reshape(-1, 3)


def occupancy(fld, resolution: int = 64, threshold: float = 0.5, bounds=(-1.5, 1.5), chunk: int = 65536):
    """Boolean ``density > threshold`` at the centers of a ``resolution^3`` grid."""
    pts = _grid(resolution, bounds)
    out = np.empty(pts.shape[0], dtype=bool)
    for i in range(0, pts.shape[0], chunk):
        out[i:i + chunk] = np.asarray(fld.query(pts[i:i + chunk]).density) > threshold
    return out


def iou_from_occupancy(a: np.ndarray, b: np.ndarray) -> float:
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def iou_score(a, b, resolution: int = 64, threshold: float = 0.5, bounds=(-1.5, 1.5)) -> float:
    """Volumetric IoU of two world-space fields' occupancies; 1.0 when both are empty."""
    if threshold <= 0:
        raise ValueError("density threshold must be positive")
    return iou_from_occupancy(occupancy(a, resolution, threshold, bounds),
                              occupancy(b, resolution, threshold, bounds))


@dataclass(frozen=True)
class Assignment:
    permutation: tuple
    mean: float


def best_assignment(m) -> Assignment:
    """Brute-force the field-to-object permutation with the highest mean score.

    ``permutation[k]`` is the object matched to field ``k``.  Candidates are
    visited in lexicographic order and only a strictly better mean replaces
    the incumbent, so exact ties resolve to the smallest permutation.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ContractError(f"score matrix must be square, got shape {m.shape}")
    K = m.shape[0]
    if K > MAX_ASSIGNMENT_K:
        raise ContractError(f"K={K} too large for exhaustive assignment (max {MAX_ASSIGNMENT_K})")
    rows = range(K)
    best, best_score = None, -math.inf
    for perm in itertools.permutations(range(K)):
        s = math.fsum(m[r, perm[r]] for r in rows)
        if s > best_score:
            best, best_score = perm, s
    return Assignment(tuple(best), best_score / K)


class IouScorer:
    """Oracle scorer: world-space occupancy IoU of field ``k`` (layout 0) against object ``j``."""

    name = "iou-oracle"

    def matrix(self, model: SceneModel, targets: GroundTruthScene, cfg: EvalConfig) -> np.ndarray:
        if targets.n_objects != model.n_fields:
            raise ContractError(f"model has K={model.n_fields} fields but {targets.n_objects} targets")
        occ = lambda f: occupancy(f, cfg.grid_resolution, cfg.density_threshold, cfg.bounds)
        fields = [occ(PlacedFields.from_model(model, 0, [k])) for k in range(model.n_fields)]
        objects = [occ(targets.object_field(j)) for j in range(targets.n_objects)]
        return np.array([[iou_from_occupancy(f, o) for o in objects] for f in fields])


class ImageScorer:
    """Scores solo renders of each field against text targets with ``provider.score``.

    Each field is rendered alone under layout 0 over a white background from
    the configured views; entry ``(k, j)`` is the mean view score against
    ``targets[j]``.
    """

    name = "bridge"

    def __init__(self, provider):
        self.provider = provider

    def matrix(self, model: SceneModel, targets: Sequence, cfg: EvalConfig) -> np.ndarray:
        if len(targets) != model.n_fields:
            raise ContractError(f"model has K={model.n_fields} fields but {len(targets)} targets")
        K = model.n_fields
        m = np.zeros((K, K))
        for k in range(K):
            solo = PlacedFields.from_model(model, 0, [k])
            renders = [render(solo, 0, cam, cfg.render, rng=None, per_field=False).rgb for cam in cfg.views()]
            for j, text in enumerate(targets):
                m[k, j] = math.fsum(float(self.provider.score(img, text)) for img in renders) / len(renders)
        return m


def score_matrix(model: SceneModel, targets, scorer=None, cfg: EvalConfig = EvalConfig()) -> np.ndarray:
    """``K x K`` scores, rows are fields and columns are target objects."""
    scorer = IouScorer() if scorer is None else scorer
    return scorer.matrix(model, targets, cfg)


@dataclass
class SeedResult:
    seed: int
    matrix: np.ndarray
    permutation: tuple
    mean: float

    def to_dict(self) -> dict:
        return {"seed": self.seed, "matrix": np.asarray(self.matrix).tolist(),
                "permutation": list(self.permutation), "mean": self.mean}


@dataclass
class EvalReport:
    per_seed: list
    selected_seed: int

    @property
    def selected(self) -> SeedResult:
        return next(r for r in self.per_seed if r.seed == self.selected_seed)

    def to_dict(self) -> dict:
        return {"per_seed": [r.to_dict() for r in self.per_seed], "selected_seed": self.selected_seed}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def evaluate(model: SceneModel, targets, scorer=None, cfg: EvalConfig = EvalConfig(), seed: int = 0) -> SeedResult:
    m = score_matrix(model, targets, scorer, cfg)
    a = best_assignment(m)
    return SeedResult(seed, m, a.permutation, a.mean)


def multi_seed_eval(train: Callable[[int], SceneModel], targets, scorer=None, cfg: EvalConfig = EvalConfig(),
                    seeds: Sequence[int] | None = None) -> EvalReport:
    """Train once per seed, score each run, and select the highest mean matched score.

    Ties keep the earliest seed.
    """
    seeds = list(range(cfg.seeds)) if seeds is None else list(seeds)
    if not seeds:
        raise ValueError("need at least one seed")
    results = [evaluate(train(s), targets, scorer, cfg, s) for s in seeds]
    best = results[0]
    for r in results[1:]:
        if r.mean > best.mean:
            best = r
    return EvalReport(results, best.seed)
