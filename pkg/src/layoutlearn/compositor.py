"""Layouts of K fields and their merge into a single volume."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import diff as D
from .field import FieldQueryResult
from .geom import Ray, RigidScaleTransform, transform_points, transform_rays

DIV_EPS = 1e-9
LAYOUT_PARAM_COUNT = 8


@dataclass
class Layout:
    transforms: list[RigidScaleTransform]

    def __len__(self) -> int:
        return len(self.transforms)


@dataclass
class LayoutSet:
    layouts: list[Layout]

    def __post_init__(self):
        if not self.layouts:
            raise ValueError("a layout set needs at least one layout")
        k = len(self.layouts[0])
        if k < 1 or any(len(lay) != k for lay in self.layouts):
            raise ValueError("every layout must hold the same number K >= 1 of transforms")

    @property
    def n_layouts(self) -> int:
        return len(self.layouts)

    @property
    def n_fields(self) -> int:
        return len(self.layouts[0])

    @property
    def n_scalars(self) -> int:
        return LAYOUT_PARAM_COUNT * self.n_layouts * self.n_fields

    def to_array(self) -> np.ndarray:
        return np.array([[T.to_vector() for T in lay.transforms] for lay in self.layouts])

    @classmethod
    def from_array(cls, arr) -> "LayoutSet":
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[-1] != LAYOUT_PARAM_COUNT:
            raise ValueError(f"expected (N, K, 8) layout array, got {arr.shape}")
        return cls([Layout([RigidScaleTransform.from_vector(v) for v in row]) for row in arr])

    @classmethod
    def identity(cls, n_layouts: int, n_fields: int) -> "LayoutSet":
        return cls([Layout([RigidScaleTransform.identity() for _ in range(n_fields)])
                    for _ in range(n_layouts)])


def init_layout_set(n_layouts: int, n_fields: int, rng: np.random.Generator) -> LayoutSet:
    """Random layouts: ``s ~ N(1, 0.3)``, ``t_i ~ N(0, 0.3)``, ``q_i ~ N([0,0,0,1], 0.1)``."""
    if n_layouts < 1 or n_fields < 1:
        raise ValueError("N and K must both be >= 1")
    quat = rng.normal(loc=[0.0, 0.0, 0.0, 1.0], scale=0.1, size=(n_layouts, n_fields, 4))
    trans = rng.normal(0.0, 0.3, size=(n_layouts, n_fields, 3))
    scale = rng.normal(1.0, 0.3, size=(n_layouts, n_fields, 1))
    return LayoutSet.from_array(np.concatenate([quat, trans, scale], axis=-1))


def sample_layout(n_layouts: int | LayoutSet, rng: np.random.Generator) -> int:
    n = n_layouts.n_layouts if isinstance(n_layouts, LayoutSet) else int(n_layouts)
    if n < 1:
        raise ValueError("need at least one layout")
    return int(rng.integers(0, n))


def layout_key(n: int, k: int) -> str:
    return f"layout/{n}/{k}"


def field_key(k: int, name: str = "") -> str:
    return f"field{k}/{name}"


class SceneModel:
    """K fields plus N layouts, with every learnable scalar held in one ParamStore.

    Field weight arrays are shared with the store, so optimizer updates are
    visible to the fields directly.
    """

    def __init__(self, fields: Sequence, layout_set: LayoutSet, layout_lr_mult: float = 10.0):
        if len(fields) < 1:
            raise ValueError("need K >= 1 fields")
        if layout_set.n_fields != len(fields):
            raise ValueError(f"layout set has K={layout_set.n_fields}, model has {len(fields)} fields")
        self.fields = list(fields)
        self.store = D.ParamStore()
        for k, f in enumerate(self.fields):
            for name in list(f.params):
                f.params[name] = self.store.add(field_key(k, name), f.params[name])
        arr = layout_set.to_array()
        for n in range(arr.shape[0]):
            for k in range(arr.shape[1]):
                self.store.add(layout_key(n, k), arr[n, k], lr_mult=layout_lr_mult)

    @property
    def n_fields(self) -> int:
        return len(self.fields)

    @property
    def n_layouts(self) -> int:
        return sum(1 for name in self.store if name.startswith("layout/")) // self.n_fields

    @property
    def layout_set(self) -> LayoutSet:
        return LayoutSet.from_array(self.layout_array())

    def layout_array(self) -> np.ndarray:
        return np.array([[self.store[layout_key(n, k)] for k in range(self.n_fields)]
                         for n in range(self.n_layouts)])

    def set_layout(self, n: int, k: int, T: RigidScaleTransform) -> None:
        self.store.set(layout_key(n, k), T.to_vector())

    def transform(self, n: int, k: int) -> RigidScaleTransform:
        return RigidScaleTransform.from_vector(self.store[layout_key(n, k)])

    def layout_scalar_count(self) -> int:
        return self.store.count("layout/")

    def freeze_field(self, k: int, frozen: bool = True) -> None:
        if self.store.names(field_key(k)):
            self.store.freeze(field_key(k), frozen)

    def freeze_transform(self, n: int, k: int, frozen: bool = True) -> None:
        self.store.freeze(layout_key(n, k), frozen)

    def freeze_layouts(self, frozen: bool = True) -> None:
        self.store.freeze("layout/", frozen)

    def field_params(self, k: int, params: Mapping | None = None) -> Mapping | None:
        if params is None:
            return None
        prefix = field_key(k)
        return {name[len(prefix):]: v for name, v in params.items() if name.startswith(prefix)}

    def set_blob_scale(self, scale: float) -> None:
        for f in self.fields:
            if hasattr(f, "blob_scale"):
                f.blob_scale = float(scale)


def combine(results: Sequence[FieldQueryResult]) -> FieldQueryResult:
    """Sum densities; albedo is the density-weighted average (0 where the sum vanishes)."""
    if not results:
        raise ValueError("combine needs at least one field result")
    total = results[0].density
    for r in results[1:]:
        total = D.add(total, r.density)
    keep = (np.asarray(D.value_of(total)) > DIV_EPS).astype(np.float64)
    # where keep == 0 the denominator becomes total + 1, so weights are finite and get zeroed
    denom = D.add(total, 1.0 - keep)
    albedo = None
    for r in results:
        w = D.mul(D.div(r.density, denom), keep)
        term = D.mul(D.reshape(w, D.value_of(w).shape + (1,)), r.albedo)
        albedo = term if albedo is None else D.add(albedo, term)
    return FieldQueryResult(total, albedo)


def sample_points(origins, directions, ts):
    """``o + t d`` for rays ``(R, 3)`` and sample positions ``(R, S)`` -> ``(R*S, 3)``."""
    R, S = np.shape(ts)
    pts = D.add(D.reshape(origins, (R, 1, 3)), D.mul(np.reshape(ts, (R, S, 1)), D.reshape(directions, (R, 1, 3))))
    return D.reshape(pts, (R * S, 3))


def composite_points(model: SceneModel, n: int, origins, directions, ts, params: Mapping | None = None):
    """Query every field along its transformed rays under layout ``n``.

    Returns the combined result plus the list of per-field results, all over
    the flattened ``(R*S,)`` sample grid.
    """
    if not 0 <= n < model.n_layouts:
        raise IndexError(f"layout index {n} outside [0, {model.n_layouts})")
    per_field = []
    for k, f in enumerate(model.fields):
        T = model.store[layout_key(n, k)] if params is None else params[layout_key(n, k)]
        o_k, d_k = transform_rays(origins, directions, T)
        per_field.append(f.query(sample_points(o_k, d_k, ts), model.field_params(k, params)))
    return combine(per_field), per_field


def composite_query(model: SceneModel, n: int, ray: Ray, t: float):
    """Single-point version of :func:`composite_points`; returns (result, per-field densities)."""
    out, per_field = composite_points(
        model, n, np.reshape(ray.origin, (1, 3)), np.reshape(ray.direction, (1, 3)), np.array([[t]], dtype=float)
    )
    res = FieldQueryResult(float(np.asarray(out.density)[0]), np.asarray(out.albedo)[0])
    return res, [float(np.asarray(r.density)[0]) for r in per_field]


class PlacedFields:
    """World-space view of some fields under fixed transforms, queryable like a field.

    ``PlacedFields.from_model(model, n, ks)`` poses fields ``ks`` (default all)
    with layout ``n``; useful for rasterizing or scoring a layout in world space.
    """

    def __init__(self, fields: Sequence, transforms: Sequence):
        if len(fields) != len(transforms) or not fields:
            raise ValueError("need one transform per field and at least one field")
        self.fields = list(fields)
        self.transforms = [np.asarray(t.to_vector() if isinstance(t, RigidScaleTransform) else t, dtype=np.float64)
                           for t in transforms]
        self.params: dict = {}

    @classmethod
    def from_model(cls, model: SceneModel, n: int = 0, ks: Sequence[int] | None = None) -> "PlacedFields":
        ks = range(model.n_fields) if ks is None else ks
        return cls([model.fields[k] for k in ks], [model.store[layout_key(n, k)] for k in ks])

    def query(self, mu, params=None) -> FieldQueryResult:
        return combine([f.query(transform_points(mu, T)) for f, T in zip(self.fields, self.transforms)])
