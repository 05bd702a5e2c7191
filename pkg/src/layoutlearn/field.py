"""Radiance fields: learnable MLP, analytic Gaussian blob, and voxel grid.

All three expose ``query(mu, params=None) -> FieldQueryResult`` over a batch of
local-frame points ``mu`` of shape ``(P, 3)``.  ``mu`` may be a
:class:`~layoutlearn.diff.Var`, in which case the result is differentiable with
respect to the points (and, for the MLP, its weights when ``params`` holds
taped handles).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diff as D

BOUND_RADIUS = 1.5
BOUND_TAPER = 0.1


@dataclass
class FieldQueryResult:
    density: object  # (P,)
    albedo: object  # (P, 3)


def positional_encode(mu, n_octaves: int):
    """``[mu, sin(2^l pi mu), cos(2^l pi mu)]`` for ``l < n_octaves``; width ``3 + 6 L``."""
    if n_octaves < 0:
        raise ValueError("octave count must be >= 0")
    if n_octaves == 0:
        return mu
    # one sin/cos at the base frequency, then double-angle steps per octave
    s = D.sin(D.mul(np.pi, mu))
    c = D.cos(D.mul(np.pi, mu))
    feats = [mu, s, c]
    for _ in range(1, n_octaves):
        s, c = D.mul(2.0, D.mul(s, c)), D.sub(1.0, D.mul(2.0, D.mul(s, s)))
        feats += [s, c]
    return D.concat(feats, axis=1)


def blob_bias(mu, amplitude: float, sigma: float):
    """Gaussian density bump ``A exp(-|mu|^2 / 2 sigma^2)`` centred on the local origin."""
    if sigma <= 0:
        raise ValueError("blob sigma must be positive")
    r2 = D.sum_(D.mul(mu, mu), axis=-1)
    return D.mul(amplitude, D.exp(D.mul(r2, -0.5 / sigma**2)))


def bound_window(mu, radius: float = BOUND_RADIUS, taper: float = BOUND_TAPER):
    """1 inside ``radius - taper``, 0 outside ``radius``, C1 smoothstep between."""
    r2 = D.sum_(D.mul(mu, mu), axis=-1)
    inner = (radius - taper) ** 2
    u = D.clip(D.div(D.sub(radius**2, r2), radius**2 - inner), 0.0, 1.0)
    return D.mul(D.mul(u, u), D.sub(3.0, D.mul(2.0, u)))


class MlpField:
    """Coordinate MLP: positional encoding, SiLU hidden layers, 4 outputs.

    Output 0 is raw density, shifted by a learnable ``density_bias`` and by the
    (decaying) initialization blob before the softplus; outputs 1..3 are albedo
    logits.  Density is zeroed outside the bounding sphere.
    """

    kind = "mlp"

    def __init__(
        self,
        n_octaves: int = 6,
        hidden: int = 64,
        depth: int = 4,
        blob_amplitude: float = 5.0,
        blob_sigma: float = 0.2,
        density_bias: float = -3.0,
        bound_radius: float = BOUND_RADIUS,
        rng: np.random.Generator | None = None,
        zero_weights: bool = False,
    ):
        if depth < 1 or hidden < 1:
            raise ValueError("need at least one hidden layer")
        self.n_octaves = int(n_octaves)
        self.hidden = int(hidden)
        self.depth = int(depth)
        self.blob_amplitude = float(blob_amplitude)
        self.blob_sigma = float(blob_sigma)
        self.bound_radius = float(bound_radius)
        # multiplies the blob amplitude; the trainer anneals it to 0
        self.blob_scale = 1.0
        rng = np.random.default_rng(0) if rng is None else rng
        widths = [3 + 6 * self.n_octaves] + [self.hidden] * self.depth + [4]
        self.params: dict[str, np.ndarray] = {}
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            std = np.sqrt(2.0 / (fan_in + fan_out))
            if i == len(widths) - 2:
                std *= 0.1
            w = np.zeros((fan_in, fan_out)) if zero_weights else rng.normal(0.0, std, (fan_in, fan_out))
            self.params[f"w{i}"] = w
            self.params[f"b{i}"] = np.zeros(fan_out)
        self.params["density_bias"] = np.array([float(density_bias)])

    @property
    def n_layers(self) -> int:
        return self.depth + 1

    def query(self, mu, params=None) -> FieldQueryResult:
        """Density and albedo at local points ``mu`` ``(P, 3)``.

        Points outside the bounding sphere skip the network: their density is
        exactly 0 and their albedo is reported as 0.
        """
        mu_v = np.asarray(D.value_of(mu))
        inside = np.einsum("ij,ij->i", mu_v, mu_v) < self.bound_radius**2
        if inside.all():
            return self._query_dense(mu, params)
        idx = np.flatnonzero(inside)
        # every outside point reads the appended zero row
        gather = np.full(mu_v.shape[0], idx.size, dtype=np.int64)
        gather[idx] = np.arange(idx.size)
        if idx.size == 0:
            P = mu_v.shape[0]
            return FieldQueryResult(np.zeros(P), np.zeros((P, 3)))
        res = self._query_dense(D.getitem(mu, idx), params)
        density = D.getitem(D.concat([res.density, np.zeros(1)]), gather)
        albedo = D.getitem(D.concat([res.albedo, np.zeros((1, 3))]), gather)
        return FieldQueryResult(density, albedo)

    def _query_dense(self, mu, params=None) -> FieldQueryResult:
        p = self.params if params is None else params
        h = positional_encode(mu, self.n_octaves)
        for i in range(self.n_layers):
            h = D.add(D.matmul(h, p[f"w{i}"]), p[f"b{i}"])
            if i < self.n_layers - 1:
                h = D.mul(h, D.sigmoid(h))
        raw_density = D.add(D.getitem(h, (slice(None), 0)), p["density_bias"])
        amp = self.blob_amplitude * self.blob_scale
        if amp != 0.0:
            raw_density = D.add(raw_density, blob_bias(mu, amp, self.blob_sigma))
        density = D.mul(D.softplus(raw_density), bound_window(mu, self.bound_radius))
        albedo = D.sigmoid(D.getitem(h, (slice(None), slice(1, 4))))
        return FieldQueryResult(density, albedo)

    # flat (de)serialization: a self-describing float64 header then weights
    def to_vector(self) -> np.ndarray:
        header = [0.0, self.n_octaves, self.hidden, self.depth, self.blob_amplitude,
                  self.blob_sigma, self.blob_scale, self.bound_radius]
        return np.concatenate([np.array(header)] + [self.params[k].ravel() for k in self.params])

    @classmethod
    def from_vector(cls, v: np.ndarray) -> "MlpField":
        _, L, hidden, depth, amp, sigma, scale, radius = v[:8]
        f = cls(int(L), int(hidden), int(depth), amp, sigma, 0.0, radius, zero_weights=True)
        f.blob_scale = float(scale)
        off = 8
        for k in f.params:
            n = f.params[k].size
            f.params[k] = v[off:off + n].reshape(f.params[k].shape).copy()
            off += n
        if off != v.size:
            raise ValueError(f"MLP blob has {v.size} floats, expected {off}")
        return f


class BlobField:
    """Isotropic Gaussian density with constant albedo."""

    kind = "blob"

    def __init__(self, center=(0.0, 0.0, 0.0), sigma: float = 1.0, amplitude: float = 1.0,
                 albedo=(1.0, 1.0, 1.0)):
        if sigma <= 0 or amplitude <= 0:
            raise ValueError("blob sigma and amplitude must be positive")
        self.center = np.asarray(center, dtype=np.float64)
        self.sigma = float(sigma)
        self.amplitude = float(amplitude)
        self.albedo = np.clip(np.asarray(albedo, dtype=np.float64), 0.0, 1.0)
        self.params: dict[str, np.ndarray] = {}

    def query(self, mu, params=None) -> FieldQueryResult:
        d = D.sub(mu, self.center)
        r2 = D.sum_(D.mul(d, d), axis=-1)
        density = D.mul(self.amplitude, D.exp(D.mul(r2, -0.5 / self.sigma**2)))
        P = D.value_of(mu).shape[0]
        return FieldQueryResult(density, np.broadcast_to(self.albedo, (P, 3)).copy())

    def to_vector(self) -> np.ndarray:
        return np.concatenate([[1.0], self.center, [self.sigma, self.amplitude], self.albedo])

    @classmethod
    def from_vector(cls, v: np.ndarray) -> "BlobField":
        if v.size != 9:
            raise ValueError(f"blob record has {v.size} floats, expected 9")
        return cls(v[1:4], v[4], v[5], v[6:9])


class VoxelField:
    """Trilinearly interpolated density/albedo grid with nodes on the bounds.

    ``density`` has shape ``(nx, ny, nz)`` and ``albedo`` ``(nx, ny, nz, 3)``.
    Points outside ``[lo, hi]`` on any axis have zero density.
    """

    kind = "voxel"

    def __init__(self, density, albedo, lo=(-1.0, -1.0, -1.0), hi=(1.0, 1.0, 1.0)):
        density = np.asarray(density, dtype=np.float64)
        albedo = np.asarray(albedo, dtype=np.float64)
        if density.ndim != 3 or min(density.shape) < 2:
            raise ValueError("density grid must be 3-D with at least 2 nodes per axis")
        if albedo.shape != density.shape + (3,):
            raise ValueError(f"albedo grid shape {albedo.shape} does not match {density.shape + (3,)}")
        if np.any(density < 0):
            raise ValueError("densities must be non-negative")
        self.density = density
        self.albedo = np.clip(albedo, 0.0, 1.0)
        self.lo = np.asarray(lo, dtype=np.float64)
        self.hi = np.asarray(hi, dtype=np.float64)
        if np.any(self.hi <= self.lo):
            raise ValueError("voxel bounds must satisfy lo < hi")
        self.params: dict[str, np.ndarray] = {}

    @property
    def resolution(self) -> tuple:
        return self.density.shape

    def node_positions(self) -> np.ndarray:
        axes = [np.linspace(self.lo[i], self.hi[i], n) for i, n in enumerate(self.resolution)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    @classmethod
    def from_field(cls, field, resolution=(32, 32, 32), lo=(-1.0,) * 3, hi=(1.0,) * 3) -> "VoxelField":
        """Rasterize any field's density/albedo at the grid nodes."""
        proto = cls(np.zeros((2, 2, 2)), np.zeros((2, 2, 2, 3)), lo, hi)
        proto.density = np.zeros(tuple(resolution))
        pts = proto.node_positions().reshape(-1, 3)
        res = field.query(pts)
        dens = np.asarray(res.density).reshape(tuple(resolution))
        alb = np.asarray(res.albedo).reshape(tuple(resolution) + (3,))
        return cls(dens, alb, lo, hi)

    def query(self, mu, params=None) -> FieldQueryResult:
        n = np.array(self.resolution)
        mu_v = np.asarray(D.value_of(mu))
        u = D.mul(D.sub(mu, self.lo), (n - 1) / (self.hi - self.lo))
        u_v = (mu_v - self.lo) * ((n - 1) / (self.hi - self.lo))
        inside = np.all((mu_v >= self.lo) & (mu_v <= self.hi), axis=-1)
        i0 = np.clip(np.floor(u_v).astype(np.int64), 0, n - 2)
        frac = D.sub(u, i0.astype(np.float64))
        fx, fy, fz = (D.getitem(frac, (slice(None), a)) for a in range(3))
        gx, gy, gz = D.sub(1.0, fx), D.sub(1.0, fy), D.sub(1.0, fz)
        density = 0.0
        albedo = 0.0
        for dx, wx in ((0, gx), (1, fx)):
            for dy, wy in ((0, gy), (1, fy)):
                wxy = D.mul(wx, wy)
                for dz, wz in ((0, gz), (1, fz)):
                    w = D.mul(wxy, wz)
                    ix, iy, iz = i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz
                    density = D.add(density, D.mul(w, self.density[ix, iy, iz]))
                    albedo = D.add(albedo, D.mul(D.reshape(w, (-1, 1)), self.albedo[ix, iy, iz]))
        mask = inside.astype(np.float64)
        density = D.mul(density, mask)
        return FieldQueryResult(density, D.clip(albedo, 0.0, 1.0))

    def to_vector(self) -> np.ndarray:
        nx, ny, nz = self.resolution
        head = np.array([2.0, nx, ny, nz, *self.lo, *self.hi])
        return np.concatenate([head, self.density.ravel(), self.albedo.ravel()])

    @classmethod
    def from_vector(cls, v: np.ndarray) -> "VoxelField":
        nx, ny, nz = (int(x) for x in v[1:4])
        lo, hi = v[4:7], v[7:10]
        m = nx * ny * nz
        if v.size != 10 + 4 * m:
            raise ValueError(f"voxel record has {v.size} floats, expected {10 + 4 * m}")
        dens = v[10:10 + m].reshape(nx, ny, nz)
        alb = v[10 + m:].reshape(nx, ny, nz, 3)
        return cls(dens, alb, lo, hi)


FIELD_KINDS = {0: MlpField, 1: BlobField, 2: VoxelField}


def field_from_vector(v: np.ndarray):
    try:
        cls = FIELD_KINDS[int(v[0])]
    except (KeyError, IndexError):
        raise ValueError(f"unknown field record tag {v[:1]}") from None
    return cls.from_vector(v)


def query(field, mu, params=None) -> FieldQueryResult:
    return field.query(mu, params)
