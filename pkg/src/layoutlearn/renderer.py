"""Cameras, pinhole rays, and stratified emission-absorption rendering."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import diff as D
from .compositor import SceneModel, combine, composite_points, sample_points


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Camera:
    """Orbit camera looking at ``look_at``.

    Elevation is measured so that negative angles place the camera above the
    scene (``z`` up): ``pos = look_at + r (cos e cos a, cos e sin a, -sin e)``.
    """

    azimuth: float
    elevation: float
    radius: float = 3.0
    fov_y: float = 40.0
    look_at: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.radius <= 0:
            raise ConfigError("camera radius must be positive")
        if not 0 < self.fov_y < 180:
            raise ConfigError("fov_y must lie in (0, 180) degrees")

    @property
    def position(self) -> np.ndarray:
        az, el = np.deg2rad(self.azimuth), np.deg2rad(self.elevation)
        offset = self.radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), -np.sin(el)])
        return np.asarray(self.look_at, dtype=np.float64) + offset


@dataclass(frozen=True)
class CameraRanges:
    azimuth: tuple = (0.0, 360.0)
    elevation: tuple = (-90.0, 0.0)
    radius: float = 3.0
    fov_y: float = 40.0
    # when set, cameras are drawn uniformly from these (azimuth, elevation) pairs
    views: tuple | None = None


@dataclass(frozen=True)
class RenderConfig:
    width: int = 64
    height: int = 64
    samples_per_ray: int = 64
    near: float = 0.1
    far: float = 6.0
    shading: str = "albedo"  # or "textureless"
    background: object = "random"  # "random" or an RGB triple

    def __post_init__(self):
        if self.near >= self.far:
            raise ConfigError("near must be < far")
        if self.samples_per_ray < 2:
            raise ConfigError("need at least 2 samples per ray")
        if self.width < 1 or self.height < 1:
            raise ConfigError("image size must be positive")
        if self.shading not in ("albedo", "textureless"):
            raise ConfigError(f"unknown shading {self.shading!r}")


@dataclass
class RenderOutput:
    rgb: object  # (H, W, 3)
    alpha: object  # (H, W)
    per_field_alpha: list = field(default_factory=list)  # K x (H, W)
    background: np.ndarray | None = None

    def numpy(self) -> "RenderOutput":
        pf = [np.asarray(D.value_of(a)) for a in self.per_field_alpha]
        return RenderOutput(
            np.asarray(D.value_of(self.rgb)),
            np.asarray(D.value_of(self.alpha)),
            np.stack(pf) if pf else np.zeros((0,) + np.shape(D.value_of(self.alpha))),
            self.background,
        )


def sample_camera(rng: np.random.Generator, ranges: CameraRanges = CameraRanges()) -> Camera:
    if ranges.views is not None:
        if len(ranges.views) == 0:
            raise ConfigError("empty view list")
        az, el = ranges.views[int(rng.integers(0, len(ranges.views)))]
        return Camera(float(az), float(el), ranges.radius, ranges.fov_y)
    (a0, a1), (e0, e1) = ranges.azimuth, ranges.elevation
    if a0 > a1 or e0 > e1:
        raise ConfigError(f"empty camera range: azimuth {ranges.azimuth}, elevation {ranges.elevation}")
    az = rng.uniform(a0, a1)
    el = rng.uniform(e0, e1)
    return Camera(float(az), float(el), ranges.radius, ranges.fov_y)


def camera_basis(camera: Camera):
    pos = camera.position
    fwd = np.asarray(camera.look_at, dtype=np.float64) - pos
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, [0.0, 0.0, 1.0])
    if np.linalg.norm(right) < 1e-9:
        # looking straight down/up: fall back to the azimuth tangent
        az = np.deg2rad(camera.azimuth)
        right = np.array([-np.sin(az), np.cos(az), 0.0])
    right /= np.linalg.norm(right)
    up = np.cross(right, fwd)
    return pos, fwd, right, up


def generate_rays(camera: Camera, width: int, height: int):
    """Pinhole rays through pixel centres, row-major from the top-left pixel.

    Returns ``(origins, directions)`` each of shape ``(height * width, 3)`` with
    unit directions.
    """
    pos, fwd, right, up = camera_basis(camera)
    tan = np.tan(np.deg2rad(camera.fov_y) / 2.0)
    aspect = width / height
    xs = (2.0 * (np.arange(width) + 0.5) / width - 1.0) * tan * aspect
    ys = (1.0 - 2.0 * (np.arange(height) + 0.5) / height) * tan
    gx, gy = np.meshgrid(xs, ys)
    dirs = fwd[None, None, :] + gx[..., None] * right[None, None, :] + gy[..., None] * up[None, None, :]
    dirs = dirs.reshape(-1, 3)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(pos, dirs.shape).copy()
    return origins, dirs


def stratified_samples(n_rays: int, cfg: RenderConfig, rng: np.random.Generator | None):
    """One jittered sample per equal-width bin; ``rng=None`` takes bin midpoints.

    Returns ``(ts, deltas)`` of shape ``(n_rays, S)``; ``deltas`` are the gaps to
    the next sample and the last one runs to ``far``.
    """
    S = cfg.samples_per_ray
    edges = np.linspace(cfg.near, cfg.far, S + 1)
    width = edges[1:] - edges[:-1]
    jitter = np.full((n_rays, S), 0.5) if rng is None else rng.random((n_rays, S))
    ts = edges[:-1][None, :] + jitter * width[None, :]
    deltas = np.concatenate([ts[:, 1:] - ts[:, :-1], cfg.far - ts[:, -1:]], axis=1)
    return ts, deltas


_EXCL_CUMSUM: dict[int, np.ndarray] = {}


def _exclusive_cumsum_matrix(S: int) -> np.ndarray:
    if S not in _EXCL_CUMSUM:
        _EXCL_CUMSUM[S] = np.triu(np.ones((S, S)), k=1)
    return _EXCL_CUMSUM[S]


def accumulate(tau, deltas):
    """Per-sample weights ``T_i a_i`` and accumulated alpha for densities ``(R, S)``."""
    od = D.mul(tau, deltas)
    a = D.sub(1.0, D.exp(D.neg(od)))
    trans = D.exp(D.neg(D.matmul(od, _exclusive_cumsum_matrix(np.shape(deltas)[1]))))
    w = D.mul(trans, a)
    return w, D.sum_(w, axis=1)


def _resolve_background(cfg: RenderConfig, rng, background):
    if background is None:
        if isinstance(cfg.background, str):
            if cfg.background != "random":
                raise ConfigError(f"unknown background {cfg.background!r}")
            background = (rng if rng is not None else np.random.default_rng(0)).random(3)
        else:
            background = cfg.background
    return np.asarray(background, dtype=np.float64)


def render_rays(scene, layout: int, origins, dirs, ts, deltas, background, textureless: bool = False,
                params: Mapping | None = None, per_field: bool = True):
    """Render a batch of rays; returns ``(rgb (R,3), alpha (R,), [alpha_k (R,)])``."""
    R, S = np.shape(ts)
    if isinstance(scene, SceneModel):
        comp, fields = composite_points(scene, layout, origins, dirs, ts, params)
    else:
        fields = [scene.query(sample_points(origins, dirs, ts), params)]
        comp = combine(fields)
        per_field = False
    tau = D.reshape(comp.density, (R, S))
    w, acc = accumulate(tau, deltas)
    if textureless:
        color = D.reshape(D.sum_(w, axis=1), (R, 1))
    else:
        rho = D.reshape(comp.albedo, (R, S, 3))
        color = D.sum_(D.mul(D.reshape(w, (R, S, 1)), rho), axis=1)
    rgb = D.add(color, D.mul(D.reshape(D.sub(1.0, acc), (R, 1)), background))
    per_alpha = []
    if per_field:
        for res in fields:
            per_alpha.append(accumulate(D.reshape(res.density, (R, S)), deltas)[1])
    return rgb, acc, per_alpha


@dataclass
class _RaySetup:
    origins: np.ndarray
    dirs: np.ndarray
    ts: np.ndarray
    deltas: np.ndarray
    background: np.ndarray
    textureless: bool


def _setup(camera, cfg, rng, background, textureless) -> _RaySetup:
    origins, dirs = generate_rays(camera, cfg.width, cfg.height)
    ts, deltas = stratified_samples(origins.shape[0], cfg, rng)
    background = _resolve_background(cfg, rng, background)
    if textureless is None:
        textureless = cfg.shading == "textureless"
    return _RaySetup(origins, dirs, ts, deltas, background, bool(textureless))


def _chunks(n: int, size: int | None):
    size = n if not size else size
    return [slice(i, min(i + size, n)) for i in range(0, n, size)]


def _render_untaped(scene, layout, st: _RaySetup, cfg: RenderConfig, per_field: bool, chunk):
    rgbs, accs, pfs = [], [], []
    for sl in _chunks(st.origins.shape[0], chunk):
        rgb, acc, pf = render_rays(scene, layout, st.origins[sl], st.dirs[sl], st.ts[sl], st.deltas[sl],
                                   st.background, st.textureless, None, per_field)
        rgbs.append(rgb)
        accs.append(acc)
        pfs.append(pf)
    H, W = cfg.height, cfg.width
    per_alpha = [np.concatenate([p[k] for p in pfs]).reshape(H, W) for k in range(len(pfs[0]))]
    return RenderOutput(np.concatenate(rgbs).reshape(H, W, 3), np.concatenate(accs).reshape(H, W),
                        per_alpha, st.background)


DEFAULT_CHUNK = 2048


def render(
    scene,
    layout: int,
    camera: Camera,
    cfg: RenderConfig = RenderConfig(),
    rng: np.random.Generator | None = None,
    params: Mapping | None = None,
    background=None,
    textureless: bool | None = None,
    per_field: bool = True,
    chunk: int | None = DEFAULT_CHUNK,
) -> RenderOutput:
    """Render a :class:`SceneModel` under ``layout`` (or a bare field, ignoring ``layout``).

    With ``params`` (store names mapped to taped handles) the whole image is
    rendered on one tape; otherwise rays are processed untaped in chunks.  The
    random background is drawn from ``rng`` after the sample jitter.
    """
    st = _setup(camera, cfg, rng, background, textureless)
    if params is None:
        return _render_untaped(scene, layout, st, cfg, per_field, chunk)
    H, W = cfg.height, cfg.width
    rgb, acc, pf = render_rays(scene, layout, st.origins, st.dirs, st.ts, st.deltas, st.background,
                               st.textureless, params, per_field)
    return RenderOutput(D.reshape(rgb, (H, W, 3)), D.reshape(acc, (H, W)),
                        [D.reshape(a, (H, W)) for a in pf], st.background)


def render_backprop(
    scene: SceneModel,
    layout: int,
    camera: Camera,
    cfg: RenderConfig,
    rng: np.random.Generator | None,
    loss_fn: Callable[[RenderOutput], object],
    background=None,
    textureless: bool | None = None,
    chunk: int | None = DEFAULT_CHUNK,
):
    """Render, evaluate an image-space loss, and accumulate parameter gradients.

    The image is first rendered untaped; ``loss_fn`` then runs on a small tape
    whose leaves are the rendered maps, giving per-pixel upstream gradients.
    Each ray chunk is re-rendered on its own tape and back-propagated with those
    gradients, in chunk order, into ``scene.store.grads``.  Peak memory is set by
    the chunk size, not the image size.

    Returns ``(loss value, RenderOutput of arrays, aux)`` where ``aux`` is
    whatever ``loss_fn`` returned besides the loss (``loss_fn`` may return a
    scalar or a ``(scalar, aux)`` pair).
    """
    st = _setup(camera, cfg, rng, background, textureless)
    R = st.origins.shape[0]
    if not chunk or R <= chunk:
        # small image: one taped pass is cheaper than forward + replay
        tape = D.Tape()
        params = scene.store.attach(tape)
        rgb, acc, pf = render_rays(scene, layout, st.origins, st.dirs, st.ts, st.deltas, st.background,
                                   st.textureless, params, True)
        H, W = cfg.height, cfg.width
        taped = RenderOutput(D.reshape(rgb, (H, W, 3)), D.reshape(acc, (H, W)),
                             [D.reshape(a, (H, W)) for a in pf], st.background)
        res = loss_fn(taped)
        loss, aux = res if isinstance(res, tuple) else (res, None)
        if isinstance(loss, D.Var):
            D.backward(tape, loss, scene.store)
        return float(np.asarray(D.value_of(loss))), taped.numpy(), aux

    out = _render_untaped(scene, layout, st, cfg, True, chunk)

    img_tape = D.Tape()
    rgb_v = img_tape.leaf(out.rgb)
    alpha_v = img_tape.leaf(out.alpha)
    pf_v = [img_tape.leaf(a) for a in out.per_field_alpha]
    res = loss_fn(RenderOutput(rgb_v, alpha_v, pf_v, st.background))
    loss, aux = res if isinstance(res, tuple) else (res, None)
    if not isinstance(loss, D.Var):
        return float(np.asarray(loss)), out, aux
    grads = D.backward(img_tape, loss)
    g_rgb = grads[rgb_v.index]
    g_alpha = grads[alpha_v.index]
    g_pf = [grads[v.index] for v in pf_v]
    need_pf = any(g is not None for g in g_pf)

    flat = lambda g, shape: None if g is None else g.reshape(shape)
    g_rgb, g_alpha = flat(g_rgb, (R, 3)), flat(g_alpha, (R,))
    g_pf = [flat(g, (R,)) for g in g_pf]
    for sl in _chunks(R, chunk):
        tape = D.Tape()
        params = scene.store.attach(tape)
        rgb, acc, pf = render_rays(scene, layout, st.origins[sl], st.dirs[sl], st.ts[sl], st.deltas[sl],
                                   st.background, st.textureless, params, need_pf)
        terms = []
        if g_rgb is not None:
            terms.append(D.sum_(D.mul(rgb, g_rgb[sl])))
        if g_alpha is not None:
            terms.append(D.sum_(D.mul(acc, g_alpha[sl])))
        for a_k, g in zip(pf, g_pf):
            if g is not None:
                terms.append(D.sum_(D.mul(a_k, g[sl])))
        surrogate = terms[0]
        for t in terms[1:]:
            surrogate = D.add(surrogate, t)
        if isinstance(surrogate, D.Var):
            D.backward(tape, surrogate, scene.store)
    return float(loss.value), out, aux


def turntable(n_views: int = 8, elevation: float = -30.0) -> list[tuple[float, float]]:
    return [(360.0 * i / n_views, elevation) for i in range(n_views)]
