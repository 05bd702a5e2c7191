"""``layoutlearn`` command line: generate | arrange | decompose | render | eval | gradcheck."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import diff as D
from .bridge import Bridge, BridgeConfig, BridgeError
from .compositor import PlacedFields, SceneModel, init_layout_set
from .eval import EvalConfig, GroundTruthScene, ImageScorer, IouScorer, evaluate, multi_seed_eval
from .field import MlpField
from .io import (
    CheckpointError,
    ConfigFileError,
    RunConfig,
    VoxelParseError,
    export_image,
    import_voxel,
    load_checkpoint,
    load_config,
    read_image,
    save_checkpoint,
)
from .losses import LossWeights, MockGuidance, recon_loss
from .renderer import Camera, CameraRanges, ConfigError, RenderConfig, render, turntable
from .trainer import SceneTarget, StepAborted, TrainConfig, run_mode

logger = logging.getLogger("layoutlearn")

TRAIN_COMMANDS = ("generate", "arrange", "decompose")


class CliError(RuntimeError):
    pass


# building runs from a config

def render_config(rc: RunConfig) -> RenderConfig:
    r = rc.section("render")
    bg = r.get("background", "random")
    return RenderConfig(
        width=r.get("width", 64), height=r.get("height", 64), samples_per_ray=r.get("samples_per_ray", 64),
        near=r.get("near", 0.1), far=r.get("far", 6.0), background=bg if isinstance(bg, str) else tuple(bg),
    )


def camera_ranges(rc: RunConfig) -> CameraRanges:
    r = rc.section("render")
    views = r.get("views")
    return CameraRanges(
        azimuth=tuple(r.get("azimuth", (0.0, 360.0))), elevation=tuple(r.get("elevation", (-90.0, 0.0))),
        radius=r.get("radius", 3.0), fov_y=r.get("fov_y", 40.0),
        views=None if views is None else tuple(tuple(v) for v in views),
    )


def train_config(rc: RunConfig, mode: str, seed: int | None = None) -> TrainConfig:
    t = rc.section("train")
    if "mode" in t and t["mode"] != mode and not (mode == "generate" and t["mode"] == "conditional"):
        raise ConfigFileError(f"config mode {t['mode']!r} conflicts with command {mode!r}")
    mode = t.get("mode", mode)
    fr = rc.section("freeze")
    weights = LossWeights(**rc.section("loss"))
    kw = {k: t[k] for k in ("steps", "peak_lr", "start_lr", "end_lr", "warmup_steps", "blob_decay_steps",
                            "layout_lr_multiplier", "textureless_prob") if k in t}
    return TrainConfig(
        **kw, mode=mode, seed=t.get("seed", 0) if seed is None else seed,
        n_fields=rc.get("scene", "k", 3), n_layouts=rc.get("scene", "n_layouts", 4),
        prompt=rc.get("scene", "prompt", ""), weights=weights, render=render_config(rc), cameras=camera_ranges(rc),
        cfg_strength=rc.get("guidance", "cfg"),
        freeze_fields=tuple(fr.get("fields", ())),
        freeze_transforms=tuple(tuple(x) if isinstance(x, list) else x for x in fr.get("transforms", ())),
    )


def model_rng(seed: int) -> np.random.Generator:
    # separate stream from the trainer's default_rng(seed)
    return np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])


def load_assets(rc: RunConfig) -> list:
    return [import_voxel(rc.base_dir / p) for p in rc.get("scene", "assets", [])]


def build_model(rc: RunConfig, seed: int, assets: list | None = None) -> SceneModel:
    """Assets first (from ``[scene] assets``), then freshly initialised MLP fields up to K."""
    K = rc.get("scene", "k", 3)
    N = rc.get("scene", "n_layouts", 4)
    assets = load_assets(rc) if assets is None else assets
    if len(assets) > K:
        raise ConfigFileError(f"{len(assets)} assets but k = {K}")
    f = rc.section("field")
    rng = model_rng(seed)
    fields = list(assets) + [
        MlpField(f.get("octaves", 6), f.get("hidden", 64), f.get("depth", 4), f.get("blob_amplitude", 5.0),
                 f.get("blob_sigma", 0.2), f.get("density_bias", -3.0), rng=rng)
        for _ in range(K - len(assets))
    ]
    return SceneModel(fields, init_layout_set(N, K, rng), layout_lr_mult=rc.get("train", "layout_lr_multiplier", 10.0))


def build_provider(rc: RunConfig):
    g = rc.section("guidance")
    kind = g.get("provider", "mock")
    if kind == "mock":
        if "target_image" in g:
            return MockGuidance(read_image(rc.path("guidance", "target_image")))
        if "target_volume" in g:
            return MockGuidance(SceneTarget(import_voxel(rc.path("guidance", "target_volume"))))
        raise ConfigFileError("mock guidance needs [guidance] target_image or target_volume")
    if kind == "bridge":
        if "endpoint" not in g:
            raise ConfigFileError("bridge guidance needs [guidance] endpoint")
        bc = BridgeConfig(g["endpoint"], g.get("timeout", 30.0), g.get("max_retries", 2), g.get("transport", "tcp"))
        return Bridge(bc, default_cfg=g.get("cfg", 200.0))
    raise ConfigFileError(f"unknown guidance provider {kind!r}")


def train_from_config(rc: RunConfig, mode: str, seed: int | None = None, log=None) -> tuple:
    cfg = train_config(rc, mode, seed)
    model = build_model(rc, cfg.seed)
    recon = None
    if cfg.mode == "decompose":
        target = rc.path("scene", "target_volume")
        if target is None:
            raise ConfigFileError("decompose needs [scene] target_volume")
        recon = SceneTarget(import_voxel(target))
    provider = build_provider(rc)
    try:
        trainer = run_mode(model, cfg, provider, recon_target=recon, log=log)
    finally:
        if isinstance(provider, Bridge):
            provider.close()
    return model, trainer


def write_turntables(model: SceneModel, out: Path, cfg: RenderConfig) -> list[Path]:
    cfg = replace(cfg, background=(1.0, 1.0, 1.0))
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for az, el in turntable():
        cam = Camera(az, el)
        for n in range(model.n_layouts):
            r = render(model, n, cam, cfg, rng=None)
            p = out / f"layout{n}_az{int(az):03d}.png"
            export_image(np.clip(r.rgb, 0, 1), p)
            written.append(p)
            if n == 0:
                for k, a in enumerate(r.per_field_alpha):
                    p = out / f"field{k}_alpha_az{int(az):03d}.png"
                    export_image(np.clip(a, 0, 1), p)
                    written.append(p)
        for k in range(model.n_fields):
            p = out / f"field{k}_az{int(az):03d}.png"
            export_image(np.clip(render_field(model, 0, k, cam, cfg), 0, 1), p)
            written.append(p)
    return written


def render_field(model: SceneModel, n: int, k: int, cam: Camera, cfg: RenderConfig) -> np.ndarray:
    return render(PlacedFields.from_model(model, n, [k]), 0, cam, cfg, rng=None, per_field=False).rgb


# commands

def cmd_train(args, mode: str) -> int:
    rc = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "log.jsonl").open("w") as log:
        model, trainer = train_from_config(rc, mode, args.seed, log)
    save_checkpoint(out / "checkpoint.layl", model, trainer.optimizer.state_vector())
    write_turntables(model, out / "turntable", render_config(rc))
    print(f"wrote {out / 'checkpoint.layl'}")
    return 0


def cmd_render(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    cfg = render_config(load_config(args.config)) if args.config else RenderConfig()
    cfg = replace(cfg, background=(1.0, 1.0, 1.0)) if isinstance(cfg.background, str) else cfg
    if not 0 <= args.layout < model.n_layouts:
        raise CliError(f"layout {args.layout} outside [0, {model.n_layouts})")
    cam = Camera(args.az, args.el)
    if args.per_field is not None:
        if not 0 <= args.per_field < model.n_fields:
            raise CliError(f"field {args.per_field} outside [0, {model.n_fields})")
        img = render_field(model, args.layout, args.per_field, cam, cfg)
    else:
        img = render(model, args.layout, cam, cfg, rng=None, per_field=False).rgb
    export_image(np.clip(img, 0, 1), args.out)
    print(f"wrote {args.out}")
    return 0


def eval_config(rc: RunConfig) -> EvalConfig:
    e = rc.section("eval")
    n = e.get("num_views", 12)
    return EvalConfig(num_views=n, view_spacing=360.0 / n, elevation=e.get("elevation", -30.0),
                      seeds=e.get("seeds", 3), scorer=e.get("scorer", "iou-oracle"),
                      grid_resolution=e.get("grid_resolution", 64), density_threshold=e.get("density_threshold", 0.5))


def eval_targets(rc: RunConfig, ecfg: EvalConfig):
    if ecfg.scorer == "iou-oracle":
        objects = [import_voxel(rc.base_dir / p) for p in rc.get("eval", "objects", [])]
        if not objects:
            raise ConfigFileError("iou-oracle scoring needs [eval] objects")
        ident = np.array([0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0])
        return GroundTruthScene(objects, [[ident] * len(objects)]), IouScorer()
    texts = rc.get("eval", "texts", [])
    if not texts:
        raise ConfigFileError("bridge scoring needs [eval] texts")
    return texts, ImageScorer(build_provider(rc))


def cmd_eval(args) -> int:
    rc = load_config(args.config)
    ecfg = eval_config(rc)
    targets, scorer = eval_targets(rc, ecfg)
    try:
        if args.ckpt:
            model, _ = load_checkpoint(args.ckpt)
            result = evaluate(model, targets, scorer, ecfg, seed=-1)
            report = {"per_seed": [result.to_dict()], "selected_seed": result.seed}
        else:
            mode = rc.get("train", "mode", "generate")
            train = lambda s: train_from_config(rc, mode if mode != "conditional" else "generate", s)[0]
            base = rc.get("train", "seed", 0) if args.seed is None else args.seed
            report = multi_seed_eval(train, targets, scorer, ecfg,
                                     seeds=[base + i for i in range(ecfg.seeds)]).to_dict()
    finally:
        if isinstance(scorer, ImageScorer) and isinstance(scorer.provider, Bridge):
            scorer.provider.close()
    Path(args.out).write_text(json.dumps(report, indent=2) + "\n")
    print(f"wrote {args.out}")
    return 0


def gradcheck_problem(K: int = 2, N: int = 2, size: int = 8, samples: int = 8, seed: int = 0,
                      hidden: int = 16, depth: int = 2, octaves: int = 2):
    """Small scene plus an MSE-to-target loss over two views; returns ``(model, loss_fn)``."""
    rng = np.random.default_rng(seed)
    fields = [MlpField(octaves, hidden, depth, blob_amplitude=0.0, density_bias=0.5, rng=rng) for _ in range(K)]
    model = SceneModel(fields, init_layout_set(N, K, rng))
    cfg = RenderConfig(size, size, samples, near=1.5, far=4.5, background=(0.3, 0.5, 0.7))
    views = [(n % N, Camera(37.0 + 90.0 * n, -25.0)) for n in range(max(N, 2))]
    targets = [rng.random((size, size, 3)) for _ in views]

    def loss_fn(params):
        total = 0.0
        for (n, cam), tgt in zip(views, targets):
            out = render(model, n, cam, cfg, rng=None, params=params, per_field=False)
            total = D.add(total, recon_loss(out.rgb, tgt, 1.0))
        return total

    return model, loss_fn


def cmd_gradcheck(args) -> int:
    if args.config:
        rc = load_config(args.config)
        K, N = rc.get("scene", "k", 2), rc.get("scene", "n_layouts", 2)
    else:
        K, N = 2, 2
    seed = 0 if args.seed is None else args.seed
    model, loss_fn = gradcheck_problem(K, N, seed=seed)
    rng = np.random.default_rng(seed + 1)
    indices = sample_field_indices(model, args.field_samples, rng)
    report = D.finite_diff_check(loss_fn, model.store, h=1e-4, indices=indices)
    for line in report.lines():
        print(line)
    print(f"worst relative error {report.worst:.3e} (tolerance {args.tol:g})")
    if not report.passes(args.tol):
        print(f"error: gradient check failed: {report.worst:.3e} > {args.tol:g}", file=sys.stderr)
        return 1
    return 0


def sample_field_indices(model: SceneModel, n_samples: int, rng: np.random.Generator) -> dict:
    """All layout scalars plus ``n_samples`` field weights drawn uniformly without replacement."""
    indices = {}
    pool = []
    for name in model.store:
        if name.startswith("layout/"):
            indices[name] = list(range(model.store[name].size))
        else:
            pool += [(name, i) for i in range(model.store[name].size)]
    pick = rng.choice(len(pool), size=min(n_samples, len(pool)), replace=False)
    for j in sorted(pick):
        name, i = pool[j]
        indices.setdefault(name, []).append(i)
    return indices


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="layoutlearn", description="Compositional 3D scene learning with layouts.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in TRAIN_COMMANDS:
        p = sub.add_parser(name, help=f"train in {name} mode")
        p.add_argument("--config", required=True)
        p.add_argument("--out", default="run")
        p.add_argument("--seed", type=int)
    p = sub.add_parser("render", help="render a view from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--layout", type=int, default=0)
    p.add_argument("--az", type=float, default=0.0)
    p.add_argument("--el", type=float, default=-30.0)
    p.add_argument("--per-field", type=int, metavar="K")
    p.add_argument("--config")
    p.add_argument("--out", default="view.png")
    p = sub.add_parser("eval", help="score disentanglement")
    p.add_argument("--config", required=True)
    p.add_argument("--ckpt")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="eval.json")
    p = sub.add_parser("gradcheck", help="compare taped gradients against finite differences")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--field-samples", type=int, default=200)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command in TRAIN_COMMANDS:
            return cmd_train(args, args.command)
        return {"render": cmd_render, "eval": cmd_eval, "gradcheck": cmd_gradcheck}[args.command](args)
    except (ConfigFileError, ConfigError, CheckpointError, VoxelParseError, CliError, BridgeError, StepAborted,
            D.ContractError, OSError, ValueError) as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
