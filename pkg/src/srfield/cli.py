"""Command-line front end.

Every command reads one TOML config (``--config``), applies ``--set
section.key=value`` overrides on top, then applies the dedicated flags
(``--seed``, ``--cycles``, ...), and writes the fully resolved config to its
output directory as ``config.toml``.  Precedence, lowest first: built-in
defaults, config file, ``--set``, dedicated flags.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import copy
import csv
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
import tomli_w

from .errors import ParameterError, ShapeError, StateError

log = logging.getLogger("srfield")

OUTPUT_ROOT_ENV = "SRFIELD_OUTPUT_ROOT"
EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


class ConfigError(ValueError):
    pass


# -- configuration -----------------------------------------------------------------


def default_config() -> dict:
    from .denoisers import LayerSpec, TrainConfig
    from .distill import DistillConfig
    from .pipeline import I3dsConfig
    from .radiance import PretrainConfig, SyncConfig
    from .scenegen import DatasetConfig

    train = {k: v for k, v in asdict(TrainConfig()).items() if k != "layer"}
    pre = {k: v for k, v in asdict(PretrainConfig()).items() if k != "sync"}
    pre.update(steps=4000, rays_per_step=4096, learning_rate=0.05, n_samples=128, loss_norm="L1")
    pipe = {k: v for k, v in asdict(I3dsConfig()).items() if k not in ("rsd", "sync", "seed")}
    cfg = {
        "seed": 0,
        "dataset": asdict(DatasetConfig()),
        "schedule": {"T": 256, "beta_start": 1e-4, "beta_end": 2e-2, "kind": "linear"},
        "denoiser": {
            **train, **asdict(LayerSpec()),
            "corpus_first_seed": 1000, "corpus_scenes": 40, "corpus_views": 6,
            "corpus_lr_res": 24, "patch_lr": 8, "patches_per_view": 6,
        },
        "distill": asdict(DistillConfig()),
        "pretrain": pre,
        "sync": asdict(SyncConfig()),
        "pipeline": pipe,
        "upscale2d": {"methods": ["ancestral", "sds", "rsd"], "n_images": 4, "image_first_seed": 5000,
                      "lr_res": 24},
        "eval": {"n_views": 100, "views_shown": 4, "n_samples": 128},
    }
    return _plain(cfg)


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _check_type(key: str, default, value):
    if isinstance(default, bool) or isinstance(value, bool):
        ok = isinstance(value, bool) and isinstance(default, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float))
        value = float(value) if ok else value
    elif isinstance(default, int):
        ok = isinstance(value, int)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = isinstance(value, type(default))
    if not ok:
        raise ConfigError(f"{key}: expected {type(default).__name__}, got {value!r}")
    return value


def merge(base: dict, update: dict, prefix: str = "") -> dict:
    """Overlay ``update`` onto ``base``; unknown keys and type changes are errors."""
    out = copy.deepcopy(base)
    for k, v in update.items():
        key = f"{prefix}{k}"
        if k not in out:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(out[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"{key} is a section")
            out[k] = merge(out[k], v, key + ".")
        else:
            out[k] = _check_type(key, out[k], v)
    return out


def parse_override(text: str) -> dict:
    if "=" not in text:
        raise ConfigError(f"--set expects key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    node: dict = {}
    cur = node
    parts = key.strip().split(".")
    for p in parts[:-1]:
        cur[p] = {}
        cur = cur[p]
    cur[parts[-1]] = value
    return node


def resolve_config(path: str | None, overrides) -> dict:
    cfg = default_config()
    if path:
        try:
            with open(path, "rb") as f:
                cfg = merge(cfg, tomllib.load(f))
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for o in overrides or []:
        cfg = merge(cfg, parse_override(o))
    return cfg


def write_config(cfg: dict, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(tomli_w.dumps(cfg))


def _pick(cls, section: dict, **extra):
    names = {f.name for f in fields(cls)}
    return cls(**{k: v for k, v in section.items() if k in names}, **extra)


def build_schedule(cfg):
    from .diffusion import make_schedule

    s = cfg["schedule"]
    return make_schedule(s["T"], s["beta_start"], s["beta_end"], s["kind"])


def build_distill(cfg):
    from .distill import DistillConfig

    return _pick(DistillConfig, cfg["distill"])


def build_sync(cfg):
    from .radiance import SyncConfig

    return _pick(SyncConfig, cfg["sync"])


def build_pretrain(cfg):
    from .radiance import PretrainConfig, SyncConfig

    p = cfg["pretrain"]
    sync = SyncConfig(steps=p["steps"], rays_per_step=p["rays_per_step"], learning_rate=p["learning_rate"],
                      n_samples=p["n_samples"], loss_norm=p["loss_norm"], bg=tuple(cfg["sync"]["bg"]))
    return _pick(PretrainConfig, p, sync=sync)


def build_i3ds(cfg):
    from .pipeline import I3dsConfig

    return _pick(I3dsConfig, cfg["pipeline"], rsd=build_distill(cfg), sync=build_sync(cfg), seed=cfg["seed"])


def build_train(cfg):
    from .denoisers import LayerSpec, TrainConfig

    d = cfg["denoiser"]
    return _pick(TrainConfig, d, layer=_pick(LayerSpec, {**d, "dilations": tuple(d["dilations"])}))


def cond_kwargs(cfg, schedule) -> dict:
    from .denoisers import lr_noise_level

    p = cfg["pipeline"]
    return {"lr_noise_level": lr_noise_level(schedule, p["lr_noise_frac"]), "token": p["token"]}


# -- helpers -------------------------------------------------------------------------


def _write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(header), lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def _load_denoiser(path, schedule):
    from .denoisers import ConvDenoiser

    if not path:
        raise ConfigError("--denoiser is required")
    return ConvDenoiser.load(path, schedule_hash=schedule.hash)


def _load_dataset(path):
    from .scenegen import MultiViewDataset

    if not path:
        raise ConfigError("--data is required")
    return MultiViewDataset.load(path)


def tile(images, rows: int, cols: int) -> np.ndarray:
    """Lay out ``rows * cols`` equal-size ``(C, H, W)`` images row-major."""
    c, h, w = images[0].shape
    out = np.ones((c, rows * h, cols * w))
    for k, im in enumerate(images):
        r, q = divmod(k, cols)
        out[:, r * h:(r + 1) * h, q * w:(q + 1) * w] = im
    return out


# -- commands ------------------------------------------------------------------------


def cmd_gen_scene(args, cfg, out: Path) -> None:
    from .scenegen import DatasetConfig, gen_scene, make_dataset

    dcfg = _pick(DatasetConfig, cfg["dataset"])
    ds = make_dataset(gen_scene(cfg["seed"], dcfg.n_primitives), dcfg, with_hr=True)
    ds.save(out)
    write_config(cfg, out)


def cmd_train_denoiser(args, cfg, out: Path) -> None:
    from .denoisers import DenoiserTrainer
    from .scenegen import DatasetConfig, patch_corpus

    schedule = build_schedule(cfg)
    tcfg = build_train(cfg)
    d = cfg["denoiser"]
    seeds = range(d["corpus_first_seed"], d["corpus_first_seed"] + d["corpus_scenes"])
    hr, lr = patch_corpus(seeds, d["corpus_views"], d["corpus_lr_res"], d["patch_lr"], d["patches_per_view"],
                          _pick(DatasetConfig, cfg["dataset"]), rng_seed=cfg["seed"])
    write_config(cfg, out)
    trainer = DenoiserTrainer(hr, lr, schedule, tcfg, seed=cfg["seed"])
    ckpt = out / "denoiser.bin"
    val: list[float] = []
    if ckpt.exists():
        trainer.load_state(ckpt)  # raises StateError on a schedule mismatch
        with open(out / "losses.csv", newline="") as f:
            val = [float(r["val_loss"]) for r in csv.DictReader(f)][:trainer.epoch]
        log.info("resumed at epoch %d", trainer.epoch)
    target = tcfg.epochs if args.stop_after is None else min(tcfg.epochs, args.stop_after)
    while trainer.epoch < target:
        trainer.run_epoch()
        val.append(trainer.validation_loss())
        trainer.save_state(ckpt)
        _write_rows(out / "losses.csv", ("epoch", "train_loss", "val_loss"),
                    [{"epoch": i, "train_loss": a, "val_loss": b} for i, (a, b) in enumerate(zip(trainer.losses, val))])


def cmd_pretrain_lr(args, cfg, out: Path) -> None:
    from .radiance import pretrain_lr

    ds = _load_dataset(args.data)
    write_config(cfg, out)
    hist: list[float] = []
    fld = pretrain_lr(ds, build_pretrain(cfg), seed=np.random.SeedSequence([cfg["seed"], 0, 9]), history=hist)
    fld.quantized().save(out / "lr.field")
    _write_rows(out / "history.csv", ("step", "loss"), [{"step": i, "loss": v} for i, v in enumerate(hist)])


def cmd_upscale2d(args, cfg, out: Path) -> None:
    from .distill import METHODS, upscale2d_compare
    from .imageops import save_png
    from .metrics import UPSCALE_HEADER
    from .scenegen import DatasetConfig, patch_corpus

    u = cfg["upscale2d"]
    methods = u["methods"]
    bad = [m for m in methods if m not in METHODS]
    if bad or not methods:
        raise ConfigError(f"unknown method(s) {bad}; choose from {list(METHODS)}")
    schedule = build_schedule(cfg)
    den = _load_denoiser(args.denoiser, schedule)
    n = u["n_images"]
    if args.data:
        lr = np.stack(_load_dataset(args.data).lr_eval[:n])
    else:
        seeds = range(u["image_first_seed"], u["image_first_seed"] + n)
        _, lr = patch_corpus(seeds, 1, u["lr_res"], u["lr_res"], 1, _pick(DatasetConfig, cfg["dataset"]),
                             rng_seed=cfg["seed"])
    write_config(cfg, out)
    images, rows = upscale2d_compare(lr, methods, den, schedule, build_distill(cfg), seed=cfg["seed"],
                                     cond_kwargs=cond_kwargs(cfg, schedule))
    for m in methods:
        save_png(out / f"{m}.png", tile(np.clip(images[m], 0, 1), 1, len(lr)))
    _write_rows(out / "metrics.csv", UPSCALE_HEADER, rows)


def cmd_i3ds(args, cfg, out: Path) -> None:
    from .pipeline import i3ds_run
    from .radiance import VoxelField

    if cfg["pipeline"]["n_cycles"] < 1:
        raise ConfigError("--cycles must be at least 1")
    schedule = build_schedule(cfg)
    icfg = build_i3ds(cfg)
    den = _load_denoiser(args.denoiser, schedule)
    ds = _load_dataset(args.data)
    write_config(cfg, out)
    field_lr = VoxelField.load(args.field_lr) if args.field_lr else None
    i3ds_run(ds, den, schedule, icfg, run_dir=out, field_lr=field_lr, pretrain_cfg=build_pretrain(cfg),
             stop_after=args.stop_after)


def cmd_eval(args, cfg, out: Path) -> None:
    from . import metrics
    from .imageops import save_png
    from .pipeline import evaluate_field
    from .radiance import VoxelField

    ds = _load_dataset(args.data)
    if not args.run:
        raise ConfigError("--run is required")
    run = Path(args.run)
    ck = run / "ckpt"
    cycles = sorted(int(p.stem.split("_")[1]) for p in ck.glob("cycle_*.field"))
    entries = []
    if (ck / "lr.field").exists():
        entries.append(("lr", 0, ck / "lr.field"))
    if cycles:
        entries.append(("sr", cycles[-1], ck / f"cycle_{cycles[-1]}.field"))
    if not entries:
        raise StateError(f"{run} holds no field checkpoints")
    e = cfg["eval"]
    n_views = min(e["n_views"], len(ds.eval_cameras))
    write_config(cfg, out)
    rows, grids = [], []
    for name, cycle, path in entries:
        ev = evaluate_field(VoxelField.load(path), ds, e["n_samples"], tuple(cfg["sync"]["bg"]), n_views)
        rows.append({
            "scene": ds.scene.seed, "method": name, "cycle": cycle, "psnr": ev["psnr"], "ssim": ev["ssim"],
            "sharpness": float(np.median(ev["sharpness"])),
            "warped_consistency": "" if ev["warped_consistency"] is None else ev["warped_consistency"],
            "lr_consistency": ev["lr_consistency"], "coverage": ev["coverage"],
        })
        shown = ev["views"][:e["views_shown"]]
        grids.extend(np.clip(ev["renders"][v], 0, 1) for v in shown)
    _write_rows(out / "eval.csv", metrics.EVAL_HEADER, rows)
    save_png(out / "grid.png", tile(grids, len(entries), len(grids) // len(entries)))


COMMANDS = {
    "gen-scene": cmd_gen_scene,
    "train-denoiser": cmd_train_denoiser,
    "pretrain-lr": cmd_pretrain_lr,
    "upscale2d": cmd_upscale2d,
    "i3ds": cmd_i3ds,
    "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="srfield", description="Diffusion-prior super-resolution for voxel radiance fields")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="TOML config file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key, e.g. --set sync.steps=100")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help=f"output directory (default: ${OUTPUT_ROOT_ENV}/<command>)")
        sp.add_argument("--threads", type=int, help="cap worker threads")
        if name in ("pretrain-lr", "upscale2d", "i3ds", "eval"):
            sp.add_argument("--data", help="dataset directory")
        if name in ("upscale2d", "i3ds"):
            sp.add_argument("--denoiser", help="denoiser checkpoint")
        if name in ("train-denoiser", "i3ds"):
            sp.add_argument("--stop-after", type=int, help="stop after this many epochs/cycles")
        if name == "upscale2d":
            sp.add_argument("--methods", help="comma-separated subset of ancestral,sds,rsd")
        if name == "i3ds":
            sp.add_argument("--cycles", type=int)
            sp.add_argument("--field-lr", help="pretrained LR field (skips pretraining)")
        if name == "eval":
            sp.add_argument("--run", help="finished i3ds run directory")
            sp.add_argument("--views", type=int, help="number of evaluation poses")
    return p


def _apply_flags(args, cfg: dict) -> dict:
    flags: dict = {}
    if args.seed is not None:
        flags["seed"] = args.seed
    if getattr(args, "cycles", None) is not None:
        flags["pipeline"] = {"n_cycles": args.cycles}
    if getattr(args, "methods", None):
        flags["upscale2d"] = {"methods": [m.strip() for m in args.methods.split(",") if m.strip()]}
    if getattr(args, "views", None) is not None:
        flags["eval"] = {"n_views": args.views}
    return merge(cfg, flags)


def _output_dir(args) -> Path:
    if args.out:
        return Path(args.out)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if not root:
        raise ConfigError(f"--out is required when ${OUTPUT_ROOT_ENV} is unset")
    return Path(root) / args.command


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads:
        import torch

        torch.set_num_threads(args.threads)
    try:
        cfg = _apply_flags(args, resolve_config(args.config, args.set))
        out = _output_dir(args)
        COMMANDS[args.command](args, cfg, out)
    except (ConfigError, ParameterError, ShapeError, StateError) as exc:
        print(f"srfield {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime failure
        print(f"srfield {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
