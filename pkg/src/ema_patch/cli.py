"""Command-line entry point: ``ema-patch attack|eval|colordiff|render-preview|make-toy``.

Exit codes: 0 success, 1 runtime failure, 2 invalid input (bad config,
missing or unreadable files).
"""

from __future__ import annotations

import argparse
import contextlib
import importlib
import json
import logging
import os
import sys
from pathlib import Path

import torch

from . import __version__
from .attack import CheckpointError, ConstraintViolation, TrainingDiverged, generator_for, resume, scene_ranges, train
from .config import ConfigError, RunConfig, load_config, parse_config, resolve, save_config
from .data import ImageReadError, ManifestError, SceneImage, load_manifest, read_image, write_image, write_manifest
from .detector import CapabilityError, CommandDetector, ToyDetector
from .diffusion import LinearNoisePredictor, PalettePredictor
from .evaluation.color import color_difference
from .patch import load_patch, save_patch
from .scene import attack_render

log = logging.getLogger("ema_patch")

EXIT_OK, EXIT_RUNTIME, EXIT_INPUT = 0, 1, 2

PATCH_NAME = "patch.png"
LOG_NAME = "train_log.jsonl"
CHECKPOINT_NAME = "checkpoint.ckpt"
RESOLVED_NAME = "config.resolved.yaml"
REPORT_NAME = "eval_report.json"
TABLE_NAME = "eval_table.txt"
LOCK_NAME = ".lock"


class InputError(Exception):
    """Bad user input; maps to exit code 2."""


# -- run context ---------------------------------------------------------------------

class _Run:
    """Config loaded from disk plus CLI overrides, with paths resolved
    relative to the config file."""

    def __init__(self, args: argparse.Namespace):
        self.config_path = Path(args.config)
        cfg = load_config(self.config_path)
        overrides: dict = {}
        if getattr(args, "seed", None) is not None:
            overrides.setdefault("attack", {})["seed"] = args.seed
        if getattr(args, "fail_fast", None) is not None:
            overrides.setdefault("data", {})["fail_fast"] = args.fail_fast
        if getattr(args, "out", None):
            overrides["output_dir"] = args.out
        if overrides:
            merged = cfg.model_dump(mode="json")
            for k, v in overrides.items():
                if isinstance(v, dict):
                    merged[k].update(v)
                else:
                    merged[k] = v
            cfg = parse_config(merged)
        self.cfg: RunConfig = cfg
        self.base = self.config_path.resolve().parent
        out = Path(args.out) if getattr(args, "out", None) else resolve(cfg.output_dir, self.base)
        self.out = out

    def path(self, p: str) -> Path:
        return resolve(p, self.base)

    def dataset(self, which: str = "train") -> list[SceneImage]:
        d = self.cfg.data
        raw = d.train_manifest if which == "train" else (d.eval_manifest or d.train_manifest)
        mpath = self.path(raw)
        if not mpath.exists():
            raise InputError(f"dataset manifest not found: {mpath}")
        manifest = load_manifest(mpath, fail_fast=d.fail_fast)
        for w in manifest.warnings:
            log.warning("%s", w)
        for e in manifest.errors:
            log.error("skipped: %s", e)
        return manifest.load()

    def env_image(self) -> torch.Tensor | None:
        imgs = self.cfg.data.environment_images
        if not imgs:
            return None
        p = self.path(imgs[0])
        if not p.exists():
            raise InputError(f"environment image not found: {p}")
        return read_image(p)


def _import_factory(target: str):
    mod, _, attr = target.partition(":")
    if not mod or not attr:
        raise InputError(f"factory target must look like 'module:callable', got {target!r}")
    try:
        return getattr(importlib.import_module(mod), attr)
    except (ImportError, AttributeError) as exc:
        raise InputError(f"cannot import {target}: {exc}") from None


def build_detector(run: _Run):
    dc = run.cfg.detector
    if dc.kind == "toy":
        if dc.weights == "builtin":
            from .toy import builtin_weights_path
            path = builtin_weights_path()
        else:
            path = run.path(dc.weights)
        if not path.exists():
            raise InputError(f"detector weights not found: {path}")
        return ToyDetector.load(path, floor=run.cfg.attack.det_floor, **dc.options)
    if dc.kind == "command":
        return CommandDetector(dc.argv, **dc.options)
    return _import_factory(dc.target)(**dc.options)


def build_predictor(run: _Run):
    pc = run.cfg.predictor
    if pc.kind == "none":
        return None
    if pc.kind == "palette":
        return PalettePredictor(pc.target_rgb, pc.strength)
    if pc.kind == "linear":
        p = run.path(pc.weights)
        if not p.exists():
            raise InputError(f"predictor weights not found: {p}")
        return LinearNoisePredictor.load(p)
    return _import_factory(pc.target)(**pc.options)


@contextlib.contextmanager
def output_lock(out: Path):
    """One run per output directory. A lock left by a dead process is taken over."""
    out.mkdir(parents=True, exist_ok=True)
    lock = out / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        try:
            pid = int(lock.read_text().strip() or 0)
        except (OSError, ValueError):
            pid = 0
        if pid and _alive(pid):
            raise RuntimeError(f"{out} is in use by process {pid} (lockfile {lock})") from None
        log.warning("removing stale lock %s", lock)
        lock.unlink(missing_ok=True)
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)
    try:
        yield
    finally:
        lock.unlink(missing_ok=True)


def _alive(pid: int) -> bool:
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


# -- commands ----------------------------------------------------------------------------

def cmd_attack(args) -> int:
    run = _Run(args)
    cfg, acfg = run.cfg, run.cfg.attack
    dataset = run.dataset("train")
    if not dataset:
        raise InputError("training manifest has no images")
    env = run.env_image()
    if acfg.init_mode == "background_sample" and env is None:
        raise InputError("init_mode background_sample needs data.environment_images")
    detector = build_detector(run)
    predictor = build_predictor(run)
    chash = cfg.config_hash()

    with output_lock(run.out):
        save_config(cfg, run.out / RESOLVED_NAME)
        ckpt = run.out / CHECKPOINT_NAME
        state = None
        log_path = run.out / LOG_NAME
        if args.resume:
            src = ckpt if args.resume == "auto" else Path(args.resume)
            state, header = resume(src, chash)
            log.info("resuming from %s at iteration %d", src, state.iteration)
            _truncate_log(log_path, state.iteration)
        elif log_path.exists():
            log_path.unlink()
        result = train(acfg, dataset, detector, predictor, env_image=env, state=state, log_path=log_path,
                       checkpoint_path=ckpt, config_hash=chash, snapshot_dir=run.out)
        out = save_patch(result.patch, run.out / PATCH_NAME, tau=acfg.tau, linf_bound=acfg.linf_bound,
                         config_hash=chash, seed=acfg.seed)
    last = result.log[-1] if result.log else None
    print(f"patch written to {out}")
    if last:
        print(f"final iteration {last['iter']}: det {last['det']:.4f} tv {last['tv']:.4f} total {last['total']:.4f}")
    return EXIT_OK


def _truncate_log(path: Path, iteration: int) -> None:
    """Drop log records at or past ``iteration`` so a resumed run appends cleanly."""
    if not path.exists():
        return
    keep = [ln for ln in path.read_text().splitlines() if ln.strip() and json.loads(ln)["iter"] < iteration]
    path.write_text("".join(ln + "\n" for ln in keep))


def _load_patch_arg(path_arg: str | None, run: _Run) -> tuple[torch.Tensor, dict | None, Path]:
    p = Path(path_arg) if path_arg else run.out / PATCH_NAME
    if not p.exists():
        raise InputError(f"patch not found: {p}")
    try:
        patch, meta = load_patch(p)
    except (OSError, ValueError) as exc:
        raise InputError(f"cannot read patch {p}: {exc}") from None
    return patch, meta, p


def cmd_eval(args) -> int:
    from .evaluation.report import evaluate

    run = _Run(args)
    cfg = run.cfg
    chash = cfg.config_hash()
    if cfg.eval.clean_only:
        patch, meta, ppath = torch.zeros(3, 0, 0, dtype=torch.float64), None, None
    else:
        patch, meta, ppath = _load_patch_arg(args.patch, run)
        if meta is None:
            log.warning("patch %s has no sidecar; provenance unknown", ppath)
        elif meta.get("creation_config_hash") != chash:
            log.warning("patch sidecar config hash %s differs from this config (%s); proceeding",
                        str(meta.get("creation_config_hash"))[:12], chash[:12])
    dataset = run.dataset("eval")
    if not dataset:
        raise InputError("evaluation manifest has no images")
    detector = build_detector(run)
    env = run.env_image()
    report = evaluate(patch, dataset, detector, env, cfg.attack, cfg.eval, config_hash=chash)
    run.out.mkdir(parents=True, exist_ok=True)
    report.write_json(run.out / REPORT_NAME)
    table = report.table()
    (run.out / TABLE_NAME).write_text(table)
    print(table, end="")
    print(f"mAP clean {report.map_clean:.4f} patched {report.map_patched:.4f}")
    return EXIT_OK


def cmd_colordiff(args) -> int:
    imgs = []
    for p in (args.patch, args.env):
        try:
            imgs.append(read_image(p))
        except ImageReadError as exc:
            raise InputError(str(exc)) from None
    print(f"{color_difference(imgs[0], imgs[1]):.4f}")
    return EXIT_OK


def cmd_render_preview(args) -> int:
    run = _Run(args)
    patch, _, _ = _load_patch_arg(args.patch, run)
    dataset = run.dataset("eval")
    if not dataset:
        raise InputError("manifest has no images")
    if not 0 <= args.index < len(dataset):
        raise InputError(f"--index {args.index} out of range (dataset has {len(dataset)} images)")
    scene = dataset[args.index]
    acfg = run.cfg.attack
    g = generator_for(acfg.seed + run.cfg.eval.seed_offset, args.index)
    with torch.no_grad():
        r = attack_render(scene.pixels, scene.boxes(acfg.target_class), patch, scene_ranges(acfg), g)
    dest = Path(args.image_out) if args.image_out else run.out / f"preview_{scene.image_id}.png"
    write_image(dest, r.image)
    print(f"preview written to {dest}")
    return EXIT_OK


def cmd_make_toy(args) -> int:
    """Write a small synthetic dataset, an environment image and a config."""
    from .toy import SAND_RGB, make_dataset, make_environment_image

    root = Path(args.dir)
    root.mkdir(parents=True, exist_ok=True)
    train_m = write_manifest(root / "train.json", make_dataset(args.n_train, seed=args.seed, prefix="train"),
                             root / "images")
    eval_m = write_manifest(root / "eval.json", make_dataset(args.n_eval, seed=args.seed + 1, prefix="eval"),
                            root / "images")
    env = write_image(root / "environment.png", make_environment_image(args.seed, 64))
    cfg = RunConfig.model_validate({
        "attack": {"seed": args.seed, "epochs": args.epochs, "patch_size": 16, "diffusion_steps": 40},
        "data": {"train_manifest": train_m.name, "eval_manifest": eval_m.name,
                 "environment_images": [env.name]},
        "predictor": {"kind": "palette", "target_rgb": list(SAND_RGB)},
        "output_dir": "run",
    })
    save_config(cfg, root / "config.yaml")
    print(f"toy setup written to {root} (config: {root / 'config.yaml'})")
    return EXIT_OK


# -- parser --------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ema-patch", description="Environment-matched adversarial patches.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, patch=False):
        p.add_argument("--config", required=True, help="run configuration (YAML)")
        p.add_argument("--seed", type=int, help="override attack.seed")
        p.add_argument("--out", help="override output_dir")
        ff = p.add_mutually_exclusive_group()
        ff.add_argument("--fail-fast", dest="fail_fast", action="store_true", default=None,
                        help="abort on the first malformed manifest entry")
        ff.add_argument("--no-fail-fast", dest="fail_fast", action="store_false",
                        help="skip malformed manifest entries")
        if patch:
            p.add_argument("--patch", help="patch PNG (default: <out>/patch.png)")

    p = sub.add_parser("attack", help="optimise a patch")
    common(p)
    p.add_argument("--resume", nargs="?", const="auto",
                   help="continue from a checkpoint (default: <out>/checkpoint.ckpt)")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("eval", help="clean vs patched mAP and colour distance")
    common(p, patch=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("colordiff", help="CIEDE2000 between dominant colours of two images")
    p.add_argument("patch")
    p.add_argument("env")
    p.set_defaults(func=cmd_colordiff)

    p = sub.add_parser("render-preview", help="write one patched scene for inspection")
    common(p, patch=True)
    p.add_argument("--index", type=int, default=0, help="dataset image index")
    p.add_argument("--image-out", help="output image path")
    p.set_defaults(func=cmd_render_preview)

    p = sub.add_parser("make-toy", help="generate a synthetic toy dataset and config")
    p.add_argument("dir")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-train", type=int, default=8)
    p.add_argument("--n-eval", type=int, default=16)
    p.add_argument("--epochs", type=int, default=200)
    p.set_defaults(func=cmd_make_toy)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        for m in exc.messages:
            print(f"config error: {m}", file=sys.stderr)
        return EXIT_INPUT
    except ManifestError as exc:
        for m in exc.errors:
            print(f"manifest error: {m}", file=sys.stderr)
        return EXIT_INPUT
    except (InputError, ImageReadError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (CapabilityError, ConstraintViolation, TrainingDiverged, RuntimeError, ValueError) as exc:
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
