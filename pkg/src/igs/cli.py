"""Command line entry point: ``igs <command> [flags]``.

Exit status: 0 success, 2 usage, 3 validation, 4 numerical failure,
5 IO or corrupt data. Failures print one ``error: CODE: message`` line on
stderr.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import torch

from . import streamio
from .config import RunConfig
from .datasets import Dataset, evaluate, gen_synthetic_scene, load_dataset, write_eval_csv, write_ppm
from .errors import FormatError, IGSError, MissingAssetError, StateError, ValidationError
from .synopsis import TrainLog, TrainingDiverged, checkpoint_path, train_full, unfold_level

log = logging.getLogger("igs")

CONFIG_NAME = "config.txt"
METRICS_NAME = "metrics.csv"
MANIFEST_NAME = "manifest.txt"


def _load_config(path, fallback_dir=None) -> RunConfig:
    if path:
        cfg = RunConfig.load(path)
    elif fallback_dir is not None and (Path(fallback_dir) / CONFIG_NAME).is_file():
        cfg = RunConfig.load(Path(fallback_dir) / CONFIG_NAME)
    else:
        cfg = RunConfig()
    torch.set_num_threads(max(1, cfg.threads))
    return cfg


def _echo_config(cfg: RunConfig, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / CONFIG_NAME)


def _dataset(cfg: RunConfig, override=None) -> Dataset:
    path = override or cfg.data
    if not path:
        raise ValidationError("no dataset given (pass --data or set 'data' in the config)")
    return load_dataset(path)


def _check_resolution(ds: Dataset, cfg: RunConfig):
    for i, cam in enumerate(ds.cameras):
        if max(cam.width, cam.height) > cfg.max_resolution:
            raise ValidationError(f"camera {i} is {cam.width}x{cam.height}, above max_resolution={cfg.max_resolution}")


def _load_chain(ckpt: Path, levels) -> dict:
    chain = {}
    for level in levels:
        p = checkpoint_path(ckpt, level)
        if not p.is_file():
            raise MissingAssetError(f"checkpoint missing: {p}")
        chain[level] = streamio.load_model(p)
        if chain[level].level != level:
            raise FormatError(f"{p} holds level {chain[level].level}")
    return chain


# -- subcommands -------------------------------------------------------------

def cmd_gen(args) -> int:
    out = Path(args.out)
    gen_synthetic_scene(args.seed, args.gaussians, args.cameras, tuple(args.res), out=out)
    _echo_config(RunConfig(seed=args.seed), out)
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    if args.data:
        cfg = cfg.replace(data=str(Path(args.data)))
    if args.iterations is not None:
        cfg = cfg.replace(full_iterations=args.iterations)
    cfg.validate()
    ds = _dataset(cfg)
    _check_resolution(ds, cfg)
    out = Path(args.out)
    _echo_config(cfg, out)
    metrics = TrainLog()
    try:
        model = train_full(ds, cfg, metrics=metrics, progress=_progress("full"))
    except TrainingDiverged as exc:
        metrics.write(out / METRICS_NAME)
        if exc.last_good is not None:
            streamio.save_model(exc.last_good, out / "L{}.last_good.igs".format(cfg.top_level))
        raise
    streamio.save_model(model, checkpoint_path(out, model.level))
    metrics.write(out / METRICS_NAME)
    return 0


def cmd_unfold(args) -> int:
    ckpt = Path(args.ckpt)
    cfg = _load_config(args.config, ckpt)
    if args.data:
        cfg = cfg.replace(data=str(Path(args.data)))
    if args.iterations is not None:
        cfg = cfg.replace(unfold_iterations=args.iterations)
    cfg.validate()
    ds = _dataset(cfg)
    _check_resolution(ds, cfg)
    model = _load_chain(ckpt, [cfg.top_level])[cfg.top_level]
    if not model.trained:
        raise StateError(f"{checkpoint_path(ckpt, cfg.top_level)} is not a trained model")
    _echo_config(cfg, ckpt)
    metrics = TrainLog()
    try:
        while model.level > 0:
            model = unfold_level(model, ds, cfg, metrics=metrics, progress=_progress(f"unfold L{model.level - 1}"))
            streamio.save_model(model, checkpoint_path(ckpt, model.level))
    finally:
        metrics.write(ckpt / METRICS_NAME, append=True)
    return 0


def cmd_pack(args) -> int:
    ckpt, out = Path(args.ckpt), Path(args.out)
    cfg = _load_config(None, ckpt)
    level = cfg.deflate_level if args.deflate_level is None else args.deflate_level
    if not 0 <= level <= 9:
        raise ValidationError("--deflate-level must be in [0, 9]")
    levels = list(range(cfg.lod_levels))
    chain = _load_chain(ckpt, levels)
    _echo_config(cfg, out)
    raws = {lv: streamio.model_to_bytes(m) for lv, m in chain.items()}
    full_sizes = {lv: streamio.compressed_size(raw, level) for lv, raw in raws.items()}
    rows, cumulative, full_total = [], 0, 0

    def emit(stage, name, raw, packed, lv):
        nonlocal cumulative, full_total
        (out / name).write_bytes(packed)
        cumulative += len(packed)
        full_total += full_sizes[lv]
        rows.append([stage, name, len(raw), len(packed), cumulative, full_sizes[lv], full_total])

    base = raws[0]
    emit("L0", "base.igs.deflate", base, streamio.deflate(base, level), 0)
    for lo, hi in zip(levels, levels[1:]):
        delta = streamio.compute_delta(chain[lo], chain[hi], level)
        emit(f"L{hi}", f"delta_L{lo}_L{hi}.igsd.deflate", delta, streamio.deflate(delta, level), hi)
    with open(out / "sizes.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "file", "raw_bytes", "compressed_bytes", "cumulative_compressed_bytes",
                    "full_model_compressed_bytes", "cumulative_full_model_compressed_bytes"])
        w.writerows(rows)
    (out / MANIFEST_NAME).write_text(f"ckpt = {ckpt.resolve()}\ndeflate_level = {level}\n")
    return 0


def _manifest(pack: Path) -> dict:
    p = pack / MANIFEST_NAME
    if not p.is_file():
        raise MissingAssetError(f"pack manifest missing: {p}")
    out = {}
    for line in p.read_text().splitlines():
        if "=" in line:
            k, v = (s.strip() for s in line.split("=", 1))
            out[k] = v
    return out


def cmd_stream_sim(args) -> int:
    pack, out = Path(args.pack), Path(args.out)
    cfg = _load_config(None, pack)
    ckpt = Path(args.ckpt or _manifest(pack).get("ckpt", ""))
    ds = _dataset(cfg, args.data)
    view = ds.test_ids[0] if ds.test_ids else 0
    _echo_config(cfg, out)

    def read(name):
        p = pack / name
        if not p.is_file():
            raise MissingAssetError(f"pack file missing: {p}")
        return streamio.inflate(p.read_bytes())

    model = streamio.model_from_bytes(read("base.igs.deflate"))
    for lv in range(cfg.lod_levels):
        if lv > 0:
            model = streamio.apply_delta(model, read(f"delta_L{lv - 1}_L{lv}.igsd.deflate"))
        data = streamio.model_to_bytes(model)
        (out / f"L{lv}.igs").write_bytes(data)
        expected = checkpoint_path(ckpt, lv)
        if not expected.is_file():
            raise MissingAssetError(f"checkpoint missing: {expected}")
        if expected.read_bytes() != data:
            raise FormatError(f"reconstructed L{lv} differs from {expected}")
        cam = ds.cameras[view].scaled(cfg.resolution_scale(lv))
        with torch.no_grad():
            write_ppm(out / f"stage{lv}.ppm", model.render(cam, ds.background, cfg.cull_sigma))
        print(f"L{lv}: bit-identical to {expected.name}")
    return 0


def cmd_render(args) -> int:
    path = Path(args.ckpt)
    cfg = _load_config(args.config, path.parent)
    ds = _dataset(cfg, args.data)
    if not 0 <= args.camera < len(ds.cameras):
        raise ValidationError(f"camera index {args.camera} outside [0, {len(ds.cameras)})")
    model = streamio.load_model(path)
    scale = cfg.resolution_scale(model.level) if args.scale is None else args.scale
    if scale <= 0:
        raise ValidationError("--scale must be positive")
    cam = ds.cameras[args.camera].scaled(scale)
    with torch.no_grad():
        write_ppm(args.out, model.render(cam, ds.background, cfg.cull_sigma))
    return 0


def cmd_eval(args) -> int:
    ckpt = Path(args.ckpt)
    cfg = _load_config(None, ckpt)
    ds = _dataset(cfg, args.data)
    levels = [lv for lv in range(cfg.lod_levels) if checkpoint_path(ckpt, lv).is_file()]
    if not levels:
        raise MissingAssetError(f"no checkpoints in {ckpt}")
    results = []
    for lv in levels:
        model = streamio.load_model(checkpoint_path(ckpt, lv))
        results.append(evaluate(model, ds, lv, cfg.resolution_scale(lv), cfg.cull_sigma))
        print(f"L{lv}: psnr {results[-1]['psnr']:.3f} ssim {results[-1]['ssim']:.4f}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_eval_csv(out, results)
    return 0


def _progress(phase):
    def report(it, loss):
        log.info("%s it %d loss %.6f", phase, it, loss)
    return report


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="igs", description="Nested level-of-detail Gaussian scenes.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen", help="write a synthetic scene")
    s.add_argument("--seed", type=int, required=True)
    s.add_argument("--gaussians", type=int, required=True)
    s.add_argument("--cameras", type=int, required=True)
    s.add_argument("--res", type=int, nargs=2, metavar=("W", "H"), required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_gen)

    s = sub.add_parser("train", help="train the finest level")
    s.add_argument("--data")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--iterations", type=int, help="override full_iterations")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("unfold", help="derive the coarser levels")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--config")
    s.add_argument("--data")
    s.add_argument("--iterations", type=int, help="override unfold_iterations")
    s.set_defaults(func=cmd_unfold)

    s = sub.add_parser("pack", help="base payload plus per-level deltas")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--deflate-level", type=int)
    s.set_defaults(func=cmd_pack)

    s = sub.add_parser("stream-sim", help="rebuild every level from a pack and check it")
    s.add_argument("--pack", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--ckpt", help="checkpoint directory (default: the one recorded by pack)")
    s.add_argument("--data")
    s.set_defaults(func=cmd_stream_sim)

    s = sub.add_parser("render", help="render one camera from a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--camera", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--data")
    s.add_argument("--config")
    s.add_argument("--scale", type=float, help="resolution scale (default: the level's own)")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("eval", help="held-out metrics for every level")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except IGSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_status
    except OSError as exc:
        print(f"error: E_IO: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
