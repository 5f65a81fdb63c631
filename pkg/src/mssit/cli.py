"""The ``mssit`` command line.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Set ``MSSIT_NUM_THREADS`` to cap the BLAS thread pool.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, formats

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
THREADS_ENV = "MSSIT_NUM_THREADS"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _header(seed, sections: dict | None, command: str) -> None:
    h = formats.config_hash(sections) if sections else "-"
    print(f"# mssit {__version__} command={command} seed={seed} config_hash={h}", file=sys.stderr)


def _thread_limit():
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"{THREADS_ENV} must be at least 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


# -- subcommands -------------------------------------------------------------


def cmd_mesh_build(args) -> int:
    from .icomesh import build_icosphere

    _header("-", {"mesh": {"level": args.level}}, "mesh build")
    ico = build_icosphere(args.level)
    formats.write_icosphere(args.out, ico)
    print(f"wrote ico{args.level}: {ico.n_vertices} vertices, {ico.n_faces} faces -> {args.out}")
    return EXIT_OK


def cmd_mesh_maps(args) -> int:
    from .patching import build_patch_maps

    _header("-", {"maps": {"w_s": args.w_s}}, "mesh maps")
    maps = build_patch_maps(w_s=args.w_s)
    tables = formats.patch_map_tables(maps)
    formats.write_tables(args.out, tables)
    print(f"wrote {len(tables)} index tables -> {args.out}")
    return EXIT_OK


def cmd_data_synth(args) -> int:
    from .synth import synthesise

    _header(args.seed, {"synth": {"kind": args.kind, "n": args.n, "classes": args.classes}}, "data synth")
    if args.n < 1:
        raise UsageError("--n must be at least 1")
    manifest = synthesise(args.kind, args.n, args.seed, args.out, args.classes)
    print(f"wrote {args.n} {args.kind} samples -> {manifest}")
    return EXIT_OK


def _load_configs(args, task: str):
    from .model import ModelConfig
    from .train import TrainConfig

    sections = formats.read_config(args.config) if args.config else {}
    unknown = set(sections) - {"model", "train"}
    if unknown:
        raise UsageError(f"config sections must be [model] and [train], got {sorted(unknown)}")
    model_d = dict(sections.get("model", {}))
    train_d = dict(sections.get("train", {}))
    model_d.setdefault("task", task)
    train_d.setdefault("task", task)
    if args.seed is not None:
        train_d["seed"] = args.seed
    if args.iterations is not None:
        train_d["iterations"] = args.iterations
    try:
        model_cfg = ModelConfig.from_dict(model_d)
        base = TrainConfig.for_task(train_d["task"]).to_dict()
        base.update(train_d)
        train_cfg = TrainConfig.from_dict(base)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc
    return model_cfg, train_cfg


def cmd_train(args) -> int:
    from .train import Dataset, load_checkpoint, train_loop

    dataset = Dataset.from_manifest(args.manifest)
    model_cfg, train_cfg = _load_configs(args, dataset.task)
    sections = {"model": model_cfg.to_dict(), "train": train_cfg.to_dict()}
    _header(train_cfg.seed, sections, "train")
    init = None
    if args.init:
        init = load_checkpoint(args.init).state
        if init.config.to_dict() != model_cfg.to_dict():
            raise formats.FormatError("--init checkpoint was trained with a different model config")
    res = train_loop(dataset, model_cfg, train_cfg, args.out, init=init, log=print)
    print(f"best={res.best_metric:.6g} checkpoints: {res.best_path}, {res.final_path}; log: {res.log_path}")
    return EXIT_OK


def _prepare(ckpt, data: np.ndarray) -> np.ndarray:
    from .patching import default_patch_maps, sequence_from_surface

    cfg = ckpt.state.config
    if data.shape[1] != cfg.in_channels:
        raise formats.FormatError(
            f"surface has {data.shape[1]} channels but the checkpoint expects {cfg.in_channels}"
        )
    if ckpt.channel_mean is not None:
        data = (data - ckpt.channel_mean) / ckpt.channel_std
    seq = sequence_from_surface(data, default_patch_maps(cfg.shift_fraction))
    return seq[None].astype(cfg.dtype)


def _run(ckpt, data):
    from . import tensor as T
    from .model import forward

    with T.no_grad():
        return forward(_prepare(ckpt, data), ckpt.state).data[0]


def _checkpoint(path, task: str):
    from .train import load_checkpoint

    ckpt = load_checkpoint(path)
    if ckpt.state.config.task != task:
        raise formats.FormatError(f"{path} holds a {ckpt.state.config.task} model, not {task}")
    return ckpt


def cmd_predict(args) -> int:
    from .train import Dataset

    ckpt = _checkpoint(args.checkpoint, "regression")
    _header(ckpt.train_config.get("seed", "-") if ckpt.train_config else "-", {"model": ckpt.state.config.to_dict()}, "predict")

    def predict(data):
        return float(_run(ckpt, data)[0]) * ckpt.target_std + ckpt.target_mean

    if args.surface:
        print(f"{predict(formats.read_surface(args.surface)):.6f}")
        return EXIT_OK
    ds = Dataset.from_manifest(args.manifest)
    idx = ds.indices(args.split) if args.split else list(range(len(ds)))
    rows, errors = [], []
    for i in idx:
        s = ds.raw(i)
        p = predict(s.data)
        err = abs(p - s.target) if s.target is not None else float("nan")
        if s.target is not None:
            errors.append(err)
        rows.append([s.sample_id, repr(p), "" if s.target is None else repr(s.target), "" if s.target is None else repr(err)])
    mae = float(np.mean(errors)) if errors else float("nan")
    out = open(args.out, "w", newline="") if args.out else contextlib.nullcontext(sys.stdout)
    with out as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "prediction", "target", "abs_error"])
        w.writerows(rows)
        w.writerow(["MAE", "", "", repr(mae)])
    print(f"MAE over {len(errors)} samples: {mae:.6g}", file=sys.stderr)
    return EXIT_OK


def cmd_segment(args) -> int:
    from .train import dice_scores

    if args.dice and not args.labels:
        raise UsageError("--dice needs ground truth via --labels")
    ckpt = _checkpoint(args.checkpoint, "segmentation")
    _header("-", {"model": ckpt.state.config.to_dict()}, "segment")
    logits = _run(ckpt, formats.read_surface(args.surface))
    pred = np.argmax(logits, axis=-1)
    formats.write_labels(args.out, pred)
    print(f"wrote {pred.size} labels -> {args.out}")
    if args.dice:
        truth = formats.read_labels(args.labels)
        if truth.shape != pred.shape:
            raise formats.FormatError("ground-truth label count does not match the surface")
        k = ckpt.state.config.num_classes
        if truth.max() >= k:
            raise formats.FormatError(f"ground truth has labels outside [0, {k})")
        scores = dice_scores(pred, truth, k)
        print("class,dice")
        for c, d in enumerate(scores):
            print(f"{c},{d:.6f}")
        fg = scores[1:][~np.isnan(scores[1:])]
        print(f"mean_foreground,{fg.mean() if fg.size else float('nan'):.6f}")
    return EXIT_OK


def cmd_attention(args) -> int:
    from .model import extract_attention
    from .patching import default_patch_maps

    ckpt = _checkpoint(args.checkpoint, args.task) if args.task else None
    if ckpt is None:
        from .train import load_checkpoint

        ckpt = load_checkpoint(args.checkpoint)
    _header("-", {"model": ckpt.state.config.to_dict()}, "attention")
    seq = _prepare(ckpt, formats.read_surface(args.surface))
    amap = extract_attention(seq, ckpt.state, default_patch_maps(ckpt.state.config.shift_fraction))
    formats.write_scalars(args.out, amap)
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["vertex", "attention"])
            w.writerows((i, f"{v:.8g}") for i, v in enumerate(amap))
    print(f"wrote attention map ({amap.size} vertices, range [{amap.min():.3g}, {amap.max():.3g}]) -> {args.out}")
    return EXIT_OK


def _describe(path) -> list[str]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == b"ICOS":
        level, v, f = formats.read_icosphere(path)
        return [f"ICOS icosphere level {level}: {len(v)} vertices, {len(f)} faces"]
    if magic == b"PMAP":
        return ["PMAP index tables"] + [f"  table {k}: shape {a.shape}" for k, a in formats.read_tables(path).items()]
    if magic == b"MSWT":
        rec = formats.read_records(path)
        params = {k: a for k, a in rec.items() if k.startswith("param.")}
        lines = [f"MSWT checkpoint: {len(params)} tensors, {sum(a.size for a in params.values())} parameters"]
        if "meta.config" in rec:
            lines += ["  " + ln for ln in rec["meta.config"].tobytes().decode().splitlines() if ln]
        return lines
    if magic == b"SCAL":
        a = formats.read_scalars(path)
        return [f"SCAL {a.size} values, min {a.min():.6g}, max {a.max():.6g}"]
    if magic == b"SURF":
        a = formats.read_surface(path)
        return [f"SURF {a.shape[0]} vertices x {a.shape[1]} channels"] + [
            f"  channel {c}: mean {a[:, c].mean():.6g}, std {a[:, c].std():.6g}" for c in range(a.shape[1])
        ]
    if magic == b"LABL":
        a = formats.read_labels(path)
        counts = np.bincount(a)
        return [f"LABL {a.size} labels, {np.count_nonzero(counts)} classes present"]
    raise formats.FormatError(f"{path}: unrecognised file magic {magic!r}")


def cmd_inspect(args) -> int:
    _header("-", None, "inspect")
    for line in _describe(args.file):
        print(line)
    return EXIT_OK


def cmd_augment_preview(args) -> int:
    from .augment import AugmentConfig, random_rotation, random_warp

    cfg = AugmentConfig(probability=1.0, rotation_range_deg=args.rotation_range, warp_max_fraction=args.warp_fraction)
    _header(args.seed, {"augment": {"kind": args.kind, "range": args.rotation_range, "warp": args.warp_fraction}}, "augment preview")
    rng = np.random.default_rng(args.seed)
    if args.surface:
        data = formats.read_surface(args.surface)
    else:
        from .synth import regression_samples

        data = regression_samples(1, args.seed)[0].data
    if not 0 <= args.channel < data.shape[1]:
        raise UsageError(f"--channel must be in [0, {data.shape[1]}), got {args.channel}")
    if args.kind == "rotation":
        angles = rng.uniform(-cfg.rotation_range_deg, cfg.rotation_range_deg, 3)
        after = random_rotation(data, angles)
        detail = "angles " + ", ".join(f"{a:.2f}" for a in angles)
    else:
        after = random_warp(data, cfg, rng)
        detail = f"warp max fraction {cfg.warp_max_fraction}"
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    formats.write_surface(out / "before.surf", data)
    formats.write_surface(out / "after.surf", after)
    formats.write_scalars(out / "before.scal", data[:, args.channel])
    formats.write_scalars(out / "after.scal", after[:, args.channel])
    print(f"{args.kind} ({detail}) -> {out}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mssit", description="Multiscale surface vision transformer tools.")
    p.add_argument("--version", action="version", version=f"mssit {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    mesh = sub.add_parser("mesh", help="icosphere meshes and index tables")
    msub = mesh.add_subparsers(dest="mesh_command", required=True, parser_class=_Parser)
    b = msub.add_parser("build", help="write one icosphere level (ICOS)")
    b.add_argument("--level", type=int, required=True)
    b.add_argument("--out", required=True)
    b.set_defaults(func=cmd_mesh_build)
    m = msub.add_parser("maps", help="write the patch/window/shift/merge tables (PMAP)")
    m.add_argument("--out", required=True)
    m.add_argument("--w-s", type=float, default=0.5, help="shift factor in {0, 1/16, 1/4, 1/2}")
    m.set_defaults(func=cmd_mesh_maps)

    data = sub.add_parser("data", help="datasets")
    dsub = data.add_subparsers(dest="data_command", required=True, parser_class=_Parser)
    s = dsub.add_parser("synth", help="generate a synthetic dataset with a manifest")
    s.add_argument("--kind", choices=("regression", "segmentation"), required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--classes", type=int, default=8, help="segmentation classes")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_data_synth)

    t = sub.add_parser("train", help="train a model from a manifest")
    t.add_argument("--manifest", required=True)
    t.add_argument("--config", help="key-value file with [model] and [train] sections")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--seed", type=int)
    t.add_argument("--iterations", type=int, help="override the number of optimiser steps")
    t.add_argument("--init", help="start from this checkpoint's weights")
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("predict", help="regression inference")
    pr.add_argument("--checkpoint", required=True)
    g = pr.add_mutually_exclusive_group(required=True)
    g.add_argument("--surface")
    g.add_argument("--manifest")
    pr.add_argument("--split", help="restrict a manifest to one split")
    pr.add_argument("--out", help="CSV path for manifest mode (default stdout)")
    pr.set_defaults(func=cmd_predict)

    sg = sub.add_parser("segment", help="per-vertex segmentation")
    sg.add_argument("--checkpoint", required=True)
    sg.add_argument("--surface", required=True)
    sg.add_argument("--out", required=True)
    sg.add_argument("--labels", help="ground-truth LABL file")
    sg.add_argument("--dice", action="store_true", help="print per-class Dice against --labels")
    sg.set_defaults(func=cmd_segment)

    at = sub.add_parser("attention", help="export the last-layer attention map (SCAL)")
    at.add_argument("--checkpoint", required=True)
    at.add_argument("--surface", required=True)
    at.add_argument("--out", required=True)
    at.add_argument("--csv")
    at.add_argument("--task", choices=("regression", "segmentation"))
    at.set_defaults(func=cmd_attention)

    ins = sub.add_parser("inspect", help="summarise any mssit file")
    ins.add_argument("file")
    ins.set_defaults(func=cmd_inspect)

    aug = sub.add_parser("augment", help="augmentation tools")
    asub = aug.add_subparsers(dest="augment_command", required=True, parser_class=_Parser)
    ap = asub.add_parser("preview", help="write before/after surfaces for one transform")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--surface", help="input SURF (default: a synthetic sample)")
    ap.add_argument("--kind", choices=("rotation", "warp"), default="rotation")
    ap.add_argument("--rotation-range", type=float, default=30.0)
    ap.add_argument("--warp-fraction", type=float, default=0.125)
    ap.add_argument("--channel", type=int, default=0)
    ap.add_argument("--out-dir", required=True)
    ap.set_defaults(func=cmd_augment_preview)
    return p


def main(argv=None) -> int:
    from .train import DivergenceError

    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with _thread_limit():
            return args.func(args)
    except UsageError as exc:
        print(f"mssit: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DivergenceError, FloatingPointError) as exc:
        print(f"mssit: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (formats.FormatError, OSError, ValueError) as exc:
        print(f"mssit: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
