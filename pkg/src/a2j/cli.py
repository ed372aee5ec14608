"""Command-line entry point: data generation, training, evaluation, inference and diagnostics."""

from __future__ import annotations

import argparse
import json
import logging
import os
import platform
import sys
from dataclasses import replace
from typing import List, Optional, Sequence

import numpy as np

from . import __version__
from .autodiff import NonFiniteError, Tensor
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import LOSS_TOLERANCE, run_suite
from .losses import LossConfig
from .model import A2JConfig, A2JNet, anchor_weights, build_model
from .synth import AugConfig, DatasetError, GenConfig, generate_dataset, read_dataset, write_dataset
from .train import (ABLATIONS, TrainConfig, TrainingDivergedError, ablation_grid, ablation_table, evaluate,
                    predict_world, train)

LOG_ENV = "A2J_LOG_LEVEL"
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("a2j")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- configuration ------------------------------------------------------------


def load_config(path: Optional[str]) -> dict:
    """JSON file with optional sections: data, model, train, aug, loss."""
    if not path:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
    unknown = set(cfg) - {"data", "model", "train", "aug", "loss"}
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")
    return cfg


def _build(cls, section: dict, **overrides):
    try:
        return cls(**{**section, **{k: v for k, v in overrides.items() if v is not None}})
    except TypeError as exc:
        raise UsageError(f"bad {cls.__name__} fields: {exc}") from exc


def gen_config(cfg: dict) -> GenConfig:
    return _build(GenConfig, cfg.get("data", {}))


def train_config(cfg: dict, seed=None, ablation=None, epochs=None) -> TrainConfig:
    section = dict(cfg.get("train", {}))
    section["aug"] = AugConfig(**cfg.get("aug", {}))
    section["loss"] = LossConfig(**cfg.get("loss", {}))
    if epochs is not None and "decay_every" not in section:
        section["decay_every"] = max(1, min(TrainConfig.decay_every, epochs))
    return _build(TrainConfig, section, seed=seed, ablation=ablation, epochs=epochs)


def model_config(cfg: dict, ds=None) -> A2JConfig:
    section = dict(cfg.get("model", {}))
    if ds is not None:
        section.setdefault("num_joints", ds.num_joints)
        section.setdefault("width", int(ds.depth.shape[2]))
        section.setdefault("height", int(ds.depth.shape[1]))
    return _build(A2JConfig, section)


def write_record(out: str, command: str, argv: Sequence[str], config: dict, seeds: dict) -> None:
    """Reproducibility record: everything needed to rerun this command. Deliberately time-free."""
    os.makedirs(out, exist_ok=True)
    record = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "seeds": seeds,
        "version": __version__,
        "numpy": np.__version__,
        "python": platform.python_version(),
    }
    with open(os.path.join(out, "run_record.json"), "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=1, sort_keys=True, default=str)


# -- subcommands ----------------------------------------------------------------


def cmd_gen_data(args, cfg, argv) -> int:
    gcfg = gen_config(cfg)
    ds = generate_dataset(args.seed, gcfg, args.samples, args.split)
    write_dataset(args.out, ds)
    write_record(args.out, "gen-data", argv, {"data": gcfg.to_dict()}, {"master_seed": args.seed, "split": args.split})
    print(f"wrote {len(ds)} samples (K={ds.num_joints}) to {args.out}")
    return EXIT_OK


def cmd_train(args, cfg, argv) -> int:
    ds = read_dataset(args.data)
    tcfg = train_config(cfg, args.seed, args.ablation, args.epochs)
    mcfg = model_config(cfg, ds)
    write_record(args.out, "train", argv, {"train": tcfg.to_dict(), "model": mcfg.to_dict()}, {"seed": tcfg.seed})
    res = train(ds, tcfg, mcfg, out_dir=args.out, max_steps=args.max_steps)
    final = os.path.join(args.out, "checkpoint")
    save_checkpoint(final, res.model, {"epoch": res.epochs_completed, "train_config": tcfg.to_dict()})
    print(f"trained {res.epochs_completed} epochs, {len(res.loss_log)} steps in {res.seconds:.1f} s; "
          f"final loss {res.loss_log[-1][1]:.4f}; checkpoint {final}")
    return EXIT_OK


def cmd_eval(args, cfg, argv) -> int:
    model, meta, _ = load_checkpoint(args.checkpoint)
    ds = read_dataset(args.data)
    _check_k(model.cfg, ds)
    report = evaluate(model, ds)
    text = report.to_text()
    print(text, end="")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "metrics.csv"), "w", encoding="utf-8") as fh:
            fh.write(report.to_csv())
        with open(os.path.join(args.out, "metrics.txt"), "w", encoding="utf-8") as fh:
            fh.write(text)
        write_record(args.out, "eval", argv, {"checkpoint": args.checkpoint, "data": args.data}, {})
    return EXIT_OK


def _check_k(mcfg: A2JConfig, ds) -> None:
    if mcfg.num_joints != ds.num_joints:
        raise DatasetError(f"checkpoint predicts K={mcfg.num_joints} joints but the dataset has K={ds.num_joints}")


def cmd_infer(args, cfg, argv) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    ds = read_dataset(args.data)
    _check_k(model.cfg, ds)
    uv, td, world = predict_world(model, ds)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "poses.csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("frame,joint,u_crop,v_crop,depth_transformed,x_mm,y_mm,z_mm\n")
        for i in range(len(ds)):
            for j in range(ds.num_joints):
                fh.write(f"{i},{j},{uv[i, j, 0]:.4f},{uv[i, j, 1]:.4f},{td[i, j]:.4f},"
                         f"{world[i, j, 0]:.3f},{world[i, j, 1]:.3f},{world[i, j, 2]:.3f}\n")
    write_record(args.out, "infer", argv, {"checkpoint": args.checkpoint, "data": args.data}, {})
    print(f"wrote poses for {len(ds)} frames to {path}")
    return EXIT_OK


_PALETTE = ("#e6194b", "#3cb44b", "#4363d8", "#f58231", "#911eb4", "#42d4f4", "#f032e6",
            "#bfef45", "#469990", "#9a6324", "#800000", "#808000", "#000075", "#a9a9a9")


def anchor_svg(grid, weights: np.ndarray, informative: List[np.ndarray], depth: Optional[np.ndarray],
               scale: float = 8.0) -> str:
    w, h = grid.width * scale, grid.height * scale
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w:g}" height="{h:g}" viewBox="0 0 {w:g} {h:g}">',
             f'<rect width="{w:g}" height="{h:g}" fill="#ffffff"/>']
    if depth is not None:
        valid = depth[depth > 0]
        if valid.size:
            lo, hi = float(valid.min()), float(valid.max())
            for y in range(depth.shape[0]):
                for x in range(depth.shape[1]):
                    d = depth[y, x]
                    if d > 0 and d < hi:
                        shade = int(60 + 150 * (d - lo) / max(hi - lo, 1e-6))
                        parts.append(f'<rect x="{x * scale:g}" y="{y * scale:g}" width="{scale:g}" height="{scale:g}" '
                                     f'fill="rgb({shade},{shade},{shade})"/>')
    for xy in grid.positions:
        parts.append(f'<circle cx="{xy[0] * scale:g}" cy="{xy[1] * scale:g}" r="1" fill="#cccccc"/>')
    for j, idx in enumerate(informative):
        color = _PALETTE[j % len(_PALETTE)]
        for a in idx:
            r = 2.0 + 10.0 * np.sqrt(weights[a, j])
            x, y = grid.positions[a]
            parts.append(f'<circle cx="{x * scale:g}" cy="{y * scale:g}" r="{r:.2f}" fill="{color}" '
                         f'fill-opacity="0.6"><title>joint {j} anchor {a} w={weights[a, j]:.4f}</title></circle>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_inspect_anchors(args, cfg, argv) -> int:
    if not 0 < args.threshold < 1:
        raise UsageError("--threshold must lie in (0, 1)")
    if args.checkpoint:
        model, _, _ = load_checkpoint(args.checkpoint)
    else:
        model = build_model(model_config(cfg))
    if not isinstance(model, A2JNet):
        raise UsageError("inspect-anchors needs an anchor-based model, not the global regression baseline")
    mcfg = model.cfg
    if args.data:
        ds = read_dataset(args.data)
        _check_k(mcfg, ds)
    else:
        gcfg = replace(gen_config(cfg), width=mcfg.width, height=mcfg.height)
        ds = generate_dataset(args.seed, gcfg, args.index + 1, "test")
        _check_k(mcfg, ds)
    if not 0 <= args.index < len(ds):
        raise UsageError(f"--index {args.index} out of range for {len(ds)} samples")
    model.eval()
    x = ds.network_inputs(idx=[args.index])
    out = model.forward(Tensor(x[:, None]))
    weights = anchor_weights(out.responses.data[0])
    offsets = out.offsets.data[0]
    depths = out.depths.data[0]
    grid = model.grid
    informative = [np.flatnonzero(weights[:, j] > args.threshold) for j in range(mcfg.num_joints)]
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "anchors.csv"), "w", encoding="utf-8") as fh:
        fh.write("joint,anchor,x,y,weight,offset_u,offset_v,depth,informative\n")
        for j in range(mcfg.num_joints):
            inf = set(informative[j].tolist())
            for a in range(grid.count):
                vals = (weights[a, j], offsets[a, j, 0], offsets[a, j, 1], depths[a, j])
                fh.write(f"{j},{a},{grid.positions[a, 0]:g},{grid.positions[a, 1]:g},"
                         + ",".join(repr(float(v)) for v in vals) + f",{int(a in inf)}\n")
    with open(os.path.join(args.out, "anchors.svg"), "w", encoding="utf-8") as fh:
        fh.write(anchor_svg(grid, weights, informative, ds.depth[args.index]))
    write_record(args.out, "inspect-anchors", argv, {"model": mcfg.to_dict(), "threshold": args.threshold},
                 {"seed": args.seed, "index": args.index})
    for j, idx in enumerate(informative):
        print(f"joint {j}: {len(idx)} informative anchors")
    return EXIT_OK


def cmd_grad_check(args, cfg, argv) -> int:
    report = run_suite(seeds=range(args.seeds))
    print(report.to_text(), end="")
    if args.out:
        write_record(args.out, "grad-check", argv, {}, {"seeds": args.seeds})
        with open(os.path.join(args.out, "grad_check.txt"), "w", encoding="utf-8") as fh:
            fh.write(report.to_text())
    worst = max(report.max_op_error, report.max_loss_error)
    print(f"max relative error {worst:.3e}")
    return EXIT_OK if worst < LOSS_TOLERANCE else EXIT_NUMERIC


def cmd_ablate(args, cfg, argv) -> int:
    gcfg = gen_config(cfg)
    train_ds = generate_dataset(args.seed, gcfg, args.train_samples, "train")
    test_ds = generate_dataset(args.seed, gcfg, args.test_samples, "test")
    tcfg = train_config(cfg, args.seed, None, args.epochs)
    mcfg = model_config(cfg, train_ds)
    variants = args.variants.split(",")
    bad = [v for v in variants if v not in ABLATIONS]
    if bad:
        raise UsageError(f"unknown variants {bad}; choose from {ABLATIONS}")
    seeds = [int(s) for s in args.seeds.split(",")]
    write_record(args.out, "ablate", argv, {"train": tcfg.to_dict(), "model": mcfg.to_dict(), "data": gcfg.to_dict()},
                 {"data_seed": args.seed, "train_seeds": seeds})
    rows = ablation_grid(train_ds, test_ds, tcfg, mcfg, variants, seeds)
    table = ablation_table(rows)
    with open(os.path.join(args.out, "ablation.csv"), "w", encoding="utf-8") as fh:
        fh.write(table)
    print(table, end="")
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="a2j", description="Anchor-to-joint pose regression on synthetic depth data.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="JSON config with data/model/train/aug/loss sections")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out", required=out_required, help="output directory")

    g = sub.add_parser("gen-data", help="render a synthetic dataset")
    common(g)
    g.add_argument("--samples", type=int, default=64)
    g.add_argument("--split", choices=("train", "test"), default="train")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model on a dataset")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--epochs", type=int)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--ablation", choices=ABLATIONS)
    t.set_defaults(func=cmd_train, seed=None)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    common(e, out_required=False)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="write per-frame poses")
    common(i)
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--data", required=True)
    i.set_defaults(func=cmd_infer)

    a = sub.add_parser("inspect-anchors", help="export anchor weights and informative sets for one frame")
    common(a)
    a.add_argument("--checkpoint", help="omit to inspect a freshly initialized model")
    a.add_argument("--data")
    a.add_argument("--index", type=int, default=0)
    a.add_argument("--threshold", type=float, default=0.02)
    a.set_defaults(func=cmd_inspect_anchors)

    c = sub.add_parser("grad-check", help="finite-difference gradient suite")
    common(c, out_required=False)
    c.add_argument("--seeds", type=int, default=10)
    c.set_defaults(func=cmd_grad_check)

    b = sub.add_parser("ablate", help="train and compare the ablation variants")
    common(b)
    b.add_argument("--train-samples", type=int, default=3600)
    b.add_argument("--test-samples", type=int, default=400)
    b.add_argument("--epochs", type=int)
    b.add_argument("--seeds", default="0,1,2", dest="seeds", help="comma-separated training seeds")
    b.add_argument("--variants", default="full,global-reg,no-surround,no-proposal")
    b.set_defaults(func=cmd_ablate)
    return p


def _setup_logging() -> None:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def run(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            raise UsageError("a subcommand is required")
        cfg = load_config(args.config)
        return args.func(args, cfg, argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, CheckpointError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDivergedError, NonFiniteError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
