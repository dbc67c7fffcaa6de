"""Command line for training, applying and evaluating translation models.

Exit status: 0 success, 2 usage error, 3 config/validation error, 4 runtime error.
Set ``NICEGAN_DETERMINISTIC=1`` to force deterministic torch kernels.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from typing import Optional

import numpy as np
import torch

from . import analysis, metrics
from .config import EXTRACTORS, ConfigError, ExperimentConfig, load_config, parse_dict, parse_override
from .data import (DatasetError, ImageSizeError, datasets_for_config, load_image, prepare_eval,
                   resize_bilinear, save_image)
from .losses import NonFiniteLossError
from .training import CheckpointError, ConfigMismatchError, load_checkpoint, read_manifest, train

EXIT_OK, EXIT_USAGE, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3, 4
DETERMINISTIC_ENV = "NICEGAN_DETERMINISTIC"
METRIC_CHOICES = ("kid", "fid", "mmd", "cycle")


class UsageError(Exception):
    pass


def deterministic_mode() -> bool:
    return os.environ.get(DETERMINISTIC_ENV, "").strip().lower() in ("1", "true", "yes", "on")


def _apply_determinism() -> None:
    if deterministic_mode():
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)


# -- argument grammar ----------------------------------------------------------------

def _common(p: argparse.ArgumentParser, checkpoint: bool = False) -> None:
    p.add_argument("--config", help="JSON config file (missing keys take defaults)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key; repeatable")
    p.add_argument("--out", help="output directory")
    if checkpoint:
        p.add_argument("--checkpoint", required=True, help="checkpoint directory")
        p.add_argument("--allow-config-mismatch", action="store_true",
                       help="load even if overrides change the checkpoint's config hash")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nicegan", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("train", help="train a model; writes checkpoints and log.jsonl under --out")
    _common(p)
    p.add_argument("--checkpoint", help="resume from this checkpoint directory")
    p.add_argument("--dataset", help="dataset root with trainA/trainB (default: synthetic)")

    p = sub.add_parser("translate", help="translate one image or a directory of images")
    _common(p, checkpoint=True)
    p.add_argument("--input", required=True, help="image file or directory")
    p.add_argument("--output", help="output file (single input) or directory")
    p.add_argument("--direction", choices=("x2y", "y2x"), default="x2y")

    p = sub.add_parser("evaluate", help="KID/FID/latent MMD on a dataset split; appends metrics.jsonl")
    _common(p, checkpoint=True)
    p.add_argument("--dataset", help="dataset root (default: the checkpoint's data)")
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--metrics", default="kid,fid", help=f"comma list from {','.join(METRIC_CHOICES)}")
    p.add_argument("--extractor", choices=EXTRACTORS)
    p.add_argument("--extractor-command", help="command for the external_adapter extractor")

    p = sub.add_parser("interpolate", help="decode blends of two latent codes into an image grid")
    _common(p, checkpoint=True)
    p.add_argument("--input-x", required=True)
    p.add_argument("--input-y", required=True)
    p.add_argument("--ts", default="0,0.25,0.5,0.75,1", help="comma list of weights in [0, 1]")

    p = sub.add_parser("latents", help="export pooled latent vectors of both domains to CSV")
    _common(p, checkpoint=True)
    p.add_argument("--dataset", help="dataset root (default: the checkpoint's data)")
    p.add_argument("--split", choices=("train", "test"), default="test")

    p = sub.add_parser("plot", help="loss curves from one log, overlays from several")
    p.add_argument("--log", dest="logs", action="append", required=True, help="log.jsonl; repeatable")
    p.add_argument("--labels", help="comma list of labels, one per log")
    p.add_argument("--out", help="output directory")

    p = sub.add_parser("ablate", help="train and evaluate each cell of the ablation grid")
    _common(p)
    p.add_argument("--dataset", help="dataset root (default: synthetic)")
    p.add_argument("--cells", help="comma list of cell names to run (default: all)")
    p.add_argument("--list", action="store_true", help="print the grid and exit")
    p.add_argument("--no-eval", action="store_true", help="skip metric evaluation per cell")
    return parser


# -- helpers ---------------------------------------------------------------------

def _out_dir(args, default: str = ".") -> str:
    out = args.out or default
    os.makedirs(out, exist_ok=True)
    return out


def _resolve_config(args) -> ExperimentConfig:
    return load_config(args.config, args.overrides)


def _load_model(args, extra: Optional[dict] = None):
    """Checkpoint state, with ``--config``/``--set``/``extra`` applied on top of its stored config."""
    doc = dict(read_manifest(args.checkpoint).get("config", {}))
    if args.config:
        load_config(args.config)  # validates the file on its own
        doc.update(_explicit_keys(args.config))
    for item in args.overrides:
        key, value = parse_override(item)
        doc[key] = value
    doc.update({k: v for k, v in (extra or {}).items() if v is not None})
    cfg = parse_dict(doc)
    return load_checkpoint(args.checkpoint, cfg, allow_config_mismatch=args.allow_config_mismatch)


def _explicit_keys(path: str) -> dict:
    """Only the keys written in the config file, so defaults don't clobber the checkpoint's."""
    with open(path) as fh:
        text = fh.read().strip()
    return json.loads(text) if text else {}


def _image_files(path: str) -> list:
    if os.path.isdir(path):
        names = sorted(n for n in os.listdir(path) if n.lower().endswith((".png", ".jpg", ".jpeg")))
        if not names:
            raise DatasetError(f"no PNG/JPEG images in {path}")
        return [os.path.join(path, n) for n in names]
    if not os.path.exists(path):
        raise DatasetError(f"missing input {path}")
    return [path]


# -- commands --------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    changes = {}
    if args.out:
        changes["out_dir"] = args.out
    if args.dataset:
        changes["dataset_root"] = args.dataset
    if changes:
        cfg = cfg.replace(**changes)
    if not cfg.out_dir:
        raise UsageError("train needs --out (or out_dir in the config)")
    t0 = time.perf_counter()
    state, log = train(cfg, resume=args.checkpoint)
    last = log[-1] if log else {}
    print(f"trained to iteration {state.iteration} in {time.perf_counter() - t0:.1f}s; "
          f"run directory {cfg.out_dir}"
          + (f"; last total_g {last['total_g']:.4f} total_d {last['total_d']:.4f}" if last else ""))
    return EXIT_OK


def cmd_translate(args) -> int:
    model = _load_model(args)
    files = _image_files(args.input)
    single = not os.path.isdir(args.input)
    if single and args.output:
        targets = [args.output]
    else:
        out = args.output if (args.output and not single) else _out_dir(args)
        os.makedirs(out, exist_ok=True)
        targets = [os.path.join(out, f"{os.path.splitext(os.path.basename(f))[0]}_{args.direction}.png")
                   for f in files]
    size = model.cfg.image_size
    for src, dst in zip(files, targets):
        image = load_image(src)
        h, w = image.shape[:2]
        result = analysis.translate(model, prepare_eval(image, size), args.direction)
        out_img = result.translated
        if (h, w) != (size, size):
            out_img = np.clip(resize_bilinear(out_img, (h, w)), -1, 1)
        parent = os.path.dirname(os.path.abspath(dst))
        os.makedirs(parent, exist_ok=True)
        save_image(out_img, dst)
        print(f"{src} -> {dst}")
    return EXIT_OK


def _metric_list(text: str) -> tuple:
    names = tuple(n.strip() for n in text.split(",") if n.strip())
    bad = [n for n in names if n not in METRIC_CHOICES]
    if bad or not names:
        raise UsageError(f"--metrics must be a comma list from {METRIC_CHOICES}, got {text!r}")
    return names


def cmd_evaluate(args) -> int:
    names = _metric_list(args.metrics)
    model = _load_model(args, {"dataset_root": args.dataset, "extractor": args.extractor,
                               "extractor_command": args.extractor_command})
    cfg = model.cfg
    ds_x, ds_y = datasets_for_config(cfg, args.split)
    extractor = metrics.get_extractor(cfg.extractor, command=cfg.extractor_command)
    reports = analysis.evaluate_model(model, ds_x, ds_y, metrics=names, extractor=extractor)
    for r in reports:
        r.extra["split"] = args.split
    path = os.path.join(_out_dir(args), "metrics.jsonl")
    metrics.append_reports(path, reports)
    for r in reports:
        print(json.dumps(r.to_dict()))
    print(f"wrote {len(reports)} records to {path}")
    return EXIT_OK


def cmd_interpolate(args) -> int:
    try:
        ts = [float(t) for t in args.ts.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"--ts must be a comma list of numbers, got {args.ts!r}") from None
    model = _load_model(args)
    size = model.cfg.image_size
    ix = prepare_eval(load_image(args.input_x), size)
    iy = prepare_eval(load_image(args.input_y), size)
    grid = analysis.interpolate(model, ix, iy, ts)
    rows = [[ix] + [g[1] for g in grid] + [iy], [ix] + [g[2] for g in grid] + [iy]]
    out = _out_dir(args)
    path = os.path.join(out, "interpolation.png")
    save_image(analysis.image_grid(rows), path)
    with open(os.path.join(out, "interpolation.json"), "w") as fh:
        json.dump({"ts": ts, "rows": ["generated_x", "generated_y"],
                   "columns": ["input_x"] + [f"t={t:g}" for t in ts] + ["input_y"]}, fh, indent=2)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_latents(args) -> int:
    model = _load_model(args, {"dataset_root": args.dataset})
    ds_x, ds_y = datasets_for_config(model.cfg, args.split)
    path = os.path.join(_out_dir(args), "latents.csv")
    analysis.export_latents(model, {"x": ds_x, "y": ds_y}, path)
    print(f"wrote {len(ds_x) + len(ds_y)} rows to {path}")
    return EXIT_OK


def cmd_plot(args) -> int:
    labels = [s for s in args.labels.split(",")] if args.labels else None
    if labels and len(labels) != len(args.logs):
        raise UsageError(f"{len(labels)} labels given for {len(args.logs)} logs")
    for p in args.logs:
        if not os.path.isfile(p):
            raise DatasetError(f"missing log file {p}")
    files = analysis.plot_curves(args.logs, _out_dir(args), labels)
    for f in files:
        print(f"wrote {f}")
    return EXIT_OK


# -- ablation grid ---------------------------------------------------------------------

def ablation_grid(base: ExperimentConfig) -> list:
    """``(name, overrides)`` per cell: the ablation-table rows, then the training variants."""
    d = base.shared_depth
    return [
        ("full", {}),
        ("no_nice_no_ra", {"nice": False, "ra_enabled": False}),
        ("no_nice", {"nice": False}),
        ("no_ra", {"ra_enabled": False}),
        ("shared_minus", {"shared_depth": d - 1}),
        ("shared_plus", {"shared_depth": d + 1}),
        ("scales_c0_c1", {"scales_enabled": ["c0", "c1"]}),
        ("scales_c0", {"scales_enabled": ["c0"]}),
        ("scales_c0_c2", {"scales_enabled": ["c0", "c2"]}),
        ("variant_joint", {"variant": "JOINT"}),
        ("variant_gen_coupled", {"variant": "GEN_COUPLED"}),
    ]


def plan_ablation(base: ExperimentConfig, out: str, only=None) -> list:
    """Resolve each grid cell to ``(index, name, cfg or None, reason)``.

    Cells whose config is invalid at the base settings, or identical to an
    earlier cell, are kept with ``cfg=None`` and the reason.
    """
    plan, seen = [], {}
    for i, (name, changes) in enumerate(ablation_grid(base)):
        if only and name not in only:
            continue
        try:
            cfg = base.replace(**changes, seed=base.seed + i, out_dir=os.path.join(out, name))
        except ConfigError as exc:
            plan.append((i, name, None, f"invalid at base settings: {exc}"))
            continue
        key = cfg.replace(seed=base.seed, out_dir=None).hash()
        if key in seen:
            plan.append((i, name, None, f"same as {seen[key]}"))
            continue
        seen[key] = name
        plan.append((i, name, cfg, ""))
    return plan


def cmd_ablate(args) -> int:
    base = _resolve_config(args)
    if args.dataset:
        base = base.replace(dataset_root=args.dataset)
    out = args.out or base.out_dir
    if not out:
        raise UsageError("ablate needs --out (or out_dir in the config)")
    names = [n for n, _ in ablation_grid(base)]
    only = None
    if args.cells:
        only = [c.strip() for c in args.cells.split(",") if c.strip()]
        bad = [c for c in only if c not in names]
        if bad:
            raise UsageError(f"unknown cells {bad}; grid is {names}")
    plan = plan_ablation(base, out, only)
    if args.list:
        for i, name, cfg, why in plan:
            print(f"{i:2d} {name:22s} " + (f"seed={cfg.seed}" if cfg else f"skipped ({why})"))
        return EXIT_OK
    os.makedirs(out, exist_ok=True)
    summary_path = os.path.join(out, "ablation.jsonl")
    for i, name, cfg, why in plan:
        record = {"cell": name, "index": i}
        if cfg is None:
            record["skipped"] = why
        else:
            try:
                state, _ = train(cfg)
            except NonFiniteLossError as exc:
                record["aborted"] = str(exc)
                state = None
            if state is not None and not args.no_eval:
                tx, ty = datasets_for_config(cfg, "test")
                reports = analysis.evaluate_model(state, tx, ty, metrics=("kid", "fid", "mmd"))
                metrics.append_reports(os.path.join(cfg.out_dir, "metrics.jsonl"), reports)
                for r in reports:
                    key = r.name + ("_" + r.extra["direction"] if "direction" in r.extra else "")
                    record[key] = r.value
            record["seed"] = cfg.seed
        with open(summary_path, "a") as fh:
            fh.write(json.dumps(record) + "\n")
        print(json.dumps(record))
    return EXIT_OK


COMMANDS = {"train": cmd_train, "translate": cmd_translate, "evaluate": cmd_evaluate,
            "interpolate": cmd_interpolate, "latents": cmd_latents, "plot": cmd_plot,
            "ablate": cmd_ablate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    _apply_determinism()
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"nicegan {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, ConfigMismatchError) as exc:
        print(f"nicegan {args.command}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, ImageSizeError, CheckpointError, NonFiniteLossError,
            metrics.CapabilityError, metrics.FIDNumericError, OSError, ValueError, RuntimeError) as exc:
        print(f"nicegan {args.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
