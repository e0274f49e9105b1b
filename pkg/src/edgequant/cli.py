"""Command-line interface: ``edgequant <command> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 model/state error.
Output is plain text (no color), so ``NO_COLOR`` is honoured trivially.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import container, datakit, evalkit, quantizer, trainer
from .builders import FAMILIES, build_architecture
from .engine import Executor
from .errors import CalibrationRequiredError, EdgeQuantError, InvalidArgumentError
from .graph import param_count

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_MODEL = 0, 1, 2, 3

DEFAULT_CONFIG = {
    "family": "tiny_cnn",
    "num_classes": 4,
    "input_size": None,
    "tiny": {"width": 8, "depth": 2, "batchnorm": True},
    "seed": 0,
    "threads": None,
    "train": {},
    "split": {"ratios": list(datakit.DEFAULT_RATIOS), "stratified": True},
    "calibration": {"batches": quantizer.DEFAULT_CALIBRATION_BATCHES, "batch_size": 32},
    "quantization": {"per_channel": True},
}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliError(EXIT_USAGE, f"{self.prog}: {message}")


# --- config ------------------------------------------------------------------


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    path = getattr(args, "config", None)
    if path:
        try:
            cfg = _merge(cfg, json.loads(Path(path).read_text()))
        except FileNotFoundError:
            raise CliError(EXIT_USAGE, f"--config: {path} not found") from None
        except json.JSONDecodeError as e:
            raise CliError(EXIT_USAGE, f"--config: {path} is not valid JSON ({e})") from None
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "threads", None) is not None:
        cfg["threads"] = args.threads
    cfg["threads"] = cfg["threads"] or os.cpu_count() or 1
    for key in ("epochs", "batch_size", "lr0", "momentum", "lr_step_epochs", "lr_gamma", "weight_decay"):
        v = getattr(args, key, None)
        if v is not None:
            cfg["train"][key] = v
    cfg["train"].setdefault("seed", cfg["seed"])
    cfg["split"].setdefault("seed", cfg["seed"])
    return cfg


# --- helpers -----------------------------------------------------------------


def _load_model(path):
    try:
        return container.load(path)
    except FileNotFoundError:
        raise CliError(EXIT_MODEL, f"--model: {path} not found") from None
    except EdgeQuantError as e:
        raise CliError(EXIT_MODEL, f"--model: {path}: {e}") from None


def _load_data(args, cfg, size):
    try:
        if getattr(args, "synth", None):
            kw = datakit.parse_synth_spec(args.synth)
            if "seed=" not in args.synth:
                kw["seed"] = cfg["seed"]
            kw["size"] = tuple(size)
            ds = datakit.synth_generate(**kw)
        elif getattr(args, "data", None):
            p = Path(args.data)
            ds = datakit.load_manifest(p, size) if p.is_file() else datakit.load_image_dir(p, size)
        else:
            raise CliError(EXIT_USAGE, "one of --data or --synth is required")
    except CliError:
        raise
    except (EdgeQuantError, OSError) as e:
        raise CliError(EXIT_DATA, f"data: {e}") from None
    return ds


def _split(ds, cfg):
    """Three-way split per the config; the sizes are recorded in ``cfg`` for reports."""
    spec = datakit.SplitSpec(tuple(cfg["split"]["ratios"]), cfg["split"]["seed"], cfg["split"]["stratified"])
    parts = dict(zip(("train", "val", "test"), datakit.split(ds, spec)))
    cfg["split_sizes"] = {k: len(v) for k, v in parts.items()}
    return parts


def _subset(ds, which: str, cfg):
    if which == "all":
        cfg["split_sizes"] = {"all": len(ds)}
        return ds
    parts = _split(ds, cfg)
    if len(parts[which]) == 0:
        raise CliError(EXIT_DATA, f"data: the '{which}' split is empty")
    return parts[which]


def _print(*a):
    print(*a, flush=True)


# --- commands ----------------------------------------------------------------


def cmd_model_build(args, cfg):
    tiny = {}
    if args.family == "tiny_cnn":
        tiny = dict(cfg["tiny"])
        if args.width is not None:
            tiny["width"] = args.width
        if args.depth is not None:
            tiny["depth"] = args.depth
    size = tuple(args.input_size) if args.input_size else cfg.get("input_size")
    # weights are only drawn when they will be written out
    try:
        g = build_architecture(args.family, args.classes, size, init_seed=cfg["seed"], materialize=bool(args.out), **tiny)
    except InvalidArgumentError as e:
        raise CliError(EXIT_USAGE, f"model build: {e}") from None
    _print(f"params: {param_count(g)}")
    if args.out:
        n = container.save(g, args.out)
        _print(f"wrote {args.out} ({n} bytes)")


def cmd_model_info(args, cfg):
    g = _load_model(args.model)
    md = g.metadata
    _print(f"family: {md.get('family')}")
    _print(f"quantization: {g.quantization}")
    _print(f"input: {list(g.input_shape)}")
    _print(f"classes: {md.get('num_classes')} {md.get('class_names', '')}")
    _print(f"nodes: {len(g.nodes)}")
    _print(f"params: {param_count(g)}")
    _print(f"size_bytes: {container.size_bytes(g)}")


def cmd_train(args, cfg):
    g = _load_model(args.model)
    ds = _load_data(args, cfg, g.input_shape[:2])
    if ds.num_classes != g.metadata["num_classes"]:
        if not args.replace_head:
            raise CliError(
                EXIT_DATA,
                f"data has {ds.num_classes} classes but the model head has {g.metadata['num_classes']} "
                "(pass --replace-head to fine-tune with a new head)",
            )
        g = trainer.replace_head(g, ds.num_classes, cfg["seed"])
    parts = _split(ds, cfg)
    tr, va = parts["train"], parts["val"]
    tcfg = trainer.TrainConfig(**cfg["train"])
    out, report = trainer.train(g, tr, va if len(va) else None, tcfg, checkpoint=args.out)
    report.config = cfg
    _print(report.to_text())
    _print(f"best epoch {report.best_epoch} (val acc {report.best_val_acc:.4f}); wrote {args.out}")
    rpath = args.report or str(args.out) + ".train.json"
    Path(rpath).write_text(report.to_json() + "\n")


def cmd_calibrate(args, cfg):
    g = _load_model(args.model)
    ds = _subset(_load_data(args, cfg, g.input_shape[:2]), args.subset, cfg)
    budget = args.batches or cfg["calibration"]["batches"]
    stats = quantizer.calibrate(g, quantizer.batches_of(ds.images, cfg["calibration"]["batch_size"]), budget)
    stats.save(args.out)
    _print(f"calibrated {len(stats.ranges)} tensors; wrote {args.out}")


def cmd_quantize(args, cfg):
    g = _load_model(args.model)
    per_channel = cfg["quantization"]["per_channel"] and not args.per_tensor
    if args.mode == "fp16":
        q = quantizer.quantize_fp16(g)
    elif args.mode == "dynamic":
        q = quantizer.quantize_dynamic(g, per_channel=per_channel)
    else:
        if not args.stats:
            raise CliError(EXIT_MODEL, "calibration stats required (--stats) for --mode full")
        try:
            stats = quantizer.CalibrationStats.load(args.stats)
        except FileNotFoundError:
            raise CliError(EXIT_DATA, f"--stats: {args.stats} not found") from None
        except InvalidArgumentError as e:
            raise CliError(EXIT_DATA, f"--stats: {args.stats}: {e}") from None
        q = quantizer.quantize_full(g, stats, per_channel=per_channel)
    n = container.save(q, args.out)
    base = container.size_bytes(g)
    _print(f"{q.quantization}: {n} bytes ({n / base:.4f} of {base}); wrote {args.out}")


def cmd_eval(args, cfg):
    g = _load_model(args.model)
    ds = _subset(_load_data(args, cfg, g.input_shape[:2]), args.subset, cfg)
    report = evalkit.evaluate(g, ds, args.mode, model=args.name, threads=cfg["threads"], config=cfg)
    _print(
        f"{report.model_id}: acc {report.accuracy:.4f} pr {report.precision:.4f} re {report.recall:.4f} "
        f"f1 {report.f1:.4f} size {report.size_bytes} bytes ({report.num_samples} samples)"
    )
    if args.report:
        report.save(args.report)


def _load_reports(paths):
    out = []
    for p in paths:
        try:
            out.append(evalkit.EvalReport.load(p))
        except FileNotFoundError:
            raise CliError(EXIT_DATA, f"report {p} not found") from None
        except (InvalidArgumentError, TypeError) as e:
            raise CliError(EXIT_DATA, f"report {p}: {e}") from None
    return out


def cmd_compare(args, cfg):
    table = evalkit.compare(_load_reports(args.reports))
    _print(table.to_text())
    if args.out:
        Path(args.out).write_text(table.to_csv())


def cmd_select(args, cfg):
    try:
        policy = evalkit.parse_policy(args.policy)
    except InvalidArgumentError as e:
        raise CliError(EXIT_USAGE, f"--policy: {e}") from None
    chosen = evalkit.select_model(_load_reports(args.reports), policy)
    _print(chosen)


def cmd_predict(args, cfg):
    g = _load_model(args.model)
    try:
        img = datakit.read_image(args.image)
    except (EdgeQuantError, OSError) as e:
        raise CliError(EXIT_DATA, f"--image: {e}") from None
    h, w, _ = g.input_shape
    x = datakit.resize_bilinear(img, h, w)[None]
    probs = Executor(g, threads=1).run(x)[0]
    names = g.metadata.get("class_names") or [f"class_{i}" for i in range(len(probs))]
    best = int(np.argmax(probs))
    _print(names[best])
    for name, p in zip(names, probs):
        _print(f"  {name}: {p:.6f}")


# --- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration (flags override it)")
    common.add_argument("--seed", type=int, help="seed for every randomized step (default 0)")
    common.add_argument("--threads", type=int, help="worker threads (default: all cores)")
    common.add_argument("-v", "--verbose", action="store_true")

    data = argparse.ArgumentParser(add_help=False)
    src = data.add_mutually_exclusive_group()
    src.add_argument("--data", help="class-per-folder directory or a manifest file")
    src.add_argument("--synth", help="synthetic data, e.g. classes=4,n=500,noise=0.1,seed=7")

    p = _Parser(prog="edgequant", description="Post-training quantization toolkit")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    model = sub.add_parser("model", help="build or inspect model containers")
    msub = model.add_subparsers(dest="model_command", required=True, parser_class=_Parser)
    b = msub.add_parser("build", parents=[common])
    b.add_argument("--family", required=True, choices=FAMILIES)
    b.add_argument("--classes", type=int, required=True)
    b.add_argument("--input-size", type=int, nargs=2, metavar=("H", "W"))
    b.add_argument("--width", type=int, help="tiny_cnn base width")
    b.add_argument("--depth", type=int, help="tiny_cnn conv stages")
    b.add_argument("--out")
    b.set_defaults(func=cmd_model_build)
    i = msub.add_parser("info", parents=[common])
    i.add_argument("model")
    i.set_defaults(func=cmd_model_info)

    t = sub.add_parser("train", parents=[common, data])
    t.add_argument("--model", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--report")
    t.add_argument("--replace-head", action="store_true")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr0", type=float)
    t.add_argument("--momentum", type=float)
    t.add_argument("--lr-step-epochs", type=int)
    t.add_argument("--lr-gamma", type=float)
    t.add_argument("--weight-decay", type=float)
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("calibrate", parents=[common, data])
    c.add_argument("--model", required=True)
    c.add_argument("--batches", type=int)
    c.add_argument("--subset", choices=("all", "train", "val", "test"), default="all")
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_calibrate)

    q = sub.add_parser("quantize", parents=[common])
    q.add_argument("--model", required=True)
    q.add_argument("--mode", required=True, choices=("fp16", "dynamic", "full"))
    q.add_argument("--stats")
    q.add_argument("--per-tensor", action="store_true", help="one scale per conv kernel")
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_quantize)

    e = sub.add_parser("eval", parents=[common, data])
    e.add_argument("--model", required=True)
    e.add_argument("--mode", default="auto", choices=("auto", "f32", "fp16", "dynamic", "full-int"))
    e.add_argument("--subset", choices=("all", "train", "val", "test"), default="all")
    e.add_argument("--name", help="model name used to group reports")
    e.add_argument("--report")
    e.set_defaults(func=cmd_eval)

    cm = sub.add_parser("compare", parents=[common])
    cm.add_argument("reports", nargs="+")
    cm.add_argument("--out", help="CSV output path")
    cm.set_defaults(func=cmd_compare)

    s = sub.add_parser("select", parents=[common])
    s.add_argument("--policy", required=True, help="size:<f1 floor> or accuracy")
    s.add_argument("reports", nargs="+")
    s.set_defaults(func=cmd_select)

    pr = sub.add_parser("predict", parents=[common])
    pr.add_argument("--model", required=True)
    pr.add_argument("--image", required=True)
    pr.set_defaults(func=cmd_predict)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        cfg = load_config(args)
        args.func(args, cfg)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except CalibrationRequiredError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MODEL
    except EdgeQuantError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_MODEL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
