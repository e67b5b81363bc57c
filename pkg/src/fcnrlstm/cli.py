"""Command-line entry point: ``fcnrlstm <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 data or format error, 3 grad-check failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as config_mod
from . import gradcheck, synthdata
from .checkpoint import load_checkpoint
from .data import load_dataset, read_manifest, save_dataset
from .errors import FormatError, InvalidArgumentError
from .experiments import ExperimentConfig, ablation, format_table
from .model import VARIANTS, CountingModel, ModelConfig
from .training import TrainConfig, evaluate, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_GRADCHECK = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _settings(args) -> dict:
    raw = config_mod.load_file(args.config) if getattr(args, "config", None) else {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        raw[k.strip()] = v.strip()
    return config_mod.typed(raw)


def _add_config_flags(p):
    p.add_argument("--config", help="key=value settings file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fcnrlstm", description="Vehicle counting with density FCNs and residual LSTMs")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--sequences", type=int)
    p.add_argument("--seed", type=int, help="data seed")
    p.add_argument("--shuffle", action="store_true", help="shuffle frame order inside every sequence")
    _add_config_flags(p)

    p = sub.add_parser("train", help="train one variant")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", help="checkpoint to continue from (usually OUT/last.ckpt)")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", action="append", choices=("train", "val", "test"))
    p.add_argument("--predictions", help="write per-frame predictions as CSV")
    p.add_argument("--json", action="store_true", help="print the report as JSON")

    p = sub.add_parser("grad-check", help="finite-difference gradient checks in float64")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=gradcheck.DEFAULT_TOL)

    p = sub.add_parser("ablate", help="train every variant on one dataset and tabulate test error")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variants", default=",".join(VARIANTS))
    p.add_argument("--epochs", type=int)
    _add_config_flags(p)
    return parser


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    s = _settings(args)
    scene = config_mod.scene_config(s)
    opts = config_mod.data_options(s)
    sequences = args.sequences if args.sequences is not None else opts["sequences"]
    seed = args.seed if args.seed is not None else opts["data_seed"]
    labeled = synthdata.generate_dataset(scene, sequences, seed)
    parts = synthdata.split(labeled, opts["split"], seed)
    if args.shuffle or opts["shuffle"]:
        parts = tuple(synthdata.shuffle_temporal(p, seed + 1 + k) for k, p in enumerate(parts))
    meta = {"height": scene.height, "width": scene.width, "seed": seed,
            "shuffled": int(bool(args.shuffle or opts["shuffle"])), "scene": scene.to_dict()}
    save_dataset(args.out, dict(zip(("train", "val", "test"), parts)), meta, opts["kappa"])
    print(f"wrote {sequences} sequences ({', '.join(f'{n} {len(p)}' for n, p in zip(('train', 'val', 'test'), parts))})"
          f" to {args.out}")
    return EXIT_OK


def _model_config(s, variant, unroll, height, width) -> ModelConfig:
    return ModelConfig(variant=variant, height=height, width=width, fcn=config_mod.fcn_config(s),
                       unroll=unroll, **config_mod.model_options(s))


def _dataset_size(data) -> tuple[int, int]:
    header, _ = read_manifest(data)
    try:
        return int(header["height"]), int(header["width"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{data}: manifest lacks height/width") from exc


def cmd_train(args) -> int:
    s = _settings(args)
    over = {k: v for k, v in (("variant", args.variant), ("epochs", args.epochs)) if v is not None}
    tcfg = config_mod.train_config(s, **over)
    splits = load_dataset(args.data, tcfg.count_target)
    h, w = _dataset_size(args.data)
    model = CountingModel(_model_config(s, tcfg.variant, tcfg.unroll, h, w))
    res = train(model, splits["train"], splits["val"], tcfg, out_dir=args.out, resume=args.resume)
    last = res.history[-1] if res.history else {}
    print(f"{tcfg.variant}: {len(res.history)} epochs, {res.iterations} iterations, "
          f"best val MAE {res.best_val_mae} at epoch {res.best_epoch}; final train MAE {last.get('train_mae')}")
    print(f"checkpoints and curve.csv in {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    tc = ck.train_config or {}
    splits = load_dataset(args.data, tc.get("count_target", "labels"))
    names = args.split or ["test"]
    report = {"variant": ck.model.variant, "splits": {}}
    rows = []
    for name in names:
        if not splits[name]:
            raise FormatError(f"{args.data}: split {name!r} is empty")
        r = evaluate(ck.model, splits[name])
        report["splits"][name] = {"mae": r["mae"], "mse": r["mse"], "frames": int(len(r["true"]))}
        rows += [(name, p, t) for p, t in zip(r["pred"], r["true"])]
    if args.predictions:
        with open(args.predictions, "w") as fh:
            fh.write("split,predicted,true\n")
            fh.writelines(f"{n},{p:.10g},{t:.10g}\n" for n, p, t in rows)
    if args.json:
        print(json.dumps(report, indent=2))
    else:
        for name, r in report["splits"].items():
            print(f"{report['variant']} {name}: MAE {r['mae']:.6f}  MSE {r['mse']:.6f}  ({r['frames']} frames)")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    results = gradcheck.run_all(args.seed)
    ok = True
    for kind, err in results.items():
        passed = err < args.tol
        ok &= passed
        print(f"{kind:<12} max rel err {err:.3e}  {'ok' if passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_GRADCHECK


def cmd_ablate(args) -> int:
    s = _settings(args)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    for v in variants:
        if v not in VARIANTS:
            raise UsageError(f"unknown variant {v!r}; choose from {', '.join(VARIANTS)}")
    tcfg = config_mod.train_config(s, **({"epochs": args.epochs} if args.epochs is not None else {}))
    splits = load_dataset(args.data, tcfg.count_target)
    h, w = _dataset_size(args.data)
    fcn = config_mod.fcn_config(s)
    mo = config_mod.model_options(s)
    exp = ExperimentConfig(scene=synthdata.SceneConfig(height=h, width=w), base_channels=fcn.base_channels,
                           atrous_layers=fcn.atrous_layers, hidden=mo["hidden"], lstm_layers=mo["lstm_layers"],
                           lstm_input_downsample=mo["lstm_input_downsample"], model_seed=mo["seed"], train=tcfg)
    results = ablation(splits, exp, variants, out_dir=args.out)
    table = format_table(results)
    Path(args.out, "ablation.txt").write_text(table + "\n")
    print(table)
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "grad-check": cmd_grad_check, "ablate": cmd_ablate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().strip())
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(asctime)s %(levelname)s %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except InvalidArgumentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
