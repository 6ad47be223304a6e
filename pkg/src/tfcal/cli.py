"""Command-line entry point: ``tfcal <command> [flags]``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import data as data_mod
from . import trainer
from .config import ConfigError, TrainConfig, load_data_config, load_train_config
from .model import load_checkpoint, save_checkpoint
from .spectral import NumericalIntegrityError
from .stylecal import UncalibratedModelError
from .tfc import TensorFormatError

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_MISSING = 4
EXIT_FORMAT = 5
EXIT_NUMERIC = 6
EXIT_UNCALIBRATED = 7

EXIT_CODES = (
    (EXIT_OK, "ok", "success"),
    (EXIT_INTERNAL, "internal", "unexpected failure"),
    (EXIT_USAGE, "usage", "unknown command or flag"),
    (EXIT_CONFIG, "config", "malformed config, unknown config key or bad override"),
    (EXIT_MISSING, "missing-file", "a required file or directory does not exist"),
    (EXIT_FORMAT, "format", "corrupt tensor, dataset or checkpoint file"),
    (EXIT_NUMERIC, "numeric", "training diverged or reconstruction lost integrity"),
    (EXIT_UNCALIBRATED, "uncalibrated", "calibrated evaluation without a source prototype"),
)

OUTPUTS_FILE = "outputs.json"


def _epilog() -> str:
    lines = ["exit codes:"]
    lines += [f"  {code}  {name:<13} {text}" for code, name, text in EXIT_CODES]
    lines += ["", "On failure one line 'tfcal-error: <category>: <message>' is written to stderr.",
              "TFCAL_PRECISION=single|double overrides the configured precision."]
    return "\n".join(lines)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _report("usage", message)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    p = _Parser(prog="tfcal", description="Amplitude-space style calibration experiments.",
                epilog=_epilog(), formatter_class=fmt)
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def add(name, help_text):
        return sub.add_parser(name, help=help_text, description=help_text, epilog=_epilog(), formatter_class=fmt)

    def config_flags(sp, what):
        sp.add_argument("--config", help=f"{what} JSON file (defaults apply when omitted)")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-key override applied after the file, repeatable")

    sp = add("gen-data", "generate the synthetic multi-domain dataset")
    config_flags(sp, "data spec")
    sp.add_argument("--out", required=True, help="dataset directory")
    sp.add_argument("--layout", choices=("packed", "per-sample"), default="packed", help="tensor file layout")

    sp = add("train", "train one model and evaluate it on the held-out domain")
    config_flags(sp, "run")
    sp.add_argument("--out", required=True, help="run directory (checkpoint, prototype, report.json)")

    sp = add("eval", "evaluate a checkpoint on its held-out domain")
    sp.add_argument("--ckpt", required=True, help="checkpoint directory")
    sp.add_argument("--tau", type=float, default=0.5, help="test-time calibration strength (default 0.5)")
    sp.add_argument("--calibrated", action="store_true", help="calibrate toward the stored prototype")
    sp.add_argument("--dataset", help="dataset directory (default: the one in the checkpoint config)")
    sp.add_argument("--out", help="where eval.json goes (default: the checkpoint directory)")

    for name, text in (("ablate", "run the component ablation grid"),
                       ("sweep", "sweep calibration strength or insertion block")):
        sp = add(name, text)
        config_flags(sp, "base run")
        sp.add_argument("--out", required=True, help="report directory (JSON and CSV)")
        sp.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
        sp.add_argument("--seeds", default="0,1,2", help="comma-separated seeds")
        if name == "sweep":
            sp.add_argument("--axis", choices=("strength", "layer"), default="strength", help="sweep axis")

    sp = add("export", "dump insertion-layer features as CSV")
    sp.add_argument("--ckpt", required=True, help="checkpoint directory")
    sp.add_argument("--stage", choices=("pre-style", "post-style"), default="pre-style",
                    help="features before or after test-time calibration")
    sp.add_argument("--tau", type=float, default=0.5, help="calibration strength for post-style")
    sp.add_argument("--dataset", help="dataset directory (default: the one in the checkpoint config)")
    sp.add_argument("--out", required=True, help="output directory for embeddings.csv")

    sp = add("inspect", "summarize a checkpoint and its prototype")
    sp.add_argument("--ckpt", required=True, help="checkpoint directory")
    return p


def _report(category: str, message: str, detail: str = "") -> None:
    print(f"tfcal-error: {category}: {' '.join(str(message).split())}", file=sys.stderr)
    if detail:
        print(detail, file=sys.stderr)


def _write_outputs(out: str, command: str, config, files) -> None:
    with open(os.path.join(out, OUTPUTS_FILE), "w") as fh:
        json.dump({"command": command, "config": config, "files": sorted(files)}, fh, indent=1)


def _seeds(text: str):
    try:
        return tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError as exc:
        raise ConfigError(f"--seeds must be comma-separated integers, got {text!r}") from exc


def _eval_dataset(ckpt, override):
    cfg = TrainConfig.from_dict(ckpt.config)
    if override:
        cfg = cfg.replace(dataset=override)
    _, _, test = trainer.prepare_splits(cfg)
    return cfg, test


def cmd_gen_data(args) -> None:
    spec = load_data_config(args.config, args.overrides)
    ds = data_mod.generate(spec)
    data_mod.save(ds, args.out, args.layout)
    with open(os.path.join(args.out, "spec.json"), "w") as fh:
        json.dump({"version": 1, **spec.to_dict()}, fh, indent=1)
    _write_outputs(args.out, "gen-data", spec.to_dict(), os.listdir(args.out) + [OUTPUTS_FILE])
    print(f"wrote {len(ds)} samples ({len(ds.class_names)} classes, {len(ds.domain_names)} domains) to {args.out}")


def cmd_train(args) -> None:
    cfg = load_train_config(args.config, args.overrides)
    ckpt, report = trainer.train(cfg)
    save_checkpoint(ckpt, args.out)
    report.save(os.path.join(args.out, "report.json"))
    with open(os.path.join(args.out, "config.json"), "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=1)
    _write_outputs(args.out, "train", cfg.to_dict(), os.listdir(args.out) + [OUTPUTS_FILE])
    print(f"target accuracy {report.target_acc:.4f} (uncalibrated {report.target_acc_uncal:.4f})")


def cmd_eval(args) -> None:
    ckpt = load_checkpoint(args.ckpt)
    cfg, test = _eval_dataset(ckpt, args.dataset)
    res = trainer.evaluate(ckpt, test, calibrated=args.calibrated, tau=args.tau)
    out = args.out or args.ckpt
    os.makedirs(out, exist_ok=True)
    doc = {"checkpoint": args.ckpt, "calibrated": args.calibrated, "tau": args.tau,
           "target_domain": cfg.target_domain, "config": cfg.to_dict(), **res}
    with open(os.path.join(out, "eval.json"), "w") as fh:
        json.dump(doc, fh, indent=1)
    print(f"target accuracy {res['accuracy']:.4f} (n={res['n']}, calibrated={args.calibrated}, tau={args.tau})")


def cmd_grid(args) -> None:
    cfg = load_train_config(args.config, args.overrides)
    dataset = data_mod.load(cfg.dataset)
    seeds = _seeds(args.seeds)
    if args.command == "ablate":
        report = trainer.ablate(cfg, dataset, seeds, args.jobs)
    else:
        report = trainer.sweep(cfg, args.axis, dataset, seeds, args.jobs)
    report.save(args.out)
    _write_outputs(args.out, args.command, cfg.to_dict(), [f"{report.kind}.json", f"{report.kind}.csv", OUTPUTS_FILE])
    for c in report.cells:
        print(f"{c['cell']}: mean {c['mean']:.4f} std {c['std']:.4f} over seeds {c['seeds']}")


def cmd_export(args) -> None:
    ckpt = load_checkpoint(args.ckpt)
    cfg = TrainConfig.from_dict(ckpt.config)
    ds = data_mod.load(args.dataset or cfg.dataset)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "embeddings.csv")
    matrix, _, _ = trainer.export_embeddings(ckpt, ds, args.stage, args.tau, path)
    _write_outputs(args.out, "export", {"checkpoint": args.ckpt, "stage": args.stage, "tau": args.tau,
                                        "config": ckpt.config}, ["embeddings.csv", OUTPUTS_FILE])
    print(f"wrote {matrix.shape[0]} x {matrix.shape[1]} {args.stage} features to {path}")


def cmd_inspect(args) -> None:
    ckpt = load_checkpoint(args.ckpt)
    print(f"config digest: {ckpt.digest}")
    print(f"parameters: {ckpt.model.num_parameters()}")
    if ckpt.prototype is None:
        print("prototype: none")
        return
    p = ckpt.prototype
    print(f"prototype shape: {tuple(p.shape)}")
    print(f"prototype epoch: {ckpt.prototype_epoch}")
    print(f"prototype bins: min {float(p.min()):.6g} mean {float(np.mean(p, dtype=np.float64)):.6g} "
          f"max {float(p.max()):.6g}")


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_grid,
            "sweep": cmd_grid, "export": cmd_export, "inspect": cmd_inspect}


def _classify(exc: BaseException):
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG, "config"
    if isinstance(exc, FileNotFoundError):
        return EXIT_MISSING, "missing-file"
    if isinstance(exc, (TensorFormatError, data_mod.DatasetFormatError)):
        return EXIT_FORMAT, "format"
    if isinstance(exc, UncalibratedModelError):
        return EXIT_UNCALIBRATED, "uncalibrated"
    if isinstance(exc, (trainer.DivergenceError, NumericalIntegrityError)):
        return EXIT_NUMERIC, "numeric"
    if isinstance(exc, (ValueError, KeyError, json.JSONDecodeError)):
        return EXIT_FORMAT, "format"
    return EXIT_INTERNAL, "internal"


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    try:
        COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001 - every failure maps to an exit code
        code, category = _classify(exc)
        _report(category, exc, f"{args.command} failed: {type(exc).__name__}")
        return code
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
