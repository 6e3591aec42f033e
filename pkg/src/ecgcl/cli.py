"""Command-line entry point: synth, pretrain, lineval, finetune, distances, gradcheck."""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

from . import autodiff as ad
from . import gradcheck
from .metrics import MetricsLog
from .signals import SyntheticConfig, generate_synthetic, read_manifest
from .trainer import (METHODS, TrainConfig, checkpoint_state, finetune, linear_eval, patient_distances,
                      pretrain)


class ConfigError(ValueError):
    pass


# flag name -> TrainConfig field
TRAIN_FLAGS = {
    "method": ("method", str, "pretraining method: " + ", ".join(METHODS)),
    "e": ("E", int, "embedding dimension E"),
    "tau": ("tau", float, "softmax temperature"),
    "tau_d": ("tau_d", float, "BYOL target decay rate"),
    "lr": ("lr", float, "Adam learning rate"),
    "batch_size": ("batch_size", int, "mini-batch size K"),
    "epochs": ("epochs", int, "training epochs"),
    "f": ("F", float, "labelled fraction of training frames"),
    "seed": ("seed", int, "master random seed"),
    "split_seed": ("split_seed", int, "seed of the patient split"),
    "strategy": ("strategy", str, "view strategy, e.g. cmsc(v=2) or cmlc(leads=II,V2,aVL,aVR)"),
    "chains": ("chains", str, "perturbation chain applied to every view (cmsc/cmlc/cmsmlc)"),
    "chain_a": ("chain_a", str, "perturbation chain of view A (simclr/byol)"),
    "chain_b": ("chain_b", str, "perturbation chain of view B (simclr/byol)"),
    "dropout": ("dropout_p", float, "dropout probability"),
    "embed_pre_relu": ("embed_pre_relu", "bool", "use the embedding before Layer 4's ReLU"),
    "exclude_same_patient_denominator": ("exclude_same_patient_denominator", "bool",
                                         "drop other same-patient columns from softmax denominators"),
    "group_by_patient": ("group_by_patient", "bool", "batch each patient's items together"),
    "fraction_by_patient": ("fraction_by_patient", "bool", "subsample F over patients instead of frames"),
}

SYNTH_FLAGS = {
    "patients": ("num_patients", int, "number of patients"),
    "frames": ("frames_per_patient", int, "segments per patient and lead"),
    "leads": ("num_leads", int, "leads per patient"),
    "classes": ("num_classes", int, "number of classes"),
    "s": ("S", int, "samples per frame"),
    "separation": ("class_separation", float, "class template amplitude"),
    "strength": ("patient_signature_strength", float, "patient signature amplitude"),
    "seed": ("seed", int, "random seed"),
}

COMMANDS = {
    "pretrain": ("method", "e", "tau", "tau_d", "lr", "batch_size", "epochs", "seed", "split_seed", "strategy",
                 "chains", "chain_a", "chain_b", "dropout", "embed_pre_relu",
                 "exclude_same_patient_denominator", "group_by_patient"),
    "lineval": ("e", "lr", "batch_size", "epochs", "f", "seed", "split_seed", "dropout", "embed_pre_relu",
                "fraction_by_patient"),
    "finetune": ("e", "lr", "batch_size", "epochs", "f", "seed", "split_seed", "dropout", "embed_pre_relu",
                 "fraction_by_patient"),
    "distances": ("seed", "split_seed", "embed_pre_relu"),
}

# E=None means "read it from the checkpoint"
DOWNSTREAM_DEFAULTS = {"lr": 1e-3, "epochs": 20, "e": None}


def _bool(text):
    if isinstance(text, bool):
        return text
    if text.lower() in ("1", "true", "yes", "on"):
        return True
    if text.lower() in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _defaults(command):
    if command == "synth":
        base = SyntheticConfig()
        return {flag: getattr(base, field) for flag, (field, _, _) in SYNTH_FLAGS.items()}
    base = TrainConfig()
    out = {flag: getattr(base, TRAIN_FLAGS[flag][0]) for flag in COMMANDS[command]}
    if command in ("lineval", "finetune"):
        out.update({k: v for k, v in DOWNSTREAM_DEFAULTS.items() if k in out})
    return out


def _add_flags(sub, command, table, keys):
    for flag in keys:
        _, kind, help_text = table[flag]
        if flag == "e" and command in ("lineval", "finetune"):
            help_text += "; None takes it from the checkpoint"
        sub.add_argument(f"--{flag.replace('_', '-')}", dest=flag, type=_bool if kind == "bool" else kind,
                         metavar=None if kind != "bool" else "BOOL", help=help_text)


def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="ecgcl", description=__doc__, formatter_class=fmt)
    subs = parser.add_subparsers(dest="command", required=True)
    parser.subcommands = subs.choices

    synth = subs.add_parser("synth", help="generate a synthetic corpus", formatter_class=fmt)
    _add_flags(synth, "synth", SYNTH_FLAGS, SYNTH_FLAGS)
    synth.add_argument("--out", required=True, help="output data directory")
    synth.add_argument("--config", help="JSON file with flag values")

    for command in ("pretrain", "lineval", "finetune", "distances"):
        sub = subs.add_parser(command, help=f"run {command}", formatter_class=fmt)
        _add_flags(sub, command, TRAIN_FLAGS, COMMANDS[command])
        sub.add_argument("--data", required=True, help="directory holding manifest.json/manifest.jsonl")
        sub.add_argument("--out", default="runs", help="parent directory for run directories")
        sub.add_argument("--run-name", help="run directory name (default: <command>-<timestamp>-seed<seed>)")
        sub.add_argument("--force", action="store_true", help="overwrite an existing run directory")
        sub.add_argument("--config", help="JSON file with flag values")
        if command != "pretrain":
            sub.add_argument("--checkpoint", required=True, help="pretraining checkpoint file")
        if command == "distances":
            sub.add_argument("--split", default="val", choices=("train", "val", "test"),
                             help="patient split to analyse")
        sub.set_defaults(**_defaults(command))
    synth.set_defaults(**_defaults("synth"))

    grad = subs.add_parser("gradcheck", help="finite-difference gradient checks", formatter_class=fmt)
    grad.add_argument("--all", action="store_true", help="check every operator")
    grad.add_argument("--op", action="append", choices=sorted(gradcheck.CASES), help="operator to check")
    grad.add_argument("--instances", type=int, default=5, help="random instances per operator")
    grad.add_argument("--seed", type=int, default=0, help="random seed")
    return parser


def _load_config_file(path, allowed):
    with open(path) as fh:
        data = json.load(fh)
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError("unknown config keys: " + ", ".join(unknown))
    return data


def parse_args(argv):
    """Parse with JSON config values as defaults, so explicit flags win."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        table = SYNTH_FLAGS if args.command == "synth" else {k: TRAIN_FLAGS[k] for k in COMMANDS[args.command]}
        data = _load_config_file(args.config, table)
        parser.subcommands[args.command].set_defaults(**data)
        args = parser.parse_args(argv)
    return args


def _train_config(args):
    kwargs = {}
    for flag in COMMANDS[args.command]:
        kwargs[TRAIN_FLAGS[flag][0]] = getattr(args, flag)
    if args.command != "pretrain":
        kwargs["method"] = "cmsc"
        if kwargs.get("E", 0) is None:
            state, _ = ad.load_checkpoint(args.checkpoint)
            kwargs["E"] = int(state["fc4.w"].shape[1])
    return TrainConfig(**kwargs)


def _run_dir(args, seed):
    name = args.run_name or f"{args.command}-{time.strftime('%Y%m%d-%H%M%S')}-seed{seed}"
    path = os.path.join(args.out, name)
    if os.path.exists(path) and os.listdir(path) and not args.force:
        raise FileExistsError(f"run directory {path} exists; pass --force to overwrite")
    os.makedirs(path, exist_ok=True)
    return path


def _write_text(path, text):
    ad._atomic_write(path, text.encode())


def _finish(run_dir, metrics, args, config, extra=None):
    metrics.summary["command"] = args.command
    metrics.summary["seed"] = config.seed
    metrics.summary["config"] = config.to_dict()
    metrics.summary["data"] = args.data
    if extra:
        metrics.summary.update(extra)
    _write_text(os.path.join(run_dir, "metrics.csv"), metrics.to_csv())
    _write_text(os.path.join(run_dir, "summary.json"), metrics.summary_json())
    print(run_dir)


def cmd_synth(args):
    cfg = SyntheticConfig(**{field: getattr(args, flag) for flag, (field, _, _) in SYNTH_FLAGS.items()})
    if cfg.num_classes < 2:
        raise ConfigError("classes must be >= 2 for a discriminative task")
    manifest, _ = generate_synthetic(cfg, args.out)
    print(f"{len(manifest.entries)} frames written to {args.out}")


def cmd_pretrain(args):
    config = _train_config(args)
    manifest = read_manifest(args.data)
    run_dir = _run_dir(args, config.seed)

    def keep(epoch, params, opt_state):
        ad.save_checkpoint(os.path.join(run_dir, "epochs", f"ckpt-{epoch:04d}"), checkpoint_state(params), opt_state)

    params, opt_state, metrics = pretrain(manifest, config, on_epoch=keep)
    ad.save_checkpoint(os.path.join(run_dir, "ckpt"), checkpoint_state(params), opt_state)
    _finish(run_dir, metrics, args, config)


def _cmd_downstream(args, fn):
    config = _train_config(args)
    manifest = read_manifest(args.data)
    run_dir = _run_dir(args, config.seed)
    params, opt_state, metrics = fn(args.checkpoint, manifest, config)
    ad.save_checkpoint(os.path.join(run_dir, "ckpt"), params.state(), opt_state)
    _finish(run_dir, metrics, args, config, {"checkpoint": args.checkpoint})


def cmd_lineval(args):
    _cmd_downstream(args, linear_eval)


def cmd_finetune(args):
    _cmd_downstream(args, finetune)


def cmd_distances(args):
    config = _train_config(args)
    manifest = read_manifest(args.data)
    run_dir = _run_dir(args, config.seed)
    intra, inter, summary = patient_distances(args.checkpoint, manifest, config, split=args.split)
    metrics = MetricsLog()
    for key in ("intra_mean", "intra_std", "inter_mean", "inter_std"):
        metrics.log(0, args.split, key, summary[key])
    metrics.summary.update(distances=summary, split=args.split)
    _finish(run_dir, metrics, args, config, {"checkpoint": args.checkpoint})


def cmd_gradcheck(args):
    names = sorted(gradcheck.CASES) if args.all or not args.op else args.op
    failed = []
    for name in names:
        err = gradcheck.run_case(name, args.instances, args.seed)
        ok = err < gradcheck.TOLERANCE
        print(f"{name:28s} max_rel_err={err:.3e} {'ok' if ok else 'FAIL'}")
        if not ok:
            failed.append(name)
    if failed:
        raise GradcheckFailure("gradient check failed: " + ", ".join(failed))


class GradcheckFailure(RuntimeError):
    pass


HANDLERS = {
    "synth": cmd_synth,
    "pretrain": cmd_pretrain,
    "lineval": cmd_lineval,
    "finetune": cmd_finetune,
    "distances": cmd_distances,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    command = argv[0] if argv else None
    try:
        args = parse_args(argv)
        HANDLERS[args.command](args)
    except SystemExit:
        raise
    except Exception as exc:  # single-line machine-parsable failure report
        code = 2 if isinstance(exc, (ConfigError, ValueError, FileNotFoundError, FileExistsError)) else 1
        print(json.dumps({"error": type(exc).__name__, "command": command, "message": str(exc)}),
              file=sys.stderr)
        return code
    return 0


if __name__ == "__main__":
    sys.exit(main())
