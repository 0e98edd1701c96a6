"""Command-line driver for the gesture-classification pipeline.

Commands: synth, preprocess, train, eval, count, report. Options shared by
several commands come from a flat JSON config file with dotted keys
(``model.d_model``, ``train.lr0``); ``--set key=value`` flags override the
file. Every output directory receives an echo of the effective config so any
run can be reproduced from its artifacts alone.

Exit codes: 0 success, 1 usage/config error, 2 data/format error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys

import numpy as np

from .errors import ConfigError, DataError, FormatError, NumericalError
from .model import GestureModel, ModelConfig
from .ops import dwt2_haar, conv2d
from .sigproc import (
    RecordingSession,
    build_split,
    load_container,
    load_csv_recording,
    preprocess_all,
    save_container,
    synth_dataset,
)
from .tensor import Tensor, no_grad, active_tape
from .trainer import (
    REFERENCE_FLOP_COUNT,
    REFERENCE_PARAM_COUNT,
    TrainConfig,
    count_flops,
    count_params,
    evaluate,
    history_to_csv,
    load_checkpoint,
    save_checkpoint,
    train,
)


# ---------------------------------------------------------------------------
# config plumbing


def _field_types(cls):
    return {f.name: f.type for f in dataclasses.fields(cls)}


_MODEL_FIELDS = {f.name for f in dataclasses.fields(ModelConfig)}
_TRAIN_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)}


def _coerce(value, current):
    """Coerce a JSON/flag value onto the type of the default it replaces."""
    if isinstance(current, bool):
        if isinstance(value, str):
            return value.lower() in ("1", "true", "yes")
        return bool(value)
    if isinstance(current, int):
        return int(value)
    if isinstance(current, float):
        return float(value)
    return value


def load_run_config(config_path, set_flags, preset: str = "paper"):
    """Merge preset defaults, a flat JSON config file, and --set overrides.

    Returns (ModelConfig, TrainConfig, flat_dict). Unknown keys are rejected.
    """
    if preset == "desk":
        model_kw = ModelConfig.desk().to_dict()
    elif preset == "paper":
        model_kw = ModelConfig.paper_default().to_dict()
    else:
        raise ConfigError(f"unknown preset {preset!r}")
    train_kw = TrainConfig().to_dict()

    entries = {}
    if config_path is not None:
        try:
            with open(config_path) as fh:
                entries = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {config_path}: {exc}") from exc
        except ValueError as exc:
            raise ConfigError(f"config {config_path} is not valid JSON: {exc}") from exc
        if not isinstance(entries, dict):
            raise ConfigError("config file must hold a flat JSON object")
    for flag in set_flags or ():
        if "=" not in flag:
            raise ConfigError(f"--set expects key=value, got {flag!r}")
        key, raw = flag.split("=", 1)
        entries[key.strip()] = raw.strip()

    for key, value in entries.items():
        scope, _, field = key.partition(".")
        if scope == "model" and field in _MODEL_FIELDS:
            model_kw[field] = _coerce(value, model_kw[field])
        elif scope == "train" and field in _TRAIN_FIELDS:
            train_kw[field] = _coerce(value, train_kw[field])
        else:
            raise ConfigError(f"unknown config key {key!r}")

    model_cfg = ModelConfig(**model_kw)
    train_cfg = TrainConfig(**train_kw)
    flat = {f"model.{k}": v for k, v in model_cfg.to_dict().items()}
    flat.update({f"train.{k}": v for k, v in train_cfg.to_dict().items()})
    return model_cfg, train_cfg, flat


def _echo_config(out_dir, flat: dict, extra: dict | None = None):
    merged = dict(flat)
    if extra:
        merged.update(extra)
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(merged, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# data loading (container or CSV directory with sidecar metadata)


def load_recordings(path) -> list[RecordingSession]:
    """Read a MEMB container, or a directory of per-recording CSV files.

    Each ``name.csv`` in a directory needs a ``name.meta`` sidecar holding
    one ``label=.. subject=.. session=..`` line.
    """
    if os.path.isdir(path):
        recordings = []
        names = sorted(n for n in os.listdir(path) if n.endswith(".csv"))
        if not names:
            raise DataError(f"no .csv recordings under {path}")
        for name in names:
            meta_path = os.path.join(path, name[:-4] + ".meta")
            try:
                with open(meta_path) as fh:
                    line = fh.read().strip()
            except OSError as exc:
                raise FormatError(f"missing sidecar metadata for {name}: {exc}") from exc
            fields = {}
            for token in line.split():
                if "=" not in token:
                    raise FormatError(f"bad sidecar line for {name}: {line!r}")
                k, v = token.split("=", 1)
                fields[k] = int(v)
            for key in ("label", "subject", "session"):
                if key not in fields:
                    raise FormatError(f"sidecar for {name} lacks {key!r}")
            recordings.append(
                load_csv_recording(
                    os.path.join(path, name),
                    label=fields["label"],
                    subject_id=fields["subject"],
                    session_id=fields["session"],
                )
            )
        return recordings
    return load_container(path)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    if args.classes < 2:
        raise ConfigError(f"need at least 2 classes, got {args.classes}")
    recordings = synth_dataset(
        seed=args.seed,
        subjects=args.subjects,
        sessions=args.sessions,
        classes=args.classes,
        trials_per_class=args.trials,
        t=args.length,
        v=args.channels,
    )
    try:
        save_container(recordings, args.out)
    except OSError as exc:
        raise DataError(f"cannot write {args.out}: {exc}") from exc
    size = os.path.getsize(args.out)
    out_dir = os.path.dirname(os.path.abspath(args.out))
    _echo_config(
        out_dir,
        {},
        {
            "synth.seed": args.seed,
            "synth.subjects": args.subjects,
            "synth.sessions": args.sessions,
            "synth.classes": args.classes,
            "synth.trials": args.trials,
            "synth.length": args.length,
            "synth.channels": args.channels,
        },
    )
    print(f"recordings={len(recordings)} classes={args.classes} bytes={size}")
    return 0


def cmd_preprocess(args) -> int:
    recordings = load_recordings(args.data)
    patchsets = preprocess_all(recordings)
    os.makedirs(args.out, exist_ok=True)
    arrays = {}
    rows = []
    for i, ps in enumerate(patchsets):
        arrays[f"patches_{i}"] = ps.patches
        rows.append(
            [i, ps.subject_id, ps.session_id, int(ps.labels[0]), ps.patches.shape[0]]
        )
    np.savez_compressed(os.path.join(args.out, "patches.npz"), **arrays)
    with open(os.path.join(args.out, "patches.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["recording", "subject", "session", "label", "patches"])
        writer.writerows(rows)
    _echo_config(args.out, {}, {"preprocess.data": os.path.abspath(args.data)})
    total = sum(r[4] for r in rows)
    print(f"recordings={len(rows)} patches={total}")
    return 0


def cmd_train(args) -> int:
    model_cfg, train_cfg, flat = load_run_config(args.config, args.set, args.preset)
    recordings = load_recordings(args.data)
    split = build_split(recordings, protocol=args.protocol)
    model, history, state = train(
        model_cfg,
        train_cfg,
        split,
        resume=args.resume,
        log=print if args.verbose else None,
    )
    os.makedirs(args.out, exist_ok=True)
    save_checkpoint(
        os.path.join(args.out, "checkpoint.memc"),
        model,
        train_cfg,
        epoch=train_cfg.epochs,
        state=state,
    )
    history_to_csv(history, os.path.join(args.out, "history.csv"))
    _echo_config(
        args.out,
        flat,
        {"train.data": os.path.abspath(args.data), "train.protocol": args.protocol},
    )
    last = history[-1]
    print(
        f"epochs={len(history)} train_loss={last.train_loss:.6f} "
        f"train_acc={last.train_acc:.4f} val_acc={last.val_acc:.4f}"
    )
    return 0


def _dump_wavelet(model: GestureModel, patch: np.ndarray, path):
    """Write the four analysis bands of one patch's fine-scale features."""
    tape = active_tape()
    with no_grad():
        x = Tensor(patch[None, None])  # (1, 1, L, V)
        f_small = conv2d(x, model.wtfm.small_kernels)
        bands = dwt2_haar(f_small)
    tape.clear()
    names = ["cA", "cH", "cV", "cD"]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["band", "channel", "row", "col", "value"])
        for name, band in zip(names, bands):
            arr = band.data[0]
            for c in range(arr.shape[0]):
                for r in range(arr.shape[1]):
                    for k in range(arr.shape[2]):
                        writer.writerow([name, c, r, k, f"{arr[c, r, k]:.10g}"])


def cmd_eval(args) -> int:
    model, train_cfg, _, _ = load_checkpoint(args.model)
    recordings = load_recordings(args.data)
    labels = {r.label for r in recordings}
    if max(labels) >= model.config.classes:
        raise ConfigError(
            f"data holds class {max(labels)} but the model has "
            f"{model.config.classes} classes"
        )
    split = build_split(recordings, protocol=args.protocol)
    report = evaluate(model, split.test)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "report.json"), "w") as fh:
        fh.write(report.to_json())
        fh.write("\n")
    report.write_csv(
        os.path.join(args.out, "confusion.csv"), os.path.join(args.out, "roc.csv")
    )
    if args.dump_wavelet:
        first = split.test[0].patches[0]
        _dump_wavelet(model, first, os.path.join(args.out, "wavelet_components.csv"))
    flat = {f"model.{k}": v for k, v in model.config.to_dict().items()}
    flat.update({f"train.{k}": v for k, v in train_cfg.to_dict().items()})
    _echo_config(
        args.out,
        flat,
        {"eval.data": os.path.abspath(args.data), "eval.protocol": args.protocol},
    )
    print(
        f"balanced_accuracy={report.balanced_accuracy:.4f} "
        f"total_accuracy={report.total_accuracy:.4f} "
        f"patch_accuracy={report.patch_accuracy:.4f}"
    )
    return 0


def cmd_count(args) -> int:
    model_cfg, _, _ = load_run_config(args.config, args.set, args.preset)
    model = GestureModel(model_cfg, seed=0)
    params = count_params(model)
    flops = count_flops(model_cfg)
    print(f"param_count={params}")
    print(f"flop_count={flops}")
    if args.compare_paper:
        pdev = 100.0 * (params - REFERENCE_PARAM_COUNT) / REFERENCE_PARAM_COUNT
        fdev = 100.0 * (flops - REFERENCE_FLOP_COUNT) / REFERENCE_FLOP_COUNT
        print(f"reference_param_count={REFERENCE_PARAM_COUNT}")
        print(f"reference_flop_count={REFERENCE_FLOP_COUNT}")
        print(f"param_deviation_pct={pdev:.4f}")
        print(f"flop_deviation_pct={fdev:.4f}")
    return 0


def cmd_report(args) -> int:
    try:
        with open(args.eval_json) as fh:
            payload = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read {args.eval_json}: {exc}") from exc
    except ValueError as exc:
        raise FormatError(f"{args.eval_json} is not valid JSON: {exc}") from exc
    lines = [
        "evaluation summary",
        "==================",
        f"signal balanced accuracy: {payload['balanced_accuracy']:.4f}",
        f"signal total accuracy:    {payload['total_accuracy']:.4f}",
        f"patch accuracy:           {payload['patch_accuracy']:.4f}",
        f"parameters:               {payload['param_count']}",
        f"flops per patch:          {payload['flop_count']}",
    ]
    aucs = payload.get("per_class_auc", [])
    for g, auc in enumerate(aucs):
        shown = "n/a" if auc is None else f"{auc:.4f}"
        lines.append(f"class {g} AUC:              {shown}")
    if args.history:
        with open(args.history, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if rows:
            lines.append(f"epochs trained:           {len(rows)}")
            lines.append(f"final train loss:         {float(rows[-1]['train_loss']):.6f}")
    text = "\n".join(lines) + "\n"
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "summary.txt"), "w") as fh:
            fh.write(text)
    print(text, end="")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors are config errors (exit 1)
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="emgmoe", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset container")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--subjects", type=int, default=9)
    p.add_argument("--sessions", type=int, default=2)
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--length", type=int, default=1000)
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="filter/segment/normalize a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--preset", choices=("paper", "desk"), default="paper")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--protocol", choices=("inter-session", "intra-session"),
                   default="inter-session")
    p.add_argument("--resume", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on held-out data")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--protocol", choices=("inter-session", "intra-session"),
                   default="inter-session")
    p.add_argument("--dump-wavelet", action="store_true",
                   help="also dump the wavelet bands of one patch as CSV")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("count", help="print parameter and FLOP counts")
    p.add_argument("--config", default=None)
    p.add_argument("--preset", choices=("paper", "desk"), default="paper")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--compare-paper", action="store_true")
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("report", help="summarize an evaluation report")
    p.add_argument("--eval-json", required=True)
    p.add_argument("--history", default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
