"""Command line entry point: ``ddxnet {synth,train,eval,predict,inspect}``.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys

import numpy as np

from . import data as dataio
from .checkpoint import load_checkpoint
from .errors import DDxError
from .metrics import argmax_lowest, classification_report, multilabel_report, report_json
from .model import DDxConfig, Head, channel_plan, dilation_schedule, param_count, receptive_field
from .trainer import (NumericalFailure, RunConfig, predict_logits, probabilities,
                      train)

EXIT_USAGE = 2
EXIT_NUMERICAL = 3


class UsageError(Exception):
    pass


def _fail(msg):
    raise UsageError(msg)


def cmd_synth(args) -> int:
    try:
        spec = dataio.SynthSpec(
            num_classes=args.classes, channels=args.channels, length=args.len,
            num_records=args.n, motif_length=args.motif_len, noise_std=args.noise_std,
            seed=args.seed,
        )
    except ValueError as exc:
        _fail(f"invalid synth spec: {exc}")
    ds = dataio.synth_generate(spec)
    dataio.write_binary(ds, args.out)
    counts = np.bincount(ds.labels(), minlength=spec.num_classes)
    print(f"wrote {len(ds)} records ({spec.channels} channel(s) x {spec.length} samples) to {args.out}")
    print("class counts: " + " ".join(f"{c}:{n}" for c, n in enumerate(counts)))
    return 0


def cmd_train(args) -> int:
    try:
        run = RunConfig.load(args.config)
    except DDxError as exc:
        _fail(str(exc))
    try:
        result = train(run, resume_from=args.resume, log_stream=sys.stdout)
    except NumericalFailure as exc:
        print(f"error: {exc}; last good checkpoint kept in {run.train.checkpoint_dir}",
              file=sys.stderr)
        return EXIT_NUMERICAL
    except DDxError as exc:
        _fail(str(exc))
    print(f"final checkpoint: {result.final_path}", file=sys.stderr)
    return 0


def _load_eval_inputs(args):
    try:
        model, _, norm, meta = load_checkpoint(args.checkpoint)
    except (OSError, DDxError) as exc:
        _fail(f"cannot load checkpoint {args.checkpoint}: {exc}")
    try:
        ds = dataio.load_binary(args.data)
    except (OSError, DDxError) as exc:
        _fail(f"cannot load dataset {args.data}: {exc}")
    cfg = model.config
    if ds.channels != cfg.in_channels:
        _fail(f"channel mismatch: checkpoint expects {cfg.in_channels} channels, "
              f"dataset has {ds.channels}")
    if ds.num_classes != cfg.num_classes:
        _fail(f"class mismatch: checkpoint has {cfg.num_classes} classes, dataset has {ds.num_classes}")
    data_meta = meta.get("data", {})
    if data_meta.get("window_len"):
        ds, _ = dataio.window_dataset(ds, data_meta["window_len"], data_meta.get("stride"))
    split = getattr(args, "split", "all")
    if split != "all":
        if not data_meta.get("val_fraction"):
            _fail("checkpoint was trained without a validation split")
        train_ds, val_ds = dataio.stratified_split(ds, data_meta["val_fraction"], data_meta["seed"])
        ds = train_ds if split == "train" else val_ds
    if norm is not None:
        ds = dataio.apply_norm(ds, norm)
    return model, ds


def cmd_eval(args) -> int:
    model, ds = _load_eval_inputs(args)
    logits = predict_logits(model, ds)
    probs = probabilities(model, logits)
    if model.config.head is Head.MULTICLASS:
        bundle = classification_report(argmax_lowest(logits), ds.labels(), model.config.num_classes,
                                       probs)
    else:
        bundle = multilabel_report(probs, ds.labels())
    text = report_json(bundle)
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write(text)
    key = "accuracy" if "accuracy" in bundle else "label_accuracy"
    print(f"{key}: {bundle[key]:.6g} over {bundle['num_samples']} records -> {args.out}")
    return 0


def cmd_predict(args) -> int:
    model, ds = _load_eval_inputs(args)
    logits = predict_logits(model, ds)
    probs = probabilities(model, logits)
    k = model.config.num_classes
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["record_id", "predicted"] + [f"p{c}" for c in range(k)])
        if model.config.head is Head.MULTICLASS:
            pred = argmax_lowest(logits)
            for r, c, p in zip(ds.records, pred, probs):
                w.writerow([r.record_id, int(c)] + [f"{v:.8g}" for v in p])
        else:
            for r, p in zip(ds.records, probs):
                labels = ";".join(str(int(v >= 0.5)) for v in p)
                w.writerow([r.record_id, labels] + [f"{v:.8g}" for v in p])
    print(f"wrote {len(ds)} predictions to {args.out}")
    return 0


def describe(config: DDxConfig) -> str:
    lines = [
        f"in_channels: {config.in_channels}",
        f"num_classes: {config.num_classes} ({config.head.value})",
        f"stages: {config.stages} x {config.blocks_per_stage} blocks, growth rate {config.growth_rate}, "
        f"kernel {config.kernel_size}, bottleneck {config.bottleneck_factor * config.growth_rate}",
        f"stem: {config.stem_channels} channels, kernel {config.stem_kernel}",
    ]
    dil = dilation_schedule(config)
    for s, stage in enumerate(channel_plan(config)):
        prog = [stage["entry"]] + [c + config.growth_rate for c in stage["block_inputs"]]
        line = f"stage {s}: channels {' -> '.join(map(str, prog))}; dilations {dil[s]}"
        if "transition_out" in stage:
            line += f"; transition -> {stage['transition_out']} channels, T/2"
        lines.append(line)
    lines.append(f"receptive field: {receptive_field(config)} samples")
    lines.append(f"parameters: {param_count(config)}")
    return "\n".join(lines)


def cmd_inspect(args) -> int:
    if (args.checkpoint is None) == (args.config is None):
        _fail("give exactly one of --checkpoint or --config")
    try:
        if args.checkpoint is not None:
            model, _, _, meta = load_checkpoint(args.checkpoint)
            config = model.config
        else:
            with open(args.config, encoding="utf-8") as fh:
                obj = json.load(fh)
            if isinstance(obj, dict) and "model" in obj:
                obj = obj["model"]
            config = DDxConfig.from_json(obj)
    except (OSError, ValueError, DDxError) as exc:
        _fail(f"cannot read input: {exc}")
    print(describe(config))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ddxnet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic DDX1 dataset")
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--len", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--motif-len", type=int, default=64)
    p.add_argument("--noise-std", type=float, default=0.3)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train from a run config JSON")
    p.add_argument("config")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    for name, func, out_help in (("eval", cmd_eval, "metrics JSON path"),
                                 ("predict", cmd_predict, "predictions CSV path")):
        p = sub.add_parser(name)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True, help="DDX1 dataset")
        p.add_argument("--out", required=True, help=out_help)
        p.add_argument("--split", choices=("all", "train", "val"), default="all",
                       help="re-derive the training run's split from the checkpoint")
        p.set_defaults(func=func)

    p = sub.add_parser("inspect", help="summarize an architecture")
    p.add_argument("--checkpoint")
    p.add_argument("--config", help="model config or run config JSON")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
