"""Command line interface: synth, train, infer, eval, gradcheck, ablate.

Configuration precedence is flags > config file > defaults.  Unknown
config keys are rejected.  Exit codes: 0 success, 1 validation error,
2 numerical failure.  All outputs are written atomically (temp file plus
rename), and every subcommand is deterministic given its seed; the
implementation is single-threaded throughout, so ``--threads 1`` (the
default) is simply the documented guarantee.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time

import numpy as np

from . import gradcheck as gradcheck_mod
from . import network
from .data import load_dataset, load_manifest, write_dataset
from .errors import NumericalError, ValidationError
from .evaluator import (
    evaluate,
    index_from_manifest,
    index_from_samples,
    render_report_csv,
    render_report_json,
)
from .localizer import INFERENCE_MODES, infer_dataset, load_detections, write_detections
from .objectives import AGGREGATORS, LossConfig, REG_FORMS
from .synth import PRESETS, SynthSpec, generate, preset_spec
from .trainer import STRATEGIES, SUPERVISION_MODES, TrainConfig, run_training

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERICAL = 2


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; the contract reserves 2 for
    # numerical failures, so remap to the validation exit code
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _write_text(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _load_json_config(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except OSError as exc:
        raise ValidationError(f"cannot read config {path!r}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config {path!r} is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ValidationError(f"config {path!r} must hold a JSON object")
    return obj


def _reject_unknown(data: dict, allowed, context: str) -> None:
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ValidationError(f"{context}: unknown keys {unknown}")


def _field_names(cls) -> list[str]:
    return [f.name for f in dataclasses.fields(cls)]


def build_synth_spec(preset: str | None, file_cfg: dict, overrides: dict) -> SynthSpec:
    base = preset_spec(preset) if preset else SynthSpec()
    merged = dataclasses.asdict(base)
    _reject_unknown(file_cfg, merged, "synth config")
    merged.update(file_cfg)
    merged.update(overrides)
    spec = SynthSpec(**merged)
    spec.validate()
    return spec


def build_train_config(file_cfg: dict, overrides: dict, loss_overrides: dict) -> TrainConfig:
    train_fields = _field_names(TrainConfig)
    loss_fields = _field_names(LossConfig)
    _reject_unknown(file_cfg, train_fields, "train config")
    loss_cfg = dict(file_cfg.get("loss") or {})
    if not isinstance(loss_cfg, dict):
        raise ValidationError("train config: 'loss' must be an object")
    _reject_unknown(loss_cfg, loss_fields, "train config loss")
    merged = dataclasses.asdict(TrainConfig())
    merged_loss = merged.pop("loss")
    merged.update({k: v for k, v in file_cfg.items() if k != "loss"})
    merged_loss.update(loss_cfg)
    merged.update(overrides)
    merged_loss.update(loss_overrides)
    config = TrainConfig(loss=LossConfig(**merged_loss), **merged)
    config.validate()
    return config


def parse_iou_spec(text: str) -> tuple[float, ...]:
    """Thresholds as a single value, comma list, or start:stop:step range."""
    text = text.strip()
    try:
        if ":" in text:
            parts = [float(p) for p in text.split(":")]
            if len(parts) != 3:
                raise ValueError("range must be start:stop:step")
            start, stop, step = parts
            if step <= 0 or stop < start:
                raise ValueError("range needs step > 0 and stop >= start")
            values = []
            i = 0
            while True:
                v = round(start + i * step, 10)
                if v > stop + 1e-9:
                    break
                values.append(v)
                i += 1
            return tuple(values)
        return tuple(round(float(p), 10) for p in text.split(","))
    except ValueError as exc:
        raise ValidationError(f"bad IoU spec {text!r}: {exc}") from exc


def _overrides_from_args(args, names) -> dict:
    return {n: getattr(args, n) for n in names if getattr(args, n, None) is not None}


def _note_threads(threads: int) -> None:
    if threads != 1:
        print(f"note: execution is always single-threaded; ignoring --threads {threads}", file=sys.stderr)


# ---------------------------------------------------------------------------
# Subcommands


def cmd_synth(args) -> int:
    file_cfg = _load_json_config(args.spec) if args.spec else {}
    names = _field_names(SynthSpec)
    spec = build_synth_spec(args.preset, file_cfg, _overrides_from_args(args, names))
    manifest, samples = generate(spec)
    path = write_dataset(samples, manifest.num_classes, manifest.class_names, args.out)
    _write_text(os.path.join(args.out, "synth_spec.json"), json.dumps(dataclasses.asdict(spec), indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(samples)} videos, {manifest.num_classes} classes: {path}")
    return EXIT_OK


CHECKPOINT_NAME = "checkpoint.ttck"
METRICS_NAME = "metrics.ndjson"
TRAIN_CONFIG_NAME = "train_config.json"


def cmd_train(args) -> int:
    _note_threads(args.threads)
    file_cfg = _load_json_config(args.config) if args.config else {}
    overrides = _overrides_from_args(args, _field_names(TrainConfig))
    loss_overrides = _overrides_from_args(args, _field_names(LossConfig))
    config = build_train_config(file_cfg, overrides, loss_overrides)

    manifest_path = os.path.join(args.data, "manifest.json") if os.path.isdir(args.data) else args.data
    manifest = load_manifest(manifest_path)
    samples = load_dataset(manifest_path)
    started = time.perf_counter()
    state, metrics = run_training(samples, manifest.num_classes, config)
    elapsed = time.perf_counter() - started

    os.makedirs(args.out, exist_ok=True)
    network.save_params(state.params, os.path.join(args.out, CHECKPOINT_NAME))
    _write_text(
        os.path.join(args.out, METRICS_NAME),
        "".join(json.dumps(rec, sort_keys=True) + "\n" for rec in metrics),
    )
    _write_text(
        os.path.join(args.out, TRAIN_CONFIG_NAME),
        json.dumps(dataclasses.asdict(config), indent=2, sort_keys=True) + "\n",
    )
    final = metrics[-1]["L"] if metrics else float("nan")
    print(f"trained {config.iterations} iterations in {elapsed:.1f}s, final loss {final:.6f}: {args.out}")
    return EXIT_OK


def _resolve_checkpoint(path: str):
    """Accept a checkpoint file or a training output directory."""
    ckpt_path = os.path.join(path, CHECKPOINT_NAME) if os.path.isdir(path) else path
    params = network.load_params(ckpt_path)
    sidecar = os.path.join(os.path.dirname(ckpt_path), TRAIN_CONFIG_NAME)
    train_cfg = None
    if os.path.exists(sidecar):
        train_cfg = _load_json_config(sidecar)
    return params, train_cfg


def cmd_infer(args) -> int:
    params, train_cfg = _resolve_checkpoint(args.ckpt)
    aggregator = args.aggregator
    gating = args.gating
    if train_cfg is not None:
        aggregator = aggregator or (train_cfg.get("loss") or {}).get("aggregator")
        gating = gating or train_cfg.get("gating")
    aggregator = aggregator or "gated"
    gating = gating or "sigmoid"

    manifest_path = os.path.join(args.data, "manifest.json") if os.path.isdir(args.data) else args.data
    manifest = load_manifest(manifest_path)
    samples = load_dataset(manifest_path)
    if params.num_classes != manifest.num_classes:
        raise ValidationError(
            f"checkpoint has {params.num_classes} classes but dataset has {manifest.num_classes}"
        )
    if params.feature_dim != samples[0].feature_dim:
        raise ValidationError(
            f"checkpoint expects {params.feature_dim}-dim features but dataset has {samples[0].feature_dim}"
        )
    detections = infer_dataset(params, samples, args.mode, aggregator, gating)
    write_detections(detections, manifest.class_names, args.out)
    print(f"wrote {len(detections)} detections ({args.mode} mode): {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    thresholds = parse_iou_spec(args.iou)
    manifest = load_manifest(args.gt)
    detections = load_detections(args.det)
    gt = index_from_manifest(manifest)
    report = evaluate(detections, gt, thresholds, class_names=manifest.class_names)
    _write_text(args.out, render_report_json(report) + "\n")
    csv_path = os.path.splitext(args.out)[0] + ".csv"
    _write_text(csv_path, render_report_csv(report))
    print(f"average mAP {report.average_map:.4f} over IoU {thresholds}: {args.out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    checks = gradcheck_mod.run_gradient_checks(args.seed)
    failed = False
    for check in checks:
        if not check.strict:
            status = "surrogate"
        elif check.passed:
            status = "ok"
        else:
            status = "FAIL"
            failed = True
        print(f"{check.name:45s} max_rel_err {check.max_rel_err:.3e}  [{status}]")
    worst = max(c.max_rel_err for c in checks if c.strict)
    print(f"worst strict component: {worst:.3e} (tolerance {gradcheck_mod.STRICT_TOLERANCE:g})")
    return EXIT_NUMERICAL if failed else EXIT_OK


# ---------------------------------------------------------------------------
# Ablation grid


def _ablate_rows(lambda_sweep: bool) -> list[dict]:
    """One experiment description per grid row (before seeding)."""
    rows = []

    def row(group, **kw):
        base = {
            "group": group,
            "train_localization": "predicted",
            "test_mode": "predicted",
            "gating": "sigmoid",
            "reg_form": "inner_product",
            "strategy": "joint",
            "aggregator": "gated",
            "supervision": "weak",
            "semi_k": 0,
            "clas_weight": 0.2,
        }
        base.update(kw)
        rows.append(base)

    # threshold strategy grid: the four trained variants x both test rules
    for train_loc, supervision, semi_k in (
        ("none", "weak", 0),
        ("predicted", "weak", 0),
        ("manual", "semi", 1),
        ("predicted", "semi", 1),
    ):
        aggregator = "topk_eighth" if train_loc == "none" else "gated"
        for test_mode in ("manual", "predicted"):
            row(
                "threshold_strategy",
                train_localization=train_loc,
                test_mode=test_mode,
                supervision=supervision,
                semi_k=semi_k,
                aggregator=aggregator,
            )
    for gating in ("sigmoid", "softsign", "binarize"):
        row("gating", gating=gating)
    for reg_form in REG_FORMS:
        row("regularizer", reg_form=reg_form)
    for strategy in STRATEGIES:
        row("training_strategy", strategy=strategy, supervision="semi", semi_k=1)
    for aggregator in AGGREGATORS:
        train_loc = "none" if aggregator == "topk_eighth" else "predicted"
        row("aggregator", aggregator=aggregator, train_localization=train_loc)
    if lambda_sweep:
        for lam in (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9):
            row("lambda_sweep", clas_weight=lam)
    return rows


ABLATE_COLUMNS = (
    "group",
    "train_localization",
    "test_mode",
    "gating",
    "reg_form",
    "strategy",
    "aggregator",
    "supervision",
    "semi_k",
    "clas_weight",
    "seed",
    "map_at_0.5",
    "average_map",
)


def _run_ablate_cell(samples, num_classes, spec_row: dict, seed: int, train_base: TrainConfig, thresholds):
    loss = dataclasses.replace(
        train_base.loss,
        reg_form=spec_row["reg_form"],
        aggregator=spec_row["aggregator"],
        clas_weight=spec_row["clas_weight"],
    )
    config = dataclasses.replace(
        train_base,
        loss=loss,
        gating=spec_row["gating"],
        supervision=spec_row["supervision"],
        semi_k=spec_row["semi_k"],
        strategy=spec_row["strategy"],
        train_localization=spec_row["train_localization"],
        seed=seed,
    )
    state, _ = run_training(samples, num_classes, config)
    detections = infer_dataset(
        state.params, samples, spec_row["test_mode"], spec_row["aggregator"], spec_row["gating"]
    )
    gt = index_from_samples(samples, num_classes)
    report = evaluate(detections, gt, thresholds)
    at_half = report.map_per_threshold[thresholds.index(0.5)] if 0.5 in thresholds else float("nan")
    return at_half, report.average_map


def cmd_ablate(args) -> int:
    _note_threads(args.threads)
    file_cfg = _load_json_config(args.config) if args.config else {}
    _reject_unknown(
        file_cfg,
        ("name", "preset", "seeds", "iterations", "hidden_dim", "videos_per_class", "iou", "lambda_sweep"),
        "ablate config",
    )
    preset = args.preset or file_cfg.get("preset") or "medium"
    seeds = list(range(args.seeds)) if args.seeds is not None else list(range(int(file_cfg.get("seeds", 3))))
    iterations = args.iterations if args.iterations is not None else int(file_cfg.get("iterations", 400))
    hidden_dim = args.hidden_dim if args.hidden_dim is not None else int(file_cfg.get("hidden_dim", 32))
    videos_per_class = (
        args.videos_per_class
        if args.videos_per_class is not None
        else int(file_cfg.get("videos_per_class", 8))
    )
    thresholds = parse_iou_spec(args.iou or file_cfg.get("iou", "0.3:0.7:0.1"))
    lambda_sweep = args.lambda_sweep or bool(file_cfg.get("lambda_sweep", False))

    spec = preset_spec(preset, videos_per_class=videos_per_class, annotated_fraction=0.0)
    _, samples = generate(spec)
    train_base = TrainConfig(
        iterations=iterations,
        hidden_dim=hidden_dim,
        max_clip_len=64,
        dropout=0.1,
        learning_rate=2e-3,
        loss=LossConfig(),
    )

    rows = _ablate_rows(lambda_sweep)
    lines = [",".join(ABLATE_COLUMNS)]
    started = time.perf_counter()
    for spec_row in rows:
        for seed in seeds:
            at_half, avg = _run_ablate_cell(samples, spec.num_classes, spec_row, seed, train_base, thresholds)
            cells = [str(spec_row[c]) for c in ABLATE_COLUMNS[:10]]
            cells += [str(seed), f"{at_half:.6f}", f"{avg:.6f}"]
            lines.append(",".join(cells))
            print(f"{spec_row['group']:20s} seed {seed}: mAP@0.5 {at_half:.3f}, avg {avg:.3f}", file=sys.stderr)
    elapsed = time.perf_counter() - started

    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "ablation.csv")
    _write_text(csv_path, "".join(line + "\n" for line in lines))
    print(f"{len(rows)} cells x {len(seeds)} seeds in {elapsed:.1f}s: {csv_path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def _add_synth_parser(sub):
    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--preset", choices=sorted(PRESETS), help="named parameter preset")
    p.add_argument("--spec", help="JSON file with generator fields")
    p.add_argument("--out", required=True, help="output dataset directory")
    for f in dataclasses.fields(SynthSpec):
        flag = "--" + f.name.replace("_", "-")
        kind = int if f.type in (int, "int") else float
        p.add_argument(flag, type=kind, default=None)
    p.set_defaults(func=cmd_synth)


def _add_train_parser(sub):
    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--data", required=True, help="dataset directory or manifest path")
    p.add_argument("--config", help="JSON train config")
    p.add_argument("--out", required=True, help="output directory for checkpoint and logs")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--learning-rate", dest="learning_rate", type=float, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--max-clip-len", dest="max_clip_len", type=int, default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--hidden-dim", dest="hidden_dim", type=int, default=None)
    p.add_argument("--dropout", type=float, default=None)
    p.add_argument("--gating", choices=network.GATING_KINDS, default=None)
    p.add_argument("--supervision", choices=SUPERVISION_MODES, default=None)
    p.add_argument("--semi-k", dest="semi_k", type=int, default=None)
    p.add_argument("--strategy", choices=STRATEGIES, default=None)
    p.add_argument("--train-localization", dest="train_localization", choices=("predicted", "manual", "none"), default=None)
    p.add_argument("--clas-weight", dest="clas_weight", type=float, default=None)
    p.add_argument("--loc-weight", dest="loc_weight", type=float, default=None)
    p.add_argument("--background-weight", dest="background_weight", type=float, default=None)
    p.add_argument("--reg-form", dest="reg_form", choices=REG_FORMS, default=None)
    p.add_argument("--aggregator", choices=AGGREGATORS, default=None)
    p.set_defaults(func=cmd_train)


def _add_infer_parser(sub):
    p = sub.add_parser("infer", help="run inference with a trained checkpoint")
    p.add_argument("--ckpt", required=True, help="checkpoint file or training output directory")
    p.add_argument("--data", required=True, help="dataset directory or manifest path")
    p.add_argument("--mode", choices=INFERENCE_MODES, default="predicted")
    p.add_argument("--aggregator", choices=AGGREGATORS, default=None)
    p.add_argument("--gating", choices=network.GATING_KINDS, default=None)
    p.add_argument("--out", required=True, help="output detections (JSON lines)")
    p.set_defaults(func=cmd_infer)


def _add_eval_parser(sub):
    p = sub.add_parser("eval", help="score detections against ground truth")
    p.add_argument("--det", required=True, help="detections JSONL")
    p.add_argument("--gt", required=True, help="dataset manifest with ground truth segments")
    p.add_argument("--iou", default="0.3:0.7:0.1", help="threshold, comma list, or start:stop:step")
    p.add_argument("--out", required=True, help="output report JSON (CSV written alongside)")
    p.set_defaults(func=cmd_eval)


def _add_gradcheck_parser(sub):
    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)


def _add_ablate_parser(sub):
    p = sub.add_parser("ablate", help="run the ablation grids on a synthetic preset")
    p.add_argument("--config", help="JSON ablate config")
    p.add_argument("--preset", choices=sorted(PRESETS), default=None)
    p.add_argument("--seeds", type=int, default=None, help="number of seeds (0..n-1)")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--hidden-dim", dest="hidden_dim", type=int, default=None)
    p.add_argument("--videos-per-class", dest="videos_per_class", type=int, default=None)
    p.add_argument("--iou", default=None)
    p.add_argument("--lambda-sweep", dest="lambda_sweep", action="store_true")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_ablate)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ttcloc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    _add_synth_parser(sub)
    _add_train_parser(sub)
    _add_infer_parser(sub)
    _add_eval_parser(sub)
    _add_gradcheck_parser(sub)
    _add_ablate_parser(sub)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
