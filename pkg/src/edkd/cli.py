"""Command-line front end.

Subcommands: ``precompute`` (build and save an embedding cache), ``train``
(one experiment, writing metrics.csv / report.json / checkpoint.edkd),
``evaluate`` (accuracy of a saved checkpoint), ``sweep-alpha`` (one run per
distillation weight), and ``report`` (side-by-side resource table over
report.json files).

Configs are JSON with the same shape ``ExperimentConfig.to_dict`` echoes
into report.json, so any run is reconstructible from its own report.
``--set key=value`` overrides use dotted paths (``--set loss.alpha2=0.8``);
values are parsed as JSON, falling back to plain strings. Exit codes:
1 configuration, 2 data/format, 3 stale cache, 4 numeric abort.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from typing import Optional, Sequence, Tuple

import torch

from .data import DataConfig, make_datasets
from .embed_cache import build_cache, load_cache, save_cache
from .errors import (
    ConfigurationError,
    DataError,
    EdkdError,
    FormatError,
    NumericError,
    ShapeError,
    StalenessError,
    ValidationError,
)
from .losses import LossWeights
from .metrics import (
    ResourceProfile,
    measure_run,
    reports_table,
    static_memory_estimate,
    write_report,
)
from .model import ModelConfig, init_model, load_checkpoint, load_checkpoint_config, save_checkpoint
from .trainer import ExperimentConfig, alpha_sweep, evaluate, torch_dtype, train

_MODEL_FIELDS = {
    "layers": int,
    "embed_dim": int,
    "heads": int,
    "mlp_dim": int,
    "patch_size": int,
    "image_size": int,
    "num_classes": int,
    "cls_token": bool,
}
_LOSS_FIELDS = {"alpha1": float, "alpha2": float}
_DATA_FIELDS = {
    "source": str,
    "num_classes": int,
    "per_class": int,
    "val_per_class": int,
    "image_size": int,
    "seed": int,
    "noise": float,
    "brightness_jitter": float,
    "directory": str,
}
_TOP_FIELDS = {
    "mode": str,
    "run_name": str,
    "seed": int,
    "epochs": int,
    "batch_size": int,
    "base_lr": float,
    "weight_decay": float,
    "kl_temperature": float,
    "clip_scale": float,
    "dtype": str,
    "student": dict,
    "teacher": dict,
    "teacher_checkpoint": str,
    "cache_path": str,
    "expected_teacher_digest": str,
    "expected_dataset_digest": str,
    "student_image_size": int,
    "teacher_image_size": int,
    "cache_samples_per_class": int,
    "loss": dict,
    "data": dict,
}

DEFAULT_ALPHA2_VALUES = (0.0, 0.25, 0.5, 0.75, 1.0)


def _check_fields(block: dict, schema: dict, prefix: str) -> None:
    for key, value in block.items():
        if key not in schema:
            raise ConfigurationError(
                f"unknown config key '{prefix}{key}'; valid keys: {', '.join(sorted(schema))}"
            )
        if value is None:
            continue
        expected = schema[key]
        if expected is float:
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        elif expected is int:
            ok = isinstance(value, int) and not isinstance(value, bool)
        elif expected is bool:
            ok = isinstance(value, bool)
        elif expected is dict:
            ok = isinstance(value, dict)
        else:
            ok = isinstance(value, str)
        if not ok:
            raise ConfigurationError(
                f"config field '{prefix}{key}': expected {expected.__name__}, "
                f"got {type(value).__name__} ({value!r})"
            )


def _parse_override(item: str) -> Tuple[str, object]:
    if "=" not in item:
        raise ConfigurationError(f"override {item!r} must look like key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def _apply_override(tree: dict, dotted: str, value: object) -> None:
    parts = dotted.split(".")
    node = tree
    for part in parts[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigurationError(f"override {dotted!r} descends into non-object field {part!r}")
        node = child
    node[parts[-1]] = value


def _build_model_config(block: dict, where: str) -> ModelConfig:
    _check_fields(block, _MODEL_FIELDS, f"{where}.")
    required = [k for k in _MODEL_FIELDS if k != "cls_token"]
    missing = [k for k in required if k not in block]
    if missing:
        raise ConfigurationError(f"{where} config is missing keys: {', '.join(missing)}")
    return ModelConfig(**block)


def _resolve_loss(block: dict, overridden: set) -> LossWeights:
    _check_fields(block, _LOSS_FIELDS, "loss.")
    has1, has2 = "alpha1" in block, "alpha2" in block
    # an explicit override of exactly one weight re-derives the other
    if "loss.alpha1" in overridden and "loss.alpha2" not in overridden:
        return LossWeights(block["alpha1"], 1.0 - block["alpha1"])
    if "loss.alpha2" in overridden and "loss.alpha1" not in overridden:
        return LossWeights.from_alpha2(block["alpha2"])
    if has1 and has2:
        return LossWeights(block["alpha1"], block["alpha2"])
    if has2:
        return LossWeights.from_alpha2(block["alpha2"])
    if has1:
        return LossWeights(block["alpha1"], 1.0 - block["alpha1"])
    return LossWeights(0.5, 0.5)


def parse_config(path: str, overrides: Sequence[str] = ()) -> ExperimentConfig:
    """Load, override, and fully validate an experiment config."""
    if not os.path.isfile(path):
        raise ConfigurationError(f"config file not found: {path}")
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path} must hold a JSON object")

    overridden = set()
    for item in overrides:
        key, value = _parse_override(item)
        _apply_override(raw, key, value)
        overridden.add(key)

    _check_fields(raw, _TOP_FIELDS, "")
    if "mode" not in raw:
        raise ConfigurationError("config must name a mode")
    if "student" not in raw or raw["student"] is None:
        raise ConfigurationError("config must define a student model")

    student = _build_model_config(raw["student"], "student")
    teacher = None
    if raw.get("teacher") is not None:
        teacher = _build_model_config(raw["teacher"], "teacher")
    loss_weights = _resolve_loss(raw.get("loss") or {}, overridden)
    data_block = raw.get("data") or {}
    _check_fields(data_block, _DATA_FIELDS, "data.")
    data = DataConfig(**data_block)

    config = ExperimentConfig(
        mode=raw["mode"],
        student=student,
        teacher=teacher,
        teacher_checkpoint=raw.get("teacher_checkpoint"),
        cache_path=raw.get("cache_path"),
        expected_teacher_digest=raw.get("expected_teacher_digest"),
        expected_dataset_digest=raw.get("expected_dataset_digest"),
        loss_weights=loss_weights,
        epochs=raw.get("epochs", 200),
        batch_size=raw.get("batch_size", 64),
        base_lr=raw.get("base_lr", 1e-4),
        weight_decay=raw.get("weight_decay", 0.1),
        seed=raw.get("seed", 0),
        student_image_size=raw.get("student_image_size", student.image_size),
        teacher_image_size=raw.get(
            "teacher_image_size", teacher.image_size if teacher else 224
        ),
        kl_temperature=raw.get("kl_temperature", 1.0),
        clip_scale=raw.get("clip_scale", 1.0),
        cache_samples_per_class=raw.get("cache_samples_per_class", 100),
        dtype=raw.get("dtype", "float32"),
        run_name=raw.get("run_name", "run"),
        data=data,
    )
    config.validate()
    return config


def _with_checkpoint_teacher(config: ExperimentConfig) -> ExperimentConfig:
    """Fill the teacher config from the checkpoint header when only a path is given."""
    if config.teacher is None and config.teacher_checkpoint:
        header = load_checkpoint_config(config.teacher_checkpoint)
        config = replace(config, teacher=header, teacher_image_size=header.image_size)
        config.validate()
    return config


def _load_teacher(config: ExperimentConfig, dtype: torch.dtype):
    if config.teacher_checkpoint:
        return load_checkpoint(config.teacher_checkpoint, dtype)
    if config.teacher is not None:
        return init_model(config.teacher, config.seed + 1000, dtype)
    raise ConfigurationError("a teacher config or checkpoint is required")


def _run_dir(out: str, run_name: str) -> str:
    path = os.path.join(out, run_name)
    os.makedirs(path, exist_ok=True)
    return path


def _cmd_precompute(args) -> int:
    config = _with_checkpoint_teacher(parse_config(args.config, args.set))
    splits = make_datasets(config.data)
    teacher = _load_teacher(config, torch_dtype(config.dtype))
    cache = build_cache(teacher, splits.train, config.cache_samples_per_class, config.seed)
    path = os.path.join(_run_dir(args.out, config.run_name), "cache.edkc")
    save_cache(cache, path)
    print(
        f"wrote {path} ({cache.class_count} classes x {cache.teacher_dim} dims, "
        f"teacher {cache.teacher_digest[:12]}, dataset {cache.dataset_digest[:12]})"
    )
    return 0


def _cmd_train(args) -> int:
    config = _with_checkpoint_teacher(parse_config(args.config, args.set))
    splits = make_datasets(config.data)
    teacher_dim = None
    if config.mode == "clip-embed":
        teacher_dim = load_cache(config.cache_path).teacher_dim
    static = static_memory_estimate(config, teacher_embed_dim=teacher_dim)
    report, profile = measure_run(
        lambda: train(config, splits), mode=config.mode, bytes_model_params=static
    )
    out_dir = _run_dir(args.out, config.run_name)
    csv_path, json_path = write_report(report, profile, out_dir)
    save_checkpoint(report.student, os.path.join(out_dir, "checkpoint.edkd"))
    peak = profile.peak_bytes_measured
    line = (
        f"{config.run_name}: mode={config.mode} final_accuracy={report.final_accuracy:.4f} "
        f"wall={report.wall_seconds:.1f}s"
    )
    if peak:
        line += f" peak={peak / 1e6:.1f}MB"
    print(line)
    print(f"wrote {csv_path} and {json_path}")
    return 0


def _cmd_evaluate(args) -> int:
    config = parse_config(args.config, args.set)
    model = load_checkpoint(args.checkpoint)
    splits = make_datasets(config.data)
    accuracy = evaluate(model, splits.val, model.config.image_size, config.batch_size)
    print(f"accuracy: {accuracy:.4f}")
    return 0


def _cmd_sweep_alpha(args) -> int:
    config = _with_checkpoint_teacher(parse_config(args.config, args.set))
    splits = make_datasets(config.data)
    values = (
        [float(v) for v in args.alphas.split(",")] if args.alphas else list(DEFAULT_ALPHA2_VALUES)
    )
    reports = alpha_sweep(config, values, splits)
    out_dir = _run_dir(args.out, config.run_name)
    summary = []
    for report in reports:
        profile = ResourceProfile(
            mode=report.mode, wall_seconds=report.wall_seconds, estimate_only=True
        )
        write_report(report, profile, os.path.join(out_dir, f"alpha_{report.alpha2:g}"))
        summary.append({"alpha2": report.alpha2, "final_accuracy": report.final_accuracy})
        print(f"alpha2={report.alpha2:g}: final_accuracy={report.final_accuracy:.4f}")
    with open(os.path.join(out_dir, "sweep_summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    best = max(summary, key=lambda s: s["final_accuracy"])
    print(f"best alpha2={best['alpha2']:g} (accuracy {best['final_accuracy']:.4f})")
    return 0


def _cmd_report(args) -> int:
    print(reports_table(args.reports))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="edkd", description="Distillation experiment runner")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted-key config override, repeatable")
        p.add_argument("--out", default="runs", help="output directory root")
        p.add_argument("--mode", help="shorthand for --set mode=...")
        p.add_argument("--seed", type=int, help="shorthand for --set seed=...")

    add_common(sub.add_parser("precompute", help="build and save an embedding cache"))
    add_common(sub.add_parser("train", help="run one training experiment"))
    evaluate_p = sub.add_parser("evaluate", help="accuracy of a saved checkpoint")
    add_common(evaluate_p)
    evaluate_p.add_argument("--checkpoint", required=True)
    sweep = sub.add_parser("sweep-alpha", help="one run per distillation weight")
    add_common(sweep)
    sweep.add_argument("--alphas", help="comma-separated alpha2 values")
    report_p = sub.add_parser("report", help="side-by-side resource table")
    report_p.add_argument("reports", nargs="+", help="report.json paths")
    return parser


_EXIT_CODES = (
    ((ConfigurationError, ValidationError, ShapeError), 1),
    ((DataError, FormatError), 2),
    ((StalenessError,), 3),
    ((NumericError,), 4),
)


def exit_code_for(exc: Exception) -> int:
    for types, code in _EXIT_CODES:
        if isinstance(exc, types):
            return code
    return 2 if isinstance(exc, OSError) else 1


def run(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    threads = os.environ.get("EDKD_THREADS")
    if threads:
        torch.set_num_threads(int(threads))
    if getattr(args, "mode", None):
        args.set.append(f"mode={args.mode}")
    if getattr(args, "seed", None) is not None:
        args.set.append(f"seed={args.seed}")
    handlers = {
        "precompute": _cmd_precompute,
        "train": _cmd_train,
        "evaluate": _cmd_evaluate,
        "sweep-alpha": _cmd_sweep_alpha,
        "report": _cmd_report,
    }
    try:
        return handlers[args.command](args)
    except (EdkdError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code_for(exc)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
