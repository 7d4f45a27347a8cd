"""Batch experiment driver: generation -> training -> merging -> evaluation.

Every subcommand reads the same JSON config (flags override file values) and
writes content-determined artifacts under ``<out_dir>/<run-id>/``, so any
command rerun with identical inputs reproduces its outputs byte for byte.
Timestamps live only in ``meta.json``.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
import time
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint, value_hash
from .config import RunConfig, config_dict, config_hash, load_config, parse_config
from .core import ParamVector, TaskVector
from .datasets import TaskSuite, generate_suite, load_suite, save_suite
from .diagnostics import (
    acc_at_k,
    bias_comparison,
    disentanglement_residual,
    export_representations,
)
from .errors import (
    ArtifactError,
    ConfigError,
    DomainError,
    GenerationError,
    MergeLabError,
    StructuralError,
    TrainingError,
)
from .figures import save_acc_at_k_figure, save_accuracy_figure, save_bias_figure
from .merging import MERGE_METHODS, task_arithmetic, task_vector, ties_merge, weight_average
from .model import ModelSpec, forward_batch
from .se_merging import se_evaluate, write_sample_reports_csv
from .training import TrainConfig, finetune, pretrain, write_curves_csv

_R6 = 6  # fixed decimal places for every numeric output


def _round(value: float) -> float:
    return round(float(value), _R6)


def _round_map(values: dict[Any, float]) -> dict[str, float]:
    return {str(k): _round(v) for k, v in sorted(values.items())}


def _write_json(path: Path, payload: dict[str, Any]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(json.dumps(payload, sort_keys=True, indent=2).encode() + b"\n")


def model_spec(cfg: RunConfig) -> ModelSpec:
    widths = (cfg.suite.input_dim, *cfg.model.hidden, cfg.suite.classes)
    return ModelSpec(widths, cfg.model.activation)


def default_layer(cfg: RunConfig) -> int:
    if cfg.se.layer is not None:
        return cfg.se.layer
    depth = len(cfg.model.hidden) + 1
    return max(1, depth - 1)


def resolve_threads(cfg: RunConfig) -> int:
    if cfg.threads is not None:
        return cfg.threads
    env = os.environ.get("MERGELAB_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise ConfigError(f"MERGELAB_THREADS must be an integer, got {env!r}") from exc
    return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# Artifact access


def _suite_or_fail(cfg: RunConfig) -> TaskSuite:
    try:
        return load_suite(cfg.run_dir(), cfg.seed)
    except ArtifactError as exc:
        raise ArtifactError(f"{exc}; run `mergelab gen-data` first") from exc


def _checkpoint_or_fail(path: Path, producer: str) -> tuple[ModelSpec, ParamVector, dict]:
    try:
        return load_checkpoint(path)
    except ArtifactError as exc:
        raise ArtifactError(f"{exc}; run `mergelab {producer}` first") from exc


def _checkpoints_dir(cfg: RunConfig) -> Path:
    return cfg.run_dir() / "checkpoints"


def _reports_dir(cfg: RunConfig) -> Path:
    return cfg.run_dir() / "reports"


def _load_base_and_experts(
    cfg: RunConfig,
) -> tuple[ModelSpec, ParamVector, list[ParamVector]]:
    ckpts = _checkpoints_dir(cfg)
    spec, theta_pt, _ = _checkpoint_or_fail(ckpts / "pretrained.ckpt", "train")
    experts = []
    for i in range(cfg.suite.tasks):
        _, params, _ = _checkpoint_or_fail(ckpts / f"expert_{i}.ckpt", "train")
        experts.append(params)
    return spec, theta_pt, experts


def _task_vectors(theta_pt: ParamVector, experts: Sequence[ParamVector]) -> list[TaskVector]:
    return [task_vector(e, theta_pt) for e in experts]


# ---------------------------------------------------------------------------
# Subcommands


def cmd_gen_data(cfg: RunConfig) -> dict[str, Any]:
    suite = generate_suite(
        cfg.suite.tasks,
        cfg.suite.input_dim,
        cfg.suite.classes,
        cfg.suite.train_per_task,
        cfg.suite.test_per_task,
        cfg.seed,
        cfg.suite.separation_sigmas,
    )
    base = save_suite(suite, cfg.run_dir())
    _write_json(cfg.run_dir() / "config.json", config_dict(cfg))
    return {"suite_dir": str(base), "probe_accuracy": [_round(a) for a in suite.probe_accuracy]}


def cmd_train(cfg: RunConfig) -> dict[str, Any]:
    suite = _suite_or_fail(cfg)
    spec = model_spec(cfg)
    ckpts = _checkpoints_dir(cfg)
    reports = _reports_dir(cfg)

    pre_cfg = TrainConfig(
        epochs=cfg.pretrain.epochs,
        batch_size=cfg.pretrain.batch_size,
        learning_rate=cfg.pretrain.learning_rate,
        seed=cfg.seed,
        optimizer=cfg.pretrain.optimizer,
    )
    result = pretrain(spec, suite, pre_cfg)
    save_checkpoint(ckpts / "pretrained.ckpt", spec, result.params, cfg.seed)
    write_curves_csv(reports / "curves_pretrain.csv", result.curves)
    summary: dict[str, Any] = {
        "pretrained_union_accuracy": _round(result.final("union_test").accuracy)
    }

    expert_acc = {}
    for task in suite.tasks:
        ft_cfg = TrainConfig(
            epochs=cfg.finetune.epochs,
            batch_size=cfg.finetune.batch_size,
            learning_rate=cfg.finetune.learning_rate,
            seed=cfg.seed + 1 + task.task_id,
            optimizer=cfg.finetune.optimizer,
        )
        ft = finetune(spec, result.params, task, ft_cfg)
        save_checkpoint(ckpts / f"expert_{task.task_id}.ckpt", spec, ft.params, ft_cfg.seed)
        write_curves_csv(reports / f"curves_expert_{task.task_id}.csv", ft.curves)
        expert_acc[task.task_id] = _round(ft.final("test").accuracy)
    summary["expert_accuracy"] = _round_map(expert_acc)
    return summary


def _merge_one(
    cfg: RunConfig,
    method: str,
    spec: ModelSpec,
    theta_pt: ParamVector,
    experts: Sequence[ParamVector],
) -> Path:
    taus = _task_vectors(theta_pt, experts)
    lam = cfg.merge.scaling
    if method == "average":
        weights = [1.0 / len(experts)] * len(experts)
        merged = weight_average(list(experts), weights)
        provenance: dict[str, Any] = {"method": method, "weights": weights}
    elif method == "task_arithmetic":
        merged = task_arithmetic(theta_pt, taus, lam)
        provenance = {"method": method, "lambda": lam}
    else:
        merged = ties_merge(theta_pt, taus, lam, cfg.merge.ties_density)
        provenance = {"method": method, "lambda": lam, "density": cfg.merge.ties_density}
    provenance["inputs"] = {
        "pretrained": value_hash(theta_pt),
        **{f"expert_{i}": value_hash(e) for i, e in enumerate(experts)},
    }
    path = _checkpoints_dir(cfg) / f"merged_{method}.ckpt"
    save_checkpoint(path, spec, merged, None, provenance)
    return path


def cmd_merge(cfg: RunConfig, methods: Sequence[str] | None = None) -> dict[str, Any]:
    spec, theta_pt, experts = _load_base_and_experts(cfg)
    chosen = list(methods) if methods else [cfg.merge.method]
    written = {m: str(_merge_one(cfg, m, spec, theta_pt, experts)) for m in chosen}
    return {"merged": written}


def _accuracy_per_task(spec: ModelSpec, params: ParamVector, suite: TaskSuite) -> dict[int, float]:
    out = {}
    for task in suite.tasks:
        logits = forward_batch(spec, params, task.test_x)
        out[task.task_id] = float((np.argmax(logits, axis=1) == task.test_y).mean())
    return out


def cmd_eval(cfg: RunConfig) -> dict[str, Any]:
    suite = _suite_or_fail(cfg)
    ckpts = _checkpoints_dir(cfg)
    spec, theta_pt, experts = _load_base_and_experts(cfg)

    models: dict[str, ParamVector] = {"pretrained": theta_pt}
    for i, e in enumerate(experts):
        models[f"expert_{i}"] = e
    for method in MERGE_METHODS:
        path = ckpts / f"merged_{method}.ckpt"
        if path.exists():
            _, params, _ = load_checkpoint(path)
            models[f"merged_{method}"] = params

    rows = []
    result: dict[str, Any] = {}
    for name, params in models.items():
        per_task = _accuracy_per_task(spec, params, suite)
        for task_id, acc in sorted(per_task.items()):
            rows.append([name, task_id, f"{acc:.6f}", suite.tasks[task_id].test_size])
        result[name] = {"per_task": _round_map(per_task),
                        "mean": _round(np.mean(list(per_task.values())))}
    # An expert is scored on its own task for the fine-tuned aggregate.
    result["finetuned"] = {
        "mean": _round(
            np.mean([result[f"expert_{i}"]["per_task"][str(i)] for i in range(len(experts))])
        )
    }

    out = _reports_dir(cfg) / "accuracy.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "task_id", "accuracy", "n_samples"])
        writer.writerows(rows)
    _write_json(_reports_dir(cfg) / "eval.json", result)
    return result


def cmd_se_eval(cfg: RunConfig) -> dict[str, Any]:
    suite = _suite_or_fail(cfg)
    spec, theta_pt, experts = _load_base_and_experts(cfg)
    taus = _task_vectors(theta_pt, experts)
    layer = default_layer(cfg)
    evaluation = se_evaluate(
        spec,
        suite,
        theta_pt,
        taus,
        cfg.se.scaling,
        layer,
        metric=cfg.se.metric,
        threads=resolve_threads(cfg),
        route_hard=cfg.se.route_hard,
        expert_scale=cfg.se.expert_scale,
    )
    write_sample_reports_csv(_reports_dir(cfg) / "se_samples.csv", evaluation)
    summary = {
        "per_task": _round_map(evaluation.per_task_accuracy),
        "mean": _round(evaluation.mean_accuracy),
        "task_identification_accuracy": _round(evaluation.task_identification_accuracy),
        "layer": layer,
        "lambda": cfg.se.scaling,
        "metric": cfg.se.metric,
        "route_hard": cfg.se.route_hard,
    }
    _write_json(_reports_dir(cfg) / "se_summary.json", summary)
    return summary


def cmd_diagnose(cfg: RunConfig) -> dict[str, Any]:
    suite = _suite_or_fail(cfg)
    spec, theta_pt, experts = _load_base_and_experts(cfg)
    taus = _task_vectors(theta_pt, experts)
    reports = _reports_dir(cfg)
    layer = default_layer(cfg)
    lam = cfg.se.scaling

    layers = list(range(1, spec.depth + 1))
    ks = list(range(1, suite.num_tasks + 1))
    report = acc_at_k(spec, suite, theta_pt, taus, lam, layers, ks, cfg.se.metric)
    with open(reports / "acc_at_k.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task_id", "layer", "k", "acc"])
        for (task_id, l, k), acc in sorted(report.accuracies.items()):
            writer.writerow([task_id, l, k, f"{acc:.6f}"])

    bias = bias_comparison(spec, suite, theta_pt, taus, lam, layer, cfg.se.metric)
    with open(reports / "bias.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["config", "task_id", "bias"])
        for config_name, per_task in sorted(bias.per_config.items()):
            for task_id, value in sorted(per_task.items()):
                writer.writerow([config_name, task_id, f"{value:.6f}"])

    disent = disentanglement_residual(spec, suite, theta_pt, taus, [lam] * suite.num_tasks)
    with open(reports / "disentanglement.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task_id", "residual", "ratio"])
        for task_id in sorted(disent.per_task_residual):
            writer.writerow(
                [
                    task_id,
                    f"{disent.per_task_residual[task_id]:.6f}",
                    f"{disent.per_task_ratio[task_id]:.6f}",
                ]
            )
        writer.writerow(["far_field", f"{disent.far_field_residual:.6f}",
                         f"{disent.far_field_ratio:.6f}"])

    figures_dir = reports / "figures"
    task_ids = [t.task_id for t in suite.tasks]
    save_acc_at_k_figure(report, task_ids, layers, figures_dir / "acc_at_k.png")
    save_bias_figure(bias, figures_dir / "bias.png")

    static_bias = bias.per_config["task_arithmetic"]
    se_bias = bias.per_config["se_merging"]
    summary = {
        "acc_at_1": {
            str(l): {str(t): _round(report.acc(t, l, 1)) for t in task_ids} for l in layers
        },
        "bias": {name: _round_map(vals) for name, vals in bias.per_config.items()},
        "bias_reduced_tasks": int(
            sum(se_bias[t] < static_bias[t] for t in task_ids)
        ),
        "disentanglement": {
            "per_task_residual": _round_map(disent.per_task_residual),
            "per_task_ratio": _round_map(disent.per_task_ratio),
            "far_field_residual": _round(disent.far_field_residual),
            "far_field_ratio": _round(disent.far_field_ratio),
        },
        "layer": layer,
        "lambda": lam,
    }
    _write_json(reports / "diagnostics.json", summary)
    return summary


def cmd_export_reps(cfg: RunConfig) -> dict[str, Any]:
    suite = _suite_or_fail(cfg)
    spec, theta_pt, experts = _load_base_and_experts(cfg)
    merged_path = _checkpoints_dir(cfg) / f"merged_{cfg.merge.method}.ckpt"
    _, merged, _ = _checkpoint_or_fail(merged_path, "merge")
    layer = default_layer(cfg)
    models = [(f"merged_{cfg.merge.method}", merged)] + [
        (f"expert_{i}", e) for i, e in enumerate(experts)
    ]
    out = _reports_dir(cfg) / "representations.csv"
    rows = export_representations(spec, suite, models, layer, out)
    return {"path": str(out), "rows": rows, "layer": layer}


def cmd_reproduce(cfg: RunConfig) -> dict[str, Any]:
    started = time.time()
    gen = cmd_gen_data(cfg)
    train_summary = cmd_train(cfg)
    cmd_merge(cfg, methods=list(MERGE_METHODS))
    eval_summary = cmd_eval(cfg)
    se_summary = cmd_se_eval(cfg)
    diag_summary = cmd_diagnose(cfg)
    cmd_export_reps(cfg)

    accuracies = {
        "pretrained": eval_summary["pretrained"]["mean"],
        "finetuned": eval_summary["finetuned"]["mean"],
        "weight_average": eval_summary["merged_average"]["mean"],
        "task_arithmetic": eval_summary["merged_task_arithmetic"]["mean"],
        "ties": eval_summary["merged_ties"]["mean"],
        "se_merging": se_summary["mean"],
    }
    gap = _round(accuracies["se_merging"] - accuracies["task_arithmetic"])
    summary = {
        "config_hash": config_hash(cfg),
        "accuracy": {k: _round(v) for k, v in accuracies.items()},
        "per_task_accuracy": {
            "task_arithmetic": eval_summary["merged_task_arithmetic"]["per_task"],
            "se_merging": se_summary["per_task"],
        },
        "se": {
            "gap_vs_task_arithmetic": gap,
            "task_identification_accuracy": se_summary["task_identification_accuracy"],
            "layer": se_summary["layer"],
        },
        "acc_at_1_selected_layer": diag_summary["acc_at_1"][str(diag_summary["layer"])],
        "representation_bias": diag_summary["bias"],
        "bias_reduced_tasks": diag_summary["bias_reduced_tasks"],
        "disentanglement": diag_summary["disentanglement"],
        "probe_accuracy": gen["probe_accuracy"],
        "pretrain": train_summary,
    }
    _write_json(cfg.run_dir() / "summary.json", summary)
    save_accuracy_figure(
        summary["accuracy"], _reports_dir(cfg) / "figures" / "methods.png"
    )
    _write_json(
        cfg.run_dir() / "meta.json",
        {
            "finished_unix": time.time(),
            "duration_seconds": round(time.time() - started, 3),
            "threads": resolve_threads(cfg),
            "numpy_version": np.__version__,
        },
    )
    return summary


# ---------------------------------------------------------------------------
# Argument parsing


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mergelab",
        description="Model-merging laboratory: synthetic experts, static merges, "
        "and per-sample dynamic coefficient rescaling.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "gen-data": "generate the synthetic task suite",
        "train": "pretrain the base model and fine-tune per-task experts",
        "merge": "build merged checkpoints from the trained experts",
        "eval": "score every checkpoint on every task's test split",
        "se-eval": "run per-sample dynamic merging over the test sets",
        "diagnose": "acc@k, representation bias, and disentanglement reports",
        "export-reps": "dump per-sample layer representations to CSV",
        "reproduce": "run the full pipeline and write summary.json",
    }
    for name, help_text in commands.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=str, default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out-dir", type=str, default=None)
        p.add_argument("--run-id", type=str, default=None)
        p.add_argument("--threads", type=int, default=None,
                       help="worker threads (default: MERGELAB_THREADS or all cores)")
        p.add_argument("--lambda", dest="scaling", type=float, default=None,
                       help="scaling coefficient for merges and rescaling")
        p.add_argument("--layer", type=int, default=None,
                       help="representation layer (default: penultimate)")
        p.add_argument("--metric", choices=["l2", "cosine"], default=None)
        p.add_argument("--route-hard", action="store_true",
                       help="diagnostic: answer with the nearest expert instead of re-merging")
        p.add_argument("--expert-scale", type=float, default=None,
                       help="coefficient for the comparison models (default: lambda)")
        p.add_argument("--ties-density", type=float, default=None)
        p.add_argument("--separation", type=float, default=None,
                       help="cross-task center separation in noise units")
        if name == "merge":
            p.add_argument("--method", choices=[*MERGE_METHODS, "all"], default=None)
    return parser


def _apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    top: dict[str, Any] = {}
    if args.seed is not None:
        top["seed"] = args.seed
    if args.out_dir is not None:
        top["out_dir"] = args.out_dir
    if args.run_id is not None:
        top["run_id"] = args.run_id
    if args.threads is not None:
        top["threads"] = args.threads

    merge_kw: dict[str, Any] = {}
    se_kw: dict[str, Any] = {}
    suite_kw: dict[str, Any] = {}
    if args.scaling is not None:
        merge_kw["scaling"] = args.scaling
        se_kw["scaling"] = args.scaling
    if args.ties_density is not None:
        merge_kw["ties_density"] = args.ties_density
    if getattr(args, "method", None) not in (None, "all"):
        merge_kw["method"] = args.method
    if args.layer is not None:
        se_kw["layer"] = args.layer
    if args.metric is not None:
        se_kw["metric"] = args.metric
    if args.route_hard:
        se_kw["route_hard"] = True
    if args.expert_scale is not None:
        se_kw["expert_scale"] = args.expert_scale
    if args.separation is not None:
        suite_kw["separation_sigmas"] = args.separation

    if merge_kw:
        cfg = dataclasses.replace(cfg, merge=dataclasses.replace(cfg.merge, **merge_kw))
    if se_kw:
        cfg = dataclasses.replace(cfg, se=dataclasses.replace(cfg.se, **se_kw))
    if suite_kw:
        cfg = dataclasses.replace(cfg, suite=dataclasses.replace(cfg.suite, **suite_kw))
    if top:
        cfg = dataclasses.replace(cfg, **top)
    return cfg


_EXIT_CODES = {"config": 2, "data": 3, "numeric": 4, "io": 5}


def _categorize(exc: BaseException) -> str:
    if isinstance(exc, ConfigError):
        return "config"
    if isinstance(exc, (ArtifactError, GenerationError)):
        return "data"
    if isinstance(exc, (DomainError, StructuralError, TrainingError, MergeLabError)):
        return "numeric"
    return "io"


def main(argv: Sequence[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else parse_config({})
        cfg = _apply_overrides(cfg, args)
        dispatch = {
            "gen-data": cmd_gen_data,
            "train": cmd_train,
            "eval": cmd_eval,
            "se-eval": cmd_se_eval,
            "diagnose": cmd_diagnose,
            "export-reps": cmd_export_reps,
            "reproduce": cmd_reproduce,
        }
        if args.command == "merge":
            methods = list(MERGE_METHODS) if getattr(args, "method", None) == "all" else None
            result = cmd_merge(cfg, methods)
        else:
            result = dispatch[args.command](cfg)
        print(json.dumps(result, sort_keys=True, indent=2))
        return 0
    except (MergeLabError, OSError) as exc:
        category = "io" if isinstance(exc, OSError) else _categorize(exc)
        print(f"error[{category}]: {exc}", file=sys.stderr)
        return _EXIT_CODES[category]


if __name__ == "__main__":
    raise SystemExit(main())
