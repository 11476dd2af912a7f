"""Routing-pathway statistics, expert-group forcing and run reports."""

from __future__ import annotations

import dataclasses
import json
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .model import Model
from .moe import GROUPS, RoutingTrace, read_trace_csv, write_trace_csv
from .synth import Dataset
from .train import RunConfig, evaluate, read_metric_log

REPORT_VERSION = 1


# ---------------------------------------------------------------- pathway statistics


@dataclass
class PathwaySummary:
    """Accumulated routing statistics of one pass over a dataset."""

    trace: RoutingTrace
    rows: list[dict]
    shared_share: dict[int, float]

    def layers(self) -> list[int]:
        return sorted({row["layer"] for row in self.rows})


def collect_trace(model: Model, dataset: Dataset, batch_size: int = 128) -> RoutingTrace:
    """Forward the whole dataset, merging per-batch traces in dataset order."""
    total = RoutingTrace()
    with ad.no_tape():
        for batch in dataset.iter_batches(batch_size, model.config.np_dtype):
            total = total.merge(model(batch).trace)
    return total


def shared_share(rows: list[dict]) -> dict[int, float]:
    """Per layer, the share of expert activations that land in the shared group.

    Each (layer, modality) slice contributes the fraction of its ``top_k``
    activations spent on shared experts; the layer value averages the slices.
    """
    mass = defaultdict(float)
    shared = defaultdict(float)
    for row in rows:
        key = (row["layer"], row["modality"])
        mass[key] += row["activation_fraction"]
        if row["expert_group"] == "S":
            shared[key] += row["activation_fraction"]
    per_layer = defaultdict(list)
    for key, total in sorted(mass.items()):
        per_layer[key[0]].append(shared[key] / total if total else 0.0)
    return {layer: float(np.mean(values)) for layer, values in sorted(per_layer.items())}


def pathway_stats(model: Model, dataset: Dataset, csv_path=None, batch_size: int = 128) -> PathwaySummary:
    """Activation fraction and mean gate probability per (layer, modality, expert)."""
    if not model.moe_layers:
        raise ValueError("pathway statistics need a model with at least one MoE layer")
    trace = collect_trace(model, dataset, batch_size)
    rows = trace.rows()
    if csv_path is not None:
        write_trace_csv(rows, csv_path)
    return PathwaySummary(trace, rows, shared_share(rows))


def trace_violations(rows: list[dict], top_k: int | None = None, tol: float = 1e-9) -> list[str]:
    """Every broken conservation, range or partition rule in a trace row set.

    Conservation: fractions of one (layer, modality) slice sum to ``top_k``
    (inferred per slice when not given, so it must then be a whole number).
    Partition: text rows never reach image experts and image rows never reach
    text experts.
    """
    problems = []
    sums = defaultdict(float)
    for row in rows:
        key = (row["layer"], row["modality"])
        frac, gate = row["activation_fraction"], row["mean_gate_prob"]
        sums[key] += frac
        if not (0.0 <= frac <= 1.0 and 0.0 <= gate <= 1.0):
            problems.append(f"layer {key[0]} {key[1]} expert {row['expert_id']}: value outside [0, 1]")
        wrong = {"text": "I", "image": "T"}.get(row["modality"])
        if row["expert_group"] == wrong and frac != 0.0:
            problems.append(f"layer {key[0]} {key[1]} reached {wrong}-group expert {row['expert_id']}")
    for key, total in sorted(sums.items()):
        want = top_k if top_k is not None else round(total)
        if abs(total - want) > tol:
            problems.append(f"layer {key[0]} {key[1]}: fractions sum to {total!r}, expected {want}")
    return problems


# ---------------------------------------------------------------- expert-group forcing


def expert_group_ablation(model: Model, dataset: Dataset, group: str, *, override: bool = False,
                          batch_size: int = 128) -> dict[str, float]:
    """Per-task accuracy with every MoE layer forced onto one expert group.

    Forcing bypasses the modality partition, so it must be requested with
    ``override=True``. ``top_k`` is capped at the group size.
    """
    if not override:
        raise PermissionError("group forcing bypasses the modality partition; pass override=True")
    if group not in GROUPS:
        raise ValueError(f"unknown expert group {group!r}; choose from {GROUPS}")
    layers = [layer for _, layer in model.moe_layers]
    if not layers:
        raise ValueError("expert group forcing needs a model with MoE layers")
    try:
        for layer in layers:
            layer.force_group(group)
        return evaluate(model, dataset, batch_size)
    finally:
        for layer in layers:
            layer.force_group(None)


def group_ablation_table(model: Model, dataset: Dataset, batch_size: int = 128) -> list[dict]:
    """One accuracy row per non-empty expert group of the model's layout."""
    layout = model.moe_layers[0][1].layout if model.moe_layers else None
    if layout is None:
        raise ValueError("expert group forcing needs a model with MoE layers")
    rows = []
    for group in GROUPS:
        if layout.group_ids(group).size:
            acc = expert_group_ablation(model, dataset, group, override=True, batch_size=batch_size)
            rows.append({"group": group, **acc})
    return rows


# ---------------------------------------------------------------- reports


def _required_files(run_dir: Path, cfg: RunConfig | None) -> list[Path]:
    names = ["config.cfg", "eval.json", "metrics_stage2.csv"]
    if cfg is None or cfg.variant != "dense":
        names.append("route_stats.csv")
    return [run_dir / n for n in names]


def build_report(run_dir) -> dict:
    """Collect one finished run into a plain dictionary."""
    run_dir = Path(run_dir)
    cfg_path = run_dir / "config.cfg"
    cfg = RunConfig.load(cfg_path) if cfg_path.exists() else None
    missing = [str(p) for p in _required_files(run_dir, cfg) if not p.exists()]
    if missing:
        raise FileNotFoundError("run directory is missing: " + ", ".join(missing))

    accuracies = json.loads((run_dir / "eval.json").read_text())
    metrics = read_metric_log(run_dir / "metrics_stage2.csv")
    every = max(cfg.trace_every, 1)
    aux = [[row["step"], row["aux"]] for row in metrics
           if row["step"] % every == 0 or row is metrics[-1]]

    pathways, share = {}, {}
    if cfg.variant != "dense":
        rows = read_trace_csv(run_dir / "route_stats.csv")
        for row in rows:
            layer = pathways.setdefault(str(row["layer"]), {})
            layer.setdefault(row["modality"], []).append(
                {k: row[k] for k in ("expert_id", "expert_group", "activation_fraction", "mean_gate_prob")})
        share = {str(k): v for k, v in shared_share(rows).items()}

    return {
        "version": REPORT_VERSION,
        "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(cfg).items()},
        "accuracy": accuracies,
        "pathways": pathways,
        "shared_share": share,
        "aux_trajectory": aux,
        "final_lm": metrics[-1]["lm"] if metrics else None,
    }


def dumps_report(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def export_report(run_dir, out_path=None) -> str:
    """Write ``report.json`` for a finished run and return its text."""
    text = dumps_report(build_report(run_dir))
    Path(out_path or Path(run_dir) / "report.json").write_text(text)
    return text


def merge_reports(sections: list[tuple[str, dict]], sweep: str) -> str:
    """Combine per-setting reports into one document, keeping the given order."""
    merged = {
        "sweep": sweep,
        "order": [label for label, _ in sections],
        "sections": {label: report for label, report in sections},
        "summary": {label: report["accuracy"] for label, report in sections},
    }
    return dumps_report(merged)
