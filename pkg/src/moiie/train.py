"""Two-stage training: connector alignment, then upcycled joint fine-tuning."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import (DTYPES, PLACEMENTS, MoEConfig, Model, ModelConfig, parameter_groups, save_model,
                    upcycle_from_dense)
from .moe import VARIANTS, load_balance_loss
from .synth import TASK_ORDER, Dataset, Batch, Task, make_dataset

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class ConfigError(ValueError):
    """Bad configuration key or value."""


# ---------------------------------------------------------------- configuration


@dataclass(frozen=True)
class RunConfig:
    """Every knob of a run; serialised as flat ``key = value`` text."""

    seed: int = 0
    dtype: str = "float32"
    # model
    d: int = 64
    n_layers: int = 4
    n_heads: int = 4
    vocab_size: int = 64
    placement: str = "interleaved"
    variant: str = "moiie"
    n_experts: int = 4
    balance: str = "balanced"
    top_k: int = 2
    aux_factor: str = "pool"
    # data
    train_sizes: tuple = (4000, 3000, 3000)
    eval_sizes: tuple = (800, 600, 600)
    # optimisation
    batch_size: int = 32
    warmup_ratio: float = 0.03
    alpha: float = 0.001
    stage1_steps: int = 200
    stage1_lr: float = 1e-3
    total_steps: int = 2000
    lr: float = 2e-3
    patch_lr_ratio: float = 0.1
    recipe: str = "two_stage"
    sft_steps: int = 1000
    moe_only_routers: bool = True
    # logging
    trace_every: int = 50
    eval_every: int = 0

    def __post_init__(self):
        if self.dtype not in DTYPES:
            raise ConfigError(f"dtype: unknown value {self.dtype!r}")
        if self.placement not in PLACEMENTS[1:]:
            raise ConfigError(f"placement: must be interleaved or full, got {self.placement!r}")
        if self.variant not in VARIANTS + ("dense",):
            raise ConfigError(f"variant: unknown value {self.variant!r}")
        if self.alpha < 0:
            raise ConfigError("alpha: must be non-negative")
        if not 0 <= self.warmup_ratio < 1:
            raise ConfigError("warmup_ratio: must lie in [0, 1)")
        if self.recipe not in ("two_stage", "three_stage"):
            raise ConfigError(f"recipe: unknown value {self.recipe!r}")
        if self.aux_factor not in ("pool", "total"):
            raise ConfigError(f"aux_factor: unknown value {self.aux_factor!r}")

    def balance_value(self):
        if self.balance == "balanced":
            return "balanced"
        try:
            return tuple(int(v) for v in self.balance.split(","))
        except ValueError:
            raise ConfigError(f"balance: expected 'balanced' or 'image,text,shared', got {self.balance!r}")

    def moe_config(self) -> MoEConfig | None:
        if self.variant == "dense":
            return None
        return MoEConfig(self.variant, self.n_experts, self.balance_value(), self.top_k, self.aux_factor)

    def model_config(self, stage: int = 2) -> ModelConfig:
        base = dict(d=self.d, n_layers=self.n_layers, n_heads=self.n_heads, vocab_size=self.vocab_size,
                    seed=self.seed, dtype=self.dtype)
        moe = self.moe_config() if stage == 2 else None
        if moe is None:
            return ModelConfig(placement="dense", moe=None, **base)
        return ModelConfig(placement=self.placement, moe=moe, **base)

    def training_config(self, stage: int) -> "TrainingConfig":
        if stage == 1:
            return TrainingConfig(1, {"connector": self.stage1_lr}, 0.0, self.warmup_ratio,
                                  self.stage1_steps, self.batch_size, self.seed, self.dtype)
        lrs = {"connector": self.lr, "backbone": self.lr, "patch_embedder": self.lr * self.patch_lr_ratio}
        return TrainingConfig(2, lrs, self.alpha, self.warmup_ratio, self.total_steps, self.batch_size,
                              self.seed, self.dtype)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                value = "true" if value else "false"
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:10]

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in fields:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = _parse_value(key, fields[key].default, value)
        return cls(**values)

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())


def _parse_value(key: str, default, value: str):
    try:
        if isinstance(default, bool):
            if value.lower() not in ("true", "false", "1", "0"):
                raise ValueError(value)
            return value.lower() in ("true", "1")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            return tuple(int(v) for v in value.split(","))
        return value
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r}") from None


@dataclass(frozen=True)
class TrainingConfig:
    stage: int
    base_lr: dict
    alpha: float = 0.001
    warmup_ratio: float = 0.03
    total_steps: int = 2000
    batch_size: int = 32
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError("alpha must be non-negative")
        if not 0 <= self.warmup_ratio < 1:
            raise ConfigError("warmup_ratio must lie in [0, 1)")
        if self.total_steps < 1:
            raise ConfigError("total_steps must be positive")


# ---------------------------------------------------------------- schedule and optimiser


def warmup_steps(cfg: TrainingConfig) -> int:
    return math.ceil(cfg.warmup_ratio * cfg.total_steps)


def lr_at(step: int, cfg: TrainingConfig, group: str | None = None) -> float:
    """Linear warmup to the base rate, then cosine decay to zero at ``total_steps``."""
    if not 0 <= step <= cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if group is None:
        group = "backbone" if "backbone" in cfg.base_lr else next(iter(cfg.base_lr))
    base = cfg.base_lr[group]
    warm = warmup_steps(cfg)
    if step < warm:
        return base * step / warm
    span = cfg.total_steps - warm
    progress = 1.0 if span == 0 else (step - warm) / span
    return base * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adam with decoupled weight decay and bias-corrected moments."""

    def __init__(self, params: Iterable[tuple[str, Tensor]], betas=ADAM_BETAS, eps: float = ADAM_EPS,
                 weight_decay: float = 0.0):
        self.params = list(params)
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self, lrs: dict[str, float]) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params:
            g = p.grad
            if g is None:
                raise ValueError(f"{name}: no gradient")
            if not np.isfinite(g).all():
                raise ad.NonFiniteError(f"{name}: non-finite gradient")
            dt = p.dtype.type
            m = self.m[name] = dt(b1) * self.m[name] + dt(1 - b1) * g
            v = self.v[name] = dt(b2) * self.v[name] + dt(1 - b2) * g * g
            update = (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(self.eps))
            lr = dt(lrs[name])
            if self.weight_decay:
                update = update + dt(self.weight_decay) * p.data
            p.data = p.data - lr * update


# ---------------------------------------------------------------- losses


@dataclass
class LossReport:
    step: int
    lm: float
    aux: float
    total: float
    alpha: float
    aux_layers: list[float] = field(default_factory=list)
    lrs: dict = field(default_factory=dict)


def answer_logits(logits: Tensor, batch: Batch) -> Tensor:
    flat = ad.reshape(logits, (-1, logits.shape[-1]))
    return ad.gather_rows(flat, batch.answer_rows, unique=True)


def total_loss(model: Model, out, batch: Batch, alpha: float, step: int = 0) -> tuple[Tensor, LossReport]:
    """Answer-position cross-entropy plus ``alpha`` times the layer-averaged balance loss."""
    if alpha < 0:
        raise ValueError("alpha must be non-negative")
    lm = ad.cross_entropy(answer_logits(out.logits, batch), batch.answer_ids)
    if model.moe_layers and not out.gate_records:
        raise ValueError("MoE model produced no routing records")
    factor = model.config.moe.aux_factor if model.config.moe else "pool"
    per_layer = [load_balance_loss(r, factor) for r in out.gate_records]
    aux = ad.mean(ad.concat([ad.reshape(t, (1,)) for t in per_layer])) if per_layer else \
        ad.constant(np.asarray(0.0, dtype=lm.dtype))
    layers = [t.item() for t in per_layer]
    if alpha > 0 and per_layer:
        loss = lm + ad.scale(aux, alpha)
    else:
        loss = lm
    lm_v, aux_v = lm.item(), aux.item()
    report = LossReport(step, lm_v, aux_v, lm_v + alpha * aux_v, alpha, layers)
    return loss, report


# ---------------------------------------------------------------- logging


METRIC_COLUMNS = ["step", "lm", "aux", "total", "lr_backbone", "lr_connector"] + \
    [f"acc_{t.value}" for t in TASK_ORDER] + ["acc_overall"]


class MetricLog:
    """Append-only CSV of loss reports and occasional evaluations."""

    def __init__(self, path: Path | None):
        self.path = Path(path) if path else None
        self.rows: list[dict] = []
        if self.path:
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(METRIC_COLUMNS)

    def append(self, report: LossReport, accuracies: dict | None = None) -> None:
        row = {
            "step": report.step,
            "lm": report.lm,
            "aux": report.aux,
            "total": report.total,
            "lr_backbone": report.lrs.get("backbone", ""),
            "lr_connector": report.lrs.get("connector", ""),
        }
        for t in TASK_ORDER:
            row[f"acc_{t.value}"] = accuracies.get(t.value, "") if accuracies else ""
        row["acc_overall"] = accuracies.get("overall", "") if accuracies else ""
        self.rows.append(row)
        if self.path:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(
                    [repr(float(v)) if isinstance(v, float) else v for v in (row[c] for c in METRIC_COLUMNS)])


def read_metric_log(path) -> list[dict]:
    """Parse a metric CSV back into numbers; unevaluated accuracy cells become ``None``."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        for key, value in row.items():
            if key == "step":
                row[key] = int(value)
            else:
                row[key] = float(value) if value != "" else None
    return rows


# ---------------------------------------------------------------- training loops


def _group_of(name: str) -> str:
    if name.startswith("embed.connector."):
        return "connector"
    if name.startswith("embed.patch."):
        return "patch_embedder"
    return "backbone"


def _is_moe_param(name: str, include_routers: bool) -> bool:
    return ".moe.experts." in name or (include_routers and ".moe.routers." in name)


def _set_trainable(model: Model, predicate) -> list[tuple[str, Tensor]]:
    chosen = []
    for name, p in model.named_parameters():
        p.requires_grad = bool(predicate(name))
        p.grad = None
        if p.requires_grad:
            chosen.append((name, p))
    return chosen


def fit(model: Model, dataset: Dataset, cfg: TrainingConfig, trainable: list[tuple[str, Tensor]],
        metric_log: MetricLog | None = None, trace_dir: Path | None = None, trace_every: int = 50,
        eval_set: Dataset | None = None, eval_every: int = 0, step_offset: int = 0) -> list[LossReport]:
    """Optimise ``trainable`` for ``cfg.total_steps`` steps; logs one report per step."""
    if not trainable:
        raise ValueError("nothing to train")
    dtype = DTYPES[cfg.dtype]
    opt = AdamW(trainable)
    groups = {name: _group_of(name) for name, _ in trainable}
    params = [p for _, p in trainable]
    batches = dataset.stream(cfg.batch_size, dtype)
    reports = []
    for step in range(1, cfg.total_steps + 1):
        batch = next(batches)
        with ad.Tape():
            out = model(batch)
            loss, report = total_loss(model, out, batch, cfg.alpha, step + step_offset)
            ad.backward(loss, params)
        group_lr = {g: lr_at(step, cfg, g) for g in cfg.base_lr}
        opt.step({name: group_lr[groups[name]] for name in groups})
        report.lrs = group_lr
        reports.append(report)
        accuracies = None
        if eval_set is not None and eval_every and step % eval_every == 0:
            accuracies = evaluate(model, eval_set)
        if metric_log is not None:
            metric_log.append(report, accuracies)
        if trace_dir is not None and trace_every and step % trace_every == 0 and not out.trace.is_empty():
            trace_dir.mkdir(parents=True, exist_ok=True)
            out.trace.to_csv(trace_dir / f"step_{step + step_offset:06d}.csv")
        if step % 100 == 0:
            log.info("step %d lm=%.4f aux=%.4f", step + step_offset, report.lm, report.aux)
    return reports


def train_stage1(model: Model, dataset: Dataset, cfg: TrainingConfig, metric_log: MetricLog | None = None,
                 **kwargs) -> tuple[Model, list[LossReport]]:
    """Align the connector; every other parameter stays frozen."""
    if model.config.placement != "dense":
        raise ValueError("stage 1 expects a dense model")
    if set(cfg.base_lr) != {"connector"}:
        raise ConfigError(f"stage 1 trains only the connector, got groups {sorted(cfg.base_lr)}")
    trainable = _set_trainable(model, lambda n: _group_of(n) == "connector")
    reports = fit(model, dataset, cfg, trainable, metric_log, **kwargs)
    return model, reports


def finetune(model: Model, dataset: Dataset, cfg: TrainingConfig, metric_log: MetricLog | None = None,
             only_moe: bool = False, include_routers: bool = True, **kwargs) -> tuple[Model, list[LossReport]]:
    if only_moe:
        trainable = _set_trainable(model, lambda n: _is_moe_param(n, include_routers))
    else:
        trainable = _set_trainable(model, lambda n: True)
    return model, fit(model, dataset, cfg, trainable, metric_log, **kwargs)


def train_stage2(stage1: Model, dataset: Dataset, cfg: TrainingConfig, model_cfg: ModelConfig,
                 metric_log: MetricLog | None = None, recipe: str = "two_stage", sft_steps: int = 0,
                 include_routers: bool = True, **kwargs) -> tuple[Model, list[LossReport]]:
    """Upcycle the stage-1 FFNs into experts and fine-tune on the total loss.

    ``recipe="three_stage"`` first runs ``sft_steps`` of dense full-parameter
    fine-tuning, then upcycles and trains only expert (and router) weights.
    """
    if model_cfg.moe is None:
        raise ConfigError("stage 2 needs an MoE configuration")
    if recipe == "three_stage":
        dense_cfg = dataclasses.replace(cfg, total_steps=sft_steps)
        stage1, _ = finetune(stage1, dataset, dense_cfg, metric_log, **kwargs)
        sparse = upcycle_from_dense(stage1, model_cfg)
        return finetune(sparse, dataset, cfg, metric_log, only_moe=True, include_routers=include_routers,
                        step_offset=sft_steps, **kwargs)
    sparse = upcycle_from_dense(stage1, model_cfg)
    return finetune(sparse, dataset, cfg, metric_log, **kwargs)


# ---------------------------------------------------------------- evaluation


def predict(model: Model, dataset: Dataset, batch_size: int = 128) -> np.ndarray:
    preds = []
    with ad.no_tape():
        for batch in dataset.iter_batches(batch_size, model.config.np_dtype):
            logits = answer_logits(model(batch).logits, batch)
            preds.append(np.argmax(logits.data, axis=-1))
    return np.concatenate(preds)


def evaluate(model: Model, dataset: Dataset, batch_size: int = 128) -> dict[str, float]:
    """Answer-slot argmax accuracy per task, over all examples, and the task mean."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    preds = predict(model, dataset, batch_size)
    truth = np.array([ex.answer_id for ex in dataset.examples])
    tasks = np.array([ex.task.value for ex in dataset.examples])
    correct = preds == truth
    result = {}
    for t in TASK_ORDER:
        sel = tasks == t.value
        if sel.any():
            result[t.value] = float(correct[sel].mean())
    result["overall"] = float(correct.mean())
    result["mean"] = float(np.mean([result[t.value] for t in TASK_ORDER if t.value in result]))
    return result


# ---------------------------------------------------------------- pipeline


@dataclass
class RunResult:
    out_dir: Path | None
    stage1: Model
    final: Model
    accuracies: dict
    reports: list[LossReport]


def datasets_for(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    return make_dataset(cfg.train_sizes, cfg.seed), make_dataset(cfg.eval_sizes, cfg.seed + 10_000)


def save_checkpoint(model: Model, run_cfg: RunConfig, stage: int, path: Path) -> None:
    save_model(model, path)
    variant = run_cfg.variant if stage == 2 else "dense"
    run_cfg.replace(variant=variant).save(Path(f"{path}.cfg"))


def load_checkpoint(path) -> tuple[Model, RunConfig]:
    from .model import load_model
    sidecar = Path(f"{path}.cfg")
    if not sidecar.exists():
        raise FileNotFoundError(f"checkpoint config {sidecar} not found")
    run_cfg = RunConfig.load(sidecar)
    return load_model(path, run_cfg.model_config(stage=2)), run_cfg


def run_stage1(cfg: RunConfig, out: Path | None, train: Dataset, eval_set: Dataset | None = None) -> Model:
    model = Model(cfg.model_config(stage=1))
    mlog = MetricLog(out / "metrics_stage1.csv" if out else None)
    model, _ = train_stage1(model, train, cfg.training_config(1), mlog)
    if out:
        save_checkpoint(model, cfg, 1, out / "stage1.moii")
    return model


def run_stage2(cfg: RunConfig, stage1: Model, out: Path | None, train: Dataset,
               eval_set: Dataset | None) -> tuple[Model, list[LossReport]]:
    tcfg = cfg.training_config(2)
    mlog = MetricLog(out / "metrics_stage2.csv" if out else None)
    extra = dict(trace_dir=(out / "traces") if out else None, trace_every=cfg.trace_every,
                 eval_set=eval_set, eval_every=cfg.eval_every)
    if cfg.variant == "dense":
        model, reports = finetune(stage1, train, tcfg, mlog, **extra)
    else:
        model, reports = train_stage2(stage1, train, tcfg, cfg.model_config(2), mlog, recipe=cfg.recipe,
                                      sft_steps=cfg.sft_steps, include_routers=cfg.moe_only_routers, **extra)
    if out:
        save_checkpoint(model, cfg, 2, out / "stage2.moii")
    return model, reports


def run_pipeline(cfg: RunConfig, out: Path | None = None, datasets: tuple[Dataset, Dataset] | None = None) -> RunResult:
    """Stage 1 then stage 2 from nothing but the config; writes artifacts when ``out`` is set."""
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.cfg")
    train, eval_set = datasets or datasets_for(cfg)
    stage1 = run_stage1(cfg, out, train)
    stage1_copy = stage1.clone()
    final, reports = run_stage2(cfg, stage1, out, train, eval_set)
    acc = evaluate(final, eval_set)
    if out is not None:
        import json
        (out / "eval.json").write_text(json.dumps(acc, indent=2, sort_keys=True) + "\n")
        if final.moe_layers:
            from .analysis import pathway_stats
            pathway_stats(final, eval_set, out / "route_stats.csv")
    return RunResult(out, stage1_copy, final, acc, reports)
