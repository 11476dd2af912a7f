"""Modality-partitioned expert routing, baseline MoE variants and upcycling.

Experts are indexed globally as ``[text intra | image intra | shared]``.
A MoIIE layer owns two routers: the text router scores the text-intra and
shared groups, the image router scores the image-intra and shared groups.
The two baselines reuse the same gating and combine path with different
pools: ``vanilla`` has a single router over every expert, ``modality``
splits the experts evenly between the two modalities with no shared group.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import FFN, Module, init_normal
from .modality import Modality

log = logging.getLogger(__name__)

VARIANTS = ("moiie", "modality", "vanilla")
GROUPS = ("T", "I", "S")
ROUTER_SCALE = 0.02


@dataclass(frozen=True)
class ExpertLayout:
    n_text: int
    n_image: int
    n_shared: int
    top_k: int
    variant: str = "moiie"
    balance: str = "balanced"

    @property
    def total(self) -> int:
        return self.n_text + self.n_image + self.n_shared

    @property
    def L(self) -> int:
        return self.n_text

    @property
    def text_range(self) -> range:
        return range(0, self.n_text)

    @property
    def image_range(self) -> range:
        return range(self.n_text, self.n_text + self.n_image)

    @property
    def shared_range(self) -> range:
        return range(self.n_text + self.n_image, self.total)

    def group_ids(self, group: str) -> np.ndarray:
        rng = {"T": self.text_range, "I": self.image_range, "S": self.shared_range}[group]
        return np.arange(rng.start, rng.stop)

    def group_of(self, expert: int) -> str:
        if expert in self.text_range:
            return "T"
        if expert in self.image_range:
            return "I"
        return "S"

    @property
    def router_names(self) -> tuple[str, ...]:
        return ("shared",) if self.variant == "vanilla" else ("image", "text")

    def router_for(self, modality: Modality) -> str:
        if self.variant == "vanilla":
            return "shared"
        if modality == Modality.IMAGE:
            return "image"
        if modality == Modality.TEXT:
            return "text"
        raise ValueError(f"no router for modality tag {modality!r}")

    def pool(self, router: str) -> np.ndarray:
        if router == "shared":
            return np.arange(self.total)
        if router == "text":
            return np.concatenate([self.group_ids("T"), self.group_ids("S")])
        if router == "image":
            return np.concatenate([self.group_ids("I"), self.group_ids("S")])
        raise KeyError(router)


def _validated(layout: ExpertLayout) -> ExpertLayout:
    for name in layout.router_names:
        size = len(layout.pool(name))
        if layout.top_k <= 0 or layout.top_k > size:
            raise ValueError(f"top_k={layout.top_k} exceeds the {name} router pool of {size}")
    return layout


def build_expert_layout(total: int, balance="balanced", top_k: int = 2) -> ExpertLayout:
    """MoIIE layout. ``balance`` is ``"balanced"`` or an ``(image, text, shared)`` triple."""
    if balance == "balanced":
        if total <= 0 or total % 4:
            raise ValueError(f"balanced layout needs a positive multiple of 4 experts, got {total}")
        L = total // 4
        return _validated(ExpertLayout(L, L, 2 * L, top_k, "moiie", "balanced"))
    n_image, n_text, n_shared = (int(v) for v in balance)
    if min(n_image, n_text, n_shared) < 0 or n_image + n_text + n_shared != total:
        raise ValueError(f"unbalanced counts {balance} do not sum to {total}")
    tag = f"unbalanced({n_image},{n_text},{n_shared})"
    return _validated(ExpertLayout(n_text, n_image, n_shared, top_k, "moiie", tag))


def build_variant_layout(variant: str, total: int, balance="balanced", top_k: int = 2) -> ExpertLayout:
    if variant == "moiie":
        return build_expert_layout(total, balance, top_k)
    if variant == "modality":
        if total <= 0 or total % 2:
            raise ValueError(f"modality layout needs an even expert count, got {total}")
        return _validated(ExpertLayout(total // 2, total // 2, 0, top_k, "modality"))
    if variant == "vanilla":
        return _validated(ExpertLayout(0, 0, total, top_k, "vanilla"))
    raise ValueError(f"unknown MoE variant {variant!r}")


class Router(Module):
    def __init__(self, name: str, pool: np.ndarray, weight: np.ndarray):
        self.weight = ad.parameter(weight)
        self._name = name
        self._pool = np.asarray(pool)

    @property
    def name(self) -> str:
        return self._name

    @property
    def pool(self) -> np.ndarray:
        return self._pool

    def logits(self, x: Tensor) -> Tensor:
        return ad.matmul(x, self.weight)


@dataclass
class GateDecision:
    """Top-k choice for a batch of tokens routed by one router.

    ``slots`` index the router's pool, ``experts`` are the matching global
    expert ids and ``weights`` the softmax over the selected logits.
    """

    experts: np.ndarray
    slots: np.ndarray
    weights: Tensor
    pool: np.ndarray

    def __len__(self) -> int:
        return self.experts.shape[0]

    def pairs(self, token: int) -> list[tuple[int, float]]:
        return [(int(e), float(w)) for e, w in zip(self.experts[token], self.weights.data[token])]


def gate_topk(x: Tensor, router: Router, k: int) -> GateDecision:
    single = x.ndim == 1
    if single:
        x = ad.reshape(x, (1, x.shape[0]))
    logits = router.logits(x)
    return select_topk(logits, router.pool, k)


def select_topk(logits: Tensor, pool: np.ndarray, k: int) -> GateDecision:
    """Keep the ``k`` largest pool logits per row and renormalise over them."""
    if k <= 0 or k > logits.shape[-1]:
        raise ValueError(f"k={k} outside [1, {logits.shape[-1]}]")
    slots = ad.topk_indices(logits.data, k)
    weights = ad.softmax(ad.take_along(logits, slots), axis=-1)
    return GateDecision(pool[slots], slots, weights, pool)


def combine(x: Tensor, rows: np.ndarray, decision: GateDecision, experts: Sequence) -> list:
    """Weighted expert outputs for ``x[rows]`` as ``(row, values)`` scatter parts."""
    parts = []
    for slot, expert_id in enumerate(decision.pool):
        r, j = np.nonzero(decision.slots == slot)
        if r.size == 0:
            continue
        target = rows[r]
        y = experts[expert_id](ad.gather_rows(x, target, unique=True))
        parts.append((target, ad.scale_rows(y, ad.pick(decision.weights, r, j))))
    return parts


@dataclass
class GateRecord:
    """Batch statistics one router contributes to the balance loss."""

    router: str
    pool_size: int
    total_experts: int
    n_tokens: int
    mean_gate: Tensor | None
    mean_active: np.ndarray | None

    @classmethod
    def from_decision(cls, router: str, decision: GateDecision, total_experts: int) -> "GateRecord":
        n, k = decision.slots.shape
        size = len(decision.pool)
        if n == 0:
            return cls(router, size, total_experts, 0, None, None)
        dense_gates = ad.scatter_cols(decision.weights, decision.slots, size)
        counts = np.bincount(decision.slots.ravel(), minlength=size)
        active = (counts / n).astype(decision.weights.dtype)
        return cls(router, size, total_experts, n, ad.mean(dense_gates, axis=0), active)


def load_balance_loss(records: Sequence[GateRecord], factor: str = "pool") -> Tensor:
    """Per-router ``|P| * sum_i mean(G_i) * mean(1_i)``, averaged over routers with tokens.

    ``factor="total"`` scales by the full expert count instead of the pool size.
    """
    terms = []
    for rec in records:
        if rec.n_tokens == 0:
            log.debug("router %s saw no tokens; excluded from balance loss", rec.router)
            continue
        scale = rec.pool_size if factor == "pool" else rec.total_experts
        dot = ad.sum(ad.mul(rec.mean_gate, ad.constant(rec.mean_active)))
        terms.append(ad.scale(dot, scale))
    if not terms:
        return ad.constant(np.asarray(0.0))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return ad.scale(total, 1.0 / len(terms))


@dataclass
class RoutingTrace:
    """Per (layer, modality) expert activation counts and summed gate mass."""

    counts: dict = field(default_factory=dict)
    gate_sums: dict = field(default_factory=dict)
    tokens: dict = field(default_factory=dict)
    pools: dict = field(default_factory=dict)
    groups: dict = field(default_factory=dict)
    top_k: dict = field(default_factory=dict)

    def is_empty(self) -> bool:
        return not self.tokens

    def keys(self) -> list:
        return sorted(self.tokens)

    def record(self, layer: int, modality: Modality, decision: GateDecision, layout: ExpertLayout) -> None:
        key = (layer, int(modality))
        if key not in self.tokens:
            self.counts[key] = np.zeros(layout.total, dtype=np.int64)
            self.gate_sums[key] = np.zeros(layout.total, dtype=np.float64)
            self.tokens[key] = 0
            self.pools[key] = np.asarray(decision.pool)
            self.groups[key] = [layout.group_of(e) for e in range(layout.total)]
            self.top_k[key] = decision.experts.shape[1]
        flat = decision.experts.ravel()
        self.counts[key] += np.bincount(flat, minlength=layout.total)
        self.gate_sums[key] += np.bincount(flat, weights=decision.weights.data.ravel().astype(np.float64),
                                           minlength=layout.total)
        self.tokens[key] += len(decision)

    def merge(self, other: "RoutingTrace") -> "RoutingTrace":
        out = RoutingTrace()
        for src in (self, other):
            for key in src.tokens:
                if key not in out.tokens:
                    out.counts[key] = src.counts[key].copy()
                    out.gate_sums[key] = src.gate_sums[key].copy()
                    out.tokens[key] = src.tokens[key]
                    out.pools[key] = src.pools[key]
                    out.groups[key] = src.groups[key]
                    out.top_k[key] = src.top_k[key]
                else:
                    out.counts[key] = out.counts[key] + src.counts[key]
                    out.gate_sums[key] = out.gate_sums[key] + src.gate_sums[key]
                    out.tokens[key] += src.tokens[key]
        return out

    def rows(self) -> list[dict]:
        table = []
        for key in self.keys():
            layer, mod = key
            n = self.tokens[key]
            for e in self.pools[key]:
                e = int(e)
                table.append({
                    "layer": layer,
                    "modality": Modality(mod).name.lower(),
                    "expert_id": e,
                    "expert_group": self.groups[key][e],
                    "activation_fraction": float(self.counts[key][e] / n) if n else 0.0,
                    "mean_gate_prob": float(self.gate_sums[key][e] / n) if n else 0.0,
                })
        return table

    def to_csv(self, path) -> None:
        write_trace_csv(self.rows(), path)


TRACE_COLUMNS = ("layer", "modality", "expert_id", "expert_group", "activation_fraction", "mean_gate_prob")


def write_trace_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: repr(float(v)) if isinstance(v, float) else v for k, v in row.items()})


def read_trace_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        row["layer"] = int(row["layer"])
        row["expert_id"] = int(row["expert_id"])
        row["activation_fraction"] = float(row["activation_fraction"])
        row["mean_gate_prob"] = float(row["mean_gate_prob"])
    return rows


class MoELayer(Module):
    """Sparse replacement for a dense FFN; see the module docstring for variants."""

    def __init__(self, layout: ExpertLayout, experts: list[FFN], routers: dict[str, Router]):
        if len(experts) != layout.total:
            raise ValueError(f"layout wants {layout.total} experts, got {len(experts)}")
        if set(routers) != set(layout.router_names):
            raise ValueError(f"routers {sorted(routers)} do not match layout {layout.router_names}")
        self.experts = experts
        self.routers = routers
        self._layout = layout
        self._forced: str | None = None

    @property
    def layout(self) -> ExpertLayout:
        return self._layout

    def force_group(self, group: str | None) -> None:
        """Route every token to one expert group, bypassing the modality partition."""
        if group is not None:
            if group not in GROUPS:
                raise ValueError(f"unknown expert group {group!r}")
            if len(self._layout.group_ids(group)) < 1:
                raise ValueError(f"expert group {group} is empty in a {self._layout.variant} layout")
        self._forced = group

    def _token_rows(self, tags: np.ndarray) -> dict[str, np.ndarray]:
        bad = ~np.isin(tags, (Modality.IMAGE, Modality.TEXT, Modality.PAD))
        if bad.any():
            raise ValueError(f"unknown modality tag {tags[bad][0]!r}")
        if self._layout.variant == "vanilla":
            return {"shared": np.flatnonzero(tags != Modality.PAD)}
        return {
            "image": np.flatnonzero(tags == Modality.IMAGE),
            "text": np.flatnonzero(tags == Modality.TEXT),
        }

    def __call__(self, x: Tensor, tags: np.ndarray, layer: int = 0,
                 trace: RoutingTrace | None = None) -> tuple[Tensor, list[GateRecord]]:
        """Route ``x[N, d]``; pad-tagged rows get a zero output and no statistics."""
        tags = np.asarray(tags).ravel()
        if tags.shape[0] != x.shape[0]:
            raise ValueError("one modality tag per row required")
        if self._forced is not None:
            return self._forced_forward(x, tags), []
        k = self._layout.top_k
        parts, records = [], []
        for name, rows in self._token_rows(tags).items():
            router = self.routers[name]
            if rows.size == 0:
                records.append(GateRecord(name, len(router.pool), self._layout.total, 0, None, None))
                continue
            decision = gate_topk(ad.gather_rows(x, rows, unique=True), router, k)
            parts.extend(combine(x, rows, decision, self.experts))
            records.append(GateRecord.from_decision(name, decision, self._layout.total))
            if trace is not None:
                for mod in (Modality.IMAGE, Modality.TEXT):
                    sel = tags[rows] == mod
                    if sel.any():
                        sub = GateDecision(decision.experts[sel], decision.slots[sel],
                                           ad.Tensor(decision.weights.data[sel]), decision.pool)
                        trace.record(layer, mod, sub, self._layout)
        if not parts:
            return ad.constant(np.zeros_like(x.data)), records
        return ad.scatter_rows(x.shape[0], parts, like=x), records

    def _forced_forward(self, x: Tensor, tags: np.ndarray) -> Tensor:
        group = self._forced
        ids = self._layout.group_ids(group)
        k = min(self._layout.top_k, len(ids))
        parts = []
        for mod in (Modality.IMAGE, Modality.TEXT):
            rows = np.flatnonzero(tags == mod)
            if rows.size == 0:
                continue
            if group == "T" and self._layout.variant != "vanilla":
                scorer = self.routers["text"]
            elif group == "I" and self._layout.variant != "vanilla":
                scorer = self.routers["image"]
            else:
                scorer = self.routers[self._layout.router_for(mod)]
            cols = np.searchsorted(scorer.pool, ids)
            logits = scorer.logits(ad.gather_rows(x, rows, unique=True))
            sub = ad.take_along(logits, np.broadcast_to(cols, (rows.size, cols.size)))
            decision = select_topk(sub, ids, k)
            parts.extend(combine(x, rows, decision, self.experts))
        if not parts:
            return ad.constant(np.zeros_like(x.data))
        return ad.scatter_rows(x.shape[0], parts, like=x)


def init_routers(layout: ExpertLayout, d: int, rng: np.random.Generator, dtype) -> dict[str, Router]:
    routers = {}
    for name in layout.router_names:
        pool = layout.pool(name)
        routers[name] = Router(name, pool, init_normal(rng, (d, len(pool)), ROUTER_SCALE, dtype))
    return routers


def upcycle_ffn(ffn: FFN | None, layout: ExpertLayout, rng: np.random.Generator) -> MoELayer:
    """Every expert becomes a bitwise copy of ``ffn``; routers start small and random."""
    if ffn is None or not isinstance(ffn, FFN):
        raise ValueError("upcycling needs dense FFN weights at the designated block")
    d = ffn.fc1.weight.shape[0]
    experts = [ffn.clone() for _ in range(layout.total)]
    return MoELayer(layout, experts, init_routers(layout, d, rng, ffn.fc1.weight.dtype))
