"""Bimodal transformer assembly, upcycling and the checkpoint format."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import FFN, Attention, Linear, Module, RMSNorm, init_normal
from .modality import Modality
from .moe import ExpertLayout, GateRecord, MoELayer, RoutingTrace, build_variant_layout, load_balance_loss, upcycle_ffn
from .synth import PATCH_DIM, VOCAB_SIZE, Batch

PLACEMENTS = ("dense", "interleaved", "full")
DTYPES = {"float32": np.float32, "float64": np.float64}


@dataclass(frozen=True)
class MoEConfig:
    variant: str = "moiie"
    n_experts: int = 4
    balance: object = "balanced"  # "balanced" or (image, text, shared)
    top_k: int = 2
    aux_factor: str = "pool"  # "pool" or "total"

    def layout(self) -> ExpertLayout:
        return build_variant_layout(self.variant, self.n_experts, self.balance, self.top_k)


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    n_layers: int = 4
    n_heads: int = 4
    vocab_size: int = VOCAB_SIZE
    placement: str = "dense"
    moe: MoEConfig | None = None
    seed: int = 0
    dtype: str = "float32"
    patch_dim: int = PATCH_DIM
    max_len: int = 64

    def __post_init__(self):
        if self.d % self.n_heads:
            raise ValueError(f"d={self.d} not divisible by n_heads={self.n_heads}")
        if self.placement not in PLACEMENTS:
            raise ValueError(f"unknown placement {self.placement!r}")
        if (self.placement == "dense") != (self.moe is None):
            raise ValueError("placement=dense requires no MoE config, other placements require one")
        if self.dtype not in DTYPES:
            raise ValueError(f"unknown dtype {self.dtype!r}")
        if self.moe is not None:
            self.moe.layout()

    @property
    def np_dtype(self):
        return DTYPES[self.dtype]

    def moe_blocks(self) -> list[int]:
        """Interleaved placement puts MoE layers at odd block indices."""
        if self.placement == "dense":
            return []
        if self.placement == "full":
            return list(range(self.n_layers))
        return list(range(1, self.n_layers, 2))

    def dense(self) -> "ModelConfig":
        return replace(self, placement="dense", moe=None)


@dataclass
class ModalitySequence:
    embeddings: Tensor  # [(m + n), d]
    tags: np.ndarray
    m: int
    n: int


@dataclass
class ForwardOutput:
    logits: Tensor  # [B, S, V]
    trace: RoutingTrace
    gate_records: list[list[GateRecord]] = field(default_factory=list)

    def __iter__(self):
        return iter((self.logits, self.trace))


class MultimodalEmbedder(Module):
    """Patch embedder (frozen encoder stand-in), two-layer connector and token table."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        dt, d = cfg.np_dtype, cfg.d
        self.patch = Linear(cfg.patch_dim, d, rng, dt, std=0.2)
        self.connector = FFN(d, d, rng, dt, std=0.1)
        self.tokens = ad.parameter(init_normal(rng, (cfg.vocab_size, d), 0.1, dt))
        self.positions = ad.parameter(init_normal(rng, (cfg.max_len, d), 0.02, dt))
        self._vocab = cfg.vocab_size

    def project_image(self, patch_features: Tensor) -> Tensor:
        return self.connector(self.patch(patch_features))

    def embed_text(self, ids: np.ndarray) -> Tensor:
        ids = np.asarray(ids)
        if ids.size and ids.max() >= self._vocab:
            raise IndexError(f"text id {ids.max()} >= vocab_size {self._vocab}")
        return ad.embedding(self.tokens, ids)


class Block(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        dt = cfg.np_dtype
        self.attn = Attention(cfg.d, cfg.n_heads, rng, dt)
        self.norm = RMSNorm(cfg.d, dt)
        self.ffn: FFN | None = FFN(cfg.d, 4 * cfg.d, rng, dt)
        self.moe: MoELayer | None = None

    def __call__(self, x: Tensor, tags: np.ndarray, layer: int, trace: RoutingTrace):
        b, s, d = x.shape
        x = self.attn(x)
        h = ad.reshape(self.norm(x), (b * s, d))
        if self.moe is None:
            # pad rows skip the FFN, matching the MoE path so upcycling stays exact
            live = np.flatnonzero(tags.ravel() != Modality.PAD)
            y = ad.scatter_rows(b * s, [(live, self.ffn(ad.gather_rows(h, live, unique=True)))], like=h)
            return x + ad.reshape(y, (b, s, d)), None
        y, records = self.moe(h, tags.ravel(), layer, trace)
        return x + ad.reshape(y, (b, s, d)), records


class Model(Module):
    def __init__(self, cfg: ModelConfig):
        rng = np.random.default_rng(cfg.seed)
        self.embed = MultimodalEmbedder(cfg, rng)
        self.blocks = [Block(cfg, rng) for _ in range(cfg.n_layers)]
        self.final_norm = RMSNorm(cfg.d, cfg.np_dtype)
        self.head = Linear(cfg.d, cfg.vocab_size, rng, cfg.np_dtype, bias=False)
        self._cfg = cfg
        if cfg.moe is not None:
            # a freshly built sparse model is an upcycled copy of its own dense init
            layout = cfg.moe.layout()
            router_rng = np.random.default_rng([cfg.seed, 1])
            for i in cfg.moe_blocks():
                self.blocks[i].moe = upcycle_ffn(self.blocks[i].ffn, layout, router_rng)
                self.blocks[i].ffn = None

    @property
    def config(self) -> ModelConfig:
        return self._cfg

    @property
    def moe_layers(self) -> list[tuple[int, MoELayer]]:
        return [(i, b.moe) for i, b in enumerate(self.blocks) if b.moe is not None]

    def embed_multimodal(self, patch_features: np.ndarray, text_ids: Sequence[int]) -> ModalitySequence:
        patch_features = np.asarray(patch_features, dtype=self._cfg.np_dtype).reshape(-1, self._cfg.patch_dim)
        m, n = patch_features.shape[0], len(text_ids)
        if m + n == 0:
            raise ValueError("a sequence needs at least one image or text token")
        parts = []
        if m:
            parts.append(self.embed.project_image(ad.constant(patch_features)))
        if n:
            parts.append(self.embed.embed_text(np.asarray(text_ids, dtype=np.int64)))
        x = parts[0] if len(parts) == 1 else ad.concat(parts, axis=0)
        tags = np.array([Modality.IMAGE] * m + [Modality.TEXT] * n, dtype=np.int8)
        return ModalitySequence(x, tags, m, n)

    def embed_batch(self, batch: Batch) -> Tensor:
        b, s, d = batch.size, batch.seq_len, self._cfg.d
        if s > self._cfg.max_len:
            raise ValueError(f"sequence length {s} exceeds max_len {self._cfg.max_len}")
        parts = [(batch.text_rows, self.embed.embed_text(batch.token_ids.ravel()[batch.text_rows]))]
        if batch.image_rows.size:
            feats = ad.constant(batch.patch_features.astype(self._cfg.np_dtype, copy=False))
            parts.append((batch.image_rows, self.embed.project_image(feats)))
        x = ad.scatter_rows(b * s, parts, like=parts[0][1])
        x = x + ad.embedding(self.embed.positions, batch.positions)
        return ad.reshape(x, (b, s, d))

    def forward_embedded(self, x: Tensor, tags: np.ndarray) -> ForwardOutput:
        """Run the blocks, final norm and vocabulary head over ``x[B, S, d]``."""
        b, s, _ = x.shape
        tags = np.asarray(tags).reshape(b, s)
        trace = RoutingTrace()
        records = []
        for i, block in enumerate(self.blocks):
            x, rec = block(x, tags, i, trace)
            if rec is not None:
                records.append(rec)
        logits = self.head(self.final_norm(x))
        return ForwardOutput(logits, trace, records)

    def forward(self, batch: Batch) -> ForwardOutput:
        x = self.embed_batch(batch)
        return self.forward_embedded(x, batch.tags)

    __call__ = forward

    def aux_loss(self, records: list[list[GateRecord]]) -> Tensor:
        """Balance loss averaged over MoE layers; zero for a dense model."""
        if not records:
            return ad.constant(np.asarray(0.0, dtype=self._cfg.np_dtype))
        factor = self._cfg.moe.aux_factor
        per_layer = [load_balance_loss(r, factor) for r in records]
        total = per_layer[0]
        for t in per_layer[1:]:
            total = total + t
        return ad.scale(total, 1.0 / len(per_layer))


def transformer_forward(model: Model, batch) -> ForwardOutput:
    """Forward a :class:`Batch` or a list of equal-length :class:`ModalitySequence`."""
    if isinstance(batch, Batch):
        return model.forward(batch)
    seqs = list(batch)
    lengths = {seq.embeddings.shape[0] for seq in seqs}
    if len(lengths) != 1:
        raise ValueError(f"sequences of lengths {sorted(lengths)} need explicit padding (use collate)")
    s = lengths.pop()
    if s > model.config.max_len:
        raise ValueError(f"sequence length {s} exceeds max_len {model.config.max_len}")
    pos = ad.embedding(model.embed.positions, np.arange(s))
    rows = [ad.reshape(seq.embeddings + pos, (1, s, model.config.d)) for seq in seqs]
    x = rows[0] if len(rows) == 1 else ad.concat(rows, axis=0)
    return model.forward_embedded(x, np.stack([seq.tags for seq in seqs]))


def upcycle_from_dense(dense: Model, cfg: ModelConfig, seed: int | None = None) -> Model:
    """Sparse copy of ``dense``: each designated FFN becomes the seed of every expert."""
    if cfg.moe is None:
        raise ValueError("upcycling needs an MoE configuration")
    if dense.config.dense() != cfg.dense():
        raise ValueError("dense checkpoint and target config disagree outside the MoE settings")
    sparse = Model.__new__(Model)
    sparse.__dict__.update(dense.clone().__dict__)
    sparse._cfg = cfg
    layout = cfg.moe.layout()
    rng = np.random.default_rng([cfg.seed if seed is None else seed, 1])
    for i in cfg.moe_blocks():
        block = sparse.blocks[i]
        block.moe = upcycle_ffn(block.ffn, layout, rng)
        block.ffn = None
    return sparse


def parameter_groups(model: Model) -> dict[str, list[tuple[str, Tensor]]]:
    groups = {"connector": [], "patch_embedder": [], "backbone": []}
    for name, p in model.named_parameters():
        if name.startswith("embed.connector."):
            groups["connector"].append((name, p))
        elif name.startswith("embed.patch."):
            groups["patch_embedder"].append((name, p))
        else:
            groups["backbone"].append((name, p))
    return groups


# ---------------------------------------------------------------- checkpoint format

MAGIC = b"MOII"
FORMAT_VERSION = 1
_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_FROM_TAG = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    """Write ``MOII | u32 version | (u32 len, name, u8 dtype, u32 rank, u32 dims..., LE data)*``."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            if arr.dtype not in _TAGS:
                raise TypeError(f"{name}: cannot store dtype {arr.dtype}")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<BI", _TAGS[arr.dtype], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())


def load_tensors(path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: not a MOII checkpoint")
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    out, off = {}, 8
    while off < len(blob):
        (n,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + n].decode("utf-8")
        off += n
        tag, rank = struct.unpack_from("<BI", blob, off)
        off += 5
        dims = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        dt = _FROM_TAG[tag]
        count = int(np.prod(dims, dtype=np.int64))
        out[name] = np.frombuffer(blob, dtype=dt, count=count, offset=off).reshape(dims).astype(dt.newbyteorder("="))
        off += count * dt.itemsize
    return out


def save_model(model: Model, path) -> None:
    save_tensors(path, model.state_dict())


def load_model(path, cfg: ModelConfig) -> Model:
    model = Model(cfg)
    model.load_state_dict(load_tensors(path))
    return model
