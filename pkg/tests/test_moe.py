import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from moiie import autodiff as ad
from moiie.layers import FFN, Module
from moiie.modality import Modality
from moiie.model import Model, ModelConfig, MoEConfig, upcycle_from_dense
from moiie.moe import (GateRecord, MoELayer, Router, RoutingTrace, build_expert_layout, build_variant_layout,
                       gate_topk, init_routers, load_balance_loss, read_trace_csv, select_topk, upcycle_ffn,
                       write_trace_csv)
from moiie.synth import collate, make_dataset


def decide(logits, k, pool=None):
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim == 1:
        logits = logits[None]
    pool = np.arange(logits.shape[1]) if pool is None else np.asarray(pool)
    return select_topk(ad.Tensor(logits), pool, k)


# ---------------------------------------------------------------- gating


def test_gate_ties_break_low_and_split_evenly():
    d = decide([1.0, 1.0, 1.0], 2)
    assert d.pairs(0) == [(0, 0.5), (1, 0.5)]


def test_gate_softmax_after_selection():
    d = decide([2.0, 1.0, 0.0, -1.0], 2)
    assert [e for e, _ in d.pairs(0)] == [0, 1]
    np.testing.assert_allclose(d.weights.data[0], [0.73106, 0.26894], atol=5e-6)


def test_gate_single_expert_weight_is_one():
    d = decide([0.3, 1.7], 1)
    assert d.pairs(0) == [(1, 1.0)]


@pytest.mark.parametrize("k", [0, 4])
def test_gate_k_out_of_range(k):
    with pytest.raises(ValueError):
        decide([0.0, 1.0, 2.0], k)


def test_gate_topk_on_a_single_vector_uses_the_router_pool():
    router = Router("text", np.array([0, 2, 3]), np.array([[0.0, 1.0, 2.0]]))
    d = gate_topk(ad.constant(np.array([1.0])), router, 2)
    assert [e for e, _ in d.pairs(0)] == [3, 2]


@settings(max_examples=80, deadline=None)
@given(arrays(np.int64, st.tuples(st.integers(1, 5), st.integers(2, 6)), elements=st.integers(-160, 160)),
       st.integers(-400, 400), st.integers(1, 6))
def test_gate_shift_invariance_and_normalisation(ticks, shift, k):
    # eighths keep logits and shifted logits exactly representable, so ties survive the shift
    logits, c = ticks / 8.0, shift / 8.0
    k = min(k, logits.shape[1])
    a, b = decide(logits, k), decide(logits + c, k)
    np.testing.assert_array_equal(a.experts, b.experts)
    np.testing.assert_allclose(a.weights.data, b.weights.data, atol=1e-12)
    np.testing.assert_allclose(a.weights.data.sum(axis=1), 1.0, atol=1e-12)
    assert (a.weights.data > 0).all()
    assert all(len(set(row)) == k for row in a.experts.tolist())


# ---------------------------------------------------------------- layouts


@pytest.mark.parametrize("total,balance,expected", [
    (4, "balanced", (1, 1, 2)),
    (8, "balanced", (2, 2, 4)),
    (8, (3, 3, 2), (3, 3, 2)),
])
def test_layout_counts(total, balance, expected):
    lay = build_expert_layout(total, balance, top_k=2)
    assert (lay.n_image, lay.n_text, lay.n_shared) == expected
    ranges = list(lay.text_range) + list(lay.image_range) + list(lay.shared_range)
    assert ranges == list(range(total))


def test_unbalanced_pools_have_five_experts():
    lay = build_expert_layout(8, (3, 3, 2))
    assert len(lay.pool("text")) == len(lay.pool("image")) == 5
    assert not set(lay.pool("text")) & set(lay.group_ids("I"))
    assert not set(lay.pool("image")) & set(lay.group_ids("T"))


@pytest.mark.parametrize("args", [(6, "balanced", 2), (4, "balanced", 4), (8, (3, 3, 3), 2), (8, (4, 4, 0), 5)])
def test_layout_errors(args):
    with pytest.raises(ValueError):
        build_expert_layout(*args)


def test_variant_layouts():
    mod = build_variant_layout("modality", 4)
    assert len(mod.pool("text")) == len(mod.pool("image")) == 2 and mod.n_shared == 0
    van = build_variant_layout("vanilla", 4)
    assert van.router_names == ("shared",) and list(van.pool("shared")) == [0, 1, 2, 3]
    with pytest.raises(ValueError):
        build_variant_layout("modality", 5)
    with pytest.raises(ValueError):
        build_variant_layout("nope", 4)


# ---------------------------------------------------------------- layer forward


class ScalarMap(Module):
    def __init__(self, c):
        self.c = c

    def __call__(self, x):
        return ad.scale(x, self.c)


def test_hand_built_scalar_experts():
    lay = build_expert_layout(4)
    experts = [ScalarMap(2.0), ScalarMap(7.0), ScalarMap(3.0), ScalarMap(5.0)]
    routers = {
        "text": Router("text", lay.pool("text"), np.array([[1.0, 1.0, -5.0]])),
        "image": Router("image", lay.pool("image"), np.array([[0.0, 0.0, 0.0]])),
    }
    layer = MoELayer(lay, experts, routers)
    out, records = layer(ad.constant(np.array([[1.0]])), np.array([Modality.TEXT]))
    assert out.item() == pytest.approx(2.5, abs=1e-15)
    assert [r.n_tokens for r in records] == [0, 1]


def random_layer(variant, total=4, d=8, seed=0, scale=1.0, top_k=2):
    rng = np.random.default_rng(seed)
    lay = build_variant_layout(variant, total, top_k=top_k)
    experts = [FFN(d, 4 * d, rng, np.float64, std=0.3) for _ in range(lay.total)]
    routers = init_routers(lay, d, rng, np.float64)
    for r in routers.values():
        r.weight.data *= scale / 0.02
    return MoELayer(lay, experts, routers)


def random_tokens(n, d=8, seed=1, pad=0.0):
    rng = np.random.default_rng(seed)
    tags = rng.choice([Modality.IMAGE, Modality.TEXT, Modality.PAD], size=n, p=[(1 - pad) / 2, (1 - pad) / 2, pad])
    return ad.constant(rng.normal(size=(n, d))), tags.astype(np.int8)


@pytest.mark.parametrize("variant", ["moiie", "modality"])
def test_routing_partition_on_ten_thousand_tokens(variant):
    layer = random_layer(variant, total=8)
    x, tags = random_tokens(10_000)
    trace = RoutingTrace()
    layer(x, tags, 0, trace)
    lay = layer.layout
    assert trace.counts[(0, Modality.TEXT)][lay.group_ids("I")].sum() == 0
    assert trace.counts[(0, Modality.IMAGE)][lay.group_ids("T")].sum() == 0
    for key in trace.keys():
        assert trace.counts[key].sum() == 2 * trace.tokens[key]


def test_vanilla_text_token_may_use_any_expert():
    layer = random_layer("vanilla", total=4)
    x, tags = random_tokens(2000)
    trace = RoutingTrace()
    layer(x, tags, 0, trace)
    assert (trace.counts[(0, Modality.TEXT)] > 0).all()


def test_pad_rows_get_zero_output_and_no_statistics():
    layer = random_layer("moiie")
    x, tags = random_tokens(300, pad=0.3)
    trace = RoutingTrace()
    out, records = layer(x, tags, 0, trace)
    np.testing.assert_array_equal(out.data[tags == Modality.PAD], 0.0)
    assert sum(trace.tokens.values()) == int((tags != Modality.PAD).sum())
    assert sum(r.n_tokens for r in records) == int((tags != Modality.PAD).sum())


def test_unknown_modality_tag_is_an_error():
    layer = random_layer("moiie")
    with pytest.raises(ValueError):
        layer(ad.constant(np.zeros((2, 8))), np.array([0, 7]))


def test_moe_layer_gradients():
    layer = random_layer("moiie", scale=1.0, seed=3)
    x, tags = random_tokens(12, seed=4)
    x = ad.Tensor(x.data, requires_grad=True)
    probe = np.random.default_rng(5).normal(size=x.shape)

    def loss():
        out, records = layer(x, tags)
        return ad.sum(ad.mul(out, ad.constant(probe))) + ad.scale(load_balance_loss(records), 0.5)

    assert ad.grad_check(loss, [x] + layer.parameters(), probes=80, seed=1) <= 1e-4


# ---------------------------------------------------------------- balance loss


def record(logits, k, pool_size=None, total=None):
    d = decide(logits, k)
    return GateRecord.from_decision("text", d, total or d.pool.size)


def test_balance_loss_uniform_anchor_equals_k():
    rec = record([[1, 1, 0, 0], [0, 0, 1, 1]], 2)
    np.testing.assert_allclose(rec.mean_gate.data, 0.25)
    np.testing.assert_allclose(rec.mean_active, 0.5)
    assert load_balance_loss([rec]).item() == pytest.approx(2.0, abs=1e-12)


def test_balance_loss_collapse_anchor_equals_pool_size():
    rec = record([[1, 1, 0, 0]] * 5, 2)
    assert load_balance_loss([rec]).item() == pytest.approx(4.0, abs=1e-12)


def test_balance_loss_all_active_equals_pool_size():
    logits = np.random.default_rng(0).normal(size=(9, 4))
    assert load_balance_loss([record(logits, 4)]).item() == pytest.approx(4.0, abs=1e-12)


def test_balance_loss_factor_flag_and_empty_router():
    rec = record([[1, 1, 0], [0, 1, 1], [1, 0, 1]], 2, total=4)
    empty = GateRecord("image", 3, 4, 0, None, None)
    pool = load_balance_loss([rec, empty], "pool").item()
    assert pool == pytest.approx(2.0, abs=1e-12)
    assert load_balance_loss([rec, empty], "total").item() == pytest.approx(pool * 4 / 3, abs=1e-12)
    assert load_balance_loss([empty]).item() == 0.0


# ---------------------------------------------------------------- upcycling


def test_upcycled_experts_are_bitwise_copies():
    rng = np.random.default_rng(0)
    ffn = FFN(8, 32, rng, np.float32)
    layer = upcycle_ffn(ffn, build_expert_layout(8), rng)
    blob = b"".join(p.data.tobytes() for p in ffn.parameters())
    assert all(b"".join(p.data.tobytes() for p in e.parameters()) == blob for e in layer.experts)
    assert all(e.fc1.weight is not ffn.fc1.weight for e in layer.experts)
    w = np.concatenate([r.weight.data.ravel() for r in layer.routers.values()])
    assert abs(w.std() - 0.02) < 0.005 and w.dtype == np.float32
    with pytest.raises(ValueError):
        upcycle_ffn(None, build_expert_layout(4), rng)


@pytest.mark.parametrize("variant", ["moiie", "modality", "vanilla"])
@pytest.mark.parametrize("placement", ["interleaved", "full"])
@pytest.mark.parametrize("dtype,tol", [("float64", 1e-12), ("float32", 1e-6)])
def test_upcycling_preserves_logits(variant, placement, dtype, tol):
    dense = Model(ModelConfig(d=16, n_layers=4, n_heads=2, dtype=dtype, seed=2))
    for p in dense.parameters():
        p.data += np.random.default_rng(1).normal(0, 0.05, p.shape).astype(p.dtype)
    sparse = upcycle_from_dense(dense, ModelConfig(d=16, n_layers=4, n_heads=2, dtype=dtype, seed=2,
                                                   placement=placement, moe=MoEConfig(variant=variant)))
    batch = collate(make_dataset((6, 5, 5), seed=3).examples, dense.config.np_dtype)
    a, b = dense(batch).logits.data, sparse(batch).logits.data
    np.testing.assert_allclose(b, a, rtol=0, atol=tol * max(1.0, np.abs(a).max()))


# ---------------------------------------------------------------- group forcing


def test_forced_group_caps_k_at_group_size():
    layer = random_layer("moiie", total=4)
    # the text group holds one expert, so every token gets it with weight one
    layer.experts = [ScalarMap(2.0), ScalarMap(7.0), ScalarMap(3.0), ScalarMap(5.0)]
    layer.force_group("T")
    x, tags = random_tokens(20)
    out, records = layer(x, tags)
    live = tags != Modality.PAD
    np.testing.assert_allclose(out.data[live], 2.0 * x.data[live], rtol=1e-15)
    assert records == []


def test_forcing_shared_group_on_fresh_upcycle_is_dense():
    rng = np.random.default_rng(4)
    ffn = FFN(8, 32, rng, np.float64, std=0.3)
    layer = upcycle_ffn(ffn, build_expert_layout(4), rng)
    layer.force_group("S")
    x, tags = random_tokens(30)
    out, _ = layer(x, tags)
    np.testing.assert_allclose(out.data, ffn(x).data, rtol=0, atol=1e-13)


def test_forcing_an_empty_group_is_an_error():
    layer = random_layer("modality")
    with pytest.raises(ValueError):
        layer.force_group("S")
    with pytest.raises(ValueError):
        layer.force_group("X")


# ---------------------------------------------------------------- trace


def test_trace_merge_and_csv_round_trip(tmp_path):
    layer = random_layer("moiie", total=8)
    t1, t2 = RoutingTrace(), RoutingTrace()
    x, tags = random_tokens(400)
    layer(x, tags, 1, t1)
    layer(x, tags, 1, t2)
    merged = t1.merge(t2)
    for key in merged.keys():
        np.testing.assert_array_equal(merged.counts[key], 2 * t1.counts[key])
        assert merged.tokens[key] == 2 * t1.tokens[key]
    write_trace_csv(merged.rows(), tmp_path / "t.csv")
    rows = read_trace_csv(tmp_path / "t.csv")
    assert rows == merged.rows()
    fractions = {}
    for row in rows:
        fractions.setdefault((row["layer"], row["modality"]), []).append(row["activation_fraction"])
        assert 0 <= row["mean_gate_prob"] <= 1
    for values in fractions.values():
        assert sum(values) == pytest.approx(2.0, abs=1e-12)
        assert len(values) == 6
