import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridmm.layers import (
    AttentionLayer, ConfigError, FeedForward, HybridModel, MambaLayer, MoE, StackSpec, build_stack, model_forward,
    top_k_indices,
)
from hybridmm.numerics import Rng, Tensor, grad_check, no_grad
from hybridmm.numerics import functional as F
from hybridmm.selfcheck import causality_violation
from hybridmm.ssm import DomainError

TINY = dict(d_model=16, n_heads=2, n_experts=2, top_k=1, vocab=16, d_state=4)


# -- attention ---------------------------------------------------------------


def test_single_position_attention_is_value_projection():
    layer = AttentionLayer(8, 2, None, Rng(0))
    x = Tensor(Rng(1).normal(size=(1, 1, 8)))
    with no_grad():
        got = layer.attention(x).data
        want = layer.wo(layer.wv(layer.norm(x))).data
    assert np.allclose(got, want, atol=1e-14)


def test_uniform_scores_average_visible_values():
    v = Rng(2).normal(size=(1, 1, 6, 4))
    q = np.zeros((1, 1, 6, 4))
    out = F.attend(q, q, v)
    want = np.cumsum(v, axis=2) / np.arange(1, 7)[None, None, :, None]
    assert np.allclose(out, want, atol=1e-14)


def test_attention_causal():
    layer = AttentionLayer(8, 2, FeedForward(8, 16, Rng(3)), Rng(4))
    x = Rng(5).normal(size=(1, 12, 8))
    with no_grad():
        assert causality_violation(lambda a: layer(a).data, x, axis=1) == 0.0


def test_attention_block_chunking_is_exact():
    rng = Rng(6)
    q, k, v = (rng.normal(size=(1, 2, 37, 4)) for _ in range(3))
    assert np.allclose(F.attend(q, k, v, block=5), F.attend(q, k, v, block=256), atol=1e-14)


def test_attention_grad():
    layer = AttentionLayer(8, 2, FeedForward(8, 16, Rng(3)), Rng(4))
    x = Tensor(Rng(5).normal(size=(1, 5, 8)))
    rep = grad_check(lambda ps: F.sum(layer(x) - x), layer.parameters())
    assert rep.max_rel_err < 1e-4


def test_rope_layer_causal_and_cached():
    from hybridmm.inference import decode_step, full_logits, prefill

    m = build_stack(StackSpec(pattern="AM", rope=True, **TINY), Rng(0))
    prompt = Rng(1).integers(0, 16, 9)
    st_, logits = prefill(m, prompt, chunk=4)
    assert np.allclose(logits, full_logits(m, prompt)[-1], atol=1e-12)
    nxt = decode_step(m, st_, 3)
    assert np.allclose(nxt, full_logits(m, list(prompt) + [3])[-1], atol=1e-12)


# -- MoE ---------------------------------------------------------------------


def test_top_k_ties_break_to_lower_index():
    assert top_k_indices(np.array([[1.0, 2.0, 2.0, 0.0]]), 2).tolist() == [[1, 2]]
    assert top_k_indices(np.array([[3.0, 3.0, 3.0]]), 1).tolist() == [[0]]


def test_equal_gates_average_two_experts():
    moe = MoE(6, 8, 2, 2, Rng(0))
    moe.router.weight.data[:] = 0.0
    x = Rng(1).normal(size=(3, 6))
    with no_grad():
        want = 0.5 * (moe.experts[0](Tensor(x)).data + moe.experts[1](Tensor(x)).data)
        assert np.allclose(moe(x).data, want, atol=1e-14)


def test_dominant_gate_selects_single_expert():
    moe = MoE(4, 8, 3, 1, Rng(0))
    moe.router.weight.data[:] = 0.0
    moe.router.weight.data[0, 2] = 100.0
    x = np.zeros((1, 4))
    x[0, 0] = 1.0
    x[0, 1:] = Rng(1).normal(size=3)
    with no_grad():
        assert np.allclose(moe(x).data, moe.experts[2](Tensor(x)).data, rtol=0, atol=1e-12)


def test_top_k_equal_e_is_dense_mixture():
    moe = MoE(5, 8, 3, 3, Rng(2))
    x = Rng(3).normal(size=(4, 5))
    with no_grad():
        p = F.softmax(moe.router(Tensor(x)), axis=-1).data
        want = sum(p[:, e : e + 1] * moe.experts[e](Tensor(x)).data for e in range(3))
        assert np.allclose(moe(x).data, want, atol=1e-13)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 4))
def test_selected_weights_sum_to_one(seed, k):
    moe = MoE(6, 4, 4, k, Rng(seed))
    with no_grad():
        w, sel = moe.gate(Tensor(Rng(seed + 1).normal(size=(7, 6)) * 10))
    assert np.all(np.abs(w.data.sum(-1) - 1.0) < 1e-12)
    assert np.all((w.data > 0).sum(-1) <= k)


def test_moe_grad_and_invalid_top_k():
    moe = MoE(6, 8, 4, 2, Rng(4))
    x = Tensor(Rng(5).normal(size=(5, 6)))
    assert grad_check(lambda ps: F.sum(moe(x) ** 2), moe.parameters()).max_rel_err < 1e-4
    with pytest.raises(ConfigError):
        MoE(6, 8, 2, 3, Rng(0))


def test_aux_loss_only_when_enabled():
    m = build_stack(StackSpec(pattern="AM", **TINY), Rng(0))
    m(np.arange(5))
    assert m.aux_loss() is None
    m = build_stack(StackSpec(pattern="AM", moe_aux_coef=0.01, **TINY), Rng(0))
    m(np.arange(5))
    assert float(m.aux_loss().data) > 0


# -- stack ---------------------------------------------------------------------


def test_build_am_without_moe():
    m = build_stack(StackSpec(pattern="AM", moe_positions=frozenset()), Rng(0))
    assert m.kinds == "AM"
    assert isinstance(m.layers[0], AttentionLayer) and isinstance(m.layers[0].ffn, FeedForward)
    assert isinstance(m.layers[1], MambaLayer) and m.layers[1].ffn is None


def test_build_ammm_twice_with_moe_on_attention():
    m = build_stack(StackSpec(pattern="AMMM" * 2), Rng(0))
    assert len(m.layers) == 8
    assert sum(isinstance(l.ffn, MoE) for l in m.layers) == 2
    assert [i for i, l in enumerate(m.layers) if isinstance(l.ffn, MoE)] == [0, 4]


def test_moe_on_mamba_position_adds_sublayer():
    m = build_stack(StackSpec(pattern="AM", moe_positions=[1], **TINY), Rng(0))
    assert isinstance(m.layers[1].ffn, MoE) and isinstance(m.layers[0].ffn, FeedForward)


@pytest.mark.parametrize("kw", [dict(pattern="AX"), dict(pattern=""), dict(moe_positions=[9]),
                                dict(d_model=10, n_heads=4), dict(top_k=5)])
def test_invalid_specs(kw):
    with pytest.raises(ConfigError):
        StackSpec(**kw)


def test_build_deterministic():
    a = build_stack(StackSpec(pattern="AMMM", **TINY), Rng(7))
    b = build_stack(StackSpec(pattern="AMMM", **TINY), Rng(7))
    assert a.checksum() == b.checksum()
    assert a.checksum() != build_stack(StackSpec(pattern="AMMM", **TINY), Rng(8)).checksum()


def test_untied_head():
    m = build_stack(StackSpec(pattern="M", tied=False, **TINY), Rng(0))
    assert m.head is not None and m(np.arange(3)).shape == (3, 16)


# -- model forward -------------------------------------------------------------


def test_single_token_one_logit_row():
    m = build_stack(StackSpec(pattern="AM", **TINY), Rng(0))
    assert model_forward(m, np.array([3])).shape == (1, 16)


def test_out_of_range_token():
    m = build_stack(StackSpec(pattern="AM", **TINY), Rng(0))
    with pytest.raises(DomainError):
        m(np.array([16]))
    with pytest.raises(DomainError):
        m(np.array([-1]))


def test_visual_prefix_shifts_text_positions():
    m = build_stack(StackSpec(pattern="AM", **TINY), Rng(0))
    vis = Rng(1).normal(size=(3, 16))
    tokens = np.array([1, 2, 3, 4])
    with no_grad():
        out = m(tokens, vis).data
        alone = m(np.array([5, 6, 7, 8]), vis).data
    assert out.shape == (7, 16)
    # visual positions cannot see the text that follows them
    assert np.allclose(out[:3], alone[:3], rtol=0, atol=1e-12)


@pytest.mark.parametrize("pattern", ["A", "M", "AM", "MA", "AMMM"])
def test_end_to_end_causality(pattern):
    m = build_stack(StackSpec(pattern=pattern, **TINY), Rng(0))
    emb = Rng(1).normal(size=(1, 12, 16))

    def run(x):
        with no_grad():
            h = Tensor(x)
            for layer in m.layers:
                h = layer(h)
            return m.logits(h).data

    # MoE row batching may move the last bit; anything causal-breaking is O(1)
    assert causality_violation(run, emb, axis=1) < 1e-12


def test_future_tokens_do_not_change_past_logits():
    m = build_stack(StackSpec(pattern="AMMM", **TINY), Rng(0))
    a = np.array([1, 2, 3, 4, 5, 6])
    b = a.copy()
    b[4:] = [9, 9]
    with no_grad():
        assert np.allclose(m(a).data[:4], m(b).data[:4], rtol=0, atol=1e-12)


def test_full_model_cross_entropy_grad():
    m = build_stack(StackSpec(pattern="AM", **TINY), Rng(3))
    tokens = Rng(4).integers(0, 16, 6)

    def loss(ps):
        return F.cross_entropy(m(tokens[:-1]), tokens[1:])

    rep = grad_check(loss, m.parameters(), max_entries=40, rng=Rng(5))
    assert rep.max_rel_err < 1e-4


def test_batched_forward_matches_rows():
    m = build_stack(StackSpec(pattern="AM", **TINY), Rng(0))
    toks = Rng(1).integers(0, 16, (3, 5))
    with no_grad():
        batch = m(toks).data
        for i in range(3):
            assert np.allclose(batch[i], m(toks[i]).data, atol=1e-13)


def test_hybrid_model_is_module():
    assert isinstance(build_stack(StackSpec(**TINY), Rng(0)), HybridModel)
