import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from pipir import autodiff as ad
from pipir.gradcheck import check_case
from pipir.layers import GDFN, QKVChain
from pipir.pip import (ABLATIONS, PIPBlock, PipConfig, align_feature, build_dhat, combine_degradation,
                       ddl_loss, m_for_ratio, p2p_interaction, pairwise_angles, selective_cross_attention,
                       topm_mask, transposed_cross_attention)


def T(x, grad=False):
    return ad.tensor(np.asarray(x, dtype=float), requires_grad=grad)


@pytest.fixture(autouse=True)
def _wide():
    with ad.precision("wide"):
        yield


# ---------------------------------------------------------------- ddl_loss

@pytest.mark.parametrize("bank, expected", [
    ([[1, 0], [0, 1]], 0.0),
    ([[1, 0], [1, 0]], math.pi / 2),
    ([[1, 0], [0, 1], [1 / math.sqrt(2), 1 / math.sqrt(2)]], math.pi / 6),
])
def test_ddl_hand_values(bank, expected):
    assert abs(float(ddl_loss(T(bank), math.pi / 2).data) - expected) < 1e-6


def test_ddl_matches_loop_oracle_and_single_prompt_is_zero():
    rng = np.random.default_rng(0)
    for _ in range(20):
        bank = rng.standard_normal((4, 5))
        theta = rng.uniform(0, math.pi)
        assert abs(float(ddl_loss(T(bank), theta).data) - oracles.ddl(bank.tolist(), theta)) < 1e-9
    assert float(ddl_loss(T([[1.0, 2.0]]), math.pi / 2).data) == 0.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100.0), st.integers(0, 3))
def test_ddl_scale_invariance(seed, lam, which):
    bank = np.random.default_rng(seed).standard_normal((4, 6))
    scaled = bank.copy()
    scaled[which] *= lam
    a = float(ddl_loss(T(bank), math.pi / 2).data)
    b = float(ddl_loss(T(scaled), math.pi / 2).data)
    assert abs(a - b) < 1e-6


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, math.pi))
def test_ddl_zero_iff_all_angles_clear_threshold(seed, theta):
    bank = np.random.default_rng(seed).standard_normal((3, 3))
    angles = np.radians(pairwise_angles(bank))[np.triu_indices(3, 1)]
    loss = float(ddl_loss(T(bank), theta).data)
    if np.all(angles >= theta + 1e-6):
        assert loss == 0.0
    elif np.any(angles < theta - 1e-6):
        assert loss > 0.0


def test_pairwise_angle_matrix_is_symmetric_with_zero_diagonal():
    ang = pairwise_angles(np.random.default_rng(1).standard_normal((5, 8)))
    assert np.array_equal(ang, ang.T)
    assert np.all(np.diag(ang) == 0)


# ---------------------------------------------------------------- prompt combination

def test_combine_degradation():
    rng = np.random.default_rng(2)
    bank = T(rng.standard_normal((4, 6)).astype(np.float32))
    for t in range(4):
        assert np.array_equal(combine_degradation(bank, np.eye(4)[t]).data, bank.data[t])
    assert np.array_equal(combine_degradation(bank, np.zeros(4)).data, np.zeros(6))
    out = combine_degradation(T([[2.0, 0.0], [0.0, 2.0]]), np.array([0.5, 0.5])).data
    assert np.array_equal(out, [1.0, 1.0])
    with pytest.raises(ad.DimensionError):
        combine_degradation(bank, np.ones(3))


def test_combine_degradation_one_hot_is_bit_exact_in_standard_precision():
    with ad.precision("standard"):
        rng = np.random.default_rng(3)
        bank = ad.tensor(rng.standard_normal((5, 16)), requires_grad=True)
        omega = np.eye(5, dtype=np.float32)[[0, 3, 4, 1]]
        out = combine_degradation(bank, omega).data
        assert np.array_equal(out, bank.data[[0, 3, 4, 1]])


def test_build_dhat():
    z = T(np.full((3, 2, 2), 0.7))
    out = build_dhat(T(np.ones(3)), z).data
    assert np.allclose(out, 0.7, atol=1e-15)
    e1 = build_dhat(T([1.0, 0, 0]), T(np.random.default_rng(4).uniform(0.5, 1, (3, 2, 2)))).data
    assert np.all(e1[0] != 0) and np.all(e1[1:] == 0)
    z2 = T(np.stack([np.full((2, 2), 0.5), np.full((2, 2), 1.0)]))
    out = build_dhat(T([2.0, 3.0]), z2).data
    assert np.array_equal(out[0], np.full((2, 2), 1.0))
    assert np.array_equal(out[1], np.full((2, 2), 3.0))
    with pytest.raises(ad.DimensionError):
        build_dhat(T([1.0, 2.0, 3.0]), z2)


def test_align_feature():
    from pipir.layers import Conv1x1
    rng = np.random.default_rng(5)
    proj = Conv1x1(3, 3, rng)
    proj.weight.data = np.eye(3)
    proj.bias.data = np.zeros(3)
    z = T(rng.standard_normal((3, 4, 4)))
    assert np.array_equal(align_feature(z, proj, 4, 4).data, z.data)
    assert np.allclose(align_feature(T(np.full((3, 4, 4), 0.3)), proj, 2, 2).data, 0.3, atol=1e-15)
    proj1 = Conv1x1(1, 1, rng)
    proj1.weight.data = np.eye(1)
    proj1.bias.data = np.zeros(1)
    x = T(np.arange(1, 17, dtype=float).reshape(1, 4, 4))
    block_means = [[np.mean([1, 2, 5, 6]), np.mean([3, 4, 7, 8])], [np.mean([9, 10, 13, 14]), np.mean([11, 12, 15, 16])]]
    assert np.array_equal(align_feature(x, proj1, 2, 2).data[0], block_means)


# ---------------------------------------------------------------- QKV chain and GDFN

def test_qkv_chain_identity_on_constant_is_zero_and_shape_preserved():
    rng = np.random.default_rng(6)
    chain = QKVChain(3, 3, rng)
    chain.proj.weight.data = np.eye(3)
    chain.dw.weight.data = np.zeros((3, 3, 3))
    chain.dw.weight.data[:, 1, 1] = 1
    out = chain(T(np.full((3, 4, 4), 2.0))).data
    assert np.allclose(out, 0.0, atol=1e-9)
    assert chain(T(rng.standard_normal((3, 5, 7)))).shape == (3, 5, 7)


def test_qkv_chain_gradient():
    rng = np.random.default_rng(7)
    chain = QKVChain(2, 2, rng)
    assert check_case(lambda x: chain(x), [T(rng.standard_normal((2, 3, 3)), True)]) < 1e-3


def test_gdfn_zero_output_projection_is_identity():
    rng = np.random.default_rng(8)
    g = GDFN(3, rng)
    g.out.weight.data = np.zeros_like(g.out.weight.data)
    x = T(rng.standard_normal((3, 4, 4)))
    assert np.array_equal(g(x).data, x.data)
    g2 = GDFN(2, rng)
    g2.out.weight.data = rng.standard_normal(g2.out.weight.shape)
    assert check_case(lambda x: g2(x), [T(rng.standard_normal((2, 3, 3)), True)]) < 1e-3


# ---------------------------------------------------------------- attention

def test_transposed_attention_singleton_and_symmetry():
    rng = np.random.default_rng(9)
    v = T(rng.standard_normal((1, 3, 3)))
    out = transposed_cross_attention(T(rng.standard_normal((1, 3, 3))), T(rng.standard_normal((1, 3, 3))), v)
    assert np.allclose(out.data, v.data, atol=1e-15)
    k = T(np.ones((3, 2, 2)))  # identical key rows -> equal logits per row
    v = T(rng.standard_normal((3, 2, 2)))
    out = transposed_cross_attention(T(rng.standard_normal((3, 2, 2))), k, v).data
    assert np.allclose(out, np.broadcast_to(v.data.mean(axis=0), (3, 2, 2)), atol=1e-12)


def brute_cases(n_per=None):
    rng = np.random.default_rng(10)
    cases = []
    for C in (1, 2, 3):
        for hw in (1, 2):
            for _ in range(9):
                cases.append(tuple(rng.standard_normal((C, hw, hw)) for _ in range(3)))
    return cases


@pytest.mark.parametrize("q, k, v", brute_cases())
def test_transposed_attention_matches_loop_oracle(q, k, v):
    out = transposed_cross_attention(T(q), T(k), T(v)).data
    assert np.allclose(out, oracles.transposed_attention(q.tolist(), k.tolist(), v.tolist()), atol=1e-6, rtol=0)


@pytest.mark.parametrize("q, k, v", brute_cases())
def test_selective_attention_matches_loop_oracle(q, k, v):
    ratios = (1 / 2, 2 / 3, 3 / 4, 4 / 5)
    scales = np.array([0.3, -0.2, 0.5, 1.1])
    out = selective_cross_attention(T(q), T(k), T(v), ratios, T(scales)).data
    ref = oracles.selective_attention(q.tolist(), k.tolist(), v.tolist(), ratios, scales.tolist())
    assert np.allclose(out, ref, atol=1e-6, rtol=0)


def test_selective_attention_reductions():
    rng = np.random.default_rng(11)
    q, k, v = (T(rng.standard_normal((4, 3, 3))) for _ in range(3))
    full = selective_cross_attention(q, k, v, (1.0,), T([1.0])).data
    assert np.allclose(full, transposed_cross_attention(q, k, v).data, atol=1e-15)
    q1, k1, v1 = (T(rng.standard_normal((1, 2, 2))) for _ in range(3))
    out = selective_cross_attention(q1, k1, v1, (0.5, 0.8), T([0.25, 0.5])).data
    assert np.allclose(out, 0.75 * v1.data, atol=1e-15)
    with pytest.raises(ad.ContractError):
        selective_cross_attention(q, k, v, (), T(np.zeros(0)))


def test_topm_examples():
    assert topm_mask(np.array([[0.1, 0.5, 0.3, 0.2]]), 2).astype(int).tolist() == [[0, 1, 1, 0]]
    assert topm_mask(np.random.default_rng(0).standard_normal((4, 4)), 4).all()
    assert topm_mask(np.array([[0.5, 0.5, 0.1]]), 1).astype(int).tolist() == [[1, 0, 0]]
    with pytest.raises(ad.ContractError):
        topm_mask(np.zeros((2, 2)), 3)
    with pytest.raises(ad.ContractError):
        topm_mask(np.zeros((2, 2)), 0)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 12), st.integers(0, 10_000), st.booleans())
def test_topm_cardinality_with_ties(C, seed, quantize):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((C, C))
    if quantize:
        a = np.round(a)  # plenty of ties
    for r in (1 / 2, 2 / 3, 3 / 4, 4 / 5, 1.0):
        m = m_for_ratio(r, C)
        mask = topm_mask(a, m)
        assert np.all(mask.sum(axis=-1) == m)
        kept_min = np.where(mask, a, np.inf).min(axis=-1)
        dropped_max = np.where(mask, -np.inf, a).max(axis=-1)
        assert np.all(kept_min >= dropped_max)


def test_topm_matches_scan_oracle_on_ties():
    rng = np.random.default_rng(12)
    for _ in range(50):
        row = np.round(rng.standard_normal(7))
        m = int(rng.integers(1, 8))
        assert topm_mask(row[None], m)[0].tolist() == oracles.topm_row(row.tolist(), m)


# ---------------------------------------------------------------- PIP instance

def make_block(letter="e", channels=6, seed=0, **kw):
    cfg = PipConfig(**{"c": 4, "h": 4, "w": 4, "T": 3, **kw}).with_ablation(letter)
    return PIPBlock(channels, cfg, np.random.default_rng(seed))


@pytest.mark.parametrize("letter", sorted(ABLATIONS))
def test_pip_forward_preserves_shape(letter):
    blk = make_block(letter)
    rng = np.random.default_rng(13)
    for shape in [(6, 8, 8), (6, 5, 7), (2, 6, 4, 4), (6, 2, 3)]:
        z = T(rng.standard_normal(shape))
        omega = np.eye(3)[1] if len(shape) == 3 else np.eye(3)[[0, 2]]
        assert blk(z, omega).shape == shape


def test_p2p_without_degradation_prompt_uses_B_for_keys_and_values():
    blk = make_block("b")
    u = blk.universal_prompt(T(np.zeros((6, 8, 8))), None)
    ref = p2p_interaction(blk.prompt, blk.prompt, blk.q_p, blk.k_p, blk.v_p, blk.gdfn_p)
    assert np.array_equal(u.data, ref.data)
    assert u.shape == blk.prompt.shape


def test_one_hot_flip_changes_universal_prompt():
    blk = make_block("e")
    z = T(np.random.default_rng(14).standard_normal((6, 8, 8)))
    u0 = blk.universal_prompt(z, np.eye(3)[0]).data
    u1 = blk.universal_prompt(z, np.eye(3)[1]).data
    assert np.max(np.abs(u0 - u1)) > 0


def test_zero_value_and_output_projection_gives_identity():
    blk = make_block("e")
    for lin in (blk.v_f.proj, blk.gdfn_f.out):
        lin.weight.data = np.zeros_like(lin.weight.data)
        lin.bias.data = np.zeros_like(lin.bias.data)
    blk.v_f.dw.bias.data[:] = 0
    z = T(np.random.default_rng(15).standard_normal((6, 8, 8)))
    assert np.array_equal(blk(z, np.eye(3)[2]).data, z.data)


def test_prompts_receive_gradient():
    blk = make_block("e")
    z = T(np.random.default_rng(16).standard_normal((6, 8, 8)))
    ad.backward(ad.mean(ad.mul(blk(z, np.eye(3)[0]), blk(z, np.eye(3)[0]))))
    assert np.abs(blk.prompt.grad).max() > 0
    assert np.abs(blk.bank.grad[0]).max() > 0


def test_pip_forward_gradient_check():
    rng = np.random.default_rng(17)
    cfg = PipConfig(c=4, h=4, w=4, T=2)
    blk = PIPBlock(3, cfg, rng)
    for _, p in blk.named_parameters():
        p.data += 0.3 * rng.standard_normal(p.shape)
    params = [p for _, p in blk.named_parameters()]
    z = T(rng.standard_normal((3, 4, 4)), True)
    err = check_case(lambda x, *ps: blk(x, np.array([0.0, 1.0])), [z] + params, max_probes=12)
    assert err < 1e-3


def test_config_validation():
    with pytest.raises(ad.ContractError):
        PipConfig(enable_d=False, enable_B=False)
    with pytest.raises(ad.ContractError):
        PipConfig(m_ratios=())
    with pytest.raises(ad.ContractError):
        PipConfig(theta_thre=4.0)
    with pytest.raises(ad.ContractError):
        PipConfig().with_ablation("f")


def test_omega_length_checked():
    blk = make_block("e")
    with pytest.raises(ad.DimensionError):
        blk(T(np.zeros((6, 4, 4))), np.ones(2))
