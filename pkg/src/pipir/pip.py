"""Prompt-in-prompt modulation of latent features.

A PIP instance holds T degradation-aware prompt vectors and one basic
restoration prompt ``B`` (c x h x w).  For feature map ``Z`` and control
weights ``omega`` it

1. projects/pools ``Z`` to the prompt grid and builds the degradation tensor
   ``D_hat`` from ``omega``-weighted prompts (``build_dhat``),
2. fuses ``B`` and ``D_hat`` with transposed cross attention followed by a
   GDFN, giving the universal prompt ``U`` (``p2p_interaction``),
3. modulates ``Z`` with ``U`` through top-m masked transposed cross
   attention and another GDFN (``p2f_modulate``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, DimensionError, Tensor
from .layers import GDFN, Conv1x1, Module, QKVChain, param

DEFAULT_M_RATIOS = (1 / 2, 2 / 3, 3 / 4, 4 / 5)
DDL_EPS = 1e-8
COS_MARGIN = 1e-7

# Ablation rows: (enable_d, enable_B, enable_selective)
ABLATIONS = {
    "a": (True, False, False),
    "b": (False, True, False),
    "c": (True, True, False),
    "d": (False, True, True),
    "e": (True, True, True),
}


@dataclass
class PipConfig:
    c: int = 16
    h: int = 16
    w: int = 16
    T: int = 5
    theta_thre: float = math.pi / 2
    m_ratios: tuple = DEFAULT_M_RATIOS
    enable_d: bool = True
    enable_B: bool = True
    enable_selective: bool = True
    expansion: int = 2
    init_std: float = 0.02

    def __post_init__(self):
        self.m_ratios = tuple(float(r) for r in self.m_ratios)
        if min(self.c, self.h, self.w, self.T) < 1:
            raise ContractError("prompt dims and T must be >= 1")
        if not 0 <= self.theta_thre <= math.pi:
            raise ContractError("theta_thre must lie in [0, pi]")
        if not self.m_ratios:
            raise ContractError("m_ratios must not be empty")
        if any(not 0 < r <= 1 for r in self.m_ratios):
            raise ContractError("m_ratios must lie in (0, 1]")
        if not (self.enable_d or self.enable_B):
            raise ContractError("at least one of enable_d / enable_B must be set")

    def with_ablation(self, letter: str) -> "PipConfig":
        if letter not in ABLATIONS:
            raise ContractError(f"ablation must be one of {sorted(ABLATIONS)}, got {letter!r}")
        d, b, s = ABLATIONS[letter]
        kwargs = dict(vars(self))
        kwargs.update(enable_d=d, enable_B=b, enable_selective=s)
        return PipConfig(**kwargs)


# ---------------------------------------------------------------- degradation-aware prompts

def ddl_loss(bank: Tensor, theta_thre: float) -> Tensor:
    """Directional decoupling hinge over all prompt pairs.

    ``2 / (T (T-1)) * sum_{i<j} max(0, theta_thre - angle(d_i, d_j))``;
    zero for T < 2.
    """
    T = bank.shape[0]
    if T < 2:
        return ad.Tensor(np.zeros(()))
    gram = ad.matmul(bank, ad.transpose(bank))
    norms = ad.sqrt(ad.sum_(ad.mul(bank, bank), axis=1, keepdims=True))
    denom = ad.maximum(ad.matmul(norms, ad.transpose(norms)), DDL_EPS)
    iu = np.triu_indices(T, k=1)
    cos = ad.index(ad.div(gram, denom), iu)
    gap = ad.add(ad.scale(ad.arccos(cos, grad_margin=COS_MARGIN), -1.0), theta_thre)
    return ad.mean(ad.maximum(gap, 0.0))


def pairwise_angles(bank: np.ndarray) -> np.ndarray:
    """T x T angle matrix in degrees (exact zero diagonal)."""
    bank = np.asarray(bank, dtype=np.float64)
    norms = np.linalg.norm(bank, axis=1)
    cos = (bank @ bank.T) / np.maximum(np.outer(norms, norms), DDL_EPS)
    ang = np.degrees(np.arccos(np.clip(cos, -1.0, 1.0)))
    ang = 0.5 * (ang + ang.T)
    np.fill_diagonal(ang, 0.0)
    return ang


def combine_degradation(bank: Tensor, omega) -> Tensor:
    """``sum_t omega_t d_t``; omega may be (T,) or (N, T)."""
    omega = ad._as_tensor(omega)
    if omega.shape[-1] != bank.shape[0] or omega.ndim not in (1, 2):
        raise DimensionError(f"omega shape {omega.shape} does not match T={bank.shape[0]}")
    if omega.ndim == 1:
        return ad.reshape(ad.matmul(ad.reshape(omega, (1, -1)), bank), (bank.shape[1],))
    return ad.matmul(omega, bank)


def build_dhat(v: Tensor, z_aligned: Tensor) -> Tensor:
    """``D_hat[k, :, :] = v_k * mean(z_aligned[k])`` repeated over the prompt grid."""
    if v.shape[-1] != z_aligned.shape[-3] or v.ndim != z_aligned.ndim - 2:
        raise DimensionError(f"v {v.shape} does not match aligned features {z_aligned.shape}")
    prod = ad.mul(v, ad.global_avg_pool(z_aligned))
    return ad.expand(ad.reshape(prod, prod.shape + (1, 1)), z_aligned.shape)


def align_feature(z: Tensor, proj: Conv1x1, h: int, w: int) -> Tensor:
    """Channel-project to the prompt width, then resize to the prompt grid."""
    y = proj(z)
    H, W = y.shape[-2:]
    if h <= H and w <= W:
        return ad.adaptive_avg_pool(y, h, w)
    return ad.adaptive_avg_pool(ad.nearest_upsample(y, max(h, H), max(w, W)), h, w)


# ---------------------------------------------------------------- attention

def _flat(x: Tensor) -> Tensor:
    return ad.reshape(x, x.shape[:-2] + (x.shape[-2] * x.shape[-1],))


def _attention_logits(q: Tensor, k: Tensor, dk: float | None) -> Tensor:
    if q.shape[-3:] != k.shape[-3:]:
        raise DimensionError(f"query {q.shape} and key {k.shape} differ")
    qf, kf = _flat(q), _flat(k)
    dk = qf.shape[-1] if dk is None else dk
    return ad.scale(ad.matmul(qf, ad.transpose(kf, _swap_last(kf.ndim))), 1.0 / math.sqrt(dk))


def _swap_last(ndim: int) -> tuple:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def _apply(attn: Tensor, v: Tensor, out_shape: tuple) -> Tensor:
    return ad.reshape(ad.matmul(attn, _flat(v)), out_shape)


def _out_shape(q: Tensor, v: Tensor) -> tuple:
    if q.shape[-3:] != v.shape[-3:]:
        raise DimensionError(f"query {q.shape} and value {v.shape} differ")
    lead = np.broadcast_shapes(q.shape[:-3], v.shape[:-3])
    return tuple(lead) + q.shape[-3:]


def transposed_cross_attention(q: Tensor, k: Tensor, v: Tensor, dk: float | None = None) -> Tensor:
    """Channel attention: ``softmax(Q K^T / sqrt(d_k)) V`` with a C x C map.

    Spatial axes are flattened; ``d_k`` defaults to the number of spatial
    positions.
    """
    out_shape = _out_shape(q, v)
    attn = ad.softmax(_attention_logits(q, k, dk), axis=-1)
    return _apply(attn, v, out_shape)


def topm_mask(a: np.ndarray, m: int) -> np.ndarray:
    """Boolean mask keeping the m largest entries of each row (ties: lower column first)."""
    a = np.asarray(a)
    C = a.shape[-1]
    if not 1 <= m <= C:
        raise ContractError(f"m={m} outside [1, {C}]")
    order = np.argsort(-a, axis=-1, kind="stable")[..., :m]
    mask = np.zeros(a.shape, dtype=bool)
    np.put_along_axis(mask, order, True, axis=-1)
    return mask


def m_for_ratio(ratio: float, C: int) -> int:
    return int(min(max(math.floor(ratio * C + 0.5), 1), C))


def selective_cross_attention(q: Tensor, k: Tensor, v: Tensor, m_ratios, scales: Tensor,
                              dk: float | None = None) -> Tensor:
    """Sum over ratios r of ``scale_r * softmax(topm_r(logits)) V``.

    Entries outside the top-m of each row are replaced by a large negative
    sentinel before the softmax, so they receive exactly zero weight.
    """
    m_ratios = tuple(m_ratios)
    if not m_ratios:
        raise ContractError("selective attention needs at least one m ratio")
    if scales.shape != (len(m_ratios),):
        raise DimensionError(f"scales {scales.shape} do not match {len(m_ratios)} ratios")
    out_shape = _out_shape(q, v)
    logits = _attention_logits(q, k, dk)
    C = logits.shape[-1]
    total = None
    for i, r in enumerate(m_ratios):
        mask = topm_mask(logits.data, m_for_ratio(r, C))
        attn = ad.softmax(ad.masked_fill(logits, mask), axis=-1)
        term = ad.mul(_apply(attn, v, out_shape), ad.index(scales, i))
        total = term if total is None else ad.add(total, term)
    return total


# ---------------------------------------------------------------- interactions

def p2p_interaction(b: Tensor, dhat: Tensor, q_chain: QKVChain, k_chain: QKVChain,
                    v_chain: QKVChain, gdfn: GDFN) -> Tensor:
    """``U = GDFN(B + CAtt(Q(B), K(D_hat), V(D_hat)))``."""
    if b.shape[-3:] != dhat.shape[-3:]:
        raise DimensionError(f"B {b.shape} and D_hat {dhat.shape} differ")
    if b.ndim < dhat.ndim:
        b = ad.reshape(b, (1,) + b.shape)
    att = transposed_cross_attention(q_chain(b), k_chain(dhat), v_chain(dhat))
    if b.shape != att.shape:
        b = ad.expand(b, att.shape)
    return gdfn(ad.add(b, att))


def p2f_modulate(z: Tensor, u: Tensor, up_proj: Conv1x1, q_chain: QKVChain, k_chain: QKVChain,
                 v_chain: QKVChain, gdfn: GDFN, m_ratios=None, scales: Tensor | None = None) -> Tensor:
    """``Z_hat = GDFN(Z + CAtt_s(Q(Z), K(U'), V(U')))``.

    ``U'`` is ``U`` nearest-upsampled to Z's grid and projected to Z's channel
    count.  With ``scales=None`` the plain (unmasked) attention is used.
    """
    H, W = z.shape[-2:]
    if u.ndim < z.ndim:
        u = ad.reshape(u, (1,) + u.shape)
    up = up_proj(ad.nearest_upsample(u, H, W))
    qz, ku, vu = q_chain(z), k_chain(up), v_chain(up)
    if scales is None:
        att = transposed_cross_attention(qz, ku, vu)
    else:
        att = selective_cross_attention(qz, ku, vu, m_ratios, scales)
    return gdfn(ad.add(z, att))


class PIPBlock(Module):
    """One PIP instance attached to a feature map with ``channels`` channels."""

    def __init__(self, channels: int, config: PipConfig, rng: np.random.Generator):
        self.config = config
        self.channels = channels
        cfg = config
        c = cfg.c
        self.bank = param(rng.standard_normal((cfg.T, c)) * cfg.init_std) if cfg.enable_d else None
        self.prompt = param(rng.standard_normal((c, cfg.h, cfg.w)) * cfg.init_std) if cfg.enable_B else None
        self.align = Conv1x1(channels, c, rng) if cfg.enable_d else None
        self.q_p = QKVChain(c, c, rng)
        self.k_p = QKVChain(c, c, rng)
        self.v_p = QKVChain(c, c, rng)
        self.gdfn_p = GDFN(c, rng, cfg.expansion)
        self.up_proj = Conv1x1(c, channels, rng)
        self.q_f = QKVChain(channels, channels, rng)
        self.k_f = QKVChain(channels, channels, rng)
        self.v_f = QKVChain(channels, channels, rng)
        self.scales = param(np.full(len(cfg.m_ratios), 1.0 / len(cfg.m_ratios))) if cfg.enable_selective else None
        self.gdfn_f = GDFN(channels, rng, cfg.expansion)

    def ddl(self, theta_thre: float | None = None) -> Tensor:
        if self.bank is None:
            return ad.Tensor(np.zeros(()))
        return ddl_loss(self.bank, self.config.theta_thre if theta_thre is None else theta_thre)

    def universal_prompt(self, z: Tensor, omega) -> Tensor:
        cfg = self.config
        dhat = None
        if cfg.enable_d:
            omega = ad._as_tensor(omega)
            if omega.shape[-1] != cfg.T:
                raise DimensionError(f"omega has {omega.shape[-1]} entries, instance expects T={cfg.T}")
            if z.ndim == 4 and omega.ndim == 1:
                omega = ad.expand(ad.reshape(omega, (1, cfg.T)), (z.shape[0], cfg.T))
            v = combine_degradation(self.bank, omega)
            dhat = build_dhat(v, align_feature(z, self.align, cfg.h, cfg.w))
        if cfg.enable_B and dhat is not None:
            return p2p_interaction(self.prompt, dhat, self.q_p, self.k_p, self.v_p, self.gdfn_p)
        if cfg.enable_B:
            b = self.prompt
            return p2p_interaction(b, b, self.q_p, self.k_p, self.v_p, self.gdfn_p)
        return p2p_interaction(dhat, dhat, self.q_p, self.k_p, self.v_p, self.gdfn_p)

    def __call__(self, z: Tensor, omega) -> Tensor:
        if z.shape[-3] != self.channels:
            raise DimensionError(f"feature has {z.shape[-3]} channels, instance expects {self.channels}")
        u = self.universal_prompt(z, omega)
        if self.config.enable_selective:
            return p2f_modulate(z, u, self.up_proj, self.q_f, self.k_f, self.v_f, self.gdfn_f,
                                self.config.m_ratios, self.scales)
        return p2f_modulate(z, u, self.up_proj, self.q_f, self.k_f, self.v_f, self.gdfn_f)


def pip_forward(z: Tensor, omega, block: PIPBlock) -> Tensor:
    return block(z, omega)
