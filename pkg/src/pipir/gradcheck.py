"""Central finite-difference gradient checks in wide precision.

Each case builds fresh wide-precision inputs, runs ``loss = sum(R * f(...))``
with a fixed random ``R`` and compares the analytic gradient of every input
against ``(L(x + h) - L(x - h)) / 2h``.  The reported error is the largest
elementwise ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .layers import GDFN, Conv1x1, QKVChain
from .pip import (PIPBlock, PipConfig, align_feature, build_dhat, combine_degradation, ddl_loss,
                  p2f_modulate, p2p_interaction, selective_cross_attention, transposed_cross_attention)

STEP = 1e-5
FLOOR = 1e-6
PRIMITIVE_TOL = 1e-4
COMPOSITE_TOL = 1e-3
MAX_PROBES = 48


@dataclass
class CaseResult:
    name: str
    max_rel_err: float
    tol: float

    @property
    def ok(self) -> bool:
        return self.max_rel_err < self.tol


def check_case(fn: Callable, inputs: list[ad.Tensor], seed: int = 0, step: float = STEP,
               max_probes: int = MAX_PROBES) -> float:
    """Max relative error between analytic and central-difference gradients."""
    rng = np.random.default_rng(seed)
    out = fn(*inputs)
    weights = rng.standard_normal(out.shape)

    def loss_value() -> float:
        with ad.no_grad():
            return float(np.sum(weights * fn(*inputs).data))

    for t in inputs:
        t.grad = None
    loss = ad.sum_(ad.mul(fn(*inputs), ad.tensor(weights)))
    ad.backward(loss)
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if flat.size > max_probes:
            idx = np.sort(rng.choice(flat.size, max_probes, replace=False))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            up = loss_value()
            flat[i] = orig - step
            down = loss_value()
            flat[i] = orig
            num = (up - down) / (2 * step)
            a = analytic.reshape(-1)[i]
            err = abs(a - num) / max(abs(a), abs(num), FLOOR)
            worst = max(worst, err)
    return worst


def _t(rng, *shape, lo=None, hi=None):
    data = rng.uniform(lo, hi, shape) if lo is not None else rng.standard_normal(shape)
    return ad.tensor(data, requires_grad=True)


def _away_from(rng, shape, kinks, margin=0.05):
    x = rng.standard_normal(shape)
    for k in kinks:
        close = np.abs(x - k) < margin
        x[close] += np.sign(x[close] - k + 1e-12) * margin * 2
    return ad.tensor(x, requires_grad=True)


def primitive_cases(rng) -> list[tuple[str, Callable, list]]:
    A = lambda *s: _t(rng, *s)  # noqa: E731
    cases = [
        ("add", ad.add, [A(3, 4), A(1, 4)]),
        ("sub", ad.sub, [A(3, 4), A(3, 1)]),
        ("mul", ad.mul, [A(2, 3, 4), A(2, 1, 4)]),
        ("div", ad.div, [A(3, 4), _t(rng, 3, 4, lo=0.5, hi=2.0)]),
        ("scale", lambda x: ad.scale(x, -2.5), [A(5)]),
        ("maximum", lambda x: ad.maximum(x, 0.1), [_away_from(rng, (4, 5), [0.1])]),
        ("clamp", lambda x: ad.clamp(x, -0.5, 0.5), [_away_from(rng, (4, 5), [-0.5, 0.5])]),
        ("abs", ad.abs_, [_away_from(rng, (4, 5), [0.0])]),
        ("gelu", ad.gelu, [ad.tensor(np.linspace(-3, 3, 7), requires_grad=True)]),
        ("exp", ad.exp, [A(6)]),
        ("log", ad.log, [_t(rng, 6, lo=0.2, hi=3.0)]),
        ("sqrt", ad.sqrt, [_t(rng, 6, lo=0.2, hi=3.0)]),
        ("arccos", ad.arccos, [_t(rng, 6, lo=-0.9, hi=0.9)]),
        ("sum", lambda x: ad.sum_(x, axis=1, keepdims=True), [A(3, 4)]),
        ("mean", lambda x: ad.mean(x, axis=0), [A(3, 4)]),
        ("reshape", lambda x: ad.reshape(x, (4, 3)), [A(3, 4)]),
        ("transpose", lambda x: ad.transpose(x, (2, 0, 1)), [A(2, 3, 4)]),
        ("expand", lambda x: ad.expand(x, (3, 4, 5)), [A(3, 1, 5)]),
        ("concat", lambda a, b: ad.concat([a, b], axis=1), [A(2, 3), A(2, 2)]),
        ("index", lambda x: ad.index(x, np.triu_indices(4, 1)), [A(4, 4)]),
        ("matmul", ad.matmul, [A(4, 5), A(5, 3)]),
        ("matmul_batched", ad.matmul, [A(2, 3, 4), A(1, 4, 2)]),
        ("conv1x1", ad.conv1x1, [A(3, 4, 4), A(5, 3), A(5)]),
        ("dwconv3x3", ad.dwconv3x3, [A(2, 5, 5), A(2, 3, 3), A(2)]),
        ("conv3x3", ad.conv3x3, [A(2, 5, 5), A(3, 2, 3, 3), A(3)]),
        ("conv3x3_stride2", lambda x, w, b: ad.conv3x3(x, w, b, stride=2), [A(2, 2, 6, 6), A(3, 2, 3, 3), A(3)]),
        ("layernorm", ad.layernorm, [A(3, 4, 4), A(3), A(3)]),
        ("softmax", lambda x: ad.softmax(x, axis=-1), [A(3, 5)]),
        ("log_softmax", lambda x: ad.log_softmax(x, axis=-1), [A(3, 5)]),
        ("masked_fill", lambda x: ad.softmax(ad.masked_fill(x, np.tril(np.ones((4, 4), bool))), -1), [A(4, 4)]),
        ("global_avg_pool", ad.global_avg_pool, [A(3, 4, 5)]),
        ("adaptive_avg_pool", lambda x: ad.adaptive_avg_pool(x, 2, 2), [A(2, 4, 4)]),
        ("adaptive_avg_pool_uneven", lambda x: ad.adaptive_avg_pool(x, 2, 3), [A(2, 5, 7)]),
        ("nearest_upsample", lambda x: ad.nearest_upsample(x, 4, 6), [A(2, 2, 3)]),
        ("nearest_upsample_uneven", lambda x: ad.nearest_upsample(x, 5, 7), [A(2, 2, 3)]),
    ]
    return cases


def _pip_instance(rng, channels=3, **kw):
    cfg = PipConfig(**{"c": 4, "h": 4, "w": 4, "T": 2, **kw})
    blk = PIPBlock(channels, cfg, rng)
    # move away from the zero-initialised residual so every branch contributes
    for _, p in blk.named_parameters():
        p.data += 0.3 * rng.standard_normal(p.shape)
    return blk


def composite_cases(rng) -> list[tuple[str, Callable, list]]:
    A = lambda *s: _t(rng, *s)  # noqa: E731
    qkv = QKVChain(2, 2, rng)
    gdfn = GDFN(2, rng)
    gdfn.out.weight.data = rng.standard_normal(gdfn.out.weight.shape)
    blk = _pip_instance(rng)
    params = [p for _, p in blk.named_parameters()]
    z = A(3, 4, 4)
    omega = np.array([1.0, 0.0])
    bank = A(3, 4)
    bank.data = np.array([[1.0, 0.2, 0.0, 0.1], [0.9, 0.5, 0.1, 0.0], [0.0, 0.3, 1.0, 0.2]])
    proj = Conv1x1(3, 4, rng)
    cases = [
        ("ddl_loss", lambda b: ddl_loss(b, math.pi / 2), [bank]),
        ("combine_degradation", lambda b: combine_degradation(b, np.array([0.3, 0.5, 0.2])), [A(3, 4)]),
        ("build_dhat", build_dhat, [A(3), A(3, 2, 2)]),
        ("align_feature", lambda x: align_feature(x, proj, 2, 2), [A(3, 4, 4)]),
        ("qkv_project", lambda x: qkv(x), [A(2, 3, 3)]),
        ("transposed_cross_attention", transposed_cross_attention, [A(3, 2, 3), A(3, 2, 3), A(3, 2, 3)]),
        ("selective_cross_attention",
         lambda q, k, v, s: selective_cross_attention(q, k, v, (0.5, 2 / 3, 0.75, 0.8), s),
         [A(4, 2, 3), A(4, 2, 3), A(4, 2, 3), A(4)]),
        ("gdfn", lambda x: gdfn(x), [A(2, 3, 3)]),
        ("p2p_interaction", lambda b, d: p2p_interaction(b, d, blk.q_p, blk.k_p, blk.v_p, blk.gdfn_p),
         [A(4, 4, 4), A(4, 4, 4)]),
        ("p2f_modulate", lambda x, u: p2f_modulate(x, u, blk.up_proj, blk.q_f, blk.k_f, blk.v_f, blk.gdfn_f,
                                                   blk.config.m_ratios, blk.scales), [A(3, 4, 4), A(4, 4, 4)]),
        ("pip_forward", lambda x, *ps: blk(x, omega), [z] + params),
    ]
    return cases


def run_suite(seed: int = 0, verbose: bool = False, printer=print) -> list[CaseResult]:
    results = []
    with ad.precision("wide"):
        rng = np.random.default_rng(seed)
        groups = [(primitive_cases(rng), PRIMITIVE_TOL), (composite_cases(rng), COMPOSITE_TOL)]
        for cases, tol in groups:
            for name, fn, inputs in cases:
                t0 = time.perf_counter()
                err = check_case(fn, inputs, seed=seed)
                res = CaseResult(name, err, tol)
                results.append(res)
                if verbose:
                    status = "ok  " if res.ok else "FAIL"
                    printer(f"{status} {name:<28} max_rel_err={err:.3e} tol={tol:.0e} "
                            f"({time.perf_counter() - t0:.2f}s)")
    return results
