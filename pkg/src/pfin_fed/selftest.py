"""Fast numerical fixtures: finite-difference gradients, loss, gate and weight values."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import mathcore as mc
from .federation import ClientUpdate, fed_uq_avg_weights
from .mathcore import Graph, ParamSet
from .pfin import ImputationOutput, bce_with_logits, beta_nll_loss, uncertainty_gate

GRAD_TOL = 1e-4
POINTS = 20


@dataclass
class Check:
    name: str
    passed: bool
    detail: str


def _frozen_beta_nll(beta: float):
    # the stop-gradient factor is held at its value at the base point, so the
    # numerical derivative sees only the bracketed NLL term
    def fn(mu, log_var, z, w0):
        resid = mc.sub(z, mu)
        nll = 0.5 * log_var + 0.5 * mc.square(resid) * mc.exp(mc.neg(log_var))
        return mc.mean(w0 * nll)
    return fn


GRADIENT_CASES: dict[str, tuple[Callable, list[tuple[int, ...]]]] = {
    "add": (lambda a, b: mc.sum_(mc.square(a + b)), [(3, 4), (1, 4)]),
    "sub": (lambda a, b: mc.sum_(mc.square(a - b)), [(3, 4), (3, 1)]),
    "mul": (lambda a, b: mc.sum_(a * b * a), [(2, 5), (5,)]),
    "div": (lambda a, b: mc.sum_(a / (mc.square(b) + 1.0)), [(3, 3), (3, 3)]),
    "exp": (lambda a: mc.sum_(mc.exp(a * 0.5)), [(4, 3)]),
    "log": (lambda a: mc.sum_(mc.log(mc.square(a) + 0.5)), [(4, 3)]),
    "sigmoid": (lambda a: mc.sum_(mc.square(mc.sigmoid(a))), [(4, 3)]),
    "softplus": (lambda a: mc.sum_(mc.square(mc.softplus(a))), [(4, 3)]),
    "gelu": (lambda a: mc.sum_(mc.square(mc.gelu(a))), [(4, 3)]),
    "matmul": (lambda a, b: mc.sum_(mc.square(mc.matmul(a, b))), [(2, 3, 4), (4, 2)]),
    "softmax": (lambda a, w: mc.sum_(mc.softmax(a) * w), [(3, 5), (3, 5)]),
    "layernorm": (lambda x, g, b, w: mc.sum_(mc.layernorm(x, g, b) * w),
                  [(3, 8), (8,), (8,), (3, 8)]),
    "l2_normalize": (lambda x, w: mc.sum_(mc.l2_normalize(x) * w), [(3, 6), (3, 6)]),
    "clip": (lambda a: mc.sum_(mc.square(mc.clip(a, -10.0, 10.0))), [(3, 4)]),
    "attention": (lambda q, k, v, *w: mc.sum_(mc.square(
        mc.multi_head_attention(q, k, v, 2, dict(zip(mc.ATTN_KEYS, w))))),
        [(3, 4), (5, 4), (5, 4)] + [(4, 4), (4,)] * 4),
}


def gradient_checks(points: int = POINTS, seed: int = 0) -> list[Check]:
    rng = np.random.default_rng(seed)
    out = []
    for name, (fn, shapes) in GRADIENT_CASES.items():
        worst = max(mc.gradcheck(fn, [rng.normal(size=s) for s in shapes]) for _ in range(points))
        out.append(Check(f"grad:{name}", bool(worst < GRAD_TOL), f"max rel err {worst:.2e}"))
    for beta in (0.0, 0.5, 1.0):
        worst = 0.0
        for _ in range(points):
            mu, lv, z = rng.normal(size=(3, 4)), rng.uniform(-2, 2, (3, 4)), rng.normal(size=(3, 4))
            w0 = np.exp(beta * lv)
            frozen = _frozen_beta_nll(beta)
            # analytic side: the real loss with its stop-gradient factor
            g = Graph()
            m_t, v_t = g.leaf(mu), g.leaf(lv)
            grads = g.backward(beta_nll_loss(ImputationOutput(m_t, v_t), z, beta))
            ref = Graph()
            ref_out = [ref.leaf(mu), ref.leaf(lv)]
            ref_grads = ref.backward(frozen(*ref_out, ref.constant(z), ref.constant(w0)))
            num = mc.gradcheck(lambda a, b: frozen(a, b, a.graph.constant(z), a.graph.constant(w0)),
                               [mu, lv])
            same = max(np.max(np.abs(grads.of(m_t) - ref_grads.of(ref_out[0]))),
                       np.max(np.abs(grads.of(v_t) - ref_grads.of(ref_out[1]))))
            worst = max(worst, num, float(same))
        out.append(Check(f"grad:beta_nll(beta={beta})", bool(worst < GRAD_TOL), f"max err {worst:.2e}"))
    return out


def fixture_checks() -> list[Check]:
    out = []
    g = Graph()
    loss = beta_nll_loss(ImputationOutput(g.constant([[0.0]]), g.constant([[0.0]])), [[1.0]], 0.5)
    out.append(Check("beta_nll:unit", float(loss.value) == 0.5, f"{float(loss.value)!r}"))
    loss = beta_nll_loss(ImputationOutput(g.constant([[0.0]]), g.constant([[1.0]])), [[0.0]], 0.5)
    v = float(loss.value)
    out.append(Check("beta_nll:var_e", abs(v - 0.824361) < 1e-6, f"{v:.7f}"))

    gate = uncertainty_gate(g.constant([0.0, -2.0])).value
    out.append(Check("gate:unit_var", bool(gate[0] == 0.5), f"{float(gate[0])!r}"))
    out.append(Check("gate:log_var=-2", bool(abs(gate[1] - 0.880797) < 1e-6), f"{gate[1]:.7f}"))
    rng = np.random.default_rng(1)
    a, b = np.sort(rng.uniform(-10, 10, (2, 1000)), axis=0)
    keep = a < b
    ga = uncertainty_gate(g.constant(a[keep])).value
    gb = uncertainty_gate(g.constant(b[keep])).value
    out.append(Check("gate:monotone", bool(np.all(ga > gb)), f"{int(keep.sum())} pairs"))

    w = fed_uq_avg_weights([ClientUpdate(0, ParamSet(), 0.1, 100),
                            ClientUpdate(1, ParamSet(), 0.5, 300)], alpha=0.6, T=0.2)
    err = float(np.max(np.abs(w.lam - np.array([0.628478, 0.371522]))))
    out.append(Check("weights:fixture", bool(err < 1e-6), f"lambda={w.lam.round(6).tolist()}"))
    bce = float(bce_with_logits(g.constant(np.zeros((2, 3))), np.array([[0, 1, 1], [1, 0, 0]])).value)
    out.append(Check("bce:zero_logits", abs(bce - math.log(2.0)) < 1e-15, f"{bce!r}"))
    hand = float(bce_with_logits(g.constant([[1.0]]), np.array([[1.0]])).value)
    out.append(Check("bce:hand", abs(hand - 0.313262) < 1e-6, f"{hand:.7f}"))
    return out


def run_all(points: int = POINTS) -> list[Check]:
    return gradient_checks(points) + fixture_checks()
