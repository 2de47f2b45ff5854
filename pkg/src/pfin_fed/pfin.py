"""Probabilistic feature imputation, uncertainty-gated fusion and the classifier.

All network functions take a mapping of bound parameter tensors (see
:meth:`ParamSet.bind`) so that the same code serves training and inference.
Parameter names are grouped by prefix:

``pfin.*``
    the imputer (input projection, query token, encoder, ``mu``/``sigma`` heads)
``fusion.*``
    the two cross-attention blocks and the concat projection
``cls.*``
    the multi-label classifier
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Mapping, NamedTuple

import numpy as np

from . import mathcore as mc
from .mathcore import Adam, ConfigError, ContractError, Graph, ParamSet, ShapeError, Tensor

log = logging.getLogger(__name__)

Params = Mapping[str, Tensor]
ImputerKind = Literal["probabilistic", "deterministic", "none"]
BaselineKind = Literal["zero", "uniform", "deterministic_fin"]

INIT_STD = 0.02


@dataclass(frozen=True)
class PfinConfig:
    d: int = 32
    n_labels: int = 14
    n_layers: int = 2
    n_heads: int = 4
    beta: float = 0.5
    log_var_clamp: float = 10.0
    fusion_heads: int = 1
    lambda_imp: float = 1.0
    ff_mult: int = 4
    strict_inputs: bool = False

    def __post_init__(self):
        if self.d % self.n_heads:
            raise ConfigError(f"d={self.d} not divisible by n_heads={self.n_heads}")
        if self.d % self.fusion_heads:
            raise ConfigError(f"d={self.d} not divisible by fusion_heads={self.fusion_heads}")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must lie in [0, 1], got {self.beta}")
        if self.log_var_clamp <= 0:
            raise ConfigError("log_var_clamp must be positive")


class ImputationOutput(NamedTuple):
    mu: Tensor
    log_var: Tensor | None

    @property
    def var(self) -> np.ndarray:
        if self.log_var is None:
            raise ContractError("deterministic imputer has no variance head")
        return np.exp(self.log_var.value)


class FusionOutput(NamedTuple):
    z_fused: Tensor
    gate: np.ndarray


# ---------------------------------------------------------------- initialisation

def _attn_shapes(prefix: str, d: int) -> list[tuple[str, tuple[int, ...]]]:
    out = []
    for key in mc.ATTN_KEYS:
        out.append((f"{prefix}.{key}", (d, d) if key.startswith("W") else (d,)))
    return out


def param_shapes(cfg: PfinConfig, imputer: ImputerKind = "probabilistic"
                 ) -> list[tuple[str, tuple[int, ...]]]:
    d, ff = cfg.d, cfg.d * cfg.ff_mult
    shapes: list[tuple[str, tuple[int, ...]]] = []
    if imputer != "none":
        shapes += [("pfin.in.W", (d, d)), ("pfin.in.b", (d,)),
                   ("pfin.in_ln.g", (d,)), ("pfin.in_ln.b", (d,)),
                   ("pfin.query", (1, d))]
        for i in range(cfg.n_layers):
            p = f"pfin.enc{i}"
            shapes += [(f"{p}.ln1.g", (d,)), (f"{p}.ln1.b", (d,))]
            shapes += _attn_shapes(f"{p}.attn", d)
            shapes += [(f"{p}.ln2.g", (d,)), (f"{p}.ln2.b", (d,)),
                       (f"{p}.ff1.W", (d, ff)), (f"{p}.ff1.b", (ff,)),
                       (f"{p}.ff2.W", (ff, d)), (f"{p}.ff2.b", (d,))]
        shapes += [("pfin.out_ln.g", (d,)), ("pfin.out_ln.b", (d,))]
        heads = ("mu", "sigma") if imputer == "probabilistic" else ("mu",)
        for h in heads:
            shapes += [(f"pfin.{h}.fc1.W", (d, d)), (f"pfin.{h}.fc1.b", (d,)),
                       (f"pfin.{h}.fc2.W", (d, d)), (f"pfin.{h}.fc2.b", (d,))]
    shapes += _attn_shapes("fusion.img_attn", d)
    shapes += _attn_shapes("fusion.txt_attn", d)
    shapes += [("fusion.img_ln.g", (d,)), ("fusion.img_ln.b", (d,)),
               ("fusion.txt_ln.g", (d,)), ("fusion.txt_ln.b", (d,)),
               ("fusion.proj.W", (2 * d, d)), ("fusion.proj.b", (d,)),
               ("cls.fc1.W", (d, d)), ("cls.fc1.b", (d,)),
               ("cls.fc2.W", (d, cfg.n_labels)), ("cls.fc2.b", (cfg.n_labels,))]
    return shapes


def init_params(cfg: PfinConfig, seed: int, imputer: ImputerKind = "probabilistic") -> ParamSet:
    """N(0, 0.02) weights, zero biases, unit LN gains, zero output heads."""
    rng = np.random.default_rng([seed, 0x1A17])
    ps = ParamSet()
    for name, shape in param_shapes(cfg, imputer):
        leaf = name.rsplit(".", 1)[-1]
        if name.endswith(".fc2.W") and name.startswith(("pfin.mu", "pfin.sigma")):
            ps[name] = np.zeros(shape)
        elif leaf == "g":
            ps[name] = np.ones(shape)
        elif leaf.startswith("W") or name == "pfin.query":
            ps[name] = rng.normal(0.0, INIT_STD, size=shape)
        else:
            ps[name] = np.zeros(shape)
    return ps


def imputer_kind(params: ParamSet | Params) -> ImputerKind:
    if "pfin.sigma.fc2.W" in params:
        return "probabilistic"
    if "pfin.mu.fc2.W" in params:
        return "deterministic"
    return "none"


def is_imputer_param(name: str) -> bool:
    return name.startswith("pfin.")


# ---------------------------------------------------------------- building blocks

def _attn_weights(P: Params, prefix: str) -> dict[str, Tensor]:
    return {k: P[f"{prefix}.{k}"] for k in mc.ATTN_KEYS}


def _mlp(x: Tensor, P: Params, prefix: str) -> Tensor:
    h = mc.gelu(mc.linear(x, P[f"{prefix}.fc1.W"], P[f"{prefix}.fc1.b"]))
    return mc.linear(h, P[f"{prefix}.fc2.W"], P[f"{prefix}.fc2.b"])


def _check_unit_norm(z: np.ndarray, cfg: PfinConfig) -> None:
    dev = np.abs(np.linalg.norm(z, axis=-1) - 1.0)
    if dev.size and dev.max() > 1e-6:
        msg = f"image features are not unit-norm (max deviation {dev.max():.2e})"
        if cfg.strict_inputs:
            raise ContractError(msg)
        log.warning(msg)


def pfin_forward(z_img: Tensor, P: Params, cfg: PfinConfig) -> ImputationOutput:
    """Map image features to the mean and clamped log-variance of the text feature."""
    if z_img.ndim != 2 or z_img.shape[-1] != cfg.d:
        raise ShapeError(f"expected batch x {cfg.d} image features, got {z_img.shape}")
    _check_unit_norm(z_img.value, cfg)
    batch, d = z_img.shape
    h0 = mc.gelu(mc.layernorm(mc.linear(z_img, P["pfin.in.W"], P["pfin.in.b"]),
                              P["pfin.in_ln.g"], P["pfin.in_ln.b"]))
    query = mc.broadcast_to(mc.reshape(P["pfin.query"], (1, 1, d)), (batch, 1, d))
    x = mc.concat([query, mc.reshape(h0, (batch, 1, d))], axis=1)
    for i in range(cfg.n_layers):
        p = f"pfin.enc{i}"
        h = mc.layernorm(x, P[f"{p}.ln1.g"], P[f"{p}.ln1.b"])
        x = x + mc.multi_head_attention(h, h, h, cfg.n_heads, _attn_weights(P, f"{p}.attn"))
        h = mc.layernorm(x, P[f"{p}.ln2.g"], P[f"{p}.ln2.b"])
        h = mc.gelu(mc.linear(h, P[f"{p}.ff1.W"], P[f"{p}.ff1.b"]))
        x = x + mc.linear(h, P[f"{p}.ff2.W"], P[f"{p}.ff2.b"])
    x = mc.layernorm(x, P["pfin.out_ln.g"], P["pfin.out_ln.b"])
    hq = mc.take(x, 0, axis=1)
    mu = _mlp(hq, P, "pfin.mu")
    if "pfin.sigma.fc2.W" not in P:
        return ImputationOutput(mu, None)
    c = cfg.log_var_clamp
    log_var = mc.clip(_mlp(hq, P, "pfin.sigma"), -c, c)
    return ImputationOutput(mu, log_var)


def beta_nll_loss(out: ImputationOutput, target: Tensor | np.ndarray, beta: float) -> Tensor:
    """Mean over batch and dims of ``SG(var**beta) * (0.5 log var + (z-mu)^2 / (2 var))``.

    The ``0.5 log(2 pi)`` constant is omitted.
    """
    if out.log_var is None:
        raise ContractError("beta-NLL needs a variance head")
    if not 0.0 <= beta <= 1.0:
        raise ConfigError(f"beta must lie in [0, 1], got {beta}")
    mu, log_var = out.mu, out.log_var
    target = target if isinstance(target, Tensor) else mu.graph.constant(target)
    if target.shape != mu.shape or log_var.shape != mu.shape:
        raise ShapeError(f"beta-NLL shape mismatch: mu{mu.shape} log_var{log_var.shape} "
                         f"target{target.shape}")
    resid = mc.sub(target, mu)
    inv_var = mc.exp(mc.neg(log_var))
    nll = 0.5 * log_var + 0.5 * mc.square(resid) * inv_var
    weight = mc.stop_gradient(mc.exp(beta * log_var))
    return mc.mean(weight * nll)


def mse_loss(mu: Tensor, target: Tensor | np.ndarray) -> Tensor:
    target = target if isinstance(target, Tensor) else mu.graph.constant(target)
    if target.shape != mu.shape:
        raise ShapeError(f"MSE shape mismatch: {mu.shape} vs {target.shape}")
    return mc.mean(mc.square(mc.sub(target, mu)))


def uncertainty_gate(log_var: Tensor) -> Tensor:
    """``sigmoid(-log var)``: near 1 for confident dimensions, near 0 for uncertain ones."""
    return mc.sigmoid(mc.neg(log_var))


def _fuse_text(z_img: Tensor, t: Tensor, P: Params, cfg: PfinConfig) -> Tensor:
    if z_img.shape != t.shape:
        raise ShapeError(f"fusion shape mismatch: {z_img.shape} vs {t.shape}")
    batch, d = z_img.shape
    # one token per sample, so each attention collapses to its value path
    zi = mc.reshape(z_img, (batch, 1, d))
    zt = mc.reshape(t, (batch, 1, d))
    att_i = mc.multi_head_attention(zi, zt, zt, cfg.fusion_heads, _attn_weights(P, "fusion.img_attn"))
    att_t = mc.multi_head_attention(zt, zi, zi, cfg.fusion_heads, _attn_weights(P, "fusion.txt_attn"))
    hat_i = mc.layernorm(zi + att_i, P["fusion.img_ln.g"], P["fusion.img_ln.b"])
    hat_t = mc.layernorm(zt + att_t, P["fusion.txt_ln.g"], P["fusion.txt_ln.b"])
    joint = mc.reshape(mc.concat([hat_i, hat_t], axis=-1), (batch, 2 * d))
    return mc.linear(joint, P["fusion.proj.W"], P["fusion.proj.b"])


def fuse(z_img: Tensor, out: ImputationOutput, P: Params, cfg: PfinConfig,
         gate_override: np.ndarray | float | None = None) -> FusionOutput:
    """Gate the imputed mean by its uncertainty, then fuse with the image feature."""
    if gate_override is not None:
        gate = z_img.graph.constant(np.broadcast_to(gate_override, out.mu.shape))
    elif out.log_var is None:
        gate = z_img.graph.constant(np.ones(out.mu.shape))
    else:
        gate = uncertainty_gate(out.log_var)
    t = gate * out.mu
    return FusionOutput(_fuse_text(z_img, t, P, cfg), np.array(gate.value))


def fuse_multimodal(z_img: Tensor, z_txt: Tensor | None, P: Params, cfg: PfinConfig
                    ) -> FusionOutput:
    """Same fusion network with the observed text feature and the gate fixed at 1."""
    if z_txt is None:
        raise ContractError("fuse_multimodal needs an observed text feature")
    return FusionOutput(_fuse_text(z_img, z_txt, P, cfg), np.ones(z_txt.shape))


def classify(z_fused: Tensor, P: Params) -> Tensor:
    h = mc.gelu(mc.linear(z_fused, P["cls.fc1.W"], P["cls.fc1.b"]))
    return mc.linear(h, P["cls.fc2.W"], P["cls.fc2.b"])


def bce_with_logits(logits: Tensor, labels: np.ndarray | Tensor) -> Tensor:
    """Mean binary cross-entropy, ``softplus(x) - y x``."""
    y = labels if isinstance(labels, Tensor) else logits.graph.constant(labels)
    if y.shape != logits.shape:
        raise ShapeError(f"BCE shape mismatch: {logits.shape} vs {y.shape}")
    return mc.mean(mc.softplus(logits) - y * logits)


# ---------------------------------------------------------------- baselines

def impute_baseline(kind: BaselineKind, z_img: Tensor, P: Params | None = None,
                    cfg: PfinConfig | None = None,
                    global_mean: np.ndarray | None = None) -> Tensor:
    """Point imputations used by the baselines; all bypass the gate."""
    batch, d = z_img.shape
    g = z_img.graph
    if kind == "zero":
        return g.constant(np.zeros((batch, d)))
    if kind == "uniform":
        if global_mean is None:
            raise ConfigError("uniform fill needs the global mean text embedding")
        return g.constant(np.broadcast_to(np.asarray(global_mean, dtype=float), (batch, d)))
    if kind == "deterministic_fin":
        if P is None or cfg is None:
            raise ConfigError("deterministic_fin needs parameters and config")
        return pfin_forward(z_img, P, cfg).mu
    raise ConfigError(f"unknown baseline imputer {kind!r}")


def global_mean_embedding(texts: list[np.ndarray], counts: list[int] | None = None) -> np.ndarray:
    """Server-side mean of multimodal clients' text features, size-weighted."""
    if not texts:
        raise ConfigError("no multimodal client available for the global mean")
    sums = np.stack([t.sum(axis=0) for t in texts])
    total = sum(len(t) for t in texts) if counts is None else sum(counts)
    return sums.sum(axis=0) / total


# ---------------------------------------------------------------- numpy-level helpers

@dataclass
class Inference:
    mu: np.ndarray | None
    var: np.ndarray | None
    gate: np.ndarray
    z_fused: np.ndarray
    logits: np.ndarray


def infer(params: ParamSet, cfg: PfinConfig, z_img: np.ndarray, *,
          z_txt: np.ndarray | None = None, fill: str = "pfin",
          global_mean: np.ndarray | None = None) -> Inference:
    """Forward pass without gradients.

    ``fill`` selects how a missing text feature is produced: ``pfin`` (gated
    probabilistic imputation), ``fin`` (deterministic mean), ``zero``, ``uniform``.
    With ``z_txt`` given, the observed text is used and ``fill`` is ignored.
    """
    g = Graph()
    P = params.bind(g, trainable=False)
    zi = g.constant(z_img)
    mu = var = None
    if z_txt is not None:
        fo = fuse_multimodal(zi, g.constant(z_txt), P, cfg)
    elif fill == "pfin":
        out = pfin_forward(zi, P, cfg)
        mu, var = out.mu.value, out.var
        fo = fuse(zi, out, P, cfg)
    elif fill == "fin":
        out = pfin_forward(zi, P, cfg)
        mu = out.mu.value
        fo = fuse(zi, ImputationOutput(out.mu, None), P, cfg)
    elif fill in ("zero", "uniform"):
        t = impute_baseline(fill, zi, global_mean=global_mean)
        fo = fuse(zi, ImputationOutput(t, None), P, cfg)
    else:
        raise ConfigError(f"unknown fill {fill!r}")
    logits = classify(fo.z_fused, P)
    return Inference(mu, var, fo.gate, np.array(fo.z_fused.value), np.array(logits.value))


def impute(params: ParamSet, cfg: PfinConfig, z_img: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
    """Imputer-only forward pass returning ``(mu, var)`` arrays."""
    g = Graph()
    P = params.bind(g, trainable=False, only=None)
    out = pfin_forward(g.constant(z_img), P, cfg)
    return np.array(out.mu.value), (out.var if out.log_var is not None else None)


def fit_imputer(params: ParamSet, cfg: PfinConfig, z_img: np.ndarray, z_txt: np.ndarray,
                steps: int, batch_size: int = 128, lr: float = 1e-3, seed: int = 0,
                beta: float | None = None, history: list | None = None) -> ParamSet:
    """Train only the imputer (beta-NLL, or MSE without a variance head) on paired data.

    Returns a new parameter set; ``history`` collects ``(loss, mean log_var, mse)``
    per step when given.
    """
    theta = params.copy()
    beta = cfg.beta if beta is None else beta
    rng = np.random.default_rng([seed, 0xF17])
    opt = Adam(lr=lr)
    n = z_img.shape[0]
    order, pos = rng.permutation(n), 0
    for _ in range(steps):
        if pos + batch_size > n:
            order, pos = rng.permutation(n), 0
        idx = order[pos:pos + batch_size]
        pos += batch_size
        g = Graph()
        P = theta.bind(g, trainable=True, only=is_imputer_param)
        out = pfin_forward(g.constant(z_img[idx]), P, cfg)
        target = z_txt[idx]
        loss = mse_loss(out.mu, target) if out.log_var is None else beta_nll_loss(out, target, beta)
        grads = g.backward(loss)
        opt.step(theta, {k: grads.of(t) for k, t in P.items() if t.requires_grad})
        if history is not None:
            lv = float(out.log_var.value.mean()) if out.log_var is not None else float("nan")
            history.append((float(loss.value), lv, float(np.mean((out.mu.value - target) ** 2))))
    return theta


def export_fixtures(params: ParamSet, cfg: PfinConfig, z_img: np.ndarray, path) -> list[dict]:
    """Write ``(input, mu, var, gate, z_fused)`` tuples as JSON for regression checks."""
    res = infer(params, cfg, z_img, fill="pfin")
    rows = [{"input": z_img[i].tolist(), "mu": res.mu[i].tolist(), "var": res.var[i].tolist(),
             "gate": res.gate[i].tolist(), "z_fused": res.z_fused[i].tolist()}
            for i in range(z_img.shape[0])]
    Path(path).write_text(json.dumps({"d": cfg.d, "checkpoint_sha256": params.digest(),
                                      "rows": rows}, indent=1))
    return rows


def check_fixtures(params: ParamSet, cfg: PfinConfig, path, atol: float = 1e-10) -> float:
    """Recompute a fixture file and return the largest absolute deviation.

    Raises :class:`ContractError` when it exceeds ``atol``.
    """
    data = json.loads(Path(path).read_text())
    rows = data["rows"]
    z_img = np.array([r["input"] for r in rows])
    res = infer(params, cfg, z_img, fill="pfin")
    worst = 0.0
    for key, got in (("mu", res.mu), ("var", res.var), ("gate", res.gate), ("z_fused", res.z_fused)):
        want = np.array([r[key] for r in rows])
        worst = max(worst, float(np.max(np.abs(want - got))))
    if worst > atol:
        raise ContractError(f"fixture mismatch: max deviation {worst:.3e} > {atol:.1e}")
    return worst
