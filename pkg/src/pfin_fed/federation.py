"""Server/client round loop with Fed-UQ-Avg and FedAvg aggregation.

Each round the server broadcasts the global :class:`ParamSet`, every client
trains a private copy with Adam, and the server forms a convex combination of
the returned parameter sets. Fed-UQ-Avg blends the size-proportional FedAvg
weight with a softmax over ``-sigma_bar_sq / T``.
"""
from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Literal, Sequence

import numpy as np

from . import pfin
from .mathcore import Adam, ConfigError, Graph, ParamSet
from .metrics import UndefinedMetricError, mean_auc
from .pfin import ImputationOutput, PfinConfig
from .synthdata import ClientDataset

log = logging.getLogger(__name__)

Strategy = Literal["fed_uq_avg", "fedavg"]
Fill = Literal["pfin", "fin", "zero", "uniform"]


class AggregationError(ValueError):
    pass


class RoundError(RuntimeError):
    pass


@dataclass(frozen=True)
class LocalTrainConfig:
    epochs: int = 4
    batch_size: int = 32
    lr: float = 1e-4
    fill: Fill = "pfin"
    # "post_pass": final inference over local images; "running_mean": mean over training batches
    sigma_window: Literal["post_pass", "running_mean"] = "post_pass"
    # "block": unimodal BCE never reaches the imputer; "flow": it does
    imputer_grad: Literal["block", "flow"] = "block"

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError(f"invalid local training settings: {self}")
        if self.fill not in ("pfin", "fin", "zero", "uniform"):
            raise ConfigError(f"unknown fill {self.fill!r}")
        if self.sigma_window not in ("post_pass", "running_mean"):
            raise ConfigError(f"unknown sigma_window {self.sigma_window!r}")
        if self.imputer_grad not in ("block", "flow"):
            raise ConfigError(f"unknown imputer_grad {self.imputer_grad!r}")


@dataclass
class ClientUpdate:
    client_id: int
    theta: ParamSet
    sigma_bar_sq: float
    n_k: int
    train_loss: float = float("nan")
    modality: str = "multimodal"

    def __post_init__(self):
        if not np.isfinite(self.sigma_bar_sq) or self.sigma_bar_sq < 0:
            raise ConfigError(f"client {self.client_id}: sigma_bar_sq must be finite and >= 0")
        if self.n_k < 1:
            raise ConfigError(f"client {self.client_id}: n_k must be >= 1")


@dataclass
class AggregationWeights:
    w_data: np.ndarray
    w_conf: np.ndarray
    lam: np.ndarray
    alpha: float
    T: float


@dataclass
class ClientRecord:
    client_id: int
    modality: str
    n_k: int
    sigma_bar_sq: float
    lam: float
    train_loss: float


@dataclass
class RoundRecord:
    t: int
    clients: list[ClientRecord]
    val_auc: float
    mean_train_loss: float
    wall_time: float = 0.0

    def mean_sigma(self, modality: str) -> float:
        vals = [c.sigma_bar_sq for c in self.clients if c.modality == modality]
        return float(np.mean(vals)) if vals else float("nan")


@dataclass
class FederationResult:
    records: list[RoundRecord]
    theta: ParamSet
    initial_sigma: dict[int, float] = field(default_factory=dict)


# ---------------------------------------------------------------- local training

def _imputer_loss(out: ImputationOutput, target, cfg: PfinConfig):
    if out.log_var is None:
        return pfin.mse_loss(out.mu, target)
    return pfin.beta_nll_loss(out, target, cfg.beta)


def _client_sigma(theta: ParamSet, cfg: PfinConfig, z_img: np.ndarray) -> float:
    if pfin.imputer_kind(theta) != "probabilistic":
        return 0.0
    _, var = pfin.impute(theta, cfg, z_img)
    return float(var.mean())


def local_train(global_theta: ParamSet, client: ClientDataset, cfg: PfinConfig,
                train: LocalTrainConfig, seed: int, round_idx: int,
                global_mean: np.ndarray | None = None) -> ClientUpdate:
    """Train a private copy of the global model on one client's data."""
    if client.n_k < 1:
        raise ConfigError(f"client {client.client_id} is empty")
    theta = global_theta.copy()
    kind = pfin.imputer_kind(theta)
    if train.fill in ("pfin", "fin") and kind == "none":
        raise ConfigError(f"fill={train.fill!r} needs an imputer in the parameter set")
    rng = np.random.default_rng([seed, client.client_id, round_idx])
    z_img = client.images()
    y = client.labels().astype(np.float64)
    multimodal = client.modality == "multimodal"
    z_txt = client.texts() if multimodal else None
    n = client.n_k

    # unimodal clients with a blocked imputer see fixed imputations all round
    fixed_mu = fixed_lv = None
    fixed = not multimodal and not (train.imputer_grad == "flow" and train.fill in ("pfin", "fin"))
    if fixed and train.fill in ("pfin", "fin"):
        g = Graph()
        out = pfin.pfin_forward(g.constant(z_img), theta.bind(g, trainable=False), cfg)
        fixed_mu = np.array(out.mu.value)
        if out.log_var is not None and train.fill == "pfin":
            fixed_lv = np.array(out.log_var.value)

    if multimodal and kind != "none":
        trainable = None
    elif fixed:
        trainable = lambda name: not pfin.is_imputer_param(name)  # noqa: E731
    else:
        trainable = None

    opt = Adam(lr=train.lr)
    losses, sigma_acc = [], []
    for _ in range(train.epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n, train.batch_size):
            idx = order[start:start + train.batch_size]
            g = Graph()
            P = theta.bind(g, trainable=True, only=trainable)
            zi = g.constant(z_img[idx])
            if multimodal:
                fo = pfin.fuse_multimodal(zi, g.constant(z_txt[idx]), P, cfg)
                loss = pfin.bce_with_logits(pfin.classify(fo.z_fused, P), y[idx])
                if kind != "none":
                    out = pfin.pfin_forward(zi, P, cfg)
                    loss = loss + cfg.lambda_imp * _imputer_loss(out, z_txt[idx], cfg)
                    if out.log_var is not None:
                        sigma_acc.append(float(np.exp(out.log_var.value).mean()))
            else:
                if train.fill in ("zero", "uniform"):
                    t = pfin.impute_baseline(train.fill, zi, global_mean=global_mean)
                    out = ImputationOutput(t, None)
                elif fixed:
                    out = ImputationOutput(g.constant(fixed_mu[idx]),
                                           None if fixed_lv is None else g.constant(fixed_lv[idx]))
                else:
                    out = pfin.pfin_forward(zi, P, cfg)
                    if train.fill == "fin":
                        out = ImputationOutput(out.mu, None)
                if out.log_var is not None:
                    sigma_acc.append(float(np.exp(out.log_var.value).mean()))
                fo = pfin.fuse(zi, out, P, cfg)
                loss = pfin.bce_with_logits(pfin.classify(fo.z_fused, P), y[idx])
            grads = g.backward(loss)
            opt.step(theta, {name: grads.of(t) for name, t in P.items() if t.requires_grad})
            epoch_losses.append(float(loss.value))
        losses.append(float(np.mean(epoch_losses)))

    if train.sigma_window == "running_mean" and sigma_acc:
        sigma = float(np.mean(sigma_acc))
    else:
        sigma = _client_sigma(theta, cfg, z_img)
    return ClientUpdate(client.client_id, theta, sigma, n,
                        losses[-1] if losses else float("nan"), client.modality)


# ---------------------------------------------------------------- aggregation

def fed_uq_avg_weights(updates: Sequence[ClientUpdate], alpha: float = 0.6,
                       T: float = 0.2) -> AggregationWeights:
    """Blend of size weights and ``exp(-sigma_bar_sq / T)`` confidence weights."""
    if not updates:
        raise AggregationError("no client updates to weight")
    if T <= 0:
        raise ConfigError(f"temperature must be positive, got {T}")
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    n = np.array([u.n_k for u in updates], dtype=np.float64)
    s = np.array([u.sigma_bar_sq for u in updates], dtype=np.float64)
    w_data = n / n.sum()
    # shifting by the minimum keeps the largest term at exp(0) = 1
    conf = np.exp(-(s - s.min()) / T)
    w_conf = conf / conf.sum()
    lam = (1.0 - alpha) * w_data + alpha * w_conf
    return AggregationWeights(w_data, w_conf, lam, alpha, T)


def fedavg_weights(updates: Sequence[ClientUpdate]) -> AggregationWeights:
    if not updates:
        raise AggregationError("no client updates to weight")
    n = np.array([u.n_k for u in updates], dtype=np.float64)
    w_data = n / n.sum()
    return AggregationWeights(w_data, np.full(len(updates), 1.0 / len(updates)),
                              w_data.copy(), 0.0, float("inf"))


def aggregate(updates: Sequence[ClientUpdate], weights: AggregationWeights) -> ParamSet:
    """Per-parameter convex combination, reduced in ascending client-id order."""
    if not updates:
        raise AggregationError("no client updates to aggregate")
    lam = np.asarray(weights.lam, dtype=np.float64)
    if lam.shape != (len(updates),):
        raise AggregationError(f"{len(updates)} updates but {lam.size} weights")
    ref = updates[0].theta
    for u in updates[1:]:
        if list(u.theta.keys()) != list(ref.keys()):
            missing = set(ref.keys()) ^ set(u.theta.keys())
            key = sorted(missing)[0] if missing else "<ordering>"
            raise AggregationError(f"client {u.client_id} parameter keys differ at {key!r}")
        for k in ref.keys():
            if u.theta[k].shape != ref[k].shape:
                raise AggregationError(f"client {u.client_id} shape mismatch at {k!r}: "
                                       f"{u.theta[k].shape} vs {ref[k].shape}")
    order = sorted(range(len(updates)), key=lambda i: updates[i].client_id)
    out = ParamSet()
    for k in ref.keys():
        acc = np.zeros_like(ref[k])
        for i in order:
            acc = acc + lam[i] * updates[i].theta[k]
        out[k] = acc
    return out


def compute_weights(updates: Sequence[ClientUpdate], strategy: Strategy, alpha: float,
                    T: float) -> AggregationWeights:
    if strategy == "fed_uq_avg":
        return fed_uq_avg_weights(updates, alpha, T)
    if strategy == "fedavg":
        return fedavg_weights(updates)
    raise ConfigError(f"unknown aggregation strategy {strategy!r}")


# ---------------------------------------------------------------- evaluation

def evaluate(theta: ParamSet, cfg: PfinConfig, z_img: np.ndarray, labels: np.ndarray,
             fill: Fill, global_mean: np.ndarray | None = None,
             z_txt: np.ndarray | None = None) -> float:
    """Mean AUC on image-only inputs (or on observed text when ``z_txt`` is given)."""
    inf = pfin.infer(theta, cfg, z_img, z_txt=z_txt, fill=fill, global_mean=global_mean)
    try:
        return mean_auc(inf.logits, labels)
    except UndefinedMetricError:
        return float("nan")


# ---------------------------------------------------------------- round loop

@dataclass(frozen=True)
class FederationConfig:
    rounds: int = 20
    strategy: Strategy = "fed_uq_avg"
    alpha: float = 0.6
    T: float = 0.2
    seed: int = 0
    workers: int = 1
    checkpoint_every: int = 0
    checkpoint_dir: str | None = None


def run_federation(clients: Sequence[ClientDataset], theta0: ParamSet, cfg: PfinConfig,
                   train: LocalTrainConfig, fed: FederationConfig,
                   val: tuple[np.ndarray, np.ndarray] | None = None,
                   client_order: Sequence[int] | None = None,
                   on_round: Callable[[RoundRecord], None] | None = None) -> FederationResult:
    """Run ``fed.rounds`` rounds; ``client_order`` only changes execution order."""
    if not any(c.modality == "multimodal" for c in clients):
        raise ConfigError("federation needs at least one multimodal client")
    active = []
    for c in clients:
        if c.n_k < 1:
            log.warning("client %d is empty and is excluded", c.client_id)
        else:
            active.append(c)
    by_id = {c.client_id: c for c in active}
    order = list(client_order) if client_order is not None else sorted(by_id)
    order = [cid for cid in order if cid in by_id]

    global_mean = None
    if train.fill == "uniform":
        mm = [c.texts() for c in active if c.modality == "multimodal"]
        global_mean = pfin.global_mean_embedding(mm)

    theta = theta0.copy()
    records: list[RoundRecord] = []
    ckpt_dir = Path(fed.checkpoint_dir) if fed.checkpoint_dir else None

    def train_one(cid: int, t: int) -> ClientUpdate:
        return local_train(theta, by_id[cid], cfg, train, fed.seed, t, global_mean)

    for t in range(1, fed.rounds + 1):
        start = time.perf_counter()
        try:
            if fed.workers > 1:
                with ThreadPoolExecutor(max_workers=fed.workers) as pool:
                    futures = {cid: pool.submit(train_one, cid, t) for cid in order}
                    results = {cid: f.result() for cid, f in futures.items()}
            else:
                results = {cid: train_one(cid, t) for cid in order}
            updates = [results[cid] for cid in sorted(results)]
            weights = compute_weights(updates, fed.strategy, fed.alpha, fed.T)
            theta = aggregate(updates, weights)
        except Exception as exc:
            raise RoundError(f"round {t}: {exc}") from exc

        val_auc = float("nan")
        if val is not None:
            val_auc = evaluate(theta, cfg, val[0], val[1], train.fill, global_mean)
        rec = RoundRecord(
            t,
            [ClientRecord(u.client_id, u.modality, u.n_k, u.sigma_bar_sq, float(weights.lam[i]),
                          u.train_loss) for i, u in enumerate(updates)],
            val_auc,
            float(np.mean([u.train_loss for u in updates])),
            time.perf_counter() - start,
        )
        records.append(rec)
        if on_round is not None:
            on_round(rec)
        if ckpt_dir is not None and fed.checkpoint_every and t % fed.checkpoint_every == 0:
            ckpt_dir.mkdir(parents=True, exist_ok=True)
            theta.save(ckpt_dir / f"round_{t:03d}")
    return FederationResult(records, theta)


# ---------------------------------------------------------------- CSV export

def write_round_csv(records: Sequence[RoundRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "client_id", "modality", "n_k", "sigma_bar_sq", "lambda", "train_loss"])
        for r in records:
            for c in r.clients:
                w.writerow([r.t, c.client_id, c.modality, c.n_k, repr(c.sigma_bar_sq),
                            repr(c.lam), repr(c.train_loss)])


def write_summary_csv(records: Sequence[RoundRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "val_auc", "mean_sigma_unimodal", "mean_sigma_multimodal"])
        for r in records:
            w.writerow([r.t, repr(r.val_auc), repr(r.mean_sigma("unimodal")),
                        repr(r.mean_sigma("multimodal"))])
