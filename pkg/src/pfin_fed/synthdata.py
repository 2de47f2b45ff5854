"""Synthetic paired image/text features with known cross-modal noise.

A latent ``u ~ N(shift, I_m)`` drives both modalities::

    z_img = normalize(A u)
    difficulty = sigmoid(a . u)
    s = s_min + difficulty * (s_max - s_min)
    z_txt = normalize(B u + s * eps)
    labels ~ Bernoulli(sigmoid(W_y u))

``true_sigma`` (= s) is kept on every sample for calibration oracles only.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal

import numpy as np

from .mathcore import ConfigError, l2_normalize_array

Modality = Literal["multimodal", "unimodal"]


class EmptyDatasetError(ValueError):
    pass


class PartitionError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorSpec:
    d: int = 32
    latent_dim: int = 16
    n_labels: int = 14
    s_min: float = 0.05
    s_max: float = 0.8
    seed: int = 0
    # scales a . u inside the difficulty sigmoid
    difficulty_gain: float = 1.0
    # latent mean offset along the difficulty direction for the unimodal source
    unimodal_shift: float = 0.0
    # B = I (requires latent_dim == d); makes the text noise analytically tractable
    identity_text_map: bool = False

    def __post_init__(self):
        if self.d < self.latent_dim:
            raise ConfigError(f"d={self.d} must be >= latent_dim={self.latent_dim}")
        if not 0 <= self.s_min <= self.s_max:
            raise ConfigError(f"need 0 <= s_min <= s_max, got {self.s_min}, {self.s_max}")
        if self.identity_text_map and self.latent_dim != self.d:
            raise ConfigError("identity_text_map needs latent_dim == d")
        if self.n_labels < 1:
            raise ConfigError("n_labels must be positive")

    @property
    def matrices(self) -> "Mixing":
        return Mixing.from_spec(self)


@dataclass(frozen=True)
class Mixing:
    A: np.ndarray  # d x m
    B: np.ndarray  # d x m
    W_y: np.ndarray  # C x m
    b_y: np.ndarray  # C
    a: np.ndarray  # m, unit-norm difficulty direction

    @classmethod
    def from_spec(cls, spec: GeneratorSpec) -> "Mixing":
        rng = np.random.default_rng([spec.seed, 0xA11CE])
        m, d = spec.latent_dim, spec.d
        A = rng.standard_normal((d, m)) / np.sqrt(m)
        B = rng.standard_normal((d, m)) / np.sqrt(m)
        if spec.identity_text_map:
            B = np.eye(d)
        W_y = rng.standard_normal((spec.n_labels, m)) * (1.5 / np.sqrt(m))
        # negative offsets keep labels sparse, as in chest x-ray findings
        b_y = rng.uniform(-2.0, -0.5, size=spec.n_labels)
        a = rng.standard_normal(m)
        a /= np.linalg.norm(a)
        return cls(A, B, W_y, b_y, a)


@dataclass
class Sample:
    z_img: np.ndarray
    z_txt: np.ndarray | None
    labels: np.ndarray
    true_sigma: np.ndarray
    difficulty: float
    uid: int = -1


@dataclass
class ClientDataset:
    client_id: int
    modality: Modality
    samples: list[Sample] = field(default_factory=list)

    @property
    def n_k(self) -> int:
        return len(self.samples)

    def images(self) -> np.ndarray:
        return np.stack([s.z_img for s in self.samples])

    def texts(self) -> np.ndarray:
        if self.modality != "multimodal":
            raise ConfigError(f"client {self.client_id} holds no text features")
        return np.stack([s.z_txt for s in self.samples])

    def labels(self) -> np.ndarray:
        return np.stack([s.labels for s in self.samples])


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def generate(spec: GeneratorSpec, n: int, stream: int = 0, shift: float = 0.0,
             uid_offset: int = 0) -> list[Sample]:
    """Draw ``n`` samples. ``stream`` selects an independent RNG stream."""
    if n < 1:
        raise EmptyDatasetError(f"cannot generate {n} samples")
    mix = spec.matrices
    rng = np.random.default_rng([spec.seed, 0xDA7A, stream])
    m, d = spec.latent_dim, spec.d
    u = rng.standard_normal((n, m)) + shift * mix.a
    eps = rng.standard_normal((n, d))
    flip = rng.random((n, spec.n_labels))

    z_img = l2_normalize_array(u @ mix.A.T)
    difficulty = _sigmoid(spec.difficulty_gain * (u @ mix.a))
    s = spec.s_min + difficulty * (spec.s_max - spec.s_min)
    z_txt = l2_normalize_array(u @ mix.B.T + s[:, None] * eps)
    labels = (flip < _sigmoid(u @ mix.W_y.T + mix.b_y)).astype(np.int8)

    return [Sample(z_img[i], z_txt[i], labels[i], np.full(d, s[i]), float(difficulty[i]),
                   uid_offset + i)
            for i in range(n)]


def pseudo_class(sample: Sample) -> int:
    hits = np.flatnonzero(sample.labels)
    return int(hits[0]) if hits.size else len(sample.labels)


def dirichlet_partition(samples: list[Sample], K: int, alpha_dir: float,
                        seed: int) -> list[ClientDataset]:
    """Label-skewed split: per pseudo-class shares drawn from ``Dir(alpha_dir)``."""
    if K < 2:
        raise PartitionError(f"need at least 2 clients, got {K}")
    if alpha_dir <= 0:
        raise PartitionError(f"alpha_dir must be positive, got {alpha_dir}")
    if K > len(samples):
        raise PartitionError(f"cannot split {len(samples)} samples over {K} clients")
    rng = np.random.default_rng([seed, 0xD1C])
    n_classes = len(samples[0].labels) + 1
    props = rng.dirichlet(np.full(K, alpha_dir), size=n_classes)
    owner = np.empty(len(samples), dtype=np.int64)
    for i, s in enumerate(samples):
        owner[i] = rng.choice(K, p=props[pseudo_class(s)])

    # empty clients take one random sample from the current largest client
    for k in range(K):
        if not np.any(owner == k):
            counts = np.bincount(owner, minlength=K)
            donors = np.flatnonzero(owner == int(np.argmax(counts)))
            owner[rng.choice(donors)] = k

    return [ClientDataset(k, "multimodal", [samples[i] for i in np.flatnonzero(owner == k)])
            for k in range(K)]


def _strip_text(ds: ClientDataset) -> ClientDataset:
    stripped = [Sample(s.z_img, None, s.labels, s.true_sigma, s.difficulty, s.uid)
                for s in ds.samples]
    return ClientDataset(ds.client_id, "unimodal", stripped)


def choose_multimodal(K: int, n_unimodal: int, n_multimodal: int, seed: int) -> list[int]:
    """Client ids that keep text, picked from a seeded shuffle."""
    if n_unimodal + n_multimodal != K:
        raise ConfigError(f"ratio {n_unimodal}:{n_multimodal} does not sum to K={K}")
    if n_multimodal < 1:
        raise ConfigError("at least one multimodal client is required to train the imputer")
    if n_unimodal < 0:
        raise ConfigError("ratio entries must be non-negative")
    order = np.random.default_rng([seed, 0x40D]).permutation(K)
    return sorted(int(k) for k in order[:n_multimodal])


def assign_modalities(datasets: list[ClientDataset], n_unimodal: int, n_multimodal: int,
                      seed: int) -> list[ClientDataset]:
    chosen = set(choose_multimodal(len(datasets), n_unimodal, n_multimodal, seed))
    return [ClientDataset(ds.client_id, "multimodal", list(ds.samples))
            if ds.client_id in chosen else _strip_text(ds)
            for ds in datasets]


def sourced_partition(spec: GeneratorSpec, n_train: int, K: int, n_unimodal: int,
                      n_multimodal: int, alpha_dir: float, seed: int) -> list[ClientDataset]:
    """Modality groups drawn from distinct sources, each split by Dirichlet.

    Used when ``spec.unimodal_shift`` is non-zero: unimodal clients get samples
    from the shifted source, multimodal clients from the unshifted one.
    """
    mm_ids = choose_multimodal(K, n_unimodal, n_multimodal, seed)
    um_ids = [k for k in range(K) if k not in mm_ids]
    n_mm = max(len(mm_ids), round(n_train * n_multimodal / K))
    n_um = n_train - n_mm
    out: dict[int, ClientDataset] = {}
    for ids, n, shift, stream, mod in ((mm_ids, n_mm, 0.0, 11, "multimodal"),
                                       (um_ids, n_um, spec.unimodal_shift, 12, "unimodal")):
        if not ids:
            continue
        pool = generate(spec, n, stream=stream, shift=shift, uid_offset=stream * 10**7)
        if len(ids) == 1:
            parts = [ClientDataset(0, "multimodal", pool)]
        else:
            parts = dirichlet_partition(pool, len(ids), alpha_dir, seed + stream)
        for cid, part in zip(ids, parts):
            ds = ClientDataset(cid, "multimodal", part.samples)
            out[cid] = ds if mod == "multimodal" else _strip_text(ds)
    return [out[k] for k in range(K)]


# ---------------------------------------------------------------- JSON-lines

def export_jsonl(datasets: Iterable[ClientDataset], path: str | Path) -> None:
    with open(path, "w") as fh:
        for ds in datasets:
            for s in ds.samples:
                fh.write(json.dumps({
                    "client_id": ds.client_id,
                    "modality": ds.modality,
                    "uid": s.uid,
                    "z_img": s.z_img.tolist(),
                    "z_txt": None if s.z_txt is None else s.z_txt.tolist(),
                    "labels": s.labels.tolist(),
                    "true_sigma": s.true_sigma.tolist(),
                    "difficulty": s.difficulty,
                }) + "\n")


def import_jsonl(path: str | Path) -> list[ClientDataset]:
    by_client: dict[int, ClientDataset] = {}
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            cid = int(rec["client_id"])
            ds = by_client.setdefault(cid, ClientDataset(cid, rec["modality"]))
            if ds.modality != rec["modality"]:
                raise ConfigError(f"client {cid} mixes modality flags")
            z_txt = rec["z_txt"]
            ds.samples.append(Sample(
                np.asarray(rec["z_img"], dtype=np.float64),
                None if z_txt is None else np.asarray(z_txt, dtype=np.float64),
                np.asarray(rec["labels"], dtype=np.int8),
                np.asarray(rec["true_sigma"], dtype=np.float64),
                float(rec["difficulty"]), int(rec["uid"])))
    return [by_client[k] for k in sorted(by_client)]
