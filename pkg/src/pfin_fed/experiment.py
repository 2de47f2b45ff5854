"""Experiment configuration, single runs, sweeps and result tables."""
from __future__ import annotations

import hashlib
import itertools
import json
import logging
import shutil
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
import tomlkit

from . import pfin
from .federation import (FederationConfig, LocalTrainConfig, RoundRecord, evaluate,
                         run_federation, write_round_csv, write_summary_csv)
from .mathcore import ConfigError, ParamSet
from .metrics import calibration_report
from .pfin import PfinConfig
from .synthdata import (ClientDataset, GeneratorSpec, Sample, assign_modalities,
                        dirichlet_partition, generate, sourced_partition)

log = logging.getLogger(__name__)

METHODS = ("zero", "uniform", "fin_fedavg", "pfin_fedavg", "pfin_feduq")

# method -> (imputer, fill, strategy)
METHOD_TABLE = {
    "zero": ("none", "zero", "fedavg"),
    "uniform": ("none", "uniform", "fedavg"),
    "fin_fedavg": ("deterministic", "fin", "fedavg"),
    "pfin_fedavg": ("probabilistic", "pfin", "fedavg"),
    "pfin_feduq": ("probabilistic", "pfin", "fed_uq_avg"),
}


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    method: str = "pfin_feduq"
    K: int = 10
    ratio: str = "8:2"
    rounds: int = 20
    local_epochs: int = 4
    batch_size: int = 32
    lr: float = 1e-4
    alpha: float = 0.6
    T: float = 0.2
    beta: float = 0.5
    alpha_dir: float = 0.5
    # model
    d: int = 32
    n_layers: int = 2
    n_heads: int = 4
    fusion_heads: int = 1
    log_var_clamp: float = 10.0
    lambda_imp: float = 1.0
    # generator
    latent_dim: int = 16
    n_labels: int = 14
    s_min: float = 0.05
    s_max: float = 0.8
    difficulty_gain: float = 1.0
    unimodal_shift: float = 0.0
    data_seed: int = -1
    n_samples: int = 3000
    test_fraction: float = 0.2
    val_fraction: float = 0.1
    # federation options
    sigma_window: str = "post_pass"
    imputer_grad: str = "block"
    checkpoint_every: int = 0
    output_dir: str = "runs"

    def __post_init__(self):
        if self.method not in METHOD_TABLE:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        n_um, n_mm = self.ratio_counts
        if n_um + n_mm != self.K:
            raise ConfigError(f"ratio {self.ratio} does not sum to K={self.K}")
        if n_mm < 1:
            raise ConfigError("ratio leaves no multimodal client to train the imputer")
        if not 0 < self.test_fraction + self.val_fraction < 1:
            raise ConfigError("test_fraction + val_fraction must lie in (0, 1)")
        if self.rounds < 0 or self.K < 2:
            raise ConfigError("rounds must be >= 0 and K >= 2")

    @property
    def ratio_counts(self) -> tuple[int, int]:
        try:
            a, b = (int(x) for x in self.ratio.split(":"))
        except ValueError as exc:
            raise ConfigError(f"ratio must look like '8:2', got {self.ratio!r}") from exc
        if a < 0 or b < 0:
            raise ConfigError(f"ratio entries must be non-negative: {self.ratio}")
        return a, b

    @property
    def effective_data_seed(self) -> int:
        return self.seed if self.data_seed < 0 else self.data_seed

    def pfin_config(self) -> PfinConfig:
        return PfinConfig(d=self.d, n_labels=self.n_labels, n_layers=self.n_layers,
                          n_heads=self.n_heads, beta=self.beta, log_var_clamp=self.log_var_clamp,
                          fusion_heads=self.fusion_heads, lambda_imp=self.lambda_imp)

    def generator_spec(self) -> GeneratorSpec:
        return GeneratorSpec(d=self.d, latent_dim=self.latent_dim, n_labels=self.n_labels,
                             s_min=self.s_min, s_max=self.s_max, seed=self.effective_data_seed,
                             difficulty_gain=self.difficulty_gain,
                             unimodal_shift=self.unimodal_shift)

    def train_config(self) -> LocalTrainConfig:
        return LocalTrainConfig(epochs=self.local_epochs, batch_size=self.batch_size,
                                lr=self.lr, fill=METHOD_TABLE[self.method][1],
                                sigma_window=self.sigma_window, imputer_grad=self.imputer_grad)

    def federation_config(self, checkpoint_dir: str | None = None) -> FederationConfig:
        return FederationConfig(rounds=self.rounds, strategy=METHOD_TABLE[self.method][2],
                                alpha=self.alpha, T=self.T, seed=self.seed,
                                checkpoint_every=self.checkpoint_every,
                                checkpoint_dir=checkpoint_dir)

    @property
    def run_name(self) -> str:
        return f"{self.method}_r{self.ratio.replace(':', '-')}_s{self.seed}"


# ---------------------------------------------------------------- config I/O

_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _coerce(name: str, value: Any) -> Any:
    kind = _FIELD_TYPES[name]
    if kind == "int":
        if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
            raise ConfigError(f"{name} must be an integer, got {value!r}")
        return int(value)
    if kind == "float":
        return float(value)
    return str(value)


def config_from_mapping(data: dict[str, Any]) -> ExperimentConfig:
    unknown = set(data) - set(_FIELD_TYPES)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        return ExperimentConfig(**{k: _coerce(k, v) for k, v in data.items()})
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def dumps_config(cfg: ExperimentConfig) -> str:
    doc = tomlkit.document()
    for k, v in asdict(cfg).items():
        doc[k] = v
    return tomlkit.dumps(doc)


def loads_config(text: str) -> ExperimentConfig:
    return config_from_mapping(tomlkit.loads(text).unwrap())


def load_config(path: str | Path, overrides: Iterable[str] = ()) -> ExperimentConfig:
    data = tomlkit.loads(Path(path).read_text()).unwrap() if path else {}
    data.update(parse_overrides(overrides))
    return config_from_mapping(data)


def parse_overrides(items: Iterable[str]) -> dict[str, Any]:
    """``key=value`` strings parsed as TOML scalars, bare words kept as strings."""
    out: dict[str, Any] = {}
    for item in items:
        key, sep, raw = item.lstrip("-").partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not key=value")
        key = key.strip().replace("-", "_")
        try:
            out[key] = tomlkit.loads(f"v = {raw.strip()}").unwrap()["v"]
        except Exception:
            out[key] = raw.strip()
    return out


# ---------------------------------------------------------------- data

@dataclass
class FederationData:
    clients: list[ClientDataset]
    val: tuple[np.ndarray, np.ndarray, np.ndarray]
    test: tuple[np.ndarray, np.ndarray, np.ndarray]
    test_sigma: np.ndarray = field(default_factory=lambda: np.zeros(0))


def _stack(samples: Sequence[Sample]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return (np.stack([s.z_img for s in samples]), np.stack([s.labels for s in samples]),
            np.stack([s.z_txt for s in samples]))


def build_data(cfg: ExperimentConfig) -> FederationData:
    """Hold out test/validation splits, then partition the rest across clients."""
    spec = cfg.generator_spec()
    n_um, n_mm = cfg.ratio_counts
    n_test = int(round(cfg.n_samples * cfg.test_fraction))
    n_val = int(round(cfg.n_samples * cfg.val_fraction))
    n_train = cfg.n_samples - n_test - n_val
    dseed = cfg.effective_data_seed
    if spec.unimodal_shift == 0.0:
        pool = generate(spec, cfg.n_samples)
        perm = np.random.default_rng([dseed, 0x5E1]).permutation(cfg.n_samples)
        test = [pool[i] for i in perm[:n_test]]
        val = [pool[i] for i in perm[n_test:n_test + n_val]]
        train = [pool[i] for i in perm[n_test + n_val:]]
        clients = assign_modalities(dirichlet_partition(train, cfg.K, cfg.alpha_dir, dseed),
                                    n_um, n_mm, dseed)
    else:
        # held-out splits mix both sources in the client ratio
        def mixed(n: int, stream: int) -> list[Sample]:
            k_um = int(round(n * n_um / cfg.K))
            out = []
            if n - k_um > 0:
                out += generate(spec, n - k_um, stream=stream, uid_offset=stream * 10**7)
            if k_um > 0:
                out += generate(spec, k_um, stream=stream + 1, shift=spec.unimodal_shift,
                                uid_offset=(stream + 1) * 10**7)
            return out
        test, val = mixed(n_test, 21), mixed(n_val, 23)
        clients = sourced_partition(spec, n_train, cfg.K, n_um, n_mm, cfg.alpha_dir, dseed)
    return FederationData(clients, _stack(val), _stack(test),
                          np.stack([s.true_sigma for s in test]))


# ---------------------------------------------------------------- runs

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out_dir: Path) -> Path:
    files = sorted(p for p in out_dir.rglob("*") if p.is_file() and p.name != "manifest.json")
    entries = {str(p.relative_to(out_dir)): _sha256(p) for p in files}
    path = out_dir / "manifest.json"
    path.write_text(json.dumps({"files": entries}, indent=1, sort_keys=True) + "\n")
    return path


def verify_manifest(out_dir: str | Path) -> list[str]:
    """Files whose current hash differs from the manifest (or are missing)."""
    out_dir = Path(out_dir)
    entries = json.loads((out_dir / "manifest.json").read_text())["files"]
    bad = []
    for rel, digest in entries.items():
        p = out_dir / rel
        if not p.exists() or _sha256(p) != digest:
            bad.append(rel)
    return bad


@dataclass
class RunResult:
    config: ExperimentConfig
    summary: dict[str, Any]
    records: list[RoundRecord]
    theta: ParamSet
    out_dir: Path | None
    # files whose hash changed against a previous run of the same config; None if no prior run
    rerun_mismatches: list[str] | None = None


def _previous_manifest(out: Path, cfg: ExperimentConfig) -> dict[str, str] | None:
    """Old manifest entries, kept only when the directory holds a run of the same config.

    Files listed in any old manifest are removed so stale artifacts never leak
    into the new one.
    """
    mpath = out / "manifest.json"
    if not mpath.exists():
        return None
    entries = json.loads(mpath.read_text())["files"]
    cpath = out / "config.toml"
    same = cpath.exists() and cpath.read_text() == dumps_config(cfg)
    for rel in entries:
        (out / rel).unlink(missing_ok=True)
    mpath.unlink()
    return entries if same else None


def _summary(cfg: ExperimentConfig, records: list[RoundRecord], theta: ParamSet,
             data: FederationData, fill: str, global_mean) -> dict[str, Any]:
    pc = cfg.pfin_config()
    zi, y, zt = data.test
    summary: dict[str, Any] = {
        "method": cfg.method,
        "ratio": cfg.ratio,
        "seed": cfg.seed,
        "test_auc": evaluate(theta, pc, zi, y, fill, global_mean),
        "test_auc_multimodal": evaluate(theta, pc, zi, y, fill, global_mean, z_txt=zt),
        "rounds": len(records),
        "checkpoint_sha256": theta.digest(),
        "config": asdict(cfg),
    }
    if records:
        summary["val_auc_final"] = records[-1].val_auc
        summary["sigma_unimodal_first"] = records[0].mean_sigma("unimodal")
        summary["sigma_unimodal_last"] = records[-1].mean_sigma("unimodal")
        summary["sigma_multimodal_last"] = records[-1].mean_sigma("multimodal")
    return summary


def global_mean_for(cfg: ExperimentConfig, clients: Sequence[ClientDataset]):
    if METHOD_TABLE[cfg.method][1] != "uniform":
        return None
    return pfin.global_mean_embedding([c.texts() for c in clients if c.modality == "multimodal"])


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None,
                   client_order: Sequence[int] | None = None) -> RunResult:
    """Build data, run the federation, evaluate and (optionally) write artifacts."""
    out = Path(out_dir) if out_dir is not None else None
    created = False
    previous = None
    if out is not None:
        created = not out.exists()
        out.mkdir(parents=True, exist_ok=True)
        previous = _previous_manifest(out, cfg)
    try:
        pc = cfg.pfin_config()
        imputer, fill, _ = METHOD_TABLE[cfg.method]
        data = build_data(cfg)
        theta0 = pfin.init_params(pc, cfg.seed, imputer)
        ckpt = str(out / "checkpoints") if out is not None and cfg.checkpoint_every else None
        res = run_federation(data.clients, theta0, pc, cfg.train_config(),
                             cfg.federation_config(ckpt), val=data.val[:2],
                             client_order=client_order)
        gmean = global_mean_for(cfg, data.clients)
        summary = _summary(cfg, res.records, res.theta, data, fill, gmean)
        if imputer == "probabilistic":
            mu, var = pfin.impute(res.theta, pc, data.test[0])
            _, _, cal = calibration_report(
                mu, var, data.test[2], out / "calibration" if out is not None else None,
                summary["test_auc"])
            summary["ece"] = cal.ece
            summary["decile_spearman"] = cal.spearman
        if out is not None:
            (out / "config.toml").write_text(dumps_config(cfg))
            write_round_csv(res.records, out / "rounds.csv")
            write_summary_csv(res.records, out / "round_summary.csv")
            res.theta.save(out / "final")
            (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
            write_manifest(out)
        mismatches = None
        if previous is not None:
            current = json.loads((out / "manifest.json").read_text())["files"]
            mismatches = sorted(k for k in set(previous) | set(current)
                                if previous.get(k) != current.get(k))
        return RunResult(cfg, summary, res.records, res.theta, out, mismatches)
    except BaseException:
        if out is not None and created:
            shutil.rmtree(out, ignore_errors=True)
        raise


# ---------------------------------------------------------------- matrix / tables

def expand_matrix(base: ExperimentConfig, methods: Sequence[str], ratios: Sequence[str],
                  seeds: Sequence[int]) -> list[ExperimentConfig]:
    return [replace(base, method=m, ratio=r, seed=s)
            for r, m, s in itertools.product(ratios, methods, seeds)]


def load_sweep(path: str | Path, overrides: Iterable[str] = ()) -> list[ExperimentConfig]:
    """Sweep file: flat keys for the base config plus list-valued ``methods``,
    ``ratios`` and ``seeds``."""
    data = tomlkit.loads(Path(path).read_text()).unwrap()
    data.update(parse_overrides(overrides))
    methods = data.pop("methods", [data.get("method", "pfin_feduq")])
    ratios = data.pop("ratios", [data.get("ratio", "8:2")])
    seeds = data.pop("seeds", [data.get("seed", 0)])
    if not (methods and ratios and seeds):
        raise ConfigError("methods, ratios and seeds must be non-empty")
    # validate the base against the first cell so K and ratio agree
    base = config_from_mapping({**data, "method": methods[0], "ratio": ratios[0], "seed": seeds[0]})
    return expand_matrix(base, list(methods), list(ratios), [int(s) for s in seeds])


@dataclass
class TableRow:
    method: str
    ratio: str
    mean_auc: float
    std_auc: float | None
    n_seeds: int


def result_table(summaries: Iterable[dict[str, Any]]) -> list[TableRow]:
    """Mean and sample std of test AUC per (method, ratio); std needs >= 2 seeds."""
    groups: dict[tuple[str, str], list[float]] = {}
    for s in summaries:
        groups.setdefault((s["method"], s["ratio"]), []).append(float(s["test_auc"]))
    rows = []
    for (m, r), vals in sorted(groups.items(), key=lambda kv: (kv[0][1], _method_rank(kv[0][0]))):
        arr = np.asarray(vals)
        std = float(arr.std(ddof=1)) if arr.size >= 2 else None
        rows.append(TableRow(m, r, float(arr.mean()), std, int(arr.size)))
    return rows


def _method_rank(m: str) -> int:
    return METHODS.index(m) if m in METHODS else len(METHODS)


GAP_PAIRS = (("pfin_feduq", "pfin_fedavg"), ("pfin_fedavg", "fin_fedavg"),
             ("pfin_feduq", "fin_fedavg"), ("fin_fedavg", "zero"), ("fin_fedavg", "uniform"))


def compare(table: Sequence[TableRow]) -> dict[str, Any]:
    """Per ratio: methods ranked by mean AUC (ties keep method order) and pairwise gaps."""
    report: dict[str, Any] = {}
    for ratio in sorted({r.ratio for r in table}):
        rows = {r.method: r for r in table if r.ratio == ratio}
        ranking = sorted(rows.values(), key=lambda r: (-r.mean_auc, _method_rank(r.method)))
        ties = [[a.method, b.method] for a, b in zip(ranking, ranking[1:])
                if a.mean_auc == b.mean_auc]
        gaps = {}
        for a, b in GAP_PAIRS:
            key = f"{a}-{b}"
            gaps[key] = (rows[a].mean_auc - rows[b].mean_auc) if a in rows and b in rows else None
        report[ratio] = {
            "ranking": [r.method for r in ranking],
            "mean_auc": {r.method: r.mean_auc for r in ranking},
            "gaps": gaps,
            "ties": ties,
            "missing": [m for m in METHODS if m not in rows],
        }
    return report


def format_table(table: Sequence[TableRow]) -> str:
    ratios = sorted({r.ratio for r in table})
    methods = sorted({r.method for r in table}, key=_method_rank)
    cell = {(r.method, r.ratio): r for r in table}
    lines = ["method".ljust(14) + "".join(f"I:M={r}".rjust(18) for r in ratios)]
    for m in methods:
        parts = [m.ljust(14)]
        for r in ratios:
            row = cell.get((m, r))
            if row is None:
                parts.append("-".rjust(18))
            elif row.std_auc is None:
                parts.append(f"{100 * row.mean_auc:.2f}".rjust(18))
            else:
                parts.append(f"{100 * row.mean_auc:.2f} ± {100 * row.std_auc:.2f}".rjust(18))
        lines.append("".join(parts))
    return "\n".join(lines)
