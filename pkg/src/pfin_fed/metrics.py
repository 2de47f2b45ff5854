"""Multi-label AUC, interval calibration and uncertainty/error analyses."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import ndtri
from scipy.stats import rankdata

DEFAULT_LEVELS = tuple(round(0.1 * i, 1) for i in range(1, 10))


class UndefinedMetricError(ValueError):
    pass


class InsufficientDataError(ValueError):
    pass


@dataclass
class AUCResult:
    mean: float
    per_class: dict[int, float]
    skipped: list[int] = field(default_factory=list)


def binary_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney AUC with average ranks for ties."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    ranks = rankdata(scores, method="average")
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def mean_auc_report(scores: np.ndarray, labels: np.ndarray) -> AUCResult:
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if scores.ndim == 1:
        scores, labels = scores[:, None], labels[:, None]
    if scores.shape != labels.shape:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} differ")
    per_class, skipped = {}, []
    for c in range(scores.shape[1]):
        pos = int(labels[:, c].sum())
        if pos == 0 or pos == labels.shape[0]:
            skipped.append(c)
            continue
        per_class[c] = binary_auc(scores[:, c], labels[:, c])
    if not per_class:
        raise UndefinedMetricError("no class has both positive and negative examples")
    return AUCResult(float(np.mean(list(per_class.values()))), per_class, skipped)


def mean_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Average per-class AUC over the classes where it is defined."""
    return mean_auc_report(scores, labels).mean


@dataclass
class ReliabilityCurve:
    nominal_levels: list[float]
    observed_coverage: list[float]
    ece: float

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["level", "observed"])
            for p, o in zip(self.nominal_levels, self.observed_coverage):
                w.writerow([repr(p), repr(o)])


def reliability(mu: np.ndarray, var: np.ndarray, target: np.ndarray,
                levels: Sequence[float] = DEFAULT_LEVELS) -> ReliabilityCurve:
    """Coverage of central Gaussian intervals, pooled over (sample, dimension) pairs.

    The calibration error is the unweighted mean gap over ``levels``.
    """
    mu, var, target = (np.asarray(a, dtype=float) for a in (mu, var, target))
    if not (mu.shape == var.shape == target.shape):
        raise ValueError(f"shape mismatch: mu{mu.shape} var{var.shape} target{target.shape}")
    # |z - mu| / sigma; zero-width intervals only cover exact hits
    dev = np.abs(target - mu)
    sigma = np.sqrt(var)
    with np.errstate(divide="ignore", invalid="ignore"):
        zscore = np.where(sigma > 0, dev / np.where(sigma > 0, sigma, 1.0),
                          np.where(dev == 0, 0.0, np.inf)).ravel()
    observed = []
    for p in levels:
        half = ndtri((1.0 + p) / 2.0)
        observed.append(float(np.mean(zscore <= half)))
    gaps = np.abs(np.asarray(observed) - np.asarray(levels, dtype=float))
    return ReliabilityCurve(list(map(float, levels)), observed, float(gaps.mean()))


@dataclass
class DecileBin:
    mean_sigma: float
    mean_err: float
    count: int


@dataclass
class DecileReport:
    bins: list[DecileBin]

    @property
    def mean_sigma(self) -> list[float]:
        return [b.mean_sigma for b in self.bins]

    @property
    def mean_err(self) -> list[float]:
        return [b.mean_err for b in self.bins]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin", "mean_sigma", "mean_err", "count"])
            for i, b in enumerate(self.bins):
                w.writerow([i, repr(b.mean_sigma), repr(b.mean_err), b.count])


def decile_analysis(mu: np.ndarray, var: np.ndarray, target: np.ndarray,
                    n_bins: int = 10) -> DecileReport:
    """Bin samples by mean predicted variance; report per-bin mean squared error.

    ``mean_sigma`` is the bin's mean predicted variance (sigma squared).
    """
    mu, var, target = (np.asarray(a, dtype=float) for a in (mu, var, target))
    n = mu.shape[0]
    if n < n_bins:
        raise InsufficientDataError(f"need at least {n_bins} samples, got {n}")
    per_var = var.mean(axis=1)
    per_err = ((target - mu) ** 2).mean(axis=1)
    order = np.argsort(per_var, kind="stable")
    bins = []
    for chunk in np.array_split(order, n_bins):
        bins.append(DecileBin(float(per_var[chunk].mean()), float(per_err[chunk].mean()),
                              int(chunk.size)))
    return DecileReport(bins)


def spearman(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Rank correlation with average ranks for ties.

    Raises :class:`UndefinedMetricError` when either input is constant.
    """
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValueError("spearman needs two equal-length sequences of length >= 2")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise UndefinedMetricError("spearman correlation is undefined for constant input")
    rx, ry = rankdata(x), rankdata(y)
    rx -= rx.mean()
    ry -= ry.mean()
    return float((rx @ ry) / np.sqrt((rx @ rx) * (ry @ ry)))


@dataclass
class CalibrationSummary:
    ece: float
    spearman: float | None
    mean_auc: float | None = None

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")


def calibration_report(mu: np.ndarray, var: np.ndarray, target: np.ndarray,
                       out_dir: str | Path | None = None,
                       mean_auc_value: float | None = None
                       ) -> tuple[ReliabilityCurve, DecileReport, CalibrationSummary]:
    curve = reliability(mu, var, target)
    dec = decile_analysis(mu, var, target)
    try:
        rho = spearman(dec.mean_sigma, dec.mean_err)
    except UndefinedMetricError:
        rho = None
    summary = CalibrationSummary(curve.ece, rho, mean_auc_value)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        curve.to_csv(out / "reliability.csv")
        dec.to_csv(out / "deciles.csv")
        summary.to_json(out / "calibration.json")
    return curve, dec, summary
