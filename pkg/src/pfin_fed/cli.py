"""Command-line entry point: ``pfin-fed run | matrix | compare | calibrate | selftest``.

Config keys can be overridden on any experiment command with ``--key=value``
(or ``key=value``) after the named options.
"""
from __future__ import annotations

import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import click
import numpy as np

from . import experiment as ex
from . import pfin
from .mathcore import ConfigError, ParamSet
from .metrics import calibration_report
from .selftest import run_all
from .synthdata import generate

EXTRA = dict(ignore_unknown_options=True)


class DeterminismError(RuntimeError):
    """A re-run of an identical config produced different files."""


def _fail(exc: BaseException) -> None:
    click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
    sys.exit(2 if isinstance(exc, ConfigError) else 1)


def _split(args: tuple[str, ...], max_paths: int) -> tuple[list[str], list[str]]:
    """Separate file arguments from ``--key=value`` / ``key=value`` overrides."""
    paths = [a for a in args if not a.startswith("-") and "=" not in a]
    overrides = [a for a in args if a not in paths]
    if len(paths) > max_paths:
        raise click.UsageError(f"unexpected arguments: {' '.join(paths[max_paths:])}")
    for p in paths:
        if not Path(p).is_file():
            raise click.UsageError(f"no such file: {p}")
    return paths, overrides


def _config(path: str | None, overrides) -> ex.ExperimentConfig:
    if path is None:
        return ex.config_from_mapping(ex.parse_overrides(overrides))
    return ex.load_config(path, overrides)


def _run_one(cfg: ex.ExperimentConfig, out: Path) -> dict:
    res = ex.run_experiment(cfg, out)
    if res.rerun_mismatches:
        raise DeterminismError(f"{out}: re-run differs in {', '.join(res.rerun_mismatches)}")
    return res.summary


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log progress to stderr.")
def main(verbose: bool) -> None:
    """Federated multimodal training with probabilistic feature imputation."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")


@main.command(context_settings=EXTRA)
@click.argument("args", nargs=-1, type=click.UNPROCESSED)
@click.option("--out", type=click.Path(file_okay=False), help="Output directory.")
def run(args: tuple[str, ...], out: str | None) -> None:
    """Run one experiment: [CONFIG.toml] [--key=value ...]."""
    paths, overrides = _split(args, 1)
    try:
        cfg = _config(paths[0] if paths else None, overrides)
        target = Path(out) if out else Path(cfg.output_dir) / cfg.run_name
        summary = _run_one(cfg, target)
    except Exception as exc:  # noqa: BLE001 - reported with its class name
        _fail(exc)
    click.echo(f"{cfg.method} ratio={cfg.ratio} seed={cfg.seed} "
               f"test_auc={summary['test_auc']:.4f} -> {target}")


@main.command(context_settings=EXTRA)
@click.argument("args", nargs=-1, type=click.UNPROCESSED)
@click.option("--out", type=click.Path(file_okay=False), help="Root directory for all runs.")
@click.option("--jobs", default=1, show_default=True, help="Concurrent experiments.")
def matrix(args: tuple[str, ...], out: str | None, jobs: int) -> None:
    """Run every (method, ratio, seed) of SWEEP.toml [--key=value ...] and tabulate test AUC."""
    paths, overrides = _split(args, 1)
    if not paths:
        raise click.UsageError("missing sweep file")
    try:
        configs = ex.load_sweep(paths[0], overrides)
        root = Path(out) if out else Path(configs[0].output_dir)
        targets = [root / c.run_name for c in configs]
        if jobs > 1:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                summaries = list(pool.map(_run_one, configs, targets))
        else:
            summaries = []
            for c, t in zip(configs, targets):
                summaries.append(_run_one(c, t))
                click.echo(f"  {c.run_name}: test_auc={summaries[-1]['test_auc']:.4f}", err=True)
        table = ex.result_table(summaries)
        _write_table(table, root / "table.csv")
        (root / "compare.json").write_text(json.dumps(ex.compare(table), indent=2) + "\n")
    except Exception as exc:  # noqa: BLE001
        _fail(exc)
    click.echo(ex.format_table(table))


def _write_table(table, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "ratio", "mean_auc", "std_auc", "n_seeds"])
        for r in table:
            w.writerow([r.method, r.ratio, repr(r.mean_auc),
                        "" if r.std_auc is None else repr(r.std_auc), r.n_seeds])


@main.command()
@click.argument("paths", nargs=-1, required=True, type=click.Path(exists=True))
@click.option("--json", "json_out", type=click.Path(dir_okay=False),
              help="Also write the ordering report here.")
def compare(paths: tuple[str, ...], json_out: str | None) -> None:
    """Rank methods from summary.json files (or directories containing them)."""
    try:
        files: list[Path] = []
        for p in map(Path, paths):
            files += sorted(p.rglob("summary.json")) if p.is_dir() else [p]
        if not files:
            raise ConfigError("no summary.json found under the given paths")
        table = ex.result_table(json.loads(f.read_text()) for f in files)
        report = ex.compare(table)
    except Exception as exc:  # noqa: BLE001
        _fail(exc)
    click.echo(ex.format_table(table))
    for ratio, rep in report.items():
        click.echo(f"\nI:M={ratio}  ranking: {' > '.join(rep['ranking'])}")
        for pair, gap in rep["gaps"].items():
            click.echo(f"  {pair}: " + ("unavailable" if gap is None else f"{100 * gap:+.2f} AUC points"))
        if rep["ties"]:
            click.echo(f"  ties: {rep['ties']}")
        if rep["missing"]:
            click.echo(f"  missing: {', '.join(rep['missing'])}")
    if json_out:
        Path(json_out).write_text(json.dumps(report, indent=2) + "\n")


@main.command(context_settings=EXTRA)
@click.argument("checkpoint", type=click.Path())
@click.argument("overrides", nargs=-1, type=click.UNPROCESSED)
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              help="Experiment config; defaults to config.toml next to the checkpoint.")
@click.option("--samples", default=2000, show_default=True, help="Fresh held-out samples.")
@click.option("--out", type=click.Path(file_okay=False), help="Directory for the report files.")
def calibrate(checkpoint: str, overrides: tuple[str, ...], config_path: str | None, samples: int,
              out: str | None) -> None:
    """Reliability curve and uncertainty deciles for a saved imputer (CHECKPOINT prefix)."""
    try:
        ckpt = Path(checkpoint)
        sibling = ckpt.parent / "config.toml"
        if config_path is None and sibling.exists():
            config_path = str(sibling)
        cfg = _config(config_path, overrides)
        theta = ParamSet.load(ckpt)
        if pfin.imputer_kind(theta) != "probabilistic":
            raise ConfigError("checkpoint has no variance head to calibrate")
        # a stream the training pipeline never draws from
        data = generate(cfg.generator_spec(), samples, stream=0xCA1, uid_offset=9 * 10**8)
        z_img = np.stack([s.z_img for s in data])
        z_txt = np.stack([s.z_txt for s in data])
        mu, var = pfin.impute(theta, cfg.pfin_config(), z_img)
        target = Path(out) if out else ckpt.parent / "calibration_fresh"
        target.mkdir(parents=True, exist_ok=True)
        curve, _, summary = calibration_report(mu, var, z_txt, target)
    except Exception as exc:  # noqa: BLE001
        _fail(exc)
    for p, o in zip(curve.nominal_levels, curve.observed_coverage):
        click.echo(f"  nominal {p:.1f}  observed {o:.3f}")
    rho = "undefined" if summary.spearman is None else f"{summary.spearman:.3f}"
    click.echo(f"ECE={summary.ece:.4f}  decile Spearman={rho}  -> {target}")


@main.command()
@click.option("--points", default=20, show_default=True, help="Random points per gradient check.")
def selftest(points: int) -> None:
    """Finite-difference gradients plus loss, gate and weight fixtures."""
    checks = run_all(points)
    for c in checks:
        click.echo(f"{'PASS' if c.passed else 'FAIL'}  {c.name:<28} {c.detail}")
    failed = [c.name for c in checks if not c.passed]
    if failed:
        click.echo(f"error: SelfTestError: {len(failed)} check(s) failed", err=True)
        sys.exit(1)
    click.echo(f"all {len(checks)} checks passed")


if __name__ == "__main__":
    main()
