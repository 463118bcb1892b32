"""NMSE sweeps over SNR, step statistics, per-step traces and CSV output."""

from __future__ import annotations

import csv
import logging
import math
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .channel import ChannelDataset
from .errors import DimensionError, ParameterError
from .estimators import (
    EstimateResult,
    GmmPrior,
    PilotObservation,
    gmm_estimate,
    ls_estimate,
    make_pilot,
    sample_covariance,
    sbm_estimate,
    scov_lmmse,
)
from .numerics import derived_rng, inverse_beamspace, unvec, vec
from .schedule import NoiseSchedule, initial_step, skip_indices

logger = logging.getLogger(__name__)

CSV_HEADER = ["snr_db", "estimator", "nmse", "mean_k_hat", "mean_steps", "mean_nfe", "wall_time_s"]
KINDS = ("ls", "scov", "gmm", "sbm")


def default_snr_grid() -> list[float]:
    return [float(x) for x in np.arange(-15.0, 20.0 + 1e-9, 2.5)]


@dataclass(frozen=True)
class EstimatorSpec:
    """One estimator row family of a sweep.

    ``kind`` is ``ls``, ``scov``, ``gmm`` or ``sbm``.  ``resource`` names the
    GMM prior or score model to use; ``delta`` is the step stride for ``sbm``
    (``None`` means the single-step case ``delta = K``).
    """

    name: str
    kind: str
    resource: str = "default"
    delta: int | None = 1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown estimator kind {self.kind!r}")
        if self.delta is not None and self.delta < 1:
            raise ParameterError("delta must be >= 1")


@dataclass(frozen=True)
class SweepConfig:
    snr_grid_db: tuple[float, ...] = field(default_factory=lambda: tuple(default_snr_grid()))
    estimators: tuple[EstimatorSpec, ...] = (EstimatorSpec("LS", "ls"),)
    m_test: int = 1000
    seed: int = 0
    pilot: str = "dft"
    measure_time: bool = False
    timing_repeats: int = 3

    def __post_init__(self):
        if len(self.snr_grid_db) == 0:
            raise ParameterError("the SNR grid must not be empty")
        if self.m_test < 1:
            raise ParameterError("m_test must be >= 1")
        if not self.estimators:
            raise ParameterError("no estimators configured")
        names = [e.name for e in self.estimators]
        if len(set(names)) != len(names):
            raise ParameterError("estimator names must be unique")


@dataclass
class Resources:
    """Everything fitted or trained that a sweep may need."""

    covariance: np.ndarray | None = None
    priors: dict[str, GmmPrior] = field(default_factory=dict)
    models: dict[str, tuple[object, NoiseSchedule]] = field(default_factory=dict)


@dataclass(frozen=True)
class EvalRow:
    snr_db: float
    estimator: str
    nmse: float
    mean_k_hat: float
    mean_steps: float
    mean_nfe: float
    wall_time_s: float


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)

    def sorted_rows(self) -> list[EvalRow]:
        return sorted(self.rows, key=lambda r: (r.estimator, r.snr_db))

    def series(self, estimator: str, column: str = "nmse") -> dict[float, float]:
        return {r.snr_db: getattr(r, column) for r in self.rows if r.estimator == estimator}


def nmse(truth: np.ndarray, est: np.ndarray) -> float:
    """``sum_m ||h_m - h_hat_m||^2 / (n_rx * n_tx * M)`` for stacked vectors."""
    truth = np.atleast_2d(np.asarray(truth))
    est = np.atleast_2d(np.asarray(est))
    if truth.shape != est.shape:
        raise DimensionError(f"shape mismatch: truth {truth.shape} vs estimate {est.shape}")
    return float(np.sum(np.abs(truth - est) ** 2) / truth.size)


def draw_observations(
    test: np.ndarray,
    pilot: np.ndarray,
    eta_sq: float,
    seed: int,
    snr_index: int,
    n_rx: int,
    n_tx: int,
) -> PilotObservation:
    """Noisy observations of every test channel at one noise level.

    Sample ``m`` draws its noise from a generator keyed by
    ``(seed, snr_index, m)``, so every estimator sees identical observations.
    """
    n = test.shape[1]
    noise = np.empty_like(test)
    std = math.sqrt(eta_sq / 2.0)
    for m in range(test.shape[0]):
        rng = derived_rng(seed, snr_index, m)
        noise[m] = std * (rng.standard_normal(n) + 1j * rng.standard_normal(n))
    Y = unvec(test, n_rx, n_tx) @ pilot
    return PilotObservation(vec(Y) + noise, pilot, eta_sq, n_rx, n_tx)


def _runner(spec: EstimatorSpec, res: Resources) -> Callable[[PilotObservation], EstimateResult]:
    if spec.kind == "ls":
        return ls_estimate
    if spec.kind == "scov":
        if res.covariance is None:
            raise ParameterError(f"estimator {spec.name!r} needs a sample covariance")
        C = res.covariance
        return lambda obs: scov_lmmse(obs, C)
    if spec.kind == "gmm":
        if spec.resource not in res.priors:
            raise ParameterError(f"estimator {spec.name!r} needs GMM prior {spec.resource!r}")
        prior = res.priors[spec.resource]
        return lambda obs: gmm_estimate(obs, prior)
    if spec.resource not in res.models:
        raise ParameterError(f"estimator {spec.name!r} needs score model {spec.resource!r}")
    model, sched = res.models[spec.resource]
    delta = sched.K if spec.delta is None else min(spec.delta, sched.K)
    return lambda obs: sbm_estimate(obs, model, sched, delta)


def run_sweep(cfg: SweepConfig, test_ds: ChannelDataset, res: Resources | None = None) -> EvalReport:
    """NMSE and step statistics of every configured estimator at every SNR."""
    if test_ds.domain_tag != "spatial":
        raise ParameterError("the test set must be in the spatial domain")
    res = res or Resources()
    runners = {spec.name: _runner(spec, res) for spec in cfg.estimators}
    n_rx, n_tx = test_ds.n_rx, test_ds.n_tx
    truth = test_ds.samples[: cfg.m_test]
    pilot = make_pilot(n_tx, cfg.pilot)
    report = EvalReport()
    for i, snr_db in enumerate(cfg.snr_grid_db):
        eta_sq = 10.0 ** (-snr_db / 10.0)
        obs = draw_observations(truth, pilot, eta_sq, cfg.seed, i, n_rx, n_tx)
        for spec in cfg.estimators:
            run = runners[spec.name]
            result = run(obs)
            wall = 0.0
            if cfg.measure_time:
                times = []
                for _ in range(cfg.timing_repeats):
                    t0 = time.perf_counter()
                    run(obs)
                    times.append(time.perf_counter() - t0)
                wall = statistics.median(times) / truth.shape[0]
            row = EvalRow(
                snr_db=float(snr_db),
                estimator=spec.name,
                nmse=nmse(truth, result.h_hat),
                mean_k_hat=float(result.k_hat),
                mean_steps=float(result.steps),
                mean_nfe=float(result.nfe),
                wall_time_s=wall,
            )
            logger.info("%6.2f dB %-16s nmse %.5f steps %d", snr_db, spec.name, row.nmse, result.steps)
            report.rows.append(row)
    return report


def step_counts(snr_grid_db, sched: NoiseSchedule, delta: int = 1) -> list[tuple[float, int, int]]:
    """``(snr_db, k_hat, executed steps)`` over a grid; no model needed."""
    out = []
    for snr_db in snr_grid_db:
        k_hat = initial_step(10.0 ** (-snr_db / 10.0), sched)
        out.append((float(snr_db), k_hat, len(skip_indices(k_hat, delta))))
    return out


def per_step_trace(
    obs: PilotObservation, truth: np.ndarray, model, sched: NoiseSchedule
) -> list[tuple[int, float]]:
    """NMSE of the intermediate estimates along the ``delta = 1`` trajectory.

    Entry ``(k, nmse)`` is the estimate at noise level ``k``: the first entry
    (``k = k_hat``) is the decorrelated observation itself and the last
    (``k = 0``) is the final estimate.
    """
    n_rx, n_tx = obs.n_rx, obs.n_tx
    k_hat = initial_step(obs.eta_sq, sched)
    trace = [(k_hat, nmse(truth, obs.decorrelated()))]

    def record(k_next, h_beam):
        trace.append((k_next, nmse(truth, inverse_beamspace(h_beam, n_rx, n_tx))))

    sbm_estimate(obs, model, sched, 1, callback=record)
    return trace


def _fmt(x: float) -> str:
    return repr(float(x))


def emit_csv(report: EvalReport, path: str | Path) -> None:
    """Write rows sorted by ``(estimator, snr_db)`` under the fixed header."""
    with open(path, "w", newline="", encoding="ascii") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for r in report.sorted_rows():
            w.writerow(
                [
                    _fmt(r.snr_db),
                    r.estimator,
                    _fmt(r.nmse),
                    _fmt(r.mean_k_hat),
                    _fmt(r.mean_steps),
                    _fmt(r.mean_nfe),
                    _fmt(r.wall_time_s),
                ]
            )


def read_csv(path: str | Path) -> EvalReport:
    with open(path, newline="", encoding="ascii") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != CSV_HEADER:
        raise ParameterError(f"{path}: unexpected CSV header")
    report = EvalReport()
    for r in rows[1:]:
        report.rows.append(
            EvalRow(float(r[0]), r[1], float(r[2]), float(r[3]), float(r[4]), float(r[5]), float(r[6]))
        )
    return report


def plot_report(report: EvalReport, path: str | Path) -> None:
    """NMSE-vs-SNR line plot (log scale), one line per estimator."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for name in sorted({r.estimator for r in report.rows}):
        pts = sorted(report.series(name).items())
        ax.semilogy([p[0] for p in pts], [p[1] for p in pts], marker="o", label=name)
    ax.set_xlabel("SNR [dB]")
    ax.set_ylabel("NMSE")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def covariance_resource(train_ds: ChannelDataset) -> np.ndarray:
    return sample_covariance(train_ds.to_spatial())
