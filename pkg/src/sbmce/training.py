"""Denoising score matching: epochs, validation loss, restarts and model selection."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .channel import ChannelDataset
from .errors import DomainError, ParameterError
from .numerics import complex_to_real, draw_circular_gaussian, make_rng
from .schedule import NoiseSchedule
from .scorenet import (
    OptimizerState,
    ScoreModel,
    ScoreNetConfig,
    init_model,
    noise_loss,
    noise_loss_and_grad,
    optimizer_step,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    max_epochs: int = 200
    lr: float = 2e-3
    lr_decay_factor: float = 0.5
    lr_patience: int = 3
    min_lr: float = 1e-5
    weight_decay: float = 1e-4
    patience: int = 10
    n_restarts: int = 5
    seed: int = 0
    val_seed: int = 12345
    max_minutes: float | None = None

    def __post_init__(self):
        for name in ("batch_size", "max_epochs", "patience", "n_restarts", "lr_patience"):
            if getattr(self, name) < 1:
                raise ParameterError(f"{name} must be >= 1")
        if not self.lr > 0:
            raise ParameterError("lr must be > 0")
        if not 0 < self.lr_decay_factor <= 1:
            raise ParameterError("lr_decay_factor must lie in (0, 1]")


@dataclass
class TrainReport:
    """Per-epoch losses of all restarts and the selected restart (1-based)."""

    rows: list[tuple[int, int, float, float]] = field(default_factory=list)
    selected_restart: int = 0
    best_val_losses: list[float] = field(default_factory=list)
    wall_time: float = 0.0

    def train_losses(self, restart: int) -> list[float]:
        return [r[2] for r in self.rows if r[0] == restart]

    def val_losses(self, restart: int) -> list[float]:
        return [r[3] for r in self.rows if r[0] == restart]

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_loss", "restart"])
            for restart, epoch, tl, vl in self.rows:
                w.writerow([epoch, repr(tl), repr(vl), restart])


def _require_beamspace(ds: ChannelDataset) -> None:
    if ds.domain_tag != "beamspace":
        raise DomainError(
            f"score training needs beamspace data, got a {ds.domain_tag!r} dataset"
        )


def draw_training_triples(
    h0: np.ndarray, sched: NoiseSchedule, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Noise levels, noise, perturbed samples and surrogate scores for a batch.

    ``k ~ U{1..K}``, ``z ~ CN(0, I)``, ``h_k = h0 + sigma_k z`` and
    ``s = -z / sigma_k``.
    """
    B = h0.shape[0]
    k = rng.integers(1, sched.K + 1, size=B)
    sigma = sched.sigmas[k - 1]
    z = draw_circular_gaussian(h0.shape, 1.0, rng)
    h_k = h0 + sigma[:, None] * z
    s = -z / sigma[:, None]
    return k, z, h_k, s


def _real_batch(model: ScoreModel, h0, sched, rng):
    cfg = model.cfg
    k, z, h_k, s = draw_training_triples(h0, sched, rng)
    sigma = sched.sigmas[k - 1]
    if __debug__:
        assert np.array_equal(s, -z / sigma[:, None])
    # training target is the noise itself: eps = -sigma * s = z
    return (
        complex_to_real(h_k, cfg.n_rx, cfg.n_tx),
        k,
        sigma,
        complex_to_real(z, cfg.n_rx, cfg.n_tx),
    )


def dsm_epoch(
    model: ScoreModel,
    train_ds: ChannelDataset,
    sched: NoiseSchedule,
    opt: OptimizerState,
    rng: np.random.Generator,
    batch_size: int = 128,
) -> tuple[ScoreModel, OptimizerState, float]:
    """One shuffled pass over the training data; returns the mean batch loss."""
    _require_beamspace(train_ds)
    if model.cfg.K != sched.K:
        raise ParameterError(f"model expects K={model.cfg.K}, schedule has K={sched.K}")
    M = len(train_ds)
    order = rng.permutation(M)
    total = 0.0
    for start in range(0, M, batch_size):
        idx = order[start : start + batch_size]
        x, k, sigma, eps = _real_batch(model, train_ds.samples[idx], sched, rng)
        loss, grads = noise_loss_and_grad(model, x, k, sigma, eps)
        optimizer_step(model, grads, opt)
        total += loss * len(idx)
    return model, opt, total / M


def val_loss(
    model: ScoreModel,
    val_ds: ChannelDataset,
    sched: NoiseSchedule,
    rng: np.random.Generator | int,
    batch_size: int = 512,
) -> float:
    """Held-out DSM loss.

    Pass an integer seed to draw the same noise levels and noise on every
    call, so losses are comparable across epochs.
    """
    _require_beamspace(val_ds)
    if not isinstance(rng, np.random.Generator):
        rng = make_rng(rng)
    M = len(val_ds)
    total = 0.0
    for start in range(0, M, batch_size):
        h0 = val_ds.samples[start : start + batch_size]
        x, k, sigma, eps = _real_batch(model, h0, sched, rng)
        total += noise_loss(model, x, k, sigma, eps) * h0.shape[0]
    return total / M


def select_best(val_losses: list[float]) -> int:
    """1-based index of the smallest validation loss."""
    if not val_losses:
        raise ParameterError("no validation losses to select from")
    return int(np.argmin(val_losses)) + 1


class EarlyStopping:
    """Stops after ``patience`` epochs without a new best validation loss."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.bad_epochs = 0

    def update(self, loss: float) -> bool:
        """Record ``loss``; return True if it is a new best."""
        if loss < self.best:
            self.best = loss
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


class PlateauHalving:
    """Multiply the learning rate by ``factor`` after ``patience`` stale epochs."""

    def __init__(self, factor: float, patience: int, min_lr: float):
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.best = np.inf
        self.stale = 0

    def step(self, loss: float, opt: OptimizerState) -> None:
        if loss < self.best:
            self.best = loss
            self.stale = 0
            return
        self.stale += 1
        if self.stale >= self.patience:
            opt.lr = max(opt.lr * self.factor, self.min_lr)
            self.stale = 0


def train_single(
    model: ScoreModel,
    train_ds: ChannelDataset,
    val_ds: ChannelDataset,
    sched: NoiseSchedule,
    cfg: TrainConfig,
    rng: np.random.Generator,
    restart: int = 1,
    report: TrainReport | None = None,
    deadline: float | None = None,
) -> tuple[ScoreModel, float]:
    """Train one model with early stopping; returns the best-val-loss weights."""
    opt = OptimizerState.for_model(model, lr=cfg.lr, weight_decay=cfg.weight_decay)
    stopper = EarlyStopping(cfg.patience)
    plateau = PlateauHalving(cfg.lr_decay_factor, cfg.lr_patience, cfg.min_lr)
    best = model.copy()
    for epoch in range(1, cfg.max_epochs + 1):
        model, opt, tl = dsm_epoch(model, train_ds, sched, opt, rng, cfg.batch_size)
        vl = val_loss(model, val_ds, sched, cfg.val_seed)
        if report is not None:
            report.rows.append((restart, epoch, tl, vl))
        logger.info("restart %d epoch %d: train %.5f val %.5f lr %.2e", restart, epoch, tl, vl, opt.lr)
        if stopper.update(vl):
            best = model.copy()
        plateau.step(vl, opt)
        if stopper.should_stop:
            break
        if deadline is not None and time.monotonic() > deadline:
            logger.warning("time budget exhausted after epoch %d", epoch)
            break
    return best, stopper.best


def train(
    train_ds: ChannelDataset,
    val_ds: ChannelDataset,
    sched: NoiseSchedule,
    cfg: TrainConfig,
    net_cfg: ScoreNetConfig | None = None,
) -> tuple[ScoreModel, TrainReport]:
    """Train ``cfg.n_restarts`` randomly initialized models; keep the best by val loss."""
    _require_beamspace(train_ds)
    _require_beamspace(val_ds)
    if net_cfg is None:
        net_cfg = ScoreNetConfig(n_rx=train_ds.n_rx, n_tx=train_ds.n_tx, K=sched.K)
    t0 = time.monotonic()
    report = TrainReport()
    streams = make_rng(cfg.seed).spawn(cfg.n_restarts)
    models = []
    budget = None if cfg.max_minutes is None else cfg.max_minutes * 60.0 / cfg.n_restarts
    for r, rng in enumerate(streams, start=1):
        deadline = None if budget is None else time.monotonic() + budget
        model = init_model(net_cfg, rng)
        best, best_val = train_single(
            model, train_ds, val_ds, sched, cfg, rng, restart=r, report=report, deadline=deadline
        )
        models.append(best)
        report.best_val_losses.append(best_val)
    report.selected_restart = select_best(report.best_val_losses)
    report.wall_time = time.monotonic() - t0
    return models[report.selected_restart - 1], report
