"""Discretized variance-exploding noise schedule and step bookkeeping.

Step indices are 1-based (``k = 1..K``) with ``sigma(0) := 0`` reserved for
the final denoising update.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError


def db_to_linear(x_db: float) -> float:
    return 10.0 ** (x_db / 10.0)


def sigma_from_snr_db(snr_db: float) -> float:
    """Noise std whose variance equals ``1 / SNR``."""
    return math.sqrt(1.0 / db_to_linear(snr_db))


@dataclass(frozen=True)
class NoiseSchedule:
    """Strictly increasing noise levels ``sigma_1 < ... < sigma_K``."""

    sigmas: np.ndarray = field(repr=False)
    gamma: float
    sigma_min: float
    sigma_max: float
    snr_max_db: float = float("nan")
    snr_min_db: float = float("nan")

    def __post_init__(self):
        s = np.asarray(self.sigmas, dtype=float)
        s.setflags(write=False)
        object.__setattr__(self, "sigmas", s)
        if s.ndim != 1 or s.size < 2:
            raise ParameterError("a schedule needs at least two noise levels")
        if not np.all(np.diff(s) > 0):
            raise ParameterError("noise levels must be strictly increasing")
        sq = s**2
        sq.setflags(write=False)
        object.__setattr__(self, "_sigmas_sq", sq)

    @property
    def K(self) -> int:
        return int(self.sigmas.size)

    def sigma(self, k: int) -> float:
        """``sigma_k`` for ``k`` in ``0..K`` (``sigma_0 = 0``)."""
        if k == 0:
            return 0.0
        if not 1 <= k <= self.K:
            raise ParameterError(f"step index {k} outside 0..{self.K}")
        return float(self.sigmas[k - 1])

    def initial_step(self, eta_sq: float) -> int:
        return initial_step(eta_sq, self)


def build_schedule(
    snr_max_db: float, snr_min_db: float, K: int, gamma: float
) -> NoiseSchedule:
    """Power-exponentiated geometric schedule.

    ``sigma_k = sigma_min * (sigma_max / sigma_min) ** (((k - 1) / (K - 1)) ** gamma)``
    with ``sigma_min = sqrt(1 / SNR_max)`` and ``sigma_max = sqrt(1 / SNR_min)``.
    ``gamma < 1`` makes the sequence grow faster, so fewer steps cover a
    given noise level.
    """
    if int(K) != K or K < 2:
        raise ParameterError(f"K must be an integer >= 2, got {K}")
    if not gamma > 0:
        raise ParameterError(f"gamma must be > 0, got {gamma}")
    if not snr_max_db > snr_min_db:
        raise ParameterError(
            f"snr_max_db ({snr_max_db}) must exceed snr_min_db ({snr_min_db})"
        )
    K = int(K)
    sigma_min = sigma_from_snr_db(snr_max_db)
    sigma_max = sigma_from_snr_db(snr_min_db)
    frac = (np.arange(K) / (K - 1)) ** gamma
    sigmas = sigma_min * (sigma_max / sigma_min) ** frac
    # pin the endpoints against pow rounding
    sigmas[0], sigmas[-1] = sigma_min, sigma_max
    return NoiseSchedule(
        sigmas=sigmas,
        gamma=float(gamma),
        sigma_min=sigma_min,
        sigma_max=sigma_max,
        snr_max_db=float(snr_max_db),
        snr_min_db=float(snr_min_db),
    )


def initial_step(eta_sq: float, sched: NoiseSchedule) -> int:
    """Step ``k`` whose ``sigma_k**2`` is closest to ``eta_sq``.

    Ties go to the smaller ``k``.  Values outside the schedule clamp to 1 or K.
    """
    if not eta_sq >= 0:
        raise ParameterError(f"noise variance must be >= 0, got {eta_sq}")
    # np.argmin returns the first minimizer, i.e. the smaller k on ties
    return int(np.argmin(np.abs(eta_sq - sched._sigmas_sq))) + 1


def skip_indices(k_hat: int, delta: int) -> list[int]:
    """Visited steps ``k_hat, k_hat - delta, ...`` down to ``k_hat mod delta``.

    Has ``ceil(k_hat / delta)`` entries; index 0 is never visited.
    """
    if delta < 1:
        raise ParameterError(f"step stride must be >= 1, got {delta}")
    if k_hat < 0:
        raise ParameterError(f"initial step must be >= 0, got {k_hat}")
    return list(range(int(k_hat), 0, -int(delta)))


def step_targets(k_hat: int, delta: int) -> list[tuple[int, int]]:
    """Pairs ``(k, k_next)``; the last pair always targets ``0``."""
    ks = skip_indices(k_hat, delta)
    return list(zip(ks, ks[1:] + [0]))
