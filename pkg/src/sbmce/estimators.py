"""Pilot observations and channel estimators.

Every estimator starts from the decorrelated observation ``A^H y`` with
``A = P^T kron I_{n_rx}``; since ``A`` is unitary the decorrelated noise is
still white with variance ``eta_sq`` per complex entry.
"""

from __future__ import annotations

import logging
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np
import scipy.linalg
from scipy.special import logsumexp

from . import _binio
from .channel import ChannelDataset
from .errors import DimensionError, FormatError, ParameterError
from .numerics import (
    beamspace,
    beamspace_matrix,
    draw_circular_gaussian,
    hermitian_solve,
    inverse_beamspace,
    unitary_dft,
    unvec,
    vec,
)
from .schedule import NoiseSchedule, initial_step, step_targets

logger = logging.getLogger(__name__)

GMM_MAGIC = b"SBMGM1"
GMM_VERSION = 1
STRUCTURES = ("full", "kronecker")


class ScoreFunction(Protocol):
    def score(self, h: np.ndarray, k: int, sigma: float) -> np.ndarray: ...


# -- observations ------------------------------------------------------------


def make_pilot(n_tx: int, kind: str = "dft", rng: np.random.Generator | None = None) -> np.ndarray:
    """Unitary ``n_tx x n_tx`` pilot matrix: ``"dft"``, ``"identity"`` or ``"random"``."""
    if kind == "dft":
        return unitary_dft(n_tx)
    if kind == "identity":
        return np.eye(n_tx, dtype=complex)
    if kind == "random":
        if rng is None:
            raise ParameterError("a random pilot needs an rng")
        G = draw_circular_gaussian((n_tx, n_tx), 1.0, rng)
        Q, R = np.linalg.qr(G)
        return Q * (np.diag(R) / np.abs(np.diag(R)))
    raise ParameterError(f"unknown pilot kind {kind!r}")


def check_pilot(P: np.ndarray, n_tx: int, tol: float = 1e-10) -> np.ndarray:
    P = np.asarray(P, dtype=complex)
    if P.shape != (n_tx, n_tx):
        raise DimensionError(f"pilot must be {n_tx}x{n_tx} (n_p = n_tx), got {P.shape}")
    if np.linalg.norm(P @ P.conj().T - np.eye(n_tx)) > tol:
        raise ParameterError("pilot matrix is not unitary")
    return P


@dataclass
class PilotObservation:
    """Received ``y = vec(Y)`` (one ``(n,)`` or a batch ``(B, n)``) and its pilot."""

    y: np.ndarray
    pilot: np.ndarray
    eta_sq: float
    n_rx: int
    n_tx: int

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=complex)
        self.pilot = check_pilot(self.pilot, self.n_tx)
        if self.y.shape[-1] != self.n_rx * self.n_tx:
            raise DimensionError(
                f"observation length {self.y.shape[-1]} != n_rx*n_p = {self.n_rx * self.n_tx}"
            )
        if not self.eta_sq >= 0:
            raise ParameterError(f"noise variance must be >= 0, got {self.eta_sq}")

    @property
    def batched(self) -> bool:
        return self.y.ndim == 2

    def decorrelated(self) -> np.ndarray:
        """``A^H y``, i.e. ``vec(Y P^H)``."""
        Y = unvec(self.y, self.n_rx, self.n_tx)
        return vec(Y @ self.pilot.conj().T)


def observe(
    h: np.ndarray,
    pilot: np.ndarray,
    eta_sq: float,
    rng: np.random.Generator,
    n_rx: int,
    n_tx: int,
) -> PilotObservation:
    """``y = A h + n`` with ``n ~ CN(0, eta_sq I)``; ``h`` may be batched."""
    pilot = check_pilot(pilot, n_tx)
    h = np.asarray(h, dtype=complex)
    H = unvec(h, n_rx, n_tx)
    n = draw_circular_gaussian(h.shape, eta_sq, rng)
    return PilotObservation(vec(H @ pilot) + n, pilot, float(eta_sq), n_rx, n_tx)


@dataclass
class EstimateResult:
    """An estimate plus the step bookkeeping the evaluation reports."""

    h_hat: np.ndarray
    k_hat: int = 0
    steps: int = 0
    nfe: int = 0
    fallback: bool = False


# -- classical baselines -----------------------------------------------------


def ls_estimate(obs: PilotObservation) -> EstimateResult:
    """Least squares, which for a unitary pilot is just ``A^H y``."""
    return EstimateResult(obs.decorrelated())


def sample_covariance(ds: ChannelDataset) -> np.ndarray:
    """Global sample covariance ``(1/M) sum h h^H`` of a (spatial) dataset."""
    X = ds.samples
    return X.T @ X.conj() / X.shape[0]


def lmmse_filter(C: np.ndarray, eta_sq: float) -> tuple[np.ndarray, bool]:
    """``W = C (C + eta_sq I)^-1`` via a Hermitian solve."""
    n = C.shape[0]
    X, fallback = hermitian_solve(C + eta_sq * np.eye(n), C)
    # (C + eta I)^-1 C = X and both factors are Hermitian, so W = X^H
    return X.conj().T, fallback


def scov_lmmse(obs: PilotObservation, C: np.ndarray) -> EstimateResult:
    """LMMSE with a fixed covariance applied to the decorrelated observation."""
    n = obs.n_rx * obs.n_tx
    C = np.asarray(C, dtype=complex)
    if C.shape != (n, n):
        raise DimensionError(f"covariance must be {n}x{n}, got {C.shape}")
    W, fallback = lmmse_filter(C, obs.eta_sq)
    return EstimateResult(obs.decorrelated() @ W.T, fallback=fallback)


# -- Gaussian mixture priors -------------------------------------------------


@dataclass
class GmmPrior:
    """Complex Gaussian mixture over channel vectors."""

    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    structure_tag: str = "full"
    _eig: list = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.means = np.asarray(self.means, dtype=complex)
        self.covariances = np.asarray(self.covariances, dtype=complex)
        n_c, d = self.means.shape
        if self.weights.shape != (n_c,) or self.covariances.shape != (n_c, d, d):
            raise DimensionError("inconsistent GMM parameter shapes")
        if abs(self.weights.sum() - 1.0) > 1e-9:
            raise ParameterError("GMM weights must sum to 1")
        if self.structure_tag not in STRUCTURES:
            raise ParameterError(f"unknown GMM structure {self.structure_tag!r}")

    @property
    def n_components(self) -> int:
        return self.weights.size

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def eig(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Cached eigendecompositions ``(lam, U)`` of the component covariances."""
        if self._eig is None:
            out = []
            for C in self.covariances:
                lam, U = np.linalg.eigh(0.5 * (C + C.conj().T))
                out.append((np.clip(lam, 0.0, None), U))
            self._eig = out
        return self._eig


def _kmeans_labels(X: np.ndarray, n_components: int, rng: np.random.Generator) -> np.ndarray:
    from sklearn.cluster import KMeans

    Xr = np.concatenate([X.real, X.imag], axis=1)
    seed = int(rng.integers(0, 2**31 - 1))
    km = KMeans(n_clusters=n_components, n_init=1, random_state=seed, max_iter=100)
    return km.fit_predict(Xr)


def _component_loglik(X, means, covs, zero_mean: bool = False) -> np.ndarray:
    """``log N_C(x; mu_c, C_c)`` for all samples and components, shape ``(N, C)``."""
    N, d = X.shape
    out = np.empty((N, means.shape[0]))
    eye = np.eye(d)
    for c, (mu, C) in enumerate(zip(means, covs)):
        L = np.linalg.cholesky(C)
        L_inv = scipy.linalg.solve_triangular(L, eye, lower=True)
        v = (X if zero_mean else X - mu) @ L_inv.T
        quad = np.einsum("ij,ij->i", v.real, v.real) + np.einsum("ij,ij->i", v.imag, v.imag)
        logdet = 2.0 * np.sum(np.log(np.abs(np.diag(L))))
        out[:, c] = -d * np.log(np.pi) - logdet - quad
    return out


def _log_normalize(logp: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise log-sum-exp and the normalized probabilities."""
    m = logp.max(axis=1, keepdims=True)
    m[~np.isfinite(m)] = 0.0
    p = np.exp(logp - m)
    s = p.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore"):
        norm = np.log(s) + m
    return norm[:, 0], p / s


def fit_complex_gmm(
    X: np.ndarray,
    n_components: int,
    rng: np.random.Generator,
    max_iter: int = 300,
    tol: float = 1e-6,
    reg: float = 1e-6,
    zero_mean: bool = False,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """EM for a circularly-symmetric complex Gaussian mixture.

    Initialized from k-means labels.  Every covariance gets ``reg * I`` added
    in each M-step so collapsed components stay invertible.

    Returns:
        ``(weights, means, covariances)``.
    """
    X = np.asarray(X, dtype=complex)
    N, d = X.shape
    if n_components < 1:
        raise ParameterError("n_components must be >= 1")
    if n_components == 1:
        resp = np.ones((N, 1))
    else:
        labels = _kmeans_labels(X, n_components, rng)
        resp = np.zeros((N, n_components))
        resp[np.arange(N), labels] = 1.0
    eye = np.eye(d)
    Xc = X.conj()
    prev = -np.inf
    for it in range(max_iter):
        Nk = resp.sum(axis=0)
        weights = Nk / N
        safe = np.maximum(Nk, 1e-12)
        if zero_mean:
            means = np.zeros((n_components, d), dtype=complex)
        else:
            means = (resp.T @ X) / safe[:, None]
        covs = np.empty((n_components, d, d), dtype=complex)
        for c in range(n_components):
            if zero_mean:
                covs[c] = (X.T * resp[:, c]) @ Xc
            else:
                D = X - means[c]
                covs[c] = (D.T * resp[:, c]) @ D.conj()
            covs[c] = covs[c] / safe[c] + reg * eye
        with np.errstate(divide="ignore"):
            logw = np.log(weights)
        logp = _component_loglik(X, means, covs, zero_mean) + logw
        norm, resp = _log_normalize(logp)
        ll = float(np.mean(norm))
        if np.isfinite(prev) and abs(ll - prev) <= tol * abs(ll):
            break
        prev = ll
    logger.debug("GMM EM stopped after %d iterations, mean loglik %.4f", it + 1, ll)
    return weights / weights.sum(), means, covs


def gmm_fit(
    train_ds: ChannelDataset,
    n_components: int | tuple[int, int],
    structure_tag: str,
    rng: np.random.Generator,
    max_iter: int = 300,
    tol: float = 1e-6,
) -> GmmPrior:
    """Fit a GMM prior to spatial-domain training channels.

    ``structure_tag="kronecker"`` fits zero-mean GMMs to the receive-side
    (columns of ``H``) and transmit-side (rows of ``H``) vectors separately and
    combines every pair of components as ``C_tx kron C_rx`` with weight
    ``w_rx * w_tx``.  ``n_components`` is then a pair ``(n_rx_comp, n_tx_comp)``.
    """
    if train_ds.domain_tag != "spatial":
        raise ParameterError("GMM priors are fitted on spatial-domain channels")
    if structure_tag == "full":
        w, mu, C = fit_complex_gmm(train_ds.samples, int(n_components), rng, max_iter, tol)
        return GmmPrior(w, mu, C, "full")
    if structure_tag != "kronecker":
        raise ParameterError(f"unknown GMM structure {structure_tag!r}")
    if isinstance(n_components, int):
        n_components = (n_components, n_components)
    n_rx, n_tx = train_ds.n_rx, train_ds.n_tx
    H = unvec(train_ds.samples, n_rx, n_tx)  # (M, n_rx, n_tx)
    cols = np.swapaxes(H, 1, 2).reshape(-1, n_rx)
    rows = H.reshape(-1, n_tx)
    rx_rng, tx_rng = rng.spawn(2)
    w_rx, _, C_rx = fit_complex_gmm(cols, n_components[0], rx_rng, max_iter, tol, zero_mean=True)
    w_tx, _, C_tx = fit_complex_gmm(rows, n_components[1], tx_rng, max_iter, tol, zero_mean=True)
    weights = np.outer(w_rx, w_tx).ravel()
    covs = np.array([np.kron(Ct, Cr) for Cr in C_rx for Ct in C_tx])
    means = np.zeros((weights.size, n_rx * n_tx), dtype=complex)
    return GmmPrior(weights / weights.sum(), means, covs, "kronecker")


def gmm_responsibilities_and_estimate(
    y_tilde: np.ndarray, eta_sq: float, prior: GmmPrior
) -> tuple[np.ndarray, np.ndarray, bool]:
    """Posterior component probabilities and the conditional-mean estimate.

    Works in each component's eigenbasis, so one decomposition per component
    serves every noise level.
    """
    Y = np.atleast_2d(y_tilde)
    B, d = Y.shape
    n_c = prior.n_components
    logp = np.empty((B, n_c))
    est = np.empty((n_c, B, d), dtype=complex)
    with np.errstate(divide="ignore"):
        logw = np.log(prior.weights)
    for c, (lam, U) in enumerate(prior.eig()):
        D = Y - prior.means[c]
        coef = D @ U.conj()
        var = lam + eta_sq
        with np.errstate(divide="ignore", invalid="ignore"):
            logp[:, c] = (
                logw[c]
                - d * np.log(np.pi)
                - np.sum(np.log(var))
                - np.sum(np.abs(coef) ** 2 / var, axis=1)
            )
            shrink = np.where(var > 0, lam / np.where(var > 0, var, 1.0), 0.0)
        est[c] = prior.means[c] + (coef * shrink) @ U.T
    logp = np.nan_to_num(logp, nan=-np.inf)
    norm = logsumexp(logp, axis=1)
    degenerate = ~np.isfinite(norm)
    resp = np.exp(logp - np.where(degenerate, 0.0, norm)[:, None])
    if np.any(degenerate):
        warnings.warn("degenerate GMM responsibilities; using uniform weights", RuntimeWarning)
        resp[degenerate] = 1.0 / n_c
    h_hat = np.einsum("bc,cbd->bd", resp, est)
    if np.ndim(y_tilde) == 1:
        return resp[0], h_hat[0], bool(degenerate.any())
    return resp, h_hat, bool(degenerate.any())


def gmm_estimate(obs: PilotObservation, prior: GmmPrior) -> EstimateResult:
    """Responsibility-weighted sum of per-component LMMSE estimates."""
    if prior.dim != obs.n_rx * obs.n_tx:
        raise DimensionError(f"prior dimension {prior.dim} != {obs.n_rx * obs.n_tx}")
    _, h_hat, degenerate = gmm_responsibilities_and_estimate(obs.decorrelated(), obs.eta_sq, prior)
    return EstimateResult(h_hat, fallback=degenerate)


def save_gmm(prior: GmmPrior, path: str | Path) -> None:
    with open(path, "wb") as f:
        _binio.write_header(f, GMM_MAGIC, GMM_VERSION)
        f.write(
            struct.pack(
                "<IIB", prior.n_components, prior.dim, STRUCTURES.index(prior.structure_tag)
            )
        )
        _binio.write_f8(f, prior.weights)
        _binio.write_c16(f, prior.means)
        _binio.write_c16(f, prior.covariances)


def load_gmm(path: str | Path) -> GmmPrior:
    with open(path, "rb") as f:
        _binio.check_magic(f, GMM_MAGIC, GMM_VERSION)
        n_c, d, tag = _binio.read_struct(f, "<IIB", "GMM header")
        if tag >= len(STRUCTURES):
            raise FormatError(f"unknown GMM structure byte {tag}")
        w = _binio.read_f8(f, (n_c,), "weights")
        mu = _binio.read_c16(f, (n_c, d), "means")
        C = _binio.read_c16(f, (n_c, d, d), "covariances")
        _binio.expect_eof(f)
    return GmmPrior(w, mu, C, STRUCTURES[tag])


# -- score-based estimators ----------------------------------------------------


class GaussianScore:
    """Exact score ``-(C + sigma^2 I)^-1 h`` of a zero-mean Gaussian prior.

    Drop-in replacement for a trained network when the prior is Gaussian with
    (beamspace) covariance ``C``; it makes the reverse process testable
    without any training.
    """

    def __init__(self, C: np.ndarray):
        self.C = np.asarray(C, dtype=complex)
        self.calls = 0
        self._cache: dict[float, np.ndarray] = {}

    @classmethod
    def from_spatial(cls, C_spatial: np.ndarray, n_rx: int, n_tx: int) -> GaussianScore:
        F = beamspace_matrix(n_rx, n_tx)
        return cls(F @ C_spatial @ F.conj().T)

    def score(self, h: np.ndarray, k: int, sigma: float) -> np.ndarray:
        self.calls += 1
        key = float(sigma)
        if key not in self._cache:
            n = self.C.shape[0]
            inv, _ = hermitian_solve(self.C + sigma**2 * np.eye(n), np.eye(n))
            self._cache[key] = inv
        # rows: h^T M^T
        return -(np.asarray(h) @ self._cache[key].T)


def _score_of(model) -> Callable[[np.ndarray, int, float], np.ndarray]:
    if hasattr(model, "score"):
        return model.score
    if callable(model):
        return model
    raise ParameterError("model must provide score(h, k, sigma) or be callable")


def sbm_estimate(
    obs: PilotObservation,
    model,
    sched: NoiseSchedule,
    delta: int = 1,
    callback: Callable[[int, np.ndarray], None] | None = None,
) -> EstimateResult:
    """Deterministic reverse-process estimate with step skipping.

    Decorrelate, move to beamspace, start at the step whose ``sigma_k**2``
    matches ``eta_sq`` and apply
    ``h <- h + (sigma_k^2 - sigma_{k-delta}^2) * score(h, k)`` over
    ``k = k_hat, k_hat - delta, ...``; the last update targets ``sigma = 0``.
    ``delta = 1`` is the plain loop and ``delta = K`` a single step.

    ``callback(k_next, h_beam)`` is invoked after every update.
    """
    if not 1 <= delta <= sched.K:
        raise ParameterError(f"delta must lie in 1..{sched.K}, got {delta}")
    cfg = getattr(model, "cfg", None)
    if cfg is not None and getattr(cfg, "K", sched.K) != sched.K:
        raise ParameterError(f"model expects K={cfg.K}, schedule has K={sched.K}")
    score = _score_of(model)
    n_rx, n_tx = obs.n_rx, obs.n_tx
    h = beamspace(obs.decorrelated(), n_rx, n_tx)
    k_hat = initial_step(obs.eta_sq, sched)
    nfe = 0
    for k, k_next in step_targets(k_hat, delta):
        sig_k = sched.sigma(k)
        h = h + (sig_k**2 - sched.sigma(k_next) ** 2) * score(h, k, sig_k)
        nfe += 1
        if callback is not None:
            callback(k_next, h)
    return EstimateResult(inverse_beamspace(h, n_rx, n_tx), k_hat=k_hat, steps=nfe, nfe=nfe)


def single_step_estimate(obs: PilotObservation, model, sched: NoiseSchedule) -> EstimateResult:
    """One network evaluation: ``h_0 = h_k + sigma_k^2 * score(h_k, k)``."""
    return sbm_estimate(obs, model, sched, delta=sched.K)
