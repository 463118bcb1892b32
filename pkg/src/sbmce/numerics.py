"""Complex linear algebra helpers, DFT/beamspace transforms and RNG plumbing.

Channel vectors follow the column-major convention ``h = vec(H)`` with
``H`` of shape ``(n_rx, n_tx)``.  All vector-valued functions accept a
leading batch dimension: the last axis always holds the ``n_rx * n_tx``
entries.
"""

from __future__ import annotations

import functools

import numpy as np
import scipy.linalg

from .errors import DimensionError, NumericalError, ParameterError

#: The one bit generator used throughout the package.
RNG_ALGORITHM = "PCG64"


def make_rng(seed: int | np.random.SeedSequence) -> np.random.Generator:
    """Return a deterministic generator (PCG64) for ``seed``."""
    if isinstance(seed, np.random.SeedSequence):
        return np.random.Generator(np.random.PCG64(seed))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))


def split_rng(rng: np.random.Generator, n: int) -> list[np.random.Generator]:
    """Spawn ``n`` independent child generators from ``rng``."""
    return list(rng.spawn(n))


def derived_rng(*keys: int) -> np.random.Generator:
    """Generator seeded by a tuple of integers, e.g. ``(seed, snr_idx, sample)``."""
    return make_rng(np.random.SeedSequence([int(k) for k in keys]))


def vec(H: np.ndarray) -> np.ndarray:
    """Column-major vectorization over the last two axes."""
    H = np.asarray(H)
    return np.swapaxes(H, -1, -2).reshape(*H.shape[:-2], H.shape[-1] * H.shape[-2])


def unvec(h: np.ndarray, n_rx: int, n_tx: int) -> np.ndarray:
    """Inverse of :func:`vec`; returns shape ``(..., n_rx, n_tx)``."""
    h = np.asarray(h)
    _check_length(h, n_rx, n_tx)
    return np.swapaxes(h.reshape(*h.shape[:-1], n_tx, n_rx), -1, -2)


def unitary_dft(n: int) -> np.ndarray:
    """Unitary DFT matrix ``F[j, k] = exp(-2j*pi*j*k/n) / sqrt(n)``."""
    if int(n) != n or n < 1:
        raise ParameterError(f"DFT dimension must be a positive integer, got {n!r}")
    return _dft(int(n)).copy()


@functools.lru_cache(maxsize=32)
def _dft(n: int) -> np.ndarray:
    idx = np.arange(n)
    F = np.exp(-2j * np.pi * np.outer(idx, idx) / n) / np.sqrt(n)
    F.setflags(write=False)
    return F


def _check_length(h: np.ndarray, n_rx: int, n_tx: int) -> None:
    if n_rx < 1 or n_tx < 1:
        raise DimensionError(f"antenna counts must be >= 1, got ({n_rx}, {n_tx})")
    if h.shape[-1] != n_rx * n_tx:
        raise DimensionError(
            f"vector length {h.shape[-1]} does not match n_rx*n_tx = {n_rx * n_tx}"
        )


def beamspace(h: np.ndarray, n_rx: int, n_tx: int) -> np.ndarray:
    """Apply ``(F_tx kron F_rx)`` to ``h`` without forming the Kronecker product.

    For ``h = vec(H)`` this equals ``vec(F_rx @ H @ F_tx.T)``.
    """
    h = np.asarray(h, dtype=complex)
    _check_length(h, n_rx, n_tx)
    # C-order reshape gives H^T; F is symmetric so F_tx H^T F_rx = (F_rx H F_tx^T)^T.
    Ht = h.reshape(*h.shape[:-1], n_tx, n_rx)
    out = _dft(n_tx) @ Ht @ _dft(n_rx)
    return out.reshape(h.shape)


def inverse_beamspace(h: np.ndarray, n_rx: int, n_tx: int) -> np.ndarray:
    """Adjoint (and inverse) of :func:`beamspace`."""
    h = np.asarray(h, dtype=complex)
    _check_length(h, n_rx, n_tx)
    Ht = h.reshape(*h.shape[:-1], n_tx, n_rx)
    out = _dft(n_tx).conj() @ Ht @ _dft(n_rx).conj()
    return out.reshape(h.shape)


def beamspace_matrix(n_rx: int, n_tx: int) -> np.ndarray:
    """Dense ``F_tx kron F_rx``; only meant for covariance transforms and tests."""
    return np.kron(unitary_dft(n_tx), unitary_dft(n_rx))


def draw_circular_gaussian(
    shape: int | tuple[int, ...], variance: float, rng: np.random.Generator
) -> np.ndarray:
    """Draw i.i.d. ``CN(0, variance)`` entries.

    Real and imaginary parts each carry ``variance / 2``.
    """
    if not np.isfinite(variance) or variance < 0:
        raise ParameterError(f"variance must be finite and >= 0, got {variance}")
    std = np.sqrt(variance / 2.0)
    re = rng.standard_normal(shape)
    im = rng.standard_normal(shape)
    return std * (re + 1j * im)


def complex_to_real(h: np.ndarray, n_rx: int, n_tx: int) -> np.ndarray:
    """View column-major vectors as real tensors of shape ``(..., 2, n_rx, n_tx)``."""
    H = unvec(h, n_rx, n_tx)
    return np.stack([H.real, H.imag], axis=-3)


def real_to_complex(x: np.ndarray) -> np.ndarray:
    """Inverse of :func:`complex_to_real`; returns column-major vectors."""
    x = np.asarray(x, dtype=float)
    if x.shape[-3] != 2:
        raise DimensionError(f"expected 2 (re, im) channels, got shape {x.shape}")
    return vec(x[..., 0, :, :] + 1j * x[..., 1, :, :])


def hermitian_solve(
    A: np.ndarray,
    B: np.ndarray,
    jitter: float = 1e-10,
    max_jitter: float = 1e-6,
) -> tuple[np.ndarray, bool]:
    """Solve ``A X = B`` for Hermitian PSD ``A`` via Cholesky.

    On factorization failure a diagonal jitter is added, starting at
    ``jitter`` and growing by 10x up to ``max_jitter``.  If that still
    fails, a least-squares solve is used.

    Returns:
        ``(X, fallback)`` where ``fallback`` is True if anything other than a
        plain Cholesky solve was needed.
    """
    A = np.asarray(A)
    n = A.shape[0]
    eye = np.eye(n)
    try:
        return scipy.linalg.cho_solve(scipy.linalg.cho_factor(A, lower=True), B), False
    except np.linalg.LinAlgError:
        pass
    eps = jitter
    while eps <= max_jitter * (1 + 1e-9):
        try:
            cho = scipy.linalg.cho_factor(A + eps * eye, lower=True)
            return scipy.linalg.cho_solve(cho, B), True
        except np.linalg.LinAlgError:
            eps *= 10.0
    X, *_ = np.linalg.lstsq(A, B, rcond=None)
    if not np.all(np.isfinite(X)):
        raise NumericalError("Hermitian solve failed even with least-squares fallback")
    return X, True
