"""Synthetic multipath MIMO channels and dataset persistence.

The generator is a geometric Rician cluster model between two half-wavelength
ULAs in broadside orientation::

    H = sum_p g_p a_rx(theta_p) a_tx(phi_p)^H,   a(theta)_j = exp(i*pi*j*sin(theta))

Path 0 is a line-of-sight path whose share of the power is set by a Rician
K-factor drawn uniformly (in dB) per sample.  The remaining paths are
scattered around the LOS angles with a Gaussian angular spread and carry
complex Gaussian gains.  Path powers sum to one per sample before the global
dataset normalization.
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _binio
from .errors import DimensionError, DomainError, FormatError, ParameterError
from .numerics import beamspace, inverse_beamspace, split_rng

DATASET_MAGIC = b"SBMCH1"
DATASET_VERSION = 1
DOMAINS = ("spatial", "beamspace")


@dataclass(frozen=True)
class ScenarioConfig:
    n_rx: int = 16
    n_tx: int = 4
    sector_halfangle: float = 60.0
    n_paths: int = 5
    rician_k_db_range: tuple[float, float] = (0.0, 10.0)
    angle_spread: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.n_rx < 1 or self.n_tx < 1:
            raise ParameterError("n_rx and n_tx must be >= 1")
        if self.n_paths < 1:
            raise ParameterError("n_paths must be >= 1")
        if not 0 < self.sector_halfangle <= 90:
            raise ParameterError("sector_halfangle must lie in (0, 90] degrees")
        lo, hi = self.rician_k_db_range
        if lo > hi:
            raise ParameterError("rician_k_db_range must be (low, high)")
        if self.angle_spread < 0:
            raise ParameterError("angle_spread must be >= 0")
        object.__setattr__(self, "rician_k_db_range", (float(lo), float(hi)))


def steering_vector(n: int, theta: float | np.ndarray) -> np.ndarray:
    """Half-wavelength ULA response; ``theta`` in radians from broadside."""
    theta = np.asarray(theta, dtype=float)
    j = np.arange(n)
    return np.exp(1j * np.pi * np.multiply.outer(np.sin(theta), j))


def generate_channel(cfg: ScenarioConfig, rng: np.random.Generator) -> np.ndarray:
    """Draw one ``(n_rx, n_tx)`` channel matrix."""
    half = np.deg2rad(cfg.sector_halfangle)
    spread = np.deg2rad(cfg.angle_spread)
    theta0 = rng.uniform(-half, half)
    # parallel broadside arrays see the LOS ray at mirrored angles
    phi0 = -theta0
    k_db = rng.uniform(*cfg.rician_k_db_range)
    kappa = 10.0 ** (k_db / 10.0)

    n_nlos = cfg.n_paths - 1
    if n_nlos == 0:
        p_los = 1.0
    else:
        p_los = kappa / (1.0 + kappa)
    gains = np.empty(cfg.n_paths, dtype=complex)
    gains[0] = np.sqrt(p_los) * np.exp(2j * np.pi * rng.uniform())
    thetas = np.empty(cfg.n_paths)
    phis = np.empty(cfg.n_paths)
    thetas[0], phis[0] = theta0, phi0
    if n_nlos:
        p_path = (1.0 - p_los) / n_nlos
        g = rng.standard_normal(n_nlos) + 1j * rng.standard_normal(n_nlos)
        gains[1:] = np.sqrt(p_path / 2.0) * g
        thetas[1:] = theta0 + spread * rng.standard_normal(n_nlos)
        phis[1:] = phi0 + spread * rng.standard_normal(n_nlos)
    a_rx = steering_vector(cfg.n_rx, thetas)  # (P, n_rx)
    a_tx = steering_vector(cfg.n_tx, phis)  # (P, n_tx)
    return np.einsum("p,pi,pj->ij", gains, a_rx, a_tx.conj())


def generate_channels(cfg: ScenarioConfig, m: int, rng: np.random.Generator) -> np.ndarray:
    """Draw ``m`` channels as column-major vectors, shape ``(m, n_rx * n_tx)``."""
    out = np.empty((m, cfg.n_rx * cfg.n_tx), dtype=complex)
    for i in range(m):
        out[i] = generate_channel(cfg, rng).reshape(-1, order="F")
    return out


@dataclass
class ChannelDataset:
    """A set of channels stored as column-major vectors ``(M, n_rx * n_tx)``."""

    samples: np.ndarray = field(repr=False)
    n_rx: int
    n_tx: int
    domain_tag: str = "spatial"
    split: str | None = None
    scenario: ScenarioConfig | None = None
    scale: float = 1.0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=complex)
        if self.samples.ndim != 2 or self.samples.shape[1] != self.n_rx * self.n_tx:
            raise DimensionError(
                f"samples must have shape (M, {self.n_rx * self.n_tx}), got {self.samples.shape}"
            )
        if self.domain_tag not in DOMAINS:
            raise DomainError(f"unknown domain tag {self.domain_tag!r}")

    def __len__(self) -> int:
        return self.samples.shape[0]

    def mean_energy(self) -> float:
        return float(np.mean(np.sum(np.abs(self.samples) ** 2, axis=1)))

    def to_beamspace(self) -> ChannelDataset:
        if self.domain_tag == "beamspace":
            return self
        return dataclasses.replace(
            self, samples=beamspace(self.samples, self.n_rx, self.n_tx), domain_tag="beamspace"
        )

    def to_spatial(self) -> ChannelDataset:
        if self.domain_tag == "spatial":
            return self
        return dataclasses.replace(
            self,
            samples=inverse_beamspace(self.samples, self.n_rx, self.n_tx),
            domain_tag="spatial",
        )


def normalize(ds: ChannelDataset, scale: float | None = None) -> ChannelDataset:
    """Scale the dataset so that the mean of ``||h||^2`` equals ``n_rx * n_tx``.

    Pass the ``scale`` fitted on the training split to reuse it for val/test.
    The factor applied in total (including earlier normalizations) is kept in
    the returned dataset's ``scale``.
    """
    if len(ds) == 0:
        raise ParameterError("cannot normalize an empty dataset")
    if scale is None:
        energy = ds.mean_energy()
        if not energy > 0:
            raise ParameterError("cannot normalize a dataset with zero energy")
        scale = float(np.sqrt(ds.n_rx * ds.n_tx / energy))
    return dataclasses.replace(ds, samples=ds.samples * scale, scale=ds.scale * scale)


def make_splits(
    cfg: ScenarioConfig,
    m_train: int,
    m_val: int,
    m_test: int,
    rng: np.random.Generator,
) -> tuple[ChannelDataset, ChannelDataset, ChannelDataset]:
    """Generate normalized train/val/test sets from disjoint RNG substreams.

    The normalization factor is fitted on the training split only.
    """
    for name, m in (("m_train", m_train), ("m_val", m_val), ("m_test", m_test)):
        if m < 1:
            raise ParameterError(f"{name} must be >= 1")
    streams = split_rng(rng, 3)
    raw = [
        ChannelDataset(generate_channels(cfg, m, r), cfg.n_rx, cfg.n_tx, split=s, scenario=cfg)
        for m, r, s in zip((m_train, m_val, m_test), streams, ("train", "val", "test"))
    ]
    train = normalize(raw[0])
    return train, normalize(raw[1], train.scale), normalize(raw[2], train.scale)


_HEADER = "<IIQB"


def save_dataset(ds: ChannelDataset, path: str | Path) -> None:
    """Write ``ds`` in the ``SBMCH1`` binary format."""
    with open(path, "wb") as f:
        _binio.write_header(f, DATASET_MAGIC, DATASET_VERSION)
        f.write(struct.pack(_HEADER, ds.n_rx, ds.n_tx, len(ds), DOMAINS.index(ds.domain_tag)))
        _binio.write_c16(f, ds.samples)


def load_dataset(path: str | Path, split: str | None = None) -> ChannelDataset:
    with open(path, "rb") as f:
        _binio.check_magic(f, DATASET_MAGIC, DATASET_VERSION)
        n_rx, n_tx, m, tag = _binio.read_struct(f, _HEADER, "dataset header")
        if n_rx < 1 or n_tx < 1:
            raise FormatError(f"corrupt antenna counts ({n_rx}, {n_tx})")
        if tag >= len(DOMAINS):
            raise FormatError(f"unknown domain tag byte {tag}")
        samples = _binio.read_c16(f, (m, n_rx * n_tx), "channel samples")
        _binio.expect_eof(f)
    return ChannelDataset(samples, n_rx, n_tx, domain_tag=DOMAINS[tag], split=split)
