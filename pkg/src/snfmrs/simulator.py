"""Synthetic training and evaluation data.

Each spectrum draws its own parameters, SNR and noise from a Philox stream
keyed by ``(seed, stream label, batch index, element index)``, so any batch
can be regenerated independently of every other batch.
"""
from __future__ import annotations

import csv
import logging
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .spectral import (AcquisitionGrid, BasisSet, ParameterVector, Spectrum, forward_model_batch,
                       parameter_names, save_spectrum)

log = logging.getLogger(__name__)

# Placeholder ranges; concentrations are in relative units.
DEFAULT_RANGES = {
    "a": (0.0, 2.0),
    "gamma": (2.0, 20.0),
    "sigma_g": (0.0, 400.0),
    "eps_shift": (-2 * np.pi * 10, 2 * np.pi * 10),
    "phi0": (-np.pi / 4, np.pi / 4),
    "phi1": (-1e-3, 1e-3),
    "b": (-0.5, 0.5),
}


@dataclass
class PriorRanges:
    names: list[str]
    lo: np.ndarray
    hi: np.ndarray
    n_metabolites: int
    snr_db: tuple[float, float] = (4.0, 68.0)

    def __post_init__(self):
        self.lo = np.asarray(self.lo, dtype=np.float64)
        self.hi = np.asarray(self.hi, dtype=np.float64)
        if self.lo.shape != self.hi.shape or self.lo.size != len(self.names):
            raise ValueError("prior bounds do not match parameter names")
        if np.any(self.lo > self.hi) or self.snr_db[0] > self.snr_db[1]:
            raise ValueError("prior ranges need lo <= hi")
        if np.any(self.lo[:self.n_metabolites] < 0):
            raise ValueError("amplitude ranges must be nonnegative")

    @property
    def order(self) -> int:
        return (len(self.names) - self.n_metabolites - 5) // 2 + 1

    @property
    def fixed(self) -> np.ndarray:
        return self.lo == self.hi

    @property
    def midpoint(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    def contains(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta)
        return np.all((theta >= self.lo) & (theta <= self.hi), axis=-1)

    @classmethod
    def default(cls, metabolites, order: int = 3, overrides: dict | None = None,
                snr_db=(4.0, 68.0)) -> "PriorRanges":
        """Build ranges from ``DEFAULT_RANGES``.

        ``overrides`` maps either a group key (``a``, ``b``, ``gamma``...) or a
        full parameter name (``a_NAA``, ``b3``) to ``(lo, hi)``; full names win.
        """
        names = parameter_names(metabolites, order)
        overrides = dict(overrides or {})
        groups = {**DEFAULT_RANGES, **{k: v for k, v in overrides.items() if k in DEFAULT_RANGES}}
        lo, hi = [], []
        for n in names:
            if n.startswith("a_"):
                key = "a"
            elif n[0] == "b" and n[1:].isdigit():
                key = "b"
            else:
                key = n
            r = overrides.get(n, groups[key])
            lo.append(float(r[0]))
            hi.append(float(r[1]))
        unknown = set(overrides) - set(names) - set(DEFAULT_RANGES)
        if unknown:
            raise ValueError(f"unknown prior keys: {sorted(unknown)}")
        return cls(names, np.array(lo), np.array(hi), len(metabolites), tuple(map(float, snr_db)))


@dataclass
class SimConfig:
    basis: BasisSet
    priors: PriorRanges
    batch_size: int = 16
    val_size: int = 1024
    val_period: int = 256
    seed: int = 0
    noise_sigma: float | None = None  # absolute noise std; overrides the SNR range when set

    def __post_init__(self):
        if self.batch_size < 1 or self.val_period < 1:
            raise ValueError("batch size and validation period must be >= 1")
        if self.priors.n_metabolites != self.basis.n_metabolites:
            raise ValueError("prior ranges and basis disagree on the number of metabolites")

    @property
    def grid(self) -> AcquisitionGrid:
        return self.basis.grid


def stream(seed: int, label: str, *index: int) -> np.random.Generator:
    """Counter-based generator for one (seed, label, index...) cell."""
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(label.encode())] + [int(i) for i in index]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


def sample_theta(priors: PriorRanges, rng: np.random.Generator) -> ParameterVector:
    u = rng.random(priors.lo.size)
    return ParameterVector.from_array(priors.lo + (priors.hi - priors.lo) * u, priors.n_metabolites)


def sigma_for_snr(peak: float, snr_db: float) -> float:
    return float(peak) / 10.0 ** (snr_db / 20.0)


def add_noise(clean: Spectrum, snr_db: float | None, rng: np.random.Generator,
              sigma: float | None = None, snr_range: tuple[float, float] | None = None) -> Spectrum:
    """Add circular complex Gaussian noise in the frequency domain.

    SNR is peak |X| over the per-component noise std, in dB.  Passing
    ``sigma`` bypasses the SNR definition.
    """
    if not np.all(np.isfinite(clean.data)):
        raise ValueError("clean spectrum has non-finite samples")
    if sigma is None:
        if snr_range is not None and not snr_range[0] <= snr_db <= snr_range[1]:
            log.warning("snr %.2f dB outside configured range %s", snr_db, snr_range)
        sigma = sigma_for_snr(np.max(np.abs(clean.data)), snr_db)
    n = clean.data.size
    noise = sigma * (rng.standard_normal(n) + 1j * rng.standard_normal(n))
    return Spectrum(clean.data + noise, clean.grid, "noisy", float(sigma))


def snr_measure(clean: Spectrum, noisy: Spectrum) -> float:
    r = noisy.data - clean.data
    std = np.std(np.concatenate([r.real, r.imag]))
    if std == 0:
        return float("inf")
    return float(20.0 * np.log10(np.max(np.abs(clean.data)) / std))


@dataclass
class SimBatch:
    """Arrays for n simulated spectra (rows aligned)."""

    noisy: np.ndarray   # complex (n, N)
    clean: np.ndarray   # complex (n, N)
    thetas: np.ndarray  # (n, P)
    snr_db: np.ndarray
    sigma: np.ndarray
    seeds: list = field(default_factory=list)

    def __len__(self):
        return self.thetas.shape[0]


def simulate_arrays(config: SimConfig, n: int, label: str = "train", batch_index: int = 0) -> SimBatch:
    pr = config.priors
    grid = config.grid
    npts = grid.n_points
    thetas = np.empty((n, pr.lo.size))
    snr = np.empty(n)
    raw = np.empty((n, 2, npts))
    for j in range(n):
        rng = stream(config.seed, label, batch_index, j)
        thetas[j] = pr.lo + (pr.hi - pr.lo) * rng.random(pr.lo.size)
        snr[j] = pr.snr_db[0] + (pr.snr_db[1] - pr.snr_db[0]) * rng.random()
        raw[j] = rng.standard_normal((2, npts))
    clean = forward_model_batch(thetas, config.basis) if n else np.zeros((0, npts), complex)
    if config.noise_sigma is not None:
        sigma = np.full(n, float(config.noise_sigma))
        snr = 20 * np.log10(np.max(np.abs(clean), axis=1) / sigma) if n else snr
    else:
        sigma = np.max(np.abs(clean), axis=1) / 10.0 ** (snr / 20.0) if n else np.zeros(0)
    noisy = clean + sigma[:, None] * (raw[:, 0] + 1j * raw[:, 1])
    seeds = [(config.seed, label, batch_index, j) for j in range(n)]
    return SimBatch(noisy, clean, thetas, snr, sigma, seeds)


def generate_batch(config: SimConfig, n: int, label: str = "train",
                   batch_index: int = 0) -> tuple[list[Spectrum], list[ParameterVector]]:
    b = simulate_arrays(config, n, label, batch_index)
    m = config.basis.n_metabolites
    spectra = [Spectrum(b.noisy[j], config.grid, "noisy", float(b.sigma[j])) for j in range(n)]
    thetas = [ParameterVector.from_array(b.thetas[j], m) for j in range(n)]
    return spectra, thetas


def validation_set(config: SimConfig, period: int) -> SimBatch:
    """Validation spectra held fixed for one refresh period."""
    return simulate_arrays(config, config.val_size, "validation", period)


def write_dataset(out_dir, batch: SimBatch, config: SimConfig) -> Path:
    """Spectrum files plus manifest.csv (file, seed, snr_db, theta by name)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = config.priors.names
    with open(out / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["file", "seed", "snr_db", "noise_sigma"] + names)
        for j in range(len(batch)):
            fname = f"spectrum_{j:06d}.json"
            spec = Spectrum(batch.noisy[j], config.grid, "noisy", float(batch.sigma[j]))
            save_spectrum(out / fname, spec)
            w.writerow([fname, "-".join(map(str, batch.seeds[j])), repr(float(batch.snr_db[j])),
                        repr(float(batch.sigma[j]))] + [repr(float(v)) for v in batch.thetas[j]])
    return out / "manifest.csv"


def read_manifest(path) -> tuple[list[dict], list[str]]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    with open(path, newline="") as fh:
        header = next(csv.reader(fh))
    return rows, header
