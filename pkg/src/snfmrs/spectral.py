"""Frequency-domain MRS signal model.

The expected spectrum for parameters ``theta`` is

    X(f) = exp(i(phi0 + f*phi1)) * DFT[ sum_m a_m s_m(t) exp(-(i*eps + gamma + sigma_g*t) t) ] + B(f)

with ``f`` in Hz, ``t`` starting at 0, a unitary fftshifted DFT and a complex
Chebyshev baseline ``B``.  Everything here has a plain numpy path; the
``forward_on_tape`` builder records the same computation on a diffcore tape.
"""
from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diffcore import Tape, Node


class SpectralError(ValueError):
    pass


@dataclass(frozen=True)
class AcquisitionGrid:
    n_points: int = 1024
    bandwidth_hz: float = 3000.0
    larmor_mhz: float = 297.2
    center_ppm: float = 4.65

    def __post_init__(self):
        if self.n_points < 2:
            raise SpectralError("n_points must be >= 2")
        if not self.bandwidth_hz > 0:
            raise SpectralError("bandwidth_hz must be positive")
        if not self.larmor_mhz > 0:
            raise SpectralError("larmor_mhz must be positive")

    @property
    def dwell(self) -> float:
        return 1.0 / self.bandwidth_hz

    @property
    def is_pow2(self) -> bool:
        return self.n_points & (self.n_points - 1) == 0

    def time_axis(self) -> np.ndarray:
        return np.arange(self.n_points) * self.dwell

    def freq_axis(self) -> np.ndarray:
        """Ascending frequency in Hz, matching the fftshifted DFT ordering."""
        return np.fft.fftshift(np.fft.fftfreq(self.n_points, self.dwell))

    def hz_to_ppm(self, f):
        return self.center_ppm - np.asarray(f) / self.larmor_mhz

    def ppm_to_hz(self, ppm):
        return (self.center_ppm - np.asarray(ppm)) * self.larmor_mhz

    def ppm_span(self) -> tuple[float, float]:
        ppm = ppm_axis(self)
        return float(ppm.min()), float(ppm.max())

    def to_dict(self) -> dict:
        return {"n_points": int(self.n_points), "bandwidth_hz": float(self.bandwidth_hz),
                "larmor_mhz": float(self.larmor_mhz), "center_ppm": float(self.center_ppm)}

    @classmethod
    def from_dict(cls, d: dict) -> "AcquisitionGrid":
        return cls(int(d["n_points"]), float(d["bandwidth_hz"]), float(d["larmor_mhz"]), float(d["center_ppm"]))


@dataclass
class Peak:
    ppm: float
    amplitude: complex
    damping: float


@dataclass
class Metabolite:
    name: str
    peaks: list[Peak]
    is_mm: bool = False


class PeakList(list):
    """Ordered list of :class:`Metabolite` entries with validation."""

    def validate(self):
        names = [m.name for m in self]
        if len(set(names)) != len(names):
            raise SpectralError("metabolite names must be unique")
        for m in self:
            if not m.peaks:
                raise SpectralError(f"metabolite {m.name} has no peaks")
            for p in m.peaks:
                if not p.damping > 0:
                    raise SpectralError(f"metabolite {m.name}: damping must be positive")
        return self

    @classmethod
    def from_dicts(cls, items) -> "PeakList":
        out = cls()
        for it in items:
            peaks = [Peak(float(p["ppm"]), complex(float(p.get("re", 1.0)), float(p.get("im", 0.0))),
                          float(p["damping"])) for p in it["peaks"]]
            out.append(Metabolite(str(it["name"]), peaks, bool(it.get("is_mm", False))))
        return out.validate()

    def to_dicts(self) -> list[dict]:
        return [{"name": m.name, "is_mm": m.is_mm,
                 "peaks": [{"ppm": p.ppm, "re": p.amplitude.real, "im": p.amplitude.imag, "damping": p.damping}
                           for p in m.peaks]} for m in self]


@dataclass
class BasisSet:
    names: list[str]
    signals: np.ndarray  # complex, (M, n_points)
    grid: AcquisitionGrid
    is_mm: list[bool] = field(default_factory=list)
    peaks: PeakList | None = None

    def __post_init__(self):
        self.signals = np.asarray(self.signals, dtype=np.complex128)
        if self.signals.ndim != 2 or self.signals.shape != (len(self.names), self.grid.n_points):
            raise SpectralError(f"basis signals shape {self.signals.shape} does not match "
                                f"{len(self.names)} metabolites x {self.grid.n_points} points")
        if not self.is_mm:
            self.is_mm = [False] * len(self.names)

    @property
    def n_metabolites(self) -> int:
        return len(self.names)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps({"names": self.names, "grid": self.grid.to_dict()}, sort_keys=True).encode())
        h.update(np.ascontiguousarray(self.signals).astype("<c16").tobytes())
        return h.hexdigest()[:16]

    def subset(self, names) -> "BasisSet":
        idx = [self.names.index(n) for n in names]
        return BasisSet([self.names[i] for i in idx], self.signals[idx], self.grid, [self.is_mm[i] for i in idx])


@dataclass
class ParameterVector:
    """Physical parameters: amplitudes, lineshape, shift, phases, baseline.

    ``b`` holds 2(L-1) reals read pairwise as (re, im) of L-1 complex
    Chebyshev coefficients.
    """

    a: np.ndarray
    gamma: float = 0.0
    sigma_g: float = 0.0
    eps_shift: float = 0.0
    phi0: float = 0.0
    phi1: float = 0.0
    b: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.a = np.asarray(self.a, dtype=np.float64).reshape(-1)
        self.b = np.asarray(self.b, dtype=np.float64).reshape(-1)
        if self.b.size % 2:
            raise SpectralError("baseline coefficient vector must have even length")

    @property
    def n_metabolites(self) -> int:
        return self.a.size

    @property
    def order(self) -> int:
        """Baseline order L (b has 2(L-1) entries)."""
        return self.b.size // 2 + 1

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.a, [self.gamma, self.sigma_g, self.eps_shift, self.phi0, self.phi1], self.b])

    @classmethod
    def from_array(cls, arr, n_metabolites: int) -> "ParameterVector":
        arr = np.asarray(arr, dtype=np.float64)
        m = n_metabolites
        if arr.size < m + 5 or (arr.size - m - 5) % 2:
            raise SpectralError(f"parameter array of length {arr.size} is inconsistent with M={m}")
        return cls(arr[:m].copy(), float(arr[m]), float(arr[m + 1]), float(arr[m + 2]),
                   float(arr[m + 3]), float(arr[m + 4]), arr[m + 5:].copy())

    def to_dict(self, names=None) -> dict:
        names = names or parameter_names([f"m{i}" for i in range(self.n_metabolites)], self.order)
        return dict(zip(names, self.to_array().tolist()))

    def validate(self):
        if np.any(self.a < 0):
            raise SpectralError("amplitudes must be nonnegative")
        if self.gamma < 0 or self.sigma_g < 0:
            raise SpectralError("linewidth parameters must be nonnegative")
        return self


def parameter_names(metabolites, order: int) -> list[str]:
    names = [f"a_{m}" for m in metabolites]
    names += ["gamma", "sigma_g", "eps_shift", "phi0", "phi1"]
    names += [f"b{i + 1}" for i in range(2 * (order - 1))]
    return names


@dataclass
class Spectrum:
    data: np.ndarray
    grid: AcquisitionGrid
    provenance: str = "clean"
    noise_sigma: float | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.complex128)
        if self.data.shape != (self.grid.n_points,):
            raise SpectralError(f"spectrum length {self.data.shape} does not match grid ({self.grid.n_points})")
        if self.provenance not in ("clean", "noisy", "reconstructed"):
            raise SpectralError(f"unknown provenance {self.provenance!r}")

    def ppm(self) -> np.ndarray:
        return ppm_axis(self.grid)


# -- transforms -----------------------------------------------------------

def dft(x, axis: int = -1) -> np.ndarray:
    """Unitary DFT, output in ascending frequency order."""
    return np.fft.fftshift(np.fft.fft(x, axis=axis, norm="ortho"), axes=axis)


def idft(X, axis: int = -1) -> np.ndarray:
    return np.fft.ifft(np.fft.ifftshift(X, axes=axis), axis=axis, norm="ortho")


def dft_matrix(n: int) -> np.ndarray:
    """Dense matrix F with ``dft(x) == F @ x``."""
    return dft(np.eye(n), axis=0)


def ppm_axis(grid: AcquisitionGrid) -> np.ndarray:
    return grid.hz_to_ppm(grid.freq_axis())


def crop_indices(grid: AcquisitionGrid, lo_ppm: float, hi_ppm: float) -> slice:
    """Contiguous index range whose ppm lies in [lo_ppm, hi_ppm]."""
    if not lo_ppm < hi_ppm:
        raise SpectralError("crop bounds must satisfy lo < hi")
    ppm = ppm_axis(grid)
    idx = np.flatnonzero((ppm >= lo_ppm) & (ppm <= hi_ppm))
    if idx.size == 0:
        raise SpectralError(f"ppm window [{lo_ppm}, {hi_ppm}] does not overlap the grid")
    return slice(int(idx[0]), int(idx[-1]) + 1)


def crop_ppm(spectrum: Spectrum, lo_ppm: float, hi_ppm: float) -> tuple[slice, np.ndarray]:
    sl = crop_indices(spectrum.grid, lo_ppm, hi_ppm)
    return sl, spectrum.data[sl]


# -- basis ----------------------------------------------------------------

def synthesize_basis(peaks: PeakList, grid: AcquisitionGrid) -> BasisSet:
    """Time-domain rows s_m(t) = sum_j c_j exp(i 2 pi f_j t) exp(-d_j t)."""
    peaks = PeakList(peaks).validate()
    lo, hi = grid.ppm_span()
    t = grid.time_axis()
    rows = np.zeros((len(peaks), grid.n_points), dtype=np.complex128)
    for m, met in enumerate(peaks):
        for p in met.peaks:
            if not lo <= p.ppm <= hi:
                raise SpectralError(f"peak of {met.name} at {p.ppm} ppm lies outside [{lo:.3f}, {hi:.3f}]")
            f = grid.ppm_to_hz(p.ppm)
            rows[m] += p.amplitude * np.exp((2j * np.pi * f - p.damping) * t)
    return BasisSet([m.name for m in peaks], rows, grid, [m.is_mm for m in peaks], peaks)


def chebyshev_matrix(grid: AcquisitionGrid, order: int) -> np.ndarray:
    """(L-1, n_points) Chebyshev polynomials of degree 0..L-2 on the rescaled axis."""
    f = grid.freq_axis()
    u = 2.0 * (f - f[0]) / (f[-1] - f[0]) - 1.0
    if order <= 1:
        return np.zeros((0, grid.n_points))
    return np.polynomial.chebyshev.chebvander(u, order - 2).T.copy()


def baseline_eval(b, grid: AcquisitionGrid) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    if b.size % 2:
        raise SpectralError("baseline coefficients must have even length 2(L-1)")
    order = b.size // 2 + 1
    if order == 1:
        return np.zeros(grid.n_points, dtype=np.complex128)
    coef = b[0::2] + 1j * b[1::2]
    return coef @ chebyshev_matrix(grid, order)


def forward_model(theta: ParameterVector, basis: BasisSet, grid: AcquisitionGrid | None = None) -> Spectrum:
    grid = grid or basis.grid
    if grid != basis.grid:
        raise SpectralError("grid does not match the basis grid")
    if theta.n_metabolites != basis.n_metabolites:
        raise SpectralError(f"theta has {theta.n_metabolites} amplitudes, basis has {basis.n_metabolites}")
    X = forward_model_batch(theta.to_array()[None, :], basis)[0]
    return Spectrum(X, grid, "clean")


def forward_model_batch(thetas, basis: BasisSet) -> np.ndarray:
    """Vectorized model for an (n, P) array of parameter rows."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
    grid = basis.grid
    m = basis.n_metabolites
    if thetas.shape[1] < m + 5:
        raise SpectralError("parameter rows too short for this basis")
    t = grid.time_axis()
    f = grid.freq_axis()
    a = thetas[:, :m]
    gamma, sig, eps, phi0, phi1 = (thetas[:, m + k, None] for k in range(5))
    fid = (a @ basis.signals) * np.exp(-(1j * eps + gamma + sig * t) * t)
    X = np.exp(1j * (phi0 + f * phi1)) * dft(fid, axis=-1)
    b = thetas[:, m + 5:]
    if b.shape[1]:
        cheb = chebyshev_matrix(grid, b.shape[1] // 2 + 1)
        X = X + (b[:, 0::2] + 1j * b[:, 1::2]) @ cheb
    return X


def forward_on_tape(tape: Tape, theta: Node, basis: BasisSet, order: int,
                    index: slice | None = None, dense_dft: bool = False) -> tuple[Node, Node]:
    """Record the signal model for physical parameters ``theta`` (..., P).

    Returns real and imaginary channels, cropped to ``index`` if given.
    """
    grid = basis.grid
    m = basis.n_metabolites
    n_par = m + 5 + 2 * (order - 1)
    index = index or slice(0, grid.n_points)
    t = grid.time_axis()
    f = grid.freq_axis()[index]

    a = theta[..., 0:m]
    y_re = a @ tape.const(basis.signals.real)
    y_im = a @ tape.const(basis.signals.imag)
    gamma = theta[..., m:m + 1]
    sig = theta[..., m + 1:m + 2]
    eps = theta[..., m + 2:m + 3]
    env = tape.exp(-(gamma * t + sig * (t * t)))
    ang = eps * (-t)
    mod_re = env * tape.cos(ang)
    mod_im = env * tape.sin(ang)
    z_re = y_re * mod_re - y_im * mod_im
    z_im = y_re * mod_im + y_im * mod_re
    if dense_dft:
        F = dft_matrix(grid.n_points)[index]
        Fr, Fi = tape.const(F.real.T), tape.const(F.imag.T)
        Y_re = z_re @ Fr - z_im @ Fi
        Y_im = z_re @ Fi + z_im @ Fr
    else:
        Y = tape.dft(z_re, z_im)
        Y_re = Y[..., 0, index]
        Y_im = Y[..., 1, index]
    ph = theta[..., m + 3:m + 4] + theta[..., m + 4:m + 5] * f
    c, s = tape.cos(ph), tape.sin(ph)
    X_re = c * Y_re - s * Y_im
    X_im = s * Y_re + c * Y_im
    if order > 1:
        cheb = tape.const(chebyshev_matrix(grid, order)[:, index])
        X_re = X_re + theta[..., m + 5:n_par:2] @ cheb
        X_im = X_im + theta[..., m + 6:n_par:2] @ cheb
    return X_re, X_im


# -- file formats -----------------------------------------------------------

def _b64(arr: np.ndarray) -> str:
    inter = np.empty(arr.size * 2, dtype="<f8")
    inter[0::2] = arr.real.ravel()
    inter[1::2] = arr.imag.ravel()
    return base64.b64encode(inter.tobytes()).decode("ascii")


def _unb64(text: str) -> np.ndarray:
    inter = np.frombuffer(base64.b64decode(text), dtype="<f8")
    return inter[0::2] + 1j * inter[1::2]


def save_spectrum(path, spectrum: Spectrum, extra: dict | None = None) -> None:
    doc = {"grid": spectrum.grid.to_dict(), "provenance": spectrum.provenance,
           "noise_sigma": spectrum.noise_sigma, "data": _b64(spectrum.data)}
    if extra:
        doc["meta"] = extra
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def load_spectrum(path) -> Spectrum:
    doc = json.loads(Path(path).read_text())
    grid = AcquisitionGrid.from_dict(doc["grid"])
    return Spectrum(_unb64(doc["data"]), grid, doc.get("provenance", "noisy"), doc.get("noise_sigma"))


def basis_to_dict(basis: BasisSet, as_rows: bool = True) -> dict:
    mets = []
    for i, name in enumerate(basis.names):
        entry = {"name": name, "is_mm": bool(basis.is_mm[i])}
        if as_rows:
            entry["signal"] = _b64(basis.signals[i])
        else:
            entry["peaks"] = basis.peaks.to_dicts()[i]["peaks"]
        mets.append(entry)
    return {"grid": basis.grid.to_dict(), "metabolites": mets}


def save_basis(path, basis: BasisSet, as_rows: bool | None = None) -> None:
    if as_rows is None:
        as_rows = basis.peaks is None
    doc = basis_to_dict(basis, as_rows)
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")


def basis_from_dict(doc: dict, grid: AcquisitionGrid | None = None) -> BasisSet:
    """Build a basis from the JSON layout: peak lists are synthesized, rows decoded."""
    file_grid = AcquisitionGrid.from_dict(doc["grid"]) if "grid" in doc else None
    grid = grid or file_grid
    if grid is None:
        raise SpectralError("basis document has no grid and none was supplied")
    mets = doc["metabolites"]
    if all("peaks" in m for m in mets):
        return synthesize_basis(PeakList.from_dicts(mets), grid)
    if file_grid is not None and file_grid != grid:
        raise SpectralError("precomputed basis rows cannot be moved to a different grid")
    rows = np.array([_unb64(m["signal"]) for m in mets])
    return BasisSet([m["name"] for m in mets], rows, grid, [bool(m.get("is_mm", False)) for m in mets])


def load_basis(path, grid: AcquisitionGrid | None = None) -> BasisSet:
    return basis_from_dict(json.loads(Path(path).read_text()), grid)


def default_peaks() -> PeakList:
    """Bundled 20-metabolite + macromolecule peak list (documented defaults)."""
    path = Path(__file__).parent / "data" / "brain_peaks.json"
    return PeakList.from_dicts(json.loads(path.read_text())["metabolites"])
