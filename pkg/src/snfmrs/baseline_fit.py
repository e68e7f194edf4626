"""Classical linear-combination fitting with Cramer-Rao bounds.

Levenberg-Marquardt on the real/imaginary-stacked residual over the fitting
window.  Amplitudes and linewidths are kept nonnegative by projecting each
trial point onto the feasible box.
"""
from __future__ import annotations

import logging
import os
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import nnls

from .diffcore import Tape
from .simulator import PriorRanges
from .spectral import (BasisSet, ParameterVector, Spectrum, chebyshev_matrix, crop_indices,
                       forward_model_batch, forward_on_tape, parameter_names)

log = logging.getLogger(__name__)


@dataclass
class FitOptions:
    crop_ppm: tuple[float, float] = (0.5, 4.5)
    order: int = 3
    max_iter: int = 500
    gtol: float = 1e-8
    xtol: float = 1e-10
    lambda0: float = 1e-3
    priors: PriorRanges | None = None   # source of the midpoints used by the default init
    free: np.ndarray | None = None      # boolean mask of fitted parameters; default all
    noise_sigma: float | None = None    # for CRLB; else the spectrum's, else estimated
    jac_chunk: int = 256


@dataclass
class CRLB:
    std: np.ndarray
    singular: bool = False
    unreliable: np.ndarray = field(default_factory=lambda: np.zeros(0, bool))


@dataclass
class FitResult:
    theta: np.ndarray
    n_metabolites: int
    rss: float
    crlb: np.ndarray
    iterations: int
    grad_norm: float
    status: str
    crlb_unreliable: np.ndarray | None = None
    message: str = ""

    @property
    def converged(self) -> bool:
        return self.status in ("gtol", "xtol")

    @property
    def params(self) -> ParameterVector:
        return ParameterVector.from_array(self.theta, self.n_metabolites)


def _lower_bounds(m: int, n_par: int) -> np.ndarray:
    lb = np.full(n_par, -np.inf)
    lb[:m] = 0.0
    lb[m:m + 2] = 0.0  # gamma, sigma_g
    return lb


class _Jacobian:
    """Reverse-mode Jacobian of the stacked window residual, one row per replica."""

    def __init__(self, basis: BasisSet, order: int, window: slice):
        t = Tape(check_finite=False)
        theta = t.input("theta")
        sel = t.input("sel", requires_grad=False)
        X_re, X_im = forward_on_tape(t, theta, basis, order, window)
        t.mark_output("out", t.sum(t.concat([X_re, X_im], axis=-1) * sel))
        self.tape = t
        self.n_rows = 2 * (window.stop - window.start)

    def __call__(self, theta: np.ndarray, chunk: int) -> np.ndarray:
        rows = []
        eye = np.eye(self.n_rows)
        for s in range(0, self.n_rows, chunk):
            sel = eye[s:s + chunk]
            self.tape.forward({"theta": np.broadcast_to(theta, (sel.shape[0], theta.size)), "sel": sel})
            rows.append(self.tape.backward("out")["theta"])
        return np.concatenate(rows)


_local = threading.local()


def _jacobian_for(basis: BasisSet, order: int, window: slice) -> _Jacobian:
    cache = getattr(_local, "cache", None)
    if cache is None:
        cache = _local.cache = {}
    key = (id(basis), basis.fingerprint(), order, window.start, window.stop)
    if key not in cache:
        cache[key] = _Jacobian(basis, order, window)
    return cache[key]


def _stack(X: np.ndarray) -> np.ndarray:
    return np.concatenate([X.real, X.imag], axis=-1)


def _model(theta, basis, window) -> np.ndarray:
    return _stack(forward_model_batch(theta[None], basis)[0, window])


def jacobian(theta, basis: BasisSet, window: slice | None = None, chunk: int = 256) -> np.ndarray:
    """d(stacked window spectrum)/d(theta) as a (2 Nc, P) matrix."""
    theta = np.asarray(theta.to_array() if isinstance(theta, ParameterVector) else theta, dtype=np.float64)
    m = basis.n_metabolites
    order = (theta.size - m - 5) // 2 + 1
    window = window or slice(0, basis.grid.n_points)
    return _jacobian_for(basis, order, window)(theta, chunk)


def initial_guess(y: np.ndarray, basis: BasisSet, window: slice, order: int,
                  priors: PriorRanges | None = None) -> np.ndarray:
    """Amplitudes and baseline from nonnegative least squares at mid-range lineshape."""
    m = basis.n_metabolites
    names = parameter_names(basis.names, order)
    priors = priors or PriorRanges.default(basis.names, order)
    if list(priors.names) != names:
        raise ValueError("prior ranges do not match the basis and baseline order")
    theta = priors.midpoint.copy()
    cols = []
    for j in range(m):
        th = theta.copy()
        th[:m] = 0.0
        th[j] = 1.0
        th[m + 5:] = 0.0
        cols.append(_model(th, basis, window))
    nb = 2 * (order - 1)
    if nb:
        cheb = chebyshev_matrix(basis.grid, order)[:, window]
        zeros = np.zeros_like(cheb)
        for k in range(order - 1):
            re = np.concatenate([cheb[k], zeros[k]])
            im = np.concatenate([zeros[k], cheb[k]])
            cols += [re, -re, im, -im]
    A = np.stack(cols, axis=1)
    coef, _ = nnls(A, y, maxiter=50 * A.shape[1])
    theta[:m] = coef[:m]
    if nb:
        pm = coef[m:].reshape(order - 1, 4)
        theta[m + 5::2] = pm[:, 0] - pm[:, 1]
        theta[m + 6::2] = pm[:, 2] - pm[:, 3]
    return theta


def _as_array(x_hat) -> tuple[np.ndarray, float | None]:
    if isinstance(x_hat, Spectrum):
        return x_hat.data, x_hat.noise_sigma
    return np.asarray(x_hat), None


def lc_fit(x_hat, basis: BasisSet, init: ParameterVector | np.ndarray | None = None,
           options: FitOptions | None = None) -> FitResult:
    """Levenberg-Marquardt fit of the signal model to one spectrum."""
    opt = options or FitOptions()
    data, known_sigma = _as_array(x_hat)
    if data.shape != (basis.grid.n_points,):
        raise ValueError(f"spectrum length {data.shape} does not match the basis grid")
    window = crop_indices(basis.grid, *opt.crop_ppm)
    y = _stack(data[window])
    m = basis.n_metabolites
    if init is None:
        x = initial_guess(y, basis, window, opt.order, opt.priors)
    else:
        x = np.array(init.to_array() if isinstance(init, ParameterVector) else init, dtype=np.float64)
    n_par = x.size
    order = (n_par - m - 5) // 2 + 1
    lb = _lower_bounds(m, n_par)
    if np.any(x < lb):
        raise ValueError("initial point violates the nonnegativity bounds")
    free = np.ones(n_par, bool) if opt.free is None else np.asarray(opt.free, bool)
    jac = _jacobian_for(basis, order, window)

    r = _model(x, basis, window) - y
    cost = float(r @ r)
    lam = opt.lambda0
    status, it, gnorm = "max_iter", 0, np.inf
    fidx = np.flatnonzero(free)
    while it < opt.max_iter:
        J = jac(x, opt.jac_chunk)[:, fidx]
        g = J.T @ r
        # variables pinned at a bound with the gradient pushing outward are held
        active = (x[fidx] <= lb[fidx]) & (g > 0)
        g_proj = np.where(active, 0.0, g)
        gnorm = float(np.max(np.abs(g_proj))) if g.size else 0.0
        if gnorm < opt.gtol:
            status = "gtol"
            break
        it += 1
        keep = ~active
        Jk, gk = J[:, keep], g[keep]
        A = Jk.T @ Jk
        d = np.maximum(np.diag(A), 1e-12 * max(np.max(np.diag(A)), 1e-300))
        accepted = False
        while lam < 1e16:
            try:
                delta = np.linalg.solve(A + lam * np.diag(d), -gk)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            x_new = x.copy()
            x_new[fidx[keep]] += delta
            x_new = np.maximum(x_new, lb)
            r_new = _model(x_new, basis, window) - y
            cost_new = float(r_new @ r_new)
            if cost_new <= cost:
                step = x_new - x
                x, r, cost = x_new, r_new, cost_new
                lam = max(lam / 3.0, 1e-12)
                accepted = True
                break
            lam *= 4.0
        if not accepted:
            status = "stalled"
            break
        if np.linalg.norm(step) < opt.xtol * (np.linalg.norm(x) + opt.xtol):
            status = "xtol"
            break
    sigma = opt.noise_sigma or known_sigma
    if sigma is None:
        dof = max(y.size - int(free.sum()), 1)
        sigma = np.sqrt(cost / dof) if cost > 0 else 0.0
    bound = crlb(x, basis, sigma, free=free, window=window) if sigma > 0 else CRLB(np.zeros(n_par))
    return FitResult(x, m, cost, bound.std, it, gnorm, status, bound.unreliable)


def crlb(theta, basis: BasisSet, noise_sigma: float, free=None, window: slice | None = None,
         crop_ppm: tuple[float, float] | None = None) -> CRLB:
    """sqrt(diag(F^-1)) with F = J^T J / sigma^2 over the free parameters.

    A singular Fisher matrix falls back to the pseudo-inverse and flags the
    parameters that touch its null space.  Fixed parameters get 0.
    """
    if noise_sigma <= 0:
        raise ValueError("noise_sigma must be positive")
    theta = np.asarray(theta.to_array() if isinstance(theta, ParameterVector) else theta, dtype=np.float64)
    if window is None:
        window = crop_indices(basis.grid, *crop_ppm) if crop_ppm else slice(0, basis.grid.n_points)
    free = np.ones(theta.size, bool) if free is None else np.asarray(free, bool)
    J = jacobian(theta, basis, window)[:, free]
    F = J.T @ J / noise_sigma ** 2
    # eigen-analysis on the unit-diagonal form so that parameter units do not matter
    scale = np.sqrt(np.diag(F))
    dead = scale == 0
    scale = np.where(dead, 1.0, scale)
    w, V = np.linalg.eigh(F / np.outer(scale, scale))
    null = w <= 1e-12 * max(w.max(initial=0.0), 1e-300) * F.shape[0]
    singular = bool(np.any(null) or np.any(dead))
    inv_w = np.where(null, 0.0, 1.0 / np.where(null, 1.0, w))
    cov = (V * inv_w) @ V.T / np.outer(scale, scale)
    std = np.zeros(theta.size)
    std[free] = np.sqrt(np.maximum(np.diag(cov), 0.0))
    unreliable = np.zeros(theta.size, bool)
    if singular:
        unreliable[free] = np.any(np.abs(V[:, null]) > 1e-6, axis=1) | dead
        log.info("singular Fisher matrix; pseudo-inverse used for %d parameters", int(unreliable.sum()))
    return CRLB(std, singular, unreliable)


def fit_batch(spectra, basis: BasisSet, options: FitOptions | None = None, inits=None,
              threads: int | None = None) -> list[FitResult]:
    """Fit each spectrum independently; failures become ``status='error'`` results."""
    spectra = list(spectra)
    if not spectra:
        return []
    inits = list(inits) if inits is not None else [None] * len(spectra)
    n_par = basis.n_metabolites + 5 + 2 * ((options or FitOptions()).order - 1)

    def one(i):
        try:
            return lc_fit(spectra[i], basis, inits[i], options)
        except Exception as exc:  # collected per item
            nan = np.full(n_par, np.nan)
            return FitResult(nan, basis.n_metabolites, np.nan, nan, 0, np.nan, "error", message=str(exc))

    threads = threads or os.cpu_count() or 1
    if threads == 1:
        return [one(i) for i in range(len(spectra))]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, range(len(spectra))))
