"""Posterior draws from a trained model."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import LOG2PI, SNFModel


@dataclass
class PosteriorDraws:
    """Draws for one spectrum.

    Attributes:
        latent: (n, D_z) flow outputs theta_K.
        theta: (n, P) physical parameter vectors, fixed coordinates included.
        logq: (n,) log q_K of each draw.
        logprior: (n,) latent prior log-density of each draw.
        names: physical parameter names, aligned with ``theta`` columns.
    """

    latent: np.ndarray
    theta: np.ndarray
    logq: np.ndarray
    logprior: np.ndarray
    names: list[str]

    def __post_init__(self):
        n = self.latent.shape[0]
        if not (self.theta.shape[0] == self.logq.shape[0] == self.logprior.shape[0] == n):
            raise ValueError("draw arrays disagree on the number of rows")
        if not (np.all(np.isfinite(self.logq)) and np.all(np.isfinite(self.logprior))):
            raise ValueError("non-finite log-density in posterior draws")

    def __len__(self):
        return self.latent.shape[0]

    def mean(self) -> np.ndarray:
        return self.theta.mean(axis=0)

    def median(self) -> np.ndarray:
        return np.median(self.theta, axis=0)

    def std(self) -> np.ndarray:
        return self.theta.std(axis=0, ddof=1) if len(self) > 1 else np.zeros(self.theta.shape[1])

    def corr(self, columns=None) -> np.ndarray:
        x = self.theta if columns is None else self.theta[:, columns]
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.atleast_2d(np.corrcoef(x, rowvar=False))


def reparameterize(mu, sigma, noise) -> np.ndarray:
    """theta0 = mu + sigma * noise."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    return np.asarray(mu) + sigma * np.asarray(noise)


def posterior_logq(theta0, logdets, mu, sigma) -> np.ndarray:
    """log q_K: base Gaussian log-density at theta0 minus the summed layer log-dets."""
    u = (np.asarray(theta0) - mu) / sigma
    logq0 = np.sum(-0.5 * u * u - np.log(sigma), axis=-1) - 0.5 * u.shape[-1] * LOG2PI
    total = np.zeros_like(logq0)
    for ld in logdets:
        total = total + ld
    return logq0 - total


def _draw_noise(n_spectra: int, n: int, dim: int, seed: int) -> np.ndarray:
    from ..simulator import stream
    return np.stack([stream(seed, "posterior", i).standard_normal((n, dim)) for i in range(n_spectra)])


def sample_posterior_batch(model: SNFModel, spectra, n: int, seed: int = 0,
                           noise: np.ndarray | None = None, chunk: int = 64) -> list[PosteriorDraws]:
    """``n`` draws for each spectrum in ``spectra`` (B, N)."""
    if n < 1:
        raise ValueError("need at least one draw")
    X = np.atleast_2d(np.asarray(spectra))
    if noise is None:
        noise = _draw_noise(X.shape[0], n, model.dim, seed)
    tape = model.graph("sample")
    out: list[PosteriorDraws] = []
    for s in range(0, X.shape[0], chunk):
        vals = tape.forward(model.feed(X[s:s + chunk], noise[s:s + chunk]))
        for j in range(vals["theta"].shape[0]):
            out.append(PosteriorDraws(vals["thetaK"][j], vals["theta"][j], vals["logqK"][j],
                                      vals["logprior"][j], list(model.priors.names)))
    return out


def sample_posterior(model: SNFModel, spectrum, n: int = 1000, seed: int = 0,
                     noise: np.ndarray | None = None) -> PosteriorDraws:
    X = np.asarray(spectrum)
    if noise is not None:
        noise = np.asarray(noise)[None]
    return sample_posterior_batch(model, X[None] if X.ndim == 1 else X[:1], n, seed, noise)[0]
