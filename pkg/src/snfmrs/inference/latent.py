"""Map between the latent space of the flow and physical parameters.

Only parameters with a non-degenerate prior range are latent; fixed ones are
constants.  Non-amplitude coordinates are standardized
(``theta = mid + width/sqrt(12) * z``) so the latent prior is N(0, 1).
Amplitudes go through ``scale * softplus(z)`` with ``scale = mid / ln 2`` so
that ``z = 0`` lands on the range midpoint; their latent prior std is the
physical std divided by the link slope at 0.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..diffcore import Node, Tape
from ..simulator import PriorRanges

LN2 = np.log(2.0)


@dataclass
class PriorSpec:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        if np.any(self.std <= 0):
            raise ValueError("prior std must be positive")

    def logpdf(self, z: np.ndarray) -> np.ndarray:
        u = (z - self.mean) / self.std
        return np.sum(-0.5 * u * u - np.log(self.std) - 0.5 * np.log(2 * np.pi), axis=-1)


def _softplus(x):
    return np.logaddexp(0.0, x)


def _softplus_inv(y):
    y = np.asarray(y, dtype=np.float64)
    # log(expm1(y)) without overflow for large y
    big = y + np.log1p(-np.exp(-np.clip(y, 30, 700)))
    with np.errstate(divide="ignore"):
        small = np.log(np.expm1(np.minimum(y, 30)))
    return np.where(y > 30, big, small)


class LatentMap:
    def __init__(self, priors: PriorRanges, amp_link: str = "softplus"):
        if amp_link not in ("softplus", "identity"):
            raise ValueError(f"unknown amplitude link {amp_link!r}")
        self.priors = priors
        self.amp_link = amp_link
        self.free = np.flatnonzero(~priors.fixed)
        self.n_full = priors.lo.size
        self.dim = self.free.size
        mid = priors.midpoint
        width = priors.hi - priors.lo
        is_amp = np.arange(self.n_full) < priors.n_metabolites
        soft = is_amp & (amp_link == "softplus")
        self.soft_mask = soft[self.free].astype(np.float64)
        scale = np.where(soft, np.where(mid > 0, mid / LN2, 1.0), width / np.sqrt(12.0))
        self.center = np.where(soft, 0.0, mid)[self.free]
        self.scale = scale[self.free]
        self.fixed_theta = np.where(priors.fixed, priors.lo, 0.0)
        self.embed = np.zeros((self.dim, self.n_full))
        self.embed[np.arange(self.dim), self.free] = 1.0
        phys_std = (width / np.sqrt(12.0))[self.free]
        slope = np.where(self.soft_mask > 0, 0.5 * self.scale, self.scale)
        self.prior = PriorSpec(np.zeros(self.dim), phys_std / slope)

    @property
    def names(self) -> list[str]:
        return [self.priors.names[i] for i in self.free]

    def latent_to_theta(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        soft = self.scale * _softplus(z)
        lin = self.center + self.scale * z
        y = np.where(self.soft_mask > 0, soft, lin)
        return y @ self.embed + self.fixed_theta

    def theta_to_latent(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=np.float64)[..., self.free]
        soft = _softplus_inv(np.maximum(theta, 1e-300) / self.scale)
        lin = (theta - self.center) / self.scale
        return np.where(self.soft_mask > 0, soft, lin)

    def on_tape(self, tape: Tape, z: Node) -> Node:
        lin = z * self.scale + self.center
        if np.any(self.soft_mask):
            soft = tape.softplus(z) * (self.scale * self.soft_mask)
            y = soft + lin * (1.0 - self.soft_mask)
        else:
            y = lin
        return y @ self.embed + self.fixed_theta
