"""Householder Sylvester flow layers.

One layer maps ``z -> z + Q R tanh(Rt Q^T z + b)`` where ``Q`` (D x M) holds
the first M columns of a product of H Householder reflections and ``R``,
``Rt`` are M x M upper triangular.  The Jacobian determinant reduces to
``prod_i (1 + tanh'(h_i) R_ii Rt_ii)``.

Layers are packed into flat parameter vectors ("lambda") so that an encoder
head can emit them per input spectrum.  Per layer the vector holds::

    [R diag (M) | R upper (M(M-1)/2) | Rt diag (M) | Rt upper | V (H*D) | b (M)]

Raw diagonals pass through ``DIAG_BOUND * tanh`` which keeps
``|R_ii Rt_ii| < 1`` and therefore every layer invertible.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..diffcore import Node, Tape

DIAG_BOUND = 0.97


class FlowSingularityError(ArithmeticError):
    pass


@dataclass(frozen=True)
class FlowShape:
    dim: int
    bottleneck: int
    n_householder: int

    @classmethod
    def make(cls, dim: int, width: int = 128, n_householder: int | None = None) -> "FlowShape":
        m = min(dim, width)
        return cls(dim, m, m if n_householder is None else n_householder)

    @property
    def n_upper(self) -> int:
        return self.bottleneck * (self.bottleneck - 1) // 2

    @property
    def layer_size(self) -> int:
        m = self.bottleneck
        return 3 * m + 2 * self.n_upper + self.n_householder * self.dim

    def offsets(self) -> dict[str, slice]:
        m, nu, hd = self.bottleneck, self.n_upper, self.n_householder * self.dim
        sizes = [("r_diag", m), ("r_up", nu), ("rt_diag", m), ("rt_up", nu), ("v", hd), ("b", m)]
        out, pos = {}, 0
        for name, size in sizes:
            out[name] = slice(pos, pos + size)
            pos += size
        return out


@dataclass
class SylvesterLayer:
    R: np.ndarray    # (M, M) upper triangular
    Rt: np.ndarray   # (M, M) upper triangular
    V: np.ndarray    # (H, D) Householder vectors, nonzero
    b: np.ndarray    # (M,)

    @property
    def shape(self) -> FlowShape:
        return FlowShape(self.V.shape[1], self.R.shape[0], self.V.shape[0])


def householder_q(V: np.ndarray, m: int | None = None) -> np.ndarray:
    """Product H_1 H_2 ... H_H of reflections I - 2 v v^T / |v|^2, first m columns."""
    V = np.asarray(V, dtype=np.float64)
    d = V.shape[-1]
    Q = np.broadcast_to(np.eye(d), V.shape[:-2] + (d, d)).copy()
    for h in range(V.shape[-2]):
        v = V[..., h, :]
        v = v / np.linalg.norm(v, axis=-1, keepdims=True)
        # Q <- Q (I - 2 v v^T)
        Qv = np.einsum("...ij,...j->...i", Q, v)
        Q = Q - 2.0 * Qv[..., :, None] * v[..., None, :]
    return Q if m is None else Q[..., :m]


def flow_apply(z: np.ndarray, layer: SylvesterLayer) -> tuple[np.ndarray, np.ndarray]:
    """Apply one layer to ``z`` (..., D); returns (z', log|det J|)."""
    m = layer.R.shape[0]
    Q = householder_q(layer.V, m)
    h = (z @ Q) @ layer.Rt.T + layer.b
    th = np.tanh(h)
    z_new = z + (th @ layer.R.T) @ Q.T
    diag = 1.0 + (1.0 - th * th) * np.diag(layer.R) * np.diag(layer.Rt)
    if np.any(np.abs(diag) < 1e-12):
        raise FlowSingularityError("layer Jacobian is singular (|1 + tanh'(h) R_ii Rt_ii| < 1e-12)")
    return z_new, np.sum(np.log(np.abs(diag)), axis=-1)


def flow_jacobian(z: np.ndarray, layer: SylvesterLayer) -> np.ndarray:
    m = layer.R.shape[0]
    Q = householder_q(layer.V, m)
    th = np.tanh(layer.Rt @ (Q.T @ z) + layer.b)
    return np.eye(z.size) + Q @ layer.R @ np.diag(1 - th ** 2) @ layer.Rt @ Q.T


def layer_from_lambda(lam: np.ndarray, shape: FlowShape) -> SylvesterLayer:
    """Decode one layer's flat parameter vector (raw diagonals are squashed)."""
    off = shape.offsets()
    m, d = shape.bottleneck, shape.dim
    iu = np.triu_indices(m, 1)
    R = np.zeros((m, m))
    Rt = np.zeros((m, m))
    R[iu] = lam[off["r_up"]]
    Rt[iu] = lam[off["rt_up"]]
    R[np.diag_indices(m)] = DIAG_BOUND * np.tanh(lam[off["r_diag"]])
    Rt[np.diag_indices(m)] = DIAG_BOUND * np.tanh(lam[off["rt_diag"]])
    V = lam[off["v"]].reshape(shape.n_householder, d)
    return SylvesterLayer(R, Rt, V, lam[off["b"]].copy())


def lambda_from_layer(layer: SylvesterLayer) -> np.ndarray:
    shape = layer.shape
    m = shape.bottleneck
    iu = np.triu_indices(m, 1)
    dr = np.diag(layer.R) / DIAG_BOUND
    drt = np.diag(layer.Rt) / DIAG_BOUND
    if np.any(np.abs(dr) >= 1) or np.any(np.abs(drt) >= 1):
        raise ValueError("diagonal entries exceed the invertibility bound")
    return np.concatenate([np.arctanh(dr), layer.R[iu], np.arctanh(drt), layer.Rt[iu],
                           layer.V.ravel(), layer.b])


def random_layer(rng: np.random.Generator, dim: int, bottleneck: int | None = None,
                 n_householder: int | None = None, scale: float = 1.0) -> SylvesterLayer:
    shape = FlowShape.make(dim, bottleneck or dim, n_householder)
    lam = rng.normal(scale=scale, size=shape.layer_size)
    return layer_from_lambda(lam, shape)


# -- tape -------------------------------------------------------------------

class _Embedders:
    """Constant scatter matrices turning (diag, upper) vectors into M x M."""

    def __init__(self, m: int):
        iu = np.triu_indices(m, 1)
        self.diag = np.zeros((m, m * m))
        self.diag[np.arange(m), np.arange(m) * (m + 1)] = 1.0
        self.upper = np.zeros((len(iu[0]), m * m))
        self.upper[np.arange(len(iu[0])), iu[0] * m + iu[1]] = 1.0


def flow_on_tape(tape: Tape, z: Node, lam: Node, shape: FlowShape) -> tuple[Node, Node]:
    """Record one layer.  ``lam`` (..., layer_size) must broadcast against ``z`` (..., D)."""
    off = shape.offsets()
    m, d, nh = shape.bottleneck, shape.dim, shape.n_householder
    emb = _Embedders(m)
    Ed, Eu = tape.const(emb.diag), tape.const(emb.upper)

    rd = tape.tanh(lam[..., off["r_diag"]]) * DIAG_BOUND
    rtd = tape.tanh(lam[..., off["rt_diag"]]) * DIAG_BOUND
    if m > 1:
        R = tape.reshape(rd @ Ed + lam[..., off["r_up"]] @ Eu, (Ellipsis, m, m))
        Rt = tape.reshape(rtd @ Ed + lam[..., off["rt_up"]] @ Eu, (Ellipsis, m, m))
    else:
        R = tape.reshape(rd, (Ellipsis, 1, 1))
        Rt = tape.reshape(rtd, (Ellipsis, 1, 1))

    if nh:
        V = tape.reshape(lam[..., off["v"]], (Ellipsis, nh, d))
        inv_norm = tape.exp(tape.log(tape.sum(V * V, axis=-1, keepdims=True)) * -0.5)
        Vn = V * inv_norm
        H = tape.const(np.eye(d)) - (Vn[..., :, :, None] * Vn[..., :, None, :]) * 2.0
        Q = H[..., 0, :, :]
        for h in range(1, nh):
            Q = Q @ H[..., h, :, :]
    else:
        Q = tape.const(np.eye(d))
    QM = Q[..., :, :m] if m < d else Q

    qtz = (z[..., None, :] @ QM)[..., 0, :]
    pre = (Rt @ qtz[..., :, None])[..., :, 0] + lam[..., off["b"]]
    th = tape.tanh(pre)
    Rh = (R @ th[..., :, None])
    z_new = z + (QM @ Rh)[..., :, 0]
    deriv = 1.0 - th * th
    logdet = tape.sum(tape.log(deriv * rd * rtd + 1.0), axis=-1)
    return z_new, logdet
