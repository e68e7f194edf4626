"""Amortized encoder + Sylvester flows + physics decoder, and the ELBO."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..diffcore import Tape, TapeError
from ..simulator import PriorRanges
from ..spectral import BasisSet, crop_indices, forward_on_tape
from .flows import FlowShape, flow_on_tape, layer_from_lambda
from .latent import LatentMap

LOG2PI = np.log(2.0 * np.pi)


class ElboError(FloatingPointError):
    def __init__(self, message, components=None):
        super().__init__(message)
        self.components = components or {}


@dataclass
class ModelConfig:
    widths: tuple[int, ...] = (512, 256, 128)
    n_flows: int = 8
    flow_width: int = 128
    n_householder: int | None = None
    amortized: bool = True
    amp_link: str = "softplus"
    crop_ppm: tuple[float, float] = (0.5, 4.5)
    init_sigma: float = 1.0  # initial posterior std as a fraction of the prior std

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["crop_ppm"] = list(self.crop_ppm)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["widths"] = tuple(d.get("widths", (512, 256, 128)))
        d["crop_ppm"] = tuple(d.get("crop_ppm", (0.5, 4.5)))
        return cls(**d)


@dataclass
class ElboResult:
    """Per-spectrum negative-ELBO pieces, averaged over Monte Carlo draws."""

    loss: np.ndarray
    recon: np.ndarray
    logq0: np.ndarray
    logprior: np.ndarray
    sum_logdet: np.ndarray
    beta: float

    @property
    def kl(self) -> np.ndarray:
        return self.logq0 - self.logprior - self.sum_logdet

    def means(self) -> dict[str, float]:
        return {"loss": float(np.mean(self.loss)), "recon": float(np.mean(self.recon)),
                "kl": float(np.mean(self.kl)), "logq0": float(np.mean(self.logq0)),
                "logprior": float(np.mean(self.logprior)), "sum_logdet": float(np.mean(self.sum_logdet))}


class SNFModel:
    """Weights plus everything needed to rebuild the computation graphs."""

    def __init__(self, config: ModelConfig, basis: BasisSet, priors: PriorRanges,
                 params: dict[str, np.ndarray] | None = None, input_scale: float | None = None,
                 seed: int = 0):
        self.config = config
        self.basis = basis
        self.priors = priors
        self.order = priors.order
        self.latent = LatentMap(priors, config.amp_link)
        self.dim = self.latent.dim
        self.flow_shape = FlowShape.make(self.dim, config.flow_width, config.n_householder)
        self.crop = crop_indices(basis.grid, *config.crop_ppm)
        self.n_crop = self.crop.stop - self.crop.start
        self.input_scale = float(input_scale) if input_scale is not None else self._default_scale()
        self.params = params if params is not None else self.init_params(seed)
        self._graphs: dict[str, Tape] = {}

    # -- structure ----------------------------------------------------------

    @property
    def n_flows(self) -> int:
        return self.config.n_flows

    @property
    def lambda_size(self) -> int:
        return self.n_flows * self.flow_shape.layer_size

    @property
    def n_weights(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    @property
    def label(self) -> str:
        return "SNF" if self.n_flows > 0 else "VAE"

    def _default_scale(self) -> float:
        # Typical peak magnitude of a prior-midpoint spectrum in the fitting window.
        from ..spectral import forward_model_batch
        X = forward_model_batch(self.priors.midpoint[None, :], self.basis)[0, self.crop]
        peak = float(np.max(np.abs(X)))
        return peak if peak > 0 else 1.0

    def init_params(self, seed: int = 0) -> dict[str, np.ndarray]:
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), 7])))
        p: dict[str, np.ndarray] = {}
        fan = 2 * self.n_crop + 1
        for i, w in enumerate(self.config.widths):
            lim = 1.0 / np.sqrt(fan)
            p[f"W{i}"] = rng.uniform(-lim, lim, size=(fan, w))
            p[f"b{i}"] = np.zeros((1, w))
            fan = w
        lim = 1.0 / np.sqrt(fan)
        d = self.dim
        p["W_mu"] = rng.uniform(-lim, lim, size=(fan, d)) * 0.1
        p["b_mu"] = self.latent.prior.mean[None, :].copy()
        p["W_ls"] = rng.uniform(-lim, lim, size=(fan, d)) * 0.01
        p["b_ls"] = np.log(self.latent.prior.std * self.config.init_sigma)[None, :]
        if self.n_flows:
            lam0 = self._initial_lambda(rng)
            if self.config.amortized:
                p["W_lam"] = rng.uniform(-lim, lim, size=(fan, self.lambda_size)) * 1e-3
                p["b_lam"] = lam0[None, :]
            else:
                p["lam"] = lam0[None, :]
        return p

    def _initial_lambda(self, rng) -> np.ndarray:
        # Near-identity flows: tiny R, Rt, b; random (nonzero) Householder vectors.
        shape = self.flow_shape
        off = shape.offsets()
        out = []
        for _ in range(self.n_flows):
            lam = rng.normal(scale=1e-2, size=shape.layer_size)
            lam[off["v"]] = rng.normal(size=off["v"].stop - off["v"].start)
            out.append(lam)
        return np.concatenate(out)

    # -- graphs -------------------------------------------------------------

    def graph(self, kind: str = "elbo") -> Tape:
        if kind not in self._graphs:
            self._graphs[kind] = self._build(kind)
        return self._graphs[kind]

    def _build(self, kind: str) -> Tape:
        t = Tape()
        P = {name: t.input(name) for name in self.params}
        h = t.input("x_feat", requires_grad=False)
        for i in range(len(self.config.widths)):
            h = t.tanh(h @ P[f"W{i}"] + P[f"b{i}"])
        mu = h @ P["W_mu"] + P["b_mu"]
        ls = h @ P["W_ls"] + P["b_ls"]
        t.mark_output("mu", mu)
        t.mark_output("logsigma", ls)
        lam = None
        if self.n_flows:
            lam = h @ P["W_lam"] + P["b_lam"] if self.config.amortized else P["lam"]
            t.mark_output("lambda", lam)
        if kind == "encode":
            return t

        noise = t.input("noise", requires_grad=False)  # (B, S, D)
        mu3, ls3 = mu[:, None, :], ls[:, None, :]
        sig3 = t.exp(ls3)
        theta0 = mu3 + sig3 * noise
        u = (theta0 - mu3) / sig3
        logq0 = t.sum(u * u * -0.5 - ls3, axis=-1) - 0.5 * self.dim * LOG2PI
        z = theta0
        sum_logdet = None
        if self.n_flows:
            lam3 = lam[:, None, :]
            size = self.flow_shape.layer_size
            for k in range(self.n_flows):
                z, ld = flow_on_tape(t, z, lam3[..., k * size:(k + 1) * size], self.flow_shape)
                sum_logdet = ld if sum_logdet is None else sum_logdet + ld
        prior = self.latent.prior
        v = (z - prior.mean) * (1.0 / prior.std)
        logprior = t.sum(v * v * -0.5, axis=-1) - float(np.sum(np.log(prior.std)) + 0.5 * self.dim * LOG2PI)
        theta = self.latent.on_tape(t, z)
        logqk = logq0 if sum_logdet is None else logq0 - sum_logdet
        for name, node in [("theta0", theta0), ("thetaK", z), ("theta", theta), ("logq0", logq0),
                           ("logprior", logprior), ("logqK", logqk)]:
            t.mark_output(name, node)
        if sum_logdet is not None:
            t.mark_output("sum_logdet", sum_logdet)
        if kind == "sample":
            return t

        beta = t.input("beta", requires_grad=False)
        x_re, x_im = t.input("x_re", False), t.input("x_im", False)
        X_re, X_im = forward_on_tape(t, theta, self.basis, self.order, self.crop)
        r_re = X_re - x_re[:, None, :]
        r_im = X_im - x_im[:, None, :]
        recon = t.sum(r_re * r_re + r_im * r_im, axis=-1)
        kl = logq0 - logprior if sum_logdet is None else logq0 - logprior - sum_logdet
        loss = recon + beta * kl
        t.mark_output("recon", recon)
        t.mark_output("loss", loss)
        t.mark_output("loss_sum", t.sum(loss))
        return t

    # -- evaluation helpers ---------------------------------------------------

    def crop_input(self, spectra) -> tuple[np.ndarray, np.ndarray]:
        """Real/imag channels of the fitting window for full-length spectra (B, N)."""
        X = np.atleast_2d(np.asarray(spectra))
        if X.shape[-1] == self.basis.grid.n_points:
            X = X[:, self.crop]
        elif X.shape[-1] != self.n_crop:
            raise ValueError(f"spectra of length {X.shape[-1]} fit neither the grid nor the crop window")
        return np.ascontiguousarray(X.real), np.ascontiguousarray(X.imag)

    def features(self, x_re: np.ndarray, x_im: np.ndarray) -> np.ndarray:
        """Encoder input: window scaled by its own peak magnitude, plus the log peak."""
        peak = np.max(np.hypot(x_re, x_im), axis=-1, keepdims=True)
        peak = np.where(peak > 0, peak, self.input_scale)
        return np.concatenate([x_re / peak, x_im / peak, np.log(peak / self.input_scale)], axis=-1)

    def feed(self, spectra, noise=None, beta=None, params=None) -> dict:
        x_re, x_im = self.crop_input(spectra)
        feed = dict(params if params is not None else self.params)
        feed["x_feat"] = self.features(x_re, x_im)
        feed["x_re"], feed["x_im"] = x_re, x_im
        if noise is not None:
            feed["noise"] = noise
        if beta is not None:
            feed["beta"] = np.float64(beta)
        return feed

    def encode(self, spectra) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
        """Base-Gaussian mean, std and flow parameters for each spectrum."""
        out = self.graph("encode").forward(self.feed(spectra))
        lam = out.get("lambda")
        if lam is not None and lam.shape[0] == 1 and out["mu"].shape[0] > 1:
            lam = np.broadcast_to(lam, (out["mu"].shape[0], lam.shape[1]))
        return out["mu"], np.exp(out["logsigma"]), lam

    def layers(self, lam_row: np.ndarray):
        size = self.flow_shape.layer_size
        return [layer_from_lambda(lam_row[k * size:(k + 1) * size], self.flow_shape) for k in range(self.n_flows)]

    def copy(self, params=None) -> "SNFModel":
        other = SNFModel(self.config, self.basis, self.priors,
                         {k: v.copy() for k, v in (params or self.params).items()}, self.input_scale)
        return other


def prior_model(model: SNFModel) -> SNFModel:
    """Pseudo-model whose posterior is the prior: zero weights, K = 0."""
    cfg = ModelConfig(**{**model.config.to_dict(), "n_flows": 0, "widths": tuple(model.config.widths)})
    cfg.crop_ppm = tuple(cfg.crop_ppm)
    pm = SNFModel(cfg, model.basis, model.priors, input_scale=model.input_scale)
    for k in pm.params:
        pm.params[k] = np.zeros_like(pm.params[k])
    pm.params["b_mu"] = model.latent.prior.mean[None, :].copy()
    pm.params["b_ls"] = np.log(model.latent.prior.std)[None, :]
    return pm


def elbo(model: SNFModel, spectra, n_mc: int = 1, beta: float = 10.0, noise=None,
         rng: np.random.Generator | None = None, params=None, chunk: int = 256) -> ElboResult:
    """Monte Carlo negative ELBO and its pieces for each spectrum."""
    X = np.atleast_2d(np.asarray(spectra))
    n = X.shape[0]
    if noise is None:
        rng = rng or np.random.default_rng(0)
        noise = rng.standard_normal((n, n_mc, model.dim))
    tape = model.graph("elbo")
    parts = {k: [] for k in ("loss", "recon", "logq0", "logprior", "sum_logdet")}
    for s in range(0, n, chunk):
        try:
            out = tape.forward(model.feed(X[s:s + chunk], noise[s:s + chunk], beta, params))
        except TapeError as exc:
            raise ElboError(f"non-finite ELBO: {exc}") from exc
        for k in parts:
            v = out.get(k)
            if v is None:
                v = np.zeros_like(out["logq0"])
            parts[k].append(v.mean(axis=1))
    res = ElboResult(**{k: np.concatenate(v) for k, v in parts.items()}, beta=float(beta))
    if not np.all(np.isfinite(res.loss)):
        raise ElboError("non-finite ELBO", res.means())
    return res


def loss_and_grad(model: SNFModel, params: dict, spectra, noise, beta: float):
    """Mean negative ELBO over the batch and its gradient for every weight."""
    tape = model.graph("elbo")
    out = tape.forward(model.feed(spectra, noise, beta, params))
    count = out["loss"].size
    grads = tape.backward("loss_sum", seed=np.float64(1.0 / count))
    loss = float(out["loss_sum"]) / count
    return loss, {k: grads[k] for k in params}, out
