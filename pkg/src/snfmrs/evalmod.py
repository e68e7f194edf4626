"""Accuracy, fit quality and calibration metrics, plus report writers."""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .inference.model import SNFModel, elbo
from .inference.posterior import PosteriorDraws, sample_posterior_batch
from .simulator import SimConfig, simulate_arrays, stream

log = logging.getLogger(__name__)

DEFAULT_NOMINAL = np.round(np.arange(1, 100) / 100.0, 2)


class MetricError(ValueError):
    pass


def _aligned(estimates, truths) -> tuple[np.ndarray, np.ndarray]:
    e = np.atleast_1d(np.asarray(estimates, dtype=np.float64))
    t = np.atleast_1d(np.asarray(truths, dtype=np.float64))
    if e.shape != t.shape:
        raise MetricError(f"estimate shape {e.shape} != truth shape {t.shape}")
    if e.size == 0:
        raise MetricError("empty input")
    return e, t


def mae(estimates, truths) -> float:
    """Mean absolute error over every entry."""
    e, t = _aligned(estimates, truths)
    return float(np.mean(np.abs(e - t)))


def ccc_columns(estimates, truths) -> tuple[np.ndarray, np.ndarray]:
    """Lin's concordance per column; second value flags degenerate columns set to 1."""
    e, t = _aligned(estimates, truths)
    if e.ndim == 1:
        e, t = e[:, None], t[:, None]
    if e.shape[0] < 2:
        raise MetricError("concordance needs at least two samples")
    me, mt = e.mean(0), t.mean(0)
    cov = ((e - me) * (t - mt)).mean(0)
    denom = e.var(0) + t.var(0) + (me - mt) ** 2
    flagged = denom == 0
    out = np.where(flagged, 1.0, 2 * cov / np.where(flagged, 1.0, denom))
    if np.any(flagged):
        log.warning("concordance of constant, identical columns set to 1")
    return out, flagged


def ccc(estimates, truths) -> float:
    """Lin's concordance correlation, per column then averaged."""
    return float(np.mean(ccc_columns(estimates, truths)[0]))


def standard_error(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    return float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0


def jackknife_se(stat, *arrays) -> float:
    """Leave-one-out standard error of ``stat`` over the rows of ``arrays``."""
    n = arrays[0].shape[0]
    if n < 3:
        return 0.0
    keep = ~np.eye(n, dtype=bool)
    vals = np.array([stat(*(a[keep[i]] for a in arrays)) for i in range(n)])
    return float(np.sqrt((n - 1) / n * np.sum((vals - vals.mean()) ** 2)))


def point_estimate(draws: PosteriorDraws, kind: str = "mean", bins: int = 50) -> np.ndarray:
    if kind == "mean":
        return draws.mean()
    if kind == "median":
        return draws.median()
    if kind == "mode":
        out = np.empty(draws.theta.shape[1])
        for j in range(out.size):
            counts, edges = np.histogram(draws.theta[:, j], bins=bins)
            k = int(np.argmax(counts))
            out[j] = 0.5 * (edges[k] + edges[k + 1])
        return out
    raise MetricError(f"unknown point estimator {kind!r}")


def elbo_metrics(model: SNFModel, spectra, n_mc: int = 16, beta: float = 10.0, seed: int = 0) -> dict:
    """Negative ELBO, RSS (reconstruction term) and KL term: mean and standard error."""
    X = np.atleast_2d(np.asarray(spectra))
    noise = stream(seed, "elbo-metrics").standard_normal((X.shape[0], n_mc, model.dim))
    res = elbo(model, X, n_mc=n_mc, beta=beta, noise=noise)
    out = {}
    for key, vals in (("neg_elbo", res.loss), ("rss", res.recon), ("kl", res.kl)):
        out[key] = float(np.mean(vals))
        out[key + "_se"] = standard_error(vals)
    return out


# -- calibration --------------------------------------------------------------

@dataclass
class CalibrationCurve:
    nominal: np.ndarray
    coverage: np.ndarray       # (len(nominal), n_params)
    names: list[str]
    n_spectra: int

    def __post_init__(self):
        if np.any(np.diff(self.nominal) <= 0):
            raise MetricError("nominal grid must be strictly increasing")

    def to_rows(self, method: str = "") -> list[list]:
        rows = []
        for i, a in enumerate(self.nominal):
            for j, name in enumerate(self.names):
                rows.append([method, name, float(a), float(self.coverage[i, j])])
        return rows


def calibration(draws: list[PosteriorDraws], truths, nominal=DEFAULT_NOMINAL, columns=None,
                names: list[str] | None = None) -> CalibrationCurve:
    """Fraction of truths inside the central posterior interval at each nominal level."""
    nominal = np.asarray(nominal, dtype=np.float64)
    if np.any((nominal <= 0) | (nominal >= 1)):
        raise MetricError("nominal coverage must lie in (0, 1)")
    truths = np.atleast_2d(np.asarray(truths, dtype=np.float64))
    if len(draws) != truths.shape[0]:
        raise MetricError("one truth row per posterior is required")
    columns = list(range(truths.shape[1])) if columns is None else list(columns)
    need = int(np.ceil(1.0 / (1.0 - nominal.max())))
    inside = np.zeros((nominal.size, len(columns)))
    lo_q, hi_q = (1 - nominal) / 2, (1 + nominal) / 2
    for d, t in zip(draws, truths):
        if len(d) < need:
            raise MetricError(f"{len(d)} draws cannot resolve a {nominal.max():.0%} interval (need {need})")
        x = d.theta[:, columns]
        lo = np.quantile(x, lo_q, axis=0)
        hi = np.quantile(x, hi_q, axis=0)
        inside += (t[columns] >= lo) & (t[columns] <= hi)
    if names is None:
        names = [draws[0].names[c] for c in columns] if draws else [str(c) for c in columns]
    return CalibrationCurve(nominal, inside / max(len(draws), 1), names, len(draws))


# -- pairplots ----------------------------------------------------------------

def pairplot_data(draws: PosteriorDraws, columns=None, bins: int = 30, n_scatter: int = 500,
                  seed: int = 0) -> dict:
    """Histogram marginals, Pearson correlations and a scatter subsample."""
    if len(draws) == 0:
        raise MetricError("no draws")
    columns = list(range(draws.theta.shape[1])) if columns is None else list(columns)
    x = draws.theta[:, columns]
    names = [draws.names[c] for c in columns]
    marg = {}
    for j, n in enumerate(names):
        counts, edges = np.histogram(x[:, j], bins=bins)
        marg[n] = {"counts": counts.tolist(), "edges": edges.tolist()}
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.atleast_2d(np.corrcoef(x, rowvar=False))
    rng = stream(seed, "pairplot")
    pick = np.sort(rng.choice(len(draws), min(n_scatter, len(draws)), replace=False))
    return {"names": names, "marginals": marg, "corr": corr, "scatter": x[pick]}


def write_pairplot(bundle: dict, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = bundle["names"]
    with open(out / "corr.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([""] + names)
        for n, row in zip(names, bundle["corr"]):
            w.writerow([n] + [repr(float(v)) for v in row])
    with open(out / "scatter.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for row in bundle["scatter"]:
            w.writerow([repr(float(v)) for v in row])
    with open(out / "marginals.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["param", "bin_lo", "bin_hi", "count"])
        for n in names:
            m = bundle["marginals"][n]
            for k, c in enumerate(m["counts"]):
                w.writerow([n, repr(m["edges"][k]), repr(m["edges"][k + 1]), c])


# -- reports ------------------------------------------------------------------

METRIC_COLUMNS = ["method", "n", "mae", "mae_se", "neg_elbo", "neg_elbo_se", "rss", "rss_se",
                  "kl", "kl_se", "ccc", "ccc_se"]


@dataclass
class MetricReport:
    rows: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def add(self, method: str, estimates, truths, extra: dict | None = None) -> dict:
        e, t = _aligned(estimates, truths)
        per = np.mean(np.abs(e - t), axis=1)
        row = {"method": method, "n": int(e.shape[0]), "mae": float(per.mean()),
               "mae_se": standard_error(per), "ccc": ccc(e, t),
               "ccc_se": jackknife_se(lambda a, b: ccc(a, b), e, t)}
        row.update(extra or {})
        self.rows.append(row)
        return row

    def row(self, method: str) -> dict:
        return next(r for r in self.rows if r["method"] == method)

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in self.rows:
            w.writerow([_fmt(r.get(c, "")) for c in METRIC_COLUMNS])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def evaluate_model(report: MetricReport, method: str, model: SNFModel, spectra, truths,
                   n_draws: int = 1000, n_mc: int = 16, beta: float = 10.0, seed: int = 0,
                   estimator: str = "mean", columns=None) -> list[PosteriorDraws]:
    """Sample posteriors, add a metric row and return the draws."""
    m = model.basis.n_metabolites
    columns = list(range(m)) if columns is None else list(columns)
    draws = sample_posterior_batch(model, spectra, n_draws, seed=seed)
    est = np.array([point_estimate(d, estimator)[columns] for d in draws])
    extra = elbo_metrics(model, spectra, n_mc=n_mc, beta=beta, seed=seed)
    report.add(method, est, np.asarray(truths)[:, columns], extra)
    return draws


# -- linewidth sweep ------------------------------------------------------------

SWEEP_COLUMNS = ["gamma", "method", "metabolite", "mae", "std"]


def linewidth_sweep(sim: SimConfig, gammas, n: int, models: dict[str, SNFModel] | None = None,
                    fit_options=None, n_draws: int = 200, seed: int = 0) -> list[dict]:
    """Error and uncertainty per metabolite with gamma held at each grid value.

    ``std`` is the mean posterior standard deviation for models and the mean
    CRLB for the least-squares fitter (included when ``fit_options`` is given).
    """
    from .baseline_fit import fit_batch
    pr = sim.priors
    gi = pr.names.index("gamma")
    names = sim.basis.names
    m = len(names)
    rows = []
    for gamma in gammas:
        if not pr.lo[gi] <= gamma <= pr.hi[gi]:
            raise MetricError(f"gamma {gamma} lies outside the prior range")
        lo, hi = pr.lo.copy(), pr.hi.copy()
        lo[gi] = hi[gi] = gamma
        cell = SimConfig(sim.basis, type(pr)(pr.names, lo, hi, pr.n_metabolites, pr.snr_db),
                         sim.batch_size, sim.val_size, sim.val_period, sim.seed, sim.noise_sigma)
        data = simulate_arrays(cell, n, "sweep", 0)
        truth = data.thetas[:, :m]
        for label, model in (models or {}).items():
            draws = sample_posterior_batch(model, data.noisy, n_draws, seed=seed)
            est = np.array([d.mean()[:m] for d in draws])
            sd = np.array([d.std()[:m] for d in draws])
            for j, name in enumerate(names):
                rows.append({"gamma": float(gamma), "method": label, "metabolite": name,
                             "mae": float(np.mean(np.abs(est[:, j] - truth[:, j]))),
                             "std": float(np.mean(sd[:, j]))})
        if fit_options is not None:
            fits = fit_batch(list(data.noisy), sim.basis, fit_options, threads=1)
            est = np.array([f.theta[:m] for f in fits])
            sd = np.array([f.crlb[:m] for f in fits])
            for j, name in enumerate(names):
                rows.append({"gamma": float(gamma), "method": "LS", "metabolite": name,
                             "mae": float(np.mean(np.abs(est[:, j] - truth[:, j]))),
                             "std": float(np.mean(sd[:, j]))})
    return rows


def rows_to_csv(rows: list[dict], columns: list[str], path=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def calibration_csv(curves: dict[str, CalibrationCurve], path=None) -> str:
    rows = []
    for method, curve in curves.items():
        rows += [dict(zip(["method", "param", "nominal", "empirical"], r)) for r in curve.to_rows(method)]
    return rows_to_csv(rows, ["method", "param", "nominal", "empirical"], path)


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")
