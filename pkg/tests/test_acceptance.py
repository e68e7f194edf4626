"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

The summary lines are printed at the end of the session by the hook in
``conftest.py``.  Criteria 6 to 10 share one trained toy SNF and its K=0
twin; training them dominates the runtime of this module.
"""
import hashlib
import time
from pathlib import Path

import numpy as np
import pytest
import yaml

from snfmrs import cli
from snfmrs.baseline_fit import FitOptions, crlb, lc_fit
from snfmrs.diffcore import finite_diff_check
from snfmrs.evalmod import calibration, elbo_metrics, linewidth_sweep, mae
from snfmrs.inference import (ModelConfig, TrainConfig, build_model, flow_apply, flow_jacobian,
                              householder_q, loss_and_grad, prior_model, random_layer,
                              sample_posterior_batch, train)
from snfmrs.simulator import PriorRanges, SimConfig, simulate_arrays
from snfmrs.spectral import (AcquisitionGrid, ParameterVector, crop_indices, dft, forward_model,
                             forward_model_batch, synthesize_basis)

from conftest import random_theta, singlets

RESULTS: list[str] = []


def report(n: int, ok: bool, detail: str) -> None:
    RESULTS.append(f"{'PASS' if ok else 'FAIL'} criterion {n:2d}: {detail}")
    assert ok, detail


def flat(params, names):
    return np.concatenate([params[k].ravel() for k in names])


def unflat(x, like, names):
    out, p = {}, 0
    for k in names:
        n = like[k].size
        out[k] = x[p:p + n].reshape(like[k].shape)
        p += n
    return out


# -- shared toy ---------------------------------------------------------------

BETA = 10.0
TOY_BATCHES = 20000
TOY_TEST = 500
TOY_DRAWS = 1000
PAIR_PPM = (3.20, 3.21)
SINGLET_PPM = 2.0


def toy_sim() -> SimConfig:
    grid = AcquisitionGrid(256, 1000.0, 297.2, 3.0)
    basis = synthesize_basis(singlets([*PAIR_PPM, SINGLET_PPM], amp=20.0, damping=5.0,
                                      names=["P1", "P2", "S"]), grid)
    # only amplitudes and gamma stay latent
    fixed = {k: (0.0, 0.0) for k in ("sigma_g", "eps_shift", "phi0", "phi1", "b")}
    priors = PriorRanges.default(basis.names, order=1, overrides=fixed)
    # noise variance beta/2 makes the fixed-variance likelihood the true one
    return SimConfig(basis, priors, batch_size=16, val_size=256, val_period=2000, seed=11,
                     noise_sigma=np.sqrt(BETA / 2))


@pytest.fixture(scope="session")
def toy():
    sim = toy_sim()
    cfg = TrainConfig(beta=BETA, lr=1e-4, batch_size=16, max_batches=TOY_BATCHES, val_period=2000,
                      seed=5, ema_decay=0.999)
    out = {"sim": sim}
    for label, k in (("SNF", 4), ("VAE", 0)):
        model = build_model(ModelConfig(n_flows=k), sim, seed=1)
        t0 = time.perf_counter()
        model, hist = train(cfg, sim, model=model)
        out[label] = model
        out[label + "_seconds"] = time.perf_counter() - t0
    test = simulate_arrays(sim, TOY_TEST, "test", 0)
    out["test"] = test
    out["draws"] = sample_posterior_batch(out["SNF"], test.noisy, TOY_DRAWS, seed=2)
    return out


# -- 1 ---------------------------------------------------------------------------

def test_c01_gradient(tiny_sim):
    t0 = time.perf_counter()
    m = build_model(ModelConfig(widths=(4, 4), n_flows=2, flow_width=4, n_householder=2), tiny_sim)
    x = simulate_arrays(tiny_sim, 3, "train", 0).noisy
    noise = np.random.default_rng(1).standard_normal((3, 2, m.dim))
    names = sorted(m.params)
    x0 = flat(m.params, names)
    _, grads, _ = loss_and_grad(m, m.params, x, noise, BETA)
    g0 = flat(grads, names)

    tape = m.graph("elbo")

    def f(v):
        out = tape.forward(m.feed(x, noise, BETA, unflat(v, m.params, names)))
        return float(out["loss_sum"]) / out["loss"].size

    rep = finite_diff_check(f, lambda v: g0, x0, step=1e-5, tolerance=1e-4, floor=1e-5 * np.max(np.abs(g0)))
    secs = time.perf_counter() - t0
    report(1, rep.max_rel_error < 1e-4 and secs < 30,
           f"max rel err {rep.max_rel_error:.2e} over {x0.size} weights (< 1e-4), {secs:.1f} s (< 30 s)")


# -- 2, 3 --------------------------------------------------------------------------

def numeric_logdet(z, layer, h=1e-6):
    cols = []
    for i in range(z.size):
        e = np.zeros_like(z)
        e[i] = h
        cols.append((flow_apply(z + e, layer)[0] - flow_apply(z - e, layer)[0]) / (2 * h))
    return np.linalg.slogdet(np.stack(cols, axis=1))[1]


def test_c02_logdet():
    rng = np.random.default_rng(20)
    worst = 0.0
    for _ in range(100):
        d = int(rng.integers(1, 9))
        layer = random_layer(rng, d, int(rng.integers(1, d + 1)), int(rng.integers(1, d + 1)))
        z = rng.normal(size=d)
        _, ld = flow_apply(z, layer)
        exact = np.linalg.slogdet(flow_jacobian(z, layer))[1]
        worst = max(worst, abs(ld - numeric_logdet(z, layer)), abs(ld - exact))
    report(2, worst < 1e-6, f"max |logdet - log|det J|| = {worst:.2e} over 100 layers, D <= 8 (< 1e-6)")


def test_c03_householder():
    rng = np.random.default_rng(30)
    worst = 0.0
    for _ in range(1000):
        d = int(rng.integers(1, 33))
        V = rng.normal(size=(int(rng.integers(1, d + 1)), d)) * rng.lognormal(0, 3)
        Q = householder_q(V)
        worst = max(worst, np.max(np.abs(Q.T @ Q - np.eye(d))))
    report(3, worst < 1e-10, f"max |Q^T Q - I| = {worst:.2e} over 1000 sets (< 1e-10)")


# -- 4 ------------------------------------------------------------------------------

def test_c04_physics():
    grid = AcquisitionGrid(256, 1000.0, 297.2, 3.0)
    basis = synthesize_basis(singlets([3.4, 2.6, 2.0]), grid)
    rng = np.random.default_rng(40)
    sup = 0.0
    for _ in range(20):
        t1 = random_theta(rng, 3)
        t2 = ParameterVector(rng.uniform(0, 2, 3), t1.gamma, t1.sigma_g, t1.eps_shift, t1.phi0, t1.phi1,
                             rng.uniform(-1, 1, 4))
        ts = ParameterVector(t1.a + t2.a, t1.gamma, t1.sigma_g, t1.eps_shift, t1.phi0, t1.phi1, t1.b + t2.b)
        X1, X2, Xs = (forward_model(t, basis).data for t in (t1, t2, ts))
        sup = max(sup, np.max(np.abs(Xs - X1 - X2)) / np.max(np.abs(Xs)))
    th = random_theta(rng, 3)
    th.b[:] = 0
    ref = np.abs(forward_model(th, basis).data)
    phase = 0.0
    for phi0, phi1 in rng.uniform(-3, 3, size=(10, 2)) * [1, 1e-3]:
        th.phi0, th.phi1 = phi0, phi1
        phase = max(phase, np.max(np.abs(np.abs(forward_model(th, basis).data) - ref)) / ref.max())
    t = grid.time_axis()
    fid = (th.a @ basis.signals) * np.exp(-(1j * th.eps_shift + th.gamma + th.sigma_g * t) * t)
    parseval = abs(np.sum(np.abs(fid) ** 2) - np.sum(np.abs(dft(fid)) ** 2)) / np.sum(np.abs(fid) ** 2)

    big = AcquisitionGrid(4096, 3000.0, 297.2, 4.65)
    d, gamma = 5.0, 10.0
    X = forward_model(ParameterVector([1.0], gamma), synthesize_basis(singlets([3.0], damping=d), big)).data
    f = big.freq_axis()
    re = X.real
    k = int(np.argmax(re))
    half = re[k] / 2
    r = k + int(np.argmax(re[k:] < half))
    l = k - int(np.argmax(re[k::-1] < half))
    fr = f[r - 1] + (half - re[r - 1]) / (re[r] - re[r - 1]) * (f[r] - f[r - 1])
    fl = f[l + 1] + (half - re[l + 1]) / (re[l] - re[l + 1]) * (f[l] - f[l + 1])
    hwhm_err = abs((fr - fl) / 2 - (d + gamma) / (2 * np.pi))
    bin_hz = big.bandwidth_hz / big.n_points
    ok = sup < 1e-12 and phase < 1e-12 and parseval < 1e-10 and hwhm_err <= bin_hz
    report(4, ok, f"superposition {sup:.1e} (< 1e-12), phase {phase:.1e}, Parseval {parseval:.1e} (< 1e-10), "
                  f"HWHM error {hwhm_err:.3f} Hz (<= {bin_hz:.3f} Hz bin)")


# -- 5 -------------------------------------------------------------------------------

def test_c05_crlb():
    grid = AcquisitionGrid(128, 1000.0, 297.2, 3.0)
    one = synthesize_basis(singlets([3.0], amp=2.0), grid)
    th1 = np.array([1.0, 5.0, 20.0, 3.0, 0.2, 1e-4])
    free1 = np.zeros(6, bool)
    free1[0] = True
    w = crop_indices(grid, 0.5, 4.5)
    sigma = 0.7
    S = forward_model_batch(th1[None], one)[0][w]
    closed = sigma / np.linalg.norm(np.r_[S.real, S.imag])
    oracle_err = abs(crlb(th1, one, sigma, free=free1, window=w).std[0] / closed - 1)

    two = synthesize_basis(singlets([3.6, 2.4], amp=3.0), grid)
    th = np.array([1.0, 0.8, 8.0, 0.0, 1.5, 0.1, 0.0])
    free = np.array([True, True, True, False, True, True, False])
    bound = crlb(th, two, sigma, free=free).std[:2]
    clean = forward_model_batch(th[None], two)[0]
    rng = np.random.default_rng(50)
    opts = FitOptions(order=1, free=free, noise_sigma=sigma)
    est = []
    for _ in range(500):
        y = clean + sigma * (rng.standard_normal(128) + 1j * rng.standard_normal(128))
        est.append(lc_fit(y, two, th, opts).theta[:2])
    ratio = np.std(est, axis=0, ddof=1) / bound
    ok = oracle_err < 1e-10 and np.all((ratio >= 0.9) & (ratio <= 1.5))
    report(5, ok, f"one-amplitude CRLB rel err {oracle_err:.1e} (< 1e-10); MC std / CRLB = "
                  f"{ratio[0]:.3f}, {ratio[1]:.3f} (in [0.9, 1.5])")


# -- 6 to 10: trained toy -------------------------------------------------------------

def test_c06_toy_convergence(toy):
    test = toy["test"]
    m = test.thetas.shape[1] and toy["sim"].basis.n_metabolites
    est = np.array([d.mean()[:m] for d in toy["draws"]])
    prior_mean = toy["sim"].priors.midpoint[:m]
    snf = mae(est, test.thetas[:, :m])
    base = mae(np.broadcast_to(prior_mean, est.shape), test.thetas[:, :m])
    secs = toy["SNF_seconds"]
    report(6, snf < 0.5 * base and secs < 1800,
           f"SNF MAE {snf:.4f} vs prior-mean MAE {base:.4f} (ratio {snf / base:.3f} < 0.5), "
           f"training {secs:.0f} s (< 1800 s)")


def test_c07_ordering(toy):
    x = toy["test"].noisy
    m = toy["sim"].basis.n_metabolites
    truth = toy["test"].thetas[:, :m]
    rows = {}
    for label, model in (("SNF", toy["SNF"]), ("VAE", toy["VAE"]), ("Prior", prior_model(toy["SNF"]))):
        met = elbo_metrics(model, x, n_mc=16, beta=BETA, seed=7)
        draws = toy["draws"] if label == "SNF" else sample_posterior_batch(model, x, TOY_DRAWS, seed=2)
        met["mae"] = mae(np.array([d.mean()[:m] for d in draws]), truth)
        rows[label] = met
    p = rows["Prior"]
    ratios = {k: (p["neg_elbo"] / rows[k]["neg_elbo"], p["mae"] / rows[k]["mae"]) for k in ("SNF", "VAE")}
    ok = all(r[0] >= 10 and r[1] >= 10 for r in ratios.values()) and rows["SNF"]["kl"] <= rows["VAE"]["kl"]
    detail = "; ".join(f"{k}: -ELBO {rows[k]['neg_elbo']:.1f}, MAE {rows[k]['mae']:.4f}, KL {rows[k]['kl']:.3f}"
                       for k in ("SNF", "VAE", "Prior"))
    detail += "; prior/model ratios " + ", ".join(f"{k} -ELBO x{r[0]:.1f} MAE x{r[1]:.1f}"
                                                  for k, r in ratios.items())
    report(7, ok, detail + " (ratios >= 10, KL SNF <= VAE)")


def test_c08_calibration(toy):
    m = toy["sim"].basis.n_metabolites
    nominal = np.array([0.1, 0.3, 0.5, 0.7, 0.9])
    curve = calibration(toy["draws"], toy["test"].thetas[:, :m], nominal, columns=range(m))
    gap = np.abs(curve.coverage - nominal[:, None])
    table = ", ".join(f"{a:.0%}->" + "/".join(f"{c:.2f}" for c in row) for a, row in zip(nominal, curve.coverage))
    report(8, np.max(gap) <= 0.10, f"coverage per amplitude {table}; max gap {np.max(gap):.3f} (<= 0.10)")


def test_c09_linewidth(toy):
    sim = toy["sim"]
    gi = sim.priors.names.index("gamma")
    gammas = np.linspace(sim.priors.lo[gi], sim.priors.hi[gi], 3)
    rows = linewidth_sweep(sim, gammas, 100, {"SNF": toy["SNF"]}, n_draws=500, seed=3)
    std = {(r["gamma"], r["metabolite"]): r["std"] for r in rows}
    pair = np.array([[std[(g, p)] for g in gammas] for p in ("P1", "P2")])
    single = std[(gammas[-1], "S")]
    ok = bool(np.all(np.diff(pair, axis=1) >= 0) and np.all(pair[:, -1] > single))
    report(9, ok, "pair std vs gamma " + "; ".join(
        f"{p}: " + ", ".join(f"{v:.4f}" for v in row) for p, row in zip(("P1", "P2"), pair))
        + f"; singlet at gamma={gammas[-1]:g}: {single:.4f}")


def test_c10_overlap_correlation(toy):
    draws = toy["draws"]
    # the sum is well determined when its posterior spread is small against its mean
    sums = [d.theta[:, 0] + d.theta[:, 1] for d in draws]
    keep = [i for i, s in enumerate(sums) if s.std() < 0.1 * s.mean()]
    r = np.array([draws[i].corr([0, 1])[0, 1] for i in keep])
    med = float(np.median(r))
    report(10, len(keep) > 0 and med <= -0.5,
           f"median Pearson r(P1, P2) = {med:.3f} over {len(keep)} spectra with a well-determined sum (<= -0.5)")


# -- 11 --------------------------------------------------------------------------------

def tree_hash(root: Path) -> str:
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_c11_determinism(tmp_path):
    cfg = tmp_path / "toy.yaml"
    cfg.write_text(yaml.safe_dump({
        "grid": {"n_points": 128, "bandwidth": 1000.0, "larmor": 297.2, "center_ppm": 3.0},
        "basis": {"metabolites": ["Cr", "NAA", "GPC"]},
        "priors": {"order": 1, "ranges": {"sigma_g": [0, 100]}, "noise_sigma": 0.5},
        "model": {"widths": [32, 16], "n_flows": 2},
        "train": {"max_batches": 20, "val_period": 10, "val_size": 32},
        "eval": {"n": 6, "draws": 200, "n_mc": 2, "sweep_n": 4, "sweep_draws": 50},
    }))
    hashes = []
    for run in ("a", "b"):
        d = tmp_path / run
        steps = [
            ["simulate", "--n", "6", "--out", d / "data"],
            ["train", "--out", d / "snf.ckpt"],
            ["infer", "--model", d / "snf.ckpt", "--in", d / "data", "--draws", "100", "--out", d / "post"],
            ["fit", "--in", d / "data", "--out", d / "fit.csv"],
            ["evaluate", "--model", d / "snf.ckpt", "--fit-results", d / "fit.csv", "--data", d / "data",
             "--out", d / "report"],
        ]
        for argv in steps:
            assert cli.main([str(a) for a in argv] + ["--config", str(cfg), "--seed", "4"]) == 0
        hashes.append(tree_hash(d))
    report(11, hashes[0] == hashes[1], f"output tree sha256 {hashes[0][:12]} vs {hashes[1][:12]}")


# -- 12 ---------------------------------------------------------------------------------

def test_c12_analytic_posterior():
    beta = 2.0
    grid = AcquisitionGrid(128, 1000.0, 297.2, 3.0)
    basis = synthesize_basis(singlets([3.05, 2.95, 2.2]), grid)
    # amplitudes kept away from zero, where a relative error has no scale
    fixed = {"gamma": (8.0, 8.0), "sigma_g": (0.0, 0.0), "eps_shift": (0.0, 0.0), "phi0": (0.0, 0.0),
             "phi1": (0.0, 0.0), "a": (0.5, 1.5)}
    priors = PriorRanges.default(basis.names, order=1, overrides=fixed)
    sim = SimConfig(basis, priors, seed=12, noise_sigma=np.sqrt(beta / 2))
    model = build_model(ModelConfig(widths=(64,), n_flows=0, amp_link="identity"), sim, seed=2)
    model, _ = train(TrainConfig(beta=beta, lr=1e-3, max_batches=30000, val_period=10000, seed=3,
                                 ema_decay=0.999), sim, model=model)

    test = simulate_arrays(sim, 100, "test", 0)
    mu, sigma, _ = model.encode(test.noisy)
    lat = model.latent
    post_mean, post_std = lat.center + lat.scale * mu, lat.scale * sigma

    # closed form: Gaussian prior, linear model, noise variance beta/2 per real component
    w = model.crop
    cols = forward_model_batch(np.c_[np.eye(3), np.tile(priors.lo[3:], (3, 1))], basis)[:, w]
    A = np.concatenate([cols.real, cols.imag], axis=1).T
    s2 = beta / 2
    p_mean, p_std = lat.center, lat.scale * lat.prior.std
    cov = np.linalg.inv(A.T @ A / s2 + np.diag(1 / p_std ** 2))
    y = np.concatenate([test.noisy[:, w].real, test.noisy[:, w].imag], axis=1)
    exact_mean = (y @ A / s2 + p_mean / p_std ** 2) @ cov
    exact_std = np.sqrt(np.diag(cov))

    mean_err = np.max(np.linalg.norm(post_mean - exact_mean, axis=1) / np.linalg.norm(exact_mean, axis=1))
    std_err = np.max(np.abs(post_std / exact_std - 1))
    report(12, mean_err < 0.1 and std_err < 0.1,
           f"worst relative mean error {mean_err:.3f}, worst std ratio error {std_err:.3f} over 100 spectra (< 0.10)")
