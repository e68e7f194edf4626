"""Command-line entry point: simulate, train, infer, fit, evaluate."""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .baseline_fit import FitOptions, fit_batch
from .config import (ConfigError, basis_from, config_hash, gammas_from, load_config, priors_from,
                     sim_from)
from .evalmod import (SWEEP_COLUMNS, MetricReport, calibration, calibration_csv, evaluate_model,
                      linewidth_sweep, pairplot_data, point_estimate, rows_to_csv, write_json,
                      write_pairplot)
from .inference import (CheckpointError, ElboError, FlowSingularityError, ModelConfig, TrainConfig,
                        TrainingDiverged, build_model, load_checkpoint, prior_model,
                        sample_posterior_batch, save_checkpoint, train)
from .simulator import SimConfig, read_manifest, simulate_arrays, write_dataset
from .spectral import BasisSet, load_basis, load_spectrum, save_basis

log = logging.getLogger("snfmrs")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _stamp(cfg: dict) -> dict:
    return {"config_hash": config_hash(cfg), "seed": cfg["seed"], "version": __version__}


def _threads(cfg: dict) -> int:
    return int(cfg["threads"]) or os.cpu_count() or 1


def _write_csv(path, header, rows, stamp: dict | None = None) -> None:
    with open(path, "w", newline="") as fh:
        if stamp:
            fh.write("# " + " ".join(f"{k}={v}" for k, v in sorted(stamp.items())) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _f(v) -> str:
    return repr(float(v))


# -- dataset access -------------------------------------------------------------

def _load_inputs(path) -> tuple[list[str], np.ndarray, dict | None, BasisSet | None]:
    """Spectrum ids, stacked data, manifest rows keyed by id, and the dataset basis if any."""
    p = Path(path)
    if not p.exists():
        raise UsageError(f"input not found: {p}")
    if p.is_file():
        return [p.name], load_spectrum(p).data[None], None, None
    manifest = p / "manifest.csv"
    if manifest.exists():
        rows, _ = read_manifest(manifest)
        files = [r["file"] for r in rows]
        meta = {r["file"]: r for r in rows}
    else:
        files = sorted(f.name for f in p.glob("*.json") if f.name != "basis.json" and f.name != "config.json")
        meta = None
    basis = load_basis(p / "basis.json") if (p / "basis.json").exists() else None
    if not files:
        return [], np.zeros((0, 0), complex), meta, basis
    data = np.stack([load_spectrum(p / f).data for f in files])
    return files, data, meta, basis


def _truths(meta: dict | None, ids: list[str], names: list[str]) -> np.ndarray:
    if meta is None:
        raise UsageError("evaluation needs a dataset directory with manifest.csv (ground truth)")
    try:
        return np.array([[float(meta[i][n]) for n in names] for i in ids])
    except KeyError as exc:
        raise UsageError(f"manifest lacks column {exc}") from exc


# -- subcommands ------------------------------------------------------------------

def cmd_simulate(args, cfg) -> int:
    sim = sim_from(cfg)
    batch = simulate_arrays(sim, args.n, args.label, 0)
    out = Path(args.out)
    write_dataset(out, batch, sim)
    save_basis(out / "basis.json", sim.basis, as_rows=True)
    write_json({**_stamp(cfg), "config": cfg, "n": args.n, "label": args.label}, out / "config.json")
    log.info("wrote %d spectra to %s", args.n, out)
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    sim = sim_from(cfg)
    m, t = cfg["model"], cfg["train"]
    mcfg = ModelConfig(tuple(m["widths"]), int(m["n_flows"]), int(m["flow_width"]), m["n_householder"],
                       bool(m["amortized"]), m["amp_link"], tuple(m["crop_ppm"]), float(m["init_sigma"]))
    tcfg = TrainConfig(float(t["beta"]), float(t["lr"]), int(t["batch_size"]), int(t["n_mc"]),
                       int(t["max_batches"]), int(t["val_period"]), int(t["val_mc"]), t["patience"],
                       int(cfg["seed"]), bool(t["restore_best"]),
                       None if t["ema_decay"] is None else float(t["ema_decay"]))
    model = build_model(mcfg, sim, seed=int(cfg["seed"]))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    history = Path(args.history) if args.history else out.with_suffix(".history.csv")
    try:
        model, hist = train(tcfg, sim, model=model)
    except TrainingDiverged as exc:
        save_checkpoint(out, exc.model, {**_stamp(cfg), "status": "diverged", "batch": exc.batch})
        if exc.history is not None:
            exc.history.to_csv(history)
        raise
    save_checkpoint(out, model, {**_stamp(cfg), "status": hist.stopped, "batches": len(hist.batch_loss)})
    hist.to_csv(history)
    log.info("saved %s (K=%d) after %d batches", out, model.n_flows, len(hist.batch_loss))
    return EXIT_OK


def cmd_infer(args, cfg) -> int:
    ids, data, _, dbasis = _load_inputs(args.inp)
    basis = dbasis if dbasis is not None else (basis_from(cfg) if args.basis is None else load_basis(args.basis))
    model = load_checkpoint(args.model, basis, force=args.force)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    draws_n = args.draws if args.draws is not None else int(cfg["infer"]["draws"])
    names = list(model.priors.names)
    stamp = _stamp(cfg)
    summary = []
    posts = sample_posterior_batch(model, data, draws_n, seed=int(cfg["seed"])) if ids else []
    for sid, d in zip(ids, posts):
        stem = Path(sid).stem
        _write_csv(out / f"{stem}_draws.csv", names + ["logq", "logprior"],
                   [[_f(v) for v in row] + [_f(lq), _f(lp)]
                    for row, lq, lp in zip(d.theta, d.logq, d.logprior)], stamp)
        mean, std = d.mean(), d.std()
        for j, n in enumerate(names):
            summary.append([sid, n, _f(mean[j]), _f(std[j]), _f(np.quantile(d.theta[:, j], 0.025)),
                            _f(np.quantile(d.theta[:, j], 0.975))])
    _write_csv(out / "summary.csv", ["spectrum", "param", "mean", "std", "q025", "q975"], summary, stamp)
    return EXIT_OK


FIT_STATUS_OK = ("gtol", "xtol")


def cmd_fit(args, cfg) -> int:
    ids, data, _, dbasis = _load_inputs(args.inp)
    if args.basis:
        basis = load_basis(args.basis, None)
    elif dbasis is not None:
        basis = dbasis
    else:
        basis = basis_from(cfg)
    order = int(cfg["priors"]["order"])
    opts = FitOptions(crop_ppm=tuple(cfg["fit"]["crop_ppm"]), order=order, max_iter=int(cfg["fit"]["max_iter"]),
                      priors=priors_from(cfg, basis), noise_sigma=cfg["priors"]["noise_sigma"])
    results = fit_batch(list(data), basis, opts, threads=_threads(cfg))
    names = list(opts.priors.names)
    header = ["spectrum"] + names + [f"crlb_{n}" for n in names] + ["rss", "status"]
    rows = [[sid] + [_f(v) for v in r.theta] + [_f(v) for v in r.crlb] + [_f(r.rss), r.status]
            for sid, r in zip(ids, results)]
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    _write_csv(args.out, header, rows, _stamp(cfg))
    failed = sum(r.status == "error" for r in results)
    if failed:
        log.warning("%d of %d fits failed", failed, len(results))
    return EXIT_OK


def _read_fit_results(path) -> tuple[list[str], dict[str, dict]]:
    with open(path, newline="") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.DictReader(lines))
    return [r["spectrum"] for r in rows], {r["spectrum"]: r for r in rows}


def cmd_evaluate(args, cfg) -> int:
    if not (args.model or args.model2 or args.fit_results):
        raise UsageError("evaluate needs at least one of --model, --model2, --fit-results")
    if args.data is None:
        raise UsageError("evaluate needs --data (a simulated dataset with ground truth)")
    ids, data, meta, dbasis = _load_inputs(args.data)
    n = min(args.n if args.n is not None else int(cfg["eval"]["n"]), len(ids))
    if n < 2:
        raise UsageError("evaluation needs at least two spectra")
    ids, data = ids[:n], data[:n]
    ev = cfg["eval"]
    seed = int(cfg["seed"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = MetricReport(meta=_stamp(cfg))
    curves, sweep_rows, models = {}, [], {}
    basis = dbasis
    for path in (args.model, args.model2):
        if path:
            mdl = load_checkpoint(path, basis, force=args.force)
            label = mdl.label
            if label in models:
                label = f"{label}2"
            models[label] = mdl
    first = next(iter(models.values()), None)
    names_all = None
    if first is not None:
        names_all = list(first.priors.names)
        m = first.basis.n_metabolites
        truth = _truths(meta, ids, names_all)
        if args.include_prior:
            evaluate_model(report, "Prior", prior_model(first), data, truth, ev["draws"], ev["n_mc"],
                           seed=seed, estimator=ev["estimator"])
        pair_done = False
        for label, mdl in models.items():
            draws = evaluate_model(report, label, mdl, data, truth, int(ev["draws"]), int(ev["n_mc"]),
                                   seed=seed, estimator=ev["estimator"])
            curves[label] = calibration(draws, truth[:, :m], ev["nominal"], columns=range(m))
            if not pair_done:
                k = min(int(ev["pairplot_spectrum"]), len(draws) - 1)
                write_pairplot(pairplot_data(draws[k], range(m), seed=seed), out / "pairplot")
                pair_done = True
        sim = SimConfig(first.basis, first.priors, seed=seed, noise_sigma=cfg["priors"]["noise_sigma"])
        sweep_rows = linewidth_sweep(sim, gammas_from(cfg, first.priors), int(ev["sweep_n"]), models,
                                     n_draws=int(ev["sweep_draws"]), seed=seed)
    if args.fit_results:
        fit_ids, fits = _read_fit_results(args.fit_results)
        missing = [i for i in ids if i not in fits]
        if missing:
            raise UsageError(f"fit results lack {len(missing)} spectra (first: {missing[0]})")
        if names_all is None:
            names_all = [c for c in next(iter(fits.values())) if c not in ("spectrum", "rss", "status")
                         and not c.startswith("crlb_")]
        amp = [c for c in names_all if c.startswith("a_")]
        est = np.array([[float(fits[i][c]) for c in amp] for i in ids])
        truth = _truths(meta, ids, amp)
        rss = np.array([float(fits[i]["rss"]) for i in ids])
        report.add("LS", est, truth, {"rss": float(rss.mean()),
                                      "rss_se": float(rss.std(ddof=1) / np.sqrt(rss.size))})
    stamp = _stamp(cfg)
    report.to_csv(out / "metrics.csv")
    calibration_csv(curves, out / "calibration.csv")
    rows_to_csv(sweep_rows, SWEEP_COLUMNS, out / "linewidth_sweep.csv")
    write_json({**stamp, "n": n, "methods": [r["method"] for r in report.rows],
                "models": {k: v.metadata for k, v in models.items()}}, out / "summary.json")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="snfmrs", description="Flow-based posterior inference for simulated MR spectra.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="YAML run configuration")
        sp.add_argument("--seed", type=int, help="master seed (overrides config)")
        sp.add_argument("--threads", type=int, help="worker threads (0 = all cores)")
        sp.add_argument("-v", "--verbose", action="store_true")

    s = sub.add_parser("simulate", help="write a simulated dataset")
    common(s)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--label", default="test", help="random stream label")

    t = sub.add_parser("train", help="train an SNF (or VAE with --flows 0)")
    common(t)
    t.add_argument("--out", required=True, help="checkpoint path")
    t.add_argument("--history", help="history CSV path")
    t.add_argument("--flows", type=int)
    t.add_argument("--max-batches", type=int)
    t.add_argument("--lr", type=float)

    i = sub.add_parser("infer", help="posterior draws per spectrum")
    common(i)
    i.add_argument("--model", required=True)
    i.add_argument("--in", dest="inp", required=True)
    i.add_argument("--basis")
    i.add_argument("--draws", type=int)
    i.add_argument("--out", required=True)
    i.add_argument("--force", action="store_true", help="ignore basis fingerprint mismatch")

    f = sub.add_parser("fit", help="least-squares fit with CRLB")
    common(f)
    f.add_argument("--in", dest="inp", required=True)
    f.add_argument("--basis")
    f.add_argument("--out", required=True)

    e = sub.add_parser("evaluate", help="metrics, calibration, sweep and pairplot data")
    common(e)
    e.add_argument("--model")
    e.add_argument("--model2")
    e.add_argument("--fit-results")
    e.add_argument("--data")
    e.add_argument("--n", type=int)
    e.add_argument("--out", required=True)
    e.add_argument("--include-prior", action="store_true")
    e.add_argument("--force", action="store_true")
    return p


def _flag_overrides(args) -> dict:
    o: dict = {}
    if args.seed is not None:
        o["seed"] = args.seed
    if args.threads is not None:
        o["threads"] = args.threads
    if args.command == "train":
        if args.flows is not None:
            o.setdefault("model", {})["n_flows"] = args.flows
        if args.max_batches is not None:
            o.setdefault("train", {})["max_batches"] = args.max_batches
        if args.lr is not None:
            o.setdefault("train", {})["lr"] = args.lr
    return o


COMMANDS = {"simulate": cmd_simulate, "train": cmd_train, "infer": cmd_infer, "fit": cmd_fit,
            "evaluate": cmd_evaluate}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, _flag_overrides(args))
        if getattr(args, "n", None) is not None and args.n < 0:
            raise UsageError("--n must be >= 0")
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, UsageError, CheckpointError, FileNotFoundError) as exc:
        print(f"snfmrs {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, ElboError, FlowSingularityError, FloatingPointError) as exc:
        print(f"snfmrs {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
