"""Training loop and checkpoint files."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..diffcore import AdamError, AdamState, TapeError, adam_step
from ..simulator import PriorRanges, SimConfig, simulate_arrays, stream, validation_set
from ..spectral import basis_from_dict
from .model import ElboError, ModelConfig, SNFModel, elbo, loss_and_grad

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SNFCKPT\x00"
CHECKPOINT_VERSION = 1


class TrainingDiverged(FloatingPointError):
    """Raised when the loss or a gradient stops being finite.

    ``model`` holds the last weights that produced a finite loss.
    """

    def __init__(self, message, model=None, history=None, batch=None):
        super().__init__(message)
        self.model = model
        self.history = history
        self.batch = batch


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    beta: float = 10.0
    lr: float = 1e-4
    batch_size: int = 16
    n_mc: int = 1
    max_batches: int = 10000
    val_period: int = 256
    val_mc: int = 1
    patience: int | None = None   # validations without improvement before stopping
    seed: int = 0
    restore_best: bool = False
    ema_decay: float | None = None   # Polyak averaging of the weights; validated and returned

    def __post_init__(self):
        if self.beta <= 0 or self.lr <= 0:
            raise ValueError("beta and lr must be positive")
        if self.batch_size < 1 or self.n_mc < 1 or self.val_period < 1 or self.max_batches < 0:
            raise ValueError("batch size, n_mc, val_period must be >= 1 and max_batches >= 0")
        if self.ema_decay is not None and not 0 <= self.ema_decay < 1:
            raise ValueError("ema_decay must lie in [0, 1)")


@dataclass
class History:
    batch_loss: list[float] = field(default_factory=list)
    validation: list[dict] = field(default_factory=list)
    stopped: str = ""

    def __eq__(self, other):
        return (isinstance(other, History) and self.batch_loss == other.batch_loss
                and self.validation == other.validation)

    def best(self) -> dict | None:
        return min(self.validation, key=lambda r: r["loss"]) if self.validation else None

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        keys = ["batch", "loss", "recon", "kl", "logq0", "logprior", "sum_logdet"]
        w.writerow(["kind"] + keys)
        for i, loss in enumerate(self.batch_loss):
            w.writerow(["train", i + 1, repr(loss)] + [""] * (len(keys) - 2))
        for row in self.validation:
            w.writerow(["validation"] + [row["batch"]] + [repr(row[k]) for k in keys[1:]])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def pilot_scale(sim: SimConfig, model: SNFModel, n: int = 256) -> float:
    """Reference magnitude for the encoder's log-peak feature (mean peak of a pilot batch)."""
    b = simulate_arrays(sim, n, "pilot", 0)
    return float(np.mean(np.max(np.abs(b.noisy[:, model.crop]), axis=1)))


def build_model(model_cfg: ModelConfig, sim: SimConfig, seed: int = 0) -> SNFModel:
    model = SNFModel(model_cfg, sim.basis, sim.priors, seed=seed, input_scale=1.0)
    model.input_scale = pilot_scale(sim, model)
    return model


def validate(model: SNFModel, sim: SimConfig, cfg: TrainConfig, period: int, batch: int,
             params=None) -> dict:
    vs = validation_set(sim, period)
    noise = stream(cfg.seed, "validation-mc", period).standard_normal((len(vs), cfg.val_mc, model.dim))
    res = elbo(model, vs.noisy, beta=cfg.beta, noise=noise, params=params)
    return {"batch": batch, **res.means()}


def train(cfg: TrainConfig, sim: SimConfig, model: SNFModel | None = None,
          model_cfg: ModelConfig | None = None, callback=None) -> tuple[SNFModel, History]:
    """Fit the encoder and flows by Adam on freshly simulated batches.

    Batch ``i`` is simulated from the ``"train"`` stream at index ``i`` so a
    run is a pure function of the seeds.  Validation runs before the first
    step and every ``cfg.val_period`` steps on a set that is refreshed every
    ``sim.val_period`` steps.

    With ``cfg.ema_decay`` set, an exponential moving average of the weights
    (decay ramped as ``min(decay, (1+t)/(10+t))``) is what gets validated and
    returned; the raw Adam iterate only drives the updates.
    """
    if model is None:
        model = build_model(model_cfg or ModelConfig(), sim, seed=cfg.seed)
    hist = History()
    if cfg.max_batches == 0:
        hist.stopped = "max_batches"
        return model, hist

    params = {k: v.copy() for k, v in model.params.items()}
    state = AdamState(lr=cfg.lr)
    avg = {k: v.copy() for k, v in params.items()} if cfg.ema_decay is not None else None
    best = (np.inf, params)
    stale = 0

    def current():
        return params if avg is None else avg

    def run_validation(step):
        nonlocal best, stale
        row = validate(model, sim, cfg, step // sim.val_period, step, current())
        hist.validation.append(row)
        if row["loss"] < best[0]:
            best = (row["loss"], {k: v.copy() for k, v in current().items()})
            stale = 0
        else:
            stale += 1
        return row

    try:
        run_validation(0)
    except ElboError as exc:
        raise TrainingDiverged(f"initial validation failed: {exc}", model, hist, 0) from exc

    for step in range(1, cfg.max_batches + 1):
        batch = simulate_arrays(sim, cfg.batch_size, "train", step - 1)
        noise = stream(cfg.seed, "mc", step - 1).standard_normal((cfg.batch_size, cfg.n_mc, model.dim))
        try:
            loss, grads, _ = loss_and_grad(model, params, batch.noisy, noise, cfg.beta)
            params, state = adam_step(params, grads, state, inplace=True)
        except (TapeError, AdamError, FloatingPointError) as exc:
            model.params = params
            raise TrainingDiverged(f"diverged at batch {step}: {exc}", model, hist, step) from exc
        if avg is not None:
            d = min(cfg.ema_decay, (1 + step) / (10 + step))
            for k, v in avg.items():
                v *= d
                v += (1 - d) * params[k]
        hist.batch_loss.append(loss)
        if callback is not None:
            callback(step, loss)
        if step % cfg.val_period == 0:
            try:
                row = run_validation(step)
            except ElboError as exc:
                model.params = params
                raise TrainingDiverged(f"validation diverged at batch {step}: {exc}", model, hist, step) from exc
            log.info("batch %d val loss %.4g recon %.4g kl %.4g", step, row["loss"], row["recon"], row["kl"])
            if cfg.patience is not None and stale >= cfg.patience:
                hist.stopped = "patience"
                break
    else:
        hist.stopped = "max_batches"

    model.params = best[1] if cfg.restore_best else current()
    return model, hist


# -- checkpoints --------------------------------------------------------------

def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()


def model_metadata(model: SNFModel) -> dict:
    pr = model.priors
    return {
        "version": CHECKPOINT_VERSION,
        "model": model.config.to_dict(),
        "n_flows": model.n_flows,
        "label": model.label,
        "input_scale": model.input_scale,
        "priors": {"names": list(pr.names), "lo": pr.lo.tolist(), "hi": pr.hi.tolist(),
                   "n_metabolites": pr.n_metabolites, "snr_db": list(pr.snr_db)},
        "basis_fingerprint": model.basis.fingerprint(),
    }


def save_checkpoint(path, model: SNFModel, extra: dict | None = None) -> str:
    """Write weights + configs + basis; returns the file's sha256.

    Layout: magic, u64 header length, canonical JSON header, then each weight
    as raw little-endian float64 in header order.  No timestamps, so equal
    models give equal bytes.
    """
    from ..spectral import basis_to_dict
    names = sorted(model.params)
    header = model_metadata(model)
    header["basis"] = basis_to_dict(model.basis)
    header["extra"] = extra or {}
    header["arrays"] = [{"name": n, "shape": list(model.params[n].shape)} for n in names]
    head = _canonical(header)
    blob = b"".join(np.ascontiguousarray(model.params[n], dtype="<f8").tobytes() for n in names)
    data = CHECKPOINT_MAGIC + struct.pack("<Q", len(head)) + head + blob
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def read_checkpoint_header(path) -> dict:
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", data[8:16])
    return json.loads(data[16:16 + n])


def load_checkpoint(path, basis=None, force: bool = False) -> SNFModel:
    """Rebuild a model; refuses a basis whose fingerprint differs unless ``force``."""
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + n])
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    stored = basis_from_dict(header["basis"])
    if basis is not None and basis.fingerprint() != header["basis_fingerprint"]:
        if not force:
            raise CheckpointError(
                f"basis fingerprint {basis.fingerprint()} does not match checkpoint "
                f"{header['basis_fingerprint']}; pass force to override")
        log.warning("loading checkpoint against a different basis (forced)")
        stored = basis
    pr = header["priors"]
    priors = PriorRanges(pr["names"], np.array(pr["lo"]), np.array(pr["hi"]), pr["n_metabolites"],
                         tuple(pr["snr_db"]))
    params, pos = {}, 16 + n
    for spec in header["arrays"]:
        count = int(np.prod(spec["shape"], dtype=np.int64))
        params[spec["name"]] = np.frombuffer(data, "<f8", count, pos).reshape(spec["shape"]).copy()
        pos += 8 * count
    cfg = ModelConfig.from_dict(header["model"])
    model = SNFModel(cfg, stored, priors, params, header["input_scale"])
    model.metadata = header.get("extra", {})
    return model
