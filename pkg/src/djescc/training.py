"""End-to-end training and the repeated-transmission evaluation protocol."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from .channel import ChannelConfig, sample_snr, snr_to_sigma2
from .imagedata import DatasetSplit, denormalize, export_image, image_grid, load_dataset
from .models import Architecture, FeatureExtractor, ModelBundle, state_digest
from .objective import LossBreakdown, psnr_batch, ssim_batch, total_loss

log = logging.getLogger(__name__)

LOG_FIELDS = ["epoch", "l_r", "l_e", "l_d", "l_total", "lr"]  # wall time stays out of the CSV
METRIC_FIELDS = ["run_id", "pipeline", "snr_db", "repeat", "image", "psnr", "ssim",
                 "psnr_encrypted", "psnr_decoded", "l_e", "l_d"]
SUMMARY_FIELDS = ["run_id", "pipeline", "snr_db", "count", "psnr", "ssim",
                  "psnr_encrypted", "psnr_decoded", "l_e", "l_d"]


class NonFiniteLossError(RuntimeError):
    pass


class ConfigMismatchError(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    dataset: str = "cifar10"
    train_count: int | None = None
    test_count: int | None = None
    t: int = 16
    unet_width: int = 32
    encoder_widths: tuple = (16, 32, 32, 32)
    cipher: str = "learned"  # learned | shuffle | none
    cipher_seed: int = 0
    lambda_e: float = 0.0
    lambda_d: float = 0.0
    snr_train_min: float = 0.0
    snr_train_max: float = 20.0
    per_image_snr: bool = False
    epochs: int = 500
    batch_size: int = 64
    initial_lr: float = 1e-3
    plateau_patience: int = 10
    plateau_factor: float = 0.1
    plateau_threshold: float = 1e-4
    seed: int = 0
    feature_extractor: str = "random"  # checkpoint path or "random"
    feature_blocks: int = 3
    log_feature_losses: bool = True
    eval_snrs: tuple = (0.0, 5.0, 10.0, 15.0, 20.0)
    eval_repeats: int = 10
    eval_seed: int = 1

    def __post_init__(self):
        self.encoder_widths = tuple(self.encoder_widths)
        self.eval_snrs = tuple(float(s) for s in self.eval_snrs)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.eval_repeats < 1:
            raise ValueError("eval_repeats must be >= 1")
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau_factor must lie in (0, 1)")
        if self.lambda_e < 0 or self.lambda_d < 0:
            raise ValueError("loss weights must be non-negative")
        if self.cipher not in ("learned", "shuffle", "none"):
            raise ValueError(f"unknown cipher {self.cipher!r}")

    @property
    def architecture(self) -> Architecture:
        return Architecture(t=self.t, encoder_widths=self.encoder_widths,
                            unet_width=self.unet_width)

    @property
    def channel(self) -> ChannelConfig:
        return ChannelConfig(self.snr_train_min, self.snr_train_max, "train-sample", self.seed)

    @property
    def uses_features(self) -> bool:
        return self.lambda_e > 0 or self.lambda_d > 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_widths"] = list(self.encoder_widths)
        d["eval_snrs"] = list(self.eval_snrs)
        return d

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


class PlateauSchedule:
    """Multiply the learning rate by ``factor`` once the monitored loss has
    not improved by more than ``threshold`` for ``patience`` epochs."""

    def __init__(self, optimizer, patience: int = 10, factor: float = 0.1,
                 threshold: float = 1e-4):
        self.optimizer = optimizer
        self.patience = patience
        self.factor = factor
        self.threshold = threshold
        self.best = math.inf
        self.bad_epochs = 0

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]

    def step(self, loss: float) -> float:
        if loss < self.best - self.threshold:
            self.best = loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            for group in self.optimizer.param_groups:
                group["lr"] *= self.factor
            self.bad_epochs = 0
        return self.lr

    def state_dict(self) -> dict:
        return {"best": self.best, "bad_epochs": self.bad_epochs}

    def load_state_dict(self, state: dict) -> None:
        self.best = state["best"]
        self.bad_epochs = state["bad_epochs"]


def build_bundle(cfg: ExperimentConfig) -> ModelBundle:
    return ModelBundle(cfg.architecture, cfg.lambda_e, cfg.lambda_d, seed=cfg.seed,
                       config_hash=cfg.hash(), cipher=cfg.cipher, cipher_seed=cfg.cipher_seed)


def build_extractor(cfg: ExperimentConfig) -> FeatureExtractor | None:
    if not (cfg.uses_features or cfg.log_feature_losses):
        return None
    if cfg.feature_extractor == "random":
        return FeatureExtractor.random(cfg.feature_blocks, seed=0)
    return FeatureExtractor.load(cfg.feature_extractor)


def make_optimizer(bundle: ModelBundle, lr: float) -> torch.optim.Adam:
    params = [p for p in bundle.parameters() if p.requires_grad]
    return torch.optim.Adam(params, lr=lr, betas=(0.9, 0.999))


def train_step(bundle: ModelBundle, optimizer, batch, cfg: ExperimentConfig,
               generator: torch.Generator, extractor=None, dump_dir=None) -> LossBreakdown:
    """One Adam update of all trainable nets on one batch.

    A fresh SNR is drawn from the training range for the batch (or per image
    with ``cfg.per_image_snr``).
    """
    x = torch.as_tensor(batch)
    snr = sample_snr(cfg.channel, generator, size=len(x) if cfg.per_image_snr else None)
    if cfg.per_image_snr:
        sigma2 = torch.tensor([snr_to_sigma2(float(s)) for s in snr], dtype=x.dtype)
    else:
        sigma2 = snr_to_sigma2(snr)
    bundle.train()
    tr = bundle(x, sigma2, generator)
    fx = extractor if (cfg.uses_features or cfg.log_feature_losses) else None
    losses = total_loss(x, tr.y, tr.yhat, tr.xhat, cfg.lambda_e, cfg.lambda_d, fx,
                        track_features=cfg.uses_features)
    if not torch.isfinite(losses.l_total):
        msg = f"non-finite loss {losses.as_floats()} at SNR {snr}"
        if dump_dir is not None:
            path = Path(dump_dir) / "nonfinite_batch.pt"
            torch.save({"batch": x, "snr_db": snr, "losses": losses.as_floats()}, path)
            msg += f"; batch dumped to {path}"
        raise NonFiniteLossError(msg)
    optimizer.zero_grad(set_to_none=True)
    losses.l_total.backward()
    optimizer.step()
    return LossBreakdown(*(v.detach() for v in vars(losses).values()))


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _write_csv(path: Path, fieldnames, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fieldnames, lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: _fmt(row.get(k, "")) for k in fieldnames})


@dataclass
class FitResult:
    bundle: ModelBundle
    log: list = field(default_factory=list)
    run_dir: Path | None = None
    finished: bool = True


def fit(cfg: ExperimentConfig, run_dir, train_split: DatasetSplit | None = None,
        extractor: FeatureExtractor | None = None, resume: bool = True,
        stop_after: int | None = None) -> FitResult:
    """Train a bundle for ``cfg.epochs`` epochs, checkpointing every epoch.

    ``run_dir`` receives ``config.json``, ``train_log.csv`` and the ``last``,
    ``best`` and ``final`` checkpoints. An existing ``last.pt`` is resumed
    when its config hash matches, otherwise :class:`ConfigMismatchError` is
    raised. ``stop_after`` ends the call after that many epochs (used to
    simulate interruptions).
    """
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    if train_split is None:
        train_split = load_dataset(cfg.dataset, "train", count=cfg.train_count)
    if extractor is None:
        extractor = build_extractor(cfg)
    psi_digest = state_digest(extractor) if extractor is not None else None

    torch.manual_seed(cfg.seed)
    bundle = build_bundle(cfg)
    optimizer = make_optimizer(bundle, cfg.initial_lr)
    schedule = PlateauSchedule(optimizer, cfg.plateau_patience, cfg.plateau_factor,
                               cfg.plateau_threshold)
    generator = torch.Generator().manual_seed(cfg.seed)
    rows: list[dict] = []
    start = 0
    best = math.inf

    last = run_dir / "last.pt"
    if resume and last.exists():
        state = torch.load(last, map_location="cpu", weights_only=False)
        if state["config_hash"] != cfg.hash():
            raise ConfigMismatchError(
                f"{last} was written by config {state['config_hash']}, not {cfg.hash()}")
        for name in ModelBundle.parts:
            getattr(bundle, name).load_state_dict(state["bundle"][name])
        optimizer.load_state_dict(state["optimizer"])
        schedule.load_state_dict(state["schedule"])
        generator.set_state(state["generator"])
        torch.set_rng_state(state["torch_rng"])
        rows, start, best = state["log"], state["epoch"], state["best"]
    else:
        (run_dir / "config.json").write_text(
            json.dumps(cfg.to_dict() | {"config_hash": cfg.hash()}, indent=2, sort_keys=True))

    epochs_run = 0
    for epoch in range(start, cfg.epochs):
        if stop_after is not None and epochs_run >= stop_after:
            return FitResult(bundle, rows, run_dir, finished=False)
        t0 = time.time()
        order = torch.randperm(train_split.count, generator=generator).numpy()
        sums = dict.fromkeys(("l_r", "l_e", "l_d", "l_total"), 0.0)
        for batch in train_split.batches(cfg.batch_size, order):
            losses = train_step(bundle, optimizer, batch, cfg, generator, extractor, run_dir)
            for k, v in losses.as_floats().items():
                sums[k] += v * len(batch)
        means = {k: v / train_split.count for k, v in sums.items()}
        lr_used = schedule.lr
        schedule.step(means["l_total"])
        row = {"epoch": epoch, **means, "lr": lr_used, "seconds": round(time.time() - t0, 1)}
        rows.append(row)
        log.info("epoch %d: %s", epoch, {k: round(v, 5) for k, v in means.items()})
        if means["l_total"] < best:
            best = means["l_total"]
            bundle.save(run_dir / "best.pt")
        torch.save({
            "config_hash": cfg.hash(), "epoch": epoch + 1, "best": best, "log": rows,
            "bundle": {n: getattr(bundle, n).state_dict() for n in ModelBundle.parts},
            "optimizer": optimizer.state_dict(), "schedule": schedule.state_dict(),
            "generator": generator.get_state(), "torch_rng": torch.get_rng_state(),
        }, last)
        _write_csv(run_dir / "train_log.csv", LOG_FIELDS, rows)
        epochs_run += 1

    if extractor is not None and state_digest(extractor) != psi_digest:
        raise RuntimeError("feature extractor parameters changed during training")
    bundle.save(run_dir / "final.pt")
    _write_csv(run_dir / "train_log.csv", LOG_FIELDS, rows)
    return FitResult(bundle, rows, run_dir)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def _noise_generator(seed: int, snr_index: int, repeat: int, offset: int) -> torch.Generator:
    """Independent noise stream per (SNR, repeat, batch offset)."""
    state = np.random.SeedSequence([seed, snr_index, repeat, offset]).generate_state(1)[0]
    return torch.Generator().manual_seed(int(state))


def _quantize(t: torch.Tensor) -> torch.Tensor:
    return torch.from_numpy(denormalize(t.numpy())).to(t.dtype) / 255.0


@torch.no_grad()
def evaluate(bundle: ModelBundle, images, eval_snrs=(0, 5, 10, 15, 20), eval_repeats: int = 10,
             seed: int = 1, extractor=None, batch_size: int = 100, run_id: str = "",
             pipelines=("continuous", "quantized"), with_ssim: bool = True,
             grid_dir=None, grid_count: int = 4) -> list[dict]:
    """Transmit every image ``eval_repeats`` times at each SNR.

    Returns one row per (pipeline, SNR, repeat, image). The ``quantized``
    pipeline rounds the encrypted and decoded images to 8 bits, as they would
    be when handed between parties. ``snr_db = inf`` disables the noise.
    """
    raw = images.raw if isinstance(images, DatasetSplit) else np.asarray(images)
    bundle.eval()
    rows = []
    grid_rows = {}
    for lo in range(0, len(raw), batch_size):
        plain8 = np.asarray(raw[lo:lo + batch_size])
        x = torch.from_numpy(plain8.astype(np.float32) / np.float32(255.0))
        y_cont = bundle.encrypt(x)
        fx = extractor(x) if extractor is not None else None
        for pipe in pipelines:
            y = _quantize(y_cont) if pipe == "quantized" else y_cont
            y8 = denormalize(y.numpy())
            psnr_y = psnr_batch(plain8, y8)
            l_e = (((fx - extractor(y)) ** 2).mean(dim=(1, 2, 3)).numpy()
                   if fx is not None else None)
            for si, snr in enumerate(eval_snrs):
                sigma2 = snr_to_sigma2(float(snr))
                for r in range(eval_repeats):
                    gen = _noise_generator(seed, si, r, lo)
                    yhat = bundle.transmit(y, sigma2, gen)
                    if pipe == "quantized":
                        yhat = _quantize(yhat)
                    xhat8 = denormalize(bundle.decrypt(yhat).numpy())
                    yhat8 = denormalize(yhat.numpy())
                    p = psnr_batch(plain8, xhat8)
                    s = ssim_batch(plain8, xhat8) if with_ssim else None
                    p_dec = psnr_batch(plain8, yhat8)
                    l_d = (((fx - extractor(yhat)) ** 2).mean(dim=(1, 2, 3)).numpy()
                           if fx is not None else None)
                    for i in range(len(plain8)):
                        rows.append({
                            "run_id": run_id, "pipeline": pipe, "snr_db": float(snr),
                            "repeat": r, "image": lo + i, "psnr": float(p[i]),
                            "ssim": float(s[i]) if s is not None else "",
                            "psnr_encrypted": float(psnr_y[i]), "psnr_decoded": float(p_dec[i]),
                            "l_e": float(l_e[i]) if l_e is not None else "",
                            "l_d": float(l_d[i]) if l_d is not None else "",
                        })
                    if grid_dir is not None and lo == 0 and r == 0 and pipe == pipelines[-1]:
                        grid_rows[snr] = (y8, yhat8, xhat8)
    if grid_dir is not None and grid_rows:
        export_sample_grids(raw[:grid_count], grid_rows, grid_dir, grid_count)
    return rows


def export_sample_grids(plain8, grid_rows: dict, grid_dir, count: int) -> list[Path]:
    """One grid per image: rows are SNRs, columns plain / encrypted /
    decoded / decrypted."""
    grid_dir = Path(grid_dir)
    grid_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(min(count, len(plain8))):
        rows = [[plain8[i], y8[i], yhat8[i], xhat8[i]] for y8, yhat8, xhat8 in grid_rows.values()]
        paths.append(export_image(image_grid(rows), grid_dir / f"sample_{i:02d}.png"))
    return paths


def summarize(rows: list[dict]) -> list[dict]:
    """Mean of every metric per (run, pipeline, SNR), in first-seen order."""
    groups: dict[tuple, list[dict]] = {}
    for row in rows:
        groups.setdefault((row["run_id"], row["pipeline"], row["snr_db"]), []).append(row)
    out = []
    for (run_id, pipe, snr), grp in groups.items():
        rec = {"run_id": run_id, "pipeline": pipe, "snr_db": snr, "count": len(grp)}
        for k in ("psnr", "ssim", "psnr_encrypted", "psnr_decoded", "l_e", "l_d"):
            vals = [r[k] for r in grp if r[k] != ""]
            rec[k] = float(np.mean(vals)) if vals else ""
        out.append(rec)
    return out


def write_metrics(rows: list[dict], out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    _write_csv(out_dir / "metrics.csv", METRIC_FIELDS, rows)
    _write_csv(out_dir / "summary.csv", SUMMARY_FIELDS, summarize(rows))
    return out_dir / "metrics.csv", out_dir / "summary.csv"


def mean_psnr(rows: list[dict], snr_db: float, pipeline: str = "continuous") -> float:
    vals = [r["psnr"] for r in rows if r["snr_db"] == snr_db and r["pipeline"] == pipeline]
    return float(np.mean(vals))
