"""Ciphertext-only attacks and non-learned perceptual-encryption baselines.

Everything here works on 8-bit images, ``(h, w, c)`` or ``(batch, h, w, c)``
uint8 arrays, as an eavesdropper on the wired links would see them.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .imagedata import DatasetSplit, denormalize, export_image, image_grid, normalize
from .objective import psnr_batch, ssim_batch

log = logging.getLogger(__name__)


def _as_uint8(img) -> np.ndarray:
    arr = np.asarray(img)
    if arr.dtype != np.uint8:
        raise TypeError(f"8-bit image expected, got {arr.dtype}")
    return arr


# ---------------------------------------------------------------------------
# Baselines
# ---------------------------------------------------------------------------

def fr_attack(cipher, b: int, literal_floor: bool = False) -> np.ndarray:
    """Feature-reconstruction attack.

    Every component whose leading bit differs from the guess ``b`` is
    replaced by its bitwise complement (``v XOR 255``), so afterwards all
    leading bits equal ``b``. With ``literal_floor`` the comparison uses the
    component value itself instead of its leading bit.
    """
    v = _as_uint8(cipher)
    if b not in (0, 1):
        raise ValueError("b must be 0 or 1")
    lead = v if literal_floor else v >> 7
    return np.where(lead != b, v ^ np.uint8(255), v).astype(np.uint8)


def pixel_invert(img) -> np.ndarray:
    return (np.uint8(255) - _as_uint8(img)).astype(np.uint8)


@dataclass(frozen=True)
class ShuffleKey:
    """Seeded permutation over the ``n = h*w*c`` components of an image."""

    seed: int
    n: int

    @cached_property
    def perm(self) -> np.ndarray:
        return np.random.default_rng(self.seed).permutation(self.n)

    @cached_property
    def inverse(self) -> np.ndarray:
        return np.argsort(self.perm)


def _permute(img, order: np.ndarray) -> np.ndarray:
    arr = np.asarray(img)
    single = arr.ndim == 3
    batch = arr[None] if single else arr
    flat = batch.reshape(len(batch), -1)
    if flat.shape[1] != len(order):
        raise ValueError(f"key covers {len(order)} components, image has {flat.shape[1]}")
    out = flat[:, order].reshape(batch.shape)
    return out[0] if single else out


def keyed_shuffle_encrypt(img, key: ShuffleKey) -> np.ndarray:
    return _permute(img, key.perm)


def keyed_shuffle_decrypt(img, key: ShuffleKey) -> np.ndarray:
    return _permute(img, key.inverse)


# ---------------------------------------------------------------------------
# GAN-based attack
# ---------------------------------------------------------------------------

class Discriminator(nn.Module):
    """Three 2x2/stride-2 convs (16, 16, 32) with leaky ReLU, dense + sigmoid."""

    def __init__(self, image_shape=(32, 32, 3)):
        super().__init__()
        h, w, c = image_shape
        self.convs = nn.Sequential(
            nn.Conv2d(c, 16, 2, stride=2), nn.LeakyReLU(0.2),
            nn.Conv2d(16, 16, 2, stride=2), nn.LeakyReLU(0.2),
            nn.Conv2d(16, 32, 2, stride=2), nn.LeakyReLU(0.2),
        )
        self.dense = nn.Linear(32 * (h // 8) * (w // 8), 1)

    def logits(self, img: torch.Tensor) -> torch.Tensor:
        return self.dense(self.convs(img.permute(0, 3, 1, 2)).flatten(1))[:, 0]

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(img))


@dataclass
class GanAttackConfig:
    epochs: int = 600
    lr: float = 1e-4
    batch_size: int = 64
    width: int = 32
    seed: int = 0
    collapse_loss: float = 1e-6
    collapse_epochs: int = 20


@dataclass
class GanAttack:
    generator: nn.Module
    discriminator: Discriminator
    history: list = field(default_factory=list)
    collapsed: bool = False

    @torch.no_grad()
    def reconstruct(self, cipher8, batch_size: int = 256) -> np.ndarray:
        self.generator.eval()
        cipher8 = _as_uint8(cipher8)
        out = [denormalize(self.generator(torch.from_numpy(normalize(cipher8[i:i + batch_size]))))
               for i in range(0, len(cipher8), batch_size)]
        return np.concatenate(out)


def split_halves(count: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint, equal-size index sets (X1 plain, X2 to be encrypted)."""
    order = np.random.default_rng(seed).permutation(count)
    half = count // 2
    return order[:half], order[half:2 * half]


def gan_attack_train(cipher_fn, train_images, cfg: GanAttackConfig | None = None) -> GanAttack:
    """Train an unpaired generator that maps cipher images to plain-looking ones.

    ``cipher_fn`` maps uint8 plain images to uint8 cipher images. The plain
    set is split into halves: the first is shown to the discriminator as
    real, the second is encrypted and fed to the generator. No pairing
    between the two is used.
    """
    from .models import UNet

    cfg = cfg or GanAttackConfig()
    raw = train_images.raw if isinstance(train_images, DatasetSplit) else _as_uint8(train_images)
    i1, i2 = split_halves(len(raw), cfg.seed)
    real = torch.from_numpy(normalize(np.asarray(raw)[np.sort(i1)]))
    cipher = torch.from_numpy(normalize(_as_uint8(cipher_fn(np.asarray(raw)[np.sort(i2)]))))

    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    G = UNet(real.shape[-1], cfg.width)
    D = Discriminator(tuple(real.shape[1:]))
    opt_g = torch.optim.Adam(G.parameters(), lr=cfg.lr)
    opt_d = torch.optim.Adam(D.parameters(), lr=cfg.lr)
    attack = GanAttack(G, D)
    low_streak = 0
    n = len(real)
    for epoch in range(cfg.epochs):
        G.train()
        D.train()
        p_real = torch.randperm(n, generator=gen)
        p_fake = torch.randperm(n, generator=gen)
        d_sum = g_sum = 0.0
        for lo in range(0, n, cfg.batch_size):
            xr = real[p_real[lo:lo + cfg.batch_size]]
            xc = cipher[p_fake[lo:lo + cfg.batch_size]]
            fake = G(xc)
            lr_, lf_ = D.logits(xr), D.logits(fake.detach())
            d_loss = (F.binary_cross_entropy_with_logits(lr_, torch.ones_like(lr_))
                      + F.binary_cross_entropy_with_logits(lf_, torch.zeros_like(lf_)))
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()
            lg = D.logits(fake)
            g_loss = F.binary_cross_entropy_with_logits(lg, torch.ones_like(lg))
            opt_g.zero_grad()
            g_loss.backward()
            opt_g.step()
            d_sum += float(d_loss.detach()) * len(xr)
            g_sum += float(g_loss.detach()) * len(xr)
        d_mean, g_mean = d_sum / n, g_sum / n
        attack.history.append({"epoch": epoch, "d_loss": d_mean, "g_loss": g_mean})
        log.info("gan epoch %d: d %.4f g %.4f", epoch, d_mean, g_mean)
        low_streak = low_streak + 1 if d_mean < cfg.collapse_loss else 0
        if low_streak == cfg.collapse_epochs:
            attack.collapsed = True
            warnings.warn(f"discriminator collapse: loss below {cfg.collapse_loss} for "
                          f"{cfg.collapse_epochs} epochs (epoch {epoch})", RuntimeWarning)
    return attack


# ---------------------------------------------------------------------------
# Attack harness
# ---------------------------------------------------------------------------

@dataclass
class AttackReport:
    method: str
    target: str
    psnr: np.ndarray
    ssim: np.ndarray
    params: dict = field(default_factory=dict)
    grid_paths: list = field(default_factory=list)
    reconstructions: np.ndarray | None = None

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(self.ssim))

    def rows(self) -> list[dict]:
        return [{"method": self.method, "target": self.target, "image": i,
                 "psnr": float(p), "ssim": float(s)}
                for i, (p, s) in enumerate(zip(self.psnr, self.ssim))]

    def write(self, out_dir, stem: str | None = None) -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        stem = stem or f"{self.method}_{self.target}"
        csv_path = out_dir / f"{stem}.csv"
        with open(csv_path, "w", newline="") as f:
            w = csv.DictWriter(f, ["method", "target", "image", "psnr", "ssim"],
                               lineterminator="\n")
            w.writeheader()
            for row in self.rows():
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
        txt = out_dir / f"{stem}_summary.txt"
        extra = "".join(f"{k}: {v}\n" for k, v in self.params.items())
        txt.write_text(f"method: {self.method}\ntarget: {self.target}\nimages: {len(self.psnr)}\n"
                       f"mean_psnr: {self.mean_psnr!r}\nmean_ssim: {self.mean_ssim!r}\n" + extra)
        return csv_path, txt


def run_attack(method: str, target_images, plain_images, target: str = "encrypted",
               attack: GanAttack | None = None, literal_floor: bool = False,
               out_dir=None, grid_count: int = 8, keep_reconstructions: bool = False) -> AttackReport:
    """Attack a set of cipher images and score the result against the plains.

    For ``fr`` both leading-bit guesses are tried and the one with higher
    mean PSNR is reported. ``gan`` needs a trained :class:`GanAttack`.
    """
    if target not in ("encrypted", "decoded"):
        raise ValueError(f"unknown target {target!r}")
    cipher8, plain8 = _as_uint8(target_images), _as_uint8(plain_images)
    if cipher8.shape != plain8.shape:
        raise ValueError(f"shape mismatch {cipher8.shape} vs {plain8.shape}")
    params = {}
    if method == "fr":
        best = None
        for b in (0, 1):
            rec = fr_attack(cipher8, b, literal_floor)
            p = psnr_batch(plain8, rec)
            if best is None or p.mean() > best[1].mean():
                best = (rec, p, b)
        rec, p, params["b"] = best
    elif method == "gan":
        if attack is None:
            raise ValueError("gan attack needs a trained generator")
        rec = attack.reconstruct(cipher8)
        p = psnr_batch(plain8, rec)
    else:
        raise ValueError(f"unknown attack {method!r}")
    report = AttackReport(method, target, p, ssim_batch(plain8, rec), params,
                          reconstructions=rec if keep_reconstructions else None)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        rows = [[plain8[i], cipher8[i], rec[i]] for i in range(min(grid_count, len(plain8)))]
        report.grid_paths.append(export_image(image_grid(rows),
                                              out_dir / f"{method}_{target}_grid.png"))
        report.write(out_dir)
    return report


def bundle_cipher(bundle, target: str = "encrypted", snr_db: float = 10.0, seed: int = 0,
                  batch_size: int = 256):
    """Cipher function exposing a trained bundle's encrypted or decoded images
    (8-bit) to an attacker."""
    from .channel import snr_to_sigma2

    @torch.no_grad()
    def cipher_fn(plain8):
        plain8 = _as_uint8(plain8)
        bundle.eval()
        gen = torch.Generator().manual_seed(seed)
        out = []
        for lo in range(0, len(plain8), batch_size):
            x = torch.from_numpy(normalize(plain8[lo:lo + batch_size]))
            y = torch.from_numpy(normalize(denormalize(bundle.encrypt(x))))
            if target == "decoded":
                y = torch.from_numpy(normalize(denormalize(
                    bundle.transmit(y, snr_to_sigma2(snr_db), gen))))
            out.append(denormalize(y))
        return np.concatenate(out)

    return cipher_fn


def shuffle_cipher(key_seed: int = 0):
    """Cipher function for the keyed-shuffle baseline."""
    def cipher_fn(plain8):
        plain8 = _as_uint8(plain8)
        return keyed_shuffle_encrypt(plain8, ShuffleKey(key_seed, plain8[0].size))

    return cipher_fn
