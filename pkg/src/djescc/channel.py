"""AWGN channel simulation on blocks of complex symbols.

Conventions used throughout the package:

* the real encoder output of one image is flattened; the first half becomes
  the in-phase (real) parts and the second half the quadrature (imaginary)
  parts of ``k`` complex symbols;
* each block is scaled to unit average symbol power;
* ``SNR(dB) = 10 log10(1 / sigma2)``, with ``sigma2`` the total noise power
  per complex symbol, split evenly between I and Q.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch


@dataclass(frozen=True)
class ChannelConfig:
    snr_db_min: float = 0.0
    snr_db_max: float = 20.0
    mode: str = "train-sample"  # or "fixed-test"
    seed: int = 0

    def __post_init__(self):
        if self.snr_db_min > self.snr_db_max:
            raise ValueError("snr_db_min must not exceed snr_db_max")
        if self.mode not in ("train-sample", "fixed-test"):
            raise ValueError(f"unknown channel mode {self.mode!r}")


def pack_complex(reals: torch.Tensor) -> torch.Tensor:
    """(batch, ...) reals -> (batch, k) complex symbols, half-split convention."""
    flat = reals.reshape(reals.shape[0], -1)
    if flat.shape[1] % 2:
        raise ValueError("number of real values per block must be even")
    k = flat.shape[1] // 2
    return torch.complex(flat[:, :k], flat[:, k:])


def unpack_complex(z: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`pack_complex`; returns (batch, 2k) reals."""
    return torch.cat([z.real, z.imag], dim=1)


def average_power(z: torch.Tensor) -> torch.Tensor:
    """Per-block average symbol power (1/k) sum |z_i|^2."""
    return (z.real ** 2 + z.imag ** 2).mean(dim=1)


def power_normalize(z: torch.Tensor) -> torch.Tensor:
    """Scale each block so that its average symbol power is exactly one."""
    energy = (z.real ** 2 + z.imag ** 2).sum(dim=1, keepdim=True)
    if bool((energy == 0).any()):
        raise ValueError("cannot power-normalize a zero-energy block")
    k = z.shape[1]
    return z * torch.sqrt(k / energy)


def snr_to_sigma2(snr_db: float) -> float:
    """Noise power per complex symbol for unit signal power.

    ``inf`` maps to zero noise (noiseless diagnostic runs).
    """
    if math.isinf(snr_db) and snr_db > 0:
        return 0.0
    if not math.isfinite(snr_db):
        raise ValueError(f"invalid SNR {snr_db}")
    return 10.0 ** (-snr_db / 10.0)


def awgn_apply(z: torch.Tensor, sigma2, generator: torch.Generator | None = None) -> torch.Tensor:
    """Add circularly symmetric complex Gaussian noise of total power ``sigma2``.

    ``sigma2`` may be a scalar or a per-block tensor of shape (batch,).
    """
    sigma2 = torch.as_tensor(sigma2, dtype=z.real.dtype)
    if bool((sigma2 < 0).any()):
        raise ValueError("noise variance must be non-negative")
    if sigma2.ndim == 1:
        sigma2 = sigma2[:, None]
    std = torch.sqrt(sigma2 / 2)
    shape = (2,) + tuple(z.shape)
    noise = torch.randn(shape, generator=generator, dtype=z.real.dtype)
    return z + torch.complex(std * noise[0], std * noise[1])


def sample_snr(cfg: ChannelConfig, generator: torch.Generator | None = None,
               size: int | None = None):
    """Draw SNR values (dB) uniformly from the configured range.

    In fixed-test mode ``snr_db_min`` is returned. With ``size`` a tensor of
    draws is returned, otherwise a float.
    """
    n = 1 if size is None else size
    if cfg.mode == "fixed-test" or cfg.snr_db_min == cfg.snr_db_max:
        out = torch.full((n,), float(cfg.snr_db_min), dtype=torch.float64)
    else:
        u = torch.rand(n, generator=generator, dtype=torch.float64)
        out = cfg.snr_db_min + (cfg.snr_db_max - cfg.snr_db_min) * u
    return float(out[0]) if size is None else out
