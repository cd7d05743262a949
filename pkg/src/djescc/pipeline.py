"""Run configuration files, run manifests and reports.

A config file is INI text with one section per concern. Every key maps onto
a field of :class:`~djescc.training.ExperimentConfig` or
:class:`AttackSettings`; unknown keys are rejected::

    [data]
    dataset = cifar10
    [model]
    t = 16
    [train]
    lambda_e = 0.05
    lambda_d = 0.05
    epochs = 500
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import datetime as dt
import hashlib
import json
import subprocess
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .training import ExperimentConfig

SECTIONS = {
    "data": ("dataset", "train_count", "test_count"),
    "model": ("t", "unet_width", "encoder_widths", "cipher", "cipher_seed",
              "feature_extractor", "feature_blocks"),
    "train": ("lambda_e", "lambda_d", "snr_train_min", "snr_train_max", "per_image_snr",
              "epochs", "batch_size", "initial_lr", "plateau_patience", "plateau_factor",
              "plateau_threshold", "seed", "log_feature_losses"),
    "eval": ("eval_snrs", "eval_repeats", "eval_seed"),
    "attack": ("gan_epochs", "gan_lr", "gan_batch_size", "gan_width", "gan_count",
               "gan_split", "attack_snr_db", "attack_count", "attack_seed"),
}


@dataclass
class AttackSettings:
    gan_epochs: int = 600
    gan_lr: float = 1e-4
    gan_batch_size: int = 64
    gan_width: int = 32
    gan_count: int | None = None
    gan_split: str = "unlabeled"
    attack_snr_db: float = 10.0
    attack_count: int = 100
    attack_seed: int = 0


class ConfigError(ValueError):
    pass


def _parse_value(raw: str, default):
    raw = raw.strip()
    if raw.lower() in ("none", ""):
        return None
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if isinstance(default, tuple):
        return tuple(type(default[0])(v) for v in raw.replace(",", " ").split())
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, int):
        return int(raw)
    if default is None:
        try:
            return int(raw)
        except ValueError:
            return raw
    return raw


def _defaults() -> dict:
    out = {}
    for cls in (ExperimentConfig, AttackSettings):
        for f in dataclasses.fields(cls):
            out[f.name] = f.default
    return out


def _key_section() -> dict:
    return {k: sec for sec, keys in SECTIONS.items() for k in keys}


def load_config(path=None, overrides=()) -> tuple[ExperimentConfig, AttackSettings]:
    """Read a config file (optional) and apply ``key=value`` overrides.

    Override keys may be qualified as ``section.key``.
    """
    defaults, where = _defaults(), _key_section()
    values: dict = {}
    if path is not None:
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise ConfigError(f"cannot read config {path}")
        for section in parser.sections():
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}]")
            for key, raw in parser.items(section):
                if where.get(key) != section:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                values[key] = _parse_value(raw, defaults[key])
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        key = key.strip().split(".")[-1]
        if key not in where:
            raise ConfigError(f"unknown key {key!r}")
        values[key] = _parse_value(raw, defaults[key])
    exp_keys = {f.name for f in dataclasses.fields(ExperimentConfig)}
    try:
        cfg = ExperimentConfig(**{k: v for k, v in values.items() if k in exp_keys})
        att = AttackSettings(**{k: v for k, v in values.items() if k not in exp_keys})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    return cfg, att


def dump_config(cfg: ExperimentConfig, att: AttackSettings | None = None) -> str:
    """Render configs back to INI text (round-trips through :func:`load_config`)."""
    vals = cfg.to_dict() | dataclasses.asdict(att or AttackSettings())
    lines = []
    for section, keys in SECTIONS.items():
        lines.append(f"[{section}]")
        for k in keys:
            v = vals[k]
            if isinstance(v, (list, tuple)):
                v = ", ".join(str(x) for x in v)
            lines.append(f"{k} = {v}")
        lines.append("")
    return "\n".join(lines)


def config_reference() -> str:
    """Markdown table of every config key and its default."""
    defaults, where = _defaults(), _key_section()
    lines = ["| section | key | default |", "|---|---|---|"]
    for key, sec in where.items():
        lines.append(f"| {sec} | {key} | {defaults[key]} |")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

def _source_revision() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).parent, timeout=5)
        if rev.returncode == 0:
            return rev.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return f"djescc {__version__}"


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(run_dir, cfg: ExperimentConfig, event: str) -> Path:
    """Create or update ``manifest.json`` binding all run artifacts to the
    config hash."""
    run_dir = Path(run_dir)
    path = run_dir / "manifest.json"
    now = dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")
    manifest = json.loads(path.read_text()) if path.exists() else {
        "run_id": run_dir.name, "config_hash": cfg.hash(), "created": now, "events": []}
    if manifest["config_hash"] != cfg.hash():
        raise ConfigError(f"run {run_dir} belongs to config {manifest['config_hash']}")
    manifest["source_revision"] = _source_revision()
    manifest["events"].append({"event": event, "time": now})
    manifest["artifacts"] = {
        str(p.relative_to(run_dir)): _sha256(p)
        for p in sorted(run_dir.rglob("*"))
        if p.is_file() and p.name != "manifest.json" and p.suffix in (".csv", ".pt", ".json", ".txt")
    }
    path.write_text(json.dumps(manifest, indent=2))
    return path


def read_run_config(run_dir) -> ExperimentConfig:
    data = json.loads((Path(run_dir) / "config.json").read_text())
    data.pop("config_hash", None)
    return ExperimentConfig.from_dict(data)


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def monotone_in_snr(snrs, psnrs, tol: float = 0.2) -> bool:
    """True when PSNR never drops by more than ``tol`` between adjacent SNRs."""
    order = np.argsort(snrs)
    p = np.asarray(psnrs, dtype=float)[order]
    return bool(np.all(np.diff(p) >= -tol))


def emit_report(run_dirs, out_dir, pipeline: str = "continuous") -> dict:
    """Collect evaluation summaries and attack results of finished runs.

    Writes ``curves.csv`` (values copied verbatim from each run's
    ``eval/summary.csv``), ``attacks.csv``, ``psnr_vs_snr.png`` and
    ``report.md``. Missing inputs are listed as gaps rather than filled.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    curves, attacks, gaps, checks, grids = [], [], [], {}, []
    for run_dir in map(Path, run_dirs):
        try:
            cfg = read_run_config(run_dir)
        except FileNotFoundError:
            gaps.append(f"{run_dir}: no config.json")
            continue
        summary = run_dir / "eval" / "summary.csv"
        if not summary.exists():
            gaps.append(f"{run_dir.name}: no eval/summary.csv")
        else:
            rows = [r for r in _read_csv(summary) if r["pipeline"] == pipeline]
            for col in ("psnr", "ssim"):
                if not rows or col not in rows[0] or any(r.get(col, "") == "" for r in rows):
                    gaps.append(f"{run_dir.name}: column {col!r} missing or empty")
            for r in rows:
                curves.append({"run_id": run_dir.name, "lambda_e": cfg.lambda_e,
                               "lambda_d": cfg.lambda_d, "t": cfg.t,
                               "bandwidth_ratio": f"{cfg.t}/96", "cipher": cfg.cipher,
                               "snr_db": r["snr_db"], "psnr": r.get("psnr", ""),
                               "ssim": r.get("ssim", "")})
            pts = [(float(r["snr_db"]), float(r["psnr"])) for r in rows
                   if r.get("psnr") and np.isfinite(float(r["snr_db"]))]
            if pts:
                checks[run_dir.name] = monotone_in_snr(*zip(*pts))
        grids += sorted((run_dir / "eval" / "grids").glob("*.png"))
        for txt in sorted((run_dir / "attacks").glob("*_summary.txt")):
            rec = dict(line.split(": ", 1) for line in txt.read_text().splitlines() if ": " in line)
            attacks.append({"run_id": run_dir.name, **rec})

    fields = ["run_id", "lambda_e", "lambda_d", "t", "bandwidth_ratio", "cipher",
              "snr_db", "psnr", "ssim"]
    with open(out_dir / "curves.csv", "w", newline="") as f:
        w = csv.DictWriter(f, fields, lineterminator="\n")
        w.writeheader()
        w.writerows(curves)
    att_fields = ["run_id", "method", "target", "images", "mean_psnr", "mean_ssim", "b"]
    with open(out_dir / "attacks.csv", "w", newline="") as f:
        w = csv.DictWriter(f, att_fields, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        w.writerows(attacks)

    figure = None
    if curves:
        figure = _plot_curves(curves, out_dir / "psnr_vs_snr.png")
    lines = ["# Report", "", f"pipeline: {pipeline}", "", "## PSNR vs SNR", "",
             "| run | lambda | R | SNR (dB) | PSNR | SSIM |", "|---|---|---|---|---|---|"]
    lines += [f"| {c['run_id']} | {c['lambda_e']} | {c['bandwidth_ratio']} | {c['snr_db']} "
              f"| {c['psnr']} | {c['ssim']} |" for c in curves]
    lines += ["", "## Non-decreasing in SNR (0.2 dB tolerance)", ""]
    lines += [f"- {k}: {'yes' if v else 'NO'}" for k, v in checks.items()]
    if attacks:
        lines += ["", "## Attacks", "", "| run | method | target | PSNR | SSIM |",
                  "|---|---|---|---|---|"]
        lines += [f"| {a['run_id']} | {a.get('method')} | {a.get('target')} | "
                  f"{a.get('mean_psnr')} | {a.get('mean_ssim')} |" for a in attacks]
    if grids:
        lines += ["", "## Sample grids (rows: SNR; columns: plain, encrypted, decoded, "
                  "decrypted)", ""]
        lines += [f"- {g}" for g in grids]
    lines += ["", "## Gaps", ""] + ([f"- {g}" for g in gaps] or ["none"])
    (out_dir / "report.md").write_text("\n".join(lines) + "\n")
    return {"curves": curves, "attacks": attacks, "gaps": gaps, "monotone": checks,
            "figure": figure, "grids": grids}


def _plot_curves(curves: list[dict], path: Path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    runs: dict[str, list] = {}
    for c in curves:
        if c["psnr"] and np.isfinite(float(c["snr_db"])):
            runs.setdefault(c["run_id"], []).append(c)
    for run_id, pts in runs.items():
        pts.sort(key=lambda c: float(c["snr_db"]))
        label = (f"{run_id} (lambda={pts[0]['lambda_e']}, R={pts[0]['bandwidth_ratio']}, "
                 f"{pts[0]['cipher']})")
        ax.plot([float(c["snr_db"]) for c in pts], [float(c["psnr"]) for c in pts],
                marker="o", label=label)
    ax.set_xlabel("SNR (dB)")
    ax.set_ylabel("PSNR (dB)")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
