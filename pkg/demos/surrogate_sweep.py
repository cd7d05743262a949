"""Weight sweep, shuffle baseline and bandwidth comparison on photo crops.

A CPU-sized stand-in for the CIFAR-10 desk runs: 32x32 crops of the sample
photos bundled with scikit-image / scikit-learn, a randomly initialised
feature trunk instead of a pretrained one, and a few dozen epochs. Writes one
run directory per configuration plus ``results.md`` under ``--out``.

    python demos/surrogate_sweep.py --out demo_runs/sweep --epochs 25
"""

from __future__ import annotations

import argparse
import dataclasses
import json
from pathlib import Path

import numpy as np

from djescc.imagedata import load_dataset
from djescc.models import FeatureExtractor
from djescc.pipeline import emit_report, write_manifest
from djescc.training import ExperimentConfig, evaluate, fit, mean_psnr, write_metrics

LAMBDAS = (0.0, 0.005, 0.05, 0.5)


def run_one(cfg, out: Path, train, test, fx):
    name = f"{cfg.cipher}_t{cfg.t}_lam{cfg.lambda_e}"
    run_dir = out / name
    result = fit(cfg, run_dir, train, extractor=fx)
    write_manifest(run_dir, cfg, "train")
    rows = evaluate(result.bundle, test, cfg.eval_snrs, cfg.eval_repeats, cfg.eval_seed,
                    extractor=fx, run_id=name, pipelines=("continuous",),
                    grid_dir=run_dir / "eval" / "grids", grid_count=4)
    write_metrics(rows, run_dir / "eval")
    write_manifest(run_dir, cfg, "evaluate")
    return name, run_dir, {
        "psnr": {s: mean_psnr(rows, s) for s in cfg.eval_snrs},
        "psnr_encrypted": float(np.mean([r["psnr_encrypted"] for r in rows])),
        "final_l_r": result.log[-1]["l_r"],
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="demo_runs/sweep")
    ap.add_argument("--epochs", type=int, default=25)
    ap.add_argument("--train-count", type=int, default=1024)
    ap.add_argument("--test-count", type=int, default=200)
    args = ap.parse_args()

    out = Path(args.out)
    base = ExperimentConfig(dataset="photos32", train_count=args.train_count,
                            test_count=args.test_count, epochs=args.epochs,
                            log_feature_losses=False, eval_repeats=2)
    train = load_dataset(base.dataset, "train", count=base.train_count)
    test = load_dataset(base.dataset, "test", count=base.test_count)
    fx = FeatureExtractor.random(base.feature_blocks, seed=base.seed)

    configs = [dataclasses.replace(base, lambda_e=lam, lambda_d=lam) for lam in LAMBDAS]
    configs.append(dataclasses.replace(base, cipher="shuffle"))
    configs.append(dataclasses.replace(base, t=8, lambda_e=0.05, lambda_d=0.05))

    results, dirs = {}, []
    for cfg in configs:
        name, run_dir, res = run_one(cfg, out, train, test, fx)
        results[name], dirs = res, dirs + [run_dir]
        print(name, json.dumps(res["psnr"]), f"enc {res['psnr_encrypted']:.2f}", flush=True)

    emit_report(dirs, out / "report")
    (out / "results.json").write_text(json.dumps(results, indent=1))

    snrs = base.eval_snrs
    lines = ["| run | " + " | ".join(f"{s:g} dB" for s in snrs) + " | PSNR(x, y) | final l_r |",
             "|---" * (len(snrs) + 3) + "|"]
    for name, res in results.items():
        cells = " | ".join(f"{res['psnr'][s]:.2f}" for s in snrs)
        lines.append(f"| {name} | {cells} | {res['psnr_encrypted']:.2f} | {res['final_l_r']:.4f} |")
    (out / "results.md").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))


if __name__ == "__main__":
    main()
