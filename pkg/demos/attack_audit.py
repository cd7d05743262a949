"""Ciphertext-only attacks on learned and shuffle ciphers, 96x96 photo crops.

Loads a trained bundle (by default the lambda=0.05 run written by
``surrogate_sweep.py``), encrypts held-out 96x96 crops with it and with a
keyed pixel shuffle, then runs the FR and GAN attacks on both. The networks
are fully convolutional, so a bundle trained on 32x32 crops applies as is.

    python demos/attack_audit.py --bundle demo_runs/sweep/learned_t16_lam0.05/final.pt
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

from djescc.attacks import GanAttackConfig, bundle_cipher, gan_attack_train, run_attack, shuffle_cipher
from djescc.imagedata import load_dataset
from djescc.models import ModelBundle


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--bundle", default="demo_runs/sweep/learned_t16_lam0.05/final.pt")
    ap.add_argument("--out", default="demo_runs/attacks")
    ap.add_argument("--test-count", type=int, default=100)
    ap.add_argument("--gan-count", type=int, default=512)
    ap.add_argument("--gan-epochs", type=int, default=30)
    args = ap.parse_args()

    out = Path(args.out)
    bundle = ModelBundle.load(args.bundle)
    bundle.eval()
    test = load_dataset("photos96", "test", count=args.test_count).raw
    gan_train = load_dataset("photos96", "train", count=args.gan_count).raw
    ciphers = {"djescc": bundle_cipher(bundle, "encrypted"), "shuffle": shuffle_cipher(0)}
    cfg = GanAttackConfig(epochs=args.gan_epochs, seed=0)

    summary = {}
    for name, fn in ciphers.items():
        cipher = fn(test)
        fr = run_attack("fr", cipher, test, out_dir=out / name)
        attack = gan_attack_train(fn, gan_train, cfg)
        gan = run_attack("gan", cipher, test, attack=attack, out_dir=out / name)
        summary[name] = {"fr_psnr": fr.mean_psnr, "fr_ssim": fr.mean_ssim,
                         "gan_psnr": gan.mean_psnr, "gan_ssim": gan.mean_ssim,
                         "gan_collapsed": attack.collapsed}
        print(name, json.dumps(summary[name]), flush=True)

    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    lines = ["| cipher | FR PSNR | FR SSIM | GAN PSNR | GAN SSIM |", "|---|---|---|---|---|"]
    for name, s in summary.items():
        lines.append(f"| {name} | {s['fr_psnr']:.2f} | {s['fr_ssim']:.4f} | "
                     f"{s['gan_psnr']:.2f} | {s['gan_ssim']:.4f} |")
    (out / "summary.md").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))


if __name__ == "__main__":
    main()
