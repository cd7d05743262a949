"""Command line entry point: ``djescc <command> [options]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import torch

from . import attacks, imagedata, models, pipeline, training


def _add_config(p):
    p.add_argument("--config", help="INI config file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override a config key (repeatable)")


def _load(args):
    return pipeline.load_config(args.config, args.overrides)


def cmd_prepare_data(args):
    path = imagedata.prepare_dataset(args.dataset, args.cache_dir, url=args.url)
    print(f"prepared {args.dataset} in {path}")


def cmd_pretrain_features(args):
    cfg, _ = _load(args)
    train = imagedata.load_dataset(cfg.dataset, "train", args.cache_dir, count=cfg.train_count)
    test = imagedata.load_dataset(cfg.dataset, "test", args.cache_dir, count=cfg.test_count)
    fx, acc = models.pretrain_feature_extractor(train, seed=cfg.seed, epochs=args.epochs,
                                                test_split=test, blocks=cfg.feature_blocks)
    fx.save(args.out, test_accuracy=acc, seed=cfg.seed, epochs=args.epochs)
    print(f"saved {args.out} (test accuracy {acc:.4f})")


def cmd_train(args):
    cfg, att = _load(args)
    run_dir = Path(args.run_dir)
    train = imagedata.load_dataset(cfg.dataset, "train", args.cache_dir, count=cfg.train_count)
    result = training.fit(cfg, run_dir, train, resume=not args.fresh, stop_after=args.stop_after)
    (run_dir / "config.ini").write_text(pipeline.dump_config(cfg, att))
    if result.finished:
        for role in ("owner", "provider", "recipient"):
            result.bundle.export_part(role, run_dir / f"{role}.pt")
    pipeline.write_manifest(run_dir, cfg, "train" if result.finished else "train-partial")
    print(f"{'finished' if result.finished else 'paused'} after {len(result.log)} epochs: {run_dir}")


def _run_bundle(run_dir: Path, which: str):
    cfg = pipeline.read_run_config(run_dir)
    return cfg, models.ModelBundle.load(run_dir / f"{which}.pt")


def cmd_evaluate(args):
    run_dir = Path(args.run_dir)
    cfg, bundle = _run_bundle(run_dir, args.checkpoint)
    test = imagedata.load_dataset(cfg.dataset, "test", args.cache_dir,
                                  count=args.count or cfg.test_count)
    extractor = training.build_extractor(cfg) if cfg.log_feature_losses else None
    rows = training.evaluate(bundle, test, cfg.eval_snrs, cfg.eval_repeats, cfg.eval_seed,
                             extractor=extractor, run_id=run_dir.name,
                             grid_dir=run_dir / "eval" / "grids")
    training.write_metrics(rows, run_dir / "eval")
    pipeline.write_manifest(run_dir, cfg, "evaluate")
    for rec in training.summarize(rows):
        print(f"{rec['pipeline']:>10} SNR {rec['snr_db']:>5}: PSNR {rec['psnr']:.3f} dB")


def cmd_encrypt(args):
    net = models.load_part(args.key, "owner")
    with torch.no_grad():
        y = net(torch.from_numpy(imagedata.import_image(args.input)))
    imagedata.export_image(y.numpy(), args.output)


def cmd_transmit(args):
    enc, dec = models.load_part(args.codec, "provider")
    y = torch.from_numpy(imagedata.import_image(args.input))
    gen = torch.Generator().manual_seed(args.seed)
    from .channel import awgn_apply, snr_to_sigma2

    with torch.no_grad():
        yhat = dec(awgn_apply(enc(y), snr_to_sigma2(args.snr_db), gen), y.shape[1:3])
    imagedata.export_image(yhat.numpy(), args.output)


def cmd_decrypt(args):
    net = models.load_part(args.key, "recipient")
    with torch.no_grad():
        x = net(torch.from_numpy(imagedata.import_image(args.input)))
    imagedata.export_image(x.numpy(), args.output)


def cmd_attack(args):
    run_dir = Path(args.run_dir)
    cfg, bundle = _run_bundle(run_dir, args.checkpoint)
    _, att = _load(args)
    dataset = args.dataset or cfg.dataset
    test = imagedata.load_dataset(dataset, "test", args.cache_dir, count=att.attack_count)
    cipher_fn = attacks.bundle_cipher(bundle, args.target, att.attack_snr_db, att.attack_seed)
    gan = None
    if args.method == "gan":
        split = att.gan_split if dataset == "stl10" else "train"
        train = imagedata.load_dataset(dataset, split, args.cache_dir, count=att.gan_count)
        gan = attacks.gan_attack_train(cipher_fn, train, attacks.GanAttackConfig(
            epochs=att.gan_epochs, lr=att.gan_lr, batch_size=att.gan_batch_size,
            width=att.gan_width, seed=att.attack_seed))
    report = attacks.run_attack(args.method, cipher_fn(test.raw), test.raw, args.target,
                                attack=gan, out_dir=run_dir / "attacks")
    pipeline.write_manifest(run_dir, cfg, f"attack-{args.method}-{args.target}")
    print(f"{args.method} on {args.target}: PSNR {report.mean_psnr:.3f} dB, "
          f"SSIM {report.mean_ssim:.4f}")


def cmd_report(args):
    out = pipeline.emit_report(args.runs, args.out, args.pipeline)
    for gap in out["gaps"]:
        print(f"gap: {gap}")
    print(f"report written to {args.out}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="djescc")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-data", help="download and cache a dataset")
    p.add_argument("--dataset", required=True, choices=sorted(imagedata.SOURCES))
    p.add_argument("--cache-dir")
    p.add_argument("--url", help="alternative archive URL (e.g. a local mirror)")
    p.set_defaults(func=cmd_prepare_data)

    p = sub.add_parser("pretrain-features", help="pretrain the VGG16-bn feature extractor")
    _add_config(p)
    p.add_argument("--cache-dir")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain_features)

    p = sub.add_parser("train", help="train a bundle end to end")
    _add_config(p)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--cache-dir")
    p.add_argument("--fresh", action="store_true", help="ignore an existing checkpoint")
    p.add_argument("--stop-after", type=int, help="pause after this many epochs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="repeated-transmission evaluation of a run")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--checkpoint", default="final", choices=["final", "best"])
    p.add_argument("--count", type=int)
    p.add_argument("--cache-dir")
    p.set_defaults(func=cmd_evaluate)

    for name, key, helptext in (("encrypt", "owner", "image owner: plain -> encrypted"),
                                ("decrypt", "recipient", "image recipient: decoded -> plain")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--key", required=True, help=f"{key} sub-bundle (.pt)")
        p.add_argument("--in", dest="input", required=True)
        p.add_argument("--out", dest="output", required=True)
        p.set_defaults(func=cmd_encrypt if name == "encrypt" else cmd_decrypt)

    p = sub.add_parser("transmit", help="service provider: encrypted -> decoded over AWGN")
    p.add_argument("--codec", required=True, help="provider sub-bundle (.pt)")
    p.add_argument("--snr-db", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", dest="output", required=True)
    p.set_defaults(func=cmd_transmit)

    p = sub.add_parser("attack", help="ciphertext-only attack on a run's images")
    _add_config(p)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--checkpoint", default="final", choices=["final", "best"])
    p.add_argument("--method", required=True, choices=["fr", "gan"])
    p.add_argument("--target", default="encrypted", choices=["encrypted", "decoded"])
    p.add_argument("--dataset", help="attack images from this dataset (default: the run's)")
    p.add_argument("--cache-dir")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("report", help="curves and tables over finished runs")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--pipeline", default="continuous", choices=["continuous", "quantized"])
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (pipeline.ConfigError, training.ConfigMismatchError, models.ConfigurationError,
            imagedata.FetchError, imagedata.IntegrityError, ValueError, FileNotFoundError) as exc:
        print(f"djescc {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
