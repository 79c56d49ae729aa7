"""Command-line entry point wiring config, data, training and exports.

    agglomerator pretrain       contrastive pretraining -> pretrain.ckpt
    agglomerator train          frozen-backbone classifier -> model.ckpt
    agglomerator eval           top-1 / per-class accuracy of a checkpoint
    agglomerator export-islands 2D level fields + features dump
    agglomerator export-latent  feature vectors + PCA projection dump
    agglomerator ablate         pretrain under a named ablation variant

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Every run writes <output>/manifest.json with the resolved config, seed and
checkpoint hashes needed to reproduce it.

Heavy imports happen after argument parsing so `workers=N` can pin the BLAS
thread count before numpy loads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .config import (ABLATIONS, PROFILES, ConfigError, TrainConfig,
                     load_config_file, parse_overrides)

_THREAD_VARS = ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="agglomerator",
        description="Column-lattice classifier: training, evaluation, interpretability exports.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="config override; repeatable; beats the config file")
        p.add_argument("--profile", choices=sorted(PROFILES), default="desk",
                       help="base hyper-parameter profile (default: desk)")
        p.add_argument("--seed", type=int, help="master seed (overrides config)")
        p.add_argument("--data-dir", help="dataset root (default: $AGGLOMERATOR_DATA or ./data)")
        p.add_argument("--output", default="runs/latest", help="output directory")
        if checkpoint:
            p.add_argument("--checkpoint", help="checkpoint path (without extension)")

    common(sub.add_parser("pretrain", help="phase 1: contrastive pretraining"))
    common(sub.add_parser("train", help="phase 2: classifier over frozen weights"),
           checkpoint=True)
    common(sub.add_parser("eval", help="evaluate a trained model"), checkpoint=True)
    for name in ("export-islands", "export-latent"):
        p = sub.add_parser(name, help=f"write the {name.split('-')[1]} dump")
        common(p, checkpoint=True)
        p.add_argument("--samples", type=int, default=256,
                       help="number of test samples to export (default 256)")
    p = sub.add_parser("ablate", help="pretrain under an ablation variant")
    common(p)
    p.add_argument("--variant", choices=ABLATIONS, required=True)
    return parser


def resolve_config(args) -> TrainConfig:
    cfg = PROFILES[args.profile]()
    if args.config:
        cfg = load_config_file(args.config, base=cfg)
    if args.override:
        cfg = parse_overrides(cfg, args.override)
    pairs = []
    if args.seed is not None:
        pairs.append(f"seed={args.seed}")
    if args.data_dir:
        pairs.append(f"data_dir={args.data_dir}")
    if getattr(args, "variant", None):
        pairs.append(f"ablation={args.variant}")
    if pairs:
        cfg = parse_overrides(cfg, pairs)
    return cfg.validate()


def _pin_threads(cfg: TrainConfig) -> None:
    if cfg.workers > 0 and "numpy" not in sys.modules:
        for var in _THREAD_VARS:
            os.environ[var] = str(cfg.workers)


def _write_manifest(out_dir: Path, command: str, cfg: TrainConfig, checkpoints: dict):
    from . import checkpoint as ckpt_mod
    hashes = {}
    for name, path in checkpoints.items():
        try:
            hashes[name] = ckpt_mod.blob_sha256(path)
        except FileNotFoundError:
            hashes[name] = None
    manifest = {
        "command": command,
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "checkpoints": hashes,
        "threads": {var: os.environ.get(var) for var in _THREAD_VARS},
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _load_model(cfg, checkpoint_path, out_dir, need="model"):
    from . import checkpoint as ckpt_mod
    from .model import Agglomerator
    path = Path(checkpoint_path) if checkpoint_path else out_dir / f"{need}.ckpt"
    values = ckpt_mod.load(path)
    model = Agglomerator(cfg)
    if need == "pretrain":
        model.load_backbone(values)
    else:
        model.load_state(values)
    return model, path


def _dispatch(args) -> int:
    cfg = resolve_config(args)
    _pin_threads(cfg)

    from . import checkpoint as ckpt_mod
    from . import interpret, training
    from .data import load_dataset, normalize_images
    from .model import Agglomerator
    from .rng import RngStreams

    out_dir = Path(args.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    progress = lambda msg: print(msg, flush=True)

    if args.command in ("pretrain", "ablate"):
        train_ds, _ = load_dataset(cfg)
        training.pretrain(cfg, train_ds, out_dir=out_dir, progress=progress)
        _write_manifest(out_dir, args.command, cfg, {"pretrain.ckpt": out_dir / "pretrain.ckpt"})
        print(f"wrote {out_dir / 'pretrain.ckpt'}.{{manifest,blob}} and metrics.csv")
        return 0

    if args.command == "train":
        train_ds, test_ds = load_dataset(cfg)
        model, src = _load_model(cfg, args.checkpoint, out_dir, need="pretrain")
        _, _, acc = training.train_classifier(model, cfg, train_ds, test_ds,
                                              out_dir=out_dir, progress=progress)
        _write_manifest(out_dir, "train", cfg,
                        {"pretrain.ckpt": src, "model.ckpt": out_dir / "model.ckpt"})
        print(f"test accuracy {acc:.4f}; error {100 * (1 - acc):.2f}%")
        return 0

    if args.command == "eval":
        _, test_ds = load_dataset(cfg)
        model, src = _load_model(cfg, args.checkpoint, out_dir, need="model")
        acc, per_class = training.evaluate(model, test_ds)
        _write_manifest(out_dir, "eval", cfg, {"model.ckpt": src})
        print(f"top-1 accuracy {acc:.4f} (error {100 * (1 - acc):.2f}%)")
        for cls, a in enumerate(per_class):
            print(f"  class {cls}: {a:.4f}")
        return 0

    if args.command in ("export-islands", "export-latent"):
        _, test_ds = load_dataset(cfg)
        model, src = _load_model(cfg, args.checkpoint, out_dir, need="model")
        n = min(args.samples, len(test_ds))
        images = normalize_images(test_ds.images[:n], test_ds.mean, test_ds.std)
        labels = test_ds.labels[:n]
        streams = RngStreams(cfg.seed)

        import numpy as np
        from . import tensor as T
        feats_parts, levels_parts = [], []
        with T.no_grad():
            for start in range(0, n, cfg.batch_size):
                sl = slice(start, start + cfg.batch_size)
                feats, state = model.features(images[sl].astype(model.dtype),
                                              init_gen=streams.derive("state", 0, start),
                                              train=False, return_state=True)
                feats_parts.append(feats.value)
                levels_parts.append(state.levels_array())
        features = np.concatenate(feats_parts)
        meta = {
            "config": cfg.to_dict(),
            "checkpoint": ckpt_mod.blob_sha256(src),
            "samples": n,
        }

        if args.command == "export-islands":
            levels = np.concatenate(levels_parts)
            reducer = interpret.fit_level_reducer(levels[:min(64, n)])
            vectors = interpret.reduce_levels_2d(levels, reducer)
            arrays = {"vectors_2d": vectors, "features": features,
                      "labels": labels.astype(np.int64)}
            dump = out_dir / "islands.dump"
            interpret.save_dump(dump, arrays, meta)
            interpret.write_feature_csv(out_dir / "islands.csv", features, labels)
        else:
            coords, explained = interpret.pca_2d(features)
            meta["explained_variance"] = [float(v) for v in explained]
            if cfg.dataset == "cifar10":
                sup = interpret.cifar10_superclass(labels)
                meta["overlap_percent"] = interpret.overlap_metric(coords, sup)
                meta["superclasses"] = list(interpret.CIFAR10_SUPERCLASS_NAMES)
            arrays = {"features": features, "coords_2d": coords,
                      "labels": labels.astype(np.int64)}
            dump = out_dir / "latent.dump"
            interpret.save_dump(dump, arrays, meta)
            interpret.write_feature_csv(out_dir / "latent.csv", features, labels)

        _write_manifest(out_dir, args.command, cfg, {"model.ckpt": src})
        print(f"wrote {dump}")
        return 0

    raise AssertionError(f"unhandled command {args.command}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
