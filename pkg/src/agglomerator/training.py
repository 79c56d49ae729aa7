"""Two-phase training: contrastive pretraining, then a frozen-backbone
classifier head, with a triangular cyclic learning rate throughout.

Phase one duplicates every image in the batch, augments the two copies
independently, propagates both through the lattice and minimizes the
supervised contrastive loss over the projection head's features. Phase two
freezes everything learned so far, attaches the classification head and
trains only it under cross-entropy on single augmented views.

Metrics go to a CSV with one line per epoch:
    epoch,phase,loss,lr,accuracy        (accuracy only on eval'd epochs)

Bit-identical reruns for a fixed seed and thread count are part of the
contract: every random draw routes through named, keyed streams.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from . import heads
from . import tensor as T
from .augment import rand_augment
from .config import TrainConfig
from .data import Dataset, normalize_images
from .model import Agglomerator, BACKBONE_PREFIXES
from .optim import SGD, DivergedError
from .rng import RngStreams


# classifier-phase stream keys start here so the two phases never share draws
_CLASSIFIER_PHASE_KEY = 1_000_000


def cyclic_lr(step: int, steps_per_half_cycle: int, lr_min: float, lr_max: float) -> float:
    """Triangular schedule: lr_min up to lr_max and back, repeating."""
    if steps_per_half_cycle < 1:
        raise ValueError(f"steps_per_half_cycle must be >= 1, got {steps_per_half_cycle}")
    pos = step % (2 * steps_per_half_cycle)
    if pos > steps_per_half_cycle:
        pos = 2 * steps_per_half_cycle - pos
    return lr_min + (lr_max - lr_min) * (pos / steps_per_half_cycle)


def epoch_batches(n: int, batch_size: int, gen: np.random.Generator) -> list[np.ndarray]:
    """Shuffled full batches (remainder dropped for a fixed step count)."""
    perm = gen.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n - batch_size + 1, batch_size)]


class MetricsLog:
    HEADER = "epoch,phase,loss,lr,accuracy"

    def __init__(self):
        self.rows: list[str] = []

    def add(self, epoch: int, phase: str, loss: float, lr: float, accuracy=None):
        acc = "" if accuracy is None else f"{accuracy:.6f}"
        self.rows.append(f"{epoch},{phase},{loss:.8f},{lr:.8f},{acc}")

    def text(self) -> str:
        return "\n".join([self.HEADER, *self.rows]) + "\n"

    def write(self, path: str | Path):
        Path(path).write_text(self.text())


def _augment_views(images: np.ndarray, cfg: TrainConfig, gen: np.random.Generator,
                   copies: int) -> np.ndarray:
    """Each image -> `copies` independently augmented views, kept adjacent."""
    out = np.empty((len(images) * copies,) + images.shape[1:], dtype=np.float32)
    for i, img in enumerate(images):
        for v in range(copies):
            out[i * copies + v] = rand_augment(img, cfg.augment_ops,
                                               cfg.augment_magnitude, gen)
    return out


def pretrain(cfg: TrainConfig, train_ds: Dataset, out_dir: str | Path | None = None,
             model: Agglomerator | None = None, log: MetricsLog | None = None,
             progress=None) -> tuple[Agglomerator, MetricsLog]:
    """Contrastive pretraining; returns the model and per-epoch metrics.

    A checkpoint of the backbone + projection head is written to
    out_dir/pretrain.ckpt after every epoch, so a NaN abort always leaves
    the last good weights behind.
    """
    streams = RngStreams(cfg.seed)
    model = model or Agglomerator(cfg, streams)
    log = log or MetricsLog()
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    opt = SGD(model.named_parameters(BACKBONE_PREFIXES),
              momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    mean, std = train_ds.mean, train_ds.std
    steps_per_epoch = max(1, len(train_ds) // cfg.batch_size)
    global_step = 0
    lr = cfg.lr_min

    for epoch in range(1, cfg.epochs_pretrain + 1):
        losses = []
        for b, idx in enumerate(epoch_batches(len(train_ds), cfg.batch_size,
                                              streams.derive("shuffle", epoch))):
            views = _augment_views(train_ds.images[idx], cfg,
                                   streams.derive("augment", epoch, b), copies=2)
            views = normalize_images(views, mean, std)
            labels = np.repeat(train_ds.labels[idx], 2)
            feats = model.features(views.astype(model.dtype),
                                   init_gen=streams.derive("state", epoch, b),
                                   dropout_gen=streams.derive("dropout", epoch, b),
                                   train=True)
            loss = heads.supervised_contrastive_loss(feats, labels, cfg.temperature)
            value = loss.item()
            if not math.isfinite(value):
                raise DivergedError(
                    f"pretrain loss became non-finite at epoch {epoch} batch {b}; "
                    f"last good checkpoint is from epoch {epoch - 1}")
            lr = cyclic_lr(global_step, steps_per_epoch, cfg.lr_min, cfg.lr_max)
            loss.backward()
            opt.step(lr)
            global_step += 1
            losses.append(value)
        epoch_loss = float(np.mean(losses))
        log.add(epoch, "pretrain", epoch_loss, lr)
        if out_dir:
            model.save(out_dir / "pretrain.ckpt", BACKBONE_PREFIXES)
            log.write(out_dir / "metrics.csv")
        if progress:
            progress(f"pretrain epoch {epoch}/{cfg.epochs_pretrain} loss {epoch_loss:.4f}")
    return model, log


def train_classifier(model: Agglomerator, cfg: TrainConfig, train_ds: Dataset,
                     test_ds: Dataset | None = None, out_dir: str | Path | None = None,
                     log: MetricsLog | None = None, progress=None
                     ) -> tuple[Agglomerator, MetricsLog, float | None]:
    """Freeze the pretrained weights, train only the classification head.

    Frozen parameters never receive gradients (they are dropped from the
    graph), so their bytes are untouched by construction. Returns the model,
    metrics and the final test accuracy (None without a test split).
    """
    streams = RngStreams(cfg.seed)
    log = log or MetricsLog()
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    phase = _CLASSIFIER_PHASE_KEY
    model.set_trainable(BACKBONE_PREFIXES, False)
    model.set_trainable(("h2.",), True)
    opt = SGD(model.named_parameters(("h2.",)),
              momentum=cfg.momentum, weight_decay=cfg.weight_decay)
    mean, std = train_ds.mean, train_ds.std
    steps_per_epoch = max(1, len(train_ds) // cfg.batch_size)
    global_step = 0
    accuracy = None
    lr = cfg.lr_min

    for epoch in range(1, cfg.epochs_train + 1):
        losses = []
        for b, idx in enumerate(epoch_batches(len(train_ds), cfg.batch_size,
                                              streams.derive("shuffle", phase + epoch))):
            views = _augment_views(train_ds.images[idx], cfg,
                                   streams.derive("augment", phase + epoch, b), copies=1)
            views = normalize_images(views, mean, std)
            feats = model.features(views.astype(model.dtype),
                                   init_gen=streams.derive("state", phase + epoch, b),
                                   dropout_gen=streams.derive("dropout", phase + epoch, b),
                                   train=True)
            logits = model.logits(feats)
            loss = heads.cross_entropy(logits, train_ds.labels[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise DivergedError(
                    f"classifier loss became non-finite at epoch {epoch} batch {b}")
            lr = cyclic_lr(global_step, steps_per_epoch, cfg.lr_min, cfg.lr_max)
            loss.backward()
            opt.step(lr)
            global_step += 1
            losses.append(value)
        if test_ds is not None:
            accuracy, _ = evaluate(model, test_ds)
        log.add(epoch, "train", float(np.mean(losses)), lr, accuracy)
        if out_dir:
            model.save(out_dir / "model.ckpt")
            log.write(out_dir / "metrics.csv")
        if progress:
            progress(f"classifier epoch {epoch}/{cfg.epochs_train} "
                     f"loss {np.mean(losses):.4f} acc {accuracy}")
    return model, log, accuracy


def evaluate(model: Agglomerator, ds: Dataset, batch_size: int | None = None
             ) -> tuple[float, np.ndarray]:
    """Top-1 accuracy and per-class accuracy; no augmentation, no dropout.

    Pure read-only pass: consumes no training RNG streams and touches no
    weights, so interleaving evaluations never perturbs a run.
    """
    cfg = model.cfg
    batch_size = batch_size or cfg.batch_size
    num_classes = cfg.num_classes()
    hits = np.zeros(num_classes, dtype=np.int64)
    totals = np.zeros(num_classes, dtype=np.int64)
    mean, std = ds.mean, ds.std
    eval_streams = RngStreams(cfg.seed)
    with T.no_grad():
        for start in range(0, len(ds), batch_size):
            sl = slice(start, start + batch_size)
            images = ds.images[sl] if ds.normalized else normalize_images(ds.images[sl], mean, std)
            feats = model.features(images.astype(model.dtype),
                                   init_gen=eval_streams.derive("state", 0, start),
                                   train=False)
            logits = model.logits(feats).value
            pred = logits.argmax(axis=1)
            for cls in range(num_classes):
                m = ds.labels[sl] == cls
                totals[cls] += int(m.sum())
                hits[cls] += int((pred[m] == cls).sum())
    per_class = np.divide(hits, totals, out=np.zeros(num_classes), where=totals > 0)
    return float(hits.sum() / max(1, totals.sum())), per_class
