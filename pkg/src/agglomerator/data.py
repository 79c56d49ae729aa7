"""Dataset ingestion: IDX and CIFAR binary formats, normalization, subsets.

IDX container (MNIST family), byte layout:
    bytes 0-3   big-endian magic: 2051 for images, 2049 for labels
    then        one big-endian uint32 per dimension (3 for images, 1 for labels)
    then        the payload as unsigned bytes, C order
Any length mismatch is a parse error, never a partial load.

CIFAR-10 binary: files data_batch_{1..5}.bin and test_batch.bin, each a run
of 3073-byte records: 1 label byte, then 3072 pixel bytes as three 1024-byte
planes in R, G, B order, each plane row-major 32x32. CIFAR-100 uses
3074-byte records (coarse label, fine label, pixels); we keep the fine label.

A deterministic synthetic 10-class digits set (rendered stroke glyphs with
affine jitter) can be materialized as genuine IDX files for environments
without the real downloads; it flows through the same loader path.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .config import ConfigError, TrainConfig

IDX_IMAGES_MAGIC = 2051
IDX_LABELS_MAGIC = 2049

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class DataError(RuntimeError):
    pass


@dataclass
class Dataset:
    images: np.ndarray          # (N, H, W, C) float32; [0,1] raw, or normalized
    labels: np.ndarray          # (N,) int64
    split: str
    mean: tuple
    std: tuple
    normalized: bool = False

    def __len__(self):
        return len(self.images)


# ---------------------------------------------------------------------------
# container parsing


def load_idx(path: str | Path) -> np.ndarray:
    """Parse one IDX file to a uint8 array (images: (N,R,C), labels: (N,))."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 4:
        raise DataError(f"{path}: truncated header at offset {len(raw)}")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic == IDX_IMAGES_MAGIC:
        ndim = 3
    elif magic == IDX_LABELS_MAGIC:
        ndim = 1
    else:
        raise DataError(f"{path}: bad magic {magic} at offset 0 "
                        f"(expected {IDX_IMAGES_MAGIC} or {IDX_LABELS_MAGIC})")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"{path}: truncated dimension header at offset {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = header + int(np.prod(dims))
    if len(raw) != expected:
        raise DataError(f"{path}: payload length {len(raw) - header} does not match "
                        f"dims {dims} (expected {expected - header}; file ends at {len(raw)})")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def write_idx(path: str | Path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = IDX_IMAGES_MAGIC if array.ndim == 3 else IDX_LABELS_MAGIC
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def _idx_pair_to_dataset(img_path: Path, lbl_path: Path, split: str,
                         mean: tuple, std: tuple) -> Dataset:
    images = load_idx(img_path)
    labels = load_idx(lbl_path)
    if images.ndim != 3:
        raise DataError(f"{img_path}: expected an image file, got dims {images.shape}")
    if labels.ndim != 1 or len(labels) != len(images):
        raise DataError(f"{lbl_path}: {len(labels)} labels for {len(images)} images")
    return Dataset(images=(images.astype(np.float32) / 255.0)[..., None],
                   labels=labels.astype(np.int64), split=split, mean=mean, std=std)


def load_mnist_style(root: str | Path, split: str, mean: tuple, std: tuple) -> Dataset:
    root = Path(root)
    img_name, lbl_name = MNIST_FILES[split]
    return _idx_pair_to_dataset(root / img_name, root / lbl_name, split, mean, std)


def _read_cifar_records(path: Path, record: int, label_offset: int) -> tuple[np.ndarray, np.ndarray]:
    raw = np.frombuffer(path.read_bytes(), dtype=np.uint8)
    if len(raw) % record:
        raise DataError(f"{path}: size {len(raw)} is not a multiple of the "
                        f"{record}-byte record")
    rows = raw.reshape(-1, record)
    labels = rows[:, label_offset].astype(np.int64)
    pixels = rows[:, record - 3072:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    return pixels, labels


def load_cifar10(root: str | Path, mean: tuple, std: tuple) -> tuple[Dataset, Dataset]:
    root = Path(root)
    train_parts = [_read_cifar_records(root / f"data_batch_{i}.bin", 3073, 0)
                   for i in range(1, 6)]
    test_px, test_lb = _read_cifar_records(root / "test_batch.bin", 3073, 0)
    px = np.concatenate([p for p, _ in train_parts])
    lb = np.concatenate([l for _, l in train_parts])
    mk = lambda p, l, split: Dataset(images=p.astype(np.float32) / 255.0, labels=l,
                                     split=split, mean=mean, std=std)
    return mk(px, lb, "train"), mk(test_px, test_lb, "test")


def load_cifar100(root: str | Path, mean: tuple, std: tuple) -> tuple[Dataset, Dataset]:
    root = Path(root)
    tr_px, tr_lb = _read_cifar_records(root / "train.bin", 3074, 1)
    te_px, te_lb = _read_cifar_records(root / "test.bin", 3074, 1)
    mk = lambda p, l, split: Dataset(images=p.astype(np.float32) / 255.0, labels=l,
                                     split=split, mean=mean, std=std)
    return mk(tr_px, tr_lb, "train"), mk(te_px, te_lb, "test")


# ---------------------------------------------------------------------------
# normalization and subsetting


def normalize(ds: Dataset) -> Dataset:
    if ds.normalized:
        return ds
    mean = np.asarray(ds.mean, dtype=np.float32)
    std = np.asarray(ds.std, dtype=np.float32)
    if np.any(std == 0):
        raise ConfigError(f"normalization std contains zero: {ds.std}")
    return replace(ds, images=(ds.images - mean) / std, normalized=True)


def denormalize(ds: Dataset) -> Dataset:
    if not ds.normalized:
        return ds
    mean = np.asarray(ds.mean, dtype=np.float32)
    std = np.asarray(ds.std, dtype=np.float32)
    return replace(ds, images=ds.images * std + mean, normalized=False)


def normalize_images(images: np.ndarray, mean: tuple, std: tuple) -> np.ndarray:
    return ((images - np.asarray(mean, dtype=np.float32))
            / np.asarray(std, dtype=np.float32))


def stratified_subset(labels: np.ndarray, fraction: float, gen: np.random.Generator,
                      total: int | None = None) -> np.ndarray:
    """Pick ceil(fraction*N) indices, each class within 1 of its share.

    Largest-remainder apportionment of the per-class quotas, then a uniform
    draw without replacement inside each class.
    """
    n = len(labels)
    if total is None:
        total = min(n, max(1, int(np.ceil(fraction * n - 1e-9))))
    classes, counts = np.unique(labels, return_counts=True)
    exact = counts * (total / n)
    base = np.floor(exact).astype(int)
    remainder = total - base.sum()
    order = np.argsort(-(exact - base), kind="stable")
    base[order[:remainder]] += 1
    picks = []
    for cls, quota in zip(classes, base):
        idx = np.flatnonzero(labels == cls)
        picks.append(gen.permutation(idx)[:quota])
    return np.sort(np.concatenate(picks))


def subset(ds: Dataset, indices: np.ndarray) -> Dataset:
    return replace(ds, images=ds.images[indices], labels=ds.labels[indices])


# ---------------------------------------------------------------------------
# synthetic digits (IDX-backed stand-in when the real sets are unavailable)

# stroke programs per digit: lists of polylines in a unit box, y down
def _arc(cx, cy, r, a0, a1, n=20, ry=None):
    t = np.linspace(np.radians(a0), np.radians(a1), n)
    return np.stack([cx + r * np.cos(t), cy + (ry or r) * np.sin(t)], axis=1)


def _glyph_strokes() -> dict[int, list[np.ndarray]]:
    L = lambda *pts: np.asarray(pts, dtype=np.float64)
    return {
        0: [_arc(0.5, 0.5, 0.30, 0, 360, 32, ry=0.42)],
        1: [L((0.33, 0.26), (0.52, 0.08), (0.52, 0.92))],
        2: [np.concatenate([_arc(0.5, 0.32, 0.26, 150, -10, 16),
                            L((0.72, 0.44), (0.24, 0.90)), L((0.24, 0.90), (0.80, 0.90))])],
        3: [_arc(0.48, 0.30, 0.22, 140, -80, 16), _arc(0.48, 0.70, 0.26, -100, 130, 18)],
        4: [L((0.58, 0.08), (0.20, 0.62), (0.84, 0.62)), L((0.64, 0.34), (0.64, 0.92))],
        5: [L((0.76, 0.10), (0.30, 0.10), (0.28, 0.44)),
            _arc(0.47, 0.65, 0.25, -100, 150, 20)],
        6: [np.concatenate([_arc(0.62, 0.30, 0.40, 230, 180, 10),
                            _arc(0.47, 0.68, 0.24, 180, -180, 24)])],
        7: [L((0.20, 0.10), (0.80, 0.10), (0.42, 0.92))],
        8: [_arc(0.5, 0.30, 0.20, 90, 450, 24), _arc(0.5, 0.705, 0.245, -90, 270, 24)],
        9: [_arc(0.53, 0.34, 0.23, 0, 360, 24), L((0.76, 0.38), (0.60, 0.92))],
    }


_STROKES = _glyph_strokes()


def _render_digit(digit: int, gen: np.random.Generator, size: int = 28) -> np.ndarray:
    theta = gen.uniform(-0.21, 0.21)
    shear = gen.uniform(-0.14, 0.14)
    sx, sy = gen.uniform(0.85, 1.12, size=2)
    tx, ty = gen.uniform(-0.07, 0.07, size=2)
    thick = gen.uniform(0.042, 0.062)  # half-width in unit coords
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    aff = rot @ np.array([[sx, shear * sx], [0.0, sy]])

    segs = []
    for stroke in _STROKES[digit]:
        pts = (stroke - 0.5) @ aff.T + 0.5 + np.array([tx, ty])
        segs.append(np.stack([pts[:-1], pts[1:]], axis=1))
    segs = np.concatenate(segs)  # (S, 2, 2)

    # distance from every pixel center to every segment
    span = size - 8  # active box, MNIST-like margins
    coords = (np.stack(np.meshgrid(np.arange(size), np.arange(size), indexing="xy"), -1)
              .reshape(-1, 2) - 4.0) / span
    a, b = segs[:, 0], segs[:, 1]
    ab = b - a
    denom = np.maximum((ab * ab).sum(-1), 1e-12)
    ap = coords[:, None, :] - a[None, :, :]
    t = np.clip((ap * ab[None]).sum(-1) / denom, 0.0, 1.0)
    near = a[None] + t[..., None] * ab[None]
    dist = np.sqrt(((coords[:, None, :] - near) ** 2).sum(-1)).min(axis=1)

    img = np.clip((thick - dist) / 0.03 + 1.0, 0.0, 1.0).reshape(size, size)
    img *= gen.uniform(0.82, 1.0)
    img += gen.normal(0.0, 0.025, img.shape)
    return (np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)


def generate_synthetic_digits(root: str | Path, n_train: int = 12000,
                              n_test: int = 2000, seed: int = 20260810) -> Path:
    """Materialize the synthetic set as IDX files under root; idempotent."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    marker = root / f"synthetic-{n_train}-{n_test}-{seed}.ok"
    if marker.exists():
        return root
    gen = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed])))
    for split, count in (("train", n_train), ("test", n_test)):
        labels = np.arange(count) % 10  # balanced classes
        labels = gen.permutation(labels)
        images = np.stack([_render_digit(int(d), gen) for d in labels])
        img_name, lbl_name = MNIST_FILES[split]
        write_idx(root / img_name, images)
        write_idx(root / lbl_name, labels.astype(np.uint8))
    marker.write_text("ok\n")
    return root


# ---------------------------------------------------------------------------
# top-level dispatcher


def resolve_data_root(cfg: TrainConfig) -> Path:
    import os
    if cfg.data_dir:
        return Path(cfg.data_dir)
    return Path(os.environ.get("AGGLOMERATOR_DATA", "data"))


def load_dataset(cfg: TrainConfig, gen: np.random.Generator | None = None) -> tuple[Dataset, Dataset]:
    """Load (train, test) for cfg.dataset, stats resolved, subset applied."""
    root = resolve_data_root(cfg) / cfg.dataset
    stats = cfg.norm_stats()
    if cfg.dataset in ("mnist", "fashion_mnist"):
        mean, std = stats
        train = load_mnist_style(root, "train", mean, std)
        test = load_mnist_style(root, "test", mean, std)
    elif cfg.dataset == "cifar10":
        train, test = load_cifar10(root, *stats)
    elif cfg.dataset == "cifar100":
        train, test = load_cifar100(root, *stats)
    elif cfg.dataset == "synthetic":
        generate_synthetic_digits(root)
        train = load_mnist_style(root, "train", (), ())
        test = load_mnist_style(root, "test", (), ())
        if stats is None:
            m = float(train.images.mean())
            s = float(train.images.std())
            stats = ((m,), (s,))
        train = replace(train, mean=stats[0], std=stats[1])
        test = replace(test, mean=stats[0], std=stats[1])
    else:
        raise ConfigError(f"no loader for dataset {cfg.dataset!r}")
    if cfg.subset_fraction < 1.0:
        if gen is None:
            from .rng import RngStreams
            gen = RngStreams(cfg.seed).derive("shuffle", 2**31)  # disjoint from epoch keys
        train = subset(train, stratified_subset(train.labels, cfg.subset_fraction, gen))
    return train, test
