"""Interpretability artifacts: agreement statistics over the lattice,
2D level-vector fields, latent projections and the cluster-overlap score.

Exports use a self-describing binary container plus a CSV sidecar:

  binary dump          magic b"AGGLDUMP", uint32 version (1), uint32 header
                       length, then a UTF-8 JSON header:
                         {"arrays": [{"name", "shape", "dtype"}...],
                          "meta": {...}}
                       followed by each array's raw bytes in header order
                       (little-endian, C order).
  CSV sidecar          "label,f0,...,f{n-1}" then one row per sample with
                       its class label and feature vector.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DUMP_MAGIC = b"AGGLDUMP"
DUMP_VERSION = 1

# CIFAR-10 super-classes for the latent overlap readout
CIFAR10_VEHICLES = (0, 1, 8, 9)          # airplane, automobile, ship, truck
CIFAR10_SUPERCLASS_NAMES = ("vehicles", "animals")


def cifar10_superclass(labels: np.ndarray) -> np.ndarray:
    """0 for vehicles, 1 for animals."""
    return (~np.isin(labels, CIFAR10_VEHICLES)).astype(np.int64)


# ---------------------------------------------------------------------------
# level-vector reduction and agreement


@dataclass
class LevelReducer:
    """Frozen affine map d -> 2 shared by every level of every export."""

    mean: np.ndarray        # (d,)
    proj: np.ndarray        # (d, 2)

    def __call__(self, vectors: np.ndarray) -> np.ndarray:
        return (vectors - self.mean) @ self.proj


def fit_level_reducer(levels: np.ndarray) -> LevelReducer:
    """Fit the 2D reducer by PCA over all level vectors of layers k >= 1.

    `levels` is (B, h, w, K+1, d) from a held-out batch. Deterministic and
    parameter-free; fit once per checkpoint, then frozen.
    """
    d = levels.shape[-1]
    flat = levels[:, :, :, 1:, :].reshape(-1, d).astype(np.float64)
    mean = flat.mean(axis=0)
    centered = flat - mean
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    proj = _fix_signs(vt[:2]).T
    return LevelReducer(mean=mean, proj=proj)


def reduce_levels_2d(levels: np.ndarray, reducer: LevelReducer) -> np.ndarray:
    """(B, h, w, K+1, d) -> (B, h, w, K, 2): every layer k >= 1 through the
    same frozen map."""
    return reducer(levels[:, :, :, 1:, :])


def _cosine_edges(field: np.ndarray, eps: float = 1e-12):
    """Cosine similarity along 4-connected edges of an (..., h, w, d) field."""
    norm = np.linalg.norm(field, axis=-1, keepdims=True)
    unit = field / np.maximum(norm, eps)
    horiz = (unit[..., :, :-1, :] * unit[..., :, 1:, :]).sum(axis=-1)
    vert = (unit[..., :-1, :, :] * unit[..., 1:, :, :]).sum(axis=-1)
    return horiz, vert


def neighbor_agreement(levels: np.ndarray, k: int, per_sample: bool = False):
    """Mean cosine similarity between each level vector and its 4-neighbors
    at layer k. 1.0 for a uniform field, -1.0 for a +-v checkerboard,
    ~0 for i.i.d. random vectors."""
    field = levels[:, :, :, k, :]
    horiz, vert = _cosine_edges(field)
    if per_sample:
        b = field.shape[0]
        return np.concatenate([horiz.reshape(b, -1), vert.reshape(b, -1)], axis=1).mean(axis=1)
    return float(np.concatenate([horiz.ravel(), vert.ravel()]).mean())


def segment_islands(levels: np.ndarray, k: int, tau: float = 0.9
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Connected components over edges whose cosine similarity is >= tau.

    Returns (labels (B, h, w) int32, counts (B,)). Component ids are
    arbitrary but contiguous from 0 per sample.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    field = levels[:, :, :, k, :]
    b, h, w, _ = field.shape
    horiz, vert = _cosine_edges(field)
    labels = np.full((b, h, w), -1, dtype=np.int32)
    counts = np.zeros(b, dtype=np.int64)
    for s in range(b):
        nxt = 0
        for i in range(h):
            for j in range(w):
                if labels[s, i, j] >= 0:
                    continue
                stack = [(i, j)]
                labels[s, i, j] = nxt
                while stack:
                    y, x = stack.pop()
                    if x + 1 < w and labels[s, y, x + 1] < 0 and horiz[s, y, x] >= tau:
                        labels[s, y, x + 1] = nxt
                        stack.append((y, x + 1))
                    if x > 0 and labels[s, y, x - 1] < 0 and horiz[s, y, x - 1] >= tau:
                        labels[s, y, x - 1] = nxt
                        stack.append((y, x - 1))
                    if y + 1 < h and labels[s, y + 1, x] < 0 and vert[s, y, x] >= tau:
                        labels[s, y + 1, x] = nxt
                        stack.append((y + 1, x))
                    if y > 0 and labels[s, y - 1, x] < 0 and vert[s, y - 1, x] >= tau:
                        labels[s, y - 1, x] = nxt
                        stack.append((y - 1, x))
                nxt += 1
        counts[s] = nxt
    return labels, counts


# ---------------------------------------------------------------------------
# latent projections


def _fix_signs(components: np.ndarray) -> np.ndarray:
    """Sign convention: the largest-magnitude loading of each component is
    positive (first index on ties)."""
    out = components.copy()
    for i, c in enumerate(out):
        j = int(np.argmax(np.abs(c)))
        if c[j] < 0:
            out[i] = -c
    return out


def pca_2d(features: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean-centered projection onto the top-2 principal directions.

    Returns (coords (S, 2), explained variance (2,)). Input must have at
    least 3 samples and nonzero variance.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 3:
        raise ValueError(f"pca_2d needs at least 3 samples, got shape {features.shape}")
    centered = features - features.mean(axis=0)
    if not np.any(centered):
        raise ValueError("pca_2d: input has zero variance (rank 0)")
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    comps = _fix_signs(vt[:2])
    coords = centered @ comps.T
    explained = (s[:2] ** 2) / (features.shape[0] - 1)
    return coords, explained


def overlap_metric(coords: np.ndarray, superclass: np.ndarray, grid: int = 100) -> float:
    """Occupancy-overlap percentage of two point clouds in the plane.

    The joint bounding box is split into grid x grid cells; the score is
    100 * |cells touched by both classes| / |cells touched by either|.
    0 for disjoint clusters, 100 for identical point sets.
    """
    coords = np.asarray(coords, dtype=np.float64)
    superclass = np.asarray(superclass)
    groups = np.unique(superclass)
    if len(groups) != 2:
        raise ValueError(f"overlap_metric expects exactly 2 super-classes, got {groups}")
    if grid < 1:
        raise ValueError(f"grid must be >= 1, got {grid}")
    lo = coords.min(axis=0)
    span = coords.max(axis=0) - lo
    span[span == 0] = 1.0
    cells = np.minimum((coords - lo) / span * grid, grid - 1).astype(np.int64)
    flat = cells[:, 0] * grid + cells[:, 1]
    occ_a = set(flat[superclass == groups[0]].tolist())
    occ_b = set(flat[superclass == groups[1]].tolist())
    if not occ_a or not occ_b:
        raise ValueError("overlap_metric: one super-class has no samples")
    union = occ_a | occ_b
    return 100.0 * len(occ_a & occ_b) / len(union)


# ---------------------------------------------------------------------------
# dump container


def save_dump(path: str | Path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    path = Path(path)
    entries = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dt = "<i4" if np.issubdtype(arr.dtype, np.integer) else "<f4"
        raw = np.ascontiguousarray(arr.astype(dt)).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dt})
        blobs.append(raw)
    header = json.dumps({"arrays": entries, "meta": meta}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(DUMP_MAGIC)
        fh.write(struct.pack("<II", DUMP_VERSION, len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_dump(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != DUMP_MAGIC:
        raise ValueError(f"{path}: not a dump file (magic {raw[:8]!r})")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != DUMP_VERSION:
        raise ValueError(f"{path}: unsupported dump version {version}")
    header = json.loads(raw[16:16 + hlen].decode())
    offset = 16 + hlen
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 4
        if offset + nbytes > len(raw):
            raise ValueError(f"{path}: array {entry['name']} extends past end of file")
        arrays[entry["name"]] = np.frombuffer(
            raw, dtype=entry["dtype"], count=count, offset=offset).reshape(shape).copy()
        offset += nbytes
    return arrays, header["meta"]


def write_feature_csv(path: str | Path, features: np.ndarray, labels: np.ndarray) -> None:
    features = np.asarray(features)
    lines = ["label," + ",".join(f"f{i}" for i in range(features.shape[1]))]
    for lbl, row in zip(labels, features):
        lines.append(str(int(lbl)) + "," + ",".join(f"{v:.7g}" for v in row))
    Path(path).write_text("\n".join(lines) + "\n")
