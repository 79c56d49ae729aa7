"""Random augmentation: n transforms sampled per image at a shared magnitude.

The pool covers geometric warps (translate, rotate, shear), photometric
edits (contrast, brightness, a 3x3-blend sharpness proxy), cutout and
identity. Magnitude runs 0..30; at 0 every op degenerates to the exact
identity (ops short-circuit rather than rely on float round trips). The
pool contains no channel-coupled color ops, so nothing needs skipping on
single-channel inputs.

Applied to raw [0,1] images, before normalization.
"""

from __future__ import annotations

import numpy as np
from scipy import ndimage

MAX_MAGNITUDE = 30.0


def _translate(image, frac, axis):
    shift = int(round(abs(frac) * image.shape[axis] * 0.3)) * (1 if frac >= 0 else -1)
    if shift == 0:
        return image
    out = np.zeros_like(image)
    src = [slice(None)] * image.ndim
    dst = [slice(None)] * image.ndim
    if shift > 0:
        dst[axis], src[axis] = slice(shift, None), slice(None, -shift)
    else:
        dst[axis], src[axis] = slice(None, shift), slice(-shift, None)
    out[tuple(dst)] = image[tuple(src)]
    return out


def _rotate(image, frac):
    angle = frac * 30.0
    if angle == 0.0:
        return image
    return np.clip(ndimage.rotate(image, angle, axes=(1, 0), reshape=False,
                                  order=1, mode="constant", cval=0.0), 0.0, 1.0)


def _shear(image, frac, axis):
    k = frac * 0.3
    if k == 0.0:
        return image
    mat = np.eye(3)
    center = (np.asarray(image.shape[:2]) - 1) / 2.0
    mat[axis, 1 - axis] = k
    offset = np.zeros(3)
    offset[:2] = center - mat[:2, :2] @ center
    return np.clip(ndimage.affine_transform(image, mat, offset=offset, order=1,
                                            mode="constant", cval=0.0), 0.0, 1.0)


def _contrast(image, frac):
    factor = 1.0 + frac * 0.9
    if factor == 1.0:
        return image
    mean = image.mean()
    return np.clip(mean + (image - mean) * factor, 0.0, 1.0)


def _brightness(image, frac):
    factor = 1.0 + frac * 0.9
    if factor == 1.0:
        return image
    return np.clip(image * factor, 0.0, 1.0)


_BLUR3 = np.full((3, 3, 1), 1.0 / 9.0)


def _sharpness(image, frac):
    # blend toward (alpha > 0) or away from (alpha < 0) the 3x3 local mean
    alpha = frac * 0.9
    if alpha == 0.0:
        return image
    blurred = ndimage.convolve(image, _BLUR3, mode="nearest")
    return np.clip(image + alpha * (image - blurred), 0.0, 1.0)


def _cutout(image, frac, gen):
    side = int(round(abs(frac) * 0.4 * min(image.shape[:2])))
    if side == 0:
        return image
    h, w = image.shape[:2]
    cy = int(gen.integers(0, h))
    cx = int(gen.integers(0, w))
    out = image.copy()
    out[max(0, cy - side // 2):cy + (side + 1) // 2,
        max(0, cx - side // 2):cx + (side + 1) // 2] = 0.0
    return out


def _identity(image, frac):
    return image


# name -> (callable, signed magnitude?)  signed ops draw a random direction
_POOL = [
    ("translate_x", lambda img, f, g: _translate(img, f, axis=1), True),
    ("translate_y", lambda img, f, g: _translate(img, f, axis=0), True),
    ("rotate", lambda img, f, g: _rotate(img, f), True),
    ("shear_x", lambda img, f, g: _shear(img, f, axis=1), True),
    ("shear_y", lambda img, f, g: _shear(img, f, axis=0), True),
    ("contrast", lambda img, f, g: _contrast(img, f), True),
    ("brightness", lambda img, f, g: _brightness(img, f), True),
    ("sharpness", lambda img, f, g: _sharpness(img, f), True),
    ("cutout", lambda img, f, g: _cutout(img, f, g), False),
    ("identity", lambda img, f, g: _identity(img, f), False),
]


def rand_augment(image: np.ndarray, n_ops: int, magnitude: float,
                 gen: np.random.Generator, trace: list | None = None) -> np.ndarray:
    """Apply n_ops transforms drawn uniformly from the pool.

    `image` is (H, W, C) float in [0, 1]. `trace`, when given, collects the
    applied op names (instrumentation for tests and debugging).
    """
    if not 0.0 <= magnitude <= MAX_MAGNITUDE:
        raise ValueError(f"magnitude must lie in [0, {MAX_MAGNITUDE}], got {magnitude}")
    frac = magnitude / MAX_MAGNITUDE
    out = image
    for _ in range(n_ops):
        pick = int(gen.integers(0, len(_POOL)))
        name, fn, signed = _POOL[pick]
        f = frac * (1.0 if not signed or gen.random() < 0.5 else -1.0)
        out = fn(out, f, gen)
        if trace is not None:
            trace.append(name)
    return out
