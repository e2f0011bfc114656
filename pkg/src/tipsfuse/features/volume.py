"""ROI preparation for binary label volumes: dilation, cropping, padding."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass
class LabelVolume:
    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        v = np.asarray(self.voxels)
        if v.ndim != 3 or min(v.shape) < 1:
            raise ValueError(f"label volumes are 3-D with positive dims, got shape {v.shape}")
        if not np.isin(v, (0, 1)).all():
            raise ValueError("label volumes are binary (0/1)")
        self.voxels = v.astype(np.uint8)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.voxels.shape

    def count(self) -> int:
        return int(self.voxels.sum())


def dilate_labels(vol: LabelVolume, m: int = 2) -> LabelVolume:
    """Cubic dilation with an m x m x m kernel anchored at offsets {0..m-1}^3.

    Each foreground voxel at p switches on p + o for every offset o in the
    kernel (clipped at the volume edge).
    """
    if m < 1:
        raise ValueError(f"kernel edge must be >= 1, got {m}")
    src = vol.voxels.astype(bool)
    out = src.copy()
    nx, ny, nz = src.shape
    for dx in range(m):
        for dy in range(m):
            for dz in range(m):
                if dx == dy == dz == 0:
                    continue
                out[dx:, dy:, dz:] |= src[:nx - dx, :ny - dy, :nz - dz]
    return LabelVolume(out.astype(np.uint8), vol.spacing)


_FULL_26 = np.ones((3, 3, 3), dtype=bool)


def largest_component(vol: LabelVolume) -> np.ndarray:
    """Boolean mask of the largest 26-connected foreground component."""
    labels, n = ndimage.label(vol.voxels, structure=_FULL_26)
    if n == 0:
        raise ValueError("label volume is empty")
    sizes = np.bincount(labels.ravel())[1:]
    return labels == (int(np.argmax(sizes)) + 1)


def expanded_box(lo: np.ndarray, hi: np.ndarray, dims, d_pct: float):
    """Grow a [lo, hi) box by d% of its extent per axis, half per side rounded up."""
    lo2, hi2 = [], []
    for a in range(3):
        extent = hi[a] - lo[a]
        side = math.ceil(extent * d_pct / 100.0 / 2.0 - 1e-12)
        lo2.append(max(0, lo[a] - side))
        hi2.append(min(dims[a], hi[a] + side))
    return tuple(lo2), tuple(hi2)


def crop_roi(label: LabelVolume, image: np.ndarray, d_pct: float = 20.0, m: int = 2):
    """Crop label and image to the expanded box of the dilated label's largest component.

    Returns ``(label_crop, image_crop, (lo, hi))``.
    """
    image = np.asarray(image)
    if image.shape != label.dims:
        raise ValueError(f"image shape {image.shape} != label dims {label.dims}")
    if label.count() == 0:
        raise ValueError("cannot crop: label volume is empty")
    comp = largest_component(dilate_labels(label, m))
    idx = np.argwhere(comp)
    lo, hi = expanded_box(idx.min(axis=0), idx.max(axis=0) + 1, label.dims, d_pct)
    sl = tuple(slice(lo[a], hi[a]) for a in range(3))
    return LabelVolume(label.voxels[sl], label.spacing), image[sl], (lo, hi)


def pad_or_crop(v: np.ndarray, n: int = 128) -> np.ndarray:
    """Center ``v`` in an n^3 cube: zero-pad short axes, center-crop long ones.

    Offsets are floor((n - s) / 2) for padding and floor((s - n) / 2) for cropping.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    v = np.asarray(v)
    out = np.zeros((n, n, n), dtype=v.dtype)
    src, dst = [], []
    for s in v.shape:
        if s >= n:
            off = (s - n) // 2
            src.append(slice(off, off + n))
            dst.append(slice(0, n))
        else:
            off = (n - s) // 2
            src.append(slice(0, s))
            dst.append(slice(off, off + s))
    out[tuple(dst)] = v[tuple(src)]
    return out
