"""Core 3D image types and spatial operations.

Volumes are indexed ``data[x, y, z]``. Spacing is millimetres per voxel.
All operations are pure: inputs are never mutated.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateInputError, NumericError, ParameterError

GOLDEN_RATIO_CONJUGATE = 0.6180339887498949


@dataclass
class Volume:
    """Scalar 3D image (float32) with voxel spacing and an optional voxel-to-world affine."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    affine: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ParameterError(f"volume data must be 3-D, got shape {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ParameterError(f"spacing must be 3 positive values, got {self.spacing}")
        if self.affine is not None:
            self.affine = np.asarray(self.affine, dtype=np.float64)
            if self.affine.shape != (4, 4):
                raise ParameterError("affine must be 4x4")
        if not np.isfinite(self.data).all():
            raise NumericError("volume contains non-finite values")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass
class LabelMap:
    """Integer label image. Label 0 is background; all labels are < num_classes."""

    data: np.ndarray
    num_classes: int
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.uint16)
        if self.data.ndim != 3:
            raise ParameterError(f"label data must be 3-D, got shape {self.data.shape}")
        self.num_classes = int(self.num_classes)
        if self.num_classes < 2:
            raise ParameterError("num_classes must be >= 2")
        if self.data.size and int(self.data.max()) >= self.num_classes:
            raise ParameterError(
                f"label {int(self.data.max())} out of range for num_classes={self.num_classes}"
            )
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ParameterError(f"spacing must be 3 positive values, got {self.spacing}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass
class ProbVolume:
    """Per-voxel class probabilities, shape (C, Dx, Dy, Dz); each voxel sums to 1."""

    data: np.ndarray
    num_classes: int = field(default=0)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 4:
            raise ParameterError(f"probability data must be 4-D, got shape {self.data.shape}")
        if self.num_classes == 0:
            self.num_classes = self.data.shape[0]
        if self.num_classes != self.data.shape[0]:
            raise ParameterError("num_classes does not match leading axis")
        if self.data.size:
            if self.data.min() < 0.0 or self.data.max() > 1.0 + 1e-6:
                raise ParameterError("probabilities must lie in [0, 1]")
            sums = self.data.sum(axis=0, dtype=np.float64)
            if np.abs(sums - 1.0).max() > 1e-5:
                raise ParameterError("per-voxel probabilities must sum to 1 (tolerance 1e-5)")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape[1:]


def _expand_factor(factor) -> tuple[int, int, int]:
    if np.isscalar(factor):
        factor = (factor, factor, factor)
    factor = tuple(int(f) for f in factor)
    if len(factor) != 3 or any(f < 1 for f in factor):
        raise ParameterError(f"factor must be positive per axis, got {factor}")
    return factor


def resample_affine(v, affine, out_dims, out_spacing, interp: str = "trilinear"):
    """Resample through a 4x4 voxel-to-voxel affine.

    ``affine`` maps input voxel coordinates to output voxel coordinates; each
    output voxel is sampled at the inverse-mapped position in the input.
    Samples outside the input domain contribute 0 (background).
    """
    if interp not in ("trilinear", "nearest"):
        raise ParameterError(f"unknown interpolation {interp!r}")
    is_labels = isinstance(v, LabelMap)
    if is_labels and interp != "nearest":
        raise ParameterError("label maps must be resampled with nearest interpolation")
    affine = np.asarray(affine, dtype=np.float64)
    if affine.shape != (4, 4) or abs(np.linalg.det(affine)) < 1e-12:
        raise ParameterError("affine must be an invertible 4x4 matrix")
    inv = np.linalg.inv(affine)

    out_dims = tuple(int(d) for d in out_dims)
    dims = v.dims
    grid = np.indices(out_dims, dtype=np.float64).reshape(3, -1)
    q = inv[:3, :3] @ grid + inv[:3, 3:4]

    if interp == "nearest":
        idx = np.floor(q + 0.5).astype(np.int64)
        inside = np.all((idx >= 0) & (idx < np.array(dims)[:, None]), axis=0)
        out = np.zeros(int(np.prod(out_dims)), dtype=v.data.dtype)
        ins = idx[:, inside]
        out[inside] = v.data[ins[0], ins[1], ins[2]]
    else:
        base = np.floor(q).astype(np.int64)
        frac = q - base
        out = np.zeros(int(np.prod(out_dims)), dtype=np.float64)
        for corner in range(8):
            off = np.array([(corner >> 2) & 1, (corner >> 1) & 1, corner & 1])
            idx = base + off[:, None]
            wgt = np.prod(np.where(off[:, None] == 1, frac, 1.0 - frac), axis=0)
            inside = np.all((idx >= 0) & (idx < np.array(dims)[:, None]), axis=0)
            ins = idx[:, inside]
            out[inside] += wgt[inside] * v.data[ins[0], ins[1], ins[2]]
    out = out.reshape(out_dims)
    if is_labels:
        return LabelMap(out, v.num_classes, spacing=out_spacing)
    return Volume(out.astype(np.float32), spacing=out_spacing)


def normalize_intensity(v: Volume, mask: LabelMap) -> Volume:
    """Zero-mean, unit-variance normalization over the mask; outside set to 0.

    Uses the population standard deviation.
    """
    if mask.dims != v.dims:
        raise ParameterError(f"mask dims {mask.dims} do not match volume dims {v.dims}")
    sel = mask.data != 0
    n = int(sel.sum())
    if n < 2:
        raise ParameterError("mask must select at least 2 voxels")
    vals = v.data[sel].astype(np.float64)
    mu = vals.mean()
    sigma = np.sqrt(np.mean((vals - mu) ** 2))
    if sigma < 1e-8:
        raise DegenerateInputError("intensity is constant inside the mask")
    out = np.zeros(v.dims, dtype=np.float32)
    out[sel] = ((vals - mu) / sigma).astype(np.float32)
    return Volume(out, spacing=v.spacing, affine=v.affine)


def _block_sums(a: np.ndarray, factor: tuple[int, int, int]) -> np.ndarray:
    out = a.astype(np.float64)
    for axis, f in enumerate(factor):
        idx = np.arange(0, a.shape[axis], f)
        out = np.add.reduceat(out, idx, axis=axis)
    return out


def _block_counts(dims, factor) -> np.ndarray:
    lens = []
    for d, f in zip(dims, factor):
        starts = np.arange(0, d, f)
        lens.append(np.diff(np.append(starts, d)).astype(np.float64))
    return lens[0][:, None, None] * lens[1][None, :, None] * lens[2][None, None, :]


def downsample(v, factor):
    """Block-reduce by an integer factor per axis.

    Volumes take the mean over each block (partial edge blocks average the
    voxels present); label maps take the per-block majority label with ties
    going to the smallest label. Spacing is multiplied by the factor.
    """
    factor = _expand_factor(factor)
    spacing = tuple(s * f for s, f in zip(v.spacing, factor))
    if isinstance(v, LabelMap):
        counts = [_block_sums(v.data == c, factor) for c in range(v.num_classes)]
        out = np.argmax(np.stack(counts), axis=0).astype(np.uint16)
        return LabelMap(out, v.num_classes, spacing=spacing)
    sums = _block_sums(v.data, factor)
    counts = _block_counts(v.dims, factor)
    return Volume((sums / counts).astype(np.float32), spacing=spacing)


def upsample_labels_nn(l: LabelMap, out_dims) -> LabelMap:
    """Nearest-neighbor upsampling: output voxel p reads label floor(p * dims / out_dims)."""
    out_dims = tuple(int(d) for d in out_dims)
    if any(o < d for o, d in zip(out_dims, l.dims)):
        raise ParameterError(f"out_dims {out_dims} must be >= dims {l.dims} per axis")
    ix, iy, iz = (np.arange(o) * d // o for o, d in zip(out_dims, l.dims))
    out = l.data[np.ix_(ix, iy, iz)]
    spacing = tuple(s * d / o for s, d, o in zip(l.spacing, l.dims, out_dims))
    return LabelMap(out, l.num_classes, spacing=spacing)


def label_palette(num_classes: int) -> np.ndarray:
    """Deterministic label colors: 0 is black, others follow a golden-ratio hue walk."""
    pal = np.zeros((num_classes, 3), dtype=np.uint8)
    for c in range(1, num_classes):
        hue = (c * GOLDEN_RATIO_CONJUGATE) % 1.0
        rgb = colorsys.hsv_to_rgb(hue, 1.0, 1.0)
        pal[c] = [int(round(255 * x)) for x in rgb]
    return pal


_AXES = {"x": 0, "y": 1, "z": 2}


def _slice_plane(data: np.ndarray, axis: str, index: int) -> np.ndarray:
    # Image rows run along the later of the two remaining axes.
    a = _AXES[axis]
    plane = np.take(data, index, axis=a)
    return plane.T


def export_slice(v, axis: str, index: int, path) -> None:
    """Write one slice as a binary PGM (volumes) or paletted PPM (label maps)."""
    if axis not in _AXES:
        raise ParameterError(f"axis must be one of x, y, z, got {axis!r}")
    index = int(index)
    if not 0 <= index < v.dims[_AXES[axis]]:
        raise ParameterError(f"slice index {index} out of range for axis {axis}")
    plane = _slice_plane(v.data, axis, index)
    h, w = plane.shape
    path = Path(path)
    if isinstance(v, LabelMap):
        img = label_palette(v.num_classes)[plane]
        header = b"P6\n%d %d\n255\n" % (w, h)
    else:
        lo, hi = float(plane.min()), float(plane.max())
        if hi == lo:
            img = np.full((h, w), 128, dtype=np.uint8)
        else:
            img = np.rint((plane - lo) / (hi - lo) * 255.0).astype(np.uint8)
        header = b"P5\n%d %d\n255\n" % (w, h)
    path.write_bytes(header + img.tobytes())
