"""Overlapping tile grids over a volume.

A grid places K tiles per axis so the first tile starts at 0, the last ends
flush at D, and interior origins are equally spaced with round-half-up
rounding. Neighboring tiles must overlap by at least floor(w/2) - 1 voxels;
overlaps below ceil(w/2) (strict 50%) only warn, since rounding can shave a
voxel off an otherwise valid layout.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ParameterError
from .volume import Volume

_AXIS_NAMES = ("x", "y", "z")


@dataclass(frozen=True)
class TileSpec:
    grid_index: tuple[int, int, int]
    origin: tuple[int, int, int]
    size: tuple[int, int, int]

    def __post_init__(self):
        if any(o < 0 for o in self.origin) or any(s < 1 for s in self.size):
            raise ParameterError(f"bad tile origin {self.origin} / size {self.size}")

    @property
    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(o, o + s) for o, s in zip(self.origin, self.size))


@dataclass(frozen=True)
class AssemblyGrid:
    K: tuple[int, int, int]
    dims: tuple[int, int, int]
    tile_size: tuple[int, int, int]
    tiles: tuple[TileSpec, ...]

    def describe(self) -> str:
        """One line per tile: grid index, origin, size."""
        lines = []
        for t in self.tiles:
            lines.append(" ".join(map(str, (*t.grid_index, *t.origin, *t.size))))
        return "\n".join(lines) + "\n"


def _expand3(value, name: str) -> tuple[int, int, int]:
    if np.isscalar(value):
        value = (value, value, value)
    out = tuple(int(v) for v in value)
    if len(out) != 3 or any(v < 1 for v in out):
        raise ParameterError(f"{name} must be a positive int or 3 of them, got {value}")
    return out


def tile_origins(D: int, w: int, K: int) -> list[int]:
    """K origins along one axis, anchored at 0 and D - w, equally spaced between.

    Interior origins round half up: origin_i = floor(i*(D-w)/(K-1) + 1/2).
    """
    D, w, K = int(D), int(w), int(K)
    if not 1 <= w <= D:
        raise ParameterError(f"tile width {w} must be in [1, {D}]")
    if K < 1:
        raise ParameterError(f"K must be >= 1, got {K}")
    slack = D - w
    if K == 1:
        return [slack // 2]
    return [(2 * i * slack + (K - 1)) // (2 * (K - 1)) for i in range(K)]


def build_grid(dims, tile_size, K) -> AssemblyGrid:
    """Cartesian product of per-axis origins; k outermost, then j, then i."""
    dims = _expand3(dims, "dims")
    tile_size = _expand3(tile_size, "tile_size")
    K = _expand3(K, "K")
    for a in range(3):
        if tile_size[a] > dims[a]:
            raise ParameterError(
                f"tile size {tile_size[a]} exceeds dims {dims[a]} on axis {_AXIS_NAMES[a]}"
            )

    axis_origins = []
    for a in range(3):
        D, w, k = dims[a], tile_size[a], K[a]
        origins = tile_origins(D, w, k)
        if k > 1:
            step = max(b - aa for aa, b in zip(origins, origins[1:]))
            overlap = w - step
            if overlap < w // 2 - 1:
                raise ConfigurationError(
                    f"axis {_AXIS_NAMES[a]}: neighbor overlap {overlap} below "
                    f"required {w // 2 - 1} (w={w}, K={k}, D={D})"
                )
            if overlap < (w + 1) // 2:
                warnings.warn(
                    f"axis {_AXIS_NAMES[a]}: overlap {overlap} is under 50% of tile "
                    f"width {w}",
                    stacklevel=2,
                )
            if step > w:
                raise ConfigurationError(
                    f"axis {_AXIS_NAMES[a]}: gap between tiles leaves voxels uncovered"
                )
        axis_origins.append(origins)

    tiles = []
    for k in range(K[2]):
        for j in range(K[1]):
            for i in range(K[0]):
                origin = (axis_origins[0][i], axis_origins[1][j], axis_origins[2][k])
                tiles.append(TileSpec((i, j, k), origin, tile_size))
    return AssemblyGrid(K, dims, tile_size, tuple(tiles))


def extract_tile(channels: list[Volume], t: TileSpec) -> np.ndarray:
    """Crop each channel to the tile; returns a copied (Cin, wx, wy, wz) float32 array."""
    if not channels:
        raise ParameterError("at least one channel required")
    dims = channels[0].dims
    for c in channels[1:]:
        if c.dims != dims:
            raise ParameterError(f"channel dims {c.dims} differ from {dims}")
    for a in range(3):
        if t.origin[a] + t.size[a] > dims[a]:
            raise ParameterError(f"tile {t.grid_index} exceeds volume on axis {_AXIS_NAMES[a]}")
    out = np.empty((len(channels), *t.size), dtype=np.float32)
    for ci, c in enumerate(channels):
        out[ci] = c.data[t.slices]
    return out


def coverage_map(g: AssemblyGrid) -> np.ndarray:
    """Per-voxel count of covering tiles (int32)."""
    counts = np.zeros(g.dims, dtype=np.int32)
    for t in g.tiles:
        counts[t.slices] += 1
    return counts
