"""Overcomplete majority-vote fusion of overlapping tile predictions.

Each tile casts one hard (argmax) vote per voxel; soft probabilities are
summed alongside and only break vote ties. Reference behavior is
single-threaded accumulation; parallel use must merge per-tile partial
results in grid order so float tie-breaks stay reproducible.
"""

from __future__ import annotations

import numpy as np

from .errors import CoverageError, ParameterError
from .tiling import TileSpec
from .volume import LabelMap, ProbVolume


class VoteAccumulator:
    """Running per-voxel vote counts and probability sums over a full volume."""

    def __init__(self, dims, num_classes: int, spacing=(1.0, 1.0, 1.0)):
        self.dims = tuple(int(d) for d in dims)
        self.num_classes = int(num_classes)
        if self.num_classes < 2:
            raise ParameterError("num_classes must be >= 2")
        self.spacing = tuple(float(s) for s in spacing)
        self.hard_votes = np.zeros((self.num_classes, *self.dims), dtype=np.int32)
        self.prob_sums = np.zeros((self.num_classes, *self.dims), dtype=np.float64)
        self.contributions = np.zeros(self.dims, dtype=np.int32)


def accumulate(acc: VoteAccumulator, t: TileSpec, tile_probs: ProbVolume) -> None:
    """Add one tile's prediction: argmax vote (ties to smallest class) plus prob sums."""
    if tile_probs.num_classes != acc.num_classes:
        raise ParameterError(
            f"tile has {tile_probs.num_classes} classes, accumulator {acc.num_classes}"
        )
    if tile_probs.dims != t.size:
        raise ParameterError(f"tile probs dims {tile_probs.dims} != tile size {t.size}")
    for a in range(3):
        if t.origin[a] + t.size[a] > acc.dims[a]:
            raise ParameterError(f"tile {t.grid_index} exceeds accumulator dims {acc.dims}")
    region = (slice(None),) + t.slices
    p = tile_probs.data
    winners = np.argmax(p, axis=0)  # first max -> smallest class
    onehot = winners[None] == np.arange(acc.num_classes)[:, None, None, None]
    acc.hard_votes[region] += onehot
    acc.prob_sums[region] += p
    acc.contributions[t.slices] += 1


def merge(acc: VoteAccumulator, part: VoteAccumulator) -> None:
    """Fold a partial accumulator in; caller must merge parts in grid order."""
    if part.dims != acc.dims or part.num_classes != acc.num_classes:
        raise ParameterError("partial accumulator shape mismatch")
    acc.hard_votes += part.hard_votes
    acc.prob_sums += part.prob_sums
    acc.contributions += part.contributions


def finalize_majority(
    acc: VoteAccumulator, return_probs: bool = False, soft: bool = False
):
    """Resolve votes to a LabelMap.

    Hard mode (default): label = argmax vote count, ties broken by larger
    probability sum, then by smallest class. Soft mode ranks by probability
    sum alone.
    """
    if acc.contributions.min() < 1:
        n = int((acc.contributions == 0).sum())
        raise CoverageError(f"{n} voxels not covered by any tile")
    if soft:
        labels = np.argmax(acc.prob_sums, axis=0)
    else:
        top = acc.hard_votes.max(axis=0, keepdims=True)
        tied = np.where(acc.hard_votes == top, acc.prob_sums, -np.inf)
        labels = np.argmax(tied, axis=0)
    out = LabelMap(labels.astype(np.uint16), acc.num_classes, spacing=acc.spacing)
    if not return_probs:
        return out
    mean = (acc.prob_sums / acc.contributions[None]).astype(np.float32)
    return out, ProbVolume(mean)
