"""Synthetic volumetric phantoms: jittered ellipsoid scenes with a corrupted
per-subject prior, written as single-file NIfTI datasets with a manifest.

Scene (labels, painted in this order so later structures overwrite earlier):
shell (3) around a core (4) with a stem (5) below, plus a mirrored pair of
lateral blobs (left 1, right 2). Centers and radii are fractions of dim-1,
so the scene scales with the volume and stays exactly mirror-symmetric in x
when jitter is zero. Intensity means increase with the label value; the
gaps are uneven, spending the [0, 1] budget on the boundaries where two
structures actually touch (blob/shell, shell/core, core/stem) while any
two classes stay >= 3 sigma apart at the default noise. The mask marks
exactly the non-background voxels.

The prior plays the role of an imperfectly registered atlas: the subject's
own structures with every center shifted by up to prior_corruption voxels
and the radii re-perturbed, so it tracks the subject without being exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, FormatError
from .nifti import read_nifti, write_nifti
from .pipeline import Subject
from .volume import LabelMap, Volume

# label -> (center fractions, radius fractions), both per axis of (dim - 1)
_STRUCTURES = {
    3: ((0.5, 0.5, 0.5), (0.34, 0.34, 0.34)),
    4: ((0.5, 0.5, 0.5), (0.20, 0.20, 0.20)),
    5: ((0.5, 0.5, 0.35), (0.11, 0.11, 0.18)),
    1: ((0.26, 0.56, 0.56), (0.13, 0.14, 0.14)),
    2: ((0.74, 0.56, 0.56), (0.13, 0.14, 0.14)),
}
_PAINT_ORDER = (3, 4, 5, 1, 2)
SWAP_PAIRS = ((1, 2),)

# increasing per-label means; wide gaps go to the pairs that share a border
_MEANS = (0.0, 0.2, 0.35, 0.58, 0.8, 1.0)

_KINDS = ("image", "labels", "mask", "prior")
MANIFEST_NAME = "manifest.tsv"


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (48, 48, 48)
    num_classes: int = 6
    noise_sigma: float = 0.05
    center_jitter: float = 2.0
    radius_jitter: float = 0.1
    prior_corruption: float = 2.0
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        if len(self.dims) != 3 or any(d < 16 for d in self.dims):
            raise ConfigurationError(f"dims must be 3 axes of at least 16, got {self.dims}")
        if not 3 <= self.num_classes <= 1 + len(_STRUCTURES):
            raise ConfigurationError(
                f"num_classes must be in [3, {1 + len(_STRUCTURES)}], got {self.num_classes}"
            )
        if (self.noise_sigma < 0 or self.center_jitter < 0
                or self.radius_jitter < 0 or self.prior_corruption < 0):
            raise ConfigurationError("noise, jitter and corruption amounts must be >= 0")
        # worst-case extent must stay inside the volume for every structure;
        # the prior compounds a second radius perturbation and its own shift
        for label in self.labels_present:
            center, radii = _STRUCTURES[label]
            for ax in range(3):
                span = self.dims[ax] - 1
                base = max(radii[ax] * span, 0.5)
                reach = (base * (1 + self.radius_jitter) ** 2
                         + self.center_jitter + self.prior_corruption)
                lo = center[ax] * span - reach
                hi = center[ax] * span + reach
                if lo < 0 or hi > span:
                    raise ConfigurationError(
                        f"structure {label} can leave the volume on axis {ax} "
                        f"(reach [{lo:.1f}, {hi:.1f}] vs [0, {span}]); "
                        "grow dims or shrink jitter"
                    )

    @property
    def labels_present(self) -> tuple[int, ...]:
        return tuple(l for l in _PAINT_ORDER if l < self.num_classes)

    @property
    def swap_pairs(self) -> tuple[tuple[int, int], ...]:
        # both lateral blobs exist for every valid class count
        return SWAP_PAIRS


def _paint(arr: np.ndarray, center, radii, value: int) -> None:
    lo = [max(0, math.floor(c - r)) for c, r in zip(center, radii)]
    hi = [min(d, math.ceil(c + r) + 1) for c, r, d in zip(center, radii, arr.shape)]
    axes = np.ix_(*(np.arange(l, h, dtype=np.float64) for l, h in zip(lo, hi)))
    q = sum(((ax - c) / r) ** 2 for ax, c, r in zip(axes, center, radii))
    region = arr[tuple(slice(l, h) for l, h in zip(lo, hi))]
    region[q <= 1.0] = value


Geometry = dict[int, tuple[list[float], list[float]]]


def _geometry(spec: PhantomSpec, rng: np.random.Generator) -> Geometry:
    """Per-structure centers and radii in voxel units, jittered per subject."""
    geom: Geometry = {}
    for label in spec.labels_present:
        cf, rf = _STRUCTURES[label]
        center = [c * (d - 1) for c, d in zip(cf, spec.dims)]
        radii = [max(r * (d - 1), 0.5) for r, d in zip(rf, spec.dims)]
        center = [c + o for c, o in
                  zip(center, rng.uniform(-spec.center_jitter, spec.center_jitter, 3))]
        radii = [r * (1 + f) for r, f in
                 zip(radii, rng.uniform(-spec.radius_jitter, spec.radius_jitter, 3))]
        geom[label] = (center, radii)
    return geom


def _corrupted(spec: PhantomSpec, geom: Geometry, rng: np.random.Generator) -> Geometry:
    """Registration-error stand-in: shift each structure and re-perturb radii."""
    out: Geometry = {}
    for label, (center, radii) in geom.items():
        shift = rng.uniform(-spec.prior_corruption, spec.prior_corruption, 3)
        factor = rng.uniform(-spec.radius_jitter, spec.radius_jitter, 3)
        out[label] = ([c + s for c, s in zip(center, shift)],
                      [r * (1 + f) for r, f in zip(radii, factor)])
    return out


def _paint_scene(spec: PhantomSpec, geom: Geometry) -> np.ndarray:
    arr = np.zeros(spec.dims, dtype=np.uint16)
    for label in spec.labels_present:
        center, radii = geom[label]
        _paint(arr, center, radii, label)
    return arr


def generate_phantom(spec: PhantomSpec, subject_seed: int, subject_id: str) -> Subject:
    """One deterministic subject: jittered scene, noisy image, corrupted prior."""
    rng = np.random.default_rng(np.random.SeedSequence((spec.seed, subject_seed)))
    geom = _geometry(spec, rng)
    labels = _paint_scene(spec, geom)
    means = np.array(_MEANS[:spec.num_classes], dtype=np.float32)
    image = means[labels] + rng.normal(0.0, spec.noise_sigma, spec.dims).astype(np.float32)
    prior = _paint_scene(spec, _corrupted(spec, geom, rng))
    return Subject(
        id=subject_id,
        image=Volume(image, spacing=spec.spacing),
        mask=LabelMap((labels != 0).astype(np.uint16), 2, spacing=spec.spacing),
        prior=LabelMap(prior, spec.num_classes, spacing=spec.spacing),
        labels=LabelMap(labels, spec.num_classes, spacing=spec.spacing),
        swap_pairs=spec.swap_pairs,
    )


def generate_dataset(spec: PhantomSpec, n_train: int, n_test: int, out_dir) -> Path:
    """Write train/test phantoms as NIfTI files plus a manifest; returns the
    manifest path. Subject seeds are the dataset position, so regenerating
    with the same spec reproduces every file byte for byte."""
    if n_train < 1 or n_test < 0:
        raise ConfigurationError("need n_train >= 1 and n_test >= 0")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    roles = [("train", i, f"train{i:02d}") for i in range(n_train)]
    roles += [("test", n_train + i, f"test{i:02d}") for i in range(n_test)]
    lines = [f"# num_classes {spec.num_classes}"]
    if spec.swap_pairs:
        lines += [f"# swap {a} {b}" for a, b in spec.swap_pairs]
    for role, sseed, sid in roles:
        s = generate_phantom(spec, sseed, sid)
        for kind, vol in (("image", s.image), ("labels", s.labels),
                          ("mask", s.mask), ("prior", s.prior)):
            name = f"{sid}_{kind}.nii"
            write_nifti(vol, out / name)
            lines.append(f"{sid}\t{role}\t{kind}\t{name}")
    manifest = out / MANIFEST_NAME
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def load_dataset(manifest_path, role: str | None = None) -> list[Subject]:
    """Rebuild Subjects from a manifest; optionally filter by role."""
    manifest = Path(manifest_path)
    if manifest.is_dir():
        manifest = manifest / MANIFEST_NAME
    if not manifest.is_file():
        raise FormatError(f"no manifest at {manifest}")
    num_classes = None
    swaps: list[tuple[int, int]] = []
    entries: dict[str, dict[str, str]] = {}
    order: list[tuple[str, str]] = []
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        if line.startswith("#"):
            parts = line[1:].split()
            if parts[:1] == ["num_classes"]:
                num_classes = int(parts[1])
            elif parts[:1] == ["swap"]:
                swaps.append((int(parts[1]), int(parts[2])))
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise FormatError(f"bad manifest line: {line!r}")
        sid, srole, kind, name = parts
        if kind not in _KINDS:
            raise FormatError(f"unknown file kind {kind!r} in manifest")
        if sid not in entries:
            entries[sid] = {}
            order.append((sid, srole))
        entries[sid][kind] = name
    if num_classes is None:
        raise FormatError(f"{manifest}: missing num_classes header")
    subjects = []
    for sid, srole in order:
        if role is not None and srole != role:
            continue
        files = entries[sid]
        missing = [k for k in _KINDS if k not in files]
        if missing:
            raise FormatError(f"subject {sid}: manifest lacks {missing}")
        base = manifest.parent
        subjects.append(Subject(
            id=sid,
            image=read_nifti(base / files["image"]),
            mask=read_nifti(base / files["mask"], as_labels=True, num_classes=2),
            prior=read_nifti(base / files["prior"], as_labels=True, num_classes=num_classes),
            labels=read_nifti(base / files["labels"], as_labels=True, num_classes=num_classes),
            swap_pairs=tuple(swaps) if swaps else None,
        ))
    return subjects
