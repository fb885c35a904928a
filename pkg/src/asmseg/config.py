"""Run configuration: one YAML file describing data, phantom recipe, both
assembly scales, and execution knobs. Unknown keys are rejected so a typo
cannot silently fall back to a default.

Relative paths resolve against the config file's directory, which keeps a
run folder self-contained and movable.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import yaml

from .errors import ConfigurationError
from .phantom import PhantomSpec
from .pipeline import AssemblyConfig

_TOP_KEYS = {"seed", "workers", "cascade", "data", "phantom", "coarse", "fine", "output"}
_DATA_KEYS = {"dir", "n_train", "n_test"}
_PHANTOM_KEYS = {"dims", "num_classes", "noise_sigma", "center_jitter",
                 "radius_jitter", "prior_corruption", "spacing", "seed"}
_SCALE_KEYS = {"k", "tile_size", "downsample_factor", "base_filters", "depth",
               "dropout_rate", "learning_rate", "epochs", "swa_epochs",
               "mixup_alpha", "mixup_enabled", "flip_enabled", "use_prior",
               "transfer_enabled", "mc_passes", "seed"}
_OUTPUT_KEYS = {"dir"}

_SCALE_INTS = {"k", "downsample_factor", "base_filters", "depth", "epochs",
               "swa_epochs", "mc_passes", "seed"}
_SCALE_FLOATS = {"dropout_rate", "learning_rate", "mixup_alpha"}


@dataclass(frozen=True)
class RunConfig:
    seed: int
    workers: int
    cascade: bool
    data_dir: Path
    n_train: int
    n_test: int
    out_dir: Path
    phantom: PhantomSpec
    coarse: AssemblyConfig
    fine: AssemblyConfig | None


def _check_keys(section, allowed: set, where: str) -> dict:
    if section is None:
        return {}
    if not isinstance(section, dict):
        raise ConfigurationError(f"{where} must be a mapping, got {type(section).__name__}")
    unknown = sorted(set(section) - allowed)
    if unknown:
        raise ConfigurationError(f"{where}: unknown keys {unknown}; allowed: {sorted(allowed)}")
    return section


def _phantom_spec(section, default_seed: int) -> PhantomSpec:
    sec = _check_keys(section, _PHANTOM_KEYS, "phantom")
    kw = dict(sec)
    kw.setdefault("seed", default_seed)
    for key in ("dims", "spacing"):
        if key in kw:
            kw[key] = tuple(kw[key])
    for key in ("noise_sigma", "center_jitter", "radius_jitter", "prior_corruption"):
        if key in kw:
            kw[key] = float(kw[key])
    try:
        return PhantomSpec(**kw)
    except TypeError as e:
        raise ConfigurationError(f"phantom: {e}") from e


def _assembly_config(section, scale: str, num_classes: int,
                     default_seed: int) -> AssemblyConfig:
    sec = _check_keys(section, _SCALE_KEYS, scale)
    if "k" not in sec or "tile_size" not in sec:
        raise ConfigurationError(f"{scale}: needs at least 'k' and 'tile_size'")
    kw = {}
    for key, value in sec.items():
        if key in _SCALE_INTS:
            value = int(value)
        elif key in _SCALE_FLOATS:
            value = float(value)  # YAML reads bare 1e-3 as a string
        kw["K" if key == "k" else key] = value
    kw.setdefault("seed", default_seed)
    kw["tile_size"] = tuple(kw["tile_size"])
    return AssemblyConfig(scale=scale, num_classes=num_classes, **kw)


def load_run_config(path, seed: int | None = None,
                    workers: int | None = None) -> RunConfig:
    """Parse and validate a YAML run config; `seed`/`workers` override the
    file's scalars (command-line precedence)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigurationError(f"cannot read config {path}: {e}") from e
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as e:
        raise ConfigurationError(f"{path}: invalid YAML: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: config must be a mapping")
    _check_keys(raw, _TOP_KEYS, str(path))

    global_seed = int(raw.get("seed", 0)) if seed is None else int(seed)
    n_workers = int(raw.get("workers", 1)) if workers is None else int(workers)
    if n_workers < 1:
        raise ConfigurationError(f"workers must be >= 1, got {n_workers}")

    data = _check_keys(raw.get("data"), _DATA_KEYS, "data")
    out = _check_keys(raw.get("output"), _OUTPUT_KEYS, "output")
    base = path.parent

    phantom = _phantom_spec(raw.get("phantom"), global_seed)
    if "coarse" not in raw:
        raise ConfigurationError("config needs a 'coarse' section")
    coarse = _assembly_config(raw["coarse"], "coarse", phantom.num_classes, global_seed)
    fine = None
    if raw.get("fine") is not None:
        fine = _assembly_config(raw["fine"], "fine", phantom.num_classes, global_seed)
    cascade = bool(raw.get("cascade", fine is not None))
    if cascade and fine is None:
        raise ConfigurationError("cascade needs a 'fine' section")

    return RunConfig(
        seed=global_seed,
        workers=n_workers,
        cascade=cascade,
        data_dir=base / data.get("dir", "data"),
        n_train=int(data.get("n_train", 1)),
        n_test=int(data.get("n_test", 0)),
        out_dir=base / out.get("dir", "out"),
        phantom=phantom,
        coarse=coarse,
        fine=fine,
    )
