"""Assembly orchestration: train all tile models under transfer dependencies,
segment by tiled voting, and chain the coarse-to-fine cascade.

Reproducibility contract: a fixed (seed, config, dataset) produces bit-equal
weights and segmentations regardless of the worker count. Every node draws
from its own seed stream, node work is pinned to one BLAS thread, and fusion
accumulates in fixed grid order.
"""

from __future__ import annotations

import ast
import time
from concurrent.futures import FIRST_COMPLETED, ProcessPoolExecutor, wait
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import ConfigurationError, FormatError, ParameterError, PipelineError
from .fusion import VoteAccumulator, accumulate, finalize_majority
from .model import (
    AdamState,
    ModelHyperparams,
    ModelWeights,
    adam_step,
    backward,
    copy_descending_path,
    dice_loss,
    forward,
    init_model,
    load_weights,
    mc_dropout_predict,
    save_weights,
    swa_update,
)
from .tiling import AssemblyGrid, build_grid, extract_tile
from .transfer import Node, predecessor, topological_order
from .volume import LabelMap, ProbVolume, Volume, downsample, normalize_intensity, upsample_labels_nn

# seed-stream tags so init/train/inference draws never collide
_TAG_INIT, _TAG_TRAIN, _TAG_INFER = 1, 2, 3

SCALES = ("coarse", "fine")


@dataclass
class Subject:
    id: str
    image: Volume
    mask: LabelMap
    prior: LabelMap
    labels: LabelMap | None = None
    swap_pairs: tuple[tuple[int, int], ...] | None = None


@dataclass(frozen=True)
class AssemblyConfig:
    scale: str
    num_classes: int
    tile_size: tuple[int, int, int]
    K: int
    downsample_factor: int = 1
    base_filters: int = 4
    depth: int = 2
    dropout_rate: float = 0.5
    learning_rate: float = 1e-3
    epochs: int = 100
    swa_epochs: int = 20
    mixup_alpha: float = 0.2
    mixup_enabled: bool = True
    flip_enabled: bool = True
    use_prior: bool = True
    transfer_enabled: bool = True
    mc_passes: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.scale not in SCALES:
            raise ConfigurationError(f"scale must be one of {SCALES}, got {self.scale!r}")
        object.__setattr__(self, "tile_size", tuple(int(t) for t in self.tile_size))
        if len(self.tile_size) != 3:
            raise ConfigurationError(f"tile_size needs 3 entries, got {self.tile_size}")
        div = 2**self.depth
        if any(t % div != 0 or t <= 0 for t in self.tile_size):
            raise ConfigurationError(
                f"tile_size {self.tile_size} must be positive multiples of 2^depth = {div}"
            )
        if self.K < 1:
            raise ConfigurationError(f"K must be >= 1, got {self.K}")
        if self.scale == "fine" and self.downsample_factor != 1:
            raise ConfigurationError("fine scale runs at full resolution (factor 1)")
        if self.downsample_factor < 1:
            raise ConfigurationError("downsample_factor must be >= 1")
        if self.epochs < 0 or self.swa_epochs < 0:
            raise ConfigurationError("epoch counts must be >= 0")
        if self.mc_passes < 1:
            raise ConfigurationError("mc_passes must be >= 1")

    @property
    def in_channels(self) -> int:
        # coarse: intensity + prior; fine adds the upsampled coarse decision
        return 2 if self.scale == "coarse" else 3

    @property
    def hyper(self) -> ModelHyperparams:
        return ModelHyperparams(
            in_channels=self.in_channels,
            num_classes=self.num_classes,
            base_filters=self.base_filters,
            depth=self.depth,
            dropout_rate=self.dropout_rate,
            learning_rate=self.learning_rate,
        )


@dataclass
class AssemblyModel:
    config: AssemblyConfig
    grid: AssemblyGrid
    weights: dict[Node, ModelWeights]
    timings: dict[Node, float] = field(default_factory=dict)

    def __post_init__(self):
        expect = set(topological_order(self.config.K))
        if set(self.weights) != expect:
            raise ConfigurationError(
                f"assembly needs weights for {len(expect)} nodes, got {len(self.weights)}"
            )
        hypers = {w.hyper for w in self.weights.values()}
        if len(hypers) > 1:
            raise ConfigurationError("tile models disagree on hyperparams")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.grid.dims


def _node_rng(seed: int, tag: int, node: Node) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, tag, *node)))


def _encode_labels(l: LabelMap, num_classes: int) -> Volume:
    if l.num_classes != num_classes:
        raise PipelineError(f"label map has {l.num_classes} classes, config {num_classes}")
    return Volume(l.data.astype(np.float32) / (num_classes - 1), spacing=l.spacing)


def _zero_channel(like: Volume) -> Volume:
    return Volume(np.zeros(like.dims, dtype=np.float32), spacing=like.spacing)


def _swap_lookup(num_classes: int, pairs) -> np.ndarray:
    remap = np.arange(num_classes, dtype=np.uint16)
    for left, right in pairs:
        if not (0 < left < num_classes and 0 < right < num_classes) or left == right:
            raise ConfigurationError(f"bad swap pair ({left}, {right})")
        remap[left], remap[right] = right, left
    return remap


def _flip_labelmap(l: LabelMap, pairs) -> LabelMap:
    data = l.data[::-1, :, :].copy()
    if pairs:
        data = _swap_lookup(l.num_classes, pairs)[data]
    return LabelMap(data, l.num_classes, spacing=l.spacing)


def flip_subject(s: Subject) -> Subject:
    """Mirror along x and exchange paired lateral labels; involutive."""
    if s.swap_pairs is None:
        raise ConfigurationError(f"subject {s.id}: flipping needs a label swap table")
    image = Volume(s.image.data[::-1, :, :].copy(), spacing=s.image.spacing,
                   affine=s.image.affine)
    labels = None if s.labels is None else _flip_labelmap(s.labels, s.swap_pairs)
    mask = _flip_labelmap(s.mask, ())
    prior = _flip_labelmap(s.prior, s.swap_pairs)
    return Subject(s.id, image, mask, prior, labels, s.swap_pairs)


def prepare_channels(s: Subject, cfg: AssemblyConfig,
                     coarse_seg: LabelMap | None = None) -> list[Volume]:
    """Model input channels: normalized intensity, encoded prior, and (fine
    scale) the encoded coarse decision. Labels encode as label/(C-1).

    Intensity is normalized at full resolution, then mean-pooled for the
    coarse scale. With the prior ablated the channel stays but reads zero.
    """
    norm = normalize_intensity(s.image, s.mask)
    prior = s.prior
    if cfg.scale == "coarse":
        if coarse_seg is not None:
            raise PipelineError("coarse scale does not take a coarse segmentation")
        if cfg.downsample_factor > 1:
            norm = downsample(norm, cfg.downsample_factor)
            prior = downsample(prior, cfg.downsample_factor)
        chans = [norm, _encode_labels(prior, cfg.num_classes)]
    else:
        if coarse_seg is None:
            raise PipelineError("fine scale needs the upsampled coarse segmentation")
        if coarse_seg.dims != s.image.dims:
            raise PipelineError(
                f"coarse segmentation dims {coarse_seg.dims} != subject dims {s.image.dims}"
            )
        chans = [norm, _encode_labels(prior, cfg.num_classes),
                 _encode_labels(coarse_seg, cfg.num_classes)]
    if not cfg.use_prior:
        chans[1] = _zero_channel(chans[1])
    return chans


def mixup(sample_a, sample_b, lam: float):
    """Convex combination of two (input, target) pairs; targets go soft."""
    xa, ya = sample_a
    xb, yb = sample_b
    if xa.shape != xb.shape or ya.shape != yb.shape:
        raise ParameterError("mixup needs matching sample shapes")
    if not 0.0 <= lam <= 1.0:
        raise ParameterError(f"lambda must be in [0, 1], got {lam}")
    lam = xa.dtype.type(lam)
    return lam * xa + (1 - lam) * xb, lam * ya + (1 - lam) * yb


def _one_hot_stack(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((labels.shape[0], num_classes, *labels.shape[1:]), dtype=np.float32)
    for c in range(num_classes):
        out[:, c][labels == c] = 1.0
    return out


def _train_node_task(payload):
    """Worker body: train one tile model; deterministic and BLAS-pinned."""
    node, init_w, x_stack, y_stack, opts = payload
    t0 = time.perf_counter()
    with threadpool_limits(limits=1):
        w = init_w
        h = w.hyper
        rng = np.random.default_rng(np.random.SeedSequence(opts["train_seed"]))
        targets = _one_hot_stack(y_stack, h.num_classes)
        state = AdamState.for_weights(w)
        n = x_stack.shape[0]

        def run_epoch():
            for a in rng.permutation(n):
                if opts["mixup_enabled"]:
                    b = int(rng.integers(n))
                    lam = float(rng.beta(opts["mixup_alpha"], opts["mixup_alpha"]))
                    x, y = mixup((x_stack[a], targets[a]), (x_stack[b], targets[b]), lam)
                else:
                    x, y = x_stack[a], targets[a]
                probs, cache = forward(w, x, rng=rng)
                _, dprobs = dice_loss(probs, y, eps=h.dice_epsilon)
                grads = backward(w, cache, dprobs)
                adam_step(w, state, grads)

        for _ in range(opts["epochs"]):
            run_epoch()
        swa = swa_update(None, w)
        for _ in range(opts["swa_epochs"]):
            run_epoch()
            swa = swa_update(swa, w)
        final = swa.to_weights(np.float32)
    return node, final, time.perf_counter() - t0


def _predict_tile_task(payload):
    node, w, x, mc_passes, infer_seed = payload
    with threadpool_limits(limits=1):
        probs = mc_dropout_predict(w, x, n_passes=mc_passes,
                                   seed=np.random.SeedSequence(infer_seed))
    return node, probs.data


def _resolve_coarse_maps(dataset, cfg, provider, workers, log):
    """Upsampled coarse decision per dataset entry, for fine-scale channels.

    ``provider`` is a trained coarse AssemblyModel or a {subject id: LabelMap}
    mapping (coarse-resolution maps). Flipped doubles of mapped subjects use
    the flipped map; with a model, the flipped subject is segmented directly.
    """
    if provider is None:
        raise PipelineError("fine scale needs a coarse assembly or precomputed maps")
    maps = []
    for s, flipped, base_id in dataset:
        if isinstance(provider, AssemblyModel):
            if provider.config.scale != "coarse":
                raise PipelineError("coarse provider model must have scale 'coarse'")
            chans = prepare_channels(s, provider.config)
            seg, _ = segment_assembly(provider, chans, workers=workers)
            if log:
                log(f"coarse-map subject={s.id}{'*' if flipped else ''}")
        else:
            if base_id not in provider:
                raise PipelineError(f"no coarse map for subject {base_id}")
            seg = provider[base_id]
            if flipped:
                seg = _flip_labelmap(seg, s.swap_pairs or ())
        maps.append(upsample_labels_nn(seg, s.image.dims))
    return maps


def train_assembly(subjects: list[Subject], cfg: AssemblyConfig, coarse_provider=None,
                   workers: int = 1, on_node_initialized=None, log=None) -> AssemblyModel:
    """Train all K^3 tile models, respecting transfer dependencies.

    Flip doubling happens first (when enabled); each node then trains for
    `epochs` passes plus `swa_epochs` averaged passes on its tile crops. The
    root initializes from the seed; other nodes copy their predecessor's
    final descending-path weights over a fresh init. `on_node_initialized`
    observes (node, initial weights) at dispatch time.
    """
    if not subjects:
        raise PipelineError("training needs at least one subject")
    for s in subjects:
        if s.labels is None:
            raise PipelineError(f"subject {s.id} has no ground-truth labels")
    dims0 = subjects[0].image.dims
    if any(s.image.dims != dims0 for s in subjects):
        raise PipelineError("subjects disagree on volume dims")

    dataset = [(s, False, s.id) for s in subjects]
    if cfg.flip_enabled:
        dataset += [(flip_subject(s), True, s.id) for s in subjects]

    if cfg.scale == "fine":
        coarse_maps = _resolve_coarse_maps(dataset, cfg, coarse_provider, workers, log)
    else:
        coarse_maps = [None] * len(dataset)

    channels = []
    targets = []
    for (s, _, _), cmap in zip(dataset, coarse_maps):
        channels.append(prepare_channels(s, cfg, coarse_seg=cmap))
        lab = s.labels
        if cfg.scale == "coarse" and cfg.downsample_factor > 1:
            lab = downsample(lab, cfg.downsample_factor)
        targets.append(lab)

    grid_dims = channels[0][0].dims
    grid = build_grid(grid_dims, cfg.tile_size, cfg.K)
    tile_of = {t.grid_index: t for t in grid.tiles}
    hyper = cfg.hyper

    def node_payload(node, init_w):
        t = tile_of[node]
        x_stack = np.stack([extract_tile(ch, t) for ch in channels])
        y_stack = np.stack([lab.data[t.slices] for lab in targets])
        opts = {
            "train_seed": (cfg.seed, _TAG_TRAIN, *node),
            "epochs": cfg.epochs,
            "swa_epochs": cfg.swa_epochs,
            "mixup_enabled": cfg.mixup_enabled and len(dataset) > 1,
            "mixup_alpha": cfg.mixup_alpha,
        }
        return node, init_w, x_stack, y_stack, opts

    order = topological_order(cfg.K)
    rank = {n: r for r, n in enumerate(order)}
    finals: dict[Node, ModelWeights] = {}
    timings: dict[Node, float] = {}

    def make_init(node):
        fresh = init_model(hyper, np.random.SeedSequence((cfg.seed, _TAG_INIT, *node)))
        pred = predecessor(node, cfg.K) if cfg.transfer_enabled else None
        init_w = fresh if pred is None else copy_descending_path(finals[pred], fresh)
        if on_node_initialized is not None:
            on_node_initialized(node, init_w)
        if log:
            src = "scratch" if pred is None else f"transfer from {pred}"
            log(f"node {node[0]}-{node[1]}-{node[2]} start ({src})")
        return init_w

    def record(node, final, dur):
        finals[node] = final
        timings[node] = dur
        if log:
            log(f"node {node[0]}-{node[1]}-{node[2]} done in {dur:.2f}s")

    n_workers = min(int(workers), len(order))
    if n_workers < 1:
        raise PipelineError(f"workers must be >= 1, got {workers}")
    if n_workers == 1:
        for node in order:
            node_, final, dur = _train_node_task(node_payload(node, make_init(node)))
            record(node_, final, dur)
    else:
        deps = {n: (predecessor(n, cfg.K) if cfg.transfer_enabled else None) for n in order}
        waiting = set(order)
        running: dict = {}
        with ProcessPoolExecutor(max_workers=n_workers) as ex:
            while waiting or running:
                ready = sorted(
                    (n for n in waiting if deps[n] is None or deps[n] in finals),
                    key=rank.__getitem__,
                )
                for node in ready[: n_workers - len(running)]:
                    waiting.discard(node)
                    fut = ex.submit(_train_node_task, node_payload(node, make_init(node)))
                    running[fut] = node
                done, _ = wait(running, return_when=FIRST_COMPLETED)
                for fut in done:
                    node = running.pop(fut)
                    err = fut.exception()
                    if err is not None:
                        raise PipelineError(f"training failed for node {node}: {err}") from err
                    record(*fut.result())
    return AssemblyModel(cfg, grid, finals, timings)


def segment_assembly(m: AssemblyModel, channels: list[Volume],
                     workers: int = 1) -> tuple[LabelMap, ProbVolume]:
    """Tiled MC-dropout inference fused by overcomplete majority vote."""
    cfg = m.config
    if len(channels) != cfg.in_channels:
        raise PipelineError(f"expected {cfg.in_channels} channels, got {len(channels)}")
    dims0 = channels[0].dims
    if any(c.dims != dims0 for c in channels) or dims0 != m.dims:
        raise PipelineError(f"channel dims {dims0} do not match assembly dims {m.dims}")

    def payload(t):
        node = t.grid_index
        x = extract_tile(channels, t)
        return node, m.weights[node], x, cfg.mc_passes, (cfg.seed, _TAG_INFER, *node)

    results: dict[Node, np.ndarray] = {}
    n_workers = min(int(workers), len(m.grid.tiles))
    if n_workers <= 1:
        for t in m.grid.tiles:
            node, probs = _predict_tile_task(payload(t))
            results[node] = probs
    else:
        with ProcessPoolExecutor(max_workers=n_workers) as ex:
            futs = {ex.submit(_predict_tile_task, payload(t)): t.grid_index
                    for t in m.grid.tiles}
            for fut, node in futs.items():
                err = fut.exception()
                if err is not None:
                    raise PipelineError(f"inference failed for tile {node}: {err}") from err
                node_, probs = fut.result()
                results[node_] = probs

    acc = VoteAccumulator(m.dims, cfg.num_classes, spacing=channels[0].spacing)
    for t in m.grid.tiles:  # fixed grid order keeps prob sums reproducible
        accumulate(acc, t, ProbVolume(results[t.grid_index]))
    return finalize_majority(acc, return_probs=True)


def run_cascade(coarse: AssemblyModel, fine: AssemblyModel, s: Subject,
                workers: int = 1, return_coarse: bool = False):
    """Coarse decision, nearest-neighbor upsampling, fine amendment."""
    if coarse.config.scale != "coarse" or fine.config.scale != "fine":
        raise PipelineError("cascade needs a coarse and a fine assembly, in that order")
    if coarse.config.num_classes != fine.config.num_classes:
        raise PipelineError("assemblies disagree on class count")
    coarse_seg, _ = segment_assembly(coarse, prepare_channels(s, coarse.config),
                                     workers=workers)
    up = upsample_labels_nn(coarse_seg, s.image.dims)
    fine_seg, _ = segment_assembly(fine, prepare_channels(s, fine.config, coarse_seg=up),
                                   workers=workers)
    return (fine_seg, up) if return_coarse else fine_seg


def save_assembly(m: AssemblyModel, root) -> Path:
    """Write `assembly-<scale>/` with config, grid.txt, timings, node weights."""
    out = Path(root) / f"assembly-{m.config.scale}"
    out.mkdir(parents=True, exist_ok=True)
    lines = [f"dims {m.dims!r}"]
    for f in fields(AssemblyConfig):
        lines.append(f"{f.name} {getattr(m.config, f.name)!r}")
    (out / "config").write_text("\n".join(lines) + "\n")
    (out / "grid.txt").write_text(m.grid.describe())
    if m.timings:
        rows = [f"{n[0]} {n[1]} {n[2]} {m.timings[n]:.6f}" for n in sorted(m.timings)]
        (out / "timings.txt").write_text("\n".join(rows) + "\n")
    for node, w in m.weights.items():
        save_weights(w, out / "node_{}_{}_{}.asmw".format(*node))
    return out


def load_assembly(path) -> AssemblyModel:
    path = Path(path)
    cfg_file = path / "config"
    if not cfg_file.is_file():
        raise FormatError(f"{path}: missing assembly config")
    dims = None
    cfg_fields = {}
    for line in cfg_file.read_text().splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition(" ")
        try:
            parsed = ast.literal_eval(value)
        except (ValueError, SyntaxError) as e:
            raise FormatError(f"{path}: bad config line {line!r}") from e
        if key == "dims":
            dims = tuple(parsed)
        else:
            cfg_fields[key] = parsed
    if dims is None:
        raise FormatError(f"{path}: config is missing dims")
    try:
        cfg = AssemblyConfig(**cfg_fields)
    except (TypeError, ConfigurationError) as e:
        raise FormatError(f"{path}: bad assembly config: {e}") from e
    grid = build_grid(dims, cfg.tile_size, cfg.K)
    grid_file = path / "grid.txt"
    if grid_file.is_file() and grid_file.read_text() != grid.describe():
        raise FormatError(f"{path}: grid.txt does not match config")
    weights = {}
    for node in topological_order(cfg.K):
        wfile = path / "node_{}_{}_{}.asmw".format(*node)
        if not wfile.is_file():
            raise FormatError(f"{path}: missing weights for node {node}")
        weights[node] = load_weights(wfile)
    timings = {}
    tfile = path / "timings.txt"
    if tfile.is_file():
        for line in tfile.read_text().splitlines():
            i, j, k, dur = line.split()
            timings[(int(i), int(j), int(k))] = float(dur)
    return AssemblyModel(cfg, grid, weights, timings)
