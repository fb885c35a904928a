"""Per-tile learner: a small 3D encoder-decoder network on plain numpy.

Architecture (depth L, base filters f): encoder level l is two 3x3x3
convolutions at f*2^l filters with ReLU, dropout, then 2x2x2 max pooling;
the bottleneck is the same block at f*2^L; each decoder level nearest-
upsamples by 2, concatenates the pre-pool encoder tensor, and applies two
conv+ReLU at f*2^l; a 1x1x1 head maps to class logits and a per-voxel
softmax. All convolutions use zero "same" padding. Encoder and bottleneck
weights form the descending path used for transfer.

Gradients are exact and hand-derived; there is no autograd. Forward works
in the dtype of the weights, so float64 weights give float64 math for
finite-difference checks.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, NumericError, ParameterError, TransferError
from .volume import ProbVolume

MAGIC = b"ASMW0001"

_INT_FIELDS = ("in_channels", "num_classes", "base_filters", "depth")


@dataclass(frozen=True)
class ModelHyperparams:
    in_channels: int
    num_classes: int
    base_filters: int = 4
    depth: int = 2
    dropout_rate: float = 0.5
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    dice_epsilon: float = 1e-5

    def __post_init__(self):
        if self.in_channels < 1 or self.num_classes < 2:
            raise ParameterError("need in_channels >= 1 and num_classes >= 2")
        if self.base_filters < 1 or self.depth < 1:
            raise ParameterError("need base_filters >= 1 and depth >= 1")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ParameterError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")


@dataclass
class ModelWeights:
    hyper: ModelHyperparams
    arrays: dict[str, np.ndarray]
    descending: frozenset[str] = field(default_factory=frozenset)

    def copy(self) -> "ModelWeights":
        return ModelWeights(self.hyper, {k: v.copy() for k, v in self.arrays.items()},
                            self.descending)


def layer_plan(h: ModelHyperparams) -> list[tuple[str, tuple[int, ...], bool]]:
    """Ordered (name, kernel shape, on descending path) for every conv layer."""
    plan = []
    cin = h.in_channels
    for l in range(h.depth):
        cout = h.base_filters * 2**l
        plan.append((f"enc{l}_conv1", (cout, cin, 3, 3, 3), True))
        plan.append((f"enc{l}_conv2", (cout, cout, 3, 3, 3), True))
        cin = cout
    cout = h.base_filters * 2**h.depth
    plan.append(("bot_conv1", (cout, cin, 3, 3, 3), True))
    plan.append(("bot_conv2", (cout, cout, 3, 3, 3), True))
    cin = cout
    for l in reversed(range(h.depth)):
        cout = h.base_filters * 2**l
        plan.append((f"dec{l}_conv1", (cout, cin + cout, 3, 3, 3), False))
        plan.append((f"dec{l}_conv2", (cout, cout, 3, 3, 3), False))
        cin = cout
    plan.append(("head", (h.num_classes, cin, 1, 1, 1), False))
    return plan


def init_model(h: ModelHyperparams, seed, dtype=np.float32) -> ModelWeights:
    """He-normal kernels (std = sqrt(2/fan_in)), zero biases, seeded draws in plan order."""
    rng = np.random.default_rng(seed)
    arrays: dict[str, np.ndarray] = {}
    descending = set()
    for name, shape, desc in layer_plan(h):
        fan_in = shape[1] * shape[2] * shape[3] * shape[4]
        arrays[name + "_w"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), shape).astype(dtype)
        arrays[name + "_b"] = np.zeros(shape[0], dtype=dtype)
        if desc:
            descending.add(name + "_w")
            descending.add(name + "_b")
    return ModelWeights(h, arrays, frozenset(descending))


def _im2col3(x: np.ndarray) -> np.ndarray:
    """Zero-pad by 1 and unfold 3x3x3 windows -> (n_voxels, channels*27)."""
    c, dx, dy, dz = x.shape
    xp = np.zeros((c, dx + 2, dy + 2, dz + 2), dtype=x.dtype)
    xp[:, 1:-1, 1:-1, 1:-1] = x
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3, 3), axis=(1, 2, 3))
    return win.transpose(1, 2, 3, 0, 4, 5, 6).reshape(dx * dy * dz, c * 27)


def _conv3(x, wk, bk, cols=None):
    if cols is None:
        cols = _im2col3(x)
    cout = wk.shape[0]
    out = (wk.reshape(cout, -1) @ cols.T).reshape(cout, *x.shape[1:])
    out += bk[:, None, None, None]
    return out, cols


def _conv3_input_grad(dout, wk):
    # Gradient of same-padded correlation: correlate dout with the
    # channel-transposed, spatially flipped kernel.
    wt = np.ascontiguousarray(wk.transpose(1, 0, 2, 3, 4)[:, :, ::-1, ::-1, ::-1])
    dx, _ = _conv3(dout, wt, np.zeros(wt.shape[0], dtype=wt.dtype))
    return dx


def forward(w: ModelWeights, x: np.ndarray, rng=None, keep_cache: bool = True):
    """Run the network on one tile (Cin, wx, wy, wz) -> (probs, cache).

    Dropout is active only when an rng is passed and dropout_rate > 0
    (inverted scaling, so deterministic inference needs no correction).
    The cache is required by backward and belongs to these exact weights.
    """
    h = w.hyper
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[0] != h.in_channels:
        raise ParameterError(f"input shape {x.shape} does not match Cin={h.in_channels}")
    div = 2**h.depth
    if any(s % div != 0 or s == 0 for s in x.shape[1:]):
        raise ParameterError(
            f"tile dims {x.shape[1:]} must be positive multiples of 2^depth = {div}"
        )
    dtype = w.arrays["head_w"].dtype
    t = x.astype(dtype, copy=False)
    ops: list[tuple] = []
    use_dropout = rng is not None and h.dropout_rate > 0.0
    keep = 1.0 - h.dropout_rate

    def conv_relu(t, name):
        out, cols = _conv3(t, w.arrays[name + "_w"], w.arrays[name + "_b"])
        np.maximum(out, 0, out=out)
        if keep_cache:
            ops.append(("conv_relu", name, cols, t.shape, out))
        return out

    def dropout(t):
        if not use_dropout:
            return t
        mask = (rng.random(t.shape) >= h.dropout_rate).astype(dtype)
        mask /= keep
        if keep_cache:
            ops.append(("dropout", mask))
        return t * mask

    skips = {}
    for l in range(h.depth):
        t = conv_relu(t, f"enc{l}_conv1")
        t = conv_relu(t, f"enc{l}_conv2")
        t = dropout(t)
        skips[l] = t
        if keep_cache:
            ops.append(("skip_store", l))
        c, dx, dy, dz = t.shape
        v = t.reshape(c, dx // 2, 2, dy // 2, 2, dz // 2, 2)
        v = v.transpose(0, 1, 3, 5, 2, 4, 6).reshape(c, dx // 2, dy // 2, dz // 2, 8)
        idx = v.argmax(axis=-1)
        t = np.take_along_axis(v, idx[..., None], axis=-1)[..., 0]
        if keep_cache:
            ops.append(("maxpool", idx, (c, dx, dy, dz)))
    t = conv_relu(t, "bot_conv1")
    t = conv_relu(t, "bot_conv2")
    t = dropout(t)
    for l in reversed(range(h.depth)):
        c, dx, dy, dz = t.shape
        t = np.broadcast_to(
            t[:, :, None, :, None, :, None], (c, dx, 2, dy, 2, dz, 2)
        ).reshape(c, 2 * dx, 2 * dy, 2 * dz)
        if keep_cache:
            ops.append(("upsample",))
        t = np.concatenate([t, skips[l]], axis=0)
        if keep_cache:
            ops.append(("concat", c, l))
        t = conv_relu(t, f"dec{l}_conv1")
        t = conv_relu(t, f"dec{l}_conv2")

    cin, dx, dy, dz = t.shape
    flat = t.reshape(cin, -1)
    wk = w.arrays["head_w"].reshape(h.num_classes, cin)
    logits = wk @ flat + w.arrays["head_b"][:, None]
    if not np.isfinite(logits).all():
        raise NumericError("non-finite activations in forward pass")
    logits -= logits.max(axis=0, keepdims=True)
    e = np.exp(logits)
    probs = (e / e.sum(axis=0, dtype=np.float64)).astype(dtype)
    probs = probs.reshape(h.num_classes, dx, dy, dz)
    if not keep_cache:
        return probs, None
    ops.append(("head", flat, (cin, dx, dy, dz)))
    ops.append(("softmax", probs))
    return probs, {"ops": ops, "weights": w}


def dice_loss(probs: np.ndarray, target: np.ndarray, eps: float = 1e-5):
    """Soft multi-class Dice: loss and analytic d(loss)/d(probs).

    Targets may be soft (e.g. mixed pairs); sums run in float64.
    """
    probs = np.asarray(probs)
    target = np.asarray(target)
    if probs.shape != target.shape:
        raise ParameterError(f"probs shape {probs.shape} != target shape {target.shape}")
    if not (np.isfinite(probs).all() and np.isfinite(target).all()):
        raise NumericError("non-finite values in dice inputs")
    c = probs.shape[0]
    ax = tuple(range(1, probs.ndim))
    inter = np.sum(probs.astype(np.float64) * target, axis=ax)
    num = 2.0 * inter + eps
    den = probs.sum(axis=ax, dtype=np.float64) + target.sum(axis=ax, dtype=np.float64) + eps
    loss = 1.0 - float(np.mean(num / den))
    shape = (c,) + (1,) * (probs.ndim - 1)
    grad = -(2.0 * target * den.reshape(shape) - num.reshape(shape)) / (c * den.reshape(shape) ** 2)
    return loss, grad.astype(probs.dtype)


def backward(w: ModelWeights, cache, dprobs: np.ndarray) -> dict[str, np.ndarray]:
    """Exact gradients of the loss w.r.t. every weight, given d(loss)/d(probs)."""
    if cache is None or cache.get("weights") is not w:
        raise ParameterError("cache does not belong to these weights (stale or missing)")
    grads = {}
    ops = cache["ops"]
    kind, probs = ops[-1]
    assert kind == "softmax"
    c = probs.shape[0]
    dp = np.asarray(dprobs, dtype=probs.dtype)
    if dp.shape != probs.shape:
        raise ParameterError(f"dprobs shape {dp.shape} != probs shape {probs.shape}")
    inner = (dp * probs).sum(axis=0, keepdims=True)
    g = probs * (dp - inner)

    kind, flat, shape = ops[-2]
    assert kind == "head"
    cin = flat.shape[0]
    gflat = g.reshape(c, -1)
    grads["head_w"] = (gflat @ flat.T).reshape(c, cin, 1, 1, 1)
    grads["head_b"] = gflat.sum(axis=1)
    wk = w.arrays["head_w"].reshape(c, cin)
    g = (wk.T @ gflat).reshape(shape)

    skip_grads: dict[int, np.ndarray] = {}
    for op in reversed(ops[:-2]):
        kind = op[0]
        if kind == "conv_relu":
            _, name, cols, in_shape, out = op
            g = np.where(out > 0, g, 0)
            cout = g.shape[0]
            gflat = g.reshape(cout, -1)
            grads[name + "_w"] = (gflat @ cols).reshape(w.arrays[name + "_w"].shape)
            grads[name + "_b"] = g.sum(axis=(1, 2, 3))
            g = _conv3_input_grad(g, w.arrays[name + "_w"])
        elif kind == "dropout":
            g = g * op[1]
        elif kind == "maxpool":
            _, idx, in_shape = op
            c0, dx, dy, dz = in_shape
            dv = np.zeros((c0, dx // 2, dy // 2, dz // 2, 8), dtype=g.dtype)
            np.put_along_axis(dv, idx[..., None], g[..., None], axis=-1)
            dv = dv.reshape(c0, dx // 2, dy // 2, dz // 2, 2, 2, 2)
            g = dv.transpose(0, 1, 4, 2, 5, 3, 6).reshape(c0, dx, dy, dz)
        elif kind == "upsample":
            c0, dx, dy, dz = g.shape
            g = g.reshape(c0, dx // 2, 2, dy // 2, 2, dz // 2, 2).sum(axis=(2, 4, 6))
        elif kind == "concat":
            _, c_up, l = op
            skip_grads[l] = g[c_up:]
            g = g[:c_up]
        elif kind == "skip_store":
            g = g + skip_grads.pop(op[1])
        else:  # pragma: no cover - op list is fixed above
            raise AssertionError(f"unknown op {kind}")
    return grads


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def for_weights(cls, w: ModelWeights) -> "AdamState":
        return cls(
            m={k: np.zeros_like(a) for k, a in w.arrays.items()},
            v={k: np.zeros_like(a) for k, a in w.arrays.items()},
        )


def adam_step(w: ModelWeights, state: AdamState, grads: dict[str, np.ndarray],
              lr: float | None = None):
    """One bias-corrected Adam update, in place; returns (w, state)."""
    h = w.hyper
    lr = h.learning_rate if lr is None else float(lr)
    state.t += 1
    bc1 = 1.0 - h.beta1**state.t
    bc2 = 1.0 - h.beta2**state.t
    for name, a in w.arrays.items():
        g = grads[name]
        if g.shape != a.shape:
            raise ParameterError(f"gradient shape mismatch for {name}")
        m = state.m[name]
        v = state.v[name]
        m *= h.beta1
        m += (1.0 - h.beta1) * g
        v *= h.beta2
        v += (1.0 - h.beta2) * g * g
        a -= lr * (m / bc1) / (np.sqrt(v / bc2) + h.adam_epsilon)
    return w, state


def copy_descending_path(src: ModelWeights, dst: ModelWeights) -> ModelWeights:
    """New weights: encoder+bottleneck arrays from src, everything else from dst."""
    if src.hyper != dst.hyper:
        raise TransferError(f"hyperparams differ: {src.hyper} vs {dst.hyper}")
    arrays = {
        k: (src.arrays[k] if k in src.descending else dst.arrays[k]).copy()
        for k in dst.arrays
    }
    return ModelWeights(dst.hyper, arrays, dst.descending)


@dataclass
class SwaState:
    hyper: ModelHyperparams
    descending: frozenset[str]
    mean: dict[str, np.ndarray]
    count: int

    def to_weights(self, dtype=np.float32) -> ModelWeights:
        return ModelWeights(
            self.hyper, {k: a.astype(dtype) for k, a in self.mean.items()}, self.descending
        )


def swa_update(state: SwaState | None, snapshot: ModelWeights) -> SwaState:
    """Running arithmetic mean of weight snapshots (float64 accumulator)."""
    if state is None:
        return SwaState(
            snapshot.hyper,
            snapshot.descending,
            {k: a.astype(np.float64) for k, a in snapshot.arrays.items()},
            1,
        )
    if state.hyper != snapshot.hyper:
        raise ParameterError("snapshot hyperparams differ from running average")
    n = state.count
    for k, a in state.mean.items():
        snap = snapshot.arrays[k]
        if snap.shape != a.shape:
            raise ParameterError(f"snapshot shape mismatch for {k}")
        a *= n / (n + 1.0)
        a += snap / (n + 1.0)
    state.count = n + 1
    return state


def mc_dropout_predict(w: ModelWeights, x: np.ndarray, n_passes: int = 3,
                       seed=0) -> ProbVolume:
    """Mean of n dropout-active forward passes (the test-time uncertainty trick).

    With dropout_rate 0 this is exactly one deterministic pass.
    """
    if n_passes < 1:
        raise ParameterError("n_passes must be >= 1")
    if w.hyper.dropout_rate == 0.0:
        probs, _ = forward(w, x, keep_cache=False)
        return ProbVolume(probs.astype(np.float32))
    rng = np.random.default_rng(seed)
    acc = None
    for _ in range(n_passes):
        probs, _ = forward(w, x, rng=rng, keep_cache=False)
        acc = probs.astype(np.float64) if acc is None else acc + probs
    mean = acc / n_passes
    mean /= mean.sum(axis=0, keepdims=True)
    return ProbVolume(mean.astype(np.float32))


def save_weights(w: ModelWeights, path) -> None:
    """Container: magic, uint32 manifest length, text manifest, raw float32 payload."""
    lines = []
    for f in ModelHyperparams.__dataclass_fields__:
        lines.append(f"hyper {f} {getattr(w.hyper, f)!r}")
    payloads = []
    offset = 0
    for name, a in w.arrays.items():
        raw = np.ascontiguousarray(a, dtype="<f4").tobytes()
        shape = "x".join(map(str, a.shape))
        flag = "desc" if name in w.descending else "main"
        lines.append(f"array {name} {shape} {offset} {flag}")
        payloads.append(raw)
        offset += len(raw)
    manifest = ("\n".join(lines) + "\n").encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(manifest)))
        fh.write(manifest)
        for raw in payloads:
            fh.write(raw)


def load_weights(path) -> ModelWeights:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:8] != MAGIC:
        raise FormatError(f"{path}: bad weight-file magic")
    (mlen,) = struct.unpack_from("<I", raw, 8)
    if len(raw) < 12 + mlen:
        raise FormatError(f"{path}: truncated manifest")
    try:
        manifest = raw[12 : 12 + mlen].decode()
    except UnicodeDecodeError as e:
        raise FormatError(f"{path}: manifest is not UTF-8") from e
    payload = raw[12 + mlen :]

    hyper_fields: dict[str, float | int] = {}
    entries = []
    for line in manifest.splitlines():
        if not line.strip():
            continue
        parts = line.split()
        if parts[0] == "hyper" and len(parts) == 3:
            value = float(parts[2]) if parts[1] not in _INT_FIELDS else int(parts[2])
            hyper_fields[parts[1]] = value
        elif parts[0] == "array" and len(parts) == 5:
            shape = tuple(int(s) for s in parts[2].split("x"))
            entries.append((parts[1], shape, int(parts[3]), parts[4] == "desc"))
        else:
            raise FormatError(f"{path}: bad manifest line {line!r}")
    try:
        hyper = ModelHyperparams(**hyper_fields)
    except (TypeError, ParameterError) as e:
        raise FormatError(f"{path}: bad hyperparams in manifest: {e}") from e

    expected = {}
    for name, shape, desc in layer_plan(hyper):
        expected[name + "_w"] = shape
        expected[name + "_b"] = (shape[0],)
    arrays = {}
    descending = set()
    for name, shape, offset, desc in entries:
        if expected.get(name) != shape:
            raise FormatError(f"{path}: array {name} shape {shape} does not match manifest "
                              f"hyperparams (expect {expected.get(name)})")
        count = int(np.prod(shape))
        if offset < 0 or offset + 4 * count > len(payload):
            raise FormatError(f"{path}: truncated payload for array {name}")
        a = np.frombuffer(payload, dtype="<f4", count=count, offset=offset)
        arrays[name] = a.reshape(shape).copy()
        if desc:
            descending.add(name)
    missing = set(expected) - set(arrays)
    if missing:
        raise FormatError(f"{path}: arrays missing from manifest: {sorted(missing)}")
    for name, a in arrays.items():
        if not np.isfinite(a).all():
            raise FormatError(f"{path}: non-finite values in array {name}")
    return ModelWeights(hyper, arrays, frozenset(descending))
