"""Acceptance suite: nine go/no-go checks, one printed PASS/FAIL line each.

Criteria 7 and 8 share two complete desk-scale pipeline runs (serial and
4-worker) built once per session; everything else is self-contained and
fast. Tolerances are pinned in the asserts.
"""

import hashlib
import time
import warnings
from dataclasses import replace

import numpy as np
import pytest

from asmseg import FormatError, LabelMap, ProbVolume, Volume
from asmseg.fusion import VoteAccumulator, accumulate, finalize_majority
from asmseg.metrics import mean_dice
from asmseg.model import (
    ModelHyperparams,
    ModelWeights,
    backward,
    dice_loss,
    forward,
    init_model,
    load_weights,
    mc_dropout_predict,
    save_weights,
    swa_update,
)
from asmseg.nifti import read_nifti, write_nifti
from asmseg.phantom import PhantomSpec, generate_phantom
from asmseg.pipeline import (
    AssemblyConfig,
    prepare_channels,
    save_assembly,
    segment_assembly,
    train_assembly,
)
from asmseg.tiling import TileSpec, build_grid, coverage_map
from asmseg.transfer import build_dag, critical_path_length, simulate_schedule
from asmseg.volume import upsample_labels_nn


def _report(num: int, ok: bool, detail: str) -> None:
    print(f"criterion {num}: {'PASS' if ok else 'FAIL'} - {detail}")
    assert ok, f"criterion {num}: {detail}"


# --- criterion 1: tiling conformance ----------------------------------------

def test_criterion_1_tiling_conformance():
    t0 = time.perf_counter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        fine = build_grid((181, 217, 181), (64, 72, 64), 5)
        coarse = build_grid((91, 109, 91), (32, 48, 32), 5)

    def origins(grid, axis):
        return sorted({t.origin[axis] for t in grid.tiles})

    def min_overlap(grid, axis):
        o = origins(grid, axis)
        return grid.tile_size[axis] - max(b - a for a, b in zip(o, o[1:]))

    ok = origins(fine, 0) == [0, 29, 59, 88, 117]
    ok &= origins(fine, 1) == [0, 36, 73, 109, 145]
    ok &= origins(fine, 2) == [0, 29, 59, 88, 117]
    ok &= len(fine.tiles) == 125
    ok &= int(coverage_map(fine).min()) >= 1
    overlaps = tuple(min_overlap(fine, a) for a in range(3))
    ok &= overlaps == (34, 35, 34)
    coarse_ok = all(min_overlap(coarse, a) >= coarse.tile_size[a] // 2 for a in range(3))
    ok &= coarse_ok and len(coarse.tiles) == 125
    dt = time.perf_counter() - t0
    ok &= dt < 1.0
    _report(1, ok, f"fine origins/overlaps {overlaps} exact, coarse overlaps >= w/2, {dt:.2f}s")


# --- criterion 2: fusion vs brute force --------------------------------------

def _brute_fuse(dims, C, tiles, probs):
    winners = [np.argmax(p, axis=0) for p in probs]
    out = np.zeros(dims, dtype=np.uint16)
    for x in range(dims[0]):
        for y in range(dims[1]):
            for z in range(dims[2]):
                counts = [0] * C
                sums = [0.0] * C
                for t, win, p in zip(tiles, winners, probs):
                    ox, oy, oz = t.origin
                    sx, sy, sz = t.size
                    if ox <= x < ox + sx and oy <= y < oy + sy and oz <= z < oz + sz:
                        rx, ry, rz = x - ox, y - oy, z - oz
                        counts[win[rx, ry, rz]] += 1
                        for c in range(C):
                            sums[c] += float(p[c, rx, ry, rz])
                top = max(counts)
                cands = [c for c in range(C) if counts[c] == top]
                if len(cands) > 1:
                    best = max(sums[c] for c in cands)
                    cands = [c for c in cands if sums[c] == best]
                out[x, y, z] = min(cands)
    return out


def test_criterion_2_fusion_matches_brute_force():
    t0 = time.perf_counter()
    rng = np.random.default_rng(20260815)
    for trial in range(100):
        dims = tuple(int(d) for d in rng.integers(4, 13, 3))
        C = int(rng.integers(2, 5))
        tiles = [TileSpec((0, 0, 0), (0, 0, 0), dims)]  # guarantees coverage
        for n in range(int(rng.integers(0, 8))):
            size = tuple(int(s) for s in rng.integers(2, 7, 3))
            size = tuple(min(s, d) for s, d in zip(size, dims))
            origin = tuple(int(rng.integers(0, d - s + 1)) for s, d in zip(size, dims))
            tiles.append(TileSpec((n + 1, 0, 0), origin, size))
        probs = []
        for t in tiles:
            r = rng.random((C, *t.size)) + 0.05
            probs.append((r / r.sum(axis=0)).astype(np.float32))
        acc = VoteAccumulator(dims, C)
        for t, p in zip(tiles, probs):
            accumulate(acc, t, ProbVolume(p))
        engine = finalize_majority(acc)
        expect = _brute_fuse(dims, C, tiles, probs)
        assert np.array_equal(engine.data, expect), f"trial {trial} diverged"
    dt = time.perf_counter() - t0
    _report(2, dt < 10.0, f"100 randomized instances exact, {dt:.1f}s")


# --- criterion 3: full-model gradient check ----------------------------------

def test_criterion_3_gradient_check():
    t0 = time.perf_counter()
    h = ModelHyperparams(in_channels=2, num_classes=3, base_filters=2, depth=1,
                         dropout_rate=0.0)
    rng = np.random.default_rng(42)
    w = init_model(h, 42, dtype=np.float64)
    for name, arr in w.arrays.items():
        # exact-zero preactivations sit on the ReLU kink where central
        # differences are ill-defined; jittered biases avoid that measure-zero set
        if name.endswith("_b"):
            arr += rng.normal(0.0, 0.1, arr.shape)
    x = rng.normal(0.0, 1.0, (2, 8, 8, 8))
    target = np.zeros((3, 8, 8, 8))
    target[(rng.integers(0, 3, (8, 8, 8)),) + tuple(np.indices((8, 8, 8)))] = 1.0

    def loss_at():
        probs, _ = forward(w, x, keep_cache=False)
        return dice_loss(probs, target)[0]

    probs, cache = forward(w, x)
    _, dprobs = dice_loss(probs, target)
    grads = backward(w, cache, dprobs)

    names = sorted(w.arrays)
    samples = 54  # >= 50, spread over every array
    worst = 0.0
    # small enough that no ReLU flips state inside +/-delta here; float64
    # keeps roundoff noise (~eps*loss/delta) near 1e-11, well under tolerance
    delta = 1e-5
    for s in range(samples):
        name = names[s % len(names)]
        arr = w.arrays[name]
        idx = np.unravel_index(int(rng.integers(arr.size)), arr.shape)
        keep = arr[idx]
        arr[idx] = keep + delta
        hi = loss_at()
        arr[idx] = keep - delta
        lo = loss_at()
        arr[idx] = keep
        fd = (hi - lo) / (2 * delta)
        an = grads[name][idx]
        rel = abs(fd - an) / max(abs(fd), abs(an), 1e-6)
        worst = max(worst, rel)
    dt = time.perf_counter() - t0
    ok = worst < 1e-4 and dt < 60.0
    _report(3, ok, f"max relative error {worst:.2e} over {samples} weights, {dt:.1f}s")


# --- criterion 4: dice loss anchors ------------------------------------------

def test_criterion_4_dice_loss_anchors():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    labels = rng.integers(0, 3, (6, 6, 6))
    onehot = np.zeros((3, 6, 6, 6))
    onehot[(labels,) + tuple(np.indices((6, 6, 6)))] = 1.0
    perfect, _ = dice_loss(onehot, onehot)

    balanced = np.zeros((2, 4, 4, 4))
    balanced[0, :2] = 1.0
    balanced[1, 2:] = 1.0
    uniform = np.full((2, 4, 4, 4), 0.5)
    half, _ = dice_loss(uniform, balanced)

    dt = time.perf_counter() - t0
    ok = perfect <= 1e-4 and abs(half - 0.5) <= 1e-3 and dt < 1.0
    _report(4, ok, f"perfect {perfect:.2e}, uniform-vs-balanced {half:.6f}, {dt:.2f}s")


# --- criterion 5: transfer DAG and makespans ---------------------------------

def test_criterion_5_transfer_dag():
    t0 = time.perf_counter()
    ok = True
    for K in range(2, 7):
        dag = build_dag(K)
        for (i, j, k), pred in dag.predecessors.items():
            if (i, j, k) == (0, 0, 0):
                expect = None  # first model of the first column of the first plane
            elif k > 0:
                expect = (i, j, k - 1)  # previous model in its column
            elif i > 0:
                expect = (i - 1, j, 0)  # first model of previous column, same plane
            else:
                expect = (0, j - 1, 0)  # first model of previous plane
            ok &= pred == expect

    # independent longest-path recount (in-degree 1 makes it a simple walk)
    dag5 = build_dag(5)

    def depth(node):
        d = 1
        while dag5.predecessors[node] is not None:
            node = dag5.predecessors[node]
            d += 1
        return d

    brute = max(depth(n) for n in dag5.nodes)
    ok &= critical_path_length(5) == brute == 13
    serial = simulate_schedule(5, 1.0, 1).makespan
    unbounded = simulate_schedule(5, 1.0, float("inf")).makespan
    ok &= serial == 125.0 and unbounded == 13.0
    dt = time.perf_counter() - t0
    ok &= dt < 5.0
    _report(5, ok, f"predecessor rules K=2..6, critical path {brute}, "
                   f"makespans {serial:g}/{unbounded:g}, {dt:.2f}s")


# --- criterion 6: SWA recurrence and MC dropout -------------------------------

def test_criterion_6_swa_and_mc_dropout():
    t0 = time.perf_counter()
    h = ModelHyperparams(in_channels=1, num_classes=3, base_filters=2, depth=1,
                         dropout_rate=0.5)
    rng = np.random.default_rng(6)
    snaps = []
    for _ in range(21):
        w = init_model(h, int(rng.integers(1 << 31)))
        for arr in w.arrays.values():
            arr += rng.normal(0.0, 0.5, arr.shape).astype(np.float32)
        snaps.append(w)
    state = None
    for w in snaps:
        state = swa_update(state, w)
    mean_w = state.to_weights(np.float64)
    worst = 0.0
    for name in mean_w.arrays:
        direct = np.mean([s.arrays[name].astype(np.float64) for s in snaps], axis=0)
        worst = max(worst, float(np.abs(mean_w.arrays[name] - direct).max()))

    x = rng.normal(0.0, 1.0, (1, 8, 8, 8)).astype(np.float32)
    mc = mc_dropout_predict(snaps[0], x, n_passes=5, seed=66)
    simplex_err = float(np.abs(mc.data.sum(axis=0) - 1.0).max())

    det_w = ModelWeights(replace(h, dropout_rate=0.0), snaps[0].arrays, snaps[0].descending)
    det_probs, _ = forward(det_w, x, keep_cache=False)
    mc_det = mc_dropout_predict(det_w, x, n_passes=7, seed=1)
    exact = np.array_equal(mc_det.data, det_probs.astype(np.float32))

    dt = time.perf_counter() - t0
    ok = worst <= 1e-6 and simplex_err <= 1e-5 and exact and dt < 10.0
    _report(6, ok, f"SWA error {worst:.2e}, simplex error {simplex_err:.2e}, "
                   f"p=0 exact {exact}, {dt:.1f}s")


# --- criteria 7 & 8: desk-scale end-to-end runs -------------------------------

N_TRAIN, N_TEST = 20, 5
DESK_SEED = 0


def _desk_configs():
    coarse = AssemblyConfig(
        scale="coarse", num_classes=6, tile_size=(16, 16, 16), K=3,
        downsample_factor=2, base_filters=4, depth=2, dropout_rate=0.5,
        learning_rate=1e-3, epochs=30, swa_epochs=5, mixup_alpha=0.2,
        mixup_enabled=True, flip_enabled=False, use_prior=True,
        transfer_enabled=True, mc_passes=3, seed=DESK_SEED,
    )
    fine = replace(coarse, scale="fine", downsample_factor=1, tile_size=(24, 24, 24))
    noprior = replace(coarse, use_prior=False)
    return coarse, fine, noprior


def _run_pipeline(workers, root, train, test):
    coarse_cfg, fine_cfg, noprior_cfg = _desk_configs()
    t0 = time.perf_counter()
    coarse = train_assembly(train, coarse_cfg, workers=workers)
    save_assembly(coarse, root)
    fine = train_assembly(train, fine_cfg, coarse_provider=coarse, workers=workers)
    save_assembly(fine, root)
    noprior = train_assembly(train, noprior_cfg, workers=workers)
    save_assembly(noprior, root / "noprior")
    train_s = time.perf_counter() - t0

    dices = {"coarse": [], "cascade": [], "noprior": []}
    for s in test:
        cseg, _ = segment_assembly(coarse, prepare_channels(s, coarse_cfg), workers=workers)
        up = upsample_labels_nn(cseg, s.image.dims)
        write_nifti(up, root / f"seg-{s.id}-coarse.nii")
        dices["coarse"].append(mean_dice(up, s.labels, 6))
        fseg, _ = segment_assembly(fine, prepare_channels(s, fine_cfg, coarse_seg=up),
                                   workers=workers)
        write_nifti(fseg, root / f"seg-{s.id}-cascade.nii")
        dices["cascade"].append(mean_dice(fseg, s.labels, 6))
        nseg, _ = segment_assembly(noprior, prepare_channels(s, noprior_cfg),
                                   workers=workers)
        nup = upsample_labels_nn(nseg, s.image.dims)
        write_nifti(nup, root / f"seg-{s.id}-noprior.nii")
        dices["noprior"].append(mean_dice(nup, s.labels, 6))
    wall = time.perf_counter() - t0
    return {"root": root, "dice": {k: float(np.mean(v)) for k, v in dices.items()},
            "train_seconds": train_s, "wall_seconds": wall}


@pytest.fixture(scope="session")
def desk_runs(tmp_path_factory):
    spec = PhantomSpec(seed=DESK_SEED)
    train = [generate_phantom(spec, i, f"train{i:02d}") for i in range(N_TRAIN)]
    test = [generate_phantom(spec, N_TRAIN + i, f"test{i:02d}") for i in range(N_TEST)]
    base = tmp_path_factory.mktemp("desk")
    p1 = _run_pipeline(1, base / "p1", train, test)
    p4 = _run_pipeline(4, base / "p4", train, test)
    return p1, p4


def test_criterion_7_desk_scale_trends(desk_runs):
    p1, p4 = desk_runs
    d = p1["dice"]
    a = d["cascade"] >= d["coarse"] - 0.005
    b = d["coarse"] >= d["noprior"] - 0.01
    c = d["cascade"] >= 0.70
    detail = (
        f"cascade {d['cascade']:.4f} vs coarse {d['coarse']:.4f} (a={a}), "
        f"prior {d['coarse']:.4f} vs no-prior {d['noprior']:.4f} (b={b}), "
        f"floor 0.70 (c={c}); "
        f"serial train {p1['train_seconds']:.0f}s (target 1800s), "
        f"4-worker train {p4['train_seconds']:.0f}s (target 600s, "
        f"informational: this host schedules all workers on one CPU)"
    )
    _report(7, a and b and c, detail)


def _artifact_digests(root):
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != "timings.txt":  # wall times legitimately differ
            out[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


def test_criterion_8_determinism_across_workers(desk_runs):
    p1, p4 = desk_runs
    d1 = _artifact_digests(p1["root"])
    d4 = _artifact_digests(p4["root"])
    same_names = set(d1) == set(d4)
    diffs = [n for n in d1 if same_names and d1[n] != d4[n]]
    n_weights = sum(1 for n in d1 if n.endswith(".asmw"))
    n_segs = sum(1 for n in d1 if n.endswith(".nii"))
    ok = same_names and not diffs
    _report(8, ok, f"{n_weights} weight files and {n_segs} segmentations bit-identical "
                   f"between serial and 4-worker runs"
                   + ("" if ok else f"; diverged: {diffs[:5]}"))


# --- criterion 9: format round-trips ------------------------------------------

def test_criterion_9_format_roundtrips(tmp_path):
    rng = np.random.default_rng(9)
    vol = Volume(rng.normal(0, 1, (9, 7, 5)).astype(np.float32), spacing=(1.0, 1.5, 2.0))
    write_nifti(vol, tmp_path / "v.nii")
    back = read_nifti(tmp_path / "v.nii")
    vol_ok = np.array_equal(back.data, vol.data) and back.spacing == vol.spacing

    lab = LabelMap(rng.integers(0, 4, (6, 6, 6)).astype(np.uint16), 4)
    write_nifti(lab, tmp_path / "l.nii")
    lab_back = read_nifti(tmp_path / "l.nii", as_labels=True, num_classes=4)
    lab_ok = np.array_equal(lab_back.data, lab.data)

    h = ModelHyperparams(in_channels=1, num_classes=2, base_filters=2, depth=1)
    w = init_model(h, 99)
    save_weights(w, tmp_path / "w.asmw")
    w_back = load_weights(tmp_path / "w.asmw")
    w_ok = all(np.array_equal(w.arrays[k], w_back.arrays[k]) for k in w.arrays)
    w_ok &= w_back.hyper == h and w_back.descending == w.descending

    corrupt_ok = True
    for fname in ("v.nii", "w.asmw"):
        raw = bytearray((tmp_path / fname).read_bytes())
        pos = 344 if fname.endswith(".nii") else 0
        raw[pos] ^= 0xFF
        (tmp_path / ("bad-" + fname)).write_bytes(bytes(raw))
        try:
            if fname.endswith(".nii"):
                read_nifti(tmp_path / ("bad-" + fname))
            else:
                load_weights(tmp_path / ("bad-" + fname))
            corrupt_ok = False
        except FormatError:
            pass

    ok = vol_ok and lab_ok and w_ok and corrupt_ok
    _report(9, ok, f"volume {vol_ok}, labels {lab_ok}, weights {w_ok}, "
                   f"corrupted magic rejected {corrupt_ok}")
