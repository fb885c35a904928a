"""Command-line front end: synthesize data, train assemblies, segment,
evaluate, simulate schedules, and export inspection slices.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import math
import sys
import time
from pathlib import Path

from .config import RunConfig, load_run_config
from .errors import AsmsegError, ConfigurationError, PipelineError
from .metrics import mean_dice, report
from .nifti import write_nifti
from .phantom import generate_dataset, load_dataset
from .pipeline import (
    load_assembly,
    prepare_channels,
    run_cascade,
    save_assembly,
    segment_assembly,
    train_assembly,
)
from .transfer import build_dag, critical_path_length, simulate_schedule
from .volume import export_slice, upsample_labels_nn


def _load_cfg(args) -> RunConfig:
    return load_run_config(args.config, seed=args.seed, workers=args.workers)


def _dataset(cfg: RunConfig, role=None):
    subjects = load_dataset(cfg.data_dir, role=role)
    if not subjects:
        raise PipelineError(f"no {role or ''} subjects in {cfg.data_dir}".replace("  ", " "))
    return subjects


def _find_subject(cfg: RunConfig, sid: str):
    for s in load_dataset(cfg.data_dir):
        if s.id == sid:
            return s
    raise PipelineError(f"no subject {sid!r} in {cfg.data_dir}")


def _assembly_dir(cfg: RunConfig, scale: str) -> Path:
    return cfg.out_dir / f"assembly-{scale}"


def cmd_synth(args) -> int:
    cfg = _load_cfg(args)
    manifest = generate_dataset(cfg.phantom, cfg.n_train, cfg.n_test, cfg.data_dir)
    print(f"wrote {cfg.n_train} train + {cfg.n_test} test subjects; manifest {manifest}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    scales = ["coarse", "fine"] if args.scale == "both" else [args.scale]
    if "fine" in scales and cfg.fine is None:
        raise ConfigurationError("config has no 'fine' section to train")
    subjects = _dataset(cfg, role="train")
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    coarse_model = None
    for scale in scales:
        acfg = cfg.coarse if scale == "coarse" else cfg.fine
        if scale == "fine" and coarse_model is None:
            coarse_model = load_assembly(_assembly_dir(cfg, "coarse"))
        log_path = cfg.out_dir / f"train-{scale}.log"
        t0 = time.perf_counter()
        with open(log_path, "w") as fh:
            model = train_assembly(
                subjects, acfg,
                coarse_provider=coarse_model if scale == "fine" else None,
                workers=cfg.workers,
                log=lambda line: print(line, file=fh, flush=True),
            )
        out = save_assembly(model, cfg.out_dir)
        print(f"trained {scale} assembly ({len(model.weights)} nodes) "
              f"in {time.perf_counter() - t0:.1f}s -> {out}")
        if scale == "coarse":
            coarse_model = model
    return 0


def cmd_predict(args) -> int:
    cfg = _load_cfg(args)
    s = _find_subject(cfg, args.subject)
    coarse = load_assembly(_assembly_dir(cfg, "coarse"))
    t0 = time.perf_counter()
    if args.mode == "cascade":
        fine = load_assembly(_assembly_dir(cfg, "fine"))
        seg = run_cascade(coarse, fine, s, workers=cfg.workers)
    else:
        seg, _ = segment_assembly(coarse, prepare_channels(s, coarse.config),
                                  workers=cfg.workers)
        seg = upsample_labels_nn(seg, s.image.dims)
    out = Path(args.out) if args.out else cfg.out_dir / f"seg-{s.id}-{args.mode}.nii"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_nifti(seg, out)
    print(f"segmented {s.id} ({args.mode}) in {time.perf_counter() - t0:.1f}s -> {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    subjects = _dataset(cfg, role="test")
    coarse = load_assembly(_assembly_dir(cfg, "coarse"))
    fine_dir = _assembly_dir(cfg, "fine")
    fine = load_assembly(fine_dir) if cfg.cascade and fine_dir.is_dir() else None
    C = coarse.config.num_classes
    rows = []
    for s in subjects:
        rows.append(("prior", s.id, mean_dice(s.prior, s.labels, C)))
        cseg, _ = segment_assembly(coarse, prepare_channels(s, coarse.config),
                                   workers=cfg.workers)
        up = upsample_labels_nn(cseg, s.image.dims)
        rows.append(("coarse", s.id, mean_dice(up, s.labels, C)))
        if fine is not None:
            fseg = run_cascade(coarse, fine, s, workers=cfg.workers)
            rows.append(("cascade", s.id, mean_dice(fseg, s.labels, C)))
    rep = report(rows)
    print(rep.table(), end="")
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = cfg.out_dir / "report.csv"
    csv_path.write_text(rep.csv())
    print(f"wrote {csv_path}")
    return 0


def cmd_schedule(args) -> int:
    k = args.k
    if args.timings:
        durations = {}
        for line in Path(args.timings).read_text().splitlines():
            i, j, kk, dur = line.split()
            durations[(int(i), int(j), int(kk))] = float(dur)
    else:
        durations = 1.0
    workers = math.inf if args.workers == "inf" else int(args.workers)
    dag = build_dag(k)
    plan = simulate_schedule(k, durations, workers)
    print(f"nodes {len(dag.nodes)}")
    print(f"edges {dag.edges}")
    print(f"critical path {critical_path_length(k)}")
    print(f"workers {args.workers}")
    print(f"makespan {plan.makespan:g}")
    return 0


def cmd_slices(args) -> int:
    cfg = _load_cfg(args)
    s = _find_subject(cfg, args.subject)
    index = args.index if args.index is not None else s.image.dims["xyz".index(args.axis)] // 2
    out = Path(args.out) if args.out else cfg.out_dir / "slices"
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for kind, vol, ext in (("image", s.image, "pgm"), ("labels", s.labels, "ppm"),
                           ("prior", s.prior, "ppm")):
        if vol is None:
            continue
        p = out / f"{s.id}-{kind}-{args.axis}{index}.{ext}"
        export_slice(vol, args.axis, index, p)
        written.append(p.name)
    print(f"wrote {', '.join(written)} in {out}")
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="asmseg",
        description="Grids of small 3D segmentation networks with majority-vote "
                    "fusion and a coarse-to-fine cascade.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_, config=True):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=func)
        if config:
            p.add_argument("--config", required=True, help="YAML run configuration")
            p.add_argument("--seed", type=int, default=None,
                           help="override the config seed")
            p.add_argument("--workers", type=int, default=None,
                           help="override the config worker count")
        return p

    add("synth", cmd_synth, "generate the synthetic dataset described by the config")

    p = add("train", cmd_train, "train assemblies on the train split")
    p.add_argument("--scale", choices=("coarse", "fine", "both"), default="both",
                   help="which assembly to train (fine loads the saved coarse one)")

    p = add("predict", cmd_predict, "segment one subject with trained assemblies")
    p.add_argument("--subject", required=True, help="subject id from the manifest")
    p.add_argument("--mode", choices=("cascade", "coarse"), default="cascade",
                   help="full cascade or the coarse assembly alone")
    p.add_argument("--out", default=None, help="output NIfTI path")

    add("eval", cmd_eval, "score test subjects and write a Dice report")

    p = sub.add_parser("schedule", help="simulate assembly training makespan")
    p.set_defaults(func=cmd_schedule)
    p.add_argument("--k", type=int, required=True, help="grid size per axis")
    p.add_argument("--workers", default="1", help="worker count or 'inf'")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--unit-durations", action="store_true",
                       help="every node takes one time unit")
    group.add_argument("--timings", default=None,
                       help="per-node timings file ('i j k seconds' lines)")

    p = add("slices", cmd_slices, "export PGM/PPM slice images for inspection")
    p.add_argument("--subject", required=True)
    p.add_argument("--axis", choices=("x", "y", "z"), default="z")
    p.add_argument("--index", type=int, default=None, help="slice index (default: middle)")
    p.add_argument("--out", default=None, help="output directory")

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code in (0, None) else int(e.code)
    try:
        return args.func(args)
    except ConfigurationError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (AsmsegError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
