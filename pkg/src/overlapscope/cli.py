"""``overlapscope`` command-line entry point.

Exit codes: 0 success, 1 domain failure (design violations, oracle tolerance,
training failure), 2 usage or parse error. Errors print one line to stderr:
``error: <kind>: <message>``.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from .detector import ArchitectureSpec, TrainConfig, build_model, load_weights, save_weights, train, write_history_csv
from .errors import InvalidArgument, LoadError, TrainingFailure
from .evalkit import roc_curve, sliding_heatmap, write_heatmap, write_roc_csv, write_sweep_csv
from .noise import poisson_oracle
from .optics import SensorModel, load_design, validate_design
from .phantom import (
    DatasetManifest,
    PhantomSpec,
    TargetSpec,
    compose_overlap_dataset,
    generate_phantom,
    load_external,
    phantom_singles,
    split_by_group,
    write_annotations_csv,
)
from .pipeline import SweepSettings, overlapped_scene, run_sweep
from .pnm import read_pnm, write_pnm

EXIT_OK, EXIT_DOMAIN, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _float_list(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def write_run_json(out_dir, args) -> Path:
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    doc = {"tool": "overlapscope", "version": __version__, "subcommand": args.command, "config": cfg}
    path = Path(out_dir) / "run.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _sensor(args) -> SensorModel:
    return SensorModel(n_bit=args.n_bit, v=args.well_depth)


# ------------------------------------------------------------------ commands


def cmd_design(args) -> int:
    try:
        design, sensor = load_design(args.config)
    except json.JSONDecodeError as exc:
        raise UsageError(f"malformed design JSON: {exc}") from exc
    except (TypeError, InvalidArgument) as exc:
        raise UsageError(str(exc)) from exc
    except FileNotFoundError as exc:
        raise UsageError(f"missing design file: {args.config}") from exc
    report = validate_design(design, sensor, wavelength_um=args.wavelength_um)
    _emit(report.to_dict())
    if args.out_dir:
        write_run_json(args.out_dir, args)
    return EXIT_OK if report.ok else EXIT_DOMAIN


def _phantom_spec(args) -> PhantomSpec:
    return PhantomSpec(frame_size=args.frame_size, targets=TargetSpec(count=args.targets), n_bit=args.n_bit)


def cmd_phantom(args) -> int:
    out = Path(args.out_dir)
    spec = _phantom_spec(args)
    rows = []
    for i in range(args.frames):
        frame, anns = generate_phantom(spec, [args.seed, i])
        fid = f"frame{i:04d}"
        write_pnm(out / "frames" / f"{fid}.pgm", frame)
        rows.extend((fid, a) for a in anns)
    write_annotations_csv(out / "annotations.csv", rows)
    write_run_json(out, args)
    return EXIT_OK


def _singles(args):
    if args.singles:
        return load_external(args.singles)
    return phantom_singles(
        _phantom_spec(args), args.frames, args.patch_size, args.inner_fraction, args.stride, seed=args.seed
    )


def cmd_overlap(args) -> int:
    out = Path(args.out_dir)
    sensor = _sensor(args)
    singles = _singles(args)
    fractions = tuple(args.fractions)
    splits = split_by_group(singles, fractions, args.seed)
    counts = {"train": args.count_per_class, "val": args.val_count_per_class, "test": args.val_count_per_class}
    summary = {}
    for k, m in enumerate(splits):
        if not len(m):
            continue
        comp = compose_overlap_dataset(m.patches, args.n, counts[m.split], sensor, args.seed * 10 + k)
        DatasetManifest(comp, m.split, args.patch_size, args.inner_fraction, args.seed).save(out)
        summary[m.split] = len(comp)
    write_run_json(out, args)
    _emit({"n": args.n, "patches": summary})
    return EXIT_OK


def cmd_oracle(args) -> int:
    results, ok = [], True
    for n in args.n_list:
        for lam in args.lambda_list:
            stats = poisson_oracle([lam / n] * n, _sensor(args), args.trials, [args.seed, n, int(lam * 1000)])
            passed = stats.within(args.mean_rtol, args.var_rtol)
            ok &= passed
            results.append({**stats.to_dict(), "pass": passed})
    _emit({"cells": results, "pass": ok})
    if args.out_dir:
        write_run_json(args.out_dir, args)
    return EXIT_OK if ok else EXIT_DOMAIN


def cmd_train(args) -> int:
    out = Path(args.out_dir)
    tr = load_external(args.train)
    va = load_external(args.val)
    size = tr[0].pixels.height
    arch = ArchitectureSpec(input_size=size, input_channels=tr[0].pixels.channels, channels=tuple(args.channels))
    cfg = TrainConfig(
        optimizer=args.optimizer, learning_rate=args.lr, batch_size=args.batch_size, epochs=args.epochs, seed=args.seed
    )
    model, hist = train(build_model(arch, args.seed), tr, va, cfg)
    save_weights(out / "weights.bin", model, extra={"train_seed": args.seed})
    write_history_csv(out / "history.csv", hist)
    write_run_json(out, args)
    return EXIT_OK


def _settings(args) -> SweepSettings:
    return SweepSettings(
        n_values=tuple(args.n_list),
        frames=args.frames,
        frame_size=args.frame_size,
        targets_per_frame=args.targets,
        patch_size=args.patch_size,
        inner_fraction=args.inner_fraction,
        stride=args.stride,
        train_per_class=args.count_per_class,
        val_per_class=args.val_count_per_class,
        channels=tuple(args.channels),
        epochs=args.epochs,
        lr=args.lr,
        batch_size=args.batch_size,
        optimizer=args.optimizer,
        ensemble=args.ensemble,
        n_bit=args.n_bit,
        well_depth=args.well_depth,
        seed=args.seed,
    )


def cmd_sweep(args) -> int:
    out = Path(args.out_dir)
    s = _settings(args)
    log = (lambda m: print(m, file=sys.stderr)) if args.verbose else None
    result = run_sweep(s, log=log)
    write_sweep_csv(out / "sweep.csv", result.rows)
    if args.save_models:
        for n, models in result.models.items():
            for k, m in enumerate(models):
                save_weights(out / "models" / f"n{n}_m{k}.bin", m)
            for k, h in enumerate(result.histories[n]):
                write_history_csv(out / "models" / f"n{n}_m{k}_history.csv", h)
    write_run_json(out, args)
    return EXIT_OK


def cmd_heatmap(args) -> int:
    out = Path(args.out_dir)
    models = [load_weights(p) for p in args.weights]
    window = models[0].arch.input_size
    if args.frame:
        frame = read_pnm(args.frame)
    else:
        s = SweepSettings(
            frame_size=args.frame_size, targets_per_frame=args.targets, n_bit=args.n_bit, well_depth=args.well_depth
        )
        frame, anns = overlapped_scene(s, args.n, args.seed)
        write_pnm(out / "frame.pgm", frame)
        write_annotations_csv(out / "annotations.csv", [("frame", a) for a in anns])
    hm = sliding_heatmap(models, frame, window, args.step)
    write_heatmap(out / "heatmap.pgm", hm, extra={"weights": [str(p) for p in args.weights]})
    if args.save_npy:
        np.save(out / "heatmap.npy", hm.grid)
    write_run_json(out, args)
    return EXIT_OK


def cmd_replay(args) -> int:
    doc = json.loads(Path(args.run_json).read_text())
    cfg = dict(doc["config"])
    if args.out_dir:
        cfg["out_dir"] = args.out_dir
    ns = argparse.Namespace(**cfg)
    ns.func = COMMANDS[doc["subcommand"]]
    return ns.func(ns)


COMMANDS = {
    "design": cmd_design,
    "phantom": cmd_phantom,
    "overlap": cmd_overlap,
    "oracle": cmd_oracle,
    "train": cmd_train,
    "sweep": cmd_sweep,
    "heatmap": cmd_heatmap,
}


# -------------------------------------------------------------------- parser


def _add_sensor(p):
    p.add_argument("--n-bit", type=int, default=8, help="sensor bit depth (bits; 8, 10, 12 or 16)")
    p.add_argument("--well-depth", type=float, default=10_000.0, help="pixel well depth v (photoelectrons)")


def _add_phantom(p):
    p.add_argument("--frames", type=int, default=100, help="phantom frames to generate, one specimen group each (count)")
    p.add_argument("--frame-size", type=int, default=512, help="phantom frame side (pixels)")
    p.add_argument("--targets", type=int, default=10, help="targets per phantom frame (count)")


def _add_patches(p, patch_default=48):
    p.add_argument("--patch-size", type=int, default=patch_default, help="patch side (pixels)")
    p.add_argument("--inner-fraction", type=float, default=1 / 3, help="positive-region side as a fraction of the patch side (ratio)")
    p.add_argument("--stride", type=int, default=None, help="patch grid stride (pixels; default inner-region side)")


def _add_training(p):
    p.add_argument("--epochs", type=int, default=8, help="training epochs (count)")
    p.add_argument("--lr", type=float, default=1e-3, help="learning rate (dimensionless)")
    p.add_argument("--batch-size", type=int, default=32, help="minibatch size (examples)")
    p.add_argument("--optimizer", choices=("adam", "sgd-momentum"), default="adam", help="optimizer")
    p.add_argument("--channels", type=_int_list, default=[8, 16, 32, 32, 64], help="per-block channel widths (comma-separated counts)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="overlapscope", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"overlapscope {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("design", help="validate a lens-array design JSON and print the report")
    p.add_argument("config", help="JSON file with design and sensor fields")
    p.add_argument("--wavelength-um", type=float, default=0.55, help="illumination wavelength for the resolution check (um)")
    p.add_argument("--out-dir", default=None, help="directory for run.json (optional)")
    p.set_defaults(func=cmd_design)

    p = sub.add_parser("phantom", help="generate phantom frames and an annotation CSV")
    p.add_argument("--out-dir", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0, help="master RNG seed (integer)")
    _add_phantom(p)
    p.add_argument("--n-bit", type=int, default=8, help="frame bit depth (bits)")
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("overlap", help="compose an n-fold overlapped patch dataset with manifests")
    p.add_argument("--out-dir", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0, help="master RNG seed (integer)")
    p.add_argument("--n", type=int, required=True, help="overlap number (lenses)")
    p.add_argument("--singles", default=None, help="external single-FOV manifest JSON (default: generate phantoms)")
    p.add_argument("--count-per-class", type=int, default=600, help="training examples per class (count)")
    p.add_argument("--val-count-per-class", type=int, default=300, help="validation/test examples per class (count)")
    p.add_argument("--fractions", type=float, nargs=3, default=[0.7, 0.3, 0.0], metavar=("TRAIN", "VAL", "TEST"),
                   help="group fractions per split (ratios summing to 1)")
    _add_phantom(p)
    _add_patches(p)
    _add_sensor(p)
    p.set_defaults(func=cmd_overlap)

    p = sub.add_parser("oracle", help="Monte Carlo check of the compensation-noise model")
    p.add_argument("--n-list", type=_int_list, default=[2, 4, 7], help="overlap numbers (comma-separated counts)")
    p.add_argument("--lambda-list", type=_float_list, default=[50.0, 200.0, 1000.0],
                   help="total photon rates Lambda, split evenly over the n FOVs (photoelectrons)")
    p.add_argument("--trials", type=int, default=10**6, help="Monte Carlo trials per cell (count)")
    p.add_argument("--mean-rtol", type=float, default=0.01, help="relative tolerance on the mean (ratio)")
    p.add_argument("--var-rtol", type=float, default=0.02, help="relative tolerance on the variance (ratio)")
    p.add_argument("--seed", type=int, default=0, help="RNG seed (integer)")
    p.add_argument("--out-dir", default=None, help="directory for run.json (optional)")
    _add_sensor(p)
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("train", help="train one detector from dataset manifests")
    p.add_argument("--train", required=True, help="training manifest JSON")
    p.add_argument("--val", required=True, help="validation manifest JSON")
    p.add_argument("--out-dir", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0, help="init and shuffling seed (integer)")
    _add_training(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="accuracy-vs-n sweep with seed ensembles on phantom data")
    p.add_argument("--out-dir", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0, help="master RNG seed (integer)")
    p.add_argument("--n-list", type=_int_list, default=[1, 2, 4, 7], help="overlap numbers (comma-separated counts)")
    p.add_argument("--ensemble", type=int, default=3, help="independently seeded models per n (count)")
    p.add_argument("--count-per-class", type=int, default=600, help="training examples per class (count)")
    p.add_argument("--val-count-per-class", type=int, default=300, help="validation examples per class (count)")
    p.add_argument("--save-models", action="store_true", help="also write every member's weights and history")
    p.add_argument("--verbose", action="store_true", help="log progress to stderr")
    _add_phantom(p)
    _add_patches(p)
    _add_sensor(p)
    _add_training(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("heatmap", help="sliding-window probability map from one or more weight files")
    p.add_argument("--weights", nargs="+", required=True, help="weight files; several are averaged as an ensemble")
    p.add_argument("--frame", default=None, help="input PGM/PPM (default: synthesize an overlapped phantom scene)")
    p.add_argument("--out-dir", required=True, help="output directory")
    p.add_argument("--n", type=int, default=4, help="overlap number of the synthesized scene (lenses)")
    p.add_argument("--seed", type=int, default=0, help="scene seed (integer)")
    p.add_argument("--step", type=int, default=10, help="window step (pixels)")
    p.add_argument("--save-npy", action="store_true", help="also store the raw probability grid as .npy")
    p.add_argument("--frame-size", type=int, default=512, help="synthesized frame side (pixels)")
    p.add_argument("--targets", type=int, default=10, help="targets per synthesized phantom (count)")
    _add_sensor(p)
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("replay", help="rerun a command from its run.json")
    p.add_argument("run_json", help="run.json written by an earlier run")
    p.add_argument("--out-dir", default=None, help="override the output directory")
    p.set_defaults(func=cmd_replay)
    return parser


def _thread_limit():
    value = os.environ.get("OVERLAPSCOPE_THREADS")
    if not value:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(value)))


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        with _thread_limit():
            return args.func(args)
    except UsageError as exc:
        print(f"error: usage: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InvalidArgument, LoadError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingFailure as exc:
        print(f"error: TrainingFailure: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
