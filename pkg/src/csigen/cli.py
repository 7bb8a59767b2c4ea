"""Command-line entry points wiring the toolkit into a batch workflow:
synthesize datasets, split them, train the generative model, sample it,
interpolate, and emit plot-ready evaluation reports.

Exit codes: 0 success; 2 usage or configuration error; 3 data or file
format error; 4 empty train/test split; 5 numerical abort during training.
Every command that owns an output directory writes a resolved-config copy
next to its outputs.
"""

from __future__ import annotations

import argparse
import csv
import math
import sys
from pathlib import Path

import numpy as np

from csigen import config as cfg
from csigen.core import CsiDataset, dataset_powers, power_db
from csigen.dataio import (
    DatasetFormatError,
    EmptySplitError,
    SplitSpec,
    import_hdf5,
    load_dataset,
    save_dataset,
    split_train_test,
)
from csigen.gan.train import (
    CheckpointFormatError,
    TrainingConfig,
    TrainingDivergedError,
    load_checkpoint,
    save_checkpoint,
    train,
)
from csigen.gan.sample import sample_fixed, sample_variable
from csigen.interp import OutsideHullError, TriangulationError, build_interpolant, interpolate_dataset
from csigen.metrics import (
    NoSignalError,
    array_correlation,
    dataset_delay_spreads,
    gaussian_fit_samples,
    histogram_density,
    jsd_matrix,
    pooled_edges,
    root_music_azimuth,
)
from csigen.synth import grid_positions, scenario_from_config, synth_dataset

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_EMPTY_SPLIT = 4
EXIT_DIVERGED = 5

TRAIN_CONFIG_KEYS = """generator_steps seed gp_lambda n_critic batch_size learning_rate
adam_beta1 adam_beta2 adam_eps noise_dim hidden_scale critic_hidden_scale
gp_ds_through_csi checkpoint_every""".split()


def _parse_positions(spec: str, fallback_bounds=None) -> np.ndarray:
    """Position source: ``grid:NXxNY`` (over the scenario bounds),
    ``file:<csv>`` (rows of x,y), or ``from-dataset:<csit>``."""
    if spec.startswith("grid:"):
        if fallback_bounds is None:
            raise cfg.ConfigError("grid positions need a scenario for their bounds")
        dims = spec[len("grid:") :].lower().split("x")
        if len(dims) != 2:
            raise cfg.ConfigError(f"grid spec must look like grid:50x40, got {spec!r}")
        try:
            nx, ny = int(dims[0]), int(dims[1])
        except ValueError as exc:
            raise cfg.ConfigError(f"bad grid dimensions in {spec!r}") from exc
        return grid_positions(fallback_bounds, nx, ny)
    if spec.startswith("file:"):
        path = Path(spec[len("file:") :])
        rows = []
        with open(path) as handle:
            for line in handle:
                line = line.strip()
                if not line or line.startswith("#") or line.lower().startswith("x"):
                    continue
                parts = line.replace(",", " ").split()
                rows.append([float(parts[0]), float(parts[1])])
        return np.asarray(rows)
    if spec.startswith("from-dataset:"):
        return load_dataset(spec[len("from-dataset:") :]).positions.copy()
    raise cfg.ConfigError(
        f"position spec {spec!r} must start with grid:, file: or from-dataset:"
    )


def _write_resolved_config(path: Path, entries: dict) -> None:
    path.write_text(cfg.format_config(entries))


def cmd_synth(args) -> int:
    entries = cfg.load_config(args.scenario)
    scenario = scenario_from_config(entries)
    positions = _parse_positions(args.positions, fallback_bounds=scenario.bounds)
    if args.jitter > 0.0:
        rng = np.random.default_rng(args.jitter_seed)
        positions = positions + rng.uniform(-args.jitter, args.jitter, size=positions.shape)
        (x0, y0), (x1, y1) = scenario.bounds
        positions = np.clip(positions, [x0, y0], [x1, y1])
    dataset = synth_dataset(scenario, positions)
    save_dataset(
        dataset,
        args.out,
        provenance={
            "command": "synth",
            "scenario": str(args.scenario),
            "positions": args.positions,
            "jitter": args.jitter,
            "jitter_seed": args.jitter_seed,
        },
    )
    print(f"wrote {len(dataset)} datapoints to {args.out}")
    return EXIT_OK


def cmd_split(args) -> int:
    dataset = load_dataset(args.dataset)
    spec = SplitSpec(
        hole_center=np.array([float(v) for v in args.hole_center.split(",")]),
        stride=args.stride,
        test_offset=args.test_offset,
        train_offset=args.train_offset,
        hole_diameter=args.hole_diameter,
    )
    train_set, test_set = split_train_test(dataset, spec)
    save_dataset(train_set, args.out_train, provenance={"command": "split", "role": "train"})
    save_dataset(test_set, args.out_test, provenance={"command": "split", "role": "test"})
    print(f"train: {len(train_set)} datapoints -> {args.out_train}")
    print(f"test:  {len(test_set)} datapoints -> {args.out_test}")
    if len(train_set) == 0 or len(test_set) == 0:
        print("warning: empty split output", file=sys.stderr)
        return EXIT_EMPTY_SPLIT
    return EXIT_OK


def _training_config_from_file(path: str | Path) -> TrainingConfig:
    entries = cfg.load_config(path)
    values = {}
    values["generator_steps"] = cfg.pop_int(entries, "generator_steps")
    values["seed"] = cfg.pop_int(entries, "seed", default=0)
    values["gp_lambda"] = cfg.pop_float(entries, "gp_lambda", default=10.0)
    values["n_critic"] = cfg.pop_int(entries, "n_critic", default=5)
    values["batch_size"] = cfg.pop_int(entries, "batch_size", default=64)
    values["learning_rate"] = cfg.pop_float(entries, "learning_rate", default=1e-4)
    values["adam_beta1"] = cfg.pop_float(entries, "adam_beta1", default=0.0)
    values["adam_beta2"] = cfg.pop_float(entries, "adam_beta2", default=0.9)
    values["adam_eps"] = cfg.pop_float(entries, "adam_eps", default=1e-8)
    values["noise_dim"] = cfg.pop_int(entries, "noise_dim", default=128)
    values["hidden_scale"] = cfg.pop_float(entries, "hidden_scale", default=1.0)
    critic_scale = cfg.pop_float(entries, "critic_hidden_scale", default=math.nan)
    values["critic_hidden_scale"] = None if math.isnan(critic_scale) else critic_scale
    values["gp_ds_through_csi"] = cfg.pop_bool(entries, "gp_ds_through_csi", default=True)
    values["checkpoint_every"] = cfg.pop_int(entries, "checkpoint_every", default=0)
    if entries:
        raise cfg.ConfigError(f"unknown training config keys: {sorted(entries)}")
    return TrainingConfig(**values)


def cmd_train(args) -> int:
    if not args.resume and not args.config:
        raise cfg.ConfigError("train requires --config (or --resume)")
    dataset = load_dataset(args.train)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    resume = load_checkpoint(args.resume) if args.resume else None
    config = resume.config if resume is not None else _training_config_from_file(args.config)
    resolved = dict(config.to_dict())
    resolved["resumed_from"] = args.resume or ""
    _write_resolved_config(out_dir / "resolved_config.cfg", resolved)
    result = train(dataset, config, out_dir=out_dir, resume=resume)
    save_checkpoint(result.checkpoint, out_dir / "checkpoint_final.wgck")
    log_path = out_dir / "training_log.csv"
    write_header = not (args.resume and log_path.exists())
    with open(log_path, "a" if args.resume else "w", newline="") as handle:
        writer = csv.writer(handle)
        if write_header:
            writer.writerow(["step", "critic_loss", "gen_loss", "real_score", "fake_score"])
        for row in result.log_rows:
            writer.writerow(
                [
                    row["step"],
                    repr(row["critic_loss"]),
                    repr(row["gen_loss"]),
                    repr(row["real_score"]),
                    repr(row["fake_score"]),
                ]
            )
    print(f"trained to step {result.checkpoint.step}; checkpoint in {out_dir}")
    return EXIT_OK


def cmd_generate(args) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    positions = _parse_positions(args.positions)
    if args.mode == "fixed":
        dataset = sample_fixed(checkpoint, positions, seed=args.seed)
    else:
        dataset = sample_variable(checkpoint, positions, seed=args.seed)
    save_dataset(
        dataset,
        args.out,
        provenance={
            "command": "generate",
            "mode": args.mode,
            "seed": args.seed,
            "checkpoint": str(args.checkpoint),
            "generator_step": checkpoint.step,
        },
    )
    print(f"generated {len(dataset)} datapoints ({args.mode} noise) -> {args.out}")
    return EXIT_OK


def cmd_interpolate(args) -> int:
    train_set = load_dataset(args.train)
    positions = _parse_positions(args.positions)
    fallback = "nearest-neighbor" if args.fallback == "nn" else "error"
    interpolant = build_interpolant(train_set, fallback=fallback)
    dataset, fallback_rows = interpolate_dataset(interpolant, positions)
    save_dataset(
        dataset,
        args.out,
        provenance={
            "command": "interpolate",
            "train": str(args.train),
            "fallback": args.fallback,
            "fallback_rows": [int(i) for i in fallback_rows],
        },
    )
    print(f"interpolated {len(dataset)} datapoints ({len(fallback_rows)} fallback) -> {args.out}")
    return EXIT_OK


def _dataset_label(path: str, used: set) -> str:
    base = Path(path).stem
    label = base
    counter = 2
    while label in used:
        label = f"{base}_{counter}"
        counter += 1
    used.add(label)
    return label


def _write_points_csv(path: Path, dataset: CsiDataset, power_reference: float) -> None:
    geometry = dataset.geometry
    num_arrays = geometry.num_arrays
    header = ["x1", "x2"]
    for b in range(num_arrays):
        header += [f"power_db_b{b}", f"mean_ds_ns_b{b}", f"aoa_rad_b{b}"]
    powers = dataset_powers(dataset, basis="array")
    spreads = dataset_delay_spreads(dataset)
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        for index in range(len(dataset)):
            row = [repr(float(v)) for v in dataset.positions[index]]
            for b in range(num_arrays):
                db = power_db(powers[index, b], power_reference)
                mean_ds_ns = spreads[index, b].mean() * 1e9
                try:
                    azimuth = root_music_azimuth(array_correlation(dataset.csi[index], b))
                except (NoSignalError, ValueError):
                    azimuth = math.nan
                row += [repr(float(db)), repr(float(mean_ds_ns)), repr(float(azimuth))]
            writer.writerow(row)


def cmd_evaluate(args) -> int:
    if args.bins < 2:
        raise cfg.ConfigError("need at least 2 histogram bins")
    if not args.candidates:
        raise cfg.ConfigError("need at least one candidate dataset")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    used_labels: set = set()
    named: list[tuple[str, CsiDataset]] = []
    named.append((_dataset_label(args.reference, used_labels), load_dataset(args.reference)))
    for candidate in args.candidates:
        named.append((_dataset_label(candidate, used_labels), load_dataset(candidate)))

    # 0 dB reference: maximum per-array power pooled over all datasets
    pooled_max = max(
        float(dataset_powers(ds, basis="array").max()) for _, ds in named if len(ds) > 0
    )

    ds_pools = [(label, dataset_delay_spreads(ds).ravel() * 1e9) for label, ds in named]
    if args.gaussian_baseline:
        reference_pool = ds_pools[0][1]
        gauss = gaussian_fit_samples(reference_pool, n=reference_pool.size, seed=args.seed)
        ds_pools.append(("gaussian", gauss))

    for (label, dataset) in named:
        _write_points_csv(out_dir / f"points_{label}.csv", dataset, pooled_max)

    edges = pooled_edges([pool for _, pool in ds_pools], n_bins=args.bins)
    with open(out_dir / "ds_histograms.csv", "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["bin_left_ns", "bin_right_ns"] + [label for label, _ in ds_pools])
        densities = [histogram_density(pool, edges) for _, pool in ds_pools]
        for i in range(args.bins):
            writer.writerow(
                [repr(float(edges[i])), repr(float(edges[i + 1]))]
                + [repr(float(d.probabilities[i])) for d in densities]
            )

    labels, matrix = jsd_matrix(ds_pools, n_bins=args.bins)
    with open(out_dir / "jsd_matrix.csv", "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["label"] + labels)
        for label, row in zip(labels, matrix):
            writer.writerow([label] + [f"{value:.6f}" for value in row])

    _write_resolved_config(
        out_dir / "resolved_config.cfg",
        {
            "reference": args.reference,
            "candidates": ", ".join(args.candidates),
            "bins": args.bins,
            "gaussian_baseline": args.gaussian_baseline,
            "seed": args.seed,
            "power_reference_linear": pooled_max,
        },
    )
    print(f"evaluation report ({len(ds_pools)} datasets) -> {out_dir}")
    print("JSD matrix:")
    for label, row in zip(labels, matrix):
        print(f"  {label:>12s}: " + " ".join(f"{value:.3f}" for value in row))
    return EXIT_OK


def cmd_import_hdf5(args) -> int:
    dataset = import_hdf5(args.infile, args.out, n_tap=args.n_tap)
    print(f"converted {len(dataset)} datapoints -> {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="csigen",
        description="Generative massive-MIMO channel model toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="synthesize a CSI dataset from a scenario config")
    p.add_argument("--scenario", required=True)
    p.add_argument("--positions", required=True, help="grid:NXxNY | file:<csv>")
    p.add_argument("--jitter", type=float, default=0.0, help="uniform position jitter in meters")
    p.add_argument("--jitter-seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="split a dataset into train/test")
    p.add_argument("--dataset", required=True)
    p.add_argument("--stride", type=int, default=4)
    p.add_argument("--test-offset", type=int, default=0)
    p.add_argument("--train-offset", type=int, default=2)
    p.add_argument("--hole-center", required=True, help="x,y in meters")
    p.add_argument("--hole-diameter", type=float, default=4.0)
    p.add_argument("--out-train", required=True)
    p.add_argument("--out-test", required=True)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train the generative model")
    p.add_argument("--train", required=True)
    p.add_argument("--config", help="key-value training config file")
    p.add_argument("--resume", help="checkpoint to continue from (config comes from it)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="sample the trained generator at positions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--positions", required=True, help="file:<csv> | from-dataset:<csit>")
    p.add_argument("--mode", choices=("fixed", "variable"), default="variable")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("interpolate", help="phase-aligned linear interpolation baseline")
    p.add_argument("--train", required=True)
    p.add_argument("--positions", required=True, help="file:<csv> | from-dataset:<csit>")
    p.add_argument("--fallback", choices=("nn", "error"), default="nn")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_interpolate)

    p = sub.add_parser("evaluate", help="emit power/delay-spread/angle reports and JSD matrix")
    p.add_argument("--reference", required=True)
    p.add_argument("--candidates", nargs="+", required=True)
    p.add_argument("--gaussian-baseline", action="store_true")
    p.add_argument("--bins", type=int, default=150)
    p.add_argument("--seed", type=int, default=0, help="seed for the Gaussian baseline draw")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("import-hdf5", help="convert an HDF5 channel-sounder export to CSIT")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--n-tap", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_import_hdf5)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except cfg.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetFormatError, CheckpointFormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except EmptySplitError as exc:
        print(f"empty split: {exc}", file=sys.stderr)
        return EXIT_EMPTY_SPLIT
    except TrainingDivergedError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (TriangulationError, OutsideHullError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
