#!/usr/bin/env python3
# sp2net.py
# Command-line entry point: train, scan spectra, run benchmarks, inspect models

import argparse
import json
import os
import sys
from typing import List, Optional

import numpy as np

try:
    from dotenv import load_dotenv
    load_dotenv()
except ImportError:
    pass

from bartlett import BartlettBeamformer
from bench_harness import METHODS, PRESETS, emit_results, run_experiment
from neural_net import ModelFormatError, init_model, load_model, read_model_header, save_model
from run_config import MODEL_INIT_STREAM, ConfigError, dump_config, load_config, resolve_threads
from scenario_gen import (
    Source,
    make_rng,
    read_scenarios,
    sample_scenario_set,
    snr_to_sigma,
    synthesize_snapshot,
    write_scenarios,
)
from sp2_inference import net_spectrum
from sp2_training import TrainingAborted, train
from sparse_bpdn import SparseBpdnSolver, build_manifold_matrix
from spectrum_core import AngleGrid, find_peaks, write_spectrum


# ============================================================================
# CONFIGURATION
# ============================================================================

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_RUNTIME = 3
EXIT_IO = 4


def _error(message: str) -> None:
    print(f"ERROR: {message}", file=sys.stderr, flush=True)


# ============================================================================
# SUBCOMMANDS
# ============================================================================

def cmd_train(args) -> int:
    """Train a model from a config and write the best checkpoint plus its log."""
    cfg = load_config(args.config, {
        "paths.model": args.output,
        "paths.train_log": args.log,
        "paths.checkpoint_dir": args.checkpoint_dir,
        "train.max_iterations": args.max_iterations,
        "seed": args.seed,
    })
    threads = resolve_threads(args.threads, cfg)
    geom = cfg.geometry()
    train_cfg = cfg.train_config()
    model = init_model(cfg.layer_dims(), make_rng(cfg.seed, MODEL_INIT_STREAM), cfg.skip_pairs())

    if args.verbose:
        print(f"[Trainer] layers {cfg.layer_dims()} skips {cfg.skip_pairs()} "
              f"({model.count_parameters()} parameters), {threads} threads", flush=True)

    try:
        result = train(
            model, train_cfg, cfg.target_spec(), geom,
            log_path=cfg.paths.train_log,
            checkpoint_dir=cfg.paths.checkpoint_dir,
            workers=threads,
            verbose=args.verbose,
            progress=args.progress,
        )
    except TrainingAborted as e:
        fallback = cfg.paths.model + ".aborted"
        save_model(e.best_model, fallback)
        _error(f"training aborted: {e}; last good model written to {fallback}")
        return EXIT_RUNTIME

    save_model(result.model, cfg.paths.model)
    config_path = os.path.splitext(cfg.paths.model)[0] + ".config.yaml"
    with open(config_path, "w") as f:
        f.write(dump_config(cfg))

    summary = {
        "success": True,
        "model": cfg.paths.model,
        "config": config_path,
        "train_log": cfg.paths.train_log,
        "iterations": result.iterations_run,
        "best_iteration": result.best_iteration,
        "best_val_wmse": result.best_val_wmse,
        "baseline_val_wmse": result.baseline_val_wmse,
        "stop_reason": result.stop_reason,
    }
    if args.json:
        print(json.dumps(summary, indent=2), flush=True)
    else:
        print(f"Model written to {cfg.paths.model} (best val wmse {result.best_val_wmse:.6e} "
              f"at iteration {result.best_iteration}, stopped: {result.stop_reason})")
    return EXIT_OK


def cmd_spectrum(args) -> int:
    """Compute one spectrum for a scenario from a file or given inline."""
    cfg = load_config(args.config)
    geom = cfg.geometry()
    if args.method == "sp2net" and not args.model:
        raise ConfigError("method 'sp2net' requires --model")

    if args.scenario:
        scenarios = read_scenarios(args.scenario)
        if not 0 <= args.index < len(scenarios):
            raise ConfigError(f"--index {args.index} out of range for {len(scenarios)} scenarios in {args.scenario}")
        scenario = scenarios[args.index]
        if scenario.snapshot.size != geom.num_elements:
            raise ConfigError(f"scenario has {scenario.snapshot.size} elements, array has {geom.num_elements}")
        snapshot, sigma_v = scenario.snapshot, scenario.sigma_v
        true_angles = scenario.true_angles.tolist()
        snr_db = scenario.snr_db
    else:
        if not args.angles:
            raise ConfigError("give either --scenario FILE or --angles")
        rng = make_rng(args.seed)
        sigma_v = args.sigma if args.sigma is not None else snr_to_sigma(args.snr)
        phases = rng.uniform(0.0, 2.0 * np.pi, size=len(args.angles))
        sources = [Source(theta=a, amplitude=complex(np.exp(1j * p))) for a, p in zip(args.angles, phases)]
        snapshot = synthesize_snapshot(geom, sources, sigma_v, rng)
        true_angles = sorted(args.angles)
        snr_db = args.snr

    grid = AngleGrid.uniform(args.grid_start, args.grid_stop, args.grid_step)
    if args.method == "bartlett":
        spectrum = BartlettBeamformer(geom, grid).spectrum(snapshot)
    elif args.method == "sparse":
        if sigma_v < cfg.sparse.sigma_floor:
            print(f"[SparseSolver] WARNING: sigma_v={sigma_v:g} below floor, "
                  f"using {cfg.sparse.sigma_floor:g}", file=sys.stderr, flush=True)
        solver = SparseBpdnSolver(build_manifold_matrix(geom, grid), cfg.sparse)
        spectrum = solver.spectrum(snapshot, sigma_v, grid)
    else:
        model = load_model(args.model)
        spectrum = net_spectrum(model, geom, snapshot, sigma_v, grid, workers=resolve_threads(args.threads, cfg))

    output = args.output or f"spectrum_{args.method}.txt"
    write_spectrum(spectrum, output, args.method, {
        "true_angles": true_angles,
        "snr_db": snr_db,
        "sigma_v": sigma_v,
    })
    print(f"Spectrum written to {output} ({len(grid)} angles)")
    if args.q:
        estimate = find_peaks(spectrum, args.q)
        for angle, score in zip(estimate.angles, estimate.scores):
            print(f"  peak {angle:.2f} deg  score {score:.6g}")
    return EXIT_OK


def cmd_benchmark(args) -> int:
    """Run a Monte-Carlo experiment and write its CSVs and manifest."""
    cfg = load_config(args.config, {
        "benchmark.preset": args.preset,
        "benchmark.trials_per_snr": args.trials,
        "benchmark.snr_grid": args.snr,
        "benchmark.methods": args.methods,
        "benchmark.seed": args.seed,
        "paths.output_dir": args.output_dir,
    })
    spec = cfg.experiment()
    threads = resolve_threads(args.threads, cfg)

    model = None
    if "sp2net" in spec.methods:
        model_path = args.model or cfg.paths.model
        if not args.model and not os.path.exists(model_path):
            raise ConfigError("method 'sp2net' requires a trained model (--model)")
        model = load_model(model_path)

    if args.verbose:
        print(f"[Benchmark] {spec.name}: angles {spec.true_angles}, {len(spec.snr_grid)} SNRs x "
              f"{spec.trials_per_snr} trials, methods {spec.methods}, {threads} threads", flush=True)

    result = run_experiment(
        spec, model=model, sparse_cfg=cfg.sparse, geom=cfg.geometry(),
        workers=threads, verbose=args.verbose, progress=args.progress,
    )
    written = emit_results(result, cfg.paths.output_dir)

    if args.json:
        print(json.dumps({
            "success": True,
            "experiment": spec.name,
            "files": written,
            "rmse": [vars(row) for row in result.rmse_table],
        }, indent=2), flush=True)
    else:
        print(f"Wrote {len(written)} files to {cfg.paths.output_dir}")
    return EXIT_OK


def cmd_model_info(args) -> int:
    """Print a model file's header after checking the whole file decodes."""
    header = read_model_header(args.path)
    load_model(args.path)
    if args.json:
        print(json.dumps(header, indent=2), flush=True)
        return EXIT_OK
    print(f"Model: {args.path}")
    print(f"  Format version: {header['version']}")
    print(f"  Array elements (M): {header['num_elements']}")
    print(f"  Layer dims: {header['layer_dims']}")
    print(f"  Skip pairs: {header['skip_pairs']}")
    print(f"  Parameters: {header['parameter_count']}")
    print(f"  File size: {header['file_bytes']} bytes")
    return EXIT_OK


def cmd_make_scenarios(args) -> int:
    """Write a fixed set of training-distribution scenarios as JSON lines."""
    cfg = load_config(args.config)
    count = write_scenarios(args.output, sample_scenario_set(cfg.geometry(), args.count, args.seed))
    print(f"Wrote {count} scenarios to {args.output}")
    return EXIT_OK


# ============================================================================
# ARGUMENT PARSING
# ============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sp2net.py",
        description="Single-snapshot DOA estimation with a learned spatial spectrum",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python sp2net.py train --config configs/toy_train.yaml --output runs/toy.sp2n
  python sp2net.py spectrum --method bartlett --angles 120 --snr 40 --q 1
  python sp2net.py spectrum --method sp2net --model runs/toy.sp2n --angles 100 105 --snr 25
  python sp2net.py benchmark --preset two_100_105 --methods bartlett sparse --trials 20
  python sp2net.py model-info runs/toy.sp2n
  python sp2net.py make-scenarios --count 100 --output runs/scenarios.jsonl
        """
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="Train a model",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--config", "-c", help="YAML run configuration")
    p.add_argument("--output", "-o", help="Model path (overrides paths.model)")
    p.add_argument("--log", help="Training log path (overrides paths.train_log)")
    p.add_argument("--checkpoint-dir", help="Directory for periodic checkpoints")
    p.add_argument("--max-iterations", type=int, help="Iteration cap (overrides train.max_iterations)")
    p.add_argument("--seed", type=int, help="Run seed (overrides seed)")
    p.add_argument("--threads", type=int, help="Worker threads (default: SP2NET_THREADS or CPU count)")
    p.add_argument("--verbose", "-v", action="store_true", help="Show progress lines")
    p.add_argument("--progress", action="store_true", help="Show a progress bar")
    p.add_argument("--json", action="store_true", help="Output the summary as JSON")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("spectrum", help="Compute one spatial spectrum",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--method", "-m", required=True, choices=METHODS, help="Estimator")
    p.add_argument("--config", "-c", help="YAML run configuration (array and sparse settings)")
    p.add_argument("--scenario", help="JSON-lines scenario file")
    p.add_argument("--index", type=int, default=0, help="Scenario index within --scenario")
    p.add_argument("--angles", type=float, nargs="+", help="Inline source directions in degrees")
    p.add_argument("--snr", type=float, default=25.0, help="Inline SNR in dB")
    p.add_argument("--sigma", type=float, help="Inline noise std (overrides --snr)")
    p.add_argument("--seed", type=int, default=0, help="Seed for inline phases and noise")
    p.add_argument("--grid-start", type=float, default=45.0, help="First scan angle")
    p.add_argument("--grid-stop", type=float, default=135.0, help="Last scan angle")
    p.add_argument("--grid-step", type=float, default=0.01, help="Scan step in degrees")
    p.add_argument("--model", help="Model file (required for sp2net)")
    p.add_argument("--q", type=int, help="Print this many highest peaks")
    p.add_argument("--output", "-o", help="Spectrum file (default: spectrum_<method>.txt)")
    p.add_argument("--threads", type=int, help="Worker threads for sp2net scans")
    p.set_defaults(handler=cmd_spectrum)

    p = sub.add_parser("benchmark", help="Run a Monte-Carlo RMSE experiment",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--config", "-c", help="YAML run configuration")
    p.add_argument("--preset", help=f"Built-in experiment: {', '.join(PRESETS)}")
    p.add_argument("--model", help="Model file (required for sp2net)")
    p.add_argument("--output-dir", "-o", help="Results directory (overrides paths.output_dir)")
    p.add_argument("--trials", type=int, help="Trials per SNR")
    p.add_argument("--snr", type=float, nargs="+", help="SNR grid in dB")
    p.add_argument("--methods", nargs="+", help=f"Subset of: {', '.join(METHODS)}")
    p.add_argument("--seed", type=int, help="Experiment seed")
    p.add_argument("--threads", type=int, help="Worker threads (default: SP2NET_THREADS or CPU count)")
    p.add_argument("--verbose", "-v", action="store_true", help="Print RMSE per SNR")
    p.add_argument("--progress", action="store_true", help="Show a progress bar")
    p.add_argument("--json", action="store_true", help="Output the summary as JSON")
    p.set_defaults(handler=cmd_benchmark)

    p = sub.add_parser("model-info", help="Print a model file header")
    p.add_argument("path", help="Model file")
    p.add_argument("--json", action="store_true", help="Output as JSON")
    p.set_defaults(handler=cmd_model_info)

    p = sub.add_parser("make-scenarios", help="Write a fixed scenario set as JSON lines",
                       formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    p.add_argument("--count", type=int, default=100, help="Number of scenarios")
    p.add_argument("--seed", type=int, default=0, help="Scenario seed")
    p.add_argument("--config", "-c", help="YAML run configuration (array size)")
    p.add_argument("--output", "-o", required=True, help="Destination .jsonl file")
    p.set_defaults(handler=cmd_make_scenarios)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, run the subcommand, map failures to exit codes."""
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except ConfigError as e:
        _error(str(e))
        return EXIT_USAGE
    except ModelFormatError as e:
        _error(f"bad model file: {e}")
        return EXIT_IO
    except OSError as e:
        _error(str(e))
        return EXIT_IO
    except (FloatingPointError, RuntimeError) as e:
        _error(str(e))
        return EXIT_RUNTIME
    except ValueError as e:
        _error(str(e))
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
