"""Command-line front end: ``kalmangain {simulate,identify,landscape,consistency,check}``.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .exceptions import ConfigError, KalmanGainError, UnsupportedDimensionError
from .experiments import (ExperimentConfig, build_system, consistency, grid_versus_multistart, identify, landscape,
                          metadata, run_checks)
from .model import StateSpaceModel

logger = logging.getLogger("kalmangain")

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 1, 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON experiment configuration")
    common.add_argument("--example", choices=["one_dim", "two_state", "three_state", "custom"])
    common.add_argument("--out", type=Path, help="output directory (default: config output_dir)")
    common.add_argument("--seed", type=int)
    common.add_argument("--n", type=int, help="override the largest N of N_list")
    common.add_argument("--starts", type=int, help="number of multi-start runs")
    common.add_argument("--alpha", type=float, help="feasible-set level")
    common.add_argument("--no-plots", action="store_true", help="skip PNG figures")
    common.add_argument("-v", "--verbose", action="store_true")
    common.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)

    parser = _Parser(prog="kalmangain", description="Stability-constrained prediction-error identification of Kalman gains.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("simulate", parents=[common], help="generate a dataset and its metadata sidecar")
    p = sub.add_parser("identify", parents=[common], help="multi-start fit of a dataset")
    p.add_argument("dataset", type=Path)
    sub.add_parser("landscape", parents=[common], help="objective curves for the scalar example")
    sub.add_parser("consistency", parents=[common], help="estimation error against N")
    sub.add_parser("check", parents=[common], help="numerical property suite")
    return parser


def load_config(args) -> ExperimentConfig:
    raw = io.read_json(args.config) if args.config else {}
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be an object")
    if args.example:
        raw["example"] = args.example
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.starts is not None:
        raw["n_starts"] = args.starts
    if args.alpha is not None:
        raw["alpha"] = args.alpha
    if args.out is not None:
        raw["output_dir"] = str(args.out)
    cfg = ExperimentConfig.from_dict(raw)
    if args.n is not None:
        if args.n < 1:
            raise ConfigError("--n: must be positive")
        cfg.N_list = [N for N in cfg.N_list if N < args.n] + [args.n]
    return cfg


def _outdir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_simulate(cfg: ExperimentConfig, args) -> int:
    system = build_system(cfg)
    N = cfg.N_list[-1]
    data = system.simulate(N, cfg.seed)
    path = _outdir(cfg) / f"{cfg.example}_N{N}_seed{cfg.seed}.csv"
    io.write_dataset(path, data)
    io.write_json(io.metadata_path(path), metadata(cfg, system, N))
    print(path)
    return EXIT_OK


def cmd_identify(cfg: ExperimentConfig, args) -> int:
    data = io.read_dataset(args.dataset)
    meta_file = io.metadata_path(args.dataset)
    L_star = None
    if meta_file.exists():
        meta = io.read_json(meta_file)
        try:
            plant = StateSpaceModel(meta["A"], meta["B"], meta["C"], meta.get("x0"))
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"{meta_file}: invalid model: {exc}") from exc
        L_star = meta.get("L_star")
    else:
        plant = build_system(cfg).plant
    if data.u.shape[1] != plant.p or data.y.shape[1] != plant.q:
        raise ConfigError(f"{args.dataset}: columns do not match the model (p = {plant.p}, q = {plant.q})")
    report, ms = identify(cfg, data, plant, L_star)
    out = _outdir(cfg)
    if plant.n * plant.q == 2:
        # dense grid over the feasible region as an independent cross-check
        best, _, cell = grid_versus_multistart(cfg, data, plant)
        report["grid_argmin"] = best
        report["grid_cell"] = cell
        report["grid_match"] = bool(np.all(np.abs(best.ravel() - report["L_hat"].ravel()) <= cell))
        if not args.no_plots:
            from .plotting import plot_multistart

            plot_multistart(plant, ms, cfg.alpha, out / "identify_multistart.png", L_star)
    io.write_json(out / "identify.json", report)
    print(out / "identify.json")
    return EXIT_OK


def cmd_landscape(cfg: ExperimentConfig, args) -> int:
    res = landscape(cfg)
    out = _outdir(cfg)
    Ns = list(res.curves)
    header = ["L", "unstable"] + [f"V_N{N}" for N in Ns] + ["V_bar"]
    rows = [[res.L[i], bool(res.unstable[i])] + [float(res.curves[N][i]) for N in Ns] + [float(res.V_bar[i])]
            for i in range(len(res.L))]
    io.write_table(out / "landscape.csv", header, rows)
    io.write_table(out / "landscape_minima.csv", ["seed", "N", "n_local_minima", "argmin"],
                   [[m["seed"], m["N"], m["n_local_minima"], m["argmin"]] for m in res.minima])
    L_star = float(np.ravel(cfg.L_star)[0]) if cfg.L_star else None
    summary = {"config_hash": cfg.digest(), "seed": cfg.seed, "N_list": cfg.N_list, "n_seeds": cfg.n_seeds}
    for N in Ns:
        rows_N = [m for m in res.minima if m["N"] == N]
        single = [m for m in rows_N if m["n_local_minima"] == 1]
        near = [m for m in single if L_star is not None and abs(m["minimizers"][0] - L_star) <= 0.05]
        summary[f"N{N}"] = {"single_minimizer": len(single), "single_near_L_star": len(near), "seeds": len(rows_N)}
    io.write_json(out / "landscape.json", summary)
    if not args.no_plots:
        from .plotting import plot_landscape

        plot_landscape(res, out / "landscape.png")
    print(out / "landscape.csv")
    return EXIT_OK


def cmd_consistency(cfg: ExperimentConfig, args) -> int:
    res = consistency(cfg)
    out = _outdir(cfg)
    io.write_table(out / "consistency.csv", ["N", "seed", "error", "converged", "iterations", "value"],
                   [[r["N"], r["seed"], r["error"], r["converged"], r["iterations"], r["value"]] for r in res.rows])
    io.write_json(out / "consistency.json", {
        "config_hash": cfg.digest(), "seed": cfg.seed, "L_star": res.L_star,
        "median_error": {str(N): v for N, v in res.medians.items()}, "loglog_slope": res.slope,
    })
    if not args.no_plots:
        from .plotting import plot_consistency

        plot_consistency(res, out / "consistency.png")
    print(out / "consistency.csv")
    return EXIT_OK


def cmd_check(cfg: ExperimentConfig, args) -> int:
    props, table = run_checks(cfg, corrupt_gradient=args.corrupt_gradient)
    out = _outdir(cfg)
    io.write_json(out / "check.json", {"config_hash": cfg.digest(), "seed": cfg.seed,
                                       "all_passed": all(p["passed"] for p in props),
                                       "properties": props, "uniform_convergence": table})
    io.write_table(out / "check.csv", ["property", "passed"], [[p["property"], p["passed"]] for p in props])
    io.write_table(out / "uniform_convergence.csv", ["N", "sup_value_gap", "sup_grad_gap"],
                   [[r["N"], r["sup_value_gap"], r["sup_grad_gap"]] for r in table])
    if not args.no_plots:
        from .plotting import plot_uniform_convergence

        plot_uniform_convergence(table, out / "uniform_convergence.png")
    for p in props:
        print(f"{'PASS' if p['passed'] else 'FAIL'}  {p['property']}")
    # failing properties are report entries, not process errors
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "identify": cmd_identify, "landscape": cmd_landscape,
            "consistency": cmd_consistency, "check": cmd_check}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, UnsupportedDimensionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (KalmanGainError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
