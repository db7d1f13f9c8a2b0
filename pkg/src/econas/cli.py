"""Command line entry point: ``econas <space|estimate|search|select|measure> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import mopt
from .measure import (
    ClockModel,
    ExternalBackend,
    InferenceWindow,
    PowerProfile,
    SimBackend,
    TraceFormatError,
    measure_window,
    read_trace_csv,
    simulate_trace,
)
from .orchestrator import (
    CarbonConfig,
    Estimates,
    SearchConfig,
    StateError,
    atomic_write_text,
    candidate_ids,
    compute_estimates,
    read_front_csv,
    run_search,
)
from .proxies import PredictorCoefficients, kendall_tau, load_coefficients
from .space import FULL_SPACE, SpaceDef, decode, enumerate_ids, load_space, validate_arch

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
RUN_ROOT_ENV = "ECONAS_RUN_ROOT"
CONFIG_VERSION = 1

log = logging.getLogger("econas")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _add_space_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("search space")
    g.add_argument("--space", type=Path, help="space config JSON (defaults to the full expanded space)")
    g.add_argument("--widths", type=int, nargs="*", help="allowed stage-1 widths")
    g.add_argument("--kernel-sizes", type=int, nargs="*")
    g.add_argument("--strides", type=int, nargs="*")
    g.add_argument("--cells-per-stage", type=int)
    g.add_argument("--input-shape", type=int, nargs=3, metavar=("C", "H", "W"))


def _load_config(path: Path | None) -> dict:
    if path is None:
        return {}
    data = json.loads(Path(path).read_text())
    if data.get("version", CONFIG_VERSION) != CONFIG_VERSION:
        raise ValueError(f"unsupported config version {data.get('version')}")
    return data


def _space_from_args(args, cfg: dict) -> SpaceDef:
    if args.space is not None:
        base = load_space(args.space).to_dict()
    elif "space" in cfg:
        base = SpaceDef.from_dict(cfg["space"]).to_dict()
    else:
        base = FULL_SPACE.to_dict()
    for flag, key in (("widths", "allowed_widths"), ("kernel_sizes", "allowed_kernel_sizes"),
                      ("strides", "allowed_strides"), ("cells_per_stage", "cells_per_stage"),
                      ("input_shape", "input_shape")):
        value = getattr(args, flag)
        if value is not None:
            base[key] = value
    try:
        return SpaceDef.from_dict(base)
    except ValueError as exc:
        raise UsageError(f"invalid search space: {exc}") from exc


# ---------------------------------------------------------------------------
# space


def cmd_space(args) -> int:
    space = _space_from_args(args, _load_config(args.config))
    if args.action == "validate":
        if args.id is None:
            raise UsageError("space validate needs --id")
        a = decode(args.id, space)
        ok, reason = validate_arch(a, space)
        print(json.dumps({"arch_id": args.id, "arch": a.label(), "valid": ok, "reason": reason}))
        return EXIT_OK
    ids = enumerate_ids(space)
    summary = {"raw_count": space.raw_size, "valid_count": int(ids.size)}
    if args.action == "enumerate":
        out = args.out or Path("valid_ids.txt")
        atomic_write_text(out, "".join(f"{i}\n" for i in ids.tolist()))
        summary["index_file"] = str(out)
    print(json.dumps(summary))
    return EXIT_OK


# ---------------------------------------------------------------------------
# estimate


def _workers(args) -> int:
    return args.workers if args.workers is not None else (os.cpu_count() or 1)


def cmd_estimate(args) -> int:
    cfg = _load_config(args.config)
    space = _space_from_args(args, cfg)
    coeffs = load_coefficients(args.coefficients)
    ids = candidate_ids(space, args.max_candidates, args.seed)
    est = compute_estimates(space, coeffs, ids, args.naswot_seed, args.naswot_batch,
                            args.naswot_resolution, _workers(args))
    est.to_csv(args.out)
    summary = {"rows": len(est), "out": str(args.out),
               "singular": int(np.count_nonzero(~np.isfinite(est.naswot_raw)))}
    if args.tau:
        rng = np.random.Generator(np.random.PCG64([args.seed, 0x7A]))
        pick = rng.choice(len(est), size=min(args.tau, len(est)), replace=False)
        backend = SimBackend(space, coeffs, args.backend_seed)
        measured = [backend.measure_energy(decode(int(est.arch_ids[i]), space)).energy for i in pick]
        summary["kendall_tau"] = kendall_tau(est.e_pred[pick], measured)
        summary["tau_sample"] = int(len(pick))
    print(json.dumps(summary))
    return EXIT_OK


# ---------------------------------------------------------------------------
# search


def resolve_search_args(args, cfg: dict) -> tuple[SpaceDef, SearchConfig, CarbonConfig]:
    """Merge config-file sections and command-line flags (flags win)."""
    space = _space_from_args(args, cfg)
    search_cfg = dict(cfg.get("search", {}))
    overrides = {
        "init_count": args.init_count, "per_iter_count": args.per_iter_count,
        "max_iterations": args.max_iterations, "seed": args.seed,
        "naswot_seed": args.naswot_seed, "naswot_batch": args.naswot_batch,
        "naswot_resolution": args.naswot_resolution, "max_candidates": args.max_candidates,
    }
    search_cfg.update({k: v for k, v in overrides.items() if v is not None})
    ws = list(search_cfg.get("ws", (3.0, 1.0)))
    wd = list(search_cfg.get("wd", (1.0, 1.0)))
    for vec, idx, val in ((ws, 0, args.ws_energy), (ws, 1, args.ws_accuracy),
                          (wd, 0, args.wd_energy), (wd, 1, args.wd_accuracy)):
        if val is not None:
            vec[idx] = val
    search_cfg["ws"], search_cfg["wd"] = ws, wd
    stop = dict(search_cfg.get("stopping", {}))
    if args.min_accuracy is not None:
        stop["min_accuracy"] = args.min_accuracy
    if args.max_energy_mj is not None:
        stop["max_energy_mj"] = args.max_energy_mj
    search_cfg["stopping"] = stop
    try:
        search = SearchConfig.from_dict(search_cfg)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid search config: {exc}") from exc
    carbon_cfg = dict(cfg.get("carbon", {}))
    if args.grid_intensity is not None:
        carbon_cfg["grid_intensity"] = args.grid_intensity
    if args.training_kwh is not None:
        carbon_cfg["per_model_training_kwh"] = args.training_kwh
    carbon = CarbonConfig(**carbon_cfg)
    return space, search, carbon


def cmd_search(args) -> int:
    cfg = _load_config(args.config)
    run_dir = args.run_dir
    if run_dir is None:
        root = Path(os.environ.get(RUN_ROOT_ENV, "runs"))
        run_dir = root / f"search-seed{args.seed}"
    if args.resume:
        snap = json.loads((Path(run_dir) / "config.snapshot").read_text())
        space = SpaceDef.from_dict(snap["space"])
        search = SearchConfig.from_dict(snap["search"])
        carbon = CarbonConfig(**snap["carbon"])
        saved = json.loads((Path(run_dir) / "backend.json").read_text())
        backend_seed = saved["backend_seed"]
        coeffs = PredictorCoefficients.from_dict(saved["coefficients"])
    else:
        space, search, carbon = resolve_search_args(args, cfg)
        backend_seed = args.backend_seed
        coeffs = load_coefficients(args.coefficients)
    if args.backend == "sim":
        backend = SimBackend(space, coeffs, backend_seed)
    else:
        if not args.adapter:
            raise UsageError("--backend external needs --adapter COMMAND")
        backend = ExternalBackend(args.adapter, space)
    estimates = Estimates.from_csv(args.estimates) if args.estimates and not args.resume else None
    if not args.resume:
        Path(run_dir).mkdir(parents=True, exist_ok=True)
        atomic_write_text(Path(run_dir) / "backend.json",
                          json.dumps({"backend": args.backend, "backend_seed": backend_seed,
                                      "coefficients": coeffs.to_dict()}, indent=2))
    log.info("search: init %d, per-iter %d, ws(energy, accuracy)=%s, stop acc>%g & E<%g mJ",
             search.init_count, search.per_iter_count, search.ws,
             search.stopping.min_accuracy, search.stopping.max_energy_mj)
    report = run_search(space, backend, search, coefficients=coeffs, estimates=estimates, carbon=carbon,
                        run_dir=run_dir, resume=args.resume, stop_after=args.stop_after,
                        workers=_workers(args))
    print(json.dumps({"run_dir": str(run_dir), "status": report["status"], "iterations": report["iterations"],
                      "gd": report["gd"]["arch_id"], "ws": report["ws"]["arch_id"]}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# select


def cmd_select(args) -> int:
    if args.wd_energy is None and args.wd_accuracy is None:
        print("notice: no selection weights given, using wd_energy=1 wd_accuracy=1", file=sys.stderr)
    wd = (args.wd_energy if args.wd_energy is not None else 1.0,
          args.wd_accuracy if args.wd_accuracy is not None else 1.0)
    if min(wd) <= 0:
        raise UsageError("selection weights must be positive")
    front = read_front_csv(args.front)
    if not front:
        raise ValueError(f"{args.front}: front is empty")
    pick = mopt.best_model_gd(front, wd) if args.method == "gd" else mopt.best_model_ws(front, wd)
    print(json.dumps({"method": args.method, "wd_energy": wd[0], "wd_accuracy": wd[1], "arch_id": pick}))
    return EXIT_OK


# ---------------------------------------------------------------------------
# measure


def cmd_measure(args) -> int:
    if args.action == "gen":
        clock = ClockModel(args.offset_s, args.drift_ppm, args.jitter_ms * 1e-3)
        window = InferenceWindow(args.start_s, args.start_s + args.latency_ms * 1e-3)
        profile = PowerProfile(args.current_ma * 1e-3, args.idle_current_ma * 1e-3, args.voltage, args.noise)
        trace = simulate_trace(profile, window, clock, args.duration_s, args.rate, seed=args.seed)
        trace.to_csv(args.out)
        meta = {"t_s": window.t_s, "t_e": window.t_e, "clock": asdict(clock), "rate_hz": args.rate,
                "seed": args.seed, "true_energy_j": trace.true_energy}
        meta_path = args.window or args.out.with_suffix(".window.json")
        atomic_write_text(meta_path, json.dumps(meta, indent=2))
        print(json.dumps({"trace": str(args.out), "window": str(meta_path), "samples": len(trace),
                          "true_energy_mj": trace.true_energy * 1e3}))
        return EXIT_OK
    if args.trace is None:
        raise UsageError("measure extract needs --trace")
    meta_path = args.window or args.trace.with_suffix(".window.json")
    meta = json.loads(Path(meta_path).read_text())
    trace = read_trace_csv(args.trace, meta.get("rate_hz", args.rate))
    window = InferenceWindow(meta["t_s"], meta["t_e"])
    clock = ClockModel(**meta["clock"])
    res = measure_window(trace, window, clock, seed=meta.get("seed", 0), mode=args.mode)
    out = {"energy_mj": res.energy * 1e3, "latency_ms": res.latency * 1e3, "avg_current_a": res.avg_current,
           "avg_voltage_v": res.avg_voltage, "avg_power_w": res.avg_power, "sample_count": res.sample_count}
    if meta.get("true_energy_j"):
        out["true_energy_mj"] = meta["true_energy_j"] * 1e3
        out["relative_error"] = res.energy / meta["true_energy_j"] - 1.0
    print(json.dumps(out))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="econas", description="Energy-aware architecture search on a simulated edge device.")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--config", type=Path, help="JSON config with optional space/search/carbon sections")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sp = sub.add_parser("space", help="count, enumerate or validate the search space")
    sp.add_argument("action", choices=("count", "enumerate", "validate"))
    sp.add_argument("--id", type=int, help="arch id for validate")
    sp.add_argument("--out", type=Path, help="index file for enumerate (one id per line)")
    _add_space_args(sp)
    sp.set_defaults(func=cmd_space)

    ep = sub.add_parser("estimate", help="predicted energy and NASWOT score for every valid model")
    _add_space_args(ep)
    ep.add_argument("--coefficients", type=Path, help="energy coefficient JSON (bundled defaults if omitted)")
    ep.add_argument("--out", type=Path, default=Path("estimates.csv"))
    ep.add_argument("--seed", type=int, default=0, help="seed for candidate subsampling")
    ep.add_argument("--max-candidates", type=int)
    ep.add_argument("--naswot-seed", type=int, default=0)
    ep.add_argument("--naswot-batch", type=int, default=16)
    ep.add_argument("--naswot-resolution", type=int, default=8)
    ep.add_argument("--workers", type=int)
    ep.add_argument("--tau", type=int, metavar="N",
                    help="also print Kendall tau vs simulated measurements over N sampled models")
    ep.add_argument("--backend-seed", type=int, default=0)
    ep.set_defaults(func=cmd_estimate)

    sr = sub.add_parser("search", help="run the Pareto search loop")
    _add_space_args(sr)
    sr.add_argument("--coefficients", type=Path)
    sr.add_argument("--estimates", type=Path, help="reuse an estimates.csv instead of recomputing")
    sr.add_argument("--backend", choices=("sim", "external"), default="sim")
    sr.add_argument("--adapter", help="external adapter command (called as CMD MODEL_JSON RESULT_JSON)")
    sr.add_argument("--backend-seed", type=int, default=0)
    sr.add_argument("--run-dir", type=Path, help=f"output directory (default ${RUN_ROOT_ENV}/search-seed<seed>)")
    sr.add_argument("--resume", action="store_true", help="continue the run stored in --run-dir")
    sr.add_argument("--stop-after", type=int, help="checkpoint and stop after this many iterations")
    sr.add_argument("--init-count", type=int, default=None, help="initial models (default 100)")
    sr.add_argument("--per-iter-count", type=int, default=None, help="models per iteration (default 10)")
    sr.add_argument("--ws-energy", type=float, help="search weight for energy (default 3)")
    sr.add_argument("--ws-accuracy", type=float, help="search weight for accuracy (default 1)")
    sr.add_argument("--wd-energy", type=float, help="selection weight for energy (default 1)")
    sr.add_argument("--wd-accuracy", type=float, help="selection weight for accuracy (default 1)")
    sr.add_argument("--min-accuracy", type=float, help="stop when a front model beats this accuracy (default 0.9)")
    sr.add_argument("--max-energy-mj", type=float, help="...and uses less than this energy (default 7 mJ)")
    sr.add_argument("--max-iterations", type=int, default=None, help="default 100")
    sr.add_argument("--seed", type=int, default=0)
    sr.add_argument("--naswot-seed", type=int)
    sr.add_argument("--naswot-batch", type=int)
    sr.add_argument("--naswot-resolution", type=int)
    sr.add_argument("--max-candidates", type=int)
    sr.add_argument("--grid-intensity", type=float, help="kgCO2 per kWh (default 0.4)")
    sr.add_argument("--training-kwh", type=float, help="training energy per model in kWh (default 0)")
    sr.add_argument("--workers", type=int)
    sr.set_defaults(func=cmd_search)

    se = sub.add_parser("select", help="pick one model from a front CSV")
    se.add_argument("front", type=Path)
    se.add_argument("--method", choices=("gd", "ws"), default="gd")
    se.add_argument("--wd-energy", type=float)
    se.add_argument("--wd-accuracy", type=float)
    se.set_defaults(func=cmd_select)

    me = sub.add_parser("measure", help="generate or analyse power traces")
    me.add_argument("action", choices=("gen", "extract"))
    me.add_argument("--out", type=Path, default=Path("trace.csv"))
    me.add_argument("--trace", type=Path)
    me.add_argument("--window", type=Path, help="window sidecar JSON (default <trace>.window.json)")
    me.add_argument("--current-ma", type=float, default=100.0)
    me.add_argument("--idle-current-ma", type=float, default=0.0)
    me.add_argument("--voltage", type=float, default=1.0)
    me.add_argument("--latency-ms", type=float, default=10.0)
    me.add_argument("--start-s", type=float, default=0.05)
    me.add_argument("--duration-s", type=float, default=0.1)
    me.add_argument("--offset-s", type=float, default=0.0)
    me.add_argument("--drift-ppm", type=float, default=0.0)
    me.add_argument("--jitter-ms", type=float, default=0.0)
    me.add_argument("--noise", type=float, default=0.0, help="relative current noise std")
    me.add_argument("--rate", type=float, default=5000.0)
    me.add_argument("--seed", type=int, default=0)
    me.add_argument("--mode", choices=("average", "integrate"), default="average")
    me.set_defaults(func=cmd_measure)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"econas: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"econas: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, KeyError, OSError, TraceFormatError, StateError) as exc:
        print(f"econas: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"econas: internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
