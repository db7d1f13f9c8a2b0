"""Search loop: estimate, seed the front, then iterate measure/update/redirect."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import mopt
from .measure import EvaluationBackend
from .mopt import ArchiveEntry, FrontPoint, GradientBundle, ParetoArchive
from .netexec import random_batch
from .proxies import (
    PredictorCoefficients,
    naswot,
    normalize_energy,
    normalize_scores,
    predict_model_energy,
)
from .space import SpaceDef, decode, embed, enumerate_ids

log = logging.getLogger(__name__)

STATE_VERSION = 1


@dataclass
class StoppingCriteria:
    min_accuracy: float = 0.9
    max_energy_mj: float = 7.0

    def __post_init__(self):
        if not 0 <= self.min_accuracy <= 1:
            raise ValueError("min_accuracy must be in [0, 1]")
        if not self.max_energy_mj > 0:
            raise ValueError("max_energy_mj must be positive")


@dataclass
class SearchConfig:
    init_count: int = 100
    per_iter_count: int = 10
    # weights are (energy, accuracy)
    ws: tuple[float, float] = (3.0, 1.0)
    wd: tuple[float, float] = (1.0, 1.0)
    stopping: StoppingCriteria = field(default_factory=StoppingCriteria)
    max_iterations: int = 100
    seed: int = 0
    naswot_seed: int = 0
    naswot_batch: int = 16
    naswot_resolution: int = 8
    max_candidates: int | None = None
    ridge: float = 1e-3
    hv_ref: tuple[float, float] = (2.0, 0.0)

    def __post_init__(self):
        if self.init_count < 1 or self.per_iter_count < 1:
            raise ValueError("init_count and per_iter_count must be >= 1")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if len(self.ws) != 2 or min(self.ws) <= 0 or len(self.wd) != 2 or min(self.wd) <= 0:
            raise ValueError("ws and wd need two positive weights (energy, accuracy)")
        if self.naswot_batch < 2:
            raise ValueError("naswot_batch must be >= 2")
        self.ws = tuple(float(v) for v in self.ws)
        self.wd = tuple(float(v) for v in self.wd)
        self.hv_ref = tuple(float(v) for v in self.hv_ref)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ws"], d["wd"], d["hv_ref"] = list(self.ws), list(self.wd), list(self.hv_ref)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "SearchConfig":
        data = dict(data)
        if "stopping" in data:
            data["stopping"] = StoppingCriteria(**data["stopping"])
        for key in ("ws", "wd", "hv_ref"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)


@dataclass
class CarbonConfig:
    grid_intensity: float = 0.4  # kgCO2 per kWh
    per_model_training_kwh: float = 0.0

    def __post_init__(self):
        if self.grid_intensity < 0 or self.per_model_training_kwh < 0:
            raise ValueError("carbon inputs must be >= 0")


# ---------------------------------------------------------------------------
# estimates


@dataclass
class Estimates:
    arch_ids: np.ndarray
    e_pred: np.ndarray      # J
    naswot_raw: np.ndarray  # ln|det K|, -inf if singular
    e_norm: np.ndarray
    n_norm: np.ndarray

    def __len__(self):
        return len(self.arch_ids)

    def to_dict(self) -> dict:
        return {
            "arch_ids": self.arch_ids.tolist(),
            "e_pred": self.e_pred.tolist(),
            "naswot_raw": [v if math.isfinite(v) else None for v in self.naswot_raw.tolist()],
        }

    @classmethod
    def from_raw(cls, arch_ids, e_pred, naswot_raw) -> "Estimates":
        e_pred = np.asarray(e_pred, dtype=np.float64)
        raw = np.asarray(naswot_raw, dtype=np.float64)
        return cls(np.asarray(arch_ids, dtype=np.int64), e_pred, raw, normalize_energy(e_pred), normalize_scores(raw))

    @classmethod
    def from_dict(cls, data: dict) -> "Estimates":
        raw = [-math.inf if v is None else v for v in data["naswot_raw"]]
        return cls.from_raw(data["arch_ids"], data["e_pred"], raw)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["arch_id", "e_pred_joules", "naswot_raw", "e_norm", "n_norm"])
            for row in zip(self.arch_ids.tolist(), self.e_pred.tolist(), self.naswot_raw.tolist(),
                           self.e_norm.tolist(), self.n_norm.tolist()):
                w.writerow([row[0]] + [repr(v) for v in row[1:]])

    @classmethod
    def from_csv(cls, path: str | Path) -> "Estimates":
        ids, e, raw = [], [], []
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            for lineno, row in enumerate(reader, start=2):
                try:
                    ids.append(int(row["arch_id"]))
                    e.append(float(row["e_pred_joules"]))
                    raw.append(float(row["naswot_raw"]))
                except (KeyError, TypeError, ValueError) as exc:
                    raise ValueError(f"{path}:{lineno}: bad estimates row: {exc}") from None
        return cls.from_raw(ids, e, raw)


def _estimate_chunk(args) -> list[tuple[float, float]]:
    space, coefficients, ids, batch, seed = args
    out = []
    for arch_id in ids:
        a = decode(int(arch_id), space)
        score = naswot(a, batch, seed)
        out.append((predict_model_energy(a, coefficients, space.input_shape), score.score))
    return out


def candidate_ids(space: SpaceDef, max_candidates: int | None, seed: int) -> np.ndarray:
    ids = enumerate_ids(space)
    if max_candidates is not None and max_candidates < ids.size:
        rng = np.random.Generator(np.random.PCG64([seed, 0xCA4D]))
        ids = np.sort(rng.choice(ids, size=max_candidates, replace=False))
    return ids


def compute_estimates(
    space: SpaceDef,
    coefficients: PredictorCoefficients,
    ids: Sequence[int],
    naswot_seed: int = 0,
    naswot_batch: int = 16,
    naswot_resolution: int = 8,
    workers: int = 1,
) -> Estimates:
    """Predicted energy and NASWOT score for every id (parallel over chunks)."""
    ids = np.asarray(ids, dtype=np.int64)
    batch = random_batch((space.input_shape[0], naswot_resolution, naswot_resolution), naswot_batch, naswot_seed)
    chunks = [ids[i:i + 64] for i in range(0, len(ids), 64)]
    jobs = [(space, coefficients, c, batch, naswot_seed) for c in chunks]
    if workers > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_estimate_chunk, jobs))
    else:
        results = [_estimate_chunk(j) for j in jobs]
    flat = [r for chunk in results for r in chunk]
    return Estimates.from_raw(ids, [r[0] for r in flat], [r[1] for r in flat])


# ---------------------------------------------------------------------------
# initial selection


def initial_select(e_norm: Sequence[float], n_norm: Sequence[float], arch_ids: Sequence[int],
                   init_count: int, rng: np.random.Generator) -> list[int]:
    """Stratified pick over a quantile grid of the (energy, score) plane.

    Cells are visited round-robin in (energy bin, score bin) order, drawing
    one uniform member per non-empty cell per round.
    """
    ids = np.asarray(arch_ids, dtype=np.int64)
    if init_count > len(ids):
        raise ValueError(f"init_count {init_count} exceeds the {len(ids)} available candidates")
    g = math.ceil(math.sqrt(init_count))
    bins = []
    for values in (np.asarray(e_norm, dtype=np.float64), np.asarray(n_norm, dtype=np.float64)):
        edges = np.quantile(values, np.linspace(0.0, 1.0, g + 1))
        bins.append(np.clip(np.searchsorted(edges[1:-1], values, side="right"), 0, g - 1))
    cells: dict[tuple[int, int], list[int]] = {}
    for idx, key in enumerate(zip(bins[0].tolist(), bins[1].tolist())):
        cells.setdefault(key, []).append(idx)
    members = [cells[k] for k in sorted(cells)]
    chosen: list[int] = []
    while len(chosen) < init_count:
        for m in members:
            if m and len(chosen) < init_count:
                chosen.append(int(ids[m.pop(int(rng.integers(len(m))))]))
    return chosen


# ---------------------------------------------------------------------------
# state


@dataclass
class MeasuredModel:
    arch_id: int
    accuracy: float
    energy_j: float
    latency_s: float
    window_energy_j: float
    iteration: int

    @property
    def energy_mj(self) -> float:
        return self.energy_j * 1e3


@dataclass
class SearchState:
    space: SpaceDef
    config: SearchConfig
    estimates: Estimates
    iteration: int = 0
    measured: dict[int, MeasuredModel] = field(default_factory=dict)
    archive: ParetoArchive = field(default_factory=ParetoArchive)
    bundle: GradientBundle | None = None
    measurement_energy_j: float = 0.0
    rng_state: dict | None = None
    history: list[dict] = field(default_factory=list)
    status: str = "running"
    _emb: np.ndarray | None = field(default=None, repr=False)

    @property
    def embeddings(self) -> np.ndarray:
        if self._emb is None:
            self._emb = np.array([embed(decode(int(i), self.space)) for i in self.estimates.arch_ids])
        return self._emb

    def energy_range(self) -> tuple[float, float]:
        return float(self.estimates.e_pred.min()), float(self.estimates.e_pred.max())

    def objective(self, m: MeasuredModel) -> tuple[float, float]:
        lo, hi = self.energy_range()
        e = 0.5 if hi == lo else (m.energy_j - lo) / (hi - lo)
        return (e, -m.accuracy)


def _rng(state: SearchState) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = state.rng_state
    return np.random.Generator(bg)


def _measure(state: SearchState, backend: EvaluationBackend, ids: Sequence[int]) -> list[ArchiveEntry]:
    entries = []
    for arch_id in ids:
        if arch_id in state.measured:
            raise RuntimeError(f"arch {arch_id} measured twice")
        a = decode(arch_id, state.space)
        try:
            res = backend.measure_energy(a)
            acc = backend.evaluate_accuracy(a)
        except Exception as exc:
            raise RuntimeError(f"backend failed on arch {arch_id}: {exc}") from exc
        m = MeasuredModel(arch_id, float(acc), res.energy, res.latency, res.window_energy, state.iteration)
        state.measured[arch_id] = m
        state.measurement_energy_j += res.window_energy
        entries.append(ArchiveEntry(arch_id, state.objective(m), mopt.MEASURED, state.iteration))
    return entries


def _refit(state: SearchState) -> None:
    index = {int(a): i for i, a in enumerate(state.estimates.arch_ids)}
    ids = sorted(state.measured)
    x = state.embeddings[[index[i] for i in ids]]
    y = np.array([state.objective(state.measured[i]) for i in ids])
    grads = mopt.fit_objective_gradients(x, y, state.config.ridge)
    if not np.any(grads):
        # flat objectives: keep a zero direction rather than failing the run
        state.bundle = GradientBundle(grads, np.full(2, 0.5), np.full(2, 0.5), np.zeros(grads.shape[1]))
    else:
        state.bundle = mopt.min_norm_direction(grads, state.config.ws)


def _front_points(state: SearchState) -> list[FrontPoint]:
    front = [state.measured[i] for i in state.archive.front]
    e = mopt.minmax([m.energy_j for m in front])
    a = mopt.minmax([m.accuracy for m in front])
    return [FrontPoint(m.arch_id, float(ei), float(ai)) for m, ei, ai in zip(front, e, a)]


def _record(state: SearchState, new_ids: Sequence[int]) -> None:
    pts = _front_points(state)
    state.history.append({
        "iteration": state.iteration,
        "new": [int(i) for i in new_ids],
        "measured": len(state.measured),
        "front": list(state.archive.front),
        "hypervolume": mopt.hypervolume2d(state.archive.front_points(), state.config.hv_ref),
        "gd": mopt.best_model_gd(pts, state.config.wd),
        "ws": mopt.best_model_ws(pts, state.config.wd),
    })


def satisfied(state: SearchState) -> bool:
    """Stopping rule, evaluated on measured front members only."""
    s = state.config.stopping
    return any(
        state.measured[i].accuracy > s.min_accuracy and state.measured[i].energy_mj < s.max_energy_mj
        for i in state.archive.front
    )


def init_state(space: SpaceDef, backend: EvaluationBackend, config: SearchConfig, estimates: Estimates) -> SearchState:
    rng = np.random.Generator(np.random.PCG64(config.seed))
    state = SearchState(space, config, estimates)
    chosen = initial_select(estimates.e_norm, estimates.n_norm, estimates.arch_ids, config.init_count, rng)
    state.rng_state = rng.bit_generator.state
    mopt.update_front(state.archive, _measure(state, backend, chosen))
    _refit(state)
    _record(state, chosen)
    return state


def run_iteration(state: SearchState, backend: EvaluationBackend, config: SearchConfig | None = None) -> SearchState:
    config = config or state.config
    if not state.archive.front:
        raise ValueError("state has no front; initialise it first")
    pool_mask = np.array([int(i) not in state.measured for i in state.estimates.arch_ids])
    if not pool_mask.any():
        raise ValueError("candidate pool exhausted")
    index = {int(a): i for i, a in enumerate(state.estimates.arch_ids)}
    front_emb = state.embeddings[[index[i] for i in state.archive.front]]
    chosen = mopt.select_candidates(
        state.estimates.arch_ids[pool_mask],
        state.embeddings[pool_mask],
        state.estimates.e_pred[pool_mask],
        front_emb,
        state.bundle,
        config.per_iter_count,
    )
    state.iteration += 1
    mopt.update_front(state.archive, _measure(state, backend, chosen))
    _refit(state)
    _record(state, chosen)
    return state


# ---------------------------------------------------------------------------
# persistence


def state_to_dict(state: SearchState) -> dict:
    return {
        "version": STATE_VERSION,
        "space": state.space.to_dict(),
        "config": state.config.to_dict(),
        "estimates": state.estimates.to_dict(),
        "iteration": state.iteration,
        "measured": [asdict(m) for m in state.measured.values()],
        "archive": [asdict(e) for e in state.archive.entries.values()],
        "front": state.archive.front,
        "bundle": state.bundle.to_dict() if state.bundle is not None else None,
        "measurement_energy_j": state.measurement_energy_j,
        "rng_state": state.rng_state,
        "history": state.history,
        "status": state.status,
    }


def state_from_dict(data: dict) -> SearchState:
    if data.get("version") != STATE_VERSION:
        raise ValueError(f"state version {data.get('version')} != supported {STATE_VERSION}")
    archive = ParetoArchive(
        {e["arch_id"]: ArchiveEntry(e["arch_id"], tuple(e["point"]), e["provenance"], e["iteration"])
         for e in data["archive"]},
        list(data["front"]),
    )
    return SearchState(
        space=SpaceDef.from_dict(data["space"]),
        config=SearchConfig.from_dict(data["config"]),
        estimates=Estimates.from_dict(data["estimates"]),
        iteration=data["iteration"],
        measured={m["arch_id"]: MeasuredModel(**m) for m in data["measured"]},
        archive=archive,
        bundle=GradientBundle.from_dict(data["bundle"]) if data["bundle"] is not None else None,
        measurement_energy_j=data["measurement_energy_j"],
        rng_state=data["rng_state"],
        history=data["history"],
        status=data["status"],
    )


def atomic_write_text(path: str | Path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def save_state(state: SearchState, path: str | Path) -> None:
    atomic_write_text(path, json.dumps(state_to_dict(state)))


class StateError(ValueError):
    pass


def load_state(path: str | Path) -> SearchState:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise StateError(f"corrupt state file {path}: {exc}") from exc
    try:
        return state_from_dict(data)
    except (KeyError, TypeError) as exc:
        raise StateError(f"state file {path} is missing fields: {exc}") from exc


# ---------------------------------------------------------------------------
# reporting


def carbon_report(state: SearchState, carbon: CarbonConfig) -> dict:
    n = len(state.measured)
    measurement_kwh = state.measurement_energy_j / 3.6e6
    training_kwh = carbon.per_model_training_kwh * n
    total_kwh = measurement_kwh + training_kwh
    carbon_kg = total_kwh * carbon.grid_intensity
    return {
        "models_measured": n,
        "measurement_energy_kwh": measurement_kwh,
        "training_energy_kwh": training_kwh,
        "total_energy_kwh": total_kwh,
        "grid_intensity_kg_per_kwh": carbon.grid_intensity,
        "carbon_kg": carbon_kg,
        "carbon_kg_per_model": carbon_kg / n if n else 0.0,
    }


def carbon_kg(energy_kwh: float, grid_intensity: float) -> float:
    return energy_kwh * grid_intensity


def _model_summary(state: SearchState, arch_id: int) -> dict:
    m = state.measured[arch_id]
    return {
        "arch_id": arch_id,
        "arch": decode(arch_id, state.space).label(),
        "accuracy": m.accuracy,
        "energy_mj": m.energy_mj,
        "latency_ms": m.latency_s * 1e3,
    }


def build_report(state: SearchState, carbon: CarbonConfig) -> dict:
    first, last = state.history[0], state.history[-1]
    return {
        "status": state.status,
        "iterations": state.iteration,
        "candidates": len(state.estimates),
        "models_measured": len(state.measured),
        "search_weights": {"energy": state.config.ws[0], "accuracy": state.config.ws[1]},
        "selection_weights": {"energy": state.config.wd[0], "accuracy": state.config.wd[1]},
        "stopping": asdict(state.config.stopping),
        "initial_gd": _model_summary(state, first["gd"]),
        "gd": _model_summary(state, last["gd"]),
        "ws": _model_summary(state, last["ws"]),
        "front": [_model_summary(state, i) for i in state.archive.front],
        "hypervolume": [h["hypervolume"] for h in state.history],
        "carbon": carbon_report(state, carbon),
    }


def write_front_csv(state: SearchState, path: str | Path) -> None:
    pts = {p.arch_id: p for p in _front_points(state)}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["arch_id", "energy_mj", "accuracy", "e_norm", "a_norm", "provenance", "iteration"])
        for arch_id in sorted(state.archive.front, key=lambda i: (state.measured[i].energy_j, i)):
            m, p = state.measured[arch_id], pts[arch_id]
            w.writerow([arch_id, repr(m.energy_mj), repr(m.accuracy), repr(p.energy), repr(p.accuracy),
                        mopt.MEASURED, m.iteration])


def read_front_csv(path: str | Path) -> list[FrontPoint]:
    out = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.DictReader(fh), start=2):
            try:
                out.append(FrontPoint(int(row["arch_id"]), float(row["e_norm"]), float(row["a_norm"])))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad front row: {exc}") from None
    return out


# ---------------------------------------------------------------------------
# driver


def _finish_status(state: SearchState) -> str | None:
    if satisfied(state):
        return "satisfied"
    if state.iteration >= state.config.max_iterations:
        return "budget-exhausted"
    if len(state.measured) >= len(state.estimates):
        return "pool-exhausted"
    return None


def run_search(
    space: SpaceDef,
    backend: EvaluationBackend,
    config: SearchConfig,
    coefficients: PredictorCoefficients | None = None,
    estimates: Estimates | None = None,
    carbon: CarbonConfig | None = None,
    run_dir: str | Path | None = None,
    resume: bool = False,
    stop_after: int | None = None,
    workers: int = 1,
) -> dict:
    """Run (or resume) a search and return the machine-readable report.

    With ``run_dir`` set, state is checkpointed after every iteration and
    per-iteration front CSVs plus ``report.json`` are written there.
    ``stop_after`` checkpoints and returns once that many loop iterations
    exist, leaving the run resumable.
    """
    carbon = carbon or CarbonConfig()
    rd = Path(run_dir) if run_dir is not None else None
    if rd is not None:
        rd.mkdir(parents=True, exist_ok=True)
    state_path = rd / "state.json" if rd else None

    if resume:
        if state_path is None or not state_path.exists():
            raise FileNotFoundError("resume needs a run directory with state.json")
        state = load_state(state_path)
        state.status = "running"
    else:
        if estimates is None:
            if coefficients is None:
                raise ValueError("need coefficients or precomputed estimates")
            ids = candidate_ids(space, config.max_candidates, config.seed)
            estimates = compute_estimates(space, coefficients, ids, config.naswot_seed, config.naswot_batch,
                                          config.naswot_resolution, workers)
        if rd is not None:
            atomic_write_text(rd / "config.snapshot", json.dumps(
                {"space": space.to_dict(), "search": config.to_dict(), "carbon": asdict(carbon)}, indent=2))
            estimates.to_csv(rd / "estimates.csv")
        state = init_state(space, backend, config, estimates)
        log.info("initial front: %d of %d measured", len(state.archive.front), len(state.measured))
        _checkpoint(state, rd)

    while True:
        status = _finish_status(state)
        if status is not None:
            state.status = status
            break
        if stop_after is not None and state.iteration >= stop_after:
            state.status = "interrupted"
            break
        run_iteration(state, backend)
        log.info("iteration %d: front %d, hv %.6f", state.iteration, len(state.archive.front),
                 state.history[-1]["hypervolume"])
        _checkpoint(state, rd)

    report = build_report(state, carbon)
    if rd is not None:
        save_state(state, state_path)
        atomic_write_text(rd / "report.json", json.dumps(report, indent=2, sort_keys=True))
    return report


def _checkpoint(state: SearchState, rd: Path | None) -> None:
    if rd is None:
        return
    write_front_csv(state, rd / f"front_iter_{state.iteration}.csv")
    save_state(state, rd / "state.json")
