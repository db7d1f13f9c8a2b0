"""Simulated on-device energy measurement.

The device runs inference and stamps start/stop times on its own clock; an
external power monitor samples current and voltage at a fixed rate on a
second clock that is offset and drifts relative to the first. Start and
stop trigger events travel from device to monitor with a small random
latency, and gate which monitor samples are kept.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import shlex
import subprocess
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Protocol, Sequence

import numpy as np

from .netexec import build_plan, param_count
from .proxies import PredictorCoefficients, predict_model_energy
from .space import ArchSpec, ModelConfig, OpKind, SpaceDef, encode

log = logging.getLogger(__name__)

DEFAULT_RATE_HZ = 5000.0
# event latency is drawn from a normal truncated at this many std devs
JITTER_CLIP = 4.0


class PowerSample(NamedTuple):
    t_m: float
    current: float
    voltage: float


@dataclass(frozen=True)
class ClockModel:
    offset: float = 0.0
    drift_ppm: float = 0.0
    jitter_std: float = 0.0

    def __post_init__(self):
        if abs(self.drift_ppm) > 1000:
            raise ValueError("|drift_ppm| must be <= 1000")
        if self.jitter_std < 0:
            raise ValueError("jitter_std must be >= 0")

    def to_monitor(self, t_dev):
        return self.offset + np.asarray(t_dev) * (1.0 + self.drift_ppm * 1e-6)

    def to_device(self, t_mon):
        return (np.asarray(t_mon) - self.offset) / (1.0 + self.drift_ppm * 1e-6)


@dataclass(frozen=True)
class InferenceWindow:
    t_s: float
    t_e: float

    def __post_init__(self):
        if self.t_e < self.t_s:
            raise ValueError(f"stop event ({self.t_e}) precedes start event ({self.t_s})")

    @property
    def latency(self) -> float:
        return self.t_e - self.t_s


@dataclass(frozen=True)
class PowerProfile:
    active_current: float  # A
    idle_current: float    # A
    voltage: float         # V
    noise_std: float = 0.0  # relative to each sample's level

    @property
    def active_power(self) -> float:
        return self.active_current * self.voltage


@dataclass
class PowerTrace:
    t: np.ndarray
    current: np.ndarray
    voltage: np.ndarray
    rate_hz: float = DEFAULT_RATE_HZ
    true_energy: float | None = None  # ground truth for the active window, J

    def __len__(self):
        return len(self.t)

    def __getitem__(self, i) -> PowerSample:
        return PowerSample(float(self.t[i]), float(self.current[i]), float(self.voltage[i]))

    def slice(self, mask_or_slice) -> "PowerTrace":
        return PowerTrace(self.t[mask_or_slice], self.current[mask_or_slice], self.voltage[mask_or_slice], self.rate_hz)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t_s", "current_a", "voltage_v"])
            for t, i, v in zip(self.t.tolist(), self.current.tolist(), self.voltage.tolist()):
                w.writerow([repr(t), repr(i), repr(v)])


class TraceFormatError(ValueError):
    pass


def read_trace_csv(path: str | Path, rate_hz: float = DEFAULT_RATE_HZ) -> PowerTrace:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["t_s", "current_a", "voltage_v"]:
            raise TraceFormatError(f"{path}:1: expected header 't_s,current_a,voltage_v', got {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise TraceFormatError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            try:
                t, i, v = (float(x) for x in row)
            except ValueError:
                raise TraceFormatError(f"{path}:{lineno}: non-numeric field in {row}") from None
            if i < 0 or v < 0:
                raise TraceFormatError(f"{path}:{lineno}: negative current or voltage")
            if rows and t <= rows[-1][0]:
                raise TraceFormatError(f"{path}:{lineno}: timestamps must be strictly increasing")
            rows.append((t, i, v))
    if not rows:
        raise TraceFormatError(f"{path}: no samples")
    arr = np.array(rows)
    return PowerTrace(arr[:, 0], arr[:, 1], arr[:, 2], rate_hz)


def simulate_trace(
    profile: PowerProfile,
    window: InferenceWindow,
    clock: ClockModel,
    duration: float,
    rate_hz: float = DEFAULT_RATE_HZ,
    seed: int = 0,
    start: float = 0.0,
) -> PowerTrace:
    """Monitor samples over monitor time ``[start, start + duration)``.

    A sample is active when its instant, mapped back to device time, falls in
    ``[t_s, t_e)``. ``true_energy`` is active power times device latency.
    """
    if duration <= 0:
        raise ValueError("duration must be positive")
    n = int(math.floor(duration * rate_hz))
    t = start + np.arange(n) / rate_hz
    t_dev = clock.to_device(t)
    active = (t_dev >= window.t_s) & (t_dev < window.t_e)
    level = np.where(active, profile.active_current, profile.idle_current)
    current = level.copy()
    if profile.noise_std > 0:
        rng = np.random.Generator(np.random.PCG64(seed))
        current = np.maximum(level + rng.standard_normal(n) * profile.noise_std * level, 0.0)
    voltage = np.full(n, profile.voltage)
    return PowerTrace(t, current, voltage, rate_hz, profile.active_power * window.latency)


@dataclass
class Capture:
    trace: PowerTrace
    start_event: float  # monitor time the start trigger arrived
    stop_event: float
    lo: float           # captured span in monitor time
    hi: float


def trigger_events(window: InferenceWindow, clock: ClockModel, seed: int = 0) -> tuple[float, float]:
    """Monitor arrival times of the start/stop triggers, with event jitter."""
    rng = np.random.Generator(np.random.PCG64(seed))
    j = np.clip(rng.standard_normal(2), -JITTER_CLIP, JITTER_CLIP) * clock.jitter_std
    t0, t1 = clock.to_monitor([window.t_s, window.t_e])
    return float(t0 + j[0]), float(t1 + j[1])


def trigger_capture(trace: PowerTrace, window: InferenceWindow, clock: ClockModel, seed: int = 0) -> Capture:
    """Samples gated by the start/stop trigger events.

    The gate is widened on both sides by the worst-case event latency plus one
    sample period (the monitor keeps a short pre-trigger buffer), so the
    captured samples always span the whole inference.
    """
    if window.t_e <= window.t_s:
        raise ValueError("stop event must come after start event")
    start_evt, stop_evt = trigger_events(window, clock, seed)
    guard = JITTER_CLIP * clock.jitter_std + 1.0 / trace.rate_hz
    lo, hi = start_evt - guard, stop_evt + guard
    true_lo, true_hi = clock.to_monitor([window.t_s, window.t_e])
    if true_lo < trace.t[0] or true_hi > trace.t[-1]:
        raise ValueError("inference window lies outside the trace")
    mask = (trace.t >= lo) & (trace.t <= hi)
    return Capture(trace.slice(mask), start_evt, stop_evt, float(lo), float(hi))


def naive_slice(trace: PowerTrace, window: InferenceWindow) -> PowerTrace:
    """Slice by device timestamps as if both clocks agreed (no triggers)."""
    return trace.slice((trace.t >= window.t_s) & (trace.t <= window.t_e))


def select_inference_samples(capture: Capture, latency: float) -> PowerTrace:
    """Samples inside the inference: from the first active sample over ``latency``.

    Active samples are told apart from idle ones by a threshold halfway
    between the capture's floor and the median level between the two events.
    """
    tr = capture.trace
    if len(tr) == 0:
        return tr
    between = (tr.t >= capture.start_event) & (tr.t <= capture.stop_event)
    peak = float(np.median(tr.current[between])) if between.any() else float(tr.current.max())
    floor = float(tr.current.min())
    threshold = 0.5 * (floor + peak)
    above = tr.current >= threshold
    if floor == peak or not above.any():
        above = np.ones(len(tr), dtype=bool)
    t_first = tr.t[np.argmax(above)]
    keep = above & (tr.t >= t_first) & (tr.t < t_first + latency)
    return tr.slice(keep)


@dataclass(frozen=True)
class MeasurementResult:
    avg_current: float
    avg_voltage: float
    avg_power: float
    energy: float
    latency: float
    sample_count: int
    repeats: int = 1  # inferences inside the measured window

    @property
    def window_energy(self) -> float:
        return self.energy * self.repeats


def extract_energy(samples: PowerTrace | Sequence[PowerSample], latency: float, mode: str = "average") -> MeasurementResult:
    """Energy over ``latency`` from the selected samples.

    ``mode="average"`` multiplies mean current, mean voltage and latency.
    ``mode="integrate"`` uses the mean of per-sample power instead.
    """
    if isinstance(samples, PowerTrace):
        cur, volt = samples.current, samples.voltage
    else:
        arr = np.array([(s.current, s.voltage) for s in samples], dtype=np.float64).reshape(-1, 2)
        cur, volt = arr[:, 0], arr[:, 1]
    if len(cur) == 0:
        raise ValueError("no samples selected")
    if not latency > 0:
        raise ValueError("latency must be positive")
    n = len(cur)
    # fsum keeps constant traces exact
    i_avg, v_avg = math.fsum(cur) / n, math.fsum(volt) / n
    if mode == "average":
        power = i_avg * v_avg
    elif mode == "integrate":
        power = math.fsum(np.asarray(cur) * np.asarray(volt)) / n
    else:
        raise ValueError(f"unknown energy mode {mode!r}")
    return MeasurementResult(i_avg, v_avg, power, power * latency, latency, len(cur))


def measure_window(
    trace: PowerTrace, window: InferenceWindow, clock: ClockModel, seed: int = 0, mode: str = "average"
) -> MeasurementResult:
    """Trigger capture, sample selection and energy extraction in one go."""
    cap = trigger_capture(trace, window, clock, seed)
    return extract_energy(select_inference_samples(cap, window.latency), window.latency, mode)


# ---------------------------------------------------------------------------
# accuracy stand-in


def max_param_count(space: SpaceDef) -> int:
    """Parameter count of the largest model in ``space`` (all edges KxK conv)."""
    widest = ArchSpec(
        (OpKind.CONVKXK,) * 6,
        ModelConfig(max(space.allowed_widths), max(space.allowed_kernel_sizes), min(space.allowed_strides)),
        space.cells_per_stage,
    )
    return param_count(build_plan(widest, space.input_shape))


def arch_seed(a: ArchSpec, seed: int) -> list[int]:
    """Per-architecture entropy, keyed by the full-space id so it is space independent."""
    return [int(seed), encode(a), a.cells_per_stage]


def sim_accuracy(
    a: ArchSpec,
    seed: int,
    space: SpaceDef,
    a_max: float = 0.95,
    beta: float = 3.0,
    noise_std: float = 0.01,
    max_params: int | None = None,
) -> float:
    """Synthetic validation accuracy, saturating in log parameter count."""
    pmax = max_param_count(space) if max_params is None else max_params
    params = param_count(build_plan(a, space.input_shape))
    cap = math.log1p(params) / math.log1p(pmax)
    rng = np.random.Generator(np.random.PCG64(arch_seed(a, seed) + [1]))
    acc = a_max * (1.0 - math.exp(-beta * cap)) + noise_std * float(rng.standard_normal())
    return min(1.0, max(0.0, acc))


# ---------------------------------------------------------------------------
# backends


class EvaluationBackend(Protocol):
    def measure_energy(self, a: ArchSpec) -> MeasurementResult: ...

    def evaluate_accuracy(self, a: ArchSpec) -> float: ...


class BackendError(RuntimeError):
    pass


@dataclass
class SimBackendConfig:
    active_power_w: float = 2.0
    idle_power_w: float = 0.6
    voltage_v: float = 4.0
    rate_hz: float = DEFAULT_RATE_HZ
    noise_std: float = 0.0
    offset_s: float = 0.35
    drift_ppm: float = 50.0
    jitter_std_s: float = 2e-4
    min_window_s: float = 0.2
    lead_s: float = 0.02
    session_s: float = 30.0  # window start is spread over this much device time
    energy_mode: str = "average"
    perturb_lo: float = 0.8
    perturb_hi: float = 1.25
    accuracy_a_max: float = 0.95
    accuracy_beta: float = 3.0
    accuracy_noise: float = 0.01

    @property
    def clock(self) -> ClockModel:
        return ClockModel(self.offset_s, self.drift_ppm, self.jitter_std_s)


class SimBackend:
    """Simulated device + power monitor.

    True per-inference energy is the predicted energy times a per-arch factor
    in ``[perturb_lo, perturb_hi)``; the value reported is what the capture
    pipeline recovers from a simulated trace of repeated inferences.
    """

    def __init__(self, space: SpaceDef, coefficients: PredictorCoefficients, seed: int = 0,
                 config: SimBackendConfig | None = None):
        self.space = space
        self.coefficients = coefficients
        self.seed = int(seed)
        self.config = config or SimBackendConfig()
        self._max_params = max_param_count(space)

    def perturbation(self, a: ArchSpec) -> float:
        c = self.config
        u = np.random.Generator(np.random.PCG64(arch_seed(a, self.seed) + [2])).random()
        return math.exp(math.log(c.perturb_lo) + u * (math.log(c.perturb_hi) - math.log(c.perturb_lo)))

    def true_energy(self, a: ArchSpec) -> float:
        return predict_model_energy(a, self.coefficients, self.space.input_shape) * self.perturbation(a)

    def measure_energy(self, a: ArchSpec) -> MeasurementResult:
        c = self.config
        e_true = self.true_energy(a)
        lat1 = e_true / c.active_power_w
        repeats = max(1, math.ceil(c.min_window_s / lat1))
        rng = np.random.Generator(np.random.PCG64(arch_seed(a, self.seed) + [3]))
        t_s = c.lead_s + float(rng.random()) * c.session_s
        window = InferenceWindow(t_s, t_s + repeats * lat1)
        clock = c.clock
        profile = PowerProfile(c.active_power_w / c.voltage_v, c.idle_power_w / c.voltage_v, c.voltage_v, c.noise_std)
        t0 = float(clock.to_monitor(window.t_s)) - c.lead_s
        span = window.latency * (1.0 + abs(c.drift_ppm) * 1e-6) + 2 * c.lead_s
        trace = simulate_trace(profile, window, clock, span, c.rate_hz, seed=int(rng.integers(2**63)), start=t0)
        res = measure_window(trace, window, clock, seed=int(rng.integers(2**63)), mode=c.energy_mode)
        return MeasurementResult(res.avg_current, res.avg_voltage, res.avg_power, res.energy / repeats,
                                 res.latency / repeats, res.sample_count, repeats)

    def evaluate_accuracy(self, a: ArchSpec) -> float:
        c = self.config
        return sim_accuracy(a, self.seed, self.space, c.accuracy_a_max, c.accuracy_beta,
                            c.accuracy_noise, self._max_params)


@dataclass
class ExternalBackend:
    """Bridge to a real device through an external command.

    The command is run as ``<command> <model_path> <output_path>``. The model
    file is JSON describing the architecture; the command must write a JSON
    result with ``energy_j``, ``latency_s``, ``avg_current_a``,
    ``avg_voltage_v`` and, optionally, ``accuracy`` and ``sample_count``.
    """

    command: str
    space: SpaceDef
    timeout_s: float = 3600.0
    _cache: dict = field(default_factory=dict, repr=False)

    def _run(self, a: ArchSpec) -> dict:
        key = encode(a)
        if key in self._cache:
            return self._cache[key]
        with tempfile.TemporaryDirectory() as tmp:
            model_path = Path(tmp) / "model.json"
            out_path = Path(tmp) / "result.json"
            model_path.write_text(json.dumps(arch_to_json(a, self.space)))
            cmd = shlex.split(self.command) + [str(model_path), str(out_path)]
            proc = subprocess.run(cmd, capture_output=True, text=True, timeout=self.timeout_s)
            if proc.returncode != 0:
                raise BackendError(f"adapter exited {proc.returncode} for arch {key}: {proc.stderr.strip()}")
            try:
                data = json.loads(out_path.read_text())
            except (OSError, json.JSONDecodeError) as exc:
                raise BackendError(f"adapter wrote no readable result for arch {key}: {exc}") from exc
        missing = {"energy_j", "latency_s", "avg_current_a", "avg_voltage_v"} - set(data)
        if missing:
            raise BackendError(f"adapter result for arch {key} lacks {sorted(missing)}")
        self._cache[key] = data
        return data

    def measure_energy(self, a: ArchSpec) -> MeasurementResult:
        d = self._run(a)
        i, v, lat = float(d["avg_current_a"]), float(d["avg_voltage_v"]), float(d["latency_s"])
        return MeasurementResult(i, v, i * v, float(d["energy_j"]), lat, int(d.get("sample_count", 1)))

    def evaluate_accuracy(self, a: ArchSpec) -> float:
        d = self._run(a)
        if "accuracy" not in d:
            raise BackendError(f"adapter result for arch {encode(a)} has no accuracy")
        return float(d["accuracy"])


def arch_to_json(a: ArchSpec, space: SpaceDef) -> dict:
    c = a.config
    return {
        "arch_id": encode(a, space),
        "ops": [op.name for op in a.ops],
        "width_c1": c.width_c1,
        "kernel_size": c.kernel_size,
        "stride": c.stride,
        "cells_per_stage": a.cells_per_stage,
        "input_shape": list(space.input_shape),
    }


def measurement_to_dict(m: MeasurementResult) -> dict:
    return asdict(m)
