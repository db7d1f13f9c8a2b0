"""Zero-cost estimates: analytic kernel energy model and the NASWOT score."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .netexec import build_plan, forward_codes, init_weights
from .space import ArchSpec, OpKind

log = logging.getLogger(__name__)

KERNEL_KINDS = ("conv", "skip", "avgpool", "gap", "linear")
BYTES_PER_ELEMENT = 4


@dataclass(frozen=True)
class KernelDescriptor:
    kind: str
    h: int
    w: int
    cin: int
    cout: int
    ks: int
    stride: int

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if min(self.h, self.w, self.cin, self.cout, self.ks, self.stride) < 1:
            raise ValueError(f"kernel descriptor fields must be positive: {self}")

    @property
    def hout(self) -> int:
        return -(-self.h // self.stride)

    @property
    def wout(self) -> int:
        return -(-self.w // self.stride)


def kernel_flops(k: KernelDescriptor) -> int:
    """Dense FLOP count; padded taps are counted like real ones."""
    if k.kind == "conv":
        return 2 * k.hout * k.wout * k.cout * k.cin * k.ks**2
    if k.kind == "avgpool":
        return k.hout * k.wout * k.cout * k.ks**2
    if k.kind == "gap":
        return k.h * k.w * k.cin
    if k.kind == "linear":
        return 2 * k.cin * k.cout
    return 0


def kernel_bytes(k: KernelDescriptor) -> int:
    b = BYTES_PER_ELEMENT
    if k.kind == "conv":
        return b * (k.h * k.w * k.cin + k.hout * k.wout * k.cout + k.ks**2 * k.cin * k.cout)
    if k.kind in ("skip", "avgpool"):
        return b * (k.h * k.w * k.cin + k.hout * k.wout * k.cout)
    if k.kind == "gap":
        return b * (k.h * k.w * k.cin + k.cout)
    return b * (k.cin + k.cout + k.cin * k.cout)


@dataclass(frozen=True)
class OpCoefficients:
    alpha: float  # J per FLOP
    beta: float   # J per byte moved
    gamma: float  # J per kernel launch

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class PredictorCoefficients:
    ops: dict[str, OpCoefficients]

    def __post_init__(self):
        missing = [k for k in KERNEL_KINDS if k not in self.ops]
        if missing:
            raise ValueError(f"coefficients missing op kinds: {missing}")

    def __getitem__(self, kind: str) -> OpCoefficients:
        try:
            return self.ops[kind]
        except KeyError:
            raise KeyError(f"no coefficients for kernel kind {kind!r}") from None

    @classmethod
    def from_dict(cls, data: dict) -> "PredictorCoefficients":
        if data.get("version", 1) != 1:
            raise ValueError(f"unsupported coefficient file version {data.get('version')}")
        if data.get("units", "J") != "J":
            raise ValueError("coefficient units must be 'J' (SI)")
        ops = {k: OpCoefficients(float(v["alpha"]), float(v["beta"]), float(v["gamma"]))
               for k, v in data["ops"].items()}
        return cls(ops)

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "units": "J",
            "ops": {k: {"alpha": c.alpha, "beta": c.beta, "gamma": c.gamma} for k, c in self.ops.items()},
        }

    @classmethod
    def uniform(cls, alpha: float = 0.0, beta: float = 0.0, gamma: float = 0.0) -> "PredictorCoefficients":
        return cls({k: OpCoefficients(alpha, beta, gamma) for k in KERNEL_KINDS})


def load_coefficients(path: str | Path | None = None) -> PredictorCoefficients:
    """Load a coefficient file; ``None`` loads the bundled defaults."""
    if path is None:
        text = resources.files("econas.data").joinpath("default_coefficients.json").read_text()
    else:
        text = Path(path).read_text()
    return PredictorCoefficients.from_dict(json.loads(text))


def decompose_kernels(a: ArchSpec, input_shape: Sequence[int]) -> list[KernelDescriptor]:
    out = []
    for layer in build_plan(a, input_shape).layers:
        if layer.role == "edge":
            kind = {OpKind.SKIP: "skip", OpKind.AVGPOOL3X3: "avgpool"}.get(layer.op, "conv")
        elif layer.role in ("stem", "reduction"):
            kind = "conv"
        else:
            kind = layer.role
        out.append(KernelDescriptor(kind, layer.h, layer.w, layer.cin, layer.cout, layer.kernel, layer.stride))
    return out


def predict_kernel_energy(k: KernelDescriptor, c: PredictorCoefficients) -> float:
    co = c[k.kind]
    return co.alpha * kernel_flops(k) + co.beta * kernel_bytes(k) + co.gamma


def predict_model_energy(a: ArchSpec, c: PredictorCoefficients, input_shape: Sequence[int]) -> float:
    """Predicted inference energy in joules (sum over kernels)."""
    return math.fsum(predict_kernel_energy(k, c) for k in decompose_kernels(a, input_shape))


# ---------------------------------------------------------------------------
# NASWOT


@dataclass(frozen=True)
class NaswotScore:
    score: float  # ln|det K|; -inf when singular
    singular: bool
    n_units: int


def hamming_kernel(codes: np.ndarray) -> np.ndarray:
    """K[i, j] = N_A - Hamming(code_i, code_j), exact integer arithmetic."""
    c = np.asarray(codes, dtype=np.int64)
    return c @ c.T + (1 - c) @ (1 - c).T


def integer_det(k: np.ndarray) -> int:
    """Exact determinant of an integer matrix (fraction-free Bareiss elimination)."""
    m = [[int(v) for v in row] for row in np.asarray(k)]
    n = len(m)
    sign, prev = 1, 1
    for i in range(n - 1):
        if m[i][i] == 0:
            swap = next((r for r in range(i + 1, n) if m[r][i] != 0), None)
            if swap is None:
                return 0
            m[i], m[swap] = m[swap], m[i]
            sign = -sign
        piv = m[i][i]
        for r in range(i + 1, n):
            row, lead = m[r], m[r][i]
            for c in range(i + 1, n):
                row[c] = (row[c] * piv - lead * m[i][c]) // prev
        prev = piv
    return sign * m[-1][-1] if n else 1


def logdet_kernel(k: np.ndarray) -> tuple[float, bool]:
    """ln|det K| for an integer kernel, exact up to the final log.

    Float LU loses the determinant of near-duplicate rows once entries reach
    a few thousand, so the determinant is computed in integer arithmetic.
    """
    det = integer_det(k)
    if det == 0:
        return -math.inf, True
    return math.log(abs(det)), False


def naswot(a: ArchSpec, batch: np.ndarray, seed: int) -> NaswotScore:
    batch = np.asarray(batch, dtype=np.float32)
    if batch.shape[0] < 2:
        raise ValueError("NASWOT needs a batch of at least 2 samples")
    plan = build_plan(a, batch.shape[1:])
    _, codes = forward_codes(plan, init_weights(plan, seed), batch)
    score, singular = logdet_kernel(hamming_kernel(codes))
    return NaswotScore(score, singular, codes.shape[1])


# ---------------------------------------------------------------------------
# normalisation and rank statistics


def normalize_energy(values: Sequence[float]) -> np.ndarray:
    """Min-max scaling to [0, 1]; a degenerate range maps everything to 0.5."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return v
    lo, hi = v.min(), v.max()
    if hi == lo:
        log.warning("degenerate min-max range (all %d values equal %g); using 0.5", v.size, lo)
        return np.full(v.shape, 0.5)
    return (v - lo) / (hi - lo)


def normalize_score(ns: float) -> float:
    if not ns > 0:
        raise ValueError(f"log normalisation needs a positive score, got {ns}")
    return math.log(ns)


def shift_scores(scores: Sequence[float]) -> np.ndarray:
    """Map raw log-determinants to a positive domain: s - floor + 1.

    Singular scores (-inf) sit one unit below the worst finite score, so they
    shift to exactly 1 and rank below every finite score.
    """
    s = np.asarray(scores, dtype=np.float64)
    finite = s[np.isfinite(s)]
    floor = (finite.min() - 1.0) if finite.size else 0.0
    s = np.where(np.isfinite(s), s, floor)
    return s - floor + 1.0


def normalize_scores(scores: Sequence[float]) -> np.ndarray:
    return np.log(shift_scores(scores))


def kendall_tau(x: Sequence[float], y: Sequence[float]) -> float:
    """Kendall rank correlation, tau-b (reduces to tau-a without ties)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise ValueError("kendall_tau needs at least 2 observations")
    con = dis = tie_x = tie_y = 0
    # O(n^2) in chunks keeps memory flat for a few thousand points
    for i in range(x.size - 1):
        dx = np.sign(x[i + 1:] - x[i])
        dy = np.sign(y[i + 1:] - y[i])
        prod = dx * dy
        con += int(np.count_nonzero(prod > 0))
        dis += int(np.count_nonzero(prod < 0))
        tie_x += int(np.count_nonzero((dx == 0) & (dy != 0)))
        tie_y += int(np.count_nonzero((dy == 0) & (dx != 0)))
    denom = math.sqrt((con + dis + tie_x) * (con + dis + tie_y))
    if denom == 0:
        return float("nan")
    return (con - dis) / denom


def energies_for(archs: Iterable[ArchSpec], c: PredictorCoefficients, input_shape) -> np.ndarray:
    return np.array([predict_model_energy(a, c, input_shape) for a in archs])
