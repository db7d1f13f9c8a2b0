"""Tiny deterministic forward-only network engine.

Runs one forward pass of a randomly initialised architecture and records
the sign pattern of every ReLU unit. Tensors are plain ``float32`` numpy
arrays in NCHW layout; every kernel accumulates in ``float64`` and stores
back to ``float32``.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .rng import derive_seed, uniform_fill
from .space import EDGES, ArchSpec, OpKind

NUM_CLASSES = 10
STEM_KERNEL = 3
REDUCTION_KERNEL = 3


class NonFiniteError(FloatingPointError):
    def __init__(self, layer: str):
        super().__init__(f"non-finite values produced by layer {layer!r}")
        self.layer = layer


@dataclass(frozen=True)
class LayerSpec:
    """One step of a :class:`NetworkPlan`.

    ``role`` is one of ``stem``, ``edge``, ``reduction``, ``gap``, ``linear``.
    For edges, ``src``/``dst`` are cell-node indices and ``cell`` the global
    cell index; ``op`` is the edge op. ``h``/``w`` are input spatial sizes.
    """

    name: str
    role: str
    op: OpKind | None
    cin: int
    cout: int
    kernel: int
    stride: int
    padding: int
    h: int
    w: int
    cell: int = -1
    src: int = -1
    dst: int = -1

    @property
    def hout(self) -> int:
        return -(-self.h // self.stride)

    @property
    def wout(self) -> int:
        return -(-self.w // self.stride)

    @property
    def is_conv(self) -> bool:
        return self.role in ("stem", "reduction") or self.op in (OpKind.CONV1X1, OpKind.CONVKXK)

    @property
    def has_relu(self) -> bool:
        return self.is_conv


@dataclass(frozen=True)
class NetworkPlan:
    layers: tuple[LayerSpec, ...]
    input_shape: tuple[int, int, int]

    def __len__(self):
        return len(self.layers)


def build_plan(a: ArchSpec, input_shape: Sequence[int]) -> NetworkPlan:
    cin, h, w = (int(v) for v in input_shape)
    cfg = a.config
    widths = cfg.stage_widths
    layers: list[LayerSpec] = []

    def add(**kw):
        spec = LayerSpec(**kw)
        if spec.hout < 1 or spec.wout < 1:
            raise ValueError(f"layer {spec.name} collapses spatial size below 1x1")
        layers.append(spec)
        return spec

    stem = add(name="stem", role="stem", op=None, cin=cin, cout=widths[0], kernel=STEM_KERNEL,
               stride=cfg.stride, padding=STEM_KERNEL // 2, h=h, w=w)
    h, w = stem.hout, stem.wout
    cell = 0
    for stage, c in enumerate(widths):
        if stage > 0:
            red = add(name=f"reduction{stage}", role="reduction", op=None, cin=widths[stage - 1],
                      cout=c, kernel=REDUCTION_KERNEL, stride=2, padding=REDUCTION_KERNEL // 2,
                      h=h, w=w)
            h, w = red.hout, red.wout
        for _ in range(a.cells_per_stage):
            for (src, dst), op in zip(EDGES, a.ops):
                if op == OpKind.NONE:
                    continue
                k = {OpKind.CONVKXK: cfg.kernel_size, OpKind.AVGPOOL3X3: 3}.get(op, 1)
                add(name=f"cell{cell}.e{src}{dst}.{op.name.lower()}", role="edge", op=op,
                    cin=c, cout=c, kernel=k, stride=1, padding=k // 2, h=h, w=w,
                    cell=cell, src=src, dst=dst)
            cell += 1
    add(name="gap", role="gap", op=None, cin=widths[-1], cout=widths[-1], kernel=1, stride=1,
        padding=0, h=h, w=w)
    add(name="linear", role="linear", op=None, cin=widths[-1], cout=NUM_CLASSES, kernel=1,
        stride=1, padding=0, h=1, w=1)
    return NetworkPlan(tuple(layers), (int(input_shape[0]), int(input_shape[1]), int(input_shape[2])))


def output_shapes(plan: NetworkPlan) -> list[tuple[int, int, int]]:
    """(C, H, W) produced by each layer."""
    out = []
    for layer in plan.layers:
        if layer.role == "gap":
            out.append((layer.cout, 1, 1))
        elif layer.role == "linear":
            out.append((layer.cout, 1, 1))
        else:
            out.append((layer.cout, layer.hout, layer.wout))
    return out


def param_count(plan: NetworkPlan) -> int:
    total = 0
    for layer in plan.layers:
        if layer.is_conv:
            total += layer.cin * layer.cout * layer.kernel**2 + layer.cout
        elif layer.role == "linear":
            total += layer.cin * layer.cout + layer.cout
    return total


# ---------------------------------------------------------------------------
# weights


@dataclass
class WeightSet:
    """Per-layer (weight, bias) arrays keyed by layer name."""

    params: dict[str, tuple[np.ndarray, np.ndarray]]

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.params):
            wgt, bias = self.params[name]
            h.update(name.encode())
            h.update(wgt.tobytes())
            h.update(bias.tobytes())
        return h.hexdigest()


def init_weights(plan: NetworkPlan, seed: int) -> WeightSet:
    """He-uniform init: U(-b, b) with b = sqrt(6 / fan_in), zero bias.

    Each layer draws from its own xoshiro256** stream keyed by (seed, index).
    """
    params = {}
    for idx, layer in enumerate(plan.layers):
        if layer.is_conv:
            shape = (layer.cout, layer.cin, layer.kernel, layer.kernel)
            fan_in = layer.cin * layer.kernel**2
        elif layer.role == "linear":
            shape = (layer.cout, layer.cin)
            fan_in = layer.cin
        else:
            continue
        bound = math.sqrt(6.0 / fan_in)
        u = uniform_fill(derive_seed(seed, idx), math.prod(shape))
        wgt = ((2.0 * u - 1.0) * bound).astype(np.float32).reshape(shape)
        params[layer.name] = (wgt, np.zeros(layer.cout, dtype=np.float32))
    return WeightSet(params)


# ---------------------------------------------------------------------------
# primitive kernels


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None, stride: int = 1) -> np.ndarray:
    """Zero-padded "same" convolution (odd kernels), output ceil(H/stride)."""
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ValueError(f"conv2d channel mismatch: input {cin}, weight {wcin}")
    if kh != kw or kh % 2 == 0:
        raise ValueError("conv2d supports square odd kernels only")
    pad = kh // 2
    hout, wout = -(-h // stride), -(-w // stride)
    xp = np.zeros((n, cin, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    xp[:, :, pad:pad + h, pad:pad + w] = x
    cols = np.empty((n, hout, wout, cin, kh, kw), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, :, i, j] = xp[:, :, i:i + stride * hout:stride, j:j + stride * wout:stride].transpose(0, 2, 3, 1)
    out = cols.reshape(n * hout * wout, cin * kh * kw) @ weight.reshape(cout, -1).astype(np.float64).T
    if bias is not None:
        out += bias.astype(np.float64)
    return out.reshape(n, hout, wout, cout).transpose(0, 3, 1, 2).astype(np.float32)


def avgpool3x3(x: np.ndarray) -> np.ndarray:
    """3x3, stride 1, averaging over in-bounds elements only."""
    n, c, h, w = x.shape
    xp = np.zeros((n, c, h + 2, w + 2), dtype=np.float64)
    xp[:, :, 1:-1, 1:-1] = x
    ones = np.zeros((h + 2, w + 2))
    ones[1:-1, 1:-1] = 1.0
    acc = np.zeros((n, c, h, w), dtype=np.float64)
    cnt = np.zeros((h, w))
    for i in range(3):
        for j in range(3):
            acc += xp[:, :, i:i + h, j:j + w]
            cnt += ones[i:i + h, j:j + w]
    return (acc / cnt).astype(np.float32)


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    return x.astype(np.float64).mean(axis=(2, 3), keepdims=True).astype(np.float32)


def linear(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    flat = x.reshape(x.shape[0], -1).astype(np.float64)
    if flat.shape[1] != weight.shape[1]:
        raise ValueError(f"linear expects {weight.shape[1]} features, got {flat.shape[1]}")
    out = flat @ weight.astype(np.float64).T
    if bias is not None:
        out += bias.astype(np.float64)
    return out.astype(np.float32)


# ---------------------------------------------------------------------------
# forward


def forward_codes(plan: NetworkPlan, weights: WeightSet, batch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """One forward pass.

    Returns ``(logits, codes)``: logits has shape (N, 10, 1, 1); codes is a
    boolean (N, N_A) array with one column per ReLU unit, in plan order.
    """
    batch = np.asarray(batch, dtype=np.float32)
    if batch.ndim != 4 or batch.shape[1:] != plan.input_shape:
        raise ValueError(f"batch shape {batch.shape} does not match plan input {plan.input_shape}")
    n = batch.shape[0]
    bits: list[np.ndarray] = []
    x = batch
    nodes: list[np.ndarray | None] = []
    current_cell = -1

    def relu(pre: np.ndarray) -> np.ndarray:
        bits.append((pre > 0).reshape(n, -1))
        return np.maximum(pre, 0)

    for layer in plan.layers:
        if layer.role == "edge":
            if layer.cell != current_cell:
                if current_cell >= 0:
                    x = _cell_output(nodes, x)
                current_cell = layer.cell
                nodes = [x, None, None, None]
            src = nodes[layer.src]
            if src is None:
                src = np.zeros_like(x)
            if layer.op == OpKind.SKIP:
                y = src
            elif layer.op == OpKind.AVGPOOL3X3:
                y = avgpool3x3(src)
            else:
                wgt, bias = weights.params[layer.name]
                y = relu(conv2d(src, wgt, bias))
            prev = nodes[layer.dst]
            nodes[layer.dst] = y if prev is None else (prev.astype(np.float64) + y).astype(np.float32)
            _check(nodes[layer.dst], layer.name)
            continue
        if current_cell >= 0:
            x = _cell_output(nodes, x)
            current_cell = -1
        if layer.role in ("stem", "reduction"):
            wgt, bias = weights.params[layer.name]
            x = relu(conv2d(x, wgt, bias, stride=layer.stride))
        elif layer.role == "gap":
            x = global_avg_pool(x)
        elif layer.role == "linear":
            wgt, bias = weights.params[layer.name]
            x = linear(x, wgt, bias).reshape(n, -1, 1, 1)
        _check(x, layer.name)
    codes = np.concatenate(bits, axis=1) if bits else np.zeros((n, 0), dtype=bool)
    return x, codes


def _cell_output(nodes: list, like: np.ndarray) -> np.ndarray:
    out = nodes[3]
    return np.zeros_like(like) if out is None else out


def _check(x: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NonFiniteError(name)


def random_batch(input_shape: Sequence[int], size: int, seed: int) -> np.ndarray:
    """Standard-normal input batch from numpy's PCG64 stream."""
    rng = np.random.Generator(np.random.PCG64(seed))
    return rng.standard_normal((size, *input_shape)).astype(np.float32)
