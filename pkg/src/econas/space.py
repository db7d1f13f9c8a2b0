"""Cell-based search space with expanded width / kernel / stride axes.

An architecture is a 4-node cell DAG (6 edges, 5 candidate ops per edge)
repeated over three stages, plus one model-level configuration drawn from
the expanded value sets below. Architectures are identified by a stable
mixed-radix integer (``ArchId``) relative to a :class:`SpaceDef`.

Digit order of the id, most significant first::

    edge(0->1), edge(0->2), edge(1->2), edge(0->3), edge(1->3), edge(2->3),
    width index, kernel-size index, stride index
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from enum import IntEnum
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

# Table values of the expanded space.
ALL_WIDTHS: tuple[int, ...] = (1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 16, 32, 64, 128, 256)
ALL_KERNEL_SIZES: tuple[int, ...] = (1, 3, 5, 7)
ALL_STRIDES: tuple[int, ...] = (1, 2)
MAX_WIDTH = 256

NUM_NODES = 4
EDGES: tuple[tuple[int, int], ...] = ((0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3))
NUM_EDGES = len(EDGES)


class OpKind(IntEnum):
    NONE = 0
    SKIP = 1
    CONV1X1 = 2
    CONVKXK = 3
    AVGPOOL3X3 = 4


NUM_OPS = len(OpKind)


@dataclass(frozen=True)
class ModelConfig:
    width_c1: int
    kernel_size: int
    stride: int

    @property
    def stage_widths(self) -> tuple[int, int, int]:
        c = self.width_c1
        return (c, min(2 * c, MAX_WIDTH), min(4 * c, MAX_WIDTH))


@dataclass(frozen=True)
class ArchSpec:
    """One candidate model: cell ops (in ``EDGES`` order) plus model config."""

    ops: tuple[OpKind, ...]
    config: ModelConfig
    cells_per_stage: int = 1

    def __post_init__(self):
        if len(self.ops) != NUM_EDGES:
            raise ValueError(f"cell needs exactly {NUM_EDGES} edge ops, got {len(self.ops)}")
        object.__setattr__(self, "ops", tuple(OpKind(o) for o in self.ops))
        if self.cells_per_stage < 1:
            raise ValueError("cells_per_stage must be positive")

    def label(self) -> str:
        ops = "|".join(op.name.lower() for op in self.ops)
        c = self.config
        return f"[{ops}] c{c.width_c1} k{c.kernel_size} s{c.stride}"


@dataclass(frozen=True)
class SpaceDef:
    allowed_widths: tuple[int, ...] = ALL_WIDTHS
    allowed_kernel_sizes: tuple[int, ...] = ALL_KERNEL_SIZES
    allowed_strides: tuple[int, ...] = ALL_STRIDES
    cells_per_stage: int = 1
    # deployment input (channels, height, width); drives shape checks and energy
    input_shape: tuple[int, int, int] = (3, 32, 32)

    def __post_init__(self):
        for name, allowed, table in (
            ("allowed_widths", self.allowed_widths, ALL_WIDTHS),
            ("allowed_kernel_sizes", self.allowed_kernel_sizes, ALL_KERNEL_SIZES),
            ("allowed_strides", self.allowed_strides, ALL_STRIDES),
        ):
            values = tuple(sorted(set(int(v) for v in allowed)))
            if not values:
                raise ValueError(f"{name} must not be empty")
            bad = [v for v in values if v not in table]
            if bad:
                raise ValueError(f"{name} has values outside {table}: {bad}")
            object.__setattr__(self, name, values)
        if self.cells_per_stage < 1:
            raise ValueError("cells_per_stage must be positive")
        shape = tuple(int(v) for v in self.input_shape)
        if len(shape) != 3 or shape[0] < 1:
            raise ValueError(f"input_shape must be (channels, height, width), got {self.input_shape}")
        if shape[1] < 4 or shape[2] < 4:
            raise ValueError("input height and width must be >= 4")
        object.__setattr__(self, "input_shape", shape)

    @property
    def radices(self) -> tuple[int, ...]:
        return (NUM_OPS,) * NUM_EDGES + (
            len(self.allowed_widths),
            len(self.allowed_kernel_sizes),
            len(self.allowed_strides),
        )

    @property
    def raw_size(self) -> int:
        return math.prod(self.radices)

    def to_dict(self) -> dict:
        return {
            "version": 1,
            "allowed_widths": list(self.allowed_widths),
            "allowed_kernel_sizes": list(self.allowed_kernel_sizes),
            "allowed_strides": list(self.allowed_strides),
            "cells_per_stage": self.cells_per_stage,
            "input_shape": list(self.input_shape),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SpaceDef":
        version = data.get("version", 1)
        if version != 1:
            raise ValueError(f"unsupported space config version {version}")
        kwargs = {}
        for key in ("allowed_widths", "allowed_kernel_sizes", "allowed_strides", "input_shape"):
            if key in data:
                kwargs[key] = tuple(data[key])
        if "cells_per_stage" in data:
            kwargs["cells_per_stage"] = int(data["cells_per_stage"])
        unknown = set(data) - set(kwargs) - {"version"}
        if unknown:
            raise ValueError(f"unknown space config keys: {sorted(unknown)}")
        return cls(**kwargs)


FULL_SPACE = SpaceDef()
DESK_SPACE = SpaceDef(allowed_widths=(16, 32, 64), allowed_kernel_sizes=(1, 3), allowed_strides=(1,))


def load_space(path: str | Path) -> SpaceDef:
    with open(path) as fh:
        return SpaceDef.from_dict(json.load(fh))


def save_space(space: SpaceDef, path: str | Path) -> None:
    Path(path).write_text(json.dumps(space.to_dict(), indent=2) + "\n")


# ---------------------------------------------------------------------------
# validity


def has_active_path(ops: Sequence[OpKind]) -> bool:
    """True iff node 3 is reachable from node 0 over non-None edges."""
    reach = [True, False, False, False]
    # EDGES is topologically ordered, so one pass suffices
    for (src, dst), op in zip(EDGES, ops):
        if op != OpKind.NONE and reach[src]:
            reach[dst] = True
    return reach[3]


def spatial_trace(input_hw: tuple[int, int], stride: int) -> list[tuple[int, int]]:
    """Spatial size after the stem and after each of the two reductions."""
    h, w = input_hw
    sizes = []
    for s in (stride, 2, 2):
        h, w = -(-h // s), -(-w // s)
        sizes.append((h, w))
    return sizes


def validate_arch(a: ArchSpec, space: SpaceDef) -> tuple[bool, str]:
    if not has_active_path(a.ops):
        return False, "no active input-output path"
    c = a.config
    if c.width_c1 not in space.allowed_widths:
        return False, f"width {c.width_c1} not in space"
    if c.kernel_size not in space.allowed_kernel_sizes:
        return False, f"kernel size {c.kernel_size} not in space"
    if c.stride not in space.allowed_strides:
        return False, f"stride {c.stride} not in space"
    if min(c.stage_widths) < 1:
        return False, "stage width below 1"
    for h, w in spatial_trace(space.input_shape[1:], c.stride):
        if h < 1 or w < 1:
            return False, "spatial size collapses below 1x1"
    return True, "ok"


# ---------------------------------------------------------------------------
# ids


def encode(a: ArchSpec, space: SpaceDef = FULL_SPACE) -> int:
    c = a.config
    try:
        digits = [int(op) for op in a.ops] + [
            space.allowed_widths.index(c.width_c1),
            space.allowed_kernel_sizes.index(c.kernel_size),
            space.allowed_strides.index(c.stride),
        ]
    except ValueError as exc:
        raise ValueError(f"architecture config not representable in space: {c}") from exc
    arch_id = 0
    for digit, radix in zip(digits, space.radices):
        arch_id = arch_id * radix + digit
    return arch_id


def decode(arch_id: int, space: SpaceDef = FULL_SPACE) -> ArchSpec:
    arch_id = int(arch_id)
    if not 0 <= arch_id < space.raw_size:
        raise ValueError(f"arch id {arch_id} outside [0, {space.raw_size})")
    digits = []
    for radix in reversed(space.radices):
        arch_id, d = divmod(arch_id, radix)
        digits.append(d)
    digits.reverse()
    w, k, s = digits[NUM_EDGES:]
    config = ModelConfig(space.allowed_widths[w], space.allowed_kernel_sizes[k], space.allowed_strides[s])
    return ArchSpec(tuple(OpKind(d) for d in digits[:NUM_EDGES]), config, space.cells_per_stage)


def _valid_topology_mask() -> np.ndarray:
    mask = np.zeros(NUM_OPS**NUM_EDGES, dtype=bool)
    for t in range(mask.size):
        ops, rest = [], t
        for _ in range(NUM_EDGES):
            rest, d = divmod(rest, NUM_OPS)
            ops.append(OpKind(d))
        mask[t] = has_active_path(ops[::-1])
    return mask


_TOPOLOGY_MASK: np.ndarray | None = None


def valid_topology_mask() -> np.ndarray:
    """Boolean mask over the 5**6 topology indices (edge digits as a base-5 number)."""
    global _TOPOLOGY_MASK
    if _TOPOLOGY_MASK is None:
        _TOPOLOGY_MASK = _valid_topology_mask()
    return _TOPOLOGY_MASK


def enumerate_ids(space: SpaceDef) -> np.ndarray:
    """All valid ids of ``space`` in ascending order."""
    n_cfg = space.raw_size // NUM_OPS**NUM_EDGES
    cfg_ok = np.zeros(n_cfg, dtype=bool)
    for j in range(n_cfg):
        probe = decode(_first_valid_topology() * n_cfg + j, space)
        cfg_ok[j] = validate_arch(probe, space)[0]
    topo = np.flatnonzero(valid_topology_mask()).astype(np.int64)
    cfg = np.flatnonzero(cfg_ok).astype(np.int64)
    return (topo[:, None] * n_cfg + cfg[None, :]).ravel()


def _first_valid_topology() -> int:
    return int(np.flatnonzero(valid_topology_mask())[0])


def enumerate_space(space: SpaceDef) -> Iterator[ArchSpec]:
    """Yield every valid architecture exactly once, ascending by id."""
    for arch_id in enumerate_ids(space):
        yield decode(int(arch_id), space)


def count_valid(space: SpaceDef) -> int:
    return int(enumerate_ids(space).size)


# ---------------------------------------------------------------------------
# embedding and neighbourhoods

EMBED_DIM = NUM_EDGES * NUM_OPS + 3


def embed(a: ArchSpec) -> np.ndarray:
    """33-dim vector: one-hot per edge, then [log2(width), kernel size, stride]."""
    v = np.zeros(EMBED_DIM)
    for e, op in enumerate(a.ops):
        v[e * NUM_OPS + int(op)] = 1.0
    c = a.config
    v[-3:] = (math.log2(c.width_c1), c.kernel_size, c.stride)
    return v


def neighbors(a: ArchSpec, space: SpaceDef) -> list[ArchSpec]:
    out = []
    for e in range(NUM_EDGES):
        for op in OpKind:
            if op != a.ops[e]:
                ops = list(a.ops)
                ops[e] = op
                out.append(replace(a, ops=tuple(ops)))
    c = a.config
    for attr, allowed in (
        ("width_c1", space.allowed_widths),
        ("kernel_size", space.allowed_kernel_sizes),
        ("stride", space.allowed_strides),
    ):
        values = list(allowed)
        cur = getattr(c, attr)
        if cur not in values:
            continue
        i = values.index(cur)
        for j in (i - 1, i + 1):
            if 0 <= j < len(values):
                out.append(replace(a, config=replace(c, **{attr: values[j]})))
    return [b for b in out if validate_arch(b, space)[0]]
