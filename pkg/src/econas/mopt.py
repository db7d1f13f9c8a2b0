"""Pareto archive, min-norm multiple-gradient direction and model selection.

Everything here uses the minimisation convention. For the two-objective
search the point is ``(normalised energy, -accuracy)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

MEASURED = "measured"
ESTIMATED = "estimated"


def dominates(p: Sequence[float], q: Sequence[float]) -> bool:
    if len(p) != len(q):
        raise ValueError(f"dimension mismatch: {len(p)} vs {len(q)}")
    strictly = False
    for a, b in zip(p, q):
        if a > b:
            return False
        if a < b:
            strictly = True
    return strictly


def non_dominated_mask(points: np.ndarray) -> np.ndarray:
    """Mask of points not dominated by any other row (duplicates all survive)."""
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    keep = np.ones(n, dtype=bool)
    # sort lexicographically so a dominator always precedes what it dominates
    order = np.lexsort(pts.T[::-1])
    front: list[int] = []
    for i in order:
        p = pts[i]
        if front:
            f = pts[front]
            dom = np.all(f <= p, axis=1) & np.any(f < p, axis=1)
            if dom.any():
                keep[i] = False
                continue
        front.append(i)
    return keep


@dataclass
class ArchiveEntry:
    arch_id: int
    point: tuple[float, ...]
    provenance: str = MEASURED
    iteration: int = 0


@dataclass
class ParetoArchive:
    entries: dict[int, ArchiveEntry] = field(default_factory=dict)
    front: list[int] = field(default_factory=list)

    def measured(self) -> list[ArchiveEntry]:
        return [e for e in self.entries.values() if e.provenance == MEASURED]

    def front_entries(self) -> list[ArchiveEntry]:
        return [self.entries[i] for i in self.front]

    def front_points(self) -> np.ndarray:
        return np.array([self.entries[i].point for i in self.front], dtype=np.float64)


def update_front(archive: ParetoArchive, new_entries: Iterable[ArchiveEntry]) -> ParetoArchive:
    """Add entries and recompute the front over all measured entries.

    The front is returned sorted by arch id so it does not depend on the
    order in which entries arrived.
    """
    for e in new_entries:
        archive.entries[e.arch_id] = e
    measured = sorted(archive.measured(), key=lambda e: e.arch_id)
    if not measured:
        archive.front = []
        return archive
    mask = non_dominated_mask(np.array([e.point for e in measured]))
    archive.front = [e.arch_id for e, k in zip(measured, mask) if k]
    return archive


# ---------------------------------------------------------------------------
# min-norm direction


@dataclass
class GradientBundle:
    gradients: np.ndarray  # (m, d)
    lam: np.ndarray        # min-norm convex weights
    lam_weighted: np.ndarray
    d_star: np.ndarray

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("gradients", "lam", "lam_weighted", "d_star")}

    @classmethod
    def from_dict(cls, data: dict) -> "GradientBundle":
        return cls(**{k: np.array(v, dtype=np.float64) for k, v in data.items()})


def min_norm_two(g1: np.ndarray, g2: np.ndarray) -> float:
    """Weight on ``g1`` minimising ||l*g1 + (1-l)*g2|| over l in [0, 1]."""
    diff = g1 - g2
    denom = float(diff @ diff)
    if denom == 0.0:
        return 0.5
    return min(1.0, max(0.0, float((g2 - g1) @ g2) / denom))


def frank_wolfe(grads: np.ndarray, tol: float = 1e-12, max_iter: int = 100_000) -> np.ndarray:
    """Min-norm point of the convex hull of the rows of ``grads``.

    Frank-Wolfe with away steps and exact line search. Away steps let a
    weight drop to exactly zero, so optima on a face of the simplex are
    reached in finitely many steps instead of by slow zig-zagging.
    ``tol`` bounds the duality gap of ||sum lam_i g_i||^2.
    """
    gram = grads @ grads.T
    m = len(grads)
    lam = np.full(m, 1.0 / m)
    for _ in range(max_iter):
        glam = gram @ lam
        cur = float(lam @ glam)
        s = int(np.argmin(glam))
        active = np.flatnonzero(lam > 0)
        v = int(active[np.argmax(glam[active])])
        gap_fw = cur - float(glam[s])
        if gap_fw <= tol:
            break
        if gap_fw >= float(glam[v]) - cur or lam[v] >= 1.0:
            d = -lam.copy()
            d[s] += 1.0
            max_step = 1.0
        else:
            d = lam.copy()
            d[v] -= 1.0
            max_step = lam[v] / (1.0 - lam[v])
        curv = float(d @ gram @ d)
        if curv <= 0.0:
            break
        step = min(max_step, max(0.0, -float(d @ glam) / curv))
        lam = lam + step * d
        if step == max_step and max_step != 1.0:
            lam[v] = 0.0
        lam = np.maximum(lam, 0.0)
        lam /= lam.sum()
    return lam


def min_norm_direction(gradients: Sequence[Sequence[float]], ws: Sequence[float] | None = None) -> GradientBundle:
    g = np.asarray(gradients, dtype=np.float64)
    if g.ndim != 2 or g.shape[0] < 2 or g.shape[1] == 0:
        raise ValueError("need at least two non-empty gradient vectors of equal dimension")
    if not np.any(g):
        raise ValueError("degenerate gradient set")
    m = g.shape[0]
    ws = np.ones(m) if ws is None else np.asarray(ws, dtype=np.float64)
    if ws.shape != (m,) or np.any(ws <= 0):
        raise ValueError("search weights must be positive, one per objective")
    if m == 2:
        l1 = min_norm_two(g[0], g[1])
        lam = np.array([l1, 1.0 - l1])
    else:
        lam = frank_wolfe(g)
    weighted = ws * lam
    lam_w = weighted / weighted.sum()
    return GradientBundle(g, lam, lam_w, lam_w @ g)


def fit_objective_gradients(embeddings: np.ndarray, objectives: np.ndarray, ridge: float = 1e-3) -> np.ndarray:
    """Slopes of a ridge linear fit of each objective on the embedding.

    The loss is ``mean squared error + ridge * ||w||^2`` with an unpenalised
    intercept, so replicating the whole data set leaves the fit unchanged.
    Returns an ``(m, d)`` array.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    y = np.asarray(objectives, dtype=np.float64)
    if len(x) < 2:
        raise ValueError("need at least 2 measured models to fit gradients")
    if y.ndim == 1:
        y = y[:, None]
    n, d = x.shape
    xc = x - x.mean(axis=0)
    yc = y - y.mean(axis=0)
    lhs = xc.T @ xc / n + ridge * np.eye(d)
    rhs = xc.T @ yc / n
    return np.linalg.solve(lhs, rhs).T


# ---------------------------------------------------------------------------
# candidate selection


def alignment_scores(cand_embeddings: np.ndarray, front_embeddings: np.ndarray, d_star: np.ndarray) -> np.ndarray:
    g = np.asarray(cand_embeddings, dtype=np.float64) - np.asarray(front_embeddings, dtype=np.float64).mean(axis=0)
    return g @ -np.asarray(d_star, dtype=np.float64)


def select_candidates(
    pool_ids: Sequence[int],
    pool_embeddings: np.ndarray,
    pool_energy: Sequence[float],
    front_embeddings: np.ndarray,
    bundle: GradientBundle,
    count: int,
) -> list[int]:
    """Top-``count`` pool members by alignment with the descent direction -d*.

    Ties go to lower estimated energy, then lower arch id.
    """
    if len(front_embeddings) == 0:
        raise ValueError("front is empty; initialise it before selecting candidates")
    if len(pool_ids) == 0:
        return []
    scores = alignment_scores(pool_embeddings, front_embeddings, bundle.d_star)
    ids = np.asarray(pool_ids, dtype=np.int64)
    order = np.lexsort((ids, np.asarray(pool_energy, dtype=np.float64), -scores))
    return [int(ids[i]) for i in order[:count]]


# ---------------------------------------------------------------------------
# picking one model off the front


@dataclass(frozen=True)
class FrontPoint:
    arch_id: int
    energy: float    # normalised energy, lower is better
    accuracy: float  # normalised accuracy, higher is better


def minmax(values: Sequence[float]) -> np.ndarray:
    """Min-max scale to [0, 1]; a degenerate range maps to 0.5."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return v
    lo, hi = v.min(), v.max()
    return np.full(v.shape, 0.5) if hi == lo else (v - lo) / (hi - lo)


def _argbest(keys: list[tuple[float, float, int]], rel_tol: float = 1e-12) -> int:
    # keys: (primary to minimise, energy, arch_id)
    best = min(k[0] for k in keys)
    tied = [k for k in keys if math.isclose(k[0], best, rel_tol=rel_tol, abs_tol=1e-15)]
    return min(tied, key=lambda k: (k[1], k[2]))[2]


def front_gradients(points: np.ndarray) -> np.ndarray:
    """Finite-difference gradient along a front sorted by the first coordinate.

    Central differences inside, one-sided at both ends.
    """
    p = np.asarray(points, dtype=np.float64)
    n = len(p)
    if n == 1:
        return np.zeros_like(p)
    g = np.empty_like(p)
    g[0] = p[1] - p[0]
    g[-1] = p[-1] - p[-2]
    if n > 2:
        g[1:-1] = (p[2:] - p[:-2]) / 2.0
    return g


def weighted_gradient_magnitudes(front: Sequence[FrontPoint], wd: Sequence[float]) -> list[tuple[FrontPoint, float]]:
    pts = sorted(front, key=lambda p: (p.energy, p.arch_id))
    coords = np.array([[p.energy, p.accuracy] for p in pts])
    grads = front_gradients(coords) * np.asarray(wd, dtype=np.float64)
    return list(zip(pts, np.linalg.norm(grads, axis=1).tolist()))


def best_model_gd(front: Sequence[FrontPoint], wd: Sequence[float] = (1.0, 1.0)) -> int:
    """Front member with the smallest weighted-gradient magnitude.

    ``wd`` is ordered (energy, accuracy).
    """
    if not front:
        raise ValueError("empty front")
    if len(front) == 1:
        return front[0].arch_id
    mags = weighted_gradient_magnitudes(front, wd)
    return _argbest([(m, p.energy, p.arch_id) for p, m in mags])


def best_model_ws(points: Sequence[FrontPoint], wd: Sequence[float] = (1.0, 1.0)) -> int:
    """Weighted-sum pick: maximise wd_a * accuracy + wd_e * (1 - energy)."""
    if not points:
        raise ValueError("empty input")
    wd_e, wd_a = wd
    return _argbest([(-(wd_a * p.accuracy + wd_e * (1.0 - p.energy)), p.energy, p.arch_id) for p in points])


# ---------------------------------------------------------------------------


def hypervolume2d(front: np.ndarray, ref: Sequence[float]) -> float:
    """Area dominated by ``front`` and bounded by ``ref`` (minimisation).

    Points that do not strictly dominate ``ref`` contribute nothing.
    """
    pts = np.asarray(front, dtype=np.float64).reshape(-1, 2)
    rx, ry = float(ref[0]), float(ref[1])
    pts = pts[(pts[:, 0] < rx) & (pts[:, 1] < ry)]
    if len(pts) == 0:
        return 0.0
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]
    area = 0.0
    best_y = ry
    for x, y in pts:
        if y < best_y:
            area += (rx - x) * (best_y - y)
            best_y = y
    return area
