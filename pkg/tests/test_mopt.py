import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from econas.mopt import (
    ArchiveEntry,
    FrontPoint,
    GradientBundle,
    ParetoArchive,
    alignment_scores,
    best_model_gd,
    best_model_ws,
    dominates,
    fit_objective_gradients,
    frank_wolfe,
    hypervolume2d,
    min_norm_direction,
    min_norm_two,
    non_dominated_mask,
    select_candidates,
    update_front,
    weighted_gradient_magnitudes,
)

from oracles import (
    brute_front,
    brute_gd_select,
    grid_min_norm_2,
    grid_min_norm_3,
    min_norm_by_faces,
    monte_carlo_hv,
)

FIXTURE = [FrontPoint(1, 0.1, 0.6), FrontPoint(2, 0.3, 0.8), FrontPoint(3, 0.7, 0.9)]


def test_dominance_fixtures():
    assert dominates((0.2, -0.9), (0.3, -0.8))
    assert not dominates((0.2, -0.8), (0.3, -0.9))
    assert not dominates((0.3, -0.9), (0.2, -0.8))
    assert not dominates((1.0, 2.0), (1.0, 2.0))
    with pytest.raises(ValueError):
        dominates((1, 2), (1, 2, 3))


def _archive(points):
    arc = ParetoArchive()
    return update_front(arc, [ArchiveEntry(i, tuple(p)) for i, p in enumerate(points)])


def test_update_front_fixtures():
    arc = _archive([(1, -1), (2, -2), (3, -3)])
    assert arc.front == [0, 1, 2]
    update_front(arc, [ArchiveEntry(3, (2, -1))])
    assert arc.front == [0, 1, 2]
    update_front(arc, [ArchiveEntry(4, (0.5, -3.5))])
    assert arc.front == [4]


def test_update_front_order_independent():
    rng = np.random.default_rng(0)
    pts = rng.random((200, 2))
    a = _archive(pts)
    perm = rng.permutation(200)
    b = update_front(ParetoArchive(), [ArchiveEntry(int(i), tuple(pts[i])) for i in perm])
    assert a.front == b.front


def test_estimated_entries_excluded():
    arc = ParetoArchive()
    update_front(arc, [ArchiveEntry(0, (1.0, 1.0)), ArchiveEntry(1, (0.0, 0.0), "estimated")])
    assert arc.front == [0]


def test_non_dominated_matches_brute_force():
    rng = np.random.default_rng(1)
    for m in (2, 3):
        for _ in range(10):
            pts = rng.integers(0, 20, (300, m)).astype(float)
            got = set(np.flatnonzero(non_dominated_mask(pts)).tolist())
            assert got == brute_front(pts.tolist())


# ---------------------------------------------------------------------------


def test_min_norm_symmetric():
    b = min_norm_direction([[1, 0], [0, 1]], ws=(1, 1))
    np.testing.assert_allclose(b.lam, [0.5, 0.5])
    np.testing.assert_allclose(b.d_star, [0.5, 0.5])


def test_min_norm_equal_gradients():
    b = min_norm_direction([[1, 0], [1, 0]])
    np.testing.assert_allclose(b.lam, [0.5, 0.5])
    np.testing.assert_allclose(b.d_star, [1, 0])


def test_min_norm_closed_form_fixture():
    g1, g2 = np.array([2.0, 0.0]), np.array([0.0, 1.0])
    b = min_norm_direction([g1, g2], ws=(1, 1))
    np.testing.assert_allclose(b.lam, [0.2, 0.8], atol=1e-12)
    np.testing.assert_allclose(b.d_star, [0.4, 0.8], atol=1e-12)
    assert b.d_star @ (g1 - g2) == pytest.approx(0.0, abs=1e-12)
    lam, norm = grid_min_norm_2(g1, g2)
    assert lam == pytest.approx(0.2, abs=1e-3)
    assert norm == pytest.approx(np.linalg.norm(b.d_star), abs=1e-6)


def test_min_norm_two_random_vs_grid():
    rng = np.random.default_rng(2)
    for _ in range(100):
        g1, g2 = rng.standard_normal((2, 5))
        lam = min_norm_two(g1, g2)
        glam, gnorm = grid_min_norm_2(g1, g2)
        assert lam == pytest.approx(glam, abs=1e-3)
        assert np.linalg.norm(lam * g1 + (1 - lam) * g2) == pytest.approx(gnorm, abs=1e-6)


def test_frank_wolfe_vs_grid():
    rng = np.random.default_rng(3)
    for _ in range(3):
        g = rng.standard_normal((3, 4))
        lam = frank_wolfe(g)
        glam, gnorm = grid_min_norm_3(g, step=1e-3)
        assert np.linalg.norm(lam @ g) <= gnorm + 1e-9


def test_frank_wolfe_vs_face_enumeration():
    rng = np.random.default_rng(13)
    for m in (3, 4, 6, 8):
        for d in (2, 4, 9):
            g = rng.standard_normal((m, d))
            lam = frank_wolfe(g)
            assert lam.min() >= 0 and lam.sum() == pytest.approx(1.0)
            assert np.linalg.norm(lam @ g) == pytest.approx(min_norm_by_faces(g), abs=1e-7)


def test_search_weights_rescale():
    b = min_norm_direction([[1, 0], [0, 1]], ws=(3, 1))
    np.testing.assert_allclose(b.lam_weighted, [0.75, 0.25])
    np.testing.assert_allclose(b.d_star, [0.75, 0.25])


def test_min_norm_errors():
    with pytest.raises(ValueError, match="degenerate"):
        min_norm_direction([[0, 0], [0, 0]])
    with pytest.raises(ValueError):
        min_norm_direction([[1, 0]])
    with pytest.raises(ValueError):
        min_norm_direction([[1, 0], [0, 1]], ws=(1, -1))


def test_bundle_round_trip():
    b = min_norm_direction([[1, 2], [3, -1]])
    c = GradientBundle.from_dict(b.to_dict())
    for k in ("gradients", "lam", "lam_weighted", "d_star"):
        np.testing.assert_array_equal(getattr(b, k), getattr(c, k))


def test_fit_recovers_slopes():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((20, 2))
    y = 2 * x[:, 0] + 3 * x[:, 1] + 1.5
    g = fit_objective_gradients(x, y, ridge=1e-6)
    np.testing.assert_allclose(g[0], [2, 3], atol=1e-3)


def test_fit_constant_objective_zero():
    x = np.random.default_rng(5).standard_normal((10, 4))
    g = fit_objective_gradients(x, np.full((10, 2), 7.0))
    np.testing.assert_allclose(g, 0.0, atol=1e-6)


def test_fit_invariant_to_duplication():
    rng = np.random.default_rng(6)
    x, y = rng.standard_normal((15, 3)), rng.standard_normal((15, 2))
    np.testing.assert_allclose(fit_objective_gradients(x, y), fit_objective_gradients(np.tile(x, (2, 1)), np.tile(y, (2, 1))))


# ---------------------------------------------------------------------------


def _bundle(d):
    d = np.asarray(d, dtype=float)
    return GradientBundle(np.zeros((2, d.size)), np.full(2, 0.5), np.full(2, 0.5), d)


def test_alignment_fixture():
    cands = np.array([[-2.0, 0.0], [1.0, 0.0], [0.0, 5.0]])
    front = np.array([[1.0, 1.0], [-1.0, -1.0]])
    assert alignment_scores(cands, front, [1.0, 0.0]).tolist() == [2.0, -1.0, 0.0]
    assert select_candidates([10, 11, 12], cands, [0, 0, 0], front, _bundle([1, 0]), 1) == [10]
    assert select_candidates([10, 11, 12], cands, [0, 0, 0], front, _bundle([1, 0]), 5) == [10, 12, 11]


def test_selection_vs_brute_force():
    rng = np.random.default_rng(7)
    emb = rng.integers(0, 3, (200, 5)).astype(float)
    energy = rng.integers(0, 4, 200).astype(float)
    ids = rng.permutation(1000)[:200]
    front = rng.standard_normal((4, 5))
    d = rng.standard_normal(5)
    got = select_candidates(ids, emb, energy, front, _bundle(d), 30)
    mean = front.mean(axis=0)
    scored = sorted(range(200), key=lambda i: (-float((emb[i] - mean) @ -d), energy[i], ids[i]))
    assert got == [int(ids[i]) for i in scored[:30]]


def test_selection_empty_front():
    with pytest.raises(ValueError, match="front is empty"):
        select_candidates([1], np.zeros((1, 2)), [0], np.zeros((0, 2)), _bundle([1, 0]), 1)


# ---------------------------------------------------------------------------


def test_gd_fixture_magnitudes():
    mags = [m for _, m in weighted_gradient_magnitudes(FIXTURE, (1, 1))]
    np.testing.assert_allclose(mags, [0.2828, 0.3354, 0.4123], atol=1e-4)
    mags = [m for _, m in weighted_gradient_magnitudes(FIXTURE, (1, 10))]
    np.testing.assert_allclose(mags, [2.0100, 1.5297, 1.0770], atol=1e-4)
    assert best_model_gd(FIXTURE, (1, 1)) == 1
    assert best_model_gd(FIXTURE, (1, 10)) == 3


def test_gd_singleton_and_empty():
    assert best_model_gd([FrontPoint(9, 0.4, 0.4)], (1, 1)) == 9
    with pytest.raises(ValueError):
        best_model_gd([], (1, 1))


def test_gd_vs_brute_force():
    rng = np.random.default_rng(8)
    for n in list(range(1, 6)) + [int(v) for v in rng.integers(2, 40, 195)]:
        e = np.sort(rng.random(n))
        a = np.sort(rng.random(n))
        ids = rng.permutation(10_000)[:n]
        wd = tuple(rng.uniform(0.1, 10, 2))
        front = [FrontPoint(int(i), float(x), float(y)) for i, x, y in zip(ids, e, a)]
        expected = brute_gd_select([(p.arch_id, p.energy, p.accuracy) for p in front], wd)
        assert best_model_gd(front, wd) == expected


def test_ws_fixture_tie():
    assert best_model_ws(FIXTURE, (1, 1)) == 1
    assert best_model_ws(FIXTURE, (1, 1e9)) == 3
    assert best_model_ws([FIXTURE[1]], (1, 1)) == 2


# ---------------------------------------------------------------------------


def test_hypervolume_fixtures():
    assert hypervolume2d(np.array([[0.5, 0.5]]), (1, 1)) == 0.25
    assert hypervolume2d(np.zeros((0, 2)), (1, 1)) == 0.0
    assert hypervolume2d(np.array([[0.0, 0.0], [0.5, -1.0]]), (1, 1)) == pytest.approx(1.0 + 0.5)
    assert hypervolume2d(np.array([[1.0, 0.5]]), (1, 1)) == 0.0


def test_hypervolume_vs_monte_carlo():
    rng = np.random.default_rng(9)
    for n in (1, 7, 50):
        pts = rng.random((n, 2))
        hv = hypervolume2d(pts, (1.0, 1.0))
        assert hv == pytest.approx(monte_carlo_hv(pts, (1.0, 1.0), seed=n), rel=0.01)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1)), min_size=1, max_size=30),
       st.tuples(st.floats(0, 1), st.floats(0, 1)))
def test_hypervolume_monotone_under_insertion(pts, extra):
    pts = np.array(pts)
    assert hypervolume2d(np.vstack([pts, extra]), (1, 1)) >= hypervolume2d(pts, (1, 1)) - 1e-12


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 9), st.integers(0, 9)), min_size=1, max_size=40))
def test_front_members_mutually_non_dominated(pts):
    mask = non_dominated_mask(np.array(pts, dtype=float))
    front = [p for p, k in zip(pts, mask) if k]
    assert front
    assert not any(dominates(p, q) for p in front for q in front)
    assert all(any(dominates(f, p) for f in front) for p, k in zip(pts, mask) if not k)
