import json
import math

import numpy as np
import pytest

from econas.measure import SimBackend
from econas.orchestrator import (
    CarbonConfig,
    Estimates,
    SearchConfig,
    StateError,
    StoppingCriteria,
    candidate_ids,
    carbon_kg,
    carbon_report,
    compute_estimates,
    init_state,
    initial_select,
    load_state,
    read_front_csv,
    run_iteration,
    run_search,
    save_state,
    state_from_dict,
    state_to_dict,
)
from econas.space import DESK_SPACE

from helpers import COEF, synthetic_estimates


@pytest.fixture(scope="module")
def est():
    return synthetic_estimates(300)


def small_config(**kw):
    base = dict(init_count=20, per_iter_count=5, max_iterations=6, seed=3)
    base.update(kw)
    return SearchConfig(**base)


def test_defaults_follow_protocol():
    c = SearchConfig()
    assert (c.init_count, c.per_iter_count) == (100, 10)
    assert c.ws == (3.0, 1.0)
    assert (c.stopping.min_accuracy, c.stopping.max_energy_mj) == (0.9, 7.0)


def test_config_validation():
    with pytest.raises(ValueError):
        SearchConfig(init_count=0)
    with pytest.raises(ValueError):
        SearchConfig(ws=(1.0, 0.0))
    with pytest.raises(ValueError):
        StoppingCriteria(max_energy_mj=0)
    assert SearchConfig.from_dict(small_config().to_dict()) == small_config()


def test_initial_select_distinct_cells():
    rng = np.random.default_rng(0)
    got = initial_select([0, 0, 1, 1], [0, 1, 0, 1], [10, 11, 12, 13], 4, rng)
    assert sorted(got) == [10, 11, 12, 13]


def test_initial_select_single_cell_is_seeded_sample():
    ids = list(range(100, 150))
    a = initial_select([0.3] * 50, [0.7] * 50, ids, 10, np.random.default_rng(5))
    b = initial_select([0.3] * 50, [0.7] * 50, ids, 10, np.random.default_rng(5))
    assert a == b and len(set(a)) == 10 and set(a) <= set(ids)


def test_initial_select_spreads_over_grid(est):
    got = initial_select(est.e_norm, est.n_norm, est.arch_ids, 16, np.random.default_rng(1))
    idx = np.searchsorted(est.arch_ids, got)
    # a 4x4 quantile grid: picks land in every energy quartile
    q = np.quantile(est.e_norm, [0.25, 0.5, 0.75])
    assert len(set(np.searchsorted(q, est.e_norm[idx]).tolist())) == 4
    with pytest.raises(ValueError):
        initial_select(est.e_norm, est.n_norm, est.arch_ids, 301, np.random.default_rng(1))


def test_compute_estimates_matches_serial_and_parallel():
    ids = candidate_ids(DESK_SPACE, 70, 0)
    a = compute_estimates(DESK_SPACE, COEF, ids, workers=1)
    b = compute_estimates(DESK_SPACE, COEF, ids, workers=2)
    np.testing.assert_array_equal(a.naswot_raw, b.naswot_raw)
    np.testing.assert_array_equal(a.e_pred, b.e_pred)
    assert a.n_norm.min() >= 0 and a.e_norm.max() == 1.0


def test_estimates_csv_round_trip(tmp_path, est):
    path = tmp_path / "e.csv"
    est.to_csv(path)
    back = Estimates.from_csv(path)
    for k in ("arch_ids", "e_pred", "naswot_raw", "e_norm", "n_norm"):
        np.testing.assert_array_equal(getattr(back, k), getattr(est, k))
    assert path.read_text().splitlines()[0] == "arch_id,e_pred_joules,naswot_raw,e_norm,n_norm"


def test_iteration_grows_front_consistently(est):
    be = SimBackend(DESK_SPACE, COEF, 0)
    st = init_state(DESK_SPACE, be, small_config(), est)
    assert len(st.measured) == 20 and st.iteration == 0
    for _ in range(3):
        before = st.history[-1]["hypervolume"]
        run_iteration(st, be)
        assert st.history[-1]["hypervolume"] >= before
    assert len(st.measured) == 35
    pts = {i: st.objective(st.measured[i]) for i in st.measured}
    for f in st.archive.front:
        assert not any(all(a <= b for a, b in zip(q, pts[f])) and q != pts[f] for q in pts.values())


def test_remeasuring_rejected(est):
    from econas.orchestrator import _measure
    be = SimBackend(DESK_SPACE, COEF, 0)
    st = init_state(DESK_SPACE, be, small_config(), est)
    with pytest.raises(RuntimeError, match="measured twice"):
        _measure(st, be, [next(iter(st.measured))])


def test_trivial_stopping_ends_after_first_front(est):
    cfg = small_config(stopping=StoppingCriteria(0.0, math.inf))
    rep = run_search(DESK_SPACE, SimBackend(DESK_SPACE, COEF, 0), cfg, estimates=est)
    assert rep["status"] == "satisfied" and rep["iterations"] == 0


def test_budget_exhausted(est):
    rep = run_search(DESK_SPACE, SimBackend(DESK_SPACE, COEF, 0), small_config(), estimates=est)
    assert rep["status"] == "budget-exhausted" and rep["iterations"] == 6
    assert rep["models_measured"] == 20 + 6 * 5


def test_pool_exhausted():
    est = synthetic_estimates(30, seed=1)
    rep = run_search(DESK_SPACE, SimBackend(DESK_SPACE, COEF, 0), small_config(max_iterations=50), estimates=est)
    assert rep["status"] == "pool-exhausted" and rep["models_measured"] == 30


def test_carbon_arithmetic():
    assert carbon_kg(1.0, 0.4) == 0.4
    assert carbon_kg(0.0, 0.4) == 0.0
    with pytest.raises(ValueError):
        CarbonConfig(grid_intensity=-1)


def test_carbon_report_units(est):
    st = init_state(DESK_SPACE, SimBackend(DESK_SPACE, COEF, 0), small_config(), est)
    st.measurement_energy_j = 3.6e6
    rep = carbon_report(st, CarbonConfig(0.4, per_model_training_kwh=0.5))
    assert rep["measurement_energy_kwh"] == 1.0
    assert rep["training_energy_kwh"] == 10.0
    assert rep["carbon_kg"] == pytest.approx(4.4)
    assert rep["carbon_kg_per_model"] == pytest.approx(4.4 / 20)


def test_state_round_trip(tmp_path, est):
    st = init_state(DESK_SPACE, SimBackend(DESK_SPACE, COEF, 0), small_config(), est)
    path = tmp_path / "state.json"
    save_state(st, path)
    back = load_state(path)
    assert state_to_dict(back) == state_to_dict(st)
    text = path.read_text()
    path.write_text(text[: len(text) // 2])
    with pytest.raises(StateError):
        load_state(path)
    data = json.loads(text)
    data["version"] = 99
    with pytest.raises(ValueError, match="version"):
        state_from_dict(data)
    del data["measured"]
    data["version"] = 1
    path.write_text(json.dumps(data))
    with pytest.raises(StateError):
        load_state(path)


def test_resume_reproduces_uninterrupted(tmp_path, est):
    cfg = small_config()
    full = run_search(DESK_SPACE, SimBackend(DESK_SPACE, COEF, 0), cfg, estimates=est, run_dir=tmp_path / "a")
    part = run_search(DESK_SPACE, SimBackend(DESK_SPACE, COEF, 0), cfg, estimates=est, run_dir=tmp_path / "b",
                      stop_after=2)
    assert part["status"] == "interrupted"
    resumed = run_search(DESK_SPACE, SimBackend(DESK_SPACE, COEF, 0), cfg, run_dir=tmp_path / "b", resume=True)
    assert resumed == full
    assert (tmp_path / "a" / "report.json").read_text() == (tmp_path / "b" / "report.json").read_text()


def test_run_dir_layout(tmp_path, est):
    run_search(DESK_SPACE, SimBackend(DESK_SPACE, COEF, 0), small_config(max_iterations=2), estimates=est,
               run_dir=tmp_path)
    names = {p.name for p in tmp_path.iterdir()}
    assert {"config.snapshot", "estimates.csv", "state.json", "report.json",
            "front_iter_0.csv", "front_iter_1.csv", "front_iter_2.csv"} <= names
    front = read_front_csv(tmp_path / "front_iter_2.csv")
    assert front and all(0 <= p.energy <= 1 and 0 <= p.accuracy <= 1 for p in front)


def test_resume_without_state(tmp_path):
    with pytest.raises(FileNotFoundError):
        run_search(DESK_SPACE, SimBackend(DESK_SPACE, COEF, 0), small_config(), run_dir=tmp_path, resume=True)
