import json
import shutil
import subprocess
import sys

import pytest

from econas.cli import build_parser, main, resolve_search_args
from econas.orchestrator import SearchConfig

from helpers import synthetic_estimates

DESK_FLAGS = ["--widths", "16", "32", "64", "--kernel-sizes", "1", "3", "--strides", "1"]


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_search_defaults_match_protocol():
    args = build_parser().parse_args(["search"])
    _, search, carbon = resolve_search_args(args, {})
    assert search.init_count == 100 and search.per_iter_count == 10
    # ws = (energy, accuracy): accuracy:energy = 1:3
    assert search.ws == (3.0, 1.0)
    assert search.stopping.min_accuracy == 0.9 and search.stopping.max_energy_mj == 7.0
    assert search == SearchConfig()
    assert carbon.grid_intensity == 0.4


def test_config_file_then_flags(tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"version": 1, "search": {"init_count": 40, "per_iter_count": 4}}))
    args = build_parser().parse_args(["--config", str(cfg), "search", "--per-iter-count", "6"])
    from econas.cli import _load_config
    _, search, _ = resolve_search_args(args, _load_config(cfg))
    assert (search.init_count, search.per_iter_count) == (40, 6)


def test_space_count(capsys):
    code, out, _ = run(capsys, "space", "count", *DESK_FLAGS)
    assert code == 0
    assert json.loads(out) == {"raw_count": 93_750, "valid_count": 91_704}


def test_space_validate(capsys):
    code, out, _ = run(capsys, "space", "validate", "--id", "0")
    assert code == 0
    data = json.loads(out)
    assert not data["valid"] and data["reason"] == "no active input-output path"


def test_space_enumerate(tmp_path, capsys):
    out_file = tmp_path / "ids.txt"
    code, _, _ = run(capsys, "space", "enumerate", *DESK_FLAGS, "--out", str(out_file))
    assert code == 0
    assert len(out_file.read_text().split()) == 91_704


def test_usage_errors_exit_1(capsys):
    assert run(capsys, "bogus")[0] == 1
    assert run(capsys, "space", "validate")[0] == 1
    assert run(capsys, "search", "--init-count", "0")[0] == 1
    assert run(capsys, "select", "nope.csv", "--wd-energy", "-1")[0] == 1


def test_data_errors_exit_2(tmp_path, capsys):
    assert run(capsys, "space", "validate", "--id", str(10**9))[0] == 2
    bad = tmp_path / "bad.csv"
    bad.write_text("t_s,current_a,voltage_v\n0.0,0.1,1.0\n0.0002,x,1.0\n")
    (tmp_path / "bad.window.json").write_text(json.dumps({"t_s": 0, "t_e": 0.0001, "clock": {}}))
    code, _, err = run(capsys, "measure", "extract", "--trace", str(bad))
    assert code == 2 and "bad.csv:3" in err
    code, _, err = run(capsys, "select", str(tmp_path / "missing.csv"))
    assert code == 2


def test_measure_round_trip(tmp_path, capsys):
    trace = tmp_path / "c.csv"
    code, out, _ = run(capsys, "measure", "gen", "--out", str(trace))
    assert code == 0 and json.loads(out)["true_energy_mj"] == pytest.approx(1.0)
    code, out, _ = run(capsys, "measure", "extract", "--trace", str(trace))
    assert code == 0
    assert json.loads(out)["energy_mj"] == pytest.approx(1.0, rel=1e-9)


def test_measure_drifting_trace(tmp_path, capsys):
    trace = tmp_path / "d.csv"
    run(capsys, "measure", "gen", "--out", str(trace), "--start-s", "30", "--duration-s", "40",
        "--offset-s", "0.5", "--drift-ppm", "100", "--jitter-ms", "0.3", "--latency-ms", "80",
        "--idle-current-ma", "20", "--noise", "0.05", "--seed", "4")
    code, out, _ = run(capsys, "measure", "extract", "--trace", str(trace))
    assert code == 0
    assert abs(json.loads(out)["relative_error"]) < 0.02


def _front_csv(path):
    rows = ["arch_id,energy_mj,accuracy,e_norm,a_norm,provenance,iteration",
            "1,1.0,0.80,0.1,0.6,measured,0",
            "2,2.0,0.85,0.3,0.8,measured,0",
            "3,4.0,0.87,0.7,0.9,measured,1"]
    path.write_text("\n".join(rows) + "\n")


def test_select_fixture(tmp_path, capsys):
    front = tmp_path / "front.csv"
    _front_csv(front)
    code, out, err = run(capsys, "select", str(front))
    assert code == 0 and json.loads(out)["arch_id"] == 1
    assert "notice" in err
    code, out, _ = run(capsys, "select", str(front), "--wd-energy", "1", "--wd-accuracy", "10")
    assert json.loads(out)["arch_id"] == 3
    code, out, _ = run(capsys, "select", str(front), "--method", "ws", "--wd-energy", "1", "--wd-accuracy", "1")
    assert json.loads(out)["arch_id"] == 1


@pytest.fixture(scope="module")
def est_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("est") / "estimates.csv"
    synthetic_estimates(200).to_csv(path)
    return path


def _search(capsys, run_dir, est_csv, *extra):
    return run(capsys, "search", *DESK_FLAGS, "--estimates", str(est_csv), "--run-dir", str(run_dir),
               "--init-count", "20", "--per-iter-count", "5", "--max-iterations", "4", "--seed", "7", *extra)


def test_search_and_resume(tmp_path, capsys, est_csv):
    code, out, _ = _search(capsys, tmp_path / "full", est_csv)
    assert code == 0
    summary = json.loads(out)
    assert summary["status"] == "budget-exhausted" and summary["iterations"] == 4
    code, out, _ = _search(capsys, tmp_path / "part", est_csv, "--stop-after", "2")
    assert json.loads(out)["status"] == "interrupted"
    code, out, _ = run(capsys, "search", "--run-dir", str(tmp_path / "part"), "--resume")
    assert code == 0
    assert (tmp_path / "full" / "report.json").read_text() == (tmp_path / "part" / "report.json").read_text()


def test_search_run_root_env(tmp_path, capsys, est_csv, monkeypatch):
    monkeypatch.setenv("ECONAS_RUN_ROOT", str(tmp_path / "root"))
    code, out, _ = run(capsys, "search", *DESK_FLAGS, "--estimates", str(est_csv), "--init-count", "20",
                       "--per-iter-count", "5", "--max-iterations", "1", "--seed", "3")
    assert code == 0
    assert (tmp_path / "root" / "search-seed3" / "report.json").exists()


def test_search_external_adapter(tmp_path, capsys, est_csv):
    script = tmp_path / "adapter.py"
    script.write_text(
        "import json, sys\n"
        "m = json.load(open(sys.argv[1]))\n"
        "e = 1e-3 * m['width_c1'] / 16 * (1 + m['ops'].count('CONVKXK'))\n"
        "json.dump({'energy_j': e, 'latency_s': 0.01, 'avg_current_a': e / 0.04, 'avg_voltage_v': 4.0,\n"
        "           'accuracy': 0.5 + m['width_c1'] / 200 + m['ops'].count('CONVKXK') / 40}, open(sys.argv[2], 'w'))\n")
    code, out, err = _search(capsys, tmp_path / "ext", est_csv, "--backend", "external",
                             "--adapter", f"{sys.executable} {script}", "--max-iterations", "1")
    assert code == 0, err
    assert json.loads(out)["status"] == "budget-exhausted"
    assert run(capsys, "search", *DESK_FLAGS, "--backend", "external", "--run-dir", str(tmp_path / "x"))[0] == 1


def test_estimate_command(tmp_path, capsys):
    out_csv = tmp_path / "e.csv"
    code, out, _ = run(capsys, "estimate", *DESK_FLAGS, "--max-candidates", "40", "--workers", "1",
                       "--out", str(out_csv), "--tau", "40")
    assert code == 0
    data = json.loads(out)
    assert data["rows"] == 40 and 0.3 < data["kendall_tau"] <= 1.0
    assert out_csv.read_text().startswith("arch_id,e_pred_joules,naswot_raw,e_norm,n_norm")


@pytest.mark.skipif(shutil.which("econas") is None, reason="console script not installed")
def test_console_script_exit_codes():
    assert subprocess.run(["econas", "space", "count", *DESK_FLAGS], capture_output=True).returncode == 0
    assert subprocess.run(["econas", "nope"], capture_output=True).returncode == 1
