import csv
import json

import pytest

from aoi_bench.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, EXIT_VERIFY, main
from aoi_bench.model import ScenarioConfig
from aoi_bench.presets import CSV_HEADER, lam_for, parse_rho


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_parse_rho():
    assert parse_rho("0.2:1.4:0.2") == [0.2, 0.4, 0.6, 0.8, 1.0, 1.2, 1.4]
    assert parse_rho("0.5,1.5") == [0.5, 1.5]
    assert lam_for(1.2, 50, 3) == pytest.approx(1.2 * 3 / 50)


def test_fig4_sweep_shape(tmp_path):
    code = main(["run", "--preset", "fig4", "--rho", "0.2:1.4:0.2", "--reps", "200", "--seed", "7",
                 "--horizon", "100", "-o", str(tmp_path)])
    assert code == EXIT_OK
    rows = read_csv(tmp_path / "fig4.csv")
    assert tuple(rows[0]) == CSV_HEADER
    body = rows[1:]
    assert len(body) == 4 * 7
    assert {r[0] for r in body} == {"p-maf-lgfs", "p-maf-fcfs", "rand-lgfs", "rand-fcfs"}
    assert {r[5] for r in body} == {"age_max"}
    assert all(r[3] == "7" and r[4] == "200" for r in body)
    resolved = json.loads((tmp_path / "fig4.config.json").read_text())
    assert resolved["base"]["n_flows"] == 3 and resolved["reps"] == 200


def test_fig5_includes_lower_bound_series(tmp_path):
    assert main(["run", "--preset", "fig5", "--rho", "0.8", "--reps", "2", "--horizon", "50",
                 "-o", str(tmp_path)]) == EXIT_OK
    body = read_csv(tmp_path / "fig5.csv")[1:]
    assert ("np-masif-lgfs", "asi_avg") in {(r[0], r[5]) for r in body}
    assert len(body) == 6


def test_sweep_csv_is_byte_identical(tmp_path):
    outs = []
    for k in range(2):
        d = tmp_path / str(k)
        assert main(["run", "--preset", "fig5", "--rho", "0.4,1.2", "--reps", "3", "--seed", "11",
                     "--horizon", "100", "-o", str(d)]) == EXIT_OK
        outs.append((d / "fig5.csv").read_bytes())
    assert outs[0] == outs[1]


def test_oracle_suite_exit_zero(capsys):
    assert main(["verify", "--suite", "discrete-oracle"]) == EXIT_OK
    assert "PASS" in capsys.readouterr().out


def test_invalid_scenario_exit_two(tmp_path, capsys):
    cfg = ScenarioConfig(3, 2, error_prob=0.0).to_dict()
    cfg["error_prob"] = 1.0
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    assert main(["run", "--scenario", str(path), "--policy", "np-masif-lgfs"]) == EXIT_CONFIG
    assert "error_prob must be < 1" in capsys.readouterr().err


def test_scenario_run_and_coupled(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(ScenarioConfig(3, 2, horizon=80.0, seed=4).dumps())
    out = tmp_path / "out"
    assert main(["run", "--scenario", str(path), "--policy", "p-maf-lgfs,rand-fcfs", "--reps", "3",
                 "-o", str(out)]) == EXIT_OK
    assert len(read_csv(out / "cfg.csv")) == 3
    assert main(["run", "--scenario", str(path), "--policy", "p-maf-lgfs,maf-fcfs", "--couple",
                 "-o", str(out)]) in (EXIT_OK, EXIT_VERIFY)
    assert (out / "dominance.csv").exists()
    assert (out / "trace-p-maf-lgfs.csv").exists() and (out / "trace-maf-fcfs.csv").exists()


def test_emit_trace(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(ScenarioConfig(3, 2, horizon=20.0).dumps())
    target = tmp_path / "t.jsonl"
    assert main(["emit", "--scenario", str(path), "--format", "jsonl", "-o", str(target)]) == EXIT_OK
    assert json.loads(target.read_text().splitlines()[0])["meta"]["n_flows"] == 3


def test_verification_failure_exit_one(capsys):
    # seed 12 shows an idle-position epoch early in the run
    code = main(["verify", "--suite", "continuous", "--reps", "1", "--seed", "11", "--horizon", "50"])
    assert code == EXIT_VERIFY
    assert "FAIL" in capsys.readouterr().out


def test_io_failure_exit_three(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    code = main(["run", "--preset", "fig4", "--rho", "1.0", "--reps", "1", "--horizon", "10",
                 "-o", str(blocker / "sub")])
    assert code == EXIT_IO
    assert main(["run", "--scenario", str(tmp_path / "missing.json")]) == EXIT_IO


@pytest.mark.parametrize("argv", [
    ["run"],
    ["run", "--preset", "fig9"],
    ["run", "--preset", "fig4", "--policy", "lifo"],
    ["verify", "--suite", "nothing"],
    ["run", "--preset", "fig4", "--reps", "0"],
])
def test_bad_arguments_exit_two(argv):
    assert main(argv) == EXIT_CONFIG
