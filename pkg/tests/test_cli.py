import csv
import hashlib
import json

import pytest

from mfg_lane.cli import main
from mfg_lane.ngsim import fixture_path

FAST = ["--grid", "40x9", "--horizon", "3", "--quiet"]


def test_unknown_scenario_is_usage_error(tmp_path):
    assert main(["run", "nosuch", "--out", str(tmp_path)]) == 2


def test_bad_grid_is_usage_error(tmp_path):
    assert main(["equilibrium", "combo1", "--grid", "40by9", "--out", str(tmp_path)]) == 2


def test_no_subcommand():
    with pytest.raises(SystemExit) as e:
        main([])
    assert e.value.code == 2


def test_check_suite_passes(capsys):
    assert main(["check"]) == 0


@pytest.fixture(scope="module")
def run8(tmp_path_factory):
    out = tmp_path_factory.mktemp("run8")
    assert main(["run", "scenario8", *FAST, "--out", str(out)]) == 0
    return out


def test_manifest_hashes(run8):
    man = json.loads((run8 / "manifest.json").read_text())
    assert man["command"] == "run" and man["scenario"] == "scenario8"
    names = [f["file"] for f in man["files"]]
    assert names == sorted(names)
    for f in man["files"]:
        data = (run8 / f["file"]).read_bytes()
        assert hashlib.sha256(data).hexdigest() == f["sha256"] and len(data) == f["bytes"]
    assert {"trajectory.csv", "metrics.json", "residuals.csv", "candidates.json"} <= set(names)


def test_trajectory_rows(run8):
    with open(run8 / "trajectory.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    n_steps = 30
    assert len(rows) == 1 + (n_steps + 1) * 18
    assert len({r[1] for r in rows[1:]}) == 18


def test_empty_snapshots(tmp_path):
    assert main(["equilibrium", "combo1", *FAST, "--snapshots", "", "--out", str(tmp_path)]) == 0
    assert not (tmp_path / "density").exists()
    names = [f["file"] for f in json.loads((tmp_path / "manifest.json").read_text())["files"]]
    assert names == ["residuals.csv"]


def test_params_file_overrides(tmp_path):
    p = tmp_path / "p.json"
    p.write_text(json.dumps({"solver": {"max_iters": 1, "eps_conv": 1e-12}}))
    out = tmp_path / "o"
    assert main(["equilibrium", "combo1", *FAST, "--params", str(p), "--out", str(out)]) == 0
    summary = json.loads((out / "manifest.json").read_text())["equilibrium"]
    assert summary["iterations"] == 1 and summary["converged"] is False


def test_bad_params_file(tmp_path):
    p = tmp_path / "p.json"
    p.write_text("{not json")
    assert main(["equilibrium", "combo1", *FAST, "--params", str(p), "--out", str(tmp_path)]) == 2


def test_ngsim_subcommand(tmp_path):
    assert main(["ngsim", str(fixture_path()), "--imperial", "--horizon", "3", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "manifest.json").exists()


def test_ngsim_missing_file(tmp_path):
    assert main(["ngsim", str(tmp_path / "none.csv"), "--out", str(tmp_path)]) in (1, 2)


def test_unwritable_output_is_domain_error(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["equilibrium", "combo1", *FAST, "--out", str(blocker / "sub")]) == 1


def test_repeat_run_byte_identical(tmp_path):
    for tag in ("a", "b"):
        assert main(["run", "combo1", "--seed", "7", *FAST, "--out", str(tmp_path / tag)]) == 0
    man = json.loads((tmp_path / "a" / "manifest.json").read_text())
    for f in man["files"]:
        assert (tmp_path / "a" / f["file"]).read_bytes() == (tmp_path / "b" / f["file"]).read_bytes()
        assert f["bytes"] > 0
