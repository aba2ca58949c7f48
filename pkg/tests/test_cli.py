import csv
import json
from importlib import resources

import pytest

from widedegen.cli import ConfigError, gauge_selftest, load_config, main, parse_config, write_csv


def bundled(name):
    return json.loads(resources.files("widedegen").joinpath(f"data/{name}.json").read_text())


def top_csvs(path):
    return sorted(p.name for p in path.glob("*.csv"))


@pytest.fixture(scope="module")
def smoke(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    code = main(["run", "--config", "affine-smoke", "--out", str(out)])
    return code, out


def test_affine_smoke_passes(smoke):
    code, out = smoke
    assert code == 0
    assert len(top_csvs(out)) == 4
    doc = json.loads((out / "manifest.json").read_text())
    assert doc["passed"] and all(doc["checks"].values())
    assert [s["stage"] for s in doc["stages"]] == ["body", "integrand", "regularize", "solve", "harness"]


def test_rerun_byte_identical(smoke, tmp_path):
    _, first = smoke
    assert main(["run", "--config", "affine-smoke", "--out", str(tmp_path)]) == 0
    for name in top_csvs(first):
        assert (first / name).read_bytes() == (tmp_path / name).read_bytes()
    a = json.loads((first / "manifest.json").read_text())
    b = json.loads((tmp_path / "manifest.json").read_text())
    assert a["manifest_hash"] == b["manifest_hash"]


def test_threads_do_not_change_outputs(smoke, tmp_path):
    _, first = smoke
    assert main(["run", "--config", "affine-smoke", "--out", str(tmp_path), "--threads", "3"]) == 0
    for name in top_csvs(first):
        assert (first / name).read_bytes() == (tmp_path / name).read_bytes()


def test_profile_config(tmp_path):
    assert main(["run", "--config", "profile-p2", "--out", str(tmp_path)]) == 0
    names = top_csvs(tmp_path)
    assert "profile_error.csv" in names and "cascade.csv" in names
    with open(tmp_path / "profile_error.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3
    assert all(float(r["ratio"]) <= 0.75 for r in rows[1:])


def test_eps_zero_rejected_before_solving(tmp_path, capsys):
    raw = bundled("affine-smoke")
    raw["epsilons"] = [1.0, 0.0]
    raw["output"] = str(tmp_path / "out")
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(raw))
    assert main(["run", "--config", str(path)]) == 2
    assert "eps" in capsys.readouterr().err.lower()
    assert not (tmp_path / "out").exists()


@pytest.mark.parametrize(
    "patch",
    [
        {"deltas": [1.5]},
        {"g": {"family": "nope"}},
        {"body": {"type": "ball", "dimension": 2}},
        {"unknown_key": 1},
        {"harness": {"cascad": {}}},
    ],
)
def test_invalid_configs(patch):
    raw = bundled("affine-smoke")
    raw.update(patch)
    with pytest.raises(ConfigError):
        parse_config(raw)


def test_usage_errors(capsys):
    assert main([]) == 2
    assert main(["run"]) == 2
    assert main(["run", "--config", "no-such-config"]) == 2
    assert main(["run", "--config", "affine-smoke", "--threads", "0"]) == 2


def test_seed_and_out_override(tmp_path):
    cfg = load_config("affine-smoke", seed=7, out=str(tmp_path))
    assert cfg.seed == 7 and cfg.output == str(tmp_path)
    assert cfg.hash != load_config("affine-smoke").hash


def test_solve_only_then_report_only(tmp_path, smoke):
    _, first = smoke
    assert main(["solve-only", "--config", "affine-smoke", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "fields").is_dir()
    assert not (tmp_path / "cascade.csv").exists()
    assert main(["report-only", "--config", "affine-smoke", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "cascade.csv").read_bytes() == (first / "cascade.csv").read_bytes()


def test_report_only_without_fields(tmp_path):
    assert main(["report-only", "--config", "affine-smoke", "--out", str(tmp_path)]) == 1
    doc = json.loads((tmp_path / "manifest.json").read_text())
    assert doc["stages"][-1]["status"] == "failed"


def test_write_csv_format(tmp_path):
    write_csv(tmp_path / "t.csv", ["a", "b", "c"], [[0.1, True, None]])
    assert (tmp_path / "t.csv").read_text().splitlines() == ["a,b,c", "0.1,true,"]


def write_body(tmp_path, spec):
    p = tmp_path / "body.json"
    p.write_text(spec if isinstance(spec, str) else json.dumps(spec))
    return str(p)


def test_selftest_ball(tmp_path, capsys):
    path = write_body(tmp_path, {"type": "ball", "dimension": 2, "radius": 1.0})
    assert main(["gauge-selftest", path]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.count("PASS") >= 5


def test_selftest_square_with_bisection(tmp_path, capsys):
    path = write_body(tmp_path, {"type": "polytope", "dimension": 2, "vertices": [[1, 1], [-1, 1], [-1, -1], [1, -1]]})
    assert main(["gauge-selftest", path, "--samples", "10000"]) == 0
    assert "PASS  membership_bisection" in capsys.readouterr().out


def test_selftest_deterministic(tmp_path):
    import io

    path = write_body(tmp_path, {"type": "polytope", "dimension": 2, "vertices": [[2, -0.5], [-0.5, 1.5], [-1, -1]]})
    a, b = io.StringIO(), io.StringIO()
    assert gauge_selftest(path, 2000, 3, out=a) and gauge_selftest(path, 2000, 3, out=b)
    assert a.getvalue() == b.getvalue()


@pytest.mark.parametrize(
    "spec",
    [
        '{"type": "ball", "dimension": 2, "radius": 1.0',
        {"type": "polytope", "dimension": 2, "vertices": [[1, 0], [0, 1], [-1, 0]]},
        {"type": "ellipsoid", "dimension": 2, "matrix": [[1, 2], [2, 1]]},
        {"type": "cube", "dimension": 2},
    ],
)
def test_selftest_corrupted_body(tmp_path, capsys, spec):
    assert main(["gauge-selftest", write_body(tmp_path, spec)]) == 2
    assert "error" in capsys.readouterr().err


def test_all_harness_switches(tmp_path):
    raw = bundled("profile-p2")
    raw["grid"]["h"] = 1 / 32
    raw["epsilons"] = [0.5, 0.25, 0.125]
    raw["g"]["params"]["eps"] = 0.0
    raw["harness"] = {
        "cascade": {"x0": [0.75, 0.5], "rho": 0.125, "kappa": 0.9},
        "convergence": True,
        "continuity": {"radii": [1 / 32, 2 / 32, 4 / 32, 10 / 32]},
        "subsolution": {"x0": [0.75, 0.5], "rho": 0.125},
    }
    raw["output"] = str(tmp_path)
    path = tmp_path / "all.json"
    path.write_text(json.dumps(raw))
    assert main(["run", "--config", str(path)]) == 0
    assert top_csvs(tmp_path) == sorted(
        ["apriori.csv", "cascade.csv", "continuity.csv", "convergence.csv", "regimes.csv", "solutions.csv", "subsolution.csv"]
    )
    with open(tmp_path / "subsolution.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 3 * 8 * 2 and not any(r["empty"] == "true" for r in rows)
