import csv
import io
import json
import math
from pathlib import Path

import pytest

from sheball import cli
from sheball import experiments as ex
from sheball import io as sio
from sheball.errors import SchemaError

SMALL_LAMBDA = {"process": "BM", "epsilons": "0.6, 0.5, 0.4", "grids": "32, 64",
                "particles": "100", "repetitions": "3"}


# -- schema ------------------------------------------------------------------------------

def test_defaults_filled():
    s = ex.ExperimentSpec("recursion", {})
    assert s.params == {"c": [0.5, 1.0, 4.0], "n": 10**6}
    assert s.id == "recursion"


@pytest.mark.parametrize("kind,params,field", [
    ("recursion", {"n": "5"}, "params.n"),
    ("recursion", {"c": "-1"}, "params.c"),
    ("recursion", {"bogus": "1"}, "params.bogus"),
    ("min_grid", {}, "params.lam"),
    ("lambda_fit", {"particles": "10"}, "params.particles"),
    ("lambda_fit", {"grids": "1.5, 64"}, "params.grids"),
    ("localization_rate", {"t_list": "0.5"}, "params.t_list"),
])
def test_schema_errors_name_the_field(kind, params, field):
    with pytest.raises(SchemaError) as e:
        ex.ExperimentSpec(kind, params)
    assert str(e.value).startswith(field)


def test_schema_kind_and_seed_errors():
    with pytest.raises(SchemaError, match="experiment.kind"):
        ex.ExperimentSpec("nope", {})
    with pytest.raises(SchemaError, match="experiment.seed"):
        ex.ExperimentSpec("recursion", {}, seed=-1)
    with pytest.raises(SchemaError, match="experiment.color"):
        ex.ExperimentSpec.from_ini("[experiment]\nkind = recursion\ncolor = red\n")
    with pytest.raises(SchemaError, match="experiment"):
        ex.ExperimentSpec.from_ini("[params]\nn = 10\n")


def test_ini_round_trip(tmp_path):
    s = ex.ExperimentSpec("lambda_fit", SMALL_LAMBDA, "demo", 42)
    p = tmp_path / "demo.ini"
    p.write_text(s.to_ini())
    t = ex.ExperimentSpec.from_ini(str(p))
    assert t.to_dict() == s.to_dict()
    assert ex.ExperimentSpec.from_ini(s.to_ini()).to_dict() == s.to_dict()


def test_every_kind_has_target_and_runner():
    assert set(ex.SCHEMAS) == set(ex.TARGETS) == set(ex.RUNNERS)
    assert len(ex.SCHEMAS) == 12


# -- run and rerun ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def lambda_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("res")
    spec = ex.ExperimentSpec("lambda_fit", SMALL_LAMBDA, "small-lambda", 5)
    return out, ex.run(spec, out)


def test_run_layout(lambda_run):
    out, man = lambda_run
    d = Path(man.directory)
    assert d.parent == out / "small-lambda"
    names = {p.name for p in d.iterdir()}
    assert {"manifest.json", "summary.md", "experiment.ini", "estimates.csv", "fit.json"} <= names
    assert not any(n.startswith(".tmp") for n in names)
    m = json.loads((d / "manifest.json").read_text())
    for key in ("experiment_id", "kind", "config", "seed", "version", "started", "finished",
                "files", "target"):
        assert key in m
    for name, digest in m["files"].items():
        assert sio.file_digest(d / name) == digest


def test_estimates_csv_format(lambda_run):
    _, man = lambda_run
    rows = list(csv.DictReader(io.StringIO((Path(man.directory) / "estimates.csv").read_text())))
    assert list(rows[0]) == list(sio.ESTIMATE_COLUMNS) + ["n"]
    for r in rows:
        assert float(r["ci_lo"]) <= float(r["p_hat"]) <= float(r["ci_hi"])
    assert {r["n"] for r in rows} == {"32", "64", "inf"}


def test_fit_json_contents(lambda_run):
    _, man = lambda_run
    fit = json.loads((Path(man.directory) / "fit.json").read_text())
    assert fit["oracle_lambda"] == pytest.approx(math.pi**2 / 8)
    assert fit["exponent"] == 2.0
    assert "lambda_hat" in fit["fit"]


def test_rerun_identical(lambda_run):
    _, man = lambda_run
    res = ex.rerun(Path(man.directory) / "manifest.json", threads=3)
    assert res["identical"], res["mismatched"]
    assert res["manifest"].directory != man.directory


def test_threads_equal_serial(tmp_path):
    spec = ex.ExperimentSpec("decomposition_check", {"paths": "9000", "sampler_n": "16", "n": "16"},
                             "dec", 3)
    a = ex.run(spec, tmp_path / "a", threads=1)
    b = ex.run(spec, tmp_path / "b", threads=4)
    assert a.files == b.files


@pytest.mark.parametrize("kind,params", [
    ("recursion", {"n": "1000"}),
    ("entropy", {}),
    ("d_bound", {}),
    ("hz_gap", {"t_list": "0.01, 0.1, 1"}),
    ("chung_diagnostic", {"n": "257", "paths": "50", "eps_min": "0.01"}),
])
def test_quick_kinds_run(tmp_path, kind, params):
    man = ex.run(ex.ExperimentSpec(kind, params), tmp_path)
    assert (Path(man.directory) / "summary.md").read_text().startswith(f"# {kind.replace('_', '-')}")


def test_hz_gap_has_no_failures(tmp_path):
    man = ex.run(ex.ExperimentSpec("hz_gap", {}), tmp_path)
    assert man.failures == []


# -- serialization ----------------------------------------------------------------------------

def test_json_non_finite_and_sorted():
    txt = sio.dumps_json({"b": float("inf"), "a": [float("nan"), -float("inf")]})
    assert json.loads(txt) == {"a": ["nan", "-inf"], "b": "inf"}
    assert txt.index('"a"') < txt.index('"b"')


def test_csv_round_trip_floats():
    x = 0.1 + 0.2
    txt = sio.dumps_csv([{"v": x, "s": "a"}], ("v", "s"))
    assert float(txt.splitlines()[1].split(",")[0]) == x


def test_atomic_write(tmp_path):
    p = sio.atomic_write(tmp_path / "sub" / "f.txt", "hello")
    assert p.read_text() == "hello"
    assert [q.name for q in p.parent.iterdir()] == ["f.txt"]


# -- CLI exit codes ------------------------------------------------------------------------------

def test_cli_success_and_rerun(tmp_path, capsys):
    assert cli.main(["verify", "recursion", "--set", "n=1000", "--out", str(tmp_path), "--id", "r"]) == 0
    d = next((tmp_path / "r").iterdir())
    assert cli.main(["rerun", str(d / "manifest.json")]) == 0
    assert "identical" in capsys.readouterr().out


def test_cli_schema_error_exit_2(tmp_path, capsys):
    assert cli.main(["verify", "recursion", "--set", "n=3", "--out", str(tmp_path)]) == 2
    assert "params.n" in capsys.readouterr().err
    assert cli.main(["verify", "recursion", "--set", "oops", "--out", str(tmp_path)]) == 2


def test_cli_module_error_exit_3(tmp_path, capsys):
    # gamma outside the admissible range is rejected by the module, not the schema
    code = cli.main(["min-grid", "--set", "lam=1", "--set", "gamma=9", "--out", str(tmp_path)])
    assert code == 3
    assert "gamma must satisfy" in capsys.readouterr().err
    assert cli.main(["run", str(tmp_path / "missing.ini"), "--out", str(tmp_path)]) == 3
    bad = tmp_path / "bad.ini"
    bad.write_text("kind = recursion\n")
    assert cli.main(["run", str(bad), "--out", str(tmp_path)]) == 2


def test_cli_failed_check_exit_1(tmp_path):
    # the first doubling ratios of the cover lie outside [1.8, 2.2]
    assert cli.main(["verify", "entropy", "--out", str(tmp_path)]) == 1


def test_cli_rerun_mismatch_exit_1(tmp_path):
    assert cli.main(["verify", "recursion", "--set", "n=1000", "--out", str(tmp_path), "--id", "r"]) == 0
    d = next((tmp_path / "r").iterdir())
    (d / "manifest.json").write_text((d / "manifest.json").read_text().replace(
        '"summary.md": "', '"summary.md": "0'))
    assert cli.main(["rerun", str(d)]) == 1


def test_cli_sample_kernel_estimate(tmp_path):
    p = tmp_path / "paths.csv"
    assert cli.main(["sample", "--process", "F_fbm14", "--n", "9", "--count", "3", "--out", str(p)]) == 0
    rows = list(csv.DictReader(p.open()))
    assert len(rows) == 27 and list(rows[0]) == ["path_id", "t_index", "value"]
    k = tmp_path / "k.csv"
    assert cli.main(["kernel", "--process", "T_aux", "--n", "5", "--out", str(k)]) == 0
    assert len(k.read_text().splitlines()) == 26
    e = tmp_path / "e.csv"
    assert cli.main(["estimate", "--process", "BM", "--eps", "1", "2", "--method", "plain",
                     "--count", "2000", "--n", "64", "--out", str(e)]) == 0
    assert len(e.read_text().splitlines()) == 3


def test_cli_run_ini(tmp_path):
    ini = tmp_path / "x.ini"
    ini.write_text("[experiment]\nkind = recursion\nid = ini-demo\nseed = 3\n\n[params]\nn = 2000\n")
    assert cli.main(["run", str(ini), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "ini-demo").is_dir()
