import csv
import json

import numpy as np
import pytest

from callback_ineq import cli
from callback_ineq.estimator import fit_em
from callback_ineq.model import BasisSpec
from callback_ineq.simulation import SimDesign, generate_sample


def write(tmp_path, text, name="data.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


# --------------------------------------------------------------------------
# ingestion


def test_ingest_basic(tmp_path):
    data, rep = cli.ingest(write(tmp_path, "y,d\n1.0,1\n2.0,2\n,3\n"), 2)
    assert (data.N, data.n) == (3, 2)
    assert rep.counts == [1, 1, 1]
    assert rep.rates()[0] == (1, 1, pytest.approx(1 / 3))


def test_ingest_collapse_many_attempts(tmp_path):
    rng = np.random.default_rng(0)
    lines = ["y,d"]
    for _ in range(200):
        d = int(rng.integers(1, 20))
        lines.append(f",{d}" if d == 19 else f"{rng.exponential() + 0.01!r},{d}")
    data, rep = cli.ingest(write(tmp_path, "\n".join(lines) + "\n"), 3, collapse_at=3)
    assert set(np.unique(data.d)) <= {1, 2, 3, 4}
    assert set(np.unique(data.d)) == {1, 2, 3, 4}
    assert rep.recoded > 0


@pytest.mark.parametrize("text, line, code", [
    ("y,d\nabc,1\n", 2, "E_DATA"),
    ("y,d\n1.0,1\n2.0,x\n", 3, "E_DATA"),
    ("y,d\n1.0,1\n2.0,3\n", 3, "E_DATA"),
    ("y,d\n1.0,1\n,1\n", 3, "E_DATA"),
    ("y,d\n1.0,1,5\n", 2, "E_DATA"),
    ("y,d\n1.0,1\n-2.0,2\n", 3, "E_DOMAIN"),
])
def test_ingest_errors_name_line(tmp_path, text, line, code):
    with pytest.raises(cli.CallbackIneqError) as e:
        cli.ingest(write(tmp_path, text), 2)
    assert e.value.code == code
    assert f"line {line}" in str(e.value)


def test_ingest_header_required(tmp_path):
    with pytest.raises(cli.DataError):
        cli.ingest(write(tmp_path, "a,b\n1,1\n"), 2)


def test_round_trip_matches_in_memory_fit(tmp_path):
    data = generate_sample(SimDesign(N=300, M=1, base_seed=8), 0)
    p = tmp_path / "rt.csv"
    cli.write_dataset(p, data)
    back, _ = cli.ingest(p, 2)
    assert np.array_equal(back.y, data.y, equal_nan=True) and np.array_equal(back.d, data.d)
    a, b = fit_em(data, BasisSpec(("logy",))), fit_em(back, BasisSpec(("logy",)))
    assert np.array_equal(a.params.to_vector(), b.params.to_vector()) and a.eta == b.eta


# --------------------------------------------------------------------------
# estimate


def test_estimate_on_bundled_sample(tmp_path, capsys):
    cdf, dens, rates = tmp_path / "F.csv", tmp_path / "f.csv", tmp_path / "r.csv"
    code, out, err = run(["estimate", "--input", cli.sample_path(), "--m", 2, "--basis", "logy",
                          "--export-cdf", cdf, "--export-density", dens, "--export-rates", rates], capsys)
    assert code == 0, err
    doc = json.loads(out)
    assert set(doc) >= {"model", "estimates", "parameter_intervals", "measures", "convergence", "diagnostics",
                        "input", "units"}
    assert [p["measure"] for p in doc["parameter_intervals"]] == ["alpha1", "alpha2", "beta[logy]", "eta"]
    names = [m["measure"] for m in doc["measures"]]
    assert {"quantile(0.5)", "theil", "gini"} <= set(names)
    for m in doc["measures"] + doc["parameter_intervals"]:
        assert m["ci_lower"] <= m["estimate"] <= m["ci_upper"]
    assert "lambda_minus_inverse_eta" in doc["diagnostics"]
    with cdf.open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["y", "F"]
    F = np.array([float(r[1]) for r in rows[1:]])
    assert np.all(np.diff(F) >= 0) and F[-1] == pytest.approx(1.0)
    assert rates.read_text().splitlines()[0] == "attempt,count,rate"
    assert dens.read_text().splitlines()[0] == "y,f"


def test_intercept_only_reports_n_over_N(tmp_path, capsys):
    code, out, _ = run(["estimate", "--input", cli.sample_path(), "--m", 2, "--basis", "none", "--tol", "1e-12"],
                       capsys)
    assert code == 0
    doc = json.loads(out)
    assert doc["estimates"]["eta"] == pytest.approx(doc["model"]["n"] / doc["model"]["N"], abs=1e-8)


def test_estimate_errors_are_coded(tmp_path, capsys):
    bad = write(tmp_path, "y,d\nabc,1\n")
    code, _, err = run(["estimate", "--input", bad, "--m", 2, "--basis", "logy"], capsys)
    assert code != 0
    payload = json.loads(err)
    assert payload["error"] == "E_DATA" and payload["line"] == 2
    full = write(tmp_path, "y,d\n1.0,1\n2.0,2\n", "full.csv")
    code, _, err = run(["estimate", "--input", full, "--m", 2, "--basis", "logy"], capsys)
    assert code != 0 and json.loads(err)["error"] == "E_CONDITION_C2"
    code, _, err = run(["estimate", "--input", full, "--m", 2, "--basis", "sqrt"], capsys)
    assert code != 0 and json.loads(err)["error"] == "E_CONFIG"
    code, _, err = run(["estimate", "--m", 2], capsys)
    assert code != 0 and json.loads(err)["error"] == "E_CONFIG"


# --------------------------------------------------------------------------
# select


def test_select_marks_best(tmp_path, capsys):
    out_csv = tmp_path / "sel.csv"
    code, out, err = run(["select", "--input", cli.sample_path(), "--m", 2, "--output", out_csv], capsys)
    assert code == 0, err
    with out_csv.open() as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 14
    assert sum(r["best_aic"] == "true" for r in rows) == 1
    assert sum(r["best_bic"] == "true" for r in rows) == 1
    assert rows[0]["best_aic"] == "true" and rows[0]["rank"] == "1"
    assert "best_aic" in out


# --------------------------------------------------------------------------
# simulate


def _config(tmp_path, **kw):
    cfg = {"N": 150, "M": 2, "seed": 3} | kw
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg))
    return p


def test_simulate_smoke_and_manifest(tmp_path, capsys):
    out = tmp_path / "o"
    code, text, err = run(["simulate", "--config", _config(tmp_path, M=1), "--threads", 1, "--output-dir", out],
                          capsys)
    assert code == 0, err
    with (out / "metrics.csv").open() as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 5 * 3
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 3 and manifest["seed_source"] == "config" and manifest["wall_time_s"] > 0
    assert "RBx100" in text and "CP" in text


def test_simulate_deterministic_bytes(tmp_path, capsys):
    cfg = _config(tmp_path)
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(["simulate", "--config", cfg, "--threads", 1, "--output-dir", a], capsys)[0] == 0
    assert run(["simulate", "--config", cfg, "--threads", 2, "--output-dir", b], capsys)[0] == 0
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()


def test_seed_precedence(tmp_path, monkeypatch):
    assert cli.resolve_seed(None, 5, env={}) == (5, "config")
    assert cli.resolve_seed(None, 5, env={cli.SEED_ENV: "9"}) == (9, "env")
    assert cli.resolve_seed(1, 5, env={cli.SEED_ENV: "9"}) == (1, "flag")
    with pytest.raises(cli.ConfigError):
        cli.resolve_seed(None, 5, env={cli.SEED_ENV: "x"})


def test_simulate_env_seed(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv(cli.SEED_ENV, "11")
    out = tmp_path / "o"
    assert run(["simulate", "--config", _config(tmp_path, M=1), "--threads", 1, "--output-dir", out],
               capsys)[0] == 0
    assert json.loads((out / "manifest.json").read_text())["seed"] == 11


def test_simulate_export_round_trip(tmp_path, capsys):
    sample = tmp_path / "s.csv"
    assert run(["simulate", "--config", _config(tmp_path, M=1), "--threads", 1, "--output-dir", tmp_path / "o",
                "--export-sample", sample], capsys)[0] == 0
    data, _ = cli.ingest(sample, 2)
    mem = generate_sample(SimDesign(N=150, M=1, base_seed=3), 0)
    assert np.array_equal(data.y, mem.y, equal_nan=True)


def test_simulate_bad_config(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text('{"N": 150, "bogus": 1}')
    code, _, err = run(["simulate", "--config", p, "--output-dir", tmp_path], capsys)
    assert code != 0 and json.loads(err)["error"] == "E_CONFIG"


def test_numbers_are_locale_independent():
    assert cli.fmt(1234567.5) == "1234567.5"
    assert cli.fmt(float("nan")) == "nan"
    assert cli.fmt(None) == "" and cli.fmt(True) == "true"
