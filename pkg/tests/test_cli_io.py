import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from nonignorable.cli import main
from nonignorable.cli_io import (
    ColumnMapping,
    RunConfig,
    format_table,
    load_csv,
    parse_config,
    parse_gstar,
    read_csv_sample,
    read_report,
    write_csv,
    write_report,
)
from nonignorable.errors import ConfigurationError, DataError
from nonignorable.kernels import KernelSpec
from nonignorable.simlab import MetricsRow, generate, get_design

MAP = ColumnMapping("y", ("u",), ("z",))


def _write(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


class TestLoadCsv:
    def test_empty_outcome_is_nonresponse(self, tmp_path):
        p = _write(tmp_path, "u,z,y\n0.5,1,2.0\n-0.2,-1,\n1.5,1,NA\n")
        s, summary = read_csv_sample(p, MAP)
        assert s.N == 3 and list(s.r) == [1, 0, 0]
        assert (summary.rows, summary.observed, summary.missing, summary.rejected) == (3, 1, 2, 0)

    def test_extra_columns_and_order(self, tmp_path):
        p = _write(tmp_path, "id,y,z,u\n1,2.5,1,0.25\n2,,-1,0.5\n")
        s = load_csv(p, MAP)
        assert_allclose(s.X, [[0.25, 1], [0.5, -1]])

    def test_non_numeric_covariate(self, tmp_path):
        p = _write(tmp_path, "u,z,y\n0.5,1,2.0\nabc,1,1.0\n")
        with pytest.raises(DataError, match=r"line 3, column 'u'"):
            load_csv(p, MAP)

    def test_missing_covariate(self, tmp_path):
        p = _write(tmp_path, "u,z,y\n0.5,,2.0\n")
        with pytest.raises(DataError, match=r"line 2, column 'z'"):
            load_csv(p, MAP)

    def test_decimal_comma_is_rejected(self, tmp_path):
        p = _write(tmp_path, 'u,z,y\n"0,5",1,2.0\n')
        with pytest.raises(DataError):
            load_csv(p, MAP)

    def test_response_column(self, tmp_path):
        m = ColumnMapping("y", ("u",), ("z",), "r")
        s = load_csv(_write(tmp_path, "u,z,y,r\n0.5,1,2.0,1\n0.1,1,7.0,0\n"), m)
        assert list(s.r) == [1, 0] and np.isnan(s.y[1])
        with pytest.raises(DataError):
            load_csv(_write(tmp_path, "u,z,y,r\n0.5,1,,1\n", "b.csv"), m)
        with pytest.raises(DataError):
            load_csv(_write(tmp_path, "u,z,y,r\n0.5,1,1,2\n", "c.csv"), m)

    def test_structure_errors(self, tmp_path):
        with pytest.raises(DataError):
            load_csv(_write(tmp_path, ""), MAP)
        with pytest.raises(ConfigurationError):
            load_csv(_write(tmp_path, "a,b\n1,2\n", "e.csv"), MAP)
        with pytest.raises(DataError):
            load_csv(_write(tmp_path, "u,z,y\n1,2\n", "f.csv"), MAP)
        with pytest.raises(DataError):
            load_csv(tmp_path / "absent.csv", MAP)

    def test_round_trip(self, tmp_path):
        s = generate(get_design("A"), 300, 5)
        mapping = write_csv(s, tmp_path / "a.csv")
        assert load_csv(tmp_path / "a.csv", mapping) == s
        m2 = ColumnMapping("out", ("a",), ("b",), "resp")
        write_csv(s, tmp_path / "b.csv", m2)
        assert load_csv(tmp_path / "b.csv", m2) == s


class TestConfig:
    def test_minimal_simulate_defaults(self, tmp_path):
        p = _write(tmp_path, "# study\nmode = simulate\ndesign=A\nn=500  # size\nreplicates=10\nseed=3\n", "c.cfg")
        cfg = parse_config(p)
        assert cfg.kernel_spec == KernelSpec("gaussian", 1.5, 1 / 3)
        assert cfg.bootstrap == 200 and cfg.provider == "oracle" and cfg.n == 500

    def test_flags_override_file(self, tmp_path):
        p = _write(tmp_path, "design=A\nn=500\nreplicates=10\nkernel=gaussian:1.5:1/3\n", "c.cfg")
        cfg = parse_config(p, {"kernel": "gaussian:0.8:1/3", "n": None}, mode="simulate")
        assert cfg.kernel_spec.scale == 0.8 and cfg.n == 500

    @pytest.mark.parametrize("text, key", [
        ("kernel=gaussian:-1.5:1/3", "kernel"),
        ("colour=red", "colour"),
        ("n=five", "n"),
        ("provider=magic", "provider"),
        ("replicates=1", "replicates"),
        ("mode=estimate", "mode"),
        ("input=x.csv", "input"),
        ("n=3\nn=4", "n"),
    ])
    def test_rejections_name_the_key(self, tmp_path, text, key):
        base = {"design": "A", "n": "100", "replicates": "5"}
        lines = dict(l.split("=", 1) for l in text.splitlines())
        body = "\n".join(f"{k}={v}" for k, v in base.items() if k not in lines) + "\n" + text + "\n"
        with pytest.raises(ConfigurationError, match=key):
            parse_config(_write(tmp_path, body, "c.cfg"), mode="simulate")

    def test_estimate_requires_disjoint_mapping(self):
        with pytest.raises(ConfigurationError):
            RunConfig("estimate", input="x.csv", ycol="y", ucols=("u",), zcols=("u",), provider="parametric")
        with pytest.raises(ConfigurationError):
            RunConfig("estimate", input="x.csv", ycol="y", ucols=("u",), zcols=("z",), provider="oracle")
        RunConfig("estimate", input="x.csv", ycol="y", ucols=("u",), zcols=("z",), provider="parametric")

    @given(st.dictionaries(
        st.sampled_from(["n", "replicates", "seed", "bootstrap", "tol", "kernel", "provider", "design", "bogus"]),
        st.one_of(st.integers(-5, 2000).map(str), st.sampled_from(["A", "B2", "x", "gaussian:1:1/3", "oracle", "1e-9", ""])),
    ))
    def test_parsing_is_total(self, raw):
        raw = {"design": "A", "n": "50", "replicates": "3", **raw}
        try:
            cfg = parse_config(None, raw, mode="simulate")
        except ConfigurationError as exc:
            assert any(str(exc).startswith(k) for k in list(raw) + ["mode"])
        else:
            assert cfg.n >= 2 and cfg.replicates >= 2 and cfg.design.upper() in ("A", "B1", "B2")


def test_parse_gstar():
    d = get_design("B2")
    assert parse_gstar("default", 2, d) == d.gstar
    assert parse_gstar("true", 2, d) == d.g
    assert parse_gstar("mis:2", 2, d) == d.gstar_misspecified[2]
    assert parse_gstar("zero", 1).q == 1
    assert_allclose(parse_gstar("affine:0.3:0.1", 1)(np.array([2.0])), 0.5)
    assert_allclose(parse_gstar("quad:0:0,1:1,0", 2)(np.array([2.0, 3.0])), 7.0)
    for bad in ("affine:1", "quad:a:b:c", "true", "mis:9", "affine:0:1,2"):
        with pytest.raises(ConfigurationError):
            parse_gstar(bad, 1, d if bad == "mis:9" else None)


class TestReports:
    rows = [
        MetricsRow("naive", "theta", 0.9, 0.2360123456789, 0.0782, 0.2486, 0.075, 12.5, 100, 0),
        MetricsRow("beta[oracle]", "beta", -0.2, -0.0024, 0.0745, 0.0744, None, None, 100, 7),
    ]

    def test_text_table(self, tmp_path):
        write_report(self.rows, "text", tmp_path / "t.txt")
        text = (tmp_path / "t.txt").read_text()
        head = text.splitlines()[0]
        for col in ("Bias", "SD", "SE", "CVP"):
            assert col in head
        assert "23.60" in text and "-0.24" in text and "7*" in text
        assert text == format_table(self.rows)

    def test_csv_round_trip(self, tmp_path):
        write_report(self.rows, "csv", tmp_path / "r.csv")
        assert read_report(tmp_path / "r.csv") == self.rows

    def test_errors(self, tmp_path):
        with pytest.raises(ConfigurationError):
            write_report([], "csv", tmp_path / "r.csv")
        assert not (tmp_path / "r.csv").exists()
        with pytest.raises(ConfigurationError):
            write_report(self.rows, "csv", tmp_path / "missing" / "r.csv")


class TestCli:
    def test_simulate(self, tmp_path, capsys):
        out = tmp_path / "rep.csv"
        code = main(["simulate", "--design", "B1", "--n", "200", "--replicates", "3", "--seed", "1",
                     "--provider", "parametric", "--out", str(out)])
        assert code == 0
        assert len(read_report(out)) == 4
        assert "theta[parametric]" in capsys.readouterr().out

    def test_simulate_config_file_with_override(self, tmp_path):
        cfg = _write(tmp_path, "design = A\nn = 150\nreplicates = 2\nformat = text\n", "s.cfg")
        out = tmp_path / "rep.txt"
        assert main(["simulate", "--config", str(cfg), "--replicates", "3", "--out", str(out)]) == 0
        assert "Bias" in out.read_text()

    def test_config_errors_exit_2(self, tmp_path):
        assert main(["simulate", "--design", "A"]) == 2
        assert main(["simulate", "--design", "A", "--n", "100", "--replicates", "3", "--kernel", "gaussian:-1"]) == 2
        assert main(["frobnicate"]) == 2
        assert main(["simulate", "--design", "A", "--n", "100", "--replicates", "3",
                     "--out", str(tmp_path / "no" / "x.csv")]) == 2

    def _data(self, tmp_path, n=400):
        s = generate(get_design("A"), n, 8)
        write_csv(s, tmp_path / "data.csv")
        return ["estimate", "--input", str(tmp_path / "data.csv"), "--ycol", "y", "--ucols", "u1", "--zcols", "z1"]

    def test_estimate(self, tmp_path, capsys):
        args = self._data(tmp_path) + ["--provider", "nonparametric", "--gstar", "affine:0:-0.4",
                                       "--bootstrap", "4", "--seed", "2", "--out", str(tmp_path / "e.csv")]
        assert main(args) == 0
        lines = (tmp_path / "e.csv").read_text().splitlines()
        assert lines[0] == "parameter,estimate,se,se_bootstrap"
        assert lines[1].startswith("beta,") and lines[2].startswith("theta,")
        assert "400 rows" in capsys.readouterr().out

    def test_data_error_exit_3(self, tmp_path):
        _write(tmp_path, "u1,z1,y\n0.5,x,1\n", "bad.csv")
        args = ["estimate", "--input", str(tmp_path / "bad.csv"), "--ycol", "y", "--ucols", "u1",
                "--zcols", "z1", "--provider", "parametric"]
        assert main(args) == 3

    def test_numerical_failure_exit_4(self, tmp_path):
        args = self._data(tmp_path) + ["--provider", "parametric", "--max-iter", "1", "--bootstrap", "0"]
        assert main(args) == 4

    def test_module_entry_point(self):
        res = subprocess.run([sys.executable, "-m", "nonignorable", "--help"], capture_output=True, text=True)
        assert res.returncode == 0 and "simulate" in res.stdout
