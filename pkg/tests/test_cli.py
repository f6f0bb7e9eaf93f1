from __future__ import annotations

import json
import math

import pytest
import tomli_w

from fwclosure import cli

try:
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib


def write_config(path, scenario, parameters=None, integrator=None, output=None):
    raw = {"scenario": scenario, "parameters": parameters or {}, "integrator": integrator or {}}
    raw["output"] = output or {"directory": "out"}
    path.write_text(tomli_w.dumps(raw), encoding="utf-8")
    return path


@pytest.fixture
def root(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path / "root"))
    return tmp_path / "root"


FRICTION_SHORT = {"dt": 1e-3, "t_span": [0.0, 3.0], "record_every": 10}
TWOFOLD_SHORT = {"dt": 1e-3, "t_span": [0.0, 2.0], "stop_on_exit": True}


class TestFormatting:
    @pytest.mark.parametrize("x, text", [(0.1, "0.10000000000000001"), (1.0, "1"), (2.0**-30, "9.3132257461547852e-10"), (None, ""), (float("nan"), "nan")])
    def test_fmt(self, x, text):
        assert cli.fmt(x) == text

    def test_fmt_round_trips(self):
        for x in (math.pi, 1 / 3, 1e-300, -123456.789):
            assert float(cli.fmt(x)) == x

    def test_csv_line_endings(self, tmp_path):
        path = tmp_path / "a.csv"
        cli.write_csv(path, ["t", "y1"], [[0.0, 1.0], [0.5, 2.0]])
        assert path.read_bytes() == b"t,y1\n0,1\n0.5,2\n"


class TestConfig:
    def test_defaults_filled(self):
        cfg = cli.resolve_config({"scenario": "friction"})
        assert cfg["parameters"]["sigma"] == 50.0 and cfg["integrator"]["dt"] == 1e-3

    def test_provenance_ignored(self):
        cfg = cli.resolve_config({"scenario": "friction", "provenance": {"anything": 1}})
        assert "provenance" not in cfg

    @pytest.mark.parametrize(
        "raw",
        [
            {"scenario": "nope"},
            {"scenario": "friction", "parameters": {"sigmaa": 1.0}},
            {"scenario": "friction", "extra": 1},
            {"scenario": "friction", "parameters": {"sigma": "big"}},
            {"scenario": "friction", "parameters": {"sigma": -1.0}},
            {"scenario": "linear_string", "parameters": {"xi": 1.5}},
            {"scenario": "linear_string", "parameters": {"n_modes": 2.5}},
            {"scenario": "friction", "integrator": {"t_span": [1.0, 0.0]}},
            {"scenario": "friction", "integrator": {"dt": 0.0}},
            {"scenario": "friction", "output": {"formats": ["xlsx"]}},
            {"scenario": "twofold", "parameters": {"lplus": [0.05, 0.0]}},
            {"scenario": "string_kernels", "parameters": {"spacing": "cubic"}},
        ],
    )
    def test_rejected(self, raw):
        with pytest.raises(cli.ConfigError):
            cli.resolve_config(raw)


class TestExitCodes:
    def test_validate(self, tmp_path, capsys):
        cfg = write_config(tmp_path / "c.toml", "friction")
        assert cli.main(["validate", str(cfg)]) == cli.EXIT_OK
        assert json.loads(capsys.readouterr().out) == {"scenario": "friction", "valid": True}

    def test_bad_xi(self, tmp_path, root, capsys):
        cfg = write_config(tmp_path / "c.toml", "linear_string", {"xi": 1.5})
        assert cli.main(["run", str(cfg)]) == cli.EXIT_CONFIG
        rec = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
        assert rec["exit_code"] == 1 and "xi" in rec["message"]
        assert not root.exists()

    def test_malformed_toml(self, tmp_path):
        path = tmp_path / "c.toml"
        path.write_text("scenario = \n", encoding="utf-8")
        assert cli.main(["validate", str(path)]) == cli.EXIT_CONFIG

    def test_missing_file(self, tmp_path):
        assert cli.main(["run", str(tmp_path / "absent.toml")]) == cli.EXIT_IO

    def test_kernels_needs_kernel_scenario(self, tmp_path):
        cfg = write_config(tmp_path / "c.toml", "friction")
        assert cli.main(["kernels", str(cfg)]) == cli.EXIT_CONFIG

    def test_nonunique(self, tmp_path, root, capsys):
        params = {"lplus": [-0.05, 0.0, 0.0], "y0": [0.05, 1.0, 0.8, 0.0], "mode0": "FREE_PLUS"}
        cfg = write_config(tmp_path / "c.toml", "twofold", params, TWOFOLD_SHORT)
        assert cli.main(["run", str(cfg)]) == cli.EXIT_NONUNIQUE
        rec = json.loads((root / "out" / "error.json").read_text())
        assert rec["error"] == "NonUniqueSwitchError" and rec["exit_code"] == 2
        assert "diagnostics" in rec

    def test_codes_distinct(self):
        codes = [cli.EXIT_OK, cli.EXIT_CONFIG, cli.EXIT_NONUNIQUE, cli.EXIT_IO, cli.EXIT_NUMERICAL]
        assert len(set(codes)) == len(codes)


class TestRun:
    def test_friction_outputs(self, tmp_path, root):
        cfg = write_config(tmp_path / "c.toml", "friction", integrator={"dt": 1e-3, "t_span": [0.0, 30.0], "record_every": 20})
        assert cli.main(["run", str(cfg)]) == 0
        lines = (root / "out" / "trajectory.csv").read_text().splitlines()
        # the memory variable gets its own column instead of a y column
        assert lines[0] == "t,y1,y2,lambda,kappa,mode"
        modes = {line.rsplit(",", 1)[1] for line in lines[1:]}
        assert modes == {"FREE_PLUS", "FREE_MINUS", "SLIDING"}
        events = [json.loads(s) for s in (root / "out" / "events.jsonl").read_text().splitlines()]
        assert events and all({"t", "kind", "state"} <= set(e) for e in events)

    def test_deterministic_and_manifest_round_trip(self, tmp_path, root, monkeypatch):
        cfg = write_config(tmp_path / "c.toml", "friction", integrator=FRICTION_SHORT)
        assert cli.main(["run", str(cfg)]) == 0
        first = (root / "out" / "trajectory.csv").read_bytes()
        assert cli.main(["run", str(cfg)]) == 0
        assert (root / "out" / "trajectory.csv").read_bytes() == first

        manifest = root / "out" / "manifest.toml"
        data = tomllib.loads(manifest.read_text())
        assert data["parameters"]["sigma"] == 50.0 and "provenance" in data
        monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path / "again"))
        assert cli.main(["run", str(manifest)]) == 0
        assert (tmp_path / "again" / "out" / "trajectory.csv").read_bytes() == first

    def test_kernels_table(self, tmp_path, root):
        params = {"n_modes": 1, "terms": 5000, "t_min": 0.05, "t_max": 2.0, "points": 40}
        cfg = write_config(tmp_path / "c.toml", "string_kernels", params)
        assert cli.main(["kernels", str(cfg)]) == 0
        lines = (root / "out" / "kernels.csv").read_text().splitlines()
        assert len(lines) == 41
        manifest = tomllib.loads((root / "out" / "manifest.toml").read_text())
        assert manifest["provenance"]["terms"] == 5000

    def test_linear_string(self, tmp_path, root):
        cfg = write_config(tmp_path / "c.toml", "linear_string", {"n_modes": 16}, {"dt": 1e-2, "t_span": [0.0, 1.0]})
        assert cli.main(["run", str(cfg)]) == 0
        assert (root / "out" / "contact.csv").exists()

    def test_twofold(self, tmp_path, root):
        cfg = write_config(tmp_path / "c.toml", "twofold", integrator=TWOFOLD_SHORT)
        assert cli.main(["run", str(cfg)]) == 0
        header = (root / "out" / "trajectory.csv").read_text().splitlines()[0]
        assert header == "t,y1,y2,y3,lambda,kappa,mode"

    def test_version(self, capsys):
        with pytest.raises(SystemExit):
            cli.main(["--version"])
        assert capsys.readouterr().out.strip() == cli.__version__
