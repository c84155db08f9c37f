import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dossfbm import cli
from dossfbm.driver import read_trajectory_csv

SMALL_VERIFY = {"seeds": [0, 1], "levels": [16], "lemma_n_list": [16], "samples": 200, "x0": 0.1}
SMALL_CONVERGE = {"n_list": [4, 8, 16, 32], "seeds": [0, 1], "n_ref": 256, "x0": 0.1}


def write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(cfg if isinstance(cfg, str) else json.dumps(cfg))
    return str(p)


def run(tmp_path, command, cfg, *extra):
    return cli.main([command, "--config", write(tmp_path, cfg), "--out", str(tmp_path / "out"), "--workers", "1", *extra])


class TestRunConfig:
    def test_defaults_materialised(self):
        cfg = cli.RunConfig.from_dict({"hurst": 0.35})
        d = cfg.to_dict()
        assert d["hurst_list"] == [0.35]
        assert d["n_list"] == [32, 64, 128, 256, 512]
        assert d["family"] == "trig" and d["params"] == [1.0, 1.0]

    @settings(max_examples=30, deadline=None)
    @given(
        st.floats(0.26, 0.49), st.integers(1, 64), st.integers(0, 2**63), st.floats(-2, 2),
        st.lists(st.integers(1, 100), min_size=1, max_size=5, unique=True),
    )
    def test_round_trip(self, hurst, n, seed, x0, seeds):
        raw = {"hurst": hurst, "n": n, "seed": seed, "x0": x0, "seeds": seeds, "bounds_override": {"M2": 0.5}}
        cfg = cli.RunConfig.from_dict(raw)
        again = cli.RunConfig.from_json(cfg.to_json())
        assert again == cfg
        assert again.to_json() == cfg.to_json()

    def test_seed_override(self):
        cfg = cli.RunConfig.from_dict({"hurst": 0.35, "seeds": [4, 9, 1]}).with_seed_override(100)
        assert cfg.seeds == [100, 101, 102] and cfg.scheme.seed == 100

    @pytest.mark.parametrize(
        "raw,needle",
        [
            ({"n": 4}, "'hurst'"),
            ({"hurst": 0.3, "rho": 0.3}, "rho"),
            ({"hurst": 0.3, "bogus": 1}, "'bogus'"),
            ({"hurst": "x"}, "'hurst'"),
            ({"hurst": 0.3, "n": 2.5}, "'n'"),
            ({"hurst": 0.3, "family": "cubic"}, "cubic"),
            ({"hurst": 0.3, "seeds": "abc"}, "'seeds'"),
            ({"hurst": 0.3, "emit_timings": 1}, "'emit_timings'"),
            ({"hurst": 0.3, "generator": "fft"}, "'generator'"),
        ],
    )
    def test_field_diagnostics(self, raw, needle):
        with pytest.raises(cli.ConfigError, match=needle):
            cli.RunConfig.from_dict(raw)

    def test_json_syntax_error_has_position(self):
        with pytest.raises(cli.ConfigError, match=r"cfg:2:\d+"):
            cli.RunConfig.from_json('{"hurst": 0.3,\n "n": }', "cfg")


class TestSimulate:
    def test_additive_matches_reference(self, tmp_path, capsys):
        rc = run(tmp_path, "simulate", {"hurst": 0.35, "family": "additive", "params": [0.7], "x0": 0.1, "n": 32})
        assert rc == 0
        out = tmp_path / "out"
        xs = read_trajectory_csv(out / "x_scheme.csv").values
        xr = read_trajectory_csv(out / "x_reference.csv").values
        assert np.max(np.abs(xs - xr)) <= 1e-12
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["run_config"]["n_list"] == [32, 64, 128, 256, 512]
        assert {"C1", "C_total", "C1_variant", "M"} <= set(manifest["constants"])
        assert "sup error" in capsys.readouterr().out

    def test_missing_hurst(self, tmp_path, capsys):
        assert run(tmp_path, "simulate", {"n": 8}) == 2
        assert "hurst" in capsys.readouterr().err

    def test_rho_not_below_hurst(self, tmp_path):
        assert run(tmp_path, "simulate", {"hurst": 0.3, "rho": 0.4}) == 2

    def test_unreadable_config(self, tmp_path, capsys):
        assert cli.main(["simulate", "--config", str(tmp_path / "nope.json")]) == 2

    def test_bad_arguments(self, tmp_path):
        assert cli.main(["explode"]) == 2
        assert cli.main(["simulate", "--config", write(tmp_path, {"hurst": 0.3}), "--workers", "0"]) == 2
        assert cli.main(["simulate", "--config", write(tmp_path, {"hurst": 0.3}), "--seed-override", "-1"]) == 2

    def test_deterministic_outputs(self, tmp_path):
        cfg = {"hurst": 0.35, "n": 16, "x0": 0.1}
        assert run(tmp_path, "simulate", cfg) == 0
        first = {p.name: p.read_bytes() for p in (tmp_path / "out").iterdir()}
        assert run(tmp_path, "simulate", cfg) == 0
        second = {p.name: p.read_bytes() for p in (tmp_path / "out").iterdir()}
        assert first == second

    def test_seed_override_changes_path(self, tmp_path):
        cfg = {"hurst": 0.35, "n": 8}
        run(tmp_path, "simulate", cfg)
        a = (tmp_path / "out" / "path.csv").read_text()
        run(tmp_path, "simulate", cfg, "--seed-override", "77")
        assert (tmp_path / "out" / "path.csv").read_text() != a
        manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
        assert manifest["config"]["seed"] == 77


class TestConverge:
    def test_additive_exact(self, tmp_path, capsys):
        rc = run(tmp_path, "converge", {"hurst": 0.3, "family": "additive", "params": [1.0], **SMALL_CONVERGE})
        assert rc == 0
        assert "exact family" in capsys.readouterr().out
        summary = json.loads((tmp_path / "out" / "convergence_summary.json").read_text())
        assert summary["passed"]

    def test_two_entry_n_list(self, tmp_path):
        assert run(tmp_path, "converge", {"hurst": 0.3, "n_list": [16, 32]}) == 2

    def test_bound_violation_exit_one(self, tmp_path, capsys):
        zero = {k: 0.0 for k in ("M1", "M2", "M3", "M4", "M5", "M6")}
        rc = run(tmp_path, "converge", {"hurst": 0.4, "bounds_override": zero, **SMALL_CONVERGE})
        assert rc == 1
        assert "violation" in capsys.readouterr().err
        assert (tmp_path / "out" / "convergence.csv").exists()

    def test_csv_deterministic_and_timings_opt_in(self, tmp_path):
        cfg = {"hurst": 0.4, **SMALL_CONVERGE}
        run(tmp_path, "converge", cfg)
        a = (tmp_path / "out" / "convergence.csv").read_bytes()
        run(tmp_path, "converge", cfg)
        assert (tmp_path / "out" / "convergence.csv").read_bytes() == a
        assert a.decode().splitlines()[1].endswith(",")
        run(tmp_path, "converge", {**cfg, "emit_timings": True})
        assert not (tmp_path / "out" / "convergence.csv").read_text().splitlines()[1].endswith(",")


class TestVerify:
    def test_trig_passes(self, tmp_path, capsys):
        assert run(tmp_path, "verify", {"hurst": 0.35, **SMALL_VERIFY}) == 0
        summary = json.loads((tmp_path / "out" / "verify_summary.json").read_text())
        assert summary["passed"] and all(t["passed"] for t in summary["taylor"])

    def test_shrunken_bound_names_lemma(self, tmp_path, capsys):
        rc = run(tmp_path, "verify", {"hurst": 0.35, "bounds_override": {"M2": 0.1}, **SMALL_VERIFY})
        assert rc == 1
        err = capsys.readouterr().err
        assert "Lemma 1" in err and "'z'" in err

    def test_zero_samples(self, tmp_path):
        assert run(tmp_path, "verify", {"hurst": 0.35, **{**SMALL_VERIFY, "samples": 0}}) == 2
