import json
import os
import subprocess
import sys

import pytest
from hypothesis import given, settings, strategies as st

from weakkam_nbody.cli import EXIT_FAIL, EXIT_OK, EXIT_USAGE, ExperimentConfig, UsageError, main


class TestConfig:
    @settings(max_examples=50, deadline=None)
    @given(st.sampled_from(["connect", "phi", "holder", "weakkam", "central", "parabolic"]),
           st.integers(1, 5), st.integers(1, 3), st.floats(0.05, 0.95),
           st.floats(1e-3, 1e3), st.one_of(st.none(), st.floats(1e-9, 1.0)), st.integers(0, 2 ** 63))
    def test_round_trip(self, cmd, n, d, kappa, T, tol, seed):
        cfg = ExperimentConfig(cmd, n_bodies=n, dim=d, kappa=kappa, T=T, tol=tol, seed=seed,
                               masses=tuple(range(1, n + 1)))
        assert ExperimentConfig.from_ini(cfg.to_ini()) == cfg

    @pytest.mark.parametrize("kw", [dict(masses=(-1.0, 1.0)), dict(T=0.0), dict(nodes=3),
                                    dict(kappa=1.5), dict(x=(1.0,))])
    def test_invalid(self, kw):
        with pytest.raises(UsageError):
            ExperimentConfig("connect", **kw)

    def test_unknown_key(self):
        with pytest.raises(UsageError):
            ExperimentConfig.from_mapping("connect", {"colour": "red"})


def run(tmp_path, *args):
    return main([*args, "--out", str(tmp_path), "--workers", "1"])


class TestCommands:
    def test_connect(self, tmp_path, capsys):
        code = run(tmp_path, "connect", "--set", "n_bodies=3", "--set", "T=2", "--set", "seeds=10")
        assert code == EXIT_OK
        certs = (tmp_path / "connect_certificates.jsonl").read_text().splitlines()
        assert len(certs) == 10 and all(json.loads(c)["satisfied"] for c in certs)
        assert (tmp_path / "connect_path_0.csv").exists()
        assert "PASS connector_bound" in capsys.readouterr().out

    def test_usage_errors(self, tmp_path):
        assert run(tmp_path, "connect", "--set", "masses=-1 1") == EXIT_USAGE
        assert run(tmp_path, "connect", "--set", "T=0") == EXIT_USAGE
        assert run(tmp_path, "connect", "--set", "nonsense") == EXIT_USAGE
        assert main(["frobnicate"]) == EXIT_USAGE

    def test_config_file(self, tmp_path):
        ini = tmp_path / "c.ini"
        ini.write_text("[central]\nn_bodies = 3\ndim = 2\n")
        assert run(tmp_path, "central", "--config", str(ini)) == EXIT_OK
        out = json.loads((tmp_path / "central.json").read_text())
        assert out["u0"] == pytest.approx(3.0)

    def test_check_failure_exit(self, tmp_path):
        # an impossible tolerance makes the residual check fail
        assert run(tmp_path, "central", "--tol", "1e-30") == EXIT_FAIL

    def test_deterministic(self, tmp_path):
        names = ("connect_certificates.jsonl", "connect_summary.json", "connect_path_1.csv")
        runs = []
        for _ in range(2):
            assert run(tmp_path, "connect", "--seed", "3", "--set", "seeds=4") == EXIT_OK
            runs.append([(tmp_path / n).read_bytes() for n in names])
        assert runs[0] == runs[1]

    def test_parabolic(self, tmp_path):
        assert run(tmp_path, "parabolic", "--set", "n_bodies=3", "--set", "dim=2",
                   "--set", "nodes=2000") == EXIT_OK

    def test_phi_batch(self, tmp_path):
        q = tmp_path / "q.json"
        q.write_text(json.dumps([dict(x=[-0.5, 0.5], y=[-2, 2], T=2.0, kappa=0.5, masses=[1, 1])]))
        assert run(tmp_path, "phi", "--batch", str(q), "--set", "nodes=32") == EXIT_OK
        rec = json.loads((tmp_path / "phi_batch.jsonl").read_text())
        assert rec["lower_bound"] <= rec["value"] <= rec["upper_bound"]

    def test_phi(self, tmp_path):
        assert run(tmp_path, "phi", "--set", "x=-0.5 0.5", "--set", "y=-2 2",
                   "--set", "nodes=32") == EXIT_OK
        assert (tmp_path / "phi_path.csv").exists()

    def test_weakkam_oracle(self, tmp_path):
        assert run(tmp_path, "weakkam") == EXIT_OK
        s = json.loads((tmp_path / "weakkam_summary.json").read_text())
        assert s["ratio"] >= 1.8

    def test_module_entry_point(self, tmp_path):
        proc = subprocess.run([sys.executable, "-m", "weakkam_nbody", "--help"],
                              capture_output=True, text=True)
        assert proc.returncode == 0 and "--config" in proc.stdout
