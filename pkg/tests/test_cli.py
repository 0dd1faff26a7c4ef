import csv
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from pucci.cli import main

BASE = {
    "n": 2,
    "equations": [{"lambda": 1.0, "Lambda": 1.0}, {"lambda": 1.0, "Lambda": 1.0}],
    "domain": {"type": "ball", "R": 1.0, "N": 2},
    "nonlinearity": {"builtin": "combustion", "tau": 20.0, "alphas": [0.5, 0.5]},
    "numerics": {"M": 4096},
}


# monotone except for a dip to zero at u = 5
DIP = "(exp(u1/2) - 1) * (u1 - 5)*(u1 - 5)/((u1 - 5)*(u1 - 5) + 4)"


def write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def with_(**changes):
    cfg = json.loads(json.dumps(BASE))
    cfg.update(changes)
    return cfg


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


class TestThresholds:
    def test_combustion(self, tmp_path, capsys):
        code, out, _ = run(capsys, "thresholds", "--config", write(tmp_path, BASE), "--a", "1", "--b", "20")
        assert code == 0
        d = json.loads(out)
        assert d["thresholds"]["muStar"] == pytest.approx(1.5433, abs=1e-4)
        assert d["C4"]["pass"] is True and "meta" in d

    def test_equal_bounds(self, tmp_path, capsys):
        code, _, err = run(capsys, "thresholds", "--config", write(tmp_path, BASE), "--a", "1", "--b", "1")
        assert code == 2 and "a < b" in err

    def test_linear(self, tmp_path, capsys):
        cfg = with_(n=1, equations=[{"lambda": 1, "Lambda": 1}], nonlinearity={"expressions": ["u1"]})
        code, out, _ = run(capsys, "thresholds", "--config", write(tmp_path, cfg), "--a", "1", "--b", "2")
        assert code == 3
        d = json.loads(out)
        assert d["C4"]["params"]["left"] == pytest.approx(4.0, rel=1e-9)
        assert d["C4"]["params"]["right"] == pytest.approx(13.5, rel=1e-9)

    def test_vanishing_f(self, tmp_path, capsys):
        cfg = with_(n=1, equations=[{"lambda": 1, "Lambda": 1}], nonlinearity={"expressions": ["0"]})
        code, out, _ = run(capsys, "thresholds", "--config", write(tmp_path, cfg), "--a", "1", "--b", "2")
        assert code == 3 and json.loads(out)["C4"]["pass"] is False

    def test_deterministic_without_meta(self, tmp_path, capsys):
        path = write(tmp_path, BASE)
        outs = []
        for k in range(2):
            target = str(tmp_path / f"out{k}.json")
            assert main(["thresholds", "--config", path, "--a", "1", "--b", "20", "--no-meta",
                         "--out", target]) == 0
            outs.append((tmp_path / f"out{k}.json").read_bytes())
        assert outs[0] == outs[1]
        assert b"meta" not in outs[0]


class TestConfig:
    def test_unknown_key(self, tmp_path, capsys):
        code, _, err = run(capsys, "thresholds", "--config", write(tmp_path, with_(colour="red")),
                           "--a", "1", "--b", "20")
        assert code == 2 and "colour" in err

    @pytest.mark.parametrize("change", [
        {"n": 3},
        {"equations": [{"lambda": 2, "Lambda": 1}] * 2},
        {"domain": {"type": "ball", "R": -1, "N": 2}},
        {"domain": {"type": "grid2d", "h": 0.1}},
        {"nonlinearity": {"expressions": ["u1", "u3"]}},
        {"nonlinearity": {"builtin": "combustion", "tau": 20.0, "alphas": [0.5, 1.5]}},
    ])
    def test_invalid(self, tmp_path, capsys, change):
        code, _, _ = run(capsys, "thresholds", "--config", write(tmp_path, with_(**change)), "--a", "1", "--b", "20")
        assert code == 2

    def test_missing_file(self, tmp_path, capsys):
        assert run(capsys, "thresholds", "--config", str(tmp_path / "nope.json"), "--a", "1", "--b", "2")[0] == 2

    def test_bad_arguments(self, capsys):
        assert run(capsys, "solve")[0] == 2

    def test_mask_file(self, tmp_path, capsys):
        from pucci.grid2d import write_gridfile
        mask = np.zeros((24, 24))
        mask[4:20, 4:20] = 1
        write_gridfile(mask, 1 / 15, tmp_path / "mask.grid")
        cfg = with_(domain={"type": "grid2d", "mask-file": "mask.grid"})
        code, out, _ = run(capsys, "thresholds", "--config", write(tmp_path, cfg), "--a", "1", "--b", "20")
        assert code in (0, 3)
        assert json.loads(out)["thresholds"]["N"] == 2


class TestSolve:
    def test_combustion(self, tmp_path, capsys):
        prof = tmp_path / "p.csv"
        code, out, _ = run(capsys, "solve", "--config", write(tmp_path, BASE), "--mu", "1", "--profiles", str(prof))
        assert code == 0
        d = json.loads(out)
        assert d["minimal<=maximal"]["leq"] is True
        rows = list(csv.reader(io.StringIO(prof.read_text())))
        assert rows[0] == ["r", "minimal_u1", "minimal_u2", "maximal_u1", "maximal_u2"]
        vals = np.array(rows[1:], dtype=float)
        assert np.all(vals[:-1, 1:] > 0) and np.all(vals[-1, 1:] == 0)

    def test_zero_mu(self, tmp_path, capsys):
        assert run(capsys, "solve", "--config", write(tmp_path, BASE), "--mu", "0")[0] == 2

    def test_non_monotone(self, tmp_path, capsys):
        cfg = with_(n=1, equations=[{"lambda": 1, "Lambda": 1}], nonlinearity={"expressions": ["1 - u1"]})
        code, out, _ = run(capsys, "solve", "--config", write(tmp_path, cfg), "--mu", "1")
        assert code == 4
        assert json.loads(out)["C1"]["witnesses"]

    def test_square_domain(self, tmp_path, capsys):
        cfg = with_(domain={"type": "grid2d", "shape": "square", "h": 1 / 16})
        code, out, _ = run(capsys, "solve", "--config", write(tmp_path, cfg), "--mu", "1")
        assert code == 0
        assert json.loads(out)["minimal"]["converged"] is True


class TestMultiplicity:
    def test_certified(self, tmp_path, capsys):
        code, out, _ = run(capsys, "multiplicity", "--config", write(tmp_path, BASE), "--mu", "0.1", "--a", "1", "--b", "20")
        assert code == 0
        assert json.loads(out)["third_solution_certified"] is True

    def test_outside_window(self, tmp_path, capsys):
        code, out, _ = run(capsys, "multiplicity", "--config", write(tmp_path, BASE), "--mu", "3", "--a", "1", "--b", "20")
        assert code == 5 and "thresholds" in json.loads(out)

    def test_small_tau(self, tmp_path, capsys):
        cfg = with_(nonlinearity={"builtin": "combustion", "tau": 1.0, "alphas": [0.5, 0.5]})
        code, out, _ = run(capsys, "multiplicity", "--config", write(tmp_path, cfg), "--mu", "1", "--a", "1", "--b", "20")
        assert code == 5
        assert "thresholds cross" in json.loads(out)["reason"]

    def test_non_ball(self, tmp_path, capsys):
        cfg = with_(domain={"type": "grid2d", "shape": "square", "h": 1 / 16})
        assert run(capsys, "multiplicity", "--config", write(tmp_path, cfg), "--mu", "0.1", "--a", "1", "--b", "20")[0] == 2

    def test_non_monotone(self, tmp_path, capsys):
        cfg = with_(n=1, equations=[{"lambda": 1, "Lambda": 1}], nonlinearity={"expressions": [DIP]})
        code, out, _ = run(capsys, "multiplicity", "--config", write(tmp_path, cfg), "--mu", "0.1", "--a", "1", "--b", "20")
        assert code == 4
        assert json.loads(out)["C1"]["witnesses"][0]["kind"] == "decreasing"

    def test_sign_changing(self, tmp_path, capsys):
        cfg = with_(n=1, equations=[{"lambda": 1, "Lambda": 1}], nonlinearity={"expressions": ["u1 * (2 - u1)"]})
        for argv in (["thresholds"], ["multiplicity", "--mu", "0.1"]):
            code, out, _ = run(capsys, *argv, "--config", write(tmp_path, cfg), "--a", "1", "--b", "20")
            assert code == 4 and "negative" in json.loads(out)["error"]


class TestSweep:
    def test_decay(self, tmp_path, capsys):
        code, out, _ = run(capsys, "sweep", "--config", write(tmp_path, BASE), "--mu-min", "0.001",
                           "--mu-max", "0.02", "--steps", "5")
        assert code == 0
        rows = list(csv.DictReader(io.StringIO(out)))
        assert list(rows[0]) == ["mu", "u1_norm", "u2_norm", "iterations", "residual", "error"]
        mus = [float(r["mu"]) for r in rows]
        norms = [float(r["u1_norm"]) for r in rows]
        assert mus[0] == 0.001 and mus[-1] == 0.02 and mus == sorted(mus)
        assert all(x < y for x, y in zip(norms, norms[1:]))

    def test_threads_same_output(self, tmp_path, capsys, monkeypatch):
        path = write(tmp_path, BASE)
        argv = ["sweep", "--config", path, "--mu-min", "0.001", "--mu-max", "0.01", "--steps", "3"]
        first = run(capsys, *argv)[1]
        monkeypatch.setenv("PUCCI_THREADS", "3")
        assert run(capsys, *argv)[1] == first

    @pytest.mark.parametrize("lo, hi, steps", [("0.001", "0.02", "1"), ("0.02", "0.02", "5"), ("0.03", "0.02", "5")])
    def test_bad_grid(self, tmp_path, capsys, lo, hi, steps):
        assert run(capsys, "sweep", "--config", write(tmp_path, BASE), "--mu-min", lo, "--mu-max", hi,
                   "--steps", steps)[0] == 2


def test_console_script(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "pucci.cli", "thresholds", "--config", write(tmp_path, BASE),
                           "--a", "1", "--b", "20", "--no-meta"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["thresholds"]["window_nonempty"] is True
