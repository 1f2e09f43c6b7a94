import csv
import json
from pathlib import Path

import numpy as np
import pytest

from rdcp.cli import main
from rdcp.experiments import (CellError, ConfigError, _Cell, _convexity_violations, binary_rd,
                              cell_seed, run_experiment)

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"


def write(tmp_path, data, name="cfg.json"):
    p = tmp_path / name
    p.write_text(data if isinstance(data, str) else json.dumps(data))
    return p


def run(tmp_path, data, *extra):
    cfg = write(tmp_path, data)
    return main(["run", "--config", str(cfg), "--out", str(tmp_path / "out"), *extra])


def read_csv(path):
    lines = [l for l in Path(path).read_text().splitlines() if not l.startswith("#")]
    return list(csv.DictReader(lines))


class TestSolve:
    def test_bernoulli_closed_form(self, tmp_path):
        out = tmp_path / "c.csv"
        grid = ",".join(str(d) for d in np.linspace(0, 0.5, 11))
        code = main(["solve", "--source", str(CONFIGS / "sources/bernoulli05.json"),
                     "--D", grid, "--out", str(out)])
        assert code == 0
        text = out.read_text()
        assert text.startswith("# rdcp 0.1.0 config-sha256=")
        for row in read_csv(out):
            assert float(row["rate_bits"]) == pytest.approx(binary_rd(0.5, float(row["D"])),
                                                            abs=1e-3)

    def test_empty_grid(self, capsys):
        code = main(["solve", "--source", str(CONFIGS / "sources/bernoulli05.json"), "--D", ""])
        assert code == 2

    def test_missing_source(self, tmp_path):
        assert main(["solve", "--source", str(tmp_path / "nope.json"), "--D", "0.1"]) == 2


class TestRun:
    def test_randomness_quaternary(self, tmp_path):
        code = main(["run", "--config", str(CONFIGS / "example_randomness_quaternary.json"),
                     "--out", str(tmp_path)])
        assert code == 0
        rows = read_csv(tmp_path / "randomness.csv")
        assert len(rows) == 3 and all(float(r["gap_bits"]) >= 0 for r in rows)
        report = json.loads((tmp_path / "report.json").read_text())
        assert report["all_pass"] is True
        assert {a["name"] for a in report["assertions"]} == {"lower-bound", "witness-exact"}

    def test_empty_D_grid_is_config_error(self, tmp_path, capsys):
        code = run(tmp_path, {"kind": "rd-curve", "source": {"bernoulli": 0.5}, "D_grid": []})
        assert code == 2
        assert "D_grid" in capsys.readouterr().err

    def test_json_syntax_error_position(self, tmp_path, capsys):
        code = run(tmp_path, '{"kind": "rd-curve",\n  "D_grid": [0.1,]\n}')
        assert code == 2
        assert "cfg.json:2:" in capsys.readouterr().err

    def test_unknown_field_path(self, tmp_path, capsys):
        code = run(tmp_path, {"kind": "oneshot", "seed": 1, "trials": 10,
                              "cells": [{"source": {"bernoulli": 0.5},
                                         "kernel": {"type": "identity", "colour": 2}}]})
        assert code == 2
        assert "cells[0].kernel.colour" in capsys.readouterr().err

    def test_missing_field(self, tmp_path, capsys):
        assert run(tmp_path, {"kind": "rd-curve", "source": {"bernoulli": 0.5}}) == 2
        assert "D_grid: missing" in capsys.readouterr().err

    def test_unknown_kind(self, tmp_path, capsys):
        assert run(tmp_path, {"kind": "sorcery"}) == 2

    def test_seed_required_for_stochastic(self, tmp_path, capsys):
        cfg = {"kind": "float-entropy", "samples": 100000, "quantizer": "binary32"}
        assert run(tmp_path, cfg) == 2
        assert "seed" in capsys.readouterr().err
        assert run(tmp_path, cfg, "--seed-override", "3") == 0

    def test_missing_source_file(self, tmp_path, capsys):
        code = run(tmp_path, {"kind": "rd-curve", "source": "absent.json", "D_grid": [0.1]})
        assert code == 2
        assert "not found" in capsys.readouterr().err

    def test_bad_source_spec(self, tmp_path, capsys):
        write(tmp_path, {"x_alphabet": [0], "y_alphabet": [0], "pmf": [[1]], "extra": 1},
              "src.json")
        code = run(tmp_path, {"kind": "rd-curve", "source": "src.json", "D_grid": [0.1]})
        assert code == 2
        assert "unknown field" in capsys.readouterr().err

    def test_assertion_failure_exit_code(self, tmp_path):
        cfg = {"kind": "float-entropy", "seed": 1, "samples": 100000, "quantizer": "binary32",
               "expected_bits": 30.0, "tolerance_bits": 0.1}
        assert run(tmp_path, cfg) == 1
        report = json.loads((tmp_path / "out/report.json").read_text())
        assert report["all_pass"] is False
        assert report["assertions"][0]["pass"] is False

    def test_deterministic_outputs(self, tmp_path):
        cfg = {"kind": "oneshot", "seed": 4, "trials": 500,
               "cells": [{"label": "a", "source": {"bernoulli": 0.3},
                          "kernel": {"type": "rd", "D": 0.1}}]}
        path = write(tmp_path, cfg)
        outs = []
        for k in range(2):
            out = tmp_path / f"o{k}"
            assert main(["run", "--config", str(path), "--out", str(out)]) == 0
            outs.append({p.name: p.read_bytes() for p in out.iterdir()})
        assert outs[0] == outs[1]
        out = tmp_path / "o2"
        main(["run", "--config", str(path), "--out", str(out), "--seed-override", "5"])
        assert (out / "trials_a.csv").read_bytes() != outs[0]["trials_a.csv"]

    def test_jobs_do_not_change_results(self, tmp_path):
        cfg = {"kind": "rdcp-curve", "random_sources": {"count": 2, "seed": 1},
               "divergence": ["tv", "w2"], "distortion": "mse", "D_grid": [0.1, 0.3],
               "P_grid": [0.0, 0.1]}
        text = json.dumps(cfg)
        a, _ = run_experiment(text)
        b, _ = run_experiment(text, jobs=2)
        assert a.files == b.files

    def test_header_carries_hash(self, tmp_path):
        cfg = {"kind": "rd-curve", "source": {"bernoulli": 0.2}, "D_grid": [0.05, 0.1]}
        assert run(tmp_path, cfg) == 0
        line = (tmp_path / "out/rd_curve_0.csv").read_text().splitlines()[0]
        import hashlib
        digest = hashlib.sha256((tmp_path / "cfg.json").read_bytes()).hexdigest()
        assert line == f"# rdcp 0.1.0 config-sha256={digest}"

    def test_pipeline_example(self, tmp_path):
        code = main(["run", "--config", str(CONFIGS / "example_pipeline_quaternary.json"),
                     "--out", str(tmp_path)])
        assert code == 0
        rows = read_csv(tmp_path / "doubling.csv")
        assert float(rows[0]["ratio"]) == 2.0


class TestGoldensCommand:
    def test_refuses_without_flag(self, tmp_path):
        assert main(["regen-goldens", "--out", str(tmp_path / "g")]) == 2
        assert not (tmp_path / "g").exists()

    def test_creates_dir_and_reports(self, tmp_path, capsys):
        out = tmp_path / "g"
        assert main(["regen-goldens", "--out", str(out), "--confirm"]) == 0
        text = capsys.readouterr().out
        assert "created output directory" in text
        assert main(["regen-goldens", "--out", str(out), "--confirm"]) == 0
        assert "0 changed, 0 new" in capsys.readouterr().out
        (out / "ac_empty.bits").write_bytes(b"\xff")
        assert main(["regen-goldens", "--out", str(out), "--check"]) == 1
        assert "changed   ac_empty.bits" in capsys.readouterr().out

    def test_repository_goldens_match(self):
        assert main(["regen-goldens", "--out", str(ROOT / "tests/golden"), "--check"]) == 0


def test_cell_errors_name_the_cell():
    with pytest.raises(CellError, match="cell source 3"):
        with _Cell("source 3"):
            raise ZeroDivisionError("boom")
    with pytest.raises(ConfigError):
        with _Cell("x"):
            raise ConfigError("passes through")


def test_cell_seeds_differ():
    assert len({cell_seed(7, i) for i in range(100)}) == 100
    assert cell_seed(7, 0) == cell_seed(7, 0)


def test_convexity_diagnostic_detects_concave_grid():
    D = [0.0, 0.1, 0.2]
    P = [0.0, 0.1, 0.2]
    R = np.array([[1.0, 0.9, 0.8], [0.9, 0.95, 0.7], [0.8, 0.7, 0.6]])
    assert _convexity_violations(R, D, P) > 0.1
    flat = np.add.outer([1.0, 0.9, 0.8], [0.0, -0.1, -0.2])
    assert _convexity_violations(flat, D, P) <= 1e-12


@pytest.mark.parametrize("cfg", sorted(p.name for p in CONFIGS.glob("*.json")))
def test_bundled_configs_validate(cfg):
    from rdcp.experiments import Section, parse_config
    data = parse_config((CONFIGS / cfg).read_text())
    assert data["kind"]
