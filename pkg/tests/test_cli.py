import csv
import io
import json

import pytest

from vote_ensemble.cli import main
from vote_ensemble.config import ConfigError, parse_config

LP_CONFIG = """\
seed: 17
replications: 10
delta: 0.5
n_grid: [60, 120]
methods: [base, move, rove]
problem:
  name: lp_example
  alpha: 2.1
move: {k: 10, B: 50}
rove: {k1: 10, k2: 10, B1: 10, B2: 50}
"""


def write(tmp_path, text, name="run.yaml"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


class TestConfig:
    def test_parse(self):
        run = parse_config(LP_CONFIG)
        assert run.plan.n_grid == (60, 120)
        assert run.plan.config_for("move", 60).B == 50
        assert len(run.sha256) == 64

    def test_formula_sizes(self):
        text = LP_CONFIG.replace("move: {k: 10, B: 50}", 'move: {k: "max(10, n/200)", B: 50}')
        assert parse_config(text).plan.config_for("move", 4000).k == 20

    def test_unknown_top_key(self):
        with pytest.raises(ConfigError) as info:
            parse_config(LP_CONFIG + "colour: blue\n", "run.yaml")
        assert str(info.value).startswith("run.yaml:11: colour:")

    def test_unknown_problem_parameter(self):
        text = LP_CONFIG.replace("  alpha: 2.1", "  alpha: 2.1\n  beta: 3")
        with pytest.raises(ConfigError) as info:
            parse_config(text, "run.yaml")
        assert info.value.field == "problem.beta" and info.value.line == 9

    def test_k_not_below_n(self):
        text = LP_CONFIG.replace("move: {k: 10, B: 50}", "move: {k: 60, B: 50}")
        with pytest.raises(ConfigError) as info:
            parse_config(text, "run.yaml")
        assert info.value.field == "move.k" and info.value.line == 9

    def test_move_needs_discrete(self):
        text = "n_grid: [100]\nmethods: [move]\nproblem: {name: regression}\n"
        with pytest.raises(ConfigError, match="discrete"):
            parse_config(text)

    def test_bad_formula(self):
        text = LP_CONFIG.replace("move: {k: 10, B: 50}", 'move: {k: "open(n)", B: 50}')
        with pytest.raises(ConfigError) as info:
            parse_config(text)
        assert info.value.field == "move.k"


class TestExperimentCommand:
    def test_outputs(self, tmp_path, capsys):
        cfg = write(tmp_path, LP_CONFIG)
        out = tmp_path / "out"
        assert main(["experiment", "--config", cfg, "--out", str(out), "--workers", "1"]) == 0
        rows = list(csv.DictReader(io.StringIO((out / "results.csv").read_text())))
        assert [(r["method"], r["n"]) for r in rows] == [
            ("base", "60"), ("base", "120"), ("move", "60"), ("move", "120"), ("rove", "60"), ("rove", "120")]
        assert all(r["replications"] == "10" for r in rows)
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["master_seed"] == 17 and manifest["total_failures"] == 0
        assert manifest["config_text"] == LP_CONFIG
        assert json.loads((out / "results.json").read_text())["seed"] == 17
        assert capsys.readouterr().out == (out / "results.csv").read_text()

    def test_seed_override_recorded(self, tmp_path):
        cfg = write(tmp_path, LP_CONFIG.replace("replications: 10", "replications: 200"))
        main(["experiment", "--config", cfg, "--out", str(tmp_path / "a"), "--workers", "1"])
        main(["experiment", "--config", cfg, "--out", str(tmp_path / "b"), "--workers", "1", "--seed", "18"])
        a = json.loads((tmp_path / "a" / "manifest.json").read_text())
        b = json.loads((tmp_path / "b" / "manifest.json").read_text())
        assert b["master_seed"] == 18 and b["seed_overridden"] and not a["seed_overridden"]

    def test_invalid_config_exit_code(self, tmp_path, capsys):
        cfg = write(tmp_path, LP_CONFIG.replace("move: {k: 10, B: 50}", "move: {k: 60, B: 50}"))
        assert main(["experiment", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
        err = capsys.readouterr().err
        assert "move.k" in err and ":9:" in err
        assert not (tmp_path / "o").exists()


class TestBoundsCommand:
    def parse(self, text):
        return {line.split()[0]: line.split()[1] for line in text.strip().splitlines()}

    def test_terms_sum_to_total(self, capsys):
        assert main(["bounds", "--p-max", "0.8", "--eta", "0.6", "--n", "400", "--k", "10", "--B", "200",
                     "--cardinality", "2"]) == 0
        out = self.parse(capsys.readouterr().out)
        terms = [float(out[f"term{i}"]) for i in range(1, 5)]
        assert float(out["total"]) == pytest.approx(2 * sum(terms), rel=1e-15)

    def test_degenerate(self, capsys):
        main(["bounds", "--p-max", "1", "--eta", "1", "--n", "100", "--k", "10", "--B", "200", "--cardinality", "1"])
        out = self.parse(capsys.readouterr().out)
        assert float(out["term1"]) == 0.0 and float(out["term2"]) == 0.0

    def test_pk_file(self, tmp_path, capsys):
        path = write(tmp_path, "model_key,p_hat,se\n0,0.8,0.01\n1,0.2,0.01\n", "pk.csv")
        main(["bounds", "--pk-file", path, "--n", "400", "--k", "10", "--B", "200"])
        out = self.parse(capsys.readouterr().out)
        assert float(out["p_max"]) == 0.8 and float(out["eta"]) == pytest.approx(0.6)
        assert out["cardinality"] == "2"

    def test_invalid(self, capsys):
        assert main(["bounds", "--p-max", "0.5", "--eta", "0.7", "--n", "10", "--k", "2", "--B", "5",
                     "--cardinality", "2"]) == 2
        assert "eta" in capsys.readouterr().err


class TestPkCommand:
    def test_constant(self, tmp_path, capsys):
        cfg = write(tmp_path, "n_grid: [10]\nmethods: [base]\nproblem: {name: constant, value: 4}\n")
        assert main(["pk", "--config", cfg, "--k", "3", "--trials", "50"]) == 0
        assert capsys.readouterr().out == "model_key,p_hat,se\n4,1,0\n"

    def test_lp_two_rows(self, tmp_path):
        cfg = write(tmp_path, LP_CONFIG)
        out = tmp_path / "pk.csv"
        main(["pk", "--config", cfg, "--k", "10", "--trials", "2000", "--out", str(out)])
        rows = list(csv.DictReader(io.StringIO(out.read_text())))
        assert [r["model_key"] for r in rows] == ["0", "1"]
        assert sum(float(r["p_hat"]) for r in rows) == pytest.approx(1.0)

    def test_continuous_rejected(self, tmp_path, capsys):
        cfg = write(tmp_path, "n_grid: [100]\nmethods: [base]\nproblem: {name: regression}\n")
        assert main(["pk", "--config", cfg, "--k", "10"]) == 2
        assert "p_k tables require discrete models" in capsys.readouterr().err


@pytest.mark.parametrize("name", ["lp_example.yaml", "regression.yaml"])
def test_shipped_configs_parse(name):
    from pathlib import Path

    from vote_ensemble.config import load_config

    run = load_config(Path(__file__).parent.parent / "configs" / name)
    run.plan.validate()
