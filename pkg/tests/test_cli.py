import json

import numpy as np
import pytest

from graphleak.cli import main, read_triu_csv
from graphleak.config import ConfigError, defaults, load_config, parse_config
from graphleak.evaluate import homophily
from graphleak.graph import load_dataset
from graphleak.report import read_csv


def write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture(scope="module")
def sbm_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("sbm")
    cfg = write(root / "gen.json", {"seed": 3, "sbm": {"n": 60, "blocks": 3, "p_in": 0.25, "p_out": 0.01, "d": 8}})
    assert main(["gen-sbm", "--config", cfg, "--out", str(root / "data")]) == 0
    return root / "data"


@pytest.fixture(scope="module")
def trained(tmp_path_factory, sbm_dir):
    root = tmp_path_factory.mktemp("train")
    cfg = write(root / "c.json", {"dataset": str(sbm_dir), "model": {"hidden": 8}, "train": {"epochs": 40}, "plane": {"every": 10}})
    assert main(["train", "--config", cfg, "--out", str(root / "out")]) == 0
    return root / "out"


class TestConfig:
    def test_defaults_parse(self):
        cfg = parse_config({})
        assert cfg.model.arch == "gcn" and cfg.train.epochs == 200

    def test_unknown_top_level_key(self):
        with pytest.raises(ConfigError, match="^colour"):
            parse_config({"colour": 1})

    def test_unknown_nested_key_path(self):
        with pytest.raises(ConfigError) as e:
            parse_config({"attack": {"alpha_q": 1}})
        assert e.value.path == "attack.alpha_q"

    def test_type_error_path(self):
        with pytest.raises(ConfigError) as e:
            parse_config({"train": {"epochs": "many"}})
        assert e.value.path == "train.epochs"

    def test_invalid_value_reports_section(self):
        with pytest.raises(ConfigError, match="^attack"):
            parse_config({"attack": {"alpha_p": 1e6}})

    def test_defense_section_implies_mcgpb(self):
        assert parse_config({"defense": {"beta_p": [1, 1, 1]}}).defense.kind == "mcgpb"

    def test_bad_json(self, tmp_path):
        (tmp_path / "c.json").write_text("{ nope")
        with pytest.raises(ConfigError, match="line 1"):
            load_config(tmp_path / "c.json")

    def test_defaults_document_every_section(self):
        d = defaults()
        assert {"model", "train", "attack", "defense", "audit", "plane", "sbm", "grid"} <= set(d)
        assert d["defense"]["beta_p"] == [1.3, 1.3, 1.7]

    def test_shipped_configs_parse(self):
        from pathlib import Path

        files = sorted((Path(__file__).resolve().parents[1] / "configs").glob("*.json"))
        assert files
        for f in files:
            load_config(f)


class TestGenSbm:
    def test_loads(self, sbm_dir):
        g = load_dataset(sbm_dir)
        assert g.n_nodes == 60 and g.num_classes == 3

    def test_byte_identical(self, tmp_path, sbm_dir):
        cfg = write(tmp_path / "gen.json", {"seed": 3, "sbm": {"n": 60, "blocks": 3, "p_in": 0.25, "p_out": 0.01, "d": 8}})
        assert main(["gen-sbm", "--config", cfg, "--out", str(tmp_path / "again")]) == 0
        for name in ("edges.tsv", "labels.tsv", "features.tsv", "meta.json"):
            assert (sbm_dir / name).read_bytes() == (tmp_path / "again" / name).read_bytes()

    def test_no_inter_block_edges(self, tmp_path):
        cfg = write(tmp_path / "gen.json", {"sbm": {"n": 40, "blocks": 2, "p_in": 0.3, "p_out": 0.0, "d": 4}})
        assert main(["gen-sbm", "--config", cfg, "--out", str(tmp_path / "d")]) == 0
        assert homophily(load_dataset(tmp_path / "d"))[0] == 1.0

    def test_invalid_params(self, tmp_path):
        cfg = write(tmp_path / "gen.json", {"sbm": {"p_in": 1.5}})
        assert main(["gen-sbm", "--config", cfg, "--out", str(tmp_path / "d")]) == 2


class TestTrain:
    def test_outputs(self, trained):
        for name in ("model.json", "report.json", "trace.csv", "plane.csv"):
            assert (trained / name).is_file()
        rep = json.loads((trained / "report.json").read_text())
        assert rep["summary"]["test_acc"] > 0.5 and len(rep["run_id"]) == 12

    def test_plane_in_unit_square(self, trained):
        rows = read_csv(trained / "plane.csv")
        assert rows and all(0 <= float(r["privacy"]) <= 1 and 0 <= float(r["utility"]) <= 1 for r in rows)

    def test_summary_matches_rows(self, trained):
        rep = json.loads((trained / "report.json").read_text())
        rows = read_csv(trained / "trace.csv")
        best = max(float(r["val_acc"]) for r in rows)
        first = next(r for r in rows if float(r["val_acc"]) == best)
        assert int(first["epoch"]) == rep["summary"]["best_epoch"]

    def test_missing_dataset_exit_2(self, tmp_path):
        cfg = write(tmp_path / "c.json", {"dataset": str(tmp_path / "nowhere")})
        assert main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == 2

    def test_unknown_key_exit_2(self, tmp_path, capsys):
        cfg = write(tmp_path / "c.json", {"train": {"epoch": 3}})
        assert main(["train", "--config", cfg]) == 2
        assert "train.epoch" in capsys.readouterr().err

    def test_degenerate_defense_is_byte_identical(self, tmp_path, sbm_dir):
        base = {"dataset": str(sbm_dir), "model": {"hidden": 8}, "train": {"epochs": 15}}
        std = write(tmp_path / "s.json", base)
        dfn = write(tmp_path / "d.json", {**base, "defense": {"kind": "mcgpb", "beta_p": [0, 0, 0], "beta_c": [0], "drop_edge_p": 0.0, "epochs": 15}})
        assert main(["train", "--config", std, "--out", str(tmp_path / "s")]) == 0
        assert main(["train", "--config", dfn, "--out", str(tmp_path / "d")]) == 0
        assert (tmp_path / "s" / "model.json").read_bytes() == (tmp_path / "d" / "model.json").read_bytes()

    def test_seed_override(self, tmp_path, sbm_dir):
        cfg = write(tmp_path / "c.json", {"dataset": str(sbm_dir), "train": {"epochs": 3}})
        assert main(["train", "--config", cfg, "--seed", "7", "--out", str(tmp_path / "o")]) == 0
        assert json.loads((tmp_path / "o" / "report.json").read_text())["config"]["seed"] == 7


class TestAttack:
    def test_outputs(self, tmp_path, sbm_dir, trained):
        cfg = write(
            tmp_path / "a.json",
            {"dataset": str(sbm_dir), "attack": {"knowledge": ["X", "H", "Y"], "alpha_p": 1, "alpha_s": 1, "iterations": 5}},
        )
        assert main(["attack", "--config", cfg, "--model", str(trained / "model.json"), "--out", str(tmp_path / "o")]) == 0
        a = read_triu_csv(tmp_path / "o" / "a_hat.csv")
        assert a.shape == (60, 60) and np.array_equal(a, a.T)
        rows = read_csv(tmp_path / "o" / "audit.csv")
        assert [r["variable"] for r in rows][0] == "A_hat" and rows[1]["variable"].startswith("ensemble")
        assert read_csv(tmp_path / "o" / "trace.csv")[0]["iteration"] == "0"

    def test_unavailable_knowledge_exit_2(self, tmp_path, sbm_dir):
        cfg = write(tmp_path / "a.json", {"dataset": str(sbm_dir), "attack": {"knowledge": ["X", "H"], "alpha_p": 1}})
        assert main(["attack", "--config", cfg, "--out", str(tmp_path / "o")]) == 2

    def test_basic_mode_without_model(self, tmp_path, sbm_dir):
        cfg = write(
            tmp_path / "a.json",
            {"dataset": str(sbm_dir), "attack": {"mode": "basic", "knowledge": ["X", "Y"], "alpha_x": 1, "alpha_s": 1, "metric_p": "hsic", "metric_s": "hsic", "iterations": 3}},
        )
        assert main(["attack", "--config", cfg, "--out", str(tmp_path / "o")]) == 0


class TestAudit:
    def test_features_and_ensemble(self, tmp_path, sbm_dir):
        cfg = write(tmp_path / "c.json", {"dataset": str(sbm_dir), "audit": {"variables": ["X", "Y"]}})
        assert main(["audit", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
        rows = read_csv(tmp_path / "o" / "audit.csv")
        assert [r["variable"] for r in rows] == ["X", "Y", "ensemble{X,Y}"]
        assert list(rows[0]) == ["variable", "auc", "auc_homo", "auc_hetero", "n_pos", "n_neg"]

    def test_model_variables_need_model(self, tmp_path, sbm_dir):
        cfg = write(tmp_path / "c.json", {"dataset": str(sbm_dir), "audit": {"variables": ["H"]}})
        assert main(["audit", "--config", cfg, "--out", str(tmp_path / "o")]) == 2

    def test_model_variables(self, tmp_path, sbm_dir, trained):
        cfg = write(tmp_path / "c.json", {"dataset": str(sbm_dir), "audit": {"variables": ["H1", "H2", "Yhat"]}})
        assert main(["audit", "--config", cfg, "--model", str(trained / "model.json"), "--out", str(tmp_path / "o")]) == 0


class TestGrid:
    def base(self, sbm_dir, **grid):
        return {"dataset": str(sbm_dir), "model": {"hidden": 8}, "train": {"epochs": 5}, "grid": {"command": "train", **grid}}

    def test_three_seeds(self, tmp_path, sbm_dir):
        cfg = write(tmp_path / "g.json", {**self.base(sbm_dir), "seeds": [0, 1, 2]})
        assert main(["grid", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
        assert len(read_csv(tmp_path / "o" / "grid.csv")) == 3
        agg = read_csv(tmp_path / "o" / "aggregate.csv")
        assert len(agg) == 1 and agg[0]["n"] == "3" and "test_acc_mean" in agg[0]

    def test_deterministic(self, tmp_path, sbm_dir):
        cfg = write(tmp_path / "g.json", {**self.base(sbm_dir, params={"train.lr": [0.01, 0.05]}), "seeds": [0, 1]})
        for out in ("a", "b"):
            assert main(["grid", "--config", cfg, "--out", str(tmp_path / out)]) == 0
        assert (tmp_path / "a" / "aggregate.csv").read_text() == (tmp_path / "b" / "aggregate.csv").read_text()

    def test_random_search_reproducible(self, tmp_path, sbm_dir):
        grid = self.base(sbm_dir, params={"train.lr": [0.005, 0.01, 0.02, 0.05], "train.weight_decay": [0, 5e-4]}, search="random", n=5, seed=4)
        cfg = write(tmp_path / "g.json", grid)
        for out in ("a", "b"):
            assert main(["grid", "--config", cfg, "--out", str(tmp_path / out)]) == 0
        cells = [[(r["seed"], r["train.lr"], r["train.weight_decay"]) for r in read_csv(tmp_path / d / "grid.csv")] for d in ("a", "b")]
        assert len(cells[0]) == 5 and cells[0] == cells[1]

    def test_empty_grid_exit_2(self, tmp_path, sbm_dir):
        cfg = write(tmp_path / "g.json", self.base(sbm_dir))
        assert main(["grid", "--config", cfg, "--out", str(tmp_path / "o")]) == 2

    def test_bad_cell_exit_2(self, tmp_path, sbm_dir):
        cfg = write(tmp_path / "g.json", self.base(sbm_dir, params={"train.lrr": [0.1]}))
        assert main(["grid", "--config", cfg, "--out", str(tmp_path / "o")]) == 2


def test_plane_command(tmp_path, sbm_dir):
    cfg = write(tmp_path / "c.json", {"dataset": str(sbm_dir), "train": {"epochs": 10}, "plane": {"every": 5}})
    assert main(["plane", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    rows = read_csv(tmp_path / "o" / "plane.csv")
    assert sorted({int(r["epoch"]) for r in rows}) == [0, 5, 10]


def test_unknown_command_exit_2():
    assert main(["explode"]) == 2
