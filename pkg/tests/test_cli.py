import dataclasses
import json

import numpy as np
import pytest
import yaml

from depthflow import (ExperimentConfig, apply_overrides, load_config,
                       parse_config, run_experiment, save_config)
from depthflow.cli import main
from depthflow.errors import ConfigError
from depthflow.experiments import (fmt, read_svg_matrix, svg_heatmap,
                                   write_csv)


def tiny_overrides(kind, out, **extra):
    raw = {
        "experiment": kind,
        "seed": 11,
        "out": str(out),
        "model": {"kind": "diffusion", "activation": "tanh",
                  "inner": "identity", "sigma_w2": 1.0, "sigma_b2": 1.0,
                  "depth": 8, "width": 8, "horizon": 1.0},
        "inputs": {"values": [0.0, 1.0]},
        "draws": 200,
        "functions": 5,
    }
    raw.update(extra)
    return raw


def write_config(tmp_path, raw, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(raw))
    return path


class TestConfigParsing:
    def test_defaults_fill_in(self):
        cfg = parse_config({"experiment": "sanity_check"})
        assert cfg.seed == 0
        assert cfg.model.depth == 64
        assert cfg.inputs == (0.0, 1.0)

    def test_missing_experiment_kind(self):
        with pytest.raises(ConfigError, match="experiment"):
            parse_config({"seed": 1})

    def test_unknown_key_names_location(self):
        with pytest.raises(ConfigError, match="model.*depht"):
            parse_config({"experiment": "abc",
                          "model": {"depht": 3}})

    def test_type_error_names_key_path(self):
        with pytest.raises(ConfigError, match="model.depth"):
            parse_config({"experiment": "abc",
                          "model": {"depth": "many"}})

    def test_grid_inputs_expand(self):
        cfg = parse_config({"experiment": "corr_heatmap",
                            "inputs": {"grid": {"start": 0.0, "stop": 1.0,
                                                "points": 5}}})
        assert cfg.inputs == (0.0, 0.25, 0.5, 0.75, 1.0)

    def test_abc_keep_exceeds_draws(self):
        with pytest.raises(ConfigError, match="keep"):
            parse_config({"experiment": "abc",
                          "abc": {"prior_draws": 5, "keep": 6}})

    def test_round_trip_identity(self, tmp_path):
        raw = tiny_overrides("abc", tmp_path / "o",
                             abc={"observations": [[0.0, 0.3], [1.0, -0.2]],
                                  "prior_draws": 50, "keep": 3})
        first = parse_config(raw)
        path = tmp_path / "rt.yaml"
        save_config(first, path)
        assert load_config(path) == first

    def test_scale_override_resets_sizes(self):
        cfg = parse_config({"experiment": "sanity_check"})
        desk = apply_overrides(cfg, scale="desk")
        paper = apply_overrides(cfg, scale="paper")
        assert (desk.model.depth, desk.model.width) == (64, 64)
        assert (paper.model.depth, paper.model.width) == (500, 500)
        with pytest.raises(ConfigError, match="scale"):
            apply_overrides(cfg, scale="huge")


class TestOutputHelpers:
    def test_fmt_round_trips_floats(self):
        for v in (0.1, 1 / 3, 1e-300, -2.5e17, float(np.float64(np.pi))):
            assert float(fmt(v)) == v

    def test_csv_written_with_header(self, tmp_path):
        path = tmp_path / "a.csv"
        write_csv(path, ["x", "y"], [(1, 0.5), (2, 0.25)])
        lines = path.read_text().splitlines()
        assert lines[0] == "x,y"
        assert lines[1] == "1,0.5"

    def test_svg_matrix_round_trip(self, tmp_path):
        matrix = np.array([[1.0, -0.5], [-0.5, 1.0]])
        path = tmp_path / "h.svg"
        svg_heatmap(matrix, [0.0, 1.0], path)
        got, axis = read_svg_matrix(path)
        assert np.array_equal(got, matrix)
        assert np.array_equal(axis, [0.0, 1.0])

    def test_svg_is_self_contained(self, tmp_path):
        path = tmp_path / "h.svg"
        svg_heatmap(np.eye(3), [0.0, 0.5, 1.0], path)
        text = path.read_text()
        assert text.startswith("<svg")
        assert "href" not in text


class TestRunners:
    def test_sanity_check_outputs(self, tmp_path):
        cfg = parse_config(tiny_overrides("sanity_check", tmp_path / "o"))
        summary = run_experiment(cfg)
        for name in ("draws.csv", "kde.csv", "joint.csv", "summary.csv"):
            assert (tmp_path / "o" / name).exists()
        assert len(summary["ks"]) == 2

    def test_function_space_single_point_matches_summarize(self, tmp_path):
        cfg = parse_config(tiny_overrides(
            "function_space", tmp_path / "o",
            inputs={"values": [0.5]}))
        run_experiment(cfg)
        rows = (tmp_path / "o" / "quantiles.csv").read_text().splitlines()
        assert rows[0] == "z,q05,q50,q95"
        q = [float(v) for v in rows[1].split(",")[1:]]
        assert q[0] <= q[1] <= q[2]

    def test_corr_heatmap_unit_diagonal(self, tmp_path):
        cfg = parse_config(tiny_overrides(
            "corr_heatmap", tmp_path / "o",
            inputs={"values": [-1.0, 0.5, 1.0]}))
        summary = run_experiment(cfg)
        corr = summary["corr"]
        assert np.array_equal(np.diag(corr), np.ones(3))
        got, _ = read_svg_matrix(tmp_path / "o" / "heatmap.svg")
        assert np.allclose(got, corr)

    def test_sgd_lr_zero_flat_traces(self, tmp_path):
        cfg = parse_config(tiny_overrides(
            "sgd", tmp_path / "o",
            train={"modes": ["reparametrized"], "depths": [2], "widths": [4],
                   "learning_rate": 0.0, "batch_size": 16, "epochs": 2,
                   "dataset": {"kind": "toy_blobs", "n": 64, "features": 3,
                               "classes": 2, "test_n": 16}}))
        summary = run_experiment(cfg)
        trace = summary["cells"][("reparametrized", 2, 4)]
        assert np.ptp([np.mean(trace.batch_losses[:4]),
                       np.mean(trace.batch_losses[4:])]) <= 1e-12

    def test_abc_accepted_are_bottom_k(self, tmp_path):
        cfg = parse_config(tiny_overrides(
            "abc", tmp_path / "o",
            inputs={"values": [-1.0, 0.0, 1.0]},
            abc={"observations": [[0.0, 0.2]], "prior_draws": 300,
                 "keep": 5}))
        summary = run_experiment(cfg)
        res = summary["diffusion"]
        order = np.argsort(res["distances"], kind="stable")
        assert set(res["accepted"].tolist()) == set(order[:5].tolist())

    def test_abc_observation_off_grid_rejected(self, tmp_path):
        cfg = parse_config(tiny_overrides(
            "abc", tmp_path / "o",
            inputs={"values": [0.0, 1.0]},
            abc={"observations": [[0.3, 0.0]], "prior_draws": 20,
                 "keep": 2}))
        with pytest.raises(ConfigError, match="grid"):
            run_experiment(cfg)

    def test_rerun_byte_identical(self, tmp_path):
        outs = []
        for tag in ("a", "b"):
            cfg = parse_config(tiny_overrides("sanity_check",
                                              tmp_path / tag, draws=100))
            run_experiment(cfg)
            outs.append({p.name: p.read_bytes()
                         for p in sorted((tmp_path / tag).iterdir())})
        assert outs[0] == outs[1]


class TestCliEntry:
    def test_success_exit_code_and_stdout(self, tmp_path, capsys):
        path = write_config(tmp_path,
                            tiny_overrides("sanity_check", tmp_path / "o",
                                           draws=100))
        code = main(["sanity_check", "--config", str(path)])
        assert code == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["experiment"] == "sanity_check"
        assert "ks" in payload["summary"]

    def test_seed_and_out_overrides(self, tmp_path, capsys):
        path = write_config(tmp_path,
                            tiny_overrides("sanity_check", tmp_path / "o",
                                           draws=100))
        code = main(["sanity_check", "--config", str(path),
                     "--seed", "99", "--out", str(tmp_path / "other")])
        assert code == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["seed"] == 99
        assert (tmp_path / "other" / "summary.csv").exists()

    def test_wrong_subcommand_for_config(self, tmp_path, capsys):
        path = write_config(tmp_path,
                            tiny_overrides("sanity_check", tmp_path / "o"))
        code = main(["abc", "--config", str(path)])
        assert code == 2
        err = json.loads(capsys.readouterr().err)
        assert err["error"] == "config"

    def test_missing_config_file(self, tmp_path, capsys):
        code = main(["sanity_check", "--config", str(tmp_path / "nope.yaml")])
        assert code == 2
        err = json.loads(capsys.readouterr().err)
        assert err["error"] == "config"

    def test_invalid_yaml_reports_config_error(self, tmp_path, capsys):
        path = tmp_path / "bad.yaml"
        path.write_text("experiment: [unclosed")
        code = main(["sanity_check", "--config", str(path)])
        assert code == 2
