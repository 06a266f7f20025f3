import json
import math
import os

import numpy as np
import pytest

from classconf.alm import LAMBDA_FLOOR
from classconf.exceptions import ConfigError
from classconf.harness import (ExperimentConfig, emit_plot_data, load_data, run_ablation,
                               run_benchmark, run_eval, run_training)
from classconf.harness import runner
from classconf.harness.cli import main
from classconf.harness.config import coerce


def tiny(**kw):
    base = dict(n_classes=3, n_features=3, class_separation=3.0, gamma=0.5, base_count=250,
                pool_per_class=40, hidden_layer_sizes=[8], epochs=2, batch_size=200,
                learning_rate=0.05, methods=["ce", "cact"], eval_scores=["thr"],
                n_resamples=3, seeds=[0])
    base.update(kw)
    return ExperimentConfig(**base)


class TestConfig:
    def test_roundtrip(self, tmp_path):
        cfg = tiny(eval_alphas=[0.05, 0.1], penalty="p3", train_csv="x.csv",
                   pool_csv="y.csv")
        cfg.save(tmp_path / "c.json")
        back = ExperimentConfig.load(tmp_path / "c.json")
        assert back == cfg and back.digest() == cfg.digest()

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="learning_rte"):
            ExperimentConfig.from_dict({"learning_rte": 0.1})

    @pytest.mark.parametrize("changes", [
        {"gamma": 0.0}, {"eta": -1.0}, {"penalty": "l2"}, {"methods": ["svm"]},
        {"hr_mu": 1.0}, {"eval_alphas": [1.5]}, {"cp_modes": ["mondrian"]}, {"seeds": []},
    ])
    def test_invalid(self, changes):
        with pytest.raises(ConfigError):
            tiny(**changes)

    def test_coerce_strings(self):
        assert coerce("eval_alphas", "0.05,0.1") == [0.05, 0.1]
        assert coerce("nesterov", "false") is False
        assert coerce("train_csv", "none") is None
        assert coerce("hidden_layer_sizes", "16,8") == [16, 8]
        with pytest.raises(ConfigError):
            coerce("epochs", "many")

    def test_replace_validates(self):
        with pytest.raises(ConfigError):
            tiny().replace(batch_size=0)


class TestTraining:
    def test_ce_constant_multipliers(self):
        _, hist = run_training(tiny(epochs=3), "ce", 0)
        lams = {tuple(r["lam"]) for r in hist}
        assert len(lams) == 1

    def test_slack_constraints_decay_to_floor(self):
        # sizes never exceed K = 3 < eta, so every constraint is slack
        cfg = tiny(epochs=8, eta=10.0, lambda_init=2.0, rho_init=0.5)
        _, hist = run_training(cfg, "cact", 0)
        lam = np.array([r["lam"] for r in hist])
        step = np.diff(lam, axis=0)
        assert np.all((step < 0) | (lam[1:] == LAMBDA_FLOOR))
        np.testing.assert_array_equal(lam[-1], LAMBDA_FLOOR)

    def test_one_batch_reproducible(self):
        cfg = tiny(epochs=1, batch_size=1000)
        a, _ = run_training(cfg, "cact", 3)
        b, _ = run_training(cfg, "cact", 3)
        assert a.params_.flat().tobytes() == b.params_.flat().tobytes()

    def test_frozen_cact_hr_matches_conftr(self):
        # equal fixed class weights turn the class-wise hinge into ConfTr's
        cfg = tiny(epochs=2, reg_weight=0.2, hr_lambda_init=0.2)
        data = load_data(cfg, 0)
        conf, _ = run_training(cfg, "conftr", 0, data)
        est = runner.make_trainer(cfg, "cact_hr", 0).set_params(update_multipliers=False)
        est.fit(data[0].features, data[0].labels, data[1].features, data[1].labels)
        for a, b in zip(conf.history_, est.history_):
            assert abs(a["loss"] - b["loss"]) <= 1e-9


@pytest.fixture(scope="module")
def balanced_model():
    cfg = tiny(n_classes=10, n_features=10, gamma=1.0, base_count=100, pool_per_class=100,
               epochs=5, methods=["ce"], batch_size=250)
    data = load_data(cfg, 0)
    est, _ = run_training(cfg, "ce", 0, data)
    return cfg, est, data


class TestEval:
    def test_split_coverage(self, balanced_model):
        cfg, est, (_, _, cal, test) = balanced_model
        reps = run_eval(est, cal, test, cfg.replace(n_resamples=200), 0)[("thr", "split", 0.1)]
        assert 0.88 <= np.mean([r.coverage for r in reps]) <= 0.92

    def test_label_mode_per_class(self, balanced_model):
        cfg, est, (_, _, cal, test) = balanced_model
        reps = run_eval(est, cal, test, cfg.replace(n_resamples=50, cp_modes=["label"]), 0)
        reps = reps[("thr", "label", 0.1)]
        for y in range(10):
            covs = [c.coverage for r in reps for c in r.per_class if c.label == y]
            n = np.mean([c.count for r in reps for c in r.per_class if c.label == y])
            assert np.mean(covs) >= 0.9 - 3 * math.sqrt(0.09 / n)

    def test_deterministic(self, balanced_model):
        cfg, est, (_, _, cal, test) = balanced_model
        a = run_eval(est, cal, test, cfg, 4)
        b = run_eval(est, cal, test, cfg, 4)
        assert [r.to_dict() for r in a[("thr", "split", 0.1)]] == \
               [r.to_dict() for r in b[("thr", "split", 0.1)]]


class TestAblation:
    def test_eta_cardinality(self):
        rows = run_ablation(tiny(epochs=1), "eta", ["0.5", "1.0", "2.0"])
        assert len(rows) == 6
        for method in ("ce", "cact"):
            assert sorted(r["value"] for r in rows if r["method"] == method) == [0.5, 1.0, 2.0]

    def test_alpha_reuses_one_model(self, monkeypatch):
        calls = []
        real = runner.run_training

        def counting(*a, **kw):
            calls.append(a[1])
            return real(*a, **kw)

        monkeypatch.setattr(runner, "run_training", counting)
        rows = run_ablation(tiny(epochs=1), "alpha_test", ["0.05", "0.1", "0.2"])
        assert calls == ["ce", "cact"]
        assert sorted({r["value"] for r in rows}) == [0.05, 0.1, 0.2]
        assert all(r["alpha"] == r["value"] for r in rows)

    def test_gamma_keeps_eval_data(self):
        cfg = tiny()
        a, b = load_data(cfg.replace(gamma=0.1), 0), load_data(cfg.replace(gamma=1.0), 0)
        for i in (1, 2, 3):
            assert a[i].features.tobytes() == b[i].features.tobytes()
        assert a[0].class_counts.tolist() != b[0].class_counts.tolist()
        rows = run_ablation(tiny(epochs=1, methods=["ce"]), "gamma", ["0.1", "0.5", "1.0"])
        assert [r["gamma"] for r in rows] == [0.1, 0.5, 1.0]

    def test_penalty_axis(self):
        rows = run_ablation(tiny(epochs=1, methods=["cact"]), "penalty_kind", ["phr", "p2", "p3"])
        assert [r["value"] for r in rows] == ["phr", "p2", "p3"]

    def test_bad_axis(self):
        with pytest.raises(ConfigError):
            run_ablation(tiny(), "depth", ["1"])


class TestPlotData:
    def test_shapes(self, tmp_path):
        cfg = tiny(epochs=3, eval_scores=["thr", "aps"], seeds=[0, 1])
        rows, logs, per_class = run_benchmark(cfg)
        emit_plot_data(logs, per_class, rows, tmp_path)
        traj = np.genfromtxt(tmp_path / "trajectory_cact_seed0.csv", delimiter=",", names=True)
        assert traj.shape == (3 * 3,)
        pc = np.genfromtxt(tmp_path / "per_class.csv", delimiter=",", names=True, dtype=None,
                           encoding=None)
        for method in ("ce", "cact"):
            counts = pc["train_count"][pc["method"] == method]
            assert len(counts) == 3 and np.all(np.diff(counts) <= 0)
        sc = np.genfromtxt(tmp_path / "scatter.csv", delimiter=",", names=True, dtype=None,
                           encoding=None)
        assert sorted(zip(sc["method"], sc["score"])) == [
            ("cact", "aps"), ("cact", "thr"), ("ce", "aps"), ("ce", "thr")]
        assert np.all(sc["n_seeds"] == 2)


def _cli_args(tmp_path, name, *extra):
    return [name, "--run-dir", str(tmp_path / name), "--n-classes", "3", "--n-features", "3",
            "--base-count", "250", "--pool-per-class", "40", "--epochs", "2",
            "--batch-size", "200", "--hidden-layer-sizes", "8", "--methods", "ce,cact",
            "--eval-scores", "thr", "--n-resamples", "2", *extra]


def _read_tree(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for f in files:
            path = os.path.join(dirpath, f)
            with open(path, "rb") as fh:
                out[os.path.relpath(path, root)] = fh.read()
    return out


class TestCli:
    def test_train_then_eval(self, tmp_path, capsys):
        assert main(_cli_args(tmp_path, "train")) == 0
        run = tmp_path / "train"
        for name in ("config.json", "metrics.csv", "summary.csv", "log_cact_seed0.csv",
                     "models/cact_seed0.npz"):
            assert (run / name).exists()
        assert json.loads((run / "config.json").read_text())["epochs"] == 2
        assert main(_cli_args(tmp_path, "eval", "--from-run", str(run))) == 0
        assert (tmp_path / "eval" / "metrics.csv").read_bytes() == (run / "metrics.csv").read_bytes()
        assert "covgap=" in capsys.readouterr().out

    def test_byte_determinism(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        a.mkdir()
        b.mkdir()
        assert main(_cli_args(a, "train")) == 0
        assert main(_cli_args(b, "train")) == 0
        assert _read_tree(a) == _read_tree(b)

    def test_gen_data_and_plots(self, tmp_path):
        assert main(_cli_args(tmp_path, "gen-data")) == 0
        manifest = json.loads((tmp_path / "gen-data" / "seed0" / "manifest.json").read_text())
        assert manifest["splits"]["test"]["class_counts"] == [20, 20, 20]
        assert main(_cli_args(tmp_path, "plots")) == 0
        assert (tmp_path / "plots" / "plots" / "scatter.csv").exists()

    def test_ablate(self, tmp_path):
        args = _cli_args(tmp_path, "ablate", "--axis", "eta", "--values", "0.5,2", "--epochs", "1")
        assert main(args) == 0
        lines = (tmp_path / "ablate" / "ablation_eta.csv").read_text().splitlines()
        assert lines[0].startswith("axis,value,method") and len(lines) == 5

    def test_hashed_run_dir(self, tmp_path):
        args = _cli_args(tmp_path, "gen-data")[3:] + ["--output-dir", str(tmp_path / "runs")]
        assert main(["gen-data"] + args) == 0
        (run,) = os.listdir(tmp_path / "runs")
        cfg = ExperimentConfig.load(tmp_path / "runs" / run / "config.json")
        assert run == f"gen-data-{cfg.digest()}"

    def test_unknown_config_key(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text('{"epoch": 3}')
        assert main(["train", "--config", str(path), "--run-dir", str(tmp_path / "r")]) == 2

    def test_bad_value(self, tmp_path):
        assert main(_cli_args(tmp_path, "train", "--gamma", "2.0")) == 2

    def test_missing_run(self, tmp_path):
        assert main(_cli_args(tmp_path, "eval", "--from-run", str(tmp_path / "nowhere"))) == 2

    def test_argparse_error(self):
        with pytest.raises(SystemExit) as info:
            main(["ablate", "--axis", "depth", "--values", "1"])
        assert info.value.code == 2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_exit(self, tmp_path):
        code = main(_cli_args(tmp_path, "train", "--learning-rate", "1e300", "--methods", "ce"))
        assert code == 3
        with np.load(tmp_path / "train" / "divergence_state.npz") as z:
            assert "params" in z.files
