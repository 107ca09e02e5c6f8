import csv

import numpy as np
import pytest

from hbmaml import cli
from hbmaml.config import ConfigError, RunConfig

SMALL = ["--set", "model.hidden=8", "--set", "meta.iterations=4", "--set", "meta.batch=3",
         "--set", "meta.eval_every=2", "--set", "meta.eval_tasks=4"]


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert cli.main(["train", "--output-dir", str(out)] + SMALL) == 0
    return out


class TestConfig:
    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError) as info:
            RunConfig.parse("meta.bacth = 3\n")
        assert info.value.key == "meta.bacth"

    def test_bad_value_names_key(self):
        with pytest.raises(ConfigError, match="inner.steps"):
            RunConfig.parse("inner.steps = many\n")

    def test_dump_round_trips(self):
        cfg = RunConfig.parse("laplace.tau = 0.5\ninner.second_order = false\n# comment\n")
        again = RunConfig.parse(cfg.dump())
        assert again.values == cfg.values
        assert again["laplace.tau"] == 0.5 and again["inner.second_order"] is False

    def test_fewshot_spec_inferred(self):
        cfg = RunConfig.parse("task.kind = fewshot\ntask.n_way = 4\ntask.dim = 6\n")
        spec = cfg.mlp_spec()
        assert spec.layer_sizes[0] == 6 and spec.layer_sizes[-1] == 4
        assert spec.likelihood == "categorical"


class TestTrain:
    def test_outputs(self, run_dir):
        for name in ("run.meta", "metrics.csv", "theta.ckpt"):
            assert (run_dir / name).exists()
        header = (run_dir / "metrics.csv").read_text().splitlines()[0]
        assert header == "iteration,meta_objective,eval_metric_mean,eval_metric_ci95,wall_ms"
        assert "library.version" in (run_dir / "run.meta").read_text()

    def test_byte_identical_reruns(self, run_dir, tmp_path):
        assert cli.main(["train", "--output-dir", str(tmp_path)] + SMALL) == 0
        assert (tmp_path / "metrics.csv").read_bytes() == (run_dir / "metrics.csv").read_bytes()

    def test_unknown_key_exit_code(self, tmp_path, capsys):
        assert cli.main(["train", "--output-dir", str(tmp_path), "--set", "meta.nope=1"]) == 2
        assert "meta.nope" in capsys.readouterr().err

    def test_config_file(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("model.hidden = 4\nmeta.iterations = 1\nmeta.batch = 2\nmeta.eval_every = 0\n")
        assert cli.main(["train", "--config", str(cfg), "--output-dir", str(tmp_path / "o")]) == 0

    def test_missing_config_file(self, tmp_path):
        assert cli.main(["train", "--config", str(tmp_path / "absent.cfg")]) == 2

    def test_numeric_failure_exit_code(self, tmp_path):
        args = ["train", "--output-dir", str(tmp_path), "--set", "model.hidden=4", "--set", "inner.alpha=1e150",
                "--set", "meta.iterations=2", "--set", "meta.eval_every=0"]
        with np.errstate(all="ignore"):
            assert cli.main(args) == 3

    def test_bad_arguments(self):
        assert cli.main(["train", "--no-such-flag"]) == 2


class TestOtherCommands:
    def test_adapt(self, run_dir, tmp_path):
        assert cli.main(["adapt", "--run-dir", str(run_dir), "--out", str(tmp_path)]) == 0
        rows = list(csv.reader(open(tmp_path / "predictions.csv")))
        assert rows[0] == ["task_id", "set", "input_0", "target", "prediction"]
        assert {r[1] for r in rows[1:]} == {"support", "query"}

    def test_adapt_from_csv(self, run_dir, tmp_path):
        from hbmaml.tasks import SinusoidDist, export_tasks_csv
        export_tasks_csv(tmp_path / "t.csv", [SinusoidDist().sample(np.random.default_rng(0))])
        assert cli.main(["adapt", "--run-dir", str(run_dir), "--task-csv", str(tmp_path / "t.csv"),
                         "--out", str(tmp_path / "o")]) == 0

    def test_eval(self, run_dir, tmp_path):
        out = tmp_path / "e.csv"
        assert cli.main(["eval", "--run-dir", str(run_dir), "--episodes", "5", "--out", str(out)]) == 0
        rows = list(csv.reader(open(out)))
        assert rows[0] == ["metric", "mean", "ci95", "nll_mean", "n_tasks"]
        assert rows[1][0] == "mse" and rows[1][4] == "5"

    def test_eval_single_episode_sentinel(self, run_dir, tmp_path):
        out = tmp_path / "e.csv"
        assert cli.main(["eval", "--run-dir", str(run_dir), "--episodes", "1", "--out", str(out)]) == 0
        assert list(csv.reader(open(out)))[1][2] == "NA"

    def test_sample(self, run_dir, tmp_path):
        assert cli.main(["sample", "--run-dir", str(run_dir), "--window", "-10", "0", "--n-samples", "3",
                         "--grid-points", "5", "--out", str(tmp_path)]) == 0
        rows = list(csv.reader(open(tmp_path / "predictions.csv")))
        assert rows[0] == ["task_id", "sample_id", "x", "y"]
        assert len(rows) == 1 + 5 * (3 + 2)

    def test_sample_empty_window(self, run_dir, tmp_path):
        assert cli.main(["sample", "--run-dir", str(run_dir), "--window", "1", "1", "--out", str(tmp_path)]) == 2

    def test_missing_checkpoint(self, tmp_path):
        assert cli.main(["eval", "--run-dir", str(tmp_path)]) == 2

    def test_verify_oracle(self, tmp_path):
        out = tmp_path / "oracle.csv"
        assert cli.main(["verify-oracle", "--trials", "30", "--out", str(out)]) == 0
        rows = list(csv.reader(open(out)))
        assert rows[0] == ["seed", "d", "n", "k", "alpha", "max_abs_err"]
        assert len(rows) == 31

    def test_verify_oracle_tolerance_breach(self, tmp_path):
        assert cli.main(["verify-oracle", "--trials", "5", "--tol", "0", "--out", str(tmp_path / "o.csv")]) == 3


def test_learned_preconditioner_round_trip(tmp_path):
    out = tmp_path / "run"
    assert cli.main(["train", "--output-dir", str(out), "--set", "inner.learn_precond=true"] + SMALL) == 0
    assert (out / "precond.ckpt").exists()
    assert cli.main(["eval", "--run-dir", str(out), "--episodes", "3"]) == 0
    assert cli.main(["sample", "--run-dir", str(out), "--n-samples", "2", "--grid-points", "4"]) == 0
