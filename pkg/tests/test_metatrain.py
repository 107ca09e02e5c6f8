import csv

import numpy as np
import pytest

from hbmaml import metatrain as mt
from hbmaml.config import RunConfig
from hbmaml import model
from hbmaml.adapt import InnerLoopCfg, adapt_batch
from hbmaml.laplace import LaplaceCfg
from hbmaml.metatrain import MetaCfg, meta_eval, meta_train
from hbmaml.model import MlpSpec, ParamVector
from hbmaml.tasks import FewShotDist, SinusoidDist, Task, stack_tasks, task_rng

from conftest import central_diff, rel_err


class LinearDist:
    """Noisy-free linear regression tasks with a random weight per task."""

    def __init__(self, d=2, n=6, m=4):
        self.d, self.n, self.m = d, n, m

    def sample(self, rng):
        w = rng.standard_normal((self.d, 1))
        xs, xq = rng.standard_normal((self.n, self.d)), rng.standard_normal((self.m, self.d))
        return Task(xs, xs @ w, xq, xq @ w, {"w": w})


def _aug(X):
    return np.hstack([X, np.ones((len(X), 1))])


class TestOuterLoop:
    def test_single_sgd_step_by_hand(self):
        spec = MlpSpec((2, 1))
        dist = LinearDist()
        theta0 = ParamVector(spec, [0.3, -0.2, 0.1])
        alpha, beta = 0.1, 0.05
        cfg = MetaCfg(meta_batch=1, meta_lr=beta, optimizer="sgd", iterations=1, eval_every=0, seed=3)
        res = meta_train(cfg, dist, spec, InnerLoopCfg(alpha=alpha, K=1), theta0=theta0)

        task = dist.sample(task_rng(3, mt.STREAM_TASKS, 1))
        Xs, Xq = _aug(task.x_support), _aug(task.x_query)
        ys, yq = task.y_support[:, 0], task.y_query[:, 0]
        th = theta0.flat
        phi = th - alpha * Xs.T @ (Xs @ th - ys) / len(ys)
        g = (np.eye(3) - alpha * Xs.T @ Xs / len(ys)) @ (Xq.T @ (Xq @ phi - yq) / len(yq))
        np.testing.assert_allclose(res.theta.flat, th - beta * g, rtol=0, atol=1e-14)

        # same gradient by finite differences of the one-task objective
        def obj(flat):
            p = flat - alpha * Xs.T @ (Xs @ flat - ys) / len(ys)
            return 0.5 * np.mean((Xq @ p - yq) ** 2)
        assert rel_err(g, central_diff(obj, th)) < 1e-8

    def test_zero_learning_rate_keeps_theta(self):
        spec = MlpSpec((1, 8, 1))
        theta0 = model.init_params(spec, np.random.default_rng(0))
        cfg = MetaCfg(meta_batch=3, meta_lr=0.0, iterations=4, eval_every=0)
        res = meta_train(cfg, SinusoidDist(), spec, InnerLoopCfg(), theta0=theta0)
        np.testing.assert_array_equal(res.theta.flat, theta0.flat)

    @pytest.mark.parametrize("subroutine", ["ml_point", "ml_laplace"])
    def test_deterministic(self, subroutine, tmp_path):
        spec = MlpSpec((1, 8, 1))
        sub = LaplaceCfg(eta=1e-3) if subroutine == "ml_laplace" else InnerLoopCfg()
        cfg = MetaCfg(meta_batch=4, iterations=6, eval_every=3, eval_tasks=5, subroutine=subroutine, seed=9)
        paths = []
        for i in range(2):
            res = meta_train(cfg, SinusoidDist(), spec, sub)
            paths.append(tmp_path / f"m{i}.csv")
            mt.write_metrics_csv(paths[-1], res.metrics)
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_workers_do_not_change_results(self):
        spec = MlpSpec((1, 8, 1))
        base = dict(meta_batch=6, iterations=3, eval_every=0, seed=2)
        a = meta_train(MetaCfg(**base, workers=1), SinusoidDist(), spec, InnerLoopCfg())
        b = meta_train(MetaCfg(**base, workers=3), SinusoidDist(), spec, InnerLoopCfg())
        np.testing.assert_allclose(a.theta.flat, b.theta.flat, rtol=0, atol=1e-12)

    def test_learned_preconditioner_is_returned(self):
        spec = MlpSpec((1, 6, 1))
        res = meta_train(MetaCfg(meta_batch=2, iterations=3, eval_every=0), SinusoidDist(), spec,
                         InnerLoopCfg(learn_precond=True))
        assert res.precond is not None and np.any(res.precond.flat != 0)

    def test_metrics_csv_layout(self, tmp_path):
        spec = MlpSpec((1, 4, 1))
        res = meta_train(MetaCfg(meta_batch=2, iterations=4, eval_every=2, eval_tasks=3), SinusoidDist(), spec,
                         InnerLoopCfg())
        mt.write_metrics_csv(tmp_path / "m.csv", res.metrics)
        rows = list(csv.reader(open(tmp_path / "m.csv")))
        assert rows[0] == ["iteration", "meta_objective", "eval_metric_mean", "eval_metric_ci95", "wall_ms"]
        assert [r[0] for r in rows[1:]] == ["0", "1", "2", "3", "4"]
        assert rows[1][1] == "" and rows[1][2] != ""
        assert rows[2][2] == "" and rows[3][2] != ""
        assert all(r[4] == "" for r in rows[1:])

    def test_laplace_needs_laplace_cfg(self):
        with pytest.raises(TypeError):
            meta_train(MetaCfg(subroutine="ml_laplace", iterations=1), SinusoidDist(), MlpSpec((1, 2, 1)),
                       InnerLoopCfg())

    def test_divergence_names_iteration(self):
        spec = MlpSpec((1, 1))
        with np.errstate(all="ignore"):
            with pytest.raises(mt.MetaTrainingError) as info:
                meta_train(MetaCfg(meta_batch=2, iterations=3, eval_every=0), SinusoidDist(), spec,
                           InnerLoopCfg(alpha=1e100, K=5))
        assert info.value.iteration == 1


class TestObjective:
    @pytest.mark.parametrize("subroutine", ["ml_point", "ml_laplace"])
    @pytest.mark.parametrize("second_order", [True, False])
    def test_meta_gradient_finite_differences(self, subroutine, second_order):
        rng = np.random.default_rng(4)
        spec = MlpSpec((2, 4, 1), "tanh")
        theta = model.init_params(spec, rng)
        batch = stack_tasks([LinearDist().sample(rng) for _ in range(3)])
        inner = InnerLoopCfg(alpha=0.2, K=2, second_order=second_order)
        sub = LaplaceCfg(tau=0.01, eta=0.05, inner=inner, curvature_mode="dense") if subroutine == "ml_laplace" \
            else inner

        def run(flat):
            return mt.task_objectives(spec, ParamVector(spec, flat), batch, sub, subroutine,
                                      np.random.default_rng(0))

        _, got = run(theta.flat)
        if second_order:
            fd = central_diff(lambda f: float(run(f)[0].sum()), theta.flat)
        else:
            # frozen inner gradients: d(phi)/d(theta) is the identity for every task
            res = adapt_batch(spec, theta, batch, inner)
            phis = [p.value for p in res.phi]
            fd = np.zeros(spec.n_params)
            for j in range(len(batch)):
                phi_j = ParamVector.from_arrays(spec, [p[j] for p in phis]).flat
                fd += central_diff(lambda f: float(model.nll(spec, ParamVector(spec, f).leaves(),
                                                             batch.x_query[j], batch.y_query[j]).value), phi_j)
        assert rel_err(got, fd) < 1e-4

    def test_task_order_invariance(self):
        rng = np.random.default_rng(5)
        spec = MlpSpec((1, 10, 1))
        theta = model.init_params(spec, rng)
        tasks = [SinusoidDist().sample(rng) for _ in range(25)]
        perm = rng.permutation(25)
        for sub, name in ((InnerLoopCfg(), "ml_point"), (LaplaceCfg(eta=1e-2, fisher="empirical"), "ml_laplace")):
            a, _ = mt.task_objectives(spec, theta, stack_tasks(tasks), sub, name, with_grad=False)
            b, _ = mt.task_objectives(spec, theta, stack_tasks([tasks[i] for i in perm]), sub, name,
                                      with_grad=False)
            assert abs(a.sum() - b.sum()) < 1e-10


class TestEval:
    def test_oracle_predictor_has_zero_error(self):
        spec = MlpSpec((2, 1))
        w = np.array([[0.5], [-1.5]])
        tasks = []
        rng = np.random.default_rng(6)
        for _ in range(4):
            xs, xq = rng.standard_normal((5, 2)), rng.standard_normal((5, 2))
            tasks.append(Task(xs, xs @ w, xq, xq @ w))
        theta = ParamVector(spec, [0.5, -1.5, 0.0])
        s = meta_eval(spec, theta, None, 4, InnerLoopCfg(), tasks=tasks)
        assert s.mean == 0.0 and s.nll_mean == 0.0

    def test_single_task_has_no_interval(self):
        spec = MlpSpec((1, 4, 1))
        s = meta_eval(spec, model.init_params(spec, np.random.default_rng(0)), SinusoidDist(), 1, InnerLoopCfg())
        assert np.isnan(s.ci95)
        assert mt._fmt(s.ci95) == "NA"

    def test_interval_formula(self):
        s = mt.summarize([1.0, 2.0, 3.0, 4.0], "mse", [0.0])
        assert s.ci95 == pytest.approx(1.96 * np.std([1, 2, 3, 4], ddof=1) / 2)

    def test_random_classifier_is_at_chance(self):
        spec = MlpSpec((16, 40, 5), "relu", "categorical")
        theta = model.init_params(spec, np.random.default_rng(7))
        s = meta_eval(spec, theta, FewShotDist(), 600, InnerLoopCfg(), adapt=False, seed=7)
        assert abs(s.mean - 0.2) < 0.03


class TestClipping:
    def test_long_gradient_is_shortened(self):
        g = mt.clip_by_norm(np.array([3.0, 4.0]), 1.0)
        np.testing.assert_allclose(g, [0.6, 0.8])

    def test_short_gradient_untouched(self):
        g = np.array([0.3, 0.4])
        assert mt.clip_by_norm(g, 1.0) is g
        assert mt.clip_by_norm(g, None) is g

    def test_rejects_non_positive(self):
        with pytest.raises(ValueError):
            MetaCfg(clip_norm=0.0)


class TestOptimizers:
    def test_adam_first_step_is_lr_sign(self):
        opt = mt.Adam(0.1)
        x = opt.step(np.zeros(3), np.array([2.0, -0.5, 1e-3]))
        np.testing.assert_allclose(x, [-0.1, 0.1, -0.1], rtol=1e-4)

    def test_sgd(self):
        np.testing.assert_array_equal(mt.SGD(0.5).step(np.ones(2), np.array([2.0, -2.0])), [0.0, 2.0])

    def test_config_rejects_unknown_optimizer(self):
        with pytest.raises(ValueError):
            MetaCfg(optimizer="rmsprop")


@pytest.mark.slow
def test_training_reduces_eval_error():
    cfg = RunConfig({"meta.iterations": 2000, "meta.eval_every": 2000})
    res = meta_train(cfg.meta_cfg(), cfg.task_dist(), cfg.mlp_spec(), cfg.sub_cfg())
    assert res.metrics[-1]["eval_metric_mean"] < res.metrics[0]["eval_metric_mean"]
