import csv

import numpy as np
import pytest

from hbmaml import tasks
from hbmaml.tasks import FewShotDist, SinusoidDist


class TestSinusoid:
    def test_targets_follow_curve(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            t = SinusoidDist().sample(rng)
            a, p = t.meta["amplitude"], t.meta["phase"]
            np.testing.assert_allclose(t.y_support, a * np.sin(t.x_support - p), atol=1e-12, rtol=0)
            np.testing.assert_allclose(t.y_query, a * np.sin(t.x_query - p), atol=1e-12, rtol=0)

    def test_amplitude_mean(self):
        rng = np.random.default_rng(1)
        dist = SinusoidDist(n_support=1, n_query=1)
        amps = [dist.sample(rng).meta["amplitude"] for _ in range(100_000)]
        assert abs(np.mean(amps) - 2.55) < 0.02

    def test_shapes(self):
        t = SinusoidDist(n_support=7, n_query=3).sample(np.random.default_rng(2))
        assert t.x_support.shape == (7, 1) and t.y_support.shape == (7, 1)
        assert t.x_query.shape == (3, 1)

    def test_window_restricts_support_only(self):
        rng = np.random.default_rng(3)
        dist = SinusoidDist(n_support=20, n_query=200, input_window=(-10.0, 0.0))
        t = dist.sample(rng)
        assert t.x_support.max() <= 0.0 and t.x_support.min() >= -10.0
        assert t.x_query.max() > 0.0

    def test_empty_window_rejected(self):
        with pytest.raises(ValueError):
            SinusoidDist(input_window=(1.0, 1.0))

    def test_query_grid(self):
        t = SinusoidDist(n_query=5, query_grid=True).sample(np.random.default_rng(0))
        np.testing.assert_allclose(t.x_query[:, 0], [-10, -5, 0, 5, 10])

    def test_seeded_streams_reproduce(self):
        a = SinusoidDist().sample(tasks.task_rng(4, 1, 17))
        b = SinusoidDist().sample(tasks.task_rng(4, 1, 17))
        c = SinusoidDist().sample(tasks.task_rng(4, 1, 18))
        np.testing.assert_array_equal(a.x_support, b.x_support)
        assert not np.array_equal(a.x_support, c.x_support)


class TestFewShot:
    def test_shapes_and_labels(self):
        t = FewShotDist(n_way=5, n_shot=2, n_query=3, dim=4).sample(np.random.default_rng(0))
        assert t.x_support.shape == (10, 4) and t.x_query.shape == (15, 4)
        np.testing.assert_array_equal(np.bincount(t.y_support), [2] * 5)
        np.testing.assert_array_equal(np.bincount(t.y_query), [3] * 5)

    def test_well_separated_clusters_are_easy(self):
        rng = np.random.default_rng(1)
        dist = FewShotDist(n_way=5, n_shot=1, n_query=15, dim=8, separation=50.0)
        accs = [tasks.nearest_mean_accuracy(dist.sample(rng)) for _ in range(100)]
        assert np.mean(accs) >= 0.99

    def test_zero_separation_is_chance(self):
        rng = np.random.default_rng(2)
        dist = FewShotDist(separation=0.0)
        accs = [tasks.nearest_mean_accuracy(dist.sample(rng)) for _ in range(600)]
        assert abs(np.mean(accs) - 0.2) < 0.03

    def test_rejects_one_class(self):
        with pytest.raises(ValueError):
            FewShotDist(n_way=1)


class TestBatching:
    def test_stack_and_select(self):
        rng = np.random.default_rng(5)
        ts = [SinusoidDist().sample(rng) for _ in range(4)]
        batch = tasks.stack_tasks(ts)
        assert len(batch) == 4 and batch.x_support.shape == (4, 10, 1)
        sub = batch.select([2, 0])
        np.testing.assert_array_equal(sub.y_query[0], ts[2].y_query)
        back = tasks.unstack(sub)
        assert back[1].meta == ts[0].meta


def test_export_csv(tmp_path):
    rng = np.random.default_rng(6)
    ts = [SinusoidDist(n_support=2, n_query=3).sample(rng) for _ in range(2)]
    tasks.export_tasks_csv(tmp_path / "t.csv", ts)
    rows = list(csv.reader(open(tmp_path / "t.csv")))
    assert rows[0] == ["task_id", "set", "input_0", "target"]
    assert len(rows) == 1 + 2 * 5
    assert float(rows[1][3]) == ts[0].y_support[0, 0]
