"""Task distributions: sinusoid regression and Gaussian-cluster few-shot classification."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


@dataclass
class Task:
    """One episode. Inputs are ``(n, dim)``; targets ``(n, out)`` or integer labels ``(n,)``."""

    x_support: np.ndarray
    y_support: np.ndarray
    x_query: np.ndarray
    y_query: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.x_support) < 1 or len(self.x_query) < 1:
            raise ValueError("a task needs at least one support and one query example")


@dataclass
class TaskBatch:
    """Tasks stacked along a leading axis; all share N and M."""

    x_support: np.ndarray
    y_support: np.ndarray
    x_query: np.ndarray
    y_query: np.ndarray
    metas: list

    def __len__(self):
        return len(self.x_support)

    def select(self, idx) -> "TaskBatch":
        idx = np.asarray(idx)
        return TaskBatch(self.x_support[idx], self.y_support[idx], self.x_query[idx], self.y_query[idx],
                         [self.metas[i] for i in idx])


def stack_tasks(tasks: Sequence[Task]) -> TaskBatch:
    return TaskBatch(
        np.stack([t.x_support for t in tasks]),
        np.stack([t.y_support for t in tasks]),
        np.stack([t.x_query for t in tasks]),
        np.stack([t.y_query for t in tasks]),
        [t.meta for t in tasks],
    )


def unstack(batch: TaskBatch) -> list[Task]:
    return [Task(batch.x_support[j], batch.y_support[j], batch.x_query[j], batch.y_query[j], batch.metas[j])
            for j in range(len(batch))]


@dataclass
class SinusoidDist:
    amplitude_range: tuple = (0.1, 5.0)
    phase_range: tuple = (0.0, np.pi)
    input_range: tuple = (-10.0, 10.0)
    n_support: int = 10
    n_query: int = 10
    input_window: Optional[tuple] = None
    query_grid: bool = False

    def __post_init__(self):
        if self.n_support < 1 or self.n_query < 1:
            raise ValueError("n_support and n_query must be positive")
        if self.input_window is not None:
            lo, hi = self.input_window
            if not hi > lo:
                raise ValueError(f"empty input window {self.input_window}")

    def sample(self, rng: np.random.Generator) -> Task:
        return sample_sinusoid(self, rng)


def sinusoid(x, amplitude: float, phase: float) -> np.ndarray:
    return amplitude * np.sin(np.asarray(x) - phase)


def sample_sinusoid(dist: SinusoidDist, rng: np.random.Generator, amplitude: float = None,
                    phase: float = None) -> Task:
    amp = rng.uniform(*dist.amplitude_range) if amplitude is None else float(amplitude)
    phs = rng.uniform(*dist.phase_range) if phase is None else float(phase)
    lo, hi = dist.input_window if dist.input_window is not None else dist.input_range
    xs = rng.uniform(lo, hi, (dist.n_support, 1))
    if dist.query_grid:
        xq = np.linspace(*dist.input_range, dist.n_query).reshape(-1, 1)
    else:
        xq = rng.uniform(*dist.input_range, (dist.n_query, 1))
    return Task(xs, sinusoid(xs, amp, phs), xq, sinusoid(xq, amp, phs), {"amplitude": amp, "phase": phs})


@dataclass
class FewShotDist:
    """Fresh Gaussian class means per episode; ``n_query`` is per class."""

    n_way: int = 5
    n_shot: int = 1
    n_query: int = 15
    dim: int = 16
    separation: float = 3.0

    def __post_init__(self):
        if self.n_way < 2:
            raise ValueError("need at least two classes")
        if self.separation < 0:
            raise ValueError("separation must be non-negative")

    def sample(self, rng: np.random.Generator) -> Task:
        return sample_synthetic_fewshot(self.n_way, self.n_shot, self.n_query, self.dim, self.separation, rng)


def sample_synthetic_fewshot(n_way: int, n_shot: int, n_query: int, dim: int, separation: float,
                             rng: np.random.Generator) -> Task:
    if n_way < 2:
        raise ValueError("need at least two classes")
    means = separation * rng.standard_normal((n_way, dim))
    ys = np.repeat(np.arange(n_way), n_shot)
    yq = np.repeat(np.arange(n_way), n_query)
    xs = means[ys] + rng.standard_normal((ys.size, dim))
    xq = means[yq] + rng.standard_normal((yq.size, dim))
    return Task(xs, ys, xq, yq, {"means": means})


def nearest_mean_accuracy(task: Task) -> float:
    """Accuracy of classifying queries by the nearest support-class centroid."""
    classes = np.unique(task.y_support)
    cents = np.stack([task.x_support[task.y_support == c].mean(axis=0) for c in classes])
    d = ((task.x_query[:, None, :] - cents[None]) ** 2).sum(-1)
    return float((classes[np.argmin(d, axis=1)] == task.y_query).mean())


def task_rng(seed: int, stream: int, index: int) -> np.random.Generator:
    """Independent generator for (base seed, named stream, index)."""
    return np.random.default_rng([seed, stream, index])


def export_tasks_csv(path, tasks: Sequence[Task]) -> None:
    dim = tasks[0].x_support.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["task_id", "set"] + [f"input_{i}" for i in range(dim)] + ["target"])
        for tid, t in enumerate(tasks):
            for name, X, Y in (("support", t.x_support, t.y_support), ("query", t.x_query, t.y_query)):
                for x, y in zip(X, Y):
                    target = np.ravel(y)
                    w.writerow([tid, name] + [repr(float(v)) for v in x]
                               + [repr(float(target[0])) if target.size == 1 else " ".join(map(repr, target))])
