"""Flat ``section.key = value`` run configuration with strict key checking."""

from __future__ import annotations

from pathlib import Path

from .adapt import InnerLoopCfg
from .laplace import LaplaceCfg
from .metatrain import MetaCfg
from .model import MlpSpec
from .tasks import FewShotDist, SinusoidDist


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


DEFAULTS = {
    "run.seed": 0,
    "run.output_dir": "runs/default",
    "run.workers": 1,
    "run.record_wall_time": False,
    "task.kind": "sinusoid",
    "task.n_support": 10,
    "task.n_query": 10,
    "task.n_way": 5,
    "task.dim": 16,
    "task.separation": 3.0,
    "task.window": "",
    "model.hidden": "40,40",
    "model.activation": "relu",
    "inner.alpha": 0.015,
    "inner.steps": 5,
    "inner.second_order": True,
    "inner.learn_precond": False,
    "laplace.tau": 0.001,
    "laplace.eta": 1e-6,
    "laplace.curvature": "kfac",
    "laplace.damping": 0.0,
    "laplace.fisher": "true",
    "laplace.detach_logdet": False,
    "meta.subroutine": "ml_point",
    "meta.batch": 25,
    "meta.lr": 0.003,
    "meta.optimizer": "adam",
    "meta.beta1": 0.9,
    "meta.beta2": 0.999,
    "meta.eps": 1e-8,
    "meta.iterations": 10000,
    "meta.eval_every": 1000,
    "meta.eval_tasks": 100,
    "meta.clip_norm": 10.0,
}

_TRUE = {"true", "yes", "on", "1"}
_FALSE = {"false", "no", "off", "0"}


def _coerce(key: str, raw: str):
    default = DEFAULTS[key]
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as err:
        raise ConfigError(key, str(err)) from None
    return raw


class RunConfig:
    def __init__(self, values: dict | None = None):
        self.values = dict(DEFAULTS)
        for key, val in (values or {}).items():
            self.set(key, val)

    def set(self, key: str, value):
        if key not in DEFAULTS:
            raise ConfigError(key, "unknown key")
        self.values[key] = _coerce(key, value) if isinstance(value, str) else value

    def __getitem__(self, key):
        return self.values[key]

    @classmethod
    def parse(cls, text: str, ignore_prefixes: tuple = ()) -> "RunConfig":
        cfg = cls()
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}", f"expected 'section.key = value', got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key.startswith(ignore_prefixes):
                continue
            cfg.set(key, value)
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.parse(Path(path).read_text())

    def dump(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.values.items())

    # builders -------------------------------------------------------------

    def task_dist(self, window=None):
        kind = self["task.kind"]
        if kind == "sinusoid":
            win = window if window is not None else self._window()
            return SinusoidDist(n_support=self["task.n_support"], n_query=self["task.n_query"], input_window=win)
        if kind == "fewshot":
            return FewShotDist(n_way=self["task.n_way"], n_shot=self["task.n_support"], n_query=self["task.n_query"],
                               dim=self["task.dim"], separation=self["task.separation"])
        raise ConfigError("task.kind", f"unknown task kind {kind!r}")

    def _window(self):
        raw = self["task.window"].strip()
        if not raw:
            return None
        try:
            lo, hi = (float(v) for v in raw.split(","))
        except ValueError:
            raise ConfigError("task.window", "expected 'lo,hi'") from None
        if not hi > lo:
            raise ConfigError("task.window", "empty window")
        return (lo, hi)

    def mlp_spec(self) -> MlpSpec:
        try:
            hidden = [int(h) for h in self["model.hidden"].split(",") if h.strip()]
        except ValueError:
            raise ConfigError("model.hidden", "expected comma-separated layer widths") from None
        if self["task.kind"] == "sinusoid":
            sizes, lik = [1, *hidden, 1], "gaussian"
        else:
            sizes, lik = [self["task.dim"], *hidden, self["task.n_way"]], "categorical"
        try:
            return MlpSpec(tuple(sizes), self["model.activation"], lik)
        except ValueError as err:
            raise ConfigError("model", str(err)) from None

    def inner_cfg(self) -> InnerLoopCfg:
        try:
            return InnerLoopCfg(alpha=self["inner.alpha"], K=self["inner.steps"],
                                second_order=self["inner.second_order"], learn_precond=self["inner.learn_precond"])
        except ValueError as err:
            raise ConfigError("inner", str(err)) from None

    def laplace_cfg(self) -> LaplaceCfg:
        try:
            return LaplaceCfg(tau=self["laplace.tau"], eta=self["laplace.eta"],
                              curvature_mode=self["laplace.curvature"], inner=self.inner_cfg(),
                              damping=self["laplace.damping"], fisher=self["laplace.fisher"],
                              detach_logdet=self["laplace.detach_logdet"])
        except ValueError as err:
            raise ConfigError("laplace", str(err)) from None

    def sub_cfg(self):
        return self.laplace_cfg() if self["meta.subroutine"] == "ml_laplace" else self.inner_cfg()

    def meta_cfg(self) -> MetaCfg:
        try:
            return MetaCfg(meta_batch=self["meta.batch"], meta_lr=self["meta.lr"], optimizer=self["meta.optimizer"],
                           beta1=self["meta.beta1"], beta2=self["meta.beta2"], eps=self["meta.eps"],
                           iterations=self["meta.iterations"], subroutine=self["meta.subroutine"],
                           eval_every=self["meta.eval_every"], eval_tasks=self["meta.eval_tasks"],
                           seed=self["run.seed"], workers=self["run.workers"],
                           record_wall_time=self["run.record_wall_time"],
                           clip_norm=self["meta.clip_norm"] or None)
        except ValueError as err:
            raise ConfigError("meta", str(err)) from None


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)
