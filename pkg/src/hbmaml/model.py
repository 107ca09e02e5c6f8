"""Fully connected probabilistic networks and their negative log-likelihoods.

Parameters travel as a list of Nodes ``[W1, b1, W2, b2, ...]`` with
``W`` of shape ``(fan_in, fan_out)`` and ``b`` of shape ``(1, fan_out)``;
extra leading axes index tasks. The flat layout of :class:`ParamVector`
stores each layer as ``W.ravel()`` followed by ``b``, i.e. the row-major
vectorisation of the stacked matrix ``[W; b]``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numcore as nc
from .numcore import Node

ACTIVATIONS = ("tanh", "relu")
LIKELIHOODS = ("gaussian", "categorical")
CKPT_MAGIC = b"HBMCKPT1"


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: tuple
    activation: str = "tanh"
    likelihood: str = "gaussian"

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(s) for s in self.layer_sizes))
        if len(self.layer_sizes) < 2 or min(self.layer_sizes) < 1:
            raise ValueError(f"bad layer sizes {self.layer_sizes}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.likelihood not in LIKELIHOODS:
            raise ValueError(f"unknown likelihood {self.likelihood!r}")

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_outputs(self) -> int:
        return self.layer_sizes[-1]

    def shapes(self) -> list[tuple]:
        out = []
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            out += [(fan_in, fan_out), (1, fan_out)]
        return out

    @property
    def n_params(self) -> int:
        return int(sum(int(np.prod(s)) for s in self.shapes()))

    def block_sizes(self) -> list[int]:
        """Parameter count of each layer's ``[W; b]`` block."""
        return [(i + 1) * o for i, o in zip(self.layer_sizes[:-1], self.layer_sizes[1:])]

    def digest(self) -> bytes:
        canon = json.dumps(
            {"layer_sizes": list(self.layer_sizes), "activation": self.activation, "likelihood": self.likelihood},
            sort_keys=True,
        )
        return hashlib.sha256(canon.encode()).digest()


@dataclass
class ParamVector:
    spec: MlpSpec
    flat: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.flat = np.asarray(self.flat, dtype=np.float64).reshape(-1)
        if self.flat.size != self.spec.n_params:
            raise ShapeError(f"expected {self.spec.n_params} parameters, got {self.flat.size}")

    def arrays(self) -> list[np.ndarray]:
        out, pos = [], 0
        for shape in self.spec.shapes():
            n = int(np.prod(shape))
            out.append(self.flat[pos : pos + n].reshape(shape).copy())
            pos += n
        return out

    def leaves(self) -> list[Node]:
        return [nc.leaf(a, name=f"theta[{i}]") for i, a in enumerate(self.arrays())]

    @classmethod
    def from_arrays(cls, spec: MlpSpec, arrays: Sequence) -> "ParamVector":
        parts = [np.asarray(a.value if isinstance(a, Node) else a, dtype=np.float64) for a in arrays]
        for part, shape in zip(parts, spec.shapes()):
            if part.shape != shape:
                raise ShapeError(f"array of shape {part.shape} where {shape} expected")
        return cls(spec, np.concatenate([p.ravel() for p in parts]))


def init_params(spec: MlpSpec, rng: np.random.Generator) -> ParamVector:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases."""
    arrays = []
    for fan_in, fan_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        arrays.append(rng.uniform(-bound, bound, (fan_in, fan_out)))
        arrays.append(rng.uniform(-bound, bound, (1, fan_out)))
    return ParamVector.from_arrays(spec, arrays)


def _activate(spec: MlpSpec, z: Node) -> Node:
    return nc.tanh(z) if spec.activation == "tanh" else nc.relu(z)


def _check_inputs(spec: MlpSpec, X) -> Node:
    X = nc.const(X)
    if X.ndim < 2 or X.shape[-1] != spec.n_inputs:
        raise ShapeError(f"inputs of shape {X.shape} do not match {spec.n_inputs} input units")
    if X.shape[-2] < 1:
        raise ShapeError("empty batch")
    return X


def forward(spec: MlpSpec, params: Sequence[Node], X) -> Node:
    """Network output (regression mean or class logits), shape ``(..., N, n_out)``."""
    return forward_trace(spec, params, X)[0]


def forward_trace(spec: MlpSpec, params: Sequence[Node], X):
    """Output plus every layer's input activations and pre-activations."""
    a = _check_inputs(spec, X)
    inputs, pre = [], []
    for layer in range(spec.n_layers):
        W, b = params[2 * layer], params[2 * layer + 1]
        inputs.append(a)
        z = nc.add(nc.matmul(a, W), b)
        pre.append(z)
        a = _activate(spec, z) if layer < spec.n_layers - 1 else z
    return a, inputs, pre


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ShapeError(f"labels outside [0, {n_classes})")
    return np.eye(n_classes)[labels.astype(int)]


def per_example_nll(spec: MlpSpec, output: Node, Y) -> Node:
    """Negative log-likelihood of each example, shape ``(..., N)``.

    Gaussian: half the squared error, the additive normalising constant dropped.
    """
    if spec.likelihood == "gaussian":
        Y = np.asarray(Y, dtype=np.float64)
        if Y.shape != output.shape:
            raise ShapeError(f"targets of shape {Y.shape} vs outputs {output.shape}")
        r = nc.sub(output, Y)
        return nc.mul(nc.sum(nc.mul(r, r), axis=-1), 0.5)
    Y = np.asarray(Y)
    if Y.shape != output.shape[:-1]:
        raise ShapeError(f"labels of shape {Y.shape} vs logits {output.shape}")
    target = one_hot(Y, spec.n_outputs)
    lse = nc.reshape(nc.logsumexp(output, axis=-1), output.shape[:-1])
    return nc.sub(lse, nc.sum(nc.mul(output, target), axis=-1))


def nll(spec: MlpSpec, params: Sequence[Node], X, Y) -> Node:
    """Mean negative log-likelihood over the example axis; one value per task."""
    return nc.mean(per_example_nll(spec, forward(spec, params, X), Y), axis=-1)


def predict(spec: MlpSpec, params, X) -> np.ndarray:
    if isinstance(params, ParamVector):
        params = params.arrays()
    with nc.no_record():
        return forward(spec, [nc.const(p) for p in params], X).value


def squared_error(pred: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Mean over examples of the summed squared error per example."""
    return ((np.asarray(pred) - np.asarray(Y)) ** 2).sum(axis=-1).mean(axis=-1)


def accuracy(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    return (np.argmax(logits, axis=-1) == np.asarray(labels)).mean(axis=-1)


def output_hessian_sqrt(spec: MlpSpec, output: Node) -> list[Node]:
    """Columns ``s_c`` with ``sum_c s_c s_c^T`` equal to the NLL Hessian in output space."""
    n_out = spec.n_outputs
    if spec.likelihood == "gaussian":
        return [nc.const(np.broadcast_to(np.eye(n_out)[c], output.shape).copy()) for c in range(n_out)]
    # softmax Hessian diag(p) - p p^T = S S^T with S = diag(sqrt p) - p sqrt(p)^T
    p = nc.exp(nc.sub(output, nc.logsumexp(output, axis=-1)))
    cols = []
    for c in range(n_out):
        e_c = np.zeros(n_out)
        e_c[c] = 1.0
        sqrt_pc = nc.power(nc.slice_last(p, c, c + 1), 0.5)
        cols.append(nc.mul(sqrt_pc, nc.sub(e_c, p)))
    return cols


def backprop_signals(spec: MlpSpec, params: Sequence[Node], inputs, pre, out_grad: Node) -> list[tuple[Node, Node]]:
    """Per-layer ``(a_bar, delta)``: inputs with a ones column, and output-gradient backprop.

    ``delta`` for the last layer is ``out_grad``; earlier layers use
    ``(delta W^T) * act'(z)``. All pieces stay differentiable.
    """
    deltas = [None] * spec.n_layers
    delta = nc.const(out_grad)
    for layer in reversed(range(spec.n_layers)):
        deltas[layer] = delta
        if layer == 0:
            break
        W = params[2 * layer]
        back = nc.matmul(delta, nc.swap_last(W))
        z = pre[layer - 1]
        if spec.activation == "tanh":
            t = nc.tanh(z)
            delta = nc.mul(back, nc.sub(1.0, nc.mul(t, t)))
        else:
            delta = nc.mul(back, (z.value > 0).astype(np.float64))
    out = []
    for layer in range(spec.n_layers):
        a = nc.const(inputs[layer])
        ones = np.ones(a.shape[:-1] + (1,))
        out.append((nc.concat_last([a, ones]), deltas[layer]))
    return out


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: ParamVector) -> None:
    flat = np.ascontiguousarray(params.flat, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(params.spec.digest())
        fh.write(struct.pack("<Q", flat.size))
        fh.write(flat.tobytes())


def load_checkpoint(path, spec: MlpSpec) -> ParamVector:
    raw = Path(path).read_bytes()
    head = len(CKPT_MAGIC) + 32 + 8
    if len(raw) < head or raw[: len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a parameter checkpoint")
    digest = raw[len(CKPT_MAGIC) : len(CKPT_MAGIC) + 32]
    if digest != spec.digest():
        raise ValueError(f"{path}: checkpoint was written for a different network")
    (count,) = struct.unpack("<Q", raw[head - 8 : head])
    body = raw[head:]
    if len(body) != 8 * count:
        raise ValueError(f"{path}: truncated checkpoint")
    return ParamVector(spec, np.frombuffer(body, dtype="<f8").astype(np.float64))
