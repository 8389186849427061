"""Minimal reverse-mode differentiation over dense numpy arrays.

A :class:`Graph` is built symbolically (nodes record an op kind and their
parents) and then evaluated with :func:`forward_eval`, so the same graph can
be replayed under perturbed bindings for finite-difference checks.

Besides the usual dense ops the engine has the two gradient-routing nodes
that VQ training needs:

* ``stop_gradient(x)``: identity forward, zero backward.
* ``straight_through(original, quantized)``: forward value of ``quantized``,
  backward copies the upstream gradient to ``original`` and nothing to
  ``quantized``.

``vq_lookup`` quantizes rows against a codebook, pushes the indices through a
caller-supplied channel and gathers the detected codewords. Its backward
scatters into the codebook only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

OP_KINDS = (
    "input",
    "linear",
    "bias-add",
    "activation",
    "mse",
    "add",
    "mul",
    "scale",
    "sum",
    "reshape",
    "stop-gradient",
    "straight-through",
    "vq-lookup",
)


class GraphError(ValueError):
    """Structural problem while evaluating a graph (shape, binding, seed)."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class NonDifferentiablePoint(ArithmeticError):
    """Evaluation sits on (or crosses) a VQ decision boundary or an activation kink."""


@dataclass(eq=False)
class Node:
    id: int
    op: str
    parents: tuple["Node", ...]
    attrs: dict = field(default_factory=dict)
    name: str | None = None
    value: np.ndarray | None = None
    grad: np.ndarray | None = None
    # discrete decisions taken in the last forward pass (VQ indices, kink masks)
    aux: dict = field(default_factory=dict)

    def __repr__(self) -> str:
        label = self.name or self.op
        return f"Node({self.id}, {label})"


class Graph:
    """A DAG of nodes in creation order (which is a valid topological order)."""

    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self.inputs: dict[str, Node] = {}

    def _add(self, op: str, parents=(), name: str | None = None, **attrs) -> Node:
        for p in parents:
            if p.id >= len(self.nodes) or self.nodes[p.id] is not p:
                raise GraphError(f"parent {p!r} does not belong to this graph")
        node = Node(len(self.nodes), op, tuple(parents), attrs, name)
        self.nodes.append(node)
        return node

    def input(self, name: str) -> Node:
        if name in self.inputs:
            raise GraphError(f"duplicate input {name!r}")
        node = self._add("input", name=name)
        self.inputs[name] = node
        return node

    def linear(self, x: Node, w: Node, name=None) -> Node:
        """Row-batched ``x @ w`` with ``w`` stored as (in, out)."""
        return self._add("linear", (x, w), name)

    def bias_add(self, x: Node, b: Node, name=None) -> Node:
        return self._add("bias-add", (x, b), name)

    def leaky_relu(self, x: Node, slope: float = 0.2, name=None) -> Node:
        return self._add("activation", (x,), name, slope=float(slope))

    def mse(self, a: Node, b: Node, name=None) -> Node:
        return self._add("mse", (a, b), name)

    def add(self, a: Node, b: Node, name=None) -> Node:
        return self._add("add", (a, b), name)

    def mul(self, a: Node, b: Node, name=None) -> Node:
        return self._add("mul", (a, b), name)

    def scale(self, x: Node, c: float, name=None) -> Node:
        return self._add("scale", (x,), name, c=float(c))

    def sum(self, x: Node, name=None) -> Node:
        return self._add("sum", (x,), name)

    def reshape(self, x: Node, shape: tuple[int, ...], name=None) -> Node:
        return self._add("reshape", (x,), name, shape=tuple(shape))

    def stop_gradient(self, x: Node, name=None) -> Node:
        return self._add("stop-gradient", (x,), name)

    def straight_through(self, original: Node, quantized: Node, name=None) -> Node:
        return self._add("straight-through", (original, quantized), name)

    def vq_lookup(
        self,
        features: Node,
        codebook: Node,
        channel: Callable[[np.ndarray, Any], np.ndarray] | None = None,
        name=None,
    ) -> Node:
        """Nearest-codeword quantization of ``features`` rows, channel, dequantization.

        ``channel(z, rng)`` maps transmitted indices to detected indices; ``None``
        means an ideal channel.
        """
        return self._add("vq-lookup", (features, codebook), name, channel=channel)


def nearest_codeword(codebook: np.ndarray, rows: np.ndarray) -> tuple[np.ndarray, bool]:
    """Index of the nearest codebook row for every row; lowest index on ties.

    Returns ``(indices, tie)`` where ``tie`` flags an exact equidistant pair
    at the minimum for any row.
    """
    d2 = (
        np.sum(rows * rows, axis=1, keepdims=True)
        - 2.0 * rows @ codebook.T
        + np.sum(codebook * codebook, axis=1)[None, :]
    )
    # recompute exactly on the winning pair to make tie detection reliable
    idx = np.argmin(d2, axis=1)
    tie = False
    if codebook.shape[0] > 1:
        part = np.partition(d2, 1, axis=1)
        close = np.abs(part[:, 1] - part[:, 0]) <= 1e-12 * (1.0 + np.abs(part[:, 0]))
        if np.any(close):
            for r in np.flatnonzero(close):
                exact = np.sum((codebook - rows[r]) ** 2, axis=1)
                best = exact.min()
                winners = np.flatnonzero(exact == best)
                idx[r] = winners[0]
                tie = tie or len(winners) > 1
    return idx, tie


def _check_finite(node: Node, value: np.ndarray) -> np.ndarray:
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(f"non-finite value produced at {node!r}")
    return value


def forward_eval(
    graph: Graph,
    bindings: dict[str, np.ndarray],
    rng: np.random.Generator | None = None,
    frozen: dict[int, np.ndarray] | None = None,
    strict: bool = False,
) -> dict[int, np.ndarray]:
    """Evaluate every node in creation order.

    ``frozen`` replaces the detached part of stop-gradient / straight-through
    nodes with recorded constants (used by :func:`grad_check`). With
    ``strict`` an exact VQ tie raises :class:`NonDifferentiablePoint`.
    """
    values: dict[int, np.ndarray] = {}
    for node in graph.nodes:
        node.aux = {}
        node.grad = None
        pv = [p.value for p in node.parents]
        op = node.op
        if op == "input":
            if node.name not in bindings:
                raise GraphError(f"unbound input {node.name!r}")
            v = np.asarray(bindings[node.name], dtype=np.float64)
        elif op == "linear":
            x, w = pv
            if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[0]:
                raise GraphError(f"shape mismatch at {node!r}: {x.shape} @ {w.shape}")
            v = x @ w
        elif op == "bias-add":
            x, b = pv
            if b.ndim != 1 or x.shape[-1] != b.shape[0]:
                raise GraphError(f"shape mismatch at {node!r}: {x.shape} + {b.shape}")
            v = x + b
        elif op == "activation":
            (x,) = pv
            pos = x > 0
            node.aux["mask"] = pos
            v = np.where(pos, x, node.attrs["slope"] * x)
        elif op == "mse":
            a, b = pv
            if a.shape != b.shape:
                raise GraphError(f"shape mismatch at {node!r}: {a.shape} vs {b.shape}")
            v = np.asarray(np.mean((a - b) ** 2))
        elif op in ("add", "mul"):
            a, b = pv
            if a.shape != b.shape:
                raise GraphError(f"shape mismatch at {node!r}: {a.shape} vs {b.shape}")
            v = a + b if op == "add" else a * b
        elif op == "scale":
            v = node.attrs["c"] * pv[0]
        elif op == "sum":
            v = np.asarray(np.sum(pv[0]))
        elif op == "reshape":
            try:
                v = pv[0].reshape(node.attrs["shape"])
            except ValueError as exc:
                raise GraphError(f"shape mismatch at {node!r}: {exc}") from None
        elif op == "stop-gradient":
            v = frozen[node.id] if frozen is not None else pv[0].copy()
        elif op == "straight-through":
            orig, quant = pv
            if orig.shape != quant.shape:
                raise GraphError(f"shape mismatch at {node!r}: {orig.shape} vs {quant.shape}")
            v = orig + frozen[node.id] if frozen is not None else quant.copy()
        elif op == "vq-lookup":
            y, cb = pv
            if y.ndim != 2 or cb.ndim != 2 or y.shape[1] != cb.shape[1]:
                raise GraphError(f"shape mismatch at {node!r}: {y.shape} vs codebook {cb.shape}")
            z, tie = nearest_codeword(cb, y)
            if strict and tie:
                raise NonDifferentiablePoint(f"VQ tie at {node!r}")
            channel = node.attrs.get("channel")
            z_hat = z if channel is None else channel(z, rng)
            node.aux["z"] = z
            node.aux["z_hat"] = z_hat
            v = cb[z_hat]
        else:  # pragma: no cover - guarded by the builder
            raise GraphError(f"unknown op {op!r}")
        node.value = _check_finite(node, v)
        values[node.id] = node.value
    return values


def _accumulate(node: Node, g: np.ndarray) -> None:
    if node.grad is None:
        node.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        node.grad += g


def backward(graph: Graph, seed: Node) -> dict[str, np.ndarray]:
    """Reverse sweep from a scalar ``seed``; returns gradients of every input by name."""
    if seed.value is None:
        raise GraphError("forward_eval must run before backward")
    if seed.value.size != 1:
        raise GraphError(f"seed {seed!r} is not scalar (shape {seed.value.shape})")
    for node in graph.nodes:
        node.grad = None
    seed.grad = np.ones_like(seed.value)
    for node in reversed(graph.nodes[: seed.id + 1]):
        g = node.grad
        if g is None or node.op == "input":
            continue
        op = node.op
        ps = node.parents
        if op == "linear":
            x, w = ps
            _accumulate(x, g @ w.value.T)
            _accumulate(w, x.value.T @ g)
        elif op == "bias-add":
            x, b = ps
            _accumulate(x, g)
            _accumulate(b, g.reshape(-1, g.shape[-1]).sum(axis=0))
        elif op == "activation":
            _accumulate(ps[0], np.where(node.aux["mask"], g, node.attrs["slope"] * g))
        elif op == "mse":
            a, b = ps
            diff = (2.0 / a.value.size) * (a.value - b.value) * g
            _accumulate(a, diff)
            _accumulate(b, -diff)
        elif op == "add":
            _accumulate(ps[0], g)
            _accumulate(ps[1], g)
        elif op == "mul":
            a, b = ps
            _accumulate(a, g * b.value)
            _accumulate(b, g * a.value)
        elif op == "scale":
            _accumulate(ps[0], node.attrs["c"] * g)
        elif op == "sum":
            _accumulate(ps[0], np.broadcast_to(g, ps[0].value.shape))
        elif op == "reshape":
            _accumulate(ps[0], g.reshape(ps[0].value.shape))
        elif op == "stop-gradient":
            pass
        elif op == "straight-through":
            _accumulate(ps[0], g)
        elif op == "vq-lookup":
            _, cb = ps
            gc = np.zeros_like(cb.value)
            np.add.at(gc, node.aux["z_hat"], g)
            _accumulate(cb, gc)
    out = {}
    for name, node in graph.inputs.items():
        out[name] = node.grad if node.grad is not None else np.zeros_like(node.value)
    return out


def _snapshot_rng(state) -> np.random.Generator | None:
    if state is None:
        return None
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


def _discrete_pattern(graph: Graph) -> list[np.ndarray]:
    pat = []
    for node in graph.nodes:
        if node.op == "activation":
            pat.append(node.aux["mask"])
        elif node.op == "vq-lookup":
            pat.append(node.aux["z"])
            pat.append(node.aux["z_hat"])
    return pat


def grad_check(
    graph: Graph,
    bindings: dict[str, np.ndarray],
    param: str,
    h: float = 1e-4,
    rng_state: dict | None = None,
    seed: Node | None = None,
    coords: np.ndarray | None = None,
    eps_den: float = 1e-8,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Finite differences are taken on the detached surrogate: every
    stop-gradient / straight-through node keeps the detached value it had at
    the unperturbed point, so the surrogate's derivative is exactly what
    backward claims to compute. The channel RNG is replayed from
    ``rng_state`` for every evaluation (common random numbers).

    Raises :class:`NonDifferentiablePoint` if any VQ assignment or activation
    sign changes across the perturbation, or on an exact VQ tie.
    """
    seed = seed if seed is not None else graph.nodes[-1]
    forward_eval(graph, bindings, _snapshot_rng(rng_state), strict=True)
    analytic = backward(graph, seed)[param].ravel().copy()
    base_pattern = _discrete_pattern(graph)
    frozen = {}
    for node in graph.nodes:
        if node.op == "stop-gradient":
            frozen[node.id] = node.value.copy()
        elif node.op == "straight-through":
            frozen[node.id] = node.parents[1].value - node.parents[0].value

    base = np.asarray(bindings[param], dtype=np.float64)
    coords = np.arange(base.size) if coords is None else np.asarray(coords)
    local = dict(bindings)
    worst = 0.0
    for i in coords:
        vals = []
        for sign in (1.0, -1.0):
            pert = base.copy().ravel()
            pert[i] += sign * h
            local[param] = pert.reshape(base.shape)
            forward_eval(graph, local, _snapshot_rng(rng_state), frozen=frozen, strict=True)
            for a, b in zip(base_pattern, _discrete_pattern(graph)):
                if not np.array_equal(a, b):
                    raise NonDifferentiablePoint(
                        f"discrete decision changed when perturbing {param}[{i}]"
                    )
            vals.append(float(seed.value))
        fd = (vals[0] - vals[1]) / (2.0 * h)
        err = abs(analytic[i] - fd) / (abs(analytic[i]) + eps_den)
        worst = max(worst, err)
    # leave the graph at the unperturbed point
    forward_eval(graph, bindings, _snapshot_rng(rng_state))
    return worst
