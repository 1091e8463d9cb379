"""Reverse-mode automatic differentiation over dense float64 arrays.

Expression graphs are built once from named leaves and then evaluated with
explicit bindings, so a single graph can be reused across thousands of
attack iterations without rebuilding. Broadcasting is deliberately limited
to scalar-with-tensor; everything else requires exact shape agreement.
"""

from __future__ import annotations

import itertools
from typing import Iterable, Mapping

import numpy as np
from scipy.special import expit


class AutodiffError(Exception):
    """Base class for graph construction and evaluation failures."""


class ShapeError(AutodiffError):
    """Operand shapes are incompatible at some node."""


class UnboundLeafError(AutodiffError):
    """A named leaf was not supplied in the bindings."""


class DomainError(AutodiffError):
    """An operand lies outside a primitive's numeric domain."""


_node_ids = itertools.count()


class Node:
    """One vertex of an immutable expression DAG.

    ``kind`` is "input", "param", "const" or "op". Leaves carry the name
    used to resolve them from bindings; the input/param distinction marks
    which leaves an optimizer should treat as trainable. Nodes never
    mutate after construction (the cached topological order is computed
    lazily but is identical however many times it is derived), so graphs
    are safe to share across threads.
    """

    __slots__ = ("kind", "op", "operands", "name", "value", "ident", "_topo")

    def __init__(self, kind, op=None, operands=(), name=None, value=None):
        self.kind = kind
        self.op = op
        self.operands = tuple(operands)
        self.name = name
        self.value = value
        self.ident = next(_node_ids)
        self._topo = None

    def __repr__(self):
        if self.kind == "op":
            return f"<{self.op}#{self.ident}>"
        label = self.name if self.name is not None else "const"
        return f"<{self.kind}:{label}#{self.ident}>"


def leaf(name: str) -> Node:
    """Named input leaf, bound at evaluation time."""
    return Node("input", name=name)


def param(name: str) -> Node:
    """Named trainable-parameter leaf, bound at evaluation time."""
    return Node("param", name=name)


def const(value) -> Node:
    """Fixed tensor baked into the graph."""
    return Node("const", value=np.asarray(value, dtype=np.float64))


def _wrap(x) -> Node:
    if isinstance(x, Node):
        return x
    return const(x)


def _op(op: str, *operands) -> Node:
    return Node("op", op=op, operands=[_wrap(o) for o in operands])


def add(a, b) -> Node:
    return _op("add", a, b)


def sub(a, b) -> Node:
    return _op("sub", a, b)


def mul(a, b) -> Node:
    """Elementwise product (exact shape match, or one scalar operand)."""
    return _op("mul", a, b)


def matmul(a, b) -> Node:
    """2-D matrix product."""
    return _op("matmul", a, b)


def sigmoid(a) -> Node:
    return _op("sigmoid", a)


def tanh(a) -> Node:
    return _op("tanh", a)


def arctanh(a) -> Node:
    """Inverse tanh; raises DomainError at evaluation if any |value| >= 1."""
    return _op("arctanh", a)


def relu(a) -> Node:
    return _op("relu", a)


def softplus(a) -> Node:
    return _op("softplus", a)


def reduce_sum(a) -> Node:
    """Sum of all elements, as a 0-d tensor."""
    return _op("reduce_sum", a)


def reduce_mean(a) -> Node:
    """Mean of all elements, as a 0-d tensor."""
    return _op("reduce_mean", a)


def clip01(a) -> Node:
    """Clamp every element into [0, 1]."""
    return _op("clip01", a)


def sign(a) -> Node:
    """Elementwise sign with sign(0) = 0."""
    return _op("sign", a)


def l2_norm(a) -> Node:
    """Euclidean norm of all elements, as a 0-d tensor."""
    return _op("l2_norm", a)


def _elementwise_shape(node: Node, a: np.ndarray, b: np.ndarray) -> None:
    # scalar-with-tensor is the only permitted broadcast
    if a.shape == b.shape or a.shape == () or b.shape == ():
        return
    raise ShapeError(
        f"{node!r}: operand shapes {a.shape} and {b.shape} do not match "
        "(only scalar-with-tensor broadcasting is supported)"
    )


def _forward_value(node: Node, vals: list[np.ndarray]) -> np.ndarray:
    op = node.op
    if op == "add":
        _elementwise_shape(node, vals[0], vals[1])
        return vals[0] + vals[1]
    if op == "sub":
        _elementwise_shape(node, vals[0], vals[1])
        return vals[0] - vals[1]
    if op == "mul":
        _elementwise_shape(node, vals[0], vals[1])
        return vals[0] * vals[1]
    if op == "matmul":
        a, b = vals
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(
                f"{node!r}: cannot matrix-multiply shapes {a.shape} and {b.shape}"
            )
        return a @ b
    if op == "sigmoid":
        return expit(vals[0])
    if op == "tanh":
        return np.tanh(vals[0])
    if op == "arctanh":
        if np.any(np.abs(vals[0]) >= 1.0):
            raise DomainError(f"{node!r}: arctanh operand outside (-1, 1)")
        return np.arctanh(vals[0])
    if op == "relu":
        return np.maximum(vals[0], 0.0)
    if op == "softplus":
        return np.logaddexp(0.0, vals[0])
    if op == "reduce_sum":
        return np.asarray(vals[0].sum())
    if op == "reduce_mean":
        return np.asarray(vals[0].mean())
    if op == "clip01":
        return np.clip(vals[0], 0.0, 1.0)
    if op == "sign":
        return np.sign(vals[0])
    if op == "l2_norm":
        return np.asarray(np.sqrt((vals[0] * vals[0]).sum()))
    raise AutodiffError(f"unknown primitive {op!r}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if shape == () and grad.shape != ():
        return np.asarray(grad.sum())
    return grad


def _backward(node: Node, vals: dict, out_grad: np.ndarray) -> list[np.ndarray]:
    op = node.op
    a = vals[node.operands[0].ident]
    b = vals[node.operands[1].ident] if len(node.operands) > 1 else None
    if op == "add":
        return [_unbroadcast(out_grad, a.shape), _unbroadcast(out_grad, b.shape)]
    if op == "sub":
        return [_unbroadcast(out_grad, a.shape), _unbroadcast(-out_grad, b.shape)]
    if op == "mul":
        return [
            _unbroadcast(out_grad * b, a.shape),
            _unbroadcast(out_grad * a, b.shape),
        ]
    if op == "matmul":
        return [out_grad @ b.T, a.T @ out_grad]
    if op == "sigmoid":
        s = vals[node.ident]
        return [out_grad * s * (1.0 - s)]
    if op == "tanh":
        t = vals[node.ident]
        return [out_grad * (1.0 - t * t)]
    if op == "arctanh":
        return [out_grad / (1.0 - a * a)]
    if op == "relu":
        return [out_grad * (a > 0.0)]
    if op == "softplus":
        return [out_grad * expit(a)]
    if op == "reduce_sum":
        return [np.full(a.shape, float(out_grad))]
    if op == "reduce_mean":
        return [np.full(a.shape, float(out_grad) / max(a.size, 1))]
    if op == "clip01":
        return [out_grad * ((a > 0.0) & (a < 1.0))]
    if op == "sign":
        return [np.zeros_like(a)]
    if op == "l2_norm":
        norm = float(vals[node.ident])
        if norm == 0.0:
            return [np.zeros_like(a)]
        return [out_grad * (a / norm)]
    raise AutodiffError(f"unknown primitive {op!r}")


def _topological(root: Node) -> list[Node]:
    if root._topo is not None:
        return root._topo
    order: list[Node] = []
    seen: set[int] = set()
    stack: list[tuple[Node, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.ident in seen:
            continue
        seen.add(node.ident)
        stack.append((node, True))
        for operand in node.operands:
            stack.append((operand, False))
    root._topo = order
    return order


def _run_forward(root: Node, bindings: Mapping[str, np.ndarray]) -> dict:
    vals: dict[int, np.ndarray] = {}
    for node in _topological(root):
        if node.kind == "const":
            vals[node.ident] = node.value
        elif node.kind in ("input", "param"):
            if node.name not in bindings:
                raise UnboundLeafError(f"leaf {node.name!r} is not bound")
            vals[node.ident] = np.asarray(bindings[node.name], dtype=np.float64)
        else:
            vals[node.ident] = _forward_value(
                node, [vals[o.ident] for o in node.operands]
            )
    return vals


def evaluate(root: Node, bindings: Mapping[str, np.ndarray]) -> np.ndarray:
    """Evaluate the graph rooted at ``root`` under the given leaf bindings.

    Pure and deterministic: equal bindings produce bit-identical results.
    Treat the returned array as read-only.
    """
    vals = _run_forward(root, bindings)
    out = vals[root.ident]
    if root.kind != "op":
        out = out.copy()
    return out


def gradients(
    root: Node, wrt: Iterable[str], bindings: Mapping[str, np.ndarray]
) -> dict[str, np.ndarray]:
    """Reverse-accumulate d(root)/d(leaf) for several leaves in one pass.

    The root must be scalar-valued (size one). Leaves absent from the graph
    get a zero gradient shaped like their binding.
    """
    names = list(wrt)
    vals = _run_forward(root, bindings)
    root_val = vals[root.ident]
    if root_val.size != 1:
        raise ShapeError(
            f"gradient requires a scalar-valued root, got shape {root_val.shape}"
        )
    adjoint: dict[int, np.ndarray] = {root.ident: np.ones_like(root_val)}
    for node in reversed(_topological(root)):
        grad = adjoint.get(node.ident)
        if grad is None or node.kind != "op":
            continue
        for operand, contrib in zip(node.operands, _backward(node, vals, grad)):
            if operand.ident in adjoint:
                adjoint[operand.ident] = adjoint[operand.ident] + contrib
            else:
                adjoint[operand.ident] = contrib
    out: dict[str, np.ndarray] = {}
    for node in _topological(root):
        if node.kind in ("input", "param") and node.name in names:
            grad = adjoint.get(node.ident)
            if grad is None:
                grad = np.zeros_like(vals[node.ident])
            if node.name in out:
                out[node.name] = out[node.name] + grad
            else:
                out[node.name] = grad
    for name in names:
        if name not in out:
            if name not in bindings:
                raise UnboundLeafError(f"leaf {name!r} is not bound")
            out[name] = np.zeros_like(np.asarray(bindings[name], dtype=np.float64))
    return out


def gradient(root: Node, wrt: str, bindings: Mapping[str, np.ndarray]) -> np.ndarray:
    """d(root)/d(wrt) with the shape of the ``wrt`` leaf."""
    return gradients(root, [wrt], bindings)[wrt]


def check_gradient(
    root: Node,
    wrt: str,
    bindings: Mapping[str, np.ndarray],
    step: float = 1e-5,
) -> float:
    """Max relative error of reverse-mode vs. central finite differences.

    The relative error uses a unit floor in the denominator so that
    near-zero gradients compare absolutely instead of dividing by noise.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    analytic = gradient(root, wrt, bindings)
    base = dict(bindings)
    x0 = np.array(bindings[wrt], dtype=np.float64)
    flat_analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    worst = 0.0
    for i in range(x0.size):
        probe = x0.copy().reshape(-1)
        probe[i] = x0.reshape(-1)[i] + step
        base[wrt] = probe.reshape(x0.shape)
        f_plus = float(evaluate(root, base))
        probe[i] = x0.reshape(-1)[i] - step
        base[wrt] = probe.reshape(x0.shape)
        f_minus = float(evaluate(root, base))
        numeric = (f_plus - f_minus) / (2.0 * step)
        a = flat_analytic[i]
        err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
        worst = max(worst, err)
    return worst
