"""Tensor values and the append-only graph that records operations on them.

A :class:`Tensor` is an immutable float64 array. When at least one input of a
primitive carries a graph node, the primitive appends a :class:`Node` to that
graph; :func:`backward` then walks the nodes in reverse and :func:`jvp` replays
them forward with tangents.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes do not conform for an operation."""


class GraphError(RuntimeError):
    """Raised on misuse of the recorded graph (non-scalar loss, foreign nodes)."""


class UnsupportedOpError(GraphError):
    """Raised when forward-mode propagation meets an op without a tangent rule."""


class Tensor:
    """Dense float64 array, optionally attached to a recording graph."""

    __slots__ = ("data", "node")

    def __init__(self, data, node: "Node | None" = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr is data:
            arr = arr.view()
        arr.flags.writeable = False
        self.data = arr
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def recorded(self) -> bool:
        return self.node is not None

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", node={self.node.index}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    # Operator sugar; the implementations live in ops to keep one op registry.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        if np.isscalar(other):
            return ops.scale(self, float(other))
        return ops.mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        from . import ops
        if np.isscalar(other):
            return ops.scale(self, 1.0 / float(other))
        return ops.div(self, other)

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    @property
    def T(self):
        from . import ops
        return ops.transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


VJP = Callable[[np.ndarray], Sequence["np.ndarray | None"]]
JVPRule = Callable[[Sequence["np.ndarray | None"]], "np.ndarray | None"]


@dataclass(eq=False)
class Node:
    """One recorded primitive application."""

    index: int
    kind: str
    parents: tuple["Node | None", ...]
    vjp: VJP
    jvp: JVPRule | None
    value: np.ndarray
    graph: "Graph" = field(repr=False)


class Graph:
    """Append-only record of primitive operations.

    Rebuild one per training or attack step; nodes keep their saved arrays
    alive until the graph is dropped.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, data) -> Tensor:
        """Register ``data`` as a differentiable input of this graph."""
        t = as_tensor(data)
        node = self._append("leaf", (), _no_vjp, _leaf_jvp, t.data)
        return Tensor(t.data, node)

    def leaves(self, named: Mapping[str, Any]) -> dict[str, Tensor]:
        return {k: self.leaf(v) for k, v in named.items()}

    def _append(self, kind, parents, vjp, jvp, value) -> Node:
        node = Node(len(self.nodes), kind, tuple(parents), vjp, jvp, value, self)
        self.nodes.append(node)
        return node

    def replay(self) -> dict[int, np.ndarray]:
        """Recorded output of every node, keyed by node index."""
        return {n.index: n.value for n in self.nodes}


def _no_vjp(g):
    return ()


def _leaf_jvp(tangents):
    # Leaf tangents are seeded directly by jvp(); never called.
    raise AssertionError("leaf tangent rule should not be invoked")


def record(kind: str, out: np.ndarray, inputs: Sequence[Tensor], vjp: VJP,
           jvp: JVPRule | None) -> Tensor:
    """Wrap ``out`` as a Tensor, appending a node if any input is recorded."""
    parents = tuple(t.node for t in inputs)
    graph = None
    for p in parents:
        if p is not None:
            if graph is None:
                graph = p.graph
            elif p.graph is not graph:
                raise GraphError(f"{kind}: inputs belong to different graphs")
    if graph is None:
        return Tensor(out)
    node = graph._append(kind, parents, vjp, jvp, out)
    return Tensor(out, node)


def _flatten_targets(wrt):
    if isinstance(wrt, Tensor):
        return [wrt], lambda gs: gs[0]
    if isinstance(wrt, Mapping):
        keys = list(wrt)
        return [wrt[k] for k in keys], lambda gs: dict(zip(keys, gs))
    items = list(wrt)
    return items, lambda gs: list(gs)


@dataclass(frozen=True)
class SliceGrad:
    """A gradient that is zero except on ``index``; added in place instead of materialised."""

    shape: tuple
    index: tuple
    value: np.ndarray


def _accumulate(grads: dict, owned: set, key: int, pg) -> None:
    prev = grads.get(key)
    if isinstance(pg, SliceGrad):
        if prev is None:
            prev = np.zeros(pg.shape)
        elif key not in owned:
            prev = np.array(prev, dtype=np.float64)
        prev[pg.index] += pg.value
        grads[key] = prev
        owned.add(key)
    elif prev is None:
        grads[key] = pg
        owned.discard(key)
    elif key in owned and np.shape(pg) == prev.shape:
        prev += pg
    else:
        grads[key] = prev + pg
        owned.add(key)


def backward(loss: Tensor, wrt):
    """Gradients of scalar ``loss`` with respect to ``wrt``.

    ``wrt`` may be a Tensor, a sequence of Tensors or a mapping of name to
    Tensor; the result mirrors that structure. Targets that ``loss`` does not
    depend on (including unrecorded tensors) get zero gradients.
    """
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    targets, rebuild = _flatten_targets(wrt)
    if loss.node is None:
        return rebuild([np.zeros(t.shape) for t in targets])

    graph = loss.node.graph
    for t in targets:
        if t.node is not None and t.node.graph is not graph:
            raise GraphError("backward target was recorded on a different graph")

    keep = {t.node.index for t in targets if t.node is not None}
    grads: dict[int, np.ndarray] = {loss.node.index: np.ones(loss.shape)}
    # arrays allocated here and referenced nowhere else; safe to update in place
    owned: set[int] = set()
    for node in reversed(graph.nodes[: loss.node.index + 1]):
        g = grads.get(node.index)
        if g is None or not node.parents:
            continue
        owned.discard(node.index)
        in_grads = node.vjp(g)
        for parent, pg in zip(node.parents, in_grads):
            if parent is None or pg is None:
                continue
            _accumulate(grads, owned, parent.index, pg)
        if node.index not in keep:
            del grads[node.index]

    out = []
    for t in targets:
        g = grads.get(t.node.index) if t.node is not None else None
        out.append(np.zeros(t.shape) if g is None else np.asarray(g, dtype=np.float64).reshape(t.shape))
    return rebuild(out)


def jvp(outputs, tangents: Mapping[int, np.ndarray] | Sequence[tuple[Tensor, np.ndarray]]):
    """Directional derivatives of recorded ``outputs`` along input ``tangents``.

    ``tangents`` pairs recorded tensors with tangent arrays of the same shape.
    Tangents are propagated forward through every node between the earliest
    seeded node and the latest requested output, using the values saved on the
    graph. Returns arrays mirroring the structure of ``outputs``.
    """
    seeds = list(tangents.items()) if isinstance(tangents, Mapping) else list(tangents)
    targets, rebuild = _flatten_targets(outputs)
    if not seeds:
        raise GraphError("jvp needs at least one seeded tangent")

    graph = None
    tan: dict[int, np.ndarray] = {}
    for t, v in seeds:
        if t.node is None:
            raise GraphError("jvp seed must be a recorded tensor")
        v = np.asarray(v, dtype=np.float64)
        if v.shape != t.shape:
            raise ShapeError(f"jvp: tangent shape {v.shape} does not match input shape {t.shape}")
        graph = graph or t.node.graph
        if t.node.graph is not graph:
            raise GraphError("jvp seeds belong to different graphs")
        tan[t.node.index] = v

    recorded = [t for t in targets if t.node is not None]
    start = min(tan)
    stop = max((t.node.index for t in recorded), default=start)
    for node in graph.nodes[start: stop + 1]:
        if node.index in tan or not node.parents:
            continue
        in_t = [tan.get(p.index) if p is not None else None for p in node.parents]
        if all(v is None for v in in_t):
            continue
        if node.jvp is None:
            raise UnsupportedOpError(f"no forward-mode rule for op '{node.kind}'")
        out_t = node.jvp(in_t)
        if out_t is not None:
            tan[node.index] = out_t

    res = []
    for t in targets:
        v = tan.get(t.node.index) if t.node is not None else None
        res.append(np.zeros(t.shape) if v is None else np.asarray(v).reshape(t.shape))
    return rebuild(res)


def jvp_fn(fn: Callable[..., Tensor], primals: Sequence, tangents: Sequence):
    """Evaluate ``fn`` at ``primals`` and its JVP along ``tangents``.

    Returns ``(outputs, output_tangents)`` with outputs as plain Tensors.
    """
    graph = Graph()
    xs = [graph.leaf(p) for p in primals]
    out = fn(*xs)
    t_out = jvp(out, list(zip(xs, tangents)))
    detach = (lambda o: o.detach()) if isinstance(out, Tensor) else None
    if detach is not None:
        return detach(out), t_out
    return [o.detach() for o in out], t_out
