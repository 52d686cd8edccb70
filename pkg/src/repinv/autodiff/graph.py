"""Static computation graphs with seeded evaluation and reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from repinv.autodiff.ops import OPS, causal_mask


class GraphError(Exception):
    """A graph failed to evaluate or differentiate.

    Attributes:
        node: index of the offending node (``None`` for whole-graph errors).
        op: op kind of that node.
    """

    def __init__(self, message, node=None, op=None):
        self.node = node
        self.op = op
        where = f"node {node} ({op}): " if node is not None else ""
        super().__init__(where + message)


class NonFiniteError(GraphError):
    """A node produced NaN or Inf."""


@dataclass
class Node:
    op: str
    parents: tuple[int, ...]
    attrs: dict = field(default_factory=dict)
    name: str | None = None


class Graph:
    """An append-only DAG. Parents always precede children.

    Parameter values live in ``params`` keyed by slot name, so a graph can be
    re-evaluated after the optimizer swaps in new arrays.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.params: dict[str, np.ndarray] = {}
        self.param_nodes: dict[str, int] = {}
        self.input_nodes: dict[str, int] = {}
        self.outputs: dict[str, int] = {}

    # -- construction -----------------------------------------------------

    def _append(self, node):
        for p in node.parents:
            if not 0 <= p < len(self.nodes):
                raise GraphError(f"parent {p} does not precede the node", len(self.nodes), node.op)
        self.nodes.append(node)
        return len(self.nodes) - 1

    def input(self, name):
        if name in self.input_nodes or name in self.param_nodes:
            raise GraphError(f"duplicate slot name {name!r}")
        ref = self._append(Node("input", (), name=name))
        self.input_nodes[name] = ref
        return ref

    def param(self, name, value):
        if name in self.input_nodes or name in self.param_nodes:
            raise GraphError(f"duplicate slot name {name!r}")
        ref = self._append(Node("param", (), name=name))
        self.param_nodes[name] = ref
        self.params[name] = np.asarray(value, dtype=np.float64)
        return ref

    def apply(self, op, *parents, **attrs):
        if op not in OPS or op in ("input", "param"):
            raise GraphError(f"unknown op {op!r}")
        return self._append(Node(op, tuple(parents), attrs))

    def output(self, name, ref):
        self.outputs[name] = ref
        return ref

    # thin wrappers, so model code reads like layer definitions

    def dense(self, x, w, b):
        return self.apply("dense", x, w, b)

    def add(self, a, b):
        return self.apply("add", a, b)

    def add_cropped(self, x, b):
        return self.apply("add_cropped", x, b)

    def relu(self, x):
        return self.apply("relu", x)

    def conv2d(self, x, w, padding="same"):
        return self.apply("conv2d", x, w, padding=padding)

    def masked_conv2d(self, x, w, kind, groups=1):
        k, _, c_in, c_out = self.params[self.nodes[w].name].shape
        mask = causal_mask(k, c_in, c_out, kind, groups)
        return self.apply("conv2d", x, w, padding="same", mask=mask, mask_kind=kind)

    def maxpool2(self, x):
        return self.apply("maxpool2", x)

    def global_maxpool(self, x):
        return self.apply("global_maxpool", x)

    def dropout(self, x, rate):
        if not 0.0 <= rate < 1.0:
            raise GraphError(f"dropout rate must be in [0, 1), got {rate}")
        return self.apply("dropout", x, rate=float(rate))

    def resize_nearest(self, x, size):
        return self.apply("resize_nearest", x, size=tuple(size))

    def reshape(self, x, shape):
        return self.apply("reshape", x, shape=tuple(shape))

    def flatten(self, x):
        return self.apply("reshape", x, shape=(-1,))

    def scale(self, x, factor):
        return self.apply("scale", x, factor=float(factor))

    def validate(self):
        used = {p for node in self.nodes for p in node.parents}
        for name, ref in self.param_nodes.items():
            if ref not in used:
                raise GraphError(f"parameter slot {name!r} is not used by any node", ref, "param")


class _Context:
    def __init__(self, mode, seed):
        self.mode = mode
        self.seed = seed
        self.node = None

    def rng(self):
        return np.random.default_rng([self.seed, self.node])


class Evaluation:
    """Forward values of one evaluation; holds what ``backward`` needs."""

    def __init__(self, graph, values, caches, mode, seed):
        self.graph = graph
        self.values = values
        self.caches = caches
        self.mode = mode
        self.seed = seed

    def __getitem__(self, name):
        ref = self.graph.outputs[name] if isinstance(name, str) else name
        value = self.values[ref]
        if value is None:
            raise KeyError(f"{name!r} was not computed in this evaluation")
        return value


def _ancestors(graph, targets):
    need = set()
    stack = list(targets)
    while stack:
        ref = stack.pop()
        if ref in need:
            continue
        need.add(ref)
        stack.extend(graph.nodes[ref].parents)
    return need


def evaluate(graph, inputs, mode="infer", seed=0, outputs=None, keep_caches=True):
    """Run the forward pass.

    Args:
        graph: the graph to evaluate.
        inputs: arrays keyed by input slot name.
        mode: ``"train"`` enables dropout, ``"infer"`` disables it.
        seed: seeds every stochastic node (combined with its node index).
        outputs: output names to compute; only their ancestors are evaluated.
            Defaults to every registered output.
        keep_caches: retain intermediate caches for ``backward``.

    Returns:
        An :class:`Evaluation`.
    """
    if mode not in ("train", "infer"):
        raise GraphError(f"unknown mode {mode!r}")
    names = list(graph.outputs) if outputs is None else list(outputs)
    for name in names:
        if name not in graph.outputs:
            raise GraphError(f"unknown output {name!r}")
    need = _ancestors(graph, [graph.outputs[n] for n in names])
    ctx = _Context(mode, seed)
    values: list = [None] * len(graph.nodes)
    caches: list = [None] * len(graph.nodes)
    for ref, node in enumerate(graph.nodes):
        if ref not in need:
            continue
        if node.op == "input":
            if node.name not in inputs:
                raise GraphError(f"input {node.name!r} is not bound", ref, "input")
            values[ref] = np.asarray(inputs[node.name])
            continue
        if node.op == "param":
            values[ref] = graph.params[node.name]
            continue
        ctx.node = ref
        args = [values[p] for p in node.parents]
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                out, cache = OPS[node.op].forward(ctx, node.attrs, *args)
        except ValueError as exc:
            raise GraphError(str(exc), ref, node.op) from exc
        if not np.all(np.isfinite(out)):
            raise NonFiniteError("non-finite value produced", ref, node.op)
        values[ref] = out
        if keep_caches:
            caches[ref] = cache
    return Evaluation(graph, values, caches if keep_caches else None, mode, seed)


def _requires_grad(graph, wrt_inputs):
    req = [False] * len(graph.nodes)
    for ref, node in enumerate(graph.nodes):
        if node.op == "param":
            req[ref] = True
        elif node.op == "input":
            req[ref] = wrt_inputs is True or (bool(wrt_inputs) and node.name in wrt_inputs)
        else:
            req[ref] = any(req[p] for p in node.parents)
    return req


def backward(evaluation, output, wrt_inputs=()):
    """Gradients of a scalar output with respect to every parameter.

    Args:
        evaluation: result of :func:`evaluate` with caches kept.
        output: name (or node index) of a scalar output.
        wrt_inputs: input slot names to differentiate as well, or ``True``
            for all of them.

    Returns:
        Dict of gradient arrays keyed by slot name. Parameters always appear
        (zeros when disconnected); requested inputs appear when reachable.
    """
    graph = evaluation.graph
    if evaluation.caches is None:
        raise GraphError("evaluation was run without caches")
    ref = graph.outputs[output] if isinstance(output, str) else output
    value = evaluation.values[ref]
    if value is None:
        raise GraphError(f"output {output!r} was not evaluated")
    if value.size != 1:
        raise GraphError(f"backward needs a scalar output, got shape {value.shape}", ref, graph.nodes[ref].op)
    req = _requires_grad(graph, wrt_inputs)
    grads: list = [None] * len(graph.nodes)
    grads[ref] = np.ones_like(value, dtype=np.float64)
    for i in range(ref, -1, -1):
        g = grads[i]
        if g is None or not req[i]:
            continue
        node = graph.nodes[i]
        if node.op in ("input", "param"):
            continue
        opdef = OPS[node.op]
        if not opdef.differentiable:
            raise GraphError("gradient requested through a sampling node", i, node.op)
        need = tuple(req[p] for p in node.parents)
        parent_grads = opdef.backward(node.attrs, evaluation.caches[i], g, need)
        for p, pg, wanted in zip(node.parents, parent_grads, need):
            if pg is None or not wanted:
                continue
            grads[p] = pg if grads[p] is None else grads[p] + pg
    result = {}
    for name, pref in graph.param_nodes.items():
        result[name] = grads[pref] if grads[pref] is not None else np.zeros_like(graph.params[name])
    for name, iref in graph.input_nodes.items():
        if req[iref] and grads[iref] is not None:
            result[name] = grads[iref]
    return result
