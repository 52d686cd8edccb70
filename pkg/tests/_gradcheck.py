"""Central-difference gradient oracle shared by the test modules."""

import numpy as np

from repinv.autodiff import Graph, backward, conv_init, evaluate


def numeric_grad(f, x, step=1e-5):
    """Central differences of scalar ``f`` w.r.t. every element of ``x`` (in place)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = x[i]
        x[i] = orig + step
        fp = f()
        x[i] = orig - step
        fm = f()
        x[i] = orig
        grad[i] = (fp - fm) / (2 * step)
    return grad


def max_rel_error(analytic, numeric, floor=1e-7):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_graph(graph, inputs, output="loss", mode="infer", seed=0, wrt_inputs=()):
    """Max relative error over every parameter (and the named inputs)."""

    def f():
        return float(evaluate(graph, inputs, mode=mode, seed=seed)[output])

    grads = backward(evaluate(graph, inputs, mode=mode, seed=seed), output, wrt_inputs=list(wrt_inputs))
    worst = {}
    for name, value in graph.params.items():
        worst[name] = max_rel_error(grads[name], numeric_grad(f, value))
    for name in wrt_inputs:
        worst[name] = max_rel_error(grads[name], numeric_grad(f, inputs[name]))
    return worst


def sq_loss(g, y):
    return g.output("loss", g.apply("sum", g.apply("square", y)))


def single_op_graph(build, shapes, seed=0, **kw):
    """Graph with float inputs of the given shapes feeding ``build``."""
    rng = np.random.default_rng(seed)
    g = Graph()
    refs = [g.input(f"x{i}") for i in range(len(shapes))]
    inputs = {f"x{i}": rng.normal(size=s) for i, s in enumerate(shapes)}
    sq_loss(g, build(g, rng, *refs))
    return g, inputs


PRIMITIVES = {
    "dense": ([(3, 4)], lambda g, r, x: g.dense(x, g.param("w", r.normal(size=(4, 5))), g.param("b", r.normal(size=5)))),
    "add_broadcast": ([(2, 3, 3, 4), (4,)], lambda g, r, a, b: g.add(a, b)),
    "add_cropped_hwc": ([(2, 3, 4, 2)], lambda g, r, x: g.add_cropped(x, g.param("p", r.normal(size=(5, 4, 2))))),
    "add_cropped_nhwc": ([(2, 3, 3, 2), (2, 4, 3, 2)], lambda g, r, x, b: g.add_cropped(x, b)),
    "scale": ([(3, 2)], lambda g, r, x: g.scale(x, -1.7)),
    "relu": ([(4, 5)], lambda g, r, x: g.relu(x)),
    "reshape": ([(2, 3, 4)], lambda g, r, x: g.reshape(x, (4, 3))),
    "conv_valid": ([(2, 6, 5, 2)], lambda g, r, x: g.conv2d(x, g.param("w", r.normal(size=(3, 3, 2, 3))), "valid")),
    "conv_same": ([(2, 5, 5, 2)], lambda g, r, x: g.conv2d(x, g.param("w", r.normal(size=(5, 5, 2, 3))), "same")),
    "masked_A": ([(2, 5, 4, 3)], lambda g, r, x: g.masked_conv2d(x, g.param("w", r.normal(size=(3, 3, 3, 6))), "A", groups=3)),
    "masked_B": ([(2, 4, 4, 2)], lambda g, r, x: g.masked_conv2d(x, g.param("w", r.normal(size=(5, 5, 2, 2))), "B")),
    "maxpool2_odd": ([(2, 5, 7, 3)], lambda g, r, x: g.maxpool2(x)),
    "global_maxpool": ([(3, 4, 3, 2)], lambda g, r, x: g.global_maxpool(x)),
    "resize_up": ([(2, 3, 2, 2)], lambda g, r, x: g.resize_nearest(x, (7, 5))),
    "resize_down": ([(2, 6, 6, 2)], lambda g, r, x: g.resize_nearest(x, (4, 3))),
    "log_softmax": ([(3, 5)], lambda g, r, x: g.apply("log_softmax", x)),
    "square": ([(3, 3)], lambda g, r, x: g.apply("square", x)),
}


def masked_stack(rng, c=1, levels=4, filters=6, depth=3):
    g = Graph()
    x, t = g.input("x"), g.input("t")
    h = g.masked_conv2d(x, g.param("w0", conv_init(rng, 5, c, filters)), "A", groups=c)
    h = g.add(h, g.param("b0", rng.normal(size=filters) * 0.1))
    for i in range(1, depth):
        h = g.relu(h)
        h = g.masked_conv2d(h, g.param(f"w{i}", conv_init(rng, 3, filters, filters)), "B", groups=c)
    logits = g.masked_conv2d(g.relu(h), g.param("wo", conv_init(rng, 1, filters, c * levels)), "B", groups=c)
    g.output("logits", logits)
    g.output("loss", g.apply("mean", g.apply("categorical_nll", logits, t, levels=levels)))
    return g
