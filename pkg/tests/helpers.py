"""Shared fixtures: random expression graphs and tiny hand-built networks."""

import numpy as np

from mrpf import autodiff as ad
from mrpf.network import Network, conv2d, dense, relu

NODE_TYPES = {
    "matmul", "conv2d", "relu", "softmax", "log", "add", "scale",
    "reduce_sum", "kl_div", "cross_entropy", "flatten",
}


def max_rel_error(grads, fd):
    """Largest coordinate error relative to the size of the reference gradient."""
    worst = 0.0
    for name, f in fd.items():
        g = grads[name]
        denom = max(np.abs(f).max(), np.abs(g).max(), 1e-8)
        worst = max(worst, float(np.abs(g - f).max() / denom))
    return worst


def random_graph(rng, kind=None):
    """A small MLP or CNN loss graph that uses every node type.

    Returns ``(graph, bindings, wrt)`` where ``wrt`` lists all differentiable leaves.
    """
    kind = kind or rng.choice(["mlp", "cnn"])
    b = int(rng.integers(1, 4))
    classes = int(rng.integers(2, 4))
    bind = {}
    x = ad.leaf("x")
    if kind == "cnn":
        c, size, o = int(rng.integers(1, 3)), int(rng.integers(3, 5)), int(rng.integers(1, 3))
        k = int(rng.choice([1, 3])) if size >= 3 else 1
        padding = str(rng.choice(["same", "valid"]))
        bind["x"] = rng.normal(size=(b, c, size, size))
        bind["Wc"] = rng.normal(size=(o, c, k, k)) * 0.5
        bind["bc"] = rng.normal(size=o) * 0.1
        h = ad.relu(ad.add(ad.conv2d(x, ad.leaf("Wc"), padding), ad.leaf("bc"), axis=1))
        h = ad.flatten(h)
        out = size if padding == "same" else size - k + 1
        width = o * out * out
    else:
        width = int(rng.integers(2, 5))
        bind["x"] = rng.normal(size=(b, width))
        h = x
    hidden = int(rng.integers(2, 5))
    bind["W1"] = rng.normal(size=(hidden, width)) * 0.5
    bind["b1"] = rng.normal(size=hidden) * 0.1
    bind["W2"] = rng.normal(size=(hidden, classes)) * 0.5
    h = ad.relu(ad.add(ad.matmul(h, ad.leaf("W1"), transpose_b=True), ad.leaf("b1"), axis=-1))
    logits = ad.matmul(h, ad.leaf("W2"))
    bind["y"] = rng.integers(0, classes, size=b)
    bind["ref"] = rng.dirichlet(np.ones(classes), size=b)
    p = ad.softmax(logits)
    ce = ad.cross_entropy(logits, ad.leaf("y", frozen=True), reduction=str(rng.choice(["mean", "sum"])))
    kl = ad.kl_div(ad.leaf("ref", frozen=True), p, reduction=str(rng.choice(["mean", "sum", "none"])))
    kl = ad.reduce_sum(kl) if kl.attrs["reduction"] == "none" else kl
    logp = ad.reduce_sum(ad.log(p), axis=int(rng.integers(0, 2)))
    root = ad.add(ce, ad.scale(kl, float(rng.uniform(0.1, 2.0))))
    root = ad.add(root, ad.scale(ad.reduce_sum(logp), float(rng.uniform(-0.5, 0.5))))
    graph = ad.ExprGraph(root)
    return graph, bind, graph.differentiable


def graph_ops(graph):
    return {n.op for n in graph.nodes if not n.is_leaf}


def linear_net(w, b=None, valid_input=None):
    """Single dense layer ``logits = x @ W.T + b``."""
    w = np.asarray(w, dtype=np.float64)
    b = np.zeros(w.shape[0]) if b is None else np.asarray(b, dtype=np.float64)
    return Network([dense(w.shape[1], w.shape[0])], [w], [b])


def mlp_net(weights, biases):
    """Dense/ReLU stack from explicit weight and bias lists."""
    specs, ws, bs = [], [], []
    for i, (w, b) in enumerate(zip(weights, biases)):
        w = np.asarray(w, dtype=np.float64)
        specs.append(dense(w.shape[1], w.shape[0]))
        ws.append(w)
        bs.append(np.asarray(b, dtype=np.float64))
        if i < len(weights) - 1:
            specs.append(relu())
            ws.append(None)
            bs.append(None)
    return Network(specs, ws, bs)


def small_cnn_specs(c=1, o=3, size=4, hidden=5, classes=2):
    return [conv2d(c, o, 3), relu(), dense(o * size * size, hidden), relu(), dense(hidden, classes)], (c, size, size)
