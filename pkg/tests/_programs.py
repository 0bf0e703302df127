"""Small scalar programs that together exercise every autodiff primitive.

Each builder takes a numpy Generator and returns ``(fn, inputs)`` where ``fn``
maps a list of Tensors to a scalar Tensor.
"""

import numpy as np

from splitleak.autodiff import ops


def _elementwise(rng):
    x = rng.normal(size=(3, 4))
    b = rng.normal(size=(4,))

    def fn(t):
        x, b = t
        a = ops.mul(ops.tanh(ops.add(x, b)), ops.sigmoid(ops.sub(x, b)))
        sq = ops.add(ops.mul(x, x), 1.0)
        r = ops.add(ops.log(sq), ops.sqrt(sq))
        q = ops.div(x, sq)
        return ops.add(ops.sum(ops.add(a, r)), ops.sum(ops.add(q, ops.exp(ops.scale(x, 0.3)))))

    return fn, [x, b]


def _activations(rng):
    x = rng.normal(size=(2, 5)) * 2

    def fn(t):
        (x,) = t
        return ops.sum(ops.mul(ops.silu(x), ops.gelu(x)))

    return fn, [x]


def _matmul(rng):
    x = rng.normal(size=(2, 3, 4))
    w = rng.normal(size=(4, 5))
    y = rng.normal(size=(2, 5, 3))

    def fn(t):
        x, w, y = t
        h = ops.tanh(ops.matmul(x, w))
        z = ops.matmul(h, y)
        return ops.sum(ops.mul(z, ops.transpose(z, (0, 2, 1))))

    return fn, [x, w, y]


def _shapes(rng):
    x = rng.normal(size=(2, 3, 4))
    y = rng.normal(size=(2, 3, 2))

    def fn(t):
        x, y = t
        c = ops.concat([x, y], axis=-1)
        r = ops.reshape(c, (6, 6))
        n = ops.narrow(r, 1, 1, 3)
        s = ops.select(x, 1, 2)
        st = ops.stack([s, ops.scale(s, 2.0)], axis=1)
        return ops.add(ops.sum(ops.mul(n, n)), ops.sum(ops.tanh(st)))

    return fn, [x, y]


def _embedding(rng):
    table = rng.normal(size=(7, 3))
    w = rng.normal(size=(3,))
    ids = rng.integers(0, 7, size=(2, 4))

    def fn(t):
        table, w = t
        e = ops.embedding(table, ids)
        return ops.sum(ops.tanh(ops.mul(e, w)))

    return fn, [table, w]


def _softmax(rng):
    x = rng.normal(size=(3, 6))
    c = rng.normal(size=(3, 6))

    def fn(t):
        (x,) = t
        return ops.add(ops.sum(ops.mul(ops.softmax(x), c)),
                       ops.sum(ops.mul(ops.log_softmax(x), ops.scale(c, 0.1))))

    return fn, [x]


def _rms_norm(rng):
    x = rng.normal(size=(2, 3, 5))
    w = rng.normal(size=(5,))
    c = rng.normal(size=(2, 3, 5))

    def fn(t):
        x, w = t
        return ops.sum(ops.mul(ops.rms_norm(x, w, 1e-6), c))

    return fn, [x, w]


def _attention(rng):
    B, S, d = 2, 5, 3
    q = rng.normal(size=(B, S, d))
    k = rng.normal(size=(B, S, d))
    v = rng.normal(size=(B, S, d))
    mask = np.ones((B, S), dtype=bool)
    mask[1, 3:] = False

    def fn(t):
        q, k, v = t
        p = ops.softmax(ops.causal_scores(q, k, 0.5, mask))
        return ops.sum(ops.tanh(ops.matmul(p, v)))

    return fn, [q, k, v]


def _cross_entropy(rng):
    logits = rng.normal(size=(2, 3, 5))
    raw = rng.random(size=(2, 3, 5))
    labels = raw / raw.sum(-1, keepdims=True)
    targets = rng.integers(0, 5, size=(2, 3))
    weights = (rng.random((2, 3)) > 0.3).astype(float)
    weights[0, 0] = 1.0

    def fn(t):
        z, y = t
        return ops.add(ops.cross_entropy_soft(z, y, weights),
                       ops.cross_entropy_hard(z, targets, weights))

    return fn, [logits, labels]


def _norms(rng):
    x = rng.normal(size=(4, 3))
    x[np.abs(x) < 0.05] = 0.3

    def fn(t):
        (x,) = t
        return ops.add(ops.l1_norm(x), ops.scale(ops.l2_norm(ops.tanh(x)), 2.0))

    return fn, [x]


def _cosine(rng):
    a = rng.normal(size=(3, 6))
    b = rng.normal(size=(3, 6))

    def fn(t):
        a, b = t
        return ops.mean(ops.cosine_similarity(a, b))

    return fn, [a, b]


def _distance(rng):
    x = rng.normal(size=(5, 3))

    def fn(t):
        (x,) = t
        d = ops.pairwise_distance(x)
        return ops.add(ops.sum(ops.tanh(d)), ops.mean(ops.mul(d, d)))

    return fn, [x]


def _reductions(rng):
    x = rng.normal(size=(3, 4, 2))

    def fn(t):
        (x,) = t
        m = ops.mean(x, axis=1)
        s = ops.sum(x, axis=(0, 2), keepdims=True)
        return ops.add(ops.sum(ops.mul(m, m)), ops.sum(ops.tanh(s)))

    return fn, [x]


BUILDERS = [
    _elementwise, _activations, _matmul, _shapes, _embedding, _softmax, _rms_norm,
    _attention, _cross_entropy, _norms, _cosine, _distance, _reductions,
]


def programs(n: int = 25, seed: int = 0):
    """``n`` randomized programs cycling through every builder."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        builder = BUILDERS[i % len(BUILDERS)]
        fn, inputs = builder(rng)
        out.append((builder.__name__.lstrip("_"), fn, inputs))
    return out
