"""Randomized finite-difference cases for every differentiable primitive and loss.

Each case is ``(name, fn, point)`` where ``fn`` maps a Tensor at ``point`` to a
scalar Tensor. Non-scalar primitives are reduced with a fixed random weighting
so every output coordinate contributes to the gradient.
"""

from __future__ import annotations

import numpy as np

from distill_lab import losses as L
from distill_lab import tensor as T
from distill_lab.nn import Classifier, Connector, FeatureExtractor, Network
from distill_lab.tensor import BatchNormState, Tensor


def _reduce(out: Tensor, w: np.ndarray) -> Tensor:
    return T.tsum(T.mul(out, Tensor(w)))


def _shape(rng, lo=2, hi=6):
    return int(rng.integers(lo, hi)), int(rng.integers(lo, hi))


def _unary(name, op, make_point):
    def build(rng):
        n, k = _shape(rng)
        x = make_point(rng, (n, k))
        w = rng.normal(size=op(Tensor(x)).shape)
        return name, (lambda t: _reduce(op(t), w)), x
    return build


def _binary(name, op, side, make_other=None, broadcast=False):
    def build(rng):
        n, k = _shape(rng)
        other_shape = (k,) if broadcast else (n, k)
        other = make_other(rng, other_shape) if make_other else rng.normal(size=other_shape)
        x = rng.normal(size=(n, k))
        if side == "left":
            f = lambda t: op(t, Tensor(other))
        else:
            x, other = other, x
            f = lambda t: op(Tensor(other), t)
        w = rng.normal(size=f(Tensor(x)).shape)
        return f"{name}[{side}{',bcast' if broadcast else ''}]", (lambda t: _reduce(f(t), w)), x
    return build


def _positive(rng, shape):
    return rng.uniform(0.5, 2.0, size=shape)


def _normal(rng, shape):
    return rng.normal(size=shape)


def _away_from_zero(rng, shape):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < 1e-2, 0.5, x)


def _reduction(name, fn, axis):
    def build(rng):
        n, k = _shape(rng)
        x = rng.normal(size=(n, k))
        out_shape = fn(Tensor(x), axis).shape
        w = rng.normal(size=out_shape) if out_shape else np.array(rng.normal())
        return f"{name}[axis={axis}]", (lambda t: T.tsum(T.mul(fn(t, axis), Tensor(w)))), x
    return build


def _matmul(side):
    def build(rng):
        n, k, m = (int(v) for v in rng.integers(2, 7, size=3))
        a, b = rng.normal(size=(n, k)), rng.normal(size=(k, m))
        w = rng.normal(size=(n, m))
        if side == "left":
            return "matmul[left]", (lambda t: _reduce(T.matmul(t, Tensor(b)), w)), a
        return "matmul[right]", (lambda t: _reduce(T.matmul(Tensor(a), t), w)), b
    return build


def _linear(which):
    def build(rng):
        n, k, m = (int(v) for v in rng.integers(2, 7, size=3))
        x, W, b = rng.normal(size=(n, k)), rng.normal(size=(m, k)), rng.normal(size=m)
        w = rng.normal(size=(n, m))
        fns = {
            "x": (lambda t: _reduce(T.linear(t, Tensor(W), Tensor(b)), w), x),
            "weight": (lambda t: _reduce(T.linear(Tensor(x), t, Tensor(b)), w), W),
            "bias": (lambda t: _reduce(T.linear(Tensor(x), Tensor(W), t), w), b),
        }
        f, p = fns[which]
        return f"linear[{which}]", f, p
    return build


def _take(rng):
    n, k = _shape(rng)
    idx = rng.integers(0, k, size=n)
    w = rng.normal(size=n)
    return "take_along_rows", (lambda t: _reduce(T.take_along_rows(t, idx), w)), rng.normal(size=(n, k))


def _batchnorm(which, training):
    def build(rng):
        n, h = int(rng.integers(3, 9)), int(rng.integers(2, 5))
        x = rng.normal(size=(n, h)) * rng.uniform(0.5, 2, size=h) + rng.normal(size=h)
        gamma, beta = rng.uniform(0.5, 1.5, size=h), rng.normal(size=h)
        rm, rv = rng.normal(size=h), rng.uniform(0.5, 2, size=h)
        w = rng.normal(size=(n, h))

        def f(t):
            st = BatchNormState(rm.copy(), rv.copy())
            args = {"x": Tensor(x), "gamma": Tensor(gamma), "beta": Tensor(beta)}
            args[which] = t
            return _reduce(T.batchnorm1d(args["x"], args["gamma"], args["beta"], st, training), w)

        point = {"x": x, "gamma": gamma, "beta": beta}[which]
        return f"batchnorm1d[{which},{'train' if training else 'eval'}]", f, point
    return build


PRIMITIVES = [
    _binary("add", T.add, "left"),
    _binary("add", T.add, "right"),
    _binary("add", T.add, "right", broadcast=True),
    _binary("sub", T.sub, "left"),
    _binary("sub", T.sub, "right", broadcast=True),
    _binary("mul", T.mul, "left"),
    _binary("mul", T.mul, "right", broadcast=True),
    _binary("div", T.div, "left", make_other=_positive),
    _binary("div", T.div, "right", make_other=_normal),
    _unary("neg", T.neg, _normal),
    _unary("scale", lambda t: T.scale(t, -1.7), _normal),
    _unary("shift", lambda t: T.shift(t, 0.3), _normal),
    _unary("square", T.square, _normal),
    _unary("sqrt", T.sqrt, _positive),
    _unary("exp", T.exp, _normal),
    _unary("log", T.log, _positive),
    _unary("relu", T.relu, _away_from_zero),
    _unary("transpose", T.transpose, _normal),
    _unary("softmax", T.softmax, _normal),
    _unary("log_softmax", T.log_softmax, _normal),
    _reduction("sum", T.tsum, None),
    _reduction("sum", T.tsum, 0),
    _reduction("sum", T.tsum, 1),
    _reduction("mean", T.mean, None),
    _reduction("mean", T.mean, 0),
    _reduction("mean", T.mean, 1),
    _matmul("left"),
    _matmul("right"),
    _linear("x"),
    _linear("weight"),
    _linear("bias"),
    _take,
    _batchnorm("x", True),
    _batchnorm("gamma", True),
    _batchnorm("beta", True),
    _batchnorm("x", False),
    _batchnorm("gamma", False),
]


def _loss_case(name, loss, target=lambda rng, shape: rng.normal(size=shape) * 2):
    def build(rng):
        n, c = int(rng.integers(2, 7)), int(rng.integers(2, 6))
        tgt = target(rng, (n, c))
        return name, (lambda t: loss(t, tgt)), rng.normal(size=(n, c)) * 2
    return build


def _ce(rng):
    n, c = int(rng.integers(2, 7)), int(rng.integers(2, 6))
    y = rng.integers(0, c, size=n)
    return "cross_entropy", (lambda t: L.cross_entropy(t, y)), rng.normal(size=(n, c)) * 2


def _penalty(rng):
    c, h = int(rng.integers(2, 5)), int(rng.integers(2, 7))
    wt = rng.normal(size=(c, h))
    return "distance_penalty", (lambda t: L.distance_penalty(wt, t)), rng.normal(size=(c, h))


def _mlp_ce(rng):
    """Two-layer MLP with CE loss, gradient taken w.r.t. the first weight matrix."""
    n, d, h, c = 6, 3, int(rng.integers(3, 7)), 3
    x = rng.normal(size=(n, d))
    y = rng.integers(0, c, size=n)
    b1 = rng.normal(size=h) * 0.1
    W2, b2 = rng.normal(size=(c, h)), rng.normal(size=c)

    def f(t):
        z = T.relu(T.linear(Tensor(x), t, Tensor(b1)))
        return L.cross_entropy(T.linear(z, Tensor(W2), Tensor(b2)), y)

    return "mlp+cross_entropy", f, rng.normal(size=(h, d))


def _reuse_objective(rng):
    """Connector with batchnorm into a frozen classifier, CE plus logit MSE."""
    seed = int(rng.integers(0, 2**31))
    phi = FeatureExtractor([2, 4], np.random.default_rng(seed))
    conn = Connector(4, 5, depth=2, seed=seed + 1)
    g = Classifier(5, 3, np.random.default_rng(seed + 2))
    net = Network(phi, g, conn)
    x = rng.normal(size=(8, 2))
    y = rng.integers(0, 3, size=8)
    o_t = rng.normal(size=(8, 3)) * 3
    w0 = phi.layers[0].weight.data.copy()

    def f(t):
        phi.layers[0].weight = t
        o, _ = net(Tensor(x))
        return T.add(L.cross_entropy(o, y), L.mse(o, o_t))

    return "connector+bn+reuse_objective", f, w0


LOSSES = [
    _ce,
    _loss_case("soft_cross_entropy", L.soft_cross_entropy),
    _loss_case("mse", L.mse),
    _loss_case("kd_kl[tau=4]", lambda s, t: L.kd_kl(s, t, 4.0)),
    _loss_case("kd_kl[tau=1]", lambda s, t: L.kd_kl(s, t, 1.0)),
    _loss_case("neg_cosine", L.neg_cosine),
    _loss_case("feature_match", L.feature_match),
    _loss_case("sr[mse]", lambda s, t: L.softmax_regression_loss("mse", s, t)),
    _loss_case("sr[neg_cosine]", lambda s, t: L.softmax_regression_loss("neg_cosine", s, t)),
    _loss_case("sr[cross_entropy]", lambda s, t: L.softmax_regression_loss("cross_entropy", s, t)),
    _penalty,
    _mlp_ce,
    _reuse_objective,
]


def all_cases(repeats: int, seed: int = 0):
    """``repeats`` randomized draws of every primitive and loss builder."""
    ss = np.random.SeedSequence(seed)
    builders = PRIMITIVES + LOSSES
    children = ss.spawn(repeats * len(builders))
    out = []
    for r in range(repeats):
        for j, build in enumerate(builders):
            rng = np.random.default_rng(children[r * len(builders) + j])
            out.append(build(rng))
    return out
