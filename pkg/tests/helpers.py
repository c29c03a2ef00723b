"""Independent oracles used across the test suite."""

import hashlib
import itertools

import numpy as np

from dilam.core import Tensor, backward, default_dtype


def naive_conv2d(x, w, b, stride, pad):
    n, c, h, wd = x.shape
    k, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, k, ho, wo))
    for i in range(n):
        for o in range(k):
            for y in range(ho):
                for xx in range(wo):
                    acc = b[o]
                    for ci in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[i, ci, y * stride + u, xx * stride + v] * w[o, ci, u, v]
                    out[i, o, y, xx] = acc
    return out


def naive_linear(x, w, b):
    n, d = x.shape
    m = w.shape[0]
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            out[i, j] = b[j] + sum(x[i, t] * w[j, t] for t in range(d))
    return out


def numeric_grad(f, arrays, h=1e-5):
    """Central finite differences of scalar ``f(*arrays)`` w.r.t. each array (float64)."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            old = a[idx]
            a[idx] = old + h
            fp = f(*arrays)
            a[idx] = old - h
            fm = f(*arrays)
            a[idx] = old
            g[idx] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def rel_err(a, b):
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b)))


def gradcheck(op, arrays, h=1e-5, weights_seed=0):
    """Compare reverse-mode gradients of ``sum(r * op(*tensors))`` with central differences.

    ``r`` is a fixed random projection so every output element contributes.
    Returns the worst relative error over all inputs.
    """
    with default_dtype(np.float64):
        arrays = [np.array(a, dtype=np.float64) for a in arrays]
        probe = op(*[Tensor(a) for a in arrays]).data
        r = np.random.default_rng(weights_seed).normal(size=probe.shape)

        def f(*arrs):
            return float((op(*[Tensor(a) for a in arrs]).data * r).sum())

        ts = [Tensor(a, requires_grad=True) for a in arrays]
        out = op(*ts)
        from dilam.core import ops
        loss = ops.sum(ops.mul(out, Tensor(r)))
        backward(loss)
        analytic = [t.grad for t in ts]
        numeric = numeric_grad(f, arrays, h)
    worst = 0.0
    for ga, gn in zip(analytic, numeric):
        # absolute floor keeps near-zero entries from dominating the ratio
        err = np.max(np.abs(ga - gn) / np.maximum(np.abs(ga) + np.abs(gn), 1e-6))
        worst = max(worst, float(err))
    return worst


def primitive_instances(seed):
    """One small float64 instance of every differentiable primitive, keyed by name."""
    from dilam.core import ops
    r = np.random.default_rng(seed)
    x4 = r.normal(size=(2, 2, 4, 4))
    return {
        "conv2d": (lambda x, w, b: ops.conv2d(x, w, b, 1, 1), [x4, r.normal(size=(3, 2, 3, 3)), r.normal(size=3)]),
        "conv2d_stride": (lambda x, w, b: ops.conv2d(x, w, b, 2, 1),
                          [r.normal(size=(1, 2, 5, 5)), r.normal(size=(2, 2, 3, 3)), r.normal(size=2)]),
        "linear": (ops.linear, [r.normal(size=(3, 4)), r.normal(size=(2, 4)), r.normal(size=2)]),
        "relu": (ops.relu, [r.normal(size=(3, 4)) + np.sign(r.normal(size=(3, 4))) * 0.1]),
        "max_pool2d": (ops.max_pool2d, [r.permutation(32).reshape(1, 2, 4, 4) * 0.1 + r.normal(size=(1, 2, 4, 4)) * 1e-3]),
        "global_avg_pool": (ops.global_avg_pool, [x4]),
        "norm_batch": (lambda x, g, b: ops.norm_forward(x, g, b, "batch"), [x4, r.normal(size=2), r.normal(size=2)]),
        "norm_frozen": (lambda x, g, b: ops.norm_forward(x, g, b, "frozen", np.array([0.2, -0.1]), np.array([1.5, 0.7])),
                        [x4, r.normal(size=2), r.normal(size=2)]),
        "group_norm": (lambda x, g, b: ops.group_norm(x, g, b, 2), [r.normal(size=(2, 4, 3, 3)), r.normal(size=4), r.normal(size=4)]),
        "batch_mean": (ops.batch_mean, [x4]),
        "batch_var": (ops.batch_var, [x4]),
        "abs": (ops.abs, [r.normal(size=(5,)) + 0.2 * np.sign(r.normal(size=5))]),
        "mul": (ops.mul, [r.normal(size=(3,)), r.normal(size=(3,))]),
        "sub": (ops.sub, [r.normal(size=(3,)), r.normal(size=(3,))]),
        "power": (lambda a: ops.power(a, 2), [r.normal(size=(4,))]),
        "mean_axis": (lambda a: ops.mean(a, 0), [r.normal(size=(3, 2))]),
        "softmax_ce": (lambda a: ops.softmax_cross_entropy(a, [0, 1, 2]), [r.normal(size=(3, 3))]),
    }


def window_accuracy_exact(p, num_classes=4, window=8, wrong_dist=None):
    """Exact probability that the tie-broken majority vote over ``window`` i.i.d. frames is correct.

    Class 0 is the true class with per-frame probability ``p``; the remaining
    mass is split over the other classes by ``wrong_dist`` (uniform by default).
    Enumerates every length-``window`` sequence of votes.
    """
    if wrong_dist is None:
        wrong_dist = [1.0 / (num_classes - 1)] * (num_classes - 1)
    probs = [p] + [(1 - p) * q for q in wrong_dist]
    total = 0.0
    for seq in itertools.product(range(num_classes), repeat=window):
        pr = 1.0
        for s in seq:
            pr *= probs[s]
        if pr == 0.0:
            continue
        counts = [seq.count(k) for k in range(num_classes)]
        top = max(counts)
        tied = {k for k in range(num_classes) if counts[k] == top}
        winner = next(s for s in reversed(seq) if s in tied)
        if winner == 0:
            total += pr
    return total


def tiny_config():
    from dilam.model import ModelConfig
    return ModelConfig(input_size=(3, 8, 8), widths=[4, 8])


def norm_only_model(channels=2, hw=4, eps=1e-5):
    """A model whose only layer is one norm-affine layer, bankable and terminal."""
    from dilam.model import Model, ModelConfig, Norm
    cfg = ModelConfig(input_size=(channels, hw, hw), widths=[channels])
    return Model(cfg, [Norm("norm", channels, "batch", eps, 0.1, 1)], cut_index=-1)


def tiny_pipeline_config(**overrides):
    """A pipeline small enough to run end to end in about a second."""
    from dilam.model import ModelConfig, TrainSchedule
    from dilam.pipeline import AdaptConfig, PipelineConfig
    cfg = PipelineConfig(model=ModelConfig(input_size=(3, 16, 16), widths=[4, 8]),
                         schedule=TrainSchedule(max_epochs=2), taskid_schedule=TrainSchedule(max_epochs=2),
                         train_per_class=16, test_per_class=8, adapt=AdaptConfig(batch_size=8))
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


def frozen_hash(model) -> str:
    """sha256 over every state array that is not a norm affine parameter."""
    affine = model.affine_names()
    h = hashlib.sha256()
    for name, arr in sorted(model.state_arrays().items()):
        if name not in affine:
            h.update(name.encode() + np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()
