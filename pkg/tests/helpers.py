"""Shared test utilities: finite-difference gradient checking."""

import numpy as np


def finite_difference_check(layer, x, eps=1e-6):
    """Worst relative error between analytic and central-difference gradients.

    The loss is sum(forward(x) * R) for a fixed random projection R, so the
    upstream gradient fed to backward is exactly R. Checks the input gradient
    and every parameter gradient; returns the maximum relative error
    |a - f| / max(1e-8, |a| + |f|).
    """
    ref = layer.forward(x)
    proj = np.random.default_rng(0).normal(size=ref.shape)

    def loss():
        return float((layer.forward(x) * proj).sum())

    for p in layer.params():
        p.grad[...] = 0.0
    layer.forward(x, train=True)
    analytic_dx = layer.backward(proj)

    worst = 0.0

    fd = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + eps
        hi = loss()
        x[idx] = orig - eps
        lo = loss()
        x[idx] = orig
        fd[idx] = (hi - lo) / (2.0 * eps)
    rel = np.abs(analytic_dx - fd) / np.maximum(1e-8, np.abs(analytic_dx) + np.abs(fd))
    worst = max(worst, float(rel.max()))

    for p in layer.params():
        fd_p = np.zeros_like(p.value)
        it = np.nditer(p.value, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = p.value[idx]
            p.value[idx] = orig + eps
            hi = loss()
            p.value[idx] = orig - eps
            lo = loss()
            p.value[idx] = orig
            fd_p[idx] = (hi - lo) / (2.0 * eps)
        rel = np.abs(p.grad - fd_p) / np.maximum(1e-8, np.abs(p.grad) + np.abs(fd_p))
        worst = max(worst, float(rel.max()))
    return worst


def relu6_kink_margin(layer, x):
    """Smallest distance of any ReLU6 pre-activation to the kinks at 0 and 6.

    Finite differences are only trustworthy when the network is locally
    smooth, so composite-layer gradient checks first assert this margin
    comfortably exceeds the step size.
    """
    from satdet.nn import InvertedResidual, ReLU6, Sequential

    margin = np.inf

    def walk(l, h):
        nonlocal margin
        if isinstance(l, Sequential):
            for sub in l.layers:
                h = walk(sub, h)
            return h
        if isinstance(l, InvertedResidual):
            out = walk(l.body, h)
            return out + h if l.use_skip else out
        if isinstance(l, ReLU6):
            margin = min(margin, float(np.minimum(np.abs(h), np.abs(h - 6.0)).min()))
        return l.forward(h)

    walk(layer, x)
    return margin
