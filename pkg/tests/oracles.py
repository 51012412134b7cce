"""Brute-force reference implementations used by the test-suite.

These deliberately avoid torch and vectorization: plain loops over numpy
float64 arrays, so they share no code path with the package.
"""

import itertools
import math

import numpy as np


def unit(x):
    x = np.asarray(x, dtype=np.float64)
    return x / np.linalg.norm(x, axis=-1, keepdims=True)


def cpc_nce_oracle(pred, target, tau):
    pred = unit(pred).reshape(-1, pred.shape[-1])
    target = unit(target).reshape(-1, target.shape[-1])
    m = pred.shape[0]
    total = 0.0
    for i in range(m):
        logits = [float(np.dot(pred[i], target[j])) / tau for j in range(m)]
        top = max(logits)
        lse = top + math.log(sum(math.exp(v - top) for v in logits))
        total += lse - logits[i]
    return total / m


def dist01(u, v):
    return (1.0 - float(np.dot(u, v))) / 2.0


def similarity_oracle(h):
    k = h.shape[0]
    w = np.zeros((k, k))
    for a in range(k):
        for b in range(k):
            if a != b:
                w[a, b] = dist01(h[a], h[b])
    return w


def sync_oracle(hs):
    """Frobenius form: sum ||W0 - W1||_F^2 / (pairs * K * (K - 1))."""
    mats = [similarity_oracle(h) for h in hs]
    k = hs[0].shape[0]
    pairs = list(itertools.combinations(range(len(hs)), 2))
    total = sum(np.sum((mats[i] - mats[j]) ** 2) for i, j in pairs)
    return total / (len(pairs) * k * (k - 1))


def sim_oracle(hs, mu=1.0):
    """Per view pair: mean positive distance + mu * mean hinge over a != b."""
    k = hs[0].shape[0]
    total = 0.0
    for i, j in itertools.combinations(range(len(hs)), 2):
        pos = sum(dist01(hs[i][a], hs[j][a]) for a in range(k)) / k
        neg_terms = [
            max(0.0, 1.0 - dist01(hs[i][a], hs[j][b]))
            for a in range(k)
            for b in range(k)
            if a != b
        ]
        neg = sum(neg_terms) / len(neg_terms) if neg_terms else 0.0
        total += pos + mu * neg
    return total


def central_difference(fn, x, step=1e-4):
    """Numerical gradient of scalar ``fn`` at numpy array ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + step
        fp = fn(x)
        x[idx] = orig - step
        fm = fn(x)
        x[idx] = orig
        grad[idx] = (fp - fm) / (2 * step)
    return grad


def relative_error(a, b):
    a = np.asarray(a).ravel()
    b = np.asarray(b).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)
