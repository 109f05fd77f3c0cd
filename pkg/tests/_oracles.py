"""Independent reference implementations used only by the tests."""
import itertools

import numpy as np


def conv3d_loop(x, w, b, stride=1):
    """Seven nested loops, no vectorisation."""
    C, D, H, W = x.shape
    O, _, kd, kh, kw = w.shape
    Do, Ho, Wo = (D - kd) // stride + 1, (H - kh) // stride + 1, (W - kw) // stride + 1
    out = np.zeros((O, Do, Ho, Wo))
    for o in range(O):
        for d in range(Do):
            for h in range(Ho):
                for q in range(Wo):
                    acc = b[o]
                    for c in range(C):
                        for i in range(kd):
                            for j in range(kh):
                                for k in range(kw):
                                    acc += w[o, c, i, j, k] * x[c, d * stride + i, h * stride + j, q * stride + k]
                    out[o, d, h, q] = acc
    return out


def maxpool3d_loop(x, k):
    """Returns (out, grad of sum(out) w.r.t. x) with first-index tie breaking."""
    C, D, H, W = x.shape
    Do, Ho, Wo = D // k, H // k, W // k
    out = np.zeros((C, Do, Ho, Wo))
    route = np.zeros_like(x)
    for c in range(C):
        for d in range(Do):
            for h in range(Ho):
                for q in range(Wo):
                    best, where = -np.inf, None
                    for i, j, l in itertools.product(range(k), repeat=3):
                        v = x[c, d * k + i, h * k + j, q * k + l]
                        if v > best:
                            best, where = v, (c, d * k + i, h * k + j, q * k + l)
                    out[c, d, h, q] = best
                    route[where] += 1.0
    return out, route


def central_difference(f, arr, index, h=1e-5):
    """d f / d arr[index] by central differences; ``arr`` is perturbed in place."""
    orig = arr[index]
    arr[index] = orig + h
    fp = f()
    arr[index] = orig - h
    fm = f()
    arr[index] = orig
    return (fp - fm) / (2 * h)


def relative_error(a, b, floor=1e-8):
    return abs(a - b) / max(abs(a), abs(b), floor)


def auc_pairs(labels, scores):
    """O(n^2) Mann-Whitney pair count with exact rational arithmetic."""
    from fractions import Fraction

    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    credit = Fraction(0)
    for p in pos:
        for n in neg:
            if p > n:
                credit += 1
            elif p == n:
                credit += Fraction(1, 2)
    return credit / (len(pos) * len(neg))
