"""Reverse-mode differentiable volume operations.

A :class:`Volume` wraps a float64 numpy array together with an optional
gradient buffer.  Operations executed while a :class:`Tape` is active are
recorded on it; ``tape.backward(out)`` then walks the recorded nodes in
exact reverse order and accumulates adjoints into every volume that
requires a gradient.

Convolutions accept a single sample ``(C, D, H, W)`` or a batch
``(N, C, D, H, W)``; batched samples never interact, so the gradient of a
batch sum is the stack of per-sample gradients.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.linalg.blas import dgemm

PROB_EPS = 1e-12


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Volume:
    """Dense float64 array of rank 0-5 with an optional gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if arr.ndim > 5:
            raise ShapeError(f"volume rank must be <= 5, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Volume(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class LayerParams:
    weights: Volume
    bias: Volume

    @classmethod
    def from_arrays(cls, weights, bias) -> "LayerParams":
        return cls(Volume(weights, requires_grad=True), Volume(bias, requires_grad=True))

    @property
    def grad_weights(self) -> np.ndarray:
        return self.weights.grad

    @property
    def grad_bias(self) -> np.ndarray:
        return self.bias.grad

    def zero_grad(self) -> None:
        self.weights.zero_grad()
        self.bias.zero_grad()


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple
    output: Volume
    backward: Callable[["Node"], None]
    saved: dict = field(default_factory=dict)
    index: int = -1


_active = threading.local()


def active_tape() -> "Tape | None":
    return getattr(_active, "tape", None)


class Tape:
    """Ordered record of executed ops; single-writer, one per thread."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._prev = None

    def __enter__(self) -> "Tape":
        self._prev = active_tape()
        _active.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _active.tape = self._prev

    def record(self, node: Node) -> None:
        node.index = len(self.nodes)
        self.nodes.append(node)

    def backward(self, output: Volume, grad_output=None) -> None:
        """Accumulate d(output)/d(leaf) into every leaf's ``grad``.

        ``grad_output`` seeds the adjoint of ``output`` (default ones).
        """
        last = None
        for node in reversed(self.nodes):
            if node.output is output:
                last = node.index
                break
        if last is None:
            raise TapeError("backward called on a volume that was not produced on this tape")
        seed = np.ones_like(output.data) if grad_output is None else np.broadcast_to(
            np.asarray(grad_output, dtype=np.float64), output.shape)
        _accumulate(output, seed)
        for node in reversed(self.nodes[: last + 1]):
            # nodes the output does not depend on have no gradient to pass on
            if node.output.grad is not None:
                node.backward(node)


def _record(op, inputs, out_data, backward, **saved) -> Volume:
    tape = active_tape()
    needs = tape is not None and any(v.requires_grad for v in inputs)
    out = Volume(out_data)
    if needs:
        # intermediate grads are allocated lazily by Tape.backward
        out.requires_grad = True
        tape.record(Node(op, tuple(inputs), out, backward, saved))
    return out


def _accumulate(vol: Volume, g: np.ndarray, owned: bool = False) -> None:
    # owned: g is a fresh float64 array the caller will not touch again
    if vol.requires_grad:
        if vol.grad is None:
            vol.grad = g if owned and g.flags.c_contiguous else np.array(g, dtype=np.float64)
        else:
            vol.grad += g


def _gemm_acc(c: np.ndarray, a: np.ndarray, b: np.ndarray) -> None:
    """``c += a @ b`` in place through BLAS; ``c`` must be C-contiguous."""
    def fortran_view(p):
        # BLAS sees row-major p as its transpose in column-major order
        if p.flags.c_contiguous:
            return p.T, 0
        if p.flags.f_contiguous:
            return p, 1
        return np.ascontiguousarray(p).T, 0

    fb, tb = fortran_view(b)
    fa, ta = fortran_view(a)
    res = dgemm(1.0, fb, fa, beta=1.0, c=c.T, trans_a=tb, trans_b=ta, overwrite_c=True)
    if not np.shares_memory(res, c):
        c[...] = res.T


# ---------------------------------------------------------------------------
# 3D convolution (valid, no padding)
# ---------------------------------------------------------------------------

def conv_output_shape(spatial: Sequence[int], kernel: Sequence[int], stride: int = 1) -> tuple[int, ...]:
    return tuple((n - k) // stride + 1 for n, k in zip(spatial, kernel))


def _unfold_hw(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # (C, D, H, W) -> (D, Ho*Wo, C*kh*kw); depth offsets become row slices
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    C, D, Ho, Wo = win.shape[:4]
    return np.ascontiguousarray(win.transpose(1, 2, 3, 0, 4, 5)).reshape(D, Ho * Wo, C * kh * kw)


def _depth_rows(cols: np.ndarray, a: int, n_out: int, stride: int) -> np.ndarray:
    return cols[a: a + stride * (n_out - 1) + 1: stride].reshape(-1, cols.shape[2])


def _check_conv(x: np.ndarray, w: np.ndarray, stride: int) -> None:
    if w.ndim != 5:
        raise ShapeError(f"conv weights must be rank 5, got {w.shape}")
    if x.ndim != 5:
        raise ShapeError(f"conv input must be (C,D,H,W) or (N,C,D,H,W), got {x.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} channels but kernel expects {w.shape[1]} "
                         f"(input {x.shape}, kernel {w.shape})")
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if any(k > n for k, n in zip(w.shape[2:], x.shape[2:])):
        raise ShapeError(f"kernel {w.shape[2:]} does not fit input {x.shape[2:]}")


def conv3d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1,
                   keep_cols: bool = False):
    """Valid 3D convolution of a batch ``(N, C, D, H, W)``.

    Returns ``(out, cols)`` where ``cols`` holds the per-sample unfolded
    inputs when ``keep_cols`` is set (needed for the weight gradient).
    """
    _check_conv(x, w, stride)
    N = x.shape[0]
    O, C, kd, kh, kw = w.shape
    Do, Ho, Wo = conv_output_shape(x.shape[2:], (kd, kh, kw), stride)
    wk = [np.ascontiguousarray(w[:, :, a].reshape(O, -1)) for a in range(kd)]
    out = np.empty((N, O, Do, Ho, Wo))
    saved = []
    for n in range(N):
        cols = _unfold_hw(x[n], kh, kw, stride)
        acc = out[n].reshape(O, -1)
        acc[...] = b[:, None]
        for a in range(kd):
            _gemm_acc(acc, wk[a], _depth_rows(cols, a, Do, stride).T)
        if keep_cols:
            saved.append(cols)
    return out, saved


def conv3d_backward(node: Node) -> None:
    """Accumulate input, weight and bias adjoints of a recorded conv3d."""
    x, w, b = node.inputs
    stride = node.saved["stride"]
    batched = node.saved["batched"]
    g = node.output.grad if batched else node.output.grad[None]
    xd = x.data if batched else x.data[None]
    O, C, kd, kh, kw = w.data.shape
    N, _, Do, Ho, Wo = g.shape
    D, H, W = xd.shape[2:]
    K = C * kh * kw
    cols_list = node.saved.get("cols")
    gwk = np.zeros((kd, O, K)) if w.requires_grad else None
    gx = np.zeros_like(xd) if x.requires_grad else None
    wk = [np.ascontiguousarray(w.data[:, :, a].reshape(O, -1)) for a in range(kd)]
    for n in range(N):
        g2 = np.ascontiguousarray(g[n].reshape(O, -1))
        if gwk is not None:
            cols = cols_list[n] if cols_list else _unfold_hw(xd[n], kh, kw, stride)
            for a in range(kd):
                _gemm_acc(gwk[a], g2, _depth_rows(cols, a, Do, stride))
        if gx is not None:
            gcols = np.zeros((D, Ho * Wo, K))
            for a in range(kd):
                rows = gcols[a: a + stride * (Do - 1) + 1: stride]
                if stride == 1:
                    _gemm_acc(rows.reshape(-1, K), g2.T, wk[a])
                else:
                    rows += (g2.T @ wk[a]).reshape(rows.shape)
            gc = gcols.reshape(D, Ho, Wo, C, kh, kw)
            hs, ws = stride * (Ho - 1) + 1, stride * (Wo - 1) + 1
            for bh in range(kh):
                for bw in range(kw):
                    gx[n, :, :, bh: bh + hs: stride, bw: bw + ws: stride] += \
                        gc[:, :, :, :, bh, bw].transpose(3, 0, 1, 2)
    if gwk is not None:
        _accumulate(w, gwk.reshape(kd, O, C, kh, kw).transpose(1, 2, 0, 3, 4))
    if b.requires_grad:
        _accumulate(b, g.sum(axis=(0, 2, 3, 4)))
    if gx is not None:
        _accumulate(x, gx if batched else gx[0], owned=True)


def conv3d(x: Volume, params: LayerParams, stride: int = 1) -> Volume:
    """Valid 3D convolution; ``x`` is ``(C, D, H, W)`` or ``(N, C, D, H, W)``."""
    batched = x.data.ndim == 5
    if x.data.ndim not in (4, 5):
        raise ShapeError(f"conv input must be rank 4 or 5, got {x.shape}")
    xd = x.data if batched else x.data[None]
    w, b = params.weights, params.bias
    tape = active_tape()
    keep = tape is not None and w.requires_grad
    out, cols = conv3d_forward(xd, w.data, b.data, stride, keep_cols=keep)
    return _record("conv3d", (x, w, b), out if batched else out[0], conv3d_backward,
                   stride=stride, batched=batched, cols=cols)


# ---------------------------------------------------------------------------
# 3D max pooling (non-overlapping, floor semantics)
# ---------------------------------------------------------------------------

def _pool_blocks(xs: np.ndarray, k: int) -> np.ndarray:
    # (D, H, W) -> (Do, Ho, Wo, k**3), window entries in row-major order
    D, H, W = (n // k for n in xs.shape)
    xc = xs[: D * k, : H * k, : W * k]
    return xc.reshape(D, k, H, k, W, k).transpose(0, 2, 4, 1, 3, 5).reshape(D, H, W, k ** 3)


def maxpool3d_forward(x: np.ndarray, window: int):
    """Max over non-overlapping ``window**3`` blocks of ``(N, C, D, H, W)``.

    Trailing partial windows are dropped.  Returns ``(out, argmax)`` where
    argmax is the row-major offset of the winner inside its window; ties
    go to the first offset.
    """
    if window < 1:
        raise ShapeError(f"pool window must be >= 1, got {window}")
    if x.ndim != 5:
        raise ShapeError(f"pool input must be (N,C,D,H,W), got {x.shape}")
    if any(n < window for n in x.shape[2:]):
        raise ShapeError(f"pool window {window} larger than input {x.shape[2:]}")
    N, C = x.shape[:2]
    oshape = (N, C) + tuple(n // window for n in x.shape[2:])
    out = np.empty(oshape)
    argmax = np.empty(oshape, dtype=np.int32)
    # one channel at a time keeps the reshuffled block in cache
    for n in range(N):
        for c in range(C):
            blocks = _pool_blocks(x[n, c], window)
            am = blocks.argmax(axis=-1)
            argmax[n, c] = am
            out[n, c] = np.take_along_axis(blocks, am[..., None], axis=-1)[..., 0]
    return out, argmax


def maxpool3d_backward(node: Node) -> None:
    (x,) = node.inputs
    if not x.requires_grad:
        return
    k = node.saved["window"]
    argmax = node.saved["argmax"]
    batched = node.saved["batched"]
    g = node.output.grad if batched else node.output.grad[None]
    N, C, Do, Ho, Wo = g.shape
    gx = np.zeros(x.shape if batched else (1,) + x.shape)
    blocks = np.empty((Do, Ho, Wo, k ** 3))
    for n in range(N):
        for c in range(C):
            blocks[...] = 0.0
            np.put_along_axis(blocks, argmax[n, c][..., None], g[n, c][..., None], axis=-1)
            gx[n, c, : Do * k, : Ho * k, : Wo * k] = \
                blocks.reshape(Do, Ho, Wo, k, k, k).transpose(0, 3, 1, 4, 2, 5).reshape(Do * k, Ho * k, Wo * k)
    _accumulate(x, gx if batched else gx[0], owned=True)


def maxpool3d(x: Volume, window: int) -> Volume:
    batched = x.data.ndim == 5
    if x.data.ndim not in (4, 5):
        raise ShapeError(f"pool input must be rank 4 or 5, got {x.shape}")
    out, argmax = maxpool3d_forward(x.data if batched else x.data[None], window)
    return _record("maxpool3d", (x,), out if batched else out[0], maxpool3d_backward,
                   window=window, argmax=argmax, batched=batched)


# ---------------------------------------------------------------------------
# Dense, elementwise, reshape
# ---------------------------------------------------------------------------

def dense_backward(node: Node) -> None:
    x, w, b = node.inputs
    g = node.output.grad
    if x.data.ndim == 1:
        _accumulate(w, np.outer(g, x.data))
        _accumulate(b, g)
        _accumulate(x, g @ w.data)
    else:
        _accumulate(w, g.T @ x.data)
        _accumulate(b, g.sum(axis=0))
        _accumulate(x, g @ w.data)


def dense(x: Volume, params: LayerParams) -> Volume:
    """``W x + b`` for ``x`` of shape ``(F,)`` or ``(N, F)``; W is ``(out, F)``."""
    w, b = params.weights, params.bias
    if w.data.ndim != 2:
        raise ShapeError(f"dense weights must be rank 2, got {w.shape}")
    if x.data.ndim not in (1, 2) or x.shape[-1] != w.shape[1]:
        raise ShapeError(f"dense input {x.shape} does not match weights {w.shape}")
    out = x.data @ w.data.T + b.data
    return _record("dense", (x, w, b), out, dense_backward)


def relu_backward(node: Node) -> None:
    (x,) = node.inputs
    _accumulate(x, node.output.grad * node.saved["mask"], owned=True)


def relu(x: Volume) -> Volume:
    mask = x.data > 0
    return _record("relu", (x,), np.maximum(x.data, 0.0), relu_backward, mask=mask)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid_backward(node: Node) -> None:
    # sigma(z) * sigma(-z) keeps the derivative alive where p * (1 - p) rounds to 0
    (x,) = node.inputs
    _accumulate(x, node.output.grad * node.output.data * _sigmoid(-x.data))


def sigmoid(x: Volume) -> Volume:
    return _record("sigmoid", (x,), _sigmoid(x.data), sigmoid_backward)


def reshape_backward(node: Node) -> None:
    (x,) = node.inputs
    _accumulate(x, node.output.grad.reshape(x.shape))


def flatten(x: Volume, start_dim: int = 0) -> Volume:
    shape = x.shape[:start_dim] + (-1,)
    return _record("reshape", (x,), x.data.reshape(shape), reshape_backward)


def add_backward(node: Node) -> None:
    for v in node.inputs:
        _accumulate(v, node.output.grad)


def add(a: Volume, b: Volume) -> Volume:
    if a.shape != b.shape:
        raise ShapeError(f"add shape mismatch {a.shape} vs {b.shape}")
    return _record("add", (a, b), a.data + b.data, add_backward)


def sum_backward(node: Node) -> None:
    (x,) = node.inputs
    _accumulate(x, np.broadcast_to(node.output.grad, x.shape))


def vsum(x: Volume) -> Volume:
    return _record("sum", (x,), np.array([x.data.sum()]), sum_backward)


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def _check_labels(labels: np.ndarray) -> np.ndarray:
    y = np.asarray(labels, dtype=np.float64).reshape(-1)
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError(f"labels must be 0 or 1, got {np.unique(y)}")
    return y


def bce_backward(node: Node) -> None:
    (p,) = node.inputs
    y, count = node.saved["labels"], node.saved["count"]
    pc = np.clip(p.data.reshape(-1), PROB_EPS, 1.0 - PROB_EPS)
    g = (-y / pc + (1.0 - y) / (1.0 - pc)) / count
    _accumulate(p, (node.output.grad[0] * g).reshape(p.shape))


def binary_cross_entropy(probs: Volume, labels, count: int | None = None) -> Volume:
    """Sum of per-sample BCE divided by ``count`` (default: number of samples).

    Probabilities are clamped to ``[1e-12, 1 - 1e-12]`` before the log; the
    gradient uses the clamped values.  Passing ``count`` lets a large batch
    be split across several tapes while keeping the batch-mean scaling.
    """
    y = _check_labels(labels)
    p = probs.data.reshape(-1)
    if p.size != y.size:
        raise ShapeError(f"{p.size} probabilities for {y.size} labels")
    count = y.size if count is None else count
    pc = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    loss = -(y * np.log(pc) + (1.0 - y) * np.log1p(-pc)).sum() / count
    return _record("bce", (probs,), np.array([loss]), bce_backward, labels=y, count=count)


def _param_volumes(layers: Iterable[LayerParams]) -> list[Volume]:
    vols = []
    for layer in layers:
        vols.extend((layer.weights, layer.bias))
    return vols


def l2_backward(node: Node) -> None:
    lam = node.saved["lam"]
    g = node.output.grad[0]
    for v in node.inputs:
        _accumulate(v, 2.0 * lam * g * v.data)


def l2_penalty(layers: Iterable[LayerParams], lam: float) -> Volume:
    """``lam`` times the squared norm of every weight and bias."""
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    vols = _param_volumes(layers)
    total = sum(float(np.dot(v.data.reshape(-1), v.data.reshape(-1))) for v in vols)
    return _record("l2", tuple(vols), np.array([lam * total]), l2_backward, lam=lam)


def bce_l2_loss(probs: Volume, labels, layers: Iterable[LayerParams], lam: float) -> Volume:
    """Mean binary cross entropy over the batch plus ``lam * ||theta||^2``."""
    return add(binary_cross_entropy(probs, labels), l2_penalty(layers, lam))
