"""Tape-based reverse-mode autodiff over dense float64 arrays.

Every operation records a node on an explicit :class:`Tape`; the backward
pass replays the tape in exact reverse creation order and accumulates
vector-Jacobian products into parent gradients. Tensors carry a batch axis
first and a channel axis last: 2D fields are (B, X, Y, C), 3D fields are
(B, X, Y, Z, C).

All values are float64. Every forward result is checked for NaN/Inf and
trips :class:`NonFiniteValue` immediately, which keeps divergence
diagnosable at the op that produced it.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit as _sigmoid


class NonFiniteValue(FloatingPointError):
    """An operation produced NaN or Inf."""


class TapeError(RuntimeError):
    """Misuse of the tape: reused backward pass, detached or non-scalar loss."""


class TensorNode:
    """One value in the recorded computation graph.

    ``grad`` is allocated on demand during the backward pass; leaves keep a
    ``None`` gradient when no path to the loss touches them.
    """

    __slots__ = ("values", "grad", "parents", "op", "tape", "_backward")

    def __init__(self, values, parents=(), op="leaf", tape=None, backward=None):
        self.values = values
        self.grad = None
        self.parents = parents
        self.op = op
        self.tape = tape
        self._backward = backward

    @property
    def shape(self):
        return self.values.shape

    def __repr__(self):
        return f"TensorNode(op={self.op!r}, shape={self.values.shape})"


class Tape:
    """Ordered record of operations; parents always precede children."""

    def __init__(self):
        self.nodes: list[TensorNode] = []
        self.used = False

    def _record(self, values, parents, op, backward) -> TensorNode:
        values = np.asarray(values, dtype=np.float64)
        if not np.all(np.isfinite(values)):
            raise NonFiniteValue(f"non-finite values produced by op {op!r}")
        node = TensorNode(values, parents, op, self, backward)
        self.nodes.append(node)
        return node


def leaf(values) -> TensorNode:
    """Constant or parameter leaf; not recorded on any tape."""
    return TensorNode(np.asarray(values, dtype=np.float64))


def _accum(node: TensorNode, g: np.ndarray) -> None:
    if node.grad is None:
        node.grad = np.array(g)  # copy: callers may pass views or reused buffers
    else:
        node.grad += g


def backward(tape: Tape, loss: TensorNode) -> None:
    """Reverse-accumulate d(loss)/d(node) into every reachable node's grad.

    The tape can be walked once; a second call without a fresh tape is an
    error. Nodes off the path to the loss keep ``grad = None`` (read as
    zero).
    """
    if loss.values.size != 1:
        raise TapeError(f"loss must be scalar, got shape {loss.values.shape}")
    if loss.tape is not tape:
        raise TapeError("loss node is detached from this tape")
    if tape.used:
        raise TapeError("backward already ran on this tape; record a new tape")
    tape.used = True
    loss.grad = np.ones_like(loss.values)
    for node in reversed(tape.nodes):
        if node.grad is not None and node._backward is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------


def _binary(tape, a, b, op, fwd, bwd_a, bwd_b):
    if a.values.shape != b.values.shape:
        raise ValueError(f"{op}: shape mismatch {a.values.shape} vs {b.values.shape}")
    out = fwd(a.values, b.values)

    def back(g):
        _accum(a, bwd_a(g))
        _accum(b, bwd_b(g))

    return tape._record(out, (a, b), op, back)


def add(tape, a, b):
    return _binary(tape, a, b, "add", np.add, lambda g: g, lambda g: g)


def sub(tape, a, b):
    return _binary(tape, a, b, "sub", np.subtract, lambda g: g, lambda g: -g)


def mul(tape, a, b):
    av, bv = a.values, b.values
    return _binary(tape, a, b, "mul", np.multiply, lambda g: g * bv, lambda g: g * av)


def div(tape, a, b):
    av, bv = a.values, b.values
    return _binary(tape, a, b, "div", np.divide,
                   lambda g: g / bv, lambda g: -g * av / (bv * bv))


def smul(tape, a, c: float):
    c = float(c)
    return tape._record(a.values * c, (a,), "smul", lambda g: _accum(a, g * c))


def sadd(tape, a, c: float):
    c = float(c)
    return tape._record(a.values + c, (a,), "sadd", lambda g: _accum(a, g))


def log(tape, a):
    av = a.values
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log(av)  # non-positive inputs surface as NonFiniteValue
    return tape._record(out, (a,), "log", lambda g: _accum(a, g / av))


def relu(tape, a):
    """max(x, 0); subgradient 0 at x = 0."""
    av = a.values
    out = np.maximum(av, 0.0)
    return tape._record(out, (a,), "relu", lambda g: _accum(a, g * (av > 0.0)))


def softplus(tape, a):
    """log(1 + exp(x)), computed overflow-safely as max(x,0) + log1p(exp(-|x|))."""
    av = a.values
    out = np.maximum(av, 0.0) + np.log1p(np.exp(-np.abs(av)))
    return tape._record(out, (a,), "softplus", lambda g: _accum(a, g * _sigmoid(av)))


def softplus_values(x: np.ndarray) -> np.ndarray:
    """Stable softplus on raw arrays (shared with inference-side code)."""
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def softplus_inverse(y: float) -> float:
    """Inverse of softplus for positive y: log(expm1(y))."""
    if y <= 0.0:
        raise ValueError("softplus inverse defined for positive values only")
    return float(np.log(np.expm1(y)))


def sum_all(tape, a):
    """Reduce to a scalar node by summing every element."""
    out = np.asarray(a.values.sum())

    def back(g):
        _accum(a, np.full_like(a.values, float(g)))

    return tape._record(out, (a,), "sum_all", back)


def channel_split(tape, a, n_first: int):
    """Split the channel axis into (first n, rest) as two child nodes."""
    c = a.values.shape[-1]
    if not 0 < n_first < c:
        raise ValueError(f"cannot split {c} channels at {n_first}")

    def back_first(g):
        full = np.zeros_like(a.values)
        full[..., :n_first] = g
        _accum(a, full)

    def back_rest(g):
        full = np.zeros_like(a.values)
        full[..., n_first:] = g
        _accum(a, full)

    first = tape._record(a.values[..., :n_first].copy(), (a,), "chsplit0", back_first)
    rest = tape._record(a.values[..., n_first:].copy(), (a,), "chsplit1", back_rest)
    return first, rest


# ---------------------------------------------------------------------------
# spatial ops
# ---------------------------------------------------------------------------


def _spatial_ndim(x: np.ndarray) -> int:
    # (B, *spatial, C)
    return x.ndim - 2


def zeropad(tape, a, pad: int):
    """Zero-pad every spatial side by ``pad``."""
    s = _spatial_ndim(a.values)
    widths = [(0, 0)] + [(pad, pad)] * s + [(0, 0)]
    out = np.pad(a.values, widths)
    sl = (slice(None),) + (slice(pad, -pad),) * s + (slice(None),)

    return tape._record(out, (a,), "zeropad", lambda g: _accum(a, g[sl]))


def crop(tape, a, pad: int):
    """Remove ``pad`` entries from every spatial side (inverse of zeropad)."""
    s = _spatial_ndim(a.values)
    sl = (slice(None),) + (slice(pad, -pad),) * s + (slice(None),)
    out = a.values[sl].copy()

    def back(g):
        full = np.zeros_like(a.values)
        full[sl] = g
        _accum(a, full)

    return tape._record(out, (a,), "crop", back)


def _offset_slices(s: int, spatial: tuple[int, ...]):
    """Window slices of a 1-padded array, one per 3^s kernel offset."""
    for idx in range(3**s):
        off = np.unravel_index(idx, (3,) * s)
        yield tuple(slice(o, o + n) for o, n in zip(off, spatial))


def conv3x3(tape, x, k, b):
    """Stride-1 cross-correlation with a 3^s kernel and same zero padding.

    x: (B, *S, Cin); k: (3,)*s + (Cin, Cout); b: (Cout,). Spatial extents
    are preserved. The contraction runs as one GEMM per kernel offset on
    contiguous slabs of the padded input, which are kept for the backward
    pass; the backward pass accumulates exact vector-Jacobian products into
    x, k and b.
    """
    s = _spatial_ndim(x.values)
    if k.values.ndim != s + 2 or k.values.shape[:s] != (3,) * s:
        raise ValueError(f"kernel shape {k.values.shape} invalid for {s}D conv3x3")
    if k.values.shape[s] != x.values.shape[-1]:
        raise ValueError(
            f"kernel expects {k.values.shape[s]} input channels, got {x.values.shape[-1]}"
        )
    if b.values.shape != (k.values.shape[-1],):
        raise ValueError("bias must have one entry per output channel")
    xv, kv = x.values, k.values
    spatial = xv.shape[1:-1]
    c_in, c_out = kv.shape[-2], kv.shape[-1]
    xp = np.pad(xv, [(0, 0)] + [(1, 1)] * s + [(0, 0)])
    slabs = [
        np.ascontiguousarray(xp[(slice(None), *sl, slice(None))]).reshape(-1, c_in)
        for sl in _offset_slices(s, spatial)
    ]
    kf = kv.reshape(-1, c_in, c_out)
    out_mat = slabs[0] @ kf[0]
    tmp = np.empty_like(out_mat)
    for idx in range(1, len(slabs)):
        np.matmul(slabs[idx], kf[idx], out=tmp)
        out_mat += tmp
    out = out_mat.reshape(xv.shape[:-1] + (c_out,))
    out += b.values

    def back(g):
        _accum(b, g.sum(axis=tuple(range(0, 1 + s))))
        g_mat = g.reshape(-1, c_out)
        gk = np.empty_like(kf)
        for idx in range(len(slabs)):
            np.matmul(slabs[idx].T, g_mat, out=gk[idx])
        _accum(k, gk.reshape(kv.shape))
        # dL/dx: scatter each offset's contribution back onto the padded grid.
        gx_pad = np.zeros_like(xp)
        gslab = np.empty((g_mat.shape[0], c_in))
        for idx, sl in enumerate(_offset_slices(s, spatial)):
            np.matmul(g_mat, kf[idx].T, out=gslab)
            gx_pad[(slice(None), *sl, slice(None))] += gslab.reshape(xv.shape)
        center = (slice(None),) + (slice(1, -1),) * s + (slice(None),)
        _accum(x, gx_pad[center])

    return tape._record(out, (x, k, b), "conv3x3", back)


def conv1x1(tape, x, k, b):
    """Per-node linear map across channels with spatially shared weights."""
    if k.values.shape[0] != x.values.shape[-1]:
        raise ValueError(
            f"kernel expects {k.values.shape[0]} input channels, got {x.values.shape[-1]}"
        )
    if b.values.shape != (k.values.shape[-1],):
        raise ValueError("bias must have one entry per output channel")
    out = x.values @ k.values + b.values
    xv, kv = x.values, k.values

    def back(g):
        lead = tuple(range(g.ndim - 1))
        _accum(b, g.sum(axis=lead))
        _accum(k, np.tensordot(xv, g, axes=(lead, lead)))
        _accum(x, g @ kv.T)

    return tape._record(out, (x, k, b), "conv1x1", back)


def _pool_perms(s: int):
    # x (B, X/2, 2, Y/2, 2, [Z/2, 2,] C) -> (B, X/2, Y/2, [Z/2,] C, block)
    if s == 2:
        fwd = (0, 1, 3, 5, 2, 4)
        inv = (0, 1, 4, 2, 5, 3)
    else:
        fwd = (0, 1, 3, 5, 7, 2, 4, 6)
        inv = (0, 1, 5, 2, 6, 3, 7, 4)
    return fwd, inv


def maxpool2(tape, x):
    """Halve every spatial extent, taking the max over 2^s blocks.

    The backward pass routes the gradient to the argmax entry of each block
    only; on ties the first entry in raster order wins.
    """
    xv = x.values
    s = _spatial_ndim(xv)
    spatial = xv.shape[1:-1]
    if any(n % 2 for n in spatial):
        raise ValueError(f"maxpool2 requires even spatial extents, got {spatial}")
    B, C = xv.shape[0], xv.shape[-1]
    half = tuple(n // 2 for n in spatial)
    block_shape = (B,) + tuple(v for n in half for v in (n, 2)) + (C,)
    fwd, inv = _pool_perms(s)
    blocks = xv.reshape(block_shape).transpose(fwd).reshape(B, *half, C, 2**s)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def back(g):
        gb = np.zeros((B, *half, C, 2**s))
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gfull = gb.reshape((B,) + half + (C,) + (2,) * s).transpose(inv).reshape(xv.shape)
        _accum(x, gfull)

    return tape._record(out, (x,), "maxpool2", back)


def upsample_concat(tape, coarse, skip):
    """Nearest-neighbour 2x upsampling of ``coarse`` concatenated with ``skip``.

    Output spatial extents equal those of ``skip`` (exactly twice the coarse
    extents); channels are (coarse channels, then skip channels). The
    backward pass sums the 2^s replicated gradients per coarse entry.
    """
    cv, sv = coarse.values, skip.values
    s = _spatial_ndim(cv)
    if tuple(sv.shape[1:-1]) != tuple(2 * n for n in cv.shape[1:-1]):
        raise ValueError(
            f"skip extents {sv.shape[1:-1]} must double coarse extents {cv.shape[1:-1]}"
        )
    if sv.shape[0] != cv.shape[0]:
        raise ValueError("batch size mismatch between coarse and skip")
    up = cv
    for axis in range(1, 1 + s):
        up = np.repeat(up, 2, axis=axis)
    out = np.concatenate([up, sv], axis=-1)
    c1 = cv.shape[-1]
    B, C = cv.shape[0], cv.shape[-1]
    half = cv.shape[1:-1]
    fwd, inv = _pool_perms(s)

    def back(g):
        gup, gskip = g[..., :c1], g[..., c1:]
        block_shape = (B,) + tuple(v for n in half for v in (n, 2)) + (C,)
        blocks = gup.reshape(block_shape).transpose(fwd).reshape(B, *half, C, 2**s)
        _accum(coarse, blocks.sum(axis=-1))
        _accum(skip, gskip)

    return tape._record(out, (coarse, skip), "upsample_concat", back)


def batchnorm(tape, x, gamma, beta, running_mean, running_var, train: bool,
              momentum: float = 0.99, eps: float = 1e-3):
    """Per-channel standardization over batch and spatial axes.

    Training mode normalizes with batch statistics (biased variance) and
    updates the running arrays in place with the given momentum; inference
    mode uses the running statistics. Requires batch size >= 2 in training
    mode. The backward pass differentiates through the batch statistics.
    """
    xv = x.values
    axes = tuple(range(xv.ndim - 1))
    if train:
        if xv.shape[0] < 2:
            raise ValueError("batchnorm in training mode needs batch size >= 2")
        mean = xv.mean(axis=axes)
        var = xv.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mean = running_mean
        var = running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xv - mean) * inv
    out = gamma.values * xhat + beta.values

    def back(g):
        _accum(beta, g.sum(axis=axes))
        _accum(gamma, (g * xhat).sum(axis=axes))
        dxhat = g * gamma.values
        if train:
            gx = inv * (dxhat - dxhat.mean(axis=axes)
                        - xhat * (dxhat * xhat).mean(axis=axes))
        else:
            gx = inv * dxhat
        _accum(x, gx)

    return tape._record(out, (x, gamma, beta), "batchnorm", back)
