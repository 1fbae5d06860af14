"""Minimal reverse-mode differentiation over float64 numpy arrays.

Exactly the operation set the networks need, built micrograd-style: each op
returns a DiffValue holding forward data plus a closure that scatters the
incoming gradient to its parents. Graphs are per-sample; parameters shared
between graphs accumulate gradients additively, which is how batches sum.

3D convolutions run as gather/scatter against a cached index plan (im2col
with precomputed flat indices); the transposed convolution is implemented
as the exact adjoint of the matching convolution, so both directions share
one plan per geometry.
"""

import itertools
import math
from functools import lru_cache

import numpy as np
from scipy.special import expit

from .sampling import sample_backward, sample_with_cache

_BCE_EPS = 1e-7


class DiffError(ValueError):
    pass


class CheckpointError(ValueError):
    """Malformed checkpoint; `offset` is the byte position of the problem."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class DiffValue:
    """Node in the computation graph: forward data plus accumulated grad."""

    __slots__ = ("data", "grad", "_parents", "_vjp", "op", "node_id")
    _counter = itertools.count()

    def __init__(self, data, parents=(), vjp=None, op="leaf"):
        data = np.asarray(data, dtype=np.float64)
        self.data = data
        self.grad = None
        self._parents = parents
        self._vjp = vjp
        self.op = op
        self.node_id = next(DiffValue._counter)
        # cheap probe: any NaN/inf makes the sum non-finite
        if not math.isfinite(float(data.sum())):
            raise DiffError(f"non-finite values produced by op {op!r} (node {self.node_id})")

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64)
            self.grad = self.grad.reshape(self.data.shape)
        else:
            self.grad += g

    def detach(self):
        """Leaf view of the same data; gradients stop here."""
        return DiffValue(self.data)

    def __repr__(self):
        return f"DiffValue(op={self.op!r}, shape={self.shape})"


def backward(root):
    """Reverse-mode sweep from a scalar root, each node visited once."""
    if root.size != 1:
        raise DiffError(f"backward root must be scalar, got shape {root.shape}")
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    root.accumulate(np.ones_like(root.data))
    for node in reversed(order):
        if node._vjp is not None and node.grad is not None:
            node._vjp(node.grad)


def zero_grads(values):
    for v in values.values() if isinstance(values, dict) else values:
        v.grad = None


def _as_array(x):
    return x.data if isinstance(x, DiffValue) else np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# elementwise / dense ops


def add(x, y):
    if x.shape != y.shape:
        raise DiffError(f"add shape mismatch: {x.shape} vs {y.shape}")

    def vjp(g):
        x.accumulate(g)
        y.accumulate(g)

    return DiffValue(x.data + y.data, (x, y), vjp, "add")


def sub(x, y):
    if x.shape != y.shape:
        raise DiffError(f"sub shape mismatch: {x.shape} vs {y.shape}")

    def vjp(g):
        x.accumulate(g)
        y.accumulate(-g)

    return DiffValue(x.data - y.data, (x, y), vjp, "sub")


def scale(x, c):
    c = float(c)

    def vjp(g):
        x.accumulate(c * g)

    return DiffValue(c * x.data, (x,), vjp, "scale")


def relu(x):
    mask = x.data > 0

    def vjp(g):
        x.accumulate(g * mask)

    return DiffValue(x.data * mask, (x,), vjp, "relu")


def sigmoid(x):
    s = expit(x.data)

    def vjp(g):
        x.accumulate(g * s * (1.0 - s))

    return DiffValue(s, (x,), vjp, "sigmoid")


def vsum(x):
    def vjp(g):
        x.accumulate(np.full_like(x.data, float(g)))

    return DiffValue(x.data.sum(), (x,), vjp, "vsum")


def weighted_sum(x, w):
    """sum(w * x) for a constant weight array; handy scalar probe."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape != x.shape:
        raise DiffError(f"weighted_sum shape mismatch: {w.shape} vs {x.shape}")

    def vjp(g):
        x.accumulate(float(g) * w)

    return DiffValue((w * x.data).sum(), (x,), vjp, "weighted_sum")


def frob_sq(x):
    def vjp(g):
        x.accumulate(2.0 * float(g) * x.data)

    return DiffValue((x.data**2).sum(), (x,), vjp, "frob_sq")


def l2(pred, target):
    """Sum of squared differences against a constant target."""
    target = _as_array(target)
    diff = pred.data - target

    def vjp(g):
        pred.accumulate(2.0 * float(g) * diff)

    return DiffValue((diff**2).sum(), (pred,), vjp, "l2")


def bce(pred, target):
    """Binary cross-entropy summed over elements; pred clamped to (0, 1)."""
    target = _as_array(target)
    if target.shape != pred.shape:
        raise DiffError(f"bce shape mismatch: {pred.shape} vs {target.shape}")
    p = np.clip(pred.data, _BCE_EPS, 1.0 - _BCE_EPS)
    value = -(target * np.log(p) + (1.0 - target) * np.log1p(-p)).sum()
    inside = (pred.data > _BCE_EPS) & (pred.data < 1.0 - _BCE_EPS)

    def vjp(g):
        pred.accumulate(float(g) * inside * (p - target) / (p * (1.0 - p)))

    return DiffValue(value, (pred,), vjp, "bce")


def dense(x, w, b):
    if x.shape != (w.shape[0],) or b.shape != (w.shape[1],):
        raise DiffError(f"dense shape mismatch: x{x.shape} w{w.shape} b{b.shape}")

    def vjp(g):
        x.accumulate(w.data @ g)
        w.accumulate(np.outer(x.data, g))
        b.accumulate(g)

    return DiffValue(x.data @ w.data + b.data, (x, w, b), vjp, "dense")


def dense_nobias(x, w):
    if x.shape != (w.shape[0],):
        raise DiffError(f"dense_nobias shape mismatch: x{x.shape} w{w.shape}")

    def vjp(g):
        x.accumulate(w.data @ g)
        w.accumulate(np.outer(x.data, g))

    return DiffValue(x.data @ w.data, (x, w), vjp, "dense_nobias")


def matmul(x, y):
    """2-d @ 2-d or 2-d @ 1-d matrix product."""
    if x.data.ndim != 2 or y.data.ndim not in (1, 2):
        raise DiffError(f"matmul needs a matrix and a matrix/vector, got {x.shape} @ {y.shape}")
    if x.shape[1] != y.shape[0]:
        raise DiffError(f"matmul shape mismatch: {x.shape} @ {y.shape}")

    def vjp(g):
        if y.data.ndim == 1:
            x.accumulate(np.outer(g, y.data))
            y.accumulate(x.data.T @ g)
        else:
            x.accumulate(g @ y.data.T)
            y.accumulate(x.data.T @ g)

    return DiffValue(x.data @ y.data, (x, y), vjp, "matmul")


def reshape(x, shape):
    shape = tuple(shape)

    def vjp(g):
        x.accumulate(g.reshape(x.shape))

    return DiffValue(x.data.reshape(shape), (x,), vjp, "reshape")


def concat(parts):
    """Concatenate 1-d values."""
    parts = list(parts)
    for p in parts:
        if p.data.ndim != 1:
            raise DiffError("concat expects 1-d values")
    sizes = [p.size for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            p.accumulate(g[lo:hi])

    return DiffValue(np.concatenate([p.data for p in parts]), tuple(parts), vjp, "concat")


def narrow(x, start, length):
    """1-d slice x[start : start + length]."""
    if x.data.ndim != 1 or start < 0 or start + length > x.size:
        raise DiffError(f"bad narrow({start}, {length}) on shape {x.shape}")

    def vjp(g):
        full = np.zeros_like(x.data)
        full[start : start + length] = g
        x.accumulate(full)

    return DiffValue(x.data[start : start + length].copy(), (x,), vjp, "narrow")


def slice0(x, index):
    """Select x[index] along the first axis."""
    if not 0 <= index < x.shape[0]:
        raise DiffError(f"slice0 index {index} out of range for shape {x.shape}")

    def vjp(g):
        full = np.zeros_like(x.data)
        full[index] = g
        x.accumulate(full)

    return DiffValue(x.data[index].copy(), (x,), vjp, "slice0")


def vmax(x, y):
    """Elementwise maximum; ties route the gradient to the first argument."""
    if x.shape != y.shape:
        raise DiffError(f"vmax shape mismatch: {x.shape} vs {y.shape}")
    take_x = x.data >= y.data

    def vjp(g):
        x.accumulate(g * take_x)
        y.accumulate(g * ~take_x)

    return DiffValue(np.where(take_x, x.data, y.data), (x, y), vjp, "vmax")


def st_binarize(x, tau=0.5):
    """Hard threshold with a straight-through (identity) backward pass."""

    def vjp(g):
        x.accumulate(g)

    return DiffValue((x.data >= tau).astype(np.float64), (x,), vjp, "st_binarize")


def softmax(x, axis=0):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * p).sum(axis=axis, keepdims=True)
        x.accumulate(p * (g - dot))

    return DiffValue(p, (x,), vjp, "softmax")


def softmax_ce(logits, labels):
    """Per-cell multiclass cross-entropy, summed; channel axis is 0."""
    labels = np.asarray(labels)
    if labels.shape != logits.shape[1:]:
        raise DiffError(f"softmax_ce label shape {labels.shape} vs logits {logits.shape}")
    flat_labels = labels.ravel()
    z = logits.data.reshape(logits.shape[0], -1)
    z = z - z.max(axis=0, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=0, keepdims=True))
    cols = np.arange(z.shape[1])
    value = -logp[flat_labels, cols].sum()

    def vjp(g):
        grad = np.exp(logp)
        grad[flat_labels, cols] -= 1.0
        logits.accumulate(float(g) * grad.reshape(logits.shape))

    return DiffValue(value, (logits,), vjp, "softmax_ce")


# ---------------------------------------------------------------------------
# 3-d convolutions via cached index plans


@lru_cache(maxsize=None)
def _conv_plan(channels, d, h, w, k, stride, pad):
    """Flat gather indices (positions, channels * k^3) into the padded volume."""
    dp, hp, wp = d + 2 * pad, h + 2 * pad, w + 2 * pad
    od, oh, ow = [(s + 2 * pad - k) // stride + 1 for s in (d, h, w)]
    if min(od, oh, ow) <= 0 or any((s + 2 * pad - k) % stride for s in (d, h, w)):
        raise DiffError(f"conv geometry ({d},{h},{w}) k={k} s={stride} p={pad} does not tile")
    zi = np.arange(od) * stride
    yi = np.arange(oh) * stride
    xi = np.arange(ow) * stride
    base = (zi[:, None, None] * hp * wp + yi[None, :, None] * wp + xi[None, None, :]).ravel()
    kk = np.arange(k)
    off = (kk[:, None, None] * hp * wp + kk[None, :, None] * wp + kk[None, None, :]).ravel()
    chan = np.arange(channels) * (dp * hp * wp)
    idx = base[:, None, None] + chan[None, :, None] + off[None, None, :]
    return idx.reshape(len(base), channels * k * k * k), (od, oh, ow), (dp, hp, wp)


def _pad3(x, pad):
    if pad == 0:
        return x
    c, d, h, w = x.shape
    out = np.zeros((c, d + 2 * pad, h + 2 * pad, w + 2 * pad))
    out[:, pad : pad + d, pad : pad + h, pad : pad + w] = x
    return out


def _crop3(x, pad, shape):
    if pad == 0:
        return x.reshape(shape)
    c, d, h, w = shape
    return x.reshape(c, d + 2 * pad, h + 2 * pad, w + 2 * pad)[
        :, pad : pad + d, pad : pad + h, pad : pad + w
    ]


def _im2col(x, k, stride, pad):
    c, d, h, w = x.shape
    idx, out_sp, _ = _conv_plan(c, d, h, w, k, stride, pad)
    return _pad3(x, pad).ravel()[idx], out_sp, idx


def _col2im(cols, idx, channels, spatial, pad):
    d, h, w = spatial
    n = channels * (d + 2 * pad) * (h + 2 * pad) * (w + 2 * pad)
    flat = np.bincount(idx.ravel(), weights=cols.ravel(), minlength=n)
    return _crop3(flat, pad, (channels, d, h, w))


def conv3(x, w, b, stride=2, padding=1):
    """3-d convolution; x (Cin, D, H, W), w (Cout, Cin, k, k, k), b (Cout,)."""
    if x.data.ndim != 4 or w.data.ndim != 5 or w.shape[1] != x.shape[0]:
        raise DiffError(f"conv3 shape mismatch: x{x.shape} w{w.shape}")
    if b.shape != (w.shape[0],):
        raise DiffError(f"conv3 bias shape {b.shape} vs {w.shape[0]} channels")
    k = w.shape[2]
    cols, out_sp, idx = _im2col(x.data, k, stride, padding)
    wmat = w.data.reshape(w.shape[0], -1).T  # (Cin*k^3, Cout)
    out = (cols @ wmat + b.data).T.reshape(w.shape[0], *out_sp)

    def vjp(g):
        gmat = g.reshape(w.shape[0], -1).T  # (P, Cout)
        x.accumulate(_col2im(gmat @ wmat.T, idx, x.shape[0], x.shape[1:], padding))
        w.accumulate((cols.T @ gmat).T.reshape(w.shape))
        b.accumulate(gmat.sum(axis=0))

    return DiffValue(out, (x, w, b), vjp, "conv3")


def conv3_transpose(x, w, b, stride=2, padding=1):
    """Transposed 3-d convolution, the exact adjoint of conv3.

    x (Cin, d, h, w'), w (Cin, Cout, k, k, k), b (Cout,); output spatial
    size is (d - 1) * stride - 2 * padding + k per axis.
    """
    if x.data.ndim != 4 or w.data.ndim != 5 or w.shape[0] != x.shape[0]:
        raise DiffError(f"conv3_transpose shape mismatch: x{x.shape} w{w.shape}")
    if b.shape != (w.shape[1],):
        raise DiffError(f"conv3_transpose bias shape {b.shape} vs {w.shape[1]} channels")
    cin, cout, k = w.shape[0], w.shape[1], w.shape[2]
    out_sp = tuple((s - 1) * stride - 2 * padding + k for s in x.shape[1:])
    idx, conv_sp, _ = _conv_plan(cout, *out_sp, k, stride, padding)
    if conv_sp != x.shape[1:]:
        raise DiffError(f"conv3_transpose geometry mismatch: {conv_sp} vs {x.shape[1:]}")
    xmat = x.data.reshape(cin, -1).T  # (P, Cin)
    wmat = w.data.reshape(cin, -1)  # (Cin, Cout*k^3)
    out = _col2im(xmat @ wmat, idx, cout, out_sp, padding) + b.data.reshape(-1, 1, 1, 1)

    def vjp(g):
        gcols = _pad3(g, padding).ravel()[idx]  # (P, Cout*k^3)
        x.accumulate((gcols @ wmat.T).T.reshape(x.shape))
        w.accumulate((xmat.T @ gcols).reshape(w.shape))
        b.accumulate(g.sum(axis=(1, 2, 3)))

    return DiffValue(out, (x, w, b), vjp, "conv3_transpose")


# ---------------------------------------------------------------------------
# differentiable affine resampling


def grid_sample3(volume, theta):
    """Trilinear resample of a cubic volume under a 12-parameter transform.

    theta is [A row-major (9), t (3)]; the output at voxel center o reads
    the volume at A @ o + t (see sampling module for the full convention).
    Differentiable in both the volume values and all 12 parameters.
    """
    if volume.data.ndim != 3 or len(set(volume.shape)) != 1 or theta.shape != (12,):
        raise DiffError(f"grid_sample3 needs (R,R,R) volume and 12-vector, got {volume.shape}, {theta.shape}")
    mat = theta.data[:9].reshape(3, 3)
    trans = theta.data[9:]
    out, cache = sample_with_cache(volume.data, mat, trans)

    def vjp(g):
        gvol, gmat, gtrans = sample_backward(cache, g)
        volume.accumulate(gvol)
        theta.accumulate(np.concatenate([gmat.ravel(), gtrans]))

    return DiffValue(out, (volume, theta), vjp, "grid_sample3")


# ---------------------------------------------------------------------------
# optimizer

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class AdamState:
    """First/second moment accumulators plus the decayed-lr schedule.

    lr_scales maps parameter-name prefixes to multipliers on the base rate,
    so structured groups (e.g. the projection matrices) can move slower.
    """

    def __init__(self, params, lr=1e-4, decay_rate=0.8, decay_every=40, lr_scales=None):
        self.params = dict(params)
        self.lr = lr
        self.decay_rate = decay_rate
        self.decay_every = decay_every
        self.step_count = 0
        self.m = {k: np.zeros_like(v.data) for k, v in self.params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in self.params.items()}
        lr_scales = lr_scales or {}
        self.scales = {
            k: next((s for prefix, s in lr_scales.items() if k.startswith(prefix)), 1.0)
            for k in self.params
        }

    def effective_lr(self, epoch):
        return self.lr * self.decay_rate ** (epoch // self.decay_every)


def adam_step(params, state, epoch=0):
    """One Adam update with bias correction; missing grads count as zero."""
    state.step_count += 1
    t = state.step_count
    lr = state.effective_lr(epoch)
    for name, p in state.params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1 - ADAM_BETA2) * g * g
        mhat = m / (1 - ADAM_BETA1**t)
        vhat = v / (1 - ADAM_BETA2**t)
        p.data -= lr * state.scales[name] * mhat / (np.sqrt(vhat) + ADAM_EPS)


# ---------------------------------------------------------------------------
# checkpoint format

PFCK_MAGIC = b"PFCK1\n"


def save_checkpoint(params, path):
    """Write named float64 arrays: magic, count, then (name, shape, bytes)."""
    items = sorted((k, _as_array(v)) for k, v in params.items())
    with open(path, "wb") as fh:
        fh.write(PFCK_MAGIC)
        fh.write(f"{len(items)}\n".encode("ascii"))
        for name, arr in items:
            if " " in name or "\n" in name:
                raise ValueError(f"bad parameter name {name!r}")
            dims = " ".join(str(d) for d in arr.shape)
            fh.write(f"{name} {arr.ndim}{' ' + dims if dims else ''}\n".encode("ascii"))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(PFCK_MAGIC):
        raise CheckpointError("missing PFCK1 magic", 0)
    pos = len(PFCK_MAGIC)
    end = blob.find(b"\n", pos)
    count = int(blob[pos:end])
    pos = end + 1
    out = {}
    for _ in range(count):
        end = blob.find(b"\n", pos)
        if end < 0:
            raise CheckpointError("truncated record header", pos)
        words = blob[pos:end].decode("ascii").split()
        name, ndim = words[0], int(words[1])
        shape = tuple(int(w) for w in words[2 : 2 + ndim])
        pos = end + 1
        n = int(np.prod(shape)) if shape else 1
        raw = blob[pos : pos + 8 * n]
        if len(raw) != 8 * n:
            raise CheckpointError("truncated tensor data", pos)
        out[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
        pos += 8 * n
    if pos != len(blob):
        raise CheckpointError("trailing data after final record", pos)
    return out



# ---------------------------------------------------------------------------
# finite-difference oracle


def numeric_gradient(f, arrays, h=1e-4):
    """Central-difference gradients of scalar f w.r.t. each input array."""
    grads = []
    for i, a in enumerate(arrays):
        g = np.zeros_like(a, dtype=np.float64)
        flat = g.ravel()
        base = [np.array(x, dtype=np.float64) for x in arrays]
        for j in range(a.size):
            hi = [b.copy() for b in base]
            lo = [b.copy() for b in base]
            hi[i].ravel()[j] += h
            lo[i].ravel()[j] -= h
            flat[j] = (f(*hi) - f(*lo)) / (2 * h)
        grads.append(g)
    return grads


def gradient_error(f, arrays, h=1e-4):
    """Max relative error between backward() grads and central differences.

    Elements where both gradients are below 1e-8 in magnitude count as
    exact; otherwise the error is |a - n| / max(|a|, |n|, 1).
    """
    leaves = [DiffValue(a) for a in arrays]
    out = f(*leaves)
    backward(out)
    analytic = [
        leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        for leaf in leaves
    ]
    numeric = numeric_gradient(lambda *xs: float(f(*[DiffValue(x) for x in xs]).data), arrays, h)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1.0)
        err = np.abs(a - n) / denom
        err[(np.abs(a) < 1e-8) & (np.abs(n) < 1e-8)] = 0.0
        worst = max(worst, float(err.max()) if err.size else 0.0)
    return worst
