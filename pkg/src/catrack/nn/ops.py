"""Differentiable operations over :class:`Tensor`.

Every op checks its output for NaN/Inf and records a backward closure only
when an input requires a gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .tensor import ShapeError, Tensor, as_tensor, make_output


@dataclass(frozen=True)
class ConvSpec:
    in_ch: int
    out_ch: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    dilation: int = 1
    padding: int = 0

    def __post_init__(self):
        for f in ("in_ch", "out_ch", "kernel_h", "kernel_w", "stride", "dilation"):
            if getattr(self, f) < 1:
                raise ShapeError(f"ConvSpec.{f} must be positive")
        if self.padding < 0:
            raise ShapeError("ConvSpec.padding must be non-negative")

    def out_size(self, h, w):
        ho = (h + 2 * self.padding - self.dilation * (self.kernel_h - 1) - 1) // self.stride + 1
        wo = (w + 2 * self.padding - self.dilation * (self.kernel_w - 1) - 1) // self.stride + 1
        return ho, wo

    @property
    def n_params(self):
        return self.out_ch * self.in_ch * self.kernel_h * self.kernel_w + self.out_ch


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# float32 loss gradients below this are zeroed; they cannot move a float32
# parameter, and once scaled by weights they turn into subnormals, which
# are many times slower to compute with on common CPUs
GRAD_FLOOR = {np.dtype(np.float32): 1e-30}


def flush_subnormal(a):
    """Zero (in place) values too small to matter for ``a``'s dtype."""
    floor = GRAD_FLOOR.get(a.dtype, np.finfo(a.dtype).tiny)
    a[np.abs(a) < floor] = 0
    return a


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.shape))

    return make_output(out, (a, b), backward, "add")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.shape))

    return make_output(out, (a, b), backward, "mul")


def relu(x):
    x = as_tensor(x)
    out = np.maximum(x.data, 0)

    def backward(g):
        x._accumulate(g * (x.data > 0))

    return make_output(out, (x,), backward, "relu")


def sigmoid(x):
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = (1.0 / (1.0 + np.exp(-x.data))).astype(x.dtype)

    def backward(g):
        x._accumulate(g * out * (1.0 - out))

    return make_output(out, (x,), backward, "sigmoid")


def dropout(x, p, rng, training=True):
    """Inverted dropout; identity when not training or ``p == 0``."""
    x = as_tensor(x)
    if not training or p <= 0:
        return x
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return mul(x, Tensor(keep))


# ------------------------------------------------------------------- shaping

def reshape(x, shape):
    x = as_tensor(x)
    src = x.shape
    out = x.data.reshape(shape)

    def backward(g):
        x._accumulate(g.reshape(src))

    return make_output(out, (x,), backward, "reshape")


def flatten(x):
    return reshape(x, (x.shape[0], -1))


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.data.ndim != len(ref) or any(
            t.shape[i] != ref[i] for i in range(len(ref)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape}")
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return make_output(out, tensors, backward, "concat")


def take(x, index, axis=0):
    """Select entries along ``axis`` (integer array index)."""
    x = as_tensor(x)
    index = np.asarray(index)
    out = np.take(x.data, index, axis=axis)

    def backward(g):
        full = np.zeros_like(x.data)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, index, np.moveaxis(g, axis, 0))
        x._accumulate(full)

    return make_output(out, (x,), backward, "take")


def global_avg_pool(x):
    """[N,C,H,W] -> [N,C,1,1] spatial mean."""
    x = as_tensor(x)
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def backward(g):
        x._accumulate(np.broadcast_to(g / (h * w), x.shape))

    return make_output(out, (x,), backward, "global_avg_pool")


# ------------------------------------------------------------------- linear

def linear(x, weight, bias=None):
    """x [B,I] @ weight[O,I].T + bias[O]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {weight.shape}")
    out = x.data @ weight.data.T
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"linear: bias {bias.shape} vs out {weight.shape[0]}")
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        if x.requires_grad:
            x._accumulate(g @ weight.data)
        if weight.requires_grad:
            weight._accumulate(g.T @ x.data)
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=0))

    return make_output(out, parents, backward, "linear")


# -------------------------------------------------------------- convolution

def _im2col(xp, kh, kw, stride, dil, ho, wo):
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            r, s = i * dil, j * dil
            cols[:, :, i, j] = xp[:, :, r:r + stride * (ho - 1) + 1:stride, s:s + stride * (wo - 1) + 1:stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _col2im(dcols, shape_p, kh, kw, stride, dil, ho, wo):
    n, c = shape_p[:2]
    dcols = dcols.reshape(n, c, kh, kw, ho, wo)
    dxp = np.zeros(shape_p, dtype=dcols.dtype)
    for i in range(kh):
        for j in range(kw):
            r, s = i * dil, j * dil
            dxp[:, :, r:r + stride * (ho - 1) + 1:stride, s:s + stride * (wo - 1) + 1:stride] += dcols[:, :, i, j]
    return dxp


def conv2d(x, weight, bias, spec: ConvSpec):
    """2-D cross-correlation (no kernel flip), NCHW layout."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: expected [N,C,H,W] input, got {x.shape}")
    n, c, h, w = x.shape
    o, kh, kw = spec.out_ch, spec.kernel_h, spec.kernel_w
    if c != spec.in_ch or weight.shape != (o, spec.in_ch, kh, kw):
        raise ShapeError(f"conv2d: input {x.shape} / weight {weight.shape} do not match {spec}")
    ho, wo = spec.out_size(h, w)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: input {h}x{w} too small for {spec}")
    p, s, d = spec.padding, spec.stride, spec.dilation
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    pointwise = kh == 1 and kw == 1 and s == 1
    cols = xp.reshape(n, c, h * w) if pointwise and not p else _im2col(xp, kh, kw, s, d, ho, wo)
    w2 = weight.data.reshape(o, -1)
    out = np.matmul(w2, cols)
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (o,):
            raise ShapeError(f"conv2d: bias {bias.shape} vs out channels {o}")
        out += bias.data[None, :, None]
        parents.append(bias)
    out = out.reshape(n, o, ho, wo)

    def backward(g):
        g2 = g.reshape(n, o, ho * wo)
        if weight.requires_grad:
            dw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0)
            weight._accumulate(dw.reshape(weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g2.sum(axis=(0, 2)))
        if x.requires_grad:
            dcols = np.matmul(w2.T, g2)
            if pointwise and not p:
                x._accumulate(dcols.reshape(x.shape))
            else:
                dxp = _col2im(dcols, xp.shape, kh, kw, s, d, ho, wo)
                x._accumulate(dxp[:, :, p:p + h, p:p + w] if p else dxp)

    return make_output(out, parents, backward, "conv2d")


def maxpool2d(x, window, stride):
    x = as_tensor(x)
    if window < 1 or stride < 1:
        raise ShapeError("maxpool2d: window and stride must be >= 1")
    n, c, h, w = x.shape
    if window > h or window > w:
        raise ShapeError(f"maxpool2d: window {window} larger than input {h}x{w}")
    ho, wo = (h - window) // stride + 1, (w - window) // stride + 1

    def view(arr, i, j):
        return arr[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]

    out = view(x.data, 0, 0).copy()
    for i in range(window):
        for j in range(window):
            if i or j:
                np.maximum(out, view(x.data, i, j), out=out)

    def backward(g):
        dx = np.zeros_like(x.data)
        taken = np.zeros(out.shape, dtype=bool)
        # row-major scan: the first offset equal to the max receives the gradient
        for i in range(window):
            for j in range(window):
                sel = (view(x.data, i, j) == out) & ~taken
                taken |= sel
                view(dx, i, j)[...] += g * sel
        x._accumulate(dx)

    return make_output(out, (x,), backward, "maxpool2d")


def _channel_window_sum(a, n):
    half = n // 2
    c = a.shape[1]
    out = np.zeros_like(a)
    for off in range(-half, half + 1):
        lo, hi = max(0, -off), min(c, c - off)
        if lo < hi:
            out[:, lo:hi] += a[:, lo + off:hi + off]
    return out


def lrn(x, n=5, k=2.0, alpha=1e-4, beta=0.75):
    """Across-channel LRN: a / (k + alpha/n * sum_window a^2) ** beta."""
    x = as_tensor(x)
    if n < 1 or n % 2 == 0:
        raise ShapeError("lrn: window n must be odd")
    if k <= 0:
        raise ShapeError("lrn: k must be positive")
    a = x.data
    denom = k + (alpha / n) * _channel_window_sum(a * a, n)
    scale = denom ** -beta
    out = a * scale

    def backward(g):
        inner = _channel_window_sum(g * a * scale / denom, n)
        x._accumulate(g * scale - (2.0 * alpha * beta / n) * a * inner)

    return make_output(out, (x,), backward, "lrn")


# ----------------------------------------------------------------- roialign

def _bilinear_terms(coord, size):
    """Corner indices and weights per sample, torchvision edge rules."""
    valid = (coord >= -1.0) & (coord <= size)
    c = np.clip(coord, 0.0, None)
    lo = np.floor(c).astype(np.int64)
    at_edge = lo >= size - 1
    lo = np.where(at_edge, size - 1, lo)
    hi = np.where(at_edge, size - 1, lo + 1)
    c = np.where(at_edge, lo.astype(c.dtype), c)
    frac = c - lo
    return lo, hi, 1.0 - frac, frac, valid


def roialign_matrix(boxes, batch_idx, feat_shape, spatial_scale, out_size, sampling=2):
    """Sparse [B*r*r, N*H*W] matrix of bilinear sampling weights.

    Boxes are (x, y, w, h) in image coordinates; each output bin averages
    ``sampling x sampling`` bilinear samples.
    """
    n, _, h, w = feat_shape
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    batch_idx = np.asarray(batch_idx, dtype=np.int64).reshape(-1)
    if len(batch_idx) != len(boxes):
        raise ShapeError("roialign: one batch index per box required")
    if np.any(boxes[:, 2] <= 0) or np.any(boxes[:, 3] <= 0):
        raise ShapeError("roialign: boxes need positive width and height")
    if np.any(batch_idx < 0) or np.any(batch_idx >= n):
        raise ShapeError("roialign: batch index out of range")
    x1 = boxes[:, 0] * spatial_scale
    y1 = boxes[:, 1] * spatial_scale
    bw = np.maximum(boxes[:, 2] * spatial_scale, 1.0) / out_size
    bh = np.maximum(boxes[:, 3] * spatial_scale, 1.0) / out_size
    x2 = x1 + bw * out_size
    y2 = y1 + bh * out_size
    if np.any((x2 < -1.0) | (y2 < -1.0) | (x1 > w) | (y1 > h)):
        raise ShapeError("roialign: box lies entirely outside the feature map")
    r, s = out_size, sampling
    offs = (np.arange(r)[:, None] + (np.arange(s)[None, :] + 0.5) / s).reshape(-1)  # r*s
    ys = y1[:, None] + offs[None, :] * bh[:, None]  # B, r*s
    xs = x1[:, None] + offs[None, :] * bw[:, None]
    y_lo, y_hi, wy_lo, wy_hi, y_ok = _bilinear_terms(ys, h)
    x_lo, x_hi, wx_lo, wx_hi, x_ok = _bilinear_terms(xs, w)
    nb = len(boxes)
    # axes: box, bin_y, sample_y, bin_x, sample_x
    shp = (nb, r, s, 1, 1)
    shx = (nb, 1, 1, r, s)
    base = (batch_idx * h * w).reshape(nb, 1, 1, 1, 1)
    rows = (np.arange(nb)[:, None, None] * r * r + np.arange(r)[None, :, None] * r + np.arange(r)[None, None, :])
    rows = np.broadcast_to(rows[:, :, None, :, None], (nb, r, s, r, s))
    ok = y_ok.reshape(shp) & x_ok.reshape(shx)
    norm = 1.0 / (s * s)
    ri, ci, vals = [], [], []
    for yi, wy in ((y_lo, wy_lo), (y_hi, wy_hi)):
        for xi, wx in ((x_lo, wx_lo), (x_hi, wx_hi)):
            col = base + yi.reshape(shp) * w + xi.reshape(shx)
            val = np.where(ok, wy.reshape(shp) * wx.reshape(shx) * norm, 0.0)
            ri.append(rows.reshape(-1))
            ci.append(np.broadcast_to(col, rows.shape).reshape(-1))
            vals.append(val.reshape(-1))
    mat = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(ri), np.concatenate(ci))),
        shape=(nb * r * r, n * h * w),
    )
    return mat.tocsr()


def roialign(features, boxes, spatial_scale, out_size, batch_idx=None, sampling=2):
    """Pool each box from a shared [N,C,H,W] map into [B,C,r,r]."""
    features = as_tensor(features)
    if features.data.ndim != 4:
        raise ShapeError(f"roialign: expected [N,C,H,W] features, got {features.shape}")
    n, c, h, w = features.shape
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if batch_idx is None:
        batch_idx = np.zeros(len(boxes), dtype=np.int64)
    mat = roialign_matrix(boxes, batch_idx, features.shape, spatial_scale, out_size, sampling)
    mat = mat.astype(features.dtype)
    flat = features.data.transpose(0, 2, 3, 1).reshape(n * h * w, c)
    pooled = mat @ flat  # B*r*r, C
    nb = len(boxes)
    out = np.ascontiguousarray(pooled.reshape(nb, out_size, out_size, c).transpose(0, 3, 1, 2))

    def backward(g):
        gp = g.transpose(0, 2, 3, 1).reshape(nb * out_size * out_size, c)
        dflat = mat.T @ gp
        features._accumulate(dflat.reshape(n, h, w, c).transpose(0, 3, 1, 2))

    return make_output(out, (features,), backward, "roialign")


# ------------------------------------------------------------------- losses

def _log_softmax(z):
    m = z.max(axis=1, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax_ce_loss(scores, labels):
    """Mean negative log-likelihood of ``labels`` under softmax(scores)."""
    scores = as_tensor(scores)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if scores.data.ndim != 2 or scores.shape[0] != len(labels) or len(labels) < 1:
        raise ShapeError(f"softmax_ce_loss: scores {scores.shape} vs {len(labels)} labels")
    k = scores.shape[1]
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"softmax_ce_loss: labels must lie in [0, {k})")
    logp = _log_softmax(scores.data.astype(np.float64))
    b = len(labels)
    loss = -logp[np.arange(b), labels].mean()
    out = np.asarray(loss, dtype=scores.dtype)

    def backward(g):
        p = np.exp(logp)
        p[np.arange(b), labels] -= 1.0
        scores._accumulate(flush_subnormal((g * p / b).astype(scores.dtype)))

    return make_output(out, (scores,), backward, "softmax_ce_loss")


def instance_embedding_loss(pos_scores, target_domain):
    """Cross-entropy over the domain axis for positive samples.

    ``pos_scores[b, d]`` is the positive-class output of domain head ``d``.
    """
    pos_scores = as_tensor(pos_scores)
    if pos_scores.data.ndim != 2 or pos_scores.shape[1] < 2:
        raise ShapeError("instance_embedding_loss: need [B, D>=2] scores")
    d = pos_scores.shape[1]
    if not 0 <= target_domain < d:
        raise ValueError(f"instance_embedding_loss: domain {target_domain} out of range [0, {d})")
    return softmax_ce_loss(pos_scores, np.full(pos_scores.shape[0], target_domain))
