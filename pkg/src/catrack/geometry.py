"""Box arithmetic, Gaussian box sampling, IoU-based mining and patch cropping.

Boxes are ``(x, y, w, h)`` rows in pixels; arrays of boxes have shape [N, 4].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class MiningError(RuntimeError):
    pass


def iou(a, b):
    """Intersection over union of two boxes; 0 when the union is empty."""
    ax, ay, aw, ah = (float(v) for v in a)
    bx, by, bw, bh = (float(v) for v in b)
    iw = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    ih = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    return inter / union if union > 0 else 0.0


def iou_many(boxes, ref):
    """IoU of every row of ``boxes`` against ``ref`` (one box or same-length array)."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    ref = np.asarray(ref, dtype=np.float64)
    ref = np.broadcast_to(ref.reshape(-1, 4), boxes.shape)
    x1 = np.maximum(boxes[:, 0], ref[:, 0])
    y1 = np.maximum(boxes[:, 1], ref[:, 1])
    x2 = np.minimum(boxes[:, 0] + boxes[:, 2], ref[:, 0] + ref[:, 2])
    y2 = np.minimum(boxes[:, 1] + boxes[:, 3], ref[:, 1] + ref[:, 3])
    inter = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None)
    union = boxes[:, 2] * boxes[:, 3] + ref[:, 2] * ref[:, 3] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def centers(boxes):
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return boxes[:, :2] + boxes[:, 2:] / 2.0


def center_error(pred, gt):
    return np.linalg.norm(centers(pred) - centers(gt), axis=1)


def clip_boxes(boxes, frame_hw, min_size=4.0):
    """Shrink/shift boxes so they lie inside the frame."""
    h, w = frame_hw
    b = np.array(boxes, dtype=np.float64).reshape(-1, 4)
    b[:, 2] = np.clip(b[:, 2], min_size, w)
    b[:, 3] = np.clip(b[:, 3], min_size, h)
    b[:, 0] = np.clip(b[:, 0], 0, w - b[:, 2])
    b[:, 1] = np.clip(b[:, 1], 0, h - b[:, 3])
    return b


def gaussian_samples(box, n, rng, trans=0.6, scale_step=1.05, scale_sigma=0.5, frame_hw=None, ordered=False):
    """Boxes around ``box``: centre offsets ~ N(0, trans*mean(w,h)) per axis,
    size multiplied by ``scale_step ** N(0, scale_sigma)``.

    With ``ordered`` the boxes come in order of decreasing sampling density
    (smallest standardised move first), so a lowest-index tie-break prefers
    staying close to ``box``.
    """
    x, y, w, h = (float(v) for v in box)
    cx, cy = x + w / 2.0, y + h / 2.0
    r = (w + h) / 2.0
    z = np.column_stack([rng.standard_normal((n, 2)), rng.standard_normal(n)])
    if ordered:
        z = z[np.argsort((z ** 2).sum(axis=1), kind="stable")]
    off = z[:, :2] * trans * r
    s = scale_step ** (z[:, 2] * scale_sigma)
    ws, hs = w * s, h * s
    out = np.stack([cx + off[:, 0] - ws / 2.0, cy + off[:, 1] - hs / 2.0, ws, hs], axis=1)
    return clip_boxes(out, frame_hw) if frame_hw is not None else out


@dataclass
class MiningConfig:
    pos_iou: float = 0.7
    neg_iou: float = 0.3
    pos_trans: float = 0.1
    pos_scale_step: float = 1.3
    neg_trans: float = 0.75
    neg_scale_step: float = 1.3
    max_rounds: int = 50

    def __post_init__(self):
        if not self.pos_iou > self.neg_iou:
            raise ValueError("pos_iou must exceed neg_iou")


def _inside(boxes, region):
    if region is None:
        return np.ones(len(boxes), dtype=bool)
    c = centers(boxes)
    rx, ry, rw, rh = region
    return (c[:, 0] >= rx) & (c[:, 0] <= rx + rw) & (c[:, 1] >= ry) & (c[:, 1] <= ry + rh)


def sample_by_iou(gt, n, rng, lo, hi, trans, scale_step, frame_hw, region=None, max_rounds=50, what="samples",
                  around=None, scale_sigma=0.5):
    """``n`` boxes with ``lo < IoU(box, gt) < hi`` (bounds may be None), drawn around ``around`` (default gt)."""
    if gt[2] <= 0 or gt[3] <= 0:
        raise MiningError("ground-truth box has no area")
    around = gt if around is None else around
    got, have, drawn = [], 0, 0
    for _ in range(max_rounds):
        # later rounds size the draw from the acceptance rate seen so far
        rate = max(have / drawn, 1.0 / 64) if drawn else 1.0
        k = min(max(int(2 * (n - have) / rate), 64), 1 << 16)
        cand = gaussian_samples(around, k, rng, trans, scale_step, scale_sigma, frame_hw)
        drawn += k
        ov = iou_many(cand, gt)
        ok = _inside(cand, region)
        if lo is not None:
            ok &= ov > lo
        if hi is not None:
            ok &= ov < hi
        sel = cand[ok][: n - have]
        got.append(sel)
        have += len(sel)
        if have >= n:
            return np.concatenate(got)[:n]
    raise MiningError(f"could not mine {n} {what} around {tuple(gt)} (found {have})")


def mine_samples(frame_hw, gt, n_pos, n_neg, rng, cfg=MiningConfig(), region=None):
    """Positives with IoU > ``pos_iou`` and negatives with IoU < ``neg_iou``.

    Returns ``(pos [n_pos,4], neg [n_neg,4])``. ``region`` restricts box
    centres (e.g. to a search crop). Raises MiningError past the attempt cap.
    """
    gt = np.asarray(gt, dtype=np.float64)
    pos = sample_by_iou(gt, n_pos, rng, cfg.pos_iou, None, cfg.pos_trans, cfg.pos_scale_step,
                        frame_hw, region, cfg.max_rounds, "positives") if n_pos else np.zeros((0, 4))
    neg = sample_by_iou(gt, n_neg, rng, None, cfg.neg_iou, cfg.neg_trans, cfg.neg_scale_step,
                        frame_hw, region, cfg.max_rounds, "negatives") if n_neg else np.zeros((0, 4))
    return pos, neg


# ------------------------------------------------------------------ patches

def search_region(box, context=3.0):
    """Region ``context`` times the box size, centred on it."""
    x, y, w, h = (float(v) for v in box)
    cx, cy = x + w / 2.0, y + h / 2.0
    return np.array([cx - context * w / 2.0, cy - context * h / 2.0, context * w, context * h])


def _interp_matrix(start, length, n_src, n_out):
    """[n_out, n_src] bilinear weights sampling ``start..start+length`` (edge clamp)."""
    pos = start + (np.arange(n_out) + 0.5) * length / n_out - 0.5
    pos = np.clip(pos, 0, n_src - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, n_src - 1)
    frac = pos - lo
    m = np.zeros((n_out, n_src))
    rows = np.arange(n_out)
    np.add.at(m, (rows, lo), 1.0 - frac)
    np.add.at(m, (rows, hi), frac)
    return m


def crop_resample(image, region, out_size):
    """Bilinear crop of [C,H,W] ``image`` over ``region`` into [C,out,out] float32."""
    c, h, w = image.shape
    rx, ry, rw, rh = (float(v) for v in region)
    my = _interp_matrix(ry, rh, h, out_size).astype(np.float32)
    mx = _interp_matrix(rx, rw, w, out_size).astype(np.float32)
    img = np.asarray(image, dtype=np.float32)
    return np.einsum("oh,chw,pw->cop", my, img, mx, optimize=True).astype(np.float32)


def to_patch(boxes, region, out_size):
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    rx, ry, rw, rh = (float(v) for v in region)
    sx, sy = out_size / rw, out_size / rh
    return np.stack([(boxes[:, 0] - rx) * sx, (boxes[:, 1] - ry) * sy, boxes[:, 2] * sx, boxes[:, 3] * sy], axis=1)


def from_patch(boxes, region, out_size):
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    rx, ry, rw, rh = (float(v) for v in region)
    sx, sy = rw / out_size, rh / out_size
    return np.stack([boxes[:, 0] * sx + rx, boxes[:, 1] * sy + ry, boxes[:, 2] * sx, boxes[:, 3] * sy], axis=1)
