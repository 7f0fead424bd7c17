"""Online tracking: first-frame fc adaptation, candidate scoring, updates, box regression.

Each frame is cropped once around the previous result. The backbone (with
challenge branches) runs on that crop a single time, and every candidate is
pooled from the shared conv3 map with RoIAlign. Only fc4-fc6 and the box
regressor change during a run; the model handed in is copied, not mutated.
"""

from __future__ import annotations

import logging
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import geometry as geo
from .config import Config
from .model import preprocess
from .nn import ops
from .nn.optim import SGD
from .nn.tensor import Tensor, no_grad
from .synth import BBox

log = logging.getLogger(__name__)

TRACK_DOMAIN = "track"


# ------------------------------------------------------------- regression

def regression_targets(boxes, gt):
    """(dx, dy, dlog w, dlog h) that move each box onto ``gt``."""
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    g = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    bc, gc = geo.centers(b), geo.centers(g)
    return np.stack([(gc[:, 0] - bc[:, 0]) / b[:, 2], (gc[:, 1] - bc[:, 1]) / b[:, 3],
                     np.log(g[:, 2] / b[:, 2]), np.log(g[:, 3] / b[:, 3])], axis=1)


def apply_deltas(boxes, deltas, min_size=1.0):
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    c = geo.centers(b) + d[:, :2] * b[:, 2:]
    wh = np.maximum(b[:, 2:] * np.exp(np.clip(d[:, 2:], -1.0, 1.0)), min_size)
    return np.concatenate([c - wh / 2.0, wh], axis=1)


class BBoxRegressor:
    """Ridge regression from pooled features to box deltas.

    An unfit or degenerate regressor leaves boxes unchanged.
    """

    def __init__(self, lam=1000.0):
        self.lam = lam
        self.weight = None  # [D, 4]
        self.bias = None    # [4]
        self.n_train = 0

    def fit(self, feats, boxes, gt):
        x = np.asarray(feats, dtype=np.float64).reshape(len(boxes), -1)
        y = regression_targets(boxes, gt)
        # the intercept is not penalised: centre both sides, solve, recover it
        x_mean, y_mean = x.mean(axis=0), y.mean(axis=0)
        xc, yc = x - x_mean, y - y_mean
        n, d = xc.shape
        try:
            if d <= n:
                w = scipy.linalg.solve(xc.T @ xc + self.lam * np.eye(d), xc.T @ yc, assume_a="pos")
            else:
                w = xc.T @ scipy.linalg.solve(xc @ xc.T + self.lam * np.eye(n), yc, assume_a="pos")
        except (np.linalg.LinAlgError, ValueError):
            w = None
        if w is None or not np.all(np.isfinite(w)):
            log.warning("box regressor system is singular; using identity refinement")
            self.weight = self.bias = None
        else:
            self.weight, self.bias = w, y_mean - x_mean @ w
        self.n_train = n
        return self

    def predict(self, feats, boxes):
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        if self.weight is None:
            return boxes.copy()
        x = np.asarray(feats, dtype=np.float64).reshape(len(boxes), -1)
        return apply_deltas(boxes, x @ self.weight + self.bias)


# ------------------------------------------------------------------- state

@dataclass
class TrackerState:
    model: object
    cfg: Config
    flags: object
    rng: np.random.Generator
    box: np.ndarray
    frame_idx: int = 0
    regressor: BBoxRegressor = None
    long_pos: deque = None
    short_pos: deque = None
    short_neg: deque = None
    updates: list = field(default_factory=list)   # (frame_idx, "long"|"short")

    def store_sizes(self):
        return len(self.long_pos), len(self.short_pos), len(self.short_neg)


@dataclass
class FrameFeatures:
    region: np.ndarray
    feats: tuple


def frame_features(model, frame, box, cfg, flags):
    """One shared forward over the search crop centred on ``box``."""
    region = geo.search_region(box, cfg.context)
    s = model.cfg.input_size
    rgb = preprocess(geo.crop_resample(frame.rgb, region, s))
    t = preprocess(geo.crop_resample(frame.thermal, region, s))
    with no_grad():
        feats = model.features(rgb, t, flags)
    return FrameFeatures(region, feats)


def _patch_boxes(model, ff, boxes):
    """Boxes in patch coordinates with centres kept on the feature map."""
    pb = geo.to_patch(boxes, ff.region, model.cfg.input_size)
    limit = model.cfg.layer_out_size(3) * model.cfg.feature_stride - 1.0
    c = np.clip(geo.centers(pb), 0.0, limit)
    pb[:, :2] = c - pb[:, 2:] / 2.0
    return pb


def pooled(model, ff, boxes):
    """Concatenated pooled feature vectors [B, D] as numpy."""
    if len(boxes) == 0:
        return np.zeros((0, model.cfg.pooled_dim), np.float32)
    with no_grad():
        return model.pool(ff.feats, _patch_boxes(model, ff, boxes)).data


def pos_scores(model, vec, chunk=4096):
    out = []
    with no_grad():
        for i in range(0, len(vec), chunk):
            out.append(model.scores(Tensor(vec[i:i + chunk]), TRACK_DOMAIN).data[:, 1])
    return np.concatenate(out) if out else np.zeros(0, np.float32)


def train_fc(state, pos, neg, epochs, lr6, lr45):
    """fc4-fc6 SGD with hard-negative mining; one 32+96 minibatch per epoch by default."""
    cfg, model, rng = state.cfg, state.model, state.rng
    names = ["fc4.w", "fc4.b", "fc5.w", "fc5.b", f"fc6.{TRACK_DOMAIN}.w", f"fc6.{TRACK_DOMAIN}.b"]
    model.set_trainable(names)
    opt = SGD([(model.tensors(names[:4]), lr45), (model.tensors(names[4:]), lr6)], cfg.sgd())
    per_epoch = cfg.online_batches_per_epoch or max(1, int(np.ceil(len(pos) / cfg.batch_pos)))
    pos_order, neg_order = rng.permutation(len(pos)), rng.permutation(len(neg))
    pi = ni = 0

    def take(order, i, k, n):
        idx = [order[(i + j) % n] for j in range(k)]
        return np.array(idx), (i + k) % n

    for _ in range(epochs * per_epoch):
        p_idx, pi = take(pos_order, pi, cfg.batch_pos, len(pos))
        n_idx, ni = take(neg_order, ni, min(cfg.hard_neg_pool, len(neg)), len(neg))
        cand = neg[n_idx]
        if len(cand) > cfg.batch_neg:
            # hard negatives: the highest-scoring ones under the current model
            hard = np.argsort(-pos_scores(model, cand), kind="stable")[: cfg.batch_neg]
            cand = cand[hard]
        x = np.concatenate([pos[p_idx], cand])
        y = np.r_[np.ones(len(p_idx), np.int64), np.zeros(len(cand), np.int64)]
        opt.zero_grad()
        loss = ops.softmax_ce_loss(model.scores(Tensor(x), TRACK_DOMAIN, training=True, rng=rng), y)
        loss = ops.mul(loss, cfg.loss_scale(len(y)))
        loss.backward()
        opt.step()
    model.set_trainable([])


# -------------------------------------------------------------- operations

def fit_regressor(model, frame, gt, cfg: Config, flags, rng):
    """Fit the box regressor on first-frame boxes drawn as tracking draws them.

    During tracking the search crop is centred on the previous result, not on
    the target, so the training crops are centred on shifted and rescaled
    copies of ``gt`` and the boxes in each are sampled like candidates around
    that copy. Boxes overlapping ``gt`` by more than ``bbreg_iou`` are kept.
    """
    scales = cfg.bbreg_scales()
    counts = [len(a) for a in np.array_split(np.arange(cfg.bbreg_samples), len(scales))]
    c = geo.centers(gt)[0]
    feats, boxes = [], []
    for f, n in zip(scales, counts):
        wh = gt[2:] * f
        shift = rng.standard_normal(2) * cfg.bbreg_jitter * gt[2:].mean()
        base = np.r_[c + shift - wh / 2.0, wh]
        ff = frame_features(model, frame, base, cfg, flags)
        try:
            b = geo.sample_by_iou(gt, n, rng, cfg.bbreg_iou, None, cfg.trans_sigma, cfg.scale_step, frame.size,
                                  ff.region, cfg.mining().max_rounds, "regression boxes", base, cfg.scale_sigma)
        except geo.MiningError as exc:
            log.info("regression crop at scale %g skipped: %s", f, exc)
            continue
        feats.append(pooled(model, ff, b))
        boxes.append(b)
    reg = BBoxRegressor(cfg.bbreg_lambda)
    if not boxes:
        log.warning("no regression boxes could be mined; using identity refinement")
        return reg
    return reg.fit(np.concatenate(feats), np.concatenate(boxes), gt)


def init_first_frame(frame, gt, model, cfg: Config, flags=None, seed=0):
    """Adapt a copy of ``model`` to the target in the first frame."""
    flags = flags or model.flags
    model = model.copy()
    model.flags = flags
    model.add_head(TRACK_DOMAIN, seed)
    rng = np.random.default_rng([seed, 4242])
    gt = np.asarray(gt, dtype=np.float64)
    ff = frame_features(model, frame, gt, cfg, flags)
    mining = cfg.mining()
    pos, neg = geo.mine_samples(frame.size, gt, cfg.init_pos, cfg.init_neg, rng, mining, ff.region)
    pos_f, neg_f = pooled(model, ff, pos), pooled(model, ff, neg)

    regressor = fit_regressor(model, frame, gt, cfg, flags, rng)

    state = TrackerState(model, cfg, flags, rng, gt.copy(), 0, regressor,
                         deque(maxlen=cfg.long_term_frames), deque(maxlen=cfg.short_term_frames),
                         deque(maxlen=cfg.short_term_frames))
    train_fc(state, pos_f, neg_f, cfg.init_epochs, cfg.init_lr_fc6, cfg.init_lr_fc45)
    state.long_pos.append(pos_f[: cfg.update_pos])
    state.short_pos.append(pos_f[: cfg.update_pos])
    state.short_neg.append(neg_f[: cfg.update_neg])
    return state


def track_frame(state, frame):
    """Score Gaussian candidates around the last result; returns (BBox, score)."""
    cfg, model = state.cfg, state.model
    state.frame_idx += 1
    # density order: among equal scores the smallest move from the last result wins
    cand = geo.gaussian_samples(state.box, cfg.n_candidates, state.rng, cfg.trans_sigma,
                                cfg.scale_step, cfg.scale_sigma, frame.size, ordered=True)
    ff = frame_features(model, frame, state.box, cfg, state.flags)
    vec = pooled(model, ff, cand)
    scores = pos_scores(model, vec)
    best = int(np.argmax(scores))  # first index wins ties
    k = min(cfg.top_k, len(scores))
    score = float(np.mean(np.sort(scores)[::-1][:k]))
    box = cand[best].copy()
    # the unrefined candidate seeds the next frame so regression errors do not compound
    state.box = box
    if score > cfg.score_threshold:
        box = state.regressor.predict(vec[best:best + 1], box[None])[0]
        box = geo.clip_boxes(box, frame.size, min_size=1.0)[0]
    return BBox(*(float(v) for v in box)), score


def _update(state, kind):
    if kind == "long":
        pos, neg = list(state.long_pos), list(state.short_neg)
    else:
        pos, neg = list(state.short_pos), list(state.short_neg)
    if not pos or not neg:
        log.warning("frame %d: %s-term update skipped, sample store empty", state.frame_idx, kind)
        return
    cfg = state.cfg
    train_fc(state, np.concatenate(pos), np.concatenate(neg), cfg.update_epochs,
             cfg.update_lr_fc6, cfg.update_lr_fc45)
    state.updates.append((state.frame_idx, kind))


def update_model(state, frame, result, score):
    """Collect samples on success; long-term update on schedule, short-term on failure."""
    cfg = state.cfg
    success = score > cfg.score_threshold
    if success:
        box = np.asarray(result, dtype=np.float64)
        ff = frame_features(state.model, frame, box, cfg, state.flags)
        try:
            pos, neg = geo.mine_samples(frame.size, box, cfg.update_pos, cfg.update_neg, state.rng,
                                        cfg.mining(), ff.region)
        except geo.MiningError as exc:
            log.info("frame %d: %s", state.frame_idx, exc)
        else:
            pf = pooled(state.model, ff, pos)
            state.long_pos.append(pf)
            state.short_pos.append(pf)
            state.short_neg.append(pooled(state.model, ff, neg))
    if not success:
        _update(state, "short")
    elif state.frame_idx % cfg.long_term_interval == 0:
        _update(state, "long")
    return state


@dataclass
class RunResult:
    name: str
    boxes: np.ndarray   # [N,4]
    scores: np.ndarray  # [N]
    fps: float
    variant: str = "full"


def run_sequence(model, seq, cfg: Config, flags=None, seed=0):
    """One-pass evaluation: initialise on frame 0 ground truth, then never reset."""
    flags = flags or model.flags
    frames = seq.frames
    gt0 = np.asarray(frames[0].gt_rgb, dtype=np.float64)
    state = init_first_frame(frames[0], gt0, model, cfg, flags, seed)
    boxes, scores = [gt0], [float(cfg.score_threshold) + 1.0]
    t0 = time.perf_counter()
    for fr in frames[1:]:
        box, score = track_frame(state, fr)
        update_model(state, fr, box, score)
        boxes.append(np.array(box))
        scores.append(score)
    dt = time.perf_counter() - t0
    fps = (len(frames) - 1) / dt if dt > 0 else float("inf")
    return RunResult(seq.name, np.array(boxes), np.array(scores), fps, flags.mode.value)


def write_results(path, boxes, scores):
    """One ``x,y,w,h,score`` line per frame."""
    with open(path, "w") as fh:
        for b, s in zip(boxes, scores):
            fh.write("%.2f,%.2f,%.2f,%.2f,%.4f\n" % (b[0], b[1], b[2], b[3], s))


def read_results(path):
    boxes, scores = [], []
    with open(path) as fh:
        for n, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.strip().split(",")
            if len(parts) != 5:
                raise ValueError(f"{path}:{n}: expected x,y,w,h,score")
            vals = [float(p) for p in parts]
            boxes.append(vals[:4])
            scores.append(vals[4])
    return np.array(boxes, dtype=np.float64).reshape(-1, 4), np.array(scores, dtype=np.float64)
