import numpy as np
import pytest

from catrack import geometry as geo
from catrack import tracker as tk
from catrack.model import CatModel
from catrack.synth import FramePair, Sequence, SequenceSpec, render
from catrack.training import train_all


def make_seq(length=12, velocity=(0.0, 0.0), seed=1):
    spec = SequenceSpec(seed=seed, length=length, velocity=velocity, start=(50.0, 50.0), clutter=2)
    frames = [FramePair(rgb, t, box, box, tags) for rgb, t, box, tags in render(spec)]
    return Sequence("static", frames)


@pytest.fixture(scope="module")
def trained(tiny_dataset, tiny_cfg):
    _, ds = tiny_dataset
    model, _, _ = train_all(ds, tiny_cfg)
    return model


@pytest.fixture(scope="module")
def static_seq():
    return make_seq()


# ------------------------------------------------------------ regressor

def test_regressor_identity_pairs(rng):
    feats = rng.normal(size=(200, 10))
    boxes = np.c_[rng.uniform(0, 50, (200, 2)), rng.uniform(10, 30, (200, 2))]
    reg = tk.BBoxRegressor(1000.0).fit(feats, boxes, boxes)
    np.testing.assert_allclose(reg.predict(feats, boxes), boxes, atol=1e-9)


def test_regressor_learns_constant_shift(rng):
    feats = rng.normal(size=(1000, 20))
    boxes = np.c_[rng.uniform(0, 50, (1000, 2)), np.full((1000, 2), 20.0)]
    reg = tk.BBoxRegressor(1000.0).fit(feats, boxes, boxes + [2, 0, 0, 0])
    test = np.c_[rng.uniform(0, 50, (50, 2)), np.full((50, 2), 20.0)]
    out = reg.predict(rng.normal(size=(50, 20)), test)
    np.testing.assert_allclose(out - test, np.tile([2.0, 0, 0, 0], (50, 1)), atol=1e-6)


def test_regressor_singular_is_identity(rng):
    boxes = np.c_[rng.uniform(0, 50, (5, 2)), rng.uniform(10, 30, (5, 2))]
    reg = tk.BBoxRegressor(0.0).fit(np.zeros((5, 8)), boxes, boxes + 3)
    assert reg.weight is None
    np.testing.assert_array_equal(reg.predict(np.zeros((5, 8)), boxes), boxes)
    unfit = tk.BBoxRegressor()
    np.testing.assert_array_equal(unfit.predict(np.ones((5, 8)), boxes), boxes)


def test_refined_box_keeps_positive_area(rng):
    boxes = np.c_[rng.uniform(0, 50, (100, 2)), rng.uniform(0.5, 30, (100, 2))]
    out = tk.apply_deltas(boxes, rng.normal(0, 50, (100, 4)))
    assert (out[:, 2:] > 0).all()


# --------------------------------------------------------------- tracker

def test_init_contract(trained, static_seq, tiny_cfg):
    cfg = tiny_cfg.update({"bbreg_samples": 1000, "init_epochs": 30})
    before = {g: trained.digest(g) for g in ("backbone", "branch", "guide", "agg", "fc")}
    fr, gt = static_seq.frames[0], np.array(static_seq.frames[0].gt_rgb)
    state = tk.init_first_frame(fr, gt, trained, cfg, seed=0)
    assert state.regressor.n_train == 1000
    for g in ("backbone", "branch", "guide", "agg"):
        assert state.model.digest(g) == before[g]
    assert trained.digest("fc") == before["fc"]  # the caller's model is not touched
    assert state.model.digest(names=["fc4.w"]) != trained.digest(names=["fc4.w"])
    ff = tk.frame_features(state.model, fr, gt, cfg, state.flags)
    far = gt + [2 * max(gt[2:]), 0, 0, 0]
    s = tk.pos_scores(state.model, tk.pooled(state.model, ff, np.stack([gt, far])))
    assert s[0] > s[1]


def test_identical_candidates_return_that_candidate(trained, static_seq, tiny_cfg):
    cfg = tiny_cfg.update({"trans_sigma": 0.0, "scale_sigma": 0.0})
    state = tk.init_first_frame(static_seq.frames[0], np.array(static_seq.frames[0].gt_rgb), trained, cfg)
    state.regressor = tk.BBoxRegressor()
    start = state.box.copy()
    box, _ = tk.track_frame(state, static_seq.frames[1])
    np.testing.assert_allclose(np.array(box), start, atol=1e-9)



def test_tied_scores_pick_the_smallest_move(trained, static_seq, tiny_cfg):
    state = tk.init_first_frame(static_seq.frames[0], np.array(static_seq.frames[0].gt_rgb), trained, tiny_cfg)
    state.regressor = tk.BBoxRegressor()
    state.model.params[f"fc6.{tk.TRACK_DOMAIN}.w"].data[...] = 0.0  # every candidate scores the same
    start = state.box.copy()
    rng = np.random.default_rng(0)
    rng.bit_generator.state = state.rng.bit_generator.state
    cand = geo.gaussian_samples(start, tiny_cfg.n_candidates, rng, tiny_cfg.trans_sigma, tiny_cfg.scale_step,
                                tiny_cfg.scale_sigma, static_seq.frames[1].size, ordered=True)
    box, _ = tk.track_frame(state, static_seq.frames[1])
    np.testing.assert_allclose(np.array(box), cand[0])
    moved = np.abs(geo.centers(cand) - geo.centers(start)).sum(axis=1)
    assert moved[0] <= np.median(moved)


def test_regressor_corrects_offset_crops(trained, static_seq, tiny_cfg):
    """Boxes off the target, each scored in a crop centred on itself as tracking does, move closer."""
    fr, gt = static_seq.frames[1], np.array(static_seq.frames[1].gt_rgb)
    state = tk.init_first_frame(static_seq.frames[0], np.array(static_seq.frames[0].gt_rgb), trained, tiny_cfg)
    c = geo.centers(gt)[0]
    before, after = [], []
    for f, dx, dy in [(0.85, 1, 0), (0.9, -1, 1), (1.12, 0, -1), (1.2, 1, 1), (1.0, 2, -1), (0.95, -2, 0)]:
        wh = gt[2:] * f
        box = np.r_[c + [dx, dy] - wh / 2.0, wh]
        ff = tk.frame_features(state.model, fr, box, tiny_cfg, state.flags)
        out = state.regressor.predict(tk.pooled(state.model, ff, box[None]), box[None])
        before.append(geo.iou(box, gt))
        after.append(geo.iou(out[0], gt))
    assert np.mean(after) > np.mean(before)

def test_track_frame_deterministic(trained, static_seq, tiny_cfg):
    out = []
    for _ in range(2):
        state = tk.init_first_frame(static_seq.frames[0], np.array(static_seq.frames[0].gt_rgb), trained,
                                    tiny_cfg, seed=4)
        out.append(tk.track_frame(state, static_seq.frames[1]))
    assert out[0] == out[1]


def test_update_schedule(trained, static_seq, tiny_cfg):
    gt0 = np.array(static_seq.frames[0].gt_rgb)
    state = tk.init_first_frame(static_seq.frames[0], gt0, trained, tiny_cfg)
    for i in range(1, 10):
        state.frame_idx = i
        tk.update_model(state, static_seq.frames[i], gt0, 1.0)
    assert state.updates == []
    state.frame_idx = 10
    tk.update_model(state, static_seq.frames[10], gt0, 1.0)
    assert state.updates == [(10, "long")]

    state = tk.init_first_frame(static_seq.frames[0], gt0, trained, tiny_cfg)
    for i in range(1, 8):
        state.frame_idx = i
        tk.update_model(state, static_seq.frames[i], gt0, -0.1 if i == 7 else 1.0)
    assert state.updates == [(7, "short")]


def test_stores_bounded_over_long_run(trained, static_seq, tiny_cfg):
    cfg = tiny_cfg.update({"update_epochs": 1})
    gt0 = np.array(static_seq.frames[0].gt_rgb)
    state = tk.init_first_frame(static_seq.frames[0], gt0, trained, cfg)
    for i in range(1, 501):
        state.frame_idx = i
        tk.update_model(state, static_seq.frames[i % len(static_seq)], gt0, 1.0 if i % 13 else -1.0)
        lp, sp, sn = state.store_sizes()
        assert lp <= 100 and sp <= 20 and sn <= 20
    assert state.store_sizes() == (100, 20, 20)
    assert sum(k == "long" for _, k in state.updates) > 0 and sum(k == "short" for _, k in state.updates) > 0


def test_static_target_smoke(trained, tiny_cfg):
    seq = make_seq(length=15)
    res = tk.run_sequence(trained, seq, tiny_cfg.update({"init_epochs": 30}), seed=0)
    assert res.boxes.shape == (15, 4) and res.fps > 0
    assert geo.iou_many(res.boxes, seq.gt()).mean() > 0.5


def test_results_roundtrip(tmp_path, rng):
    boxes = np.round(rng.uniform(1, 90, (6, 4)), 2)
    scores = np.round(rng.normal(size=6), 4)
    tk.write_results(tmp_path / "r.txt", boxes, scores)
    b, s = tk.read_results(tmp_path / "r.txt")
    np.testing.assert_allclose(b, boxes, atol=1e-9)
    np.testing.assert_allclose(s, scores, atol=1e-9)
    (tmp_path / "bad.txt").write_text("1,2,3\n")
    with pytest.raises(ValueError):
        tk.read_results(tmp_path / "bad.txt")
