import numpy as np
import pytest

from catrack import backbone as bb
from catrack import challenge as ch
from catrack.challenge import ChallengeLabel, Mode, Routing, VariantFlags
from catrack.model import CatModel, infer_config, preprocess
from catrack.nn.tensor import ShapeError, Tensor, no_grad

from conftest import TINY


def inputs(rng, n=1, cfg=TINY):
    s = cfg.input_size
    return (preprocess(rng.random((n, 3, s, s))), preprocess(rng.random((n, 1, s, s))))


def test_layer_sizes_and_stride():
    assert [bb.FULL.layer_out_size(i) for i in (1, 2, 3)] == [26, 13, 13]
    assert bb.FULL.feature_stride == 8
    assert bb.FULL.pooled_dim == 2 * 512 * 9


def test_full_parameter_counts_by_hand():
    c1 = 3 * 96 * 49 + 96
    c2 = 96 * 256 * 25 + 256
    c3 = 256 * 512 * 9 + 512
    assert bb.FULL.stream_param_count() == c1 + c2 + c3 == 1_809_024
    assert ch.branch_param_count(bb.FULL, 1) == (3 * 8 * 9 + 8) + (8 * 96 * 9 + 96) == 7_232
    assert ch.branch_param_count(bb.FULL, 2) == 96 * 256 * 9 + 256 == 221_440
    assert ch.branch_param_count(bb.FULL, 3) == 256 * 512 + 512 == 131_584
    assert ch.aggregation_param_count(bb.FULL, 1) == 5 * 96 * 96 + 96 == 46_176


def test_input_checks(rng):
    m = CatModel.create(TINY, seed=0)
    rgb, t = inputs(rng)
    with pytest.raises(ShapeError):
        m.features(rgb[:, :, :50, :50], t[:, :, :50, :50])
    with pytest.raises(ShapeError):
        m.features(rgb, t[:, :, :-1, :-1])


def test_branch_outputs_match_backbone_shapes(rng):
    m = CatModel.create(TINY, seed=0)
    keep = {}
    with no_grad():
        m.features(*inputs(rng), keep=keep)
    for (layer, name, stream), y in keep.items():
        assert y.shape == keep[(layer, "backbone", stream)].shape


def test_shared_branch_has_one_parameter_set():
    m = CatModel.create(TINY, seed=0)
    assert "branch.l1.FM.conv1.w" in m.params
    assert "branch.l1.IV.rgb.conv1.w" in m.params and "branch.l1.IV.t.conv1.w" in m.params
    assert not any(k.startswith("branch.l1.FM.rgb") for k in m.params)


def test_guide_scalar_oracle():
    one = np.ones((1, 1, 1, 1))
    out = ch.guide(np.full((1, 1, 1, 1), 2.0), one, one, np.zeros(1), one, np.zeros(1)).data
    assert abs(out.item() - (1 + (1 / (1 + np.exp(-2.0))) * 2)) < 1e-6


def test_guide_modes(rng):
    x, z = rng.standard_normal((1, 3, 2, 2)), rng.standard_normal((1, 3, 2, 2))
    w1, w2 = rng.standard_normal((3, 3, 1, 1)), rng.standard_normal((3, 3, 1, 1))
    b1, b2 = rng.standard_normal(3), rng.standard_normal(3)
    gamma = np.einsum("oi,nihw->nohw", w1[:, :, 0, 0], x) + b1[None, :, None, None]
    np.testing.assert_allclose(ch.guide(x, z, w1, b1, w2, b2, Mode.NO_GATE).data, z + gamma, rtol=1e-5)
    np.testing.assert_allclose(ch.guide(x, z, w1, b1, w2, b2, Mode.DIRECT_ADD).data, z + x, rtol=1e-6)
    np.testing.assert_array_equal(ch.guide(x, z, w1, b1, w2, b2, Mode.NO_GUIDANCE).data, z)
    # FiLM with zero input and zero bias leaves z unchanged
    np.testing.assert_allclose(ch.guide(np.zeros_like(x), z, w1, np.zeros(3), w2, b2, Mode.FILM).data, z, rtol=1e-6)
    with pytest.raises(ShapeError):
        ch.guide(x[:, :2], z, w1, b1, w2, b2)


def test_aggregate_wrong_branch_count(rng):
    maps = [Tensor(rng.standard_normal((1, 2, 3, 3))) for _ in range(4)]
    with pytest.raises(ShapeError):
        ch.aggregate(maps, rng.standard_normal((2, 10, 1, 1)), np.zeros(2))


def test_zero_branches_and_aggregation_equal_baseline(rng):
    m = CatModel.create(TINY, seed=1)
    for k in m.names("branch") + m.names("agg"):
        m.params[k].data[...] = 0
    x = inputs(rng)
    with no_grad():
        full = m.features(*x, VariantFlags(Mode.FULL))
        base = m.features(*x, VariantFlags(Mode.BASELINE))
    for a, b in zip(full, base):
        np.testing.assert_allclose(a.data, b.data, atol=1e-6)


def test_active_layers_select_branches(rng):
    m = CatModel.create(TINY, seed=1)
    x = inputs(rng)
    keep = {}
    with no_grad():
        m.features(*x, VariantFlags.parse("full", "2"), keep=keep)
    assert {k[0] for k in keep if k[1] != "backbone"} == {2}
    with pytest.raises(ValueError):
        VariantFlags.parse("full", "1,4")


def test_baseline_variant_on_branchless_checkpoint(rng, tmp_path):
    m = CatModel.create(TINY, seed=0, with_branches=False)
    m.save(tmp_path / "b.ckpt")
    back = CatModel.load(tmp_path / "b.ckpt")
    assert infer_config(back.state()).channels == TINY.channels
    with pytest.raises(KeyError):
        back.features(*inputs(rng), VariantFlags(Mode.FULL))
    with no_grad():
        back.features(*inputs(rng), VariantFlags(Mode.BASELINE))


def test_classify_batched_equals_single(rng):
    m = CatModel.create(TINY, n_domains=2, seed=0)
    vec = rng.standard_normal((6, TINY.pooled_dim)).astype(np.float32)
    with no_grad():
        batched = m.scores(Tensor(vec), 1).data
        single = np.concatenate([m.scores(Tensor(vec[i:i + 1]), 1).data for i in range(6)])
    np.testing.assert_allclose(batched, single, rtol=1e-5, atol=1e-6)
    with pytest.raises(KeyError):
        m.scores(Tensor(vec), 7)


def test_stage_routing_uses_one_branch(rng):
    m = CatModel.create(TINY, seed=0)
    keep = {}
    with no_grad():
        m.features(*inputs(rng), routing=Routing((ChallengeLabel.SV,), False, False), keep=keep)
    assert {k[1] for k in keep} == {"backbone", "SV"}


def test_heatmap_and_dump(tmp_path, rng):
    assert ch.heatmap_bytes(np.ones((2, 3, 4))).endswith(bytes(12))
    m = CatModel.create(TINY, seed=0)
    paths = ch.dump_activations(*inputs(rng), m, tmp_path / "act")
    names = {p.name for p in paths}
    assert "l1_FM_rgb.pgm" in names and "l3_TC_t.pgm" in names and "l2_backbone_rgb.pgm" in names
    assert all(p.read_bytes().startswith(b"P5") for p in paths)


def test_challenge_label_parse():
    assert ChallengeLabel.parse("occ") is ChallengeLabel.OCC
    with pytest.raises(ValueError):
        ChallengeLabel.parse("XX")
