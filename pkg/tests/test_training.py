import csv

import numpy as np
import pytest

from catrack import training as tr
from catrack.challenge import BRANCH_ORDER, ChallengeLabel, Mode, Routing, VariantFlags
from catrack.model import CatModel
from catrack.nn import checkpoint

GROUPS = ("backbone", "branch", "guide", "agg", "fc")


def file_digests(model, path):
    """Per-group sha256 of the parameters as serialized in a checkpoint file."""
    model.save(path)
    state = checkpoint.load(path)
    return {g: checkpoint.digest(state, model.names(g)) for g in GROUPS}


@pytest.fixture
def fresh(tiny_dataset, tiny_cfg):
    _, ds = tiny_dataset
    return ds, CatModel.create(tiny_cfg.backbone(), n_domains=len(ds), seed=0)


def test_stage_plans_follow_config(tiny_cfg):
    p1 = tr.StagePlan.for_stage("I", tiny_cfg)
    assert p1.lrs == {"branch": 0.001, "fc": 0.0005}
    assert set(p1.frozen) == {"backbone", "guide", "agg"}
    assert tuple(p1.challenges) == BRANCH_ORDER
    p2 = tr.StagePlan.for_stage("II", tiny_cfg)
    assert p2.lrs == {"guide": 0.001}
    assert {c.value for c in p2.challenges} == {"IV", "TC"}
    p3 = tr.StagePlan.for_stage("III", tiny_cfg)
    assert p3.lrs == {"agg": 0.0005, "fc": 0.0005, "backbone": 0.0001}
    assert set(p3.frozen) == {"branch", "guide"}
    assert p3.epochs == max(1, round(1000 * tiny_cfg.epoch_scale))
    with pytest.raises(ValueError):
        tr.StagePlan.for_stage("IV", tiny_cfg)


def test_freezing_contract_through_all_stages(fresh, tiny_cfg, tmp_path):
    ds, model = fresh
    d0 = file_digests(model, tmp_path / "0.ckpt")
    branch0 = {k: model.params[k].data.copy() for k in model.names("branch")}

    tr.train_stage1(ds, model, tiny_cfg)
    d1 = file_digests(model, tmp_path / "1.ckpt")
    assert d1["backbone"] == d0["backbone"]
    assert d1["guide"] == d0["guide"] and d1["agg"] == d0["agg"]
    assert d1["branch"] != d0["branch"] and d1["fc"] != d0["fc"]
    for label in BRANCH_ORDER:
        names = tr.challenge_names(model, "branch", label)
        assert names and any(not np.array_equal(model.params[k].data, branch0[k]) for k in names), label

    tr.train_stage2(ds, model, tiny_cfg)
    d2 = file_digests(model, tmp_path / "2.ckpt")
    assert d2["guide"] != d1["guide"]
    assert all(d2[g] == d1[g] for g in GROUPS if g != "guide")

    tr.train_stage3(ds, model, tiny_cfg)
    d3 = file_digests(model, tmp_path / "3.ckpt")
    assert d3["branch"] == d2["branch"] and d3["guide"] == d2["guide"]
    assert d3["backbone"] != d2["backbone"] and d3["agg"] != d2["agg"]


def test_stage1_isolation_zero_gradient(fresh, tiny_cfg):
    ds, model = fresh
    rng = np.random.default_rng(5)
    for label in BRANCH_ORDER:
        sel = tr.select_frames(ds, label)
        d = next(i for i, s in enumerate(sel) if s)
        batch = tr.frame_batch([ds[d].frames[i] for i in sel[d][:2]], tiny_cfg, model.cfg.input_size, rng)
        model.set_trainable(model.names("branch"))
        routing = Routing(branches=(label,), guidance=False, aggregate=False)
        loss, _ = tr.batch_loss(model, batch, d, tiny_cfg, VariantFlags(Mode.FULL), routing, rng)
        loss.backward()
        own = set(tr.challenge_names(model, "branch", label))
        assert any(np.abs(model.params[k].grad).sum() > 0 for k in own if model.params[k].grad is not None)
        for k in model.names("branch"):
            if k not in own:
                g = model.params[k].grad
                assert g is None or not np.any(g), k
        model.set_trainable([])


def test_empty_challenge_subset_names_challenge(tiny_dataset, tiny_cfg):
    _, ds = tiny_dataset
    only_iv = [s for s in ds if any(ChallengeLabel.IV in t for t in s.tags())][:1]
    assert not any(ChallengeLabel.OCC in t for t in only_iv[0].tags())
    model = CatModel.create(tiny_cfg.backbone(), n_domains=1, seed=0)
    with pytest.raises(tr.StageError, match="FM"):
        tr.train_stage1(only_iv, model, tiny_cfg)
    with pytest.raises(tr.StageError, match="TC"):
        tr.train_stage2(only_iv, model, tiny_cfg)


def test_stage2_rejects_shared_challenge(fresh, tiny_cfg):
    ds, model = fresh
    with pytest.raises(tr.StageError):
        tr.train_stage2(ds, model, tiny_cfg, challenges=[ChallengeLabel.FM])


def test_domain_count_mismatch(tiny_dataset, tiny_cfg):
    _, ds = tiny_dataset
    model = CatModel.create(tiny_cfg.backbone(), n_domains=2, seed=0)
    with pytest.raises(tr.StageError):
        tr.train_all(ds, tiny_cfg, stages=("I",), model=model)


def test_train_all_deterministic_and_logged(tiny_dataset, tiny_cfg, tmp_path):
    _, ds = tiny_dataset
    m1, b1, rows = tr.train_all(ds, tiny_cfg)
    m2, b2, _ = tr.train_all(ds, tiny_cfg)
    assert m1.digest() == m2.digest() and b1.digest() == b2.digest()
    assert not b1.has_branches and b1.names("fc") == m1.names("fc")
    stages = {r["stage"].split(":")[0] for r in rows}
    assert stages == {"pretrain", "I", "II", "III"}
    tr.write_log(tmp_path / "log.csv", rows)
    with open(tmp_path / "log.csv") as fh:
        back = list(csv.DictReader(fh))
    assert list(back[0]) == ["epoch", "stage", "loss", "accuracy"] and len(back) == len(rows)


def test_pretrain_loss_decreases(tiny_dataset, tiny_cfg):
    _, ds = tiny_dataset
    cfg = tiny_cfg.update({"epoch_scale": 0.03})
    finals = []
    for seed in (0, 1, 2):
        rows = []
        model = CatModel.create(cfg.backbone(), n_domains=len(ds), seed=seed)
        tr.pretrain(ds, model, cfg.update({"seed": seed}), rows)
        loss = [r["loss"] for r in rows]
        finals.append(np.mean(loss[-5:]) < np.mean(loss[:5]))
    assert sum(finals) >= 2


def test_paired_stage_evaluations(tiny_dataset, tiny_cfg):
    """Guidance helps on IV frames after Stage II; Stage III accuracy >= Stage I.

    Both are median-of-3-seeds paired differences, evaluated on freshly mined
    crops and boxes (fixed evaluation seed, identical batches for both arms).
    """
    _, ds = tiny_dataset
    cfg = tiny_cfg.update({"epoch_scale": 0.02})
    guide_gain, acc_gain = [], []
    for seed in (0, 1, 2):
        c = cfg.update({"seed": seed})
        m = CatModel.create(c.backbone(), n_domains=len(ds), seed=seed)
        tr.pretrain(ds, m, c)
        tr.train_stage1(ds, m, c)
        every = tr.select_frames(ds)
        _, acc1 = tr.evaluate(m, ds, c, every, VariantFlags(Mode.FULL),
                              Routing(guidance=False, aggregate=False), seed=9)
        tr.train_stage2(ds, m, c)
        iv = tr.select_frames(ds, ChallengeLabel.IV)
        route = Routing((ChallengeLabel.IV,), guidance=True, aggregate=False)
        on, _ = tr.evaluate(m, ds, c, iv, VariantFlags(Mode.FULL), route, seed=9)
        off, _ = tr.evaluate(m, ds, c, iv, VariantFlags(Mode.NO_GUIDANCE), route, seed=9)
        tr.train_stage3(ds, m, c)
        _, acc3 = tr.evaluate(m, ds, c, every, VariantFlags(Mode.FULL), seed=9)
        guide_gain.append(off - on)
        acc_gain.append(acc3 - acc1)
    assert np.median(guide_gain) >= 0, guide_gain
    assert np.median(acc_gain) >= 0, acc_gain


def test_stage1_loss_decreases_per_challenge(tiny_dataset, tiny_cfg):
    _, ds = tiny_dataset
    cfg = tiny_cfg.update({"epoch_scale": 0.03})
    drops = {label.value: [] for label in BRANCH_ORDER}
    for seed in (0, 1, 2):
        rows = []
        c = cfg.update({"seed": seed})
        tr.train_stage1(ds, CatModel.create(c.backbone(), n_domains=len(ds), seed=seed), c, rows)
        for tag in drops:
            loss = [r["loss"] for r in rows if r["stage"] == f"I:{tag}"]
            drops[tag].append(np.mean(loss[:5]) - np.mean(loss[-5:]))
    assert all(np.median(v) > 0 for v in drops.values()), drops
