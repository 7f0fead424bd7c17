import numpy as np
import pytest

from catrack.nn import checkpoint
from catrack.nn.optim import SGD, SgdConfig, sgd_step
from catrack.nn.tensor import NumericError, Tensor


def test_sgd_step_matches_hand_computation():
    p = np.array([1.0, -2.0])
    v = np.array([0.5, 0.0])
    g = np.array([0.3, 0.4])  # norm 0.5, below the clip
    cfg = SgdConfig(lr=0.1, momentum=0.9, weight_decay=0.01, grad_clip=10)
    norm = sgd_step([p], [g], [v], cfg)
    v_ref = 0.9 * np.array([0.5, 0.0]) - 0.1 * (g + 0.01 * np.array([1.0, -2.0]))
    np.testing.assert_allclose(v, v_ref)
    np.testing.assert_allclose(p, np.array([1.0, -2.0]) + v_ref)
    assert abs(norm - 0.5) < 1e-12


def test_global_norm_clipping():
    p = [np.zeros(2), np.zeros(1)]
    v = [np.zeros(2), np.zeros(1)]
    g = [np.array([30.0, 0.0]), np.array([40.0])]  # joint norm 50
    sgd_step(p, g, v, SgdConfig(lr=1.0, momentum=0.0, weight_decay=0.0, grad_clip=10))
    np.testing.assert_allclose(np.concatenate(p), [-6.0, 0.0, -8.0])


def test_non_finite_gradient_raises():
    with pytest.raises(NumericError):
        sgd_step([np.zeros(1)], [np.array([np.nan])], [np.zeros(1)], SgdConfig())


def test_config_validation():
    for bad in ({"lr": 0}, {"momentum": 1.0}, {"weight_decay": -1}, {"grad_clip": 0}):
        with pytest.raises(ValueError):
            SgdConfig(**bad)


def test_sgd_groups_use_own_lr():
    a = Tensor(np.ones(1), requires_grad=True)
    b = Tensor(np.ones(1), requires_grad=True)
    opt = SGD([([a], 0.1), ([b], 0.01)], SgdConfig(momentum=0.0, weight_decay=0.0))
    a.grad, b.grad = np.ones(1), np.ones(1)
    opt.step()
    np.testing.assert_allclose([a.data[0], b.data[0]], [0.9, 0.99], rtol=1e-6)


def test_checkpoint_round_trip_bitwise(tmp_path, rng):
    params = {"a.w": rng.standard_normal((3, 2, 1, 1)).astype(np.float32), "b": np.float32(rng.standard_normal(4))}
    path = tmp_path / "m.ckpt"
    checkpoint.save(path, params)
    back = checkpoint.load(path)
    assert list(back) == list(params)
    for k in params:
        assert back[k].tobytes() == np.asarray(params[k], np.float32).tobytes()
    assert checkpoint.dumps(back) == path.read_bytes()


def test_checkpoint_rejects_bad_input(tmp_path):
    blob = checkpoint.dumps({"x": np.ones((2, 2), np.float32)})
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(b"NOTACKPT" + blob[8:])
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(blob[:-3])


def test_digest_tracks_bytes(rng):
    params = {"a": np.ones(3, np.float32), "b": np.zeros(2, np.float32)}
    d0 = checkpoint.digest(params, ["a"])
    params["b"][0] = 1
    assert checkpoint.digest(params, ["a"]) == d0
    params["a"][0] = 2
    assert checkpoint.digest(params, ["a"]) != d0
