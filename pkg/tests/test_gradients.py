"""Finite-difference checks of every differentiable op (double precision)."""

import numpy as np
import pytest

from catrack.challenge import Mode, guide
from catrack.nn import ops
from catrack.nn.gradcheck import grad_check, rel_error
from catrack.nn.ops import ConvSpec

TOL = 1e-4


def _away_from_kinks(a, margin=1e-2):
    """Nudge values away from 0 so ReLU/max are differentiable at the probes."""
    return np.where(np.abs(a) < margin, margin * np.sign(a + 1e-12) * 2, a)


CASES = {
    "conv2d": (lambda t: ops.conv2d(t[0], t[1], t[2], ConvSpec(2, 3, 3, 3, stride=2, padding=1)),
               lambda r: [r.standard_normal((1, 2, 5, 5)), r.standard_normal((3, 2, 3, 3)), r.standard_normal(3)]),
    "conv2d_dilated": (lambda t: ops.conv2d(t[0], t[1], None, ConvSpec(2, 2, 3, 3, dilation=2, padding=2)),
                       lambda r: [r.standard_normal((1, 2, 5, 5)), r.standard_normal((2, 2, 3, 3))]),
    "relu": (lambda t: ops.relu(t[0]), lambda r: [_away_from_kinks(r.standard_normal((3, 4)))]),
    "sigmoid": (lambda t: ops.sigmoid(t[0]), lambda r: [r.standard_normal((3, 4))]),
    "lrn": (lambda t: ops.lrn(t[0], 5, 2.0, 1e-2, 0.75), lambda r: [r.standard_normal((1, 6, 2, 2)) * 3]),
    "maxpool": (lambda t: ops.maxpool2d(t[0], 3, 2),
                lambda r: [r.permutation(49).reshape(1, 1, 7, 7) * 0.1 + r.standard_normal((1, 1, 7, 7)) * 1e-3]),
    "linear": (lambda t: ops.linear(t[0], t[1], t[2]),
               lambda r: [r.standard_normal((3, 4)), r.standard_normal((2, 4)), r.standard_normal(2)]),
    "mul_broadcast": (lambda t: ops.mul(t[0], t[1]), lambda r: [r.standard_normal((2, 3, 2, 2)), r.standard_normal((1, 3, 1, 1))]),
    "concat": (lambda t: ops.concat([t[0], t[1]], axis=1), lambda r: [r.standard_normal((1, 2, 2, 2)), r.standard_normal((1, 3, 2, 2))]),
    "global_avg_pool": (lambda t: ops.global_avg_pool(t[0]), lambda r: [r.standard_normal((2, 3, 3, 3))]),
    "take": (lambda t: ops.take(t[0], [2, 0, 2], axis=0), lambda r: [r.standard_normal((3, 4))]),
    "roialign": (lambda t: ops.roialign(t[0], np.array([[3.0, 5.0, 30.0, 25.0], [10.0, 1.0, 14.0, 40.0]]), 1 / 8, 3),
                 lambda r: [r.standard_normal((1, 2, 6, 6))]),
    "softmax_ce": (lambda t: ops.softmax_ce_loss(t[0], [0, 1, 1, 0]), lambda r: [r.standard_normal((4, 2))]),
    "instance_embedding": (lambda t: ops.instance_embedding_loss(t[0], 1), lambda r: [r.standard_normal((4, 3))]),
    "guide_full": (lambda t: guide(t[0], t[1], t[2], t[3], t[4], t[5], Mode.FULL),
                   lambda r: [r.standard_normal((1, 3, 3, 3)), r.standard_normal((1, 3, 3, 3)),
                              r.standard_normal((3, 3, 1, 1)), r.standard_normal(3),
                              r.standard_normal((3, 3, 1, 1)), r.standard_normal(3)]),
    "guide_film": (lambda t: guide(t[0], t[1], t[2], t[3], t[4], None, Mode.FILM),
                   lambda r: [r.standard_normal((1, 3, 3, 3)), r.standard_normal((1, 3, 3, 3)),
                              r.standard_normal((3, 3, 1, 1)), r.standard_normal(3), r.standard_normal((3, 3, 1, 1))]),
}


@pytest.mark.parametrize("name", sorted(CASES))
@pytest.mark.parametrize("seed", range(3))
def test_op_gradient(name, seed):
    fn, make = CASES[name]
    rep = grad_check(fn, make(np.random.default_rng(seed)), seed=seed)
    assert rep.ok(TOL), (name, rep.per_input)


def test_rel_error_scale():
    assert rel_error(np.array([1.0, 2.0]), np.array([1.0, 2.0])) == 0.0
    assert abs(rel_error(np.array([1.0]), np.array([1.1])) - 0.1 / 1.1) < 1e-12
    assert rel_error(np.zeros(3), np.zeros(3)) == 0.0


def test_gradcheck_detects_wrong_backward():
    from catrack.nn.tensor import make_output

    def bad_square(t):
        x = t[0]
        return make_output(x.data ** 2, (x,), lambda g: x._accumulate(g * x.data), "bad")

    rep = grad_check(bad_square, [np.array([1.0, 2.0, 3.0])])
    assert not rep.ok(TOL)
