"""Central finite-difference gradient checking in double precision."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckReport:
    max_rel_err: float
    per_input: list = field(default_factory=list)

    def ok(self, tol=1e-4):
        return self.max_rel_err < tol


def rel_error(analytic, numeric):
    """Max abs deviation scaled by the larger of the two gradients' max magnitudes."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-12)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def grad_check(fn, inputs, eps=1e-4, seed=0):
    """Compare backprop gradients of ``fn`` with central differences.

    ``fn`` maps a list of Tensors to one Tensor; it is reduced to a scalar via
    a fixed random projection so every output element contributes.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    rng = np.random.default_rng(seed)
    probe = None

    def scalar(arrs, track):
        nonlocal probe
        ts = [Tensor(a, requires_grad=track) for a in arrs]
        out = fn(ts)
        if probe is None:
            probe = rng.standard_normal(out.shape)
        return ts, out, float(np.sum(out.data * probe))

    ts, out, _ = scalar(arrays, True)
    out.backward(probe.astype(np.float64))
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]

    errs = []
    for k, a in enumerate(arrays):
        num = np.zeros_like(a)
        flat = a.reshape(-1)
        nflat = num.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            _, _, fp = scalar(arrays, False)
            flat[i] = orig - eps
            _, _, fm = scalar(arrays, False)
            flat[i] = orig
            nflat[i] = (fp - fm) / (2 * eps)
        errs.append(rel_error(analytic[k], num))
    return GradCheckReport(max(errs), errs)
