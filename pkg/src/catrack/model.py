"""Full parameter set of the challenge-aware tracker and its forward pass."""

from __future__ import annotations

import re

import numpy as np

from . import backbone as bb
from . import challenge as ch
from .nn import checkpoint
from .nn.tensor import Tensor

GROUPS = ("backbone", "branch", "guide", "agg", "fc")


def group_of(name):
    head = name.split(".", 1)[0]
    if head in ("fc4", "fc5", "fc6"):
        return "fc"
    if head not in GROUPS:
        raise KeyError(f"parameter {name!r} belongs to no group")
    return head


def preprocess(patch):
    """uint8-range or [0,1] patch [...,C,S,S] -> zero-centred float32, thermal to 3 channels."""
    x = np.asarray(patch, dtype=np.float32)
    if x.ndim == 3:
        x = x[None]
    if x.shape[1] == 1:
        x = np.repeat(x, 3, axis=1)
    return x - 0.5


class CatModel:
    """Named parameters (``{name: Tensor}``) plus the config needed to run them."""

    def __init__(self, cfg, params, flags=None):
        self.cfg = cfg.validate()
        self.params = {k: v if isinstance(v, Tensor) else Tensor(np.asarray(v, np.float32), name=k)
                       for k, v in params.items()}
        self.flags = flags or ch.VariantFlags()

    @classmethod
    def create(cls, cfg, n_domains=1, seed=0, with_branches=True, flags=None):
        rng = np.random.default_rng(seed)
        params = bb.init_backbone(cfg, rng)
        if with_branches:
            params.update(ch.init_branches(cfg, rng))
            params.update(ch.init_guidance(cfg, rng))
            params.update(ch.init_aggregation(cfg, rng))
        params.update(bb.init_fc(cfg, rng, n_domains))
        return cls(cfg, params, flags)

    # -------------------------------------------------------------- params
    @property
    def has_branches(self):
        return any(k.startswith("branch.") for k in self.params)

    @property
    def domains(self):
        found = {m.group(1) for k in self.params if (m := re.match(r"fc6\.([^.]+)\.w$", k))}
        return sorted(found, key=lambda d: (not d.isdigit(), int(d) if d.isdigit() else 0, d))

    def names(self, group=None):
        return [k for k in self.params if group is None or group_of(k) == group]

    def tensors(self, names):
        return [self.params[k] for k in names]

    def set_trainable(self, names):
        names = set(names)
        for k, t in self.params.items():
            t.requires_grad = k in names
            t.grad = None

    def state(self):
        return {k: t.data for k, t in self.params.items()}

    def digest(self, group=None, names=None):
        if names is None:
            names = self.names(group)
        return checkpoint.digest(self.state(), names)

    def copy(self):
        return CatModel(self.cfg, {k: t.data.copy() for k, t in self.params.items()}, self.flags)

    def add_head(self, domain, seed=0):
        rng = np.random.default_rng(seed)
        for k, v in bb.new_head(self.cfg, rng, domain).items():
            self.params[k] = Tensor(v, name=k)

    def param_count(self, group=None):
        return sum(self.params[k].size for k in self.names(group))

    def save(self, path):
        checkpoint.save(path, self.state())

    @classmethod
    def load(cls, path, cfg=None, flags=None):
        state = checkpoint.load(path)
        return cls(cfg or infer_config(state), state, flags)

    # ------------------------------------------------------------- forward
    def features(self, rgb, t, flags=None, routing=ch.FULL_ROUTING, keep=None):
        """conv3 maps of both streams for preprocessed [N,3,S,S] inputs."""
        flags = flags or self.flags
        rgb = rgb if isinstance(rgb, Tensor) else Tensor(rgb)
        t = t if isinstance(t, Tensor) else Tensor(t)
        bb.check_input(rgb, t, self.cfg)
        if flags.mode is not ch.Mode.BASELINE and flags.active_layers and not self.has_branches:
            raise KeyError("checkpoint has no challenge branches; use the baseline variant")
        cur = {"rgb": rgb, "t": t}
        for ell in (1, 2, 3):
            cur = ch.cat_layer_forward(ell, cur, self.params, self.cfg, flags, routing, keep)
        return cur["rgb"], cur["t"]

    def pool(self, feats, boxes, batch_idx=None):
        """Concatenated pooled vectors [B, pooled_dim] for patch-coordinate boxes."""
        f_rgb, f_t = feats
        return bb.pooled_vector(bb.roi_pool(f_rgb, boxes, self.cfg, batch_idx),
                                bb.roi_pool(f_t, boxes, self.cfg, batch_idx))

    def trunk(self, vec, training=False, rng=None):
        return bb.fc_trunk(vec, self.params, self.cfg, training, rng)

    def head(self, h, domain):
        return bb.head(h, self.params, domain)

    def scores(self, vec, domain, training=False, rng=None):
        return self.head(self.trunk(vec, training, rng), domain)


def infer_config(state, base=bb.DESK):
    """Rebuild a BackboneConfig from parameter shapes of a checkpoint."""
    c = tuple(int(state[f"backbone.rgb.conv{i}.w"].shape[0]) for i in (1, 2, 3))
    fc_dim = int(state["fc4.w"].shape[0])
    mid = base.branch_mid
    key = "branch.l1.FM.conv1.w"
    if key in state:
        mid = int(state[key].shape[0])
    pooled = int(state["fc4.w"].shape[1])
    r = int(round((pooled / (2 * c[2])) ** 0.5))
    from dataclasses import replace

    return replace(base, channels=c, fc_dim=fc_dim, branch_mid=mid, roialign_out=r)


def linear_scores(model, vec, domain):
    """Inference-only scores [B,2] as a numpy array."""
    from .nn.tensor import no_grad

    with no_grad():
        return model.scores(Tensor(vec), domain).data

