"""Flat ``key = value`` run configuration.

Every tunable number of training and tracking lives here with its default.
Precedence when building a run: command-line override > config file > default.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields, replace

from . import backbone as bb
from .geometry import MiningConfig
from .nn.optim import SgdConfig


class ConfigError(ValueError):
    pass


@dataclass
class Config:
    # model shape
    channels: str = "16,32,64"
    fc_dim: int = 128
    branch_mid: int = 4
    roialign_out: int = 3
    variant: str = "full"
    layers: str = "1,2,3"
    # optimisation (shared by all stages)
    momentum: float = 0.9
    weight_decay: float = 0.0005
    grad_clip: float = 10.0
    ie_weight: float = 0.1
    loss_reduction: str = "sum"
    # offline training
    epoch_scale: float = 1.0
    pretrain_epochs: int = 1000
    stage1_epochs: int = 1000
    stage2_epochs: int = 1000
    stage3_epochs: int = 1000
    lr_pretrain: float = 0.01
    lr_branch: float = 0.001
    lr_guide: float = 0.001
    lr_fc: float = 0.0005
    lr_agg: float = 0.0005
    lr_backbone: float = 0.0001
    frames_per_batch: int = 8
    batch_pos: int = 32
    batch_neg: int = 96
    pretrain: int = 1
    # sample mining
    pos_iou: float = 0.7
    neg_iou: float = 0.3
    bbreg_iou: float = 0.6
    context: float = 3.0
    # online tracking
    init_pos: int = 500
    init_neg: int = 5000
    bbreg_samples: int = 1000
    init_epochs: int = 50
    init_lr_fc6: float = 0.001
    init_lr_fc45: float = 0.0005
    update_epochs: int = 15
    update_lr_fc6: float = 0.003
    update_lr_fc45: float = 0.0015
    update_pos: int = 20
    update_neg: int = 100
    long_term_frames: int = 100
    short_term_frames: int = 20
    long_term_interval: int = 10
    score_threshold: float = 0.0
    n_candidates: int = 256
    trans_sigma: float = 0.6
    scale_step: float = 1.05
    scale_sigma: float = 0.5
    top_k: int = 5
    online_batches_per_epoch: int = 1
    hard_neg_pool: int = 1024
    bbreg_lambda: float = 1000.0
    bbreg_crop_scales: str = "0.8,0.9,1,1.1,1.25"
    bbreg_jitter: float = 0.1
    # run control
    seed: int = 0
    workers: int = 0

    # ------------------------------------------------------------------
    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]

    def update(self, values):
        """Return a copy with ``values`` (strings or typed) applied."""
        types = {f.name: type(f.default) for f in fields(self)}
        changes = {}
        for k, v in values.items():
            if v is None:
                continue
            if k not in types:
                raise ConfigError(f"unknown config key {k!r}")
            try:
                changes[k] = types[k](v) if not isinstance(v, types[k]) else v
            except ValueError:
                raise ConfigError(f"bad value for {k}: {v!r}") from None
        return replace(self, **changes).validate()

    def validate(self):
        if self.pos_iou <= self.neg_iou:
            raise ConfigError("pos_iou must exceed neg_iou")
        if self.epoch_scale <= 0:
            raise ConfigError("epoch_scale must be positive")
        if self.frames_per_batch < 1 or self.batch_pos < 1 or self.batch_neg < 1:
            raise ConfigError("batch sizes must be positive")
        if self.loss_reduction not in ("sum", "mean"):
            raise ConfigError("loss_reduction must be 'sum' or 'mean'")
        self.channel_tuple()
        self.bbreg_scales()
        return self

    def channel_tuple(self):
        try:
            c = tuple(int(x) for x in self.channels.split(","))
        except ValueError:
            raise ConfigError(f"channels must be three integers, got {self.channels!r}") from None
        if len(c) != 3 or min(c) < 1:
            raise ConfigError(f"channels must be three positive integers, got {self.channels!r}")
        return c

    def bbreg_scales(self):
        try:
            f = tuple(float(x) for x in self.bbreg_crop_scales.split(","))
        except ValueError:
            raise ConfigError(f"bbreg_crop_scales must be numbers, got {self.bbreg_crop_scales!r}") from None
        if not f or min(f) <= 0 or len(f) > self.bbreg_samples:
            raise ConfigError(f"bbreg_crop_scales must be 1..bbreg_samples positive numbers, "
                              f"got {self.bbreg_crop_scales!r}")
        return f

    def backbone(self):
        return replace(bb.DESK, channels=self.channel_tuple(), fc_dim=self.fc_dim,
                       branch_mid=self.branch_mid, roialign_out=self.roialign_out).validate()

    def sgd(self, lr=0.001):
        return SgdConfig(lr=lr, momentum=self.momentum, weight_decay=self.weight_decay, grad_clip=self.grad_clip)

    def loss_scale(self, n):
        """Factor turning a per-sample mean loss into the configured reduction."""
        return float(n) if self.loss_reduction == "sum" else 1.0

    def mining(self):
        return MiningConfig(pos_iou=self.pos_iou, neg_iou=self.neg_iou)

    def epochs(self, name):
        """Scaled epoch count for ``name`` in pretrain/stage1/stage2/stage3 (at least 1)."""
        return max(1, int(round(getattr(self, f"{name}_epochs") * self.epoch_scale)))

    def dumps(self):
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))

    def as_dict(self):
        return dataclasses.asdict(self)


def parse_config(text, base=None):
    """Parse ``key = value`` lines (``#`` comments allowed) over ``base``."""
    values = {}
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {raw!r}")
        k, v = (s.strip() for s in line.split("=", 1))
        values[k] = v
    return (base or Config()).update(values)


def load_config(path, base=None):
    with open(path) as fh:
        return parse_config(fh.read(), base)
