"""Two-stream three-layer convolutional backbone, RoIAlign pooling and fc head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import ops
from .nn.ops import ConvSpec
from .nn.tensor import ShapeError

STREAMS = ("rgb", "t")
KERNELS = (7, 5, 3)


@dataclass(frozen=True)
class BackboneConfig:
    channels: tuple = (96, 256, 512)
    input_size: int = 107
    roialign_out: int = 3
    fc_dim: int = 512
    branch_mid: int = 8
    strides: tuple = (2, 2, 1)
    conv3_dilation: int = 3
    pool_window: int = 3
    pool_stride: int = 2
    lrn_n: int = 5
    lrn_k: float = 2.0
    lrn_alpha: float = 1e-4
    lrn_beta: float = 0.75
    dropout: float = 0.5

    def conv_spec(self, layer):
        """ConvSpec of backbone conv ``layer`` (1-based); 'same'-style padding."""
        in_ch = 3 if layer == 1 else self.channels[layer - 2]
        k = KERNELS[layer - 1]
        d = self.conv3_dilation if layer == 3 else 1
        return ConvSpec(in_ch, self.channels[layer - 1], k, k,
                        stride=self.strides[layer - 1], dilation=d, padding=d * (k - 1) // 2)

    def layer_out_size(self, layer):
        side = self.input_size
        for ell in range(1, layer + 1):
            side = self.conv_spec(ell).out_size(side, side)[0]
            if ell == 1:
                side = (side - self.pool_window) // self.pool_stride + 1
        return side

    @property
    def feature_stride(self):
        return self.strides[0] * self.pool_stride * self.strides[1] * self.strides[2]

    @property
    def pooled_dim(self):
        """Length of the concatenated two-stream pooled feature vector."""
        return 2 * self.channels[2] * self.roialign_out ** 2

    def validate(self):
        if self.layer_out_size(3) < self.roialign_out:
            raise ShapeError(
                f"input side {self.input_size} yields a conv3 map smaller than roialign_out={self.roialign_out}"
            )
        return self

    def stream_param_count(self):
        return sum(self.conv_spec(ell).n_params for ell in (1, 2, 3))

    def fc_param_count(self, n_domains=1):
        d = self.fc_dim
        return (self.pooled_dim * d + d) + (d * d + d) + n_domains * (2 * d + 2)


FULL = BackboneConfig()
DESK = BackboneConfig(channels=(16, 32, 64), fc_dim=128, branch_mid=4)


def he_normal(rng, shape, fan_in, gain=1.0):
    return (rng.standard_normal(shape) * gain * np.sqrt(2.0 / fan_in)).astype(np.float32)


def init_backbone(cfg, rng):
    params = {}
    for stream in STREAMS:
        for ell in (1, 2, 3):
            s = cfg.conv_spec(ell)
            fan_in = s.in_ch * s.kernel_h * s.kernel_w
            params[f"backbone.{stream}.conv{ell}.w"] = he_normal(rng, (s.out_ch, s.in_ch, s.kernel_h, s.kernel_w), fan_in)
            params[f"backbone.{stream}.conv{ell}.b"] = np.zeros(s.out_ch, np.float32)
    return params


def init_fc(cfg, rng, n_domains):
    d = cfg.fc_dim
    params = {
        "fc4.w": he_normal(rng, (d, cfg.pooled_dim), cfg.pooled_dim),
        "fc4.b": np.zeros(d, np.float32),
        "fc5.w": he_normal(rng, (d, d), d),
        "fc5.b": np.zeros(d, np.float32),
    }
    for k in range(n_domains):
        params.update(new_head(cfg, rng, k))
    return params


def new_head(cfg, rng, domain):
    return {
        f"fc6.{domain}.w": (rng.standard_normal((2, cfg.fc_dim)) * 0.01).astype(np.float32),
        f"fc6.{domain}.b": np.zeros(2, np.float32),
    }


def block_forward(layer, x, params, stream, cfg):
    """conv -> ReLU [-> LRN [-> maxpool]] for one backbone layer of one stream."""
    w = params[f"backbone.{stream}.conv{layer}.w"]
    b = params[f"backbone.{stream}.conv{layer}.b"]
    y = ops.relu(ops.conv2d(x, w, b, cfg.conv_spec(layer)))
    if layer < 3:
        y = ops.lrn(y, cfg.lrn_n, cfg.lrn_k, cfg.lrn_alpha, cfg.lrn_beta)
    if layer == 1:
        y = ops.maxpool2d(y, cfg.pool_window, cfg.pool_stride)
    return y


def check_input(rgb, t, cfg):
    for name, x in (("rgb", rgb), ("thermal", t)):
        if x.shape[1] != 3:
            raise ShapeError(f"{name} input must have 3 channels, got {x.shape}")
    if rgb.shape != t.shape:
        raise ShapeError(f"rgb {rgb.shape} and thermal {t.shape} inputs differ in size")
    if min(rgb.shape[2:]) < cfg.input_size:
        raise ShapeError(f"input {rgb.shape[2:]} smaller than the {cfg.input_size}px minimum")


def backbone_forward(rgb, t, params, cfg):
    """Plain two-stream forward; returns ``{(layer, stream): feature map}``."""
    check_input(rgb, t, cfg)
    feats = {}
    cur = {"rgb": rgb, "t": t}
    for ell in (1, 2, 3):
        for stream in STREAMS:
            cur[stream] = block_forward(ell, cur[stream], params, stream, cfg)
            feats[(ell, stream)] = cur[stream]
    return feats


def roi_pool(features, boxes, cfg, batch_idx=None):
    """RoIAlign in input-patch coordinates for a conv3 map."""
    return ops.roialign(features, boxes, 1.0 / cfg.feature_stride, cfg.roialign_out, batch_idx)


def pooled_vector(pooled_rgb, pooled_t):
    """Concatenate the two streams along channels and flatten per box."""
    return ops.flatten(ops.concat([pooled_rgb, pooled_t], axis=1))


def fc_trunk(vec, params, cfg, training=False, rng=None):
    h = ops.relu(ops.linear(vec, params["fc4.w"], params["fc4.b"]))
    h = ops.dropout(h, cfg.dropout, rng, training)
    h = ops.relu(ops.linear(h, params["fc5.w"], params["fc5.b"]))
    return ops.dropout(h, cfg.dropout, rng, training)


def head(h, params, domain):
    key = f"fc6.{domain}.w"
    if key not in params:
        raise KeyError(f"unknown domain {domain!r}")
    return ops.linear(h, params[key], params[f"fc6.{domain}.b"])


def classify(pooled_rgb, pooled_t, params, cfg, domain, training=False, rng=None):
    """fc4 -> ReLU -> fc5 -> ReLU -> fc6[domain] on concatenated pooled features."""
    vec = pooled_vector(pooled_rgb, pooled_t)
    return head(fc_trunk(vec, params, cfg, training, rng), params, domain)
