"""Challenge-aware branches, gated cross-modal guidance and adaptive aggregation."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import backbone as bb
from .nn import ops
from .nn.ops import ConvSpec
from .nn.tensor import ShapeError, Tensor


class ChallengeLabel(str, enum.Enum):
    IV = "IV"
    TC = "TC"
    FM = "FM"
    SV = "SV"
    OCC = "OCC"

    @property
    def shared(self):
        return self in SHARED

    @property
    def specific(self):
        return self in SPECIFIC

    @classmethod
    def parse(cls, tag):
        try:
            return cls(tag.strip().upper())
        except ValueError:
            raise ValueError(f"unknown challenge tag {tag!r}") from None


SHARED = (ChallengeLabel.FM, ChallengeLabel.SV, ChallengeLabel.OCC)
SPECIFIC = (ChallengeLabel.IV, ChallengeLabel.TC)
# concat order inside the aggregation layer
BRANCH_ORDER = SHARED + SPECIFIC


class Mode(str, enum.Enum):
    FULL = "full"
    NO_GATE = "no_gate"          # CAT-NS
    DIRECT_ADD = "direct_add"    # CAT-NG
    NO_GUIDANCE = "no_guidance"  # CAT-NA
    FILM = "film"                # CAT-FiLM
    BASELINE = "baseline"


@dataclass(frozen=True)
class VariantFlags:
    mode: Mode = Mode.FULL
    active_layers: frozenset = field(default_factory=lambda: frozenset({1, 2, 3}))

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        layers = frozenset(int(x) for x in self.active_layers)
        if not layers <= {1, 2, 3}:
            raise ValueError(f"active layers must be a subset of {{1,2,3}}, got {sorted(layers)}")
        object.__setattr__(self, "active_layers", layers)

    @classmethod
    def parse(cls, mode="full", layers="1,2,3"):
        if isinstance(layers, str):
            layers = [int(x) for x in layers.replace(" ", "").split(",") if x]
        return cls(Mode(mode), frozenset(layers))

    def uses_branches(self, layer):
        return self.mode is not Mode.BASELINE and layer in self.active_layers


@dataclass(frozen=True)
class Routing:
    """Which branches take part in a forward pass (training stages restrict it).

    With ``aggregate=False`` the enabled branch outputs are added directly to
    the backbone output instead of passing through the 1x1 aggregation.
    """

    branches: tuple = BRANCH_ORDER
    guidance: bool = True
    aggregate: bool = True


FULL_ROUTING = Routing()


# ---------------------------------------------------------------- branches

def branch_specs(cfg, layer):
    """ConvSpecs of one branch at ``layer``; layer 1 has a bottleneck pair."""
    c = cfg.channels
    if layer == 1:
        m = cfg.branch_mid
        return [ConvSpec(3, m, 3, 3, stride=2, padding=1), ConvSpec(m, c[0], 3, 3, stride=1, padding=1)]
    if layer == 2:
        return [ConvSpec(c[0], c[1], 3, 3, stride=cfg.strides[1], padding=1)]
    return [ConvSpec(c[1], c[2], 1, 1, stride=cfg.strides[2])]


def branch_param_count(cfg, layer):
    return sum(s.n_params for s in branch_specs(cfg, layer))


def aggregation_param_count(cfg, layer):
    c = cfg.channels[layer - 1]
    return len(BRANCH_ORDER) * c * c + c


def branch_prefix(label, layer, stream):
    label = ChallengeLabel(label)
    if label.shared:
        return f"branch.l{layer}.{label.value}"
    return f"branch.l{layer}.{label.value}.{stream}"


def branch_forward(x, params, prefix, layer, cfg):
    """Run one challenge branch on the same input the backbone conv sees."""
    y = x
    for i, spec in enumerate(branch_specs(cfg, layer), start=1):
        y = ops.conv2d(y, params[f"{prefix}.conv{i}.w"], params[f"{prefix}.conv{i}.b"], spec)
        y = ops.relu(y)
        y = ops.lrn(y, cfg.lrn_n, cfg.lrn_k, cfg.lrn_alpha, cfg.lrn_beta)
        if layer == 1 and i == 1:
            y = ops.maxpool2d(y, cfg.pool_window, cfg.pool_stride)
    return y


def init_branches(cfg, rng):
    params = {}
    for ell in (1, 2, 3):
        specs = branch_specs(cfg, ell)
        prefixes = [branch_prefix(c, ell, None) for c in SHARED]
        prefixes += [branch_prefix(c, ell, s) for c in SPECIFIC for s in bb.STREAMS]
        for prefix in prefixes:
            for i, s in enumerate(specs, start=1):
                fan_in = s.in_ch * s.kernel_h * s.kernel_w
                # last conv starts small so a fresh branch is a mild residual
                gain = 0.1 if i == len(specs) else 1.0
                params[f"{prefix}.conv{i}.w"] = bb.he_normal(rng, (s.out_ch, s.in_ch, s.kernel_h, s.kernel_w), fan_in, gain)
                params[f"{prefix}.conv{i}.b"] = np.zeros(s.out_ch, np.float32)
    return params


# ---------------------------------------------------------------- guidance

def guidance_prefix(label, layer, guided_stream):
    return f"guide.l{layer}.{ChallengeLabel(label).value}.{guided_stream}"


def init_guidance(cfg, rng):
    params = {}
    for ell in (1, 2, 3):
        c = cfg.channels[ell - 1]
        for label in SPECIFIC:
            for stream in bb.STREAMS:
                p = guidance_prefix(label, ell, stream)
                params[f"{p}.w1"] = bb.he_normal(rng, (c, c, 1, 1), c, 0.1)
                params[f"{p}.b1"] = np.zeros(c, np.float32)
                params[f"{p}.w2"] = bb.he_normal(rng, (c, c, 1, 1), c, 0.1)
                params[f"{p}.b2"] = np.zeros(c, np.float32)
    return params


def guide(x, z, w1, b1, w2, b2, mode=Mode.FULL):
    """Transfer features of the prior modality ``x`` into the guided one ``z``.

    full: gamma = w1*x+b1, beta = w2*ReLU(gamma)+b2, z + sigmoid(beta)*gamma.
    """
    mode = Mode(mode)
    x, z = ops.as_tensor(x), ops.as_tensor(z)
    if x.shape != z.shape:
        raise ShapeError(f"guide: x {x.shape} and z {z.shape} differ")
    c = z.shape[1]
    pw = ConvSpec(c, c, 1, 1)
    if mode in (Mode.NO_GUIDANCE, Mode.BASELINE):
        return z
    if mode is Mode.DIRECT_ADD:
        return ops.add(z, x)
    if mode is Mode.FILM:
        # channel-wise: scale from pooled x, shift derived from the scale
        s = ops.conv2d(ops.global_avg_pool(x), w1, b1, pw)
        shift = ops.conv2d(ops.relu(s), w2, None, pw)
        return ops.add(ops.add(z, ops.mul(s, z)), shift)
    gamma = ops.conv2d(x, w1, b1, pw)
    if mode is Mode.NO_GATE:
        return ops.add(z, gamma)
    beta = ops.conv2d(ops.relu(gamma), w2, b2, pw)
    return ops.add(z, ops.mul(ops.sigmoid(beta), gamma))


def guide_params(params, label, layer, stream):
    p = guidance_prefix(label, layer, stream)
    return params[f"{p}.w1"], params[f"{p}.b1"], params[f"{p}.w2"], params[f"{p}.b2"]


# ------------------------------------------------------------- aggregation

def init_aggregation(cfg, rng):
    params = {}
    n = len(BRANCH_ORDER)
    for ell in (1, 2, 3):
        c = cfg.channels[ell - 1]
        for stream in bb.STREAMS:
            params[f"agg.l{ell}.{stream}.w"] = bb.he_normal(rng, (c, n * c, 1, 1), n * c, 0.1)
            params[f"agg.l{ell}.{stream}.b"] = np.zeros(c, np.float32)
    return params


def aggregate(branch_outputs, weight, bias, n_branches=len(BRANCH_ORDER)):
    """Channel-concatenate the branch maps, then a 1x1 conv back to C channels."""
    if len(branch_outputs) != n_branches:
        raise ShapeError(f"aggregate: expected {n_branches} branch maps, got {len(branch_outputs)}")
    cat = ops.concat(branch_outputs, axis=1)
    c = branch_outputs[0].shape[1]
    return ops.conv2d(cat, weight, bias, ConvSpec(n_branches * c, c, 1, 1))


# ------------------------------------------------------------------ layers

def cat_layer_forward(layer, inputs, params, cfg, flags=VariantFlags(), routing=FULL_ROUTING, keep=None):
    """One hierarchical layer for both streams.

    ``inputs`` is ``{"rgb": x, "t": x}``; returns the same mapping of outputs.
    When ``keep`` is a dict, branch maps are stored into it keyed by
    ``(layer, branch_name, stream)``.
    """
    outs = {s: bb.block_forward(layer, inputs[s], params, s, cfg) for s in bb.STREAMS}
    if keep is not None:
        for s in bb.STREAMS:
            keep[(layer, "backbone", s)] = outs[s]
    if not flags.uses_branches(layer) or not routing.branches:
        return outs

    maps = {}
    for label in routing.branches:
        label = ChallengeLabel(label)
        for s in bb.STREAMS:
            y = branch_forward(inputs[s], params, branch_prefix(label, layer, s), layer, cfg)
            if y.shape != outs[s].shape:
                raise ShapeError(f"branch {label.value} at layer {layer} gives {y.shape}, backbone {outs[s].shape}")
            maps[(label, s)] = y

    if routing.guidance:
        guided = {}
        for label in routing.branches:
            label = ChallengeLabel(label)
            if not label.specific:
                continue
            for s, other in (("rgb", "t"), ("t", "rgb")):
                guided[(label, s)] = guide(maps[(label, other)], maps[(label, s)],
                                           *guide_params(params, label, layer, s), mode=flags.mode)
        maps.update(guided)

    if keep is not None:
        for (label, s), y in maps.items():
            keep[(layer, label.value, s)] = y

    result = {}
    for s in bb.STREAMS:
        if routing.aggregate:
            branch_maps = [maps[(label, s)] for label in BRANCH_ORDER]
            res = aggregate(branch_maps, params[f"agg.l{layer}.{s}.w"], params[f"agg.l{layer}.{s}.b"])
        else:
            res = None
            for label in routing.branches:
                y = maps[(ChallengeLabel(label), s)]
                res = y if res is None else ops.add(res, y)
        result[s] = ops.add(outs[s], res)
    return result


# ------------------------------------------------------------- inspection

def heatmap_bytes(fmap):
    """Channel-mean of a [C,H,W] map scaled to 0..255 as a binary PGM."""
    m = np.asarray(fmap, dtype=np.float64).mean(axis=0)
    lo, hi = m.min(), m.max()
    img = np.zeros_like(m) if hi - lo <= 1e-12 else (m - lo) / (hi - lo) * 255.0
    img = np.round(img).astype(np.uint8)
    h, w = img.shape
    return b"P5\n%d %d\n255\n" % (w, h) + img.tobytes()


def dump_activations(rgb, t, model, out_dir, flags=None):
    """Write one PGM heat map per (layer, branch, stream), plus backbone maps.

    ``rgb``/``t`` are preprocessed [1,3,S,S] patches. Returns written paths.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create {out_dir}: {exc}") from exc
    keep = {}
    from .nn.tensor import no_grad

    with no_grad():
        model.features(rgb, t, flags=flags, keep=keep)
    paths = []
    for (layer, name, stream), y in sorted(keep.items(), key=lambda kv: (kv[0][0], kv[0][1], kv[0][2])):
        path = out_dir / f"l{layer}_{name}_{stream}.pgm"
        path.write_bytes(heatmap_bytes(y.data[0] if isinstance(y, Tensor) else y[0]))
        paths.append(path)
    return paths
