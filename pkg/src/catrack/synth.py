"""Synthetic co-registered RGB/thermal sequences with per-frame challenge tags.

On-disk layout of one sequence directory::

    rgb/000000.ppm   binary P6, 8-bit
    t/000000.pgm     binary P5, 8-bit
    gt_rgb.txt       "x,y,w,h" per frame (integers)
    gt_t.txt         same, thermal frame
    challenges.txt   space-separated tags per frame, empty line if none
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .challenge import ChallengeLabel

TAG_ORDER = [c for c in ChallengeLabel]


class BBox(NamedTuple):
    x: float
    y: float
    w: float
    h: float

    @property
    def center(self):
        return self.x + self.w / 2.0, self.y + self.h / 2.0


class FormatError(ValueError):
    pass


@dataclass
class SequenceSpec:
    seed: int = 0
    length: int = 50
    height: int = 128
    width: int = 128
    shape: str = "rect"
    size: tuple = (24, 20)
    start: tuple = None
    velocity: tuple = (1.0, 0.6)
    rgb_color: tuple = (0.9, 0.25, 0.2)
    rgb_color2: tuple = (0.95, 0.85, 0.2)
    thermal_target: float = 0.85
    noise: float = 0.02
    clutter: int = 3
    challenges: list = field(default_factory=list)  # [(first, last, frozenset of labels)]

    def validate(self):
        if self.length < 1 or self.height < 16 or self.width < 16:
            raise ValueError("sequence needs length >= 1 and frames of at least 16x16")
        if self.shape not in ("rect", "ellipse"):
            raise ValueError(f"unknown target shape {self.shape!r}")
        w, h = self.size
        if not (4 <= w < self.width - 2 and 4 <= h < self.height - 2):
            raise ValueError(f"target size {self.size} does not fit a {self.width}x{self.height} frame")
        if np.hypot(*self.velocity) >= 0.5 * min(w, h):
            raise ValueError("base velocity must stay below half the target size")
        for first, last, labels in self.challenges:
            if not (0 <= first <= last < self.length):
                raise ValueError(f"challenge range {first}-{last} outside [0, {self.length})")
            for lab in labels:
                ChallengeLabel(lab)
        return self

    def tags(self):
        out = [set() for _ in range(self.length)]
        for first, last, labels in self.challenges:
            for f in range(first, last + 1):
                out[f].update(ChallengeLabel(x) for x in labels)
        return [frozenset(t) for t in out]


# ------------------------------------------------------------ spec files

def _floats(v):
    return tuple(float(x) for x in v.replace(",", " ").split())


def parse_spec(text):
    """Parse the ``key = value`` sequence spec format.

    ``challenge = IV OCC 10-19`` lines may repeat; ranges are inclusive.
    """
    spec = SequenceSpec()
    challenges = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        if key == "challenge":
            m = re.fullmatch(r"((?:[A-Za-z]+\s+)+)(\d+)\s*-\s*(\d+)", val)
            if not m:
                raise FormatError(f"line {lineno}: challenge needs 'TAGS first-last'")
            labels = frozenset(ChallengeLabel.parse(t) for t in m.group(1).split())
            challenges.append((int(m.group(2)), int(m.group(3)), labels))
        elif key in ("seed", "length", "height", "width", "clutter"):
            setattr(spec, key, int(val))
        elif key in ("thermal_target", "noise"):
            setattr(spec, key, float(val))
        elif key == "shape":
            spec.shape = val
        elif key in ("size", "start", "velocity", "rgb_color", "rgb_color2"):
            setattr(spec, key, _floats(val))
        else:
            raise FormatError(f"line {lineno}: unknown key {key!r}")
    spec.size = tuple(int(round(x)) for x in spec.size)
    spec.challenges = challenges
    return spec.validate()


def format_spec(spec):
    lines = [
        f"seed = {spec.seed}", f"length = {spec.length}",
        f"height = {spec.height}", f"width = {spec.width}", f"shape = {spec.shape}",
        "size = %d, %d" % tuple(spec.size),
        "velocity = %g, %g" % tuple(spec.velocity),
        "rgb_color = %g, %g, %g" % tuple(spec.rgb_color),
        "rgb_color2 = %g, %g, %g" % tuple(spec.rgb_color2),
        f"thermal_target = {spec.thermal_target:g}", f"noise = {spec.noise:g}",
        f"clutter = {spec.clutter}",
    ]
    if spec.start is not None:
        lines.append("start = %g, %g" % tuple(spec.start))
    for first, last, labels in spec.challenges:
        tags = " ".join(c.value for c in TAG_ORDER if c in labels)
        lines.append(f"challenge = {tags} {first}-{last}")
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------- rendering

def smooth_field(rng, h, w, lo, hi, grid=6):
    """Low-frequency random field: bilinear upsampling of a coarse grid."""
    coarse = rng.uniform(lo, hi, size=(grid, grid))
    ys = np.linspace(0, grid - 1, h)
    xs = np.linspace(0, grid - 1, w)
    y0 = np.minimum(ys.astype(int), grid - 2)
    x0 = np.minimum(xs.astype(int), grid - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = coarse[y0][:, x0]
    b = coarse[y0][:, x0 + 1]
    c = coarse[y0 + 1][:, x0]
    d = coarse[y0 + 1][:, x0 + 1]
    return (a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx + c * fy * (1 - fx) + d * fy * fx)


def target_mask(box, shape, h, w):
    x, y, bw, bh = box
    m = np.zeros((h, w), dtype=bool)
    if shape == "rect":
        m[y:y + bh, x:x + bw] = True
        return m
    yy, xx = np.mgrid[y:y + bh, x:x + bw]
    cy, cx = y + (bh - 1) / 2.0, x + (bw - 1) / 2.0
    inside = ((yy - cy) / (bh / 2.0)) ** 2 + ((xx - cx) / (bw / 2.0)) ** 2 <= 1.0
    m[y:y + bh, x:x + bw] = inside
    return m


def ring_mask(box, h, w, margin=None):
    x, y, bw, bh = box
    if margin is None:
        margin = max(2, int(0.5 * max(bw, bh)))
    outer = np.zeros((h, w), dtype=bool)
    outer[max(0, y - margin):y + bh + margin, max(0, x - margin):x + bw + margin] = True
    outer[y:y + bh, x:x + bw] = False
    return outer


def _trajectory(spec, rng, tags):
    """Integer boxes per frame honouring FM and SV schedules."""
    w0, h0 = spec.size
    W, H = spec.width, spec.height
    cx, cy = spec.start if spec.start is not None else (W / 2.0, H / 2.0)
    vx, vy = spec.velocity
    scale = 1.0
    sv_plan = {}
    f = 0
    while f < spec.length:
        if ChallengeLabel.SV in tags[f]:
            last = f
            while last + 1 < spec.length and ChallengeLabel.SV in tags[last + 1]:
                last += 1
            sv_plan[(f, last)] = None
            f = last + 1
        else:
            f += 1
    boxes = []
    ramp = None
    for f in range(spec.length):
        if f > 0:
            if ChallengeLabel.FM in tags[f]:
                step = rng.uniform(0.65, 0.85) * max(w0, h0) * scale
                base = np.arctan2(vy, vx) + rng.uniform(-0.6, 0.6)
                half = max(w0, h0) * scale / 2.0 + 1
                # jump direction chosen so the jump itself needs no bounce
                for k in range(16):
                    ang = base + k * np.pi / 8
                    dx, dy = step * np.cos(ang), step * np.sin(ang)
                    if half <= cx + dx <= W - half and half <= cy + dy <= H - half:
                        break
            else:
                dx, dy = vx, vy
            cx, cy = cx + dx, cy + dy
        for (first, last) in sv_plan:
            if f == first:
                grow = rng.random() < 0.5
                if max(w0, h0) * scale * 1.5 > 0.45 * min(W, H):
                    grow = False
                if min(w0, h0) * scale * 0.55 < 6:
                    grow = True
                ramp = (first, last, scale, 1.5 if grow else 0.55)
        if ramp is not None and ramp[0] <= f <= ramp[1]:
            first, last, s0, ratio = ramp
            scale = s0 * ratio ** ((f - first + 1) / (last - first + 1))
        bw = max(4, int(round(w0 * scale)))
        bh = max(4, int(round(h0 * scale)))
        # bounce inside a 1px margin
        lo_x, hi_x = 1 + bw / 2.0, W - 1 - bw / 2.0
        lo_y, hi_y = 1 + bh / 2.0, H - 1 - bh / 2.0
        if cx < lo_x or cx > hi_x:
            cx = float(np.clip(2 * np.clip(cx, lo_x, hi_x) - cx, lo_x, hi_x))
            vx = -vx
        if cy < lo_y or cy > hi_y:
            cy = float(np.clip(2 * np.clip(cy, lo_y, hi_y) - cy, lo_y, hi_y))
            vy = -vy
        x = int(round(cx - bw / 2.0))
        y = int(round(cy - bh / 2.0))
        x = min(max(x, 1), W - 1 - bw)
        y = min(max(y, 1), H - 1 - bh)
        boxes.append((x, y, bw, bh))
    return boxes


def render(spec):
    """Yield ``(rgb uint8 [H,W,3], thermal uint8 [H,W], box, tags)`` per frame."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    H, W = spec.height, spec.width
    tags = spec.tags()
    bg_rgb = np.stack([smooth_field(rng, H, W, 0.15, 0.65) for _ in range(3)], axis=-1)
    bg_t = smooth_field(rng, H, W, 0.2, 0.45)
    for _ in range(spec.clutter):
        cw, chh = rng.integers(6, 18, size=2)
        x0, y0 = rng.integers(0, W - cw), rng.integers(0, H - chh)
        bg_rgb[y0:y0 + chh, x0:x0 + cw] = rng.uniform(0.1, 0.9, size=3)
        bg_t[y0:y0 + chh, x0:x0 + cw] = rng.uniform(0.3, 0.6)
    occ_rgb = rng.uniform(0.3, 0.6, size=3)
    occ_t = float(rng.uniform(0.15, 0.25))
    boxes = _trajectory(spec, rng, tags)
    c1 = np.asarray(spec.rgb_color)
    c2 = np.asarray(spec.rgb_color2)

    for f in range(spec.length):
        box = boxes[f]
        x, y, bw, bh = box
        rgb = bg_rgb.copy()
        th = bg_t.copy()
        mask = target_mask(box, spec.shape, H, W)
        top = mask.copy()
        top[y + bh // 2:, :] = False
        rgb[mask] = c2
        rgb[top] = c1
        grad = np.linspace(spec.thermal_target, spec.thermal_target - 0.1, bh)[:, None]
        tpatch = np.broadcast_to(grad, (bh, bw))
        if ChallengeLabel.TC in tags[f]:
            ring = ring_mask(box, H, W)
            tpatch = np.full((bh, bw), th[ring].mean())
        sub = mask[y:y + bh, x:x + bw]
        th[y:y + bh, x:x + bw][sub] = tpatch[sub]
        if ChallengeLabel.OCC in tags[f]:
            first = f
            while first > 0 and ChallengeLabel.OCC in tags[first - 1]:
                first -= 1
            last = f
            while last + 1 < spec.length and ChallengeLabel.OCC in tags[last + 1]:
                last += 1
            ow, oh = int(np.ceil(0.75 * bw)) + 2, bh + 6
            frac = 0.0 if last == first else (f - first) / (last - first)
            ox = int(round(x - 1 + frac * (bw + 2 - ow)))
            oy = y - 3
            ys, xs = slice(max(oy, 0), min(oy + oh, H)), slice(max(ox, 0), min(ox + ow, W))
            rgb[ys, xs] = occ_rgb
            th[ys, xs] = occ_t
        if ChallengeLabel.IV in tags[f]:
            rgb = 0.3 * rgb ** 1.5
        rgb = rgb + rng.normal(0.0, spec.noise, size=rgb.shape)
        th = th + rng.normal(0.0, spec.noise, size=th.shape)
        rgb8 = np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8)
        t8 = np.round(np.clip(th, 0, 1) * 255).astype(np.uint8)
        yield rgb8, t8, BBox(*box), tags[f]


# ----------------------------------------------------------------- netpbm

def write_pnm(path, img):
    img = np.ascontiguousarray(img, dtype=np.uint8)
    magic = b"P6" if img.ndim == 3 else b"P5"
    h, w = img.shape[:2]
    Path(path).write_bytes(magic + b"\n%d %d\n255\n" % (w, h) + img.tobytes())


def read_pnm(path):
    data = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated header")
        tokens.append(data[start:pos])
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P5", b"P6") or maxval != 255:
        raise FormatError(f"{path}: only 8-bit binary P5/P6 supported")
    ch = 3 if magic == b"P6" else 1
    need = w * h * ch
    if len(data) - pos < need:
        raise FormatError(f"{path}: truncated pixel data")
    arr = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos)
    return arr.reshape(h, w, ch) if ch == 3 else arr.reshape(h, w)


# -------------------------------------------------------------- sequences

@dataclass
class FramePair:
    rgb8: np.ndarray      # [H,W,3] uint8
    t8: np.ndarray        # [H,W] uint8
    gt_rgb: BBox
    gt_t: BBox
    challenges: frozenset

    @property
    def rgb(self):
        """[3,H,W] float32 in [0,1]."""
        return self.rgb8.transpose(2, 0, 1).astype(np.float32) / 255.0

    @property
    def thermal(self):
        """[1,H,W] float32 in [0,1]."""
        return self.t8[None].astype(np.float32) / 255.0

    @property
    def size(self):
        return self.t8.shape


@dataclass
class Sequence:
    name: str
    frames: list

    def __len__(self):
        return len(self.frames)

    def gt(self, modality="rgb"):
        return np.array([f.gt_rgb if modality == "rgb" else f.gt_t for f in self.frames], dtype=np.float64)

    def tags(self):
        return [f.challenges for f in self.frames]


def format_box(b):
    return "%d,%d,%d,%d" % tuple(int(round(v)) for v in b)


def format_tags(tags):
    return " ".join(c.value for c in TAG_ORDER if c in tags)


def generate(spec, out_dir):
    """Render ``spec`` into ``out_dir``; returns the directory path."""
    out = Path(out_dir)
    try:
        (out / "rgb").mkdir(parents=True, exist_ok=True)
        (out / "t").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write sequence to {out}: {exc}") from exc
    gt, tag_lines = [], []
    for i, (rgb8, t8, box, tags) in enumerate(render(spec)):
        write_pnm(out / "rgb" / f"{i:06d}.ppm", rgb8)
        write_pnm(out / "t" / f"{i:06d}.pgm", t8)
        gt.append(format_box(box))
        tag_lines.append(format_tags(tags))
    text = "\n".join(gt) + "\n"
    (out / "gt_rgb.txt").write_text(text)
    (out / "gt_t.txt").write_text(text)
    (out / "challenges.txt").write_text("\n".join(tag_lines) + "\n")
    return out


def parse_box(line):
    parts = line.strip().split(",")
    if len(parts) != 4:
        raise FormatError(f"malformed ground-truth line {line!r}")
    try:
        vals = [float(p) for p in parts]
    except ValueError:
        raise FormatError(f"malformed ground-truth line {line!r}") from None
    return BBox(*vals)


def parse_tags(line):
    return frozenset(ChallengeLabel.parse(t) for t in line.split())


def _lines(path):
    if not path.exists():
        raise FileNotFoundError(f"missing {path}")
    text = path.read_text()
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return lines


def load_sequence(seq_dir):
    d = Path(seq_dir)
    gt_rgb = [parse_box(x) for x in _lines(d / "gt_rgb.txt")]
    gt_t = [parse_box(x) for x in _lines(d / "gt_t.txt")]
    tags = [parse_tags(x) for x in _lines(d / "challenges.txt")]
    n = len(gt_rgb)
    if len(gt_t) != n or len(tags) != n:
        raise FormatError(f"{d}: gt_rgb/gt_t/challenges line counts differ")
    frames = []
    for i in range(n):
        rp, tp = d / "rgb" / f"{i:06d}.ppm", d / "t" / f"{i:06d}.pgm"
        if not rp.exists() or not tp.exists():
            raise FileNotFoundError(f"{d}: missing frame {i:06d}")
        frames.append(FramePair(read_pnm(rp), read_pnm(tp), gt_rgb[i], gt_t[i], tags[i]))
    return Sequence(d.name, frames)


def is_sequence_dir(path):
    return (Path(path) / "gt_rgb.txt").exists()


def load_dataset(root):
    """A single sequence directory, or a directory of sequence directories."""
    root = Path(root)
    if is_sequence_dir(root):
        return [load_sequence(root)]
    dirs = sorted(p for p in root.iterdir() if p.is_dir() and is_sequence_dir(p))
    if not dirs:
        raise FileNotFoundError(f"no sequences under {root}")
    return [load_sequence(p) for p in dirs]


def challenge_subset(dataset, label):
    """``(sequence_index, frame_index)`` for every frame tagged with ``label``."""
    label = ChallengeLabel(label)
    return [(si, fi) for si, seq in enumerate(dataset) for fi, fr in enumerate(seq.frames) if label in fr.challenges]


# ------------------------------------------------------------ random specs

def random_spec(seed, length=100, challenges=None, height=128, width=128):
    """A randomized spec; ``challenges`` fixes the labels scheduled (one range each)."""
    rng = np.random.default_rng([seed, 7919])
    w, h = (int(v) for v in rng.integers(16, 30, size=2))
    speed = rng.uniform(0.4, 1.6)
    ang = rng.uniform(0, 2 * np.pi)
    if challenges is None:
        k = int(rng.integers(1, 3))
        challenges = [TAG_ORDER[i] for i in rng.choice(len(TAG_ORDER), size=k, replace=False)]
    sched = []
    span = max(4, length // 5)
    for lab in challenges:
        first = int(rng.integers(length // 5, max(length // 5 + 1, length - span)))
        sched.append((first, min(length - 1, first + span - 1), frozenset([ChallengeLabel(lab)])))
    c1 = rng.uniform(0.55, 1.0, size=3)
    c2 = rng.uniform(0.0, 0.45, size=3)
    return SequenceSpec(
        seed=int(seed), length=length, height=height, width=width,
        shape="ellipse" if rng.random() < 0.4 else "rect",
        size=(w, h), start=(float(rng.uniform(0.35, 0.65) * width), float(rng.uniform(0.35, 0.65) * height)),
        velocity=(float(speed * np.cos(ang)), float(speed * np.sin(ang))),
        rgb_color=tuple(float(v) for v in c1), rgb_color2=tuple(float(v) for v in c2),
        thermal_target=float(rng.uniform(0.75, 0.95)), noise=0.02, clutter=3, challenges=sched,
    ).validate()


def generate_dataset(out_dir, n, length=100, seed=0, challenge_cycle=None):
    """``n`` random sequences under ``out_dir/seq_XXX``.

    ``challenge_cycle`` (a list of label lists) assigns schedules round-robin.
    """
    out = Path(out_dir)
    paths = []
    for i in range(n):
        labels = challenge_cycle[i % len(challenge_cycle)] if challenge_cycle else None
        spec = random_spec(seed * 1000 + i, length, labels)
        paths.append(generate(spec, out / f"seq_{i:03d}"))
    return paths


__all__ = [
    "BBox", "FormatError", "FramePair", "Sequence", "SequenceSpec", "challenge_subset",
    "format_spec", "generate", "generate_dataset", "load_dataset", "load_sequence",
    "parse_spec", "random_spec", "render",
]
