"""Command-line entry point: ``catrack <subcommand> [options]``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from . import synth
from .challenge import BRANCH_ORDER, Mode, VariantFlags, dump_activations
from .config import Config, ConfigError, load_config
from .geometry import MiningError, crop_resample, search_region
from .model import CatModel, preprocess
from .nn.checkpoint import CheckpointError
from .nn.tensor import NumericError, ShapeError
from .training import StageError, train_all, write_log
from .tracker import read_results, run_sequence, write_results

log = logging.getLogger("catrack")

STAGES = {"pretrain": ("pretrain",), "1": ("I",), "2": ("II",), "3": ("III",)}


# ------------------------------------------------------------------ config

def build_config(args):
    """Defaults, then the config file, then explicit flags."""
    cfg = load_config(args.config) if getattr(args, "config", None) else Config()
    values = {}
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    for key in ("seed", "workers", "epoch_scale", "variant", "layers"):
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    return cfg.update(values)


def announce(cfg, title):
    print(f"# {title}", file=sys.stderr)
    sys.stderr.write("".join(f"#   {line}\n" for line in cfg.dumps().splitlines()))


def workers(cfg):
    return cfg.workers if cfg.workers > 0 else (os.cpu_count() or 1)


# -------------------------------------------------------------- commands

def cmd_generate(args):
    if args.spec:
        spec = synth.parse_spec(Path(args.spec).read_text())
        if args.seed is not None:
            spec.seed = args.seed
        out = synth.generate(spec.validate(), args.out)
        print(out)
    else:
        cycle = [[c.value] for c in BRANCH_ORDER] if args.cycle else None
        paths = synth.generate_dataset(args.out, args.random, args.length, seed=args.seed or 0,
                                       challenge_cycle=cycle)
        for p in paths:
            print(p)
    return 0


def cmd_train(args):
    cfg = build_config(args)
    announce(cfg, "train")
    dataset = synth.load_dataset(args.data)
    if args.stage == "all":
        stages = (("pretrain",) if cfg.pretrain and not args.init else ()) + ("I", "II", "III")
    else:
        stages = STAGES[args.stage]
    model = None
    if args.init:
        model = CatModel.load(args.init, flags=VariantFlags.parse(cfg.variant, cfg.layers))
    elif stages[0] in ("II", "III"):
        raise StageError(f"stage {stages[0]} needs --init with a checkpoint from the previous stage")
    model, baseline, rows = train_all(dataset, cfg, stages, model)
    model.save(args.out)
    write_log(args.log or f"{args.out}.log.csv", rows)
    if baseline is not None and args.baseline_out:
        baseline.save(args.baseline_out)
    print(args.out)
    return 0


def _variant(cfg, model, given):
    if given is None and not model.has_branches:
        return VariantFlags(Mode.BASELINE)
    return VariantFlags.parse(cfg.variant, cfg.layers)


def _track_one(job):
    ckpt, seq_dir, out, cfg, variant_given = job
    model = CatModel.load(ckpt)
    seq = synth.load_sequence(seq_dir)
    flags = _variant(cfg, model, variant_given)
    res = run_sequence(model, seq, cfg, flags, seed=cfg.seed)
    write_results(out, res.boxes, res.scores)
    return seq.name, res.fps


def cmd_track(args):
    cfg = build_config(args)
    announce(cfg, "track")
    seq_root = Path(args.seq)
    if synth.is_sequence_dir(seq_root):
        jobs = [(args.ckpt, seq_root, args.out, cfg, args.variant)]
    else:
        dirs = sorted(p for p in seq_root.iterdir() if synth.is_sequence_dir(p))
        if not dirs:
            raise FileNotFoundError(f"no sequences under {seq_root}")
        Path(args.out).mkdir(parents=True, exist_ok=True)
        jobs = [(args.ckpt, d, Path(args.out) / f"{d.name}.txt", cfg, args.variant) for d in dirs]
    n = min(workers(cfg), len(jobs))
    if n > 1:
        with ProcessPoolExecutor(n) as pool:
            done = list(pool.map(_track_one, jobs))
    else:
        done = [_track_one(j) for j in jobs]
    for name, fps in done:
        print(f"{name}: {fps:.1f} fps", file=sys.stderr)
    return 0


def _load_runs(specs, dataset):
    runs = {}
    for item in specs:
        variant, _, path = item.rpartition("=")
        path = Path(path)
        variant = variant or path.stem
        if path.is_dir():
            runs[variant] = {s.name: read_results(path / f"{s.name}.txt")[0] for s in dataset}
        else:
            if len(dataset) != 1:
                raise ValueError(f"{path} is a single results file but the dataset has {len(dataset)} sequences")
            runs[variant] = {dataset[0].name: read_results(path)[0]}
    return runs


def cmd_eval(args):
    from .metrics import report

    dataset = synth.load_dataset(args.data)
    rows = report(_load_runs(args.results, dataset), dataset, args.out, args.format)
    print("variant,attribute,frames,pr5,pr20,sr,mpr20,msr")
    for r in rows:
        print(f"{r['variant']},{r['attribute']},{r['frames']},{r['pr5']:.4f},{r['pr20']:.4f},"
              f"{r['sr']:.4f},{r['mpr20']:.4f},{r['msr']:.4f}")
    return 0


def cmd_dump(args):
    model = CatModel.load(args.ckpt)
    cfg = build_config(args)
    seq = synth.load_sequence(args.seq)
    if not 0 <= args.frame < len(seq):
        raise ValueError(f"frame {args.frame} outside 0..{len(seq) - 1}")
    fr = seq.frames[args.frame]
    region = search_region(fr.gt_rgb, cfg.context)
    s = model.cfg.input_size
    rgb = preprocess(crop_resample(fr.rgb, region, s))
    t = preprocess(crop_resample(fr.thermal, region, s))
    for p in dump_activations(rgb, t, model, args.out, _variant(cfg, model, args.variant)):
        print(p)
    return 0


def cmd_plot(args):
    from .metrics import read_curves_csv
    from .plots import plot_curves

    Path(args.out).mkdir(parents=True, exist_ok=True)
    for p in plot_curves(read_curves_csv(args.curves), args.out, args.format):
        print(p)
    return 0


def cmd_bench(args):
    import json

    from .benchmark import check, run_benchmark

    cfg = build_config(args)
    announce(cfg, "bench")
    seeds = [int(s) for s in args.seeds.split(",")]
    summary = run_benchmark(args.root, seeds, cfg)
    print(json.dumps({"median": summary["median"], "seconds": summary["seconds"], "checks": check(summary)},
                     indent=2))
    return 0


# ------------------------------------------------------------------ parser

def _common(p, config=True):
    if config:
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
        p.add_argument("--workers", type=int, help="worker processes (default: all cores)")
    p.add_argument("--seed", type=int, help="random seed")


def build_parser():
    ap = argparse.ArgumentParser(prog="catrack", description="Challenge-aware RGB-thermal tracker.")
    ap.add_argument("--log-level", default="WARNING", help="logging level for stderr (default WARNING)")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("generate", help="render synthetic RGB-T sequences")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--spec", help="sequence spec file (key = value)")
    g.add_argument("--random", type=int, metavar="N", help="generate N random sequences")
    p.add_argument("--length", type=int, default=100, help="frames per random sequence")
    p.add_argument("--cycle", action="store_true",
                   help="give random sequences one challenge each, rotating FM,SV,OCC,IV,TC")
    p.add_argument("--out", required=True, help="output directory")
    _common(p, config=False)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="offline training (pretrain, stages 1-3)")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--stage", choices=["pretrain", "1", "2", "3", "all"], default="all")
    p.add_argument("--init", help="checkpoint to continue from")
    p.add_argument("--out", required=True, help="output checkpoint")
    p.add_argument("--baseline-out", help="also save the pretrained baseline checkpoint here")
    p.add_argument("--log", help="training log CSV (default: <out>.log.csv)")
    p.add_argument("--epoch-scale", dest="epoch_scale", type=float, help="multiplier on all epoch counts")
    p.add_argument("--variant", choices=[m.value for m in Mode])
    p.add_argument("--layers", help="layers with challenge branches, e.g. 1,2,3")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("track", help="track one sequence or every sequence in a directory")
    p.add_argument("--ckpt", required=True, help="trained checkpoint")
    p.add_argument("--seq", required=True, help="sequence directory (or a directory of them)")
    p.add_argument("--out", required=True, help="results file (or directory for many sequences)")
    p.add_argument("--variant", choices=[m.value for m in Mode])
    p.add_argument("--layers", help="layers with challenge branches, e.g. 1,2,3")
    _common(p)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="precision/success report with plots")
    p.add_argument("--data", required=True, help="dataset (ground truth) directory")
    p.add_argument("--results", required=True, nargs="+", metavar="[VARIANT=]PATH",
                   help="results file, or directory of <sequence>.txt files")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--format", choices=["svg", "png", "pdf"], default="svg")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("dump-activations", help="write per-branch heat maps as PGM files")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--seq", required=True)
    p.add_argument("--frame", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", choices=[m.value for m in Mode])
    p.add_argument("--layers", help="layers with challenge branches, e.g. 1,2,3")
    _common(p)
    p.set_defaults(func=cmd_dump)

    p = sub.add_parser("plot", help="re-render pr/sr plots from curves.csv")
    p.add_argument("--curves", required=True, help="curves.csv written by eval")
    p.add_argument("--out", required=True)
    p.add_argument("--format", choices=["svg", "png", "pdf"], default="svg")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("bench", help="synthetic benchmark: baseline vs challenge-aware model")
    p.add_argument("--root", required=True, help="dataset cache directory")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--epoch-scale", dest="epoch_scale", type=float, default=0.05)
    _common(p)
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError, KeyError, ConfigError, StageError, MiningError, CheckpointError,
            NumericError, ShapeError, synth.FormatError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"catrack {args.cmd}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
