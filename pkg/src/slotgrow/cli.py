"""Command-line entry point: gen-data, train, eval, infer, metrics, ablate."""

from __future__ import annotations

import argparse
import json
import sys
from collections import Counter
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .curriculum import SCHEDULE_KINDS, default_stage_fractions
from .data import GenConfig, generate_dataset, read_dataset, write_dataset
from .errors import ConfigError, FormatError, NumericalError
from .inference import INFERENCE_MODES, decode_masks, read_masks, run_inference, write_masks
from .losses import SSIM_MODES
from .metrics import DEFAULT_RHOS, aggregate, clip_metrics
from .trainer import TrainConfig, evaluate, load_checkpoint, load_features, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 2, 3

SECTIONS = ("adam", "loss", "schedule", "spawn", "arch", "feat")
CRITERIA = {"total": "total_error", "area": "area_normalized"}

# flag -> config key; every config key except the data paths has exactly one flag
FLAGS = {
    "--iters": "total_iters",
    "--batch-size": "batch_size",
    "--seed": "seed",
    "--warmup-frac": "warmup_frac",
    "--eval-every": "eval_every",
    "--checkpoint-every": "checkpoint_every",
    "--feat-seed": "feat_seed",
    "--lr": "adam.lr",
    "--adam-beta1": "adam.beta1",
    "--adam-beta2": "adam.beta2",
    "--adam-eps": "adam.eps",
    "--clip-norm": "adam.clip_norm",
    "--lambda-ssc": "loss.lambda_ssc",
    "--lambda-ssim": "loss.lambda_ssim",
    "--tau": "loss.tau",
    "--ssim-c1": "loss.ssim_c1",
    "--ssim-c2": "loss.ssim_c2",
    "--ssim-mode": "loss.ssim_mode",
    "--cos-eps": "loss.cos_eps",
    "--k-init": "schedule.k_init",
    "--sigma": "schedule.sigma_inc",
    "--stages": "schedule.stages",
    "--stage-fracs": "schedule.stage_fractions",
    "--schedule": "schedule.kind",
    "--beta": "spawn.beta",
    "--spawn-criterion": "spawn.criterion",
    "--ema-decay": "spawn.ema_decay",
    "--spawn-strategy": "spawn.strategy",
    "--d-slot": "arch.d_slot",
    "--proj-hidden": "arch.proj_hidden",
    "--mlp-hidden": "arch.mlp_hidden",
    "--dec-hidden": "arch.dec_hidden",
    "--d-pos": "arch.d_pos",
    "--iters-first": "arch.iters_first",
    "--iters-per-frame": "arch.iters",
    "--heads": "arch.heads",
    "--patch-size": "feat.patch_size",
    "--d-feat": "feat.d_feat",
    "--feat-gain": "feat.gain",
    "--pos-amplitude": "feat.pos_amplitude",
}
CHOICES = {
    "loss.ssim_mode": SSIM_MODES,
    "schedule.kind": SCHEDULE_KINDS,
    "spawn.criterion": tuple(CRITERIA),
    "spawn.strategy": ("guided", "random"),
}


# -- flat key=value run config -----------------------------------------------------
def flat_defaults(cfg: TrainConfig = TrainConfig()) -> dict[str, object]:
    out = {}
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if f.name in SECTIONS:
            for sf in fields(v):
                out[f"{f.name}.{sf.name}"] = getattr(v, sf.name)
        else:
            out[f.name] = v
    return out


def _parse_value(key: str, text: str, default):
    text = text.strip()
    try:
        if key in ("loss.ssim_c1", "loss.ssim_c2"):
            return None if text in ("auto", "") else float(text)
        if key == "schedule.stage_fractions":
            return tuple(float(x) for x in text.split(",") if x.strip())
        if isinstance(default, bool):
            return text.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value {text!r} for {key}") from None
    return text


def _format_value(v) -> str:
    if v is None:
        return "auto"
    if isinstance(v, tuple):
        return ",".join(repr(float(x)) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def parse_config_text(text: str) -> dict[str, object]:
    defaults = flat_defaults()
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in defaults:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        out[key] = _parse_value(key, value, defaults[key])
    return out


def serialize_config(cfg: TrainConfig) -> str:
    return "".join(f"{k}={_format_value(v)}\n" for k, v in flat_defaults(cfg).items())


def build_config(values: dict[str, object], base: TrainConfig = TrainConfig()) -> TrainConfig:
    top, sub = {}, {s: {} for s in SECTIONS}
    for key, v in values.items():
        if "." in key:
            section, name = key.split(".", 1)
            sub[section][name] = v
        else:
            top[key] = v
    for s, kv in sub.items():
        if kv:
            top[s] = replace(getattr(base, s), **kv)
    cfg = replace(base, **top)
    sched = cfg.schedule
    if "schedule.stage_fractions" not in values and len(sched.stage_fractions) != sched.stages - 1:
        cfg = replace(cfg, schedule=replace(sched, stage_fractions=default_stage_fractions(sched.stages)))
    cfg.validate()
    return cfg


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("run configuration (flags override --config)")
    g.add_argument("--config", help="flat key=value run config file")
    defaults = flat_defaults()
    for flag, key in FLAGS.items():
        d = defaults[key]
        if key == "spawn.criterion":
            d = next(k for k, v in CRITERIA.items() if v == d)
        g.add_argument(flag, dest=f"cfg:{key}", default=None, choices=CHOICES.get(key),
                       help=f"{key} (default: {_format_value(d)})")


def config_from_args(args) -> TrainConfig:
    values: dict[str, object] = {}
    if args.config:
        values.update(parse_config_text(Path(args.config).read_text()))
    defaults = flat_defaults()
    for k, v in vars(args).items():
        if k.startswith("cfg:") and v is not None:
            key = k[4:]
            if key == "spawn.criterion":
                v = CRITERIA[v]
            values[key] = _parse_value(key, v, defaults[key])
    return build_config(values)


# -- commands ---------------------------------------------------------------------
def _parse_range(text: str) -> tuple[int, int]:
    try:
        lo, hi = (int(x) for x in text.split("-"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected LO-HI, got {text!r}") from None
    if lo > hi or lo < 0:
        raise argparse.ArgumentTypeError(f"object range {text!r} is inverted or negative")
    return lo, hi


def _parse_rhos(text: str) -> tuple[float, ...]:
    try:
        rhos = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad threshold list {text!r}") from None
    if not rhos or any(not 0 < r <= 1 for r in rhos):
        raise argparse.ArgumentTypeError("thresholds must lie in (0, 1]")
    return rhos


def cmd_gen_data(args) -> int:
    lo, hi = args.objects
    cfg = GenConfig(frames=args.frames, height=args.size, width=args.size, min_objects=lo, max_objects=hi)
    cfg.validate()
    samples = generate_dataset(cfg, args.clips, args.seed)
    write_dataset(samples, args.out)
    hist = Counter(s.num_objects for s in samples)
    print("objects\tclips")
    for n in sorted(hist):
        print(f"{n}\t{hist[n]}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = config_from_args(args)
    cfg = replace(cfg, train_data=args.data, eval_data=args.eval_data or "")
    print(serialize_config(cfg), end="", file=sys.stderr if args.quiet else sys.stdout)
    resume = load_checkpoint(args.resume, expected=cfg) if args.resume else None
    try:
        state = train(cfg, args.data, log_path=args.log, checkpoint_path=args.out, resume=resume,
                      eval_data=args.eval_data)
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    print(f"trained {state.iteration} iterations, active_k={state.bank.active_k}, checkpoint {args.out}")
    return EXIT_OK


def _print_report(report) -> None:
    print("metric\tvalue")
    for k, v in report.values.items():
        print(f"{k}\t{'undefined' if v is None else f'{v:.6f}'}")


def _write_report(report, prefix: str | None) -> None:
    if prefix:
        Path(f"{prefix}.txt").write_text(report.to_lines())
        Path(f"{prefix}.json").write_text(report.to_json())


def cmd_eval(args) -> int:
    state = load_checkpoint(args.checkpoint)
    report = evaluate(state, args.data, args.inference, args.chunk, args.rho)
    _write_report(report, args.report)
    _print_report(report)
    return EXIT_OK


def cmd_infer(args) -> int:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    targets = [("", args.checkpoint)]
    if args.stage_dumps:
        targets += [(f".stage{m}", p) for m in range(8) if Path(p := f"{args.checkpoint}.stage{m}").exists()]
    for suffix, path in targets:
        state = load_checkpoint(path)
        fs = load_features(args.data, state.cfg)
        states = run_inference(fs.p, state.bank, state.params, args.inference, args.chunk)
        H, W = fs.frame_size
        masks = decode_masks(states, state.params, H, W, state.cfg.feat.patch_size)
        for cid, pred in zip(fs.clip_ids, masks.pred):
            write_masks(pred, out / f"{cid}{suffix}.scm", num_slots=state.bank.active_k)
        print(f"wrote {len(fs.clip_ids)} mask dumps (K={state.bank.active_k}) from {path}")
    return EXIT_OK


def cmd_metrics(args) -> int:
    samples = read_dataset(args.data)
    per_clip = []
    for i, s in enumerate(samples):
        path = Path(args.masks) / f"{s.clip_id}.scm"
        pred, _ = read_masks(path)
        per_clip.append({"clip_id": s.clip_id, "metrics": clip_metrics(pred, s.gt_masks, args.rho)})
    report = aggregate(per_clip, args.rho)
    _write_report(report, args.report)
    _print_report(report)
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .study import SWEEPS, run_sweep

    base = config_from_args(args)
    if args.sweep not in SWEEPS:
        print(f"unknown sweep {args.sweep!r}; choose from {sorted(SWEEPS)}", file=sys.stderr)
        return EXIT_USAGE
    try:
        rows = run_sweep(args.sweep, base, args.data, args.eval_data, args.out_dir, rhos=args.rho, jobs=args.jobs)
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    keys = ["fg_ari_video", "fg_ari_image", "mbo"] + [f"{m}@{r:g}" for m in ("oir", "dof", "duf") for r in args.rho]
    print("\t".join(["cell"] + keys))
    for row in rows:
        vals = [row["metrics"].get(k) for k in keys]
        print("\t".join([row["cell"]] + ["undefined" if v is None else f"{v:.6f}" for v in vals]))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="slotgrow", description=__doc__,
                                formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic clip dataset")
    g.add_argument("--clips", type=int, default=200)
    g.add_argument("--seed", type=int, default=1)
    g.add_argument("--frames", type=int, default=6)
    g.add_argument("--size", type=int, default=64, help="frame height and width in pixels")
    g.add_argument("--objects", type=_parse_range, default=(2, 4), help="object count range LO-HI")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model", formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    t.add_argument("--data", required=True, help="training dataset (SCV1)")
    t.add_argument("--eval-data", help="dataset for periodic evaluation")
    t.add_argument("--out", required=True, help="checkpoint path (SCK1)")
    t.add_argument("--log", help="JSON-lines training log")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--quiet", action="store_true", help="echo the effective config to stderr instead of stdout")
    _add_config_flags(t)
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "evaluate a checkpoint"),
                                 ("infer", cmd_infer, "dump predicted masks")):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--checkpoint", required=True)
        e.add_argument("--data", required=True)
        e.add_argument("--inference", choices=INFERENCE_MODES, default="forward")
        e.add_argument("--chunk", type=int, default=None, help="chunk length for chunked inference")
        if name == "eval":
            e.add_argument("--rho", type=_parse_rhos, default=DEFAULT_RHOS)
            e.add_argument("--report", help="write <prefix>.txt and <prefix>.json")
        else:
            e.add_argument("--out-dir", required=True)
            e.add_argument("--stage-dumps", action="store_true", help="also dump pre-expansion snapshots")
        e.set_defaults(func=func)

    m = sub.add_parser("metrics", help="score SCM1 mask dumps against a dataset")
    m.add_argument("--masks", required=True, help="directory of <clip_id>.scm files")
    m.add_argument("--data", required=True)
    m.add_argument("--rho", type=_parse_rhos, default=DEFAULT_RHOS)
    m.add_argument("--report")
    m.set_defaults(func=cmd_metrics)

    a = sub.add_parser("ablate", help="one-factor sweep", formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    a.add_argument("--sweep", required=True, help="M, beta, lambda-ssim, K, schedule or components")
    a.add_argument("--data", required=True)
    a.add_argument("--eval-data", required=True)
    a.add_argument("--out-dir", required=True)
    a.add_argument("--rho", type=_parse_rhos, default=DEFAULT_RHOS)
    a.add_argument("--jobs", type=int, default=1)
    _add_config_flags(a)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for attr in ("data", "checkpoint", "eval_data", "config", "resume", "masks"):
        path = getattr(args, attr, None)
        if path and args.command != "gen-data" and not Path(path).exists():
            print(f"missing file: {path}", file=sys.stderr)
            return EXIT_USAGE
    if args.command in ("eval", "infer") and args.inference == "chunked" and args.chunk is None:
        parser.error("--inference chunked needs --chunk")
    try:
        return args.func(args)
    except (ConfigError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
