"""One-factor sweeps and the desk-scale comparison study.

Each trained cell is cached on disk under a key derived from its full config
and a hash of the package sources, so repeated runs of the same code reuse
results instead of retraining.
"""

from __future__ import annotations

import hashlib
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

from .curriculum import default_stage_fractions
from .data import GenConfig, generate_dataset
from .metrics import DEFAULT_RHOS
from .trainer import TrainConfig, evaluate, load_features, save_checkpoint, train, with_overrides

PACKAGE_DIR = Path(__file__).resolve().parent


# modules that cannot change a trained cell's numbers
_NOT_HASHED = {"cli.py", "study.py"}


def source_digest() -> str:
    h = hashlib.sha256()
    for path in sorted(PACKAGE_DIR.rglob("*.py")):
        if path.name in _NOT_HASHED:
            continue
        h.update(path.relative_to(PACKAGE_DIR).as_posix().encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


@dataclass(frozen=True)
class Cell:
    name: str
    make: Callable[[TrainConfig], TrainConfig]
    inference: str = "forward"


def _stages(m: int):
    return lambda c: with_overrides(c, schedule={"stages": m, "stage_fractions": default_stage_fractions(m)})


def _k_final(k: int):
    def make(c: TrainConfig) -> TrainConfig:
        s = c.schedule
        # three-stage accelerated rule: K_final = k_init + 2 sigma + 3
        sigma, odd = divmod(k - s.k_init - 3, 2)
        if odd or sigma < 0:
            raise ValueError(f"K_final={k} unreachable from k_init={s.k_init} with three accelerated stages")
        return with_overrides(c, schedule={"sigma_inc": sigma, "stages": 3,
                                           "stage_fractions": default_stage_fractions(3), "kind": "accelerated"})
    return make


def fixed_budget(k: int):
    """Single-stage run with ``k`` slots from the start."""
    return lambda c: with_overrides(c, schedule={"k_init": k, "stages": 1, "stage_fractions": ()})


def _no_ssim(c: TrainConfig) -> TrainConfig:
    return with_overrides(c, loss={"ssim_mode": "off"})


def _components() -> list[Cell]:
    def baseline(c):
        return _no_ssim(fixed_budget(c.schedule.k_final)(c))

    def simple(c):
        return _no_ssim(with_overrides(c, spawn={"strategy": "random"}))

    def guided(c):
        return _no_ssim(with_overrides(c, spawn={"strategy": "guided"}))

    def guided_ssim(c):
        return with_overrides(c, spawn={"strategy": "guided"}, loss={"ssim_mode": "3d"})

    return [
        Cell("baseline", baseline),
        Cell("simple", simple),
        Cell("simple+cycle", simple, "cyclic"),
        Cell("rg", guided),
        Cell("rg+ssim", guided_ssim),
        Cell("rg+ssim+cycle", guided_ssim, "cyclic"),
    ]


SWEEPS: dict[str, list[Cell]] = {
    "M": [Cell(f"M={m}", _stages(m)) for m in (2, 3, 4)],
    "beta": [Cell(f"beta={b}", lambda c, b=b: with_overrides(c, spawn={"beta": b})) for b in (0.1, 0.2, 0.3)],
    "lambda-ssim": [
        Cell(f"lambda_ssim={v}", lambda c, v=v: with_overrides(c, loss={"lambda_ssim": v})) for v in (0.02, 0.05, 0.07)
    ],
    "K": [Cell(f"K={k}", _k_final(k)) for k in (7, 11, 15)],
    "schedule": [
        Cell(kind, lambda c, kind=kind: with_overrides(c, schedule={"kind": kind}))
        for kind in ("accelerated", "linear", "decelerated")
    ],
    "components": _components(),
}


def _cell_key(cfg: TrainConfig) -> str:
    payload = json.dumps({"cfg": cfg.to_dict(), "src": source_digest()}, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:20]


def _run_cell(job: tuple) -> dict:
    cfg, inference, train_data, eval_data, out_dir, rhos = job
    key = _cell_key(cfg)
    out = Path(out_dir)
    result_path = out / f"{key}.{inference}.json"
    if result_path.exists():
        return json.loads(result_path.read_text())
    ckpt = out / f"{key}.sck"
    if ckpt.exists():
        from .trainer import load_checkpoint

        state = load_checkpoint(ckpt)
    else:
        log = out / f"{key}.log"
        log.unlink(missing_ok=True)
        t0 = time.perf_counter()
        state = train(cfg, train_data, log_path=log)
        (out / f"{key}.seconds").write_text(f"{time.perf_counter() - t0:.3f}\n")
        save_checkpoint(state, ckpt)
    report = evaluate(state, eval_data, inference, rhos=rhos)
    timing = out / f"{key}.seconds"
    result = {"key": key, "inference": inference, "config": cfg.to_dict(), "metrics": report.values,
              "undefined": report.undefined,
              "train_seconds": float(timing.read_text()) if timing.exists() else None}
    result_path.write_text(json.dumps(result, indent=2, sort_keys=True))
    return result


def run_cells(jobs: list[tuple[str, TrainConfig, str]], train_data, eval_data, out_dir, rhos=DEFAULT_RHOS,
              workers: int = 1) -> list[dict]:
    """Train (or reuse) and evaluate each ``(name, cfg, inference)``; identical configs train once."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    args = [(cfg, inf, train_data, eval_data, str(out), tuple(rhos)) for _, cfg, inf in jobs]
    # forward-mode jobs first so cyclic variants find the checkpoint already trained
    order = sorted(range(len(args)), key=lambda i: args[i][1] != "forward")
    results: dict[int, dict] = {}
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            for i, r in zip(order, pool.map(_run_cell, [args[i] for i in order])):
                results[i] = r
    else:
        for i in order:
            results[i] = _run_cell(args[i])
    return [{"cell": name, **results[i]} for i, (name, _, _) in enumerate(jobs)]


def run_sweep(name: str, base: TrainConfig, train_data, eval_data, out_dir, rhos=DEFAULT_RHOS,
              jobs: int = 1) -> list[dict]:
    """Cells get seed ``base.seed + index`` over distinct trainings; inference-only variants share a run."""
    cells = SWEEPS[name]
    specs, seeds = [], {}
    for cell in cells:
        cfg = cell.make(base)
        tag = cfg.digest()
        seeds.setdefault(tag, base.seed + len(seeds))
        specs.append((cell.name, replace(cfg, seed=seeds[tag]), cell.inference))
    rows = run_cells(specs, train_data, eval_data, out_dir, rhos, jobs)
    summary = Path(out_dir) / "summary.tsv"
    keys = list(rows[0]["metrics"])
    lines = ["\t".join(["cell", "inference", *keys])]
    for r in rows:
        vals = ["undefined" if r["metrics"][k] is None else f"{r['metrics'][k]:.6f}" for k in keys]
        lines.append("\t".join([r["cell"], r["inference"], *vals]))
    summary.write_text("\n".join(lines) + "\n")
    return rows


# -- desk-scale comparison study ---------------------------------------------------
STUDY_SEEDS = (0, 1, 2)
STUDY_TRAIN = dict(clips=200, seed=1)
STUDY_EVAL = dict(clips=50, seed=999)


def study_jobs(base: TrainConfig = TrainConfig()) -> list[tuple[str, TrainConfig, str]]:
    """Runs backing the directional checks: K_final 7 and 15, three seeds each.

    The doubled budget uses the three-stage accelerated schedule ending at 15
    (the rule with k_init=2 only reaches odd K_final, so 14 is not available).
    """
    full7 = _k_final(7)(base)
    full15 = _k_final(15)(base)
    jobs = []
    for seed in STUDY_SEEDS:
        jobs += [
            (f"full/K7/s{seed}", replace(full7, seed=seed), "cyclic"),
            (f"rg_nossim/K7/s{seed}", replace(_no_ssim(full7), seed=seed), "forward"),
            (f"baseline/K7/s{seed}", replace(_no_ssim(fixed_budget(7)(base)), seed=seed), "forward"),
            (f"full/K15/s{seed}", replace(full15, seed=seed), "cyclic"),
            (f"baseline/K15/s{seed}", replace(_no_ssim(fixed_budget(15)(base)), seed=seed), "forward"),
        ]
    return jobs


def study_data():
    cfg = GenConfig()
    return generate_dataset(cfg, STUDY_TRAIN["clips"], STUDY_TRAIN["seed"]), generate_dataset(
        cfg, STUDY_EVAL["clips"], STUDY_EVAL["seed"]
    )


def run_study(out_dir, base: TrainConfig = TrainConfig(), workers: int = 1) -> dict[str, dict]:
    train_ds, eval_ds = study_data()
    fs_train, fs_eval = load_features(train_ds, base), load_features(eval_ds, base)
    rows = run_cells(study_jobs(base), fs_train, fs_eval, out_dir, workers=workers)
    return {r["cell"]: r for r in rows}


def _mean(rows: dict[str, dict], method: str, k: int, metric: str) -> float:
    vals = [rows[f"{method}/K{k}/s{s}"]["metrics"][metric] for s in STUDY_SEEDS]
    if any(v is None for v in vals):
        raise ValueError(f"{metric} undefined for some {method}/K{k} seeds")
    return sum(vals) / len(vals)


def summarize_study(rows: dict[str, dict]) -> dict[str, float]:
    s = {}
    for method in ("full", "rg_nossim", "baseline"):
        s[f"{method}.K7.fg_ari"] = _mean(rows, method, 7, "fg_ari_video")
    s["full.K7.dof@0.5"] = _mean(rows, "full", 7, "dof@0.5")
    s["baseline.K7.dof@0.5"] = _mean(rows, "baseline", 7, "dof@0.5")
    for method in ("full", "baseline"):
        s[f"{method}.K15.fg_ari"] = _mean(rows, method, 15, "fg_ari_video")
        a, b = s[f"{method}.K7.fg_ari"], s[f"{method}.K15.fg_ari"]
        s[f"{method}.degradation"] = (a - b) / abs(a)
    return s
