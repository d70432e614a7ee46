"""Training loop, checkpoints (SCK1) and evaluation."""

from __future__ import annotations

import hashlib
import json
import math
import struct
import warnings
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import Tensor, backward
from .curriculum import CurriculumSchedule, ErrorEMA, SpawnConfig, expand, slot_error_mass, slots_at_stage
from .data import FeatConfig, Featurizer, VideoSample, check_magic, read_dataset
from .errors import ConfigError, FormatError, NumericalError
from .inference import decode_masks, run_inference
from .losses import LossConfig, compute_losses
from .metrics import DEFAULT_RHOS, MetricsReport, aggregate, clip_metrics
from .model import ModelConfig, ModelParams, SlotBank, decode, init_params, make_bank, project, rollout
from .optim import Adam, AdamConfig, clip_global_norm, warmup_lr


@dataclass(frozen=True)
class ArchConfig:
    """Model widths; the slot capacity and feature width are derived from other sections."""

    d_slot: int = 32
    proj_hidden: int = 64
    mlp_hidden: int = 64
    dec_hidden: int = 32
    d_pos: int = 16
    iters_first: int = 3
    iters: int = 2
    heads: int = 1


@dataclass(frozen=True)
class TrainConfig:
    total_iters: int = 3000
    batch_size: int = 8
    seed: int = 0
    warmup_frac: float = 0.05
    eval_every: int = 0  # 0 disables periodic evaluation
    checkpoint_every: int = 0
    feat_seed: int = 1234
    train_data: str = ""
    eval_data: str = ""
    adam: AdamConfig = AdamConfig()
    loss: LossConfig = LossConfig()
    schedule: CurriculumSchedule = CurriculumSchedule()
    spawn: SpawnConfig = SpawnConfig()
    arch: ArchConfig = ArchConfig()
    feat: FeatConfig = FeatConfig()

    def validate(self) -> None:
        if self.total_iters < 1:
            raise ConfigError(f"total_iters must be >= 1, got {self.total_iters}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0 <= self.warmup_frac < 1:
            raise ConfigError(f"warmup_frac must be in [0, 1), got {self.warmup_frac}")
        self.adam.validate()
        self.loss.validate()
        self.schedule.validate()
        self.spawn.validate()
        if self.arch.d_slot % self.arch.heads:
            raise ConfigError(f"d_slot {self.arch.d_slot} not divisible by {self.arch.heads} heads")
        if self.schedule.stages > 1:
            self.schedule.boundaries(self.total_iters)
        if self.loss.lambda_ssc > 0 and self.batch_size * self.schedule.k_init < 2:
            raise ConfigError("contrastive loss needs batch_size * k_init >= 2")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        sections = {f.name: f.type for f in fields(cls)}
        kw = {}
        for k, v in d.items():
            if isinstance(v, dict):
                sub = {"adam": AdamConfig, "loss": LossConfig, "schedule": CurriculumSchedule,
                       "spawn": SpawnConfig, "arch": ArchConfig, "feat": FeatConfig}[k]
                v = sub(**{kk: tuple(vv) if isinstance(vv, list) else vv for kk, vv in v.items()})
            elif k not in sections:
                raise ConfigError(f"unknown config key {k!r}")
            kw[k] = v
        return cls(**kw)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    def model_config(self, grid_cells: int) -> ModelConfig:
        a = self.arch
        return ModelConfig(
            d_feat=self.feat.d_feat, n_patches=grid_cells, d_slot=a.d_slot, proj_hidden=a.proj_hidden,
            mlp_hidden=a.mlp_hidden, dec_hidden=a.dec_hidden, d_pos=a.d_pos, k_max=self.schedule.k_final,
            iters_first=a.iters_first, iters=a.iters, heads=a.heads,
        )

    @property
    def warmup_steps(self) -> int:
        return math.ceil(self.warmup_frac * self.total_iters)


@dataclass
class TrainState:
    cfg: TrainConfig
    params: ModelParams
    bank: SlotBank
    optimizer: Adam
    rng: np.random.Generator
    ema: ErrorEMA
    stage: int = 0
    iteration: int = 0
    grid: tuple[int, int] = (8, 8)
    events: list = field(default_factory=list)


@dataclass
class FeatureSet:
    """Featurized clips: p [n, T, N, D], gt masks [n, T, H, W]."""

    p: np.ndarray
    gt: np.ndarray
    grid_h: int
    grid_w: int
    clip_ids: list[str]

    @property
    def frame_size(self) -> tuple[int, int]:
        return self.gt.shape[-2], self.gt.shape[-1]


def featurize_dataset(samples: Sequence[VideoSample], feat: FeatConfig, seed: int) -> FeatureSet:
    if not samples:
        raise ConfigError("dataset is empty")
    shapes = {s.frames.shape for s in samples}
    if len(shapes) != 1:
        raise ConfigError(f"clips differ in shape: {sorted(shapes)}")
    _, _, H, W = samples[0].frames.shape
    P = feat.patch_size
    if H % P or W % P:
        raise ConfigError(f"frame {H}x{W} not divisible by patch size {P}")
    fz = Featurizer(feat, seed, H // P, W // P)
    p = np.stack([fz(s.frames).p for s in samples])
    gt = np.stack([s.gt_masks for s in samples])
    return FeatureSet(p, gt, H // P, W // P, [s.clip_id for s in samples])


def load_features(path_or_samples, cfg: TrainConfig) -> FeatureSet:
    if isinstance(path_or_samples, FeatureSet):
        return path_or_samples
    samples = read_dataset(path_or_samples) if isinstance(path_or_samples, (str, Path)) else path_or_samples
    return featurize_dataset(samples, cfg.feat, cfg.feat_seed)


def init_state(cfg: TrainConfig, grid: tuple[int, int]) -> TrainState:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    params = init_params(cfg.model_config(grid[0] * grid[1]), rng)
    bank = make_bank(params, cfg.schedule.k_init)
    opt = Adam({k: t.shape for k, t in params.items()}, cfg.adam)
    return TrainState(cfg, params, bank, opt, rng, ErrorEMA(cfg.spawn.ema_decay), grid=grid)


class TrainLog:
    """Append-only JSON-lines log; a no-op when no path is given."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def train_step(state: TrainState, data: FeatureSet, log: TrainLog) -> dict:
    cfg = state.cfg
    i = state.iteration
    sched = cfg.schedule
    if state.stage + 1 < sched.stages and i == sched.boundaries(cfg.total_iters)[state.stage]:
        event = expand(state.params, state.bank, state.optimizer, sched, cfg.spawn, state.ema.value,
                       state.stage + 1, state.rng, iteration=i)
        state.stage += 1
        state.ema.reset()
        state.events.append(event)
        log.write(event.to_record())

    idx = state.rng.integers(0, data.p.shape[0], size=cfg.batch_size)
    p = Tensor(data.p[idx])
    params = state.params
    params.zero_grad()
    slots = rollout(project(p, params), state.bank, params)
    dec = decode(slots, params)
    parts = compute_losses(dec.p_hat, p, slots, cfg.loss, data.grid_h, data.grid_w)
    if not math.isfinite(parts.total):
        record = {"event": "nan_abort", "iter": i, "batch": idx.tolist(), **parts.as_dict()}
        log.write(record)
        raise NumericalError(f"non-finite loss at iteration {i}: batch clips {idx.tolist()}, terms {parts.as_dict()}")
    backward(parts.total_tensor)
    grads = {k: t.grad if t.grad is not None else np.zeros(t.shape) for k, t in params.items()}
    grad_norm = clip_global_norm(grads, cfg.adam.clip_norm)
    lr = warmup_lr(cfg.adam.lr, i, cfg.warmup_steps)
    state.optimizer.step({k: t.data for k, t in params.items()}, grads, lr)
    state.ema.update(slot_error_mass(dec.alpha.data, parts.mse_map, cfg.spawn.criterion))
    state.iteration += 1
    record = {"iter": i, "k": state.bank.active_k, "lr": lr, "grad_norm": grad_norm, **parts.as_dict()}
    log.write(record)
    return record


def train(cfg: TrainConfig, data=None, log_path=None, checkpoint_path=None, resume: TrainState | None = None,
          stop_at: int | None = None, eval_data=None) -> TrainState:
    """Run (or continue) training up to ``cfg.total_iters`` (or ``stop_at``).

    ``data`` is a dataset path, a list of clips, or a FeatureSet; it defaults
    to ``cfg.train_data``. Checkpoints go to ``checkpoint_path`` every
    ``cfg.checkpoint_every`` iterations and at the end; a copy is kept just
    before each expansion as ``<checkpoint>.stage<m>``.
    """
    fs = load_features(data if data is not None else cfg.train_data, cfg)
    state = resume if resume is not None else init_state(cfg, (fs.grid_h, fs.grid_w))
    if (fs.grid_h, fs.grid_w) != state.grid:
        raise ConfigError(f"dataset grid {fs.grid_h}x{fs.grid_w} differs from model grid {state.grid}")
    log = TrainLog(log_path)
    if resume is None:
        log.write({"event": "config", "config": cfg.to_dict(), "digest": cfg.digest()})
    eval_fs = load_features(eval_data, cfg) if (eval_data is not None and cfg.eval_every) else None
    end = cfg.total_iters if stop_at is None else min(stop_at, cfg.total_iters)
    boundaries = set(cfg.schedule.boundaries(cfg.total_iters)) if cfg.schedule.stages > 1 else set()
    while state.iteration < end:
        if checkpoint_path and state.iteration in boundaries:
            save_checkpoint(state, f"{checkpoint_path}.stage{state.stage}")
        train_step(state, fs, log)
        it = state.iteration
        if checkpoint_path and cfg.checkpoint_every and it % cfg.checkpoint_every == 0 and it < end:
            save_checkpoint(state, checkpoint_path)
        if eval_fs is not None and it % cfg.eval_every == 0:
            report = evaluate(state, eval_fs)
            log.write({"event": "eval", "iter": it, **{k: v for k, v in report.values.items()}})
    if checkpoint_path:
        save_checkpoint(state, checkpoint_path)
    return state


def evaluate(state: TrainState, data, mode: str = "forward", chunk: int | None = None,
             rhos: Sequence[float] = DEFAULT_RHOS) -> MetricsReport:
    fs = load_features(data, state.cfg)
    states = run_inference(fs.p, state.bank, state.params, mode, chunk)
    H, W = fs.frame_size
    masks = decode_masks(states, state.params, H, W, state.cfg.feat.patch_size)
    per_clip = [
        {"clip_id": cid, "metrics": clip_metrics(pred, gt, rhos)}
        for cid, pred, gt in zip(fs.clip_ids, masks.pred, fs.gt)
    ]
    return aggregate(per_clip, rhos)


# -- SCK1 checkpoint -----------------------------------------------------------------
CKPT_MAGIC = b"SCK1"
CKPT_VERSION = 1


def _state_tensors(state: TrainState) -> "OrderedDict[str, np.ndarray]":
    out = OrderedDict()
    for k, t in state.params.items():
        out[f"param/{k}"] = t.data
    for k in state.params:
        out[f"adam.m/{k}"] = state.optimizer.m[k]
        out[f"adam.v/{k}"] = state.optimizer.v[k]
    if state.ema.value is not None:
        out["ema/delta"] = state.ema.value
    return out


def checkpoint_bytes(state: TrainState) -> bytes:
    tensors = _state_tensors(state)
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(tensors))]
    for name, arr in tensors.items():
        nb = name.encode()
        parts.append(struct.pack("<I", len(nb)) + nb)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    meta = {
        "iteration": state.iteration,
        "stage": state.stage,
        "active_k": state.bank.active_k,
        "adam_t": state.optimizer.t,
        "grid": list(state.grid),
        "rng_state": state.rng.bit_generator.state,
        "config": state.cfg.to_dict(),
        "config_digest": state.cfg.digest(),
    }
    mb = json.dumps(meta, sort_keys=True).encode()
    parts.append(struct.pack("<I", len(mb)) + mb)
    return b"".join(parts)


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(state))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError("truncated", "checkpoint cut short")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else vals


def load_checkpoint(path: str | Path, expected: TrainConfig | None = None) -> TrainState:
    """Restore a full training state; warns when ``expected`` has a different config digest."""
    buf = Path(path).read_bytes()
    check_magic(buf[:4], CKPT_MAGIC)
    r = _Reader(buf)
    r.take(4)
    version = r.u32()
    if version != CKPT_VERSION:
        raise FormatError("version", f"checkpoint version {version}, this build reads {CKPT_VERSION}")
    tensors = OrderedDict()
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode()
        rank = r.u32()
        shape = tuple(struct.unpack(f"<{rank}I", r.take(4 * rank)))
        n = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    try:
        meta = json.loads(r.take(r.u32()).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError("malformed", f"checkpoint metadata unreadable: {exc}") from None
    if r.pos != len(buf):
        raise FormatError("malformed", f"{len(buf) - r.pos} trailing bytes in checkpoint")

    cfg = TrainConfig.from_dict(meta["config"])
    if cfg.digest() != meta["config_digest"]:
        raise FormatError("malformed", "stored config does not match its digest")
    if expected is not None and expected.digest() != meta["config_digest"]:
        warnings.warn(f"checkpoint {path} was written under a different config (digest mismatch)", stacklevel=2)
    grid = tuple(meta["grid"])
    state = init_state(cfg, grid)
    try:
        for k, t in state.params.items():
            t.data[...] = tensors[f"param/{k}"]
            state.optimizer.m[k][...] = tensors[f"adam.m/{k}"]
            state.optimizer.v[k][...] = tensors[f"adam.v/{k}"]
    except (KeyError, ValueError) as exc:
        raise FormatError("malformed", f"checkpoint tensors do not fit the stored config: {exc}") from None
    state.optimizer.t = meta["adam_t"]
    if "ema/delta" in tensors:
        state.ema.value = tensors["ema/delta"].copy()
    state.rng.bit_generator.state = meta["rng_state"]
    state.bank.grow(meta["active_k"])
    state.stage = meta["stage"]
    state.iteration = meta["iteration"]
    if slots_at_stage(cfg.schedule, state.stage) != state.bank.active_k:
        raise FormatError("malformed", f"active_k {state.bank.active_k} inconsistent with stage {state.stage}")
    return state


def with_overrides(cfg: TrainConfig, **sections) -> TrainConfig:
    """Replace fields inside sections: ``with_overrides(cfg, loss={"tau": 0.2}, total_iters=10)``."""
    kw = {}
    for k, v in sections.items():
        kw[k] = replace(getattr(cfg, k), **v) if isinstance(v, dict) else v
    return replace(cfg, **kw)
