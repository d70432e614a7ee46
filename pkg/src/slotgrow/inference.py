"""Evaluation-time slot rollouts (forward, cyclic, chunked cyclic) and mask extraction."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor, no_grad, stack
from .data import check_magic
from .errors import ContractError, FormatError, ShapeError
from .model import ModelParams, SlotBank, decode, initial_slots, project, rollout, slot_attention_step

INFERENCE_MODES = ("forward", "cyclic", "chunked")


@dataclass
class MaskSequence:
    pred: np.ndarray  # int [T, H, W], values in [0, K)
    alpha_patch: np.ndarray  # [T, K, N]

    @property
    def num_slots(self) -> int:
        return self.alpha_patch.shape[-2]


def _frame_iters(params: ModelParams, t: int) -> int:
    return params.cfg.iters_first if t == 0 else params.cfg.iters


def _as_tensor(features) -> Tensor:
    return features if isinstance(features, Tensor) else Tensor(np.asarray(features, dtype=np.float64))


def forward_rollout(features, bank: SlotBank, params: ModelParams, trace: list | None = None) -> Tensor:
    """Plain sequential rollout over raw features [T, N, D_feat]; no tape is recorded."""
    with no_grad():
        return rollout(project(_as_tensor(features), params), bank, params, trace)


def cyclic_rollout(features, bank: SlotBank, params: ModelParams, trace: list | None = None) -> Tensor:
    """Forward over frames 0..T-1, then back over T-1..0 starting from the last forward state.

    Returns the backward-pass states in frame order.
    """
    with no_grad():
        v = project(_as_tensor(features), params)
        T = v.shape[-3]
        if T < 1:
            raise ContractError("cyclic rollout needs at least one frame")
        slots = initial_slots(bank, v.shape[:-3])
        for t in range(T):
            slots = slot_attention_step(v[..., t, :, :], slots, params, _frame_iters(params, t), trace)
        back = [None] * T
        for t in reversed(range(T)):
            slots = slot_attention_step(v[..., t, :, :], slots, params, _frame_iters(params, t), trace)
            back[t] = slots
        return stack(back, axis=-3)


def chunk_bounds(T: int, C: int) -> list[tuple[int, int]]:
    """Consecutive [start, stop) ranges of at most ``C`` frames covering 0..T-1."""
    if C < 1:
        raise ContractError(f"chunk size must be >= 1, got {C}")
    return [(a, min(a + C, T)) for a in range(0, T, C)]


def chunked_cyclic_rollout(features, bank: SlotBank, params: ModelParams, C: int,
                           trace: list | None = None) -> Tensor:
    """Cyclic rollout applied per chunk of ``C`` frames.

    Each chunk is seeded by the forward-pass output of the previous chunk; the
    backward states of every chunk are concatenated in frame order.
    """
    with no_grad():
        v = project(_as_tensor(features), params)
        T = v.shape[-3]
        bounds = chunk_bounds(T, C)
        slots = initial_slots(bank, v.shape[:-3])
        out = [None] * T
        for a, b in bounds:
            for t in range(a, b):
                slots = slot_attention_step(v[..., t, :, :], slots, params, _frame_iters(params, t), trace)
            carry = slots
            for t in reversed(range(a, b)):
                slots = slot_attention_step(v[..., t, :, :], slots, params, _frame_iters(params, t), trace)
                out[t] = slots
            slots = carry
        return stack(out, axis=-3)


def run_inference(features, bank: SlotBank, params: ModelParams, mode: str = "forward", chunk: int | None = None) -> Tensor:
    if mode == "forward":
        return forward_rollout(features, bank, params)
    if mode == "cyclic":
        return cyclic_rollout(features, bank, params)
    if mode == "chunked":
        if chunk is None:
            raise ContractError("chunked inference needs a chunk size")
        return chunked_cyclic_rollout(features, bank, params, chunk)
    raise ContractError(f"unknown inference mode {mode!r}; choose from {INFERENCE_MODES}")


def masks_from_alpha(alpha: np.ndarray, grid_h: int, grid_w: int, P: int) -> np.ndarray:
    """Argmax over slots per patch (ties to the lowest index), replicated over P x P pixel blocks."""
    *lead, K, N = alpha.shape
    if N != grid_h * grid_w:
        raise ShapeError(f"{N} alpha columns do not form a {grid_h}x{grid_w} grid")
    patch_ids = np.argmax(alpha, axis=-2).reshape(*lead, grid_h, grid_w)
    return np.repeat(np.repeat(patch_ids, P, axis=-2), P, axis=-1).astype(np.int64)


def decode_masks(states, params: ModelParams, H: int, W: int, P: int) -> MaskSequence:
    if H % P or W % P:
        raise ShapeError(f"frame {H}x{W} is not a multiple of patch size {P}")
    with no_grad():
        alpha = decode(_as_tensor(states), params).alpha.data
    return MaskSequence(masks_from_alpha(alpha, H // P, W // P, P), alpha)


# -- SCM1 mask dump -----------------------------------------------------------------
MASK_MAGIC = b"SCM1"


def write_masks(masks: MaskSequence | np.ndarray, path: str | Path, num_slots: int | None = None) -> None:
    if isinstance(masks, MaskSequence):
        pred, K = masks.pred, masks.num_slots
    else:
        pred, K = np.asarray(masks), num_slots
    if K is None:
        raise ContractError("slot count required for a bare mask array")
    if pred.ndim != 3:
        raise ShapeError(f"mask dump expects [T, H, W], got {pred.shape}")
    if pred.size and (pred.min() < 0 or pred.max() >= K):
        raise ContractError(f"mask values must lie in [0, {K})")
    with open(path, "wb") as fh:
        fh.write(MASK_MAGIC)
        fh.write(struct.pack("<IIII", *pred.shape, K))
        fh.write(np.ascontiguousarray(pred, dtype="<u2").tobytes())


def read_masks(path: str | Path) -> tuple[np.ndarray, int]:
    """Returns (pred [T, H, W] int64, K)."""
    buf = Path(path).read_bytes()
    check_magic(buf[:4], MASK_MAGIC)
    if len(buf) < 20:
        raise FormatError("truncated", "mask header cut short")
    T, H, W, K = struct.unpack_from("<IIII", buf, 4)
    n = T * H * W
    if len(buf) < 20 + 2 * n:
        raise FormatError("truncated", "mask payload cut short")
    if len(buf) != 20 + 2 * n:
        raise FormatError("malformed", f"{len(buf) - 20 - 2 * n} trailing bytes in mask dump")
    pred = np.frombuffer(buf, dtype="<u2", count=n, offset=20).reshape(T, H, W).astype(np.int64)
    if n and pred.max() >= K:
        raise FormatError("malformed", f"mask value {pred.max()} exceeds slot count {K}")
    return pred, K
