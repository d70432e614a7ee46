"""Trainable pipeline: feature projection, recurrent slot attention, broadcast decoder.

All functions accept optional leading batch axes; shapes below omit them.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass
from typing import Iterator

import numpy as np

from .autodiff import (
    Tensor,
    broadcast_to,
    expand_dims,
    gru_cell,
    layer_norm,
    linear,
    matmul,
    relu,
    reshape,
    softmax,
    stack,
    sum_,
    swapaxes,
    transpose,
)
from .errors import ContractError, ShapeError


@dataclass(frozen=True)
class ModelConfig:
    d_feat: int = 16
    n_patches: int = 64
    d_slot: int = 32
    proj_hidden: int = 64
    mlp_hidden: int = 64
    dec_hidden: int = 32
    d_pos: int = 16
    k_max: int = 7
    iters_first: int = 3
    iters: int = 2
    heads: int = 1
    attn_eps: float = 1e-8

    def to_dict(self) -> dict:
        return asdict(self)


class ModelParams:
    """Named trainable tensors plus the config that shaped them."""

    def __init__(self, cfg: ModelConfig, tensors: "OrderedDict[str, Tensor]"):
        self.cfg = cfg
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def group(self, prefix: str) -> dict[str, Tensor]:
        return {k[len(prefix) :]: v for k, v in self.tensors.items() if k.startswith(prefix)}

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "ModelParams":
        return ModelParams(
            self.cfg,
            OrderedDict((k, Tensor(v.data.copy(), requires_grad=True, name=k)) for k, v in self.tensors.items()),
        )


@dataclass
class SlotBank:
    """Global slot placeholders; only the first ``active_k`` rows are used."""

    placeholders: Tensor  # [K_max, D_slot]
    active_k: int

    @property
    def k_max(self) -> int:
        return self.placeholders.shape[0]

    def active(self) -> Tensor:
        if self.active_k < 1:
            raise ContractError("slot bank has no active slots")
        return self.placeholders[: self.active_k]

    def grow(self, new_k: int) -> None:
        if new_k < self.active_k:
            raise ContractError(f"active_k may not shrink ({self.active_k} -> {new_k})")
        if new_k > self.k_max:
            raise ContractError(f"active_k {new_k} exceeds bank capacity {self.k_max}")
        self.active_k = new_k


@dataclass
class DecodeResult:
    p_hat: Tensor  # [T, N, D_feat]
    alpha: Tensor  # [T, K, N]
    per_slot: Tensor  # [T, K, N, D_feat]


def init_params(cfg: ModelConfig, rng: np.random.Generator) -> ModelParams:
    """Uniform(-a, a), a = 1/sqrt(fan_in) for weights and biases; unit layer-norm gains."""
    t: "OrderedDict[str, np.ndarray]" = OrderedDict()

    def dense(name: str, fan_in: int, fan_out: int, bias: bool = True) -> None:
        a = 1.0 / np.sqrt(fan_in)
        t[f"{name}.w"] = rng.uniform(-a, a, size=(fan_in, fan_out))
        if bias:
            t[f"{name}.b"] = rng.uniform(-a, a, size=fan_out)

    def norm(name: str, dim: int) -> None:
        t[f"{name}.g"] = np.ones(dim)
        t[f"{name}.b"] = np.zeros(dim)

    D = cfg.d_slot
    norm("proj.ln", cfg.d_feat)
    dense("proj.fc1", cfg.d_feat, cfg.proj_hidden)
    dense("proj.fc2", cfg.proj_hidden, D)

    norm("sa.ln_in", D)
    norm("sa.ln_slots", D)
    norm("sa.ln_mlp", D)
    dense("sa.q", D, D, bias=False)
    dense("sa.k", D, D, bias=False)
    dense("sa.v", D, D, bias=False)
    a = 1.0 / np.sqrt(D)
    # reset / update / candidate blocks stacked on axis -2
    t["sa.gru.w_i"] = rng.uniform(-a, a, size=(D, 3, D))
    t["sa.gru.w_h"] = rng.uniform(-a, a, size=(D, 3, D))
    t["sa.gru.b_i"] = rng.uniform(-a, a, size=(3, D))
    t["sa.gru.b_h"] = rng.uniform(-a, a, size=(3, D))
    dense("sa.mlp1", D, cfg.mlp_hidden)
    dense("sa.mlp2", cfg.mlp_hidden, D)

    # embedding rows have no fan-in; unit scale keeps slots distinguishable at start
    t["slots.placeholders"] = rng.uniform(-1.0, 1.0, size=(cfg.k_max, D))

    t["dec.pos"] = rng.normal(0.0, 0.02, size=(cfg.n_patches, cfg.d_pos))
    # first decoder layer acts on concat(slot, pos); stored as two blocks
    a1 = 1.0 / np.sqrt(D + cfg.d_pos)
    t["dec.fc1.ws"] = rng.uniform(-a1, a1, size=(D, cfg.dec_hidden))
    t["dec.fc1.wp"] = rng.uniform(-a1, a1, size=(cfg.d_pos, cfg.dec_hidden))
    t["dec.fc1.b"] = rng.uniform(-a1, a1, size=cfg.dec_hidden)
    dense("dec.fc2", cfg.dec_hidden, cfg.dec_hidden)
    # output head: D_feat feature channels plus one alpha logit
    a3 = 1.0 / np.sqrt(cfg.dec_hidden)
    t["dec.out.w"] = rng.uniform(-a3, a3, size=(cfg.dec_hidden, cfg.d_feat))
    t["dec.out.b"] = rng.uniform(-a3, a3, size=cfg.d_feat)
    t["dec.alpha.w"] = rng.uniform(-a3, a3, size=(cfg.dec_hidden, 1))
    t["dec.alpha.b"] = rng.uniform(-a3, a3, size=1)

    return ModelParams(cfg, OrderedDict((k, Tensor(v, requires_grad=True, name=k)) for k, v in t.items()))


def make_bank(params: ModelParams, active_k: int) -> SlotBank:
    bank = SlotBank(params["slots.placeholders"], 0)
    bank.grow(active_k)
    return bank


def _ln(x: Tensor, params: ModelParams, name: str) -> Tensor:
    return layer_norm(x, params[f"{name}.g"], params[f"{name}.b"])


def project(p: Tensor, params: ModelParams) -> Tensor:
    """[T, N, D_feat] -> [T, N, D_slot]: layer norm, then a two-layer ReLU MLP."""
    if p.shape[-1] != params.cfg.d_feat:
        raise ShapeError(f"project: feature dim {p.shape[-1]} != configured {params.cfg.d_feat}")
    h = relu(linear(_ln(p, params, "proj.ln"), params["proj.fc1.w"], params["proj.fc1.b"]))
    return linear(h, params["proj.fc2.w"], params["proj.fc2.b"])


def _split_heads(x: Tensor, heads: int) -> Tensor:
    # [..., M, D] -> [..., H, M, D/H]
    *lead, m, d = x.shape
    x = reshape(x, (*lead, m, heads, d // heads))
    nd = x.ndim
    return transpose(x, (*range(nd - 3), nd - 2, nd - 3, nd - 1))


def _merge_heads(x: Tensor) -> Tensor:
    # [..., H, K, dh] -> [..., K, H*dh]
    nd = x.ndim
    x = transpose(x, (*range(nd - 3), nd - 2, nd - 3, nd - 1))
    *lead, k, h, dh = x.shape
    return reshape(x, (*lead, k, h * dh))


def slot_attention_step(
    v: Tensor,
    slots: Tensor,
    params: ModelParams,
    iters: int | None = None,
    trace: list | None = None,
    return_attn: bool = False,
):
    """Refine ``slots`` [K, D] against frame inputs ``v`` [N, D] for ``iters`` rounds.

    Each round: attention logits between normalised slots and inputs, softmax
    over the slot axis, per-slot renormalisation over inputs to form weighted
    means of the values, then a GRU update and a residual MLP.
    """
    cfg = params.cfg
    K = slots.shape[-2]
    if K < 1:
        raise ContractError("slot_attention_step needs at least one slot")
    if v.shape[-1] != slots.shape[-1]:
        raise ShapeError(f"slot_attention_step: inputs {v.shape} vs slots {slots.shape}")
    iters = cfg.iters if iters is None else iters
    if trace is not None:
        trace.append(iters)
    H = cfg.heads
    D = slots.shape[-1]
    scale = (D // H) ** -0.5
    x = _ln(v, params, "sa.ln_in")
    keys = matmul(x, params["sa.k.w"])
    vals = matmul(x, params["sa.v.w"])
    if H > 1:
        keys, vals = _split_heads(keys, H), _split_heads(vals, H)
    keys_t = swapaxes(keys, -1, -2) * scale
    gru = [params[f"sa.gru.{k}"] for k in ("w_i", "w_h", "b_i", "b_h")]
    attn = None
    for _ in range(iters):
        prev = slots
        q = matmul(_ln(slots, params, "sa.ln_slots"), params["sa.q.w"])
        if H > 1:
            q = _split_heads(q, H)
        logits = matmul(q, keys_t)  # [..., K, N]
        attn = softmax(logits, axis=-2)
        w = attn + cfg.attn_eps
        w = w / sum_(w, axis=-1, keepdims=True)
        updates = matmul(w, vals)
        if H > 1:
            updates = _merge_heads(updates)
        slots = gru_cell(updates, prev, *gru)
        hidden = relu(linear(_ln(slots, params, "sa.ln_mlp"), params["sa.mlp1.w"], params["sa.mlp1.b"]))
        slots = slots + linear(hidden, params["sa.mlp2.w"], params["sa.mlp2.b"])
    if return_attn:
        return slots, attn
    return slots


def initial_slots(bank: SlotBank, lead: tuple[int, ...]) -> Tensor:
    s0 = bank.active()
    return broadcast_to(s0, (*lead, *s0.shape)) if lead else s0


def rollout(v: Tensor, bank: SlotBank, params: ModelParams, trace: list | None = None) -> Tensor:
    """Sequential refinement over frames: [T, N, D] -> slots [T, K, D]."""
    T = v.shape[-3]
    if T == 0:
        raise ContractError("rollout needs at least one frame")
    cfg = params.cfg
    slots = initial_slots(bank, v.shape[:-3])
    states = []
    for t in range(T):
        frame = v[..., t, :, :]
        slots = slot_attention_step(frame, slots, params, cfg.iters_first if t == 0 else cfg.iters, trace)
        states.append(slots)
    return stack(states, axis=-3)


def decode(s: Tensor, params: ModelParams) -> DecodeResult:
    """Broadcast each slot over all patches, decode features plus one alpha logit.

    ``s`` [T, K, D_slot] -> p_hat [T, N, D_feat], alpha [T, K, N], per_slot [T, K, N, D_feat].
    """
    hs = expand_dims(matmul(s, params["dec.fc1.ws"]), -2)  # [T, K, 1, H]
    hp = linear(params["dec.pos"], params["dec.fc1.wp"], params["dec.fc1.b"])  # [N, H]
    h = relu(hs + hp)
    h = relu(linear(h, params["dec.fc2.w"], params["dec.fc2.b"]))
    per_slot = linear(h, params["dec.out.w"], params["dec.out.b"])  # [T, K, N, D_feat]
    logits = linear(h, params["dec.alpha.w"], params["dec.alpha.b"])  # [T, K, N, 1]
    alpha = softmax(reshape(logits, logits.shape[:-1]), axis=-2)
    p_hat = sum_(expand_dims(alpha, -1) * per_slot, axis=-3)
    return DecodeResult(p_hat, alpha, per_slot)


def parameter_count(params: ModelParams) -> int:
    return int(sum(t.size for t in params.tensors.values()))
