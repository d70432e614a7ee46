"""Training objectives: reconstruction MSE, slot-slot contrast, windowed SSIM."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, as_tensor, exp, log, mean, pairwise_cosine, reshape, sum_, transpose, window_mean
from .errors import ConfigError, ContractError, ShapeError

SSIM_MODES = ("3d", "2d", "off")


@dataclass(frozen=True)
class LossConfig:
    lambda_ssc: float = 0.5
    lambda_ssim: float = 0.05
    tau: float = 0.1
    ssim_c1: float | None = None  # None: derive from target feature std
    ssim_c2: float | None = None
    ssim_mode: str = "3d"
    cos_eps: float = 1e-8

    def validate(self) -> None:
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.lambda_ssc < 0 or self.lambda_ssim < 0:
            raise ConfigError("loss weights must be non-negative")
        for c in (self.ssim_c1, self.ssim_c2):
            if c is not None and c <= 0:
                raise ConfigError(f"SSIM stabilisers must be positive, got {c}")
        if self.ssim_mode not in SSIM_MODES:
            raise ConfigError(f"ssim_mode must be one of {SSIM_MODES}, got {self.ssim_mode!r}")


@dataclass
class LossBreakdown:
    mse_total: float
    mse_map: np.ndarray  # [..., T, N]
    ssc: float
    ssim: float
    total: float
    total_tensor: Tensor

    def as_dict(self) -> dict[str, float]:
        return {"mse": self.mse_total, "ssc": self.ssc, "ssim": self.ssim, "total": self.total}


def mse_loss(p_hat: Tensor, p) -> tuple[Tensor, Tensor]:
    """Per-location channel-mean squared error and its overall mean."""
    p = as_tensor(p)
    if p_hat.shape != p.shape:
        raise ShapeError(f"mse_loss: prediction {p_hat.shape} vs target {p.shape}")
    diff = p_hat - p
    mse_map = mean(diff * diff, axis=-1)
    return mean(mse_map), mse_map


def ssc_loss(s: Tensor, tau: float = 0.1, eps: float = 1e-8) -> Tensor:
    """Slot-slot contrastive loss over slots ``s`` [B, T, K, D].

    The positive for slot j of video b at frame i is the same slot at frame
    i-1; the denominator runs over every slot of every video at frame i except
    that positive, so the loss can go negative.
    """
    if s.ndim != 4:
        raise ShapeError(f"ssc_loss expects [B, T, K, D], got {s.shape}")
    B, T, K, D = s.shape
    if B * K < 2:
        raise ContractError(f"ssc_loss needs at least two slots across the batch, got B*K={B * K}")
    if T < 2:
        raise ContractError(f"ssc_loss needs at least two frames, got T={T}")
    per_frame = reshape(transpose(s, (1, 0, 2, 3)), (T, B * K, D))
    logits = pairwise_cosine(per_frame[:-1], per_frame[1:], eps) * (1.0 / tau)  # [T-1, BK, BK]
    eye = np.eye(B * K)
    positive = sum_(logits * eye, axis=-1)
    shift = logits.data.max(axis=-1, keepdims=True)
    negatives = sum_(exp(logits - shift) * (1.0 - eye), axis=-1)
    return mean(log(negatives) + shift[..., 0] - positive)


def ssim_constants(p: np.ndarray, cfg: LossConfig) -> tuple[float, float]:
    if cfg.ssim_c1 is not None and cfg.ssim_c2 is not None:
        return cfg.ssim_c1, cfg.ssim_c2
    r = float(np.std(p))
    if r == 0.0:
        r = 1.0
    c1 = cfg.ssim_c1 if cfg.ssim_c1 is not None else (0.01 * r) ** 2
    c2 = cfg.ssim_c2 if cfg.ssim_c2 is not None else (0.03 * r) ** 2
    return c1, c2


def ssim_map(p_hat: Tensor, p, grid_h: int, grid_w: int, c1: float, c2: float, mode: str = "3d") -> Tensor:
    """SSIM for every valid window and channel.

    Inputs are [..., T, N, D] with N = grid_h * grid_w (row-major). Windows are
    3x3x3 over (T, h, w) in ``"3d"`` mode and 3x3 over (h, w) per frame in ``"2d"``.
    Statistics are population moments over the window entries.
    """
    p = as_tensor(p)
    if p_hat.shape != p.shape:
        raise ShapeError(f"ssim: prediction {p_hat.shape} vs target {p.shape}")
    *lead, T, N, D = p.shape
    if N != grid_h * grid_w:
        raise ShapeError(f"ssim: {N} patches do not form a {grid_h}x{grid_w} grid")
    if mode == "3d":
        axes = (-4, -3, -2)
        if T < 3 or grid_h < 3 or grid_w < 3:
            raise ContractError(f"3d SSIM needs T, grid_h, grid_w >= 3, got {T}, {grid_h}, {grid_w}")
    elif mode == "2d":
        axes = (-3, -2)
        if grid_h < 3 or grid_w < 3:
            raise ContractError(f"2d SSIM needs grid_h, grid_w >= 3, got {grid_h}, {grid_w}")
    else:
        raise ConfigError(f"no SSIM map for mode {mode!r}")
    x = reshape(p_hat, (*lead, T, grid_h, grid_w, D))
    y = reshape(p, (*lead, T, grid_h, grid_w, D))
    mu_x = window_mean(x, axes, 3)
    mu_y = window_mean(y, axes, 3)
    mu_xx = mu_x * mu_x
    mu_yy = mu_y * mu_y
    mu_xy = mu_x * mu_y
    var_x = window_mean(x * x, axes, 3) - mu_xx
    var_y = window_mean(y * y, axes, 3) - mu_yy
    cov = window_mean(x * y, axes, 3) - mu_xy
    num = (2.0 * mu_xy + c1) * (2.0 * cov + c2)
    den = (mu_xx + mu_yy + c1) * (var_x + var_y + c2)
    return num / den


def ssim3d_loss(p_hat: Tensor, p, cfg: LossConfig, grid_h: int, grid_w: int) -> Tensor:
    """``1 - mean SSIM`` over all windows and channels (3D or 2D per ``cfg.ssim_mode``)."""
    c1, c2 = ssim_constants(as_tensor(p).data, cfg)
    return 1.0 - mean(ssim_map(p_hat, p, grid_h, grid_w, c1, c2, cfg.ssim_mode))


def total_loss(mse_total, ssc, ssim, cfg: LossConfig):
    """Weighted sum; the SSIM term is dropped when ``ssim_mode == "off"``."""
    total = mse_total + cfg.lambda_ssc * ssc
    if cfg.ssim_mode != "off":
        total = total + cfg.lambda_ssim * ssim
    return total


def compute_losses(
    p_hat: Tensor, p, slots: Tensor | None, cfg: LossConfig, grid_h: int, grid_w: int
) -> LossBreakdown:
    """All objective terms for a batch; ``slots`` is [B, T, K, D] or None to skip contrast."""
    mse_t, mse_map = mse_loss(p_hat, p)
    zero = Tensor(0.0)
    ssc_t = zero
    if slots is not None and cfg.lambda_ssc > 0:
        ssc_t = ssc_loss(slots, cfg.tau, cfg.cos_eps)
    ssim_t = zero
    if cfg.ssim_mode != "off":
        ssim_t = ssim3d_loss(p_hat, p, cfg, grid_h, grid_w)
    total_t = total_loss(mse_t, ssc_t, ssim_t, cfg)
    return LossBreakdown(
        mse_total=float(mse_t.data),
        mse_map=mse_map.data,
        ssc=float(ssc_t.data),
        ssim=float(ssim_t.data),
        total=float(total_t.data),
        total_tensor=total_t,
    )
