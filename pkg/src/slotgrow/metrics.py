"""Segmentation metrics: FG-ARI, mBO, and per-frame OIR / DOF / DUF at IoU thresholds.

Undefined values (no foreground, no detected objects, ...) are returned as
``None`` and counted separately when aggregating; they are never zero-filled.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ShapeError

DEFAULT_RHOS = (0.3, 0.5, 0.7)


def _same_shape(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"mask shapes differ: {a.shape} vs {b.shape}")


def _check_rho(rho: float) -> None:
    if not 0 < rho <= 1:
        raise ContractError(f"threshold must lie in (0, 1], got {rho}")


def iou(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    _same_shape(a, b)
    union = np.count_nonzero(a | b)
    return np.count_nonzero(a & b) / union if union else 0.0


def contingency(x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Counts table between two labelings of the same items: (x_ids, y_ids, table)."""
    xi, xinv = np.unique(x.ravel(), return_inverse=True)
    yi, yinv = np.unique(y.ravel(), return_inverse=True)
    table = np.bincount(xinv * len(yi) + yinv, minlength=len(xi) * len(yi)).reshape(len(xi), len(yi))
    return xi, yi, table


def adjusted_rand_index(labels_a, labels_b) -> float:
    """ARI from the contingency table; perfect agreement on pair counts scores 1."""
    a = np.asarray(labels_a).ravel()
    b = np.asarray(labels_b).ravel()
    _same_shape(a, b)
    n = a.size
    _, _, table = contingency(a, b)
    table = table.astype(np.int64)
    sum_sq = int((table * table).sum())
    rows = table.sum(axis=1)
    cols = table.sum(axis=0)
    tp = sum_sq - n
    fp = int((cols * cols).sum()) - sum_sq  # split by a, joined by b
    fn = int((rows * rows).sum()) - sum_sq
    tn = n * n - fp - fn - sum_sq
    if fn == 0 and fp == 0:
        return 1.0
    # python ints keep the products exact
    return 2.0 * (tp * tn - fn * fp) / ((tp + fn) * (fn + tn) + (tp + fp) * (fp + tn))


def fg_ari(pred, gt, scope: str = "video") -> float | None:
    """Adjusted Rand index over ground-truth foreground pixels (gt != 0)."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    _same_shape(pred, gt)
    if scope == "video":
        fg = gt != 0
        if not fg.any():
            return None
        return adjusted_rand_index(pred[fg], gt[fg])
    if scope == "image":
        scores = [fg_ari(p, g, "video") for p, g in zip(pred, gt)]
        scores = [s for s in scores if s is not None]
        return float(np.mean(scores)) if scores else None
    raise ContractError(f"scope must be video or image, got {scope!r}")


def _overlaps(pred: np.ndarray, gt: np.ndarray):
    """Intersections between gt objects (id >= 1) and every predicted slot present."""
    gi, ki, table = contingency(gt, pred)
    gt_area = table.sum(axis=1)
    slot_area = table.sum(axis=0)
    keep = gi != 0
    inter = table[keep]
    return inter, gt_area[keep], slot_area


def _iou_table(inter, gt_area, slot_area) -> np.ndarray:
    return inter / (gt_area[:, None] + slot_area[None, :] - inter)


def mbo(pred, gt, level: str = "video") -> float | None:
    """Mean over gt objects of the best IoU with any predicted slot mask.

    ``level="video"`` treats each object as one spatio-temporal mask;
    ``level="image"`` scores each frame separately and averages over frames
    that contain objects.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    _same_shape(pred, gt)
    if level == "image":
        vals = [mbo(p, g, "video") for p, g in zip(pred, gt)]
        vals = [v for v in vals if v is not None]
        return float(np.mean(vals)) if vals else None
    if level != "video":
        raise ContractError(f"level must be video or image, got {level!r}")
    inter, gt_area, slot_area = _overlaps(pred, gt)
    if inter.shape[0] == 0:
        return None
    return float(_iou_table(inter, gt_area, slot_area).max(axis=1).mean())


def oir(pred, gt, rho: float) -> float | None:
    """Fraction of frame-level gt instances that some slot covers at IoU >= rho."""
    _check_rho(rho)
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    _same_shape(pred, gt)
    hits = total = 0
    for p, g in zip(pred, gt):
        inter, gt_area, slot_area = _overlaps(p, g)
        if inter.shape[0] == 0:
            continue
        best = _iou_table(inter, gt_area, slot_area).max(axis=1)
        hits += int(np.count_nonzero(best >= rho))
        total += best.size
    return hits / total if total else None


def dof(pred, gt, rho: float) -> float | None:
    """Mean number of slots each detected object contains, frame-averaged.

    A slot represents an object when at least ``rho`` of the slot's pixels lie
    inside it.
    """
    _check_rho(rho)
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    _same_shape(pred, gt)
    per_frame = []
    for p, g in zip(pred, gt):
        inter, _, slot_area = _overlaps(p, g)
        counts = (inter / slot_area[None, :] >= rho).sum(axis=1)
        detected = counts[counts > 0]
        if detected.size:
            per_frame.append(detected.mean())
    return float(np.mean(per_frame)) if per_frame else None


def duf(pred, gt, rho: float) -> float | None:
    """Mean number of gt objects each matched slot covers at IoU >= rho, frame-averaged."""
    _check_rho(rho)
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    _same_shape(pred, gt)
    per_frame = []
    for p, g in zip(pred, gt):
        inter, gt_area, slot_area = _overlaps(p, g)
        if inter.shape[0] == 0:
            continue
        counts = (_iou_table(inter, gt_area, slot_area) >= rho).sum(axis=0)
        matched = counts[counts > 0]
        if matched.size:
            per_frame.append(matched.mean())
    return float(np.mean(per_frame)) if per_frame else None


def clip_metrics(pred, gt, rhos=DEFAULT_RHOS) -> dict[str, float | None]:
    out: dict[str, float | None] = {
        "fg_ari_video": fg_ari(pred, gt, "video"),
        "fg_ari_image": fg_ari(pred, gt, "image"),
        "mbo": mbo(pred, gt, "video"),
        "mbo_image": mbo(pred, gt, "image"),
    }
    for rho in rhos:
        out[f"oir@{rho:g}"] = oir(pred, gt, rho)
        out[f"dof@{rho:g}"] = dof(pred, gt, rho)
        out[f"duf@{rho:g}"] = duf(pred, gt, rho)
    return out


@dataclass
class MetricsReport:
    """Clip-averaged metrics; ``undefined[key]`` counts clips where a metric had no value."""

    values: dict[str, float | None]
    undefined: dict[str, int]
    rhos: tuple[float, ...]
    per_clip: list[dict] = field(default_factory=list)

    @property
    def fg_ari_video(self):
        return self.values["fg_ari_video"]

    @property
    def fg_ari_image(self):
        return self.values["fg_ari_image"]

    @property
    def mbo(self):
        return self.values["mbo"]

    def _family(self, name: str) -> dict[float, float | None]:
        return {rho: self.values[f"{name}@{rho:g}"] for rho in self.rhos}

    @property
    def oir(self):
        return self._family("oir")

    @property
    def dof(self):
        return self._family("dof")

    @property
    def duf(self):
        return self._family("duf")

    def to_lines(self) -> str:
        lines = []
        for k, v in self.values.items():
            lines.append(f"{k}={'undefined' if v is None else repr(float(v))}")
            if self.undefined.get(k):
                lines.append(f"{k}.undefined_clips={self.undefined[k]}")
        lines.append(f"clips={len(self.per_clip)}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(
            {"values": self.values, "undefined": self.undefined, "rhos": list(self.rhos), "per_clip": self.per_clip},
            indent=2,
            sort_keys=True,
        )


def aggregate(per_clip: list[dict], rhos=DEFAULT_RHOS) -> MetricsReport:
    """Mean over clips of each metric; entries are ``{"clip_id": ..., "metrics": clip_metrics(...)}``."""
    if not per_clip:
        raise ContractError("no clips to aggregate")
    values, undefined = {}, {}
    for k in per_clip[0]["metrics"]:
        vals = [c["metrics"][k] for c in per_clip]
        defined = [v for v in vals if v is not None]
        values[k] = float(np.mean(defined)) if defined else None
        undefined[k] = len(vals) - len(defined)
    return MetricsReport(values, undefined, tuple(rhos), list(per_clip))
