import json
from math import comb

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slotgrow.errors import ContractError, ShapeError
from slotgrow.metrics import (
    adjusted_rand_index,
    aggregate,
    clip_metrics,
    dof,
    duf,
    fg_ari,
    iou,
    mbo,
    oir,
)


# -- independent oracles ---------------------------------------------------------------
def pair_count_ari(a, b):
    """Enumerate every unordered pair explicitly; agreement counts feed the pair-level ARI."""
    a, b = np.ravel(a), np.ravel(b)
    n = a.size
    i, j = np.triu_indices(n, k=1)
    same_a, same_b = a[i] == a[j], b[i] == b[j]
    tp = int(np.sum(same_a & same_b))
    fn = int(np.sum(same_a & ~same_b))
    fp = int(np.sum(~same_a & same_b))
    tn = int(np.sum(~same_a & ~same_b))
    if fn == 0 and fp == 0:
        return 1.0
    return 2.0 * (tp * tn - fn * fp) / ((tp + fn) * (fn + tn) + (tp + fp) * (fp + tn))


def combinatorial_ari(a, b):
    """Expected-index form of the adjusted Rand index, built from a dict of label pairs."""
    a, b = np.ravel(a), np.ravel(b)
    cells, ra, rb = {}, {}, {}
    for x, y in zip(a.tolist(), b.tolist()):
        cells[(x, y)] = cells.get((x, y), 0) + 1
        ra[x] = ra.get(x, 0) + 1
        rb[y] = rb.get(y, 0) + 1
    index = sum(comb(c, 2) for c in cells.values())
    sa, sb = sum(comb(c, 2) for c in ra.values()), sum(comb(c, 2) for c in rb.values())
    expected = sa * sb / comb(a.size, 2)
    top = (sa + sb) / 2
    if top == expected:
        return 1.0
    return (index - expected) / (top - expected)


def brute_iou(a, b):
    inter = union = 0
    for x, y in zip(np.ravel(a), np.ravel(b)):
        inter += bool(x) and bool(y)
        union += bool(x) or bool(y)
    return inter / union if union else 0.0


def brute_mbo(pred, gt):
    scores = []
    for g in sorted(set(np.unique(gt)) - {0}):
        scores.append(max(brute_iou(gt == g, pred == k) for k in np.unique(pred)))
    return float(np.mean(scores))


def random_masks(rng, k_pred=5, k_gt=4):
    return rng.integers(0, k_pred, size=(3, 8, 8)), rng.integers(0, k_gt, size=(3, 8, 8))


# -- iou / ari --------------------------------------------------------------------------
def test_iou_examples():
    a = np.zeros((4, 4), bool)
    a[0, :4] = True
    b = np.zeros((4, 4), bool)
    b[0, 2:] = True
    b[1, :2] = True
    assert iou(a, a) == 1.0
    assert iou(a, ~a) == 0.0
    assert iou(a, b) == 2 / 6
    assert iou(np.zeros(3), np.zeros(3)) == 0.0
    with pytest.raises(ShapeError):
        iou(a, b[:2])


def test_fg_ari_matches_pair_counting_oracles_on_100_pairs():
    rng = np.random.default_rng(0)
    for _ in range(100):
        pred, gt = random_masks(rng)
        fg = gt != 0
        value = fg_ari(pred, gt)
        assert abs(value - pair_count_ari(pred[fg], gt[fg])) <= 1e-10
        assert abs(value - combinatorial_ari(pred[fg], gt[fg])) <= 1e-10


def test_ari_hand_values():
    assert adjusted_rand_index([0, 0, 1, 1], [0, 0, 1, 1]) == 1.0
    assert adjusted_rand_index([0, 0, 1, 1], [5, 5, 2, 2]) == 1.0
    assert abs(adjusted_rand_index([0, 0, 0, 0], [0, 0, 1, 1])) <= 1e-12
    # all-distinct vs. all-same: no shared pairs either way
    assert abs(adjusted_rand_index([0, 1, 2, 3], [0, 0, 0, 0])) <= 1e-12
    assert abs(adjusted_rand_index([0, 0, 1, 2], [0, 0, 1, 1]) - 4 / 7) <= 1e-12


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_fg_ari_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    pred, gt = random_masks(rng)
    base = fg_ari(pred, gt)
    perm_pred = rng.permutation(10)[pred]
    perm_gt = np.concatenate([[0], 1 + rng.permutation(9)])[gt]
    assert abs(fg_ari(perm_pred, gt) - base) <= 1e-12
    assert abs(fg_ari(pred, perm_gt) - base) <= 1e-12


def test_fg_ari_degenerate_cases():
    rng = np.random.default_rng(1)
    gt = rng.integers(0, 3, size=(3, 8, 8))
    assert fg_ari(gt, gt) == 1.0
    assert abs(fg_ari(np.zeros_like(gt), gt)) <= 1e-12
    assert fg_ari(gt, np.zeros_like(gt)) is None
    assert fg_ari(gt, np.zeros_like(gt), "image") is None
    with pytest.raises(ContractError):
        fg_ari(gt, gt, "pixel")


def test_fg_ari_image_scope_skips_empty_frames():
    rng = np.random.default_rng(2)
    pred, gt = random_masks(rng)
    gt[1] = 0
    expected = np.mean([pair_count_ari(pred[t][gt[t] != 0], gt[t][gt[t] != 0]) for t in (0, 2)])
    assert abs(fg_ari(pred, gt, "image") - expected) <= 1e-10


# -- mbo ----------------------------------------------------------------------------------
def test_mbo_matches_exhaustive_loops():
    rng = np.random.default_rng(3)
    for _ in range(100):
        pred, gt = random_masks(rng)
        assert abs(mbo(pred, gt) - brute_mbo(pred, gt)) <= 1e-12
        per_frame = [brute_mbo(p, g) for p, g in zip(pred, gt) if g.any()]
        assert abs(mbo(pred, gt, "image") - np.mean(per_frame)) <= 1e-12


def test_mbo_examples():
    gt = np.zeros((1, 4, 4), int)
    gt[0, 0, :4] = 1
    pred = np.zeros((1, 4, 4), int)
    pred[0, 0, 2:] = 1
    pred[0, 1, :2] = 1
    assert mbo(gt, gt) == 1.0
    assert mbo(pred, gt) == pytest.approx(1 / 3, abs=1e-15)
    assert mbo(pred, np.zeros_like(gt)) is None


def test_extra_empty_slot_changes_nothing():
    rng = np.random.default_rng(4)
    pred, gt = random_masks(rng)
    # relabel so one id is never used: the set of masks is unchanged
    shifted = np.where(pred >= 2, pred + 1, pred)
    assert mbo(shifted, gt) == mbo(pred, gt)
    assert oir(shifted, gt, 0.5) == oir(pred, gt, 0.5)


# -- oir / dof / duf hand geometry -------------------------------------------------------
def frame(rows):
    return np.array([[list(r) for r in rows]], dtype=int)


def test_oir_threshold_straddle():
    gt = frame(["11100", "00000"])
    pred = frame(["11222", "00000"])  # slot 1 has IoU 2/3 with the object
    assert oir(pred, gt, 0.5) == 1.0
    assert oir(pred, gt, 0.7) == 0.0


def test_oir_best_iou_point_six():
    gt = frame(["11100", "00000"])
    pred = frame(["11110", "01000"])  # inter 3, union 5
    assert iou(gt == 1, pred == 1) == 0.6
    assert oir(pred, gt, 0.5) == 1.0 and oir(pred, gt, 0.7) == 0.0


def test_oir_two_objects_one_covered_and_perfect():
    gt = frame(["1100", "0022"])
    pred = frame(["1100", "0000"])
    assert oir(pred, gt, 0.5) == 0.5
    for rho in (0.3, 0.5, 0.7, 1.0):
        assert oir(gt, gt, rho) == 1.0


def test_oir_pools_frame_instances():
    gt = np.concatenate([frame(["1100", "0022"]), frame(["1100", "0000"])])
    pred = np.concatenate([frame(["1100", "0000"]), frame(["1100", "0000"])])
    assert oir(pred, gt, 0.5) == 2 / 3
    assert oir(pred, np.zeros_like(gt), 0.5) is None


def test_dof_examples():
    gt = frame(["1111", "0000"])
    assert dof(frame(["1122", "0000"]), gt, 0.3) == 2.0
    assert dof(frame(["1122", "0000"]), gt, 1.0) == 2.0
    assert dof(gt, gt, 0.5) == 1.0
    # slot 1 has 3 of 5 pixels inside the object: 60% containment
    gt2 = frame(["11111", "00000"])
    pred2 = frame(["11122", "11222"])
    assert dof(pred2, gt2, 0.5) == 1.0
    assert dof(pred2, gt2, 0.7) is None  # slot 2 (2 of 5 inside) never counts; slot 1 only at 0.5
    pred3 = frame(["11122", "11333"])
    assert dof(pred3, gt2, 0.5) == 2.0  # slot 1 at 60% and slot 2 fully inside
    assert dof(pred3, gt2, 0.7) == 1.0  # slot 1 drops out at 70%
    assert dof(frame(["0000", "0000"]), gt, 0.7) is None  # one slot, half inside


def test_dof_frame_average():
    gt = np.concatenate([frame(["1111"]), frame(["1111"])])
    pred = np.concatenate([frame(["1122"]), frame(["3333"])])
    assert dof(pred, gt, 0.5) == 1.5


def test_duf_examples():
    gt = frame(["1122", "0000"])
    assert duf(gt, gt, 0.5) == 1.0
    # one slot spans both equal objects: IoU 0.5 each
    merged = frame(["1111", "0000"])
    assert iou(gt == 1, merged == 1) == 0.5
    assert duf(merged, gt, 0.3) == 2.0
    assert duf(merged, gt, 0.6) is None
    # unequal objects (3 and 2 pixels) under one slot: IoU 0.6 and 0.4
    gt2 = frame(["11122", "00000"])
    merged2 = frame(["11111", "00000"])
    assert duf(merged2, gt2, 0.3) == 2.0
    assert duf(merged2, gt2, 0.5) == 1.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([0.3, 0.5, 0.7]))
def test_fragmentation_scores_at_least_one(seed, rho):
    pred, gt = random_masks(np.random.default_rng(seed), k_pred=3, k_gt=3)
    for fn in (dof, duf):
        v = fn(pred, gt, rho)
        assert v is None or v >= 1.0
    v = oir(pred, gt, rho)
    assert v is None or 0.0 <= v <= 1.0


@pytest.mark.parametrize("rho", [0.0, -0.1, 1.5])
def test_rho_out_of_range(rho):
    m = frame(["11"])
    for fn in (oir, dof, duf):
        with pytest.raises(ContractError):
            fn(m, m, rho)


# -- reports -------------------------------------------------------------------------------
def test_clip_metrics_keys():
    pred, gt = random_masks(np.random.default_rng(5))
    keys = set(clip_metrics(pred, gt, (0.5,)))
    assert keys == {"fg_ari_video", "fg_ari_image", "mbo", "mbo_image", "oir@0.5", "dof@0.5", "duf@0.5"}


def test_aggregate_flags_undefined_instead_of_zero():
    gt = frame(["1100", "0022"])
    good = clip_metrics(gt, gt, (0.5,))
    none = clip_metrics(gt, np.zeros_like(gt), (0.5,))
    report = aggregate([{"clip_id": "a", "metrics": good}, {"clip_id": "b", "metrics": none}], (0.5,))
    assert report.fg_ari_video == 1.0 and report.undefined["fg_ari_video"] == 1
    assert report.oir == {0.5: 1.0} and report.dof == {0.5: 1.0} and report.duf == {0.5: 1.0}
    text = report.to_lines()
    assert "fg_ari_video=1.0" in text and "fg_ari_video.undefined_clips=1" in text
    assert json.loads(report.to_json())["undefined"]["mbo"] == 1
    only_none = aggregate([{"clip_id": "b", "metrics": none}], (0.5,))
    assert only_none.values["mbo"] is None and "mbo=undefined" in only_none.to_lines()
    with pytest.raises(ContractError):
        aggregate([])
