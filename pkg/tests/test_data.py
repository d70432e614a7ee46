import struct
from dataclasses import replace

import numpy as np
import pytest

from slotgrow.data import (
    MAGIC,
    FeatConfig,
    Featurizer,
    GenConfig,
    VideoSample,
    featurize,
    generate_clip,
    generate_dataset,
    read_dataset,
    write_dataset,
)
from slotgrow.errors import ConfigError, FormatError


def test_clip_shapes_and_ranges():
    s = generate_clip(GenConfig(), 3)
    assert s.frames.shape == (6, 3, 64, 64) and s.frames.dtype == np.float32
    assert s.gt_masks.shape == (6, 64, 64)
    assert 0.0 <= s.frames.min() and s.frames.max() <= 1.0
    assert 2 <= s.num_objects <= 4
    assert set(np.unique(s.gt_masks)) <= set(range(s.num_objects + 1))


def test_generation_is_deterministic():
    a, b = generate_clip(GenConfig(), 7), generate_clip(GenConfig(), 7)
    assert a.frames.tobytes() == b.frames.tobytes() and a.gt_masks.tobytes() == b.gt_masks.tobytes()
    assert generate_clip(GenConfig(), 8) != a
    assert generate_dataset(GenConfig(), 3, 5) == generate_dataset(GenConfig(), 3, 5)


def test_static_disk_is_constant_over_time():
    cfg = GenConfig(frames=4, min_objects=1, max_objects=1, shapes=("disk",), max_speed=0.0)
    s = generate_clip(cfg, 0)
    for t in range(1, 4):
        np.testing.assert_array_equal(s.frames[t], s.frames[0])
        np.testing.assert_array_equal(s.gt_masks[t], s.gt_masks[0])
    area = (s.gt_masks[0] == 1).sum()
    assert area > 0


def test_ids_stable_and_declared():
    for seed in range(20):
        s = generate_clip(GenConfig(), seed)
        ids = set(np.unique(s.gt_masks)) - {0}
        assert ids <= set(range(1, s.num_objects + 1))


def test_occlusion_keeps_only_the_occluder():
    cfg = GenConfig(frames=1, min_objects=2, max_objects=2, shapes=("rectangle",), max_speed=0.0,
                    min_size=14.0, max_size=14.0, height=32, width=32)
    s = generate_clip(cfg, 1)
    # two 28-pixel-wide rectangles in a 32x32 frame must overlap; the later one wins
    mask = s.gt_masks[0]
    assert (mask == 2).sum() > 0
    covered = mask > 0
    frame = s.frames[0]
    colour2 = frame[:, mask == 2][:, 0]
    np.testing.assert_array_equal(frame[:, mask == 2], np.broadcast_to(colour2[:, None], frame[:, mask == 2].shape))
    assert covered.sum() < (mask == 2).sum() + (mask == 1).sum() + 1
    assert (mask == 1).sum() < 29 * 29  # part of the first rectangle is hidden


def test_trajectories_stay_inside_frame():
    cfg = GenConfig(frames=40, max_speed=6.0)
    for seed in range(5):
        s = generate_clip(cfg, seed)
        assert s.gt_masks.shape[0] == 40
        for i in range(1, s.num_objects + 1):
            # every object remains at least partly visible unless fully occluded
            visible = [(s.gt_masks[t] == i).any() for t in range(40)]
            assert sum(visible) > 0


@pytest.mark.parametrize(
    "kw",
    [
        dict(height=60),
        dict(min_objects=3, max_objects=2),
        dict(min_size=20.0, max_size=40.0),
        dict(min_size=0.0),
        dict(max_speed=-1.0),
        dict(shapes=("hexagon",)),
        dict(frames=0),
    ],
)
def test_config_errors(kw):
    with pytest.raises(ConfigError):
        generate_clip(GenConfig(**kw), 0)


# -- featurizer ---------------------------------------------------------------------------
def test_feature_shape_and_scale():
    frames = np.stack([generate_clip(GenConfig(), s).frames for s in range(4)])
    feats = featurize(frames.reshape(-1, 3, 64, 64), FeatConfig(), 1234)
    assert feats.p.shape == (24, 64, 16) and (feats.grid_h, feats.grid_w) == (8, 8)
    assert np.all(np.isfinite(feats.p))
    assert 0.1 <= feats.p.std() <= 10


def test_identical_patches_differ_only_by_offset():
    fz = Featurizer(FeatConfig(), 5, 8, 8)
    frames = np.full((1, 3, 64, 64), 0.3)
    pre = fz.pre_activation(frames)[0]
    diff = pre - fz.offset
    np.testing.assert_allclose(diff, np.broadcast_to(diff[0], diff.shape), atol=1e-12)


def test_offset_is_linear_in_patch_coordinates():
    fz = Featurizer(FeatConfig(), 3, 8, 8)
    off = fz.offset.reshape(8, 8, -1)
    # an affine map of (row, col) has vanishing mixed second differences
    mixed = off[1:, 1:] - off[1:, :-1] - off[:-1, 1:] + off[:-1, :-1]
    np.testing.assert_allclose(mixed, 0.0, atol=1e-12)
    np.testing.assert_allclose(off[::-1, ::-1], -off, atol=1e-12)  # centred grid
    assert np.abs(off).max() > 0.1


def test_featurizer_deterministic_and_frozen():
    frames = generate_clip(GenConfig(), 2).frames
    a = featurize(frames, FeatConfig(), 9).p
    b = featurize(frames, FeatConfig(), 9).p
    np.testing.assert_array_equal(a, b)
    fz = Featurizer(FeatConfig(), 9, 8, 8)
    with pytest.raises(ValueError):
        fz.weight[0, 0] = 1.0
    assert not np.array_equal(featurize(frames, FeatConfig(), 10).p, a)


def test_featurizer_rejects_bad_sizes():
    with pytest.raises(ConfigError):
        featurize(np.zeros((1, 3, 60, 64)), FeatConfig(), 0)
    fz = Featurizer(FeatConfig(), 0, 8, 8)
    with pytest.raises(ConfigError):
        fz(np.zeros((1, 3, 32, 32)))


# -- SCV1 file ---------------------------------------------------------------------------
def test_round_trip(tmp_path):
    samples = generate_dataset(GenConfig(frames=3), 3, 11)
    path = tmp_path / "d.scv"
    write_dataset(samples, path)
    back = read_dataset(path)
    assert back == samples
    for a, b in zip(samples, back):
        assert a.frames.tobytes() == b.frames.tobytes()
    raw = path.read_bytes()
    assert raw[:4] == MAGIC and struct.unpack_from("<I", raw, 4)[0] == 3


def test_empty_file_is_valid(tmp_path):
    path = tmp_path / "e.scv"
    write_dataset([], path)
    assert path.read_bytes() == MAGIC + b"\0\0\0\0"
    assert read_dataset(path) == []


@pytest.mark.parametrize(
    "mutate,code",
    [
        (lambda raw: b"XXXX" + raw[4:], "bad_magic"),
        (lambda raw: b"SCV2" + raw[4:], "version"),
        (lambda raw: raw[:2], "truncated"),
        (lambda raw: raw[:6], "truncated"),
        (lambda raw: raw[:20], "truncated"),
        (lambda raw: raw[:-3], "truncated"),
        (lambda raw: raw + b"\0", "malformed"),
        (lambda raw: raw[:8] + struct.pack("<III", 0, 8, 8) + raw[20:], "malformed"),
    ],
)
def test_corrupt_files(tmp_path, mutate, code):
    path = tmp_path / "d.scv"
    write_dataset([generate_clip(GenConfig(frames=2, height=16, width=16, max_size=6.0, min_size=3.0), 0)], path)
    bad = tmp_path / "bad.scv"
    bad.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(FormatError) as err:
        read_dataset(bad)
    assert err.value.code == code


def test_write_rejects_inconsistent_sample(tmp_path):
    s = generate_clip(GenConfig(frames=2), 0)
    broken = replace(s, gt_masks=s.gt_masks[:1])
    with pytest.raises(ConfigError):
        write_dataset([broken], tmp_path / "x.scv")


def test_sample_equality_semantics():
    s = generate_clip(GenConfig(frames=2), 0)
    assert s == VideoSample(s.frames.copy(), s.gt_masks.copy(), "other-id")
    assert (s == 3) is False
