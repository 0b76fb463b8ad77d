import struct

import numpy as np
import pytest

from tea.rng import RngStream
from tea.shiftbench import (CORRUPTIONS, SEVERITIES, CorruptionSpec, IdxFormatError,
                            LabeledDataset, Mixture2DSpec, Shift2D, batches, corrupt,
                            corrupt_dataset, gen_glyphs, gen_mixture2d, load_idx,
                            severity_table, write_idx)

EYE = ((1.0, 0.0), (0.0, 1.0))


def energy_distance_test(x, y, perms, rng):
    """Two-sample energy statistic and its permutation null."""
    z = np.concatenate([x, y]).astype(np.float32)
    d = np.sqrt(((z[:, None, :] - z[None, :, :]) ** 2).sum(-1))
    n, m = len(x), len(y)

    def stat(a):
        a = a.astype(np.float32)
        b = 1.0 - a
        da = d @ a
        return float(2 * (b @ da) / (n * m) - (a @ da) / n ** 2 - (b @ (d @ b)) / m ** 2)

    base = np.r_[np.ones(n), np.zeros(m)]
    null = [stat(rng.permutation(base)) for _ in range(perms)]
    return stat(base), null


def test_identity_shift_matches_train_in_law():
    spec = Mixture2DSpec(((2.0, 0.0), (-2.0, 0.0)), (EYE, EYE), 1250)
    train = gen_mixture2d(spec, "train", RngStream(0))
    test = gen_mixture2d(spec, "test", RngStream(0))
    g = np.random.default_rng(0)
    s, null = energy_distance_test(train.inputs, test.inputs, 49, g)
    assert s < np.quantile(null, 0.95)
    # the same statistic does detect a real rotation
    rot = gen_mixture2d(Mixture2DSpec(spec.means, spec.covs, 1250, Shift2D(40.0)), "test", RngStream(0))
    s_rot, null_rot = energy_distance_test(train.inputs, rot.inputs, 49, g)
    assert s_rot > max(null_rot)


def test_rotation_180_swaps_classes():
    spec = Mixture2DSpec(((3.0, 1.0), (-3.0, -1.0)), (EYE, EYE), 400, Shift2D(180.0))
    test = gen_mixture2d(spec, "test", RngStream(4))
    m0 = test.inputs[test.labels == 0].mean(axis=0)
    m1 = test.inputs[test.labels == 1].mean(axis=0)
    assert np.linalg.norm(m0 - np.array([-3.0, -1.0])) < 0.2
    assert np.linalg.norm(m1 - np.array([3.0, 1.0])) < 0.2


def test_shift_order_rotate_translate_scale_noise():
    spec = Mixture2DSpec(((1.0, 0.0),), (((1e-12, 0), (0, 1e-12)),), 3,
                         Shift2D(90.0, (1.0, 2.0), 2.0, 0.0))
    test = gen_mixture2d(spec, "test", RngStream(0))
    # (1,0) -> rotate 90 -> (0,1) -> translate -> (1,3) -> scale -> (2,6)
    np.testing.assert_allclose(test.inputs, [[2.0, 6.0]] * 3, atol=1e-4)
    noisy = gen_mixture2d(Mixture2DSpec(spec.means, spec.covs, 2000, Shift2D(noise_std=0.5)), "test",
                          RngStream(0))
    assert abs(noisy.inputs[:, 0].std() - 0.5) < 0.03


def test_mixture_deterministic_and_labels_preserved():
    spec = Mixture2DSpec(((0.0, 1.0), (0.0, -1.0)), (EYE, EYE), 50, Shift2D(30.0))
    a = gen_mixture2d(spec, "test", RngStream(8))
    b = gen_mixture2d(spec, "test", RngStream(8))
    assert a.inputs.tobytes() == b.inputs.tobytes()
    np.testing.assert_array_equal(a.labels, np.repeat([0, 1], 50))


def test_mixture_spec_validation():
    with pytest.raises(ValueError):
        Mixture2DSpec(((0.0, 0.0),), (((1.0, 2.0), (2.0, 1.0)),))
    with pytest.raises(ValueError):
        Mixture2DSpec(((0.0, 0.0),), (EYE,), 10, Shift2D(scale=0.0))
    with pytest.raises(ValueError):
        gen_mixture2d(Mixture2DSpec(((0.0, 0.0),), (EYE,)), "val", RngStream(0))


def test_glyphs():
    ds = gen_glyphs(12, RngStream(1), size=8, num_classes=6)
    assert ds.inputs.shape == (12, 1, 8, 8)
    assert ds.inputs.min() >= -1 and ds.inputs.max() <= 1
    np.testing.assert_array_equal(ds.labels, np.arange(12) % 6)
    again = gen_glyphs(12, RngStream(1))
    assert again.inputs.tobytes() == ds.inputs.tobytes()
    # per-sample streams: a prefix is independent of the total count
    assert gen_glyphs(5, RngStream(1)).inputs.tobytes() == ds.inputs[:5].tobytes()


def test_gaussian_noise_rms():
    x = np.zeros((200, 1, 8, 8), dtype=np.float64)
    out = corrupt(x, CorruptionSpec("gaussian_noise", 5), RngStream(0), clip=False)
    rms = np.sqrt(np.mean(((out - x) / 2.0) ** 2))
    assert abs(rms - 0.26) < 0.2 * 0.26


def test_brightness_zero_offset_is_identity():
    x = gen_glyphs(4, RngStream(2)).inputs
    out = corrupt(x, CorruptionSpec("brightness", 1, param=0.0), RngStream(0))
    np.testing.assert_allclose(out, x, atol=1e-6)


def test_pixelate_severity5_blocks():
    x = gen_glyphs(4, RngStream(3)).inputs
    out = corrupt(x, CorruptionSpec("pixelate", 5), RngStream(0))
    for r in range(0, 8, 4):
        for c in range(0, 8, 4):
            block = out[:, 0, r:r + 4, c:c + 4].reshape(4, -1)
            assert np.all(block == block[:, :1])


def test_defocus_kernel_sizes_follow_table():
    assert [CorruptionSpec("defocus_blur", s).value for s in SEVERITIES] == [3, 3, 5, 5, 7]
    assert severity_table()["kinds"]["gaussian_noise"]["values"] == [0.04, 0.08, 0.12, 0.18, 0.26]


@pytest.mark.parametrize("kind", CORRUPTIONS)
def test_corrupt_range_labels_and_determinism(kind):
    ds = gen_glyphs(24, RngStream(5))
    for s in SEVERITIES:
        out = corrupt_dataset(ds, CorruptionSpec(kind, s), RngStream(9))
        assert out.inputs.min() >= -1.0 and out.inputs.max() <= 1.0
        np.testing.assert_array_equal(out.labels, ds.labels)
        assert out.provenance["corruption"] == kind and out.provenance["severity"] == s
        again = corrupt(ds.inputs, CorruptionSpec(kind, s), RngStream(9))
        assert again.tobytes() == out.inputs.tobytes()


@pytest.mark.parametrize("kind", ["gaussian_noise", "shot_noise", "impulse_noise", "defocus_blur",
                                  "pixelate"])
def test_severity_monotone_distortion(kind):
    x = gen_glyphs(60, RngStream(6)).inputs
    d = [np.mean((corrupt(x, CorruptionSpec(kind, s), RngStream(7)) - x) ** 2) for s in SEVERITIES]
    assert all(b >= a - 1e-12 for a, b in zip(d, d[1:])), d


def test_corrupt_errors():
    with pytest.raises(ValueError):
        CorruptionSpec("fog", 1)
    with pytest.raises(ValueError):
        CorruptionSpec("contrast", 6)
    with pytest.raises(ValueError):
        corrupt(np.full((1, 1, 2, 2), 2.0), CorruptionSpec("contrast", 1), RngStream(0))


def _idx_files(tmp_path, magic=0x803, dims=(2, 3, 3), payload=None, labels=(1, 7)):
    img = tmp_path / "img.idx"
    lab = tmp_path / "lab.idx"
    payload = bytes(range(18)) if payload is None else payload
    img.write_bytes(struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims) + payload)
    lab.write_bytes(struct.pack(">II", 0x801, len(labels)) + bytes(labels))
    return img, lab


def test_idx_header_and_shape(tmp_path):
    img, lab = _idx_files(tmp_path)
    assert img.read_bytes()[:4] == b"\x00\x00\x08\x03"
    ds = load_idx(img, lab)
    assert ds.inputs.shape == (2, 3, 3)
    np.testing.assert_array_equal(ds.labels, [1, 7])


def test_idx_pixel_mapping(tmp_path):
    img, lab = _idx_files(tmp_path, dims=(2, 1, 1), payload=bytes([0, 255]))
    ds = load_idx(img, lab)
    assert ds.inputs[0, 0, 0] == -1.0 and ds.inputs[1, 0, 0] == 1.0


def test_idx_errors(tmp_path):
    img, lab = _idx_files(tmp_path, magic=0x802)
    with pytest.raises(IdxFormatError, match="bad magic"):
        load_idx(img, lab)
    img, lab = _idx_files(tmp_path, payload=bytes(10))
    with pytest.raises(IdxFormatError, match="truncated"):
        load_idx(img, lab)
    img, lab = _idx_files(tmp_path, labels=(1, 2, 3))
    with pytest.raises(IdxFormatError, match="labels"):
        load_idx(img, lab)


def test_idx_round_trip(tmp_path):
    g = np.random.default_rng(0)
    imgs = g.integers(0, 256, (5, 4, 6), dtype=np.uint8)
    labels = g.integers(0, 10, 5, dtype=np.uint8)
    write_idx(tmp_path / "i", tmp_path / "l", imgs, labels)
    ds = load_idx(tmp_path / "i", tmp_path / "l", dtype=np.float64)
    back = np.rint((ds.inputs + 1.0) / 2.0 * 255.0).astype(np.uint8)
    assert back.tobytes() == imgs.tobytes()
    np.testing.assert_array_equal(ds.labels, labels)


def test_batches():
    ds = LabeledDataset(np.zeros((10, 2)), np.arange(10))
    sizes = [len(x) for x, _ in batches(ds, 4)]
    assert sizes == [4, 4, 2]
    a = batches(ds, 4, shuffle_seed=3)
    b = batches(ds, 4, shuffle_seed=3)
    ya = np.concatenate([y for _, y in a])
    assert ya.tolist() == np.concatenate([y for _, y in b]).tolist()
    assert sorted(ya.tolist()) == list(range(10))
    assert ya.tolist() != list(range(10))
    with pytest.raises(ValueError):
        batches(ds, 0)


def test_dataset_validation():
    with pytest.raises(ValueError):
        LabeledDataset(np.zeros((0, 2)), np.zeros(0))
    with pytest.raises(ValueError):
        LabeledDataset(np.full((2, 2), 1.5), np.zeros(2))
    with pytest.raises(ValueError):
        LabeledDataset(np.zeros((2, 2)), np.array([0, -1]))
