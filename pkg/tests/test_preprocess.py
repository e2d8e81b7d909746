import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from swindr import kernels
from swindr.preprocess import (
    AugmentPolicy,
    ClaheParams,
    DatasetManifest,
    augment,
    balance_indices,
    circular_crop,
    clahe,
    hflip,
    preprocess_image,
    read_image,
    rotate,
    split_dataset,
    write_image,
)

from .oracles import clipped_equalization, global_histogram_equalization

gray_images = hnp.arrays(np.uint8, st.tuples(st.integers(8, 40), st.integers(8, 40)))


def disc(size, r, cy=None, cx=None, value=200):
    cy = (size - 1) / 2 if cy is None else cy
    cx = (size - 1) / 2 if cx is None else cx
    yy, xx = np.mgrid[0:size, 0:size]
    img = np.zeros((size, size, 3), np.uint8)
    img[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = value
    return img


class TestCrop:
    @pytest.mark.parametrize("r", [5, 9, 14])
    def test_centered_disc(self, r):
        out = circular_crop(disc(64, r, 31, 31))
        assert out.shape[0] == out.shape[1]
        assert abs(out.shape[0] - 2 * r) <= 1
        assert out[out.shape[0] // 2, out.shape[1] // 2].max() == 200

    def test_off_center_disc_pads_square(self):
        img = disc(64, 12, 31, 31)
        img[:, 50:] = 0
        img[:, :19] = 0
        out = circular_crop(img)
        assert out.shape[0] == out.shape[1] == 25

    def test_tight_input_unchanged(self):
        img = np.full((10, 10, 3), 90, np.uint8)
        np.testing.assert_array_equal(circular_crop(img), img)

    @given(hnp.arrays(np.uint8, st.tuples(st.integers(1, 30), st.integers(1, 30), st.just(3))))
    def test_idempotent(self, img):
        if img.max() <= 10:
            return
        once = circular_crop(img)
        np.testing.assert_array_equal(circular_crop(once), once)

    def test_dark_image(self):
        with pytest.raises(ValueError, match="dark"):
            circular_crop(np.full((8, 8, 3), 10, np.uint8))

    def test_empty(self):
        with pytest.raises(ValueError):
            circular_crop(np.zeros((0, 4, 3), np.uint8))


class TestClahe:
    @pytest.mark.parametrize("value", [0, 37, 255])
    def test_constant_unchanged(self, value):
        img = np.full((32, 24), value, np.uint8)
        np.testing.assert_array_equal(clahe(img), img)
        rgb = np.full((32, 24, 3), value, np.uint8)
        np.testing.assert_array_equal(clahe(rgb), rgb)

    @settings(max_examples=30)
    @given(gray_images)
    def test_single_tile_unclipped_is_global_equalization(self, img):
        out = clahe(img, ClaheParams(clip_limit=np.inf, tiles_x=1, tiles_y=1))
        np.testing.assert_array_equal(out, global_histogram_equalization(img))

    @settings(max_examples=30)
    @given(gray_images, st.sampled_from([1.0, 1.5, 2.0, 4.0]), st.sampled_from([256, 64, 16]))
    def test_single_tile_matches_direct_oracle(self, img, clip, bins):
        out = clahe(img, ClaheParams(clip_limit=clip, tiles_x=1, tiles_y=1, bins=bins))
        np.testing.assert_array_equal(out, clipped_equalization(img, clip, bins))

    @settings(max_examples=30)
    @given(gray_images, st.sampled_from([1.0, 2.0, 3.0]), st.integers(1, 4), st.integers(1, 4))
    def test_clipped_histogram_bound(self, img, clip, ty, tx):
        # the mapping rises by 255 * (clipped bin + share) / n per level, and
        # the redistributed share is at most n / bins
        luts = kernels.clahe_luts(img, ty, tx, clip, 256)
        ys = kernels.tile_bounds(img.shape[0], ty)
        xs = kernels.tile_bounds(img.shape[1], tx)
        for i in range(ty):
            for j in range(tx):
                n = (ys[i + 1] - ys[i]) * (xs[j + 1] - xs[j])
                bound = 255.0 * (clip * n / 256 + n / 256) / n
                steps = np.diff(luts[i, j].astype(int))
                assert steps.min() >= 0
                assert steps.max() <= np.floor(bound) + 1

    @settings(max_examples=10, deadline=None)
    @given(gray_images, st.integers(1, 4), st.integers(1, 4))
    def test_monotone_at_every_position(self, img, ty, tx):
        # at a fixed position the blend weights are fixed, so output is
        # nondecreasing in the input level
        luts = kernels.clahe_luts(img, ty, tx, 2.0, 256)
        assert np.all(np.diff(luts.astype(int), axis=-1) >= 0)
        sweep = np.stack([kernels.clahe_apply(np.full(img.shape, v, np.uint8), luts) for v in range(256)])
        assert np.all(np.diff(sweep.astype(int), axis=0) >= 0)

    def test_colour_keeps_chroma_offsets(self):
        rng = np.random.default_rng(0)
        img = rng.integers(40, 200, size=(32, 32, 3)).astype(np.uint8)
        out = clahe(img).astype(int)
        diff = out - img.astype(int)
        # every channel moved by the same luma delta wherever nothing clipped
        ok = (out > 0).all(axis=2) & (out < 255).all(axis=2)
        assert np.all(diff[ok][:, 0] == diff[ok][:, 1]) and np.all(diff[ok][:, 1] == diff[ok][:, 2])

    def test_per_channel_flag(self):
        rng = np.random.default_rng(1)
        img = rng.integers(0, 256, size=(16, 16, 3)).astype(np.uint8)
        out = clahe(img, ClaheParams(per_channel=True))
        for c in range(3):
            np.testing.assert_array_equal(out[..., c], clahe(np.ascontiguousarray(img[..., c])))

    def test_image_smaller_than_tiles(self):
        with pytest.raises(ValueError, match="tile"):
            clahe(np.zeros((4, 4), np.uint8))

    @pytest.mark.parametrize("kw", [dict(clip_limit=0), dict(tiles_x=0), dict(bins=0), dict(bins=300)])
    def test_invalid_params(self, kw):
        with pytest.raises(ValueError):
            ClaheParams(**kw)


class TestAugment:
    def test_identity_policy_is_exact(self):
        img = np.random.default_rng(0).integers(0, 256, (9, 9, 3)).astype(np.uint8)
        out = augment(img, np.random.default_rng(1), AugmentPolicy.identity())
        assert out.tobytes() == img.tobytes() and out is not img

    def test_zero_rotation_exact(self):
        img = np.random.default_rng(2).integers(0, 256, (8, 8, 3)).astype(np.uint8)
        np.testing.assert_array_equal(rotate(img, 0.0), img)

    def test_flip_involution(self):
        img = np.random.default_rng(3).integers(0, 256, (7, 7, 3)).astype(np.uint8)
        np.testing.assert_array_equal(hflip(hflip(img)), img)

    def test_ninety_degrees_hand_layout(self):
        img = np.arange(16, dtype=np.uint8).reshape(4, 4)
        expected = np.array([[3, 7, 11, 15],
                             [2, 6, 10, 14],
                             [1, 5, 9, 13],
                             [0, 4, 8, 12]], np.uint8)
        np.testing.assert_array_equal(rotate(img, 90.0), expected)
        np.testing.assert_array_equal(rotate(img, 180.0), img[::-1, ::-1])
        np.testing.assert_array_equal(rotate(img, 270.0), expected[::-1, ::-1])

    def test_quarter_turns_compose(self):
        img = np.random.default_rng(4).integers(0, 256, (6, 6, 3)).astype(np.uint8)
        out = img
        for _ in range(4):
            out = rotate(out, 90.0)
        np.testing.assert_array_equal(out, img)

    def test_arbitrary_angle_keeps_center_and_fills_black(self):
        img = np.full((21, 21, 3), 100, np.uint8)
        out = rotate(img, 45.0)
        assert tuple(out[10, 10]) == (100, 100, 100)
        assert out[0, 0].max() == 0

    def test_seeded_determinism(self):
        img = np.random.default_rng(5).integers(0, 256, (16, 16, 3)).astype(np.uint8)
        a = augment(img, np.random.default_rng(9))
        b = augment(img, np.random.default_rng(9))
        assert a.tobytes() == b.tobytes()

    def test_non_square(self):
        with pytest.raises(ValueError, match="square"):
            augment(np.zeros((4, 5, 3), np.uint8), np.random.default_rng(0))

    def test_flip_rate(self):
        img = np.arange(16, dtype=np.uint8).reshape(4, 4, 1).repeat(3, axis=2)
        pol = AugmentPolicy(rotate=False, flip=True)
        flips = sum(not np.array_equal(augment(img, np.random.default_rng(i), pol), img) for i in range(400))
        assert abs(flips - 200) < 3 * 10  # binomial sigma = 10


class TestSplit:
    def entries(self, per_grade=100):
        return [(f"g{g}_{i}.png", g) for g in range(5) for i in range(per_grade)]

    def test_exact_counts(self):
        m = split_dataset(self.entries(), (0.7, 0.15, 0.15), seed=1)
        for g in range(5):
            counts = [sum(1 for e in m.split(s) if e.grade == g) for s in ("train", "val", "test")]
            assert counts == [70, 15, 15]

    def test_partition(self):
        ents = self.entries(37)
        m = split_dataset(ents, seed=3)
        paths = [e.path for e in m.entries]
        assert len(paths) == len(set(paths)) == len(ents)
        assert set(paths) == {p for p, _ in ents}

    def test_same_seed_identical(self):
        assert split_dataset(self.entries(), seed=5) == split_dataset(self.entries(), seed=5)
        assert split_dataset(self.entries(), seed=5) != split_dataset(self.entries(), seed=6)

    def test_input_order_irrelevant(self):
        ents = self.entries(20)
        assert split_dataset(ents, seed=2).entries == split_dataset(ents[::-1], seed=2).entries

    def test_small_grade(self):
        with pytest.raises(ValueError, match="grade 4"):
            split_dataset([(f"a{i}", 0) for i in range(5)] + [("b0", 4), ("b1", 4)], seed=0)

    @pytest.mark.parametrize("ratios", [(0.5, 0.5), (0.8, 0.3, -0.1), (0.5, 0.3, 0.3)])
    def test_bad_ratios(self, ratios):
        with pytest.raises(ValueError):
            split_dataset(self.entries(10), ratios)

    def test_bad_grade(self):
        with pytest.raises(ValueError):
            split_dataset([("x", 5)] * 3)

    def test_manifest_round_trip(self, tmp_path):
        m = split_dataset(self.entries(10), seed=4)
        m.save(tmp_path / "manifest.json")
        raw = json.loads((tmp_path / "manifest.json").read_text())
        assert raw["seed"] == 4 and set(raw["entries"][0]) == {"path", "grade", "split"}
        assert DatasetManifest.load(tmp_path / "manifest.json") == m


class TestBalance:
    def test_equalizes_counts(self):
        labels = np.array([0] * 10 + [1] * 3 + [2] * 7)
        idx = balance_indices(labels, np.random.default_rng(0))
        assert np.bincount(labels[idx]).tolist() == [10, 10, 10]

    def test_multiplicities_even(self):
        labels = np.array([0] * 10 + [1] * 3)
        idx = balance_indices(labels, np.random.default_rng(1))
        reps = np.bincount(idx)[10:13]
        assert sorted(reps.tolist()) == [3, 3, 4]

    def test_balanced_input_unchanged(self):
        labels = np.array([0, 1, 2, 0, 1, 2])
        np.testing.assert_array_equal(balance_indices(labels, np.random.default_rng(2)), np.arange(6))


class TestPipeline:
    def test_preprocess_image_shape(self):
        img = disc(80, 30)
        out = preprocess_image(img, 32)
        assert out.shape == (32, 32, 3) and out.dtype == np.uint8

    def test_png_round_trip(self, tmp_path):
        img = np.random.default_rng(0).integers(0, 256, (12, 10, 3)).astype(np.uint8)
        write_image(tmp_path / "a" / "x.png", img)
        np.testing.assert_array_equal(read_image(tmp_path / "a" / "x.png"), img)
