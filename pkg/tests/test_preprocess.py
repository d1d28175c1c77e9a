"""Masked-crop preprocessing against brute-force per-pixel references."""

import numpy as np
import pytest

from ovseg.numerics import make_rng
from ovseg.preprocess import (EmptyMaskError, bilinear_resize, condense_mask,
                              crop_resize_mask, read_image, read_index_map, rle_decode,
                              rle_encode, tight_bbox, write_image, write_index_map)


def bbox_oracle(mask):
    """Brute-force min/max scan over every foreground pixel."""
    rows = [r for r in range(mask.shape[0]) for c in range(mask.shape[1]) if mask[r, c]]
    cols = [c for r in range(mask.shape[0]) for c in range(mask.shape[1]) if mask[r, c]]
    return min(rows), min(cols), max(rows), max(cols)


def resize_oracle(img, out_h, out_w):
    """Independent scalar bilinear resampler, corner aligned."""
    in_h, in_w = img.shape[:2]
    out = np.zeros((out_h, out_w) + img.shape[2:])

    def coord(i, n_in, n_out):
        if n_out == 1 or n_in == 1:
            return (n_in - 1) / 2.0
        return i * (n_in - 1) / (n_out - 1)

    for r in range(out_h):
        for c in range(out_w):
            y = coord(r, in_h, out_h)
            x = coord(c, in_w, out_w)
            y0, x0 = int(np.floor(y)), int(np.floor(x))
            y1, x1 = min(y0 + 1, in_h - 1), min(x0 + 1, in_w - 1)
            fy, fx = y - y0, x - x0
            out[r, c] = ((1 - fy) * ((1 - fx) * img[y0, x0] + fx * img[y0, x1])
                         + fy * ((1 - fx) * img[y1, x0] + fx * img[y1, x1]))
    return out


class TestTightBbox:
    def test_all_ones(self):
        assert tight_bbox(np.ones((8, 8))) == (0, 0, 7, 7)

    def test_single_pixel(self):
        mask = np.zeros((6, 6))
        mask[2, 3] = 1
        assert tight_bbox(mask) == (2, 3, 2, 3)

    def test_two_pixels_vs_bruteforce(self):
        mask = np.zeros((8, 8))
        mask[1, 1] = 1
        mask[4, 6] = 1
        assert tight_bbox(mask) == (1, 1, 4, 6) == bbox_oracle(mask)

    def test_random_vs_bruteforce(self):
        rng = make_rng(10)
        for _ in range(50):
            mask = (rng.uniform(size=(9, 7)) > 0.8).astype(np.uint8)
            if not mask.any():
                continue
            assert tight_bbox(mask) == bbox_oracle(mask)

    def test_empty_mask(self):
        with pytest.raises(EmptyMaskError):
            tight_bbox(np.zeros((4, 4)))


class TestBilinearResize:
    def test_matches_scalar_reference(self):
        rng = make_rng(11)
        img = rng.uniform(size=(5, 9, 3))
        out = bilinear_resize(img, 8, 6)
        np.testing.assert_allclose(out, resize_oracle(img, 8, 6), atol=1e-6)

    def test_identity_when_same_size(self):
        img = make_rng(12).uniform(size=(8, 8)).astype(np.float32)
        np.testing.assert_array_equal(bilinear_resize(img, 8, 8), img)


class TestCondenseMask:
    def test_all_foreground(self):
        np.testing.assert_array_equal(condense_mask(np.ones((8, 8)), 4), np.ones(4))

    def test_all_background(self):
        np.testing.assert_array_equal(condense_mask(np.zeros((8, 8)), 4), np.zeros(4))

    def test_single_pixel_keeps_exactly_one_patch(self):
        mask = np.zeros((8, 8))
        mask[5, 6] = 1  # patch row 1, col 1 of the 2x2 grid
        np.testing.assert_array_equal(condense_mask(mask, 4), [0, 0, 0, 1])

    def test_indivisible_patch(self):
        with pytest.raises(ValueError, match="does not divide"):
            condense_mask(np.ones((8, 8)), 3)


class TestCropResizeMask:
    def test_full_foreground_unchanged_by_masking(self):
        rng = make_rng(13)
        img = rng.uniform(size=(8, 8, 3)).astype(np.float32)
        crop = crop_resize_mask(img, np.ones((8, 8)), 8, 4)
        np.testing.assert_array_equal(crop.pixels, img)
        np.testing.assert_array_equal(crop.patch_mask, np.ones(4))

    def test_keep_background_is_plain_crop_resize(self):
        rng = make_rng(14)
        img = rng.uniform(size=(12, 10, 3))
        mask = np.zeros((12, 10))
        mask[2:9, 1:8] = 0
        mask[2, 1] = mask[8, 7] = 1  # sparse foreground, wide bbox
        crop = crop_resize_mask(img, mask, 8, 4, keep_background=True)
        np.testing.assert_allclose(crop.pixels, resize_oracle(img[2:9, 1:8], 8, 8),
                                   atol=1e-6)

    def test_keep_background_equal_when_all_foreground(self):
        rng = make_rng(15)
        img = rng.uniform(size=(9, 9, 3))
        masked = crop_resize_mask(img, np.ones((9, 9)), 8, 4, keep_background=False)
        unmasked = crop_resize_mask(img, np.ones((9, 9)), 8, 4, keep_background=True)
        np.testing.assert_array_equal(masked.pixels, unmasked.pixels)
        np.testing.assert_array_equal(masked.patch_mask, unmasked.patch_mask)

    def test_half_left_foreground_masks_right_patches(self):
        # left half solid, one anchor pixel pins the bbox to the full square:
        # the bottom-right patch has no foreground at all
        rng = make_rng(16)
        img = rng.uniform(size=(8, 8, 3))
        mask = np.zeros((8, 8))
        mask[:, :4] = 1
        mask[0, 7] = 1
        crop = crop_resize_mask(img, mask, 8, 4)
        expected_patches = np.array([1, 1, 1, 0])
        np.testing.assert_array_equal(crop.patch_mask, expected_patches)
        # per-pixel reference: identity resize here, so masked image directly
        np.testing.assert_allclose(crop.pixels, img * mask[:, :, None], atol=1e-6)

    def test_masked_patches_are_exactly_zero_property(self):
        rng = make_rng(17)
        for _ in range(25):
            img = rng.uniform(size=(20, 17, 3))
            mask = np.zeros((20, 17), dtype=np.uint8)
            cy, cx = rng.integers(5, 14), rng.integers(5, 11)
            r = int(rng.integers(3, 6))
            yy, xx = np.mgrid[0:20, 0:17]
            mask[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = 1
            crop = crop_resize_mask(img, mask, 16, 4)
            patches = crop.pixels.reshape(4, 4, 4, 4, 3).transpose(0, 2, 1, 3, 4)
            for j in range(16):
                if crop.patch_mask[j] == 0:
                    block = patches[j // 4, j % 4]
                    assert np.all(block == 0.0)

    def test_idempotent_on_prepared_input(self):
        # disk drawn at the target size whose bbox spans the full square:
        # the first pass is the identity geometry, the second must match it
        rng = make_rng(18)
        img = rng.uniform(size=(8, 8, 3))
        yy, xx = np.mgrid[0:8, 0:8]
        mask = ((yy - 3.5) ** 2 + (xx - 3.5) ** 2 <= 16).astype(np.uint8)
        assert tight_bbox(mask) == (0, 0, 7, 7)
        first = crop_resize_mask(img, mask, 8, 4)
        second = crop_resize_mask(first.pixels, first.pixel_mask, 8, 4)
        np.testing.assert_array_equal(second.pixels, first.pixels)
        np.testing.assert_array_equal(second.patch_mask, first.patch_mask)
        np.testing.assert_array_equal(second.pixel_mask, first.pixel_mask)

    def test_empty_mask_propagates(self):
        with pytest.raises(EmptyMaskError):
            crop_resize_mask(np.zeros((8, 8, 3)), np.zeros((8, 8)), 8, 4)


class TestRle:
    def test_all_foreground_2x2(self):
        assert rle_encode(np.ones((2, 2))) == "0 4"

    def test_all_background(self):
        assert rle_encode(np.zeros((2, 2))) == "4"

    def test_round_trip_random(self):
        rng = make_rng(19)
        for _ in range(50):
            mask = (rng.uniform(size=(6, 9)) > 0.5).astype(np.uint8)
            decoded = rle_decode(rle_encode(mask), 6, 9)
            np.testing.assert_array_equal(decoded, mask)

    def test_decode_size_mismatch(self):
        with pytest.raises(ValueError, match="expected"):
            rle_decode("0 3", 2, 2)

    def test_decode_negative_count(self):
        with pytest.raises(ValueError, match="negative"):
            rle_decode("-1 5", 2, 2)


class TestPngIo:
    def test_image_round_trip(self, tmp_path):
        rng = make_rng(20)
        img = np.round(rng.uniform(size=(9, 7, 3)) * 255) / 255.0
        write_image(tmp_path / "x.png", img)
        np.testing.assert_allclose(read_image(tmp_path / "x.png"), img, atol=1e-7)

    def test_index_map_round_trip(self, tmp_path):
        rng = make_rng(21)
        arr = rng.integers(0, 256, size=(12, 8)).astype(np.uint8)
        write_index_map(tmp_path / "m.png", arr)
        np.testing.assert_array_equal(read_index_map(tmp_path / "m.png"), arr)
