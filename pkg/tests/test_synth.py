"""Generator contracts: determinism, jitter, caption coverage."""

import hashlib
from pathlib import Path

import numpy as np

from ovseg import synth
from ovseg.dataset import SegmentationDataset
from ovseg.mining import extract_nouns, normalize_noun
from ovseg.preprocess import rle_encode


def tree_digest(root) -> dict:
    digests = {}
    for path in sorted(Path(root).rglob("*")):
        if path.is_file():
            digests[str(path.relative_to(root))] = hashlib.sha256(
                path.read_bytes()).hexdigest()
    return digests


def test_same_seed_byte_identical(tmp_path):
    cfg = synth.SynthConfig(count=6, seed=9, proposal_jitter=1, clutter=2,
                            captions_per_image=2)
    synth.generate(tmp_path / "a", cfg)
    synth.generate(tmp_path / "b", cfg)
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")


def test_different_seed_differs(tmp_path):
    synth.generate(tmp_path / "a", synth.SynthConfig(count=4, seed=1))
    synth.generate(tmp_path / "b", synth.SynthConfig(count=4, seed=2))
    assert tree_digest(tmp_path / "a") != tree_digest(tmp_path / "b")


def test_zero_jitter_proposals_equal_gt(tmp_path):
    synth.generate(tmp_path / "ds", synth.SynthConfig(count=6, seed=3,
                                                      proposal_jitter=0))
    ds = SegmentationDataset(tmp_path / "ds")
    for image_id in ds.image_ids():
        segments = ds.load_gt_segments(image_id)
        proposals = ds.load_proposals(image_id)
        assert len(proposals) == len(segments)
        for seg, mask in zip(segments, proposals.masks):
            assert rle_encode(seg.mask) == rle_encode(mask)


def test_captions_name_every_rendered_shape(tmp_path):
    synth.generate(tmp_path / "ds", synth.SynthConfig(count=10, seed=4,
                                                      min_shapes=2, max_shapes=3,
                                                      captions_per_image=3))
    ds = SegmentationDataset(tmp_path / "ds")
    for image_id in ds.image_ids():
        shape_nouns = {normalize_noun(ds.class_names[s.class_index])
                       for s in ds.load_gt_segments(image_id)}
        for caption in ds.captions_for(image_id):
            assert shape_nouns <= set(extract_nouns(caption))


def test_gt_map_matches_segments(tmp_path):
    synth.generate(tmp_path / "ds", synth.SynthConfig(count=5, seed=5))
    ds = SegmentationDataset(tmp_path / "ds")
    for image_id in ds.image_ids():
        gt = ds.load_gt_map(image_id)
        rebuilt = np.full_like(gt, ds.unlabeled_index)
        for seg in ds.load_gt_segments(image_id):
            rebuilt[seg.mask.astype(bool)] = seg.class_index
        np.testing.assert_array_equal(gt, rebuilt)


def test_embeddings_unit_norm_and_optional(tmp_path):
    synth.generate(tmp_path / "with", synth.SynthConfig(count=3, seed=6))
    ds = SegmentationDataset(tmp_path / "with")
    proposals = ds.load_proposals(ds.image_ids()[0])
    norms = np.linalg.norm(proposals.embeddings, axis=1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-5)

    synth.generate(tmp_path / "without", synth.SynthConfig(count=3, seed=6,
                                                           with_embeddings=False))
    ds2 = SegmentationDataset(tmp_path / "without")
    assert ds2.load_proposals(ds2.image_ids()[0]).embeddings is None


def test_shape_masks_distinct_after_crop(tmp_path):
    # every pair of shape silhouettes must stay distinguishable once cropped
    # to the tight box and resized, otherwise classes are unlearnable
    from ovseg.preprocess import crop_resize_mask
    size = 64
    crops = {}
    for name in synth.SHAPE_NAMES:
        mask = synth.shape_mask(name, size, 32, 32, 14)
        crop = crop_resize_mask(np.ones((size, size, 3)), mask, 32, 4)
        crops[name] = crop.pixel_mask
    names = list(crops)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            overlap = (crops[a] == crops[b]).mean()
            assert overlap < 0.995, (a, b)
