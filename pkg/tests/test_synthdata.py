import dataclasses

import numpy as np
import pytest

from transda.objectives import IGNORE_INDEX
from transda.synthdata import (
    AugmentConfig,
    DomainShift,
    DomainSpec,
    SceneSample,
    apply_geometry,
    augment,
    color_jitter,
    export_dataset,
    generate,
    import_dataset,
    make_sample,
)

SMALL = DomainSpec(image_size=(32, 32))
OPEN = DomainSpec(include_source_private=True, include_target_private=True, image_size=(32, 32))
NO_SHIFT = DomainShift(0, 0, 0, 0, 0)


def class_histogram(samples, K):
    return np.bincount(np.concatenate([s.mask.ravel() for s in samples]), minlength=K).tolist()


def test_identity_shift_makes_domains_equal():
    spec = dataclasses.replace(SMALL, shift=NO_SHIFT)
    for i in range(3):
        a, b = make_sample(spec, "source", 4, i), make_sample(spec, "target", 4, i)
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.mask, b.mask)


def test_shift_changes_target_images():
    a, b = make_sample(SMALL, "source", 4, 0), make_sample(SMALL, "target", 4, 0)
    np.testing.assert_array_equal(a.mask, b.mask)
    assert np.abs(a.image - b.image).mean() > 0.02


@pytest.mark.parametrize("spec", [SMALL, OPEN], ids=["closed", "open"])
@pytest.mark.parametrize("domain", ["source", "target"])
def test_mask_ids_valid_and_images_in_range(spec, domain):
    for s in generate(spec, domain, 8, seed=2):
        assert set(np.unique(s.mask).tolist()) <= spec.valid_ids(domain)
        assert s.image.dtype == np.float32 and s.image.shape == (3, 32, 32)
        assert s.image.min() >= 0 and s.image.max() <= 1


def test_private_classes_stay_in_their_domain():
    src = class_histogram(generate(OPEN, "source", 20, seed=1), 7)
    tgt = class_histogram(generate(OPEN, "target", 20, seed=1), 7)
    assert src[OPEN.source_private_id] > 0 and src[OPEN.target_private_id] == 0
    assert tgt[OPEN.target_private_id] > 0 and tgt[OPEN.source_private_id] == 0
    assert OPEN.class_names()[-2:] == ["cross", "ring"]


def test_determinism_and_seed_sensitivity():
    a = generate(SMALL, "target", 3, seed=9)
    b = generate(SMALL, "target", 3, seed=9)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.image, y.image)
        np.testing.assert_array_equal(x.mask, y.mask)
    firsts = [generate(SMALL, "source", 1, seed=s)[0].image for s in range(10)]
    for i in range(10):
        for j in range(i + 1, 10):
            assert not np.array_equal(firsts[i], firsts[j])


def test_worker_count_does_not_change_output():
    a = generate(SMALL, "target", 6, seed=3, workers=1)
    b = generate(SMALL, "target", 6, seed=3, workers=3)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.image, y.image)


def test_class_histogram_regression():
    assert class_histogram(generate(SMALL, "source", 6, seed=11), 5) == [5226, 225, 253, 176, 264]
    assert class_histogram(generate(OPEN, "target", 6, seed=11), 7) == [5080, 167, 447, 102, 153, 0, 195]


def test_spec_validation():
    with pytest.raises(ValueError):
        DomainSpec(num_common=1)
    with pytest.raises(ValueError):
        DomainSpec(num_common=9)
    with pytest.raises(ValueError):
        make_sample(SMALL, "validation", 0, 0)
    with pytest.raises(ValueError):
        generate(SMALL, "source", 0, 0)


# -- augmentation ----------------------------------------------------------------------

def test_double_flip_is_identity(rng):
    img, mask = rng.random((3, 8, 8)), rng.integers(0, 5, (8, 8)).astype(np.uint8)
    i1, m1 = apply_geometry(img, mask, True, 1.0)
    i2, m2 = apply_geometry(i1, m1, True, 1.0)
    np.testing.assert_array_equal(i2, img)
    np.testing.assert_array_equal(m2, mask)
    np.testing.assert_array_equal(m1, mask[:, ::-1])


def test_neutral_augmentation_is_identity():
    s = make_sample(SMALL, "source", 0, 0)
    cfg = AugmentConfig(flip_prob=0.0, scale_range=(1.0, 1.0), jitter=False)
    out = augment(s, np.random.default_rng(0), cfg)
    np.testing.assert_array_equal(out.image, s.image)
    np.testing.assert_array_equal(out.mask, s.mask)


@pytest.mark.parametrize("seed", range(10))
def test_augmented_mask_ids_are_a_subset(seed):
    s = make_sample(SMALL, "source", seed, 0)
    out = augment(s, np.random.default_rng(seed))
    assert set(np.unique(out.mask).tolist()) <= set(np.unique(s.mask).tolist()) | {IGNORE_INDEX}
    assert out.image.shape == s.image.shape and out.mask.shape == s.mask.shape


@pytest.mark.parametrize("scale,offset", [(1.5, (3, 5)), (0.5, (2, 7)), (2.0, (0, 0)), (1.0, (0, 0))])
@pytest.mark.parametrize("flip", [False, True])
def test_geometry_keeps_image_and_mask_registered(scale, offset, flip):
    # a mask rendered as an image must land exactly where the mask does (nearest resampling)
    mask = make_sample(SMALL, "source", 5, 0).mask
    as_image = np.repeat(mask[None].astype(np.float32), 3, axis=0)
    img_out, mask_out = apply_geometry(as_image, mask, flip, scale, offset, image_order=0)
    valid = mask_out != IGNORE_INDEX
    np.testing.assert_array_equal(img_out[0][valid], mask_out[valid])
    assert np.all(img_out[0][~valid] == 0)


def test_jitter_leaves_mask_alone():
    s = make_sample(SMALL, "source", 1, 0)
    cfg = AugmentConfig(flip_prob=0.0, scale_range=(1.0, 1.0), jitter=True)
    out = augment(s, np.random.default_rng(1), cfg)
    np.testing.assert_array_equal(out.mask, s.mask)
    assert not np.array_equal(out.image, s.image)


def test_neutral_jitter_is_identity(rng):
    img = rng.random((3, 4, 4))
    np.testing.assert_allclose(color_jitter(img, 1.0, 1.0, 1.0, 0.0), img, atol=1e-12)


# -- dataset files --------------------------------------------------------------------------

def test_export_import_roundtrip(tmp_path):
    samples = generate(SMALL, "target", 4, seed=0)
    path = export_dataset(samples, tmp_path / "d.tdad", SMALL.num_total)
    back, k = import_dataset(path, "target")
    assert k == 5 and len(back) == 4
    for a, b in zip(samples, back):
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.mask, b.mask)
        assert isinstance(b, SceneSample) and b.domain == "target"


def test_import_rejects_corrupt_files(tmp_path):
    path = export_dataset(generate(SMALL, "source", 2, seed=0), tmp_path / "d.tdad", 5)
    raw = path.read_bytes()
    (tmp_path / "bad_magic").write_bytes(b"XXXX" + raw[4:])
    (tmp_path / "short").write_bytes(raw[:-10])
    with pytest.raises(ValueError, match="magic"):
        import_dataset(tmp_path / "bad_magic")
    with pytest.raises(ValueError, match="bytes"):
        import_dataset(tmp_path / "short")
