import numpy as np
import pytest

from owislab.data import (
    FEATURE_DIM,
    KINDS,
    Dataset,
    DatasetFormatError,
    DatasetManifest,
    DropoutPolicy,
    SceneSpec,
    cutout,
    drop_annotations,
    foreground_truth,
    generate_dataset,
    generate_scene,
    load_dataset,
    rendered_foreground,
    samples_equal,
    save_dataset,
    split_labeled_unlabeled,
)
from owislab.masks import union_foreground

SPEC = SceneSpec(height=32, width=32, min_instances=2, max_instances=5, min_scale=3.0, max_scale=7.0)


def small_manifest(**kw):
    defaults = dict(seed=7, scene=SPEC, num_samples=6)
    defaults.update(kw)
    return DatasetManifest(**defaults)


class TestSceneSpecValidation:
    def test_too_small_canvas(self):
        with pytest.raises(ValueError):
            SceneSpec(height=8, width=8)

    def test_instance_bounds(self):
        with pytest.raises(ValueError):
            SceneSpec(min_instances=5, max_instances=2)
        with pytest.raises(ValueError):
            SceneSpec(max_instances=13)

    def test_scale_must_fit(self):
        with pytest.raises(ValueError):
            SceneSpec(height=16, width=16, max_scale=9.0)


class TestGenerateScene:
    def test_zero_instaccording_spec(self):
        spec = SceneSpec(height=16, width=16, min_instances=0, max_instances=0, min_scale=2.0, max_scale=5.0)
        sample = generate_scene(3, spec)
        assert sample.full_annotations == ()
        assert sample.features.shape == (16, 16, FEATURE_DIM)
        assert np.all(sample.features[:, :, :5] == 0.0)

    def test_same_seed_is_bit_identical(self):
        a = generate_scene(42, SPEC)
        b = generate_scene(42, SPEC)
        assert samples_equal(a, b)

    def test_union_of_masks_equals_rendered_foreground(self):
        for seed in range(10):
            sample = generate_scene(seed, SPEC)
            union = union_foreground(sample.full_masks(), height=32, width=32)
            # independent per-pixel oracle: foreground is where a color is set
            assert union == rendered_foreground(sample)

    def test_masks_disjoint_and_nonempty(self):
        for seed in range(10):
            sample = generate_scene(100 + seed, SPEC)
            total = np.zeros((32, 32), dtype=int)
            for m in sample.full_masks():
                assert m.area >= 4
                total += m.data
            assert total.max() <= 1

    def test_requested_count_recorded(self):
        sample = generate_scene(5, SPEC)
        assert len(sample.full_annotations) <= sample.requested_instances <= 5


class TestDropAnnotations:
    def test_keep_all(self):
        sample = generate_scene(1, SPEC)
        out = drop_annotations(sample, DropoutPolicy(keep_fraction=1.0))
        assert out.visible_annotations == tuple(range(len(sample.full_annotations)))

    def test_keep_none_still_labeled(self):
        sample = generate_scene(2, SPEC)
        out = drop_annotations(sample, DropoutPolicy(keep_fraction=0.0))
        assert out.visible_annotations == ()
        assert out.labeled
        assert len(out.full_annotations) == len(sample.full_annotations)

    def test_drop_kind_set_difference_oracle(self):
        spec = SceneSpec(height=32, width=32, min_instances=4, max_instances=6, min_scale=3.0, max_scale=6.0)
        for seed in range(20):
            sample = generate_scene(seed, spec)
            out = drop_annotations(sample, DropoutPolicy(drop_kinds=("triangle",)))
            assert all(sample.full_annotations[i].kind != "triangle" for i in out.visible_annotations)
            kept_union = foreground_truth(out).data.astype(int)
            full_union = foreground_truth(out, visible_only=False).data.astype(int)
            triangle = np.zeros((32, 32), dtype=int)
            for inst in sample.full_annotations:
                if inst.kind == "triangle":
                    triangle |= inst.mask.data.astype(int)
            assert np.array_equal(full_union - kept_union, triangle)

    def test_fraction_dropout_is_binomial(self):
        spec = SceneSpec(height=16, width=16, min_instances=2, max_instances=4, min_scale=2.0, max_scale=4.0)
        keep = 0.7
        total = kept = 0
        seed = 0
        while total < 1000:
            sample = generate_scene(seed, spec)
            seed += 1
            out = drop_annotations(sample, DropoutPolicy(keep_fraction=keep))
            total += len(sample.full_annotations)
            kept += len(out.visible_annotations)
        sigma = np.sqrt(total * keep * (1 - keep))
        assert abs(kept - keep * total) <= 3 * sigma

    def test_deterministic_per_sample(self):
        sample = generate_scene(9, SPEC)
        p = DropoutPolicy(keep_fraction=0.5)
        assert drop_annotations(sample, p).visible_annotations == drop_annotations(sample, p).visible_annotations


class TestSplit:
    def test_full_fraction_empty_unlabeled(self):
        ds = generate_dataset(small_manifest())
        d_l, d_u = split_labeled_unlabeled(ds, 1.0, seed=0)
        assert len(d_l) == len(ds) and len(d_u) == 0

    def test_thirty_percent_of_hundred(self):
        ds = generate_dataset(small_manifest(num_samples=100, scene=SPEC))
        d_l, d_u = split_labeled_unlabeled(ds, 0.3, seed=1)
        assert len(d_l) == 30 and len(d_u) == 70
        assert all(not s.labeled and s.visible_annotations == () for s in d_u.samples)
        assert all(s.labeled for s in d_l.samples)

    def test_same_seed_same_split(self):
        ds = generate_dataset(small_manifest(num_samples=10))
        a = split_labeled_unlabeled(ds, 0.5, seed=3)
        b = split_labeled_unlabeled(ds, 0.5, seed=3)
        assert [s.seed for s in a[0].samples] == [s.seed for s in b[0].samples]

    def test_invalid_fraction(self):
        ds = generate_dataset(small_manifest())
        with pytest.raises(ValueError):
            split_labeled_unlabeled(ds, 0.0, seed=0)

    def test_empty_dataset(self):
        with pytest.raises(ValueError):
            split_labeled_unlabeled(Dataset(None, ()), 0.5, seed=0)


class TestCutout:
    def test_side_bounds_on_64(self):
        spec = SceneSpec(height=64, width=64, min_instances=1, max_instances=3)
        sample = generate_scene(0, spec)
        for seed in range(50):
            out = cutout(sample, np.random.default_rng(seed))
            y0, x0, ch, cw = out.cutout_rect
            assert 8 <= ch <= 21 and 8 <= cw <= 21
            assert 0 <= y0 <= 64 - ch and 0 <= x0 <= 64 - cw

    def test_fixed_rng_is_reproducible(self):
        sample = generate_scene(1, SPEC)
        a = cutout(sample, np.random.default_rng(5))
        b = cutout(sample, np.random.default_rng(5))
        assert samples_equal(a, b)

    def test_zeroed_pixel_count_equals_area(self):
        sample = generate_scene(2, SPEC)
        out = cutout(sample, np.random.default_rng(7))
        _, _, ch, cw = out.cutout_rect
        # the bias channel is 1 everywhere outside the cut
        zeroed = int(np.sum(np.all(out.features == 0.0, axis=2)))
        assert zeroed == ch * cw

    def test_annotations_untouched(self):
        sample = generate_scene(3, SPEC)
        out = cutout(sample, np.random.default_rng(11))
        assert out.visible_annotations == sample.visible_annotations
        assert all(a.mask == b.mask for a, b in zip(out.full_annotations, sample.full_annotations))


class TestDatasetRoundTrip:
    def test_save_load_identity(self, tmp_path):
        manifest = small_manifest(dropout=DropoutPolicy(keep_fraction=0.6), sparse_annotations=True)
        ds = generate_dataset(manifest)
        path = tmp_path / "ds.ndjson"
        save_dataset(ds, path)
        loaded = load_dataset(path)
        assert loaded.manifest == manifest
        assert len(loaded) == len(ds)
        for a, b in zip(ds.samples, loaded.samples):
            assert samples_equal(a, b)

    def test_regeneration_from_manifest_is_bit_identical(self):
        manifest = small_manifest(dropout=DropoutPolicy(drop_kinds=("bar",)), labeled_fraction=0.5)
        a = generate_dataset(manifest)
        b = generate_dataset(manifest)
        for x, y in zip(a.samples, b.samples):
            assert samples_equal(x, y)

    def test_truncated_file_errors(self, tmp_path):
        ds = generate_dataset(small_manifest())
        path = tmp_path / "ds.ndjson"
        save_dataset(ds, path)
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines[:-2]) + "\n")
        with pytest.raises(DatasetFormatError):
            load_dataset(path)

    def test_checksum_mismatch_errors(self, tmp_path):
        ds = generate_dataset(small_manifest())
        path = tmp_path / "ds.ndjson"
        save_dataset(ds, path)
        text = path.read_text()
        import re

        corrupted = re.sub(r'"features_sha256": "[0-9a-f]{8}', '"features_sha256": "deadbeef', text, count=1)
        path.write_text(corrupted)
        with pytest.raises(DatasetFormatError):
            load_dataset(path)

    def test_garbage_file_errors(self, tmp_path):
        path = tmp_path / "junk.ndjson"
        path.write_text("not json\n")
        with pytest.raises(DatasetFormatError):
            load_dataset(path)

    def test_cutout_sample_round_trips(self, tmp_path):
        sample = cutout(generate_scene(4, SPEC), np.random.default_rng(0))
        ds = Dataset(small_manifest(num_samples=1), (sample,))
        path = tmp_path / "cut.ndjson"
        save_dataset(ds, path)
        loaded = load_dataset(path)
        assert samples_equal(loaded.samples[0], sample)
