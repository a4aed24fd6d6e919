import numpy as np
import pytest
import torch

from uekit.datasets import (
    CorruptDatasetError,
    DatasetFilesMissingError,
    ImageBatch,
    SplitDataset,
    UnknownDatasetError,
    apply_bank,
    load_dataset,
    make_disjoint_prior_split,
    make_glyphs,
    mix_poison,
)
from uekit.generator import PerturbationBank

EPS = 8.0 / 255.0


def small_bank(class_count, shape, fill=0.0, epsilon=EPS):
    deltas = torch.full((class_count, *shape), fill)
    return PerturbationBank(deltas, epsilon)


class TestGlyphs:
    def test_deterministic_per_seed(self):
        a = make_glyphs(class_count=3, train_per_class=4, test_per_class=2, seed=7)
        b = make_glyphs(class_count=3, train_per_class=4, test_per_class=2, seed=7)
        assert torch.equal(a.train_images, b.train_images)
        assert torch.equal(a.test_images, b.test_images)
        c = make_glyphs(class_count=3, train_per_class=4, test_per_class=2, seed=8)
        assert not torch.equal(a.train_images, c.train_images)

    def test_pixel_range_and_balance(self, tiny_glyphs):
        assert tiny_glyphs.train_images.min() >= 0.0
        assert tiny_glyphs.train_images.max() <= 1.0
        counts = torch.bincount(tiny_glyphs.train_labels, minlength=tiny_glyphs.class_count)
        assert (counts == counts[0]).all()
        assert tiny_glyphs.train_labels.max() < tiny_glyphs.class_count

    def test_default_registry_entry(self):
        ds = load_dataset("synthetic-glyphs")
        assert ds.class_count == 10
        assert ds.image_shape == (3, 32, 32)

    def test_too_few_classes(self):
        with pytest.raises(ValueError):
            make_glyphs(class_count=1)


class TestRegistry:
    def test_unknown_id(self):
        with pytest.raises(UnknownDatasetError):
            load_dataset("no-such-dataset")

    @pytest.mark.skipif(
        not __import__("pathlib").Path("/data/cifar10/cifar-10-batches-py").exists(),
        reason="cifar10 files not on disk",
    )
    def test_cifar_published_split_sizes(self):
        ds = load_dataset("cifar10", "/data/cifar10")
        assert ds.class_count == 10
        assert ds.train_size == 50_000
        assert ds.test_size == 10_000

    def test_cifar_missing_root(self, tmp_path):
        with pytest.raises(DatasetFilesMissingError):
            load_dataset("cifar10", tmp_path / "nowhere")

    def test_cifar_corrupt_record(self, tmp_path):
        base = tmp_path / "cifar-10-batches-py"
        base.mkdir()
        for name in [f"data_batch_{i}" for i in range(1, 6)] + ["test_batch"]:
            (base / name).write_bytes(b"not a pickle")
        with pytest.raises(CorruptDatasetError):
            load_dataset("cifar10", tmp_path)


class TestDisjointSplit:
    def test_budget_error(self, tiny_glyphs):
        with pytest.raises(ValueError):
            make_disjoint_prior_split(tiny_glyphs, 3, 2, seed=0)

    def test_disjoint_classes_many_seeds(self):
        ds = make_glyphs(class_count=6, train_per_class=2, test_per_class=1,
                         image_size=(16, 16), seed=0)
        for seed in range(1000):
            prior, down = make_disjoint_prior_split(ds, 3, 2, seed=seed)
            assert not set(prior.source_classes) & set(down.source_classes)
            assert len(prior.source_classes) == 3
            assert len(down.source_classes) == 2

    def test_labels_reindexed_contiguously(self, tiny_split):
        prior, down = tiny_split
        for ds in (prior, down):
            assert set(ds.train_labels.tolist()) == set(range(ds.class_count))
            assert set(ds.test_labels.tolist()) == set(range(ds.class_count))

    def test_deterministic(self, tiny_glyphs):
        a = make_disjoint_prior_split(tiny_glyphs, 2, 2, seed=3)
        b = make_disjoint_prior_split(tiny_glyphs, 2, 2, seed=3)
        assert torch.equal(a[0].train_images, b[0].train_images)
        assert torch.equal(a[1].train_labels, b[1].train_labels)

    def test_images_follow_original_classes(self, tiny_glyphs):
        prior, down = make_disjoint_prior_split(tiny_glyphs, 2, 2, seed=3)
        assert prior.train_size + down.train_size == tiny_glyphs.train_size


class TestApplyBank:
    def test_zero_bank_is_identity(self, tiny_glyphs):
        batch = ImageBatch(tiny_glyphs.train_images[:6], tiny_glyphs.train_labels[:6])
        bank = small_bank(tiny_glyphs.class_count, tiny_glyphs.image_shape)
        out = apply_bank(batch, bank, batch.labels)
        assert torch.equal(out.pixels, batch.pixels)
        assert torch.equal(out.labels, batch.labels)

    def test_own_label_assignment(self, tiny_glyphs):
        batch = ImageBatch(tiny_glyphs.train_images[:6], tiny_glyphs.train_labels[:6])
        deltas = torch.randn(tiny_glyphs.class_count, *tiny_glyphs.image_shape).clamp(-EPS, EPS)
        bank = PerturbationBank(deltas, EPS)
        out = apply_bank(batch, bank, batch.labels)
        expected = torch.clamp(batch.pixels + deltas[batch.labels], 0, 1)
        assert torch.equal(out.pixels, expected)

    def test_clipping_at_one(self):
        pixels = torch.ones(1, 3, 4, 4)
        batch = ImageBatch(pixels, torch.zeros(1, dtype=torch.int64))
        bank = small_bank(2, (3, 4, 4), fill=EPS)
        out = apply_bank(batch, bank, torch.zeros(1, dtype=torch.int64))
        assert torch.equal(out.pixels, torch.ones_like(pixels))

    def test_epsilon_deviation_property(self, rng):
        for _ in range(200):
            pixels = torch.from_numpy(rng.uniform(0, 1, size=(3, 3, 4, 4)).astype(np.float32))
            deltas = torch.from_numpy(
                rng.uniform(-EPS, EPS, size=(5, 3, 4, 4)).astype(np.float32)
            )
            batch = ImageBatch(pixels, torch.zeros(3, dtype=torch.int64))
            assignment = torch.from_numpy(rng.integers(0, 5, size=3))
            out = apply_bank(batch, PerturbationBank(deltas, EPS), assignment)
            assert (out.pixels - pixels).abs().max() <= EPS + 1e-6

    def test_shape_mismatch(self, tiny_glyphs):
        batch = ImageBatch(tiny_glyphs.train_images[:2], tiny_glyphs.train_labels[:2])
        bank = small_bank(4, (3, 8, 8))
        with pytest.raises(ValueError):
            apply_bank(batch, bank, batch.labels)

    def test_assignment_out_of_range(self, tiny_glyphs):
        batch = ImageBatch(tiny_glyphs.train_images[:2], tiny_glyphs.train_labels[:2])
        bank = small_bank(4, tiny_glyphs.image_shape)
        with pytest.raises(ValueError):
            apply_bank(batch, bank, torch.tensor([0, 9]))


class TestMixPoison:
    def test_ratio_zero_and_one(self, tiny_glyphs):
        bank = small_bank(tiny_glyphs.class_count, tiny_glyphs.image_shape, fill=EPS)
        none = mix_poison(tiny_glyphs, bank, 0.0, seed=0)
        assert none.perturbed_mask.sum() == 0
        assert torch.equal(none.train_images, tiny_glyphs.train_images)
        everything = mix_poison(tiny_glyphs, bank, 1.0, seed=0)
        assert everything.perturbed_mask.all()

    def test_floor_rule(self):
        ds = make_glyphs(class_count=2, train_per_class=5, test_per_class=1,
                         image_size=(16, 16), seed=0)
        bank = small_bank(2, ds.image_shape, fill=EPS)
        mix = mix_poison(ds, bank, 0.5, seed=0)
        assert mix.perturbed_mask.sum() == 5  # floor(0.5 * 10)

    def test_labels_unchanged(self, tiny_glyphs):
        bank = small_bank(tiny_glyphs.class_count, tiny_glyphs.image_shape, fill=EPS)
        mix = mix_poison(tiny_glyphs, bank, 0.7, seed=2)
        assert torch.equal(mix.train_labels, tiny_glyphs.train_labels)

    def test_bit_identical_across_runs(self, tiny_glyphs):
        deltas = torch.randn(tiny_glyphs.class_count, *tiny_glyphs.image_shape).clamp(-EPS, EPS)
        bank = PerturbationBank(deltas, EPS)
        a = mix_poison(tiny_glyphs, bank, 0.4, seed=9)
        b = mix_poison(tiny_glyphs, bank, 0.4, seed=9)
        assert torch.equal(a.train_images, b.train_images)
        assert (a.perturbed_mask == b.perturbed_mask).all()

    def test_ratio_out_of_range(self, tiny_glyphs):
        bank = small_bank(tiny_glyphs.class_count, tiny_glyphs.image_shape)
        with pytest.raises(ValueError):
            mix_poison(tiny_glyphs, bank, 1.5, seed=0)

    def test_manifest_csv(self, tiny_glyphs, tmp_path):
        bank = small_bank(tiny_glyphs.class_count, tiny_glyphs.image_shape, fill=EPS)
        mix = mix_poison(tiny_glyphs, bank, 0.5, seed=0)
        path = tmp_path / "poison.csv"
        mix.write_manifest_csv(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "index,class,perturbed_flag"
        assert len(lines) == tiny_glyphs.train_size + 1
        flags = [int(line.split(",")[2]) for line in lines[1:]]
        assert sum(flags) == mix.perturbed_mask.sum()

    def test_per_sample_deltas_accepted(self, tiny_glyphs):
        from uekit.emn import SampleDeltas

        deltas = SampleDeltas(torch.zeros(tiny_glyphs.train_size, *tiny_glyphs.image_shape), EPS)
        mix = mix_poison(tiny_glyphs, deltas, 1.0, seed=0)
        assert torch.equal(mix.train_images, tiny_glyphs.train_images)

    def test_wrong_entry_count(self, tiny_glyphs):
        bank = torch.zeros(7, *tiny_glyphs.image_shape)
        with pytest.raises(ValueError):
            mix_poison(tiny_glyphs, bank, 1.0, seed=0)
