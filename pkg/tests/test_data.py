import dataclasses

import numpy as np
import pytest

from dtcnsim.data import (
    DatasetFormatError,
    DatasetVersionError,
    MultimodalSample,
    SyntheticSpec,
    SyntheticSpecError,
    class_prototypes,
    generate_synthetic,
    load_dataset,
    mask_batch,
    mask_dataset,
    mask_modality_a,
    save_dataset,
)


def test_generation_is_deterministic(small_spec):
    train_a, test_a = generate_synthetic(small_spec)
    train_b, test_b = generate_synthetic(small_spec)
    np.testing.assert_array_equal(train_a.x_img, train_b.x_img)
    np.testing.assert_array_equal(test_a.x_txt, test_b.x_txt)
    np.testing.assert_array_equal(train_a.labels, train_b.labels)


def test_generated_shapes_and_balanced_classes(small_spec, small_data):
    train, test = small_data
    assert len(train) == small_spec.n_train
    assert len(test) == small_spec.n_test
    assert train.img_dim == small_spec.img_dim
    assert train.txt_dim == small_spec.txt_dim
    counts = np.bincount(train.labels, minlength=small_spec.n_classes)
    assert counts.max() - counts.min() <= 1


def test_train_and_test_are_different_draws(small_data):
    train, test = small_data
    assert not np.array_equal(train.x_img[:10], test.x_img[:10])


def test_rho_zero_makes_modality_b_uninformative(small_spec):
    spec = dataclasses.replace(small_spec, rho=0.0, sigma_b=0.0)
    train, _ = generate_synthetic(spec)
    np.testing.assert_allclose(train.x_txt, np.broadcast_to(train.x_txt[0], train.x_txt.shape))


def test_invalid_specs_are_rejected():
    with pytest.raises(SyntheticSpecError):
        generate_synthetic(SyntheticSpec(n_classes=1))
    with pytest.raises(SyntheticSpecError):
        generate_synthetic(SyntheticSpec(rho=1.5))


def test_mask_zeroes_rounded_fraction_of_modality_a():
    sample = MultimodalSample(np.arange(1.0, 11.0), np.ones(3), 2)
    masked = mask_modality_a(sample, 0.25, seed=1)
    # round(2.5) hacia arriba
    assert np.count_nonzero(masked.x_img == 0.0) == 3
    np.testing.assert_array_equal(masked.x_txt, sample.x_txt)
    assert masked.label == 2
    np.testing.assert_array_equal(mask_modality_a(sample, 0.25, seed=1).x_img, masked.x_img)
    assert np.count_nonzero(mask_modality_a(sample, 0.0, seed=1).x_img == 0.0) == 0
    assert np.all(mask_modality_a(sample, 1.0, seed=1).x_img == 0.0)


def test_mask_fraction_out_of_range_is_rejected():
    sample = MultimodalSample(np.ones(4), np.ones(2), 0)
    with pytest.raises(ValueError):
        mask_modality_a(sample, 1.2, seed=0)


def test_mask_dataset_keeps_original_intact(small_data):
    train, _ = small_data
    masked = mask_dataset(train, 0.5, seed=3)
    assert np.all(np.count_nonzero(masked.x_img == 0.0, axis=1) >= 4)
    assert np.count_nonzero(train.x_img == 0.0) == 0
    np.testing.assert_array_equal(masked.x_txt, train.x_txt)
    np.testing.assert_array_equal(masked.labels, train.labels)


def test_batches_cover_every_sample_once(small_data):
    train, _ = small_data
    batches = list(train.batches(10, rng=np.random.default_rng(0)))
    assert [len(b) for b in batches] == [10] * 6 + [4]
    seen = np.sort(np.concatenate([b.labels for b in batches]))
    np.testing.assert_array_equal(seen, np.sort(train.labels))
    assert len(list(train.batches())) == 1


def test_saved_dataset_loads_back(tmp_path, small_data):
    train, _ = small_data
    path = save_dataset(train, tmp_path / "train.bin")
    loaded = load_dataset(path)
    np.testing.assert_array_equal(loaded.x_img, train.x_img)
    np.testing.assert_array_equal(loaded.labels, train.labels)
    assert loaded.n_classes == train.n_classes


def test_corrupt_dataset_files_are_rejected(tmp_path, small_data):
    train, _ = small_data
    path = save_dataset(train, tmp_path / "train.bin")
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(DatasetFormatError):
        load_dataset(path)
    path.write_bytes(raw[:6] + (7).to_bytes(2, "little") + raw[8:])
    with pytest.raises(DatasetVersionError):
        load_dataset(path)
    path.write_bytes(b"XXXXXX" + raw[6:])
    with pytest.raises(DatasetFormatError, match="cabecera"):
        load_dataset(path)


def nearest_mean_accuracy(train_x, train_y, test_x, test_y, n_classes):
    means = np.stack([train_x[train_y == c].mean(axis=0) for c in range(n_classes)])
    distances = ((test_x[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    return float(np.mean(np.argmin(distances, axis=1) == test_y))


def test_noise_free_samples_sit_on_their_prototypes():
    spec = SyntheticSpec(sigma_a=0.0, sigma_b=0.0)
    proto_a, proto_b, uninformative = class_prototypes(spec)
    train, _ = generate_synthetic(spec)
    nearest_a = np.argmin(((train.x_img[:, None, :] - proto_a[None]) ** 2).sum(axis=2), axis=1)
    shifted_b = spec.rho * proto_b + (1.0 - spec.rho) * uninformative
    nearest_b = np.argmin(((train.x_txt[:, None, :] - shifted_b[None]) ** 2).sum(axis=2), axis=1)
    assert np.mean(nearest_a == train.labels) == 1.0
    assert np.mean(nearest_b == train.labels) == 1.0


def test_text_at_rho_zero_is_at_chance():
    spec = SyntheticSpec(rho=0.0)
    train, test = generate_synthetic(spec)
    accuracy = nearest_mean_accuracy(
        train.x_txt, train.labels, test.x_txt, test.labels, spec.n_classes
    )
    assert accuracy == pytest.approx(1.0 / spec.n_classes, abs=0.04)


def test_text_accuracy_grows_with_rho():
    accuracies = []
    for rho in (0.0, 0.25, 0.5, 0.75, 1.0):
        spec = SyntheticSpec(rho=rho)
        train, test = generate_synthetic(spec)
        accuracies.append(
            nearest_mean_accuracy(train.x_txt, train.labels, test.x_txt, test.labels, spec.n_classes)
        )
    assert accuracies == sorted(accuracies)
    assert accuracies[-1] - accuracies[0] > 0.3


def test_default_modality_a_is_linearly_separable():
    spec = SyntheticSpec()
    train, _ = generate_synthetic(spec)
    features = np.hstack([train.x_img, np.ones((len(train), 1))])
    targets = np.eye(spec.n_classes)[train.labels]
    weights, *_ = np.linalg.lstsq(features, targets, rcond=None)
    accuracy = np.mean(np.argmax(features @ weights, axis=1) == train.labels)
    assert accuracy >= 0.9


def test_ids_follow_samples_through_subsets_and_batches(small_data):
    train, _ = small_data
    part = train.subset([9, 2, 5])
    np.testing.assert_array_equal(part.ids, [9, 2, 5])
    assert not part.ids.flags.writeable
    np.testing.assert_array_equal(part.subset([2, 0]).as_batch().sample_ids(), [5, 9])
    batches = list(train.batches(10, rng=np.random.default_rng(1)))
    seen = np.concatenate([b.ids for b in batches])
    np.testing.assert_array_equal(np.sort(seen), np.arange(len(train)))
    np.testing.assert_array_equal(mask_dataset(part, 0.5, seed=0).ids, part.ids)


def test_mask_batch_depends_only_on_the_sample_id(small_data):
    train, _ = small_data
    whole = mask_batch(train.as_batch(), 0.5, 0.5, seed=4)
    part = mask_batch(train.subset([30, 7]).as_batch(), 0.5, 0.5, seed=4)
    np.testing.assert_array_equal(part.x_img, whole.x_img[[30, 7]])
    masked_rows = np.count_nonzero(np.any(whole.x_img != train.x_img, axis=1))
    assert 0 < masked_rows < len(train)
    np.testing.assert_array_equal(whole.x_txt, train.x_txt)


def test_mask_batch_probability_bounds(small_data):
    batch = small_data[0].as_batch()
    assert mask_batch(batch, 0.5, 0.0, seed=1) is batch
    fully = mask_batch(batch, 0.5, 1.0, seed=1)
    assert np.all(np.count_nonzero(fully.x_img == 0.0, axis=1) == 4)
    with pytest.raises(ValueError):
        mask_batch(batch, 0.5, 1.5, seed=1)
