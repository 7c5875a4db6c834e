import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from punet.data import (
    CIFAR_AUGMENT,
    CIFAR_RECORD,
    GALAXY_AUGMENT,
    AugmentConfig,
    Dataset,
    NoiseConfig,
    Normalizer,
    _allocate,
    augment,
    hflip,
    iterate_batches,
    load_cifar10,
    load_image_folder,
    make_synthetic,
    noise_degradation,
    parse_cifar_batch,
    poisson_corrupt,
    poisson_noise,
    serialize_cifar_batch,
    stratified_split,
    stratified_subset,
)
from punet.errors import DomainError, FormatError, InvalidConfig


def fake_cifar_bytes(n, seed=0, first_label=7):
    r = np.random.default_rng(seed)
    labels = r.integers(0, 10, n)
    labels[0] = first_label
    pixels = r.integers(0, 256, (n, 3, 32, 32), dtype=np.uint8)
    return serialize_cifar_batch(pixels, labels), pixels, labels


class TestCifar:
    def test_full_file_length(self):
        raw, _, _ = fake_cifar_bytes(10_000)
        assert len(raw) == 30_730_000
        x, y = parse_cifar_batch(raw)
        assert x.shape == (10_000, 3, 32, 32) and y.shape == (10_000,)

    def test_first_label_and_layout(self):
        raw, px, _ = fake_cifar_bytes(3, first_label=7)
        x, y = parse_cifar_batch(raw, expect_records=3)
        assert y[0] == 7
        # channel planes are 1024 bytes each, row-major
        assert x[0, 1, 0, 0] == raw[1 + 1024] and x[0, 2, 31, 31] == raw[CIFAR_RECORD - 1]
        np.testing.assert_array_equal(x, px)

    def test_round_trip_bytes(self):
        raw, _, _ = fake_cifar_bytes(50, seed=3)
        assert serialize_cifar_batch(*parse_cifar_batch(raw, expect_records=50)) == raw

    def test_truncated_names_offset(self):
        raw, _, _ = fake_cifar_bytes(4)
        with pytest.raises(FormatError, match="offset 9219"):
            parse_cifar_batch(raw[:-10], expect_records=None)

    def test_wrong_record_count(self):
        raw, _, _ = fake_cifar_bytes(4)
        with pytest.raises(FormatError):
            parse_cifar_batch(raw)

    def test_bad_label(self):
        raw, _, _ = fake_cifar_bytes(2)
        raw = bytearray(raw)
        raw[CIFAR_RECORD] = 12
        with pytest.raises(FormatError, match="offset 3073"):
            parse_cifar_batch(bytes(raw), expect_records=None)

    def test_directory_loader(self, tmp_path):
        for i, name in enumerate([f"data_batch_{k}.bin" for k in range(1, 6)] + ["test_batch.bin"]):
            (tmp_path / name).write_bytes(fake_cifar_bytes(6, seed=i)[0])
        train, test = load_cifar10(tmp_path, records_per_file=6)
        assert len(train) == 30 and len(test) == 6
        assert train.images.min() >= 0 and train.images.max() <= 1
        assert train.class_names[0] == "airplane" and test.split == "test"

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            load_cifar10(tmp_path)


def test_image_folder(tmp_path):
    r = np.random.default_rng(0)
    for cname in ("zebra", "ant"):
        (tmp_path / cname).mkdir()
        for k in range(2):
            Image.fromarray(r.integers(0, 256, (8, 8, 3), dtype=np.uint8)).save(tmp_path / cname / f"{k}.png")
    ds = load_image_folder(tmp_path)
    assert ds.class_names == ["ant", "zebra"]
    assert ds.images.shape == (4, 3, 8, 8)
    assert list(ds.labels) == [0, 0, 1, 1]
    assert load_image_folder(tmp_path, size=4).images.shape == (4, 3, 4, 4)


class TestSynthetic:
    def test_deterministic(self):
        a, b = make_synthetic(3, 5, 16, seed=4), make_synthetic(3, 5, 16, seed=4)
        assert a.images.tobytes() == b.images.tobytes() and np.array_equal(a.labels, b.labels)

    def test_counts(self):
        ds = make_synthetic(classes=3, n_per_class=5, size=8)
        assert len(ds) == 15 and np.bincount(ds.labels).tolist() == [5, 5, 5]

    def test_range(self):
        ds = make_synthetic(4, 3, 8)
        assert ds.images.min() >= 0 and ds.images.max() <= 1 and ds.images.dtype == np.float32

    def test_needs_two_classes(self):
        with pytest.raises(InvalidConfig):
            make_synthetic(classes=1)

    def test_linear_probe_learns(self):
        train = make_synthetic(10, 60, 32, seed=0)
        test = make_synthetic(10, 30, 32, seed=1)
        # ridge one-vs-all probe on raw pixels
        x = train.images.reshape(len(train), -1).astype(np.float64)
        mu = x.mean(axis=0)
        xa = np.hstack([x - mu, np.ones((len(x), 1))])
        y = np.eye(10)[train.labels]
        w = np.linalg.solve(xa.T @ xa + 100.0 * np.eye(xa.shape[1]), xa.T @ y)
        xt = np.hstack([test.images.reshape(len(test), -1) - mu, np.ones((len(test), 1))])
        acc = float(((xt @ w).argmax(axis=1) == test.labels).mean())
        assert acc > 0.6


class TestAugment:
    def test_static_doubles(self):
        ds = make_synthetic(2, 4, 8)
        out = augment(ds, GALAXY_AUGMENT, seed=0)
        assert len(out) == 16
        np.testing.assert_array_equal(out.images[:8], ds.images)
        np.testing.assert_array_equal(out.labels[8:], ds.labels)

    def test_noop_augment_copies(self):
        ds = make_synthetic(2, 3, 8)
        out = augment(ds, AugmentConfig(hflip_prob=0.0), seed=0)
        np.testing.assert_array_equal(out.images[6:], ds.images)

    @given(st.integers(0, 2**16))
    def test_flip_involution(self, seed):
        x = np.random.default_rng(seed).random((3, 5, 7))
        np.testing.assert_array_equal(hflip(hflip(x)), x)

    def test_always_flip(self):
        ds = make_synthetic(2, 2, 8)
        out = augment(ds, AugmentConfig(hflip_prob=1.0), seed=0)
        np.testing.assert_array_equal(out.images[4:], ds.images[..., ::-1])

    def test_eval_split_rejected(self):
        ds = make_synthetic(2, 2, 8)
        with pytest.raises(InvalidConfig):
            augment(ds.subset(np.arange(4), split="test"), GALAXY_AUGMENT, 0)

    def test_per_epoch_mode_keeps_shape_and_varies(self):
        ds = augment(make_synthetic(2, 4, 8), CIFAR_AUGMENT, seed=1)
        assert len(ds) == 8
        e1 = next(iterate_batches(ds, 8, None, epoch=1))[0]
        e1b = next(iterate_batches(ds, 8, None, epoch=1))[0]
        e2 = next(iterate_batches(ds, 8, None, epoch=2))[0]
        assert e1.shape == ds.images.shape
        np.testing.assert_array_equal(e1, e1b)
        assert not np.array_equal(e1, e2)

    def test_invalid_config(self):
        with pytest.raises(InvalidConfig):
            AugmentConfig(hflip_prob=1.5).validate()
        with pytest.raises(InvalidConfig):
            AugmentConfig(crop_pad=-1).validate()


class TestNoise:
    def test_zero_stays_zero(self):
        out = poisson_noise(np.zeros((2, 3, 4, 4)), 255, np.random.default_rng(0))
        assert np.all(out == 0)

    def test_moments(self):
        x = np.full(1_000_000, 0.5)
        k = poisson_noise(x, 100.0, np.random.default_rng(1)).astype(np.float64)
        assert abs(k.mean() - 0.5) / 0.5 < 0.05
        assert abs(k.var() - 0.005) / 0.005 < 0.05

    def test_corrupt_properties_and_cache(self):
        ds = make_synthetic(2, 3, 8)
        a = poisson_corrupt(ds, NoiseConfig(peak=20, seed=3))
        b = poisson_corrupt(ds, NoiseConfig(peak=20, seed=3))
        assert a is b
        assert a.images.shape == ds.images.shape and np.array_equal(a.labels, ds.labels)
        assert a.images.min() >= 0 and a.images.max() <= 1
        assert not np.array_equal(a.images, ds.images)
        fresh = poisson_corrupt(make_synthetic(2, 3, 8), NoiseConfig(peak=20, seed=3))
        assert fresh.images.tobytes() == a.images.tobytes()

    def test_peak_must_be_positive(self):
        with pytest.raises(InvalidConfig):
            NoiseConfig(peak=0)

    def test_degradation_examples(self):
        d = noise_degradation(84.28, 83.83)
        assert d == pytest.approx(0.45 / 84.28 * 100, rel=1e-12)
        assert round(d, 3) == 0.534
        assert noise_degradation(70, 70) == 0
        assert noise_degradation(50, 25) == 50
        with pytest.raises(DomainError):
            noise_degradation(0, 0)

    @given(a=st.floats(1, 100), b=st.floats(0, 100), c=st.floats(0.01, 100))
    def test_degradation_scale_free(self, a, b, c):
        assert noise_degradation(c * a, c * b) == pytest.approx(noise_degradation(a, b), abs=1e-9)


class TestSplits:
    def test_counts_per_class(self):
        ds = make_synthetic(3, 100, 4)
        tr, va, te = stratified_split(ds, (0.9, 0.05, 0.05), seed=0)
        for part, n in ((tr, 90), (va, 5), (te, 5)):
            assert np.bincount(part.labels).tolist() == [n] * 3

    @given(n=st.integers(0, 500), f=st.lists(st.floats(0.01, 1), min_size=2, max_size=4))
    def test_allocation_sums(self, n, f):
        fr = np.array(f) / sum(f)
        counts = _allocate(n, fr)
        assert sum(counts) == n
        assert all(abs(c - n * x) < 1 for c, x in zip(counts, fr))

    def test_allocation_largest_remainder(self):
        assert _allocate(7, [0.5, 0.3, 0.2]) == [4, 2, 1]

    def test_union_disjoint(self):
        ds = make_synthetic(4, 23, 4)
        ds.images[:, 0, 0, 0] = np.arange(len(ds))  # tag samples
        parts = stratified_split(ds, (0.7, 0.2, 0.1), seed=5)
        tags = np.concatenate([p.images[:, 0, 0, 0] for p in parts])
        assert sorted(tags.tolist()) == list(range(len(ds)))
        assert [p.split for p in parts] == ["train", "val", "test"]

    def test_deterministic(self):
        ds = make_synthetic(3, 20, 4)
        a, b = stratified_split(ds, seed=2, fractions=(0.5, 0.25, 0.25)), stratified_split(ds, seed=2, fractions=(0.5, 0.25, 0.25))
        assert all(x.images.tobytes() == y.images.tobytes() for x, y in zip(a, b))

    def test_too_small_class(self):
        with pytest.raises(InvalidConfig):
            stratified_split(make_synthetic(2, 5, 4), (0.9, 0.05, 0.05))

    def test_bad_fractions(self):
        with pytest.raises(InvalidConfig):
            stratified_split(make_synthetic(2, 5, 4), (0.5, 0.6))

    def test_subset(self):
        ds = make_synthetic(4, 50, 4)
        sub = stratified_subset(ds, 80, seed=0)
        assert np.bincount(sub.labels).tolist() == [20] * 4


def test_normalizer_round_trip(rng):
    ds = Dataset(rng.random((20, 3, 5, 5)), rng.integers(0, 2, 20), ["a", "b"])
    norm = Normalizer.fit(ds)
    z = norm.apply(ds.images)
    np.testing.assert_allclose(z.mean(axis=(0, 2, 3)), 0, atol=1e-5)
    np.testing.assert_allclose(norm.invert(z), ds.images, atol=1e-6)
    again = Normalizer.from_dict(norm.to_dict())
    np.testing.assert_array_equal(again.apply(ds.images), z)


def test_dataset_validation():
    with pytest.raises(FormatError):
        Dataset(np.zeros((2, 1, 2, 2)), [0, 5], ["a", "b"])
    with pytest.raises(FormatError):
        Dataset(np.zeros((2, 1, 2, 2)), [0], ["a"])


def test_batches_cover_everything_once():
    ds = make_synthetic(3, 7, 4)
    seen = np.concatenate([y for _, y in iterate_batches(ds, 4, np.random.default_rng(0))])
    assert sorted(seen.tolist()) == sorted(ds.labels.tolist())
