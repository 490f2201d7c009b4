import numpy as np
import pytest

from distillab.data import (
    DatasetFormatError,
    LabeledDataset,
    ToyDataSpec,
    cutmix,
    grating_image,
    read_dataset,
    sample_mix_ratio,
    synthesize_toy_dataset,
    write_dataset,
)
from distillab.numerics import SeededRng


class TestToyDataset:
    def test_counts_and_labels(self):
        spec = ToyDataSpec(num_classes=5, train_per_class=500, test_per_class=20)
        train, test = synthesize_toy_dataset(spec)
        assert len(train) == 2500
        assert len(test) == 100
        assert set(np.unique(train.labels)) == set(range(5))
        assert np.all((train.images >= 0.0) & (train.images <= 1.0))

    def test_zero_noise_zero_jitter_identical_up_to_phase(self):
        spec = ToyDataSpec(
            num_classes=2,
            train_per_class=4,
            test_per_class=1,
            noise_std=0.0,
            amplitude_jitter=0.0,
        )
        train, _ = synthesize_toy_dataset(spec)
        thetas, freqs = spec.resolved_patterns()
        # every class-0 image must be reproducible as a pure grating of the
        # class pattern at some phase
        img = train.images[0]
        phases = np.linspace(0.0, 2 * np.pi, 20000)
        best = min(
            np.abs(
                grating_image(spec.image_shape, thetas[0], freqs[0], p, spec.amplitude)
                - img
            ).max()
            for p in phases
        )
        assert best < 2e-3

    def test_invalid_spec_rejected(self):
        with pytest.raises(ValueError):
            synthesize_toy_dataset(ToyDataSpec(num_classes=0))
        with pytest.raises(ValueError):
            synthesize_toy_dataset(ToyDataSpec(train_per_class=0))
        with pytest.raises(ValueError):
            ToyDataSpec(
                num_classes=2,
                orientations_deg=(0.0, 0.0),
                frequencies=(2.0, 2.0),
            ).validate()

    def test_deterministic(self):
        spec = ToyDataSpec(num_classes=3, train_per_class=5, test_per_class=2)
        a, _ = synthesize_toy_dataset(spec)
        b, _ = synthesize_toy_dataset(spec)
        assert np.array_equal(a.images, b.images)

    def test_train_test_differ(self):
        spec = ToyDataSpec(num_classes=2, train_per_class=3, test_per_class=3)
        train, test = synthesize_toy_dataset(spec)
        assert not np.array_equal(train.images[:3], test.images[:3])


class TestMixRatio:
    def test_alpha_one_is_uniform(self):
        rng = SeededRng(1)
        vals = rng.beta_symmetric(1.0, n=100_000)
        assert abs(vals.mean() - 0.5) < 0.01
        # Uniform(0,1) variance = 1/12
        assert abs(vals.var() - 1.0 / 12.0) < 0.005

    @pytest.mark.parametrize("alpha", [0.2, 1.0, 5.0])
    def test_symmetry(self, alpha):
        vals = SeededRng(2).beta_symmetric(alpha, n=100_000)
        assert abs(vals.mean() - 0.5) < 0.01
        assert vals.min() >= 0.0 and vals.max() <= 1.0

    def test_small_alpha_has_larger_variance(self):
        v_small = SeededRng(3).beta_symmetric(0.2, n=100_000).var()
        v_large = SeededRng(3).beta_symmetric(5.0, n=100_000).var()
        # Beta(a,a) variance = 1/(8a+4): 0.179 vs 0.023
        assert v_small > v_large
        assert abs(v_small - 1.0 / 5.6) < 0.01

    def test_alpha_validation(self):
        with pytest.raises(ValueError):
            sample_mix_ratio(-1.0, SeededRng(1))

    def test_scalar_draw(self):
        lam = sample_mix_ratio(1.0, SeededRng(4))
        assert 0.0 <= lam <= 1.0


class TestCutMix:
    def _images(self, h=8, w=8):
        base = np.zeros((1, h, w), dtype=np.float32)
        patch = np.ones((1, h, w), dtype=np.float32)
        return base, patch

    def test_lambda_one_identity(self):
        base, patch = self._images()
        out = cutmix(base, 0, patch, 1, 1.0, num_classes=3, rng=SeededRng(5))
        assert np.array_equal(out.image, base)
        assert out.mix_ratio == 1.0
        assert np.array_equal(out.soft_label, [1.0, 0.0, 0.0])

    def test_lambda_zero_uncropped_full_replacement(self):
        base, patch = self._images()
        out = cutmix(base, 0, patch, 1, 0.0, num_classes=2, box=(0, 8, 0, 8))
        assert np.array_equal(out.image, patch)
        assert out.mix_ratio == 0.0
        assert np.array_equal(out.soft_label, [0.0, 1.0])

    def test_quarter_area_box(self):
        base = np.zeros((1, 32, 32), dtype=np.float32)
        patch = np.ones((1, 32, 32), dtype=np.float32)
        # lam = 0.75 -> side ratio 0.5 -> 16x16 box when fully inside
        out = cutmix(base, 0, patch, 1, 0.75, num_classes=2, box=(8, 24, 8, 24))
        assert out.mix_ratio == 0.75
        assert np.array_equal(out.soft_label, [0.75, 0.25])
        assert out.image[0, 8:24, 8:24].sum() == 16 * 16

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            cutmix(
                np.zeros((1, 4, 4), dtype=np.float32),
                0,
                np.zeros((1, 5, 5), dtype=np.float32),
                1,
                0.5,
                num_classes=2,
                rng=SeededRng(1),
            )

    def test_label_weight_equals_retained_fraction_exactly(self):
        # 1000 random (lambda, box) draws; base weight must equal the counted
        # retained-pixel fraction bit-exactly, and every pixel must trace to
        # exactly one source image.
        rng = SeededRng(42)
        h, w = 16, 16
        base = np.zeros((1, h, w), dtype=np.float32)
        patch = np.ones((1, h, w), dtype=np.float32)
        for _ in range(1000):
            lam = float(rng.uniform(1)[0])
            out = cutmix(base, 0, patch, 1, lam, num_classes=2, rng=rng)
            patched = int(out.image.sum())  # pixels that came from patch
            retained = h * w - patched
            assert out.soft_label[0] == retained / (h * w)
            assert out.soft_label[1] == patched / (h * w)
            assert np.all((out.image == 0.0) | (out.image == 1.0))

    def test_same_class_mix_single_entry(self):
        base, patch = self._images()
        out = cutmix(base, 1, patch, 1, 0.5, num_classes=3, rng=SeededRng(9))
        assert out.soft_label[1] == 1.0
        assert np.count_nonzero(out.soft_label) == 1

    def test_soft_label_sums_to_one(self):
        base, patch = self._images()
        rng = SeededRng(77)
        for _ in range(100):
            lam = float(rng.uniform(1)[0])
            out = cutmix(base, 0, patch, 1, lam, num_classes=4, rng=rng)
            assert abs(out.soft_label.sum() - 1.0) < 1e-6
            assert np.count_nonzero(out.soft_label) <= 2


class TestDatasetIO:
    def _random_dataset(self, rng, n=7, shape=(2, 3, 4), k=3):
        images = rng.uniform(n * np.prod(shape)).reshape(n, *shape).astype(np.float32)
        labels = rng.integers(k, n=n)
        return LabeledDataset(
            images,
            labels,
            k,
            tuple(f"c{i}" for i in range(k)),
            provenance={"seed": 7, "spec_sha": "abc"},
        )

    def test_round_trip_identity(self, tmp_path):
        rng = SeededRng(31)
        for trial in range(10):
            n = 1 + rng.integers(6)
            k = 2 + rng.integers(3)
            shape = (1 + rng.integers(2), 2 + rng.integers(4), 2 + rng.integers(4))
            ds = self._random_dataset(rng, n=n, shape=shape, k=k)
            p = tmp_path / f"ds{trial}.dstl"
            write_dataset(p, ds)
            back = read_dataset(p)
            assert back.images.tobytes() == ds.images.tobytes()
            assert np.array_equal(back.labels, ds.labels)
            assert back.class_names == ds.class_names
            assert back.provenance == ds.provenance
            assert back.num_classes == ds.num_classes

    def test_write_read_write_stable_bytes(self, tmp_path):
        ds = self._random_dataset(SeededRng(8))
        p1, p2 = tmp_path / "a.dstl", tmp_path / "b.dstl"
        write_dataset(p1, ds)
        write_dataset(p2, read_dataset(p1))
        assert p1.read_bytes() == p2.read_bytes()

    def test_empty_dataset_round_trips(self, tmp_path):
        ds = LabeledDataset(
            np.zeros((0, 1, 4, 4), dtype=np.float32),
            np.zeros(0, dtype=np.int64),
            2,
            ("a", "b"),
        )
        p = tmp_path / "empty.dstl"
        write_dataset(p, ds)
        back = read_dataset(p)
        assert len(back) == 0
        assert back.image_shape == (1, 4, 4)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.dstl"
        ds = self._random_dataset(SeededRng(2))
        write_dataset(p, ds)
        raw = bytearray(p.read_bytes())
        raw[:4] = b"NOPE"
        p.write_bytes(bytes(raw))
        with pytest.raises(DatasetFormatError, match="magic"):
            read_dataset(p)

    def test_truncated(self, tmp_path):
        p = tmp_path / "trunc.dstl"
        write_dataset(p, self._random_dataset(SeededRng(3)))
        p.write_bytes(p.read_bytes()[:40])
        with pytest.raises(DatasetFormatError, match="truncated"):
            read_dataset(p)

    def test_label_out_of_range(self, tmp_path):
        p = tmp_path / "badlabel.dstl"
        ds = self._random_dataset(SeededRng(4), n=3, k=3)
        write_dataset(p, ds)
        raw = bytearray(p.read_bytes())
        # first label lives right after the 26-byte header
        raw[26:28] = (9).to_bytes(2, "little")
        p.write_bytes(bytes(raw))
        with pytest.raises(DatasetFormatError, match="labels"):
            read_dataset(p)
