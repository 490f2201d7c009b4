"""Toy dataset synthesis, CutMix augmentation, and dataset persistence.

The procedural dataset is a stand-in for natural-image benchmarks: each
class is a sinusoidal grating with a class-specific orientation and
spatial frequency, randomized in phase and amplitude and corrupted with
Gaussian pixel noise. It is fully procedural (no downloads), learnable by
tiny MLPs, and cheap enough for end-to-end pipeline tests.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .numerics import SeededRng, require_finite

__all__ = [
    "DatasetFormatError",
    "LabeledDataset",
    "MixedSample",
    "ToyDataSpec",
    "cutmix",
    "cutmix_box",
    "grating_image",
    "read_dataset",
    "sample_mix_ratio",
    "synthesize_toy_dataset",
    "write_dataset",
]

# spawn() key domains for the toy generator
_KEY_TRAIN = 0
_KEY_TEST = 1


class DatasetFormatError(ValueError):
    """A dataset/prototype file failed validation; the message names the field."""


@dataclass
class LabeledDataset:
    """Images plus integer class labels.

    images: (N, C, H, W) float32 in [0, 1]; labels: (N,) integers in
    [0, num_classes). ``provenance`` is free-form metadata that rides along
    in the container file (generator spec hash, seed, ...).
    """

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    class_names: tuple[str, ...]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError("images must have shape (N, C, H, W)")
        if len(self.images) != len(self.labels):
            raise ValueError(
                f"images/labels length mismatch: {len(self.images)} vs {len(self.labels)}"
            )
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if len(self.class_names) != self.num_classes:
            raise ValueError("class_names length must equal num_classes")
        if self.labels.size and (
            self.labels.min() < 0 or self.labels.max() >= self.num_classes
        ):
            raise ValueError("labels out of range [0, num_classes)")
        require_finite("images", self.images)
        self.class_names = tuple(self.class_names)

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def class_indices(self, class_id: int) -> np.ndarray:
        return np.nonzero(self.labels == class_id)[0]


@dataclass(frozen=True)
class MixedSample:
    """CutMix output: mixed image, two-hot soft label, retained-pixel ratio."""

    image: np.ndarray
    soft_label: np.ndarray
    mix_ratio: float


@dataclass(frozen=True)
class ToyDataSpec:
    """Parameters of the procedural grating dataset.

    Distinct classes must have distinct (orientation, frequency) pairs.
    ``orientations_deg`` / ``frequencies`` default to an evenly spaced fan
    of angles and a 2..6 cycles-per-image ramp.
    """

    num_classes: int = 5
    train_per_class: int = 500
    test_per_class: int = 100
    image_shape: tuple[int, int, int] = (1, 16, 16)
    orientations_deg: tuple[float, ...] | None = None
    frequencies: tuple[float, ...] | None = None
    amplitude: float = 0.9
    amplitude_jitter: float = 0.1
    noise_std: float = 0.05
    seed: int = 0

    def resolved_patterns(self) -> tuple[tuple[float, ...], tuple[float, ...]]:
        k = self.num_classes
        thetas = self.orientations_deg
        freqs = self.frequencies
        if thetas is None:
            thetas = tuple(180.0 * c / k for c in range(k))
        if freqs is None:
            freqs = tuple(2.0 + (4.0 * c / max(1, k - 1)) for c in range(k))
        if len(thetas) != k or len(freqs) != k:
            raise ValueError("orientation/frequency lists must match num_classes")
        pairs = set(zip(thetas, freqs))
        if len(pairs) != k:
            raise ValueError("classes must have distinct (orientation, frequency) pairs")
        return tuple(thetas), tuple(freqs)

    def validate(self):
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.train_per_class < 1 or self.test_per_class < 0:
            raise ValueError("images per class must be positive")
        if len(self.image_shape) != 3 or any(s < 1 for s in self.image_shape):
            raise ValueError("image_shape must be (C, H, W) with positive sizes")
        if self.noise_std < 0 or self.amplitude_jitter < 0:
            raise ValueError("noise_std and amplitude_jitter must be non-negative")
        self.resolved_patterns()


def grating_image(
    image_shape: tuple[int, int, int],
    theta_deg: float,
    frequency: float,
    phase: float,
    amplitude: float,
) -> np.ndarray:
    """Sinusoidal grating on [0,1] coordinates, mid-gray baseline, clipped to [0,1]."""
    c, h, w = image_shape
    ys = (np.arange(h, dtype=np.float64) + 0.5) / h
    xs = (np.arange(w, dtype=np.float64) + 0.5) / w
    theta = np.deg2rad(theta_deg)
    proj = xs[None, :] * np.cos(theta) + ys[:, None] * np.sin(theta)
    img = 0.5 + 0.5 * amplitude * np.sin(2.0 * np.pi * frequency * proj + phase)
    img = np.broadcast_to(img, (c, h, w))
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _synthesize_split(
    spec: ToyDataSpec, per_class: int, rng: SeededRng, split_key: int
) -> tuple[np.ndarray, np.ndarray]:
    thetas, freqs = spec.resolved_patterns()
    c, h, w = spec.image_shape
    images = np.empty((spec.num_classes * per_class, c, h, w), dtype=np.float32)
    labels = np.empty(spec.num_classes * per_class, dtype=np.int64)
    i = 0
    for cls in range(spec.num_classes):
        sub = rng.spawn(split_key, cls)
        for _ in range(per_class):
            phase = 2.0 * np.pi * float(sub.uniform(1)[0])
            amp = spec.amplitude * (
                1.0 + spec.amplitude_jitter * (2.0 * float(sub.uniform(1)[0]) - 1.0)
            )
            img = grating_image(spec.image_shape, thetas[cls], freqs[cls], phase, amp)
            if spec.noise_std > 0:
                img = img + spec.noise_std * sub.normal((c, h, w))
            images[i] = np.clip(img, 0.0, 1.0)
            labels[i] = cls
            i += 1
    return images, labels


def synthesize_toy_dataset(
    spec: ToyDataSpec, rng: SeededRng | None = None
) -> tuple[LabeledDataset, LabeledDataset]:
    """Generate disjoint train/test splits of the procedural grating dataset.

    The train and test splits use separate child RNG streams, so they are
    statistically disjoint draws of phase, amplitude jitter, and noise.
    """
    spec.validate()
    if rng is None:
        rng = SeededRng(spec.seed)
    thetas, freqs = spec.resolved_patterns()
    names = tuple(
        f"grating_t{int(round(th))}_f{fq:g}" for th, fq in zip(thetas, freqs)
    )
    import hashlib

    spec_sha = hashlib.sha256(
        json.dumps(
            {
                "num_classes": spec.num_classes,
                "train_per_class": spec.train_per_class,
                "test_per_class": spec.test_per_class,
                "image_shape": list(spec.image_shape),
                "orientations_deg": list(thetas),
                "frequencies": list(freqs),
                "amplitude": spec.amplitude,
                "amplitude_jitter": spec.amplitude_jitter,
                "noise_std": spec.noise_std,
                "seed": spec.seed,
            },
            sort_keys=True,
        ).encode()
    ).hexdigest()[:16]
    prov = {
        "generator": "toy-gratings-v1",
        "spec_sha": spec_sha,
        "seed": spec.seed,
        "noise_std": spec.noise_std,
        "orientations_deg": list(thetas),
        "frequencies": list(freqs),
    }
    train_imgs, train_labels = _synthesize_split(spec, spec.train_per_class, rng, _KEY_TRAIN)
    test_imgs, test_labels = _synthesize_split(spec, spec.test_per_class, rng, _KEY_TEST)
    train = LabeledDataset(train_imgs, train_labels, spec.num_classes, names, dict(prov, split="train"))
    test = LabeledDataset(test_imgs, test_labels, spec.num_classes, names, dict(prov, split="test"))
    return train, test


def sample_mix_ratio(alpha: float, rng: SeededRng) -> float:
    """Draw the CutMix mixing ratio lambda ~ Beta(alpha, alpha)."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    return rng.beta_symmetric(alpha)


def cutmix_box(
    height: int, width: int, lam: float, rng: SeededRng
) -> tuple[int, int, int, int]:
    """Sample the cut rectangle (y1, y2, x1, x2) for mixing ratio ``lam``.

    Side lengths are H*sqrt(1-lam) and W*sqrt(1-lam) (truncated to ints), the
    center is uniform over the image, and the box is clipped to the bounds.
    """
    cut = np.sqrt(max(0.0, 1.0 - lam))
    cut_h = int(height * cut)
    cut_w = int(width * cut)
    cy = rng.integers(height)
    cx = rng.integers(width)
    y1 = max(cy - cut_h // 2, 0)
    y2 = min(cy + cut_h // 2, height)
    x1 = max(cx - cut_w // 2, 0)
    x2 = min(cx + cut_w // 2, width)
    return y1, y2, x1, x2


def cutmix(
    base_image: np.ndarray,
    base_label: int,
    patch_image: np.ndarray,
    patch_label: int,
    lam: float,
    num_classes: int,
    rng: SeededRng | None = None,
    box: tuple[int, int, int, int] | None = None,
) -> MixedSample:
    """Paste a random box from ``patch_image`` into ``base_image``.

    The soft label weights the base class by the exact retained-pixel
    fraction (recomputed from the clipped box as an integer pixel count, so
    label weight and pixel count agree bit-exactly). Pass ``box`` to bypass
    the random draw.
    """
    base = np.asarray(base_image, dtype=np.float32)
    patch = np.asarray(patch_image, dtype=np.float32)
    if base.shape != patch.shape:
        raise ValueError(f"image shape mismatch: {base.shape} vs {patch.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    _, h, w = base.shape
    if box is None:
        if rng is None:
            raise ValueError("either rng or box must be provided")
        box = cutmix_box(h, w, lam, rng)
    y1, y2, x1, x2 = box
    mixed = base.copy()
    mixed[:, y1:y2, x1:x2] = patch[:, y1:y2, x1:x2]
    area = (y2 - y1) * (x2 - x1)
    mix_ratio = (h * w - area) / (h * w)
    soft = np.zeros(num_classes, dtype=np.float64)
    soft[base_label] += mix_ratio
    soft[patch_label] += 1.0 - mix_ratio
    return MixedSample(image=mixed, soft_label=soft, mix_ratio=mix_ratio)


# --- dataset container -------------------------------------------------------
#
# Bit-exact layout, little-endian throughout:
#   magic "DSTL" | u16 version | u32 num_images, num_classes, C, H, W
#   | labels as num_images x u16 | images as num_images*C*H*W float32
#   | u32 trailer_len | UTF-8 JSON trailer {class_names, provenance}

_DATASET_MAGIC = b"DSTL"
_DATASET_VERSION = 1


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def write_dataset(path, ds: LabeledDataset) -> None:
    """Serialize a dataset; ``read_dataset(write_dataset(ds))`` is bit-identical."""
    n = len(ds)
    c, h, w = ds.image_shape
    if ds.labels.size and ds.labels.max() >= 2**16:
        raise DatasetFormatError("labels must fit in u16")
    trailer = _canonical_json(
        {"class_names": list(ds.class_names), "provenance": ds.provenance}
    )
    with open(path, "wb") as f:
        f.write(_DATASET_MAGIC)
        f.write(struct.pack("<H", _DATASET_VERSION))
        f.write(struct.pack("<5I", n, ds.num_classes, c, h, w))
        f.write(ds.labels.astype("<u2").tobytes())
        f.write(ds.images.astype("<f4").tobytes())
        f.write(struct.pack("<I", len(trailer)))
        f.write(trailer)


def _read_exact(f, count: int, what: str) -> bytes:
    buf = f.read(count)
    if len(buf) != count:
        raise DatasetFormatError(f"truncated payload while reading {what}")
    return buf


def read_dataset(path) -> LabeledDataset:
    """Load a dataset container, validating magic, sizes, and label range."""
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != _DATASET_MAGIC:
            raise DatasetFormatError(f"bad magic {magic!r}, expected {_DATASET_MAGIC!r}")
        (version,) = struct.unpack("<H", _read_exact(f, 2, "version"))
        if version != _DATASET_VERSION:
            raise DatasetFormatError(f"unsupported version {version}")
        n, num_classes, c, h, w = struct.unpack("<5I", _read_exact(f, 20, "header counts"))
        labels = np.frombuffer(_read_exact(f, 2 * n, "labels"), dtype="<u2").astype(np.int64)
        img_bytes = _read_exact(f, 4 * n * c * h * w, "image data")
        images = np.frombuffer(img_bytes, dtype="<f4").reshape(n, c, h, w).copy()
        (tlen,) = struct.unpack("<I", _read_exact(f, 4, "trailer length"))
        trailer = json.loads(_read_exact(f, tlen, "trailer").decode("utf-8"))
    if labels.size and labels.max() >= num_classes:
        bad = int(np.argmax(labels >= num_classes))
        raise DatasetFormatError(
            f"labels[{bad}] = {int(labels[bad])} out of range for {num_classes} classes"
        )
    names = trailer.get("class_names")
    if not isinstance(names, list) or len(names) != num_classes:
        raise DatasetFormatError("trailer field class_names missing or wrong length")
    return LabeledDataset(
        images=images,
        labels=labels,
        num_classes=num_classes,
        class_names=tuple(names),
        provenance=trailer.get("provenance", {}),
    )
