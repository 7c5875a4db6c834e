"""Datasets, augmentation, splits and the Poisson noise protocol."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DomainError, FormatError, InvalidConfig

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_RECORDS_PER_FILE = 10_000
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"
CIFAR_CLASSES = ["airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck"]
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".tif", ".tiff"}


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    class_names: list[str]
    split: str = "train"
    augment: "AugmentConfig | None" = None  # applied per batch when set
    augment_seed: int = 0
    _noise_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise FormatError(f"images {self.images.shape} vs labels {self.labels.shape}")
        if len(self.labels) == 0:
            raise FormatError("empty dataset")
        if self.labels.min() < 0 or self.labels.max() >= len(self.class_names):
            raise FormatError("label outside [0, num_classes)")

    def __len__(self):
        return len(self.labels)

    @property
    def num_classes(self):
        return len(self.class_names)

    def subset(self, idx, split=None) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], list(self.class_names), split or self.split)


# -- normalisation ------------------------------------------------------------


@dataclass
class Normalizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, ds: Dataset) -> "Normalizer":
        imgs = ds.images.astype(np.float64)
        std = imgs.std(axis=(0, 2, 3))
        return cls(imgs.mean(axis=(0, 2, 3)), np.where(std > 0, std, 1.0))

    def _shape(self, a):
        return np.asarray(a, dtype=np.float32).reshape(1, -1, 1, 1)

    def apply(self, x):
        return ((x - self._shape(self.mean)) / self._shape(self.std)).astype(np.float32)

    def invert(self, x):
        return (x * self._shape(self.std) + self._shape(self.mean)).astype(np.float32)

    def to_dict(self):
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"]), np.asarray(d["std"]))


# -- CIFAR-10 binary ------------------------------------------------------------


def parse_cifar_batch(raw: bytes, expect_records: int | None = CIFAR_RECORDS_PER_FILE, name="<bytes>"):
    """Decode ``label byte + 3072 pixel bytes`` records into uint8 arrays."""
    n, rem = divmod(len(raw), CIFAR_RECORD)
    if rem:
        raise FormatError(f"{name}: truncated record at byte offset {n * CIFAR_RECORD} (file length {len(raw)})")
    if expect_records is not None and n != expect_records:
        raise FormatError(f"{name}: expected {expect_records} records ({expect_records * CIFAR_RECORD} bytes), got {len(raw)} bytes")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(n, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise FormatError(f"{name}: label {labels[bad]} at byte offset {bad * CIFAR_RECORD}")
    return rec[:, 1:].reshape(n, 3, 32, 32).copy(), labels


def serialize_cifar_batch(images_u8: np.ndarray, labels) -> bytes:
    images_u8 = np.asarray(images_u8, dtype=np.uint8).reshape(len(images_u8), -1)
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    return np.concatenate([labels, images_u8], axis=1).tobytes()


def to_uint8(images: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)


def _read_cifar_file(path: Path, records):
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise OSError(f"cannot read {path}: {e}") from e
    return parse_cifar_batch(raw, records, name=str(path))


def load_cifar10(directory, records_per_file: int | None = CIFAR_RECORDS_PER_FILE):
    """Load the five training batches and the test batch from ``directory``.

    ``directory`` may also be the parent of ``cifar-10-batches-bin``.
    """
    root = Path(directory)
    if not (root / CIFAR_TEST_FILE).exists() and (root / "cifar-10-batches-bin").is_dir():
        root = root / "cifar-10-batches-bin"
    names = list(CIFAR_CLASSES)
    meta = root / "batches.meta.txt"
    if meta.exists():
        listed = [s.strip() for s in meta.read_text().splitlines() if s.strip()]
        if len(listed) == 10:
            names = listed
    parts = [_read_cifar_file(root / f, records_per_file) for f in CIFAR_TRAIN_FILES]
    xte, yte = _read_cifar_file(root / CIFAR_TEST_FILE, records_per_file)
    xtr = np.concatenate([p[0] for p in parts])
    ytr = np.concatenate([p[1] for p in parts])
    train = Dataset(xtr.astype(np.float32) / 255.0, ytr, names, "train")
    test = Dataset(xte.astype(np.float32) / 255.0, yte, names, "test")
    return train, test


# -- image folders ------------------------------------------------------------


def load_image_folder(root, size: int | None = None, split="train") -> Dataset:
    """``root/<class_name>/<image>`` layout; class index is the sorted rank of the name."""
    from PIL import Image

    root = Path(root)
    if not root.is_dir():
        raise OSError(f"{root} is not a directory")
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if len(classes) < 1:
        raise FormatError(f"{root}: no class directories")
    images, labels = [], []
    for ci, cname in enumerate(classes):
        for f in sorted((root / cname).iterdir()):
            if f.suffix.lower() not in IMAGE_SUFFIXES:
                continue
            img = Image.open(f).convert("RGB")
            if size is not None and img.size != (size, size):
                img = img.resize((size, size), Image.BILINEAR)
            images.append(np.asarray(img, dtype=np.uint8).transpose(2, 0, 1))
            labels.append(ci)
    if not images:
        raise FormatError(f"{root}: no images found")
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise FormatError(f"{root}: images differ in size {sorted(shapes)}; pass size=")
    return Dataset(np.stack(images).astype(np.float32) / 255.0, labels, classes, split)


# -- synthetic ------------------------------------------------------------------


def make_synthetic(classes: int = 10, n_per_class: int = 20, size: int = 32, seed: int = 0, channels: int = 3, noise: float = 0.15) -> Dataset:
    """Oriented Gabor-like textures with a class-dependent tint plus pixel noise."""
    if classes < 2:
        raise InvalidConfig("synthetic data needs at least two classes")
    # class appearance is fixed; ``seed`` only drives the per-sample draws
    tints = np.random.default_rng([classes, channels]).uniform(0.3, 0.7, size=(classes, channels))
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size - 0.5
    envelope = np.exp(-(xx**2 + yy**2) / (2 * 0.3**2))
    n = classes * n_per_class
    labels = np.repeat(np.arange(classes), n_per_class)
    rng.shuffle(labels)
    images = np.empty((n, channels, size, size), dtype=np.float32)
    for i, c in enumerate(labels):
        angle = math.pi * c / classes + rng.normal(0, 0.08)
        freq = 3.0 + 2.0 * (c % 3) + rng.normal(0, 0.2)
        phase = rng.uniform(0, 2 * math.pi)
        wave = np.cos(2 * math.pi * freq * (xx * math.cos(angle) + yy * math.sin(angle)) + phase)
        pattern = 0.3 * wave * envelope
        img = tints[c][:, None, None] + pattern[None] + rng.normal(0, noise, (channels, size, size))
        images[i] = np.clip(img, 0, 1)
    return Dataset(images, labels, [f"class_{c}" for c in range(classes)], "train")


# -- augmentation -----------------------------------------------------------------


@dataclass
class AugmentConfig:
    crop_pad: int | None = None
    hflip_prob: float = 0.0
    rotation: float | None = None  # degrees, symmetric range
    resized_crop_scale: tuple[float, float] | None = None
    resized_crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    static: bool = True

    def validate(self):
        if not 0 <= self.hflip_prob <= 1:
            raise InvalidConfig("hflip_prob must lie in [0, 1]")
        if self.crop_pad is not None and self.crop_pad < 0:
            raise InvalidConfig("crop_pad must be >= 0")
        if self.resized_crop_scale is not None:
            lo, hi = self.resized_crop_scale
            if not 0 < lo <= hi <= 1:
                raise InvalidConfig("resized_crop_scale must satisfy 0 < lo <= hi <= 1")
        return self


GALAXY_AUGMENT = AugmentConfig(hflip_prob=0.5, rotation=20.0, resized_crop_scale=(0.8, 1.0), static=True)
CIFAR_AUGMENT = AugmentConfig(crop_pad=4, hflip_prob=0.5, static=False)


def hflip(img: np.ndarray) -> np.ndarray:
    return img[..., ::-1]


def _random_resized_crop(img, rng, scale, ratio):
    c, h, w = img.shape
    area = h * w
    for _ in range(10):
        target = area * rng.uniform(*scale)
        log_r = rng.uniform(math.log(ratio[0]), math.log(ratio[1]))
        ar = math.exp(log_r)
        cw = int(round(math.sqrt(target * ar)))
        ch = int(round(math.sqrt(target / ar)))
        if 0 < cw <= w and 0 < ch <= h:
            break
    else:
        ch, cw = h, w
    top = rng.integers(0, h - ch + 1)
    left = rng.integers(0, w - cw + 1)
    crop = img[:, top : top + ch, left : left + cw]
    return ndimage.zoom(crop, (1, h / ch, w / cw), order=1, mode="nearest")[:, :h, :w]


def augment_image(img: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator, fill=None) -> np.ndarray:
    out = img
    c, h, w = img.shape
    fill = np.zeros(c, dtype=img.dtype) if fill is None else np.asarray(fill, dtype=img.dtype)
    if cfg.rotation:
        angle = rng.uniform(-cfg.rotation, cfg.rotation)
        out = np.stack([ndimage.rotate(out[k], angle, reshape=False, order=1, mode="constant", cval=float(fill[k])) for k in range(c)])
    if cfg.resized_crop_scale is not None:
        out = _random_resized_crop(out, rng, cfg.resized_crop_scale, cfg.resized_crop_ratio)
    if cfg.crop_pad:
        p = cfg.crop_pad
        padded = np.empty((c, h + 2 * p, w + 2 * p), dtype=out.dtype)
        padded[...] = fill[:, None, None]
        padded[:, p : p + h, p : p + w] = out
        top, left = rng.integers(0, 2 * p + 1, size=2)
        out = padded[:, top : top + h, left : left + w]
    if cfg.hflip_prob and rng.random() < cfg.hflip_prob:
        out = hflip(out)
    return np.ascontiguousarray(np.clip(out, 0, 1), dtype=np.float32)


def augment_batch(images: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator, fill=None) -> np.ndarray:
    return np.stack([augment_image(im, cfg, rng, fill) for im in images])


def augment(ds: Dataset, cfg: AugmentConfig, seed: int) -> Dataset:
    """Static mode: original plus one augmented copy (2N samples).

    Per-epoch mode returns the same samples tagged for on-the-fly augmentation.
    Padding is filled with the per-channel mean, i.e. zero after normalisation.
    """
    cfg.validate()
    if ds.split != "train":
        raise InvalidConfig(f"augmentation is only applied to the train split, got {ds.split!r}")
    if not cfg.static:
        return replace(ds, augment=cfg, augment_seed=seed, _noise_cache={})
    rng = np.random.default_rng(seed)
    fill = ds.images.mean(axis=(0, 2, 3))
    extra = augment_batch(ds.images, cfg, rng, fill)
    return Dataset(np.concatenate([ds.images, extra]), np.concatenate([ds.labels, ds.labels]), list(ds.class_names), ds.split)


# -- noise ---------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseConfig:
    peak: float = 255.0
    seed: int = 0

    def __post_init__(self):
        if not self.peak > 0:
            raise InvalidConfig("noise peak must be positive")


def poisson_noise(images: np.ndarray, peak: float, rng: np.random.Generator) -> np.ndarray:
    counts = rng.poisson(np.clip(images, 0, 1).astype(np.float64) * peak)
    return np.minimum(counts / peak, 1.0).astype(np.float32)


def poisson_corrupt(ds: Dataset, cfg: NoiseConfig) -> Dataset:
    """Signal-dependent photon noise: ``x' = min(Poisson(x * peak) / peak, 1)``.

    Generated once per (peak, seed) and cached on the source dataset.
    """
    key = (float(cfg.peak), int(cfg.seed))
    cached = ds._noise_cache.get(key)
    if cached is None:
        rng = np.random.default_rng(cfg.seed)
        cached = Dataset(poisson_noise(ds.images, cfg.peak, rng), ds.labels.copy(), list(ds.class_names), ds.split)
        ds._noise_cache[key] = cached
    return cached


def noise_degradation(acc_clean: float, acc_noisy: float) -> float:
    """Relative accuracy drop under noise, in percent."""
    if not acc_clean > 0:
        raise DomainError("clean accuracy must be positive")
    return (acc_clean - acc_noisy) / acc_clean * 100.0


# -- splits --------------------------------------------------------------------


def _allocate(n: int, fractions) -> list[int]:
    raw = [n * f for f in fractions]
    counts = [int(math.floor(r)) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def stratified_split(ds: Dataset, fractions=(0.9, 0.05, 0.05), seed: int = 0, names=None):
    """Per-class proportional split; leftover samples go to the largest fractional parts."""
    fractions = [float(f) for f in fractions]
    if len(fractions) < 2 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise InvalidConfig(f"split fractions must be non-negative and sum to 1, got {fractions}")
    names = names or (["train", "val", "test"] if len(fractions) == 3 else [f"part{i}" for i in range(len(fractions))])
    rng = np.random.default_rng(seed)
    buckets = [[] for _ in fractions]
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.labels == c)
        if idx.size == 0:
            continue
        idx = rng.permutation(idx)
        counts = _allocate(idx.size, fractions)
        if any(k == 0 for k, f in zip(counts, fractions) if f > 0):
            raise InvalidConfig(f"class {c} has {idx.size} samples, too few for fractions {fractions}")
        start = 0
        for b, k in zip(buckets, counts):
            b.extend(idx[start : start + k])
            start += k
    return tuple(ds.subset(np.sort(np.asarray(b, dtype=np.int64)), split=name) for b, name in zip(buckets, names))


def stratified_subset(ds: Dataset, n: int, seed: int = 0) -> Dataset:
    if n >= len(ds):
        return ds
    part, _ = stratified_split(ds, (n / len(ds), 1 - n / len(ds)), seed, names=[ds.split, "rest"])
    return part


# -- batching ------------------------------------------------------------------


def iterate_batches(ds: Dataset, batch_size: int, rng: np.random.Generator | None = None, epoch: int = 0):
    """Yield ``(images, labels)``; shuffled when ``rng`` is given."""
    order = rng.permutation(len(ds)) if rng is not None else np.arange(len(ds))
    aug_rng = None
    if ds.augment is not None:
        aug_rng = np.random.default_rng([ds.augment_seed, epoch])
        fill = ds.images.mean(axis=(0, 2, 3))
    for start in range(0, len(ds), batch_size):
        idx = order[start : start + batch_size]
        x = ds.images[idx]
        if aug_rng is not None:
            x = augment_batch(x, ds.augment, aug_rng, fill)
        yield x, ds.labels[idx]
