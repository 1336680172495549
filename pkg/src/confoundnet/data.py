"""Synthetic rotating-target chips, flip augmentation, and dataset ingestion.

A chip is a single-channel image of a seeded per-class binary template rotated
to a sampled azimuth, intensity-scaled by a nuisance value that differs
slightly between the train and test splits, and corrupted with multiplicative
speckle and additive noise. Templates are mirror-symmetric about the vertical
axis -- so a left-right flip of a chip is exactly the same target at the
negated azimuth -- but front/back asymmetric, so the azimuth is identifiable
from appearance over the full circle.

On disk a dataset is one ``metadata.csv`` (columns: filename, class_name,
azimuth_deg, nuisance_deg, split) plus one ``Pf8`` float raster per chip.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, IngestError, UsageError
from .pose_geometry import Azimuth, negate_azimuth

_META_NAME = "metadata.csv"
_META_COLUMNS = ["filename", "class_name", "azimuth_deg", "nuisance_deg", "split"]
_RASTER_MAGIC = b"Pf8"


@dataclass
class Chip:
    """One example: image (1, H, W), class index, pose, split bookkeeping."""

    image: np.ndarray
    class_label: int
    azimuth: Azimuth | None
    nuisance: float
    split: str
    augmented: bool = False


@dataclass
class SynthConfig:
    num_classes: int = 4
    image_size: int = 32
    train_per_class: int = 400
    test_per_class: int = 100
    noise_std: float = 0.55
    speckle_std: float = 0.5
    train_nuisance: tuple = (16.0, 18.0)  # emulated depression angle, degrees
    test_nuisance: tuple = (14.0, 16.0)
    seed: int = 2024
    class_names: list | None = None

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        if self.image_size <= 0 or self.train_per_class <= 0 or self.test_per_class < 0:
            raise ConfigError("image size and per-class counts must be positive")
        if self.noise_std < 0 or self.speckle_std < 0:
            raise ConfigError("noise levels must be nonnegative")
        for rng_pair in (self.train_nuisance, self.test_nuisance):
            if len(rng_pair) != 2 or rng_pair[0] > rng_pair[1]:
                raise ConfigError(f"nuisance range must be (lo, hi), got {rng_pair}")
        if self.class_names is not None and len(self.class_names) != self.num_classes:
            raise ConfigError(
                f"{len(self.class_names)} class names for {self.num_classes} classes"
            )

    def resolved_class_names(self) -> list:
        if self.class_names is not None:
            return list(self.class_names)
        return [f"class{i}" for i in range(self.num_classes)]

    def to_dict(self) -> dict:
        return {
            "num_classes": self.num_classes,
            "image_size": self.image_size,
            "train_per_class": self.train_per_class,
            "test_per_class": self.test_per_class,
            "noise_std": self.noise_std,
            "speckle_std": self.speckle_std,
            "train_nuisance": list(self.train_nuisance),
            "test_nuisance": list(self.test_nuisance),
            "seed": self.seed,
            "class_names": self.class_names,
        }


# ---------------------------------------------------------------------------
# generation


def rotate_bilinear(img: np.ndarray, theta: float) -> np.ndarray:
    """Rotate an (H, W) image by theta about its center; zero outside the frame."""
    h, w = img.shape
    cr = (h - 1) / 2.0
    cc = (w - 1) / 2.0
    rr, ccol = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    x = ccol - cc
    y = rr - cr
    ct = math.cos(theta)
    st = math.sin(theta)
    src_c = ct * x + st * y + cc
    src_r = -st * x + ct * y + cr
    r0 = np.floor(src_r).astype(np.int64)
    c0 = np.floor(src_c).astype(np.int64)
    fr = src_r - r0
    fc = src_c - c0
    out = np.zeros((h, w), dtype=np.float64)
    for dr, wr in ((0, 1.0 - fr), (1, fr)):
        for dc, wc in ((0, 1.0 - fc), (1, fc)):
            ri = r0 + dr
            ci = c0 + dc
            valid = (ri >= 0) & (ri < h) & (ci >= 0) & (ci < w)
            vals = np.where(valid, img[np.clip(ri, 0, h - 1), np.clip(ci, 0, w - 1)], 0.0)
            out += wr * wc * vals
    return out


def class_template(cfg: SynthConfig, class_idx: int) -> np.ndarray:
    """Binary target silhouette: trapezoidal hull (narrow bow, wide stern), bow
    and stern markers, and per-class blocks, all symmetrized left-right.

    Candidates are redrawn deterministically until the half-turn rotation
    contrast clears 0.12, so the azimuth stays identifiable for any seed.
    """
    size = cfg.image_size
    for attempt in range(64):
        rng = np.random.default_rng([cfg.seed, 7, class_idx, attempt])
        t = _draw_template(size, class_idx, rng)
        if rotation_contrast(t) >= 0.12:
            return t
    raise DataError(f"class {class_idx} never produced a rotation-asymmetric template")


def _draw_template(size: int, class_idx: int, rng) -> np.ndarray:
    t = np.zeros((size, size), dtype=np.float64)
    center = (size - 1) / 2.0
    rows = np.arange(size, dtype=np.float64)[:, None]
    dist_c = np.abs(np.arange(size, dtype=np.float64)[None, :] - center)

    front = size * rng.uniform(0.18, 0.24)
    back = size * rng.uniform(0.70, 0.76)
    front_w = size * rng.uniform(0.03, 0.06)
    back_w = size * rng.uniform(0.30, 0.38)
    frac = np.clip((rows - front) / (back - front), 0.0, 1.0)
    width = front_w + (back_w - front_w) * frac
    t[(rows >= front) & (rows <= back) & (dist_c <= width / 2.0)] = 1.0

    nose_len = size * rng.uniform(0.10, 0.15)
    nose_w = size * rng.uniform(0.10, 0.16)
    t[(rows >= front - nose_len) & (rows < front) & (dist_c <= nose_w / 2.0)] = 1.0

    stern_len = size * rng.uniform(0.08, 0.12)
    stern_w = size * rng.uniform(0.40, 0.48)
    t[(rows > back) & (rows <= back + stern_len) & (dist_c <= stern_w / 2.0)] = 1.0

    for _ in range(2 + class_idx % 3):
        r0 = int(rng.integers(int(front), max(int(back) - 2, int(front) + 1)))
        rh = int(rng.integers(2, max(3, size // 6)))
        c0 = int(rng.integers(0, size // 2))
        cw = int(rng.integers(2, max(3, size // 8)))
        t[r0 : r0 + rh, c0 : c0 + cw] = 1.0

    # bilateral symmetry keeps fliplr(chip at theta) == chip at -theta
    return np.maximum(t, t[:, ::-1])


def _standardize(img: np.ndarray) -> np.ndarray:
    m = img.mean()
    s = img.std()
    if s < 1e-12:
        return np.zeros_like(img)
    return (img - m) / s


def rotation_contrast(template: np.ndarray) -> float:
    """Fraction of pixels differing by > 0.1 between the standardized template
    and its half-turn rotation; the azimuth-identifiability measure."""
    a = _standardize(template)
    b = _standardize(rotate_bilinear(template, math.pi))
    return float(np.mean(np.abs(a - b) > 0.1))


def synth_generate(cfg: SynthConfig) -> list:
    """Deterministic synthetic dataset; each chip's randomness derives from
    (config seed, chip index), so generation order never matters."""
    templates = []
    for k in range(cfg.num_classes):
        t = class_template(cfg, k)
        if rotation_contrast(t) < 0.10:
            raise DataError(
                f"class {k} template is too rotation-symmetric to carry azimuth"
            )
        templates.append(t)

    chips = []
    chip_index = 0
    for split, per_class, nuis_range in (
        ("train", cfg.train_per_class, cfg.train_nuisance),
        ("test", cfg.test_per_class, cfg.test_nuisance),
    ):
        for k in range(cfg.num_classes):
            for _ in range(per_class):
                rng = np.random.default_rng([cfg.seed, 11, chip_index])
                theta = rng.uniform(0.0, 2.0 * math.pi)
                nuisance = float(rng.uniform(nuis_range[0], nuis_range[1]))
                img = rotate_bilinear(templates[k], theta)
                img = img * (1.0 + 0.02 * (nuisance - 16.0))
                n1 = rng.standard_normal(img.shape)
                n2 = rng.standard_normal(img.shape)
                img = img * (1.0 + cfg.speckle_std * n1) + cfg.noise_std * n2
                chips.append(
                    Chip(
                        image=img[None, :, :],
                        class_label=k,
                        azimuth=Azimuth(theta),
                        nuisance=nuisance,
                        split=split,
                    )
                )
                chip_index += 1
    return chips


# ---------------------------------------------------------------------------
# augmentation / normalization


def flip_augment(chips) -> list:
    """Mirror every train chip left-right, negating its azimuth label.

    Returns originals followed by their mirrored copies (length doubles);
    the inputs must be unaugmented train-split chips.
    """
    for c in chips:
        if c.split != "train":
            raise UsageError("flip augmentation applies to the train split only")
        if c.augmented:
            raise UsageError("flip augmentation expects original, unaugmented chips")
    out = list(chips)
    for c in chips:
        out.append(
            Chip(
                image=np.ascontiguousarray(c.image[:, :, ::-1]),
                class_label=c.class_label,
                azimuth=None if c.azimuth is None else negate_azimuth(c.azimuth),
                nuisance=c.nuisance,
                split="train",
                augmented=True,
            )
        )
    return out


def normalize(chips) -> list:
    """Per-chip standardization to zero mean / unit variance (constant -> zeros)."""
    out = []
    for c in chips:
        out.append(
            Chip(
                image=_standardize(c.image),
                class_label=c.class_label,
                azimuth=c.azimuth,
                nuisance=c.nuisance,
                split=c.split,
                augmented=c.augmented,
            )
        )
    return out


# ---------------------------------------------------------------------------
# Pf8 float raster: b"Pf8\n<width> <height>\n<scale>\n" + row-major float64
# pixels, top row first. A negative scale marks little-endian byte order
# (mirroring the PGM-family convention); |scale| multiplies the pixel values.


def write_raster(path, image: np.ndarray):
    if image.ndim != 2:
        raise UsageError(f"rasters store (H, W) images, got shape {image.shape}")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(_RASTER_MAGIC + b"\n")
        fh.write(f"{w} {h}\n".encode("ascii"))
        fh.write(b"-1.0\n")
        fh.write(np.ascontiguousarray(image, dtype="<f8").tobytes())


def read_raster(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    parts = raw.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != _RASTER_MAGIC:
        raise IngestError(f"{path} is not a Pf8 raster")
    try:
        w, h = (int(v) for v in parts[1].split())
        scale = float(parts[2])
    except ValueError as exc:
        raise IngestError(f"{path} has a malformed raster header: {exc}") from None
    if w <= 0 or h <= 0 or scale == 0.0:
        raise IngestError(f"{path} has invalid raster dimensions or scale")
    body = parts[3]
    if len(body) != w * h * 8:
        raise IngestError(f"{path} raster body has {len(body)} bytes, expected {w * h * 8}")
    dtype = "<f8" if scale < 0 else ">f8"
    img = np.frombuffer(body, dtype=dtype).reshape(h, w).astype(np.float64)
    mag = abs(scale)
    if mag != 1.0:
        img = img * mag
    if not np.all(np.isfinite(img)):
        raise IngestError(f"{path} contains non-finite pixel values")
    return img


# ---------------------------------------------------------------------------
# dataset directory ingestion / export


def export_dataset(chips, class_names, out_dir, force: bool = False):
    """Write chips + metadata.csv into ``out_dir`` in the on-disk layout."""
    names = list(class_names)
    os.makedirs(out_dir, exist_ok=True)
    if os.listdir(out_dir) and not force:
        raise UsageError(f"{out_dir} is not empty; pass force=True to overwrite")
    rows = []
    for i, c in enumerate(chips):
        if not 0 <= c.class_label < len(names):
            raise UsageError(f"chip {i} has label {c.class_label} outside the class list")
        fname = f"{c.split}_{names[c.class_label]}_{i:06d}.pf8"
        write_raster(os.path.join(out_dir, fname), c.image[0])
        az = "" if c.azimuth is None else repr(math.degrees(c.azimuth.theta))
        rows.append([fname, names[c.class_label], az, repr(float(c.nuisance)), c.split])
    with open(os.path.join(out_dir, _META_NAME), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(_META_COLUMNS)
        writer.writerows(rows)


def load_dataset(dir_path, classes=None):
    """Read a dataset directory; returns (chips, class names).

    Azimuths arrive in degrees and are converted to canonical radians. A row
    may leave the azimuth empty -- the chip is loaded with ``azimuth=None``
    and is usable only for training without the pose objective. When
    ``classes`` is given, rows with labels outside it are rejected.
    """
    meta_path = os.path.join(dir_path, _META_NAME)
    if not os.path.isfile(meta_path):
        raise IngestError(f"no {_META_NAME} in {dir_path}")
    with open(meta_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [c.strip() for c in reader.fieldnames] != _META_COLUMNS:
            raise IngestError(
                f"{meta_path} must have columns {','.join(_META_COLUMNS)}, "
                f"got {reader.fieldnames}"
            )
        rows = list(reader)
    if not rows:
        raise IngestError(f"{meta_path} lists no chips")

    if classes is not None:
        names = list(classes)
    else:
        names = sorted({r["class_name"] for r in rows})
    index_of = {n: i for i, n in enumerate(names)}

    chips = []
    for lineno, r in enumerate(rows, start=2):
        cname = r["class_name"]
        if cname not in index_of:
            raise IngestError(
                f"{meta_path} line {lineno}: class {cname!r} not in the declared class list"
            )
        if r["split"] not in ("train", "test"):
            raise IngestError(f"{meta_path} line {lineno}: split must be train or test, got {r['split']!r}")
        img_path = os.path.join(dir_path, r["filename"])
        if not os.path.isfile(img_path):
            raise IngestError(f"{meta_path} line {lineno}: missing image file {r['filename']!r}")
        img = read_raster(img_path)
        az_field = r["azimuth_deg"].strip()
        try:
            azimuth = None if az_field == "" else Azimuth(math.radians(float(az_field)))
            nuisance = float(r["nuisance_deg"])
        except ValueError as exc:
            raise IngestError(f"{meta_path} line {lineno}: {exc}") from None
        chips.append(
            Chip(
                image=img[None, :, :],
                class_label=index_of[cname],
                azimuth=azimuth,
                nuisance=nuisance,
                split=r["split"],
            )
        )
    return chips, names
