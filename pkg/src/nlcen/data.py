"""Synthetic biomedical-like datasets, augmentation and on-disk I/O.

Two kinds of data stand in for chest radiographs and dermoscopy images:

``lung-like``
    grayscale; two dark lobes mirrored about the midline with a shared
    pose, over a bright body with low-frequency texture and rib stripes.
``lesion-like``
    RGB; one irregular dark blob on textured skin.

Directory layout::

    images/{id}.pgm | images/{id}.ppm   8-bit binary grayscale / RGB
    masks/{id}.pgm                      0 / 255
    split.txt                           "{id} train|test" per line
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

log = logging.getLogger(__name__)

KINDS = ("lung-like", "lesion-like")


class MissingMaskError(FileNotFoundError):
    pass


@dataclass
class SampleRecord:
    image: np.ndarray  # (H, W, C) uint8
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    id: str
    split: str = "train"

    def __post_init__(self):
        if self.image.ndim == 2:
            self.image = self.image[..., None]
        if self.image.shape[:2] != self.mask.shape:
            raise ValueError(f"{self.id}: image {self.image.shape[:2]} and mask {self.mask.shape} differ")
        if self.split not in ("train", "test"):
            raise ValueError(f"{self.id}: split must be train or test, got {self.split!r}")


@dataclass
class SyntheticConfig:
    kind: str = "lung-like"
    count: int = 250
    side: int = 64
    noise_level: float = 12.0
    seed: int = 0
    test_fraction: float = 0.2

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown synthetic kind {self.kind!r}")
        if self.side < 32:
            raise ValueError(f"side {self.side} too small for the synthetic shapes (need >= 32)")
        if self.count < 0 or not 0.0 <= self.test_fraction <= 1.0:
            raise ValueError("count must be >= 0 and test_fraction in [0, 1]")

    @property
    def n_test(self) -> int:
        return int(round(self.count * self.test_fraction))


def _smooth_field(rng: np.random.Generator, side: int, n_waves: int = 6, max_freq: float = 3.0) -> np.ndarray:
    """Sum of random low-frequency plane waves, roughly unit amplitude."""
    yy, xx = np.mgrid[0:side, 0:side] / side
    field = np.zeros((side, side))
    for _ in range(n_waves):
        fy, fx = rng.uniform(-max_freq, max_freq, 2)
        ph = rng.uniform(0, 2 * np.pi)
        field += np.cos(2 * np.pi * (fy * yy + fx * xx) + ph)
    return field / np.sqrt(n_waves / 2)


def _blob(side: int, cy: float, cx: float, ry: float, rx: float, angle: float, harmonics) -> np.ndarray:
    """Boolean mask of a rotated ellipse whose radius is modulated by harmonics."""
    yy, xx = np.mgrid[0:side, 0:side].astype(float)
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(angle), np.sin(angle)
    u = (c * dx + s * dy) / rx
    v = (-s * dx + c * dy) / ry
    rho = np.hypot(u, v)
    theta = np.arctan2(v, u)
    bound = np.ones_like(theta)
    for k, (amp, ph) in enumerate(harmonics, start=2):
        bound += amp * np.cos(k * theta + ph)
    return rho <= bound


def _lung(rng: np.random.Generator, side: int, noise: float) -> tuple[np.ndarray, np.ndarray]:
    yy, xx = np.mgrid[0:side, 0:side] / side
    # shared pose for both lobes
    cy = side * rng.uniform(0.45, 0.55)
    sep = side * rng.uniform(0.19, 0.24)
    mid = side * rng.uniform(0.47, 0.53)
    ry = side * rng.uniform(0.25, 0.32)
    rx = side * rng.uniform(0.10, 0.13)
    tilt = rng.uniform(0.05, 0.2)
    harm = [(rng.uniform(0, 0.06), rng.uniform(0, 2 * np.pi)) for _ in range(2)]
    left = _blob(side, cy, mid - sep, ry, rx, tilt, harm)
    right = _blob(side, cy + rng.normal(0, 0.01 * side), mid + sep, ry * rng.uniform(0.95, 1.05), rx, -tilt,
                  [(a, -p) for a, p in harm])
    mask = (left | right).astype(np.uint8)

    body = 170 + noise * _smooth_field(rng, side)
    body -= 40 * (np.abs(xx - 0.5) > 0.43)  # darker margin outside the torso
    freq = rng.uniform(5.0, 7.0)
    ribs = 14 * np.cos(2 * np.pi * (freq * yy + 2.0 * (xx - 0.5) ** 2) + rng.uniform(0, 2 * np.pi))
    lung_level = rng.uniform(60, 85)
    soft = ndimage.gaussian_filter(mask.astype(float), 1.0)
    img = body * (1 - soft) + lung_level * soft + ribs + 0.25 * noise * rng.normal(size=(side, side))
    img = np.clip(np.round(img), 0, 255).astype(np.uint8)
    return img[..., None], mask


def _lesion(rng: np.random.Generator, side: int, noise: float) -> tuple[np.ndarray, np.ndarray]:
    cy, cx = side * rng.uniform(0.4, 0.6, 2)
    r = side * rng.uniform(0.2, 0.28)
    harm = [(rng.uniform(0, 0.12), rng.uniform(0, 2 * np.pi)) for _ in range(3)]
    mask = _blob(side, cy, cx, r * rng.uniform(0.85, 1.0), r, rng.uniform(0, np.pi), harm)
    mask = ndimage.binary_fill_holes(mask)
    labels, n = ndimage.label(mask)
    if n > 1:
        sizes = ndimage.sum(mask, labels, range(1, n + 1))
        mask = labels == 1 + int(np.argmax(sizes))
    mask = mask.astype(np.uint8)

    skin = np.array([205.0, 165.0, 140.0]) + rng.normal(0, 8, 3)
    spot = np.array([115.0, 70.0, 50.0]) + rng.normal(0, 10, 3)
    soft = ndimage.gaussian_filter(mask.astype(float), 1.2)[..., None]
    tex = noise * _smooth_field(rng, side, n_waves=8, max_freq=6.0)[..., None]
    inner = 0.6 * noise * _smooth_field(rng, side, n_waves=4, max_freq=4.0)[..., None]
    img = skin * (1 - soft) + (spot + inner) * soft + tex + 0.25 * noise * rng.normal(size=(side, side, 3))
    img = np.clip(np.round(img), 0, 255).astype(np.uint8)
    return img, mask


def synth_generate(cfg: SyntheticConfig) -> list[SampleRecord]:
    """Deterministic dataset; the last ``n_test`` samples form the test split."""
    make = _lung if cfg.kind == "lung-like" else _lesion
    n_train = cfg.count - cfg.n_test
    records = []
    for i in range(cfg.count):
        rng = np.random.default_rng([cfg.seed, i])
        img, mask = make(rng, cfg.side, cfg.noise_level)
        records.append(SampleRecord(img, mask, f"{cfg.kind}-{i:04d}", "train" if i < n_train else "test"))
    return records


def split(records: list[SampleRecord], which: str) -> list[SampleRecord]:
    return [r for r in records if r.split == which]


def to_arrays(records: list[SampleRecord]) -> tuple[np.ndarray, np.ndarray]:
    """Stack into float64 images (B, C, H, W) and uint8 masks (B, H, W)."""
    if not records:
        raise ValueError("no records")
    images = np.stack([r.image.transpose(2, 0, 1) for r in records]).astype(np.float64)
    masks = np.stack([r.mask for r in records]).astype(np.uint8)
    return images, masks


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


def rotate(s: SampleRecord, angle: float) -> SampleRecord:
    """Rotate about the centre: bilinear for the image, nearest for the mask."""
    img = ndimage.rotate(s.image.astype(float), angle, axes=(1, 0), reshape=False, order=1, mode="nearest")
    mask = ndimage.rotate(s.mask, angle, axes=(1, 0), reshape=False, order=0, mode="constant", cval=0)
    img = np.clip(np.round(img), 0, 255).astype(np.uint8)
    return replace(s, image=img, mask=(mask > 0).astype(np.uint8))


def hflip(s: SampleRecord) -> SampleRecord:
    return replace(s, image=s.image[:, ::-1].copy(), mask=s.mask[:, ::-1].copy())


def vflip(s: SampleRecord) -> SampleRecord:
    return replace(s, image=s.image[::-1].copy(), mask=s.mask[::-1].copy())


def augment(s: SampleRecord, seed, max_angle: float = 10.0) -> SampleRecord:
    """Random horizontal flip, vertical flip and rotation in [-10, 10] degrees.

    Each transform fires on an independent fair coin.
    """
    if s.split != "train":
        raise ValueError(f"{s.id}: augmentation applies to the train split only")
    rng = np.random.default_rng(seed)
    do_h, do_v, do_rot = rng.random(3) < 0.5
    angle = rng.uniform(-max_angle, max_angle)
    if do_h:
        s = hflip(s)
    if do_v:
        s = vflip(s)
    if do_rot:
        s = rotate(s, angle)
    return s


# ---------------------------------------------------------------------------
# Disk I/O
# ---------------------------------------------------------------------------


def save_dataset(records: list[SampleRecord], path) -> Path:
    root = Path(path)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    lines = []
    for r in records:
        if r.image.shape[2] == 1:
            Image.fromarray(r.image[..., 0], mode="L").save(root / "images" / f"{r.id}.pgm")
        else:
            Image.fromarray(r.image, mode="RGB").save(root / "images" / f"{r.id}.ppm")
        Image.fromarray((r.mask * 255).astype(np.uint8), mode="L").save(root / "masks" / f"{r.id}.pgm")
        lines.append(f"{r.id} {r.split}\n")
    (root / "split.txt").write_text("".join(lines))
    return root


def load_dataset(path) -> list[SampleRecord]:
    root = Path(path)
    image_dir = root / "images"
    files = sorted(image_dir.glob("*.p[gp]m")) if image_dir.is_dir() else []
    if not files:
        log.warning("no images found under %s; returning an empty dataset", root)
        return []
    splits: dict[str, str] = {}
    split_file = root / "split.txt"
    if split_file.exists():
        for line in split_file.read_text().splitlines():
            if line.strip():
                key, which = line.split()
                splits[key] = which
    records = []
    for f in files:
        sid = f.stem
        mpath = root / "masks" / f"{sid}.pgm"
        if not mpath.exists():
            raise MissingMaskError(f"image {f.name} has no mask at {mpath}")
        try:
            with Image.open(f) as im:
                img = np.asarray(im)
            with Image.open(mpath) as im:
                mask = np.asarray(im)
        except OSError as exc:
            raise OSError(f"cannot read {sid}: {exc}") from exc
        if img.ndim == 2:
            img = img[..., None]
        records.append(SampleRecord(img.copy(), (mask > 127).astype(np.uint8), sid, splits.get(sid, "train")))
    return records
