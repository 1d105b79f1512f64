"""Scene images paired with dual-channel visual memory schema maps.

Layout on disk::

    <root>/<level1>/<level2>/<leaf>/<image_id>.(jpg|png)
    <root>/vms/<image_id>.png     # green = true VMS, red = false VMS

Maps are held as floats in [0, 1]; images as 224x224x3 uint8.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

log = logging.getLogger(__name__)

IMAGE_SIZE = 224
IMAGE_SUFFIXES = (".jpg", ".jpeg", ".png")
VMS_DIRNAME = "vms"

# leaf -> (level1, level2), in the fixed reporting order
TAXONOMY: dict[str, tuple[str, str]] = {
    "kitchen": ("indoor", "private"),
    "living_room": ("indoor", "private"),
    "small": ("indoor", "public"),
    "big": ("indoor", "public"),
    "work_home": ("outdoor", "man_made"),
    "public_entertainment": ("outdoor", "man_made"),
    "populated": ("outdoor", "natural"),
    "isolated": ("outdoor", "natural"),
}
LEAVES: tuple[str, ...] = tuple(TAXONOMY)
LEAF_LABELS = {
    "kitchen": "Kitchen",
    "living_room": "Living Room",
    "small": "Small",
    "big": "Big",
    "work_home": "Work/Home",
    "public_entertainment": "Public Entertainment",
    "populated": "Populated",
    "isolated": "Isolated",
}
_ALIASES = {"man-made": "man_made", "living room": "living_room", "work/home": "work_home",
            "public entertainment": "public_entertainment"}


class DatasetError(ValueError):
    pass


def _canon(name: str) -> str:
    name = name.strip().lower()
    return _ALIASES.get(name, name.replace("-", "_").replace(" ", "_"))


@dataclass(frozen=True)
class CategoryPath:
    level1: str
    level2: str
    leaf: str

    def __post_init__(self):
        if self.leaf not in TAXONOMY:
            raise DatasetError(f"unknown leaf category {self.leaf!r}")
        if TAXONOMY[self.leaf] != (self.level1, self.level2):
            raise DatasetError(
                f"category {self.level1}/{self.level2}/{self.leaf} is inconsistent with the "
                f"taxonomy (expected {'/'.join(TAXONOMY[self.leaf])}/{self.leaf})"
            )

    @classmethod
    def from_leaf(cls, leaf: str) -> "CategoryPath":
        leaf = _canon(leaf)
        if leaf not in TAXONOMY:
            raise DatasetError(f"unknown leaf category {leaf!r}")
        return cls(*TAXONOMY[leaf], leaf)

    @classmethod
    def from_parts(cls, parts: Sequence[str]) -> "CategoryPath":
        if len(parts) != 3:
            raise DatasetError(f"malformed category directory {'/'.join(parts)!r}")
        return cls(*(_canon(p) for p in parts))

    def as_path(self) -> Path:
        return Path(self.level1, self.level2, self.leaf)

    def __str__(self) -> str:
        return "/".join((self.level1, self.level2, self.leaf))


@dataclass(frozen=True, eq=False)
class VmsMap:
    """Two density channels of equal shape, values in [0, 1]."""

    true_channel: np.ndarray
    false_channel: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.true_channel, dtype=np.float32)
        f = np.asarray(self.false_channel, dtype=np.float32)
        if t.ndim != 2 or t.shape != f.shape:
            raise DatasetError(f"VMS channels must be equal-shape 2D grids, got {t.shape} and {f.shape}")
        if not (np.isfinite(t).all() and np.isfinite(f).all()):
            raise DatasetError("VMS map contains non-finite values")
        if t.min(initial=0) < 0 or f.min(initial=0) < 0 or t.max(initial=0) > 1 or f.max(initial=0) > 1:
            raise DatasetError("VMS values must lie in [0, 1]")
        t.flags.writeable = False
        f.flags.writeable = False
        object.__setattr__(self, "true_channel", t)
        object.__setattr__(self, "false_channel", f)

    @property
    def shape(self) -> tuple[int, int]:
        return self.true_channel.shape

    def stack(self) -> np.ndarray:
        """(2, H, W) array, true channel first."""
        return np.stack([self.true_channel, self.false_channel])

    @classmethod
    def from_stack(cls, arr: np.ndarray) -> "VmsMap":
        arr = np.asarray(arr)
        if arr.ndim != 3 or arr.shape[0] != 2:
            raise DatasetError(f"expected a (2, H, W) array, got {arr.shape}")
        return cls(arr[0], arr[1])

    def to_rgb(self) -> np.ndarray:
        """8-bit RGB rendering: red = false, green = true, blue = 0."""
        rgb = np.zeros(self.shape + (3,), dtype=np.uint8)
        rgb[..., 0] = np.rint(self.false_channel * 255.0)
        rgb[..., 1] = np.rint(self.true_channel * 255.0)
        return rgb

    @classmethod
    def from_rgb(cls, rgb: np.ndarray) -> "VmsMap":
        rgb = np.asarray(rgb)
        if rgb.ndim != 3 or rgb.shape[2] < 3:
            raise DatasetError(f"VMS image must be RGB, got shape {rgb.shape}")
        return cls(rgb[..., 1] / np.float32(255.0), rgb[..., 0] / np.float32(255.0))

    def __eq__(self, other):
        if not isinstance(other, VmsMap):
            return NotImplemented
        return np.array_equal(self.true_channel, other.true_channel) and np.array_equal(
            self.false_channel, other.false_channel
        )


@dataclass(frozen=True, eq=False)
class ImageSample:
    image_id: str
    pixels: np.ndarray
    category: CategoryPath
    vms: Optional[VmsMap] = None

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.dtype != np.uint8 or px.shape != (IMAGE_SIZE, IMAGE_SIZE, 3):
            raise DatasetError(
                f"{self.image_id}: pixels must be {IMAGE_SIZE}x{IMAGE_SIZE}x3 uint8, got {px.shape} {px.dtype}"
            )
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)

    def replace(self, **changes) -> "ImageSample":
        kw = dict(image_id=self.image_id, pixels=self.pixels, category=self.category, vms=self.vms)
        kw.update(changes)
        return ImageSample(**kw)


@dataclass(frozen=True)
class Dataset:
    samples: tuple[ImageSample, ...]
    name: str = "dataset"

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        ids = [s.image_id for s in self.samples]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise DatasetError(f"duplicate image ids: {dupes[:5]}")
        labeled = {s.vms is not None for s in self.samples}
        if len(labeled) > 1:
            raise DatasetError(f"{self.name}: mixed labeled and unlabeled samples")

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self) -> Iterator[ImageSample]:
        return iter(self.samples)

    def __getitem__(self, i) -> ImageSample:
        return self.samples[i]

    @property
    def labeled(self) -> bool:
        return bool(self.samples) and self.samples[0].vms is not None

    @property
    def ids(self) -> list[str]:
        return [s.image_id for s in self.samples]

    def categories(self) -> dict[str, CategoryPath]:
        return {s.image_id: s.category for s in self.samples}


# ---------------------------------------------------------------- disk I/O


def read_image(path: Path, size: int = IMAGE_SIZE) -> np.ndarray:
    """Decode an image to size x size x 3 uint8, bilinear resize when needed."""
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if im.size != (size, size):
                im = im.resize((size, size), Image.BILINEAR)
            return np.asarray(im, dtype=np.uint8).copy()
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot decode image {path}: {exc}") from exc


def read_vms(path: Path, size: int = IMAGE_SIZE) -> VmsMap:
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            if im.size != (size, size):
                im = im.resize((size, size), Image.BILINEAR)
            rgb = np.asarray(im, dtype=np.uint8)
    except (OSError, ValueError) as exc:
        raise DatasetError(f"cannot decode VMS map {path}: {exc}") from exc
    return VmsMap.from_rgb(rgb)


def write_vms(vms: VmsMap, path: Path) -> None:
    Image.fromarray(vms.to_rgb(), mode="RGB").save(path)


def read_grayscale(path: Path, size: int = IMAGE_SIZE) -> np.ndarray:
    """Grayscale map scaled to [0, 1] (used for saliency maps)."""
    with Image.open(path) as im:
        im = im.convert("L")
        if im.size != (size, size):
            im = im.resize((size, size), Image.BILINEAR)
        return np.asarray(im, dtype=np.float64) / 255.0


def iter_image_files(root: Path) -> Iterator[Path]:
    root = Path(root)
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES:
            rel = p.relative_to(root)
            if rel.parts[0] == VMS_DIRNAME:
                continue
            yield p


def load_dataset(root, with_vms: bool, name: Optional[str] = None) -> Dataset:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    samples = []
    for path in iter_image_files(root):
        rel = path.relative_to(root)
        category = CategoryPath.from_parts(rel.parts[:-1])
        image_id = path.stem
        vms = None
        if with_vms:
            vms_path = root / VMS_DIRNAME / f"{image_id}.png"
            if not vms_path.is_file():
                raise DatasetError(f"missing VMS map for image {image_id!r} (expected {vms_path})")
            vms = read_vms(vms_path)
        samples.append(ImageSample(image_id, read_image(path), category, vms))
    if not samples:
        raise DatasetError(f"no samples found under {root}")
    return Dataset(tuple(samples), name or root.name)


def write_dataset(ds: Dataset, root) -> Path:
    """Write images (PNG, lossless) and VMS maps in the standard layout."""
    root = Path(root)
    for s in ds:
        d = root / s.category.as_path()
        d.mkdir(parents=True, exist_ok=True)
        Image.fromarray(np.asarray(s.pixels), mode="RGB").save(d / f"{s.image_id}.png")
        if s.vms is not None:
            (root / VMS_DIRNAME).mkdir(parents=True, exist_ok=True)
            write_vms(s.vms, root / VMS_DIRNAME / f"{s.image_id}.png")
    return root


# ---------------------------------------------------------------- splitting


def split_train_test(ds: Dataset, n_train: int, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified split by leaf category.

    Each leaf contributes floor(count * n_train / N) training samples; the
    remaining training slots go to leaves picked by a seeded shuffle (at
    most one extra per leaf), so per-leaf counts are within 1 of the exact
    proportion.
    """
    n = len(ds)
    if not 0 <= n_train <= n:
        raise DatasetError(f"n_train={n_train} out of range for dataset of {n} samples")
    rng = np.random.default_rng(seed)
    by_leaf: dict[str, list[int]] = {}
    for i, s in enumerate(ds):
        by_leaf.setdefault(s.category.leaf, []).append(i)
    leaves = [leaf for leaf in LEAVES if leaf in by_leaf]

    quota = {leaf: len(by_leaf[leaf]) * n_train // n if n else 0 for leaf in leaves}
    remaining = n_train - sum(quota.values())
    # leaves with the largest fractional remainder first, ties by seeded shuffle
    order = list(rng.permutation(len(leaves)))
    frac = {leaf: len(by_leaf[leaf]) * n_train % n if n else 0 for leaf in leaves}
    ranked = sorted(range(len(leaves)), key=lambda k: (-frac[leaves[k]], order[k]))
    for k in ranked[:remaining]:
        quota[leaves[k]] += 1

    train_idx, test_idx = [], []
    for leaf in leaves:
        idx = np.array(by_leaf[leaf])
        idx = idx[rng.permutation(len(idx))]
        train_idx.extend(idx[: quota[leaf]].tolist())
        test_idx.extend(idx[quota[leaf]:].tolist())
    train = Dataset(tuple(ds[i] for i in sorted(train_idx)), f"{ds.name}-train")
    test = Dataset(tuple(ds[i] for i in sorted(test_idx)), f"{ds.name}-test")
    return train, test


# ---------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentConfig:
    shift_fraction: float = 0.1
    zoom_range: tuple[float, float] = (0.9, 1.1)
    horizontal_flip: bool = True
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.shift_fraction < 1:
            raise ValueError(f"shift_fraction must be in [0, 1), got {self.shift_fraction}")
        lo, hi = self.zoom_range
        if lo <= 0 or hi <= 0 or lo > hi:
            raise ValueError(f"zoom_range must be positive and ordered, got {self.zoom_range}")
        object.__setattr__(self, "zoom_range", (float(lo), float(hi)))


@dataclass(frozen=True)
class Transform:
    """Shift (pixels), zoom about the image centre, then optional mirror."""

    shift_x: float = 0.0
    shift_y: float = 0.0
    zoom: float = 1.0
    flip: bool = False

    @classmethod
    def draw(cls, cfg: AugmentConfig, rng: np.random.Generator, size: int = IMAGE_SIZE) -> "Transform":
        s = cfg.shift_fraction * size
        sx, sy = rng.uniform(-s, s, size=2)
        zoom = rng.uniform(*cfg.zoom_range)
        flip = bool(cfg.horizontal_flip and rng.random() < 0.5)
        return cls(float(sx), float(sy), float(zoom), flip)

    def _inverse(self, size: int):
        # output (r, c) <- input (r', c'); forward map is flip, zoom about centre, shift
        centre = (size - 1) / 2.0
        inv = 1.0 / self.zoom
        col_sign = -1.0 if self.flip else 1.0
        matrix = np.diag([inv, col_sign * inv])
        # r' = (r - sy - centre)/zoom + centre ; c' = flip((c - sx - centre)/zoom + centre)
        offset_r = centre - (self.shift_y + centre) * inv
        offset_c = centre + col_sign * (-(self.shift_x + centre) * inv)
        return matrix, np.array([offset_r, offset_c])

    def apply(self, grid: np.ndarray, fill: str) -> np.ndarray:
        """Warp one 2D grid; fill is 'nearest' (edge values) or 'zero'."""
        matrix, offset = self._inverse(grid.shape[0])
        mode, cval = ("nearest", 0.0) if fill == "nearest" else ("constant", 0.0)
        return ndimage.affine_transform(
            grid.astype(np.float64), matrix, offset=offset, order=1, mode=mode, cval=cval, prefilter=False
        )


def apply_transform(s: ImageSample, t: Transform) -> ImageSample:
    px = np.stack([t.apply(s.pixels[..., k], "nearest") for k in range(3)], axis=-1)
    px = np.clip(np.rint(px), 0, 255).astype(np.uint8)
    vms = None
    if s.vms is not None:
        vms = VmsMap(
            np.clip(t.apply(s.vms.true_channel, "zero"), 0.0, 1.0),
            np.clip(t.apply(s.vms.false_channel, "zero"), 0.0, 1.0),
        )
    return s.replace(pixels=px, vms=vms)


def augment_sample(s: ImageSample, cfg: AugmentConfig, draw: np.random.Generator) -> ImageSample:
    """One random shift/zoom/flip, applied identically to image and both maps."""
    return apply_transform(s, Transform.draw(cfg, draw, s.pixels.shape[0]))


# ---------------------------------------------------------------- synthetic data

SYNTH_SIGMA = 20.0
SYNTH_FALSE_PEAK = 0.5
_DISC_RADIUS = 14
_SQUARE_HALF = 12
_MARGIN = 24


def gaussian_blob(center: tuple[int, int], sigma: float = SYNTH_SIGMA, peak: float = 1.0,
                  size: int = IMAGE_SIZE) -> np.ndarray:
    r, c = np.mgrid[:size, :size]
    d2 = (r - center[0]) ** 2 + (c - center[1]) ** 2
    return (peak * np.exp(-d2 / (2.0 * sigma**2))).astype(np.float32)


def render_synthetic_sample(image_id: str, disc_center: tuple[int, int], square_center: tuple[int, int],
                            category: CategoryPath, background: int = 128,
                            texture: Optional[np.ndarray] = None) -> ImageSample:
    """Grey scene with a bright disc (true VMS target) and a dark square (false VMS target)."""
    size = IMAGE_SIZE
    img = np.full((size, size), float(background))
    if texture is not None:
        img += texture
    r, c = np.mgrid[:size, :size]
    sr, sc = square_center
    img[(np.abs(r - sr) <= _SQUARE_HALF) & (np.abs(c - sc) <= _SQUARE_HALF)] = 20.0
    dr, dc = disc_center
    img[(r - dr) ** 2 + (c - dc) ** 2 <= _DISC_RADIUS**2] = 235.0
    px = np.repeat(np.clip(np.rint(img), 0, 255).astype(np.uint8)[..., None], 3, axis=-1)
    vms = VmsMap(gaussian_blob(disc_center), gaussian_blob(square_center, peak=SYNTH_FALSE_PEAK))
    return ImageSample(image_id, px, category, vms)


def make_synthetic_dataset(n: int, seed: int, name: str = "synthetic") -> Dataset:
    if n <= 0:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    lo, hi = _MARGIN, IMAGE_SIZE - 1 - _MARGIN
    min_gap = _DISC_RADIUS + _SQUARE_HALF * 1.5 + 4
    samples = []
    for i in range(n):
        while True:
            disc = tuple(int(v) for v in rng.integers(lo, hi + 1, size=2))
            square = tuple(int(v) for v in rng.integers(lo, hi + 1, size=2))
            if np.hypot(disc[0] - square[0], disc[1] - square[1]) > min_gap:
                break
        texture = ndimage.gaussian_filter(rng.normal(0.0, 300.0, size=(IMAGE_SIZE, IMAGE_SIZE)), 6.0)
        cat = CategoryPath.from_leaf(LEAVES[i % len(LEAVES)])
        samples.append(render_synthetic_sample(f"synth_{seed}_{i:05d}", disc, square, cat, texture=texture))
    return Dataset(tuple(samples), name)


def batches(items: Sequence, size: int) -> Iterable[Sequence]:
    for i in range(0, len(items), size):
        yield items[i: i + size]
