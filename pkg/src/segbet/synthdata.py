"""Synthetic structured-segmentation benchmark.

Scenes are composed of non-overlapping shapes on a background, one shape
kind per foreground class: full-width horizontal bars, disks, rectangles
and thin vertical poles. Because shapes never touch, every structural rule
(bars connected, disks apart, poles thin, rectangles filled) is auditable
from the label map alone.

Rendering gives each class a base color with per-image jitter, blurs
boundaries by about one pixel and adds pixel noise, so class appearance
overlaps enough that boundary predictions carry genuine uncertainty.

All randomness derives from (seed, index), so generating sample i is a pure
function and datasets can be produced in any order or in parallel.
"""

from __future__ import annotations

import colorsys
import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, DataError, DegenerateInputError

IGNORE_INDEX = 255
FORMAT_VERSION = 1

# Foreground shape kind for class k (k >= 1) cycles through this tuple.
SHAPE_KINDS = ("bar", "disk", "rect", "pole")

FOUR_CONN = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


@dataclass
class SceneSpec:
    """Declarative description of a synthetic scene distribution."""

    height: int = 64
    width: int = 64
    num_classes: int = 5
    bar_count: tuple[int, int] = (1, 1)
    disk_count: tuple[int, int] = (1, 2)
    rect_count: tuple[int, int] = (1, 2)
    pole_count: tuple[int, int] = (1, 2)
    bar_height: tuple[int, int] = (4, 8)
    disk_radius: tuple[int, int] = (4, 8)
    rect_side: tuple[int, int] = (6, 14)
    pole_height: tuple[int, int] = (12, 26)
    pole_width: tuple[int, int] = (1, 2)
    noise_rate: float = 0.0
    pixel_noise: float = 0.10
    color_jitter: float = 0.22
    boundary_blur: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 2 <= self.num_classes <= 19:
            raise ConfigError(f"class count must be in [2, 19], got {self.num_classes}")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ConfigError(f"noise rate must be in [0, 1], got {self.noise_rate}")
        if self.height < 8 or self.width < 8:
            raise ConfigError("image size must be at least 8x8")

    def kind_of_class(self, k: int) -> str:
        if not 1 <= k < self.num_classes:
            raise ConfigError(f"class {k} has no shape kind")
        return SHAPE_KINDS[(k - 1) % len(SHAPE_KINDS)]

    def count_range(self, kind: str) -> tuple[int, int]:
        return getattr(self, f"{kind}_count")

    def canonical_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def spec_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


@dataclass
class Sample:
    """One scene: rendered image, clean and noisy labels, ignore mask."""

    rgb: np.ndarray  # (H, W, 3) float32 in [0, 1], quantized to 8-bit levels
    clean: np.ndarray  # (H, W) int64 class indices
    noisy: np.ndarray  # (H, W) int64, the training target
    ignore: np.ndarray  # (H, W) bool

    def __eq__(self, other):
        return (
            isinstance(other, Sample)
            and np.array_equal(self.rgb, other.rgb)
            and np.array_equal(self.clean, other.clean)
            and np.array_equal(self.noisy, other.noisy)
            and np.array_equal(self.ignore, other.ignore)
        )


def class_palette(num_classes: int) -> np.ndarray:
    """(c, 3) base colors; background is a neutral gray, classes ring the hue wheel."""
    palette = np.zeros((num_classes, 3))
    palette[0] = (0.46, 0.50, 0.46)
    for k in range(1, num_classes):
        hue = (k - 1) / max(num_classes - 1, 1)
        palette[k] = colorsys.hsv_to_rgb(hue, 0.55, 0.72)
    return palette


def _place(rng, occupied: np.ndarray, shape_mask_fn, max_tries: int = 200):
    """Sample a placement whose mask (dilated by 1 px) avoids occupied pixels."""
    for _ in range(max_tries):
        mask = shape_mask_fn(rng)
        grown = ndimage.binary_dilation(mask, structure=np.ones((3, 3), dtype=bool))
        if not (grown & occupied).any():
            return mask
    raise DegenerateInputError("could not place shape after bounded retries; rule set unsatisfiable")


def _bar_mask(spec: SceneSpec):
    def sample(rng):
        h = int(rng.integers(spec.bar_height[0], spec.bar_height[1] + 1))
        top = int(rng.integers(0, spec.height - h + 1))
        mask = np.zeros((spec.height, spec.width), dtype=bool)
        mask[top : top + h, :] = True
        return mask

    return sample


def _disk_mask(spec: SceneSpec):
    def sample(rng):
        r = int(rng.integers(spec.disk_radius[0], spec.disk_radius[1] + 1))
        ci = int(rng.integers(r, spec.height - r))
        cj = int(rng.integers(r, spec.width - r))
        ii, jj = np.ogrid[: spec.height, : spec.width]
        return (ii - ci) ** 2 + (jj - cj) ** 2 <= r**2

    return sample


def _rect_mask(spec: SceneSpec):
    def sample(rng):
        rh = int(rng.integers(spec.rect_side[0], spec.rect_side[1] + 1))
        rw = int(rng.integers(spec.rect_side[0], spec.rect_side[1] + 1))
        top = int(rng.integers(0, spec.height - rh + 1))
        left = int(rng.integers(0, spec.width - rw + 1))
        mask = np.zeros((spec.height, spec.width), dtype=bool)
        mask[top : top + rh, left : left + rw] = True
        return mask

    return sample


def _pole_mask(spec: SceneSpec):
    def sample(rng):
        ph = int(rng.integers(spec.pole_height[0], spec.pole_height[1] + 1))
        pw = int(rng.integers(spec.pole_width[0], spec.pole_width[1] + 1))
        top = int(rng.integers(0, spec.height - ph + 1))
        left = int(rng.integers(0, spec.width - pw + 1))
        mask = np.zeros((spec.height, spec.width), dtype=bool)
        mask[top : top + ph, left : left + pw] = True
        return mask

    return sample


_MASK_FNS = {"bar": _bar_mask, "disk": _disk_mask, "rect": _rect_mask, "pole": _pole_mask}


def _compose_labels(spec: SceneSpec, rng) -> np.ndarray:
    label = np.zeros((spec.height, spec.width), dtype=np.int64)
    occupied = np.zeros((spec.height, spec.width), dtype=bool)
    for k in range(1, spec.num_classes):
        kind = spec.kind_of_class(k)
        lo, hi = spec.count_range(kind)
        count = int(rng.integers(lo, hi + 1))
        for _ in range(count):
            mask = _place(rng, occupied, _MASK_FNS[kind](spec))
            label[mask] = k
            occupied |= mask
    return label


def _render(spec: SceneSpec, label: np.ndarray, rng) -> np.ndarray:
    palette = class_palette(spec.num_classes)
    jitter = rng.uniform(-spec.color_jitter, spec.color_jitter, size=palette.shape)
    colors = np.clip(palette + jitter, 0.0, 1.0)
    img = colors[label]
    if spec.boundary_blur > 0:
        for ch in range(3):
            img[:, :, ch] = ndimage.gaussian_filter(img[:, :, ch], sigma=spec.boundary_blur)
    img = img + rng.normal(0.0, spec.pixel_noise, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    # Quantize to 8-bit levels so PNG round-trips are exact.
    return (np.round(img * 255.0) / 255.0).astype(np.float32)


def generate_scene(spec: SceneSpec, index: int) -> Sample:
    """Deterministically generate sample ``index`` of the distribution.

    Label noise inside a Sample flips exactly round(rate * pixels) pixels so
    the at-most-ceil(rate * pixels) invariant always holds.
    """
    rng = np.random.default_rng([spec.seed, index])
    clean = _compose_labels(spec, rng)
    rgb = _render(spec, clean, rng)
    noisy = clean.copy()
    n_pixels = clean.size
    n_flips = int(round(spec.noise_rate * n_pixels))
    if n_flips > 0:
        flat = rng.choice(n_pixels, size=n_flips, replace=False)
        offsets = rng.integers(1, spec.num_classes, size=n_flips)
        noisy.ravel()[flat] = (noisy.ravel()[flat] + offsets) % spec.num_classes
    ignore = np.zeros_like(clean, dtype=bool)
    return Sample(rgb=rgb, clean=clean, noisy=noisy, ignore=ignore)


def inject_label_noise(label: np.ndarray, rate: float, seed: int, num_classes: int) -> np.ndarray:
    """Independently resample each pixel to a uniform different class with probability ``rate``.

    Ignored pixels are left untouched. Deterministic per seed.
    """
    if not 0.0 <= rate <= 1.0:
        raise ConfigError(f"noise rate must be in [0, 1], got {rate}")
    rng = np.random.default_rng(seed)
    flips = rng.random(label.shape) < rate
    offsets = rng.integers(1, num_classes, size=label.shape)
    flips &= label != IGNORE_INDEX
    out = label.copy()
    out[flips] = (out[flips] + offsets[flips]) % num_classes
    return out


def check_structural_rules(label: np.ndarray, spec: SceneSpec) -> list[str]:
    """Audit one clean label map against the scene rules; returns violations."""
    violations = []
    for k in range(1, spec.num_classes):
        mask = label == k
        if not mask.any():
            continue
        kind = spec.kind_of_class(k)
        comps, n_comp = ndimage.label(mask, structure=FOUR_CONN)
        for comp_id in range(1, n_comp + 1):
            comp = comps == comp_id
            rows, cols = np.nonzero(comp)
            bh = rows.max() - rows.min() + 1
            bw = cols.max() - cols.min() + 1
            area = int(comp.sum())
            if kind == "bar":
                if bw != spec.width:
                    violations.append(f"class {k}: bar component does not span full width")
                if area != bh * bw:
                    violations.append(f"class {k}: bar component is not a filled band")
            elif kind == "disk":
                if abs(bh - bw) > 2:
                    violations.append(f"class {k}: disk component aspect {bh}x{bw} not round")
                if area < 0.7 * np.pi * (max(bh, bw) / 2.0) ** 2:
                    violations.append(f"class {k}: disk component too sparse for one disk")
            elif kind == "rect":
                if area != bh * bw:
                    violations.append(f"class {k}: rectangle component is not filled")
            elif kind == "pole":
                if bw > spec.pole_width[1]:
                    violations.append(f"class {k}: pole component wider than {spec.pole_width[1]}")
    return violations


def augment(sample: Sample, flip: bool, crop: tuple[int, int] | None, jitter: float, seed: int) -> Sample:
    """Apply one geometric+photometric augmentation.

    The same geometric transform (flip, crop) hits rgb, labels and mask;
    jitter shifts rgb channels only. Deterministic per seed.
    """
    rng = np.random.default_rng(seed)
    rgb, clean, noisy, ignore = sample.rgb, sample.clean, sample.noisy, sample.ignore
    if flip:
        rgb = rgb[:, ::-1].copy()
        clean = clean[:, ::-1].copy()
        noisy = noisy[:, ::-1].copy()
        ignore = ignore[:, ::-1].copy()
    if crop is not None:
        ch, cw = crop
        h, w = clean.shape
        if ch > h or cw > w or ch < 1 or cw < 1:
            raise ConfigError(f"crop {crop} invalid for image {h}x{w}")
        top = int(rng.integers(0, h - ch + 1))
        left = int(rng.integers(0, w - cw + 1))
        rgb = rgb[top : top + ch, left : left + cw].copy()
        clean = clean[top : top + ch, left : left + cw].copy()
        noisy = noisy[top : top + ch, left : left + cw].copy()
        ignore = ignore[top : top + ch, left : left + cw].copy()
    if jitter > 0:
        shift = rng.uniform(-jitter, jitter, size=3).astype(np.float32)
        rgb = np.clip(rgb + shift[None, None, :], 0.0, 1.0)
    return Sample(rgb=rgb.astype(np.float32), clean=clean, noisy=noisy, ignore=ignore)


class Dataset:
    """Read-only handle over a generated dataset directory."""

    def __init__(self, root: Path, spec: SceneSpec, n: int):
        self.root = Path(root)
        self.spec = spec
        self.n = n

    def __len__(self) -> int:
        return self.n

    def __getitem__(self, i: int) -> Sample:
        if not 0 <= i < self.n:
            raise IndexError(i)
        name = f"{i:04d}.png"
        with Image.open(self.root / "images" / name) as img:
            rgb = (np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0).astype(np.float32)
        noisy = np.asarray(Image.open(self.root / "labels" / name), dtype=np.int64)
        clean = np.asarray(Image.open(self.root / "labels_clean" / name), dtype=np.int64)
        if noisy.shape != (self.spec.height, self.spec.width):
            raise DataError(f"{name}: label size {noisy.shape} does not match spec")
        ignore = noisy == IGNORE_INDEX
        return Sample(rgb=rgb, clean=clean, noisy=noisy, ignore=ignore)

    def samples(self):
        return [self[i] for i in range(self.n)]


def write_dataset(spec: SceneSpec, n: int, out_dir) -> Dataset:
    """Generate n samples and write the PNG + manifest layout."""
    root = Path(out_dir)
    for sub in ("images", "labels", "labels_clean"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for i in range(n):
        sample = generate_scene(spec, i)
        name = f"{i:04d}.png"
        Image.fromarray(np.round(sample.rgb * 255.0).astype(np.uint8), mode="RGB").save(
            root / "images" / name
        )
        noisy = np.where(sample.ignore, IGNORE_INDEX, sample.noisy)
        clean = np.where(sample.ignore, IGNORE_INDEX, sample.clean)
        Image.fromarray(noisy.astype(np.uint8), mode="L").save(root / "labels" / name)
        Image.fromarray(clean.astype(np.uint8), mode="L").save(root / "labels_clean" / name)
    manifest = {
        "format_version": FORMAT_VERSION,
        "n": n,
        "spec": asdict(spec),
        "spec_hash": spec.spec_hash(),
    }
    with open(root / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
    return Dataset(root, spec, n)


def read_dataset(in_dir) -> Dataset:
    root = Path(in_dir)
    try:
        with open(root / "manifest.json") as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read manifest in {root}: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DataError(f"unsupported dataset format version {manifest.get('format_version')}")
    spec_dict = manifest.get("spec", {})
    spec_dict = {k: tuple(v) if isinstance(v, list) else v for k, v in spec_dict.items()}
    spec = SceneSpec(**spec_dict)
    if manifest.get("spec_hash") != spec.spec_hash():
        raise DataError("manifest spec hash mismatch; dataset directory is corrupt")
    n = int(manifest["n"])
    for i in range(n):
        name = f"{i:04d}.png"
        for sub in ("images", "labels", "labels_clean"):
            if not (root / sub / name).exists():
                raise DataError(f"dataset is missing {sub}/{name}")
    return Dataset(root, spec, n)
