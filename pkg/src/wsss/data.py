"""Dataset manifests, class balancing, splitting, augmentation and the
synthetic shapes generator used for desk-scale runs.
"""
from __future__ import annotations

import colorsys
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

IGNORE_LABEL = 255

# 12,873 / (72,946 + 12,873)
DEFAULT_VAL_FRACTION = 12873 / (72946 + 12873)


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    image_uri: str
    labels: frozenset
    mask_uri: Optional[str] = None

    def with_labels(self, labels) -> "ImageRecord":
        return replace(self, labels=frozenset(labels))


@dataclass
class DatasetManifest:
    records: list
    class_names: list
    excluded_classes: set = field(default_factory=set)
    root: Optional[Path] = None

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def __len__(self) -> int:
        return len(self.records)

    def resolve(self, uri: str) -> Path:
        p = Path(uri)
        if p.is_absolute() or self.root is None:
            return p
        return self.root / p

    def ids(self) -> list:
        return [r.image_id for r in self.records]

    def with_records(self, records) -> "DatasetManifest":
        return DatasetManifest(list(records), list(self.class_names),
                               set(self.excluded_classes), self.root)

    def class_counts(self) -> dict:
        counts = {c: 0 for c in range(1, self.num_classes + 1)}
        for r in self.records:
            for c in r.labels:
                counts[c] += 1
        return counts

    def validate(self) -> None:
        seen = set()
        C = self.num_classes
        for r in self.records:
            if r.image_id in seen:
                raise ManifestError(f"duplicate image_id {r.image_id!r}")
            seen.add(r.image_id)
            bad = [c for c in r.labels if not 1 <= c <= C]
            if bad:
                raise ManifestError(
                    f"record {r.image_id!r}: label id {bad[0]} out of range 1..{C}")
            if r.labels & self.excluded_classes:
                raise ManifestError(
                    f"record {r.image_id!r} carries an excluded class")


def load_manifest(path) -> DatasetManifest:
    """Parse a manifest file.

    Format: a ``classes: a,b,c`` header, an optional ``excluded: 1,2`` line, then
    one record per line as ``image_id<TAB>image_path<TAB>l1,l2<TAB>[mask_path]``.
    Relative paths are resolved against the manifest's directory.
    """
    path = Path(path)
    lines = path.read_text(encoding="utf-8").split("\n")
    if not lines or not lines[0].startswith("classes:"):
        raise ManifestError(f"{path}:1: expected 'classes:' header")
    names = [n.strip() for n in lines[0][len("classes:"):].split(",") if n.strip()]
    if not names:
        raise ManifestError(f"{path}:1: empty class list")
    C = len(names)
    excluded: set = set()
    records = []
    seen = set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        if line.startswith("excluded:"):
            body = line[len("excluded:"):].strip()
            try:
                excluded = {int(x) for x in body.split(",") if x.strip()}
            except ValueError:
                raise ManifestError(f"{path}:{lineno}: bad excluded list") from None
            continue
        parts = line.split("\t")
        if len(parts) not in (3, 4):
            raise ManifestError(f"{path}:{lineno}: expected 3 or 4 tab-separated fields")
        image_id, image_uri, label_str = parts[:3]
        mask_uri = parts[3] if len(parts) == 4 and parts[3] else None
        try:
            labels = frozenset(int(x) for x in label_str.split(",") if x.strip())
        except ValueError:
            raise ManifestError(f"{path}:{lineno}: bad label list {label_str!r}") from None
        for c in labels:
            if not 1 <= c <= C:
                raise ManifestError(
                    f"{path}:{lineno}: record {image_id!r} has label id {c} out of range 1..{C}")
        if image_id in seen:
            raise ManifestError(f"{path}:{lineno}: duplicate image_id {image_id!r}")
        seen.add(image_id)
        records.append(ImageRecord(image_id, image_uri, labels, mask_uri))
    m = DatasetManifest(records, names, excluded, path.parent)
    m.validate()
    return m


def save_manifest(manifest: DatasetManifest, path) -> None:
    lines = ["classes: " + ",".join(manifest.class_names)]
    if manifest.excluded_classes:
        lines.append("excluded: " + ",".join(str(c) for c in sorted(manifest.excluded_classes)))
    for r in manifest.records:
        labels = ",".join(str(c) for c in sorted(r.labels))
        lines.append("\t".join([r.image_id, r.image_uri, labels, r.mask_uri or ""]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def exclude_class(manifest: DatasetManifest, class_id: int) -> DatasetManifest:
    """Remove ``class_id`` from every record; records left without labels are dropped."""
    if not 1 <= class_id <= manifest.num_classes:
        raise ValueError(f"class id {class_id} out of range 1..{manifest.num_classes}")
    records = []
    for r in manifest.records:
        labels = r.labels - {class_id}
        if labels:
            records.append(r.with_labels(labels) if labels != r.labels else r)
    out = manifest.with_records(records)
    out.excluded_classes.add(class_id)
    return out


def balance_downsample(manifest: DatasetManifest, cap_per_class: int, seed: int) -> DatasetManifest:
    """Greedy class-balanced downsampling.

    Classes are visited by descending frequency (ties: lower id first). For a
    class above the cap, its records are visited in seeded random order and a
    record is dropped only when every one of its labels is still above the cap,
    so no class is pushed below the cap or loses its last exemplar.
    """
    if cap_per_class < 1:
        raise ValueError("cap_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    counts = manifest.class_counts()
    keep = [True] * len(manifest.records)
    order = sorted(counts, key=lambda c: (-counts[c], c))
    for c in order:
        if counts[c] <= cap_per_class:
            continue
        candidates = [i for i, r in enumerate(manifest.records) if keep[i] and c in r.labels]
        for i in rng.permutation(len(candidates)):
            if counts[c] <= cap_per_class:
                break
            idx = candidates[i]
            labels = manifest.records[idx].labels
            if all(counts[l] > cap_per_class for l in labels):
                keep[idx] = False
                for l in labels:
                    counts[l] -= 1
    return manifest.with_records(r for r, k in zip(manifest.records, keep) if k)


def split_train_val(manifest: DatasetManifest, val_fraction: float = DEFAULT_VAL_FRACTION,
                    seed: int = 0):
    """Seeded split stratified on each record's rarest label.

    The validation size is ``round(N * val_fraction)``, spread across strata by
    largest remainder; every stratum with at least two records keeps one record
    on each side.
    """
    if not 0 < val_fraction < 1:
        raise ValueError("val_fraction must be in (0, 1)")
    n = len(manifest.records)
    if n < 2:
        raise ValueError("need at least 2 records to split")
    counts = manifest.class_counts()
    strata: dict = {}
    for i, r in enumerate(manifest.records):
        key = min(r.labels, key=lambda c: (counts[c], c)) if r.labels else 0
        strata.setdefault(key, []).append(i)
    keys = sorted(strata)
    target = min(max(round(n * val_fraction), 1), n - 1)

    quota = {k: len(strata[k]) * val_fraction for k in keys}
    alloc = {k: math.floor(quota[k]) for k in keys}
    rest = target - sum(alloc.values())
    for k in sorted(keys, key=lambda k: (-(quota[k] - alloc[k]), k))[:max(rest, 0)]:
        alloc[k] += 1
    for k in keys:
        size = len(strata[k])
        if size >= 2:
            alloc[k] = min(max(alloc[k], 1), size - 1)

    rng = np.random.default_rng(seed)
    val_idx = set()
    for k in keys:
        members = strata[k]
        perm = rng.permutation(len(members))
        val_idx.update(members[j] for j in perm[:alloc[k]])
    train = [r for i, r in enumerate(manifest.records) if i not in val_idx]
    val = [r for i, r in enumerate(manifest.records) if i in val_idx]
    return manifest.with_records(train), manifest.with_records(val)


# ---------------------------------------------------------------------------
# augmentation

@dataclass
class AugmentationConfig:
    flip: bool = True
    flip_prob: float = 0.5
    shift: bool = True
    shift_range: float = 0.1
    scale: bool = True
    scale_range: tuple = (0.9, 1.1)
    rotate: bool = True
    rotate_range: float = 15.0
    noise: bool = True
    noise_var_range: tuple = (0.0, 0.01)
    brightness_contrast: bool = True
    brightness_range: float = 0.1
    contrast_range: float = 0.1
    median_blur: bool = True
    blur_prob: float = 0.2
    blur_kernels: tuple = (3, 5)
    rgb_shift: bool = True
    rgb_shift_range: float = 0.05

    def __post_init__(self):
        self.scale_range = tuple(self.scale_range)
        self.noise_var_range = tuple(self.noise_var_range)
        self.blur_kernels = tuple(self.blur_kernels)
        if not 0 <= self.flip_prob <= 1 or not 0 <= self.blur_prob <= 1:
            raise ValueError("probabilities must lie in [0, 1]")
        lo, hi = self.scale_range
        if not 0 < lo <= hi:
            raise ValueError("scale_range must be a positive interval")
        lo, hi = self.noise_var_range
        if not 0 <= lo <= hi:
            raise ValueError("noise_var_range must be a non-negative interval")
        if min(self.shift_range, self.rotate_range, self.brightness_range,
               self.contrast_range, self.rgb_shift_range) < 0:
            raise ValueError("ranges must be non-negative")
        if any(k < 1 or k % 2 == 0 for k in self.blur_kernels):
            raise ValueError("median blur kernels must be odd and positive")

    @classmethod
    def disabled(cls) -> "AugmentationConfig":
        return cls(flip=False, shift=False, scale=False, rotate=False, noise=False,
                   brightness_contrast=False, median_blur=False, rgb_shift=False)

    @classmethod
    def flip_only(cls, prob: float = 0.5) -> "AugmentationConfig":
        cfg = cls.disabled()
        cfg.flip = True
        cfg.flip_prob = prob
        return cfg


def _affine(image, mask, shift, scale, angle_deg):
    h, w = image.shape[:2]
    c = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    t = np.deg2rad(angle_deg)
    rot = np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]])
    # output -> input coordinate map
    m = rot / scale
    offset = c - m @ (c + np.array([shift[0] * h, shift[1] * w]))
    out = np.stack([ndimage.affine_transform(image[..., k], m, offset, order=1, mode="reflect")
                    for k in range(image.shape[2])], axis=-1)
    if mask is not None:
        mask = ndimage.affine_transform(mask, m, offset, order=0, mode="constant",
                                        cval=IGNORE_LABEL)
    return out, mask


def augment(image: np.ndarray, config: AugmentationConfig, rng: np.random.Generator,
            mask: Optional[np.ndarray] = None):
    """Apply the enabled transforms in a fixed order.

    Geometric transforms also move ``mask`` when given (nearest-neighbour,
    uncovered pixels become the ignore label). Returns the image, or
    ``(image, mask)`` when a mask was passed.
    """
    out = np.array(image, dtype=np.float32, copy=True)
    if config.flip and rng.random() < config.flip_prob:
        out = out[:, ::-1].copy()
        if mask is not None:
            mask = mask[:, ::-1].copy()
    if config.shift or config.scale or config.rotate:
        shift = (rng.uniform(-config.shift_range, config.shift_range, size=2)
                 if config.shift else np.zeros(2))
        scale = rng.uniform(*config.scale_range) if config.scale else 1.0
        angle = (rng.uniform(-config.rotate_range, config.rotate_range)
                 if config.rotate else 0.0)
        out, mask = _affine(out, mask, shift, scale, angle)
    if config.brightness_contrast:
        b = rng.uniform(-config.brightness_range, config.brightness_range)
        a = 1.0 + rng.uniform(-config.contrast_range, config.contrast_range)
        out = (out - 0.5) * a + 0.5 + b
    if config.rgb_shift:
        out = out + rng.uniform(-config.rgb_shift_range, config.rgb_shift_range, size=3)
    if config.median_blur and rng.random() < config.blur_prob:
        k = int(rng.choice(config.blur_kernels))
        out = ndimage.median_filter(out, size=(k, k, 1), mode="reflect")
    if config.noise:
        var = rng.uniform(*config.noise_var_range)
        out = out + rng.normal(0.0, math.sqrt(var), size=out.shape)
    out = np.clip(out, 0.0, 1.0).astype(np.float32)
    return out if mask is None else (out, mask)


# ---------------------------------------------------------------------------
# image io

def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def load_label_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.uint8).copy()


def save_label_png(labels: np.ndarray, path) -> None:
    arr = np.asarray(labels)
    if arr.ndim != 2 or arr.min(initial=0) < 0 or arr.max(initial=0) > 255:
        raise ValueError("label map must be 2-D with values in 0..255")
    Image.fromarray(arr.astype(np.uint8), mode="L").save(path, format="PNG")


# ---------------------------------------------------------------------------
# synthetic shapes

SHAPES = ("disk", "square", "triangle", "diamond", "cross", "ring", "hbar", "star")


def shape_mask(kind: str, cy: float, cx: float, r: float, size: int) -> np.ndarray:
    """Boolean raster of a shape; a pixel is inside when its centre is."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    if kind == "disk":
        return dy ** 2 + dx ** 2 <= r ** 2
    if kind == "square":
        s = r * 0.85
        return (np.abs(dy) <= s) & (np.abs(dx) <= s)
    if kind == "triangle":
        # apex up at cy - r, base at cy + 0.7 r with half-width r
        return (dy <= r * 0.7) & (dy >= -r) & (np.abs(dx) <= (dy + r) / 1.7)
    if kind == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    if kind == "cross":
        a, b = r, r * 0.35
        return ((np.abs(dy) <= a) & (np.abs(dx) <= b)) | ((np.abs(dy) <= b) & (np.abs(dx) <= a))
    if kind == "ring":
        d2 = dy ** 2 + dx ** 2
        return (d2 <= r ** 2) & (d2 >= (0.55 * r) ** 2)
    if kind == "hbar":
        return (np.abs(dy) <= r * 0.4) & (np.abs(dx) <= r)
    if kind == "star":
        ang = np.arctan2(dy, dx)
        rad = np.sqrt(dy ** 2 + dx ** 2)
        return rad <= r * (0.6 + 0.4 * np.cos(5 * ang))
    raise ValueError(f"unknown shape {kind!r}")


def _texture(rng, size):
    base = rng.uniform(0.25, 0.75, size=3)
    coarse = rng.normal(0, 1, size=(size // 8 + 1, size // 8 + 1, 3))
    coarse = ndimage.zoom(coarse, (8, 8, 1), order=1)[:size, :size]
    fine = rng.normal(0, 1, size=(size, size, 3))
    img = base + 0.06 * coarse + 0.02 * fine
    # unlabelled distractor blobs
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(int(rng.integers(0, 3))):
        cy, cx = rng.uniform(0, size, size=2)
        ry, rx = rng.uniform(size * 0.05, size * 0.15, size=2)
        blob = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1
        # near-grey, so they compete with objects for edges but not for hue
        tone = rng.uniform(0.1, 0.9) + rng.uniform(-0.05, 0.05, size=3)
        img[blob] = tone + 0.02 * rng.normal(0, 1, size=(blob.sum(), 3))
    return np.clip(img, 0, 1), base


def _instance_color(rng, cls, n_classes, background):
    # hue is tied to the class, with jitter; saturation and value vary freely
    for _ in range(100):
        hue = (cls - 1) / n_classes + rng.uniform(-0.2, 0.2) / n_classes
        color = np.array(colorsys.hsv_to_rgb(hue % 1.0, rng.uniform(0.45, 0.9),
                                             rng.uniform(0.45, 0.95)))
        if np.abs(color - background).mean() >= 0.12:
            return color
    return color


def generate_synthetic_shapes(n_images: int, n_classes: int, image_size: int, seed: int,
                              out_dir, min_shapes: int = 1, max_shapes: int = 3,
                              radius_range: Sequence = None) -> DatasetManifest:
    """Write ``n_images`` images of 1-3 non-overlapping shapes plus masks and a manifest.

    A class is identified by its shape and a class-specific hue band;
    saturation, brightness and shading vary per instance.
    Classes in an image are drawn without replacement, so ``max_shapes``
    cannot exceed ``n_classes``.
    """
    if n_classes > len(SHAPES) or n_classes < 1:
        raise ValueError(f"n_classes must be in 1..{len(SHAPES)}")
    if image_size < 32:
        raise ValueError("image_size must be >= 32")
    if not 1 <= min_shapes <= max_shapes <= n_classes:
        raise ValueError("need 1 <= min_shapes <= max_shapes <= n_classes")
    out_dir = Path(out_dir)
    try:
        (out_dir / "images").mkdir(parents=True, exist_ok=True)
        (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"output directory {out_dir} is not writable: {e}") from e
    if radius_range is None:
        radius_range = (image_size * 0.11, image_size * 0.18)
    rng = np.random.default_rng(seed)
    records = []
    for n in range(n_images):
        img, bg_color = _texture(rng, image_size)
        mask = np.zeros((image_size, image_size), dtype=np.uint8)
        k = int(rng.integers(min_shapes, max_shapes + 1))
        classes = rng.choice(np.arange(1, n_classes + 1), size=k, replace=False)
        occupied = np.zeros_like(mask, dtype=bool)
        for c in classes:
            for _ in range(50):
                r = rng.uniform(*radius_range)
                cy, cx = rng.uniform(r + 1, image_size - r - 2, size=2)
                sm = shape_mask(SHAPES[c - 1], cy, cx, r, image_size)
                grown = ndimage.binary_dilation(sm, iterations=2)
                if sm.any() and not (grown & occupied).any():
                    break
            else:
                continue
            color = _instance_color(rng, int(c), n_classes, bg_color)
            yy, xx = np.mgrid[0:image_size, 0:image_size]
            g = rng.normal(0, 0.004, size=2)
            shade = (1.0 + g[0] * (yy - cy) + g[1] * (xx - cx))[..., None]
            fill = color * shade + 0.02 * rng.normal(0, 1, size=(image_size, image_size, 3))
            img = np.where(sm[..., None], np.clip(fill, 0, 1), img)
            mask[sm] = c
            occupied |= sm
        image_id = f"img{n:05d}"
        Image.fromarray((img * 255).round().astype(np.uint8)).save(
            out_dir / "images" / f"{image_id}.png", format="PNG")
        save_label_png(mask, out_dir / "masks" / f"{image_id}.png")
        labels = frozenset(int(c) for c in np.unique(mask) if c != 0)
        records.append(ImageRecord(image_id, f"images/{image_id}.png", labels,
                                   f"masks/{image_id}.png"))
    manifest = DatasetManifest(records, [SHAPES[i] for i in range(n_classes)], set(), out_dir)
    save_manifest(manifest, out_dir / "manifest.tsv")
    return manifest


def load_images(manifest: DatasetManifest, size: Optional[int] = None) -> dict:
    """image_id -> float32 H x W x 3 array, optionally resized to ``size`` x ``size``."""
    out = {}
    for r in manifest.records:
        img = load_image(manifest.resolve(r.image_uri))
        if size is not None and img.shape[:2] != (size, size):
            with Image.open(manifest.resolve(r.image_uri)) as im:
                im = im.convert("RGB").resize((size, size), Image.BILINEAR)
                img = np.asarray(im, dtype=np.float32) / 255.0
        out[r.image_id] = img
    return out


def load_gt_masks(manifest: DatasetManifest) -> dict:
    out = {}
    for r in manifest.records:
        if r.mask_uri is None:
            raise ManifestError(f"record {r.image_id!r} has no ground-truth mask")
        out[r.image_id] = load_label_png(manifest.resolve(r.mask_uri))
    return out
