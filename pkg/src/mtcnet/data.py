"""Dataset ingestion, synthetic crowd scenes, and manifests."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import MTCError
from .groundtruth import CountRange, HeadAnnotation, KernelConfig, downsample_sum, render_density_map
from .model import STRIDE
from .pnm import encode_ppm, read_pnm


@dataclass
class Sample:
    """One training/eval item: standardized padded image, GT at 1/8 resolution."""

    image: np.ndarray  # (3, H, W)
    density: np.ndarray  # (H/8, W/8)
    count: float
    original_size: tuple = None
    name: str = ""


def pad_to_multiple(arr, multiple=STRIDE):
    """Zero-pad the last two axes up to a multiple of ``multiple``."""
    h, w = arr.shape[-2:]
    ph, pw = -h % multiple, -w % multiple
    if not (ph or pw):
        return arr
    pad = [(0, 0)] * (arr.ndim - 2) + [(0, ph), (0, pw)]
    return np.pad(arr, pad)


def image_to_unit(pixels, maxval):
    """``(H, W, C)`` integer raster to a ``(3, H, W)`` float array in [0, 1]."""
    arr = pixels.astype(np.float64) / float(maxval)
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    return arr.transpose(2, 0, 1).copy()


def standardize(chw, mean=None, std=None):
    if mean is None:
        return chw
    mean = np.asarray(mean, dtype=np.float64).reshape(3, 1, 1)
    std = np.ones((3, 1, 1)) if std is None else np.asarray(std, dtype=np.float64).reshape(3, 1, 1)
    return (chw - mean) / std


def load_image(path, mean=None, std=None):
    """Read a P5/P6 file as a ``(1, 3, H', W')`` batch padded to multiples of 8.

    Returns ``(tensor_data, (H, W))`` where ``(H, W)`` is the unpadded size.
    """
    pixels, maxval = read_pnm(path)
    chw = standardize(image_to_unit(pixels, maxval), mean, std)
    return pad_to_multiple(chw)[None], chw.shape[1:]


def read_annotation(path):
    """Parse ``{"image": ..., "points": [[x, y], ...]}``; returns (image path, points)."""
    path = Path(path)
    with open(path) as fh:
        obj = json.load(fh)
    if not isinstance(obj, dict) or "points" not in obj:
        raise MTCError(f"{path}: annotation must be an object with a 'points' list")
    points = np.asarray(obj["points"], dtype=np.float64).reshape(-1, 2)
    image = obj.get("image")
    return (path.parent / image if image else None), points


def write_annotation(path, image, points):
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    with open(path, "w") as fh:
        json.dump({"image": str(image), "points": pts.tolist()}, fh)


def make_sample(image_chw, points, kernel=KernelConfig(), name=""):
    """Pad the image, render its density map at full size and block-sum it to 1/8."""
    _, h, w = image_chw.shape
    HeadAnnotation(points, (h, w))  # bounds check against the real image
    padded = pad_to_multiple(image_chw)
    ann = HeadAnnotation(points, padded.shape[1:])
    dmap = render_density_map(ann, kernel)
    return Sample(padded, downsample_sum(dmap.grid, STRIDE), float(ann.count), (h, w), name)


# -- synthetic scenes -----------------------------------------------------------

@dataclass(frozen=True)
class SynthSceneSpec:
    size: tuple = (128, 128)
    head_count: tuple = (5, 40)
    head_radius: float = 2.0
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        size = (self.size, self.size) if np.isscalar(self.size) else tuple(self.size)
        if any(s <= 0 or s % STRIDE for s in size):
            raise ValueError(f"synthetic image size {size} must be a positive multiple of {STRIDE}")
        lo, hi = (self.head_count, self.head_count) if np.isscalar(self.head_count) else self.head_count
        if lo < 0 or hi < lo:
            raise ValueError(f"invalid head count range {self.head_count}")
        object.__setattr__(self, "size", size)
        object.__setattr__(self, "head_count", (int(lo), int(hi)))


def generate_synthetic(spec: SynthSceneSpec, rng=None):
    """Bright discs on a noisy dark background.

    Returns ``(rgb uint8 (H, W, 3), HeadAnnotation)``; the annotation holds
    the exact disc centres.
    """
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    h, w = spec.size
    n = int(rng.integers(spec.head_count[0], spec.head_count[1] + 1))
    xs = rng.uniform(0, w, size=n)
    ys = rng.uniform(0, h, size=n)
    canvas = 0.2 + spec.noise * rng.standard_normal((h, w, 3))
    rows, cols = np.mgrid[0:h, 0:w] + 0.5
    for x, y in zip(xs, ys):
        disc = (cols - x) ** 2 + (rows - y) ** 2 <= spec.head_radius ** 2
        canvas[disc] = 0.9
    rgb = np.clip(np.round(canvas * 255), 0, 255).astype(np.uint8)
    return rgb, HeadAnnotation(np.stack([xs, ys], axis=1), (h, w))


def generate_scenes(spec: SynthSceneSpec, n_images):
    root = np.random.SeedSequence(spec.seed)
    return [generate_synthetic(spec, np.random.default_rng(child)) for child in root.spawn(n_images)]


def synthetic_samples(spec: SynthSceneSpec, n_images, kernel=KernelConfig()):
    """In-memory synthetic set, standardized with its own channel statistics."""
    scenes = generate_scenes(spec, n_images)
    units = [image_to_unit(rgb, 255) for rgb, _ in scenes]
    mean, std = channel_stats(units)
    return [make_sample(standardize(u, mean, std), ann.points, kernel, name=f"synth_{i:04d}")
            for i, (u, (_, ann)) in enumerate(zip(units, scenes))]


def channel_stats(images_chw):
    stacked = np.concatenate([im.reshape(3, -1) for im in images_chw], axis=1)
    std = stacked.std(axis=1)
    return stacked.mean(axis=1), np.where(std > 0, std, 1.0)


# -- manifests ------------------------------------------------------------------

@dataclass
class ManifestEntry:
    image: Path
    annotation: Path


@dataclass
class DatasetManifest:
    """Train/test file lists plus per-channel standardization statistics.

    On disk: ``{"train": [...], "test": [...], "mean": [r, g, b], "std": [r, g, b]}``
    where each entry is ``{"image": ..., "annotation": ...}``, an
    ``[image, annotation]`` pair, or a bare annotation path whose ``image``
    field names the picture.  Relative paths resolve against the manifest.
    """

    train: list
    test: list = field(default_factory=list)
    mean: list = None
    std: list = None
    root: Path = Path(".")

    @classmethod
    def load(cls, path):
        path = Path(path)
        with open(path) as fh:
            obj = json.load(fh)
        root = path.parent
        splits = {s: [_parse_entry(root, e) for e in obj.get(s, [])] for s in ("train", "test")}
        return cls(splits["train"], splits["test"], obj.get("mean"), obj.get("std"), root)

    def save(self, path):
        path = Path(path)

        def rel(p):
            try:
                return str(Path(p).relative_to(path.parent))
            except ValueError:
                return str(p)

        obj = {
            split: [{"image": rel(e.image), "annotation": rel(e.annotation)} for e in entries]
            for split, entries in (("train", self.train), ("test", self.test))
        }
        obj["mean"] = None if self.mean is None else [float(v) for v in self.mean]
        obj["std"] = None if self.std is None else [float(v) for v in self.std]
        with open(path, "w") as fh:
            json.dump(obj, fh, indent=2)

    def entries(self, split):
        if split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {split!r}")
        return self.train if split == "train" else self.test

    def head_counts(self, split):
        return [len(read_annotation(e.annotation)[1]) for e in self.entries(split)]

    def load_split(self, split, kernel=KernelConfig()):
        samples = []
        for e in self.entries(split):
            _, points = read_annotation(e.annotation)
            # unpadded raster: make_sample bounds-checks points before padding
            pixels, maxval = read_pnm(e.image)
            chw = standardize(image_to_unit(pixels, maxval), self.mean, self.std)
            samples.append(make_sample(chw, points, kernel, name=Path(e.image).stem))
        return samples


def _parse_entry(root, entry):
    if isinstance(entry, str):
        image, _ = read_annotation(root / entry)
        if image is None:
            raise MTCError(f"annotation {entry} does not name its image")
        return ManifestEntry(image, root / entry)
    if isinstance(entry, dict):
        return ManifestEntry(root / entry["image"], root / entry["annotation"])
    image, annotation = entry
    return ManifestEntry(root / image, root / annotation)


def compute_count_range(manifest: DatasetManifest) -> CountRange:
    """Min and max head count over the TRAIN split only."""
    if not manifest.train:
        raise MTCError("train split is empty; cannot compute a count range")
    counts = manifest.head_counts("train")
    return CountRange(min(counts), max(counts))


def write_synthetic_dataset(out_dir, n_images, spec=SynthSceneSpec(), test_fraction=0.25):
    """Write PPM images, JSON annotations and ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scenes = generate_scenes(spec, n_images)
    n_test = int(round(n_images * test_fraction)) if n_images > 1 else 0
    n_train = n_images - n_test
    entries = []
    for i, (rgb, ann) in enumerate(scenes):
        img_path = out / f"img_{i:04d}.ppm"
        ann_path = out / f"img_{i:04d}.json"
        img_path.write_bytes(encode_ppm(rgb))
        write_annotation(ann_path, img_path.name, ann.points)
        entries.append(ManifestEntry(img_path, ann_path))
    mean, std = channel_stats([image_to_unit(rgb, 255) for rgb, _ in scenes[:n_train]])
    manifest = DatasetManifest(entries[:n_train], entries[n_train:], list(mean), list(std), out)
    path = out / "manifest.json"
    manifest.save(path)
    return path
