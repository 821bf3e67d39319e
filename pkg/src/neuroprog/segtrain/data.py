"""Samples, the synthetic vessel generator, augmentation and on-disk datasets.

Dataset directory layout (written by ``data synth`` / ``data ingest``)::

    <dir>/images/<stem>.png   grey or RGB (green channel used)
    <dir>/masks/<stem>.png    vessel mask, nonzero = vessel
    <dir>/fov/<stem>.png      optional field-of-view mask
    <dir>/manifest.json
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

log = logging.getLogger(__name__)

IMAGE_EXTS = (".png", ".pgm", ".ppm", ".tif", ".tiff", ".gif", ".jpg")


class DataError(ValueError):
    pass


@dataclass
class Sample:
    """image: (1, H, W) in [-0.5, 0.5]; mask: (H, W) uint8 in {0, 1}; fov likewise or None."""

    image: np.ndarray
    mask: np.ndarray
    fov: Optional[np.ndarray] = None
    name: str = ""
    orig_hw: Optional[Tuple[int, int]] = None

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 1:
            raise DataError(f"{self.name}: image must be (1, H, W), got {self.image.shape}")
        if self.mask.shape != self.image.shape[1:]:
            raise DataError(f"{self.name}: mask {self.mask.shape} vs image {self.image.shape[1:]}")
        if self.fov is not None:
            if self.fov.shape != self.mask.shape:
                raise DataError(f"{self.name}: fov {self.fov.shape} vs mask {self.mask.shape}")
            if np.any(self.mask.astype(bool) & ~self.fov.astype(bool)):
                raise DataError(f"{self.name}: vessel pixels outside the field of view")

    @property
    def hw(self) -> Tuple[int, int]:
        return self.mask.shape


@dataclass
class SegDataset:
    samples: List[Sample]
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def split(self, val_fraction: float = 0.25, n_val: Optional[int] = None) -> Tuple[List[Sample], List[Sample]]:
        """Deterministic split: the last ``n_val`` samples validate."""
        n = len(self.samples)
        if n_val is None:
            n_val = max(1, int(round(n * val_fraction)))
        if not 0 < n_val < n:
            raise DataError(f"cannot hold out {n_val} of {n} samples")
        return self.samples[: n - n_val], self.samples[n - n_val:]


# --------------------------------------------------------------------------
# synthetic vessels

def _stamp(canvas: np.ndarray, r: int, c: int, thickness: int) -> None:
    rad = thickness / 2.0
    k = int(np.ceil(rad))
    H, W = canvas.shape
    for dr in range(-k, k + 1):
        for dc in range(-k, k + 1):
            if dr * dr + dc * dc <= rad * rad:
                rr, cc = r + dr, c + dc
                if 0 <= rr < H and 0 <= cc < W:
                    canvas[rr, cc] = max(canvas[rr, cc], thickness)


def _grow(rng, tree, reflex, size, pos, heading, thickness, length, level):
    """Random walk with steps <= 1 px so consecutive stamps stay 8-connected."""
    y, x = pos
    step = 0.8
    for _ in range(int(length / step)):
        heading += rng.normal(0.0, 0.12)
        ny, nx = y + step * np.sin(heading), x + step * np.cos(heading)
        if not (0 <= ny < size and 0 <= nx < size):
            break
        y, x = ny, nx
        r, c = int(round(y)), int(round(x))
        r, c = min(r, size - 1), min(c, size - 1)
        _stamp(tree, r, c, thickness)
        if thickness >= 3:
            reflex[r, c] = True
        if thickness > 1 and level < 3 and rng.random() < 0.02:
            side = 1.0 if rng.random() < 0.5 else -1.0
            _grow(
                rng, tree, reflex, size, (y, x), heading + side * rng.uniform(0.45, 1.1),
                thickness - 1, length * rng.uniform(0.35, 0.6), level + 1,
            )
            thickness = max(1, thickness - (rng.random() < 0.4))


def _tree(rng, size: int):
    tree = np.zeros((size, size), dtype=np.uint8)
    reflex = np.zeros((size, size), dtype=bool)
    edge = int(rng.integers(4))
    t = rng.uniform(0.15, 0.85) * (size - 1)
    start = [(0.0, t), (t, size - 1.0), (size - 1.0, t), (t, 0.0)][edge]
    inward = [np.pi / 2, np.pi, -np.pi / 2, 0.0][edge]
    _grow(rng, tree, reflex, size, start, inward + rng.uniform(-0.5, 0.5), 3, size * rng.uniform(0.6, 1.0), 0)
    return tree, reflex


def synth_sample(rng: np.random.Generator, size: int = 64, return_trees: bool = False):
    """One synthetic fundus-like sample: dark branching vessels on a lit background."""
    if size < 32:
        raise DataError("synthetic images need size >= 32")
    n_roots = int(rng.integers(2, 5))
    trees = [_tree(rng, size) for _ in range(n_roots)]
    while np.mean(np.max([t for t, _ in trees], axis=0) > 0) < 0.02 and len(trees) < 8:
        trees.append(_tree(rng, size))
    while np.mean(np.max([t for t, _ in trees], axis=0) > 0) > 0.18 and len(trees) > 2:
        trees.pop()
    thick = np.max([t for t, _ in trees], axis=0)
    mask = (thick > 0).astype(np.uint8)
    reflex = np.any([r for _, r in trees], axis=0) if rng.random() < 0.5 else np.zeros_like(mask, bool)

    yy, xx = np.mgrid[0:size, 0:size] / (size - 1) - 0.5
    gy, gx = rng.uniform(-0.25, 0.25, size=2)
    bg = 0.55 + gy * yy + gx * xx - 0.15 * (yy ** 2 + xx ** 2)
    contrast = rng.uniform(0.2, 0.32)
    depth = contrast * (0.55 + 0.15 * thick)
    img = bg - np.where(mask > 0, depth, 0.0)
    img = img + np.where(reflex, 0.5 * contrast, 0.0)
    img = ndimage.gaussian_filter(img, 0.5)
    img = img + rng.normal(0.0, 0.05, size=img.shape)
    img = np.clip(img, 0.0, 1.0) - 0.5
    sample = Sample(img[None].astype(np.float64), mask)
    if return_trees:
        return sample, [(t > 0) for t, _ in trees]
    return sample


def synth_vessels(n: int, size: int = 64, rng=0) -> SegDataset:
    """``n`` samples; fully determined by ``rng`` (Generator or seed)."""
    seed = rng if isinstance(rng, (int, np.integer)) else None
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    samples = []
    for i in range(n):
        s = synth_sample(rng, size)
        s.name = f"synth_{i:04d}"
        samples.append(s)
    return SegDataset(samples, {"kind": "synth", "n": n, "size": size, "seed": seed})


# --------------------------------------------------------------------------
# augmentation

def transform(sample: Sample, hflip: bool, vflip: bool, angle: float) -> Sample:
    """Apply flips then a rotation (degrees) identically to image, mask and fov."""
    img, mask, fov = sample.image, sample.mask, sample.fov
    if hflip:
        img, mask = img[:, :, ::-1], mask[:, ::-1]
        fov = None if fov is None else fov[:, ::-1]
    if vflip:
        img, mask = img[:, ::-1, :], mask[::-1, :]
        fov = None if fov is None else fov[::-1, :]
    if angle % 360.0:
        img = ndimage.rotate(img, angle, axes=(2, 1), reshape=False, order=1, mode="reflect")
        mask = ndimage.rotate(mask, angle, axes=(1, 0), reshape=False, order=0, mode="reflect")
        if fov is not None:
            fov = ndimage.rotate(fov, angle, axes=(1, 0), reshape=False, order=0, mode="reflect")
    return replace(
        sample,
        image=np.ascontiguousarray(img),
        mask=np.ascontiguousarray(mask),
        fov=None if fov is None else np.ascontiguousarray(fov),
    )


def augment(sample: Sample, rng: np.random.Generator) -> Sample:
    """Random horizontal/vertical flip (p=0.5 each) and rotation uniform in [0, 360)."""
    hflip = rng.random() < 0.5
    vflip = rng.random() < 0.5
    angle = float(rng.uniform(0.0, 360.0))
    return transform(sample, hflip, vflip, angle)


# --------------------------------------------------------------------------
# padding

def pad_to_multiple(sample: Sample, multiple: int) -> Sample:
    """Pad bottom/right to a multiple; padded pixels fall outside the FOV."""
    H, W = sample.hw
    ph, pw = (-H) % multiple, (-W) % multiple
    if not ph and not pw:
        return sample
    fov = sample.fov if sample.fov is not None else np.ones((H, W), np.uint8)
    return Sample(
        np.pad(sample.image, ((0, 0), (0, ph), (0, pw)), mode="edge"),
        np.pad(sample.mask, ((0, ph), (0, pw))),
        np.pad(fov, ((0, ph), (0, pw))),
        sample.name,
        orig_hw=sample.orig_hw or (H, W),
    )


def unpad(arr: np.ndarray, orig_hw: Optional[Tuple[int, int]]) -> np.ndarray:
    if orig_hw is None:
        return arr
    return arr[..., : orig_hw[0], : orig_hw[1]]


# --------------------------------------------------------------------------
# disk I/O

def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint((img + 0.5) * 255.0), 0, 255).astype(np.uint8)


def write_dataset(ds: SegDataset, out: Path, force: bool = False) -> Path:
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not force:
        raise DataError(f"output directory {out} is not empty (use --force to overwrite)")
    for sub in ("images", "masks"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    has_fov = any(s.fov is not None for s in ds.samples)
    if has_fov:
        (out / "fov").mkdir(exist_ok=True)
    for s in ds.samples:
        Image.fromarray(_to_u8(s.image[0])).save(out / "images" / f"{s.name}.png")
        Image.fromarray((s.mask > 0).astype(np.uint8) * 255).save(out / "masks" / f"{s.name}.png")
        if s.fov is not None:
            Image.fromarray((s.fov > 0).astype(np.uint8) * 255).save(out / "fov" / f"{s.name}.png")
    manifest = dict(ds.meta)
    manifest["samples"] = [s.name for s in ds.samples]
    manifest["count"] = len(ds.samples)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def _index(d: Path) -> dict:
    if not d.is_dir():
        return {}
    return {p.stem: p for p in sorted(d.iterdir()) if p.suffix.lower() in IMAGE_EXTS}


def _read_grey(path: Path, green: bool) -> np.ndarray:
    arr = np.asarray(Image.open(path))
    if arr.ndim == 3:
        arr = arr[..., 1] if green else arr[..., 0]
    if arr.dtype != np.uint8:
        arr = np.clip(arr, 0, 255).astype(np.uint8)
    return arr


def _area_downsample(arr: np.ndarray, f: int) -> np.ndarray:
    H, W = arr.shape
    h, w = H // f, W // f
    return arr[: h * f, : w * f].reshape(h, f, w, f).mean(axis=(1, 3))


def ingest_fundus(directory, downsample: int = 1) -> SegDataset:
    """Load ``images/``, ``masks/`` and optional ``fov/`` paired by file stem.

    The green channel is used, scaled to [-0.5, 0.5]; ``downsample`` is an
    integer area-averaging factor (masks re-thresholded at 0.5).
    """
    d = Path(directory)
    if downsample < 1:
        raise DataError("downsample factor must be >= 1")
    images, masks, fovs = _index(d / "images"), _index(d / "masks"), _index(d / "fov")
    if not images:
        raise DataError(f"no images found under {d / 'images'}")
    unpaired = sorted(set(images) ^ set(masks))
    if unpaired:
        raise DataError(f"unpaired image/mask files: {unpaired[:10]}")
    if fovs and set(fovs) != set(images):
        raise DataError(f"fov files do not match images: {sorted(set(fovs) ^ set(images))[:10]}")
    samples = []
    for stem in sorted(images):
        img = _read_grey(images[stem], green=True).astype(np.float64) / 255.0 - 0.5
        mask = (_read_grey(masks[stem], green=False) > 127).astype(np.float64)
        fov = (_read_grey(fovs[stem], green=False) > 127).astype(np.float64) if fovs else None
        if mask.shape != img.shape or (fov is not None and fov.shape != img.shape):
            raise DataError(f"{stem}: size mismatch between image {img.shape} and mask/fov")
        if downsample > 1:
            img = _area_downsample(img, downsample)
            mask = _area_downsample(mask, downsample)
            fov = None if fov is None else _area_downsample(fov, downsample)
        m = (mask >= 0.5).astype(np.uint8)
        f = None if fov is None else (fov >= 0.5).astype(np.uint8)
        if f is not None:
            m &= f
        samples.append(Sample(img[None], m, f, stem))
    return SegDataset(samples, {"kind": "ingest", "source": str(d), "downsample": downsample})


def load_dataset(directory) -> SegDataset:
    """Read a dataset directory written by :func:`write_dataset` (or any compatible tree)."""
    d = Path(directory)
    ds = ingest_fundus(d, 1)
    mf = d / "manifest.json"
    if mf.exists():
        manifest = json.loads(mf.read_text())
        order = manifest.get("samples")
        if order:
            by = {s.name: s for s in ds.samples}
            ds.samples = [by[n] for n in order]
        ds.meta = {k: v for k, v in manifest.items() if k != "samples"}
    return ds


def batch_arrays(samples: Sequence[Sample], dtype) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    x = np.stack([s.image for s in samples]).astype(dtype)
    y = np.stack([s.mask for s in samples])[:, None].astype(dtype)
    fov = None
    if any(s.fov is not None for s in samples):
        fov = np.stack([s.fov if s.fov is not None else np.ones_like(s.mask) for s in samples])[:, None]
    return x, y, fov
