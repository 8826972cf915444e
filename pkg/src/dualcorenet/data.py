"""ROI extraction, flip augmentation, synthetic masses and dataset directories.

A dataset directory holds ``index.tsv`` (id, image, mask, label), 16-bit PGM
images and 8-bit {0, 255} PGM masks.  Processed ROIs may be cached as ``DCT1``
tensors under ``cache/``.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, ContractError, FormatError, SplitAccessError
from .fileio import load_tensor, read_image_pgm, read_mask_pgm, save_tensor, write_image_pgm, write_mask_pgm

CONTEXT_SCALE = 1.6


@dataclass
class AnnotatedImage:
    image: np.ndarray  # H x W in [0, 1]
    mask: np.ndarray   # H x W binary
    label: int
    id: str


@dataclass
class RoiSample:
    bbox_roi: np.ndarray     # b x b, bounding box resampled
    context_roi: np.ndarray  # S x S, 1.6x context box resampled
    mask_roi: np.ndarray     # M x M binary, mask within the bounding box
    label: int
    id: str

    def __post_init__(self):
        # Reductions over strided views round differently from contiguous copies,
        # which would make fresh and cached ROIs train to different bits.
        self.bbox_roi = np.ascontiguousarray(self.bbox_roi)
        self.context_roi = np.ascontiguousarray(self.context_roi)
        self.mask_roi = np.ascontiguousarray(self.mask_roi)


@dataclass
class DatasetSplit:
    """Train/test partition; the test half can be locked against reads."""

    train: list
    _test: list = field(repr=False)
    seed: int = 0
    _locked: bool = field(default=False, repr=False)

    @property
    def test(self) -> list:
        if self._locked:
            raise SplitAccessError("test split accessed while locked for training")
        return self._test

    @contextlib.contextmanager
    def locked_test(self):
        """Any read of ``.test`` inside the block raises :class:`SplitAccessError`."""
        old = self._locked
        self._locked = True
        try:
            yield self
        finally:
            self._locked = old


@dataclass
class DataConfig:
    split_ratio: float = 0.8
    augment: bool = True       # flip-augment the training half
    context_scale: float = CONTEXT_SCALE
    cache: bool = True         # keep extracted ROIs under <dataset>/cache
    negative_rois: int = 0     # mass-free crops per training image, segmentation phase only

    def __post_init__(self):
        if not 0 < self.split_ratio < 1:
            raise ConfigError(f"split_ratio must lie in (0, 1), got {self.split_ratio}")
        if self.context_scale < 1:
            raise ConfigError(f"context_scale must be >= 1, got {self.context_scale}")
        if self.negative_rois < 0:
            raise ConfigError(f"negative_rois must be >= 0, got {self.negative_rois}")


# -- geometry -------------------------------------------------------------------

def bounding_box(mask: np.ndarray) -> tuple[int, int, int, int]:
    """Tight box ``(r0, r1, c0, c1)`` of the foreground, half-open on the upper ends."""
    rows = np.flatnonzero(np.asarray(mask).any(axis=1))
    cols = np.flatnonzero(np.asarray(mask).any(axis=0))
    if rows.size == 0:
        raise ContractError("mask has no foreground pixels")
    return int(rows[0]), int(rows[-1]) + 1, int(cols[0]), int(cols[-1]) + 1


def context_box(box: tuple[int, int, int, int], scale: float = CONTEXT_SCALE) -> tuple[float, float, float, float]:
    """Same-centre box scaled by ``scale``; returned as ``(top, left, height, width)`` floats."""
    r0, r1, c0, c1 = box
    h, w = r1 - r0, c1 - c0
    return r0 + (h - scale * h) / 2, c0 + (w - scale * w) / 2, scale * h, scale * w


def _axis_samples(origin: int, offset: float, length: float, n_out: int, n_src: int):
    # origin is kept out of the float arithmetic so integer shifts of the box
    # shift the source indices without changing the interpolation weights
    s = offset + (np.arange(n_out) + 0.5) * (length / n_out) - 0.5
    base = np.floor(s)
    frac = s - base
    i0 = np.clip(origin + base.astype(int), 0, n_src - 1)
    i1 = np.clip(origin + base.astype(int) + 1, 0, n_src - 1)
    return i0, i1, frac


def resample_bilinear(image: np.ndarray, origin: tuple[int, int], offset: tuple[float, float],
                      size: tuple[float, float], out: int) -> np.ndarray:
    """Bilinear resampling of a (possibly out-of-bounds) box with edge replication."""
    image = np.asarray(image, dtype=np.float64)
    ri0, ri1, rf = _axis_samples(origin[0], offset[0], size[0], out, image.shape[0])
    ci0, ci1, cf = _axis_samples(origin[1], offset[1], size[1], out, image.shape[1])
    rows = image[ri0] * (1 - rf)[:, None] + image[ri1] * rf[:, None]
    return (rows[:, ci0] * (1 - cf)[None, :] + rows[:, ci1] * cf[None, :]).astype(np.float32)


def resample_nearest(mask: np.ndarray, origin: tuple[int, int], size: tuple[float, float], out: int) -> np.ndarray:
    mask = np.asarray(mask)
    ri = np.clip(origin[0] + np.floor((np.arange(out) + 0.5) * (size[0] / out)).astype(int), 0, mask.shape[0] - 1)
    ci = np.clip(origin[1] + np.floor((np.arange(out) + 0.5) * (size[1] / out)).astype(int), 0, mask.shape[1] - 1)
    return (mask[ri][:, ci] > 0).astype(np.float32)


def extract_rois(img: AnnotatedImage, bbox_size: int = 40, context_size: int = 224, mask_size: int = 224,
                 scale: float = CONTEXT_SCALE) -> RoiSample:
    """Crop the tight bounding box and the ``scale``-times context box around the mass."""
    box = bounding_box(img.mask)
    r0, r1, c0, c1 = box
    h, w = r1 - r0, c1 - c0
    bbox_roi = resample_bilinear(img.image, (r0, c0), (0.0, 0.0), (h, w), bbox_size)
    off_r, off_c = (h - scale * h) / 2, (w - scale * w) / 2
    context_roi = resample_bilinear(img.image, (r0, c0), (off_r, off_c), (scale * h, scale * w), context_size)
    mask_roi = resample_nearest(img.mask, (r0, c0), (h, w), mask_size)
    return RoiSample(bbox_roi, context_roi, mask_roi, int(img.label), img.id)


def roi_for_inference(image: np.ndarray, bbox_size: int, context_size: int,
                      scale: float = CONTEXT_SCALE, box: tuple[int, int, int, int] | None = None
                      ) -> tuple[np.ndarray, np.ndarray]:
    """Bounding-box and context crops without a mask.

    ``box`` is ``(r0, r1, c0, c1)``, half-open; by default the whole image is
    the bounding box.
    """
    h, w = image.shape
    r0, r1, c0, c1 = box if box is not None else (0, h, 0, w)
    if not (0 <= r0 < r1 <= h and 0 <= c0 < c1 <= w):
        raise ContractError(f"box {box} outside image of shape {image.shape}")
    bh, bw = r1 - r0, c1 - c0
    bbox = resample_bilinear(image, (r0, c0), (0.0, 0.0), (bh, bw), bbox_size)
    ctx = resample_bilinear(image, (r0, c0), ((bh - scale * bh) / 2, (bw - scale * bw) / 2),
                            (scale * bh, scale * bw), context_size)
    return bbox, ctx


def background_rois(img: AnnotatedImage, count: int, rng: np.random.Generator, bbox_size: int,
                    context_size: int, mask_size: int, scale: float = CONTEXT_SCALE,
                    attempts: int = 200) -> list[RoiSample]:
    """Up to ``count`` crops that miss the mass entirely, with empty masks.

    Box sides range from the mass box up to three times it, so the segmenter
    also sees wide mass-free fields.  Fewer crops are returned when the mass
    leaves no room.
    """
    r0, r1, c0, c1 = bounding_box(img.mask)
    rows, cols = img.image.shape
    out: list[RoiSample] = []
    for _ in range(attempts):
        if len(out) == count:
            break
        h = min(rows, int(round((r1 - r0) * rng.uniform(1.0, 3.0))))
        w = min(cols, int(round((c1 - c0) * rng.uniform(1.0, 3.0))))
        top, left = int(rng.integers(0, rows - h + 1)), int(rng.integers(0, cols - w + 1))
        if img.mask[top:top + h, left:left + w].any():
            continue
        bbox, ctx = roi_for_inference(img.image, bbox_size, context_size, scale, (top, top + h, left, left + w))
        empty = np.zeros((mask_size, mask_size), dtype=np.float32)
        out.append(RoiSample(bbox, ctx, empty, int(img.label), f"{img.id}.bg{len(out)}"))
    return out


def validate_roi(s: RoiSample, bbox_size: int, context_size: int, mask_size: int) -> None:
    if s.bbox_roi.shape != (bbox_size, bbox_size):
        raise ContractError(f"{s.id}: bbox_roi shape {s.bbox_roi.shape}")
    if s.context_roi.shape != (context_size, context_size):
        raise ContractError(f"{s.id}: context_roi shape {s.context_roi.shape}")
    if s.mask_roi.shape != (mask_size, mask_size):
        raise ContractError(f"{s.id}: mask_roi shape {s.mask_roi.shape}")
    if not np.isin(s.mask_roi, (0, 1)).all() or not s.mask_roi.any():
        raise ContractError(f"{s.id}: mask_roi must be binary and non-empty")
    if s.label not in (0, 1):
        raise ContractError(f"{s.id}: label {s.label}")


def augment_flips(s: RoiSample) -> list[RoiSample]:
    """Identity, horizontal, vertical and both flips, applied to every ROI alike."""
    out = []
    for suffix, axes in (("", ()), ("_h", (1,)), ("_v", (0,)), ("_hv", (0, 1))):
        f = (lambda a: np.flip(a, axes).copy()) if axes else (lambda a: a.copy())
        out.append(RoiSample(f(s.bbox_roi), f(s.context_roi), f(s.mask_roi), s.label, s.id + suffix))
    return out


# -- synthetic data ---------------------------------------------------------------

@dataclass
class SynthSpec:
    size: int = 96
    radius: tuple = (9.0, 16.0)
    contrast: tuple = (0.25, 0.4)
    softness: float = 1.2
    noise: float = 0.015
    star_lobes: tuple = (5, 8)
    star_amplitude: tuple = (0.3, 0.45)
    ellipse_aspect: tuple = (1.0, 1.5)


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    bg = np.full((size, size), rng.uniform(0.2, 0.35))
    for _ in range(4):
        fy, fx = rng.uniform(0.3, 2.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        bg += rng.uniform(0.02, 0.06) * np.cos(2 * np.pi * (fy * yy + fx * xx) + phase)
    return bg


def _quantize(image: np.ndarray) -> np.ndarray:
    # 16-bit levels so PGM round trips are exact
    return (np.rint(np.clip(image, 0, 1) * 65535) / 65535).astype(np.float32)


def synth_background(rng: np.random.Generator, spec: SynthSpec = SynthSpec()) -> np.ndarray:
    """A mass-free image: smooth background plus sensor noise."""
    img = _background(rng, spec.size) + rng.normal(0, spec.noise, (spec.size, spec.size))
    return _quantize(img)


def synth_image(rng: np.random.Generator, label: int, ident: str, spec: SynthSpec = SynthSpec()) -> AnnotatedImage:
    """One image with a smooth ellipse (label 0) or an irregular star (label 1)."""
    n = spec.size
    r = rng.uniform(*spec.radius)
    margin = 2.0
    cy, cx = rng.uniform(margin, n - margin, size=2)
    yy, xx = np.mgrid[0:n, 0:n].astype(float)
    dy, dx = yy - cy, xx - cx
    rho = np.hypot(dy, dx)
    theta = np.arctan2(dy, dx)
    if label == 1:
        lobes = int(rng.integers(spec.star_lobes[0], spec.star_lobes[1] + 1))
        amp = rng.uniform(*spec.star_amplitude)
        boundary = r * (1 + amp * np.cos(lobes * theta + rng.uniform(0, 2 * np.pi)))
    else:
        aspect = rng.uniform(*spec.ellipse_aspect)
        rot = rng.uniform(0, np.pi)
        a, b = r * np.sqrt(aspect), r / np.sqrt(aspect)
        ang = theta - rot
        boundary = a * b / np.sqrt((b * np.cos(ang)) ** 2 + (a * np.sin(ang)) ** 2)
    mask = (rho <= boundary).astype(np.float32)
    if not mask.any():
        mask[int(np.clip(round(cy), 0, n - 1)), int(np.clip(round(cx), 0, n - 1))] = 1
    profile = 1 / (1 + np.exp(-(boundary - rho) / spec.softness))
    img = _background(rng, n) + rng.uniform(*spec.contrast) * profile + rng.normal(0, spec.noise, (n, n))
    return AnnotatedImage(_quantize(img), mask, int(label), ident)


def synth_dataset(n: int, rng: np.random.Generator, spec: SynthSpec = SynthSpec()) -> list[AnnotatedImage]:
    """``n`` images with alternating labels so the classes stay balanced."""
    if n < 1:
        raise ContractError(f"dataset size must be >= 1, got {n}")
    width = max(4, len(str(n - 1)))
    return [synth_image(rng, i % 2, f"s{i:0{width}d}", spec) for i in range(n)]


def split_dataset(samples: Sequence, ratio: float, rng: np.random.Generator, seed: int = 0) -> DatasetSplit:
    """Shuffled, label-stratified cut of ``floor(ratio * n)`` items into the training half.

    Test places go to each label in proportion to its count (largest
    remainder), so a test half of two or more items holds both classes
    whenever both exist.  Both halves keep id order.
    """
    if not 0 < ratio < 1:
        raise ContractError(f"split ratio must lie in (0, 1), got {ratio}")
    ordered = sorted(samples, key=lambda s: s.id)
    n = len(ordered)
    n_test = n - int(math.floor(ratio * n + 1e-9))
    groups: dict[int, list[int]] = {}
    for i, s in enumerate(ordered):
        groups.setdefault(int(s.label), []).append(i)
    labels = sorted(groups)
    quota = {lab: n_test * len(groups[lab]) / n for lab in labels} if n else {}
    take = {lab: int(math.floor(q)) for lab, q in quota.items()}
    by_remainder = sorted(labels, key=lambda lab: (-(quota[lab] - take[lab]), lab))
    for lab in by_remainder[:n_test - sum(take.values())]:
        take[lab] += 1
    if n_test >= len(labels):
        # never leave a class out of the test half when there is room for it
        for lab in labels:
            if take[lab] == 0 and len(groups[lab]) > 1:
                donor = max(labels, key=lambda d: (take[d], -d))
                take[donor] -= 1
                take[lab] = 1
    test_idx = set()
    for lab in labels:
        members = groups[lab]
        perm = rng.permutation(len(members))
        test_idx.update(members[j] for j in perm[:take[lab]])
    train = [s for i, s in enumerate(ordered) if i not in test_idx]
    test = [s for i, s in enumerate(ordered) if i in test_idx]
    return DatasetSplit(train, test, seed)


# -- directories ------------------------------------------------------------------

INDEX_HEADER = ("id", "image", "mask", "label")


def save_dataset(root, images: Iterable[AnnotatedImage]) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    lines = ["\t".join(INDEX_HEADER)]
    for im in images:
        img_rel, mask_rel = f"images/{im.id}.pgm", f"masks/{im.id}.pgm"
        write_image_pgm(root / img_rel, im.image)
        write_mask_pgm(root / mask_rel, im.mask)
        lines.append(f"{im.id}\t{img_rel}\t{mask_rel}\t{int(im.label)}")
    (root / "index.tsv").write_text("\n".join(lines) + "\n")


def read_index(root) -> list[tuple[str, str, str, int]]:
    root = Path(root)
    path = root / "index.tsv"
    if not path.is_file():
        raise FileNotFoundError(f"dataset index not found: {path}")
    rows = []
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if tuple(parts) == INDEX_HEADER:
            continue
        if len(parts) != 4:
            raise FormatError(f"{path}:{lineno}: expected 4 tab-separated fields, got {len(parts)}")
        rows.append((parts[0], parts[1], parts[2], int(parts[3])))
    return rows


def load_dataset(root, ids=None) -> list[AnnotatedImage]:
    """Read indexed images, restricted to ``ids`` when given."""
    root = Path(root)
    out = []
    for ident, img_rel, mask_rel, label in read_index(root):
        if ids is not None and ident not in ids:
            continue
        for rel in (img_rel, mask_rel):
            if not (root / rel).is_file():
                raise FileNotFoundError(f"missing file for {ident}: {root / rel}")
        out.append(AnnotatedImage(read_image_pgm(root / img_rel), read_mask_pgm(root / mask_rel), label, ident))
    return out


def load_rois(root, bbox_size: int, context_size: int, mask_size: int, use_cache: bool = True,
              scale: float = CONTEXT_SCALE) -> list[RoiSample]:
    """Extract ROIs for every indexed image, reading/writing ``cache/`` tensors."""
    root = Path(root)
    cache = root / "cache" / f"b{bbox_size}_c{context_size}_m{mask_size}_s{scale:g}"
    out = []
    images = None
    for ident, _, _, label in read_index(root):
        files = [cache / f"{ident}.{part}.dct" for part in ("bbox", "context", "mask")]
        if use_cache and all(f.is_file() for f in files):
            bbox, ctx, mask = (load_tensor(f) for f in files)
            out.append(RoiSample(bbox, ctx, mask, label, ident))
            continue
        if images is None:
            images = {im.id: im for im in load_dataset(root)}
        s = extract_rois(images[ident], bbox_size, context_size, mask_size, scale)
        if use_cache:
            cache.mkdir(parents=True, exist_ok=True)
            for f, arr in zip(files, (s.bbox_roi, s.context_roi, s.mask_roi)):
                save_tensor(f, arr)
        out.append(s)
    return out
