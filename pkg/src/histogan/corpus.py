"""Corpus handling: slide ingestion, tissue segmentation, patch extraction,
labeled pair construction and the deterministic synthetic desk corpus.

All operations are pure functions of their inputs plus an explicit seed.
Images are float arrays of shape (H, W, 3) with values in [0, 1].
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage
from skimage.color import rgb2hsv, hsv2rgb

from .errors import ConfigurationError, InvalidInputError


class PairLevel(str, Enum):
    SIM = "SIM"
    DISSIM_A = "DISSIM_A"  # different slides, same class
    DISSIM_B = "DISSIM_B"  # different classes


@dataclass
class SlideImage:
    """A whole-slide-like RGB image in [0, 1]."""

    pixels: np.ndarray
    slide_id: str
    class_label: str

    def __post_init__(self):
        p = np.asarray(self.pixels, dtype=np.float32)
        if p.ndim != 3 or p.shape[2] != 3:
            raise InvalidInputError(f"slide must be HxWx3, got {p.shape}")
        if p.size == 0:
            raise InvalidInputError("slide has zero area")
        if p.min() < 0.0 or p.max() > 1.0:
            raise InvalidInputError("slide pixel values must lie in [0, 1]")
        self.pixels = p


@dataclass
class Patch:
    """A fixed-size crop of a slide; grid_pos is the (row, col) pixel offset."""

    pixels: np.ndarray
    source_slide: str
    grid_pos: tuple[int, int]
    class_label: str

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float32)


@dataclass
class PairSample:
    a: Patch
    b: Patch
    label: int
    level: PairLevel

    def __post_init__(self):
        if self.label not in (0, 1):
            raise InvalidInputError("pair label must be 0 or 1")
        if (self.level is PairLevel.SIM) != (self.label == 1):
            raise InvalidInputError("level SIM iff label == 1")


@dataclass
class TissueMask:
    mask: np.ndarray
    coverage_fraction: float

    @classmethod
    def from_array(cls, mask: np.ndarray) -> "TissueMask":
        mask = np.asarray(mask, dtype=bool)
        return cls(mask=mask, coverage_fraction=float(mask.mean()))


@dataclass
class AugConfig:
    """Augmentation ranges for similar-pair construction.

    Gaussian noise is truncated at +-4 sigma so the perturbation of a
    single pixel is bounded by brightness + 4*noise_sigma (before the
    final clip to [0, 1]).
    """

    brightness: float = 0.2
    contrast: tuple[float, float] = (0.8, 1.2)
    noise_sigma: float = 0.02


def segment_tissue(image: SlideImage, sat_threshold: float = 0.08,
                   min_region_px: int = 256) -> TissueMask:
    """Segment tissue foreground by HSV saturation thresholding.

    Near-white background has saturation ~0 and is excluded; connected
    foreground regions smaller than ``min_region_px`` are dropped.
    """
    if not 0.0 < sat_threshold < 1.0:
        raise InvalidInputError("sat_threshold must lie in (0, 1)")
    sat = rgb2hsv(image.pixels)[..., 1]
    mask = sat > sat_threshold
    if min_region_px > 1 and mask.any():
        labels, n = ndimage.label(mask)
        sizes = ndimage.sum_labels(mask, labels, index=np.arange(1, n + 1))
        keep = np.flatnonzero(sizes >= min_region_px) + 1
        mask = np.isin(labels, keep)
    return TissueMask.from_array(mask)


def extract_patches(image: SlideImage, mask: TissueMask, size: int = 64,
                    stride: int = 64, min_tissue: float = 0.5) -> list[Patch]:
    """Slide a window in row-major order and keep windows with enough tissue."""
    h, w = image.pixels.shape[:2]
    if size > min(h, w):
        raise InvalidInputError(f"patch size {size} exceeds slide {h}x{w}")
    if stride < 1:
        raise InvalidInputError("stride must be >= 1")
    if not 0.0 <= min_tissue <= 1.0:
        raise InvalidInputError("min_tissue must lie in [0, 1]")
    patches = []
    for r in range(0, h - size + 1, stride):
        for c in range(0, w - size + 1, stride):
            window = mask.mask[r:r + size, c:c + size]
            if window.mean() >= min_tissue:
                patches.append(Patch(
                    pixels=image.pixels[r:r + size, c:c + size].copy(),
                    source_slide=image.slide_id,
                    grid_pos=(r, c),
                    class_label=image.class_label,
                ))
    return patches


def augment_patch(pixels: np.ndarray, aug: AugConfig, rng: np.random.Generator) -> np.ndarray:
    """One augmented view: contrast about mid-gray, brightness shift, noise."""
    c = rng.uniform(*aug.contrast)
    delta = rng.uniform(-aug.brightness, aug.brightness)
    out = (pixels - 0.5) * c + 0.5 + delta
    if aug.noise_sigma > 0:
        noise = rng.normal(0.0, aug.noise_sigma, size=pixels.shape)
        np.clip(noise, -4 * aug.noise_sigma, 4 * aug.noise_sigma, out=noise)
        out = out + noise
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def build_pairs(patches: list[Patch], n_per_level: int,
                aug: AugConfig | None = None, seed: int = 0) -> list[PairSample]:
    """Build a labeled pair dataset with one similarity and two
    dissimilarity levels.

    SIM pairs are (patch, augmented view of the same patch); DISSIM_A pairs
    come from different slides of the same class; DISSIM_B pairs cross
    classes. Exactly ``n_per_level`` pairs per level, deterministic under
    ``seed``.
    """
    aug = aug or AugConfig()
    rng = np.random.default_rng(seed)
    by_slide: dict[str, list[Patch]] = {}
    by_class: dict[str, list[str]] = {}
    for p in patches:
        by_slide.setdefault(p.source_slide, []).append(p)
        slides = by_class.setdefault(p.class_label, [])
        if p.source_slide not in slides:
            slides.append(p.source_slide)

    if not patches:
        raise ConfigurationError("no patches supplied")
    classes = sorted(by_class)
    multi_slide_classes = [c for c in classes if len(by_class[c]) >= 2]
    if not multi_slide_classes:
        raise ConfigurationError(
            "DISSIM_A unconstructible: no class has two or more slides")
    if len(classes) < 2:
        raise ConfigurationError(
            "DISSIM_B unconstructible: corpus has a single class")

    def pick(slide_id: str) -> Patch:
        group = by_slide[slide_id]
        return group[rng.integers(len(group))]

    pairs: list[PairSample] = []
    for _ in range(n_per_level):
        base = patches[rng.integers(len(patches))]
        view = Patch(pixels=augment_patch(base.pixels, aug, rng),
                     source_slide=base.source_slide, grid_pos=base.grid_pos,
                     class_label=base.class_label)
        pairs.append(PairSample(a=base, b=view, label=1, level=PairLevel.SIM))
    for _ in range(n_per_level):
        cls = multi_slide_classes[rng.integers(len(multi_slide_classes))]
        s1, s2 = rng.choice(len(by_class[cls]), size=2, replace=False)
        pairs.append(PairSample(a=pick(by_class[cls][s1]),
                                b=pick(by_class[cls][s2]),
                                label=0, level=PairLevel.DISSIM_A))
    for _ in range(n_per_level):
        c1, c2 = rng.choice(len(classes), size=2, replace=False)
        sa = by_class[classes[c1]]
        sb = by_class[classes[c2]]
        pairs.append(PairSample(a=pick(sa[rng.integers(len(sa))]),
                                b=pick(sb[rng.integers(len(sb))]),
                                label=0, level=PairLevel.DISSIM_B))
    return pairs


# ---------------------------------------------------------------------------
# Synthetic desk corpus
# ---------------------------------------------------------------------------

@dataclass
class SynthConfig:
    slide_size: int = 256
    margin: int = 24
    base_hue: float = 0.12
    hue_step: float = 0.22  # per-class mean-hue separation
    blobs_min: int = 25
    blobs_max: int = 40
    radius_min: float = 12.0
    radius_max: float = 30.0
    class_names: tuple[str, ...] = ("benign", "invasive", "insitu", "normal")


def _render_slide(rng: np.random.Generator, cfg: SynthConfig, hue: float) -> np.ndarray:
    s = cfg.slide_size
    canvas = np.ones((s, s, 3), dtype=np.float64)
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    n_blobs = int(rng.integers(cfg.blobs_min, cfg.blobs_max + 1))
    lo, hi = cfg.margin + cfg.radius_min, s - cfg.margin - cfg.radius_min
    for _ in range(n_blobs):
        cy, cx = rng.uniform(lo, hi, size=2)
        r = rng.uniform(cfg.radius_min, cfg.radius_max)
        h = (hue + rng.uniform(-0.03, 0.03)) % 1.0
        sat = rng.uniform(0.55, 0.9)
        val = rng.uniform(0.45, 0.85)
        color = hsv2rgb(np.array([[[h, sat, val]]]))[0, 0]
        alpha = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * (r / 2) ** 2))
        alpha = np.where(alpha < 0.05, 0.0, alpha)
        canvas = canvas * (1 - alpha[..., None]) + color[None, None, :] * alpha[..., None]
    # hard white margin so segmentation always sees background
    m = cfg.margin
    canvas[:m] = canvas[-m:] = 1.0
    canvas[:, :m] = canvas[:, -m:] = 1.0
    # snap to the uint8 grid so PNG round-trips are lossless
    return (np.round(canvas * 255.0) / 255.0).astype(np.float32)


def synth_corpus(n_slides: int, classes: int, seed: int = 0,
                 cfg: SynthConfig | None = None) -> list[SlideImage]:
    """Generate a deterministic corpus of blob-textured pseudo-slides.

    Class identity is carried by mean blob hue (separated by
    ``cfg.hue_step``); slide identity by blob layout. Slides are evenly
    assigned to classes round-robin.
    """
    if n_slides < 2 or classes < 2:
        raise InvalidInputError("need n_slides >= 2 and classes >= 2")
    cfg = cfg or SynthConfig()
    if classes > len(cfg.class_names):
        raise InvalidInputError(f"at most {len(cfg.class_names)} classes supported")
    root = np.random.SeedSequence(seed)
    slides = []
    for i, child in enumerate(root.spawn(n_slides)):
        cls = i % classes
        rng = np.random.default_rng(child)
        hue = (cfg.base_hue + cls * cfg.hue_step) % 1.0
        slides.append(SlideImage(
            pixels=_render_slide(rng, cfg, hue),
            slide_id=f"slide_{i:03d}",
            class_label=cfg.class_names[cls],
        ))
    return slides


# ---------------------------------------------------------------------------
# Directory layout IO
# ---------------------------------------------------------------------------

def save_image(pixels: np.ndarray, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.round(np.asarray(pixels, dtype=np.float64) * 255.0).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def save_corpus(slides: list[SlideImage], root: str | Path) -> None:
    for s in slides:
        save_image(s.pixels, Path(root) / "slides" / s.class_label / f"{s.slide_id}.png")


def load_corpus(root: str | Path) -> list[SlideImage]:
    slides = []
    base = Path(root) / "slides"
    if not base.is_dir():
        raise InvalidInputError(f"no slides directory under {root}")
    for cls_dir in sorted(base.iterdir()):
        if not cls_dir.is_dir():
            continue
        for f in sorted(cls_dir.glob("*.png")):
            slides.append(SlideImage(pixels=load_image(f), slide_id=f.stem,
                                     class_label=cls_dir.name))
    return slides


def save_patches(patches: list[Patch], root: str | Path) -> list[Path]:
    paths = []
    for p in patches:
        r, c = p.grid_pos
        path = Path(root) / "patches" / p.class_label / p.source_slide / f"{r}_{c}.png"
        save_image(p.pixels, path)
        paths.append(path)
    return paths


def load_patches(root: str | Path) -> list[Patch]:
    patches = []
    base = Path(root) / "patches"
    if not base.is_dir():
        raise InvalidInputError(f"no patches directory under {root}")
    for cls_dir in sorted(base.iterdir()):
        for slide_dir in sorted(d for d in cls_dir.iterdir() if d.is_dir()):
            for f in sorted(slide_dir.glob("*.png")):
                r, c = f.stem.split("_")
                patches.append(Patch(pixels=load_image(f), source_slide=slide_dir.name,
                                     grid_pos=(int(r), int(c)), class_label=cls_dir.name))
    return patches


def write_pair_manifest(pairs: list[PairSample], root: str | Path, seed: int) -> Path:
    """Persist pair members as PNGs plus a JSONL manifest, one pair per line."""
    root = Path(root)
    manifest = root / "pairs" / "manifest.jsonl"
    manifest.parent.mkdir(parents=True, exist_ok=True)
    with open(manifest, "w") as fh:
        for i, pair in enumerate(pairs):
            rel_a = f"pairs/{pair.level.value}/{i:05d}_a.png"
            rel_b = f"pairs/{pair.level.value}/{i:05d}_b.png"
            save_image(pair.a.pixels, root / rel_a)
            save_image(pair.b.pixels, root / rel_b)
            fh.write(json.dumps({"a": rel_a, "b": rel_b, "label": pair.label,
                                 "level": pair.level.value, "seed": seed}) + "\n")
    return manifest


def read_pair_manifest(root: str | Path) -> list[PairSample]:
    root = Path(root)
    manifest = root / "pairs" / "manifest.jsonl"
    if not manifest.is_file():
        raise InvalidInputError(f"no pair manifest under {root}")
    pairs = []
    with open(manifest) as fh:
        for line in fh:
            rec = json.loads(line)
            mk = lambda rel: Patch(pixels=load_image(root / rel), source_slide="",
                                   grid_pos=(0, 0), class_label="")
            pairs.append(PairSample(a=mk(rec["a"]), b=mk(rec["b"]),
                                    label=rec["label"], level=PairLevel(rec["level"])))
    return pairs


def subsample_patches(patches: list[Patch], n: int, seed: int) -> list[Patch]:
    """Uniform random subsample without replacement, deterministic under seed."""
    if n >= len(patches):
        return list(patches)
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(patches), size=n, replace=False)
    return [patches[i] for i in sorted(idx)]
