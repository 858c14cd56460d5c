"""Procedural "industrial" textures and cut-paste anomaly simulation.

Pixels are generated directly on the 8-bit grid (``k / 255``) so that the PNG
files written by :func:`build_manifest` round-trip losslessly.
"""

from __future__ import annotations

import colorsys
import dataclasses
import json
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np
from PIL import Image

from . import CODE_VERSION
from .config import ConfigError, DataConfig

GENERATOR_VERSION = "synth-1"

NORMAL = "normal"
ABNORMAL = "abnormal"

# base hue, secondary hue offset
_FAMILIES = {
    "stripes": (0.58, 0.08),
    "grid": (0.08, 0.50),
    "blobs": (0.33, 0.20),
    "rings": (0.83, 0.12),
}


@dataclass
class ImageSample:
    pixels: np.ndarray  # H x W x C, float64 in [0, 1]
    mask: np.ndarray  # H x W, uint8 in {0, 1}
    label: str
    category: str
    split: str
    seed: int
    index: int = 0
    sample_id: str = ""

    @property
    def is_abnormal(self) -> bool:
        return self.label == ABNORMAL

    @property
    def target(self) -> int:
        return int(self.label == ABNORMAL)


@dataclass(frozen=True)
class PasteBox:
    src_y: int
    src_x: int
    dst_y: int
    dst_x: int
    h: int
    w: int


def category_key(category: str) -> int:
    return zlib.crc32(category.encode())


def sample_seed(global_seed: int, category: str, index: int, stream: int = 0) -> int:
    """Independent per-sample seed derived from (global_seed, category, index)."""
    ss = np.random.SeedSequence([global_seed, category_key(category), index, stream])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def _quantize(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


def _palette(base_hue: float, offset: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    hue = (base_hue + rng.uniform(-0.04, 0.04)) % 1.0
    c1 = np.array(colorsys.hsv_to_rgb(hue, rng.uniform(0.55, 0.75), rng.uniform(0.75, 0.9)))
    c2 = np.array(colorsys.hsv_to_rgb((hue + offset) % 1.0, rng.uniform(0.35, 0.55), rng.uniform(0.25, 0.4)))
    return c1, c2


def _pattern(category: str, size: int, rng: np.random.Generator) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    if category == "stripes":
        theta = np.deg2rad(30.0 + rng.uniform(-8, 8))
        freq = rng.uniform(4.5, 5.5)
        phase = rng.uniform(0, 2 * np.pi)
        t = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) + phase)
        return 0.5 + 0.5 * t
    if category == "grid":
        period = rng.uniform(0.17, 0.2)
        oy, ox = rng.uniform(0, period, size=2)
        dy = np.abs(((yy - oy) / period) % 1.0 - 0.5)
        dx = np.abs(((xx - ox) / period) % 1.0 - 0.5)
        return ((dy > 0.38) | (dx > 0.38)).astype(np.float64)
    if category == "blobs":
        out = np.zeros((size, size))
        for _ in range(7):
            cy, cx = rng.uniform(0, 1, size=2)
            s = rng.uniform(0.06, 0.1)
            # toroidal distance keeps the texture stationary
            ddy = np.minimum(np.abs(yy - cy), 1 - np.abs(yy - cy))
            ddx = np.minimum(np.abs(xx - cx), 1 - np.abs(xx - cx))
            out += np.exp(-(ddy**2 + ddx**2) / (2 * s * s))
        return np.clip(out, 0, 1)
    if category == "rings":
        cy, cx = 0.5 + rng.uniform(-0.1, 0.1, size=2)
        r = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
        period = rng.uniform(0.11, 0.13)
        return 0.5 + 0.5 * np.cos(2 * np.pi * r / period + rng.uniform(0, 2 * np.pi))
    raise ConfigError(f"unknown category {category!r}; built-in families are {sorted(_FAMILIES)}")


def generate_normal(
    category: str,
    index: int,
    seed: int,
    size: int = 64,
    split: str = "train",
) -> ImageSample:
    """Deterministic normal texture for ``(category, index, seed)``."""
    if category not in _FAMILIES:
        raise ConfigError(f"unknown category {category!r}; built-in families are {sorted(_FAMILIES)}")
    if index < 0:
        raise ValueError("index must be >= 0")
    s = sample_seed(seed, category, index)
    rng = np.random.default_rng(s)
    c1, c2 = _palette(*_FAMILIES[category], rng)
    t = _pattern(category, size, rng)[..., None]
    img = t * c1 + (1 - t) * c2
    img = img + rng.normal(0.0, 0.02, size=img.shape)
    return ImageSample(
        pixels=_quantize(img),
        mask=np.zeros((size, size), dtype=np.uint8),
        label=NORMAL,
        category=category,
        split=split,
        seed=s,
        index=index,
        sample_id=f"{category}/{split}/{index:05d}",
    )


def sample_boxes(
    shape: tuple[int, int],
    n_regions: int,
    area_frac_range: tuple[float, float],
    rng: np.random.Generator,
) -> list[PasteBox]:
    """Random rectangles; each covers at most ``hi`` of the image area."""
    H, W = shape
    lo, hi = area_frac_range
    boxes = []
    for _ in range(n_regions):
        area = rng.uniform(lo, hi) * H * W
        aspect = np.exp(rng.uniform(np.log(0.5), np.log(2.0)))
        h = int(min(H, max(1, np.floor(np.sqrt(area * aspect)))))
        w = int(min(W, max(1, np.floor(area / h))))
        sy, dy = rng.integers(0, H - h + 1, size=2)
        sx, dx = rng.integers(0, W - w + 1, size=2)
        boxes.append(PasteBox(int(sy), int(sx), int(dy), int(dx), h, w))
    return boxes


def paste_regions(source: ImageSample, target: ImageSample, boxes: Iterable[PasteBox]) -> ImageSample:
    """Copy each box from ``source`` into ``target``; the mask records the paste geometry."""
    if source.pixels.shape != target.pixels.shape:
        raise ValueError(f"source {source.pixels.shape} and target {target.pixels.shape} differ in size")
    pixels = target.pixels.copy()
    mask = target.mask.copy()
    for b in boxes:
        pixels[b.dst_y : b.dst_y + b.h, b.dst_x : b.dst_x + b.w] = source.pixels[
            b.src_y : b.src_y + b.h, b.src_x : b.src_x + b.w
        ]
        mask[b.dst_y : b.dst_y + b.h, b.dst_x : b.dst_x + b.w] = 1
    label = ABNORMAL if mask.any() else NORMAL
    return replace(target, pixels=pixels, mask=mask, label=label)


def cut_paste(
    source: ImageSample,
    target: ImageSample,
    n_regions: int,
    area_frac_range: tuple[float, float] = (0.01, 0.05),
    seed: int = 0,
) -> ImageSample:
    """Paste ``n_regions`` random rectangles from ``source`` onto random spots of ``target``."""
    if source.pixels.shape != target.pixels.shape:
        raise ValueError(f"source {source.pixels.shape} and target {target.pixels.shape} differ in size")
    if n_regions < 0:
        raise ValueError("n_regions must be >= 0")
    lo, hi = area_frac_range
    if not 0 < lo <= hi < 0.5:
        raise ValueError(f"area_frac_range must satisfy 0 < lo <= hi < 0.5, got {area_frac_range}")
    rng = np.random.default_rng(seed)
    boxes = sample_boxes(target.mask.shape, n_regions, area_frac_range, rng)
    return paste_regions(source, target, boxes)


def pick_source_category(category: str, categories: tuple[str, ...], policy: str, rng: np.random.Generator) -> str:
    if policy == "same":
        return category
    pool = list(categories) if policy == "any" else [c for c in categories if c != category]
    return pool[int(rng.integers(len(pool)))]


def simulate_anomaly(target: ImageSample, source: ImageSample, cfg: DataConfig, seed: int) -> ImageSample:
    """Cut-paste anomaly with a region count drawn from ``cfg.n_regions``."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(cfg.n_regions[0], cfg.n_regions[1] + 1))
    return cut_paste(source, target, n, cfg.area_frac_range, seed=int(rng.integers(2**31)))


# -- manifest ---------------------------------------------------------------


@dataclass
class DatasetManifest:
    root: Path
    samples: list[dict]
    categories: list[str]
    global_seed: int
    generator_version: str = GENERATOR_VERSION
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {
            "code_version": CODE_VERSION,
            "generator_version": self.generator_version,
            "global_seed": self.global_seed,
            "categories": self.categories,
            "config": self.config,
            "samples": self.samples,
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    def select(self, split: str | None = None, category: str | None = None, label: str | None = None) -> list[dict]:
        return [
            s
            for s in self.samples
            if (split is None or s["split"] == split)
            and (category is None or s["category"] == category)
            and (label is None or s["label"] == label)
        ]

    def load(self, record: dict) -> ImageSample:
        return load_sample(self.root, record)

    def data_config(self) -> DataConfig:
        cfg = dict(self.config)
        for k, v in cfg.items():
            if isinstance(v, list):
                cfg[k] = tuple(v)
        return DataConfig(**cfg)


def save_png(path: Path, array: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(array).save(path, format="PNG")


def load_sample(root: Path, record: dict) -> ImageSample:
    pixels = np.asarray(Image.open(root / record["image"]), dtype=np.float64) / 255.0
    mask = (np.asarray(Image.open(root / record["mask"])) > 127).astype(np.uint8)
    return ImageSample(
        pixels=pixels,
        mask=mask,
        label=record["label"],
        category=record["category"],
        split=record["split"],
        seed=record["seed"],
        index=record["index"],
        sample_id=record["id"],
    )


def load_image(path: str | Path) -> np.ndarray:
    img = Image.open(path).convert("RGB")
    return np.asarray(img, dtype=np.float64) / 255.0


def _write(root: Path, sample: ImageSample) -> dict:
    rel_img = Path(sample.category) / sample.split / f"{sample.index:05d}_{sample.label}.png"
    rel_mask = Path(sample.category) / sample.split / f"{sample.index:05d}_{sample.label}_mask.png"
    save_png(root / rel_img, np.round(sample.pixels * 255).astype(np.uint8))
    save_png(root / rel_mask, (sample.mask * 255).astype(np.uint8))
    return {
        "id": sample.sample_id,
        "category": sample.category,
        "split": sample.split,
        "label": sample.label,
        "index": sample.index,
        "seed": sample.seed,
        "image": rel_img.as_posix(),
        "mask": rel_mask.as_posix(),
        "mask_area": float(sample.mask.mean()),
    }


def iter_manifest_samples(cfg: DataConfig) -> Iterable[ImageSample]:
    """Train normals, then test normals, then test anomalies, per category."""
    size = cfg.image_size
    for category in cfg.categories:
        idx = 0
        for _ in range(cfg.n_train):
            yield generate_normal(category, idx, cfg.global_seed, size=size, split="train")
            idx += 1
        for _ in range(cfg.n_test_normal):
            yield generate_normal(category, idx, cfg.global_seed, size=size, split="test")
            idx += 1
        for _ in range(cfg.n_test_abnormal):
            base = generate_normal(category, idx, cfg.global_seed, size=size, split="test")
            s = sample_seed(cfg.global_seed, category, idx, stream=1)
            rng = np.random.default_rng(s)
            # sources are unseen normals, never train images
            src_cat = pick_source_category(category, cfg.categories, cfg.source_policy, rng)
            src = generate_normal(src_cat, 1_000_000 + idx, cfg.global_seed, size=size, split="source")
            abn = simulate_anomaly(base, src, cfg, int(rng.integers(2**31)))
            if not abn.mask.any():
                # n_regions range allows 0: force at least one region so counts stay exact
                abn = cut_paste(abn, abn, 1, cfg.area_frac_range, seed=s)
            yield replace(abn, sample_id=f"{category}/test/{idx:05d}")
            idx += 1


def build_manifest(cfg: DataConfig, out_dir: str | Path) -> DatasetManifest:
    """Generate every image/mask file under ``out_dir`` and write ``manifest.json``."""
    cfg.validate()
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    records = [_write(root, s) for s in iter_manifest_samples(cfg)]
    manifest = DatasetManifest(
        root=root,
        samples=records,
        categories=list(cfg.categories),
        global_seed=cfg.global_seed,
        config=json.loads(json.dumps(dataclasses.asdict(cfg))),
    )
    (root / "manifest.json").write_text(manifest.to_json())
    return manifest


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    doc = json.loads(path.read_text())
    return DatasetManifest(
        root=path.parent,
        samples=doc["samples"],
        categories=doc["categories"],
        global_seed=doc["global_seed"],
        generator_version=doc["generator_version"],
        config=doc.get("config", {}),
    )
