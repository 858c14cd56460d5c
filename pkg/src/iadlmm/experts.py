"""Vision experts: anything that turns an image into an anomaly map.

Three stand-ins share one call signature, ``expert(sample) -> AnomalyMap``:

* :class:`OracleExpert` corrupts the ground-truth mask (blur, noise, spurious
  regions) so expert quality can be dialled as an experiment axis.
* :class:`PatchSimExpert` is a few-shot memory-bank expert: one minus the best
  cosine match of each test patch against patches of N normal references.
* :class:`NullExpert` returns a constant 0.5 map (no information).
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import gaussian_filter

from .synth import NORMAL, ImageSample, sample_boxes

__all__ = [
    "AnomalyMap",
    "FewShotMemory",
    "Expert",
    "OracleExpert",
    "MixedOracleExpert",
    "NullExpert",
    "PatchSimExpert",
    "oracle_expert",
    "build_memory",
    "patch_scores",
    "patch_similarity_expert",
    "binarize",
    "resize_map",
]


@dataclass
class AnomalyMap:
    values: np.ndarray  # H x W, float64 in [0, 1]
    image_score: float
    expert_id: str

    @classmethod
    def from_values(cls, values: np.ndarray, expert_id: str) -> "AnomalyMap":
        values = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
        return cls(values=values, image_score=float(values.max()), expert_id=expert_id)


class Expert(Protocol):
    expert_id: str

    def __call__(self, sample: ImageSample) -> AnomalyMap: ...


def _mix_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(1)[0])


def oracle_expert(
    sample: ImageSample,
    blur_radius: float = 0.0,
    noise_sigma: float = 0.0,
    fp_blobs: int = 0,
    seed: int = 0,
    area_frac_range: tuple[float, float] = (0.01, 0.05),
) -> AnomalyMap:
    """Corrupted ground truth: ``clamp(blur(mask + spurious) + noise, 0, 1)``.

    ``fp_blobs`` is the maximum number of spurious regions; the actual count is
    drawn uniformly from ``0..fp_blobs`` per call, so a normal image may or may
    not carry false detections. Spurious regions are rectangles drawn from the
    same size distribution as real pastes and go through the same blur, which
    makes them indistinguishable from true detections by shape alone.
    """
    if blur_radius < 0 or noise_sigma < 0 or fp_blobs < 0:
        raise ValueError("blur_radius, noise_sigma and fp_blobs must be non-negative")
    rng = np.random.default_rng(seed)
    m = sample.mask.astype(np.float64)
    if fp_blobs:
        count = int(rng.integers(0, fp_blobs + 1))
        for b in sample_boxes(m.shape, count, area_frac_range, rng):
            m[b.dst_y : b.dst_y + b.h, b.dst_x : b.dst_x + b.w] = 1.0
    if blur_radius > 0:
        m = gaussian_filter(m, sigma=blur_radius, mode="constant")
    if noise_sigma > 0:
        m = m + rng.normal(0.0, noise_sigma, size=m.shape)
    return AnomalyMap.from_values(m, "oracle")


@dataclass(frozen=True)
class OracleExpert:
    blur_radius: float = 0.0
    noise_sigma: float = 0.0
    fp_blobs: int = 0
    seed: int = 0
    area_frac_range: tuple[float, float] = (0.01, 0.05)
    expert_id: str = "oracle"

    def __call__(self, sample: ImageSample) -> AnomalyMap:
        out = oracle_expert(
            sample,
            self.blur_radius,
            self.noise_sigma,
            self.fp_blobs,
            seed=_mix_seed(self.seed, sample.seed),
            area_frac_range=self.area_frac_range,
        )
        return replace(out, expert_id=self.expert_id)


@dataclass(frozen=True)
class MixedOracleExpert:
    """Oracle whose corruption is drawn per sample from ``settings``.

    Each setting is ``(blur_radius, noise_sigma, fp_blobs)``; the draw depends
    only on ``seed`` and the sample seed, so it is reproducible.
    """

    settings: tuple[tuple[float, float, int], ...]
    seed: int = 0
    area_frac_range: tuple[float, float] = (0.01, 0.05)
    expert_id: str = "oracle_mix"

    def __call__(self, sample: ImageSample) -> AnomalyMap:
        s = _mix_seed(self.seed, sample.seed)
        blur, noise, blobs = self.settings[int(np.random.default_rng([s, 1]).integers(len(self.settings)))]
        out = oracle_expert(sample, blur, noise, int(blobs), seed=s, area_frac_range=self.area_frac_range)
        return replace(out, expert_id=self.expert_id)


@dataclass(frozen=True)
class NullExpert:
    value: float = 0.5
    expert_id: str = "null"

    def __call__(self, sample: ImageSample) -> AnomalyMap:
        return AnomalyMap.from_values(np.full(sample.mask.shape, self.value), self.expert_id)


def binarize(amap: AnomalyMap, threshold: float) -> AnomalyMap:
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    values = (amap.values >= threshold).astype(np.float64)
    return AnomalyMap(values=values, image_score=float(values.max()), expert_id=amap.expert_id)


def resize_map(values: np.ndarray | torch.Tensor, size: int) -> torch.Tensor:
    """Bilinear resize of ``(H, W)`` or ``(B, H, W)`` maps to ``size x size``."""
    t = torch.as_tensor(values)
    squeeze = t.dim() == 2
    if squeeze:
        t = t[None]
    if not t.is_floating_point():
        t = t.double()
    out = F.interpolate(t[:, None], size=(size, size), mode="bilinear", align_corners=False)[:, 0]
    return out[0] if squeeze else out


# -- few-shot patch similarity ------------------------------------------------

Embedder = Callable[[np.ndarray], np.ndarray]
"""Maps an ``H x W x C`` image to ``(n_patches, D)`` patch features."""


@dataclass
class FewShotMemory:
    features: np.ndarray  # (N * n_patches, D), L2-normalised rows
    grid: tuple[int, int]
    patch_size: int
    n_refs: int

    def __post_init__(self) -> None:
        if self.features.ndim != 2 or len(self.features) == 0:
            raise ValueError("memory needs a non-empty (n, D) feature matrix")
        if len(self.features) != self.n_refs * self.grid[0] * self.grid[1]:
            raise ValueError("memory size does not match n_refs x grid")


def _normalize(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), 1e-12)


def build_memory(references: Sequence[ImageSample], embed: Embedder, patch_size: int = 8) -> FewShotMemory:
    if not references:
        raise ValueError("build_memory needs at least one reference image")
    shape = references[0].pixels.shape
    for r in references:
        if r.label != NORMAL:
            raise ValueError(f"reference {r.sample_id} is not normal")
        if r.pixels.shape != shape:
            raise ValueError("references differ in size")
    H, W = shape[:2]
    grid = (H // patch_size, W // patch_size)
    feats = [np.asarray(embed(r.pixels), dtype=np.float64) for r in references]
    return FewShotMemory(_normalize(np.concatenate(feats)), grid, patch_size, len(references))


def patch_scores(test_features: np.ndarray, memory: FewShotMemory) -> np.ndarray:
    """``1 - max cos`` of each test patch against the whole memory (flat array)."""
    sims = _normalize(np.asarray(test_features, dtype=np.float64)) @ memory.features.T
    return 1.0 - sims.max(axis=1)


def patch_similarity_expert(
    test: ImageSample,
    memory: FewShotMemory,
    embed: Embedder,
    calibration: tuple[float, float] = (0.0, 1.0),
) -> AnomalyMap:
    """Few-shot anomaly map; ``calibration`` is the (min, max) of raw scores on normals."""
    gh, gw = memory.grid
    if test.pixels.shape[0] != gh * memory.patch_size or test.pixels.shape[1] != gw * memory.patch_size:
        raise ValueError("test image does not match the memory patch geometry")
    raw = patch_scores(embed(test.pixels), memory).reshape(gh, gw)
    lo, hi = calibration
    grid = (raw - lo) / max(hi - lo, 1e-12)
    up = resize_map(np.clip(grid, 0.0, 1.0), test.pixels.shape[0]).numpy()
    return AnomalyMap.from_values(up, "patchsim")


class PatchSimExpert:
    """Per-category few-shot memories plus a min-max calibration over train normals."""

    expert_id = "patchsim"

    def __init__(self, embed: Embedder, memories: dict[str, FewShotMemory], calibration: dict[str, tuple[float, float]]):
        self.embed = embed
        self.memories = memories
        self.calibration = calibration

    @classmethod
    def fit(
        cls,
        embed: Embedder,
        references: dict[str, Sequence[ImageSample]],
        calibration_set: dict[str, Sequence[ImageSample]],
        patch_size: int = 8,
    ) -> "PatchSimExpert":
        memories, calib = {}, {}
        for cat, refs in references.items():
            mem = build_memory(refs, embed, patch_size)
            raws = [patch_scores(embed(s.pixels), mem) for s in calibration_set.get(cat, [])]
            if raws:
                allraw = np.concatenate(raws)
                # the calibration max is the top of normal variation; anomalies exceed it
                calib[cat] = (float(allraw.min()), float(allraw.max()))
            else:
                calib[cat] = (0.0, 1.0)
            memories[cat] = mem
        return cls(embed, memories, calib)

    def __call__(self, sample: ImageSample) -> AnomalyMap:
        if sample.category not in self.memories:
            raise KeyError(f"no few-shot memory for category {sample.category!r}")
        return patch_similarity_expert(
            sample, self.memories[sample.category], self.embed, self.calibration[sample.category]
        )
