"""Metrics and the end-to-end evaluation loop.

Accuracy is read off the model's text responses. Image/pixel AUROC describe
the expert's maps (the model re-uses the expert's localisation). The k-fold
max-normal-score threshold turns expert image scores into a conventional
accuracy for comparison.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image
from scipy.stats import rankdata

from . import CODE_VERSION
from .encoder import images_to_tensor
from .experts import AnomalyMap
from .lm import generate_ids, parse_response
from .model import ModelBundle
from .synth import ABNORMAL, DatasetManifest, ImageSample

REPORT_SCHEMA = "eval-report-1"


class MetricUndefinedError(ValueError):
    pass


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUROC with ties counted as one half."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel().astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError("AUROC needs both positive and negative samples")
    ranks = rankdata(s)  # average ranks resolve ties as 0.5 per tied pair
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def kfold_partition(n: int, k: int, seed: int) -> list[np.ndarray]:
    return np.array_split(np.random.default_rng(seed).permutation(n), k)


def fold_maxima(normal_scores: Sequence[float], k: int = 3, seed: int = 0) -> list[float]:
    scores = np.asarray(normal_scores, dtype=np.float64)
    if len(scores) < k:
        raise ValueError(f"need at least {k} normal scores for {k} folds, got {len(scores)}")
    return [float(scores[f].max()) for f in kfold_partition(len(scores), k, seed)]


def kfold_threshold(normal_scores: Sequence[float], k: int = 3, seed: int = 0) -> float:
    """Mean over ``k`` shuffled folds of the maximum normal score in each fold."""
    return float(np.mean(fold_maxima(normal_scores, k, seed)))


def accuracy(labels: Sequence[str], predictions: Sequence[str]) -> float:
    """Fraction of predictions equal to the label; ``unparseable`` never matches."""
    if len(labels) == 0:
        raise MetricUndefinedError("accuracy of an empty set is undefined")
    if len(labels) != len(predictions):
        raise ValueError("labels and predictions differ in length")
    return float(np.mean([p == y for y, p in zip(labels, predictions)]))


# -- model inference ------------------------------------------------------------


@torch.no_grad()
def respond(
    bundle: ModelBundle,
    samples: list[ImageSample],
    maps: list[AnomalyMap],
    template_index: int = 0,
    max_new_tokens: int = 12,
    batch_size: int = 32,
    mode: str | None = None,
) -> list[str]:
    """Greedy responses of the model for each (image, map) pair."""
    mode = mode or bundle.inference_mode()
    tpls = bundle.bank.templates[mode]
    tpl = tpls[template_index % len(tpls)]
    want_v, _ = bundle.needs(mode)
    dtype = bundle.dtype
    out: list[str] = []
    for i in range(0, len(samples), batch_size):
        chunk = samples[i : i + batch_size]
        maps_t = torch.as_tensor(np.stack([m.values for m in maps[i : i + batch_size]]), dtype=dtype)
        feats = bundle.encoder.embed_patches(images_to_tensor([s.pixels for s in chunk], dtype)) if want_v else None
        prompts = bundle.prompts(feats, maps_t, [tpl] * len(chunk))
        ids = generate_ids(bundle.lm, bundle.vocab, prompts, max_new_tokens)
        out += [bundle.vocab.detokenize(x) for x in ids]
    return out


# -- evaluation -------------------------------------------------------------------


@dataclass
class Record:
    id: str
    category: str
    label: str
    image_score: float
    response: str
    parsed_label: str


def evaluate(
    bundle: ModelBundle,
    manifest: DatasetManifest,
    expert,
    k_folds: int = 3,
    fold_seed: int = 0,
    template_index: int = 0,
    max_new_tokens: int = 12,
    batch_size: int = 32,
    config: dict | None = None,
    expert_config: dict | None = None,
    overlays: str | Path | None = None,
    categories: Sequence[str] | None = None,
) -> dict:
    """Run expert -> encoder -> LM -> parse on every test sample; return the report dict."""
    bundle.eval()
    per_cat: dict[str, dict] = {}
    records: list[Record] = []
    for cat in categories or manifest.categories:
        test = [manifest.load(r) for r in manifest.select(split="test", category=cat)]
        train = [manifest.load(r) for r in manifest.select(split="train", category=cat)]
        maps = [expert(s) for s in test]
        responses = respond(bundle, test, maps, template_index, max_new_tokens, batch_size)
        recs = [
            Record(s.sample_id, cat, s.label, m.image_score, r, parse_response(r))
            for s, m, r in zip(test, maps, responses)
        ]
        records += recs
        entry: dict = {"counts": {"normal": sum(r.label != ABNORMAL for r in recs), "abnormal": sum(r.label == ABNORMAL for r in recs)}}
        errors = []
        try:
            entry["accuracy"] = accuracy([r.label for r in recs], [r.parsed_label for r in recs])
        except MetricUndefinedError as exc:
            entry["accuracy"] = None
            errors.append(f"accuracy: {exc}")
        y = [int(s.label == ABNORMAL) for s in test]
        try:
            entry["image_auroc"] = auroc([m.image_score for m in maps], y)
        except MetricUndefinedError as exc:
            entry["image_auroc"] = None
            errors.append(f"image_auroc: {exc}")
        try:
            entry["pixel_auroc"] = auroc(
                np.concatenate([m.values.ravel() for m in maps]),
                np.concatenate([s.mask.ravel() for s in test]),
            )
        except MetricUndefinedError as exc:
            entry["pixel_auroc"] = None
            errors.append(f"pixel_auroc: {exc}")
        try:
            train_scores = [expert(s).image_score for s in train]
            maxima = fold_maxima(train_scores, k_folds, fold_seed)
            thr = float(np.mean(maxima))
            entry["threshold"] = thr
            entry["fold_maxima"] = maxima
            entry["expert_accuracy"] = accuracy(
                [r.label for r in recs], [ABNORMAL if m.image_score > thr else "normal" for m in maps]
            )
        except (ValueError, MetricUndefinedError) as exc:
            entry["threshold"] = entry["expert_accuracy"] = None
            errors.append(f"threshold: {exc}")
        entry["unparseable"] = sum(r.parsed_label == "unparseable" for r in recs)
        if errors:
            entry["errors"] = errors
        per_cat[cat] = entry
        if overlays is not None:
            write_overlays(Path(overlays), test, maps)

    aggregate: dict = {}
    for key in ("accuracy", "image_auroc", "pixel_auroc", "expert_accuracy"):
        vals = [e[key] for e in per_cat.values() if e.get(key) is not None]
        aggregate[key] = float(np.mean(vals)) if vals else None
    undefined = sorted(c for c, e in per_cat.items() if "errors" in e)
    if undefined:
        aggregate["undefined_categories"] = undefined
    return {
        "schema": REPORT_SCHEMA,
        "code_version": CODE_VERSION,
        "expert": {"id": getattr(expert, "expert_id", type(expert).__name__), "config": expert_config or {}},
        "model_sha256": bundle.checksum(),
        "flags": dataclasses.asdict(bundle.flags),
        "config": config or {},
        "categories": per_cat,
        "aggregate": aggregate,
        "records": [dataclasses.asdict(r) for r in records],
    }


def write_report(report: dict, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")


def write_overlays(out_dir: Path, samples: list[ImageSample], maps: list[AnomalyMap]) -> None:
    """Side-by-side PNG: image | image with the map blended into the red channel."""
    for s, m in zip(samples, maps):
        img = s.pixels
        over = img.copy()
        over[..., 0] = np.clip(0.5 * img[..., 0] + m.values, 0, 1)
        over[..., 1:] *= 1.0 - 0.5 * m.values[..., None]
        comp = np.concatenate([img, over], axis=1)
        path = out_dir / f"{s.sample_id.replace('/', '_')}.png"
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(np.round(comp * 255).astype(np.uint8)).save(path)


@torch.no_grad()
def salience_probe(bundle: ModelBundle, manifest: DatasetManifest, expert, template_index: int = 0) -> dict:
    """How often zeroing the anomaly map flips the answer on test anomalies."""
    anomalies = [manifest.load(r) for r in manifest.select(split="test", label=ABNORMAL)]
    maps = [expert(s) for s in anomalies]
    zero = [AnomalyMap.from_values(np.zeros_like(m.values), "zero") for m in maps]
    a = [parse_response(r) for r in respond(bundle, anomalies, maps, template_index)]
    b = [parse_response(r) for r in respond(bundle, anomalies, zero, template_index)]
    flips = sum(x != y for x, y in zip(a, b))
    return {"n": len(anomalies), "flipped": flips, "flip_rate": flips / max(1, len(anomalies))}


__all__ = [
    "MetricUndefinedError",
    "auroc",
    "kfold_partition",
    "fold_maxima",
    "kfold_threshold",
    "accuracy",
    "respond",
    "evaluate",
    "write_report",
    "write_overlays",
    "salience_probe",
]
