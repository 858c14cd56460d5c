"""Two-stage training.

``foundation`` builds the stand-ins for pretrained parts (patch backbone,
resampler with its base queries, projection, language model). Stage 1 trains
the textual prompt generator (``pretrain_tpg``) and the LoRRA/VPG pair
(``pretrain_vision``) in two independent runs against a frozen LM. Stage 2
(``finetune``) merges both and trains them jointly with the LM core.
"""

from __future__ import annotations

import csv
import json
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import CODE_VERSION
from .config import ConfigError, DataConfig, ExpertConfig, RunConfig, TrainConfig
from .encoder import images_to_tensor, numpy_embedder
from .experts import AnomalyMap, MixedOracleExpert, NullExpert, OracleExpert, PatchSimExpert
from .lm import MODES, SPECIALS, Template, assemble_prompt, lm_loss, with_response
from .model import (
    FOUNDATION_GROUPS,
    GROUPS,
    Flags,
    ModelBundle,
    load_checkpoint,
    load_groups,
    read_checkpoint,
    save_checkpoint,
)
from .synth import NORMAL, DatasetManifest, ImageSample, cut_paste, pick_source_category

log = logging.getLogger(__name__)



class TrainingError(RuntimeError):
    pass


class MissingCheckpointError(ConfigError):
    pass


def lr_schedule(step: int, total_steps: int, lr_start: float, lr_end: float, warmup_steps: int = 0) -> float:
    """Cosine decay from ``lr_start`` at step 0 to ``lr_end`` at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if warmup_steps and step < warmup_steps:
        return lr_start * (step + 1) / warmup_steps
    c = 0.5 * (1.0 + math.cos(math.pi * step / total_steps))
    # same curve as lr_end + c * (lr_start - lr_end), written so both endpoints are exact
    return lr_start * c + lr_end * (1.0 - c)


# -- data ---------------------------------------------------------------------


@dataclass
class TrainPool:
    """In-memory train normals plus what is needed to simulate anomalies from them."""

    normals: list[ImageSample]
    data_cfg: DataConfig
    by_category: dict[str, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        if any(s.label != NORMAL for s in self.normals):
            raise ValueError("train pool must contain only normal samples")
        if not self.normals:
            raise ValueError("train pool is empty")
        self.by_category = {}
        for i, s in enumerate(self.normals):
            self.by_category.setdefault(s.category, []).append(i)

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest) -> "TrainPool":
        return cls([manifest.load(r) for r in manifest.select(split="train")], manifest.data_config())


@dataclass
class Batch:
    samples: list[ImageSample]
    maps: list[AnomalyMap]
    templates: list[Template]
    responses: list[str]

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.target for s in self.samples])

    def images(self, dtype=torch.float32) -> torch.Tensor:
        return images_to_tensor([s.pixels for s in self.samples], dtype)

    def map_tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.as_tensor(np.stack([m.values for m in self.maps]), dtype=dtype)


def make_batch(
    pool: TrainPool,
    batch_size: int,
    seed: int,
    step: int,
    expert: Callable[[ImageSample], AnomalyMap],
    mode: str,
    bank,
) -> Batch:
    """Half train normals, half fresh cut-paste anomalies; deterministic per (seed, step)."""
    if batch_size <= 0 or batch_size % 2:
        raise ConfigError(f"batch_size must be positive and even, got {batch_size}")
    if mode not in MODES:
        raise ValueError(f"unknown template mode {mode!r}")
    rng = np.random.default_rng([seed, step])
    half = batch_size // 2
    cfg = pool.data_cfg
    cats = sorted(pool.by_category)
    samples = []
    for i in range(batch_size):
        target = pool.normals[int(rng.integers(len(pool.normals)))]
        sseed = int(rng.integers(2**31))
        if i < half:
            samples.append(dataclasses.replace(target, seed=sseed))
            continue
        src_cat = pick_source_category(target.category, tuple(cats), cfg.source_policy, rng)
        src_pool = pool.by_category[src_cat]
        source = pool.normals[src_pool[int(rng.integers(len(src_pool)))]]
        n = int(rng.integers(max(1, cfg.n_regions[0]), cfg.n_regions[1] + 1))
        abn = cut_paste(source, target, n, cfg.area_frac_range, seed=int(rng.integers(2**31)))
        samples.append(dataclasses.replace(abn, seed=sseed, sample_id=f"sim/{seed}/{step}/{i}"))
    order = rng.permutation(batch_size)
    samples = [samples[j] for j in order]
    pool_t = bank.templates[mode]
    templates = [pool_t[int(rng.integers(len(pool_t)))] for _ in samples]
    return Batch(
        samples=samples,
        maps=[expert(s) for s in samples],
        templates=templates,
        responses=[bank.response(s.is_abnormal) for s in samples],
    )


# -- experts ------------------------------------------------------------------


def train_expert(run: RunConfig, bundle: ModelBundle | None = None, manifest: DatasetManifest | None = None):
    """Expert that produces training maps: the configured one, or a per-sample oracle mixture."""
    if run.train.expert_mix:
        return MixedOracleExpert(run.train.expert_mix, run.expert.seed, run.data.area_frac_range)
    return build_expert(run.expert, bundle, manifest)


def build_expert(cfg: ExpertConfig, bundle: ModelBundle | None = None, manifest: DatasetManifest | None = None):
    """Expert callable for a config; ``patchsim`` needs the bundle's backbone and the train split."""
    if cfg.kind == "oracle":
        return OracleExpert(cfg.blur_radius, cfg.noise_sigma, cfg.fp_blobs, cfg.seed)
    if cfg.kind == "null":
        return NullExpert()
    if cfg.kind == "patchsim":
        if bundle is None or manifest is None:
            raise ConfigError("patchsim expert needs a model backbone and a manifest")
        embed = numpy_embedder(bundle.encoder.backbone)
        refs, calib = {}, {}
        rng = np.random.default_rng(cfg.seed)
        for cat in manifest.categories:
            recs = manifest.select(split="train", category=cat)
            pick = rng.permutation(len(recs))
            refs[cat] = [manifest.load(recs[j]) for j in pick[: cfg.shots]]
            calib[cat] = [manifest.load(recs[j]) for j in pick[cfg.shots :]]
        return PatchSimExpert.fit(embed, refs, calib, cfg.patch_size)
    raise ConfigError(f"unknown expert kind {cfg.kind!r}")


# -- stage bookkeeping --------------------------------------------------------


def stage_trainables(stage: str, flags: Flags) -> set[str]:
    if stage == "foundation":
        return set(FOUNDATION_GROUPS) | {"lm"}
    if stage == "pretrain_tpg":
        return {"tpg"}
    if stage == "pretrain_vision":
        return {g for g, on in (("lorra", flags.use_lorra), ("vpg", flags.use_vpg)) if on}
    if stage == "finetune":
        on = {g for g, f in (("tpg", flags.use_tpg), ("lorra", flags.use_lorra), ("vpg", flags.use_vpg)) if f}
        return on | {"lm"}
    raise ConfigError(f"unknown stage {stage!r}")


def stage_mode(stage: str, flags: Flags) -> str:
    if stage == "pretrain_tpg":
        return "expert_only"
    if stage == "pretrain_vision":
        return "image_only"
    return "joint" if flags.use_tpg else "image_only"


def flags_of(cfg: TrainConfig) -> Flags:
    return Flags(cfg.use_tpg, cfg.use_lorra, cfg.use_vpg)


def checkpoint_name(stage: str, flags: Flags) -> str:
    if stage in ("foundation", "pretrain_tpg"):
        return f"{stage}.ckpt"
    if stage == "pretrain_vision":
        return f"pretrain_vision_{Flags(False, flags.use_lorra, flags.use_vpg).name}.ckpt"
    return f"finetune_{flags.name}.ckpt"


def batch_loss(bundle: ModelBundle, batch: Batch) -> torch.Tensor:
    dtype = bundle.dtype
    mode = batch.templates[0].mode
    want_v, _ = bundle.needs(mode)
    feats = None
    if want_v:
        with torch.no_grad():
            feats = bundle.encoder.embed_patches(batch.images(dtype))
    prompts = bundle.prompts(feats, batch.map_tensor(dtype), batch.templates)
    seqs = [with_response(bundle.lm, bundle.vocab, p, r) for p, r in zip(prompts, batch.responses)]
    return lm_loss(bundle.lm, seqs)


# -- foundation ---------------------------------------------------------------


def _patches(images: torch.Tensor, p: int) -> torch.Tensor:
    B, C, H, W = images.shape
    x = images.unfold(2, p, p).unfold(3, p, p)  # B C gh gw p p
    return x.permute(0, 2, 3, 1, 4, 5).reshape(B, (H // p) * (W // p), C * p * p)


def foundation_vision_loss(enc, cls_head: nn.Module, rec_head: nn.Module, images: torch.Tensor, labels: torch.Tensor):
    """Category cross-entropy on the mean unguided visual token plus patch reconstruction."""
    feats = enc.embed_patches(images)
    t_v = enc.project(enc.resample(feats, None))
    loss = F.cross_entropy(cls_head(t_v.mean(1)), labels)
    return loss + F.mse_loss(rec_head(feats), _patches(images - 0.5, enc.cfg.patch_size)) * 10.0


def train_foundation(bundle: ModelBundle, pool: TrainPool, cfg: TrainConfig, loss_log: list) -> None:
    """Pretrain the stand-in components.

    Vision stack: category classification from the mean visual token plus
    per-patch pixel reconstruction from backbone tokens. LM: instruction
    templates and both responses, with random vectors in the placeholder
    slots and answers drawn at random, so it knows the language but not the task.
    """
    gen = torch.Generator().manual_seed(cfg.seed)
    cats = sorted(pool.by_category)
    enc = bundle.encoder
    mcfg = bundle.cfg
    dtype = bundle.dtype
    with torch.random.fork_rng():
        torch.manual_seed(cfg.seed)
        cls_head = nn.Linear(mcfg.d_llm, len(cats)).to(dtype)
        rec_head = nn.Linear(mcfg.d_vit, 3 * mcfg.patch_size**2).to(dtype)
    params = [p for n, p in bundle.named_parameters() if p.requires_grad and not n.startswith("lm.")]
    params += list(cls_head.parameters()) + list(rec_head.parameters())
    opt = torch.optim.AdamW(params, lr=cfg.lr_start, weight_decay=cfg.weight_decay)
    labels_all = torch.tensor([cats.index(s.category) for s in pool.normals])
    images_all = images_to_tensor([s.pixels for s in pool.normals], dtype)
    bs = 32
    for step in range(cfg.foundation_vision_steps):
        lr = lr_schedule(step, cfg.foundation_vision_steps, cfg.lr_start, cfg.lr_end)
        for g in opt.param_groups:
            g["lr"] = lr
        idx = torch.randint(len(pool.normals), (bs,), generator=gen)
        x = images_all[idx]
        # random flips keep the patch features from memorising absolute layout
        if torch.rand((), generator=gen) < 0.5:
            x = x.flip(-1)
        loss = foundation_vision_loss(enc, cls_head, rec_head, x, labels_all[idx])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        _check(loss, step)
        loss_log.append(("vision", step, lr, loss.item()))

    lm = bundle.lm
    lm_params = [p for p in lm.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(lm_params, lr=cfg.lr_start, weight_decay=cfg.weight_decay)
    banks = _foundation_token_banks(bundle, images_all, gen)
    vocab = bundle.vocab
    cue = vocab[CUE_WORD]
    decoys = [i for i in range(len(SPECIALS) + 2, len(vocab)) if i != cue]

    for step in range(cfg.foundation_lm_steps):
        lr = lr_schedule(step, cfg.foundation_lm_steps, cfg.lr_start, cfg.lr_end)
        for g in opt.param_groups:
            g["lr"] = lr
        seqs = []
        for _ in range(16):
            mode = MODES[int(torch.randint(3, (), generator=gen))]
            tpls = bundle.bank.templates[mode]
            tpl = tpls[int(torch.randint(len(tpls), (), generator=gen))]
            blocks = {k: b[int(torch.randint(len(b), (), generator=gen))] for k, b in _pick_banks(banks, gen).items()}
            want_v, want_e = bundle.needs(mode)
            present = [k for k, w in (("image", want_v), ("expert", want_e)) if w]
            target = present[int(torch.randint(len(present), (), generator=gen))]
            yes = bool(torch.rand((), generator=gen) < 0.5)
            # yes: the cue word is mixed into a few tokens of one block; no: a decoy word, or nothing
            word = cue if yes else decoys[int(torch.randint(len(decoys), (), generator=gen))]
            if yes or torch.rand((), generator=gen) < 0.5:
                blk = blocks[target]
                k = int(torch.randint(1, 4, (), generator=gen))
                pos = torch.randperm(blk.shape[0], generator=gen)[:k]
                add = torch.zeros_like(blk)
                add[pos] = lm.tok_emb.weight[word]
                blocks[target] = blk + add
            p = assemble_prompt(lm, vocab, tpl, blocks["image"], blocks["expert"])
            seqs.append(with_response(lm, vocab, p, bundle.bank.response(yes)))
        loss = lm_loss(lm, seqs)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        _check(loss, step)
        loss_log.append(("lm", step, lr, loss.item()))


# the language model's stand-in pretraining grounds "Yes" in this word appearing inside a feature block
CUE_WORD = "defect"


@torch.no_grad()
def _foundation_token_banks(bundle: ModelBundle, images: torch.Tensor, gen: torch.Generator) -> dict:
    """Visual tokens of train normals (with and without expert queries) and expert tokens of random maps."""
    enc = bundle.encoder
    size = bundle.cfg.image_size
    maps = torch.zeros(len(images), size, size, dtype=images.dtype)
    for m in maps:
        for _ in range(int(torch.randint(0, 4, (), generator=gen))):
            lo, hi = max(1, size // 16), max(2, size // 4)
            h, w = (int(v) for v in torch.randint(lo, hi, (2,), generator=gen))
            y = int(torch.randint(0, size - h + 1, (), generator=gen))
            x = int(torch.randint(0, size - w + 1, (), generator=gen))
            m[y : y + h, x : x + w] = 1.0
    feats = enc.embed_patches(images)
    return {
        "image": [enc.encode_features(feats, maps, False, False), enc.encode_features(feats, maps, False, True)],
        "expert": [bundle.tpg(maps)],
    }


def _pick_banks(banks: dict, gen: torch.Generator) -> dict:
    return {k: b[int(torch.randint(len(b), (), generator=gen))] for k, b in banks.items()}


def _check(loss: torch.Tensor, step: int) -> None:
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss {float(loss)} at step {step}; aborting")


# -- stage runner -------------------------------------------------------------


@dataclass
class StageResult:
    checkpoint: Path
    loss_csv: Path
    losses: list[tuple[int, float, float]]
    checksum: str
    group_checksums: dict[str, str]


def resolve_init(stage: str, cfg: TrainConfig, out_dir: Path, init: dict[str, Path] | None) -> dict[str, Path]:
    """Checkpoints a stage starts from; raises MissingCheckpointError when absent."""
    init = dict(init or {})
    flags = flags_of(cfg)
    need: dict[str, Path] = {}
    if stage == "foundation":
        return need
    need["foundation"] = Path(init.get("foundation", out_dir / "foundation.ckpt"))
    if stage == "finetune":
        if flags.use_tpg:
            need["tpg"] = Path(init.get("tpg", out_dir / checkpoint_name("pretrain_tpg", flags)))
        if flags.use_lorra or flags.use_vpg:
            need["vision"] = Path(init.get("vision", out_dir / checkpoint_name("pretrain_vision", flags)))
    if not need["foundation"].exists():
        raise MissingCheckpointError(f"missing foundation checkpoint: {need['foundation']}")
    for key in ("tpg", "vision"):
        if key in need and not need[key].exists():
            if cfg.allow_missing_stage1:
                log.warning("stage-1 checkpoint %s absent; starting %s from foundation weights", need[key], key)
                del need[key]
            else:
                raise MissingCheckpointError(f"missing stage-1 checkpoint: {need[key]}")
    return need


def init_bundle(run: RunConfig, init: dict[str, Path], dtype=torch.float32) -> ModelBundle:
    flags = flags_of(run.train)
    if "foundation" not in init:
        bundle = ModelBundle(run.model, flags).to(dtype)
        return bundle
    bundle, _ = load_checkpoint(init["foundation"], flags)
    bundle.to(dtype)
    if "tpg" in init:
        _, tensors = read_checkpoint(init["tpg"])
        load_groups(bundle, tensors, ["tpg"])
    if "vision" in init:
        _, tensors = read_checkpoint(init["vision"])
        load_groups(bundle, tensors, [g for g, on in (("lorra", flags.use_lorra), ("vpg", flags.use_vpg)) if on])
    return bundle


def run_stage(
    run: RunConfig,
    manifest: DatasetManifest,
    out_dir: str | Path,
    init: dict[str, Path] | None = None,
    dtype: torch.dtype = torch.float32,
    pool: TrainPool | None = None,
    resume: str | Path | None = None,
    stop_after: int | None = None,
) -> StageResult:
    """Train one stage and write its checkpoint and loss CSV into ``out_dir``.

    ``resume`` continues from a state file written by an earlier run with
    ``stop_after``; together they allow exact interruption and resumption.
    """
    cfg = run.train.resolved()
    cfg.validate()
    run = run.replace(train=cfg)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    flags = flags_of(cfg)
    torch.set_num_threads(1)
    sources = resolve_init(cfg.stage, cfg, out_dir, init)
    bundle = init_bundle(run, sources, dtype)
    pool = pool or TrainPool.from_manifest(manifest)
    trainable = stage_trainables(cfg.stage, flags)
    bundle.set_trainable(trainable)
    frozen = [g for g in GROUPS if g not in trainable]
    init_sums = bundle.checksums()
    name = checkpoint_name(cfg.stage, flags)
    losses: list = []

    if cfg.stage == "foundation":
        flog: list = []
        train_foundation(bundle, pool, cfg, flog)
        losses = [(i, lr, loss) for i, (_, _, lr, loss) in enumerate(flog)]
    else:
        expert = train_expert(run, bundle, manifest)
        mode = stage_mode(cfg.stage, flags)
        params = [p for p in bundle.parameters() if p.requires_grad]
        opt = torch.optim.AdamW(params, lr=cfg.lr_start, weight_decay=cfg.weight_decay)
        start = 0
        if resume is not None:
            state = torch.load(resume, weights_only=False)
            bundle.load_state_dict(state["model"])
            opt.load_state_dict(state["optimizer"])
            start, losses = state["step"], list(state["losses"])
        end = cfg.steps if stop_after is None else min(cfg.steps, stop_after)
        for step in range(start, end):
            lr = lr_schedule(step, cfg.steps, cfg.lr_start, cfg.lr_end, cfg.warmup_steps)
            for g in opt.param_groups:
                g["lr"] = lr
            batch = make_batch(pool, cfg.batch_size, cfg.seed, step, expert, mode, bundle.bank)
            loss = batch_loss(bundle, batch)
            _check(loss, step)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            losses.append((step, lr, loss.item()))
            if cfg.log_every and step % cfg.log_every == 0:
                log.info("%s step %d lr %.3g loss %.4f", cfg.stage, step, lr, losses[-1][2])
        if stop_after is not None and end < cfg.steps:
            state_path = out_dir / f"{name}.state"
            torch.save({"step": end, "model": bundle.state_dict(), "optimizer": opt.state_dict(), "losses": losses}, state_path)

    final_sums = bundle.checksums()
    changed = sorted(g for g in GROUPS if final_sums[g] != init_sums[g])
    stray = [g for g in changed if g in frozen]
    if stray:
        raise TrainingError(f"frozen groups changed during {cfg.stage}: {stray}")
    meta = {
        "stage": cfg.stage,
        "code_version": CODE_VERSION,
        "run_config": _jsonable(run.to_dict()),
        "init": {k: Path(v).name for k, v in sorted(sources.items())},
        "init_group_sha256": init_sums,
        "changed_groups": changed,
        "trainable_groups": sorted(trainable),
        "steps_done": len(losses),
        "final_loss": losses[-1][2] if losses else None,
    }
    ckpt = out_dir / name
    checksum = save_checkpoint(bundle, ckpt, frozen=frozen, meta=meta)
    csv_path = out_dir / f"{name.removesuffix('.ckpt')}_loss.csv"
    with open(csv_path, "w", newline="") as f:
        # provenance line; csv readers should skip lines starting with '#'
        f.write("# " + json.dumps({"code_version": CODE_VERSION, "run_config": meta["run_config"]}, sort_keys=True) + "\n")
        w = csv.writer(f)
        w.writerow(["step", "lr", "loss"])
        for row in losses:
            w.writerow([row[0], repr(row[1]), repr(row[2])])
    log.info("%s done: %s (sha256 %s)", cfg.stage, ckpt, checksum[:12])
    return StageResult(ckpt, csv_path, losses, checksum, final_sums)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


__all__ = [
    "lr_schedule",
    "TrainPool",
    "Batch",
    "make_batch",
    "build_expert",
    "train_expert",
    "stage_trainables",
    "stage_mode",
    "checkpoint_name",
    "batch_loss",
    "train_foundation",
    "foundation_vision_loss",
    "run_stage",
    "StageResult",
    "TrainingError",
    "MissingCheckpointError",
]
