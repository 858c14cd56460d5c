"""End-to-end experiment drivers shared by the CLI, scripts and acceptance tests."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from pathlib import Path

import torch

from . import CODE_VERSION
from .config import ExpertConfig, RunConfig
from .evaluation import evaluate, salience_probe, write_report
from .model import Flags, load_checkpoint
from .synth import DatasetManifest, build_manifest, load_manifest
from .training import TrainPool, build_expert, checkpoint_name, run_stage

log = logging.getLogger(__name__)

# (use_tpg, use_lorra, use_vpg) for every ablation row, full model last
ABLATIONS = {
    "tpg": Flags(True, False, False),
    "tpg+lorra": Flags(True, True, False),
    "tpg+vpg": Flags(True, False, True),
    "lorra+vpg": Flags(False, True, True),
    "tpg+lorra+vpg": Flags(True, True, True),
}


def _train_cfg(run: RunConfig, stage: str, flags: Flags, overrides: dict | None):
    kw = dict(overrides or {})
    return dataclasses.replace(
        run.train, stage=stage, use_tpg=flags.use_tpg, use_lorra=flags.use_lorra, use_vpg=flags.use_vpg, **kw
    )


def ensure_manifest(run: RunConfig, data_dir: Path) -> DatasetManifest:
    path = data_dir / "manifest.json"
    if path.exists():
        m = load_manifest(path)
        if m.config == json.loads(json.dumps(dataclasses.asdict(run.data))):
            return m
    return build_manifest(run.data, data_dir)


def train_all(
    run: RunConfig,
    manifest: DatasetManifest,
    out_dir: Path,
    variants: dict[str, Flags],
    stage_overrides: dict[str, dict] | None = None,
) -> dict[str, Path]:
    """Foundation, every stage-1 run the variants need, then one finetune per variant."""
    stage_overrides = stage_overrides or {}
    pool = TrainPool.from_manifest(manifest)
    timings = {}

    def stage(name, flags):
        path = out_dir / checkpoint_name(name, flags)
        if path.exists():
            return path
        t = time.perf_counter()
        cfg = _train_cfg(run, name, flags, stage_overrides.get(name))
        res = run_stage(run.replace(train=cfg), manifest, out_dir, pool=pool)
        timings[path.name] = time.perf_counter() - t
        log.info("%s finished in %.1fs", path.name, timings[path.name])
        return res.checkpoint

    stage("foundation", Flags())
    if any(f.use_tpg for f in variants.values()):
        stage("pretrain_tpg", Flags())
    for f in variants.values():
        if f.use_lorra or f.use_vpg:
            stage("pretrain_vision", f)
    return {name: stage("finetune", f) for name, f in variants.items()}


def eval_checkpoint(run: RunConfig, manifest: DatasetManifest, ckpt: Path, expert_cfg: ExpertConfig | None = None):
    bundle, header = load_checkpoint(ckpt)
    expert_cfg = expert_cfg or run.expert
    expert = build_expert(expert_cfg, bundle, manifest)
    e = run.eval
    report = evaluate(
        bundle,
        manifest,
        expert,
        k_folds=e.k_folds,
        fold_seed=e.fold_seed,
        template_index=e.template_index,
        max_new_tokens=e.max_new_tokens,
        batch_size=e.batch_size,
        config=run.to_dict(),
        expert_config=dataclasses.asdict(expert_cfg),
    )
    report["checkpoint"] = {"path": ckpt.name, "model_sha256": header["model_sha256"]}
    return report, bundle, expert


def run_ablation(
    run: RunConfig,
    out_dir: str | Path,
    stage_overrides: dict[str, dict] | None = None,
    variants: dict[str, Flags] | None = None,
) -> dict:
    """Train and evaluate every ablation row; write one report per row and a summary."""
    out_dir = Path(out_dir)
    torch.set_num_threads(1)
    t0 = time.perf_counter()
    manifest = ensure_manifest(run, out_dir / "data")
    variants = variants or ABLATIONS
    ckpts = train_all(run, manifest, out_dir / "ckpt", variants, stage_overrides)
    rows = {}
    for name, ckpt in ckpts.items():
        report, _, _ = eval_checkpoint(run, manifest, ckpt)
        write_report(report, out_dir / "reports" / f"{name}.json")
        rows[name] = report["aggregate"]["accuracy"]
        log.info("%-14s accuracy %.4f", name, rows[name])
    summary = {
        "accuracy": rows,
        "seconds": time.perf_counter() - t0,
        "code_version": CODE_VERSION,
        "config": run.to_dict(),
        "stage_overrides": stage_overrides or {},
    }
    (out_dir / "ablation_summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return summary


def run_expert_sweep(run: RunConfig, ckpt: str | Path, manifest: DatasetManifest, out_dir: str | Path) -> dict:
    """Evaluate one trained model under a clean oracle, a noisy oracle and the null expert."""
    out_dir = Path(out_dir)
    base = dataclasses.replace(run.expert, kind="oracle", blur_radius=0.0, noise_sigma=0.0, fp_blobs=0)
    experts = {
        "oracle": base,
        "noisy_oracle": dataclasses.replace(base, noise_sigma=0.2),
        "null": dataclasses.replace(base, kind="null"),
    }
    rows, probe = {}, None
    for name, ecfg in experts.items():
        report, bundle, expert = eval_checkpoint(run, manifest, Path(ckpt), ecfg)
        write_report(report, out_dir / f"{name}.json")
        rows[name] = report["aggregate"]["accuracy"]
        if name == "oracle":
            probe = salience_probe(bundle, manifest, expert, run.eval.template_index)
    summary = {"accuracy": rows, "salience_probe": probe, "code_version": CODE_VERSION}
    (out_dir / "expert_sweep.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return summary


__all__ = ["ABLATIONS", "ensure_manifest", "train_all", "eval_checkpoint", "run_ablation", "run_expert_sweep"]
