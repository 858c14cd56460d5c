"""Command-line entry point.

Sub-commands: ``gen-data``, ``precompute-maps``, ``train``, ``eval``, ``infer``.
Exit status is 0 on success, 1 on runtime errors and 2 on usage or
configuration errors. Failures print one JSON line to stderr::

    {"error": "MissingCheckpointError", "message": "...", "status": 2}
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import CODE_VERSION
from .config import STAGES, ConfigError, ExpertConfig, RunConfig, load_run_config
from .evaluation import evaluate, respond, write_report
from .experts import AnomalyMap
from .lm import MODES
from .model import load_checkpoint
from .synth import ABNORMAL, NORMAL, ImageSample, build_manifest, load_image, load_manifest
from .training import build_expert, resolve_init, run_stage

log = logging.getLogger("iadlmm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- shared options -------------------------------------------------------------


def _expert_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--expert", choices=("oracle", "patchsim", "null"), help="expert kind (default: from config)")
    p.add_argument("--blur", type=float, help="oracle: gaussian blur sigma")
    p.add_argument("--noise", type=float, help="oracle: gaussian noise sigma")
    p.add_argument("--fp-blobs", type=int, help="oracle: max number of spurious blobs")
    p.add_argument("--expert-seed", type=int)
    p.add_argument("--shots", type=int, help="patchsim: normal references per category")


def _expert_cfg(run: RunConfig, args) -> ExpertConfig:
    changes = {
        k: v
        for k, v in (
            ("kind", args.expert),
            ("blur_radius", args.blur),
            ("noise_sigma", args.noise),
            ("fp_blobs", args.fp_blobs),
            ("seed", args.expert_seed),
            ("shots", args.shots),
        )
        if v is not None
    }
    cfg = dataclasses.replace(run.expert, **changes)
    cfg.validate()
    return cfg


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="iadlmm", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate the synthetic dataset")
    g.add_argument("--config")
    g.add_argument("--out", required=True)

    m = sub.add_parser("precompute-maps", help="write one anomaly map array per sample")
    m.add_argument("--config")
    m.add_argument("--manifest", required=True)
    m.add_argument("--out", required=True)
    m.add_argument("--checkpoint", help="model whose backbone the patchsim expert uses")
    _expert_options(m)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--stage", required=True, choices=STAGES)
    t.add_argument("--config")
    t.add_argument("--manifest", help="dataset manifest (default: generate from config under OUT/data)")
    t.add_argument("--out", default="runs/default", help="checkpoint directory")
    t.add_argument("--ablate", action="append", default=[], choices=("tpg", "lorra", "vpg"))
    t.add_argument("--steps", type=int)
    t.add_argument("--allow-missing-stage1", action="store_true")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--config")
    e.add_argument("--out", required=True, help="report path")
    e.add_argument("--overlays", help="directory for map-over-image composites")
    _expert_options(e)

    i = sub.add_parser("infer", help="answer for one image")
    i.add_argument("--image", required=True)
    i.add_argument("--mask", help="ground-truth mask for the oracle expert (default: looked up in the manifest)")
    i.add_argument("--checkpoint", default=os.environ.get("MYRIAD_CHECKPOINT"))
    i.add_argument("--manifest", help="manifest for mask lookup and patchsim references")
    i.add_argument("--config")
    i.add_argument("--template", choices=MODES, default="joint")
    i.add_argument("--template-index", type=int, default=0)
    _expert_options(i)
    return p


# -- commands -------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    run = load_run_config(args.config)
    m = build_manifest(run.data, args.out)
    print(Path(args.out) / "manifest.json")
    log.info("%d samples", len(m.samples))
    return 0


def cmd_precompute_maps(args) -> int:
    run = load_run_config(args.config)
    manifest = load_manifest(args.manifest)
    ecfg = _expert_cfg(run, args)
    bundle = load_checkpoint(args.checkpoint)[0] if args.checkpoint else None
    expert = build_expert(ecfg, bundle, manifest)
    out = Path(args.out)
    index = {}
    for rec in manifest.samples:
        amap = expert(manifest.load(rec))
        rel = Path(rec["image"]).with_suffix(".npy")
        (out / rel).parent.mkdir(parents=True, exist_ok=True)
        np.save(out / rel, amap.values.astype(np.float32))
        index[rec["id"]] = {"map": rel.as_posix(), "image_score": amap.image_score}
    doc = {
        "code_version": CODE_VERSION,
        "config": run.to_dict(),
        "expert": dataclasses.asdict(ecfg),
        "manifest": str(Path(args.manifest)),
        "maps": index,
    }
    (out / "maps.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    print(out / "maps.json")
    return 0


def cmd_train(args) -> int:
    run = load_run_config(args.config)
    tcfg = dataclasses.replace(run.train, stage=args.stage).ablated(args.ablate)
    if args.steps is not None:
        tcfg = dataclasses.replace(tcfg, steps=args.steps)
    if args.allow_missing_stage1:
        tcfg = dataclasses.replace(tcfg, allow_missing_stage1=True)
    tcfg.validate()
    run = run.replace(train=tcfg)
    out = Path(args.out)
    # check inputs before any expensive work
    resolve_init(tcfg.stage, tcfg, out, None)
    manifest = load_manifest(args.manifest) if args.manifest else _manifest_for(run, out / "data")
    res = run_stage(run, manifest, out)
    print(res.checkpoint)
    return 0


def _manifest_for(run: RunConfig, data_dir: Path):
    if (data_dir / "manifest.json").exists():
        return load_manifest(data_dir)
    return build_manifest(run.data, data_dir)


def cmd_eval(args) -> int:
    run = load_run_config(args.config)
    manifest = load_manifest(args.manifest)
    bundle, header = load_checkpoint(args.checkpoint)
    ecfg = _expert_cfg(run, args)
    expert = build_expert(ecfg, bundle, manifest)
    ev = run.eval
    report = evaluate(
        bundle,
        manifest,
        expert,
        k_folds=ev.k_folds,
        fold_seed=ev.fold_seed,
        template_index=ev.template_index,
        max_new_tokens=ev.max_new_tokens,
        batch_size=ev.batch_size,
        config=run.to_dict(),
        expert_config=dataclasses.asdict(ecfg),
        overlays=args.overlays,
    )
    report["checkpoint"] = {"model_sha256": header["model_sha256"], "run_config": header["meta"].get("run_config")}
    write_report(report, args.out)
    agg = report["aggregate"]
    print(json.dumps({"accuracy": agg["accuracy"], "image_auroc": agg["image_auroc"], "report": str(args.out)}))
    return 0


def _find_record(image: Path, manifest_path: str | None):
    """Manifest record for ``image``, searching parent directories when no manifest is given."""
    image = image.resolve()
    candidates = [Path(manifest_path)] if manifest_path else [d / "manifest.json" for d in image.parents]
    for c in candidates:
        if c.is_dir():
            c = c / "manifest.json"
        if not c.exists():
            continue
        m = load_manifest(c)
        for rec in m.samples:
            if (m.root / rec["image"]).resolve() == image:
                return m, rec
        if manifest_path:
            return m, None
    return None, None


def cmd_infer(args) -> int:
    if not args.checkpoint:
        raise UsageError("--checkpoint is required (or set MYRIAD_CHECKPOINT)")
    run = load_run_config(args.config)
    ecfg = _expert_cfg(run, args)
    bundle, _ = load_checkpoint(args.checkpoint)
    if args.template != "image_only" and not bundle.flags.use_tpg:
        raise ConfigError(f"checkpoint was trained without TPG; template {args.template!r} needs expert tokens")
    image = Path(args.image)
    pixels = load_image(image)
    manifest, rec = _find_record(image, args.manifest)
    if rec is not None:
        sample = manifest.load(rec)
    else:
        if args.mask:
            from PIL import Image

            mask = (np.asarray(Image.open(args.mask).convert("L")) > 127).astype(np.uint8)
        elif ecfg.kind == "oracle":
            raise ConfigError("oracle expert needs a ground-truth mask: pass --mask or an image listed in a manifest")
        else:
            mask = np.zeros(pixels.shape[:2], np.uint8)
        sample = ImageSample(
            pixels=pixels,
            mask=mask,
            label=ABNORMAL if mask.any() else NORMAL,
            category="unknown",
            split="test",
            seed=0,
            index=0,
            sample_id=image.name,
        )
    expert = build_expert(ecfg, bundle, manifest)
    amap: AnomalyMap = expert(sample)
    text = respond(bundle, [sample], [amap], args.template_index, run.eval.max_new_tokens, mode=args.template)[0]
    print(text)
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "precompute-maps": cmd_precompute_maps,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
}


def _fail(exc: BaseException, status: int) -> int:
    rec = {"error": type(exc).__name__, "message": " ".join(str(exc).split()), "status": status}
    print(json.dumps(rec, sort_keys=True), file=sys.stderr)
    return status


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _fail(exc, 2)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, FileNotFoundError) as exc:
        return _fail(exc, 2)
    except Exception as exc:  # noqa: BLE001 - every other failure is a runtime error
        return _fail(exc, 1)


if __name__ == "__main__":
    sys.exit(main())
