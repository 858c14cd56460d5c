"""End-to-end acceptance suite: one PASS/FAIL line per criterion.

The ablation trains every configuration at the default budgets (about half
an hour on one CPU core). Set ``IADLMM_ACCEPTANCE_DIR`` to keep and reuse the
trained checkpoints between runs; otherwise everything is trained from scratch
in a temporary directory.
"""

import csv
import dataclasses
import json
import os
import shutil
from pathlib import Path

import numpy as np
import pytest
import torch

from iadlmm.cli import main as cli_main
from iadlmm.config import DataConfig, ModelConfig, RunConfig, TrainConfig, load_run_config
from iadlmm.encoder import VisionEncoder
from iadlmm.evaluation import auroc, write_report
from iadlmm.experts import NullExpert
from iadlmm.lm import TemplateBank, assemble_prompt
from iadlmm.model import Flags, ModelBundle, read_checkpoint
from iadlmm.pipeline import eval_checkpoint, run_ablation, run_expert_sweep
from iadlmm.synth import ABNORMAL, build_manifest
from iadlmm.training import TrainPool, lr_schedule, make_batch, run_stage

from gradutil import all_gradient_errors
from oracles import pairwise_auroc

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "ablation.json"
RESULTS: list[str] = []


def record(criterion: str, ok: bool, detail: str) -> None:
    line = f"{'PASS' if ok else 'FAIL'} [{criterion}] {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="session")
def workdir(tmp_path_factory):
    d = os.environ.get("IADLMM_ACCEPTANCE_DIR")
    if d:
        Path(d).mkdir(parents=True, exist_ok=True)
        return Path(d)
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="session")
def run_cfg():
    return load_run_config(CONFIG)


@pytest.fixture(scope="session")
def ablation(workdir, run_cfg):
    torch.set_num_threads(1)
    summary_path = workdir / "ablation_summary.json"
    if summary_path.exists():
        summary = json.loads(summary_path.read_text())
        if summary["config"] == json.loads(json.dumps(run_cfg.to_dict())):
            return summary
    return run_ablation(run_cfg, workdir)


@pytest.fixture(scope="session")
def expert_sweep(workdir, run_cfg, ablation):
    from iadlmm.synth import load_manifest

    manifest = load_manifest(workdir / "data")
    return run_expert_sweep(run_cfg, workdir / "ckpt" / "finetune_tpg+lorra+vpg.ckpt", manifest, workdir / "expert_sweep")


# -- 1. ablation ordering -------------------------------------------------------------


def test_ablation_ordering(ablation, workdir):
    acc = ablation["accuracy"]
    data = ablation["config"]["data"]
    per_cat = data["n_test_normal"] + data["n_test_abnormal"]
    full = acc["tpg+lorra+vpg"]
    others = {k: v for k, v in acc.items() if k != "tpg+lorra+vpg"}
    gap = 100 * (full - acc["tpg"])
    ok = (
        len(data["categories"]) >= 4
        and per_cat >= 40
        and all(full >= v for v in others.values())
        and gap >= 2.0
        and ablation["seconds"] <= 3600
    )
    detail = ", ".join(f"{k}={100 * v:.1f}" for k, v in acc.items())
    record("1 ablation", ok, f"{detail}; full-tpg gap {gap:.1f} pts; {ablation['seconds'] / 60:.1f} min")


# -- 2. expert monotonicity ---------------------------------------------------------------


def test_expert_quality_monotonicity(expert_sweep):
    a = expert_sweep["accuracy"]
    ok = a["oracle"] >= a["noisy_oracle"] >= a["null"] and 100 * (a["oracle"] - a["null"]) >= 5.0
    record("2 expert monotonicity", ok, f"oracle={100 * a['oracle']:.1f} noisy={100 * a['noisy_oracle']:.1f} null={100 * a['null']:.1f}")


def test_clean_oracle_accuracy_and_salience(expert_sweep):
    a = expert_sweep["accuracy"]
    probe = expert_sweep["salience_probe"]
    ok = a["oracle"] >= 0.95 and a["null"] < a["oracle"] and probe["flip_rate"] > 0.5
    record("2b oracle end-to-end", ok, f"oracle acc {a['oracle']:.3f}; zero-map flip rate {probe['flip_rate']:.2f}")


def test_infer_prints_yes_for_an_anomaly(workdir, ablation, capsys):
    m = json.loads((workdir / "data" / "manifest.json").read_text())
    rec = next(r for r in m["samples"] if r["split"] == "test" and r["label"] == ABNORMAL)
    args = ["infer", "--image", str(workdir / "data" / rec["image"]), "--expert", "oracle", "--template", "joint",
            "--checkpoint", str(workdir / "ckpt" / "finetune_tpg+lorra+vpg.ckpt")]
    status = cli_main(args)
    out = capsys.readouterr().out.strip()
    with capsys.disabled():
        record("2c infer", status == 0 and out == "Yes, anomalies exist in this image.", f"{rec['id']}: {out!r}")


# -- 3. gradients -------------------------------------------------------------------------------


def test_gradient_correctness():
    report = all_gradient_errors()
    worst = max((err, f"{cfg}/{g}") for cfg, groups in report.items() for g, (err, _) in groups.items())
    nonzero = all(gmax > 0 for groups in report.values() for _, gmax in groups.values())
    n = sum(len(g) for g in report.values())
    record("3 gradient check", worst[0] < 1e-4 and nonzero, f"{n} (config, group) pairs; worst {worst[0]:.1e} at {worst[1]}")


# -- 4. freeze invariant ---------------------------------------------------------------------


def test_freeze_invariant(ablation, workdir):
    bad, checked = [], 0
    for path in sorted((workdir / "ckpt").glob("*.ckpt")):
        header, _ = read_checkpoint(path)
        init = header["meta"]["init_group_sha256"]
        for group, info in header["groups"].items():
            if info["frozen"]:
                checked += 1
                if info["sha256"] != init[group]:
                    bad.append(f"{path.name}/{group}")
    record("4 freeze invariant", not bad and checked > 0, f"{checked} frozen groups audited; changed: {bad or 'none'}")


# -- 5. LoRRA identity ---------------------------------------------------------------------------


def test_lorra_identity():
    torch.manual_seed(0)
    enc = VisionEncoder(ModelConfig())
    assert not enc.lorra.up.weight.any()
    imgs = torch.rand(3, 3, 64, 64)
    maps = torch.rand(3, 64, 64)
    feats = enc.embed_patches(imgs)
    same = all(
        torch.equal(enc.encode_features(feats, maps, True, vpg), enc.encode_features(feats, maps, False, vpg))
        for vpg in (True, False)
    )
    record("5 LoRRA identity", same, "adapter on vs off, with and without VPG")


# -- 6. AUROC ------------------------------------------------------------------------------


def test_auroc_oracle_equivalence():
    rng = np.random.default_rng(2024)
    worst = 0.0
    for i in range(150):
        n = int(rng.integers(2, 1001))
        s = rng.random(n)
        if i % 3 == 0:
            s = np.round(s, 2)
        y = rng.integers(0, 2, n)
        y[:2] = (0, 1)
        worst = max(worst, abs(auroc(s, y) - pairwise_auroc(s, y)))
    perfect = auroc([0.0, 0.1, 0.7, 0.9], [0, 0, 1, 1])
    ties = auroc([0.5] * 10, [0, 1] * 5)
    record("6 AUROC", worst <= 1e-12 and perfect == 1.0 and ties == 0.5, f"150 instances, worst |diff| {worst:.1e}; perfect {perfect}; ties {ties}")


# -- 7. token counts ------------------------------------------------------------------------


def test_token_counts():
    b = ModelBundle(ModelConfig(), Flags())
    maps = torch.rand(1, 64, 64)
    feats = b.encoder.embed_patches(torch.rand(1, 3, 64, 64))
    t_v, t_e = b.prompt_blocks(feats, maps, "joint")
    queries = b.encoder.expert_queries(maps)
    tpl = b.bank.templates["joint"][0]
    n_text = len(b.vocab.tokenize(tpl.text))
    prompt = assemble_prompt(b.lm, b.vocab, tpl, t_v[0], t_e[0])
    expected = n_text - 2 + t_v.shape[1] + t_e.shape[1]
    ok = t_e.shape[1] == 9 and queries.shape[1] == 49 and t_v.shape[1] == 57 and prompt.embeds.shape[0] == expected == 84
    record("7 token counts", ok, f"expert tokens {t_e.shape[1]}, queries {queries.shape[1]}, joint prompt {prompt.embeds.shape[0]} = {n_text}-2+{t_v.shape[1]}+{t_e.shape[1]}")


# -- 8. schedule ------------------------------------------------------------------------------


def test_schedule_endpoints():
    ft = [lr_schedule(s, 1000, 3e-5, 1e-5) for s in (0, 500, 1000)]
    pt = [lr_schedule(s, 2000, 1e-3, 0.0) for s in (0, 1000, 2000)]
    ok = ft[0] == 3e-5 and ft[2] == 1e-5 and abs(ft[1] - 2e-5) < 1e-18 and pt[2] == 0.0 and abs(pt[1] - 5e-4) < 1e-15
    record("8 schedule", ok, f"finetune {ft}; pretrain end {pt[2]}, mid {pt[1]}")


# -- 9. batch composition ---------------------------------------------------------------------------


def test_batch_composition(tmp_path_factory):
    cfg = dataclasses.replace(DataConfig(), n_train=10, n_test_normal=2, n_test_abnormal=2)
    manifest = build_manifest(cfg, tmp_path_factory.mktemp("batches"))
    pool = TrainPool.from_manifest(manifest)
    rng = np.random.default_rng(0)
    bank = TemplateBank.load()
    yes = bank.response(True)
    bad = 0
    for step in range(1000):
        size = 2 * int(rng.integers(1, 9))
        batch = make_batch(pool, size, int(rng.integers(1 << 30)), step, NullExpert(), "joint", bank)
        n_abn = sum(s.label == ABNORMAL for s in batch.samples)
        consistent = all(
            bool(s.mask.any()) == (s.label == ABNORMAL) == (r == yes) for s, r in zip(batch.samples, batch.responses)
        )
        bad += not (2 * n_abn == size and consistent)
    record("9 batch composition", bad == 0, f"1000 batches, {bad} unbalanced")


# -- 10. determinism -----------------------------------------------------------------------------


def test_determinism(ablation, workdir, run_cfg, tmp_path_factory):
    other = tmp_path_factory.mktemp("determinism")
    from iadlmm.synth import load_manifest

    build_manifest(run_cfg.data, other / "data")
    same_manifest = (other / "data" / "manifest.json").read_bytes() == (workdir / "data" / "manifest.json").read_bytes()
    same_images = all(
        (other / "data" / p.relative_to(workdir / "data")).read_bytes() == p.read_bytes()
        for p in sorted((workdir / "data").rglob("*.png"))[::25]
    )
    # retrain one finetune from the same stage-1 checkpoints
    ckpt = other / "ckpt"
    ckpt.mkdir()
    for name in ("foundation.ckpt", "pretrain_tpg.ckpt"):
        shutil.copy(workdir / "ckpt" / name, ckpt / name)
    manifest = load_manifest(workdir / "data")
    cfg = dataclasses.replace(run_cfg.train, stage="finetune", use_lorra=False, use_vpg=False)
    res = run_stage(run_cfg.replace(train=cfg), manifest, ckpt)
    same_ckpt = res.checkpoint.read_bytes() == (workdir / "ckpt" / "finetune_tpg.ckpt").read_bytes()
    # re-evaluate the full model
    report, _, _ = eval_checkpoint(run_cfg, manifest, workdir / "ckpt" / "finetune_tpg+lorra+vpg.ckpt")
    write_report(report, other / "full.json")
    same_report = (other / "full.json").read_bytes() == (workdir / "reports" / "tpg+lorra+vpg.json").read_bytes()
    record(
        "10 determinism",
        same_manifest and same_images and same_ckpt and same_report,
        f"manifest {same_manifest}, images {same_images}, checkpoint {same_ckpt}, report {same_report}",
    )


# -- training loss windows -------------------------------------------------------------------------


def test_stage_losses_decrease_over_500_step_windows(ablation, workdir):
    failures, checked = [], 0
    for path in sorted((workdir / "ckpt").glob("*_loss.csv")):
        if path.name.startswith("foundation"):
            continue
        with open(path) as f:
            rows = list(csv.DictReader(line for line in f if not line.startswith("#")))
        loss = np.array([float(r["loss"]) for r in rows])
        means = [loss[i : i + 500].mean() for i in range(0, len(loss) - 499, 500)]
        checked += 1
        if not all(b < a for a, b in zip(means, means[1:])):
            failures.append(f"{path.stem}: {[round(m, 4) for m in means]}")
    record("training loss windows", not failures and checked > 0, f"{checked} stages; non-decreasing: {failures or 'none'}")
