import dataclasses
import os

import pytest
import torch
from hypothesis import HealthCheck, settings

from iadlmm.config import DataConfig, ModelConfig, RunConfig, TrainConfig
from iadlmm.synth import build_manifest

settings.register_profile("ci", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", max_examples=500, deadline=None)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ci"))

torch.set_num_threads(1)

# every dimension shrunk so a full train step takes milliseconds
MICRO_MODEL = ModelConfig(
    image_size=16,
    patch_size=8,
    d_vit=8,
    vit_blocks=1,
    vit_heads=2,
    d_qformer=8,
    n_base_queries=2,
    resampler_blocks=1,
    resampler_heads=2,
    lorra_rank=4,
    vpg_input=8,
    vpg_channels=(4, 8),
    tpg_input=8,
    tpg_channels=(4, 8, 16),
    d_llm=16,
    lm_blocks=1,
    lm_heads=2,
    context=128,
)

MICRO_DATA = DataConfig(n_train=6, n_test_normal=3, n_test_abnormal=3, image_size=16, area_frac_range=(0.02, 0.1))


def micro_run(**train) -> RunConfig:
    t = dict(batch_size=4, foundation_vision_steps=3, foundation_lm_steps=3, log_every=0)
    t.update(train)
    return RunConfig(data=MICRO_DATA, model=MICRO_MODEL, train=TrainConfig(**t))


@pytest.fixture(scope="session")
def micro_manifest(tmp_path_factory):
    return build_manifest(MICRO_DATA, tmp_path_factory.mktemp("micro_data"))


@pytest.fixture(scope="session")
def small_manifest(tmp_path_factory):
    cfg = dataclasses.replace(DataConfig(), n_train=8, n_test_normal=4, n_test_abnormal=4)
    return build_manifest(cfg, tmp_path_factory.mktemp("small_data"))


@pytest.fixture(scope="session")
def micro_stages(tmp_path_factory, micro_manifest):
    """Foundation, both stage-1 runs and a full finetune of the micro model, in float64."""
    from iadlmm.training import run_stage

    out = tmp_path_factory.mktemp("micro_run")
    results = {}
    for stage in ("foundation", "pretrain_tpg", "pretrain_vision", "finetune"):
        results[stage] = run_stage(micro_run(stage=stage, steps=4), micro_manifest, out, dtype=torch.float64)
    return out, results


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in mod.RESULTS:
            terminalreporter.write_line(line)
