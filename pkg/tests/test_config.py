import json

import pytest

from iadlmm.config import STAGE_DEFAULTS, ConfigError, ModelConfig, RunConfig, TrainConfig, load_run_config


def test_defaults_give_expected_token_counts():
    m = ModelConfig()
    assert m.n_expert_tokens == 9
    assert m.n_expert_queries == 49


def test_unknown_keys_are_rejected(tmp_path):
    with pytest.raises(ConfigError, match="lr_strat"):
        RunConfig.from_dict({"train": {"lr_strat": 1.0}})
    with pytest.raises(ConfigError, match="trian"):
        RunConfig.from_dict({"trian": {}})


def test_config_roundtrips_through_json(tmp_path):
    run = RunConfig.from_dict({"train": {"batch_size": 8}, "data": {"n_train": 7}})
    path = tmp_path / "c.json"
    path.write_text(json.dumps(run.to_dict()))
    assert load_run_config(path) == run


def test_missing_or_broken_config_file(tmp_path):
    with pytest.raises(ConfigError):
        load_run_config(tmp_path / "nope.json")
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError):
        load_run_config(tmp_path / "bad.json")


def test_seed_override_from_environment(monkeypatch):
    monkeypatch.setenv("MYRIAD_SEED", "17")
    run = load_run_config(None)
    assert (run.data.global_seed, run.expert.seed, run.train.seed) == (17, 17, 17)
    monkeypatch.setenv("MYRIAD_SEED", "x")
    with pytest.raises(ConfigError):
        load_run_config(None)


def test_image_size_mismatch_is_rejected():
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"model": {"image_size": 32}})


def test_generator_widths_must_match_consumers():
    with pytest.raises(ConfigError):
        ModelConfig(tpg_channels=(8, 16, 64)).validate()
    with pytest.raises(ConfigError):
        ModelConfig(vpg_input=30).validate()


def test_resolved_fills_stage_defaults():
    for stage, d in STAGE_DEFAULTS.items():
        t = TrainConfig(stage=stage).resolved()
        assert (t.steps, t.lr_start, t.lr_end) == (d["steps"], d["lr_start"], d["lr_end"])
    assert TrainConfig(stage="finetune", steps=5).resolved().steps == 5


def test_ablation_names():
    t = TrainConfig().ablated(["vpg", "lorra"])
    assert (t.use_tpg, t.use_lorra, t.use_vpg) == (True, False, False)
    with pytest.raises(ConfigError):
        TrainConfig().ablated(["lora"])


def test_expert_mix_parses_to_nested_tuples_and_needs_oracle():
    run = RunConfig.from_dict({"train": {"expert_mix": [[0, 0, 0], [1.0, 0.2, 2]]}})
    assert run.train.expert_mix == ((0, 0, 0), (1.0, 0.2, 2))
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"train": {"expert_mix": [[0, 0]]}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"expert": {"kind": "null"}, "train": {"expert_mix": [[0, 0, 0]]}})
