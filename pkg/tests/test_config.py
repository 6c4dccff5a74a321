import json

import pytest

from transda.config import (
    ConfigError,
    ExperimentConfig,
    apply_overrides,
    from_dict,
    load_config,
    save_config,
    with_changes,
)


def test_defaults_validate_and_roundtrip(tmp_path):
    cfg = ExperimentConfig().validate()
    assert cfg.optim.lr_fc == 6e-5 and cfg.optim.weight_decay == 0.01 and cfg.optim.lr_ds == 1e-4
    assert cfg.schedule.rounds == 3 and cfg.smoothing.m == 0.999
    back = load_config(save_config(cfg, tmp_path / "c.json"))
    assert back == cfg and back.config_hash() == cfg.config_hash()


def test_hash_ignores_output_dir_only():
    a = ExperimentConfig()
    assert with_changes(a, output_dir="/x").config_hash() == a.config_hash()
    assert with_changes(a, seed=1).config_hash() != a.config_hash()


def test_variant_name():
    cfg = with_changes(ExperimentConfig(), **{"smoothing.m": 0.9, "dynamic_weights": False})
    assert cfg.variant_name() == "local_vit-binary-dyn0-pl1-fa1-m0.9"


@pytest.mark.parametrize("changes,needle", [
    ({"discriminator_mode": "none"}, "forbids dynamic_weights"),
    ({"discriminator_mode": "none", "dynamic_weights": False}, "forbids smoothing.mo_fa"),
    ({"discriminator_mode": "pixel"}, "discriminator_mode must be one of"),
    ({"schedule.rounds": 0}, "rounds"),
    ({"batch_size": 0}, "batch_size"),
    ({"tracking.stride": 0}, "stride"),
    ({"smoothing.m": 1.0}, "[0, 1)"),
    ({"extractor.embed_dim": 30}, "divisible"),
    ({"optim.lr_fc": -1.0}, "nonnegative"),
])
def test_illegal_configs_explain_themselves(changes, needle):
    with pytest.raises(ConfigError) as info:
        with_changes(ExperimentConfig(), **changes)
    assert needle in str(info.value)


def test_unknown_key_lists_valid_keys():
    with pytest.raises(ConfigError) as info:
        from_dict({"smoothing": {"mo_x": True}})
    msg = str(info.value)
    assert "unknown config key 'smoothing.mo_x'" in msg and "mo_pl, mo_fa, m" in msg
    with pytest.raises(ConfigError, match="'bogus'"):
        from_dict({"bogus": 1})


def test_overrides_parse_json_values():
    data = apply_overrides({}, ["smoothing.m=0.9", "extractor.kind=cnn", "data.augment=false",
                                "extractor.image_size=[32,32]"])
    assert data == {"smoothing": {"m": 0.9}, "extractor": {"kind": "cnn", "image_size": [32, 32]},
                    "data": {"augment": False}}
    cfg = from_dict(data)
    assert cfg.extractor.image_size == (32, 32) and cfg.extractor.kind == "cnn"
    with pytest.raises(ConfigError, match="key=value"):
        apply_overrides({}, ["smoothing.m"])
    with pytest.raises(ConfigError, match="not a section"):
        apply_overrides({"seed": 1}, ["seed.x=2"])


def test_load_errors(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text("{nope")
    with pytest.raises(ConfigError, match="invalid JSON"):
        load_config(tmp_path / "bad.json")


def test_load_with_overrides(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seed": 3}))
    cfg = load_config(p, ["seed=4", "optim.lambda_adv=0.5"])
    assert cfg.seed == 4 and cfg.optim.lambda_adv == 0.5


def test_nested_shift_survives_roundtrip():
    cfg = with_changes(ExperimentConfig(), **{"data.shift.noise_sigma": 0.0})
    assert from_dict(cfg.to_dict()).data.shift.noise_sigma == 0.0
