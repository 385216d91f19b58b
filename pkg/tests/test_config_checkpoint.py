import json

import pytest

from sptlab.checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint, write_checkpoint
from sptlab.config import ConfigError, config_from_dict, config_hash, parse_config, serialize_config
from sptlab.model import ModelConfig, init_params
from sptlab.numeric import frobenius_distance


def _write(tmp_path, obj):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(obj))
    return p


def test_minimal_config_gets_defaults(tmp_path):
    cfg = parse_config(_write(tmp_path, {"dataset": 3, "stage": "spt", "seed": 1}))
    assert cfg.lr == 1e-3 and cfg.epochs == 10 and cfg.batch_size == 32
    assert cfg.dataset.seed == 3 and cfg.mask_fraction == 0.15
    ft = config_from_dict({"stage": "finetune", "seed": 0})
    assert ft.epochs == 20 and ft.batch_size == 100


def test_unknown_key_named(tmp_path):
    with pytest.raises(ConfigError, match="lr_schdule"):
        parse_config(_write(tmp_path, {"stage": "spt", "seed": 1, "lr_schdule": "cosine"}))
    with pytest.raises(ConfigError, match="dataset.bogus"):
        config_from_dict({"stage": "spt", "seed": 1, "dataset": {"bogus": 1}})
    with pytest.raises(ConfigError, match="model"):
        config_from_dict({"stage": "spt", "seed": 1, "model": {"widht": 3}})


@pytest.mark.parametrize("obj,key", [
    ({"stage": "spt"}, "seed"),
    ({"stage": "pretrain", "seed": 0}, "stage"),
    ({"stage": "spt", "seed": 0, "lr": "fast"}, "lr"),
    ({"stage": "spt", "seed": 0, "epochs": -1}, "epochs"),
    ({"stage": "scratch", "seed": 0, "init": {"checkpoint": "x"}}, "init"),
])
def test_schema_violations_name_the_key(obj, key):
    with pytest.raises(ConfigError, match=key):
        config_from_dict(obj)


def test_round_trip_and_hash(tmp_path):
    cfg = config_from_dict({"stage": "finetune", "seed": 4, "init": {"checkpoint": "ck", "select": "qk"},
                            "model": {"pe_variant": "rope"}, "dataset": {"seed": 2, "flip_fraction": 0.1}})
    p = tmp_path / "c.json"
    p.write_text(serialize_config(cfg))
    again = parse_config(p)
    assert again == cfg and serialize_config(again) == serialize_config(cfg)
    assert config_hash(cfg) == config_hash(again)
    assert config_hash(cfg) != config_hash(cfg.replace(seed=5))
    assert len(config_hash(cfg)) == 12


def test_checkpoint_round_trip(tmp_path):
    cfg = ModelConfig(depth=2, width=8, heads=2, toy_mode=False)
    params = init_params(cfg, 3)
    save_checkpoint(params, (cfg, {"stage": "spt"}), tmp_path / "ck")
    ck = load_checkpoint(tmp_path / "ck")
    assert ck.config == cfg and ck.provenance == {"stage": "spt"}
    for k in params:
        assert frobenius_distance(params[k], ck.params[k]) == 0
        assert params[k].tobytes() == ck.params[k].tobytes()


def test_manifest_order_is_canonical(tmp_path):
    cfg = ModelConfig()
    params = init_params(cfg, 0)
    shuffled = {k: params[k] for k in reversed(list(params))}
    write_checkpoint(Checkpoint(shuffled, cfg), tmp_path / "a")
    write_checkpoint(Checkpoint(params, cfg), tmp_path / "b")
    names = [b["name"] for b in json.loads((tmp_path / "a" / "manifest.json").read_text())["blocks"]]
    assert names == sorted(names)
    assert (tmp_path / "a" / "payload.bin").read_bytes() == (tmp_path / "b" / "payload.bin").read_bytes()
    size = sum(v.size for v in params.values()) * 8
    assert (tmp_path / "a" / "payload.bin").stat().st_size == size


def test_truncated_payload_reports_byte_counts(tmp_path):
    cfg = ModelConfig()
    save_checkpoint(init_params(cfg, 0), cfg, tmp_path / "ck")
    payload = tmp_path / "ck" / "payload.bin"
    data = payload.read_bytes()
    payload.write_bytes(data[:-8])
    with pytest.raises(CheckpointError, match=f"payload has {len(data) - 8} bytes, expected {len(data)}"):
        load_checkpoint(tmp_path / "ck")


def test_corrupted_byte_changes_a_block(tmp_path):
    # no checksum: a flipped byte loads but yields a differing block
    cfg = ModelConfig()
    params = init_params(cfg, 0)
    save_checkpoint(params, cfg, tmp_path / "ck")
    payload = tmp_path / "ck" / "payload.bin"
    data = bytearray(payload.read_bytes())
    data[3] ^= 0xFF
    payload.write_bytes(bytes(data))
    ck = load_checkpoint(tmp_path / "ck")
    assert any(frobenius_distance(ck.params[k], params[k]) > 0 for k in params)


def test_version_mismatch(tmp_path):
    cfg = ModelConfig()
    save_checkpoint(init_params(cfg, 0), cfg, tmp_path / "ck")
    m = json.loads((tmp_path / "ck" / "manifest.json").read_text())
    m["format_version"] = 99
    (tmp_path / "ck" / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(CheckpointError, match="version 99"):
        load_checkpoint(tmp_path / "ck")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing")
