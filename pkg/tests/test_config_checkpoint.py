import json

import numpy as np
import pytest

from conftest import tiny_config
from octencoder.checkpoint import latest_checkpoint, load_checkpoint, save_checkpoint
from octencoder.config import RunConfig, load_config, parse_config, save_resolved
from octencoder.errors import ConfigError, DataError
from octencoder.model import init_params
from octencoder.seeding import rng_for


def test_defaults_validate():
    cfg = parse_config({})
    assert cfg.mae.mask_ratio == 0.6 and cfg.mae.lam == 1.0
    assert [b.kind for b in cfg.branches] == ["vertices", "face-centroids"]
    assert "properties" in RunConfig.json_schema()


@pytest.mark.parametrize("bad", [
    {"colour": "red"},
    {"model": {"dim": 10, "heads": 4}},
    {"model": {"depth_of_field": 1}},
    {"mae": {"mask_ratio": 1.0}},
    {"branches": []},
    {"branches": [{"kind": "quads"}]},
    {"optim": {"lr": -1}},
])
def test_invalid_configs_rejected(bad):
    with pytest.raises(ConfigError):
        parse_config(bad)


def test_load_config_file_and_overrides(tmp_path):
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"seed": 3, "model": {"dim": 16}}))
    cfg = load_config(p, {"seed": 9})
    assert cfg.seed == 9 and cfg.model.dim == 16 and cfg.model.heads == 4
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    (tmp_path / "broken.json").write_text("{")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "broken.json")


def test_resolved_snapshot_round_trip(tmp_path):
    cfg = tiny_config(seed=11)
    path = save_resolved(cfg, tmp_path)
    again = load_config(path)
    assert again == cfg and again.digest() == cfg.digest()


def test_rng_purposes_independent():
    a = rng_for(0, "mask").random(4)
    assert np.array_equal(a, rng_for(0, "mask").random(4))
    assert not np.array_equal(a, rng_for(0, "init").random(4))
    assert not np.array_equal(a, rng_for(1, "mask").random(4))
    with pytest.raises(KeyError):
        rng_for(0, "weather")


def test_checkpoint_round_trip_bit_exact(tmp_path):
    cfg = tiny_config()
    params = init_params(cfg, 2)
    params.opt_state["m/branch0.proj.W"] = np.random.default_rng(0).normal(size=(5, 8))
    params.step_count = 17
    state = rng_for(0, "shuffle").bit_generator.state
    save_checkpoint(tmp_path / "ck", params, cfg, epoch=4, rng_state=state, extra={"note": 1})
    loaded, lcfg, manifest = load_checkpoint(tmp_path / "ck")
    assert lcfg == cfg and manifest["epoch"] == 4 and manifest["extra"] == {"note": 1}
    assert manifest["rng_state"] == state and loaded.step_count == 17
    assert loaded.names() == params.names()
    for name, t in params.items():
        assert loaded[name].data.tobytes() == t.data.tobytes()
    assert np.array_equal(loaded.opt_state["m/branch0.proj.W"], params.opt_state["m/branch0.proj.W"])
    save_checkpoint(tmp_path / "ck2", loaded, lcfg, epoch=4, rng_state=state, extra={"note": 1})
    for f in ("tensors.bin", "manifest.json"):
        assert (tmp_path / "ck" / f).read_bytes() == (tmp_path / "ck2" / f).read_bytes()


def test_checkpoint_errors(tmp_path):
    with pytest.raises(DataError):
        load_checkpoint(tmp_path)
    cfg = tiny_config()
    save_checkpoint(tmp_path / "ck", init_params(cfg, 2), cfg)
    blob = (tmp_path / "ck" / "tensors.bin").read_bytes()
    (tmp_path / "ck" / "tensors.bin").write_bytes(blob[:-8])
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "ck")


def test_latest_checkpoint(tmp_path):
    cfg = tiny_config()
    assert latest_checkpoint(tmp_path) is None
    for e in (2, 10, 4):
        save_checkpoint(tmp_path / f"epoch-{e:05d}", init_params(cfg, 0), cfg, e)
    assert latest_checkpoint(tmp_path).name == "epoch-00010"
