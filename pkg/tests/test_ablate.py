import csv

import pytest

from conftest import tiny_config
from octencoder.ablate import COLUMNS, TOGGLES, ablate, describe, variant
from octencoder.dataset import from_synth
from octencoder.errors import ConfigError


@pytest.fixture(scope="module")
def data():
    return from_synth("boxes-vs-spheres", 6, 0, divisions=2)


def cfg():
    return tiny_config(optim={"epochs": 1}, finetune={"epochs": 1})


def test_variants_flip_one_component():
    base = tiny_config(branches=[{"kind": "vertices", "depth": 3}, {"kind": "face-centroids", "depth": 3}])
    assert variant(base, "cpe").model.cpe is False
    assert {b.curve for b in variant(base, "curve").branches} == {"hilbert"}
    assert len(variant(base, "branches").branches) == 1
    assert len(variant(variant(base, "branches"), "branches").branches) == 2
    assert variant(base, "mae").mae.enabled is False
    for t in TOGGLES:
        v = variant(base, t)
        assert describe(v, t) != describe(base, t)
    with pytest.raises(ConfigError):
        variant(base, "dropout")


def test_single_toggle_two_runs(data, tmp_path):
    rows = ablate(cfg(), ["curve"], data, tmp_path)
    assert [r["run"] for r in rows] == ["base", "curve"]
    assert rows[1]["setting"] == "hilbert"
    with open(tmp_path / "ablation.csv") as fh:
        table = list(csv.DictReader(fh))
    assert len(table) == 2 and tuple(table[0]) == COLUMNS
    assert (tmp_path / "ablation.md").read_text().count("\n") == 4
    assert (tmp_path / "curve" / "config.resolved.json").exists()


def test_all_toggles_five_runs(data):
    rows = ablate(cfg(), list(TOGGLES), data)
    assert len(rows) == 5
    assert rows[-1]["setting"] == "random-init" and rows[-1]["pretrain_final_loss"] is None


def test_base_run_deterministic(data):
    a = ablate(cfg(), ["cpe"], data)
    b = ablate(cfg(), ["mae"], data)
    assert a[0] == b[0]


def test_unknown_toggle(data):
    with pytest.raises(ConfigError):
        ablate(cfg(), ["dropout"], data)
