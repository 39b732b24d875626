"""One-factor-at-a-time ablation sweep on the synthetic classification benchmark."""
from __future__ import annotations

import csv
import logging
from pathlib import Path
from typing import Sequence

from .config import RunConfig, parse_config, save_resolved
from .dataset import MeshSet
from .errors import ConfigError, DataError
from .finetune import finetune
from .mae import pretrain
from .model import prepare_samples
from .octree import OctreeCache

log = logging.getLogger(__name__)

TOGGLES = ("cpe", "curve", "branches", "mae")
COLUMNS = ("run", "toggle", "setting", "accuracy", "sensitivity", "specificity",
           "epochs_to_target", "pretrain_final_loss")


def describe(config: RunConfig, toggle: str) -> str:
    if toggle == "cpe":
        return "cpe" if config.model.cpe else "no-cpe"
    if toggle == "curve":
        return "/".join(sorted({b.curve for b in config.branches}))
    if toggle == "branches":
        return "+".join(b.kind for b in config.branches)
    if toggle == "mae":
        return "mae-pretrain" if config.mae.enabled else "random-init"
    raise ConfigError(f"unknown ablation toggle {toggle!r}; expected one of {TOGGLES}")


def variant(config: RunConfig, toggle: str) -> RunConfig:
    """``config`` with exactly one component flipped."""
    data = config.model_dump(mode="json")
    if toggle == "cpe":
        data["model"]["cpe"] = not config.model.cpe
    elif toggle == "curve":
        for b in data["branches"]:
            b["curve"] = "hilbert" if b["curve"] == "zorder" else "zorder"
    elif toggle == "branches":
        if len(data["branches"]) > 1:
            data["branches"] = data["branches"][:1]
        else:
            first = data["branches"][0]
            kind = "face-centroids" if first["kind"] != "face-centroids" else "vertices"
            data["branches"].append({**first, "kind": kind})
    elif toggle == "mae":
        data["mae"]["enabled"] = not config.mae.enabled
    else:
        raise ConfigError(f"unknown ablation toggle {toggle!r}; expected one of {TOGGLES}")
    return parse_config(data)


def run_benchmark(config: RunConfig, data: MeshSet, cache: OctreeCache | None = None) -> dict:
    """Pretrain on the train split (if MAE is on), then finetune a classifier and score the test split."""
    if data.labels is None or data.splits is None:
        raise DataError("the benchmark needs a labelled dataset with a train/test split")
    cache = cache or OctreeCache()
    tr, te = data.indices("train"), data.indices("test")
    if not tr or not te:
        raise DataError("the benchmark needs non-empty train and test splits")
    train = prepare_samples([data.meshes[i] for i in tr], config, cache, [data.labels[i] for i in tr])
    test = prepare_samples([data.meshes[i] for i in te], config, cache, [data.labels[i] for i in te])
    pretrained, loss = None, None
    if config.mae.enabled:
        pretrained, history = pretrain(train, config)
        loss = history[-1]["total"] if history else None
    res = finetune(pretrained, train, test, config, task="classify", pre_config=config)
    final = res.final
    return {"accuracy": final.get("accuracy"), "sensitivity": final.get("sensitivity"),
            "specificity": final.get("specificity"), "epochs_to_target": res.epochs_to_target,
            "pretrain_final_loss": loss, "history": res.history}


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def write_report(rows: Sequence[dict], out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, md_path = out / "ablation.csv", out / "ablation.md"
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COLUMNS, lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r[k]) for k in COLUMNS})
    lines = ["| " + " | ".join(COLUMNS) + " |", "|" + "---|" * len(COLUMNS)]
    lines += ["| " + " | ".join(_fmt(r.get(k)) for k in COLUMNS) + " |" for r in rows]
    md_path.write_text("\n".join(lines) + "\n")
    return csv_path, md_path


def ablate(config: RunConfig, toggles: Sequence[str], data: MeshSet, out_dir=None) -> list[dict]:
    """Base run plus one run per toggle, all with the same seed and data."""
    toggles = list(dict.fromkeys(toggles))
    for t in toggles:
        describe(config, t)
    runs = [("base", "-", config)] + [(f"{t}", t, variant(config, t)) for t in toggles]
    cache = OctreeCache()
    rows = []
    for name, toggle, cfg in runs:
        log.info("ablation run %s", name)
        if out_dir is not None:
            save_resolved(cfg, Path(out_dir) / name)
        res = run_benchmark(cfg, data, cache)
        setting = describe(cfg, toggle) if toggle != "-" else "base"
        rows.append({"run": name, "toggle": toggle, "setting": setting,
                     **{k: res[k] for k in COLUMNS[3:]}})
    if out_dir is not None:
        write_report(rows, out_dir)
    return rows
