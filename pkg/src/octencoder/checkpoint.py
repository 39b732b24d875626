"""Checkpoint directories.

``<dir>/tensors.bin`` holds raw little-endian float64 data back to back;
``<dir>/manifest.json`` lists each entry's name, shape, byte offset and group
(``param`` or ``opt``), plus the config, its SHA-256, epoch, optimizer step and
the RNG state active when the checkpoint was taken.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .config import RunConfig, parse_config
from .errors import DataError
from .tensorcore import ParamStore

FORMAT = "octencoder-ckpt/1"


def save_checkpoint(directory, params: ParamStore, config: RunConfig, epoch: int = 0,
                    rng_state: dict | None = None, extra: dict | None = None) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(d / "tensors.bin", "wb") as fh:
        groups = [("param", params.state_arrays().items()), ("opt", sorted(params.opt_state.items()))]
        for group, items in groups:
            for name, arr in items:
                raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
                fh.write(raw)
                entries.append({"name": name, "group": group, "shape": list(arr.shape),
                                "offset": offset, "nbytes": len(raw),
                                "frozen": group == "param" and not params[name].requires_grad})
                offset += len(raw)
    manifest = {
        "format": FORMAT,
        "config_hash": config.digest(),
        "config": config.model_dump(mode="json"),
        "epoch": int(epoch),
        "step_count": int(params.step_count),
        "rng_state": rng_state,
        "entries": entries,
        "extra": extra or {},
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return d


def load_checkpoint(directory) -> tuple[ParamStore, RunConfig, dict]:
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
        blob = (d / "tensors.bin").read_bytes()
    except FileNotFoundError as exc:
        raise DataError(f"incomplete checkpoint at {d}: {exc.filename} missing") from None
    if manifest.get("format") != FORMAT:
        raise DataError(f"{d}: unknown checkpoint format {manifest.get('format')!r}")
    params = ParamStore()
    for e in manifest["entries"]:
        raw = blob[e["offset"]:e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise DataError(f"{d}: truncated tensor {e['name']}")
        arr = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(e["shape"])
        if e["group"] == "param":
            params.add(e["name"], arr).requires_grad = not e.get("frozen", False)
        else:
            params.opt_state[e["name"]] = arr.copy()
    params.step_count = manifest["step_count"]
    config = parse_config(manifest["config"])
    return params, config, manifest


def latest_checkpoint(directory) -> Path | None:
    d = Path(directory)
    cands = sorted(p for p in d.glob("epoch-*") if (p / "manifest.json").exists())
    return cands[-1] if cands else None
