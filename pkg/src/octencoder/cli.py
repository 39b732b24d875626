"""``octencoder`` command-line entry point.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .ablate import TOGGLES, ablate
from .checkpoint import latest_checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, load_config, save_resolved
from .dataset import MeshSet, from_synth, load_dir
from .errors import ConfigError, DataError, OctEncoderError
from .finetune import finetune
from .mae import make_mask, mae_forward, pretrain, write_history
from .mesh_io import export_points, load_mesh_auto
from .model import prepare_samples
from .octree import OctreeCache, build_octree, octree_stats
from .simplex import KINDS, rep_points
from .synth import KINDS as SYNTH_KINDS, write_dataset

log = logging.getLogger("octencoder")

GRAY = (128, 128, 128)
RED = (220, 30, 30)


def _overrides(args) -> dict:
    out: dict = {}
    if args.seed is not None:
        out["seed"] = args.seed
    if args.threads is not None:
        out["threads"] = args.threads
    return out


def _config(args, fallback: RunConfig | None = None) -> RunConfig:
    if args.config is None and fallback is not None:
        return load_config(None, {**fallback.model_dump(mode="json"), **_overrides(args)})
    return load_config(args.config, _overrides(args))


def _emit(obj) -> None:
    json.dump(obj, sys.stdout, indent=2, sort_keys=True)
    sys.stdout.write("\n")


# ---------------------------------------------------------------- subcommands


def cmd_synth(args, config: RunConfig) -> None:
    kind = args.kind or config.synth.kind
    n = args.n if args.n is not None else config.synth.n
    div = args.divisions if args.divisions is not None else config.synth.divisions
    if n < 1:
        raise ConfigError("--n must be >= 1")
    paths = write_dataset(kind, n, config.seed, args.out, div)
    save_resolved(config, args.out)
    _emit({"kind": kind, "n": len(paths), "out": str(args.out)})


def cmd_build_octree(args, config: RunConfig) -> None:
    mesh = load_mesh_auto(args.input)
    specs = config.branches
    if args.kind or args.depth or args.curve:
        base = specs[0]
        specs = [base.model_copy(update={k: v for k, v in
                                         (("kind", args.kind), ("depth", args.depth), ("curve", args.curve))
                                         if v is not None})]
    report = {"mesh": mesh.name or str(args.input), "vertices": mesh.num_vertices,
              "simplices": len(mesh.simplices), "k": mesh.k, "channels": list(mesh.channels),
              "branches": [octree_stats(build_octree(rep_points(mesh, s.kind), s.depth, s.curve))
                           for s in specs]}
    if args.out:
        out = Path(args.out)
        save_resolved(config, out)
        (out / "octree.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _emit(report)


def _dataset(args, config: RunConfig) -> MeshSet:
    if args.data:
        return load_dir(args.data)
    s = config.synth
    log.info("no --data given; generating %d %s meshes", s.n, s.kind)
    return from_synth(s.kind, s.n, config.seed, s.divisions)


def cmd_pretrain(args, config: RunConfig) -> None:
    data = _dataset(args, config)
    resume = None
    if args.resume:
        resume = latest_checkpoint(args.out) if args.resume == "latest" else Path(args.resume)
        if resume is None:
            raise DataError(f"no checkpoint to resume from in {args.out}")
    meshes = data.meshes if data.splits is None else [data.meshes[i] for i in data.indices("train")]
    params, history = pretrain(meshes, config, args.out, resume=resume)
    final = Path(args.out) / "final"
    save_checkpoint(final, params, config, config.optim.epochs, extra={"history": history})
    write_history(Path(args.out) / "history.csv", history)
    _emit({"epochs": len(history), "final": history[-1] if history else None, "checkpoint": str(final)})


def cmd_finetune(args, config_arg: RunConfig | None) -> None:
    pretrained = pre_config = None
    if args.ckpt:
        pretrained, pre_config, _ = load_checkpoint(args.ckpt)
    config = _config(args, pre_config)
    if args.epochs is not None:
        config = config.model_copy(update={"finetune": config.finetune.model_copy(update={"epochs": args.epochs})})
    task = args.task or config.finetune.task
    data = _dataset(args, config)
    if data.splits is None:
        raise DataError("finetuning needs a train/test split column in labels.csv")
    tr, te = data.indices("train"), data.indices("test")
    cache = OctreeCache()

    def samples(idx):
        return prepare_samples([data.meshes[i] for i in idx], config, cache,
                               None if data.labels is None else [data.labels[i] for i in idx],
                               None if data.vertex_labels is None else [data.vertex_labels[i] for i in idx])

    res = finetune(pretrained, samples(tr), samples(te), config, task=task, pre_config=pre_config)
    out = Path(args.out)
    save_resolved(config, out)
    save_checkpoint(out / "final", res.params, config, len(res.history),
                    extra={"history": res.history, "epochs_to_target": res.epochs_to_target})
    (out / "metrics.json").write_text(json.dumps(
        {"history": res.history, "epochs_to_target": res.epochs_to_target}, indent=2) + "\n")
    _emit({"task": task, "init": "pretrained" if pretrained is not None else "random",
           "final": res.final, "epochs_to_target": res.epochs_to_target})


def cmd_reconstruct(args, _unused: RunConfig | None) -> None:
    params, ck_config, _ = load_checkpoint(args.ckpt)
    config = _config(args, ck_config)
    if "decoder.head.W" not in params:
        raise ConfigError(f"{args.ckpt} has no decoder; reconstruct needs a pretraining checkpoint")
    mesh = load_mesh_auto(args.input)
    b = args.branch
    if not 0 <= b < len(config.branches):
        raise ConfigError(f"--branch {b} out of range for {len(config.branches)} branches")
    spec = config.branches[b]
    tree = build_octree(rep_points(mesh, spec.kind), spec.depth, spec.curve)
    ratio = config.mae.mask_ratio if args.mask_ratio is None else args.mask_ratio
    mask = make_mask(len(tree), ratio, (config.seed, 1, 0, 0, b))
    xyz_hat, feat_hat, _ = mae_forward(tree, params, mask, config, branch=b)
    lo, hi = tree.bbox
    to_world = lambda u: lo + u * (hi - lo)  # noqa: E731
    truth = to_world(tree.coords[mask.masked])
    recon = to_world(xyz_hat.data)
    pts = np.concatenate([truth, recon])
    cols = np.array([GRAY] * len(truth) + [RED] * len(recon)).reshape(-1, 3)
    export = Path(args.export)
    export.parent.mkdir(parents=True, exist_ok=True)
    export_points(pts, export, cols)
    save_resolved(config, export.parent)
    _emit({"tokens": len(tree), "masked": int(len(mask.masked)), "export": str(export)})


def cmd_ablate(args, config: RunConfig) -> None:
    toggles = [t.strip() for t in args.toggles.split(",") if t.strip()] if args.toggles else list(TOGGLES)
    data = _dataset(args, config)
    save_resolved(config, args.out)
    rows = ablate(config, toggles, data, args.out)
    _emit([{k: v for k, v in r.items()} for r in rows])


def cmd_stats(args, config: RunConfig) -> None:
    p = Path(args.input)
    if p.is_dir() and (p / "manifest.json").exists():
        params, ck_config, manifest = load_checkpoint(p)
        history = manifest["extra"].get("history", [])
        _emit({"checkpoint": str(p), "epoch": manifest["epoch"], "parameters": params.num_values(),
               "tensors": len(params), "config_hash": manifest["config_hash"],
               "last": history[-1] if history else None})
        return
    if p.is_dir():
        data = load_dir(p)
        counts = [m.num_vertices for m in data.meshes]
        out = {"meshes": len(data), "vertices_min": min(counts), "vertices_max": max(counts),
               "channels": sorted({c for m in data.meshes for c in m.channels})}
        if data.labels is not None:
            out["label_counts"] = {str(k): int(v) for k, v in
                                   zip(*np.unique(data.labels, return_counts=True))}
        _emit(out)
        return
    mesh = load_mesh_auto(p)
    _emit({"mesh": str(p), "vertices": mesh.num_vertices, "simplices": len(mesh.simplices),
           "k": mesh.k, "channels": list(mesh.channels),
           "extent": (mesh.vertices.max(axis=0) - mesh.vertices.min(axis=0)).tolist()})


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (unknown keys are rejected)")
    common.add_argument("--seed", type=int, help="root seed (overrides the config)")
    common.add_argument("--threads", type=int, help="BLAS thread limit (1 = bit-reproducible)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="octencoder", parents=[common],
                                description="Octree tokenization, windowed-attention encoding "
                                            "and masked-autoencoder pretraining for meshes.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic mesh dataset")
    s.add_argument("--kind", choices=SYNTH_KINDS)
    s.add_argument("--n", type=int)
    s.add_argument("--divisions", type=int, help="cube-grid cells per edge (6m^2+2 vertices)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("build-octree", parents=[common], help="print octree statistics as JSON")
    s.add_argument("--input", required=True)
    s.add_argument("--kind", "--points", dest="kind", choices=KINDS)
    s.add_argument("--depth", type=int)
    s.add_argument("--curve", choices=("zorder", "hilbert"))
    s.add_argument("--out", help="also write octree.json and the resolved config here")
    s.set_defaults(func=cmd_build_octree)

    s = sub.add_parser("pretrain", parents=[common], help="masked-autoencoder pretraining")
    s.add_argument("--data", help="mesh directory (default: generate from the synth config)")
    s.add_argument("--out", required=True)
    s.add_argument("--resume", help="checkpoint dir, or 'latest' to pick the newest in --out")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("finetune", parents=[common], help="train a task head")
    s.add_argument("--task", choices=("classify", "segment"))
    s.add_argument("--ckpt", help="pretrained checkpoint (omit for random init)")
    s.add_argument("--data")
    s.add_argument("--epochs", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_finetune, lazy_config=True)

    s = sub.add_parser("reconstruct", parents=[common], help="export masked/reconstructed points as PLY")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--mask-ratio", type=float)
    s.add_argument("--branch", type=int, default=0)
    s.add_argument("--export", required=True)
    s.set_defaults(func=cmd_reconstruct, lazy_config=True)

    s = sub.add_parser("ablate", parents=[common], help="one-factor-at-a-time ablation sweep")
    s.add_argument("--toggles", help=f"comma list from {','.join(TOGGLES)} (default: all)")
    s.add_argument("--data")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("stats", parents=[common], help="summarise a mesh, dataset dir or checkpoint")
    s.add_argument("--input", required=True)
    s.set_defaults(func=cmd_stats)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        config = None if getattr(args, "lazy_config", False) else _config(args)
        threads = args.threads or (config.threads if config is not None else 1)
        # overflow surfaces as a NumericError from the non-finite output check
        with threadpool_limits(limits=threads), np.errstate(over="ignore", invalid="ignore"):
            args.func(args, config)
    except OctEncoderError as exc:
        print(f"octencoder: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"octencoder: I/O error: {exc}", file=sys.stderr)
        return DataError.exit_code
    except FloatingPointError as exc:
        print(f"octencoder: numeric failure: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
