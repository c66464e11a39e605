"""Command line entry point: data generation, training, tracking, evaluation and ablations.

Every subcommand reads an optional JSON config (--config) whose keys are
overridden by explicit flags, and writes a manifest.json next to its outputs.
Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

log = logging.getLogger("pointtrack3d")

CACHE_ENV = "POINTTRACK3D_CACHE"

GEN_DEFAULTS = {"num_sequences": 4, "num_frames": 24, "points_per_frame": 2048, "num_queries": 32,
                "kind": "default", "query_start": "random"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


# -- helpers ----------------------------------------------------------------------------------------


def _load_config(path):
    if not path:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as err:
        raise UsageError(f"config {path} is not valid JSON: {err}") from None


def _merge(config, args, keys):
    """Config values overridden by flags that were given explicitly."""
    out = dict(config)
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            out[k] = v
    return out


def _hash_config(cfg):
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def _file_hash(path):
    if path is None or not Path(path).exists():
        return None
    from .checkpoint import file_hash
    return file_hash(path)


def write_manifest(out_dir, command, config, seed, checkpoint=None, extra=None):
    """manifest.json: config echo, seed and checkpoint content hash (no timestamps, so reruns match)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"command": command, "config": config, "seed": seed,
                "checkpoint_sha256": _file_hash(checkpoint), **(extra or {})}
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return manifest


def _sequence_dirs(data):
    root = Path(data)
    if (root / "manifest.json").exists() and (root / "frames").is_dir():
        return [root]
    dirs = sorted(p for p in root.iterdir() if (p / "frames").is_dir()) if root.is_dir() else []
    if not dirs:
        raise FileNotFoundError(f"no sequences under {data}")
    return dirs


def _load_dataset(data):
    from .synthdata import read_sequence
    return [read_sequence(p) for p in _sequence_dirs(data)]


def _data_dir(args, config):
    data = getattr(args, "data", None) or config.get("data")
    if data:
        return data
    cache = os.environ.get(CACHE_ENV)
    if cache:
        return cache
    raise UsageError("no dataset given: pass --data or set " + CACHE_ENV)


def _gen_one(job):
    from .synthdata import generate_sequence, random_script, write_sequence

    index, cfg, seed, out = job
    rng = np.random.default_rng([seed, index])
    script = random_script(rng, kind=cfg["kind"], num_frames=cfg["num_frames"],
                           points_per_frame=cfg["points_per_frame"], num_queries=cfg["num_queries"],
                           query_start=cfg["query_start"])
    rec = generate_sequence(script, int(rng.integers(2 ** 31)))
    write_sequence(rec, Path(out) / f"seq_{index:04d}")
    return index


def _workers(args, default):
    w = getattr(args, "workers", None)
    return max(1, w if w is not None else default)


# -- subcommands ------------------------------------------------------------------------------------


def cmd_gen(args):
    cfg = {**GEN_DEFAULTS, **_merge(_load_config(args.config), args, ["num_sequences", "num_frames"])}
    unknown = set(cfg) - set(GEN_DEFAULTS)
    if unknown:
        raise UsageError(f"unknown gen config keys: {sorted(unknown)}")
    seed = args.seed if args.seed is not None else cfg.pop("seed", 0)
    cfg.pop("seed", None)
    out = args.out
    if out is None:
        cache = os.environ.get(CACHE_ENV)
        if not cache:
            raise UsageError("gen needs --out or " + CACHE_ENV)
        out = Path(cache) / f"synth_{_hash_config({**cfg, 'seed': seed})}"
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(i, cfg, seed, str(out)) for i in range(cfg["num_sequences"])]
    workers = _workers(args, os.cpu_count() or 1)
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(min(workers, len(jobs))) as pool:
            list(pool.map(_gen_one, jobs))
    else:
        for j in jobs:
            _gen_one(j)
    write_manifest(out, "gen", cfg, seed)
    print(f"wrote {len(jobs)} sequences to {out}")
    return 0


def _train_config(args, config, stage):
    from .training import TrainConfig

    keys = ["steps", "batch_size", "clip_length", "lr", "max_queries"]
    cfg = _merge({k: v for k, v in config.items() if k not in ("data", "model")}, args, keys)
    if args.seed is not None:
        cfg["seed"] = args.seed
    cfg["stage"] = stage
    cfg["out_dir"] = str(args.out)
    try:
        return TrainConfig(**cfg)
    except TypeError as err:
        raise UsageError(f"bad training config: {err}") from None


def cmd_pretrain(args):
    from .model import ModelConfig, build_model
    from .training import pretrain_sceneflow

    config = _load_config(args.config)
    tc = _train_config(args, config, "pretrain")
    data = _load_dataset(_data_dir(args, config))
    net = build_model(ModelConfig.from_dict(config.get("model", {})), seed=tc.seed)
    pretrain_sceneflow(tc, data, net, resume=args.resume)
    ckpt = Path(args.out) / "pretrain.ckpt"
    write_manifest(args.out, "pretrain-sf", tc.to_dict(), tc.seed, ckpt)
    print(f"checkpoint: {ckpt}")
    return 0


def cmd_train(args):
    from .model import ModelConfig, build_model, load_model
    from .training import train_tracker

    config = _load_config(args.config)
    tc = _train_config(args, config, args.stage or "track")
    data = _load_dataset(_data_dir(args, config))
    if args.checkpoint:
        net = load_model(args.checkpoint)
        if "model" in config:
            # ablation switches (appearance schedule, motion prior) apply on top of the stage-1 weights
            cfg = ModelConfig.from_dict({**net.config.to_dict(), **config["model"]})
            fresh = build_model(cfg, seed=tc.seed)
            fresh.load_state_dict(net.state_dict())
            net = fresh
    else:
        log.warning("no stage-1 checkpoint given; training the tracker from a random backbone")
        net = build_model(ModelConfig.from_dict(config.get("model", {})), seed=tc.seed)
    train_tracker(tc, data, net, resume=args.resume)
    ckpt = Path(args.out) / "track.ckpt"
    write_manifest(args.out, "train", tc.to_dict(), tc.seed, ckpt, {"init_checkpoint": args.checkpoint})
    print(f"checkpoint: {ckpt}")
    return 0


def _require(args, *names):
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n, None) is None]
    if missing:
        raise UsageError(f"{args.command} requires {', '.join(missing)}")


def cmd_track(args):
    from .evalkit import metrics_for
    from .model import load_model
    from .synthdata import read_sequence
    from .tracker import timed, track_record, write_predictions

    _require(args, "checkpoint", "data", "out")
    config = _load_config(args.config)
    net = load_model(args.checkpoint).eval()
    fuse = config.get("fuse", True)
    out = Path(args.out)
    results = {}
    for seq in _sequence_dirs(args.data):
        rec = read_sequence(seq)
        traj, elapsed = timed(track_record, net, rec, fuse=fuse)
        dst = out / seq.name if len(_sequence_dirs(args.data)) > 1 else out
        write_predictions(traj, dst, checkpoint_hash=net.checkpoint_hash, elapsed=round(elapsed, 3))
        rep = metrics_for(traj)
        (dst / "metrics.json").write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n")
        results[seq.name] = rep
    write_manifest(out, "track", {"data": str(args.data), "fuse": fuse}, args.seed, args.checkpoint)
    from .evalkit import format_table
    print(format_table(results))
    return 0


def cmd_eval(args):
    from .evalkit import compute_metrics, format_table
    from .synthdata import read_sequence, read_tracks_csv

    _require(args, "pred", "gt")
    space = args.space or "3d"
    if space == "2d" and args.data is None:
        cols = ("u", "v")
    else:
        cols = ("x", "y", "z")
    pid, ppos, pvis = read_tracks_csv(args.pred, cols)
    gid, gpos, gvis = read_tracks_csv(args.gt, cols)
    if not np.array_equal(pid, gid) or ppos.shape != gpos.shape:
        raise ValueError("misaligned records: prediction and ground truth cover different queries or frames")
    cameras = None
    if space == "2d" and args.data is not None:
        cameras = read_sequence(args.data).cameras
    # frames absent from the prediction count as failures
    ppos = np.where(np.isnan(ppos), 1e6, ppos)
    rep = compute_metrics(ppos, pvis, gpos, gvis, space=space, cameras=cameras, evaluate=~np.isnan(gpos).any(-1))
    table = format_table({Path(args.pred).stem: rep})
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n")
        (out / "table.txt").write_text(table + "\n")
        write_manifest(out, "eval", {"pred": str(args.pred), "gt": str(args.gt), "space": space}, args.seed)
    print(table)
    return 0


def cmd_lift2d(args):
    from .evalkit import lift_2d_tracks
    from .synthdata import read_sequence, read_tracks_csv, write_tracks_csv

    _require(args, "tracks2d", "data", "out")
    mode = args.mode or "bilinear"
    if mode not in ("bilinear", "nearest"):
        raise UsageError("lift2d --mode must be bilinear or nearest")
    rec = read_sequence(args.data)
    qid, uv, vis = read_tracks_csv(args.tracks2d, ("u", "v"))
    vis = vis & ~np.isnan(uv).any(-1)
    traj = lift_2d_tracks(uv, vis, rec.depth_maps, mode, query_ids=qid)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_tracks_csv(out / "tracks.csv", traj.query_ids, traj.positions, traj.visible)
    write_manifest(out, "lift2d", {"tracks2d": str(args.tracks2d), "data": str(args.data), "mode": mode},
                   args.seed, extra={"lifted_queries": int(len(traj.query_ids)),
                                     "skipped_queries": int(len(qid) - len(traj.query_ids))})
    print(f"lifted {len(traj.query_ids)} of {len(qid)} queries to {out / 'tracks.csv'}")
    return 0


def _parse_angles(text):
    try:
        return tuple(float(a) if "." in a else int(a) for a in text.split(",") if a.strip())
    except ValueError:
        raise UsageError(f"bad --angles {text!r}") from None


def cmd_ablate(args):
    from .evalkit import (ROTATION_ANGLES, format_rotation_table, format_table, interpolation_ablation,
                          rotated_view_eval)
    from .model import load_model
    from .tracker import track_record

    _require(args, "data")
    mode = args.mode or "rotation"
    records = _load_dataset(args.data)
    out = Path(args.out) if args.out else None
    if mode == "rotation":
        angles = _parse_angles(args.angles) if args.angles else ROTATION_ANGLES
        rows = {}
        sources = {"gt-tracks": None}
        if args.checkpoint:
            sources = {"tracker": load_model(args.checkpoint).eval()}
        for name, net in sources.items():
            preds, gts, vis, pvis = [], [], [], []
            for rec in records:
                if net is None:
                    preds.append(rec.tracks)
                    pvis.append(rec.visible)
                else:
                    traj = track_record(net, rec)
                    preds.append(traj.positions)
                    pvis.append(traj.visible)
                gts.append(rec.tracks)
                vis.append(rec.visible)
            per_seq = [rotated_view_eval(p, g, v, rec.cameras[0], angles, pv)
                       for p, g, v, pv, rec in zip(preds, gts, vis, pvis, records)]
            rows[name] = {a: {"delta_avg": _mean_or_none([r[a]["delta_avg"] for r in per_seq]),
                              "excluded": sum(r[a]["excluded"] for r in per_seq)} for a in angles}
        table = format_rotation_table(rows)
        result = {name: {str(a): v for a, v in res.items()} for name, res in rows.items()}
    elif mode == "interpolation":
        reports = interpolation_ablation(records, seed=args.seed or 0)
        table = format_table(reports)
        result = {k: v.to_dict() for k, v in reports.items()}
    else:
        raise UsageError("ablate --mode must be rotation or interpolation")
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
        (out / "table.txt").write_text(table + "\n")
        write_manifest(out, "ablate", {"mode": mode, "data": str(args.data), "angles": args.angles}, args.seed,
                       args.checkpoint)
    print(table)
    return 0


def _mean_or_none(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def cmd_report(args):
    from .evalkit import MetricsReport, format_table

    _require(args, "runs")
    rows = {}
    for path in sorted(Path(args.runs).rglob("metrics.json")):
        d = json.loads(path.read_text())
        d["delta"] = {int(k): v for k, v in d["delta"].items()}
        name = str(path.parent.relative_to(args.runs)) or path.parent.name
        rows[name] = MetricsReport(**d)
    if not rows:
        raise FileNotFoundError(f"no metrics.json under {args.runs}")
    table = format_table(rows)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(table + "\n")
        write_manifest(out, "report", {"runs": str(args.runs)}, args.seed)
    print(table)
    return 0


COMMANDS = {"gen": cmd_gen, "pretrain-sf": cmd_pretrain, "train": cmd_train, "track": cmd_track,
            "eval": cmd_eval, "lift2d": cmd_lift2d, "ablate": cmd_ablate, "report": cmd_report}


def build_parser():
    p = _Parser(prog="pointtrack3d", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="JSON config file; flags override its keys")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--workers", type=int)
        return sp

    g = common(sub.add_parser("gen", help="generate a synthetic dataset"))
    g.add_argument("--num-sequences", dest="num_sequences", type=int)
    g.add_argument("--num-frames", dest="num_frames", type=int)

    for name, help_ in (("pretrain-sf", "stage 1: scene flow pretraining"), ("train", "stage 2: tracker")):
        t = common(sub.add_parser(name, help=help_))
        t.add_argument("--data", help="dataset directory (default $" + CACHE_ENV + ")")
        t.add_argument("--checkpoint", help="initial checkpoint (stage 1 output for train)")
        t.add_argument("--resume", help="resume from a training checkpoint")
        t.add_argument("--stage", choices=["pretrain", "track"])
        t.add_argument("--steps", type=int)
        t.add_argument("--batch-size", dest="batch_size", type=int)
        t.add_argument("--clip-length", dest="clip_length", type=int)
        t.add_argument("--max-queries", dest="max_queries", type=int)
        t.add_argument("--lr", type=float)

    t = common(sub.add_parser("track", help="track the queries of one or more sequences"))
    t.add_argument("--checkpoint")
    t.add_argument("--data")

    e = common(sub.add_parser("eval", help="score predicted tracks against ground truth"))
    e.add_argument("--pred")
    e.add_argument("--gt")
    e.add_argument("--space", choices=["2d", "3d"])
    e.add_argument("--data", help="sequence whose cameras project 3D tracks for --space 2d")

    lf = common(sub.add_parser("lift2d", help="lift 2D tracks to 3D with depth maps"))
    lf.add_argument("--tracks2d")
    lf.add_argument("--data")
    lf.add_argument("--mode", choices=["bilinear", "nearest"])

    a = common(sub.add_parser("ablate", help="rotation or depth-interpolation ablation"))
    a.add_argument("--mode", choices=["rotation", "interpolation"])
    a.add_argument("--angles", help="comma-separated degrees")
    a.add_argument("--data")
    a.add_argument("--checkpoint")

    r = common(sub.add_parser("report", help="collect metrics.json files into one table"))
    r.add_argument("--runs")
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
    except UsageError as err:
        print(str(err), file=sys.stderr)
        return 1
    except SystemExit as err:          # --help
        return 0 if err.code in (0, None) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    t0 = time.perf_counter()
    try:
        code = COMMANDS[args.command](args)
    except UsageError as err:
        print(str(err), file=sys.stderr)
        return 1
    except Exception as err:           # runtime failure: report and exit 2
        log.debug("failure", exc_info=True)
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 2
    log.info("%s finished in %.1f s", args.command, time.perf_counter() - t0)
    return code


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
