"""Two-stage training: scene flow pretraining, then tracking with a frozen backbone."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .backbone import PointHierarchy
from .losses import (OCCLUSION_WEIGHT, LossWeights, occlusion_loss, rigidity_iso_losses, sceneflow_loss,
                     smoothness_loss, total_loss, track_loss)
from .model import TrackerNet
from .synthdata.augment import TrainingSample, augment, select_visible_queries
from .synthdata.scene import SequenceRecord, simulate_sceneflow_pair
from .geometry import PointCloudFrame
from .tracker import rollout

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("sf", "track", "occ", "smooth", "rigid", "iso", "total")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    stage: str = "pretrain"                 # pretrain | track
    batch_size: int = 4
    clip_length: int = 8
    points_per_frame: int = 2048
    max_queries: int = 32
    lr: float = 1e-4
    steps: int = 1000
    seed: int = 0
    augment: dict = field(default_factory=lambda: {"hflip": True, "scale": True, "tflip": True})
    freeze_backbone: Optional[bool] = None
    freeze_fusion: bool = False
    supervise_occluded: bool = False
    checkpoint_every: int = 0
    out_dir: Optional[str] = None
    cache_pyramids: bool = True
    simulated_pairs: float = 0.0            # pretrain: chance a pair is replaced by a rigidly moved single frame
    simulated_motion: tuple = (0.05, 0.1)   # max translation (m) and rotation (rad) of simulated pairs

    def __post_init__(self):
        if self.stage not in ("pretrain", "track"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.freeze_backbone is None:
            self.freeze_backbone = self.stage == "track"
        if self.stage == "track" and not self.freeze_backbone:
            raise ValueError("the tracking stage trains with the backbone frozen")

    def to_dict(self):
        return asdict(self)


# -- data -------------------------------------------------------------------------------------------


def as_sample(item) -> TrainingSample:
    if isinstance(item, TrainingSample):
        return item
    if isinstance(item, SequenceRecord):
        return TrainingSample(item.frames, item.flows, item.flows_backward, item.tracks, item.visible)
    raise TypeError(f"unsupported dataset item {type(item).__name__}")


def sub_clip(sample: TrainingSample, start: int, length: int) -> TrainingSample:
    stop = start + length
    frames = [PointCloudFrame(f.points, f.features, t, f.labels) for t, f in enumerate(sample.frames[start:stop])]
    flows = None if sample.flows is None else sample.flows[start:stop - 1]
    bwd = None if sample.flows_backward is None else sample.flows_backward[start:stop - 1]
    return TrainingSample(frames, flows, bwd, sample.tracks[:, start:stop], sample.visible[:, start:stop])


def draw_clip(dataset, rng, length, max_queries, flags, *, index=None):
    """A random clip (with augmentation) whose queries are visible in its first frame.

    Returns:
        (sample, key) where key identifies the un-augmented clip for caching.
    """
    i = int(rng.integers(len(dataset))) if index is None else index
    s = as_sample(dataset[i])
    length = min(length, s.num_frames)
    start = int(rng.integers(s.num_frames - length + 1))
    clip = sub_clip(s, start, length)
    aug_seed = int(rng.integers(2 ** 31))
    augmented = any(flags.values()) if flags else False
    if augmented:
        clip = augment(clip, flags, aug_seed)
    clip = select_visible_queries(clip, max_queries, rng)
    return clip, (None if augmented else (i, start, length))


def simulated_clip(frame: PointCloudFrame, rng, max_translation, max_rotation, num_queries):
    """A two-frame sample made by rigidly moving each segment of one frame; queries are frame points."""
    f0, f1, flow = simulate_sceneflow_pair(frame, max_translation, max_rotation, int(rng.integers(2 ** 31)))
    idx = np.sort(rng.choice(len(f0), size=min(num_queries, len(f0)), replace=False))
    tracks = np.stack([f0.points[idx], f1.points[idx]], axis=1)
    return TrainingSample([f0, f1], [flow], [-flow], tracks, np.ones((len(idx), 2), dtype=bool))


def level_flows_gt(hierarchy: PointHierarchy, flow0):
    """Ground-truth flow per level: mean of the member flows of each coarser point."""
    out = [np.asarray(flow0, dtype=np.float64)]
    for lev, nxt in zip(hierarchy.levels[:-1], hierarchy.levels[1:]):
        acc = np.zeros((len(nxt), 3))
        cnt = np.zeros(len(nxt))
        np.add.at(acc, lev.parent, out[-1])
        np.add.at(cnt, lev.parent, 1.0)
        out.append(acc / cnt[:, None])
    return out


# -- optimisation helpers ---------------------------------------------------------------------------


def cosine_lr(base, step, total):
    if total <= 1:
        return base
    return 0.5 * base * (1.0 + math.cos(math.pi * min(step, total) / total))


def _optimizer_state(opt, params):
    """Flatten Adam state to named tensors for the checkpoint."""
    state = {}
    for i, p in enumerate(params):
        st = opt.state.get(p)
        if not st:
            continue
        for k in ("exp_avg", "exp_avg_sq"):
            state[f"{i}.{k}"] = st[k]
        state[f"{i}.step"] = torch.as_tensor(float(st["step"]))
    return state


def _load_optimizer_state(opt, params, state):
    for i, p in enumerate(params):
        if f"{i}.exp_avg" not in state:
            continue
        opt.state[p] = {
            "step": torch.tensor(float(state[f"{i}.step"])),
            "exp_avg": state[f"{i}.exp_avg"].to(p.dtype).clone(),
            "exp_avg_sq": state[f"{i}.exp_avg_sq"].to(p.dtype).clone(),
        }


def save_training_checkpoint(path, net: TrackerNet, opt, params, step, config: TrainConfig, history=None):
    extra = {"step": int(step), "train_config": config.to_dict(), "stage": config.stage}
    opt_state = _optimizer_state(opt, params) if opt is not None else {}
    full = dict(net.state_dict())
    full.update({f"__optim__.{k}": v for k, v in opt_state.items()})
    from .checkpoint import encode_checkpoint
    import hashlib
    import os

    data = encode_checkpoint(full, net.config.to_dict(), extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return hashlib.sha256(data).hexdigest()


def split_state(state):
    net_state = {k: v for k, v in state.items() if not k.startswith("__optim__.")}
    opt_state = {k[len("__optim__."):]: v for k, v in state.items() if k.startswith("__optim__.")}
    return net_state, opt_state


# -- loss evaluation --------------------------------------------------------------------------------


def pretrain_losses(net: TrackerNet, sample: TrainingSample, weights: LossWeights, max_queries=32):
    """Scene flow and single-step query losses on the first frame pair of a sample."""
    f0, f1 = sample.frames[0], sample.frames[1]
    pyr0, pyr1 = net.pyramid(f0), net.pyramid(f1)
    flows = net.sceneflow(pyr0, pyr1)
    gt = level_flows_gt(pyr0.hierarchy, sample.flows[0])
    comp = {"sf": sceneflow_loss([flows], [gt], weights.gamma)}
    vis0 = np.nonzero(sample.visible[:, 0])[0][:max_queries]
    if len(vis0):
        q = torch.as_tensor(sample.tracks[vis0, 0], dtype=net.dtype)
        feats = net.query_features(pyr0, q)
        qflows, _ = net.query_step(q, feats, [f[:, None] for f in feats],
                                   torch.ones((len(vis0), 1), dtype=torch.bool),
                                   q.new_zeros((len(vis0), net.config.memory, 3)), pyr1, fuse=False)
        pred = torch.stack([q + f for f in qflows])[:, None]              # [L, 1, Q, 3]
        comp["track"] = track_loss(pred, sample.tracks[vis0, 1][None], sample.visible[vis0, 1][None], weights.alpha)
    else:
        comp["track"] = flows[0].new_zeros(())
    comp["total"] = total_loss(comp, weights)
    return comp


def tracking_losses(net: TrackerNet, sample: TrainingSample, weights: LossWeights, pyramids=None,
                    supervise_occluded=False):
    """Autoregressive rollout over the clip with gradients through every step."""
    q0 = sample.tracks[:, 0]
    out = rollout(net, sample.frames, q0, fuse=True, pyramids=pyramids, selective=False)
    pred = torch.stack([torch.stack(lv) for lv in out.level_positions], dim=1)        # [L, T, Q, 3]
    motions = torch.stack([torch.stack(lv) for lv in out.level_motions], dim=1)
    logits = torch.stack([torch.stack(lv) for lv in out.occlusion_logits], dim=1)     # [L, T, Q]
    gt = np.transpose(sample.tracks[:, 1:], (1, 0, 2))
    vis = sample.visible[:, 1:].T
    comp = {
        "track": track_loss(pred, gt, None if supervise_occluded else vis, weights.alpha),
        "occ": occlusion_loss(logits, vis),
        "smooth": smoothness_loss(motions),
    }
    comp["rigid"], comp["iso"] = rigidity_iso_losses(out.positions.transpose(0, 1))
    # occlusion BCE rides in the track term with a small coefficient
    terms = dict(comp, track=comp["track"] + OCCLUSION_WEIGHT * comp["occ"])
    comp["total"] = total_loss(terms, weights)
    return comp, out


# -- training loops ---------------------------------------------------------------------------------


class LossLog:
    def __init__(self, path=None):
        self.rows = []
        self.path = Path(path) if path else None

    def add(self, step, comp):
        row = {"step": step}
        row.update({k: _scalar(comp[k]) for k in LOSS_COLUMNS if k in comp})
        self.rows.append(row)

    def write(self):
        if self.path is None:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=("step",) + LOSS_COLUMNS)
            w.writeheader()
            for r in self.rows:
                w.writerow(r)


def _scalar(v):
    return float(v.detach()) if torch.is_tensor(v) else float(v)


def _check_finite(comp, step, out_dir):
    vals = {k: _scalar(v) for k, v in comp.items()}
    if all(math.isfinite(v) for v in vals.values()):
        return
    diag = {"step": step, "components": vals}
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "nan_diagnostics.json").write_text(json.dumps(diag, indent=2))
    raise TrainingError(f"non-finite loss at step {step}: {diag['components']}")


def _train(net, config: TrainConfig, dataset, step_fn, params, resume=None):
    out_dir = Path(config.out_dir) if config.out_dir else None
    opt = torch.optim.Adam(params, lr=config.lr)
    first = 0
    if resume is not None:
        from .checkpoint import load_checkpoint

        state, _, extra = load_checkpoint(resume)
        net_state, opt_state = split_state(state)
        net.load_state_dict(net_state)
        _load_optimizer_state(opt, params, opt_state)
        first = int(extra["step"])
    history = LossLog(out_dir / f"losses_{config.stage}.csv" if out_dir else None)
    for step in range(first, config.steps):
        for g in opt.param_groups:
            g["lr"] = cosine_lr(config.lr, step, config.steps)
        rng = np.random.default_rng([config.seed, step])
        opt.zero_grad()
        agg = {}
        for _ in range(config.batch_size):
            comp = step_fn(rng)
            _check_finite(comp, step, out_dir)
            (comp["total"] / config.batch_size).backward()
            for k, v in comp.items():
                agg[k] = agg.get(k, 0.0) + _scalar(v) / config.batch_size
        grads_ok = all(p.grad is None or torch.isfinite(p.grad).all() for p in params)
        if grads_ok:
            opt.step()
        else:
            log.warning("step %d: non-finite gradient, update skipped", step)
        history.add(step, agg)
        if step % 50 == 0:
            log.info("%s step %d total %.5f", config.stage, step, agg["total"])
        if out_dir and config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
            save_training_checkpoint(out_dir / f"{config.stage}_step{step + 1}.ckpt", net, opt, params, step + 1,
                                     config)
    if out_dir:
        save_training_checkpoint(out_dir / f"{config.stage}.ckpt", net, opt, params, config.steps, config)
    history.write()
    return history.rows


def pretrain_sceneflow(config: TrainConfig, dataset, net: Optional[TrackerNet] = None, resume=None):
    """Stage 1: backbone, cost volumes and flow heads on frame pairs.

    Args:
        dataset: SequenceRecords or TrainingSamples with dense flow.

    Returns:
        (net, loss rows)
    """
    from .model import build_model

    net = net or build_model(seed=config.seed)
    weights = LossWeights.for_stage("pretrain")
    named = list(net.stage_parameters("pretrain"))
    for n, p in net.named_parameters():
        p.requires_grad_(any(n == m for m, _ in named))
    if config.freeze_backbone:
        for p in net.backbone.parameters():
            p.requires_grad_(False)
    params = [p for _, p in named if p.requires_grad]

    def step_fn(rng):
        clip, _ = draw_clip(dataset, rng, 2, config.max_queries, config.augment)
        if config.simulated_pairs > 0 and rng.uniform() < config.simulated_pairs:
            clip = simulated_clip(clip.frames[0], rng, *config.simulated_motion, config.max_queries)
        return pretrain_losses(net, clip, weights, config.max_queries)

    rows = _train(net, config, dataset, step_fn, params, resume)
    return net, rows


def precompute_pyramids(net: TrackerNet, frames):
    with torch.no_grad():
        return [net.pyramid(f).detach() for f in frames]


def train_tracker(config: TrainConfig, dataset, net: TrackerNet, resume=None):
    """Stage 2: fusion, motion prior and occlusion heads on clips, backbone frozen.

    Returns:
        (net, loss rows)
    """
    weights = LossWeights.for_stage("track")
    for p in net.backbone.parameters():
        p.requires_grad_(False)
    frozen = {"patch_cost", "sf_heads", "adapters"}           # dense path and stage-1 adapter are unused here
    if config.freeze_fusion:
        frozen |= {"motion_prior", "fusion", "occ_heads", "query_cost", "query_feat", "track_heads"}
    params = []
    for name, p in net.named_parameters():
        top = name.split(".")[0]
        if top == "backbone":
            continue
        p.requires_grad_(top not in frozen)
        if p.requires_grad:
            params.append(p)
    cache = {}

    def step_fn(rng):
        clip, key = draw_clip(dataset, rng, config.clip_length, config.max_queries, config.augment)
        if key is not None and config.cache_pyramids:
            if key not in cache:
                cache[key] = precompute_pyramids(net, clip.frames)
            pyrs = cache[key]
        else:
            pyrs = precompute_pyramids(net, clip.frames)
        if len(clip.tracks) == 0:
            z = torch.zeros((), dtype=net.dtype, requires_grad=bool(params))
            return {"track": z, "total": z * 0}
        comp, _ = tracking_losses(net, clip, weights, pyrs, config.supervise_occluded)
        return comp

    if not params:
        log.warning("no trainable parameters; losses are evaluated only")

        def _noop_train():
            rows = []
            for step in range(config.steps):
                rng = np.random.default_rng([config.seed, step])
                with torch.no_grad():
                    comp = step_fn(rng)
                rows.append({"step": step, **{k: float(v) for k, v in comp.items()}})
            return rows

        return net, _noop_train()
    rows = _train(net, config, dataset, step_fn, params, resume)
    return net, rows


def epe3d(net: TrackerNet, frame0, frame1, flow_gt):
    """Mean end-point error of the densest-level predicted flow."""
    with torch.no_grad():
        flows = net.sceneflow(net.pyramid(frame0), net.pyramid(frame1))
    return float(np.linalg.norm(flows[0].double().numpy() - flow_gt, axis=1).mean())
