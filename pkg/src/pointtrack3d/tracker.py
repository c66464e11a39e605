"""Online autoregressive tracking with appearance memory and motion buffers."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .backbone import build_decode_mask, build_hierarchy, close_mask
from .fusion import occluded
from .model import QueryUncoveredError, TrackerNet

log = logging.getLogger(__name__)

MAX_APPEARANCES = 4


def select_appearance_frames(current: int, start: int) -> list:
    """Snapshot frames {start, T-6, T-2, T} restricted to [start, T], ascending."""
    if current < start:
        raise ValueError("current frame precedes the query start")
    return sorted({f for f in (start, current - 6, current - 2, current) if start <= f <= current})


def resolve_memory(current: int, start: int, stored: np.ndarray) -> list:
    """Map each scheduled frame to the latest stored (visible) snapshot at or before it.

    Args:
        stored: [F] bool, True where a snapshot was kept for this query.
    """
    out = []
    for f in select_appearance_frames(current, start):
        hits = np.nonzero(stored[start:f + 1])[0]
        out.append(start + int(hits[-1]) if len(hits) else start)
    return sorted(set(out))


def shift_motions(buffer, motion):
    """Drop the oldest motion and append the newest: [Q, M, 3] -> [Q, M, 3]."""
    return torch.cat([buffer[:, 1:], motion[:, None]], dim=1)


@dataclass
class TrackState:
    """Per-query state of a rollout (batched over queries).

    Attributes:
        positions: [Q, 3] current positions (tensor).
        occluded: [Q] predicted occlusion at the current frame.
        motions: [Q, M, 3] motion buffer, oldest first.
        stored: [Q, F] bool snapshot flags.
        start: [Q] start frames.
    """

    positions: torch.Tensor
    occluded: np.ndarray
    motions: torch.Tensor
    stored: np.ndarray
    start: np.ndarray

    def memory(self, i: int, current: int) -> list:
        return resolve_memory(current, int(self.start[i]), self.stored[i])


@dataclass
class RolloutOutput:
    """Everything a rollout produced.

    Attributes:
        positions: [Q, F, 3] tensor, positions at every frame (start positions before the start).
        level_positions: per frame t>=1 a list per level of [Q, 3] predicted positions.
        level_motions: per frame t>=1 a list per level of [Q, 3] motions.
        occlusion_logits: per frame t>=1 a list per level of [Q] logits (or None).
        occluded: [Q, F] predicted occlusion (False at and before each start).
        memory_log: per step, the snapshot frames used by each active query.
    """

    positions: torch.Tensor
    level_positions: list
    level_motions: list
    occlusion_logits: list
    occluded: np.ndarray
    memory_log: list = field(default_factory=list)
    fallbacks: int = 0


class PyramidSource:
    """Encodes frames on demand, decoding selectively around given centers."""

    def __init__(self, net: TrackerNet, frames: Sequence, selective=True, pyramids=None):
        self.net, self.frames, self.selective = net, frames, selective
        self.pyramids = pyramids
        self.hier = {}
        self.fallbacks = 0

    def get(self, t, centers=None):
        if self.pyramids is not None:
            return self.pyramids[t]
        if t not in self.hier:
            self.hier = {k: v for k, v in self.hier.items() if k >= t - 1}
            self.hier[t] = build_hierarchy(self.frames[t].points, self.net.config.backbone)
        mask = None
        if self.selective and centers is not None:
            hier = self.hier[t]
            mask = close_mask(hier, build_decode_mask(hier, centers, config=self.net.config.backbone))
        return self.net.pyramid(self.frames[t], mask=mask, hierarchy=self.hier[t])

    def full(self, t):
        self.fallbacks += 1
        log.info("frame %d: query outside decode mask, decoding fully", t)
        return self.get(t) if self.pyramids is not None else self.net.pyramid(self.frames[t], hierarchy=self.hier[t])


def rollout(net: Optional[TrackerNet], frames: Sequence, queries, start_frames=None, *, fuse=True,
            oracle: Optional[Callable] = None, pyramids=None, selective=True) -> RolloutOutput:
    """Track queries forward through `frames`.

    Args:
        net: the network (may be None when an oracle supplies motions).
        frames: PointCloudFrames.
        queries: [Q, 3] positions at their start frames (array or tensor).
        start_frames: [Q] ints (default all 0).
        fuse: use the fusion module; otherwise the stage-1 adapter path.
        oracle: optional fn(t_from, t_to, positions [n,3], query_index [n]) -> motions [n,3]
            replacing the predicted motion.
        pyramids: precomputed FeaturePyramids per frame (skips encoding).
        selective: decode only around the queries.
    """
    n_frames = len(frames)
    dtype = net.dtype if net is not None else torch.float64
    q0 = torch.as_tensor(np.array(queries) if isinstance(queries, np.ndarray) else queries).to(dtype).reshape(-1, 3)
    n_q = len(q0)
    start = np.zeros(n_q, dtype=np.int64) if start_frames is None else np.asarray(start_frames, dtype=np.int64)
    if n_q and (start.min() < 0 or start.max() >= n_frames):
        raise ValueError("query start outside sequence")
    use_net = net is not None and oracle is None
    memory = net.config.memory if net is not None else 8
    state = TrackState(q0.clone(), np.zeros(n_q, bool), q0.new_zeros((n_q, memory, 3)),
                       np.zeros((n_q, n_frames), bool), start)
    source = PyramidSource(net, frames, selective, pyramids) if use_net else None
    history = {}                                     # frame -> per-level [Q, C_l] features
    ctx = None
    pos_frames = [state.positions]
    out = RolloutOutput(None, [], [], [], np.zeros((n_q, n_frames), bool))

    def extract(pyr, t, rows, positions, feats):
        new = net.query_features(pyr, positions[rows])
        base = feats if feats is not None else [positions.new_zeros((n_q, c)) for c in net.config.backbone.widths]
        idx = torch.as_tensor(rows)
        return [b.index_copy(0, idx, n) if len(rows) else b for b, n in zip(base, new)]

    starting = np.nonzero(start == 0)[0]
    state.stored[starting, 0] = True
    pyr_t = None
    if use_net:
        pyr_t = source.get(0, q0[starting].detach().numpy() if len(starting) else np.zeros((0, 3)))
        if len(starting):
            try:
                ctx = extract(pyr_t, 0, starting, state.positions, None)
            except QueryUncoveredError:
                pyr_t = source.full(0)
                ctx = extract(pyr_t, 0, starting, state.positions, None)
        history[0] = ctx

    for t in range(n_frames - 1):
        active = np.nonzero(start <= t)[0]
        new_start = np.nonzero(start == t + 1)[0]
        pos = state.positions
        lvl_mot, lvl_logit = None, None
        pyr_t1 = None
        if use_net and (len(active) or len(new_start)):
            centers = np.concatenate([pos[active].detach().numpy(), q0[new_start].detach().numpy()])
            pyr_t1 = source.get(t + 1, centers)
        if len(active) == 0:
            motion = pos.new_zeros((0, 3))
        elif use_net:
            mem = [state.memory(i, t) for i in active]
            if net.config.appearance == "single":
                mem = [m[-1:] for m in mem]          # most recent visible snapshot only
            out.memory_log.append({int(i): m for i, m in zip(active, mem)})
            if fuse:
                app, valid = _gather(history, mem, active, net.num_levels)
            else:
                app = [c[active][:, None] for c in ctx]
                valid = torch.ones((len(active), 1), dtype=torch.bool)
            args = (pos[active], [c[active] for c in ctx], app, valid, state.motions[active])
            try:
                flows, logits = net.query_step(*args, pyr_t1, fuse=fuse)
            except QueryUncoveredError:
                pyr_t1 = source.full(t + 1)
                flows, logits = net.query_step(*args, pyr_t1, fuse=fuse)
            motion = flows[0]
            lvl_mot, lvl_logit = flows, logits
        else:
            motion = torch.as_tensor(oracle(t, t + 1, pos[active].detach().numpy(), active)).to(dtype)

        full_motion = pos.new_zeros((n_q, 3))
        if len(active):
            full_motion = full_motion.index_copy(0, torch.as_tensor(active), motion)
        new_pos = pos + full_motion
        # queries starting at t+1 take their given position
        if len(new_start):
            new_pos = new_pos.index_copy(0, torch.as_tensor(new_start), q0[new_start])
        occ_now = np.zeros(n_q, bool)
        if lvl_logit is not None and len(active):
            occ_now[active] = occluded(lvl_logit[0]).detach().numpy()
        state.motions = state.motions.index_copy(0, torch.as_tensor(active), shift_motions(
            state.motions[active], motion)) if len(active) else state.motions
        state.positions = new_pos
        state.occluded = occ_now
        state.stored[active, t + 1] = ~occ_now[active]
        state.stored[new_start, t + 1] = True
        out.occluded[:, t + 1] = occ_now

        if pyr_t1 is not None:
            rows = np.concatenate([active, new_start]).astype(np.int64)
            try:
                ctx = extract(pyr_t1, t + 1, rows, new_pos, None)
            except QueryUncoveredError:
                pyr_t1 = source.full(t + 1)
                ctx = extract(pyr_t1, t + 1, rows, new_pos, None)
            history[t + 1] = ctx
        if use_net:
            if lvl_mot is None:                      # no query active yet
                lvl_mot = [pos.new_zeros((0, 3))] * net.num_levels
            out.level_motions.append(_scatter_levels(lvl_mot, active, n_q, pos))
            out.level_positions.append([pos + m for m in out.level_motions[-1]])
            out.occlusion_logits.append(
                None if lvl_logit is None else _scatter_levels([x[:, None] for x in lvl_logit], active, n_q, pos,
                                                               width=1))
        pos_frames.append(new_pos)

    out.positions = torch.stack(pos_frames, dim=1)
    out.fallbacks = source.fallbacks if source is not None else 0
    out.stored = state.stored
    return out


def _scatter_levels(values, active, n_q, like, width=3):
    if values is None:
        return None
    idx = torch.as_tensor(active)
    res = []
    for v in values:
        base = like.new_zeros((n_q, width))
        res.append(base.index_copy(0, idx, v) if len(active) else base)
    if width == 1:
        res = [r[:, 0] for r in res]
    return res


def _gather(history, mem, active, n_levels):
    """Stack snapshot features into [n, MAX_APPEARANCES, C_l] with a validity mask."""
    n = len(active)
    frames = sorted({f for m in mem for f in m})
    slot = {f: i for i, f in enumerate(frames)}
    fidx = np.zeros((n, MAX_APPEARANCES), dtype=np.int64)
    valid = np.zeros((n, MAX_APPEARANCES), dtype=bool)
    for r, m in enumerate(mem):
        assert len(m) <= MAX_APPEARANCES
        fidx[r, :len(m)] = [slot[f] for f in m]
        valid[r, :len(m)] = True
    qidx = np.repeat(np.asarray(active)[:, None], MAX_APPEARANCES, axis=1)
    out = []
    for l in range(n_levels):
        stack = torch.stack([history[f][l] for f in frames])      # [U, Q, C]
        out.append(stack[torch.as_tensor(fidx), torch.as_tensor(qidx)] * torch.as_tensor(valid)[..., None])
    return out, torch.as_tensor(valid)


# -- inference --------------------------------------------------------------------------------------


@dataclass
class TrajectoryRecord:
    """Predicted (and optionally ground-truth) trajectories for Q queries over F frames."""

    query_ids: np.ndarray
    positions: np.ndarray                 # [Q, F, 3]
    visible: np.ndarray                   # [Q, F]
    start_frames: np.ndarray              # [Q]
    gt_positions: Optional[np.ndarray] = None
    gt_visible: Optional[np.ndarray] = None

    @property
    def num_frames(self):
        return self.positions.shape[1]


def track_sequence(net: Optional[TrackerNet], frames, queries, start_frames, direction="both", *, fuse=True,
                   oracle=None, selective=True, query_ids=None) -> TrajectoryRecord:
    """Forward (and backward over the reversed sequence) tracking.

    Args:
        direction: "forward", "backward" or "both". Frames not covered by the
            requested direction(s) hold the start position and are marked invisible.
        oracle: fn(t_from, t_to, positions, query_index) -> motions, in original frame indices.
    """
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    start = np.asarray(start_frames, dtype=np.int64)
    n_frames = len(frames)
    n_q = len(queries)
    if n_q and (start.min() < 0 or start.max() >= n_frames):
        raise ValueError("query start outside sequence")
    positions = np.repeat(queries[:, None], n_frames, axis=1)
    visible = np.zeros((n_q, n_frames), bool)
    visible[np.arange(n_q), start] = True
    with torch.no_grad():
        if direction in ("forward", "both"):
            fw = rollout(net, frames, queries, start, fuse=fuse, oracle=oracle, selective=selective)
            p = fw.positions.double().numpy()
            for i in range(n_q):
                positions[i, start[i]:] = p[i, start[i]:]
                visible[i, start[i] + 1:] = ~fw.occluded[i, start[i] + 1:]
        if direction in ("backward", "both"):
            rev = list(reversed(frames))
            rstart = n_frames - 1 - start
            roracle = None
            if oracle is not None:
                def roracle(t_from, t_to, pos, qi):
                    return oracle(n_frames - 1 - t_from, n_frames - 1 - t_to, pos, qi)
            bw = rollout(net, rev, queries, rstart, fuse=fuse, oracle=roracle, selective=selective)
            p = bw.positions.double().numpy()[:, ::-1]
            occ = bw.occluded[:, ::-1]
            for i in range(n_q):
                positions[i, :start[i]] = p[i, :start[i]]
                visible[i, :start[i]] = ~occ[i, :start[i]]
    ids = np.arange(n_q) if query_ids is None else np.asarray(query_ids)
    return TrajectoryRecord(ids, positions, visible, start)


def track_record(net, record, *, fuse=True, oracle=None, selective=True) -> TrajectoryRecord:
    """Track a SequenceRecord's queries over the whole sequence and attach its ground truth."""
    traj = track_sequence(net, record.frames, record.query_points, record.query_frames, fuse=fuse,
                          oracle=oracle, selective=selective, query_ids=record.query_ids)
    traj.gt_positions = record.tracks
    traj.gt_visible = record.visible
    return traj


def write_predictions(traj: TrajectoryRecord, out_dir, *, checkpoint_hash=None, elapsed=None, extra=None):
    """tracks.csv (ground-truth schema) plus predictions.json."""
    from .synthdata.io import write_tracks_csv

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_tracks_csv(out_dir / "tracks.csv", traj.query_ids, traj.positions, traj.visible)
    meta = {"checkpoint_sha256": checkpoint_hash, "direction": "forward+backward",
            "num_queries": int(len(traj.query_ids)), "num_frames": int(traj.num_frames),
            "seconds": elapsed, **(extra or {})}
    (out_dir / "predictions.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return out_dir


def timed(fn, *args, **kw):
    t0 = time.perf_counter()
    res = fn(*args, **kw)
    return res, time.perf_counter() - t0
