"""Baselines: scene flow chaining and lifting 2D tracks with depth."""

from __future__ import annotations

import logging
from typing import Callable, Optional

import numpy as np
import torch

from ..geometry import backproject, interpolate_3nn, sample_depth
from ..tracker import TrajectoryRecord

log = logging.getLogger(__name__)


def _chain(frames, queries, start, flow_fn, n_frames):
    """Advect queries from their start frame through frames using flow_fn(t) on frame t's points."""
    pos = np.repeat(queries[:, None], n_frames, axis=1).astype(np.float64)
    cur = queries.astype(np.float64).copy()
    for t in range(n_frames - 1):
        active = start <= t
        if active.any():
            flow = flow_fn(t)
            cur[active] = cur[active] + interpolate_3nn(cur[active], frames[t].points, flow)
        cur[start == t + 1] = queries[start == t + 1]
        pos[:, t + 1] = np.where((start <= t + 1)[:, None], cur, pos[:, t + 1])
    return pos


def chain_sceneflow(net, frames, queries, start_frames, *, flow_oracle: Optional[Callable] = None,
                    query_ids=None) -> TrajectoryRecord:
    """Track by chaining dense scene flow, forward from each start and backward to frame 0.

    Args:
        net: TrackerNet whose dense path predicts flow (unused with an oracle).
        flow_oracle: optional fn(t_from, t_to, points [N, 3]) -> flow [N, 3] replacing the network.

    Every frame is reported visible (the baseline has no occlusion output).
    """
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    start = np.asarray(start_frames, dtype=np.int64)
    n = len(frames)
    cache = {}

    def dense(a, b):
        if flow_oracle is not None:
            return flow_oracle(a, b, frames[a].points)
        with torch.no_grad():
            for k in (a, b):
                if k not in cache:
                    cache[k] = net.pyramid(frames[k])
            flow = net.sceneflow(cache[a], cache[b])[0]
        for k in list(cache):
            if k not in (a, b):
                del cache[k]
        return flow.double().numpy()

    fwd = _chain(frames, queries, start, lambda t: dense(t, t + 1), n)
    rev = list(reversed(frames))
    bwd = _chain(rev, queries, n - 1 - start, lambda t: dense(n - 1 - t, n - 2 - t), n)[:, ::-1]
    pos = np.where((np.arange(n)[None] >= start[:, None])[..., None], fwd, bwd)
    ids = np.arange(len(queries)) if query_ids is None else np.asarray(query_ids)
    return TrajectoryRecord(ids, pos, np.ones((len(queries), n), bool), start)


def fill_depth_in_time(depth, valid):
    """Linear interpolation over time between valid samples, holding the nearest at the ends.

    Args:
        depth: [F] depths (ignored where invalid).
        valid: [F] bool.
    """
    t = np.arange(len(depth))
    return np.interp(t, t[valid], depth[valid])


def lift_2d_tracks(uv, visible, depth_maps, mode="bilinear", query_ids=None, start_frames=None):
    """Lift 2D tracks to 3D with per-frame depth maps and cameras.

    Args:
        uv: [Q, F, 2] pixel tracks.
        visible: [Q, F] predicted 2D visibility.
        depth_maps: F DepthMaps (each carrying its camera).
        mode: depth interpolation, "bilinear" or "nearest".

    Returns:
        TrajectoryRecord over the queries that had at least one usable depth
        (the others are skipped with a warning).
    """
    uv = np.asarray(uv, dtype=np.float64)
    visible = np.asarray(visible, dtype=bool)
    n_q, n_f = visible.shape
    ids = np.arange(n_q) if query_ids is None else np.asarray(query_ids)
    start = np.zeros(n_q, np.int64) if start_frames is None else np.asarray(start_frames)
    keep, out = [], []
    for i in range(n_q):
        depth = np.full(n_f, np.nan)
        for t in np.nonzero(visible[i])[0]:
            dm = depth_maps[t]
            h, w = dm.depths.shape
            u, v = uv[i, t]
            if np.isfinite(u) and np.isfinite(v) and 0 <= u <= w - 1 and 0 <= v <= h - 1:
                depth[t] = sample_depth(dm, uv[i, t], mode, strict=False)
        ok = np.isfinite(depth)
        if not ok.any():
            log.warning("query %s never visible with valid depth; skipped", ids[i])
            continue
        depth = fill_depth_in_time(depth, ok)
        pts = np.stack([backproject(uv[i, t], depth[t], depth_maps[t].camera) for t in range(n_f)])
        keep.append(i)
        out.append(pts)
    keep = np.asarray(keep, dtype=np.int64)
    pos = np.stack(out) if out else np.zeros((0, n_f, 3))
    return TrajectoryRecord(ids[keep], pos, visible[keep], start[keep])
