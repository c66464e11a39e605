"""Tracking metrics in 3D (centimetre thresholds) and 2D (pixel thresholds)."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from ..geometry import CameraModel

THRESHOLDS = (1, 2, 4, 8, 16)
SURVIVAL_THRESHOLD_M = 0.5
SR_MIN_FRAMES = 128


@dataclass
class MetricsReport:
    """Percentages in [0, 100]; None where a bucket is empty.

    Attributes:
        oa: occlusion accuracy over all evaluated (query, frame) pairs.
        delta: {x: fraction of GT-visible predictions within x cm (3D) or px (2D)}.
        delta_avg: mean of the five delta values.
        delta_avg_occluded: the same average over GT-occluded frames.
        sr: survival rate (None for sequences shorter than the SR minimum).
        counts: number of visible / occluded / total evaluated entries.
    """

    oa: float
    delta: dict
    delta_avg: Optional[float]
    delta_avg_occluded: Optional[float]
    sr: Optional[float]
    counts: dict = field(default_factory=dict)
    space: str = "3d"

    def to_dict(self):
        d = asdict(self)
        d["delta"] = {str(k): v for k, v in self.delta.items()}
        return d


def _percent(count, total):
    return 100.0 * int(count) / int(total)


def _thresholds_in_units(space):
    return [x / 100.0 for x in THRESHOLDS] if space == "3d" else [float(x) for x in THRESHOLDS]


def _deltas(err, mask, space):
    if not mask.any():
        return {x: None for x in THRESHOLDS}, None
    e = err[mask]
    d = {x: _percent(np.count_nonzero(e < thr), e.size) for x, thr in zip(THRESHOLDS, _thresholds_in_units(space))}
    return d, float(np.mean(list(d.values())))


def project_tracks(positions, cameras):
    """Project [Q, F, 3] tracks with per-frame cameras (or one camera).

    Returns:
        (uv [Q, F, 2], in_front [Q, F])
    """
    positions = np.asarray(positions, dtype=np.float64)
    n_q, n_f = positions.shape[:2]
    cams = cameras if isinstance(cameras, (list, tuple)) else [cameras] * n_f
    uv = np.full((n_q, n_f, 2), np.nan)
    front = np.zeros((n_q, n_f), bool)
    for t, cam in enumerate(cams):
        pc = cam.to_camera(positions[:, t])
        ok = pc[:, 2] > 0
        front[:, t] = ok
        uv[ok, t, 0] = cam.fx * pc[ok, 0] / pc[ok, 2] + cam.cx
        uv[ok, t, 1] = cam.fy * pc[ok, 1] / pc[ok, 2] + cam.cy
    return uv, front


def survival_rate(err, threshold=SURVIVAL_THRESHOLD_M):
    """Mean over queries of (first frame with error > threshold, else length) / length, times 100.

    Args:
        err: [Q, F] errors.
    """
    n_f = err.shape[1]
    fail = err > threshold
    first = np.where(fail.any(axis=1), fail.argmax(axis=1), n_f)
    return 100.0 * float(np.mean(first / n_f))


def compute_metrics(pred_positions, pred_visible, gt_positions, gt_visible, *, space="3d", cameras=None,
                    evaluate=None, sr_min_frames=SR_MIN_FRAMES) -> MetricsReport:
    """Compare predicted and ground-truth tracks.

    Args:
        pred_positions, gt_positions: [Q, F, 3] (3D) or [Q, F, 2] (2D pixels). 3D
            tracks are projected when space="2d" and cameras are given.
        pred_visible, gt_visible: [Q, F] bool.
        space: "3d" (cm thresholds on meter coordinates) or "2d" (pixel thresholds).
        cameras: camera or per-frame cameras for 2D evaluation of 3D tracks.
        evaluate: optional [Q, F] mask of entries to score (default all).
        sr_min_frames: report SR only for sequences at least this long.
    """
    if space not in ("3d", "2d"):
        raise ValueError(f"unknown space {space!r}")
    pred = np.asarray(pred_positions, dtype=np.float64)
    gt = np.asarray(gt_positions, dtype=np.float64)
    pv = np.asarray(pred_visible, dtype=bool)
    gv = np.asarray(gt_visible, dtype=bool)
    if pred.shape != gt.shape or pv.shape != gv.shape or pv.shape != pred.shape[:2]:
        raise ValueError(f"misaligned records: {pred.shape} vs {gt.shape}")
    ev = np.ones(pv.shape, bool) if evaluate is None else np.asarray(evaluate, dtype=bool)
    if space == "2d" and pred.shape[-1] == 3:
        if cameras is None:
            raise ValueError("2d evaluation of 3d tracks needs cameras")
        pred, fp = project_tracks(pred, cameras)
        gt, fg = project_tracks(gt, cameras)
        ev = ev & fp & fg
    err = np.linalg.norm(pred - gt, axis=-1)
    oa = _percent(np.count_nonzero(pv[ev] == gv[ev]), int(ev.sum())) if ev.any() else None
    delta, delta_avg = _deltas(err, ev & gv, space)
    _, delta_occ = _deltas(err, ev & ~gv, space)
    sr = None
    if space == "3d" and pred.shape[1] >= sr_min_frames:
        sr = survival_rate(np.where(ev, err, 0.0))
    counts = {"visible": int((ev & gv).sum()), "occluded": int((ev & ~gv).sum()), "total": int(ev.sum())}
    return MetricsReport(oa, delta, delta_avg, delta_occ, sr, counts, space)


def metrics_for(traj, *, space="3d", cameras=None, sr_min_frames=SR_MIN_FRAMES) -> MetricsReport:
    """compute_metrics on a TrajectoryRecord carrying ground truth."""
    if traj.gt_positions is None:
        raise ValueError("trajectory record has no ground truth")
    return compute_metrics(traj.positions, traj.visible, traj.gt_positions, traj.gt_visible, space=space,
                           cameras=cameras, sr_min_frames=sr_min_frames)


def compute_average_jaccard(pred_uv, pred_visible, gt_uv, gt_visible, thresholds=THRESHOLDS):
    """Average Jaccard over pixel thresholds, as a percentage.

    Per threshold: TP = predicted and GT visible with error < x; FP = predicted
    visible but not a TP; FN = GT visible but not a TP; Jaccard = TP / (TP + FP + FN).
    """
    pred_uv = np.asarray(pred_uv, dtype=np.float64)
    gt_uv = np.asarray(gt_uv, dtype=np.float64)
    pv = np.asarray(pred_visible, dtype=bool)
    gv = np.asarray(gt_visible, dtype=bool)
    if pred_uv.shape != gt_uv.shape or pv.shape != gv.shape:
        raise ValueError("misaligned records")
    err = np.linalg.norm(pred_uv - gt_uv, axis=-1)
    scores = []
    for x in thresholds:
        tp = pv & gv & (err < x)
        fp = pv & ~tp
        fn = gv & ~tp
        denom = tp.sum() + fp.sum() + fn.sum()
        scores.append(tp.sum() / denom if denom else 1.0)
    return 100.0 * float(np.mean(scores))


def format_table(rows: dict) -> str:
    """Plain-text table: one row per method with OA, delta^x, delta^avg, occluded delta^avg and SR."""
    cols = ["OA"] + [f"d{x}" for x in THRESHOLDS] + ["d_avg", "d_avg_occ", "SR"]
    lines = ["method".ljust(22) + "".join(c.rjust(10) for c in cols)]

    def fmt(v):
        return "-".rjust(10) if v is None else f"{v:10.2f}"

    for name, rep in rows.items():
        vals = [rep.oa] + [rep.delta[x] for x in THRESHOLDS] + [rep.delta_avg, rep.delta_avg_occluded, rep.sr]
        lines.append(name.ljust(22) + "".join(fmt(v) for v in vals))
    return "\n".join(lines)
