"""Training samples cut from sequences, and their augmentations."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from ..geometry import PointCloudFrame
from .scene import SequenceRecord

log = logging.getLogger(__name__)

SCALE_RANGE = (0.8, 1.2)


@dataclass
class TrainingSample:
    """A clip with dense flow and query tracks.

    Attributes:
        frames: F point clouds.
        flows: F-1 arrays, motion of frame t's points to t+1 (or None).
        flows_backward: F-1 arrays, motion of frame t+1's points back to t (or None).
        tracks: [Q, F, 3] ground-truth query positions.
        visible: [Q, F] ground-truth visibility.
    """

    frames: list
    flows: Optional[list]
    flows_backward: Optional[list]
    tracks: np.ndarray
    visible: np.ndarray

    @property
    def num_frames(self):
        return len(self.frames)


def clip_from_record(record: SequenceRecord, start: int, length: int, *, max_queries: Optional[int] = None,
                     rng=None) -> TrainingSample:
    """Cut frames [start, start+length) with the queries visible at the clip's first frame."""
    stop = start + length
    if start < 0 or stop > record.num_frames or length < 2:
        raise ValueError("clip outside sequence")
    frames = [PointCloudFrame(f.points, f.features, t, f.labels) for t, f in enumerate(record.frames[start:stop])]
    keep = np.nonzero(record.visible[:, start])[0]
    if max_queries is not None and len(keep) > max_queries:
        rng = rng if rng is not None else np.random.default_rng(0)
        keep = np.sort(rng.choice(keep, size=max_queries, replace=False))
    bwd = list(record.flows_backward[start:stop - 1]) if record.flows_backward is not None else None
    return TrainingSample(frames, list(record.flows[start:stop - 1]), bwd,
                          record.tracks[keep, start:stop].copy(), record.visible[keep, start:stop].copy())


def _map_frames(sample, fn_points):
    return [PointCloudFrame(fn_points(f.points), f.features, f.frame_index, f.labels) for f in sample.frames]


def hflip(sample: TrainingSample) -> TrainingSample:
    """Negate x on points, flows and tracks."""
    flip = np.array([-1.0, 1.0, 1.0])
    return replace(
        sample,
        frames=_map_frames(sample, lambda p: p * flip),
        flows=None if sample.flows is None else [f * flip for f in sample.flows],
        flows_backward=None if sample.flows_backward is None else [f * flip for f in sample.flows_backward],
        tracks=sample.tracks * flip,
    )


def scale(sample: TrainingSample, s: float) -> TrainingSample:
    """Multiply every coordinate and flow by s."""
    if s == 1.0:
        return sample
    return replace(
        sample,
        frames=_map_frames(sample, lambda p: p * s),
        flows=None if sample.flows is None else [f * s for f in sample.flows],
        flows_backward=None if sample.flows_backward is None else [f * s for f in sample.flows_backward],
        tracks=sample.tracks * s,
    )


def tflip(sample: TrainingSample) -> TrainingSample:
    """Reverse time.

    The new forward flows are the old backward flows in reverse order; when a
    sample carries no backward flow the negated forward flow is used, which is
    exact for translations of identically sampled frames.
    """
    n = sample.num_frames
    frames = [PointCloudFrame(f.points, f.features, t, f.labels) for t, f in enumerate(reversed(sample.frames))]
    flows = bwd = None
    if sample.flows is not None:
        if sample.flows_backward is not None:
            flows = list(reversed(sample.flows_backward))
            bwd = list(reversed(sample.flows))
        else:
            log.warning("time flip without backward flow; negating forward flow")
            flows = [-f for f in reversed(sample.flows)]
    assert flows is None or len(flows) == n - 1
    return replace(sample, frames=frames, flows=flows, flows_backward=bwd,
                   tracks=sample.tracks[:, ::-1].copy(), visible=sample.visible[:, ::-1].copy())


def augment(sample: TrainingSample, flags, seed) -> TrainingSample:
    """Random augmentation.

    Args:
        sample: the clip.
        flags: mapping or object with boolean hflip / scale / tflip entries.
        seed: RNG seed; each enabled flag draws its own decision.
    """
    get = flags.get if isinstance(flags, dict) else (lambda k, d=False: getattr(flags, k, d))
    rng = np.random.default_rng(seed)
    coin_h, coin_t = rng.uniform(size=2)
    s = rng.uniform(*SCALE_RANGE)
    if get("hflip", False) and coin_h < 0.5:
        sample = hflip(sample)
    if get("scale", False):
        sample = scale(sample, s)
    if get("tflip", False) and coin_t < 0.5:
        sample = tflip(sample)
    return sample


def select_visible_queries(sample: TrainingSample, max_queries=None, rng=None) -> TrainingSample:
    """Keep queries visible in the first frame (re-run after a time flip)."""
    keep = np.nonzero(sample.visible[:, 0])[0]
    if max_queries is not None and len(keep) > max_queries:
        rng = rng if rng is not None else np.random.default_rng(0)
        keep = np.sort(rng.choice(keep, size=max_queries, replace=False))
    return replace(sample, tracks=sample.tracks[keep], visible=sample.visible[keep])
