"""Point U-Net backbone over a grid-subsampled point pyramid.

Levels are indexed from 0 (densest) in code. Selective decoding keeps only
points near the queries at the two densest levels.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch
from torch import nn

from .geometry import PointCloudFrame, grid_subsample, knn, radius_mask, three_nn_weights
from .nn import PointConv

log = logging.getLogger(__name__)

MIN_POINTS = 8
SELECTIVE_LEVELS = (0, 1)


@dataclass
class BackboneConfig:
    grid_sizes: tuple = (0.02, 0.04, 0.08, 0.16)
    widths: tuple = (32, 64, 128, 256)
    k: int = 16
    in_channels: int = 3
    weight_hidden: int = 16

    @property
    def num_levels(self):
        return len(self.grid_sizes)

    def default_radii(self):
        """Selective-decoding radius per level: 2 * grid * K^(1/3)."""
        return tuple(2.0 * g * self.k ** (1.0 / 3.0) for g in self.grid_sizes)


@dataclass
class Level:
    """One pyramid level.

    Attributes:
        points: [N, 3].
        neighbors: [N, K] kNN within this level.
        parent: [N] row of the next coarser level each point collapsed into (None at the top).
        down_neighbors: [N, K] kNN into the next finer level (None at level 0).
        up_index, up_weight: [N, 3] inverse-distance 3-NN into the next coarser level.
    """

    points: np.ndarray
    neighbors: np.ndarray
    parent: Optional[np.ndarray] = None
    down_neighbors: Optional[np.ndarray] = None
    up_index: Optional[np.ndarray] = None
    up_weight: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.points)


@dataclass
class PointHierarchy:
    levels: list
    grid_sizes: tuple

    def __len__(self):
        return len(self.levels)


def build_hierarchy(points, config: BackboneConfig) -> PointHierarchy:
    """Grid-subsample the cloud into config.num_levels levels with neighbour lists."""
    points = np.asarray(points, dtype=np.float64)
    if len(points) < MIN_POINTS:
        raise ValueError(f"need at least {MIN_POINTS} points, got {len(points)}")
    levels = []
    cur = points
    for l, g in enumerate(config.grid_sizes):
        if l > 0:
            cur, _, parent = grid_subsample(cur, None, g)
            levels[-1].parent = parent
        levels.append(Level(cur, knn(cur, cur, config.k)))
    for l in range(1, len(levels)):
        fine, coarse = levels[l - 1], levels[l]
        coarse.down_neighbors = knn(coarse.points, fine.points, config.k)
        fine.up_index, fine.up_weight = three_nn_weights(fine.points, coarse.points)
    return PointHierarchy(levels, tuple(config.grid_sizes))


@dataclass
class DecodeMask:
    """Keep-flags for the selectively decoded levels (others are fully decoded)."""

    keep: dict = field(default_factory=dict)

    @property
    def compression_rate(self) -> dict:
        """total / kept per masked level (inf when nothing is kept)."""
        return {l: (len(k) / k.sum() if k.sum() else float("inf")) for l, k in self.keep.items()}


def build_decode_mask(hierarchy: PointHierarchy, queries, radii=None, config: Optional[BackboneConfig] = None
                      ) -> DecodeMask:
    """Union of balls around the queries at the two densest levels.

    Args:
        hierarchy: the frame's pyramid.
        queries: [Q, 3].
        radii: per-level radius in meters (defaults to 2 * grid * K^(1/3)).
    """
    if radii is None:
        radii = (config or BackboneConfig(grid_sizes=hierarchy.grid_sizes)).default_radii()
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    if len(queries) == 0:
        log.warning("no queries: decode mask keeps nothing")
    keep = {}
    for l in SELECTIVE_LEVELS:
        if l >= len(hierarchy):
            break
        if not radii[l] > 0:
            raise ValueError("radii must be positive")
        keep[l] = radius_mask(hierarchy.levels[l].points, queries, radii[l])
    mask = DecodeMask(keep)
    for l, rate in mask.compression_rate.items():
        log.debug("level %d compression rate %.2f", l + 1, rate)
    return mask


def close_mask(hierarchy: PointHierarchy, mask: DecodeMask) -> DecodeMask:
    """Add the coarser masked points that the finer kept points read during decoding.

    The ball radii cover the receptive field on evenly sampled surfaces; on sparse
    or ragged clouds the upsampling stencil can reach further, and closing the
    mask avoids a full-decode fallback.
    """
    keep = {l: k.copy() for l, k in mask.keep.items()}
    for l in sorted(keep):
        if l + 1 not in keep or not keep[l].any():
            continue
        lev = hierarchy.levels[l]
        need = np.unique(lev.neighbors[keep[l]])
        keep[l + 1][np.unique(lev.up_index[need])] = True
    return DecodeMask(keep)


@dataclass
class FeaturePyramid:
    """Encoder/decoder features aligned to a PointHierarchy.

    Attributes:
        hierarchy: the pyramid geometry.
        encoder: per level [N_l, C_l].
        decoder: per level [n_l, C_l] for the decoded rows only.
        rows: per level sorted indices of the decoded points.
    """

    hierarchy: PointHierarchy
    encoder: list
    decoder: list
    rows: list

    def points(self, level, like=None):
        t = torch.as_tensor(self.hierarchy.levels[level].points)
        return t.to(like.dtype) if like is not None else t.to(self.encoder[level].dtype)

    def decoded_points(self, level):
        return self.hierarchy.levels[level].points[self.rows[level]]

    def is_full(self, level):
        return len(self.rows[level]) == len(self.hierarchy.levels[level])

    def detach(self):
        return FeaturePyramid(self.hierarchy, [e.detach() for e in self.encoder],
                              [d.detach() for d in self.decoder], self.rows)


class MaskTooTightError(ValueError):
    pass


def _lookup(rows, idx):
    """Positions of idx inside the sorted array rows; raises when absent."""
    pos = np.searchsorted(rows, idx)
    pos = np.minimum(pos, max(len(rows) - 1, 0))
    if len(rows) == 0 or np.any(rows[pos] != idx):
        raise MaskTooTightError("mask too tight")
    return pos


class Backbone(nn.Module):
    """Encoder: two point convolutions per level, the first strided from the finer level.
    Decoder: 3-NN upsampling, concatenation with the encoder skip, one point convolution.
    """

    def __init__(self, config: Optional[BackboneConfig] = None):
        super().__init__()
        self.config = cfg = config or BackboneConfig()
        w, h, g = cfg.widths, cfg.weight_hidden, cfg.grid_sizes
        self.enc_in = nn.ModuleList()
        self.enc_out = nn.ModuleList()
        for l in range(cfg.num_levels):
            cin = cfg.in_channels if l == 0 else w[l - 1]
            self.enc_in.append(PointConv(cin, w[l], h, g[l]))
            self.enc_out.append(PointConv(w[l], w[l], h, g[l]))
        self.dec = nn.ModuleList(
            PointConv(w[l] + (w[l + 1] if l + 1 < cfg.num_levels else 0), w[l], h, g[l])
            for l in range(cfg.num_levels)
        )

    @property
    def widths(self):
        return tuple(self.config.widths)

    def _dtype(self):
        return next(self.parameters()).dtype

    def encode(self, hierarchy: PointHierarchy, features) -> list:
        """Encoder features per level.

        Args:
            features: [N_0, in_channels] tensor or array aligned to level-0 points.
        """
        dt = self._dtype()
        feats = torch.as_tensor(features).to(dt) if not isinstance(features, torch.Tensor) else features
        out = []
        for l, lev in enumerate(hierarchy.levels):
            p = torch.as_tensor(lev.points, dtype=dt)
            nb = torch.as_tensor(lev.neighbors)
            if l == 0:
                x = self.enc_in[0](p, p, feats, nb)
            else:
                prev = torch.as_tensor(hierarchy.levels[l - 1].points, dtype=dt)
                x = self.enc_in[l](p, prev, out[-1], torch.as_tensor(lev.down_neighbors))
            out.append(self.enc_out[l](p, p, x, nb))
        return out

    def decode(self, hierarchy: PointHierarchy, encoder: list, mask: Optional[DecodeMask] = None):
        """Decoder features (compact rows) per level.

        Returns:
            (decoder list, rows list).
        """
        n_levels = len(hierarchy)
        dec, rows = [None] * n_levels, [None] * n_levels
        dt = encoder[0].dtype
        for l in reversed(range(n_levels)):
            lev = hierarchy.levels[l]
            keep = mask.keep.get(l) if mask is not None else None
            out_rows = np.arange(len(lev)) if keep is None else np.nonzero(keep)[0]
            rows[l] = out_rows
            width = self.config.widths[l]
            if len(out_rows) == 0:
                dec[l] = encoder[l].new_zeros((0, width))
                continue
            need = np.unique(lev.neighbors[out_rows])
            x = encoder[l][torch.as_tensor(need)]
            if l + 1 < n_levels:
                pos = _lookup(rows[l + 1], lev.up_index[need])
                w = torch.as_tensor(lev.up_weight[need], dtype=dt)
                up = (dec[l + 1][torch.as_tensor(pos)] * w[..., None]).sum(dim=1)
                x = torch.cat([up, x], dim=1)
            local = torch.as_tensor(np.searchsorted(need, lev.neighbors[out_rows]))
            p_out = torch.as_tensor(lev.points[out_rows], dtype=dt)
            p_need = torch.as_tensor(lev.points[need], dtype=dt)
            dec[l] = self.dec[l](p_out, p_need, x, local)
        return dec, rows

    def forward(self, frame: PointCloudFrame | PointHierarchy, features=None, mask=None,
                hierarchy: Optional[PointHierarchy] = None) -> FeaturePyramid:
        """Encode and decode one frame.

        Args:
            frame: a PointCloudFrame (features taken from it) or a prebuilt hierarchy.
            features: level-0 features when `frame` is a hierarchy.
            mask: optional DecodeMask, or an array of query points to build one from.
        """
        if isinstance(frame, PointHierarchy):
            hier = frame
        else:
            hier = hierarchy or build_hierarchy(frame.points, self.config)
            features = frame.features if features is None else features
        if mask is not None and not isinstance(mask, DecodeMask):
            mask = build_decode_mask(hier, mask, config=self.config)
        enc = self.encode(hier, features)
        dec, rows = self.decode(hier, enc, mask)
        return FeaturePyramid(hier, enc, dec, rows)
