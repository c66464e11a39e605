"""Cost volumes and query feature interpolation.

Neighbour lists are computed outside the autograd graph (positions are
detached for the search) and passed in as long tensors, so gradients flow
through relative coordinates and features only.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .geometry import knn
from .nn import WeightNet, mlp

COST_WIDTH = 128


def neighbors(query, points, k):
    """kNN rows of `points` for each query as a long tensor [Q, min(k, N)]."""
    q = query.detach().cpu().numpy() if isinstance(query, torch.Tensor) else query
    p = points.detach().cpu().numpy() if isinstance(points, torch.Tensor) else points
    if len(p) == 0:
        raise ValueError("empty level")
    return torch.as_tensor(knn(q, p, k))


class QueryFeature(nn.Module):
    """f^q = MLP(sum_j W(q - p_j) * f_j) over the query's K nearest level points."""

    def __init__(self, channels, weight_hidden=16, scale=1.0):
        super().__init__()
        self.weight = WeightNet(channels, weight_hidden, scale)
        self.out = mlp([channels, channels, channels])

    def forward(self, q, points, feats, nbrs):
        """
        Args:
            q: [Q, 3] query positions.
            points: [N, 3] level points.
            feats: [N, C] decoder features.
            nbrs: [Q, K] rows into points.

        Returns:
            [Q, C]
        """
        rel = q[:, None, :] - points[nbrs]
        return self.out((self.weight(rel) * feats[nbrs]).sum(dim=1))


class QueryCost(nn.Module):
    """C = sum_j W(q - p_j) * MLP([f^q, f_j, p_j - q]) over the K nearest next-frame points."""

    def __init__(self, channels, width=COST_WIDTH, weight_hidden=32, scale=1.0):
        super().__init__()
        self.weight = WeightNet(width, weight_hidden, scale)
        self.cost = mlp([2 * channels + 3, width, width], coord_scale=scale)

    def forward(self, q, fq, points, feats, nbrs):
        """
        Args:
            q: [Q, 3] (warped) query positions.
            fq: [Q, A, C] appearance features, one cost vector per appearance.
            points: [N, 3] next-frame level points.
            feats: [N, C] next-frame decoder features.
            nbrs: [Q, K] rows into points.

        Returns:
            [Q, A, width]
        """
        n_app = fq.shape[1]
        rel = points[nbrs] - q[:, None, :]                      # [Q, K, 3]
        w = self.weight(-rel)                                    # [Q, K, D]
        k = nbrs.shape[1]
        fp = feats[nbrs]                                         # [Q, K, C]
        x = torch.cat([
            fq[:, :, None, :].expand(-1, -1, k, -1),
            fp[:, None].expand(-1, n_app, -1, -1),
            rel[:, None].expand(-1, n_app, -1, -1),
        ], dim=-1)
        return (w[:, None] * self.cost(x)).sum(dim=2)


class PatchCost(nn.Module):
    """Patch-to-patch cost: C_i = sum_u W_t(p_i - p_u) sum_j W_t1(p_u - p'_j) * MLP([f_u, f'_j, p'_j - p_u])."""

    def __init__(self, channels, width=COST_WIDTH, weight_hidden=32, scale=1.0):
        super().__init__()
        self.weight_t = WeightNet(width, weight_hidden, scale)
        self.weight_t1 = WeightNet(width, weight_hidden, scale)
        self.cost = mlp([2 * channels + 3, width, width], coord_scale=scale)

    def forward(self, src, src_f, tgt, tgt_f, nbr_src, nbr_tgt):
        """
        Args:
            src: [N, 3] (warped) frame-t points.
            src_f: [N, C] frame-t features.
            tgt: [M, 3] frame-t+1 points.
            tgt_f: [M, C] frame-t+1 features.
            nbr_src: [N, Kt] rows into src (patch around each point).
            nbr_tgt: [N, Kt1] rows into tgt for each src point.

        Returns:
            [N, width]
        """
        rel = tgt[nbr_tgt] - src[:, None, :]
        k = nbr_tgt.shape[1]
        x = torch.cat([src_f[:, None].expand(-1, k, -1), tgt_f[nbr_tgt], rel], dim=-1)
        inner = (self.weight_t1(-rel) * self.cost(x)).sum(dim=1)        # [N, D]
        rel_t = src[:, None, :] - src[nbr_src]
        return (self.weight_t(rel_t) * inner[nbr_src]).sum(dim=1)


def patch_neighbors(src, tgt, k_src=8, k_tgt=8):
    """Neighbour lists for PatchCost."""
    return neighbors(src, src, k_src), neighbors(src, tgt, k_tgt)
