"""Small building blocks shared by the learned modules."""

from __future__ import annotations

import torch
from torch import nn


class CoordScale(nn.Module):
    """Divides the trailing `count` input channels (relative coordinates) by a fixed length."""

    def __init__(self, scale, count=3):
        super().__init__()
        self.scale = float(scale)
        self.count = count

    def forward(self, x):
        return torch.cat([x[..., :-self.count], x[..., -self.count:] / self.scale], dim=-1)

    def extra_repr(self):
        return f"scale={self.scale}, count={self.count}"


def mlp(channels, *, last_act=False, act=nn.SiLU, coord_scale=None):
    """Linear layers with smooth activations between them.

    With coord_scale, the last three input channels are coordinates divided by it first.
    """
    layers = [] if coord_scale is None else [CoordScale(coord_scale)]
    for i in range(len(channels) - 1):
        layers.append(nn.Linear(channels[i], channels[i + 1]))
        if i < len(channels) - 2 or last_act:
            layers.append(act())
    return nn.Sequential(*layers)


class WeightNet(nn.Module):
    """Elementwise kernel weights from relative coordinates: W(a, b) = MLP((a - b) / scale).

    scale is a fixed length (the level's grid size in the model) that brings
    metre offsets to order one.
    """

    def __init__(self, out_channels, hidden=16, scale=1.0):
        super().__init__()
        self.scale = float(scale)
        self.net = mlp([3, hidden, out_channels])

    def forward(self, rel):
        return self.net(rel / self.scale)


class PointConv(nn.Module):
    """Continuous point convolution.

    out_i = act(Linear(sum_j W(c_i - p_j) * f_j)) over the neighbour lists of each
    center c_i.
    """

    def __init__(self, in_channels, out_channels, weight_hidden=16, scale=1.0):
        super().__init__()
        self.weight = WeightNet(in_channels, weight_hidden, scale)
        self.linear = nn.Linear(in_channels, out_channels)
        self.act = nn.SiLU()

    def forward(self, centers, points, feats, neighbors):
        """
        Args:
            centers: [M, 3] output locations.
            points: [N, 3] input locations.
            feats: [N, C] input features.
            neighbors: [M, K] long tensor of rows into points.

        Returns:
            [M, out_channels]
        """
        rel = centers[:, None, :] - points[neighbors]
        agg = (self.weight(rel) * feats[neighbors]).sum(dim=1)
        return self.act(self.linear(agg))


def as_tensor(x, like: torch.Tensor | None = None, dtype=None):
    """numpy -> tensor on the dtype/device of `like` (float) or as long for integer arrays."""
    if isinstance(x, torch.Tensor):
        return x
    t = torch.as_tensor(x)
    if t.is_floating_point():
        if like is not None:
            return t.to(dtype=like.dtype, device=like.device)
        return t.to(dtype or torch.get_default_dtype())
    if like is not None:
        return t.to(device=like.device)
    return t
