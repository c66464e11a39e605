"""Cost volume fusion: motion prior, cross-attention over appearances, flow and occlusion heads."""

from __future__ import annotations

import torch
from torch import nn

from .nn import mlp

MEMORY = 8          # past motions in the prior
WIDTH = 128
HEADS = 4
LAYERS = 2
GROUPS = 8
PRED_WIDTH = 64


class MotionPrior(nn.Module):
    """phi = GroupNorm(MLP(concat of the last M motions))."""

    def __init__(self, memory=MEMORY, width=WIDTH, groups=GROUPS, scale=1.0):
        super().__init__()
        self.memory = memory
        self.scale = float(scale)
        self.mlp = mlp([3 * memory, width, width])
        self.norm = nn.GroupNorm(groups, width)

    def forward(self, motions):
        """
        Args:
            motions: [Q, M, 3] oldest first.

        Returns:
            [Q, width]
        """
        if motions.dim() != 3 or motions.shape[1:] != (self.memory, 3):
            raise ValueError(f"motion buffer must be [Q, {self.memory}, 3], got {tuple(motions.shape)}")
        return self.norm(self.mlp(motions.reshape(len(motions), -1) / self.scale))


class DecoderLayer(nn.Module):
    """Cross-attention from a single query token to the key set, then a feed-forward block."""

    def __init__(self, width=WIDTH, heads=HEADS):
        super().__init__()
        self.attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.norm1 = nn.LayerNorm(width)
        self.ffn = mlp([width, 2 * width, width])
        self.norm2 = nn.LayerNorm(width)

    def forward(self, query, keys, padding=None):
        """
        Args:
            query: [Q, 1, W].
            keys: [Q, A, W].
            padding: [Q, A] True where a key is absent.

        Returns:
            (updated query [Q, 1, W], attention weights [Q, heads, 1, A])
        """
        out, weights = self.attn(query, keys, keys, key_padding_mask=padding, need_weights=True,
                                 average_attn_weights=False)
        x = self.norm1(query + out)
        return self.norm2(x + self.ffn(x)), weights


class CostFusion(nn.Module):
    """Attend from [phi, token] over the projected cost features plus a learnable key E.

    Output: C_hat = MLP(O + phi).
    """

    def __init__(self, in_dim, width=WIDTH, heads=HEADS, layers=LAYERS):
        super().__init__()
        self.key_proj = nn.Linear(in_dim, width)
        self.empty = nn.Parameter(torch.randn(width) * 0.02)      # E
        self.token = nn.Parameter(torch.randn(width) * 0.02)
        self.query_proj = nn.Linear(2 * width, width)
        self.layers = nn.ModuleList(DecoderLayer(width, heads) for _ in range(layers))
        self.out = mlp([width, width, width])

    def forward(self, cost_features, valid, phi, return_attention=False):
        """
        Args:
            cost_features: [Q, A, in_dim] concatenated [cost, appearance] per snapshot (A may be 0).
            valid: [Q, A] bool, False for padding slots.
            phi: [Q, width] motion prior.

        Returns:
            [Q, width] fused cost (and the per-layer attention weights if requested).
        """
        q = len(phi)
        keys = torch.cat([self.key_proj(cost_features), self.empty.expand(q, 1, -1).to(phi.dtype)], dim=1)
        padding = torch.cat([~valid, valid.new_zeros((q, 1))], dim=1)
        x = self.query_proj(torch.cat([phi, self.token.expand(q, -1).to(phi.dtype)], dim=-1))[:, None]
        attn = []
        for layer in self.layers:
            x, w = layer(x, keys, padding)
            attn.append(w)
        out = self.out(x[:, 0] + phi)
        return (out, attn) if return_attention else out


class FlowPredictor(nn.Module):
    """Residual flow head: flow(l) = coarse + scale * Linear(MLP([cost, pred_up, ctx, coarse / scale])).

    scale is a fixed length (the level's grid size in the model), so the head works in grid units.
    """

    def __init__(self, cost_width, ctx_width, pred_width=PRED_WIDTH, scale=1.0):
        super().__init__()
        self.pred_width = pred_width
        self.scale = float(scale)
        self.body = mlp([cost_width + pred_width + ctx_width + 3, WIDTH, pred_width], last_act=True)
        self.flow = nn.Linear(pred_width, 3)
        nn.init.zeros_(self.flow.weight)
        nn.init.zeros_(self.flow.bias)

    def forward(self, cost, pred_up, ctx, coarse):
        """
        Args:
            cost: [N, cost_width].
            pred_up: [N, pred_width] predictor features from the coarser level, or None.
            ctx: [N, ctx_width] decoder-feature context.
            coarse: [N, 3] upsampled coarser flow (zeros at the top level).

        Returns:
            (flow [N, 3], predictor features [N, pred_width])
        """
        if pred_up is None:
            pred_up = cost.new_zeros((len(cost), self.pred_width))
        feat = self.body(torch.cat([cost, pred_up, ctx, coarse / self.scale], dim=-1))
        return coarse + self.scale * self.flow(feat), feat


class OcclusionHead(nn.Module):
    def __init__(self, width=WIDTH):
        super().__init__()
        self.net = mlp([width, PRED_WIDTH, 1])

    def forward(self, fused):
        """Occlusion logits [N]; probability sigmoid(logit) > 0.5 means occluded."""
        return self.net(fused)[..., 0]


def occluded(logits):
    """Strict threshold: logit 0 (probability 0.5) counts as visible."""
    return torch.sigmoid(logits) > 0.5
