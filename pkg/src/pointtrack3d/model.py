"""The full tracking network: backbone plus per-level cost, fusion and flow modules."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .backbone import Backbone, BackboneConfig, FeaturePyramid
from .costvolume import COST_WIDTH, PatchCost, QueryCost, QueryFeature, patch_neighbors
from .fusion import MEMORY, WIDTH, CostFusion, FlowPredictor, MotionPrior, OcclusionHead
from .geometry import knn
from .nn import mlp


class QueryUncoveredError(ValueError):
    pass


@dataclass
class ModelConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    k_query: int = 16
    k_patch: tuple = (8, 8)
    memory: int = MEMORY
    use_motion_prior: bool = True
    appearance: str = "multi"        # multi | single

    def to_dict(self):
        d = asdict(self)
        d["backbone"] = {k: list(v) if isinstance(v, tuple) else v for k, v in d["backbone"].items()}
        d["k_patch"] = list(self.k_patch)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        bb = {k: tuple(v) if isinstance(v, list) else v for k, v in d.pop("backbone", {}).items()}
        if "k_patch" in d:
            d["k_patch"] = tuple(d["k_patch"])
        return cls(backbone=BackboneConfig(**bb), **d)


def level_neighbors(pyr: FeaturePyramid, level: int, q, k: int) -> torch.Tensor:
    """kNN of q among the full level, mapped to the decoded (compact) rows.

    Raises QueryUncoveredError when a neighbour was pruned by the decode mask.
    """
    pts = pyr.hierarchy.levels[level].points
    nb = knn(q.detach().cpu().numpy(), pts, k)
    rows = pyr.rows[level]
    if len(rows) == len(pts):
        return torch.as_tensor(nb)
    pos = np.searchsorted(rows, nb)
    if len(rows) == 0 or np.any(rows[np.minimum(pos, len(rows) - 1)] != nb):
        raise QueryUncoveredError("query uncovered")
    return torch.as_tensor(pos)


class TrackerNet(nn.Module):
    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = cfg = config or ModelConfig()
        self.backbone = Backbone(cfg.backbone)
        w = cfg.backbone.widths
        L = cfg.backbone.num_levels
        g = cfg.backbone.grid_sizes        # relative coordinates and flows enter the modules in grid units
        self.query_feat = nn.ModuleList(QueryFeature(w[l], scale=g[l]) for l in range(L))
        self.query_cost = nn.ModuleList(QueryCost(w[l], scale=g[l]) for l in range(L))
        self.patch_cost = nn.ModuleList(PatchCost(w[l], scale=g[l]) for l in range(L))
        self.sf_heads = nn.ModuleList(FlowPredictor(COST_WIDTH, w[l], scale=g[l]) for l in range(L))
        # stage-1 query path: a plain projection of the current-appearance cost feature
        self.adapters = nn.ModuleList(mlp([COST_WIDTH + w[l], WIDTH, WIDTH]) for l in range(L))
        self.motion_prior = nn.ModuleList(MotionPrior(cfg.memory, scale=g[l]) for l in range(L))
        self.fusion = nn.ModuleList(CostFusion(COST_WIDTH + w[l]) for l in range(L))
        self.track_heads = nn.ModuleList(FlowPredictor(WIDTH, w[l], scale=g[l]) for l in range(L))
        self.occ_heads = nn.ModuleList(OcclusionHead() for _ in range(L))

    @property
    def num_levels(self):
        return self.config.backbone.num_levels

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    def stage_parameters(self, stage):
        """Trainable groups: stage 'pretrain' excludes fusion modules, 'track' excludes the backbone."""
        fusion = ["motion_prior", "fusion", "occ_heads"]
        for name, p in self.named_parameters():
            top = name.split(".")[0]
            if stage == "pretrain" and top in fusion:
                continue
            if stage == "track" and top == "backbone":
                continue
            yield name, p

    def pyramid(self, frame, mask=None, hierarchy=None) -> FeaturePyramid:
        return self.backbone(frame, mask=mask, hierarchy=hierarchy)

    # -- dense scene flow ------------------------------------------------------------------------

    def sceneflow(self, pyr_t: FeaturePyramid, pyr_t1: FeaturePyramid) -> list:
        """Coarse-to-fine dense flow; returns [N_l, 3] per level (index 0 = densest)."""
        k_src, k_tgt = self.config.k_patch
        flows = [None] * self.num_levels
        feat = None
        for l in reversed(range(self.num_levels)):
            p = pyr_t.points(l)
            p1 = pyr_t1.points(l)
            if l == self.num_levels - 1:
                coarse = p.new_zeros(p.shape)
            else:
                lev = pyr_t.hierarchy.levels[l]
                idx = torch.as_tensor(lev.up_index)
                w = torch.as_tensor(lev.up_weight, dtype=p.dtype)[..., None]
                coarse = (flows[l + 1][idx] * w).sum(dim=1)
                feat = (feat[idx] * w).sum(dim=1)
            warped = p + coarse
            nb_src, nb_tgt = patch_neighbors(warped, p1, k_src, k_tgt)
            cost = self.patch_cost[l](warped, pyr_t.decoder[l], p1, pyr_t1.decoder[l], nb_src, nb_tgt)
            flows[l], feat = self.sf_heads[l](cost, feat, pyr_t.decoder[l], coarse)
        return flows

    # -- query path --------------------------------------------------------------------------------

    def query_features(self, pyr: FeaturePyramid, q) -> list:
        """Interpolated query features per level, each [Q, C_l]."""
        out = []
        for l in range(self.num_levels):
            nb = level_neighbors(pyr, l, q, self.config.k_query)
            pts = torch.as_tensor(pyr.decoded_points(l), dtype=q.dtype)
            out.append(self.query_feat[l](q, pts, pyr.decoder[l], nb))
        return out

    def query_step(self, q, ctx, appearances, valid, motions, pyr_t1: FeaturePyramid, fuse=True):
        """One coarse-to-fine motion prediction for a batch of queries.

        Args:
            q: [Q, 3] positions at frame t.
            ctx: per level [Q, C_l] features at q in frame t.
            appearances: per level [Q, A, C_l] stored snapshots (the last slot is used without fusion).
            valid: [Q, A] bool.
            motions: [Q, M, 3] past motions.
            pyr_t1: frame t+1 pyramid.
            fuse: use the fusion module (stage 2) instead of the stage-1 adapter.

        Returns:
            (flows per level [Q, 3], occlusion logits per level [Q] or None)
        """
        L = self.num_levels
        flows, logits = [None] * L, [None] * L
        feat = None
        if fuse and not self.config.use_motion_prior:
            motions = torch.zeros_like(motions)
        for l in reversed(range(L)):
            coarse = q.new_zeros(q.shape) if l == L - 1 else flows[l + 1]
            qw = q + coarse
            nb = level_neighbors(pyr_t1, l, qw, self.config.k_query)
            pts = torch.as_tensor(pyr_t1.decoded_points(l), dtype=q.dtype)
            cost = self.query_cost[l](qw, appearances[l], pts, pyr_t1.decoder[l], nb)
            cf = torch.cat([cost, appearances[l]], dim=-1)
            if fuse:
                phi = self.motion_prior[l](motions)
                fused = self.fusion[l](cf, valid, phi)
                logits[l] = self.occ_heads[l](fused)
            else:
                fused = self.adapters[l](cf[:, -1])
            flows[l], feat = self.track_heads[l](fused, feat, ctx[l], coarse)
        return flows, (logits if fuse else None)


def build_model(config: ModelConfig | None = None, seed=0) -> TrackerNet:
    torch.manual_seed(seed)
    return TrackerNet(config)


def load_model(path) -> TrackerNet:
    from .checkpoint import load_checkpoint

    state, cfg, extra = load_checkpoint(path)
    net = TrackerNet(ModelConfig.from_dict(cfg))
    # training checkpoints also carry optimizer state under a reserved prefix
    net.load_state_dict({k: v for k, v in state.items() if not k.startswith("__optim__.")})
    net.checkpoint_hash = extra["sha256"]
    net.checkpoint_extra = extra
    return net


def save_model(net: TrackerNet, path, extra=None) -> str:
    from .checkpoint import save_checkpoint

    return save_checkpoint(path, net, net.config.to_dict(), extra)
