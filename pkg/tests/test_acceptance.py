"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 6-8 train small models on one CPU core and take the bulk of the
runtime; they share corpora and a stage-1 checkpoint through session fixtures.
"""

import contextlib
import time

import numpy as np
import pytest
import torch
from scipy.ndimage import maximum_filter, minimum_filter

import experiments as ex
from conftest import ACCEPTANCE_LINES
from helpers import fd_check
from pointtrack3d.backbone import Backbone, BackboneConfig, build_decode_mask, build_hierarchy, close_mask
from pointtrack3d.costvolume import PatchCost, QueryCost, QueryFeature, neighbors, patch_neighbors
from pointtrack3d.evalkit import (compute_metrics, gt_2d_tracks, interpolation_ablation, lift_2d_tracks,
                                  rotated_view_eval)
from pointtrack3d.fusion import CostFusion, FlowPredictor, MotionPrior, OcclusionHead
from pointtrack3d.geometry import CameraModel, DepthMap, PointCloudFrame
from pointtrack3d.losses import (LossWeights, neighbor_graph, projection_loss, rigidity_iso_losses, sceneflow_loss,
                                 smoothness_loss, total_loss, track_loss)
from pointtrack3d.model import build_model, level_neighbors
from pointtrack3d.synthdata import (TrainingSample, clip_from_record, generate_sequence, random_script,
                                    simulate_sceneflow_pair)
from pointtrack3d.tracker import rollout
from pointtrack3d.training import TrainConfig, epe3d, pretrain_sceneflow, train_tracker


@contextlib.contextmanager
def criterion(n, title, budget_s, setup_s=0.0):
    """Times the block plus `setup_s` (shared training done in fixtures) against the budget."""
    t0 = time.perf_counter() - setup_s
    details = {}
    try:
        yield details
        elapsed = time.perf_counter() - t0
        assert elapsed < budget_s, f"runtime {elapsed:.0f}s exceeds budget {budget_s}s"
    except BaseException as err:
        elapsed = time.perf_counter() - t0
        line = f"FAIL criterion {n}: {title} ({elapsed:.1f}s) {_fmt(details)} :: {str(err).splitlines()[0][:160]}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        raise
    line = f"PASS criterion {n}: {title} ({elapsed:.1f}s) {_fmt(details)}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def _fmt(details):
    return " ".join(f"{k}={v:.4g}" if isinstance(v, float) else f"{k}={v}" for k, v in details.items())


def rnd(*shape, seed=0, scale=1.0):
    return torch.randn(*shape, dtype=torch.float64, generator=torch.Generator().manual_seed(seed)) * scale


def knn_loop(q, pts, k):
    d = [float(((pts[j] - q) ** 2).sum()) for j in range(len(pts))]
    return sorted(range(len(pts)), key=lambda j: (d[j], j))[:k]


# -- 1 ------------------------------------------------------------------------------------------------


def test_criterion_1_oracle_equivalence():
    with criterion(1, "cost volumes match triple-loop oracles within 1e-6", 60) as info:
        g = torch.Generator().manual_seed(0)
        C = 8
        pts = torch.rand(64, 3, generator=g, dtype=torch.float64) * 0.2
        feats = torch.randn(64, C, generator=g, dtype=torch.float64)
        tgt = torch.rand(60, 3, generator=g, dtype=torch.float64) * 0.2
        tfeats = torch.randn(60, C, generator=g, dtype=torch.float64)
        qs = torch.rand(6, 3, generator=g, dtype=torch.float64) * 0.2
        worst = 0.0

        torch.manual_seed(0)
        qf = QueryFeature(C).double()
        got = qf(qs, pts, feats, neighbors(qs, pts, 16))
        for i in range(len(qs)):
            acc = sum(qf.weight(qs[i] - pts[j]) * feats[j] for j in knn_loop(qs[i], pts, 16))
            worst = max(worst, float((got[i] - qf.out(acc)).detach().abs().max()))

        qc = QueryCost(C).double()
        fq = torch.randn(6, 3, C, generator=g, dtype=torch.float64)
        got = qc(qs, fq, tgt, tfeats, neighbors(qs, tgt, 16))
        for i in range(len(qs)):
            for a in range(3):
                acc = sum(qc.weight(qs[i] - tgt[j]) * qc.cost(torch.cat([fq[i, a], tfeats[j], tgt[j] - qs[i]]))
                          for j in knn_loop(qs[i], tgt, 16))
                worst = max(worst, float((got[i, a] - acc).detach().abs().max()))

        pc = PatchCost(C).double()
        nb_s, nb_t = patch_neighbors(pts, tgt, 8, 8)
        got = pc(pts, feats, tgt, tfeats, nb_s, nb_t)
        for i in range(len(pts)):
            acc = 0.0
            for u in knn_loop(pts[i], pts, 8):
                inner = sum(pc.weight_t1(pts[u] - tgt[j]) * pc.cost(torch.cat([feats[u], tfeats[j], tgt[j] - pts[u]]))
                            for j in knn_loop(pts[u], tgt, 8))
                acc = acc + pc.weight_t(pts[i] - pts[u]) * inner
            worst = max(worst, float((got[i] - acc).detach().abs().max()))
        info["max_abs_err"] = worst
        assert worst < 1e-6


# -- 2 ------------------------------------------------------------------------------------------------


def test_criterion_2_gradient_suite():
    with criterion(2, "finite-difference gradients (rel 1e-4, float64)", 600) as info:
        checked = []
        # backbone: encoder + decoder on a 48-point cloud
        rng = np.random.default_rng(5)
        xy = rng.uniform(0, 0.15, size=(48, 2))
        cloud = np.column_stack([xy, 0.05 * np.sin(6 * xy[:, 0])])
        torch.manual_seed(0)
        bb = Backbone(BackboneConfig()).double()
        hier = build_hierarchy(cloud, bb.config)
        probe = rnd(48, 32, seed=1)
        fd_check(lambda f: (bb.decode(hier, bb.encode(hier, f))[0][0] * probe).sum(), [torch.as_tensor(rng.uniform(
            size=(48, 3)))])
        checked.append("backbone")

        pts, feats = rnd(24, 3, scale=0.1), rnd(24, 8, seed=1)
        qs = rnd(3, 3, seed=2, scale=0.1)
        torch.manual_seed(0)
        qf, qc, pc = QueryFeature(8).double(), QueryCost(8, width=16).double(), PatchCost(8, width=16).double()
        nb = neighbors(qs, pts, 8)
        fd_check(lambda q, p, f: qf(q, p, f, nb).square().sum(), [qs, pts, feats])
        fq = rnd(3, 2, 8, seed=3)
        fd_check(lambda q, a, p, f: qc(q, a, p, f, nb).square().sum(), [qs, fq, pts, feats])
        src, sf = rnd(12, 3, seed=4, scale=0.1), rnd(12, 8, seed=5)
        nb_s, nb_t = patch_neighbors(src, pts, 4, 4)
        fd_check(lambda a, b, c, d: pc(a, b, c, d, nb_s, nb_t).square().sum(), [src, sf, pts, feats])
        checked += ["query_feature", "query_cost", "patch_cost"]

        torch.manual_seed(0)
        mp = MotionPrior().double()
        fd_check(lambda m: (mp(m) * rnd(2, 128, seed=6)).sum(), [rnd(2, 8, 3, seed=7, scale=0.02)])
        fu = CostFusion(6, width=16).double()
        valid = torch.tensor([[True, True, False], [True, True, True]])
        fd_check(lambda c, p: (fu(c, valid, p) * rnd(2, 16, seed=8)).sum(), [rnd(2, 3, 6, seed=9), rnd(2, 16)])
        fp = FlowPredictor(16, 8).double()
        torch.nn.init.normal_(fp.flow.weight)
        fd_check(lambda c, x: fp(c, x, rnd(2, 8), rnd(2, 3))[0].square().sum(), [rnd(2, 16), rnd(2, 64, seed=3)])
        oh = OcclusionHead().double()
        fd_check(lambda c: oh(c).sum(), [rnd(2, 128)])
        checked += ["motion_prior", "fusion", "flow_head", "occlusion_head"]

        gt = rnd(3, 4, 3, seed=11)
        fd_check(lambda p: track_loss(p, gt), [rnd(2, 3, 4, 3)])
        g2 = [[rnd(4, 3, seed=12), rnd(2, 3, seed=13)]]
        fd_check(lambda a, b: sceneflow_loss([[a, b]], g2), [rnd(4, 3, seed=14), rnd(2, 3, seed=15)])
        fd_check(smoothness_loss, [rnd(2, 4, 3, 3, seed=16)])
        base = rng.normal(size=(6, 3)) * 0.1
        graph = neighbor_graph(base, 3)
        p0 = torch.as_tensor(base)
        moving = torch.as_tensor(base + rng.normal(size=(2, 6, 3)) * 0.02)
        fd_check(lambda p: rigidity_iso_losses(torch.cat([p0[None], p]), graph=graph)[0], [moving])
        fd_check(lambda p: rigidity_iso_losses(torch.cat([p0[None], p]), graph=graph)[1], [moving])
        cam = CameraModel.look_at((0.0, -2.0, 0.3), fx=100.0, height=96, width=96)
        gt2d = rng.uniform(30, 60, size=(2, 4, 2))
        fd_check(lambda p: projection_loss(p, [cam] * 2, gt2d)[0], [rnd(1, 2, 4, 3, seed=17, scale=0.2)])
        checked += ["track", "sceneflow", "smooth", "rigid", "iso", "projection"]
        info["checked"] = len(checked)


# -- 3 ------------------------------------------------------------------------------------------------


def test_criterion_3_selective_decoding():
    with criterion(3, "pruned decoding equals full decoding; compression > 1 on 60k points", 600) as info:
        script = random_script(np.random.default_rng(0), num_frames=2, points_per_frame=60000, num_queries=32,
                               spacing=0.005)
        frame = generate_sequence(script, 0).frames[0]
        rng = np.random.default_rng(1)
        centers = frame.points[rng.choice(len(frame), 2, replace=False)]
        from pointtrack3d.geometry import knn
        queries = np.concatenate([frame.points[knn(c[None], frame.points, 16)[0]] for c in centers])
        queries = queries + rng.normal(scale=0.002, size=queries.shape)
        net = build_model(seed=0).double().eval()
        bb = net.backbone
        hier = build_hierarchy(frame.points, bb.config)
        mask = close_mask(hier, build_decode_mask(hier, queries, config=bb.config))
        with torch.no_grad():
            full = bb(frame, hierarchy=hier)
            pruned = bb(frame, mask=mask, hierarchy=hier)
            q = torch.as_tensor(queries)
            worst = 0.0
            for l in range(len(hier)):
                outs = []
                for pyr in (full, pruned):
                    nb = level_neighbors(pyr, l, q, 16)
                    outs.append(net.query_feat[l](q, torch.as_tensor(pyr.decoded_points(l)), pyr.decoder[l], nb))
                worst = max(worst, float((outs[0] - outs[1]).detach().abs().max()))
        rates = mask.compression_rate
        info.update(max_abs_err=worst, rate_l1=float(rates[0]), rate_l2=float(rates[1]))
        assert worst < 1e-6
        assert rates[0] > 1 and rates[1] > 1


# -- 4 ------------------------------------------------------------------------------------------------


def test_criterion_4_loss_weights():
    with criterion(4, "total_loss stage weights (2,1,0,0,0) and (2,1,0.3,0.2,0.2)", 1) as info:
        names = ["sf", "track", "smooth", "rigid", "iso"]
        for stage, expected in (("pretrain", (2, 1, 0, 0, 0)), ("track", (2, 1, 0.3, 0.2, 0.2))):
            w = LossWeights.for_stage(stage)
            assert w.as_tuple() == expected
            for k, name in enumerate(names):
                comp = {n: 0.0 for n in names}
                comp[name] = 1.0
                assert total_loss(comp, w) == expected[k]
        comp = {"sf": 0.5, "track": 0.25, "smooth": 2.0, "rigid": 4.0, "iso": 8.0}
        got = total_loss(comp, LossWeights.for_stage("track"))
        assert got == 2 * 0.5 + 1 * 0.25 + 0.3 * 2.0 + 0.2 * 4.0 + 0.2 * 8.0
        assert total_loss(dict.fromkeys(names, 1.0), LossWeights.for_stage("track")) == pytest.approx(3.7, abs=1e-12)
        info["total"] = float(got)


# -- 5 ------------------------------------------------------------------------------------------------


def test_criterion_5_metric_fidelity():
    with criterion(5, "metrics equal hand-enumerated oracles", 60) as info:
        gt = np.zeros((2, 5, 3))
        rep = compute_metrics(gt + [0.03, 0, 0], np.ones((2, 5), bool), gt, np.ones((2, 5), bool))
        assert rep.delta == {1: 0.0, 2: 0.0, 4: 100.0, 8: 100.0, 16: 100.0} and rep.delta_avg == 60.0
        gt = np.zeros((1, 10, 3))
        pred = gt.copy()
        pred[0, 7:, 0] = 0.6
        assert compute_metrics(pred, np.ones((1, 10), bool), gt, np.ones((1, 10), bool), sr_min_frames=1).sr == 70.0
        perfect = np.random.default_rng(0).normal(size=(3, 128, 3))
        vis = np.ones((3, 128), bool)
        rep = compute_metrics(perfect, vis, perfect, vis)
        assert rep.oa == rep.delta_avg == rep.sr == 100.0
        # enumerated instance: one query, four frames, errors 0.5, 1.5, 3, 20 cm; frame 3 GT-occluded
        gt = np.zeros((1, 4, 3))
        pred = gt.copy()
        pred[0, :, 0] = [0.005, 0.015, 0.03, 0.20]
        gv = np.array([[True, True, True, False]])
        pv = np.array([[True, False, True, False]])
        rep = compute_metrics(pred, pv, gt, gv)
        assert rep.oa == 75.0
        assert rep.delta == {1: 100 / 3, 2: 200 / 3, 4: 100.0, 8: 100.0, 16: 100.0}
        assert rep.delta_avg == pytest.approx((100 / 3 + 200 / 3 + 300) / 5, abs=1e-12)
        assert rep.delta_avg_occluded == 0.0
        # survival: drift past 50 cm at frame 3 of 4 for one query, never for the other
        gt = np.zeros((2, 4, 3))
        pred = gt.copy()
        pred[0, 3:, 0] = 0.51
        assert compute_metrics(pred, np.ones((2, 4), bool), gt, np.ones((2, 4), bool), sr_min_frames=1).sr == \
            pytest.approx(100 * (3 / 4 + 4 / 4) / 2, abs=1e-12)
        info["delta_avg_example"] = 60.0


# -- 6 ------------------------------------------------------------------------------------------------


def rigid_pair(n=500, seed=1):
    rng = np.random.default_rng(seed)
    script = random_script(rng, num_frames=2, points_per_frame=n, num_queries=8)
    frame = generate_sequence(script, seed).frames[0]
    f0, f1, flow = simulate_sceneflow_pair(PointCloudFrame(frame.points, frame.features), 0.05, 0.1, seed=1)
    q = np.arange(0, n, 16)
    tracks = np.stack([f0.points[q], f1.points[q]], axis=1)
    return TrainingSample([f0, f1], [flow], [-flow], tracks, np.ones(tracks.shape[:2], bool)), flow


def test_criterion_6_overfit():
    with criterion(6, "overfit: stage-1 EPE3D < 0.005 m, stage-2 clip delta_avg >= 90", 3 * 3600) as info:
        sample, flow = rigid_pair()
        net, _ = pretrain_sceneflow(TrainConfig(steps=400, batch_size=1, augment={}, lr=1e-3, max_queries=32),
                                    [sample], build_model(seed=0))
        epe = epe3d(net, sample.frames[0], sample.frames[1], flow)
        info["epe3d_m"] = epe

        rec = generate_sequence(random_script(np.random.default_rng(1), num_frames=8, num_queries=32,
                                              query_start="first"), 0)
        clip = clip_from_record(rec, 0, 8)
        net2, _ = pretrain_sceneflow(TrainConfig(steps=300, batch_size=1, augment={}, lr=1e-3), [clip],
                                     build_model(seed=0))
        train_tracker(TrainConfig(stage="track", steps=600, batch_size=1, augment={}, lr=1e-3), [clip], net2)
        with torch.no_grad():
            out = rollout(net2, clip.frames, clip.tracks[:, 0], selective=False)
        rep = compute_metrics(out.positions.double().numpy(), ~out.occluded, clip.tracks, clip.visible)
        info["clip_delta_avg"] = rep.delta_avg
        assert epe < 0.005
        assert rep.delta_avg >= 90.0


# -- 7 and 8: shared corpora and stage-1 model ------------------------------------------------------------


@pytest.fixture(scope="session")
def train_corpus():
    return ex.corpus(12, 100, "mixed")


@pytest.fixture(scope="session")
def occlusion_eval():
    return ex.corpus(20, 200, "occlusion")


SETUP_SECONDS = {}


@pytest.fixture(scope="session")
def stage1_model(train_corpus):
    with ex.Timer() as t:
        net = ex.stage1(train_corpus)
    SETUP_SECONDS["stage1"] = t.seconds
    return net


@pytest.fixture(scope="session")
def ablation_models(stage1_model, train_corpus):
    models = {}
    for name, overrides in ex.ABLATION_CONFIGS.items():
        with ex.Timer() as t:
            models[name] = ex.stage2(stage1_model, train_corpus, overrides)
        SETUP_SECONDS[name] = t.seconds
    return models


def test_criterion_7_occlusion_trend(stage1_model, ablation_models, occlusion_eval):
    # runtime covers stage 1 and the full model's stage 2
    setup = SETUP_SECONDS["stage1"] + SETUP_SECONDS["multi-app + motion"]
    with criterion(7, "fusion tracker beats chaining on occluded delta_avg by >= 10", 3600, setup) as info:
        ours = ex.eval_tracker(ablation_models["multi-app + motion"], occlusion_eval)
        chain = ex.eval_chaining(stage1_model, occlusion_eval)
        info.update(ours_occ=ours.delta_avg_occluded, chaining_occ=chain.delta_avg_occluded,
                    ours_vis=ours.delta_avg, chaining_vis=chain.delta_avg, occluded_entries=ours.counts["occluded"])
        assert ours.delta_avg_occluded - chain.delta_avg_occluded >= 10.0


def test_criterion_8_ablation_ranking(ablation_models, occlusion_eval):
    # runtime covers stage 1 and all three stage-2 runs
    setup = SETUP_SECONDS["stage1"] + sum(SETUP_SECONDS[k] for k in ex.ABLATION_CONFIGS)
    with criterion(8, "multi-app+motion > multi-app > single-app on 3D delta_avg", 3 * 3600, setup) as info:
        scores = {name: ex.eval_tracker(net, occlusion_eval).delta_avg for name, net in ablation_models.items()}
        full, multi, single = (scores[k] for k in ex.ABLATION_CONFIGS)
        info.update(full=full, multi=multi, single=single)
        assert full > multi > single
        assert full - single >= 1.0


# -- 9 ------------------------------------------------------------------------------------------------


def boundary_noisy_depth(depth_map, rng, band=4, jump=0.05):
    """Depth with 'flying pixels': within `band` px of a > jump discontinuity, a random mix of both sides."""
    d = depth_map.depths.copy()
    valid = d > 0
    hi = maximum_filter(np.where(valid, d, 0.0), size=2 * band + 1)
    lo = minimum_filter(np.where(valid, d, np.inf), size=2 * band + 1)
    edge = valid & (hi - lo > jump)
    d[edge] = lo[edge] + rng.uniform(size=int(edge.sum())) * (hi[edge] - lo[edge])
    return DepthMap(d, depth_map.camera)


def test_criterion_9_rotated_view_trend():
    with criterion(9, "lifted tracks lose >= 10 points 0->90 deg; native 3D < half that", 1800) as info:
        recs = [generate_sequence(random_script(np.random.default_rng(s), num_frames=8, points_per_frame=2048,
                                                num_queries=32), s) for s in range(8)]
        lifted, gts, vis = [], [], []
        for rec in recs:
            rng = np.random.default_rng(0)
            uv, v2d = gt_2d_tracks(rec)
            maps = [boundary_noisy_depth(dm, rng) for dm in rec.depth_maps]
            traj = lift_2d_tracks(uv, v2d, maps, "bilinear", query_ids=rec.query_ids)
            rows = np.searchsorted(rec.query_ids, traj.query_ids)
            lifted.append(traj.positions)
            gts.append(rec.tracks[rows])
            vis.append(rec.visible[rows])
        lifted, gts, vis = map(np.concatenate, (lifted, gts, vis))
        native = gts + np.random.default_rng(1).normal(scale=0.01, size=gts.shape)
        cam = recs[0].cameras[0]
        a = rotated_view_eval(lifted, gts, vis, cam, (0, 90))
        b = rotated_view_eval(native, gts, vis, cam, (0, 90))
        drop_lifted = a[0]["delta_avg"] - a[90]["delta_avg"]
        drop_native = b[0]["delta_avg"] - b[90]["delta_avg"]
        info.update(lifted_0=a[0]["delta_avg"], lifted_90=a[90]["delta_avg"], native_0=b[0]["delta_avg"],
                    native_90=b[90]["delta_avg"])
        assert drop_lifted >= 10.0
        assert drop_native < drop_lifted / 2


# -- 10 -----------------------------------------------------------------------------------------------


def test_criterion_10_interpolation_harness():
    with criterion(10, "nearest-vs-bilinear harness reports both modes", 600) as info:
        recs = [generate_sequence(random_script(np.random.default_rng(s), num_frames=6, points_per_frame=2048,
                                                num_queries=16), s) for s in range(3)]
        reports = interpolation_ablation(recs)
        assert set(reports) == {"bilinear", "nearest"}
        for mode, rep in reports.items():
            vals = [rep.oa, rep.delta_avg, *rep.delta.values()]
            assert all(v is not None and 0.0 <= v <= 100.0 for v in vals)
            info[mode] = rep.delta_avg
