import csv

import numpy as np
import pytest
import torch

from pointtrack3d.checkpoint import load_checkpoint
from pointtrack3d.geometry import PointCloudFrame
from pointtrack3d.model import build_model
from pointtrack3d.synthdata import TrainingSample, clip_from_record, generate_sequence, random_script, \
    simulate_sceneflow_pair
from pointtrack3d.training import (TrainConfig, TrainingError, cosine_lr, pretrain_sceneflow, simulated_clip,
                                   split_state, train_tracker)


def pair_sample(n=300, seed=0):
    rng = np.random.default_rng(seed)
    xy = rng.uniform(-0.3, 0.3, size=(n, 2))
    pts = np.column_stack([xy, 0.05 * np.sin(5 * xy[:, 0])])
    f0, f1, flow = simulate_sceneflow_pair(PointCloudFrame(pts, rng.uniform(size=(n, 3))), 0.03, 0.05, seed)
    q = np.arange(0, n, 10)
    tracks = np.stack([pts[q], pts[q] + flow[q]], axis=1)
    return TrainingSample([f0, f1], [flow], [-flow], tracks, np.ones(tracks.shape[:2], bool))


@pytest.fixture(scope="module")
def clip():
    rec = generate_sequence(random_script(np.random.default_rng(2), num_frames=4, points_per_frame=500,
                                          num_queries=6, query_start="first"), 0)
    return clip_from_record(rec, 0, 4)


def cfg(**kw):
    base = dict(steps=2, batch_size=1, augment={}, lr=1e-3)
    base.update(kw)
    return TrainConfig(**base)


def states_equal(a, b):
    return a.keys() == b.keys() and all(torch.equal(a[k], b[k]) for k in a)


class TestConfig:
    def test_track_requires_frozen_backbone(self):
        assert TrainConfig(stage="track").freeze_backbone
        with pytest.raises(ValueError):
            TrainConfig(stage="track", freeze_backbone=False)

    def test_cosine_schedule(self):
        assert cosine_lr(1.0, 0, 10) == 1.0
        assert cosine_lr(1.0, 5, 10) == pytest.approx(0.5)
        assert cosine_lr(1.0, 10, 10) == pytest.approx(0.0)


class TestPretrain:
    def test_zero_steps_is_init(self, tmp_path):
        init = build_model(seed=0).state_dict()
        net, rows = pretrain_sceneflow(cfg(steps=0, out_dir=str(tmp_path)), [pair_sample()])
        assert rows == []
        state, _, extra = load_checkpoint(tmp_path / "pretrain.ckpt")
        net_state, _ = split_state(state)
        assert extra["step"] == 0
        assert all(torch.equal(net_state[k], v.float()) for k, v in init.items())

    def test_deterministic(self):
        a = pretrain_sceneflow(cfg(steps=3), [pair_sample()])[1]
        b = pretrain_sceneflow(cfg(steps=3), [pair_sample()])[1]
        assert a == b

    def test_resume_exact(self, tmp_path):
        data = [pair_sample()]
        full = pretrain_sceneflow(cfg(steps=4, out_dir=str(tmp_path / "a"), checkpoint_every=2), data)[1]
        resumed = pretrain_sceneflow(cfg(steps=4), data, resume=tmp_path / "a" / "pretrain_step2.ckpt")[1]
        assert resumed == full[2:]

    def test_step0_loss_from_saved_init(self, tmp_path):
        data = [pair_sample()]
        pretrain_sceneflow(cfg(steps=0, out_dir=str(tmp_path)), data)
        first = pretrain_sceneflow(cfg(steps=1), data)[1][0]
        again = pretrain_sceneflow(cfg(steps=1), data, resume=tmp_path / "pretrain.ckpt")
        # the resumed run starts at the saved step (0) and sees the same clip and weights
        assert again[1][0] == first

    def test_loss_csv(self, tmp_path):
        rows = pretrain_sceneflow(cfg(steps=2, out_dir=str(tmp_path)), [pair_sample()])[1]
        with open(tmp_path / "losses_pretrain.csv") as fh:
            read = list(csv.DictReader(fh))
        assert [int(r["step"]) for r in read] == [0, 1]
        assert float(read[1]["total"]) == pytest.approx(rows[1]["total"])

    def test_nan_aborts_with_diagnostics(self, tmp_path):
        bad = pair_sample()
        bad.flows[0][0, 0] = np.nan
        with pytest.raises(TrainingError, match="non-finite"):
            pretrain_sceneflow(cfg(steps=2, out_dir=str(tmp_path)), [bad])
        assert (tmp_path / "nan_diagnostics.json").exists()

    def test_loss_decreases_on_fixed_pair(self):
        rows = pretrain_sceneflow(cfg(steps=40), [pair_sample()])[1]
        assert np.mean([r["total"] for r in rows[-5:]]) < np.mean([r["total"] for r in rows[:5]])


class TestSimulatedPairs:
    def test_clip_is_consistent(self):
        frame = pair_sample().frames[0]
        clip = simulated_clip(frame, np.random.default_rng(0), 0.05, 0.1, 8)
        f0, f1 = clip.frames
        np.testing.assert_array_equal(f0.points + clip.flows[0], f1.points)
        np.testing.assert_allclose(f1.points + clip.flows_backward[0], f0.points, atol=1e-12)
        # queries are frame points and their targets follow the dense flow
        for q in clip.tracks:
            i = np.nonzero(np.all(f0.points == q[0], axis=1))[0]
            assert len(i) == 1
            np.testing.assert_array_equal(q[1], f1.points[i[0]])
        assert clip.visible.all() and len(clip.tracks) == 8

    def test_motion_bounds(self):
        frame = pair_sample().frames[0]
        clip = simulated_clip(frame, np.random.default_rng(1), 0.02, 0.0, 4)
        # no rotation: every point moves by the same translation, each axis within bounds
        flow = clip.flows[0]
        np.testing.assert_allclose(flow, flow[:1].repeat(len(flow), 0), atol=1e-12)
        assert np.all(np.abs(flow) <= 0.02)

    def test_off_by_default_and_deterministic(self):
        data = [pair_sample()]
        plain = pretrain_sceneflow(cfg(steps=2), data)[1]
        assert pretrain_sceneflow(cfg(steps=2, simulated_pairs=0.0), data)[1] == plain
        a = pretrain_sceneflow(cfg(steps=3, simulated_pairs=1.0), data)[1]
        b = pretrain_sceneflow(cfg(steps=3, simulated_pairs=1.0), data)[1]
        assert a == b and a != plain[:1]


class TestTracker:
    def test_frozen_backbone_bit_identical(self, clip):
        net = build_model(seed=0)
        before = {k: v.clone() for k, v in net.state_dict().items()}
        train_tracker(cfg(stage="track", steps=2, lr=1e-2), [clip], net)
        after = net.state_dict()
        frozen = ("backbone.", "patch_cost.", "sf_heads.", "adapters.")
        assert all(torch.equal(before[k], after[k]) for k in before if k.startswith(frozen))
        assert any(not torch.equal(before[k], after[k]) for k in before if k.startswith("fusion."))

    def test_all_frozen_constant_loss(self, clip):
        net = build_model(seed=0)
        before = {k: v.clone() for k, v in net.state_dict().items()}
        _, rows = train_tracker(cfg(stage="track", steps=3, freeze_fusion=True), [clip], net)
        assert len({r["total"] for r in rows}) == 1
        assert states_equal(before, net.state_dict())

    def test_resume_exact(self, clip, tmp_path):
        full = train_tracker(cfg(stage="track", steps=4, out_dir=str(tmp_path), checkpoint_every=2), [clip],
                             build_model(seed=0))[1]
        resumed = train_tracker(cfg(stage="track", steps=4), [clip], build_model(seed=0),
                                resume=tmp_path / "track_step2.ckpt")[1]
        assert resumed == full[2:]

    def test_deterministic(self, clip):
        a = train_tracker(cfg(stage="track", steps=2), [clip], build_model(seed=0))[1]
        b = train_tracker(cfg(stage="track", steps=2), [clip], build_model(seed=0))[1]
        assert a == b
