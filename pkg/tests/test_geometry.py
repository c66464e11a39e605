import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.spatial.transform import Rotation

from pointtrack3d.geometry import (
    CameraModel,
    DepthMap,
    PointCloudFrame,
    backproject,
    grid_subsample,
    interpolate_3nn,
    knn,
    project,
    radius_mask,
    sample_depth,
)


def random_camera(rng):
    rot = Rotation.random(random_state=int(rng.integers(1 << 31))).as_matrix()
    return CameraModel(
        fx=rng.uniform(50, 300), fy=rng.uniform(50, 300), cx=rng.uniform(0, 100), cy=rng.uniform(0, 100),
        rotation=rot, translation=rng.normal(size=3), height=100, width=100,
    )


class TestFrame:
    def test_count_mismatch(self):
        with pytest.raises(ValueError):
            PointCloudFrame(np.zeros((3, 3)), np.zeros((2, 3)))

    def test_non_finite(self):
        pts = np.zeros((2, 3))
        pts[0, 0] = np.nan
        with pytest.raises(ValueError):
            PointCloudFrame(pts, np.zeros((2, 3)))

    def test_camera_rotation_checked(self):
        with pytest.raises(ValueError):
            CameraModel(1, 1, 0, 0, rotation=np.diag([1.0, 1.0, -1.0]))


class TestGridSubsample:
    def test_co_voxel_pair(self):
        pts = np.array([[0, 0, 0], [0.01, 0, 0], [1, 0, 0]], dtype=float)
        sub, _, parent = grid_subsample(pts, None, 0.1)
        assert len(sub) == 2
        np.testing.assert_allclose(sub[0], [0.005, 0, 0])
        np.testing.assert_allclose(sub[1], [1, 0, 0])
        assert parent.tolist() == [0, 0, 1]

    def test_single_point(self):
        sub, feats, parent = grid_subsample(np.array([[0.3, -2.0, 5.0]]), np.array([[0.2, 0.4, 0.6]]), 0.7)
        np.testing.assert_array_equal(sub, [[0.3, -2.0, 5.0]])
        np.testing.assert_array_equal(feats, [[0.2, 0.4, 0.6]])
        assert parent.tolist() == [0]

    def test_empty(self):
        with pytest.raises(ValueError, match="empty point cloud"):
            grid_subsample(np.zeros((0, 3)), None, 0.1)

    def test_count_matches_hash_oracle(self):
        rng = np.random.default_rng(0)
        pts = rng.uniform(0, 1, size=(1000, 3))
        sub, _, _ = grid_subsample(pts, None, 0.25)
        occupied = {tuple(int(c) for c in np.floor(p / 0.25)) for p in pts}
        assert len(sub) == len(occupied)

    def test_features_averaged_and_parents(self):
        rng = np.random.default_rng(1)
        pts = rng.uniform(0, 1, size=(300, 3))
        feats = rng.uniform(size=(300, 4))
        sub, sub_f, parent = grid_subsample(pts, feats, 0.3)
        for j in range(len(sub)):
            members = parent == j
            np.testing.assert_allclose(sub[j], pts[members].mean(0), atol=1e-12)
            np.testing.assert_allclose(sub_f[j], feats[members].mean(0), atol=1e-12)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000))
    def test_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        pts = rng.normal(size=(200, 3))
        perm = rng.permutation(200)
        a, _, pa = grid_subsample(pts, None, 0.4)
        b, _, pb = grid_subsample(pts[perm], None, 0.4)
        np.testing.assert_allclose(a, b, atol=1e-9)
        np.testing.assert_array_equal(pa[perm], pb)


class TestKnn:
    def test_ordered(self):
        ref = np.array([[1, 0, 0], [0, 2, 0], [0, 0, 3]], dtype=float)
        assert knn(np.zeros((1, 3)), ref, 2).tolist() == [[0, 1]]

    def test_self(self):
        ref = np.random.default_rng(0).normal(size=(10, 3))
        assert knn(ref[4:5], ref, 1).tolist() == [[4]]

    def test_short_reference(self):
        ref = np.random.default_rng(0).normal(size=(3, 3))
        assert knn(np.zeros((2, 3)), ref, 8).shape == (2, 3)

    def test_ties_lower_index(self):
        ref = np.array([[1, 0, 0], [-1, 0, 0], [0, 1, 0], [0, -1, 0]], dtype=float)
        assert knn(np.zeros((1, 3)), ref, 2).tolist() == [[0, 1]]

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(2)
        pts = rng.uniform(size=(200, 3))
        got = knn(pts, pts, 16)
        for i, p in enumerate(pts):
            d = [float(np.sum((p - q) ** 2)) for q in pts]
            expected = sorted(range(len(pts)), key=lambda j: (d[j], j))[:16]
            assert set(got[i]) == set(expected)

    def test_tree_path_matches_brute_force(self, monkeypatch):
        import pointtrack3d.geometry as g

        rng = np.random.default_rng(3)
        ref = rng.uniform(size=(500, 3))
        query = rng.uniform(size=(50, 3))
        expected = g._knn_brute(query, ref, 12)
        monkeypatch.setattr(g, "_BRUTE_FORCE_PAIRS", 10)
        np.testing.assert_array_equal(g.knn(query, ref, 12), expected)

    def test_tree_path_lattice_ties(self, monkeypatch):
        import pointtrack3d.geometry as g

        xs = np.arange(12, dtype=float)
        lattice = np.stack(np.meshgrid(xs, xs, [0.0], indexing="ij"), -1).reshape(-1, 3)
        expected = g._knn_brute(lattice, lattice, 16)
        monkeypatch.setattr(g, "_BRUTE_FORCE_PAIRS", 10)
        np.testing.assert_array_equal(g.knn(lattice, lattice, 16), expected)


def test_radius_mask_brute_force():
    rng = np.random.default_rng(4)
    pts = rng.uniform(size=(400, 3))
    centers = rng.uniform(size=(3, 3))
    expected = np.array([any(np.linalg.norm(p - c) <= 0.2 for c in centers) for p in pts])
    np.testing.assert_array_equal(radius_mask(pts, centers, 0.2), expected)
    assert not radius_mask(pts, np.zeros((0, 3)), 0.2).any()


def test_interpolate_3nn_exact_on_reference():
    rng = np.random.default_rng(5)
    ref = rng.uniform(size=(30, 3))
    vals = rng.normal(size=(30, 2))
    np.testing.assert_allclose(interpolate_3nn(ref, ref, vals), vals, atol=1e-8)


class TestCamera:
    def test_identity_unit(self):
        cam = CameraModel(1, 1, 0, 0)
        uv, z = project(np.array([0.0, 0.0, 1.0]), cam)
        np.testing.assert_allclose(uv, [0, 0])
        assert z == 1.0

    def test_identity_arithmetic(self):
        cam = CameraModel(100, 100, 50, 50)
        uv, z = project(np.array([0.5, 0.0, 1.0]), cam)
        np.testing.assert_allclose(uv, [100, 50])
        assert z == 1.0

    def test_behind(self):
        with pytest.raises(ValueError, match="behind camera"):
            project(np.array([0.0, 0.0, -1.0]), CameraModel(1, 1, 0, 0))

    def test_backproject_identity(self):
        np.testing.assert_allclose(backproject(np.array([0.0, 0.0]), 2.0, CameraModel(1, 1, 0, 0)), [0, 0, 2])

    def test_invalid_depth(self):
        with pytest.raises(ValueError, match="invalid depth"):
            backproject(np.array([0.0, 0.0]), 0.0, CameraModel(1, 1, 0, 0))

    def test_round_trip_random(self):
        rng = np.random.default_rng(6)
        for _ in range(50):
            cam = random_camera(rng)
            pts_cam = np.column_stack([rng.normal(size=(20, 2)), rng.uniform(0.5, 5, 20)])
            world = cam.to_world(pts_cam)
            uv, z = project(world, cam)
            np.testing.assert_allclose(backproject(uv, z, cam), world, atol=1e-9)
            uv2, _ = project(backproject(uv, z, cam), cam)
            assert np.abs(uv2 - uv).max() < 1e-6

    def test_look_at_centers_target(self):
        cam = CameraModel.look_at([0.0, -2.0, 0.5], height=64, width=80)
        uv, z = project(np.zeros(3), cam)
        np.testing.assert_allclose(uv, [39.5, 31.5], atol=1e-9)
        assert z == pytest.approx(np.hypot(2.0, 0.5))

    def test_matrices_round_trip(self):
        cam = random_camera(np.random.default_rng(7))
        again = CameraModel.from_matrices(cam.intrinsics, cam.extrinsics, cam.height, cam.width)
        np.testing.assert_array_equal(again.extrinsics, cam.extrinsics)


class TestSampleDepth:
    def dm(self, depths):
        return DepthMap(np.array(depths, dtype=float), CameraModel(1, 1, 0, 0))

    def test_center(self):
        assert sample_depth(self.dm([[1, 2], [3, 4]]), np.array([0.5, 0.5])) == pytest.approx(2.5)

    @pytest.mark.parametrize("mode", ["bilinear", "nearest"])
    def test_on_pixel(self, mode):
        assert sample_depth(self.dm([[1, 2], [3, 4]]), np.array([0.0, 0.0]), mode) == 1.0

    def test_renormalized(self):
        assert sample_depth(self.dm([[1, 0], [3, 4]]), np.array([0.5, 0.5])) == pytest.approx(8 / 3)

    def test_all_invalid(self):
        with pytest.raises(ValueError, match="no valid depth"):
            sample_depth(self.dm([[0, 0], [0, -1]]), np.array([0.5, 0.5]))

    def test_out_of_bounds(self):
        with pytest.raises(ValueError):
            sample_depth(self.dm([[1, 2], [3, 4]]), np.array([1.5, 0.0]))

    def test_nearest_picks_closest_center(self):
        dm = self.dm([[1, 2], [3, 4]])
        assert sample_depth(dm, np.array([0.7, 0.2]), "nearest") == 2.0

    def test_integer_coords_exact(self):
        rng = np.random.default_rng(8)
        dm = self.dm(rng.uniform(0.5, 3, size=(6, 7)))
        rr, cc = np.meshgrid(np.arange(6), np.arange(7), indexing="ij")
        uv = np.column_stack([cc.ravel(), rr.ravel()]).astype(float)
        np.testing.assert_array_equal(sample_depth(dm, uv), dm.depths[rr.ravel(), cc.ravel()])

    def test_non_strict_nan(self):
        out = sample_depth(self.dm([[0, 0], [0, 0]]), np.array([[0.5, 0.5]]), strict=False)
        assert np.isnan(out[0])
