"""Point-cloud containers, grid subsampling, neighbour search and pinhole camera helpers.

Everything here is plain numpy (float64) and side-effect free. Learned modules
consume the index structures produced here and do their own tensor math.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

# above this many query/reference pairs knn switches from brute force to a kd-tree
_BRUTE_FORCE_PAIRS = 65_536


@dataclass
class PointCloudFrame:
    """One frame of a dynamic scene.

    Args:
        points: [N, 3] coordinates in meters.
        features: [N, C] per-point features (RGB in [0, 1] for raw frames).
        frame_index: time step of the frame.
        labels: optional [N] object id of each point (synthetic data only).
    """

    points: np.ndarray
    features: np.ndarray
    frame_index: int = 0
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim == 1:
            self.features = self.features.reshape(len(self.points), -1)
        if len(self.features) != len(self.points):
            raise ValueError(
                f"points and features differ in count ({len(self.points)} vs {len(self.features)})"
            )
        if not np.all(np.isfinite(self.points)):
            raise ValueError("non-finite point coordinates")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if len(self.labels) != len(self.points):
                raise ValueError("labels and points differ in count")

    def __len__(self):
        return len(self.points)


@dataclass
class CameraModel:
    """Pinhole camera with a rigid world-to-camera transform.

    Camera frame convention: x right, y down, z forward.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    height: int = 128
    width: int = 128

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        r = self.rotation
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6) or abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise ValueError("camera rotation must be orthonormal with determinant +1")

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def extrinsics(self) -> np.ndarray:
        """[3, 4] world-to-camera matrix [R | t]."""
        return np.concatenate([self.rotation, self.translation[:, None]], axis=1)

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    @classmethod
    def from_matrices(cls, intrinsics, extrinsics, height, width) -> "CameraModel":
        k = np.asarray(intrinsics, dtype=np.float64).reshape(3, 3)
        e = np.asarray(extrinsics, dtype=np.float64).reshape(3, 4)
        return cls(k[0, 0], k[1, 1], k[0, 2], k[1, 2], e[:, :3], e[:, 3], int(height), int(width))

    @classmethod
    def look_at(cls, eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0), *, fx=110.0, fy=None,
                cx=None, cy=None, height=128, width=128) -> "CameraModel":
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            raise ValueError("up vector parallel to viewing direction")
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        fy = fx if fy is None else fy
        cx = (width - 1) / 2.0 if cx is None else cx
        cy = (height - 1) / 2.0 if cy is None else cy
        return cls(fx, fy, cx, cy, rot, -rot @ eye, height, width)

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def to_world(self, points_cam: np.ndarray) -> np.ndarray:
        return (np.asarray(points_cam, dtype=np.float64) - self.translation) @ self.rotation


@dataclass
class DepthMap:
    """[H, W] depth image in meters; values <= 0 mark missing depth."""

    depths: np.ndarray
    camera: CameraModel

    def __post_init__(self):
        self.depths = np.asarray(self.depths, dtype=np.float64)
        if self.depths.ndim != 2:
            raise ValueError("depth map must be 2D")

    @property
    def valid(self) -> np.ndarray:
        return self.depths > 0


# ---------------------------------------------------------------------------
# subsampling and neighbourhoods


def grid_subsample(points, features, voxel):
    """Voxel-grid subsampling with centroid representatives.

    Args:
        points: [N, 3] coordinates.
        features: [N, C] features (averaged per voxel) or None.
        voxel: voxel edge length in meters.

    Returns:
        (sub_points [M, 3], sub_features [M, C] or None, parent_indices [N]) where
        parent_indices[i] is the output row that input point i collapsed into.
        Output rows are ordered by voxel key, so the result does not depend on
        the input ordering.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise ValueError("empty point cloud")
    if not voxel > 0:
        raise ValueError("voxel size must be positive")
    keys = np.floor(points / voxel).astype(np.int64)
    _, parent, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    parent = parent.reshape(-1)
    m = len(counts)
    sub_points = np.zeros((m, 3))
    np.add.at(sub_points, parent, points)
    sub_points /= counts[:, None]
    sub_features = None
    if features is not None:
        features = np.asarray(features, dtype=np.float64).reshape(len(points), -1)
        sub_features = np.zeros((m, features.shape[1]))
        np.add.at(sub_features, parent, features)
        sub_features /= counts[:, None]
    return sub_points, sub_features, parent


def _sorted_rows(query, reference, cand):
    """Sort candidate index rows by (exact squared distance, index)."""
    d = ((reference[cand] - query[:, None, :]) ** 2).sum(-1)
    order = np.lexsort((cand, d), axis=-1)
    return np.take_along_axis(cand, order, axis=1), np.take_along_axis(d, order, axis=1)


def knn(query, reference, k):
    """k nearest reference indices for every query point.

    Ties are broken by the lower reference index. When the reference holds fewer
    than k points every index is returned.

    Args:
        query: [Q, 3] points.
        reference: [M, 3] points, M >= 1.
        k: neighbour count >= 1.

    Returns:
        [Q, min(k, M)] int64 indices, nearest first.
    """
    query = np.asarray(query, dtype=np.float64).reshape(-1, 3)
    reference = np.asarray(reference, dtype=np.float64).reshape(-1, 3)
    if len(reference) == 0:
        raise ValueError("empty reference set")
    if k < 1:
        raise ValueError("k must be >= 1")
    m = len(reference)
    k = min(int(k), m)
    if len(query) == 0:
        return np.zeros((0, k), dtype=np.int64)

    if len(query) * m <= _BRUTE_FORCE_PAIRS:
        return _knn_brute(query, reference, k)

    extra = min(8, m - k)
    tree = cKDTree(reference)
    _, cand = tree.query(query, k=k + extra)
    cand = np.asarray(cand, dtype=np.int64).reshape(len(query), k + extra)
    idx, d = _sorted_rows(query, reference, cand)
    out = idx[:, :k].copy()
    if extra < m - k:
        # candidate lists that end in a tie may have dropped a lower-index equal
        ambiguous = np.nonzero(d[:, -1] <= d[:, k - 1])[0]
        if len(ambiguous):
            out[ambiguous] = _knn_brute(query[ambiguous], reference, k)
    return out


def _knn_brute(query, reference, k):
    out = np.empty((len(query), k), dtype=np.int64)
    m = len(reference)
    chunk = max(1, _BRUTE_FORCE_PAIRS // m)
    for s in range(0, len(query), chunk):
        q = query[s:s + chunk]
        d = ((q[:, None, :] - reference[None, :, :]) ** 2).sum(-1)
        if k >= m:
            out[s:s + chunk] = np.argsort(d, axis=1, kind="stable")[:, :k]
            continue
        part = np.argpartition(d, k - 1, axis=1)[:, :k]
        pd = np.take_along_axis(d, part, axis=1)
        order = np.lexsort((part, pd), axis=-1)
        res = np.take_along_axis(part, order, axis=1)
        # rows whose k-th distance is tied with an excluded point need the full stable sort
        tied = np.nonzero((d <= pd.max(axis=1, keepdims=True)).sum(axis=1) > k)[0]
        if len(tied):
            res[tied] = np.argsort(d[tied], axis=1, kind="stable")[:, :k]
        out[s:s + chunk] = res
    return out


def radius_mask(points, centers, radius) -> np.ndarray:
    """Boolean mask of points lying within `radius` of any center."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    mask = np.zeros(len(points), dtype=bool)
    if len(centers) == 0 or len(points) == 0:
        return mask
    tree = cKDTree(points)
    for hits in tree.query_ball_point(centers, r=radius):
        mask[hits] = True
    return mask


def three_nn_weights(query, reference, eps=1e-10):
    """Inverse-distance weights over the 3 nearest reference points.

    Returns:
        (indices [Q, k], weights [Q, k]) with k = min(3, M); rows sum to one.
    """
    idx = knn(query, reference, 3)
    d = np.linalg.norm(reference[idx] - np.asarray(query, dtype=np.float64)[:, None, :], axis=-1)
    w = 1.0 / np.maximum(d, eps)
    w /= w.sum(axis=1, keepdims=True)
    return idx, w


def interpolate_3nn(query, reference, values):
    """Inverse-distance 3-NN interpolation of per-reference values at query points."""
    idx, w = three_nn_weights(query, reference)
    return (np.asarray(values)[idx] * w[..., None]).sum(axis=1)


# ---------------------------------------------------------------------------
# camera


def project(points, camera: CameraModel, *, check=True):
    """Pinhole projection of world points.

    Args:
        points: [N, 3] or [3] world coordinates.
        camera: the camera.
        check: raise if any point is not strictly in front of the camera.

    Returns:
        (uv [N, 2], depth [N]) matching the input's leading shape.
    """
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    cam = camera.to_camera(pts.reshape(-1, 3))
    z = cam[:, 2]
    if check and np.any(z <= 0):
        raise ValueError("behind camera")
    with np.errstate(divide="ignore", invalid="ignore"):
        u = camera.fx * cam[:, 0] / z + camera.cx
        v = camera.fy * cam[:, 1] / z + camera.cy
    uv = np.stack([u, v], axis=-1)
    if single:
        return uv[0], z[0]
    return uv, z


def backproject(uv, depth, camera: CameraModel):
    """Inverse of `project`: pixels plus camera-frame depth to world points."""
    uv = np.asarray(uv, dtype=np.float64)
    single = uv.ndim == 1
    uv = uv.reshape(-1, 2)
    depth = np.asarray(depth, dtype=np.float64).reshape(-1)
    if np.any(~(depth > 0)):
        raise ValueError("invalid depth")
    x = (uv[:, 0] - camera.cx) / camera.fx * depth
    y = (uv[:, 1] - camera.cy) / camera.fy * depth
    world = camera.to_world(np.stack([x, y, depth], axis=-1))
    return world[0] if single else world


def sample_depth(depth_map: DepthMap, uv, mode="bilinear", *, strict=True):
    """Sample a depth map at sub-pixel locations.

    Pixel (r, c) has its center at uv = (c, r). Bilinear sampling drops invalid
    (<= 0) corners and renormalizes the remaining weights.

    Args:
        depth_map: the depth image.
        uv: [N, 2] or [2] pixel coordinates inside the image.
        mode: "bilinear" or "nearest".
        strict: raise on samples without valid depth; otherwise return NaN there.

    Returns:
        depths in meters, shaped like the input's leading dimension.
    """
    if mode not in ("bilinear", "nearest"):
        raise ValueError(f"unknown interpolation mode {mode!r}")
    d = depth_map.depths
    h, w = d.shape
    uv = np.asarray(uv, dtype=np.float64)
    single = uv.ndim == 1
    uv = uv.reshape(-1, 2)
    u, v = uv[:, 0], uv[:, 1]
    if np.any((u < 0) | (u > w - 1) | (v < 0) | (v > h - 1)) or np.any(~np.isfinite(uv)):
        raise ValueError("uv outside image bounds")

    if mode == "nearest":
        c = np.floor(u + 0.5).astype(np.int64).clip(0, w - 1)
        r = np.floor(v + 0.5).astype(np.int64).clip(0, h - 1)
        out = d[r, c].copy()
        out[out <= 0] = np.nan
    else:
        c0 = np.floor(u).astype(np.int64).clip(0, max(w - 2, 0))
        r0 = np.floor(v).astype(np.int64).clip(0, max(h - 2, 0))
        c1 = np.minimum(c0 + 1, w - 1)
        r1 = np.minimum(r0 + 1, h - 1)
        fu = u - c0
        fv = v - r0
        corners = np.stack([d[r0, c0], d[r0, c1], d[r1, c0], d[r1, c1]], axis=1)
        weights = np.stack([(1 - fu) * (1 - fv), fu * (1 - fv), (1 - fu) * fv, fu * fv], axis=1)
        valid = corners > 0
        weights = np.where(valid, weights, 0.0)
        total = weights.sum(axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            out = (weights * np.where(valid, corners, 0.0)).sum(axis=1) / total
        # exactly on a hole whose valid neighbours all carry zero weight: nearest valid corner
        stuck = ~(total > 0) & valid.any(axis=1)
        if np.any(stuck):
            cu = np.stack([c0, c1, c0, c1], axis=1)[stuck]
            cv = np.stack([r0, r0, r1, r1], axis=1)[stuck]
            dist = (cu - u[stuck, None]) ** 2 + (cv - v[stuck, None]) ** 2
            dist = np.where(valid[stuck], dist, np.inf)
            pick = np.argmin(dist, axis=1)
            out[stuck] = corners[stuck][np.arange(len(pick)), pick]
        out[~valid.any(axis=1)] = np.nan

    if strict and np.any(np.isnan(out)):
        raise ValueError("no valid depth")
    return out[0] if single else out
