"""Synthetic rigid-body scenes with ground-truth tracks, visibility and scene flow.

Objects are sampled once in their local frame ("material points") and moved
by per-frame rigid transforms, so every observed point has an exact
correspondence in every other frame. A frame's point cloud holds only the
material points visible to the camera, as a depth sensor would see them.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.ndimage import minimum_filter
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from ..geometry import CameraModel, DepthMap, PointCloudFrame

log = logging.getLogger(__name__)

OCCLUSION_DEPTH_TOL = 0.02  # meters nearer than the point to count as an occluder
OCCLUSION_PIXEL_RADIUS = 1.0


@dataclass
class ObjectSpec:
    """A rigid primitive and its motion.

    kind is "box" (size = full extents), "sphere" (size[0] = radius) or
    "plane" (size = width, height; spans local x/z, faces local -y).
    Motion: position(t) = position + velocity*t + 0.5*acceleration*t^2 and
    orientation(t) = exp(angular_velocity*t) * exp(rotation).
    """

    kind: str
    size: tuple
    position: tuple = (0.0, 0.0, 0.0)
    rotation: tuple = (0.0, 0.0, 0.0)
    velocity: tuple = (0.0, 0.0, 0.0)
    angular_velocity: tuple = (0.0, 0.0, 0.0)
    acceleration: tuple = (0.0, 0.0, 0.0)
    color: tuple = (0.8, 0.3, 0.2)
    pattern_color: tuple = (0.2, 0.3, 0.8)
    cell: float = 0.05
    spacing: float = 0.01

    def pose(self, t: float):
        """(R [3,3], p [3]) local-to-world transform at frame t."""
        r = Rotation.from_rotvec(np.asarray(self.angular_velocity, dtype=np.float64) * t) * Rotation.from_rotvec(
            np.asarray(self.rotation, dtype=np.float64)
        )
        p = (
            np.asarray(self.position, dtype=np.float64)
            + np.asarray(self.velocity, dtype=np.float64) * t
            + 0.5 * np.asarray(self.acceleration, dtype=np.float64) * t * t
        )
        return r.as_matrix(), p


@dataclass
class SceneScript:
    objects: list
    num_frames: int
    cameras: list  # one CameraModel per frame, or a single one reused
    points_per_frame: int = 8192
    num_queries: int = 32
    query_start: str = "random"  # "random" or "first"
    query_objects: Optional[tuple] = None  # object indices queries are drawn from; None means any

    def camera(self, t: int) -> CameraModel:
        return self.cameras[t] if len(self.cameras) > 1 else self.cameras[0]


@dataclass
class SequenceRecord:
    """A generated (or loaded) sequence.

    tracks / visible are [Q, F, 3] / [Q, F] over all F frames; flows[t] is the
    motion of frame t's points to frame t+1 and flows_backward[t] the motion of
    frame t+1's points back to frame t.
    """

    frames: list
    depth_maps: list
    query_ids: np.ndarray
    query_frames: np.ndarray
    tracks: np.ndarray
    visible: np.ndarray
    flows: list
    flows_backward: Optional[list] = None
    object_poses: Optional[np.ndarray] = None  # [F, n_obj, 4, 4]
    meta: dict = field(default_factory=dict)

    @property
    def num_frames(self) -> int:
        return len(self.frames)

    @property
    def cameras(self) -> list:
        return [d.camera for d in self.depth_maps]

    @property
    def query_points(self) -> np.ndarray:
        return self.tracks[np.arange(len(self.query_ids)), self.query_frames]


# ---------------------------------------------------------------------------
# surface sampling


def _jittered_grid(width, height, spacing, rng):
    """Stratified blue-noise samples on a rectangle centred at the origin."""
    nx = max(1, int(round(width / spacing)))
    nz = max(1, int(round(height / spacing)))
    gx, gz = np.meshgrid((np.arange(nx) + 0.5) / nx, (np.arange(nz) + 0.5) / nz, indexing="ij")
    jitter = rng.uniform(-0.3, 0.3, size=(2,) + gx.shape)
    x = (gx + jitter[0] / nx - 0.5) * width
    z = (gz + jitter[1] / nz - 0.5) * height
    return np.stack([x.ravel(), z.ravel()], axis=-1)


def sample_surface(obj: ObjectSpec, rng) -> np.ndarray:
    """Local-frame surface samples with roughly `obj.spacing` separation."""
    s = obj.spacing
    if obj.kind == "plane":
        w, h = obj.size[:2]
        xz = _jittered_grid(w, h, s, rng)
        return np.column_stack([xz[:, 0], np.zeros(len(xz)), xz[:, 1]])
    if obj.kind == "sphere":
        r = float(obj.size[0])
        n = max(8, int(round(4 * np.pi * r * r / (s * s))))
        i = np.arange(n) + 0.5
        z = 1.0 - 2.0 * i / n
        phi = np.pi * (1 + 5 ** 0.5) * i + rng.uniform(0, 2 * np.pi)
        rho = np.sqrt(1 - z * z)
        return r * np.column_stack([rho * np.cos(phi), rho * np.sin(phi), z])
    if obj.kind == "box":
        ext = np.asarray(obj.size, dtype=np.float64)
        faces = []
        for axis in range(3):
            a, b = [k for k in range(3) if k != axis]
            for sign in (-1.0, 1.0):
                uv = _jittered_grid(ext[a], ext[b], s, rng)
                f = np.zeros((len(uv), 3))
                f[:, a], f[:, b] = uv[:, 0], uv[:, 1]
                f[:, axis] = sign * ext[axis] / 2
                faces.append(f)
        return np.concatenate(faces)
    raise ValueError(f"unknown primitive {obj.kind!r}")


def surface_colors(obj: ObjectSpec, local: np.ndarray, rng) -> np.ndarray:
    """Checkerboard texture in local coordinates plus mild per-point noise."""
    cells = np.floor(local / obj.cell).astype(np.int64).sum(axis=1) % 2
    base = np.where(cells[:, None] == 0, np.asarray(obj.color), np.asarray(obj.pattern_color))
    return np.clip(base + rng.normal(scale=0.02, size=base.shape), 0.0, 1.0)


# ---------------------------------------------------------------------------
# rendering


def render_depth(camera: CameraModel, points: np.ndarray):
    """Point z-buffer render.

    Returns:
        (depth [H, W] with 0 for empty pixels, uv [N, 2], z [N], pixel [N, 2] int
        row/col, or -1 for points outside the image or behind the camera).
    """
    h, w = camera.height, camera.width
    cam = camera.to_camera(points)
    z = cam[:, 2]
    front = z > 1e-6
    uv = np.full((len(points), 2), np.nan)
    uv[front, 0] = camera.fx * cam[front, 0] / z[front] + camera.cx
    uv[front, 1] = camera.fy * cam[front, 1] / z[front] + camera.cy
    with np.errstate(invalid="ignore"):
        col = np.floor(uv[:, 0] + 0.5)
        row = np.floor(uv[:, 1] + 0.5)
        inside = front & (col >= 0) & (col < w) & (row >= 0) & (row < h)
    pix = np.full((len(points), 2), -1, dtype=np.int64)
    pix[inside, 0] = row[inside].astype(np.int64)
    pix[inside, 1] = col[inside].astype(np.int64)
    idx = np.nonzero(inside)[0]
    flat = pix[idx, 0] * w + pix[idx, 1]
    # nearest point per pixel: sort by (pixel, depth) and keep the first of each run
    order = np.lexsort((z[idx], flat))
    flat_sorted = flat[order]
    first = np.ones(len(order), dtype=bool)
    first[1:] = flat_sorted[1:] != flat_sorted[:-1]
    owner = np.full(h * w, -1, dtype=np.int64)
    owner[flat_sorted[first]] = idx[order[first]]
    depth = np.zeros(h * w)
    depth[owner >= 0] = z[owner[owner >= 0]]
    return depth.reshape(h, w), uv, z, pix


def visibility_from_depth(depth: np.ndarray, uv: np.ndarray, z: np.ndarray, pix: np.ndarray,
                          tol=OCCLUSION_DEPTH_TOL, radius=OCCLUSION_PIXEL_RADIUS, max_neighbors=48):
    """Occlusion test against the rendered points.

    A point is occluded when another rendered point projects within `radius`
    pixels of it and is at least `tol` nearer. The z-buffer prunes the search:
    only points that could beat the local minimum depth are examined.
    """
    vis = np.zeros(len(z), dtype=bool)
    idx = np.nonzero(pix[:, 0] >= 0)[0]
    if len(idx) == 0:
        return vis
    filled = np.where(depth > 0, depth, np.inf)
    local_min = minimum_filter(filled, size=3, mode="constant", cval=np.inf)
    # anything not tol behind the nearest surface around it cannot be occluded
    candidate = local_min[pix[idx, 0], pix[idx, 1]] <= z[idx] - tol
    vis[idx[~candidate]] = True
    cand = idx[candidate]
    if len(cand) == 0:
        return vis
    tree = cKDTree(uv[idx])
    k = min(max_neighbors, len(idx))
    dist, nb = tree.query(uv[cand], k=k, distance_upper_bound=radius)
    dist = dist.reshape(len(cand), k)
    nb = nb.reshape(len(cand), k)
    found = np.isfinite(dist)
    nb_z = np.where(found, z[idx[np.minimum(nb, len(idx) - 1)]], np.inf)
    vis[cand] = ~np.any(nb_z <= z[cand, None] - tol, axis=1)
    return vis


# ---------------------------------------------------------------------------
# generation


def material_points(script: SceneScript, seed: int):
    """Local-frame surface samples of every object.

    Returns:
        (local [N, 3], colors [N, 3], labels [N]) with labels indexing script.objects.
    """
    if not script.objects:
        raise ValueError("scene needs at least one object")
    obj_seed = np.random.SeedSequence(seed).spawn(3)[0]
    obj_rngs = [np.random.default_rng(s) for s in obj_seed.spawn(len(script.objects))]
    local, colors, labels = [], [], []
    for k, (obj, rng) in enumerate(zip(script.objects, obj_rngs)):
        pts = sample_surface(obj, rng)
        if len(pts) == 0:
            raise ValueError(f"object {k} has no surface points")
        local.append(pts)
        colors.append(surface_colors(obj, pts, rng))
        labels.append(np.full(len(pts), k, dtype=np.int64))
    return np.concatenate(local), np.concatenate(colors), np.concatenate(labels)


def generate_sequence(script: SceneScript, seed: int) -> SequenceRecord:
    """Render a scripted scene into point clouds, depth maps and ground truth."""
    if not script.objects:
        raise ValueError("scene needs at least one object")
    if script.num_frames < 2:
        raise ValueError("need at least two frames")
    local, colors, labels = material_points(script, seed)

    n_frames = script.num_frames
    n_obj = len(script.objects)
    poses = np.zeros((n_frames, n_obj, 4, 4))
    world = np.zeros((n_frames, len(labels), 3))
    for t in range(n_frames):
        chunks = []
        for k, obj in enumerate(script.objects):
            r, p = obj.pose(t)
            poses[t, k, :3, :3] = r
            poses[t, k, :3, 3] = p
            poses[t, k, 3, 3] = 1.0
            chunks.append(local[labels == k] @ r.T + p)
        world[t] = np.concatenate(chunks)

    depth_maps, material_vis = [], np.zeros((n_frames, len(labels)), dtype=bool)
    for t in range(n_frames):
        cam = script.camera(t)
        depth, uv, z, pix = render_depth(cam, world[t])
        depth_maps.append(DepthMap(depth, cam))
        material_vis[t] = visibility_from_depth(depth, uv, z, pix)

    _, frame_seed, query_seed = np.random.SeedSequence(seed).spawn(3)
    frame_rngs = [np.random.default_rng(s) for s in frame_seed.spawn(n_frames)]
    frames, chosen = [], []
    for t in range(n_frames):
        idx = np.nonzero(material_vis[t])[0]
        if len(idx) == 0:
            raise ValueError(f"frame {t} has no visible points")
        if len(idx) > script.points_per_frame:
            idx = np.sort(frame_rngs[t].choice(idx, size=script.points_per_frame, replace=False))
        chosen.append(idx)
        frames.append(PointCloudFrame(world[t, idx], colors[idx], t, labels[idx]))

    flows = [world[t + 1, chosen[t]] - world[t, chosen[t]] for t in range(n_frames - 1)]
    flows_bwd = [world[t, chosen[t + 1]] - world[t + 1, chosen[t + 1]] for t in range(n_frames - 1)]

    qrng = np.random.default_rng(query_seed)
    q_frames = np.zeros(script.num_queries, dtype=np.int64)
    q_mat = np.zeros(script.num_queries, dtype=np.int64)
    pools = chosen
    if script.query_objects is not None:
        wanted = np.asarray(script.query_objects)
        restricted = [idx[np.isin(labels[idx], wanted)] for idx in chosen]
        # frames where the wanted objects are hidden fall back to every visible point
        pools = [r if len(r) else idx for r, idx in zip(restricted, chosen)]
        starts = [t for t in range(n_frames) if len(restricted[t])] or list(range(n_frames))
    for i in range(script.num_queries):
        if script.query_start == "first":
            s = 0
        elif script.query_objects is None:
            s = int(qrng.integers(n_frames))
        else:
            s = starts[int(qrng.integers(len(starts)))]
        q_frames[i] = s
        q_mat[i] = pools[s][qrng.integers(len(pools[s]))]
    tracks = world[:, q_mat].transpose(1, 0, 2).copy()
    visible = material_vis[:, q_mat].T.copy()
    visible[np.arange(len(q_mat)), q_frames] = True

    return SequenceRecord(
        frames=frames,
        depth_maps=depth_maps,
        query_ids=np.arange(script.num_queries, dtype=np.int64),
        query_frames=q_frames,
        tracks=tracks,
        visible=visible,
        flows=flows,
        flows_backward=flows_bwd,
        object_poses=poses,
        meta={"seed": int(seed), "material_indices": q_mat},
    )


def simulate_sceneflow_pair(frame: PointCloudFrame, max_translation: float, max_rotation: float, seed,
                            *, return_transforms=False):
    """Fake a scene-flow pair by rigidly moving a single frame.

    Each labelled segment (or the whole frame if unlabelled) gets its own
    random rotation about its centroid (angle <= max_rotation) and translation
    (|t| <= max_translation per axis).

    Returns:
        (frame, warped frame, gt_flow [N, 3]); with return_transforms also a dict
        segment -> (R, t, center) such that warped = R (p - center) + center + t.
    """
    if len(frame) == 0:
        raise ValueError("empty point cloud")
    rng = np.random.default_rng(seed)
    labels = frame.labels if frame.labels is not None else np.zeros(len(frame), dtype=np.int64)
    flow = np.zeros_like(frame.points)
    transforms = {}
    for seg in np.unique(labels):
        m = labels == seg
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        rot = Rotation.from_rotvec(axis * rng.uniform(-max_rotation, max_rotation)).as_matrix()
        trans = rng.uniform(-max_translation, max_translation, size=3)
        center = frame.points[m].mean(axis=0)
        rel = frame.points[m] - center
        flow[m] = (rel @ rot.T - rel) + trans
        transforms[int(seg)] = (rot, trans, center)
    second = PointCloudFrame(frame.points + flow, frame.features.copy(), frame.frame_index + 1, frame.labels)
    if return_transforms:
        return frame, second, flow, transforms
    return frame, second, flow


# ---------------------------------------------------------------------------
# oracles and presets


def track_oracle(record: SequenceRecord):
    """Motion oracle reading the ground-truth tracks of the record's queries.

    The returned callable has the tracker's oracle signature
    (t_from, t_to, positions [Q, 3], query_index [Q]) -> motions [Q, 3].
    """

    def oracle(t_from, t_to, positions, query_index):
        return record.tracks[query_index, t_to] - record.tracks[query_index, t_from]

    return oracle


def rigid_motion_oracle(record: SequenceRecord):
    """Motion oracle applying the rigid motion of the object under each position.

    The object is the label of the nearest point of frame t_from.
    """
    if record.object_poses is None:
        raise ValueError("record carries no object poses")
    from ..geometry import knn

    def oracle(t_from, t_to, positions, query_index=None):
        frame = record.frames[t_from]
        lab = frame.labels[knn(positions, frame.points, 1)[:, 0]]
        a = record.object_poses[t_from, lab]
        b = record.object_poses[t_to, lab]
        local = np.einsum("nji,nj->ni", a[:, :3, :3], positions - a[:, :3, 3])
        moved = np.einsum("nij,nj->ni", b[:, :3, :3], local) + b[:, :3, 3]
        return moved - positions

    return oracle


def default_camera_eye():
    return (0.0, -2.2, 0.35)


def default_camera(height=128, width=128, eye=None) -> CameraModel:
    eye = default_camera_eye() if eye is None else eye
    return CameraModel.look_at(eye, (0.0, 0.0, 0.0), fx=110.0 * width / 128, height=height, width=width)


def _random_color(rng):
    c = rng.uniform(0.1, 0.9, size=3)
    return tuple(c), tuple(np.clip(1.0 - c + rng.normal(scale=0.1, size=3), 0, 1))


def random_script(rng, *, kind="default", num_frames=24, points_per_frame=2048, num_queries=32,
                  query_start="random", spacing=0.012, speed=(0.005, 0.025)) -> SceneScript:
    """A random desk-scale scene: a textured back wall plus moving primitives.

    kind="occlusion" adds a target that crosses the view at constant velocity
    and passes fully behind a static plate near the camera for a few frames.
    Queries are drawn from the target only.
    """
    # the occlusion scene samples its background sparsely so the target keeps its share of points
    target_spacing = spacing
    if kind == "occlusion":
        spacing = 2.5 * spacing
    col, pat = _random_color(rng)
    objects = [ObjectSpec("plane", (1.8, 1.4), position=(0.0, 0.5, 0.0), color=col, pattern_color=pat,
                          cell=0.08, spacing=spacing)]

    def moving(position, span):
        direction = rng.normal(size=3)
        direction[1] *= 0.3
        direction /= np.linalg.norm(direction)
        v = direction * rng.uniform(*speed)
        # keep the object roughly inside its region over the clip
        v = np.clip(v, -span / max(num_frames, 1), span / max(num_frames, 1))
        return tuple(v), tuple(rng.normal(scale=0.02, size=3))

    n_obj = int(rng.integers(2, 4))
    for k in range(n_obj):
        pos = np.array([rng.uniform(-0.5, 0.5), rng.uniform(-0.25, 0.2), rng.uniform(-0.35, 0.35)])
        if kind == "occlusion":
            # distractors stay behind the target path
            pos[1] = rng.uniform(0.3, 0.4)
        v, w = moving(pos, 0.6)
        col, pat = _random_color(rng)
        if rng.uniform() < 0.5:
            size = tuple(rng.uniform(0.12, 0.3, size=3))
            obj = ObjectSpec("box", size, tuple(pos), tuple(rng.normal(scale=0.4, size=3)), v, w,
                             color=col, pattern_color=pat, cell=rng.uniform(0.03, 0.06), spacing=spacing)
        else:
            obj = ObjectSpec("sphere", (rng.uniform(0.08, 0.16),), tuple(pos), (0, 0, 0), v, w,
                             color=col, pattern_color=pat, cell=rng.uniform(0.03, 0.06), spacing=spacing)
        objects.append(obj)

    query_objects = None
    if kind == "occlusion":
        # a target crosses the view at constant velocity and passes fully behind
        # a static plate close to the camera; queries sit on the target
        side = rng.choice([-1.0, 1.0])
        step = rng.uniform(0.03, 0.045)
        depth = rng.uniform(-0.1, 0.1)
        z = rng.uniform(-0.05, 0.1)
        half_path = 0.5 * step * (num_frames - 1)
        col, pat = _random_color(rng)
        radius = rng.uniform(0.07, 0.1)
        if rng.uniform() < 0.5:
            target = ObjectSpec("sphere", (radius,), (side * half_path, depth, z), (0, 0, 0),
                                (-side * step, 0.0, 0.0), tuple(rng.normal(scale=0.02, size=3)),
                                color=col, pattern_color=pat, cell=rng.uniform(0.03, 0.05), spacing=target_spacing)
        else:
            target = ObjectSpec("box", (2 * radius,) * 3, (side * half_path, depth, z),
                                tuple(rng.normal(scale=0.4, size=3)), (-side * step, 0.0, 0.0),
                                tuple(rng.normal(scale=0.02, size=3)), color=col, pattern_color=pat,
                                cell=rng.uniform(0.03, 0.05), spacing=target_spacing)
        objects.append(target)
        # plate shadow on the target plane spans the target plus about 2.5 steps
        eye = default_camera_eye()
        plate_y = -0.9
        scale = (plate_y - eye[1]) / (depth - eye[1])
        width = (2.2 * radius + 2.5 * step) * scale
        col, pat = _random_color(rng)
        objects.append(ObjectSpec("box", (width, 0.04, 0.5), (0.0, plate_y, z * scale + eye[2] * (1 - scale)),
                                  (0, 0, 0), color=col, pattern_color=pat, cell=0.05, spacing=target_spacing))
        query_objects = (len(objects) - 2,)
    elif kind != "default":
        raise ValueError(f"unknown scene kind {kind!r}")

    return SceneScript(objects, num_frames, [default_camera()], points_per_frame, num_queries, query_start,
                       query_objects)
