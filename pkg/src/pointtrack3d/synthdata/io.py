"""On-disk sequence format.

    <dir>/manifest.json        frame count, cameras, queries
    <dir>/frames/NNNN.ply      binary little-endian PLY, x y z r g b float32
    <dir>/depth/NNNN.bin       uint32 H, uint32 W, then H*W float32 row-major
    <dir>/tracks.csv           query_id, frame, x, y, z, visible
    <dir>/flow/NNNN.bin        N x 3 float32, motion of frame NNNN's points to NNNN+1
    <dir>/flow_bwd/NNNN.bin    N x 3 float32, motion of frame NNNN+1's points back to NNNN (optional)

All binary payloads are little-endian.
"""

from __future__ import annotations

import csv
import json
import os
import struct
from pathlib import Path

import numpy as np

from ..geometry import CameraModel, DepthMap, PointCloudFrame
from .scene import SequenceRecord

FORMAT_NAME = "pointtrack3d-sequence"
FORMAT_VERSION = 1
_PLY_PROPS = ("x", "y", "z", "r", "g", "b")


class SequenceFormatError(ValueError):
    """Malformed sequence file; `offset` is the byte position of the problem."""

    def __init__(self, path, offset, message):
        super().__init__(f"{path}: byte {offset}: {message}")
        self.path = str(path)
        self.offset = offset


def _write_atomic(path: Path, data: bytes):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def encode_ply(points: np.ndarray, colors: np.ndarray) -> bytes:
    header = "ply\nformat binary_little_endian 1.0\nelement vertex {}\n".format(len(points))
    header += "".join(f"property float {p}\n" for p in _PLY_PROPS) + "end_header\n"
    body = np.concatenate([points, colors], axis=1).astype("<f4").tobytes()
    return header.encode("ascii") + body


def decode_ply(data: bytes, path="<bytes>"):
    end = data.find(b"end_header\n")
    if not data.startswith(b"ply\n") or end < 0:
        raise SequenceFormatError(path, 0, "missing PLY header")
    lines = data[:end].decode("ascii", errors="replace").splitlines()
    offset = 0
    count, props, fmt = None, [], None
    for line in lines:
        parts = line.split()
        if parts[:1] == ["format"]:
            fmt = parts[1] if len(parts) > 1 else None
        elif parts[:2] == ["element", "vertex"]:
            try:
                count = int(parts[2])
            except (IndexError, ValueError):
                raise SequenceFormatError(path, offset, "bad vertex count") from None
        elif parts[:1] == ["property"]:
            if len(parts) != 3 or parts[1] != "float":
                raise SequenceFormatError(path, offset, f"unsupported property {line!r}")
            props.append(parts[2])
        offset += len(line) + 1
    if fmt != "binary_little_endian":
        raise SequenceFormatError(path, 0, f"unsupported PLY format {fmt!r}")
    if count is None or tuple(props) != _PLY_PROPS:
        raise SequenceFormatError(path, 0, "expected vertex element with x y z r g b")
    start = end + len(b"end_header\n")
    need = count * len(_PLY_PROPS) * 4
    if len(data) - start < need:
        raise SequenceFormatError(path, len(data), f"truncated vertex data: need {need} bytes after {start}")
    arr = np.frombuffer(data, dtype="<f4", count=count * 6, offset=start).reshape(count, 6).astype(np.float64)
    return arr[:, :3], arr[:, 3:]


def encode_depth(depth: np.ndarray) -> bytes:
    h, w = depth.shape
    return struct.pack("<II", h, w) + np.asarray(depth).astype("<f4").tobytes()


def decode_depth(data: bytes, path="<bytes>") -> np.ndarray:
    if len(data) < 8:
        raise SequenceFormatError(path, len(data), "truncated depth header")
    h, w = struct.unpack_from("<II", data, 0)
    if len(data) != 8 + h * w * 4:
        raise SequenceFormatError(path, min(len(data), 8 + h * w * 4),
                                  f"depth payload is {len(data) - 8} bytes, expected {h * w * 4}")
    return np.frombuffer(data, dtype="<f4", offset=8).reshape(h, w).astype(np.float64)


def decode_vectors(data: bytes, count: int, path="<bytes>") -> np.ndarray:
    if len(data) != count * 12:
        raise SequenceFormatError(path, min(len(data), count * 12),
                                  f"flow payload is {len(data)} bytes, expected {count * 12}")
    return np.frombuffer(data, dtype="<f4").reshape(count, 3).astype(np.float64)


def write_sequence(record: SequenceRecord, path) -> Path:
    """Write a sequence directory; files are replaced atomically."""
    root = Path(path)
    for sub in ("frames", "depth", "flow", "flow_bwd"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    n = record.num_frames
    manifest = {
        "format": FORMAT_NAME,
        "version": FORMAT_VERSION,
        "num_frames": n,
        "image_size": [int(record.depth_maps[0].depths.shape[0]), int(record.depth_maps[0].depths.shape[1])],
        "cameras": [
            {"intrinsics": d.camera.intrinsics.ravel().tolist(), "extrinsics": d.camera.extrinsics.ravel().tolist()}
            for d in record.depth_maps
        ],
        "queries": [
            {"id": int(qid), "start_frame": int(s), "position": [float(v) for v in record.tracks[i, s]]}
            for i, (qid, s) in enumerate(zip(record.query_ids, record.query_frames))
        ],
        "point_counts": [len(f) for f in record.frames],
        "has_backward_flow": record.flows_backward is not None,
    }
    if record.object_poses is not None:
        manifest["object_poses"] = np.asarray(record.object_poses).tolist()
    if record.meta:
        manifest["meta"] = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in record.meta.items()}
    for t, frame in enumerate(record.frames):
        _write_atomic(root / "frames" / f"{t:04d}.ply", encode_ply(frame.points, frame.features[:, :3]))
        _write_atomic(root / "depth" / f"{t:04d}.bin", encode_depth(record.depth_maps[t].depths))
    for t, flow in enumerate(record.flows):
        _write_atomic(root / "flow" / f"{t:04d}.bin", np.asarray(flow).astype("<f4").tobytes())
    if record.flows_backward is not None:
        for t, flow in enumerate(record.flows_backward):
            _write_atomic(root / "flow_bwd" / f"{t:04d}.bin", np.asarray(flow).astype("<f4").tobytes())

    rows = ["query_id,frame,x,y,z,visible"]
    for i, qid in enumerate(record.query_ids):
        for t in range(n):
            x, y, z = (float(v) for v in record.tracks[i, t])
            rows.append(f"{int(qid)},{t},{x!r},{y!r},{z!r},{int(bool(record.visible[i, t]))}")
    _write_atomic(root / "tracks.csv", ("\n".join(rows) + "\n").encode("ascii"))
    _write_atomic(root / "manifest.json", json.dumps(manifest, indent=1).encode("utf-8"))
    return root


def read_tracks_csv(path, value_columns=("x", "y", "z")):
    """Read a tracks CSV into (query_ids [Q], positions [Q, F, D], visible [Q, F]).

    Frames missing for a query are filled with NaN / not visible.
    """
    path = Path(path)
    data = path.read_bytes()
    text = data.decode("ascii", errors="replace")
    reader = csv.reader(text.splitlines())
    header = next(reader, None)
    expected = ["query_id", "frame", *value_columns, "visible"]
    if header is None or [h.strip() for h in header] != expected:
        raise SequenceFormatError(path, 0, f"expected header {','.join(expected)}")
    entries = {}
    offset = len(text.splitlines(keepends=True)[0])
    lines = text.splitlines(keepends=True)[1:]
    for line, row in zip(lines, reader):
        if not row:
            offset += len(line)
            continue
        try:
            qid, t = int(row[0]), int(row[1])
            vals = [float(v) for v in row[2:2 + len(value_columns)]]
            vis = int(row[2 + len(value_columns)])
            if len(row) != len(expected) or vis not in (0, 1) or t < 0:
                raise ValueError
        except (ValueError, IndexError):
            raise SequenceFormatError(path, offset, f"bad row {line.strip()!r}") from None
        entries[(qid, t)] = (vals, vis)
        offset += len(line)
    qids = sorted({k[0] for k in entries})
    n_frames = 1 + max((k[1] for k in entries), default=-1)
    pos = np.full((len(qids), n_frames, len(value_columns)), np.nan)
    vis = np.zeros((len(qids), n_frames), dtype=bool)
    row_of = {q: i for i, q in enumerate(qids)}
    for (q, t), (vals, v) in entries.items():
        pos[row_of[q], t] = vals
        vis[row_of[q], t] = bool(v)
    return np.asarray(qids, dtype=np.int64), pos, vis


def write_tracks_csv(path, query_ids, positions, visible, value_columns=("x", "y", "z"), frames=None):
    """Write tracks in the query_id,frame,<values>,visible layout; NaN rows are skipped."""
    rows = [",".join(["query_id", "frame", *value_columns, "visible"])]
    for i, qid in enumerate(query_ids):
        for t in range(positions.shape[1]):
            if frames is not None and not frames[i, t]:
                continue
            if np.any(np.isnan(positions[i, t])):
                continue
            vals = ",".join(repr(float(v)) for v in positions[i, t])
            rows.append(f"{int(qid)},{t},{vals},{int(bool(visible[i, t]))}")
    _write_atomic(Path(path), ("\n".join(rows) + "\n").encode("ascii"))


def read_sequence(path) -> SequenceRecord:
    """Load a sequence directory written by `write_sequence` (or converted into its layout)."""
    root = Path(path)
    mpath = root / "manifest.json"
    raw = mpath.read_bytes()
    try:
        manifest = json.loads(raw)
    except json.JSONDecodeError as err:
        raise SequenceFormatError(mpath, err.pos, err.msg) from None
    try:
        n = int(manifest["num_frames"])
        h, w = manifest["image_size"]
        cams = manifest["cameras"]
        queries = manifest["queries"]
    except (KeyError, TypeError, ValueError) as err:
        raise SequenceFormatError(mpath, 0, f"missing manifest field: {err}") from None
    if len(cams) != n:
        raise SequenceFormatError(mpath, 0, f"manifest lists {len(cams)} cameras for {n} frames")
    counts = manifest.get("point_counts")
    if counts is not None and len(counts) != n:
        raise SequenceFormatError(mpath, 0, f"manifest lists {len(counts)} point counts for {n} frames")

    frames, depth_maps = [], []
    for t in range(n):
        cam = CameraModel.from_matrices(cams[t]["intrinsics"], cams[t]["extrinsics"], h, w)
        fpath = root / "frames" / f"{t:04d}.ply"
        if not fpath.exists():
            raise SequenceFormatError(fpath, 0, f"missing frame file for frame {t} of {n}")
        pts, cols = decode_ply(fpath.read_bytes(), fpath)
        if counts is not None and len(pts) != counts[t]:
            raise SequenceFormatError(fpath, 0, f"frame has {len(pts)} points, manifest says {counts[t]}")
        frames.append(PointCloudFrame(pts, cols, t))
        dpath = root / "depth" / f"{t:04d}.bin"
        depth = decode_depth(dpath.read_bytes(), dpath)
        if depth.shape != (h, w):
            raise SequenceFormatError(dpath, 0, f"depth is {depth.shape}, manifest says {(h, w)}")
        depth_maps.append(DepthMap(depth, cam))
    extra = root / "frames" / f"{n:04d}.ply"
    if extra.exists():
        raise SequenceFormatError(extra, 0, f"more frame files than the manifest's {n}")

    flows = []
    for t in range(n - 1):
        p = root / "flow" / f"{t:04d}.bin"
        flows.append(decode_vectors(p.read_bytes(), len(frames[t]), p))
    flows_bwd = None
    if manifest.get("has_backward_flow"):
        flows_bwd = []
        for t in range(n - 1):
            p = root / "flow_bwd" / f"{t:04d}.bin"
            flows_bwd.append(decode_vectors(p.read_bytes(), len(frames[t + 1]), p))

    qids, tracks, visible = read_tracks_csv(root / "tracks.csv")
    if tracks.shape[1] != n:
        raise SequenceFormatError(root / "tracks.csv", 0, f"tracks cover {tracks.shape[1]} frames, manifest says {n}")
    by_id = {int(q["id"]): int(q["start_frame"]) for q in queries}
    if set(by_id) != set(qids.tolist()):
        raise SequenceFormatError(mpath, 0, "manifest queries do not match tracks.csv")
    qframes = np.array([by_id[int(q)] for q in qids], dtype=np.int64)
    if np.isnan(tracks).any():
        raise SequenceFormatError(root / "tracks.csv", 0, "tracks.csv misses (query, frame) rows")
    poses = np.asarray(manifest["object_poses"]) if "object_poses" in manifest else None
    meta = manifest.get("meta", {})
    if "material_indices" in meta:
        meta["material_indices"] = np.asarray(meta["material_indices"], dtype=np.int64)
    return SequenceRecord(frames, depth_maps, qids, qframes, tracks, visible, flows, flows_bwd, poses, meta)
