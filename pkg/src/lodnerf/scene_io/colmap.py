"""COLMAP text-format ingestion and the observation expansion for pruning.

Only the text variants of ``cameras.txt`` / ``images.txt`` / ``points3D.txt``
are supported; they are canonical, diffable, and easy to author as test
fixtures.  World axes and units are taken as-is from the reconstruction
(SfM scale, no metric calibration).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import ParseError, UnsupportedCameraModel
from ..geometry import Aabb, CameraModel, quat_to_rotation, rotation_to_quat
from ..octree import SparseObservation
from ..geometry import sphere_radius


@dataclass(frozen=True)
class SparsePoint:
    point_id: int
    xyz: np.ndarray
    track: tuple  # (camera_index, feature_index) pairs

    @property
    def n_observations(self) -> int:
        return len(self.track)


@dataclass
class SparsePointCloud:
    points: list[SparsePoint]

    def __len__(self) -> int:
        return len(self.points)

    @property
    def total_observations(self) -> int:
        return sum(p.n_observations for p in self.points)

    def xyz_array(self) -> np.ndarray:
        return np.stack([p.xyz for p in self.points]) if self.points else np.zeros((0, 3))


def _data_lines(path: Path):
    with open(path, "r", encoding="utf-8") as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            yield line_no, line


def load_colmap(dir_path) -> tuple[SparsePointCloud, list[CameraModel]]:
    """Parse a COLMAP text model directory.

    Returns the sparse cloud and the cameras ordered by image id; track
    entries are rewritten from image ids to indices into that list, and
    each camera's ``appearance_id`` is its index.

    Raises
    ------
    ParseError
        On malformed lines, with file and line number.
    UnsupportedCameraModel
        For models other than PINHOLE / SIMPLE_PINHOLE (or anisotropic
        focal lengths).
    """
    dir_path = Path(dir_path)
    cam_path = dir_path / "cameras.txt"
    img_path = dir_path / "images.txt"
    pts_path = dir_path / "points3D.txt"
    for p in (cam_path, img_path, pts_path):
        if not p.is_file():
            raise ParseError(p, None, "missing file")

    intrinsics = {}
    for line_no, line in _data_lines(cam_path):
        parts = line.split()
        try:
            cam_id = int(parts[0])
            model = parts[1]
            width, height = int(parts[2]), int(parts[3])
            params = [float(v) for v in parts[4:]]
        except (ValueError, IndexError):
            raise ParseError(cam_path, line_no, f"bad camera line: {line}") from None
        if model == "SIMPLE_PINHOLE":
            if len(params) != 3:
                raise ParseError(cam_path, line_no, "SIMPLE_PINHOLE needs 3 params")
            f, cx, cy = params
        elif model == "PINHOLE":
            if len(params) != 4:
                raise ParseError(cam_path, line_no, "PINHOLE needs 4 params")
            fx, fy, cx, cy = params
            if not math.isclose(fx, fy, rel_tol=1e-6):
                raise UnsupportedCameraModel(
                    f"camera {cam_id}: anisotropic focal ({fx}, {fy}) not supported")
            f = fx
        else:
            raise UnsupportedCameraModel(f"camera {cam_id}: model {model}")
        intrinsics[cam_id] = (f, cx, cy, width, height)

    images = []  # (image_id, qvec, tvec, cam_id)
    lines = list(_data_lines(img_path))
    i = 0
    while i < len(lines):
        line_no, line = lines[i]
        parts = line.split()
        if len(parts) < 10:
            raise ParseError(img_path, line_no, f"bad image line: {line}")
        try:
            image_id = int(parts[0])
            q = [float(v) for v in parts[1:5]]
            t = [float(v) for v in parts[5:8]]
            cam_id = int(parts[8])
        except ValueError:
            raise ParseError(img_path, line_no, f"bad image line: {line}") from None
        if cam_id not in intrinsics:
            raise ParseError(img_path, line_no, f"image {image_id} references unknown camera {cam_id}")
        images.append((image_id, q, t, cam_id))
        i += 2  # second line holds the 2D keypoints; not needed here
    images.sort(key=lambda e: e[0])
    index_of = {image_id: k for k, (image_id, *_rest) in enumerate(images)}

    cameras = []
    for k, (image_id, q, t, cam_id) in enumerate(images):
        f, cx, cy, width, height = intrinsics[cam_id]
        cameras.append(CameraModel(rotation=quat_to_rotation(q), translation=np.asarray(t),
                                   focal_length=f, principal_point=np.array([cx, cy]),
                                   resolution=(width, height), appearance_id=k))

    points = []
    for line_no, line in _data_lines(pts_path):
        parts = line.split()
        if len(parts) < 8 or (len(parts) - 8) % 2 != 0:
            raise ParseError(pts_path, line_no, f"bad point line: {line}")
        try:
            pid = int(parts[0])
            xyz = np.array([float(v) for v in parts[1:4]])
            track_raw = [(int(parts[8 + 2 * j]), int(parts[9 + 2 * j]))
                         for j in range((len(parts) - 8) // 2)]
        except ValueError:
            raise ParseError(pts_path, line_no, f"bad point line: {line}") from None
        track = []
        for image_id, feat in track_raw:
            if image_id not in index_of:
                raise ParseError(pts_path, line_no,
                                 f"point {pid} references unknown image {image_id}")
            track.append((index_of[image_id], feat))
        points.append(SparsePoint(point_id=pid, xyz=xyz, track=tuple(track)))

    return SparsePointCloud(points=points), cameras


def image_names(dir_path) -> list[str]:
    """Image file names from images.txt, in the same order as the cameras."""
    img_path = Path(dir_path) / "images.txt"
    entries = []
    lines = list(_data_lines(img_path))
    for i in range(0, len(lines), 2):
        line_no, line = lines[i]
        parts = line.split()
        if len(parts) < 10:
            raise ParseError(img_path, line_no, f"bad image line: {line}")
        entries.append((int(parts[0]), parts[9]))
    entries.sort()
    return [name for _id, name in entries]


def observations_from_cloud(cloud: SparsePointCloud, cameras: list[CameraModel]
                            ) -> tuple[list[SparseObservation], int]:
    """Expand the cloud into one pruning sphere per (point, observing camera).

    A point seen by M cameras contributes M observations whose radii are
    the pixel footprint at the point's depth in each camera.  Points that
    fall behind a camera are skipped; the skip count is returned so
    callers can report it.
    """
    observations = []
    skipped = 0
    for p in cloud.points:
        for cam_index, _feat in p.track:
            cam = cameras[cam_index]
            depth = float(cam.world_to_camera(p.xyz)[2])
            if depth <= 0:
                skipped += 1
                continue
            observations.append(SparseObservation(
                point=p.xyz, camera_index=cam_index,
                radius=sphere_radius(depth, cam)))
    return observations, skipped


def root_aabb_from_points(points: np.ndarray, expand: float = 0.05) -> Aabb:
    """Tight cube around the sparse points, expanded by ``expand`` per side."""
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    if pts.size == 0:
        raise ValueError("cannot bound an empty point set")
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    center = 0.5 * (lo + hi)
    edge = float(np.max(hi - lo)) * (1.0 + expand)
    if edge <= 0:
        edge = 1.0
    half = edge / 2.0
    return Aabb(center - half, center + half)


# -- self-describing JSON cameras (synthetic scenes, trajectories) ----------

def camera_to_json(camera: CameraModel) -> dict:
    return {
        "qvec": [float(v) for v in rotation_to_quat(camera.rotation)],
        "tvec": [float(v) for v in camera.translation],
        "focal_length": float(camera.focal_length),
        "principal_point": [float(v) for v in camera.principal_point],
        "resolution": [int(v) for v in camera.resolution],
        "pixel_width": float(camera.pixel_width),
        "appearance_id": int(camera.appearance_id),
    }


def camera_from_json(obj: dict) -> CameraModel:
    return CameraModel(
        rotation=quat_to_rotation(obj["qvec"]),
        translation=np.asarray(obj["tvec"], dtype=np.float64),
        focal_length=float(obj["focal_length"]),
        principal_point=np.asarray(obj["principal_point"], dtype=np.float64),
        resolution=tuple(obj["resolution"]),
        pixel_width=float(obj.get("pixel_width", 1.0)),
        appearance_id=int(obj.get("appearance_id", 0)),
    )


def save_cameras_json(path, cameras: list[CameraModel]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump({"cameras": [camera_to_json(c) for c in cameras]}, f, indent=1)


def load_cameras_json(path) -> list[CameraModel]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            obj = json.load(f)
        return [camera_from_json(c) for c in obj["cameras"]]
    except (KeyError, ValueError, TypeError) as e:
        raise ParseError(path, None, f"bad camera json: {e}") from None
