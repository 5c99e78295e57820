"""Viewpoint sampling and ray-cast rendering of plant scenes.

Each frame holds a flat-shaded color image, a structured point cloud in the
camera frame (one point per pixel, NaN where no surface was hit) and the
ground-truth tomato annotations. Every primitive is intersected only with the
rays inside the screen rectangle of its bounding sphere.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InvalidConfigError
from .geometry import Pose6DoF, look_at
from .scene_synth import OrganPrimitive, PlantScene

NEAR = 0.01
COLORS = {
    "tomato": (200, 30, 30),
    "leaf": (40, 150, 40),
    "stem_segment": (110, 80, 40),
}


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float = 350.0
    fy: float = 350.0
    cx: float = 240.0
    cy: float = 135.0
    width: int = 480
    height: int = 270

    def validate(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidConfigError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise InvalidConfigError("principal point must lie inside the image")

    def project(self, points_cam: np.ndarray) -> np.ndarray:
        """Continuous pixel coordinates (u, v) of camera-frame points."""
        p = np.asarray(points_cam, dtype=np.float64)
        return np.stack([self.fx * p[..., 0] / p[..., 2] + self.cx, self.fy * p[..., 1] / p[..., 2] + self.cy], -1)


@dataclass(frozen=True)
class ViewpointSamplerConfig:
    cylinder_radius_range: tuple[float, float] = (0.4, 0.8)
    cylinder_height_range: tuple[float, float] = (0.1, 1.1)
    aim_jitter_radius: float = 0.1

    def validate(self) -> None:
        r0, r1 = self.cylinder_radius_range
        h0, h1 = self.cylinder_height_range
        if not (0 < r0 <= r1):
            raise InvalidConfigError("cylinder radii must be positive with min <= max")
        if h0 > h1:
            raise InvalidConfigError("cylinder height range is empty")
        if self.aim_jitter_radius < 0:
            raise InvalidConfigError("aim_jitter_radius must be >= 0")


@dataclass
class GroundTruthObject:
    object_id: int
    bbox: tuple[float, float, float, float]
    centroid3d: tuple[float, float, float]
    visibility: float

    def to_dict(self) -> dict:
        return {
            "object_id": self.object_id,
            "bbox": list(self.bbox),
            "centroid3d": list(self.centroid3d),
            "visibility": self.visibility,
        }

    @classmethod
    def from_dict(cls, d: dict) -> GroundTruthObject:
        return cls(int(d["object_id"]), tuple(d["bbox"]), tuple(d["centroid3d"]), float(d["visibility"]))


@dataclass
class ViewpointFrame:
    color: np.ndarray  # (H, W, 3) uint8
    cloud: np.ndarray  # (H, W, 3) float32, camera frame, NaN where invalid
    valid: np.ndarray  # (H, W) bool
    camera_pose: Pose6DoF  # camera-to-world
    gt: list[GroundTruthObject] = field(default_factory=list)
    intrinsics: CameraIntrinsics = field(default_factory=CameraIntrinsics)

    @property
    def shape(self) -> tuple[int, int]:
        return self.color.shape[:2]


# ---------------------------------------------------------------------------
# Viewpoints
# ---------------------------------------------------------------------------


def sample_viewpoint(scene: PlantScene, cfg: ViewpointSamplerConfig = ViewpointSamplerConfig(), seed: int = 0) -> Pose6DoF:
    """Camera uniformly inside the annular cylinder around the stem, aimed near the stem.

    Roll is fixed (image up follows world up), leaving five degrees of freedom:
    three for the position and two absorbed by the jittered aim point.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    point = np.asarray(scene.stem_axis[0], float)
    r0, r1 = cfg.cylinder_radius_range
    radius = math.sqrt(rng.uniform(r0**2, r1**2))
    azimuth = rng.uniform(0.0, 2 * math.pi)
    height = rng.uniform(*cfg.cylinder_height_range)
    position = point + np.array([radius * math.cos(azimuth), radius * math.sin(azimuth), height])

    aim = point + np.array([0.0, 0.0, rng.uniform(0.0, max(scene.plant_height(), 1e-3))])
    offset = rng.normal(size=3)
    offset *= cfg.aim_jitter_radius * rng.uniform() ** (1 / 3) / np.linalg.norm(offset)
    return look_at(position, aim + offset)


def sample_viewpoint_pool(scene: PlantScene, n: int, cfg: ViewpointSamplerConfig = ViewpointSamplerConfig(), seed: int = 0) -> list[Pose6DoF]:
    seeds = np.random.SeedSequence(seed).generate_state(n)
    return [sample_viewpoint(scene, cfg, int(s)) for s in seeds]


# ---------------------------------------------------------------------------
# Ray casting
# ---------------------------------------------------------------------------


def _screen_rect(center, radius, K: CameraIntrinsics):
    """Conservative pixel rectangle covering a camera-frame bounding sphere."""
    x, y, z = center
    if z + radius <= NEAR:
        return None
    if z - radius <= NEAR:
        return 0, K.width, 0, K.height
    us = [K.fx * (x + sx * radius) / (z + sz * radius) + K.cx for sx in (-1, 1) for sz in (-1, 1)]
    vs = [K.fy * (y + sy * radius) / (z + sz * radius) + K.cy for sy in (-1, 1) for sz in (-1, 1)]
    u0 = max(0, int(math.floor(min(us))))
    u1 = min(K.width, int(math.ceil(max(us))) + 1)
    v0 = max(0, int(math.floor(min(vs))))
    v1 = min(K.height, int(math.ceil(max(vs))) + 1)
    if u0 >= u1 or v0 >= v1:
        return None
    return u0, u1, v0, v1


def _pick_root(t_near, t_far, hit):
    t = np.where(t_near > NEAR, t_near, t_far)
    return np.where(hit & (t > NEAR), t, np.inf)


def _hit_sphere(dx, dy, c, r):
    dd = dx * dx + dy * dy + 1.0
    dc = dx * c[0] + dy * c[1] + c[2]
    disc = dc * dc - dd * (c @ c - r * r)
    hit = disc >= 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    return _pick_root((dc - sq) / dd, (dc + sq) / dd, hit)


def _hit_cylinder(dx, dy, base, axis, length, r):
    # ray origin is the camera centre; m = origin - base
    m = -base
    dw = dx * axis[0] + dy * axis[1] + axis[2]
    mw = m @ axis
    m_perp = m - mw * axis
    dpx, dpy, dpz = dx - dw * axis[0], dy - dw * axis[1], 1.0 - dw * axis[2]
    a = dpx * dpx + dpy * dpy + dpz * dpz
    b = 2.0 * (dpx * m_perp[0] + dpy * m_perp[1] + dpz * m_perp[2])
    c = m_perp @ m_perp - r * r
    disc = b * b - 4 * a * c
    ok = (disc >= 0) & (a > 1e-15)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    a_safe = np.where(ok, a, 1.0)
    best = np.full(np.broadcast(dx, dy).shape, np.inf)
    for t in ((-b - sq) / (2 * a_safe), (-b + sq) / (2 * a_safe)):
        s = mw + t * dw
        valid = ok & (t > NEAR) & (s >= 0) & (s <= length)
        best = np.where(valid & (t < best), t, best)
    dw_safe = np.where(np.abs(dw) > 1e-15, dw, 1.0)
    for s0 in (0.0, length):
        t = (s0 - mw) / dw_safe
        px = m_perp[0] + t * dpx
        py = m_perp[1] + t * dpy
        pz = m_perp[2] + t * dpz
        valid = (np.abs(dw) > 1e-15) & (t > NEAR) & (px * px + py * py + pz * pz <= r * r)
        best = np.where(valid & (t < best), t, best)
    return best


def _hit_ellipse(dx, dy, center, e1, e2, normal, a, b):
    dn = dx * normal[0] + dy * normal[1] + normal[2]
    ok = np.abs(dn) > 1e-12
    t = (center @ normal) / np.where(ok, dn, 1.0)
    px, py, pz = t * dx - center[0], t * dy - center[1], t - center[2]
    s1 = (px * e1[0] + py * e1[1] + pz * e1[2]) / a
    s2 = (px * e2[0] + py * e2[1] + pz * e2[2]) / b
    inside = ok & (t > NEAR) & (s1 * s1 + s2 * s2 <= 1.0)
    return np.where(inside, t, np.inf)


def _intersect(prim: OrganPrimitive, world_to_cam: Pose6DoF, dx, dy):
    d = prim.dimensions
    R = world_to_cam.R @ prim.pose.R
    origin = world_to_cam.apply(prim.pose.translation)
    if prim.kind == "tomato":
        return _hit_sphere(dx, dy, origin, d["radius"])
    if prim.kind == "stem_segment":
        return _hit_cylinder(dx, dy, origin, R[:, 2], d["length"], d["radius"])
    return _hit_ellipse(dx, dy, origin, R[:, 0], R[:, 1], R[:, 2], d["length"] / 2, d["width"] / 2)


@dataclass
class RayCastResult:
    depth: np.ndarray  # (H, W) camera z; inf where nothing was hit
    prim_index: np.ndarray  # (H, W) index into scene.all_primitives(); -1 for no hit
    silhouette: dict[int, int]  # primitive index -> unoccluded pixel count (target tomatoes only)


def raycast(scene: PlantScene, pose: Pose6DoF, K: CameraIntrinsics) -> RayCastResult:
    K.validate()
    world_to_cam = pose.inverse()
    xs = (np.arange(K.width) + 0.5 - K.cx) / K.fx
    ys = (np.arange(K.height) + 0.5 - K.cy) / K.fy
    depth = np.full((K.height, K.width), np.inf)
    index = np.full((K.height, K.width), -1, dtype=np.int32)
    silhouette = {}
    for i, prim in enumerate(scene.all_primitives()):
        rect = _screen_rect(world_to_cam.apply(prim.center), prim.bounding_radius(), K)
        if rect is None:
            continue
        u0, u1, v0, v1 = rect
        t = _intersect(prim, world_to_cam, xs[None, u0:u1], ys[v0:v1, None])
        if prim.object_id is not None:
            silhouette[i] = int(np.isfinite(t).sum())
        block = depth[v0:v1, u0:u1]
        nearer = t < block
        block[nearer] = t[nearer]
        index[v0:v1, u0:u1][nearer] = i
    return RayCastResult(depth, index, silhouette)


def _annotations(scene: PlantScene, rc: RayCastResult, min_visibility: float) -> list[GroundTruthObject]:
    if not 0.0 <= min_visibility <= 1.0:
        raise InvalidConfigError("min_visibility must lie in [0, 1]")
    gt = []
    for i, prim in enumerate(scene.target_plant):
        if prim.object_id is None:
            continue
        full = rc.silhouette.get(i, 0)
        if full == 0:
            continue
        vs, us = np.nonzero(rc.prim_index == i)
        if len(us) == 0:
            continue
        visibility = len(us) / full
        if visibility < min_visibility:
            continue
        bbox = (float(us.min()), float(vs.min()), float(us.max() + 1), float(vs.max() + 1))
        gt.append(GroundTruthObject(prim.object_id, bbox, tuple(prim.pose.translation.tolist()), float(visibility)))
    return gt


def annotate_gt(scene: PlantScene, pose: Pose6DoF, K: CameraIntrinsics = CameraIntrinsics(), min_visibility: float = 0.1) -> list[GroundTruthObject]:
    """Target tomatoes with visibility >= min_visibility.

    Visibility is the fraction of a tomato's unoccluded silhouette that
    survives occlusion by nearer geometry.
    """
    return _annotations(scene, raycast(scene, pose, K), min_visibility)


def render_frame(scene: PlantScene, pose: Pose6DoF, K: CameraIntrinsics = CameraIntrinsics(), min_visibility: float = 0.1) -> ViewpointFrame:
    rc = raycast(scene, pose, K)
    prims = scene.all_primitives()
    palette = np.zeros((len(prims) + 1, 3), dtype=np.uint8)  # last row: background
    for i, p in enumerate(prims):
        palette[i] = COLORS[p.kind]
    color = palette[rc.prim_index]  # index -1 picks the background row
    valid = np.isfinite(rc.depth)
    xs = (np.arange(K.width) + 0.5 - K.cx) / K.fx
    ys = (np.arange(K.height) + 0.5 - K.cy) / K.fy
    z = np.where(valid, rc.depth, np.nan)
    cloud = np.stack([z * xs[None, :], z * ys[:, None], z], axis=-1).astype(np.float32)
    return ViewpointFrame(color, cloud, valid, pose, _annotations(scene, rc, min_visibility), K)


# ---------------------------------------------------------------------------
# Storage: <dir>/<i>.png, <i>.cloud (LE float32 HxWx3, NaN = invalid), <i>.json
# ---------------------------------------------------------------------------


def save_frame(directory, index: int, frame: ViewpointFrame) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    Image.fromarray(frame.color, mode="RGB").save(directory / f"{index}.png")
    cloud = np.where(frame.valid[..., None], frame.cloud, np.nan).astype("<f4")
    (directory / f"{index}.cloud").write_bytes(cloud.tobytes(order="C"))
    meta = {
        "camera_pose": frame.camera_pose.to_dict(),
        "intrinsics": asdict(frame.intrinsics),
        "gt": [g.to_dict() for g in frame.gt],
    }
    (directory / f"{index}.json").write_text(json.dumps(meta, indent=1))


def load_frame(directory, index: int) -> ViewpointFrame:
    directory = Path(directory)
    meta = json.loads((directory / f"{index}.json").read_text())
    K = CameraIntrinsics(**meta["intrinsics"])
    color = np.asarray(Image.open(directory / f"{index}.png").convert("RGB"))
    raw = np.frombuffer((directory / f"{index}.cloud").read_bytes(), dtype="<f4")
    cloud = raw.reshape(K.height, K.width, 3).astype(np.float32)
    valid = np.all(np.isfinite(cloud), axis=-1)
    return ViewpointFrame(
        color, cloud, valid, Pose6DoF.from_dict(meta["camera_pose"]), [GroundTruthObject.from_dict(g) for g in meta["gt"]], K
    )
