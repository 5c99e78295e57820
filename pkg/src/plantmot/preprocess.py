"""Point-cloud preprocessing: camera-to-world transform and workspace normalization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidConfigError
from .geometry import Pose6DoF


@dataclass(frozen=True)
class StructuredCloud:
    points: np.ndarray  # (H, W, 3)
    valid: np.ndarray  # (H, W) bool


@dataclass(frozen=True)
class WorkspaceLimits:
    lower: tuple[float, float, float] = (-0.6, -0.6, 0.0)
    upper: tuple[float, float, float] = (0.6, 0.6, 2.0)

    def __post_init__(self):
        if any(lo >= hi for lo, hi in zip(self.lower, self.upper)):
            raise InvalidConfigError(f"workspace limits need min < max on every axis: {self.lower} vs {self.upper}")

    @property
    def span(self) -> np.ndarray:
        return np.asarray(self.upper, float) - np.asarray(self.lower, float)

    def normalize_points(self, points) -> np.ndarray:
        """Affine map of world points into the unit cube (no clipping)."""
        return (np.asarray(points, float) - np.asarray(self.lower, float)) / self.span


@dataclass(frozen=True)
class NormalizedCloudImage:
    values: np.ndarray  # (H, W, 3) in [0, 1] where valid
    valid: np.ndarray


def cloud_to_world(cloud: StructuredCloud, pose: Pose6DoF) -> StructuredCloud:
    """Apply the camera-to-world pose to every valid point; invalid pixels stay NaN."""
    pts = np.asarray(cloud.points, dtype=np.float64)
    out = np.full(pts.shape, np.nan)
    v = cloud.valid
    out[v] = pose.apply(pts[v])
    return StructuredCloud(out, cloud.valid.copy())


def normalize_to_workspace(cloud: StructuredCloud, limits: WorkspaceLimits = WorkspaceLimits()) -> NormalizedCloudImage:
    """Map in-bounds points to [0, 1]^3; points outside the workspace become invalid."""
    values = limits.normalize_points(cloud.points)
    with np.errstate(invalid="ignore"):
        inside = np.all((values >= 0.0) & (values <= 1.0), axis=-1)
    valid = cloud.valid & inside
    values = np.where(valid[..., None], values, np.nan)
    return NormalizedCloudImage(values, valid)
