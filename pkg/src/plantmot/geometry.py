"""Rigid transforms and camera poses.

Quaternions are stored scalar-first (w, x, y, z). Poses are camera-to-world.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import InvalidConfigError

QUAT_TOL = 1e-9


@dataclass(frozen=True)
class Pose6DoF:
    translation: np.ndarray  # (3,) meters
    rotation: np.ndarray  # (4,) unit quaternion, wxyz

    def __post_init__(self):
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        q = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        if abs(np.linalg.norm(q) - 1.0) > QUAT_TOL:
            raise InvalidConfigError(f"rotation quaternion not unit norm: |q|={np.linalg.norm(q)!r}")
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "rotation", q)

    @classmethod
    def identity(cls) -> Pose6DoF:
        return cls(np.zeros(3), np.array([1.0, 0.0, 0.0, 0.0]))

    @classmethod
    def from_matrix(cls, R: np.ndarray, t) -> Pose6DoF:
        q = Rotation.from_matrix(R).as_quat(scalar_first=True)
        if q[0] < 0:
            q = -q
        return cls(np.asarray(t, dtype=np.float64), q / np.linalg.norm(q))

    @property
    def R(self) -> np.ndarray:
        return Rotation.from_quat(self.rotation, scalar_first=True).as_matrix()

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map points (..., 3) from the local frame into the parent frame."""
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.translation

    def inverse(self) -> Pose6DoF:
        R_inv = self.R.T
        return Pose6DoF.from_matrix(R_inv, -R_inv @ self.translation)

    def compose(self, other: Pose6DoF) -> Pose6DoF:
        """self ∘ other: apply `other` first, then `self`."""
        return Pose6DoF.from_matrix(self.R @ other.R, self.R @ other.translation + self.translation)

    def to_dict(self) -> dict:
        return {"translation": self.translation.tolist(), "rotation_wxyz": self.rotation.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> Pose6DoF:
        q = np.asarray(d["rotation_wxyz"], dtype=np.float64)
        # JSON round-trips can shave the last ulp
        return cls(d["translation"], q / np.linalg.norm(q))


def look_at(position, target, up=(0.0, 0.0, 1.0)) -> Pose6DoF:
    """Camera pose at `position` with its +z optical axis through `target`.

    Camera axes follow the OpenCV convention (x right, y down, z forward) and
    roll is fixed so the image up direction stays aligned with `up`.
    """
    position = np.asarray(position, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - position
    z /= np.linalg.norm(z)
    x = np.cross(z, np.asarray(up, dtype=np.float64))
    nx = np.linalg.norm(x)
    if nx < 1e-12:
        raise InvalidConfigError("optical axis parallel to the up vector")
    x /= nx
    y = np.cross(z, x)
    return Pose6DoF.from_matrix(np.column_stack([x, y, z]), position)


def quat_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return Rotation.from_rotvec(axis * angle).as_quat(scalar_first=True)
