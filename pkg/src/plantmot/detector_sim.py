"""Detector stand-in: turns ground truth into noisy detections.

Output per object: a 2D box, a class score and a unit-norm re-ID feature, the
same contract a learned detection + re-identification head would produce.

Appearance model for object i seen along unit view direction v (object to camera):

    a_i(v) = latent_i + view_sigma * V_i v + eps,   eps ~ N(0, feature_noise_sigma^2 / D * I)

so the noise norm is about feature_noise_sigma relative to the unit latent, and
the same tomato looks gradually different from far-apart viewpoints. In
``appearance_plus_3d`` mode the last channels are replaced by an embedding of
the object's workspace-normalized position as perceived through the (possibly
noisy) camera pose, scaled by ``fusion_weight``. The default ``fourier``
encoding is a random Fourier feature map whose inner product approximates a
Gaussian kernel with length scale ``position_length_scale`` meters; ``raw``
writes the three normalized coordinates directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidConfigError, MissingLatentError
from .geometry import Pose6DoF
from .preprocess import WorkspaceLimits
from .render import ViewpointFrame
from .scene_synth import PlantScene

FEATURE_MODES = ("appearance_only", "appearance_plus_3d")
TP_SCORE = 0.9
FP_SCORE_RANGE = (0.1, 0.6)
FP_BOX_SIZE_RANGE = (10.0, 60.0)


@dataclass
class Detection:
    bbox: tuple[float, float, float, float]
    class_score: float
    feature: np.ndarray
    centroid3d: np.ndarray | None = None
    gt_id: int | None = None  # simulator bookkeeping only; the tracker never reads it

    def to_dict(self) -> dict:
        out = {"bbox": list(self.bbox), "class_score": self.class_score, "feature": self.feature.tolist()}
        if self.centroid3d is not None:
            out["centroid3d"] = list(map(float, self.centroid3d))
        return out

    @classmethod
    def from_dict(cls, d: dict) -> Detection:
        c = d.get("centroid3d")
        return cls(
            tuple(d["bbox"]),
            float(d["class_score"]),
            np.asarray(d["feature"], dtype=np.float64),
            None if c is None else np.asarray(c, float),
        )


@dataclass(frozen=True)
class DetectorNoiseConfig:
    p_miss_base: float = 0.05
    p_miss_occlusion_gain: float = 0.5
    fp_rate: float = 0.3
    bbox_jitter_sigma: float = 2.0
    feature_noise_sigma: float = 0.25
    feature_mode: str = "appearance_plus_3d"
    feature_dim: int = 64
    view_sigma: float = 1.0
    fusion_weight: float = 1.0
    position_encoding: str = "fourier"
    position_channels: int = 32
    position_length_scale: float = 0.06
    embedding_seed: int = 7
    workspace: WorkspaceLimits = field(default_factory=WorkspaceLimits)

    @classmethod
    def noiseless(cls, **kw) -> DetectorNoiseConfig:
        """Every nuisance source off: no misses, no false positives, exact boxes,
        and features equal to the normalized latent (plus position code)."""
        base = dict(p_miss_base=0.0, p_miss_occlusion_gain=0.0, fp_rate=0.0, bbox_jitter_sigma=0.0, feature_noise_sigma=0.0, view_sigma=0.0)
        return cls(**{**base, **kw})

    def validate(self) -> None:
        for name in ("p_miss_base", "p_miss_occlusion_gain"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise InvalidConfigError(f"{name} must lie in [0, 1]")
        for name in ("fp_rate", "bbox_jitter_sigma", "feature_noise_sigma", "view_sigma", "fusion_weight"):
            if getattr(self, name) < 0:
                raise InvalidConfigError(f"{name} must be >= 0")
        if self.feature_mode not in FEATURE_MODES:
            raise InvalidConfigError(f"feature_mode must be one of {FEATURE_MODES}")
        if self.feature_dim < 8:
            raise InvalidConfigError("feature_dim must be >= 8")
        if self.position_encoding not in ("fourier", "raw"):
            raise InvalidConfigError("position_encoding must be 'fourier' or 'raw'")
        n_pos = 3 if self.position_encoding == "raw" else self.position_channels
        if not 0 < n_pos < self.feature_dim:
            raise InvalidConfigError("position channels must leave room for appearance channels")
        if self.position_length_scale <= 0:
            raise InvalidConfigError("position_length_scale must be positive")


@dataclass
class AppearanceLatent:
    object_id: int
    vector: np.ndarray  # (D,) unit norm
    view_basis: np.ndarray  # (D, 3) how appearance drifts with view direction


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def assign_latents(scene: PlantScene, D: int = 64, seed: int = 0) -> list[AppearanceLatent]:
    """One latent per target tomato, uniform on the unit sphere in R^D."""
    if D < 8:
        raise InvalidConfigError("feature dimension must be >= 8")
    rng = np.random.default_rng(seed)
    out = []
    for t in scene.tomatoes:
        vec = _unit(rng.normal(size=D))
        basis = rng.normal(scale=1.0 / math.sqrt(D), size=(D, 3))
        out.append(AppearanceLatent(t.object_id, vec, basis))
    return out


class PositionEncoder:
    """Fixed map from world positions to the 3D-fused feature channels."""

    def __init__(self, cfg: DetectorNoiseConfig):
        self.cfg = cfg
        self.span = cfg.workspace.span
        rng = np.random.default_rng(cfg.embedding_seed)
        P = cfg.position_channels
        self.freqs = rng.normal(scale=1.0 / cfg.position_length_scale, size=(P, 3))
        self.phases = rng.uniform(0.0, 2 * math.pi, size=P)

    @property
    def n_channels(self) -> int:
        return 3 if self.cfg.position_encoding == "raw" else self.cfg.position_channels

    def __call__(self, world_points) -> np.ndarray:
        normalized = self.cfg.workspace.normalize_points(world_points)
        if self.cfg.position_encoding == "raw":
            return normalized
        meters = normalized * self.span
        P = self.cfg.position_channels
        return math.sqrt(2.0 / P) * np.cos(meters @ self.freqs.T + self.phases)


def compose_feature(appearance: np.ndarray, position_code: np.ndarray | None, fusion_weight: float) -> np.ndarray:
    f = np.array(appearance, dtype=np.float64)
    if position_code is not None:
        f[-len(position_code):] = fusion_weight * position_code
    return _unit(f)


def simulate_detections(
    frame: ViewpointFrame,
    latents,
    cfg: DetectorNoiseConfig = DetectorNoiseConfig(),
    seed: int = 0,
    believed_pose: Pose6DoF | None = None,
    encoder: PositionEncoder | None = None,
) -> list[Detection]:
    """Noisy detections for one frame.

    `believed_pose` is the camera pose the system thinks it had; positions fed
    into 3D-fused features are re-projected through it, which is how camera
    pose noise reaches the features. Defaults to the true pose.
    """
    cfg.validate()
    by_id = {lat.object_id: lat for lat in latents}
    for g in frame.gt:
        if g.object_id not in by_id:
            raise MissingLatentError(g.object_id)
    rng = np.random.default_rng(seed)
    H, W = frame.shape
    D = cfg.feature_dim
    fused = cfg.feature_mode == "appearance_plus_3d"
    if fused and encoder is None:
        encoder = PositionEncoder(cfg)
    true_pose = frame.camera_pose
    believed = true_pose if believed_pose is None else believed_pose
    cam_center = true_pose.translation
    to_believed = believed.compose(true_pose.inverse())

    dets: list[Detection] = []
    for g in frame.gt:
        lat = by_id[g.object_id]
        if lat.vector.shape[0] != D:
            raise InvalidConfigError("latent dimension differs from feature_dim")
        p_miss = min(1.0, cfg.p_miss_base + cfg.p_miss_occlusion_gain * (1.0 - g.visibility))
        if rng.uniform() < p_miss:
            continue
        box = np.asarray(g.bbox, float) + rng.normal(scale=cfg.bbox_jitter_sigma, size=4)
        x0, x1 = sorted(np.clip(box[[0, 2]], 0.0, W))
        y0, y1 = sorted(np.clip(box[[1, 3]], 0.0, H))

        centroid = np.asarray(g.centroid3d, float)
        view = cam_center - centroid
        view /= np.linalg.norm(view)
        appearance = lat.vector + cfg.view_sigma * (lat.view_basis @ view)
        appearance = appearance + rng.normal(scale=cfg.feature_noise_sigma / math.sqrt(D), size=D)
        code = encoder(to_believed.apply(centroid)) if fused else None
        feature = compose_feature(appearance, code, cfg.fusion_weight)
        dets.append(Detection((float(x0), float(y0), float(x1), float(y1)), TP_SCORE * g.visibility, feature, gt_id=g.object_id))

    for _ in range(rng.poisson(cfg.fp_rate)):
        w, h = rng.uniform(*FP_BOX_SIZE_RANGE, size=2)
        x0 = rng.uniform(0.0, max(W - w, 1.0))
        y0 = rng.uniform(0.0, max(H - h, 1.0))
        box = (float(x0), float(y0), float(min(x0 + w, W)), float(min(y0 + h, H)))
        dets.append(Detection(box, float(rng.uniform(*FP_SCORE_RANGE)), _unit(rng.normal(size=D))))

    order = rng.permutation(len(dets))
    return [dets[i] for i in order]
