"""Experiment orchestration: sequences, pose noise, trials, ablations, significance.

Every random draw is keyed by explicit seeds derived from (study seed,
repetition, viewpoint index), so results never depend on execution order.
Sorted and random sequences of one repetition share the same viewpoint
sample and the same per-viewpoint detector draws, and pose-noise arms share
the same per-viewpoint noise directions, which keeps comparisons paired.
"""

from __future__ import annotations

import logging
import math
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import stats

from .detector_sim import DetectorNoiseConfig, PositionEncoder, assign_latents, simulate_detections
from .errors import DegenerateSampleError, InvalidConfigError
from .geometry import Pose6DoF, quat_from_axis_angle
from .metrics import FrameAnnotations, MetricsReport, evaluate_sequence
from .preprocess import StructuredCloud, cloud_to_world
from .render import CameraIntrinsics, ViewpointFrame, ViewpointSamplerConfig, render_frame, sample_viewpoint_pool
from .scene_synth import PlantScene
from .tracker import AssociationConfig, KalmanConfig, Tracker

log = logging.getLogger(__name__)

ORDERINGS = ("sorted", "random")
METRIC_KEYS = ("HOTA", "DetA", "AssA", "LocA", "MOTA", "IDSW", "mAP")
SIGNIFICANCE = 0.05


def derive_seed(*parts) -> int:
    """Stable 32-bit seed from ints and strings."""
    key = [p if isinstance(p, int) else zlib.crc32(str(p).encode()) for p in parts]
    return int(np.random.SeedSequence(key).generate_state(1)[0])


@dataclass(frozen=True)
class SequenceSpec:
    ordering: str = "random"
    length: int = 100
    seed: int = 0
    viewpoint_pool_size: int = 600

    def validate(self) -> None:
        if self.ordering not in ORDERINGS:
            raise InvalidConfigError(f"ordering must be one of {ORDERINGS}")
        if not 0 < self.length <= self.viewpoint_pool_size:
            raise InvalidConfigError("sequence length must be in [1, viewpoint_pool_size]")


@dataclass(frozen=True)
class PoseNoiseSpec:
    t_noise: float = 0.0  # meters
    r_noise: float | None = None  # radians; None follows t_noise

    @property
    def rotation_sigma(self) -> float:
        return self.t_noise if self.r_noise is None else self.r_noise

    def validate(self) -> None:
        if self.t_noise < 0 or self.rotation_sigma < 0:
            raise InvalidConfigError("pose noise sigmas must be >= 0")


def camera_path_length(viewpoints: list[Pose6DoF], order) -> float:
    pos = np.array([viewpoints[i].translation for i in order])
    return float(np.linalg.norm(np.diff(pos, axis=0), axis=1).sum()) if len(pos) > 1 else 0.0


def build_sequence(viewpoints: list[Pose6DoF], spec: SequenceSpec) -> list[int]:
    """Pick `length` viewpoints; optionally reorder them along a greedy nearest-neighbour path."""
    spec.validate()
    if spec.length > len(viewpoints):
        raise InvalidConfigError(f"sequence length {spec.length} exceeds pool of {len(viewpoints)}")
    rng = np.random.default_rng(spec.seed)
    sample = [int(i) for i in rng.choice(len(viewpoints), size=spec.length, replace=False)]
    if spec.ordering == "random":
        return sample
    pos = {i: viewpoints[i].translation for i in sample}
    current = min(sample)
    order = [current]
    remaining = set(sample) - {current}
    while remaining:
        cand = sorted(remaining)
        d = np.linalg.norm(np.array([pos[c] for c in cand]) - pos[current], axis=1)
        current = cand[int(np.argmin(d))]
        order.append(current)
        remaining.remove(current)
    return order


def perturb_pose(pose: Pose6DoF, spec: PoseNoiseSpec, seed: int) -> Pose6DoF:
    """Gaussian 6-DoF pose noise: translation jitter plus a random-axis rotation."""
    spec.validate()
    rng = np.random.default_rng(seed)
    dt = rng.normal(size=3)
    axis = rng.normal(size=3)
    angle = rng.normal()
    if spec.t_noise == 0 and spec.rotation_sigma == 0:
        return pose
    q = quat_from_axis_angle(axis, spec.rotation_sigma * angle)
    noisy = pose.compose(Pose6DoF(np.zeros(3), q))  # rotate about the camera centre
    return Pose6DoF(noisy.translation + spec.t_noise * dt, noisy.rotation)


def welch_t_test(sample_a, sample_b) -> tuple[float, float]:
    """Two-sided Welch t-test with Welch-Satterthwaite degrees of freedom."""
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise DegenerateSampleError("each sample needs at least two values")
    va = a.var(ddof=1) / len(a)
    vb = b.var(ddof=1) / len(b)
    if va + vb == 0:
        raise DegenerateSampleError("both samples have zero variance")
    t = (a.mean() - b.mean()) / math.sqrt(va + vb)
    df = (va + vb) ** 2 / (va**2 / (len(a) - 1) + vb**2 / (len(b) - 1))
    return float(t), float(min(1.0, 2.0 * stats.t.sf(abs(t), df)))


# ---------------------------------------------------------------------------
# Frames
# ---------------------------------------------------------------------------


class FramePool:
    """Viewpoint pool of one scene, rendered lazily with an LRU cache."""

    def __init__(
        self,
        scene: PlantScene,
        size: int = 600,
        seed: int | None = None,
        K: CameraIntrinsics = CameraIntrinsics(),
        sampler: ViewpointSamplerConfig = ViewpointSamplerConfig(),
        min_visibility: float = 0.1,
        cache_size: int = 256,
    ):
        self.scene = scene
        self.K = K
        self.min_visibility = min_visibility
        self.seed = derive_seed(scene.seed, "pool") if seed is None else seed
        self.poses = sample_viewpoint_pool(scene, size, sampler, self.seed)
        self.cache_size = cache_size
        self._cache: OrderedDict[int, ViewpointFrame] = OrderedDict()

    def __len__(self) -> int:
        return len(self.poses)

    def frame(self, index: int) -> ViewpointFrame:
        if index in self._cache:
            self._cache.move_to_end(index)
            return self._cache[index]
        frame = render_frame(self.scene, self.poses[index], self.K, self.min_visibility)
        self._cache[index] = frame
        if len(self._cache) > self.cache_size:
            self._cache.popitem(last=False)
        return frame


# ---------------------------------------------------------------------------
# Trials
# ---------------------------------------------------------------------------


@dataclass
class TrialOutput:
    report: MetricsReport
    order: list[int]
    annotations: list[FrameAnnotations]
    records: list[dict]


def run_trial_detailed(
    scene: PlantScene,
    seq: SequenceSpec,
    detector: DetectorNoiseConfig = DetectorNoiseConfig(),
    assoc: AssociationConfig = AssociationConfig(),
    kalman: KalmanConfig = KalmanConfig(),
    noise: PoseNoiseSpec = PoseNoiseSpec(),
    seed: int = 0,
    pool: FramePool | None = None,
    measure_positions: bool = True,
) -> TrialOutput:
    detector.validate()
    seq.validate()
    if pool is None:
        pool = FramePool(scene, seq.viewpoint_pool_size)
    order = build_sequence(pool.poses, seq)
    latents = assign_latents(scene, detector.feature_dim, derive_seed(seed, "latents"))
    encoder = PositionEncoder(detector) if detector.feature_mode == "appearance_plus_3d" else None
    tracker = Tracker(detector.feature_dim, assoc, kalman)
    annotations, raw_boxes, raw_scores = [], [], []
    for vp in order:
        frame = pool.frame(vp)
        believed = perturb_pose(frame.camera_pose, noise, derive_seed(seed, "pose", vp))
        dets = simulate_detections(frame, latents, detector, derive_seed(seed, "det", vp), believed, encoder)
        cloud = cloud_to_world(StructuredCloud(frame.cloud, frame.valid), believed) if measure_positions else None
        out = tracker.step(dets, cloud, believed.translation)
        annotations.append(
            FrameAnnotations(
                [g.object_id for g in frame.gt],
                [g.bbox for g in frame.gt],
                [tid for tid, _ in out],
                [d.bbox for _, d in out],
                [d.class_score for _, d in out],
            )
        )
        raw_boxes.append([d.bbox for d in dets])
        raw_scores.append([d.class_score for d in dets])
    report = evaluate_sequence(annotations, raw_boxes, raw_scores)
    report.n_tracklets = tracker.n_tracklets
    return TrialOutput(report, order, annotations, tracker.records)


def run_trial(scene, seq, detector=DetectorNoiseConfig(), assoc=AssociationConfig(), kalman=KalmanConfig(), noise=PoseNoiseSpec(), seed=0, pool=None) -> MetricsReport:
    """Render, perturb, detect, track and evaluate one sequence."""
    return run_trial_detailed(scene, seq, detector, assoc, kalman, noise, seed, pool).report


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------


@dataclass
class StudyArm:
    label: str
    ordering: str = "random"
    detector: DetectorNoiseConfig = field(default_factory=DetectorNoiseConfig)
    assoc: AssociationConfig = field(default_factory=AssociationConfig)
    kalman: KalmanConfig = field(default_factory=KalmanConfig)
    noise: PoseNoiseSpec = field(default_factory=PoseNoiseSpec)


@dataclass
class TrialSet:
    label: str
    reports: list[MetricsReport]
    means: dict[str, float] = field(default_factory=dict)
    deltas: dict[str, float] = field(default_factory=dict)
    p_values: dict[str, float] = field(default_factory=dict)
    significant: dict[str, bool] = field(default_factory=dict)

    @property
    def repetitions(self) -> int:
        return len(self.reports)

    def values(self, key: str) -> list[float]:
        return [float(getattr(r, key)) for r in self.reports]

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "reports": [r.to_dict() for r in self.reports],
            "means": self.means,
            "deltas": self.deltas,
            "p_values": self.p_values,
            "significant": self.significant,
        }


def _compare(arm: TrialSet, base: TrialSet) -> None:
    for key in METRIC_KEYS:
        a, b = arm.values(key), base.values(key)
        arm.deltas[key] = float(np.mean(a) - np.mean(b))
        try:
            _, p = welch_t_test(a, b)
        except DegenerateSampleError:
            p = 1.0 if np.mean(a) == np.mean(b) else 0.0
        arm.p_values[key] = p
        arm.significant[key] = p < SIGNIFICANCE


def run_ablation(
    arms: list[StudyArm],
    scenes: list[PlantScene],
    repetitions: int = 5,
    baseline: str | None = None,
    study_seed: int = 0,
    sequence_length: int = 100,
    pool_size: int = 600,
    pools: dict[int, FramePool] | None = None,
) -> dict[str, TrialSet]:
    """Repeat every arm with per-repetition sequence seeds shared across arms.

    Repetition r uses scene r mod len(scenes) and a fresh viewpoint sample.
    Deltas and Welch p-values are reported against the baseline arm (the
    first arm when none is named).
    """
    if not arms:
        raise InvalidConfigError("an ablation needs at least one arm")
    if repetitions < 1:
        raise InvalidConfigError("repetitions must be >= 1")
    labels = [a.label for a in arms]
    if len(set(labels)) != len(labels):
        raise InvalidConfigError("arm labels must be unique")
    baseline = labels[0] if baseline is None else baseline
    if baseline not in labels:
        raise InvalidConfigError(f"unknown baseline arm {baseline!r}")
    pools = {} if pools is None else pools
    results = {a.label: TrialSet(a.label, []) for a in arms}
    for rep in range(repetitions):
        scene = scenes[rep % len(scenes)]
        if scene.seed not in pools:
            pools[scene.seed] = FramePool(scene, pool_size)
        seq_seed = derive_seed(study_seed, "sequence", rep)
        trial_seed = derive_seed(study_seed, "trial", rep)
        for arm in arms:
            seq = SequenceSpec(arm.ordering, sequence_length, seq_seed, len(pools[scene.seed]))
            report = run_trial(scene, seq, arm.detector, arm.assoc, arm.kalman, arm.noise, trial_seed, pools[scene.seed])
            report.label = arm.label
            results[arm.label].reports.append(report)
            log.info("rep %d arm %s: HOTA %.2f AssA %.2f", rep, arm.label, report.HOTA, report.AssA)
    base = results[baseline]
    for ts in results.values():
        ts.means = {k: float(np.mean(ts.values(k))) for k in METRIC_KEYS}
        if repetitions >= 2:
            _compare(ts, base)
        else:
            ts.deltas = {k: ts.means[k] - base.means[k] for k in METRIC_KEYS}
    return results


def with_overrides(cfg, overrides: dict):
    """dataclasses.replace that tolerates JSON lists for tuple fields."""
    if not overrides:
        return cfg
    return replace(cfg, **{k: tuple(v) if isinstance(v, list) else v for k, v in overrides.items()})
