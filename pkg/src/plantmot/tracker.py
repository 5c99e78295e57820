"""Re-ID feature tracker with per-object 3D Kalman filtering.

Association uses the cosine distance between tracklet and detection features,
solved with minimum-cost assignment and rejected above a gate. Tracklets are
never deleted. Each tracklet also keeps a static-object Kalman estimate of its
3D position, measured from the world-frame point cloud inside its box; that
estimate is bookkeeping and does not enter the association cost unless
``position_weight`` is set.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from .detector_sim import Detection
from .errors import InvalidConfigError
from .matching import _solve
from .preprocess import StructuredCloud


@dataclass(frozen=True)
class AssociationConfig:
    gate: float = 0.5
    feature_momentum: float = 0.9
    score_threshold: float = 0.05
    position_weight: float = 0.0  # > 0 adds a Mahalanobis position term to the cost
    mad_k: float = 3.0

    def validate(self) -> None:
        if self.gate < 0:
            raise InvalidConfigError("gate must be >= 0")
        if not 0.0 <= self.feature_momentum <= 1.0:
            raise InvalidConfigError("feature_momentum must lie in [0, 1]")
        if self.position_weight < 0:
            raise InvalidConfigError("position_weight must be >= 0")


@dataclass(frozen=True)
class KalmanConfig:
    process_noise_q: float = 1e-6
    measurement_noise_r: float = 1e-4
    initial_cov: float = 1e-4

    def validate(self) -> None:
        if self.process_noise_q < 0 or self.initial_cov < 0:
            raise InvalidConfigError("Kalman variances must be >= 0")
        if self.measurement_noise_r <= 0:
            raise InvalidConfigError("measurement_noise_r must be > 0")


@dataclass
class Tracklet:
    id: int
    feature: np.ndarray
    kalman_mean: np.ndarray
    kalman_cov: np.ndarray
    last_seen: int
    hits: int


def cosine_distance(f, g) -> float:
    f = np.asarray(f, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    nf, ng = np.linalg.norm(f), np.linalg.norm(g)
    if nf == 0 or ng == 0:
        raise InvalidConfigError("cosine distance undefined for a zero vector")
    return float(np.clip(1.0 - (f @ g) / (nf * ng), 0.0, 2.0))


def measure_position_3d(bbox, cloud: StructuredCloud, camera_center=(0.0, 0.0, 0.0), k: float = 3.0):
    """Mean of the valid points inside `bbox` after a median/MAD depth filter.

    Depth is the distance from `camera_center`. Points farther than k * MAD
    from the median depth are dropped; k = inf disables the filter. Returns
    None when no point survives.
    """
    H, W = cloud.valid.shape
    x0, y0, x1, y1 = bbox
    u0, u1 = max(0, int(np.floor(x0))), min(W, int(np.ceil(x1)))
    v0, v1 = max(0, int(np.floor(y0))), min(H, int(np.ceil(y1)))
    if u0 >= u1 or v0 >= v1:
        return None
    mask = cloud.valid[v0:v1, u0:u1]
    pts = cloud.points[v0:v1, u0:u1][mask]
    if len(pts) == 0:
        return None
    if np.isfinite(k):
        depth = np.linalg.norm(pts - np.asarray(camera_center, float), axis=1)
        med = np.median(depth)
        mad = np.median(np.abs(depth - med))
        pts = pts[np.abs(depth - med) <= k * mad]
        if len(pts) == 0:
            return None
    return pts.mean(axis=0)


def kalman_update(mean, cov, measurement, cfg: KalmanConfig = KalmanConfig()):
    """Constant-position predict (cov += q I) then update with r I measurement noise."""
    mean = np.asarray(mean, dtype=np.float64)
    P = np.asarray(cov, dtype=np.float64) + cfg.process_noise_q * np.eye(3)
    S = P + cfg.measurement_noise_r * np.eye(3)
    K = np.linalg.solve(S, P).T  # P S^-1 with P, S symmetric
    new_mean = mean + K @ (np.asarray(measurement, float) - mean)
    new_cov = (np.eye(3) - K) @ P
    return new_mean, 0.5 * (new_cov + new_cov.T)


def _kalman_update_batch(means, covs, z, cfg: KalmanConfig):
    eye = np.eye(3)
    P = covs + cfg.process_noise_q * eye
    S = P + cfg.measurement_noise_r * eye
    K = np.transpose(np.linalg.solve(S, P), (0, 2, 1))
    new_means = means + np.einsum("nij,nj->ni", K, z - means)
    new_covs = (eye - K) @ P
    return new_means, 0.5 * (new_covs + np.transpose(new_covs, (0, 2, 1)))


@dataclass
class TrackerState:
    """Array-backed tracklet store; row i describes tracklet ids[i]."""

    feature_dim: int
    ids: np.ndarray = None
    features: np.ndarray = None
    means: np.ndarray = None
    covs: np.ndarray = None
    last_seen: np.ndarray = None
    hits: np.ndarray = None
    next_id: int = 0
    frame_index: int = -1

    def __post_init__(self):
        D = self.feature_dim
        if self.ids is None:
            self.ids = np.zeros(0, dtype=np.int64)
            self.features = np.zeros((0, D))
            self.means = np.zeros((0, 3))
            self.covs = np.zeros((0, 3, 3))
            self.last_seen = np.zeros(0, dtype=np.int64)
            self.hits = np.zeros(0, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.ids)

    def copy(self) -> TrackerState:
        return dataclasses.replace(
            self,
            ids=self.ids.copy(),
            features=self.features.copy(),
            means=self.means.copy(),
            covs=self.covs.copy(),
            last_seen=self.last_seen.copy(),
            hits=self.hits.copy(),
        )

    def tracklets(self) -> list[Tracklet]:
        return [
            Tracklet(int(self.ids[i]), self.features[i].copy(), self.means[i].copy(), self.covs[i].copy(), int(self.last_seen[i]), int(self.hits[i]))
            for i in range(len(self))
        ]


def _association_cost(state: TrackerState, feats: np.ndarray, positions: np.ndarray, assoc: AssociationConfig, kalman: KalmanConfig):
    cost = np.clip(1.0 - state.features @ feats.T, 0.0, 2.0)
    if assoc.position_weight > 0:
        S = state.covs + kalman.measurement_noise_r * np.eye(3)
        diff = positions[None, :, :] - state.means[:, None, :]
        m2 = np.einsum("tdi,tij,tdj->td", diff, np.linalg.inv(S), diff)
        # unknown positions contribute nothing
        cost = cost + assoc.position_weight * np.sqrt(np.nan_to_num(m2, nan=0.0))
    return cost


def track_step(
    state: TrackerState,
    detections: list[Detection],
    cloud: StructuredCloud | None = None,
    camera_center=None,
    assoc: AssociationConfig = AssociationConfig(),
    kalman: KalmanConfig = KalmanConfig(),
) -> tuple[TrackerState, list[tuple[int, Detection]]]:
    """Associate one frame of detections; returns the new state and (id, detection) pairs.

    `cloud` must already be in the world frame. The input state is not modified.
    """
    state = state.copy()
    state.frame_index += 1
    frame_idx = state.frame_index
    dets = [d for d in detections if d.class_score >= assoc.score_threshold]
    if cloud is not None:
        center = np.zeros(3) if camera_center is None else np.asarray(camera_center, float)
        dets = [
            d if d.centroid3d is not None else dataclasses.replace(d, centroid3d=measure_position_3d(d.bbox, cloud, center, assoc.mad_k))
            for d in dets
        ]
    if not dets:
        return state, []

    feats = np.stack([np.asarray(d.feature, dtype=np.float64) for d in dets])
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    if (norms == 0).any():
        raise InvalidConfigError("detection feature with zero norm")
    feats = feats / norms
    if feats.shape[1] != state.feature_dim:
        raise InvalidConfigError(f"feature dimension {feats.shape[1]} != tracker dimension {state.feature_dim}")
    positions = np.array([d.centroid3d if d.centroid3d is not None else (np.nan,) * 3 for d in dets], dtype=np.float64)
    has_pos = np.isfinite(positions).all(axis=1)

    det_to_track = np.full(len(dets), -1, dtype=np.int64)
    if len(state):
        cost = _association_cost(state, feats, positions, assoc, kalman)
        rows, cols = _solve(cost)
        ok = cost[rows, cols] <= assoc.gate
        rows, cols = rows[ok], cols[ok]
        det_to_track[cols] = rows

        m = assoc.feature_momentum
        blended = m * state.features[rows] + (1.0 - m) * feats[cols]
        state.features[rows] = blended / np.linalg.norm(blended, axis=1, keepdims=True)
        state.last_seen[rows] = frame_idx
        state.hits[rows] += 1

        upd = has_pos[cols]
        r_upd, c_upd = rows[upd], cols[upd]
        if len(r_upd):
            # a first measurement initializes the estimate, as for a new tracklet
            fresh = ~np.isfinite(state.means[r_upd]).all(axis=1)
            state.means[r_upd[fresh]] = positions[c_upd[fresh]]
            state.covs[r_upd[fresh]] = kalman.initial_cov * np.eye(3)
            r_upd, c_upd = r_upd[~fresh], c_upd[~fresh]
        if len(r_upd):
            means, covs = _kalman_update_batch(state.means[r_upd], state.covs[r_upd], positions[c_upd], kalman)
            state.means[r_upd], state.covs[r_upd] = means, covs

    new = np.nonzero(det_to_track < 0)[0]
    if len(new):
        n_new = len(new)
        new_ids = np.arange(state.next_id, state.next_id + n_new)
        state.next_id += n_new
        start = len(state)
        state.ids = np.concatenate([state.ids, new_ids])
        state.features = np.concatenate([state.features, feats[new]])
        state.means = np.concatenate([state.means, positions[new]])
        state.covs = np.concatenate([state.covs, np.tile(kalman.initial_cov * np.eye(3), (n_new, 1, 1))])
        state.last_seen = np.concatenate([state.last_seen, np.full(n_new, frame_idx)])
        state.hits = np.concatenate([state.hits, np.ones(n_new, dtype=np.int64)])
        det_to_track[new] = np.arange(start, start + n_new)

    return state, [(int(state.ids[t]), d) for t, d in zip(det_to_track, dets)]


class Tracker:
    """Sequential wrapper keeping state and per-frame output records."""

    def __init__(self, feature_dim: int, assoc: AssociationConfig = AssociationConfig(), kalman: KalmanConfig = KalmanConfig()):
        assoc.validate()
        kalman.validate()
        self.assoc = assoc
        self.kalman = kalman
        self.state = TrackerState(feature_dim)
        self.records: list[dict] = []

    def step(self, detections, cloud: StructuredCloud | None = None, camera_center=None) -> list[tuple[int, Detection]]:
        self.state, out = track_step(self.state, detections, cloud, camera_center, self.assoc, self.kalman)
        row_of = {int(tid): i for i, tid in enumerate(self.state.ids)}
        for tid, det in out:
            i = row_of[tid]
            mean = self.state.means[i]
            self.records.append(
                {
                    "frame": self.state.frame_index,
                    "tracklet_id": tid,
                    "bbox": list(det.bbox),
                    "score": det.class_score,
                    "position": mean.tolist() if np.isfinite(mean).all() else None,
                    "cov_trace": float(np.trace(self.state.covs[i])),
                }
            )
        return out

    @property
    def n_tracklets(self) -> int:
        return len(self.state)

    def write_records(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.records, fh, indent=1)
