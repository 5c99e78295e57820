import math

import numpy as np
import pytest

from plantmot.detector_sim import (
    Detection,
    DetectorNoiseConfig,
    PositionEncoder,
    assign_latents,
    simulate_detections,
)
from plantmot.errors import InvalidConfigError, MissingLatentError
from plantmot.geometry import Pose6DoF
from plantmot.render import CameraIntrinsics, GroundTruthObject, ViewpointFrame, render_frame, sample_viewpoint
from plantmot.scene_synth import generate_scene

K = CameraIntrinsics()
CLEAN = DetectorNoiseConfig(p_miss_base=0.0, p_miss_occlusion_gain=0.0, fp_rate=0.0, bbox_jitter_sigma=0.0)


def synthetic_frame(n=5, visibility=1.0):
    gt = [GroundTruthObject(i, (10.0 + 40 * i, 20.0, 40.0 + 40 * i, 50.0), (0.05 * i, 0.0, 0.5), visibility) for i in range(n)]
    H, W = K.height, K.width
    pose = Pose6DoF([0.0, -0.6, 0.5], [math.cos(-math.pi / 4), math.sin(-math.pi / 4), 0, 0])
    return ViewpointFrame(np.zeros((H, W, 3), np.uint8), np.full((H, W, 3), np.nan, np.float32), np.zeros((H, W), bool), pose, gt, K)


class Latents:
    def __init__(self, n, D=64, seed=0):
        scene = generate_scene(seed, n_background=0)
        self.items = assign_latents(scene, D, seed)[:n]


@pytest.fixture(scope="module")
def latents():
    return Latents(5).items


def test_latents_unit_norm_and_deterministic():
    scene = generate_scene(1, n_background=0)
    a, b = assign_latents(scene, 32, 3), assign_latents(scene, 32, 3)
    assert len(a) == scene.n_tomatoes
    for la, lb in zip(a, b):
        assert np.linalg.norm(la.vector) == pytest.approx(1.0)
        assert np.array_equal(la.vector, lb.vector)
    assert [la.object_id for la in a] == [t.object_id for t in scene.tomatoes]


def test_latents_roughly_orthogonal():
    vecs = np.stack([lat.vector for lat in assign_latents(generate_scene(1, n_background=0), 64, 0)])
    G = vecs @ vecs.T
    off = G[~np.eye(len(G), dtype=bool)]
    assert np.abs(off).mean() < 0.2


def test_clean_detector_returns_every_object(latents):
    frame = synthetic_frame()
    dets = simulate_detections(frame, latents, CLEAN, seed=0)
    assert sorted(d.gt_id for d in dets) == list(range(5))
    for d in dets:
        g = frame.gt[d.gt_id]
        assert d.bbox == pytest.approx(g.bbox)
        assert np.linalg.norm(d.feature) == pytest.approx(1.0)
        assert d.class_score == pytest.approx(0.9)


def test_features_stay_close_to_latent_in_appearance_mode(latents):
    cfg = DetectorNoiseConfig(feature_mode="appearance_only", view_sigma=0.0, feature_noise_sigma=0.1, p_miss_base=0.0, p_miss_occlusion_gain=0.0, fp_rate=0.0)
    dets = simulate_detections(synthetic_frame(), latents, cfg, seed=1)
    for d in dets:
        sims = [d.feature @ lat.vector for lat in latents]
        assert int(np.argmax(sims)) == d.gt_id
        assert sims[d.gt_id] > 0.98


def test_noise_norm_scales_with_sigma(latents):
    # with the view term off, ||feature - latent|| is about sigma for small sigma
    cfg = DetectorNoiseConfig(feature_mode="appearance_only", view_sigma=0.0, feature_noise_sigma=0.05, p_miss_base=0.0, p_miss_occlusion_gain=0.0, fp_rate=0.0)
    dists = []
    for s in range(40):
        for d in simulate_detections(synthetic_frame(), latents, cfg, seed=s):
            dists.append(np.linalg.norm(d.feature - latents[d.gt_id].vector))
    assert np.mean(dists) == pytest.approx(0.05, rel=0.15)


def test_miss_rate_follows_visibility(latents):
    cfg = DetectorNoiseConfig(p_miss_base=0.1, p_miss_occlusion_gain=0.5, fp_rate=0.0)
    frame = synthetic_frame(visibility=0.4)  # miss prob 0.1 + 0.5 * 0.6 = 0.4
    n_trials = 2000
    detected = sum(len(simulate_detections(frame, latents, cfg, seed=s)) for s in range(n_trials))
    rate = 1 - detected / (5 * n_trials)
    sd = math.sqrt(0.4 * 0.6 / (5 * n_trials))
    assert abs(rate - 0.4) < 4 * sd


def test_false_positive_count_is_poisson(latents):
    cfg = DetectorNoiseConfig(p_miss_base=1.0, fp_rate=2.0)
    counts = np.array([len(simulate_detections(synthetic_frame(), latents, cfg, seed=s)) for s in range(3000)])
    assert counts.mean() == pytest.approx(2.0, abs=0.12)
    assert counts.var() == pytest.approx(2.0, abs=0.25)
    for d in simulate_detections(synthetic_frame(), latents, cfg, seed=4):
        assert d.gt_id is None and 0.1 <= d.class_score <= 0.6


def test_missing_latent_raises(latents):
    frame = synthetic_frame(6)
    with pytest.raises(MissingLatentError):
        simulate_detections(frame, latents, CLEAN)


def test_deterministic_for_seed(latents):
    a = simulate_detections(synthetic_frame(), latents, seed=9)
    b = simulate_detections(synthetic_frame(), latents, seed=9)
    assert [d.bbox for d in a] == [d.bbox for d in b]
    assert all(np.array_equal(x.feature, y.feature) for x, y in zip(a, b))


def test_boxes_clipped_to_image(latents):
    frame = synthetic_frame()
    cfg = DetectorNoiseConfig(bbox_jitter_sigma=50.0)
    for s in range(50):
        for d in simulate_detections(frame, latents, cfg, seed=s):
            x0, y0, x1, y1 = d.bbox
            assert 0 <= x0 <= x1 <= K.width and 0 <= y0 <= y1 <= K.height


def test_fourier_embedding_approximates_gaussian_kernel():
    cfg = DetectorNoiseConfig(position_channels=4000, feature_dim=4096, position_length_scale=0.1)
    enc = PositionEncoder(cfg)
    rng = np.random.default_rng(0)
    a = rng.uniform(-0.3, 0.3, (50, 3)) + [0, 0, 1]
    b = a + rng.normal(scale=0.08, size=a.shape)
    got = np.sum(enc(a) * enc(b), axis=1)
    expected = np.exp(-np.sum((a - b) ** 2, axis=1) / (2 * 0.1**2))
    assert np.abs(got - expected).max() < 0.1


def test_raw_encoding_writes_normalized_position(latents):
    cfg = DetectorNoiseConfig(position_encoding="raw", view_sigma=0.0, feature_noise_sigma=0.0, p_miss_base=0.0, p_miss_occlusion_gain=0.0, fp_rate=0.0, bbox_jitter_sigma=0.0)
    frame = synthetic_frame()
    for d in simulate_detections(frame, latents, cfg):
        pre = latents[d.gt_id].vector.copy()
        pos = cfg.workspace.normalize_points(frame.gt[d.gt_id].centroid3d)
        pre[-3:] = pos
        assert np.allclose(d.feature, pre / np.linalg.norm(pre))


def test_pose_noise_changes_only_position_channels(latents):
    frame = synthetic_frame()
    cfg = DetectorNoiseConfig(p_miss_base=0.0, p_miss_occlusion_gain=0.0, fp_rate=0.0)
    shifted = Pose6DoF(frame.camera_pose.translation + [0.05, 0, 0], frame.camera_pose.rotation)
    a = simulate_detections(frame, latents, cfg, seed=3)
    b = simulate_detections(frame, latents, cfg, seed=3, believed_pose=shifted)
    P = cfg.position_channels
    for x, y in zip(a, b):
        assert x.gt_id == y.gt_id
        # the unnormalized appearance part is identical, so the ratio is constant
        ratio = x.feature[:-P] / y.feature[:-P]
        assert np.allclose(ratio, ratio[0])
        assert not np.allclose(x.feature[-P:], y.feature[-P:])


def test_3d_features_separate_lookalikes():
    # two objects share a latent; position channels still tell them apart
    lat = Latents(2).items
    lat[1].vector = lat[0].vector.copy()
    lat[1].view_basis = lat[0].view_basis.copy()
    frame = synthetic_frame(2)
    frame.gt[1] = GroundTruthObject(1, frame.gt[1].bbox, (0.3, 0.0, 0.5), 1.0)
    # view term off: it would also tell the two apart through their view directions
    cfg = DetectorNoiseConfig(feature_noise_sigma=0.0, view_sigma=0.0, p_miss_base=0.0, p_miss_occlusion_gain=0.0, fp_rate=0.0)
    d = simulate_detections(frame, lat, cfg)
    assert d[0].feature @ d[1].feature < 0.9
    flat = simulate_detections(frame, lat, DetectorNoiseConfig(feature_mode="appearance_only", feature_noise_sigma=0.0, view_sigma=0.0, p_miss_base=0.0, p_miss_occlusion_gain=0.0, fp_rate=0.0))
    assert flat[0].feature @ flat[1].feature == pytest.approx(1.0)


def test_rendered_frame_end_to_end():
    scene = generate_scene(2, n_background=1)
    frame = render_frame(scene, sample_viewpoint(scene, seed=0), K)
    dets = simulate_detections(frame, assign_latents(scene, 64, 0), seed=0)
    assert all(d.gt_id is None or d.gt_id in {g.object_id for g in frame.gt} for d in dets)


@pytest.mark.parametrize(
    "kw",
    [{"p_miss_base": 1.5}, {"fp_rate": -1}, {"feature_mode": "rgb"}, {"feature_dim": 4}, {"position_channels": 64}, {"position_length_scale": 0}],
)
def test_invalid_config(kw, latents):
    with pytest.raises(InvalidConfigError):
        simulate_detections(synthetic_frame(), latents, DetectorNoiseConfig(**kw))


def test_detection_dict_round_trip():
    d = Detection((1.0, 2.0, 3.0, 4.0), 0.5, np.arange(4.0), np.array([0.1, 0.2, 0.3]))
    back = Detection.from_dict(d.to_dict())
    assert back.bbox == d.bbox and back.class_score == d.class_score
    assert np.array_equal(back.feature, d.feature) and np.array_equal(back.centroid3d, d.centroid3d)
