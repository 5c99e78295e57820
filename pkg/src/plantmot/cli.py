"""Command line entry point.

    plantmot generate --config study.json --out scenes/
    plantmot render   --scene scenes/scene_000.json --out frames/ [--count N]
    plantmot track    --config study.json --scene scenes/scene_000.json --frames frames/ --out run/
    plantmot eval     --tracks run/tracks.json --frames frames/ --out run/metrics.json
    plantmot ablate   --config study.json --out study/
    plantmot report   --study study/study.json --out report/

All randomness flows from the config's top-level ``seed``. Logs go to stderr,
results only to files. Any error exits with status 1 (2 for usage errors).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .detector_sim import Detection, DetectorNoiseConfig, PositionEncoder, assign_latents, simulate_detections
from .errors import InvalidConfigError
from .harness import (
    METRIC_KEYS,
    FramePool,
    PoseNoiseSpec,
    SequenceSpec,
    StudyArm,
    build_sequence,
    derive_seed,
    perturb_pose,
    run_ablation,
    with_overrides,
)
from .metrics import CSV_FIELDS, FrameAnnotations, evaluate_sequence
from .preprocess import StructuredCloud, WorkspaceLimits, cloud_to_world
from .render import CameraIntrinsics, ViewpointSamplerConfig, load_frame, save_frame
from .scene_synth import PlantScene, TraitConfig, generate_scene
from .tracker import AssociationConfig, KalmanConfig, Tracker

log = logging.getLogger("plantmot")


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------


@dataclass
class StudyConfig:
    seed: int = 0
    n_scenes: int = 5
    n_background: int = 2
    traits: TraitConfig = field(default_factory=TraitConfig)
    camera: CameraIntrinsics = field(default_factory=CameraIntrinsics)
    sampler: ViewpointSamplerConfig = field(default_factory=ViewpointSamplerConfig)
    pool_size: int = 600
    sequence: SequenceSpec = field(default_factory=SequenceSpec)
    detector: DetectorNoiseConfig = field(default_factory=DetectorNoiseConfig)
    association: AssociationConfig = field(default_factory=AssociationConfig)
    kalman: KalmanConfig = field(default_factory=KalmanConfig)
    noise: PoseNoiseSpec = field(default_factory=PoseNoiseSpec)
    repetitions: int = 5
    baseline: str | None = None
    arms: list[StudyArm] = field(default_factory=list)


KNOWN_KEYS = {
    "seed", "scenes", "camera", "viewpoints", "sequence", "detector", "association",
    "kalman", "pose_noise", "study",
}


def _detector(d: dict, base: DetectorNoiseConfig) -> DetectorNoiseConfig:
    d = dict(d)
    ws = d.pop("workspace", None)
    cfg = with_overrides(base, d)
    if ws is not None:
        cfg = with_overrides(cfg, {"workspace": WorkspaceLimits(tuple(ws["lower"]), tuple(ws["upper"]))})
    cfg.validate()
    return cfg


def parse_config(doc: dict) -> StudyConfig:
    """Build a StudyConfig from the JSON document; unknown keys are errors."""
    unknown = set(doc) - KNOWN_KEYS
    if unknown:
        raise InvalidConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        cfg = StudyConfig(seed=int(doc.get("seed", 0)))
        sc = dict(doc.get("scenes", {}))
        cfg.n_scenes = int(sc.pop("count", cfg.n_scenes))
        cfg.n_background = int(sc.pop("n_background", cfg.n_background))
        cfg.traits = TraitConfig.from_dict(sc.pop("traits", {}))
        if sc:
            raise InvalidConfigError(f"unknown scenes keys: {sorted(sc)}")
        cfg.camera = with_overrides(cfg.camera, doc.get("camera", {}))
        vp = dict(doc.get("viewpoints", {}))
        cfg.pool_size = int(vp.pop("pool_size", cfg.pool_size))
        cfg.sampler = with_overrides(cfg.sampler, vp)
        seq = dict(doc.get("sequence", {}))
        cfg.sequence = SequenceSpec(seq.pop("ordering", "random"), int(seq.pop("length", 100)), cfg.seed, cfg.pool_size)
        if seq:
            raise InvalidConfigError(f"unknown sequence keys: {sorted(seq)}")
        cfg.detector = _detector(doc.get("detector", {}), cfg.detector)
        cfg.association = with_overrides(cfg.association, doc.get("association", {}))
        cfg.kalman = with_overrides(cfg.kalman, doc.get("kalman", {}))
        cfg.noise = with_overrides(cfg.noise, doc.get("pose_noise", {}))
        study = doc.get("study", {})
        cfg.repetitions = int(study.get("repetitions", cfg.repetitions))
        cfg.baseline = study.get("baseline")
        for a in study.get("arms", []):
            cfg.arms.append(
                StudyArm(
                    a["label"],
                    a.get("ordering", cfg.sequence.ordering),
                    _detector(a.get("detector", {}), cfg.detector),
                    with_overrides(cfg.association, a.get("association", {})),
                    with_overrides(cfg.kalman, a.get("kalman", {})),
                    with_overrides(cfg.noise, a.get("pose_noise", {})),
                )
            )
    except (TypeError, KeyError) as exc:
        raise InvalidConfigError(f"malformed config: {exc}") from exc
    cfg.traits.validate()
    cfg.camera.validate()
    cfg.sampler.validate()
    cfg.sequence.validate()
    cfg.association.validate()
    cfg.kalman.validate()
    cfg.noise.validate()
    return cfg


def load_config(path) -> StudyConfig:
    if path is None:
        return StudyConfig()
    with open(path) as fh:
        return parse_config(json.load(fh))


def scene_seed(cfg: StudyConfig, k: int) -> int:
    return derive_seed(cfg.seed, "scene", k)


def make_scenes(cfg: StudyConfig) -> list[PlantScene]:
    return [generate_scene(scene_seed(cfg, k), cfg.traits, cfg.n_background) for k in range(cfg.n_scenes)]


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1)


def _read_json(path):
    with open(path) as fh:
        return json.load(fh)


def _load_scene(path) -> PlantScene:
    return PlantScene.from_dict(_read_json(path))


def _frame_indices(frames_dir: Path) -> list[int]:
    idx = sorted(int(p.stem) for p in frames_dir.glob("*.json") if p.stem.isdigit())
    if not idx:
        raise InvalidConfigError(f"no frames found in {frames_dir}")
    return idx


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> None:
    cfg = load_config(args.config)
    out = Path(args.out)
    for k, scene in enumerate(make_scenes(cfg)):
        _write_json(out / f"scene_{k:03d}.json", scene.to_dict())
        log.info("scene %d: seed %d, %d tomatoes", k, scene.seed, scene.n_tomatoes)


def cmd_render(args) -> None:
    cfg = load_config(args.config)
    scene = _load_scene(args.scene)
    pool = FramePool(scene, cfg.pool_size, derive_seed(cfg.seed, "pool", scene.seed), cfg.camera, cfg.sampler, cache_size=1)
    count = len(pool) if args.count is None else min(args.count, len(pool))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(count):
        save_frame(out, i, pool.frame(i))
    log.info("rendered %d frames to %s", count, out)


def _load_detections(path: Path) -> list[Detection]:
    return [Detection.from_dict(d) for d in _read_json(path)]


def cmd_track(args) -> None:
    cfg = load_config(args.config)
    frames_dir = Path(args.frames)
    available = _frame_indices(frames_dir)
    poses = [load_frame(frames_dir, i).camera_pose for i in available]
    spec = SequenceSpec(args.ordering or cfg.sequence.ordering, min(cfg.sequence.length, len(available)), cfg.seed, len(available))
    order = [available[k] for k in build_sequence(poses, spec)]
    det_cfg = cfg.detector
    tracker = Tracker(det_cfg.feature_dim, cfg.association, cfg.kalman)
    out = Path(args.out)
    if args.detections is None:
        scene = _load_scene(args.scene) if args.scene else None
        if scene is None:
            raise InvalidConfigError("track needs --scene to simulate detections, or --detections")
        latents = assign_latents(scene, det_cfg.feature_dim, derive_seed(cfg.seed, "latents"))
        encoder = PositionEncoder(det_cfg) if det_cfg.feature_mode == "appearance_plus_3d" else None
    for vp in order:
        frame = load_frame(frames_dir, vp)
        believed = perturb_pose(frame.camera_pose, cfg.noise, derive_seed(cfg.seed, "pose", vp))
        if args.detections is None:
            dets = simulate_detections(frame, latents, det_cfg, derive_seed(cfg.seed, "det", vp), believed, encoder)
            _write_json(out / "detections" / f"{vp}.json", [d.to_dict() for d in dets])
        else:
            dets = _load_detections(Path(args.detections) / f"{vp}.json")
        cloud = cloud_to_world(StructuredCloud(frame.cloud, frame.valid), believed)
        n_before = len(tracker.records)
        tracker.step(dets, cloud, believed.translation)
        for rec in tracker.records[n_before:]:
            rec["viewpoint"] = vp
    _write_json(out / "tracks.json", {"sequence": order, "records": tracker.records})
    log.info("tracked %d frames, %d tracklets", len(order), tracker.n_tracklets)


def annotations_from_tracks(tracks: dict, frames_dir: Path) -> list[FrameAnnotations]:
    by_frame: dict[int, list[dict]] = {}
    for rec in tracks["records"]:
        by_frame.setdefault(int(rec["frame"]), []).append(rec)
    seq = []
    for k, vp in enumerate(tracks["sequence"]):
        gt = _read_json(frames_dir / f"{vp}.json")["gt"]
        recs = by_frame.get(k, [])
        seq.append(
            FrameAnnotations(
                [g["object_id"] for g in gt],
                [g["bbox"] for g in gt],
                [r["tracklet_id"] for r in recs],
                [r["bbox"] for r in recs],
                [r["score"] for r in recs],
            )
        )
    return seq


def cmd_eval(args) -> None:
    tracks_path = Path(args.tracks)
    tracks = _read_json(tracks_path)
    seq = annotations_from_tracks(tracks, Path(args.frames))
    det_dir = tracks_path.parent / "detections"
    det_boxes = det_scores = None
    if det_dir.is_dir():
        raw = [_read_json(det_dir / f"{vp}.json") for vp in tracks["sequence"]]
        det_boxes = [[d["bbox"] for d in frame] for frame in raw]
        det_scores = [[d["class_score"] for d in frame] for frame in raw]
    report = evaluate_sequence(seq, det_boxes, det_scores)
    report.n_tracklets = len({r["tracklet_id"] for r in tracks["records"]})
    report.label = args.label
    out = Path(args.out)
    _write_json(out, report.to_dict())
    with open(out.with_suffix(".csv"), "w") as fh:
        fh.write(",".join(CSV_FIELDS) + "\n" + report.csv_row() + "\n")
    log.info("HOTA %.2f AssA %.2f MOTA %.2f IDSW %d", report.HOTA, report.AssA, report.MOTA, report.IDSW)


def cmd_ablate(args) -> None:
    cfg = load_config(args.config)
    if not cfg.arms:
        raise InvalidConfigError("config defines no study arms")
    scenes = make_scenes(cfg)
    pools = {s.seed: FramePool(s, cfg.pool_size, derive_seed(cfg.seed, "pool", s.seed), cfg.camera, cfg.sampler) for s in scenes}
    results = run_ablation(
        cfg.arms, scenes, cfg.repetitions, cfg.baseline, cfg.seed, cfg.sequence.length, cfg.pool_size, pools
    )
    arms_meta = {a.label: {"ordering": a.ordering, "t_noise": a.noise.t_noise, "feature_mode": a.detector.feature_mode} for a in cfg.arms}
    doc = {
        "seed": cfg.seed,
        "baseline": cfg.baseline or cfg.arms[0].label,
        "repetitions": cfg.repetitions,
        "arms": [{**results[a.label].to_dict(), **arms_meta[a.label]} for a in cfg.arms],
    }
    out = Path(args.out)
    _write_json(out / "study.json", doc)
    write_summary_csv(doc, out / "summary.csv")
    log.info("ablation of %d arms x %d repetitions written to %s", len(cfg.arms), cfg.repetitions, out)


def write_summary_csv(doc: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = ["label", "ordering", "feature_mode", "t_noise"]
        for k in METRIC_KEYS:
            header += [k, f"d{k}", f"p_{k}", f"sig_{k}"]
        w.writerow(header)
        for arm in doc["arms"]:
            row = [arm["label"], arm["ordering"], arm["feature_mode"], arm["t_noise"]]
            for k in METRIC_KEYS:
                row += [
                    f"{arm['means'][k]:.2f}",
                    f"{arm['deltas'].get(k, 0.0):+.2f}",
                    f"{arm['p_values'].get(k, float('nan')):.4g}",
                    "*" if arm["significant"].get(k, False) else "",
                ]
            w.writerow(row)


def cmd_report(args) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    doc = _read_json(args.study)
    out = Path(args.out)
    write_summary_csv(doc, out / "summary.csv")
    groups: dict[tuple[str, str], list[dict]] = {}
    for arm in doc["arms"]:
        groups.setdefault((arm["feature_mode"], arm["ordering"]), []).append(arm)
    for key in args.metrics:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        plotted = False
        for (mode, ordering), arms in sorted(groups.items()):
            arms = sorted(arms, key=lambda a: a["t_noise"])
            if len(arms) < 2:
                continue
            x = [a["t_noise"] for a in arms]
            vals = [np.array([r[key] for r in a["reports"]], float) for a in arms]
            ax.errorbar(x, [v.mean() for v in vals], yerr=[v.std(ddof=1) if len(v) > 1 else 0.0 for v in vals], marker="o", capsize=3, label=f"{mode}, {ordering}")
            plotted = True
        if not plotted:
            plt.close(fig)
            log.warning("no noise sweep found for %s; skipping plot", key)
            continue
        ax.set_xscale("symlog", linthresh=1e-3)
        ax.set_xlabel("camera pose noise t_noise (m)")
        ax.set_ylabel(key)
        ax.legend(fontsize=8)
        ax.grid(alpha=0.3)
        fig.tight_layout()
        fig.savefig(out / f"{key}_vs_noise.svg")
        plt.close(fig)
    log.info("report written to %s", out)


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="plantmot", description="Synthetic greenhouse multi-object tracking experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="generate synthetic plant scenes")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    r = sub.add_parser("render", help="render a scene's viewpoint pool")
    r.add_argument("--config")
    r.add_argument("--scene", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--count", type=int, help="render only the first COUNT viewpoints")
    r.set_defaults(func=cmd_render)

    t = sub.add_parser("track", help="detect and track one sequence over rendered frames")
    t.add_argument("--config")
    t.add_argument("--frames", required=True)
    t.add_argument("--scene", help="scene JSON, needed to simulate detections")
    t.add_argument("--detections", help="directory of per-frame detection JSON to use instead of the simulator")
    t.add_argument("--ordering", choices=("sorted", "random"))
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_track)

    e = sub.add_parser("eval", help="metrics for stored tracks")
    e.add_argument("--tracks", required=True)
    e.add_argument("--frames", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--label", default="")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run a study from a config file")
    a.add_argument("--config", required=True)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_ablate)

    rp = sub.add_parser("report", help="CSV tables and SVG plots from a study")
    rp.add_argument("--study", required=True)
    rp.add_argument("--out", required=True)
    rp.add_argument("--metrics", nargs="+", default=["HOTA", "AssA", "DetA", "MOTA"])
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        args.func(args)
    except Exception as exc:  # report and fail; tracebacks only with -v
        log.error("%s: %s", type(exc).__name__, exc, exc_info=args.verbose)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
