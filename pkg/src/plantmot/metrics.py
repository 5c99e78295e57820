"""Tracking and detection metrics in 2D image space.

HOTA follows the reference definition: per localization threshold alpha, a
one-to-one matching per frame (most matches first, then highest total IoU),
DetA = TP / (TP + FN + FP), and AssA the mean over true positives of
TPA / (TPA + FNA + FPA) for that TP's (gt id, prediction id) pair.
CLEAR-MOT matching prefers pairs that were matched in the previous frame.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numba as nb
import numpy as np

from .errors import InvalidConfigError
from .matching import _solve, _solve_nb

DEFAULT_ALPHAS = tuple(np.round(np.arange(1, 20) * 0.05, 2))
MAP_THRESHOLDS = tuple(np.round(np.arange(10) * 0.05 + 0.5, 2))
_EPS = np.finfo(float).eps
_NO_ID = object()


@dataclass
class FrameAnnotations:
    gt_ids: list[int]
    gt_boxes: list
    pred_ids: list[int]
    pred_boxes: list
    pred_scores: list[float] = field(default_factory=list)

    def __post_init__(self):
        if len(set(self.gt_ids)) != len(self.gt_ids) or len(set(self.pred_ids)) != len(self.pred_ids):
            raise InvalidConfigError("ids must be unique within a frame")


SequenceAnnotations = list[FrameAnnotations]


def iou2d(a, b) -> float:
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def iou_matrix(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    ih = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def _conflict_free(gated: np.ndarray) -> bool:
    """No row or column has more than one gated candidate."""
    return bool((gated.sum(0) <= 1).all() and (gated.sum(1) <= 1).all())


def _max_matching(weights: np.ndarray, gated: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gated pairs maximising match count, then total weight (weights in [0, 1])."""
    if _conflict_free(gated):
        return np.nonzero(gated)
    big = min(gated.shape) + 1.0
    rows, cols = _solve(-np.where(gated, big + weights, 0.0))
    keep = gated[rows, cols]
    return rows[keep], cols[keep]


@nb.njit(cache=True)
def _conflict_free_nb(gated):
    n, m = gated.shape
    for i in range(n):
        c = 0
        for j in range(m):
            c += gated[i, j]
        if c > 1:
            return False
    for j in range(m):
        c = 0
        for i in range(n):
            c += gated[i, j]
        if c > 1:
            return False
    return True


@nb.njit(cache=True)
def _hota_frame_matches(sim, thresholds):
    """All (alpha index, row, col) matches of one frame over ascending thresholds."""
    n, m = sim.shape
    k = min(n, m)
    cap = len(thresholds) * k
    out_a = np.empty(cap, dtype=np.int64)
    out_r = np.empty(cap, dtype=np.int64)
    out_c = np.empty(cap, dtype=np.int64)
    cnt = 0
    big = k + 1.0
    trivial = False
    for a in range(len(thresholds)):
        gated = sim >= thresholds[a]
        # gated sets shrink as the threshold grows: once conflict-free, always
        if trivial or _conflict_free_nb(gated):
            trivial = True
            for i in range(n):
                for j in range(m):
                    if gated[i, j]:
                        out_a[cnt], out_r[cnt], out_c[cnt] = a, i, j
                        cnt += 1
            continue
        rows, cols = _solve_nb(-np.where(gated, big + sim, 0.0))
        for t in range(len(rows)):
            if gated[rows[t], cols[t]]:
                out_a[cnt], out_r[cnt], out_c[cnt] = a, rows[t], cols[t]
                cnt += 1
    return out_a[:cnt], out_r[:cnt], out_c[:cnt]


# ---------------------------------------------------------------------------
# HOTA
# ---------------------------------------------------------------------------


@dataclass
class HotaResult:
    HOTA: float
    DetA: float
    AssA: float
    LocA: float
    alpha_grid: list[float]
    HOTA_alpha: list[float]
    DetA_alpha: list[float]
    AssA_alpha: list[float]
    LocA_alpha: list[float]


def _index(ids_per_frame):
    uniq = sorted({i for ids in ids_per_frame for i in ids})
    return {v: k for k, v in enumerate(uniq)}


def hota_family(seq: SequenceAnnotations, alpha_grid=DEFAULT_ALPHAS) -> HotaResult:
    """HOTA, DetA, AssA, LocA (percent), averaged over alpha_grid.

    An empty sequence scores 0 everywhere except LocA, which is 100 by
    convention (no localization error is observed).
    """
    alphas = np.asarray(alpha_grid, dtype=np.float64)
    if alphas.size == 0 or np.any((alphas <= 0) | (alphas >= 1)):
        raise InvalidConfigError("alpha_grid must be non-empty with values in (0, 1)")
    gt_index = _index(f.gt_ids for f in seq)
    pr_index = _index(f.pred_ids for f in seq)
    n_a = len(alphas)
    gt_count = np.zeros(len(gt_index))
    pr_count = np.zeros(len(pr_index))
    pair_count = np.zeros((n_a, len(gt_index), len(pr_index)))
    tp = np.zeros(n_a)
    loc = np.zeros(n_a)
    n_gt = n_pr = 0

    for f in seq:
        g = np.array([gt_index[i] for i in f.gt_ids], dtype=np.int64)
        p = np.array([pr_index[i] for i in f.pred_ids], dtype=np.int64)
        gt_count[g] += 1
        pr_count[p] += 1
        n_gt += len(g)
        n_pr += len(p)
        if len(g) == 0 or len(p) == 0:
            continue
        sim = iou_matrix(f.gt_boxes, f.pred_boxes)
        ai, rows, cols = _hota_frame_matches(sim, alphas - _EPS)
        np.add.at(pair_count, (ai, g[rows], p[cols]), 1)
        np.add.at(tp, ai, 1)
        np.add.at(loc, ai, sim[rows, cols])

    det_a = tp / np.maximum(1.0, n_gt + n_pr - tp)
    ass_a = np.zeros(n_a)
    for a in range(n_a):
        if tp[a] == 0:
            continue
        pc = pair_count[a]
        denom = gt_count[:, None] + pr_count[None, :] - pc
        score = np.divide(pc, denom, out=np.zeros_like(pc), where=pc > 0)
        ass_a[a] = (pc * score).sum() / tp[a]
    loc_a = np.where(tp > 0, loc / np.maximum(tp, 1.0), 1.0)
    hota_a = np.sqrt(det_a * ass_a)
    return HotaResult(
        HOTA=100 * float(hota_a.mean()),
        DetA=100 * float(det_a.mean()),
        AssA=100 * float(ass_a.mean()),
        LocA=100 * float(loc_a.mean()),
        alpha_grid=alphas.tolist(),
        HOTA_alpha=(100 * hota_a).tolist(),
        DetA_alpha=(100 * det_a).tolist(),
        AssA_alpha=(100 * ass_a).tolist(),
        LocA_alpha=(100 * loc_a).tolist(),
    )


# ---------------------------------------------------------------------------
# CLEAR-MOT
# ---------------------------------------------------------------------------


def clearmot(seq: SequenceAnnotations, iou_threshold: float = 0.5) -> tuple[float, int]:
    """(MOTA in percent, ID switch count)."""
    if not 0.0 < iou_threshold < 1.0:
        raise InvalidConfigError("iou_threshold must lie in (0, 1)")
    n_gt = sum(len(f.gt_ids) for f in seq)
    if n_gt == 0:
        raise InvalidConfigError("MOTA is undefined without ground truth")
    fn = fp = idsw = 0
    prev_step: dict[int, int] = {}  # gt id -> pred id matched in the previous frame
    last_match: dict[int, int] = {}  # gt id -> pred id matched most recently
    for f in seq:
        n, m = len(f.gt_ids), len(f.pred_ids)
        matched: dict[int, int] = {}
        if n and m:
            sim = iou_matrix(f.gt_boxes, f.pred_boxes)
            gated = sim >= iou_threshold - _EPS
            if _conflict_free(gated):
                rows, cols = np.nonzero(gated)
            else:
                prev_pred = np.array([prev_step.get(g, _NO_ID) for g in f.gt_ids], dtype=object)
                cont = prev_pred[:, None] == np.array(f.pred_ids, dtype=object)[None, :]
                # lexicographic: continuing pairs, then match count, then total IoU
                k = min(n, m)
                score = np.where(gated, (k * (k + 2) + 1.0) * cont + (k + 1.0) + sim, 0.0)
                rows, cols = _solve(-score)
                keep = gated[rows, cols]
                rows, cols = rows[keep], cols[keep]
            for r, c in zip(rows, cols):
                matched[f.gt_ids[r]] = f.pred_ids[c]
        for g, p in matched.items():
            if g in last_match and last_match[g] != p:
                idsw += 1
            last_match[g] = p
        fn += n - len(matched)
        fp += m - len(matched)
        prev_step = matched
    return 100.0 * (1.0 - (fn + fp + idsw) / n_gt), idsw


# ---------------------------------------------------------------------------
# mAP
# ---------------------------------------------------------------------------


@nb.njit(cache=True)
def _greedy_tp(iou, order, thresholds):
    """TP flags per threshold for one image's detections, taken in score order."""
    n_thr, n_det, n_gt = len(thresholds), iou.shape[0], iou.shape[1]
    tp = np.zeros((n_thr, n_det), dtype=np.bool_)
    for t in range(n_thr):
        taken = np.zeros(n_gt, dtype=np.bool_)
        for k in order:
            best, best_j = -1.0, -1
            for j in range(n_gt):
                if not taken[j] and iou[k, j] > best:
                    best, best_j = iou[k, j], j
            if best_j >= 0 and best >= thresholds[t]:
                taken[best_j] = True
                tp[t, k] = True
    return tp


def average_precisions(det_boxes, det_scores, gt_boxes, iou_thresholds) -> np.ndarray:
    """COCO-style AP with 101-point interpolation, one value per IoU threshold.

    det_boxes/det_scores/gt_boxes are per-image lists. Detections are matched
    greedily in descending score order to the unmatched GT of highest IoU.
    """
    thresholds = np.asarray(iou_thresholds, dtype=np.float64)
    if thresholds.ndim != 1 or np.any((thresholds <= 0) | (thresholds >= 1)):
        raise InvalidConfigError("IoU thresholds must lie in (0, 1)")
    n_gt = sum(len(g) for g in gt_boxes)
    if n_gt == 0:
        raise InvalidConfigError("average precision is undefined without ground truth")
    scores = np.concatenate([np.asarray(s, dtype=np.float64).reshape(-1) for s in det_scores] + [np.zeros(0)])
    if scores.size == 0:
        return np.zeros(len(thresholds))
    flags = []
    for boxes, s, gts in zip(det_boxes, det_scores, gt_boxes):
        n = len(s)
        if n and len(gts):
            order = np.argsort(-np.asarray(s, dtype=np.float64), kind="stable")
            flags.append(_greedy_tp(iou_matrix(boxes, gts), order, thresholds - _EPS))
        else:
            flags.append(np.zeros((len(thresholds), n), dtype=bool))
    is_tp = np.concatenate(flags, axis=1)[:, np.argsort(-scores, kind="stable")]
    tps = np.cumsum(is_tp, axis=1)
    fps = np.cumsum(~is_tp, axis=1)
    recall = tps / n_gt
    precision = tps / (tps + fps)
    envelope = np.maximum.accumulate(precision[:, ::-1], axis=1)[:, ::-1]
    points = np.linspace(0.0, 1.0, 101)
    out = np.zeros(len(thresholds))
    for t in range(len(thresholds)):
        idx = np.searchsorted(recall[t], points, side="left")
        out[t] = np.where(idx < recall.shape[1], envelope[t, np.minimum(idx, recall.shape[1] - 1)], 0.0).mean()
    return out


def average_precision(det_boxes, det_scores, gt_boxes, iou_threshold: float) -> float:
    return float(average_precisions(det_boxes, det_scores, gt_boxes, [iou_threshold])[0])


def mean_average_precision(det_boxes, det_scores, gt_boxes, iou_thresholds=MAP_THRESHOLDS) -> float:
    return float(average_precisions(det_boxes, det_scores, gt_boxes, iou_thresholds).mean())


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

CSV_FIELDS = ("label", "HOTA", "DetA", "AssA", "LocA", "MOTA", "IDSW", "mAP", "AP50", "n_tracklets")


@dataclass
class MetricsReport:
    HOTA: float
    DetA: float
    AssA: float
    LocA: float
    MOTA: float
    IDSW: int
    mAP: float
    AP50: float
    alpha_grid: list[float]
    HOTA_alpha: list[float] = field(default_factory=list)
    DetA_alpha: list[float] = field(default_factory=list)
    AssA_alpha: list[float] = field(default_factory=list)
    n_tracklets: int = 0
    label: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    def csv_row(self) -> str:
        buf = io.StringIO()
        csv.writer(buf).writerow([getattr(self, k) for k in CSV_FIELDS])
        return buf.getvalue()

    @classmethod
    def from_dict(cls, d: dict) -> MetricsReport:
        return cls(**d)


def evaluate_sequence(seq: SequenceAnnotations, det_boxes=None, det_scores=None, alpha_grid=DEFAULT_ALPHAS, mot_iou: float = 0.5) -> MetricsReport:
    """All tracking metrics for a sequence, plus mAP when raw detections are given.

    Without separate raw detections, the tracked predictions themselves are
    scored for mAP.
    """
    h = hota_family(seq, alpha_grid)
    n_gt = sum(len(f.gt_ids) for f in seq)
    mota, idsw = clearmot(seq, mot_iou) if n_gt else (float("nan"), 0)
    if det_boxes is None:
        det_boxes = [f.pred_boxes for f in seq]
        det_scores = [f.pred_scores or [1.0] * len(f.pred_boxes) for f in seq]
    gt_boxes = [f.gt_boxes for f in seq]
    if n_gt:
        aps = average_precisions(det_boxes, det_scores, gt_boxes, MAP_THRESHOLDS)
        m_ap = float(aps.mean())
        ap50 = float(aps[MAP_THRESHOLDS.index(0.5)])
    else:
        m_ap = ap50 = float("nan")
    n_tracks = len({i for f in seq for i in f.pred_ids})
    return MetricsReport(
        h.HOTA, h.DetA, h.AssA, h.LocA, mota, idsw, m_ap, ap50, h.alpha_grid, h.HOTA_alpha, h.DetA_alpha, h.AssA_alpha, n_tracks
    )
