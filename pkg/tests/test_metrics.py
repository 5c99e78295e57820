import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plantmot.errors import InvalidConfigError
from plantmot.metrics import (
    DEFAULT_ALPHAS,
    FrameAnnotations,
    MetricsReport,
    average_precision,
    clearmot,
    evaluate_sequence,
    hota_family,
    iou2d,
    mean_average_precision,
)

# ---------------------------------------------------------------------------
# Independent references (enumeration, no assignment solver)
# ---------------------------------------------------------------------------


def ref_iou(a, b):
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def all_matchings(n, m, allowed):
    """Every partial one-to-one matching as a list of (i, j) pairs."""
    def rec(i, used):
        if i == n:
            yield []
            return
        yield from rec(i + 1, used)
        for j in range(m):
            if j not in used and allowed(i, j):
                for rest in rec(i + 1, used | {j}):
                    yield [(i, j)] + rest
    yield from rec(0, frozenset())


def ref_hota(seq, alphas=DEFAULT_ALPHAS):
    hs, ds, as_, ls = [], [], [], []
    for alpha in alphas:
        tps = []  # (gt_id, pred_id, iou)
        n_gt = n_pr = 0
        for f in seq:
            n_gt += len(f.gt_ids)
            n_pr += len(f.pred_ids)
            sim = [[ref_iou(g, p) for p in f.pred_boxes] for g in f.gt_boxes]
            best, best_key = [], (-1, -1.0)
            for mt in all_matchings(len(f.gt_ids), len(f.pred_ids), lambda i, j: sim[i][j] >= alpha - 1e-15):
                key = (len(mt), sum(sim[i][j] for i, j in mt))
                if key > best_key:
                    best, best_key = mt, key
            tps += [(f.gt_ids[i], f.pred_ids[j], sim[i][j]) for i, j in best]
        tp = len(tps)
        det = tp / max(1, n_gt + n_pr - tp)
        ass = 0.0
        if tp:
            gt_occ = {g: sum(g in f.gt_ids for f in seq) for g in {x for f in seq for x in f.gt_ids}}
            pr_occ = {p: sum(p in f.pred_ids for f in seq) for p in {x for f in seq for x in f.pred_ids}}
            for g, p, _ in tps:
                tpa = sum(1 for gg, pp, _ in tps if gg == g and pp == p)
                fna = gt_occ[g] - tpa
                fpa = pr_occ[p] - tpa
                ass += tpa / (tpa + fna + fpa)
            ass /= tp
        loc = sum(s for _, _, s in tps) / tp if tp else 1.0
        hs.append(math.sqrt(det * ass))
        ds.append(det)
        as_.append(ass)
        ls.append(loc)
    return 100 * np.mean(hs), 100 * np.mean(ds), 100 * np.mean(as_), 100 * np.mean(ls)


def ref_clearmot(seq, thr=0.5):
    n_gt = sum(len(f.gt_ids) for f in seq)
    fn = fp = idsw = 0
    prev, last = {}, {}
    for f in seq:
        sim = [[ref_iou(g, p) for p in f.pred_boxes] for g in f.gt_boxes]
        best, best_key = [], None
        for mt in all_matchings(len(f.gt_ids), len(f.pred_ids), lambda i, j: sim[i][j] >= thr - 1e-15):
            cont = sum(prev.get(f.gt_ids[i]) == f.pred_ids[j] for i, j in mt)
            key = (cont, len(mt), sum(sim[i][j] for i, j in mt))
            if best_key is None or key > best_key:
                best, best_key = mt, key
        now = {f.gt_ids[i]: f.pred_ids[j] for i, j in best}
        for g, p in now.items():
            if g in last and last[g] != p:
                idsw += 1
            last[g] = p
        fn += len(f.gt_ids) - len(now)
        fp += len(f.pred_ids) - len(now)
        prev = now
    return 100 * (1 - (fn + fp + idsw) / n_gt), idsw


def ref_ap(det_boxes, det_scores, gt_boxes, thr):
    """COCO definition written out with plain loops."""
    dets = sorted(((s, i, k) for i, ss in enumerate(det_scores) for k, s in enumerate(ss)), key=lambda t: -t[0])
    n_gt = sum(len(g) for g in gt_boxes)
    used = [set() for _ in gt_boxes]
    tp_flags = []
    for s, i, k in dets:
        best_j, best_iou = None, thr - 1e-15
        for j, g in enumerate(gt_boxes[i]):
            if j in used[i]:
                continue
            v = ref_iou(det_boxes[i][k], g)
            if v >= best_iou and (best_j is None or v > best_iou):
                best_j, best_iou = j, v
        if best_j is not None:
            used[i].add(best_j)
        tp_flags.append(best_j is not None)
    prec, rec = [], []
    tp = 0
    for n, flag in enumerate(tp_flags, 1):
        tp += flag
        prec.append(tp / n)
        rec.append(tp / n_gt)
    total = 0.0
    for r in np.linspace(0, 1, 101):
        cands = [p for p, rr in zip(prec, rec) if rr >= r]
        total += max(cands) if cands else 0.0
    return total / 101


def random_sequence(rng, n_frames=None, n_ids=4):
    """Tiny sequence with boxes jittered around per-id anchors so IoUs straddle thresholds."""
    n_frames = n_frames or int(rng.integers(1, 5))
    anchors = {i: rng.uniform(0, 20, 2) for i in range(n_ids)}
    seq = []
    for _ in range(n_frames):
        gt_ids = [i for i in range(n_ids) if rng.random() < 0.7]
        gt_boxes = []
        for i in gt_ids:
            x, y = anchors[i] + rng.normal(0, 1, 2)
            gt_boxes.append([x, y, x + 5 + rng.random(), y + 5 + rng.random()])
        pred_ids = [10 + i for i in range(n_ids) if rng.random() < 0.7]
        rng.shuffle(pred_ids)
        pred_boxes = []
        for p in pred_ids:
            # prediction ids loosely follow gt ids, with occasional swaps
            src = (p - 10) if rng.random() < 0.8 else int(rng.integers(n_ids))
            x, y = anchors[src] + rng.normal(0, 1.2, 2)
            pred_boxes.append([x, y, x + 5 + rng.random(), y + 5 + rng.random()])
        seq.append(FrameAnnotations(gt_ids, gt_boxes, pred_ids, pred_boxes, list(rng.random(len(pred_ids)))))
    return seq


# ---------------------------------------------------------------------------


def test_iou_values():
    assert iou2d([0, 0, 2, 2], [1, 1, 3, 3]) == pytest.approx(1 / 7)
    assert iou2d([0, 0, 1, 1], [2, 2, 3, 3]) == 0.0
    assert iou2d([0, 0, 1, 1], [0, 0, 1, 1]) == 1.0


def test_hota_matches_reference_on_random_sequences():
    rng = np.random.default_rng(0)
    for _ in range(200):
        seq = random_sequence(rng)
        got = hota_family(seq)
        exp = ref_hota(seq)
        assert (got.HOTA, got.DetA, got.AssA, got.LocA) == pytest.approx(exp, abs=1e-9)


def test_clearmot_matches_reference_on_random_sequences():
    rng = np.random.default_rng(1)
    checked = 0
    for _ in range(200):
        seq = random_sequence(rng)
        if not any(f.gt_ids for f in seq):
            continue
        mota, idsw = clearmot(seq)
        rmota, ridsw = ref_clearmot(seq)
        assert idsw == ridsw
        assert mota == pytest.approx(rmota, abs=1e-9)
        checked += 1
    assert checked > 150


def test_perfect_tracking():
    rng = np.random.default_rng(2)
    seq = []
    for _ in range(5):
        boxes = [list(rng.uniform(0, 10, 2)) for _ in range(3)]
        boxes = [[x, y, x + 3, y + 3] for x, y in boxes]
        seq.append(FrameAnnotations([0, 1, 2], boxes, [7, 8, 9], boxes))
    r = evaluate_sequence(seq)
    assert r.HOTA == pytest.approx(100) and r.DetA == pytest.approx(100) and r.AssA == pytest.approx(100)
    assert r.LocA == pytest.approx(100) and r.MOTA == pytest.approx(100) and r.IDSW == 0


def test_hand_computed_id_switch():
    # one object, two frames, prediction id changes: DetA 1, AssA 1/2, one ID switch
    b = [0, 0, 10, 10]
    seq = [FrameAnnotations([1], [b], [5], [b]), FrameAnnotations([1], [b], [6], [b])]
    h = hota_family(seq)
    assert h.DetA == pytest.approx(100) and h.AssA == pytest.approx(50)
    assert h.HOTA == pytest.approx(100 * math.sqrt(0.5))
    assert clearmot(seq) == (pytest.approx(50.0), 1)


def test_idsw_counts_against_last_match_across_gaps():
    b = [0, 0, 10, 10]
    seq = [FrameAnnotations([1], [b], [5], [b]), FrameAnnotations([1], [b], [], []), FrameAnnotations([1], [b], [5], [b])]
    assert clearmot(seq)[1] == 0
    seq[2] = FrameAnnotations([1], [b], [6], [b])
    assert clearmot(seq)[1] == 1


def test_locA_empty_and_hota_zero():
    assert hota_family([]).LocA == 100.0
    seq = [FrameAnnotations([1], [[0, 0, 1, 1]], [], [])]
    h = hota_family(seq)
    assert h.HOTA == 0.0 and h.DetA == 0.0


def test_clearmot_rejects_empty_gt():
    with pytest.raises(InvalidConfigError):
        clearmot([FrameAnnotations([], [], [1], [[0, 0, 1, 1]])])


def test_duplicate_ids_rejected():
    with pytest.raises(InvalidConfigError):
        FrameAnnotations([1, 1], [[0, 0, 1, 1], [0, 0, 1, 1]], [], [])


def test_invalid_alpha_grid():
    with pytest.raises(InvalidConfigError):
        hota_family([], alpha_grid=[0.0, 0.5])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31))
def test_invariants(seed):
    seq = random_sequence(np.random.default_rng(seed))
    h = hota_family(seq)
    for v in (h.HOTA, h.DetA, h.AssA, h.LocA):
        assert 0.0 <= v <= 100.0 + 1e-9
    for H, Dv, Av in zip(h.HOTA_alpha, h.DetA_alpha, h.AssA_alpha):
        assert H == pytest.approx(math.sqrt(Dv * Av), abs=1e-9)
    assert h.HOTA <= math.sqrt(h.DetA * h.AssA) + 1e-9  # mean of sqrt <= sqrt of means (by Cauchy-Schwarz)
    # relabelling prediction ids does not change anything
    remap = {p: 1000 - p for f in seq for p in f.pred_ids}
    seq2 = [FrameAnnotations(f.gt_ids, f.gt_boxes, [remap[p] for p in f.pred_ids], f.pred_boxes) for f in seq]
    assert hota_family(seq2).HOTA == pytest.approx(h.HOTA, abs=1e-9)
    if any(f.gt_ids for f in seq):
        mota, idsw = clearmot(seq)
        assert mota <= 100.0 and idsw >= 0


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_hota_monotone_in_alpha(seed):
    h = hota_family(random_sequence(np.random.default_rng(seed)))
    assert all(a >= b - 1e-9 for a, b in zip(h.DetA_alpha, h.DetA_alpha[1:]))


class TestAP:
    def test_perfect(self):
        g = [[[0, 0, 1, 1], [2, 2, 3, 3]]]
        assert average_precision(g, [[0.9, 0.8]], g, 0.5) == pytest.approx(1.0)

    def test_hand_computed(self):
        # ranks: TP, FP, TP over 2 gt -> precision 1 up to recall .5, 2/3 up to recall 1
        gt = [[[0, 0, 1, 1], [2, 2, 3, 3]]]
        dets = [[[0, 0, 1, 1], [5, 5, 6, 6], [2, 2, 3, 3]]]
        ap = average_precision(dets, [[0.9, 0.8, 0.7]], gt, 0.5)
        assert ap == pytest.approx((51 * 1.0 + 50 * (2 / 3)) / 101)

    def test_duplicates_are_false_positives(self):
        gt = [[[0, 0, 1, 1]]]
        ap = average_precision([[[0, 0, 1, 1], [0, 0, 1, 1]]], [[0.9, 0.8]], gt, 0.5)
        assert ap == pytest.approx(1.0)
        ap = average_precision([[[0, 0, 1, 1], [0, 0, 1, 1]]], [[0.8, 0.9]], gt, 0.5)
        assert ap == pytest.approx(1.0)
        ap2 = average_precision([[[5, 5, 6, 6], [0, 0, 1, 1]]], [[0.9, 0.8]], gt, 0.5)
        assert ap2 == pytest.approx(0.5)

    def test_matches_reference(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            seq = random_sequence(rng)
            gt = [f.gt_boxes for f in seq]
            if not any(gt):
                continue
            db = [f.pred_boxes for f in seq]
            ds = [f.pred_scores for f in seq]
            for thr in (0.5, 0.75):
                assert average_precision(db, ds, gt, thr) == pytest.approx(ref_ap(db, ds, gt, thr), abs=1e-12)

    def test_map_is_mean_over_thresholds(self):
        seq = random_sequence(np.random.default_rng(4), n_frames=4)
        db, ds, gt = [f.pred_boxes for f in seq], [f.pred_scores for f in seq], [f.gt_boxes for f in seq]
        exp = np.mean([ref_ap(db, ds, gt, t) for t in np.arange(0.5, 0.951, 0.05)])
        assert mean_average_precision(db, ds, gt) == pytest.approx(exp, abs=1e-12)

    def test_no_gt(self):
        with pytest.raises(InvalidConfigError):
            average_precision([[]], [[]], [[]], 0.5)


def test_report_serialization():
    seq = random_sequence(np.random.default_rng(5), n_frames=4)
    r = evaluate_sequence(seq)
    back = MetricsReport.from_dict(json.loads(r.to_json()))
    assert back.HOTA == r.HOTA and back.IDSW == r.IDSW
    assert len(r.csv_row().split(",")) == 10


def test_metric_runtime_100_frames_20_objects():
    import time

    rng = np.random.default_rng(6)
    seq = []
    for _ in range(100):
        xy = rng.uniform(0, 400, (20, 2))
        gb = np.concatenate([xy, xy + 30], 1)
        pb = gb + rng.normal(0, 2, gb.shape)
        seq.append(FrameAnnotations(list(range(20)), gb.tolist(), list(range(20)), pb.tolist(), [0.9] * 20))
    evaluate_sequence(seq)
    t0 = time.perf_counter()
    evaluate_sequence(seq)
    assert time.perf_counter() - t0 < 0.5
