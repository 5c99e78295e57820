"""Set-prediction matching math: GIoU, per-pair detection cost, minimum-cost
assignment and the uncertainty-weighted multi-task loss.

The assignment solver is a shortest-augmenting-path Hungarian method (O(n^3))
compiled with numba. Among all optimal assignments it returns the
lexicographically smallest one, found by walking alternating cycles in the
graph of zero-reduced-cost edges left by the optimal dual.
"""

from __future__ import annotations

import math
from typing import NamedTuple, Sequence

import numba as nb
import numpy as np

from .errors import InvalidConfigError

CE_FLOOR = 1e-12
DEFAULT_LAMBDAS = (1.0, 5.0, 2.0)  # (ce, l1, giou)


class Box2D(NamedTuple):
    x_min: float
    y_min: float
    x_max: float
    y_max: float


def _check_box(b) -> tuple[float, float, float, float]:
    x0, y0, x1, y1 = (float(v) for v in b)
    if x0 > x1 or y0 > y1:
        raise InvalidConfigError(f"invalid box {b!r}: min exceeds max")
    return x0, y0, x1, y1


def giou(a: Sequence[float], b: Sequence[float]) -> float:
    """Generalized IoU of two axis-aligned boxes, in [-1, 1]."""
    ax0, ay0, ax1, ay1 = _check_box(a)
    bx0, by0, bx1, by1 = _check_box(b)
    if (ax0, ay0, ax1, ay1) == (bx0, by0, bx1, by1):
        return 1.0
    area_a = (ax1 - ax0) * (ay1 - ay0)
    area_b = (bx1 - bx0) * (by1 - by0)
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = area_a + area_b - inter
    iou = inter / union if union > 0 else 0.0
    hull = (max(ax1, bx1) - min(ax0, bx0)) * (max(ay1, by1) - min(ay0, by0))
    if hull <= 0:
        return iou
    return iou - (hull - union) / hull


def cross_entropy(probs: Sequence[float], label: int) -> float:
    return -math.log(max(float(probs[label]), CE_FLOOR))


def pairwise_detection_cost(
    pred_probs: Sequence[float],
    pred_box: Sequence[float],
    gt_label: int,
    gt_box: Sequence[float],
    lambda_ce: float = DEFAULT_LAMBDAS[0],
    lambda_l1: float = DEFAULT_LAMBDAS[1],
    lambda_giou: float = DEFAULT_LAMBDAS[2],
) -> float:
    probs = np.asarray(pred_probs, dtype=np.float64)
    if abs(probs.sum() - 1.0) > 1e-6:
        raise InvalidConfigError(f"class probabilities sum to {probs.sum()!r}, expected 1")
    l1 = float(np.abs(np.asarray(pred_box, float) - np.asarray(gt_box, float)).sum())
    return (
        lambda_ce * cross_entropy(probs, gt_label)
        + lambda_l1 * l1
        + lambda_giou * (1.0 - giou(pred_box, gt_box))
    )


def detection_cost_matrix(pred_probs, pred_boxes, gt_labels, gt_boxes, lambdas=DEFAULT_LAMBDAS) -> np.ndarray:
    """Cost matrix (predictions x ground truths) built from pairwise_detection_cost."""
    costs = np.empty((len(pred_boxes), len(gt_boxes)))
    for i, (p, pb) in enumerate(zip(pred_probs, pred_boxes)):
        for j, (lab, gb) in enumerate(zip(gt_labels, gt_boxes)):
            costs[i, j] = pairwise_detection_cost(p, pb, lab, gb, *lambdas)
    return costs


# ---------------------------------------------------------------------------
# Assignment
# ---------------------------------------------------------------------------


@nb.njit(cache=True)
def _sap_square(a):
    """Shortest augmenting path on a square matrix; returns (row->col, u, v)."""
    n = a.shape[0]
    inf = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)  # p[j]: row (1-based) owning column j
    way = np.zeros(n + 1, dtype=np.int64)
    minv = np.empty(n + 1)
    used = np.empty(n + 1, dtype=np.bool_)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv[:] = inf
        used[:] = False
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = inf
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = a[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    row_to_col = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        row_to_col[p[j] - 1] = j - 1
    return row_to_col, u[1:], v[1:]


@nb.njit(cache=True)
def _lex_smallest(a, row_to_col, u, v, tol):
    """Rewire an optimal matching into the lexicographically smallest optimum.

    Only edges with zero reduced cost (within tol) may appear in an optimal
    assignment, so every optimum is a perfect matching of that tight graph.
    """
    n = a.shape[0]
    tight = np.empty((n, n), dtype=np.bool_)
    n_tight = 0
    for i in range(n):
        for j in range(n):
            tight[i, j] = a[i, j] - u[i] - v[j] <= tol
            if tight[i, j]:
                n_tight += 1
    if n_tight == n:
        return row_to_col
    owner = np.empty(n, dtype=np.int64)
    for i in range(n):
        owner[row_to_col[i]] = i
    parent = np.empty(n, dtype=np.int64)
    seen = np.empty(n, dtype=np.bool_)
    queue = np.empty(n, dtype=np.int64)
    for i in range(n):
        target = row_to_col[i]
        for c in range(target):
            if not tight[i, c]:
                continue
            r = owner[c]
            if r < i:
                continue
            # alternating path r -> ... -> target through unfixed rows
            seen[:] = False
            seen[c] = True
            head = 0
            tail = 1
            queue[0] = r
            found = False
            while head < tail and not found:
                x = queue[head]
                head += 1
                for j in range(n):
                    if seen[j] or not tight[x, j]:
                        continue
                    if j != target and owner[j] <= i:
                        continue
                    seen[j] = True
                    parent[j] = x
                    if j == target:
                        found = True
                        break
                    queue[tail] = owner[j]
                    tail += 1
            if not found:
                continue
            j = target
            while True:
                x = parent[j]
                prev = row_to_col[x]
                row_to_col[x] = j
                owner[j] = x
                if x == r:
                    break
                j = prev
            row_to_col[i] = c
            owner[c] = i
            break
    return row_to_col


def _solve(costs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Array form of hungarian_min_cost: (rows, cols) index arrays."""
    costs = np.asarray(costs, dtype=np.float64)
    if costs.ndim != 2:
        raise InvalidConfigError("cost matrix must be 2-D")
    n_rows, n_cols = costs.shape
    if n_rows == 0 or n_cols == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty
    if not np.all(np.isfinite(costs)):
        raise InvalidConfigError("cost matrix contains non-finite entries")
    return _solve_nb(np.ascontiguousarray(costs))


@nb.njit(cache=True)
def _solve_nb(costs):
    """Unchecked solver core for finite, non-empty 2-D cost matrices."""
    n_rows, n_cols = costs.shape
    n = max(n_rows, n_cols)
    if n_rows != n_cols:
        # constant padding leaves the set of optimal real assignments unchanged
        square = np.full((n, n), costs.max())
        square[:n_rows, :n_cols] = costs
    else:
        square = costs.copy()
    row_to_col, u, v = _sap_square(square)
    scale = max(1.0, np.abs(square).max())
    row_to_col = _lex_smallest(square, row_to_col, u, v, 1e-10 * scale)
    cols = row_to_col[:n_rows]
    keep = cols < n_cols
    return np.arange(n_rows)[keep], cols[keep]


def hungarian_min_cost(costs) -> list[tuple[int, int]]:
    """Minimum-cost one-to-one assignment of rows to columns.

    Rectangular matrices yield min(rows, cols) pairs. Ties between optimal
    assignments resolve to the lexicographically smallest column sequence.
    """
    rows, cols = _solve(costs)
    return [(int(r), int(c)) for r, c in zip(rows, cols)]


def assignment_cost(costs, pairs) -> float:
    costs = np.asarray(costs, dtype=np.float64)
    return float(sum(costs[r, c] for r, c in pairs))


def match_predictions(pred_probs, pred_boxes, gt_labels, gt_boxes, lambdas=DEFAULT_LAMBDAS):
    """Bipartite prediction-to-ground-truth matching used at training time."""
    return hungarian_min_cost(detection_cost_matrix(pred_probs, pred_boxes, gt_labels, gt_boxes, lambdas))


# ---------------------------------------------------------------------------
# Multi-task loss
# ---------------------------------------------------------------------------


class LossTerms(NamedTuple):
    L_det: float
    L_id: float
    w1: float
    w2: float


def total_loss(terms: LossTerms, uncertainty_form: bool = False) -> float:
    """Task-balanced total loss.

    Default: 0.5 * (exp(w1) L_det + exp(w2) L_id + w1 + w2).
    uncertainty_form: exponents negated, which gives a finite minimiser
    w_i = ln L_i instead of a loss unbounded below.
    """
    L_det, L_id, w1, w2 = terms
    if L_det < 0 or L_id < 0:
        raise InvalidConfigError("loss terms must be nonnegative")
    s = -1.0 if uncertainty_form else 1.0
    return 0.5 * (math.exp(s * w1) * L_det + math.exp(s * w2) * L_id + w1 + w2)


def total_loss_grad(terms: LossTerms, uncertainty_form: bool = False) -> tuple[float, float]:
    """Analytic (dL/dw1, dL/dw2)."""
    L_det, L_id, w1, w2 = terms
    s = -1.0 if uncertainty_form else 1.0
    return (0.5 * (s * math.exp(s * w1) * L_det + 1.0), 0.5 * (s * math.exp(s * w2) * L_id + 1.0))
