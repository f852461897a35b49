"""Lane post-processing and the two lane-detection evaluation protocols.

Point protocol: per-row x positions are compared against ground truth within
a pixel threshold; accuracy is correct points over ground-truth points, pooled
over the test set.

IoU protocol: predicted and ground-truth lanes are stroked as wide lines,
matched one-to-one, and a pair counts as a true positive above an IoU
threshold. Precision, recall and F1 follow.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.interpolate import CubicSpline

from .lanedata import LanePolyline, stroke

MAX_EXACT_LANES = 6


@dataclass
class PredictedLane:
    slot: int
    points: np.ndarray  # (P, 2) x, y at sampled rows, y strictly increasing
    existence: float

    def curve(self) -> np.ndarray:
        """Dense (x, y) curve through the sampled points, one point per row."""
        if len(self.points) < 2:
            return self.points.copy()
        return fit_spline(self.points)

    def to_json(self) -> dict:
        return {"slot": int(self.slot), "points": [[float(x), float(y)] for x, y in self.points],
                "existence": float(self.existence)}


@dataclass
class LanePrediction:
    lanes: list[PredictedLane]
    rows: np.ndarray

    def to_json(self) -> dict:
        return {"rows": [int(r) for r in self.rows], "lanes": [ln.to_json() for ln in self.lanes]}

    @classmethod
    def from_json(cls, doc: dict) -> "LanePrediction":
        lanes = [PredictedLane(int(r["slot"]), np.asarray(r["points"], dtype=np.float64).reshape(-1, 2),
                               float(r.get("existence", 1.0))) for r in doc["lanes"]]
        return cls(lanes, np.asarray(doc["rows"], dtype=np.int64))


def sample_rows(height: int, row_stride: int) -> np.ndarray:
    """Rows sampled every ``row_stride`` pixels, anchored at the bottom row."""
    if row_stride < 1:
        raise ValueError("row stride must be >= 1")
    return np.arange(height - 1, -1, -row_stride)[::-1]


def extract_lanes(prob_maps: np.ndarray, existence: Sequence[float], row_stride: int = 20,
                  exist_threshold: float = 0.5, floor: float = 0.3) -> LanePrediction:
    """Row-wise argmax lane positions from per-class probability maps.

    ``prob_maps`` is (K, H, W) with class 0 as background, so lane slot ``k``
    reads map ``k + 1``. Only slots whose existence exceeds ``exist_threshold``
    are searched; rows whose peak response is below ``floor`` give no point.
    """
    prob_maps = np.asarray(prob_maps)
    k, h, w = prob_maps.shape
    if h < row_stride:
        raise ValueError(f"probability maps have {h} rows, fewer than the stride {row_stride}")
    rows = sample_rows(h, row_stride)
    lanes = []
    for slot, e in enumerate(existence):
        if not e > exist_threshold or slot + 1 >= k:
            continue
        band = prob_maps[slot + 1, rows]
        xs = band.argmax(axis=1)
        keep = band[np.arange(len(rows)), xs] >= floor
        if not keep.any():
            continue
        pts = np.stack([xs[keep], rows[keep]], axis=1).astype(np.float64)
        lanes.append(PredictedLane(slot, pts, float(e)))
    return LanePrediction(lanes, rows)


def fit_spline(points: np.ndarray) -> np.ndarray:
    """Interpolate x as a function of y through ``points`` at every integer row.

    Four or more knots use a natural cubic spline; two or three knots use the
    interpolating line or parabola.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(pts) < 2:
        raise ValueError("need at least 2 points to fit a curve")
    order = np.argsort(pts[:, 1], kind="stable")
    pts = pts[order]
    ys, xs = pts[:, 1], pts[:, 0]
    if (np.diff(ys) == 0).any():
        raise ValueError("duplicate y values cannot be interpolated as x(y)")
    grid = np.arange(math.ceil(ys[0]), math.floor(ys[-1]) + 1, dtype=np.float64)
    grid = np.union1d(grid, ys)
    if len(pts) >= 4:
        dense = CubicSpline(ys, xs, bc_type="natural")(grid)
    else:
        dense = np.polyval(np.polyfit(ys, xs, len(pts) - 1), grid)
    # knots are returned verbatim
    dense[np.searchsorted(grid, ys)] = xs
    return np.stack([dense, grid], axis=1)


def gt_row_points(lane: LanePolyline, rows: np.ndarray, width: int) -> np.ndarray:
    """Ground-truth x at each sampled row (NaN where absent or off-frame)."""
    x = lane.x_at(rows.astype(np.float64))
    return np.where((x >= 0) & (x <= width - 1), x, np.nan)


def pred_row_points(lane: PredictedLane, rows: np.ndarray) -> np.ndarray:
    out = np.full(len(rows), np.nan)
    pos = {int(y): x for x, y in lane.points}
    for i, r in enumerate(rows):
        if int(r) in pos:
            out[i] = pos[int(r)]
    return out


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    accuracy: float | None = None
    fp_rate: float | None = None
    fn_rate: float | None = None
    n_correct: int = 0
    n_gt_points: int = 0
    precision: float | None = None
    recall: float | None = None
    f1: float | None = None
    tp: int = 0
    fp: int = 0
    fn: int = 0
    settings: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def combine(self, other: "MetricReport") -> "MetricReport":
        """Point-protocol fields from ``self``, IoU-protocol fields from ``other``."""
        out = MetricReport(**asdict(self))
        for k in ("precision", "recall", "f1", "tp", "fp", "fn"):
            setattr(out, k, getattr(other, k))
        out.settings = {**self.settings, **other.settings}
        out.extra = {**self.extra, **other.extra}
        return out

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        lines = []
        if self.accuracy is not None:
            lines.append(f"accuracy  {self.accuracy:.4f}  ({self.n_correct}/{self.n_gt_points} points)")
            lines.append(f"FP        {self.fp_rate:.4f}")
            lines.append(f"FN        {self.fn_rate:.4f}")
        if self.f1 is not None:
            lines.append(f"precision {self.precision:.4f}")
            lines.append(f"recall    {self.recall:.4f}")
            lines.append(f"F1        {self.f1:.4f}  (TP {self.tp}, FP {self.fp}, FN {self.fn})")
        for k, v in sorted(self.extra.items()):
            lines.append(f"{k:<9} {v:.4f}" if isinstance(v, float) else f"{k:<9} {v}")
        for k, v in sorted(self.settings.items()):
            lines.append(f"# {k} = {v}")
        return "\n".join(lines) + "\n"


def f_measure(precision: float, recall: float, beta: float = 1.0) -> float:
    den = beta * beta * precision + recall
    return 0.0 if den == 0 else (1 + beta * beta) * precision * recall / den


def _best_assignment(score: np.ndarray, good: np.ndarray) -> list[tuple[int, int]]:
    """One-to-one pairs maximising (total score, number of good pairs).

    Exhaustive over all injections of the smaller side into the larger.
    """
    n_p, n_g = score.shape
    if n_p == 0 or n_g == 0:
        return []
    best, best_key = [], None
    if n_p <= n_g:
        for perm in itertools.permutations(range(n_g), n_p):
            pairs = list(zip(range(n_p), perm))
            key = (sum(score[i, j] for i, j in pairs), sum(bool(good[i, j]) for i, j in pairs))
            if best_key is None or key > best_key:
                best, best_key = pairs, key
    else:
        for perm in itertools.permutations(range(n_p), n_g):
            pairs = list(zip(perm, range(n_g)))
            key = (sum(score[i, j] for i, j in pairs), sum(bool(good[i, j]) for i, j in pairs))
            if best_key is None or key > best_key:
                best, best_key = sorted(pairs), key
    return best


def _greedy_assignment(score: np.ndarray, good: np.ndarray) -> list[tuple[int, int]]:
    pairs, used_p, used_g = [], set(), set()
    order = sorted(((score[i, j], i, j) for i in range(score.shape[0]) for j in range(score.shape[1])),
                   key=lambda t: (-t[0], t[1], t[2]))
    for s, i, j in order:
        if i in used_p or j in used_g:
            continue
        pairs.append((i, j))
        used_p.add(i)
        used_g.add(j)
    return sorted(pairs)


def _check_lane_count(n: int) -> None:
    if n > MAX_EXACT_LANES:
        raise ValueError(f"{n} lanes in one image exceeds the exact-matching limit of {MAX_EXACT_LANES}")


def tusimple_metrics(preds: Sequence[Sequence[np.ndarray]], gts: Sequence[Sequence[np.ndarray]],
                     point_threshold_px: float = 20.0, lane_match_fraction: float = 0.85) -> MetricReport:
    """Point-protocol accuracy, FP and FN rates.

    ``preds[i]`` and ``gts[i]`` list the lanes of image ``i``, each as an array
    of x positions over the shared sampled rows (NaN = no point). Predictions
    are matched one-to-one to ground truth so as to maximise correct points.
    """
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predicted images vs {len(gts)} ground-truth images")
    n_correct = n_gt = fp = fn = n_pred_lanes = n_gt_lanes = 0
    for p_lanes, g_lanes in zip(preds, gts):
        p_lanes = [np.asarray(a, dtype=np.float64) for a in p_lanes]
        g_lanes = [np.asarray(a, dtype=np.float64) for a in g_lanes]
        _check_lane_count(max(len(p_lanes), len(g_lanes)))
        gt_counts = np.array([int(np.isfinite(g).sum()) for g in g_lanes])
        correct = np.zeros((len(p_lanes), len(g_lanes)), dtype=np.int64)
        for i, p in enumerate(p_lanes):
            for j, g in enumerate(g_lanes):
                if p.shape != g.shape:
                    raise ValueError("predicted and ground-truth lanes must share the sampled rows")
                both = np.isfinite(p) & np.isfinite(g)
                correct[i, j] = int((np.abs(p[both] - g[both]) < point_threshold_px).sum())
        frac = correct / np.maximum(gt_counts, 1)[None, :]
        good = (frac >= lane_match_fraction) & (gt_counts[None, :] > 0)
        pairs = _best_assignment(correct.astype(np.float64), good)
        matched_p = {i for i, j in pairs if good[i, j]}
        matched_g = {j for i, j in pairs if good[i, j]}
        n_correct += sum(int(correct[i, j]) for i, j in pairs)
        n_gt += int(gt_counts.sum())
        fp += len(p_lanes) - len(matched_p)
        fn += len(g_lanes) - len(matched_g)
        n_pred_lanes += len(p_lanes)
        n_gt_lanes += len(g_lanes)
    if n_gt_lanes == 0 or n_gt == 0:
        raise ValueError("ground truth contains no lane points; accuracy is undefined")
    return MetricReport(
        accuracy=n_correct / n_gt,
        fp_rate=fp / n_pred_lanes if n_pred_lanes else 0.0,
        fn_rate=fn / n_gt_lanes,
        n_correct=n_correct,
        n_gt_points=n_gt,
        settings={"point_threshold_px": point_threshold_px, "lane_match_fraction": lane_match_fraction},
    )


def lane_iou_matrix(preds: Sequence[np.ndarray], gts: Sequence[np.ndarray], dims: tuple[int, int],
                    line_width_px: int) -> np.ndarray:
    pm = [stroke(p, line_width_px, dims) for p in preds]
    gm = [stroke(g, line_width_px, dims) for g in gts]
    iou = np.zeros((len(pm), len(gm)))
    for i, a in enumerate(pm):
        for j, b in enumerate(gm):
            union = int((a | b).sum())
            iou[i, j] = (a & b).sum() / union if union else 0.0
    return iou


def culane_f1(preds: Sequence[Sequence[np.ndarray]], gts: Sequence[Sequence[np.ndarray]], dims: tuple[int, int],
              line_width_px: int, iou_threshold: float = 0.5, matching: str = "exact") -> MetricReport:
    """IoU-protocol precision, recall and F1.

    Each lane is an (P, 2) array of (x, y) points; lanes are stroked with
    ``line_width_px`` on a ``dims`` raster before computing IoU.
    """
    if line_width_px < 1:
        raise ValueError("line width must be >= 1")
    if matching not in ("exact", "greedy"):
        raise ValueError(f"unknown matching {matching!r}")
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predicted images vs {len(gts)} ground-truth images")
    tp = fp = fn = 0
    for p_lanes, g_lanes in zip(preds, gts):
        if matching == "exact":
            _check_lane_count(max(len(p_lanes), len(g_lanes)))
        iou = lane_iou_matrix(p_lanes, g_lanes, dims, line_width_px)
        good = iou > iou_threshold
        pairs = (_best_assignment if matching == "exact" else _greedy_assignment)(iou, good)
        hits = sum(bool(good[i, j]) for i, j in pairs)
        tp += hits
        fp += len(p_lanes) - hits
        fn += len(g_lanes) - hits
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    return MetricReport(
        precision=precision, recall=recall, f1=f_measure(precision, recall),
        tp=tp, fp=fp, fn=fn,
        settings={"line_width_px": line_width_px, "iou_threshold": iou_threshold, "matching": matching},
    )


def scaled_line_width(width: int) -> int:
    """The 30 px line width of 1640 px frames, rescaled, at least 2."""
    return max(2, round(30 * width / 1640))


def foreground_iou(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    a, b = np.asarray(pred_mask) > 0, np.asarray(gt_mask) > 0
    union = int((a | b).sum())
    return 1.0 if union == 0 else float((a & b).sum() / union)
