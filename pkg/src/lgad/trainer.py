"""Training loops: label-to-label teacher, distilled student, collaborative
teacher/student, and the mutual-learning pair. Plain SGD with a poly schedule."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from .attention import attention_mean
from .distill import (
    DistillPlan,
    build_aux_heads,
    dml_loss,
    ds_loss,
    fmd_loss,
    lat_loss,
    per_tap_distance,
    total_loss,
)
from .lanedata import LanePolyline, LaneScene, rasterize_lanes
from .laneval import (
    MetricReport,
    culane_f1,
    extract_lanes,
    foreground_iou,
    gt_row_points,
    pred_row_points,
    scaled_line_width,
    tusimple_metrics,
)
from .netlib import Network, NetworkConfig, build_network, forward, label_to_image
from .numcore import NonFiniteError, Tensor, add, no_grad, scale, sigmoid_bce, softmax, softmax_cross_entropy

log = logging.getLogger(__name__)

SEQUENTIAL, COLLABORATIVE = "SEQUENTIAL", "COLLABORATIVE"


class TrainingDiverged(RuntimeError):
    pass


def poly_lr(it: int, max_iter: int, lr0: float, power: float = 0.9) -> float:
    """``lr0 * (1 - it / max_iter) ** power``."""
    if not 0 <= it <= max_iter:
        raise ValueError(f"iteration {it} outside [0, {max_iter}]")
    return lr0 * (1.0 - it / max_iter) ** power


def sgd_step(params: Sequence[Tensor], lr: float) -> None:
    """In-place ``p -= lr * p.grad`` for every parameter that has a gradient."""
    if lr < 0:
        raise ValueError("learning rate must be >= 0")
    for p in params:
        if p.grad is None:
            continue
        if not np.isfinite(p.grad).all():
            raise NonFiniteError("non-finite gradient")
    for p in params:
        if p.grad is not None and lr:
            p.data -= p.data.dtype.type(lr) * p.grad


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentConfig:
    crop_pad: float = 0.1
    hflip_prob: float = 0.5
    rotate_deg: float = 10.0

    @property
    def identity(self) -> bool:
        return self.crop_pad == 0 and self.hflip_prob == 0 and self.rotate_deg == 0


def _monotone(points: np.ndarray) -> np.ndarray:
    keep = [0]
    for i in range(1, len(points)):
        if points[i, 1] > points[keep[-1], 1]:
            keep.append(i)
    return points[keep]


def _in_frame(points: np.ndarray, h: int, w: int) -> bool:
    x, y = points[:, 0], points[:, 1]
    return bool(((x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)).any())


def transform_scene(scene: LaneScene, angle_deg: float = 0.0, shift: tuple[float, float] = (0.0, 0.0),
                    flip: bool = False, label_width: int = 3) -> LaneScene:
    """Apply one geometric transform to image, lanes and mask.

    Points map as: rotate by ``angle_deg`` about the image centre, translate
    by ``shift`` = (dx, dy), then mirror horizontally if ``flip``. Mirroring
    also mirrors slot order. The mask is re-stroked from the moved lanes.
    """
    c, h, w = scene.image.shape
    max_lanes = len(scene.existence)
    th = math.radians(angle_deg)
    cos, sin = math.cos(th), math.sin(th)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    dx, dy = shift

    def fwd(x, y):
        xr = cos * (x - cx) - sin * (y - cy) + cx + dx
        yr = sin * (x - cx) + cos * (y - cy) + cy + dy
        return xr, yr

    img = scene.image
    if angle_deg or dx or dy:
        # inverse map from output pixel to source pixel
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        xs, ys = xx - dx - cx, yy - dy - cy
        src_x = cos * xs + sin * ys + cx
        src_y = -sin * xs + cos * ys + cy
        img = np.stack([ndimage.map_coordinates(ch.astype(np.float64), [src_y, src_x], order=1, mode="constant", cval=0.0)
                        for ch in img]).astype(np.float32)
    if flip:
        img = img[:, :, ::-1]
    img = np.ascontiguousarray(img)

    lanes = []
    for lane in scene.lanes:
        pts = lane.points
        slot = lane.slot
        if angle_deg or dx or dy:
            xr, yr = fwd(pts[:, 0], pts[:, 1])
            pts = _monotone(np.round(np.stack([xr, yr], axis=1) * 1024.0) / 1024.0)
        if flip:
            pts = np.stack([(w - 1) - pts[:, 0], pts[:, 1]], axis=1)
            slot = max_lanes - 1 - slot
        if len(pts) >= 2 and _in_frame(pts, h, w):
            lanes.append(LanePolyline(pts, slot))
    lanes.sort(key=lambda ln: ln.slot)
    existence = np.zeros(max_lanes, dtype=bool)
    for lane in lanes:
        existence[lane.slot] = True
    if angle_deg or dx or dy or flip:
        mask = rasterize_lanes(lanes, label_width, (h, w))
    else:
        mask = scene.mask.copy()
    return LaneScene(img, mask, lanes, existence, scene.occluded)


def augment(scene: LaneScene, rng: np.random.Generator, cfg: AugmentConfig | None = None,
            label_width: int = 3) -> LaneScene:
    """Random crop (as a padded shift), horizontal flip and rotation."""
    cfg = cfg or AugmentConfig()
    if cfg.identity:
        return scene
    c, h, w = scene.image.shape
    for _ in range(10):
        angle = rng.uniform(-cfg.rotate_deg, cfg.rotate_deg) if cfg.rotate_deg else 0.0
        shift = (rng.uniform(-cfg.crop_pad, cfg.crop_pad) * w, rng.uniform(-cfg.crop_pad, cfg.crop_pad) * h) \
            if cfg.crop_pad else (0.0, 0.0)
        flip = bool(rng.random() < cfg.hflip_prob) if cfg.hflip_prob else False
        out = transform_scene(scene, angle, shift, flip, label_width)
        # a crop that pushes every lane out of frame is drawn again
        if out.lanes or not scene.lanes:
            return out
    return scene


# ---------------------------------------------------------------------------
# configuration and logs


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 8
    lr0: float = 0.025
    power: float = 0.9
    seed: int = 0
    strategy: str = SEQUENTIAL
    plan: DistillPlan = field(default_factory=DistillPlan)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    net: NetworkConfig = field(default_factory=NetworkConfig)
    exist_weight: float = 0.1
    label_width: int = 3
    teacher_lr0: float = 0.007
    log_every: int = 1

    def __post_init__(self):
        self.strategy = self.strategy.upper()
        if self.lr0 <= 0 or self.teacher_lr0 <= 0:
            raise ValueError("learning rates must be > 0")
        if self.power <= 0:
            raise ValueError("poly power must be > 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.strategy not in (SEQUENTIAL, COLLABORATIVE):
            raise ValueError(f"unknown strategy {self.strategy!r}")


@dataclass
class RunLog:
    records: list[dict] = field(default_factory=list)
    epochs: list[dict] = field(default_factory=list)

    def add(self, it: int, lr: float, l_seg: float, l_at: float, total: float) -> None:
        for name, v in (("l_seg", l_seg), ("l_at", l_at), ("total", total)):
            if not math.isfinite(v):
                raise TrainingDiverged(f"{name} became non-finite at iteration {it}")
        if self.records and it <= self.records[-1]["iter"]:
            raise ValueError("iterations must increase")
        self.records.append({"iter": it, "lr": lr, "l_seg": l_seg, "l_at": l_at, "total": total})

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["iter", "lr", "l_seg", "l_at", "total"])
        for r in self.records:
            wr.writerow([r["iter"], repr(r["lr"]), repr(r["l_seg"]), repr(r["l_at"]), repr(r["total"])])
        return buf.getvalue()

    def epoch_mean(self, key: str, epoch: int) -> float:
        return self.epochs[epoch][key]


@dataclass
class TrainResult:
    net: Network
    log: RunLog
    teacher: Network | None = None
    peer: Network | None = None
    aux: dict | None = None
    teacher_log: RunLog | None = None


# ---------------------------------------------------------------------------
# batching


def _order_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng([seed, 0x0BDE, epoch])


def _aug_rng(seed: int, epoch: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, 0xA06, epoch, index])


def iterate_batches(dataset: Sequence[LaneScene], cfg: TrainConfig, epoch: int):
    """Yield (images, masks, existence) for one epoch.

    Order and augmentation depend only on (seed, epoch, index).
    """
    order = _order_rng(cfg.seed, epoch).permutation(len(dataset))
    for start in range(0, len(order), cfg.batch_size):
        idx = order[start:start + cfg.batch_size]
        scenes = [augment(dataset[i], _aug_rng(cfg.seed, epoch, int(i)), cfg.augment, cfg.label_width) for i in idx]
        x = np.stack([s.image for s in scenes])
        y = np.stack([s.mask for s in scenes]).astype(np.int64)
        e = np.stack([s.existence for s in scenes]).astype(np.float64)
        yield x, y, e


def batches_per_epoch(n: int, batch_size: int) -> int:
    return -(-n // batch_size)


def seg_objective(net: Network, res, y: np.ndarray, e: np.ndarray, exist_weight: float) -> Tensor:
    """Cross-entropy plus the weighted existence-head term."""
    ce = softmax_cross_entropy(res.logits, y)
    if res.existence_logits is None or exist_weight == 0:
        return ce
    return add(ce, scale(sigmoid_bce(res.existence_logits, e), exist_weight))


def _check_dataset(dataset) -> None:
    if len(dataset) == 0:
        raise ValueError("training set is empty")


def _teacher_input(y: np.ndarray, ncfg: NetworkConfig) -> Tensor:
    return label_to_image(y, ncfg.in_channels, ncfg.num_classes)


def _epoch_summary(log: RunLog, epoch: int, first_rec: int, tap_dist: dict[str, list[float]]) -> None:
    recs = log.records[first_rec:]
    row = {"epoch": epoch}
    for k in ("l_seg", "l_at", "total"):
        row[k] = float(np.mean([r[k] for r in recs])) if recs else float("nan")
    for name, vals in tap_dist.items():
        row[f"dist.{name}"] = float(np.mean(vals))
    log.epochs.append(row)


# ---------------------------------------------------------------------------
# loops


def train_teacher(dataset: Sequence[LaneScene], cfg: TrainConfig,
                  on_epoch: Callable[[int, Network], None] | None = None) -> TrainResult:
    """Label-to-label training: the input is the rendered label, the target the label."""
    _check_dataset(dataset)
    # teachers start from seed + 1 so a student of the same seed is not a copy
    net = build_network(cfg.net, cfg.seed + 1)
    log = RunLog()
    max_iter = cfg.epochs * batches_per_epoch(len(dataset), cfg.batch_size)
    it = 0
    for epoch in range(cfg.epochs):
        first = len(log.records)
        for _, y, e in iterate_batches(dataset, cfg, epoch):
            lr = poly_lr(it, max_iter, cfg.teacher_lr0, cfg.power)
            net.zero_grad()
            res = forward(net, _teacher_input(y, cfg.net))
            seg = seg_objective(net, res, y, e, cfg.exist_weight)
            _finite_or_abort(seg, it)
            seg.backward()
            sgd_step(net.parameters(), lr)
            v = float(seg.data)
            log.add(it, lr, v, 0.0, v)
            it += 1
        _epoch_summary(log, epoch, first, {})
        if on_epoch:
            on_epoch(epoch, net)
    return TrainResult(net, log)


def _finite_or_abort(loss: Tensor, it: int) -> None:
    if not np.isfinite(loss.data).all():
        raise TrainingDiverged(f"loss became non-finite at iteration {it}")


def _check_structure(teacher: Network, cfg: NetworkConfig) -> None:
    if teacher.config != cfg:
        raise ValueError(f"teacher structure {teacher.config} differs from student config {cfg}")


def _tap_channels(cfg: NetworkConfig) -> dict[str, int]:
    return {f"stage{i + 1}": w for i, w in enumerate(cfg.stage_widths)}


def _student_step(student: Network, x: np.ndarray, y: np.ndarray, e: np.ndarray, cfg: TrainConfig,
                  teacher_taps, aux, tap_dist, peer_logits=None):
    plan = cfg.plan
    res = forward(student, Tensor(x))
    seg = seg_objective(student, res, y, e, cfg.exist_weight)
    fam = plan.family
    if fam == "LGAD":
        aux_loss = lat_loss(res.taps, teacher_taps, plan)
    elif fam == "FMD":
        aux_loss = fmd_loss(res.taps, teacher_taps, plan.positions)
    elif fam == "DS":
        aux_loss = ds_loss(res.taps, y, aux, plan.positions)
    elif fam == "DML":
        aux_loss = dml_loss(res.logits, peer_logits)
    else:
        aux_loss = None
    if teacher_taps is not None:
        for name, d in per_tap_distance(res.taps, teacher_taps, plan).items():
            tap_dist.setdefault(name, []).append(d)
    if aux_loss is None:
        loss, l_at = seg, 0.0
    else:
        loss = total_loss(seg, aux_loss, plan.alpha)
        l_at = float(aux_loss.data)
    return res, seg, loss, l_at


def train_student(dataset: Sequence[LaneScene], teacher: Network | None, cfg: TrainConfig,
                  on_epoch: Callable[[int, Network], None] | None = None) -> TrainResult:
    """Student training against a frozen teacher (sequential strategy).

    Each batch is paired: the teacher sees the rendered labels while the
    student sees the images. Families NONE and DS do not need a teacher.
    """
    _check_dataset(dataset)
    plan = cfg.plan
    if plan.family == "DML":
        raise ValueError("mutual learning trains two students; use train_mutual")
    if plan.needs_teacher:
        if teacher is None:
            raise ValueError(f"{plan.family} distillation needs a teacher network")
        _check_structure(teacher, cfg.net)
    student = build_network(cfg.net, cfg.seed)
    aux = build_aux_heads(_tap_channels(cfg.net), cfg.net.num_classes, plan.positions, cfg.seed) \
        if plan.family == "DS" else {}
    params = student.parameters() + list(aux.values())
    log = RunLog()
    max_iter = cfg.epochs * batches_per_epoch(len(dataset), cfg.batch_size)
    it = 0
    for epoch in range(cfg.epochs):
        first = len(log.records)
        tap_dist: dict[str, list[float]] = {}
        for x, y, e in iterate_batches(dataset, cfg, epoch):
            lr = poly_lr(it, max_iter, cfg.lr0, cfg.power)
            t_taps = None
            if teacher is not None and plan.family in ("LGAD", "FMD"):
                with no_grad():
                    t_taps = forward(teacher, _teacher_input(y, cfg.net)).taps
            for p in params:
                p.grad = None
            _, seg, loss, l_at = _student_step(student, x, y, e, cfg, t_taps, aux, tap_dist)
            _finite_or_abort(loss, it)
            loss.backward()
            sgd_step(params, lr)
            log.add(it, lr, float(seg.data), l_at, float(loss.data))
            it += 1
        _epoch_summary(log, epoch, first, tap_dist)
        if on_epoch:
            on_epoch(epoch, student)
    return TrainResult(student, log, teacher=teacher, aux=aux or None)


def train_collaborative(dataset: Sequence[LaneScene], cfg: TrainConfig,
                        on_epoch: Callable[[int, Network], None] | None = None) -> TrainResult:
    """Teacher and student updated on the same batches.

    The teacher follows its own segmentation loss; the student uses the
    teacher's current attention (detached) in its distillation term.
    """
    _check_dataset(dataset)
    plan = cfg.plan
    if plan.family not in ("LGAD", "FMD", "NONE"):
        raise ValueError(f"collaborative training supports LGAD/FMD/NONE, not {plan.family}")
    student = build_network(cfg.net, cfg.seed)
    teacher = build_network(cfg.net, cfg.seed + 1)
    log = RunLog()
    tlog = RunLog()
    max_iter = cfg.epochs * batches_per_epoch(len(dataset), cfg.batch_size)
    it = 0
    for epoch in range(cfg.epochs):
        first = len(log.records)
        tfirst = len(tlog.records)
        tap_dist: dict[str, list[float]] = {}
        for x, y, e in iterate_batches(dataset, cfg, epoch):
            lr_s = poly_lr(it, max_iter, cfg.lr0, cfg.power)
            lr_t = poly_lr(it, max_iter, cfg.teacher_lr0, cfg.power)
            teacher.zero_grad()
            t_res = forward(teacher, _teacher_input(y, cfg.net))
            t_seg = seg_objective(teacher, t_res, y, e, cfg.exist_weight)
            _finite_or_abort(t_seg, it)
            t_taps = {k: v.detach() for k, v in t_res.taps.items()}
            student.zero_grad()
            _, seg, loss, l_at = _student_step(student, x, y, e, cfg, t_taps, None, tap_dist)
            _finite_or_abort(loss, it)
            loss.backward()
            t_seg.backward()
            sgd_step(student.parameters(), lr_s)
            sgd_step(teacher.parameters(), lr_t)
            log.add(it, lr_s, float(seg.data), l_at, float(loss.data))
            v = float(t_seg.data)
            tlog.add(it, lr_t, v, 0.0, v)
            it += 1
        _epoch_summary(log, epoch, first, tap_dist)
        _epoch_summary(tlog, epoch, tfirst, {})
        if on_epoch:
            on_epoch(epoch, student)
    return TrainResult(student, log, teacher=teacher, teacher_log=tlog)


def train_mutual(dataset: Sequence[LaneScene], cfg: TrainConfig,
                 on_epoch: Callable[[int, Network], None] | None = None) -> TrainResult:
    """Two image-to-label peers with different initial weights; each adds
    ``alpha * dml_loss`` against the other's detached logits. The returned
    ``net`` is the peer initialised from ``cfg.seed``."""
    _check_dataset(dataset)
    a = build_network(cfg.net, cfg.seed)
    b = build_network(cfg.net, cfg.seed + 1000)
    log = RunLog()
    max_iter = cfg.epochs * batches_per_epoch(len(dataset), cfg.batch_size)
    it = 0
    for epoch in range(cfg.epochs):
        first = len(log.records)
        for x, y, e in iterate_batches(dataset, cfg, epoch):
            lr = poly_lr(it, max_iter, cfg.lr0, cfg.power)
            a.zero_grad()
            b.zero_grad()
            ra = forward(a, Tensor(x))
            rb = forward(b, Tensor(x))
            seg_a = seg_objective(a, ra, y, e, cfg.exist_weight)
            seg_b = seg_objective(b, rb, y, e, cfg.exist_weight)
            mim_a = dml_loss(ra.logits, rb.logits.data)
            mim_b = dml_loss(rb.logits, ra.logits.data)
            loss_a = total_loss(seg_a, mim_a, cfg.plan.alpha)
            loss_b = total_loss(seg_b, mim_b, cfg.plan.alpha)
            _finite_or_abort(loss_a, it)
            _finite_or_abort(loss_b, it)
            loss_a.backward()
            loss_b.backward()
            sgd_step(a.parameters(), lr)
            sgd_step(b.parameters(), lr)
            log.add(it, lr, float(seg_a.data), float(mim_a.data), float(loss_a.data))
            it += 1
        _epoch_summary(log, epoch, first, {})
        if on_epoch:
            on_epoch(epoch, a)
    return TrainResult(a, log, peer=b)


def run_training(dataset: Sequence[LaneScene], cfg: TrainConfig, teacher: Network | None = None,
                 on_epoch=None) -> TrainResult:
    """Dispatch on strategy and distillation family."""
    fam = cfg.plan.family
    if fam == "DML":
        return train_mutual(dataset, cfg, on_epoch)
    if cfg.strategy == COLLABORATIVE:
        return train_collaborative(dataset, cfg, on_epoch)
    return train_student(dataset, teacher, cfg, on_epoch)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalConfig:
    row_stride: int | None = None
    point_threshold_px: float | None = None
    lane_match_fraction: float = 0.85
    line_width_px: int | None = None
    iou_threshold: float = 0.5
    exist_threshold: float = 0.5
    floor: float = 0.3
    batch_size: int = 16
    matching: str = "exact"

    def resolved(self, h: int, w: int) -> "EvalConfig":
        """Fill unset geometry from the image size (full-scale values rescaled)."""
        return EvalConfig(
            row_stride=self.row_stride or max(1, round(20 * h / 590)),
            point_threshold_px=self.point_threshold_px or max(2.0, float(round(20 * w / 1280))),
            lane_match_fraction=self.lane_match_fraction,
            line_width_px=self.line_width_px or scaled_line_width(w),
            iou_threshold=self.iou_threshold,
            exist_threshold=self.exist_threshold,
            floor=self.floor,
            batch_size=self.batch_size,
            matching=self.matching,
        )


def predict(net: Network, images: np.ndarray, batch_size: int = 16):
    """Class probabilities (N, K, H, W) and existence probabilities (N, L)."""
    probs, exist = [], []
    with no_grad():
        for s in range(0, len(images), batch_size):
            res = forward(net, Tensor(images[s:s + batch_size]))
            probs.append(softmax(res.logits.data))
            if res.existence is not None:
                exist.append(res.existence)
    p = np.concatenate(probs) if probs else np.zeros((0,))
    e = np.concatenate(exist) if exist else None
    return p, e


def evaluate(net: Network, scenes: Sequence[LaneScene], cfg: EvalConfig | None = None,
             protocol: str = "both", teacher_inputs: bool = False) -> MetricReport:
    """Forward pass, lane extraction and the chosen protocol(s).

    With ``teacher_inputs`` the network is fed rendered labels instead of
    images (used to check the label-to-label teacher).
    """
    if not scenes:
        raise ValueError("evaluation set is empty")
    if protocol not in ("point", "iou", "both"):
        raise ValueError(f"unknown protocol {protocol!r}")
    h, w = scenes[0].dims
    cfg = (cfg or EvalConfig()).resolved(h, w)
    ncfg = net.config
    if teacher_inputs:
        images = label_to_image(np.stack([s.mask for s in scenes]), ncfg.in_channels, ncfg.num_classes).data
    else:
        images = np.stack([s.image for s in scenes])
    if images.shape[1] != ncfg.in_channels:
        raise ValueError(f"network expects {ncfg.in_channels} channels, data has {images.shape[1]}")
    probs, exist = predict(net, images, cfg.batch_size)
    if exist is None:
        exist = np.stack([(p[1:].reshape(p.shape[0] - 1, -1).max(axis=1) >= cfg.floor) for p in probs]).astype(float)
    preds = [extract_lanes(p, e, cfg.row_stride, cfg.exist_threshold, cfg.floor) for p, e in zip(probs, exist)]
    fg = float(np.mean([foreground_iou(p.argmax(axis=0), s.mask) for p, s in zip(probs, scenes)]))
    pooled_fg = _pooled_fg_iou(probs, scenes)
    report = MetricReport()
    if protocol in ("point", "both"):
        rows = preds[0].rows
        p_rows = [[pred_row_points(ln, rows) for ln in pr.lanes] for pr in preds]
        g_rows = [[gt_row_points(ln, rows, w) for ln in s.lanes] for s in scenes]
        report = tusimple_metrics(p_rows, g_rows, cfg.point_threshold_px, cfg.lane_match_fraction)
    if protocol in ("iou", "both"):
        p_curves = [[ln.curve() for ln in pr.lanes] for pr in preds]
        g_curves = [[ln.points for ln in s.lanes] for s in scenes]
        iou_rep = culane_f1(p_curves, g_curves, (h, w), cfg.line_width_px, cfg.iou_threshold, cfg.matching)
        report = iou_rep if protocol == "iou" else report.combine(iou_rep)
    report.settings.update({"row_stride": cfg.row_stride, "exist_threshold": cfg.exist_threshold,
                            "floor": cfg.floor})
    report.extra.update({"foreground_iou": fg, "foreground_iou_pooled": pooled_fg, "images": len(scenes)})
    return report


def _pooled_fg_iou(probs: np.ndarray, scenes) -> float:
    inter = union = 0
    for p, s in zip(probs, scenes):
        a, b = p.argmax(axis=0) > 0, s.mask > 0
        inter += int((a & b).sum())
        union += int((a | b).sum())
    return 1.0 if union == 0 else inter / union


def teacher_attention(teacher: Network, masks: np.ndarray, p: float = 1.0) -> dict[str, np.ndarray]:
    ncfg = teacher.config
    with no_grad():
        res = forward(teacher, label_to_image(masks, ncfg.in_channels, ncfg.num_classes))
    return {k: attention_mean(v, p).data for k, v in res.taps.items()}
