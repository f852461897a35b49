"""Distillation objectives: label-guided attention transfer and the
comparison losses (deep supervision, mutual learning, feature matching)."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .attention import attention_distance, attention_mean
from .netlib import TAP_NAMES
from .numcore import (
    ShapeError,
    Tensor,
    log_softmax,
    add,
    bilinear_upsample,
    conv2d,
    mean_squared_difference,
    scale,
    softmax_cross_entropy,
)

FAMILIES = ("LGAD", "DS", "DML", "FMD", "NONE")


@dataclass
class DistillPlan:
    family: str = "NONE"
    positions: tuple[str, ...] = ("stage2",)
    alpha: float = 0.5
    p: float = 1.0
    normalize_maps: bool = False

    def __post_init__(self):
        self.family = self.family.upper()
        if isinstance(self.positions, str):
            self.positions = tuple(s for s in self.positions.split(",") if s)
        self.positions = tuple(self.positions)
        if self.family not in FAMILIES:
            raise ValueError(f"unknown distillation family {self.family!r}; expected one of {FAMILIES}")
        bad = [s for s in self.positions if s not in TAP_NAMES]
        if bad:
            raise ValueError(f"unknown tap names {bad}; taps are {TAP_NAMES}")
        if self.family in ("LGAD", "FMD", "DS") and not self.positions:
            raise ValueError(f"{self.family} needs at least one distillation position")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.p < 1:
            raise ValueError("p must be >= 1")

    @property
    def needs_teacher(self) -> bool:
        return self.family in ("LGAD", "FMD")


def _require(taps: Mapping[str, Tensor], name: str, who: str) -> Tensor:
    if name not in taps:
        raise KeyError(f"{who} taps have no entry {name!r}")
    return taps[name]


def lat_loss(student_taps: Mapping[str, Tensor], teacher_taps: Mapping[str, Tensor], plan: DistillPlan) -> Tensor:
    """Sum over distilled positions of the attention-map distance.

    Teacher activations are used as constants.
    """
    total = None
    for name in plan.positions:
        s = _require(student_taps, name, "student")
        t = _require(teacher_taps, name, "teacher")
        a_s = attention_mean(s, plan.p, plan.normalize_maps)
        a_t = attention_mean(t.detach(), plan.p, plan.normalize_maps)
        d = attention_distance(a_s, a_t.data)
        total = d if total is None else add(total, d)
    if total is None:
        raise ValueError("plan has no positions")
    return total


def per_tap_distance(student_taps, teacher_taps, plan: DistillPlan) -> dict[str, float]:
    out = {}
    for name in plan.positions:
        a_s = attention_mean(student_taps[name].detach(), plan.p, plan.normalize_maps)
        a_t = attention_mean(teacher_taps[name].detach(), plan.p, plan.normalize_maps)
        out[name] = float(attention_distance(a_s, a_t.data).data)
    return out


def total_loss(seg: Tensor | float, lat: Tensor | float, alpha: float) -> Tensor:
    """``seg + alpha * lat``."""
    seg = seg if isinstance(seg, Tensor) else Tensor(seg)
    lat = lat if isinstance(lat, Tensor) else Tensor(lat, dtype=seg.data.dtype)
    for name, v in (("seg", seg), ("lat", lat)):
        if not np.isfinite(v.data).all():
            raise FloatingPointError(f"{name} loss is not finite")
    if not math.isfinite(alpha):
        raise FloatingPointError("alpha is not finite")
    return add(seg, scale(lat, alpha))


# ---------------------------------------------------------------------------
# comparison baselines


def build_aux_heads(tap_channels: Mapping[str, int], num_classes: int, positions, seed: int) -> dict[str, Tensor]:
    """1x1 classifiers for deep supervision, one per supervised tap."""
    rng = np.random.default_rng([seed, 0xD5])
    heads = {}
    for name in positions:
        c = tap_channels[name]
        heads[f"aux.{name}.w"] = Tensor(rng.standard_normal((num_classes, c, 1, 1)) * np.sqrt(2.0 / c), requires_grad=True)
        heads[f"aux.{name}.b"] = Tensor(np.zeros(num_classes), requires_grad=True)
    return heads


def ds_logits(taps: Mapping[str, Tensor], aux: Mapping[str, Tensor], name: str, out_hw: tuple[int, int]) -> Tensor:
    z = conv2d(_require(taps, name, "network"), aux[f"aux.{name}.w"], aux[f"aux.{name}.b"], 1, 0)
    return bilinear_upsample(z, *out_hw)


def ds_loss(taps: Mapping[str, Tensor], labels: np.ndarray, aux: Mapping[str, Tensor], positions) -> Tensor:
    """Mean over supervised taps of the cross-entropy of upsampled aux logits."""
    labels = np.asarray(labels)
    hw = labels.shape[-2:]
    total = None
    for name in positions:
        ce = softmax_cross_entropy(ds_logits(taps, aux, name, hw), labels)
        total = ce if total is None else add(total, ce)
    if total is None:
        raise ValueError("deep supervision needs at least one position")
    return scale(total, 1.0 / len(positions))


def dml_loss(logits_a: Tensor, logits_b: Tensor | np.ndarray) -> Tensor:
    """Per-pixel symmetric KL between the two class distributions, averaged.

    ``logits_b`` is a constant (the peer's detached output); the gradient goes
    to ``logits_a`` only.
    """
    b = logits_b.data if isinstance(logits_b, Tensor) else np.asarray(logits_b, dtype=logits_a.data.dtype)
    if logits_a.shape != b.shape:
        raise ShapeError(f"mutual-learning logits differ in shape: {logits_a.shape} vs {b.shape}")
    la = log_softmax(logits_a.data)
    lb = log_softmax(b)
    pa, pb = np.exp(la), np.exp(lb)
    d = la - lb
    kl_ab = (pa * d).sum(axis=1, keepdims=True)
    kl_ba = -(pb * d).sum(axis=1, keepdims=True)
    npix = kl_ab.size
    out = np.asarray((kl_ab + kl_ba).sum() / npix, dtype=logits_a.data.dtype)

    def backward(g):
        return (g * (pa * (d - kl_ab) + pa - pb) / npix,)

    return Tensor._result(out, (logits_a,), backward)


def fmd_loss(student_taps: Mapping[str, Tensor], teacher_taps: Mapping[str, Tensor], positions) -> Tensor:
    """Sum over positions of the mean squared activation difference."""
    total = None
    for name in positions:
        s = _require(student_taps, name, "student")
        t = _require(teacher_taps, name, "teacher")
        d = mean_squared_difference(s, t.detach())
        total = d if total is None else add(total, d)
    if total is None:
        raise ValueError("feature distillation needs at least one position")
    return total
