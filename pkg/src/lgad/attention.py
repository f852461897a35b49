"""Activation-based attention maps and the per-pair distillation distance."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .numcore import ShapeError, Tensor


def attention_mean(r: Tensor, p: float = 1.0, normalize: bool = False) -> Tensor:
    """Channel mean of ``|R|**p`` for an (N, C, H, W) activation.

    Returns an (N, H, W) tensor of nonnegative maps. With ``normalize`` each
    map is divided by its root mean square, i.e. its L2 norm over sqrt(H*W),
    so normalized maps have unit mean square at any resolution. The subgradient of ``|x|`` at 0 is taken
    as 0.
    """
    if r.data.ndim != 4:
        raise ShapeError(f"attention_mean expects (N,C,H,W), got {r.shape}")
    c = r.shape[1]
    if c < 1:
        raise ShapeError("attention_mean needs at least one channel")
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    x = r.data
    ax = np.abs(x)
    powed = ax if p == 1 else ax ** p
    a = powed.mean(axis=1)
    if normalize:
        norm = np.sqrt((a * a).mean(axis=(1, 2), keepdims=True))
        norm = np.maximum(norm, np.finfo(a.dtype).tiny)
        out = a / norm
    else:
        out = a

    def backward(g: np.ndarray):
        if normalize:
            # d(a/rms) = g/rms - out <out, g>/(M rms), M = H*W
            inner = (out * g).mean(axis=(1, 2), keepdims=True)
            g = (g - out * inner) / norm
        sign = np.sign(x)
        if p == 1:
            dpow = sign
        else:
            dpow = p * ax ** (p - 1) * sign
        return (g[:, None] * dpow / c,)

    return Tensor._result(out, (r,), backward)


def attention_distance(a_s: Tensor, a_t: Tensor | np.ndarray) -> Tensor:
    """Mean over pixels of ``(A_s - A_t)**2``.

    The teacher map is read as a constant; only ``a_s`` gets a gradient. For
    batched (N, H, W) maps the mean runs over the batch as well.
    """
    t = a_t.data if isinstance(a_t, Tensor) else np.asarray(a_t, dtype=a_s.data.dtype)
    if a_s.shape != t.shape:
        raise ShapeError(f"attention maps differ in shape: student {a_s.shape}, teacher {t.shape}")
    diff = a_s.data - t
    out = np.asarray((diff * diff).mean(), dtype=a_s.data.dtype)
    return Tensor._result(out, (a_s,), lambda g: (g * 2.0 * diff / diff.size,))


def to_gray8(a: np.ndarray) -> np.ndarray:
    """Min-max scale one map to uint8; a constant map becomes mid-gray."""
    a = np.asarray(a, dtype=np.float64)
    lo, hi = a.min(), a.max()
    if not hi > lo:
        return np.full(a.shape, 128, dtype=np.uint8)
    return np.round((a - lo) / (hi - lo) * 255.0).astype(np.uint8)


def export_pgm(a: np.ndarray, path: str | Path) -> None:
    from .lanedata import write_pgm

    write_pgm(path, to_gray8(a))
