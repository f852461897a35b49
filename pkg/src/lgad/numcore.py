"""Minimal reverse-mode tensor engine.

Only the primitives the segmentation networks need are provided. Storage is
float32 by default; :func:`shadow64` switches newly created tensors to float64,
which is what the finite-difference checks run under.
"""

from __future__ import annotations

import contextlib
import struct
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor", "GradReport", "ShapeError", "NonFiniteError",
    "shadow64", "no_grad", "default_dtype", "is_grad_enabled",
    "conv2d", "relu", "max_pool", "bilinear_upsample", "softmax",
    "log_softmax", "softmax_cross_entropy", "sigmoid", "sigmoid_bce", "global_avg_pool",
    "linear", "concat", "add", "scale", "mean_squared_difference", "grad_check",
    "save_tensors", "load_tensors",
]


class ShapeError(ValueError):
    """Operand dimensions are incompatible with the operation."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf appeared where finite values are required."""


_state = {"dtype": np.float32, "grad": True}


def default_dtype():
    return _state["dtype"]


def is_grad_enabled() -> bool:
    return _state["grad"]


@contextlib.contextmanager
def shadow64():
    """Create tensors in float64 inside the block (gradient checking only)."""
    prev = _state["dtype"]
    _state["dtype"] = np.float64
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextlib.contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


class Tensor:
    """Dense array with optional gradient storage and a backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or _state["dtype"])
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        track = _state["grad"] and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dims(self) -> tuple[int, int, int, int]:
        """Shape left-padded with ones to rank 4."""
        s = self.data.shape
        if len(s) > 4:
            raise ShapeError(f"rank {len(s)} tensor has no 4-d view")
        return (1,) * (4 - len(s)) + tuple(s)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def __float__(self) -> float:
        if self.data.size != 1:
            raise TypeError(f"only single-element tensors convert to float, shape is {self.shape}")
        return float(self.data.reshape(()))

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, k: float) -> "Tensor":
        return scale(self, k)

    __rmul__ = __mul__

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Propagate gradients to every leaf that requires them.

        Gradients accumulate into ``leaf.grad``; intermediate gradients are
        discarded once consumed.
        """
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                grads[key] = pg if key not in grads else grads[key] + pg


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{what} contains non-finite values")


# ---------------------------------------------------------------------------
# primitives


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded 2-D cross-correlation of an (N, C, H, W) batch."""
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d expects rank-4 input and kernel, got {x.shape} and {w.shape}")
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if ci != c:
        raise ShapeError(f"conv2d kernel expects {ci} input channels, input has {c}")
    if b is not None and b.shape != (o,):
        raise ShapeError(f"conv2d bias shape {b.shape} != ({o},)")
    if stride < 1 or pad < 0:
        raise ShapeError(f"invalid stride={stride} / pad={pad}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d output would be {ho}x{wo} for input {h}x{wd}, kernel {kh}x{kw}")
    _check_finite(x.data, "conv2d input")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * kh * kw, ho * wo)
    wmat = w.data.reshape(o, -1)
    # batched matmul runs one gemm per sample, so results do not depend on batch size
    out = np.matmul(wmat, cols)
    if b is not None:
        out += b.data[:, None]
    out = out.reshape(n, o, ho, wo)

    def backward(g: np.ndarray):
        g2 = g.reshape(n, o, ho * wo)
        gw = gx = gb = None
        if w.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        if b is not None and b.requires_grad:
            gb = g2.sum(axis=(0, 2))
        if x.requires_grad:
            dcols = np.matmul(wmat.T, g2).reshape(n, c, kh, kw, ho, wo)
            dxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += dcols[:, :, i, j]
            gx = dxp[:, :, pad:pad + h, pad:pad + wd] if pad else dxp
        return gx, gw, gb

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._result(out, parents, backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._result(x.data * mask, (x,), lambda g: (g * mask,))


def max_pool(x: Tensor, k: int, stride: int | None = None) -> Tensor:
    """Windowed maximum; ties send the gradient to the first row-major position."""
    stride = k if stride is None else stride
    if k < 1 or stride < 1:
        raise ShapeError(f"invalid pool window {k} / stride {stride}")
    n, c, h, w = x.shape
    if k > h or k > w:
        raise ShapeError(f"pool window {k} larger than input {h}x{w}")
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g: np.ndarray):
        gx = np.zeros_like(x.data)
        di, dj = np.divmod(arg, k)
        rows = di + (np.arange(ho) * stride)[:, None]
        cols = dj + (np.arange(wo) * stride)[None, :]
        if stride >= k:
            # windows are disjoint, so plain fancy assignment cannot collide
            ni = np.arange(n)[:, None, None, None]
            ci = np.arange(c)[None, :, None, None]
            gx[ni, ci, rows, cols] = g
        else:
            idx = (rows * w + cols).reshape(n, c, -1)
            gflat = gx.reshape(n, c, h * w)
            for a in range(n):
                for b_ in range(c):
                    np.add.at(gflat[a, b_], idx[a, b_], g[a, b_].reshape(-1))
        return (gx,)

    return Tensor._result(np.ascontiguousarray(out), (x,), backward)


def _interp_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    # half-pixel centres, source index clamped at 0 (align_corners=False)
    dst = np.arange(n_out, dtype=np.float64)
    src = np.maximum((dst + 0.5) * (n_in / n_out) - 0.5, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 1)
    i1 = np.minimum(i0 + 1, n_in - 1)
    lam = src - i0
    m = np.zeros((n_out, n_in), dtype=np.float64)
    np.add.at(m, (np.arange(n_out), i0), 1.0 - lam)
    np.add.at(m, (np.arange(n_out), i1), lam)
    return m.astype(dtype)


def bilinear_upsample(x: Tensor, out_h: int, out_w: int) -> Tensor:
    n, c, h, w = x.shape
    if out_h <= 0 or out_w <= 0:
        raise ShapeError(f"upsample target {out_h}x{out_w} is empty")
    if out_h < h or out_w < w:
        raise ShapeError(f"upsample target {out_h}x{out_w} smaller than input {h}x{w}")
    ah = _interp_matrix(h, out_h, x.data.dtype)
    aw = _interp_matrix(w, out_w, x.data.dtype)
    out = np.matmul(np.matmul(ah, x.data), aw.T)

    def backward(g: np.ndarray):
        return (np.matmul(np.matmul(ah.T, g), aw),)

    return Tensor._result(out, (x,), backward)


def softmax(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def softmax_cross_entropy(logits: Tensor, target: np.ndarray, ignore: int | None = None) -> Tensor:
    """Mean per-pixel cross-entropy of (N, K, H, W) logits against (N, H, W) class ids."""
    if logits.data.ndim != 4:
        raise ShapeError(f"logits must be (N,K,H,W), got {logits.shape}")
    n, k, h, w = logits.shape
    target = np.asarray(target)
    if target.shape != (n, h, w):
        raise ShapeError(f"target shape {target.shape} does not match logits {(n, h, w)}")
    valid = np.ones(target.shape, dtype=bool) if ignore is None else target != ignore
    t = np.where(valid, target, 0).astype(np.int64)
    if (t < 0).any() or (t >= k).any():
        raise ShapeError(f"target classes must lie in [0, {k})")
    _check_finite(logits.data, "logits")
    logp = log_softmax(logits.data)
    count = max(int(valid.sum()), 1)
    picked = np.take_along_axis(logp, t[:, None], axis=1)[:, 0]
    loss = -(picked * valid).sum() / count

    def backward(g: np.ndarray):
        grad = np.exp(logp)
        np.put_along_axis(grad, t[:, None], np.take_along_axis(grad, t[:, None], axis=1) - 1.0, axis=1)
        grad *= valid[:, None] / count
        return (grad * g,)

    return Tensor._result(np.asarray(loss, dtype=logits.data.dtype), (logits,), backward)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x)))).astype(x.dtype)


def sigmoid_bce(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean binary cross-entropy on raw logits (numerically stable form)."""
    z = logits.data
    t = np.asarray(target, dtype=z.dtype)
    if t.shape != z.shape:
        raise ShapeError(f"target shape {t.shape} != logits {z.shape}")
    _check_finite(z, "logits")
    loss = (np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))).mean()

    def backward(g: np.ndarray):
        return ((sigmoid(z) - t) * (g / z.size),)

    return Tensor._result(np.asarray(loss, dtype=z.dtype), (logits,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))
    return Tensor._result(out, (x,), lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),))


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map of (N, C) rows by a (C, L) weight; each row is reduced independently."""
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"linear: cannot map {x.shape} with weight {w.shape}")
    out = (x.data[:, :, None] * w.data[None]).sum(axis=1) + b.data

    def backward(g: np.ndarray):
        return g @ w.data.T, x.data.T @ g, g.sum(axis=0)

    return Tensor._result(out, (x, w, b), backward)


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Join tensors along ``axis`` (channels by default)."""
    arrs = [t.data for t in tensors]
    sizes = [a.shape[axis] for a in arrs]
    out = np.concatenate(arrs, axis=axis)
    splits = np.cumsum(sizes)[:-1]

    def backward(g: np.ndarray):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor._result(out, tuple(tensors), backward)


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: {a.shape} vs {b.shape}")
    return Tensor._result(a.data + b.data, (a, b), lambda g: (g, g))


def scale(a: Tensor, k: float) -> Tensor:
    return Tensor._result(a.data * a.data.dtype.type(k), (a,), lambda g: (g * k,))


def mean_squared_difference(a: Tensor, b: Tensor) -> Tensor:
    """Mean of (a - b)^2; only ``a`` receives a gradient."""
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    out = np.asarray((diff * diff).mean(), dtype=a.data.dtype)
    return Tensor._result(out, (a,), lambda g: (g * 2.0 * diff / diff.size,))


# ---------------------------------------------------------------------------
# finite differences


@dataclass
class GradReport:
    errors: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-3
    failure: str | None = None

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.failure is None and self.max_error <= self.tolerance


def grad_check(
    fn: Callable[[], Tensor],
    params: Mapping[str, Tensor] | Iterable[Tensor],
    tol: float = 1e-3,
    eps: float = 1e-3,
    eps_abs: float = 1e-8,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> GradReport:
    """Compare analytic gradients with central differences.

    ``fn`` recomputes the scalar loss from the current contents of ``params``.
    Per parameter the error is ``max|a - n| / max(max|a|, max|n|, eps_abs)``.
    With ``max_entries`` only that many randomly chosen coordinates of each
    parameter are perturbed.
    """
    if not isinstance(params, Mapping):
        params = {f"p{i}": p for i, p in enumerate(params)}
    report = GradReport(tolerance=tol)
    for p in params.values():
        p.requires_grad = True
        p.grad = None
    loss = fn()
    if not np.isfinite(loss.data).all():
        report.failure = "loss is non-finite at the base point"
        return report
    loss.backward()
    rng = rng or np.random.default_rng(0)
    for name, p in params.items():
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        num = np.empty(idx.size, dtype=np.float64)
        with no_grad():
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + eps
                up = float(fn().data)
                flat[i] = orig - eps
                down = float(fn().data)
                flat[i] = orig
                if not (np.isfinite(up) and np.isfinite(down)):
                    report.failure = f"non-finite loss when perturbing {name}[{np.unravel_index(i, p.shape)}]"
                    return report
                num[j] = (up - down) / (2 * eps)
        a = analytic.reshape(-1)[idx].astype(np.float64)
        denom = max(np.abs(a).max(initial=0.0), np.abs(num).max(initial=0.0), eps_abs)
        report.errors[name] = float(np.abs(a - num).max(initial=0.0) / denom)
    return report


# ---------------------------------------------------------------------------
# serialization

MAGIC = b"LGAD"
FORMAT_VERSION = 1


def save_tensors(tensors: Mapping[str, Tensor | np.ndarray], trailer: bytes = b"") -> bytes:
    """Serialize named tensors: magic, u32 version, u32 count, then per tensor
    (u32 name length, UTF-8 name, 4 x u32 dims, float32 LE payload).
    ``trailer`` is appended verbatim."""
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name, t in tensors.items():
        arr = t.data if isinstance(t, Tensor) else np.asarray(t)
        raw = name.encode("utf-8")
        dims = (1,) * (4 - arr.ndim) + arr.shape
        if len(dims) != 4:
            raise ShapeError(f"{name}: rank {arr.ndim} cannot be stored in 4 dims")
        parts.append(struct.pack("<I", len(raw)) + raw + struct.pack("<4I", *dims))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    parts.append(trailer)
    return b"".join(parts)


def load_tensors(blob: bytes) -> tuple[dict[str, np.ndarray], bytes]:
    """Inverse of :func:`save_tensors`; returns rank-4 arrays and the trailer."""
    if blob[:4] != MAGIC:
        raise ValueError("not an LGAD tensor file (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported tensor format version {version}")
    off = 12
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off:off + ln].decode("utf-8")
        off += ln
        dims = struct.unpack_from("<4I", blob, off)
        off += 16
        size = int(np.prod(dims)) * 4
        if off + size > len(blob):
            raise ValueError(f"truncated payload for tensor {name!r}")
        out[name] = np.frombuffer(blob, dtype="<f4", count=size // 4, offset=off).reshape(dims).astype(np.float32)
        off += size
    return out, blob[off:]
