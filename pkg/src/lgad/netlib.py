"""Stage-tapped encoder/decoder used for both teacher and student."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .numcore import (
    ShapeError,
    Tensor,
    bilinear_upsample,
    concat,
    conv2d,
    global_avg_pool,
    linear,
    load_tensors,
    max_pool,
    relu,
    save_tensors,
    sigmoid,
)

TAP_NAMES = ("stage1", "stage2", "stage3", "stage4")


@dataclass(frozen=True)
class NetworkConfig:
    in_channels: int = 3
    num_classes: int = 5
    stage_widths: tuple[int, int, int, int] = (8, 16, 32, 64)
    with_existence_head: bool = True
    max_lanes: int = 4
    skips: bool = True
    tap_names: tuple[str, ...] = field(default=TAP_NAMES, init=False)

    def __post_init__(self):
        widths = tuple(int(v) for v in self.stage_widths)
        object.__setattr__(self, "stage_widths", widths)
        if len(widths) != 4:
            raise ValueError(f"exactly 4 stage widths required, got {len(widths)}")
        if any(v <= 0 for v in widths):
            raise ValueError(f"stage widths must be positive: {widths}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.in_channels < 1:
            raise ValueError("in_channels must be >= 1")
        if self.with_existence_head and self.max_lanes < 1:
            raise ValueError("existence head needs max_lanes >= 1")

    def to_record(self) -> str:
        d = asdict(self)
        d.pop("tap_names")
        d["stage_widths"] = ",".join(map(str, self.stage_widths))
        return "".join(f"{k}={v}\n" for k, v in d.items())

    @classmethod
    def from_record(cls, text: str) -> "NetworkConfig":
        kv = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
        return cls(
            in_channels=int(kv["in_channels"]),
            num_classes=int(kv["num_classes"]),
            stage_widths=tuple(int(v) for v in kv["stage_widths"].split(",")),
            with_existence_head=kv["with_existence_head"] == "True",
            max_lanes=int(kv["max_lanes"]),
            skips=kv.get("skips", "True") == "True",
        )


def param_shapes(cfg: NetworkConfig) -> dict[str, tuple[int, ...]]:
    """Parameter inventory, in a fixed order, as a pure function of ``cfg``."""
    shapes: dict[str, tuple[int, ...]] = {}
    prev = cfg.in_channels
    for i, wdt in enumerate(cfg.stage_widths, 1):
        shapes[f"stage{i}.conv1.w"] = (wdt, prev, 3, 3)
        shapes[f"stage{i}.conv1.b"] = (wdt,)
        shapes[f"stage{i}.conv2.w"] = (wdt, wdt, 3, 3)
        shapes[f"stage{i}.conv2.b"] = (wdt,)
        prev = wdt
    dec_widths = (cfg.stage_widths[2], cfg.stage_widths[1], cfg.stage_widths[0], cfg.stage_widths[0])
    for i, wdt in enumerate(dec_widths, 1):
        skip = cfg.stage_widths[4 - i] if cfg.skips else 0
        shapes[f"dec{i}.w"] = (wdt, prev + skip, 3, 3)
        shapes[f"dec{i}.b"] = (wdt,)
        prev = wdt
    shapes["head.w"] = (cfg.num_classes, prev, 1, 1)
    shapes["head.b"] = (cfg.num_classes,)
    if cfg.with_existence_head:
        shapes["exist.w"] = (cfg.stage_widths[3], cfg.max_lanes)
        shapes["exist.b"] = (cfg.max_lanes,)
    return shapes


class Network:
    """Parameter set plus forward pass.

    ``params`` maps names from :func:`param_shapes` to leaf tensors.
    """

    def __init__(self, config: NetworkConfig, params: dict[str, Tensor]):
        expected = param_shapes(config)
        if list(params) != list(expected):
            raise ValueError("parameter names do not match config")
        for name, shp in expected.items():
            if params[name].shape != shp:
                raise ShapeError(f"{name}: shape {params[name].shape} != {shp}")
        self.config = config
        self.params = params

    def __repr__(self):
        n = sum(p.data.size for p in self.params.values())
        return f"Network({self.config.stage_widths}, K={self.config.num_classes}, {n} params)"

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def copy(self, dtype=None) -> "Network":
        dtype = dtype or next(iter(self.params.values())).data.dtype
        return Network(self.config, {k: Tensor(v.data.copy(), requires_grad=True, dtype=dtype)
                                     for k, v in self.params.items()})

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def forward(self, x: Tensor) -> "ForwardResult":
        return forward(self, x)

    def save(self, path: str | Path) -> None:
        trailer = self.config.to_record().encode("utf-8")
        Path(path).write_bytes(save_tensors(self.params, trailer))

    @classmethod
    def load(cls, path: str | Path) -> "Network":
        arrays, trailer = load_tensors(Path(path).read_bytes())
        cfg = NetworkConfig.from_record(trailer.decode("utf-8"))
        shapes = param_shapes(cfg)
        if set(arrays) != set(shapes):
            raise ValueError(f"{path}: checkpoint tensors do not match its config record")
        params = {k: Tensor(arrays[k].reshape(shp), requires_grad=True, dtype=np.float32)
                  for k, shp in shapes.items()}
        return cls(cfg, params)


def build_network(cfg: NetworkConfig, seed: int) -> Network:
    """He-normal conv/linear weights and zero biases from a seeded generator."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shp in param_shapes(cfg).items():
        if name.endswith(".b"):
            arr = np.zeros(shp)
        else:
            fan_in = int(np.prod(shp[1:])) if len(shp) == 4 else shp[0]
            arr = rng.standard_normal(shp) * np.sqrt(2.0 / fan_in)
        params[name] = Tensor(arr, requires_grad=True)
    return Network(cfg, params)


@dataclass
class ForwardResult:
    logits: Tensor
    taps: dict[str, Tensor]
    existence_logits: Tensor | None = None

    @property
    def existence(self) -> np.ndarray | None:
        if self.existence_logits is None:
            return None
        return sigmoid(self.existence_logits.data)


def forward(net: Network, x: Tensor) -> ForwardResult:
    cfg = net.config
    p = net.params
    if x.data.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise ShapeError(f"input must be (N,{cfg.in_channels},H,W), got {x.shape}")
    h, w = x.shape[2:]
    if h % 16 or w % 16:
        raise ShapeError(f"input spatial dims {h}x{w} must be multiples of 16")
    taps = {}
    for i in range(1, 5):
        x = relu(conv2d(x, p[f"stage{i}.conv1.w"], p[f"stage{i}.conv1.b"], 1, 1))
        x = relu(conv2d(x, p[f"stage{i}.conv2.w"], p[f"stage{i}.conv2.b"], 1, 1))
        taps[f"stage{i}"] = x
        x = max_pool(x, 2, 2)
    exist = None
    if cfg.with_existence_head:
        exist = linear(global_avg_pool(taps["stage4"]), p["exist.w"], p["exist.b"])
    for i in range(1, 5):
        x = bilinear_upsample(x, x.shape[2] * 2, x.shape[3] * 2)
        if cfg.skips:
            x = concat([x, taps[f"stage{5 - i}"]])
        x = relu(conv2d(x, p[f"dec{i}.w"], p[f"dec{i}.b"], 1, 1))
    logits = conv2d(x, p["head.w"], p["head.b"], 1, 0)
    return ForwardResult(logits, taps, exist)


def label_to_image(mask: np.ndarray, in_channels: int, num_classes: int) -> Tensor:
    """Render class ids as intensity ``c / (K - 1)`` replicated over channels.

    ``mask`` is (H, W) or (N, H, W); the result is (N, in_channels, H, W).
    """
    m = np.asarray(mask)
    if m.ndim == 2:
        m = m[None]
    if (m >= num_classes).any() or (m < 0).any():
        raise ValueError(f"mask classes must lie in [0, {num_classes})")
    img = (m.astype(np.float64) / (num_classes - 1))[:, None]
    return Tensor(np.repeat(img, in_channels, axis=1))
