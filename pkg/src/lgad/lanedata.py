"""Procedural lane scenes, polyline rasterization and the on-disk dataset."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

GRID = 1024.0


@dataclass
class LanePolyline:
    points: np.ndarray  # (P, 2) float x, y with strictly increasing y
    slot: int

    def __post_init__(self):
        # a 1/1024 px grid keeps mirror images exact in float64
        self.points = np.round(np.asarray(self.points, dtype=np.float64).reshape(-1, 2) * GRID) / GRID
        if len(self.points) < 2:
            raise ValueError("a lane needs at least 2 points")
        if not (np.diff(self.points[:, 1]) > 0).all():
            raise ValueError("lane y coordinates must be strictly increasing")

    def x_at(self, y: np.ndarray | float) -> np.ndarray:
        """Linear interpolation of x at rows inside the lane's y-span (NaN outside)."""
        y = np.asarray(y, dtype=np.float64)
        ys, xs = self.points[:, 1], self.points[:, 0]
        x = np.interp(y, ys, xs)
        return np.where((y >= ys[0]) & (y <= ys[-1]), x, np.nan)

    def to_json(self) -> dict:
        return {"slot": int(self.slot), "points": [[float(x), float(y)] for x, y in self.points]}

    @classmethod
    def from_json(cls, rec: dict) -> "LanePolyline":
        return cls(np.asarray(rec["points"], dtype=np.float64), int(rec["slot"]))


@dataclass
class LaneScene:
    image: np.ndarray  # (C, H, W) float32 in [0, 1]
    mask: np.ndarray  # (H, W) uint8 class ids, 0 = background, slot k -> k + 1
    lanes: list[LanePolyline]
    existence: np.ndarray  # (max_lanes,) bool
    occluded: bool = False

    @property
    def dims(self) -> tuple[int, int]:
        return self.mask.shape


@dataclass
class GenParams:
    height: int = 64
    width: int = 64
    channels: int = 3
    max_lanes: int = 4
    lane_count: tuple[int, int] = (2, 4)
    curvature: tuple[float, float] = (-0.25, 0.25)
    label_width: int = 3
    occluder_prob: float = 0.6
    max_occluders: int = 3
    clutter_count: tuple[int, int] = (0, 3)
    noise: float = 0.08
    horizon: float = 0.3
    road_intensity: float = 0.25
    lane_intensity: tuple[float, float] = (0.45, 0.85)
    lane_spacing: float = 0.36

    def __post_init__(self):
        self.lane_count = tuple(self.lane_count)
        self.curvature = tuple(self.curvature)
        self.clutter_count = tuple(self.clutter_count)
        self.lane_intensity = tuple(self.lane_intensity)
        if self.height % 16 or self.width % 16:
            raise ValueError(f"image dims {self.height}x{self.width} must be multiples of 16")
        lo, hi = self.lane_count
        if not 0 <= lo <= hi <= self.max_lanes:
            raise ValueError(f"lane count range {self.lane_count} must lie within [0, {self.max_lanes}]")
        if self.label_width < 1:
            raise ValueError("label width must be >= 1")

    @property
    def num_classes(self) -> int:
        return self.max_lanes + 1

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# rasterization


def _segment_distance(px: np.ndarray, py: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from pixel centres to segments ``a[k] -> b[k]`` (one plane per segment)."""
    d = b - a
    ll = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1]
    ax, ay, dx, dy = (v[:, None, None] for v in (a[:, 0], a[:, 1], d[:, 0], d[:, 1]))
    with np.errstate(invalid="ignore", divide="ignore"):
        t = np.clip(((px - ax) * dx + (py - ay) * dy) / ll[:, None, None], 0.0, 1.0)
    t = np.where(ll[:, None, None] > 0, t, 0.0)
    return np.hypot(px - (ax + t * dx), py - (ay + t * dy))


_SEGMENT_CHUNK = 16


def stroke(points: np.ndarray, width_px: float, dims: tuple[int, int]) -> np.ndarray:
    """Boolean mask of pixel centres within ``width_px / 2`` of the polyline."""
    h, w = dims
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    out = np.zeros((h, w), dtype=bool)
    r = width_px / 2.0
    if len(pts) == 1:
        py, px = np.mgrid[0:h, 0:w].astype(np.float64)
        out |= np.hypot(px - pts[0, 0], py - pts[0, 1]) <= r + 1e-9
        return out
    for s in range(0, len(pts) - 1, _SEGMENT_CHUNK):
        e = min(s + _SEGMENT_CHUNK, len(pts) - 1)
        a, b = pts[s:e], pts[s + 1:e + 1]
        x0 = max(int(np.floor(np.minimum(a[:, 0], b[:, 0]).min() - r)), 0)
        x1 = min(int(np.ceil(np.maximum(a[:, 0], b[:, 0]).max() + r)), w - 1)
        y0 = max(int(np.floor(np.minimum(a[:, 1], b[:, 1]).min() - r)), 0)
        y1 = min(int(np.ceil(np.maximum(a[:, 1], b[:, 1]).max() + r)), h - 1)
        if x1 < x0 or y1 < y0:
            continue
        py = np.arange(y0, y1 + 1, dtype=np.float64)[:, None]
        px = np.arange(x0, x1 + 1, dtype=np.float64)[None, :]
        near = (_segment_distance(px, py, a, b) <= r + 1e-9).any(axis=0)
        out[y0:y1 + 1, x0:x1 + 1] |= near
    return out


def rasterize_lanes(lanes: Sequence[LanePolyline], width_px: int, dims: tuple[int, int]) -> np.ndarray:
    """Class mask with lane slot ``k`` drawn as class ``k + 1``; lower slots win overlaps."""
    if width_px < 1:
        raise ValueError("line width must be >= 1")
    mask = np.zeros(dims, dtype=np.uint8)
    for lane in sorted(lanes, key=lambda ln: ln.slot, reverse=True):
        mask[stroke(lane.points, width_px, dims)] = lane.slot + 1
    return mask


# ---------------------------------------------------------------------------
# generator


def scene_rng(seed: int, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def _lane_curve(params: GenParams, rng, slot: int, vp_x: float, hy: float, bend: float):
    h, w = params.height, params.width
    spacing = params.lane_spacing * w
    offset = (slot - (params.max_lanes - 1) / 2.0) * spacing
    bottom_x = vp_x + offset * 1.4 + rng.uniform(-0.03, 0.03) * w
    ys = np.arange(np.ceil(hy) + 1, h, 1.0)
    t = (ys - hy) / (h - 1 - hy)
    # straight line to the vanishing point plus a shared quadratic bend
    xs = vp_x + (bottom_x - vp_x) * t + bend * w * (1 - t) ** 2 * t * 2.0
    inside = (xs >= 0) & (xs <= w - 1)
    if inside.sum() < 2:
        return None
    # keep the longest contiguous in-frame run starting from the top
    idx = np.flatnonzero(inside)
    breaks = np.flatnonzero(np.diff(idx) > 1)
    run = idx[: breaks[0] + 1] if len(breaks) else idx
    if len(run) < 2:
        return None
    return np.stack([xs[run], ys[run]], axis=1)


def gen_scene(params: GenParams, seed: int, index: int = 0) -> LaneScene:
    """One synthetic road scene; randomness derives only from ``(seed, index)``."""
    rng = scene_rng(seed, index)
    h, w, c = params.height, params.width, params.channels
    hy = params.horizon * h
    vp_x = w / 2 + rng.uniform(-0.12, 0.12) * w
    bend = rng.uniform(*params.curvature)
    n_lanes = int(rng.integers(params.lane_count[0], params.lane_count[1] + 1))
    slots = sorted(rng.choice(params.max_lanes, size=n_lanes, replace=False).tolist())

    lanes: list[LanePolyline] = []
    for s in slots:
        pts = _lane_curve(params, rng, s, vp_x, hy, bend)
        if pts is not None:
            lanes.append(LanePolyline(pts, s))
    existence = np.zeros(params.max_lanes, dtype=bool)
    for lane in lanes:
        existence[lane.slot] = True
    mask = rasterize_lanes(lanes, params.label_width, (h, w))

    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    road = params.road_intensity * (1.0 + 0.3 * (yy - hy) / h)
    sky = 0.55 + 0.1 * (1 - yy / max(hy, 1))
    base = np.where(yy < hy, sky, road)
    tint = rng.uniform(0.85, 1.15, size=c)
    img = base[None] * tint[:, None, None]

    # the painted core is one pixel thinner than the label stroke; the rim and
    # the gaps of dashed lanes keep a faint, worn trace of paint
    for lane in lanes:
        full = stroke(lane.points, params.label_width, (h, w))
        core = stroke(lane.points, max(params.label_width - 1, 1), (h, w)) & full
        strength = np.where(core, 1.0, 0.5)
        if rng.random() < 0.5:
            period = rng.integers(6, 12)
            phase = rng.integers(0, period)
            gap = ((yy + phase) // (period / 2)) % 2 == 1
            strength = np.where(gap, 0.2, strength)
        colour = rng.uniform(*params.lane_intensity) * rng.uniform(0.9, 1.1, size=c)
        paint = np.maximum(colour[:, None, None], img + 0.1)
        img = np.where(full[None], img + strength[None] * (paint - img), img)

    n_clutter = int(rng.integers(params.clutter_count[0], params.clutter_count[1] + 1))
    for _ in range(n_clutter):
        ch, cw = rng.integers(2, 6), rng.integers(2, 8)
        cy, cx = rng.integers(int(hy), h - ch), rng.integers(0, w - cw)
        img[:, cy:cy + ch, cx:cx + cw] = rng.uniform(0.4, 0.8) * rng.uniform(0.8, 1.2, size=c)[:, None, None]

    occluded = False
    if rng.random() < params.occluder_prob:
        for _ in range(int(rng.integers(1, params.max_occluders + 1))):
            oh, ow = rng.integers(4, 12), rng.integers(8, 24)
            oy, ox = rng.integers(int(hy), h - oh), rng.integers(0, w - ow)
            img[:, oy:oy + oh, ox:ox + ow] = rng.uniform(0.0, 0.15) * rng.uniform(0.8, 1.2, size=c)[:, None, None]
            occluded |= bool(mask[oy:oy + oh, ox:ox + ow].any())

    if params.noise > 0:
        img = img + rng.normal(0.0, params.noise, size=img.shape)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    return LaneScene(img, mask, lanes, existence, occluded)


def gen_dataset(params: GenParams, seed: int, count: int, start: int = 0) -> list[LaneScene]:
    return [gen_scene(params, seed, start + i) for i in range(count)]


# ---------------------------------------------------------------------------
# netpbm


def write_pgm(path: str | Path, gray: np.ndarray) -> None:
    gray = np.asarray(gray, dtype=np.uint8)
    h, w = gray.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + gray.tobytes())


def write_ppm(path: str | Path, rgb: np.ndarray) -> None:
    """``rgb`` is (H, W, 3) uint8."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + rgb.tobytes())


def _read_netpbm(path: Path, magic: bytes) -> np.ndarray:
    data = path.read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        if end == pos:
            raise ValueError(f"{path}: truncated header")
        fields.append(data[pos:end])
        pos = end
    if fields[0] != magic:
        raise ValueError(f"{path}: expected {magic.decode()} file, found {fields[0][:2]!r}")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit files are supported (maxval {maxval})")
    pos += 1
    ch = 3 if magic == b"P6" else 1
    need = w * h * ch
    raw = data[pos:pos + need]
    if len(raw) != need:
        raise ValueError(f"{path}: payload has {len(raw)} bytes, expected {need}")
    arr = np.frombuffer(raw, dtype=np.uint8)
    return arr.reshape(h, w, 3) if ch == 3 else arr.reshape(h, w)


def read_pgm(path: str | Path) -> np.ndarray:
    return _read_netpbm(Path(path), b"P5")


def read_ppm(path: str | Path) -> np.ndarray:
    return _read_netpbm(Path(path), b"P6")


# ---------------------------------------------------------------------------
# dataset directory


def _image_to_rgb8(image: np.ndarray) -> np.ndarray:
    img = np.asarray(image)
    if img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    if img.shape[0] != 3:
        raise ValueError(f"only 1- or 3-channel images can be stored as PPM, got {img.shape[0]}")
    return np.round(np.clip(img, 0, 1) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def save_dataset(scenes: Sequence[LaneScene], directory: str | Path, params: GenParams | None = None,
                 extra: dict | None = None) -> None:
    root = Path(directory)
    for sub in ("images", "masks", "lanes"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for i, sc in enumerate(scenes):
        stem = f"{i:05d}"
        write_ppm(root / "images" / f"{stem}.ppm", _image_to_rgb8(sc.image))
        write_pgm(root / "masks" / f"{stem}.pgm", sc.mask)
        doc = {"lanes": [ln.to_json() for ln in sc.lanes], "existence": [bool(e) for e in sc.existence],
               "occluded": bool(sc.occluded)}
        (root / "lanes" / f"{stem}.json").write_text(json.dumps(doc, sort_keys=True))
    if scenes:
        h, w = scenes[0].dims
        channels = int(scenes[0].image.shape[0])
        max_lanes = len(scenes[0].existence)
    elif params is not None:
        h, w, channels, max_lanes = params.height, params.width, params.channels, params.max_lanes
    else:
        h = w = channels = max_lanes = 0
    manifest = {
        "count": len(scenes),
        "height": h,
        "width": w,
        "channels": channels,
        "max_lanes": max_lanes,
        "num_classes": max_lanes + 1,
        "generator": params.to_dict() if params is not None else None,
    }
    if extra:
        manifest.update(extra)
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_dataset(directory: str | Path) -> list[LaneScene]:
    root = Path(directory)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise FileNotFoundError(f"{mpath}: missing dataset manifest")
    try:
        manifest = json.loads(mpath.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{mpath}: malformed JSON ({exc})") from exc
    scenes = []
    channels = int(manifest.get("channels", 3))
    for i in range(int(manifest["count"])):
        stem = f"{i:05d}"
        ipath, mpath_, lpath = root / "images" / f"{stem}.ppm", root / "masks" / f"{stem}.pgm", root / "lanes" / f"{stem}.json"
        for p in (ipath, mpath_, lpath):
            if not p.is_file():
                raise FileNotFoundError(f"{p}: missing scene file")
        rgb = read_ppm(ipath).astype(np.float32) / 255.0
        image = rgb.transpose(2, 0, 1)[:channels].copy()
        mask = read_pgm(mpath_).copy()
        try:
            doc = json.loads(lpath.read_text())
            lanes = [LanePolyline.from_json(r) for r in doc["lanes"]]
            existence = np.asarray(doc["existence"], dtype=bool)
            occluded = bool(doc.get("occluded", False))
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            raise ValueError(f"{lpath}: malformed lane record ({exc})") from exc
        scenes.append(LaneScene(image, mask, lanes, existence, occluded))
    return scenes


def load_manifest(directory: str | Path) -> dict:
    return json.loads((Path(directory) / "manifest.json").read_text())
