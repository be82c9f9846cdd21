"""Procedural box scenes and a pinhole RGB-D + label ray caster.

World frame is right-handed with Z up. At zero yaw and pitch the camera looks
along +X; image columns grow toward -Y (camera right) and rows grow toward -Z.
Depth is the hit distance along the optical axis, not along the ray.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ContractViolation, GenerationError
from .rng import make_rng

FLOOR_CLASS = 0
WALL_CLASS = 1
BACKGROUND = -1
SCENE_FORMAT = "vln3d-scene/1"


def class_color(class_id: int) -> np.ndarray:
    """Fixed palette colour for a class (rgb in [0, 1])."""
    g = np.random.Generator(np.random.PCG64(7919 + int(class_id)))
    return g.uniform(0.15, 0.95, size=3)


@dataclass(frozen=True)
class Box:
    center: tuple[float, float, float]
    half_extents: tuple[float, float, float]
    class_id: int
    color: tuple[float, float, float]

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.center) - np.asarray(self.half_extents)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.center) + np.asarray(self.half_extents)


@dataclass
class SceneGraph:
    boxes: list[Box]
    bounds_lo: tuple[float, float, float]
    bounds_hi: tuple[float, float, float]
    num_classes: int
    seed: int = 0

    def arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """(lo [n,3], hi [n,3], class ids [n], colours [n,3])."""
        if not self.boxes:
            z = np.zeros((0, 3))
            return z, z.copy(), np.zeros(0, dtype=np.int64), z.copy()
        c = np.array([b.center for b in self.boxes], dtype=np.float64)
        h = np.array([b.half_extents for b in self.boxes], dtype=np.float64)
        ids = np.array([b.class_id for b in self.boxes], dtype=np.int64)
        col = np.array([b.color for b in self.boxes], dtype=np.float64)
        return c - h, c + h, ids, col

    def to_dict(self) -> dict:
        return {
            "format": SCENE_FORMAT,
            "seed": int(self.seed),
            "num_classes": int(self.num_classes),
            "bounds": {"lo": list(self.bounds_lo), "hi": list(self.bounds_hi)},
            "boxes": [
                {
                    "center": list(b.center),
                    "half_extents": list(b.half_extents),
                    "class_id": int(b.class_id),
                    "color": list(b.color),
                }
                for b in self.boxes
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneGraph":
        if d.get("format") != SCENE_FORMAT:
            raise ConfigurationError(f"unsupported scene format {d.get('format')!r}")
        boxes = [
            Box(tuple(b["center"]), tuple(b["half_extents"]), int(b["class_id"]), tuple(b["color"]))
            for b in d["boxes"]
        ]
        return cls(boxes, tuple(d["bounds"]["lo"]), tuple(d["bounds"]["hi"]), int(d["num_classes"]), int(d["seed"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "SceneGraph":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class SceneConfig:
    room_size: tuple[float, float] = (8.0, 8.0)
    wall_height: float = 2.6
    wall_thickness: float = 0.1
    n_furniture: int = 8
    num_classes: int = 12
    furniture_half_xy: tuple[float, float] = (0.2, 0.7)
    furniture_half_z: tuple[float, float] = (0.2, 0.9)
    n_partitions: int = 1
    max_retries: int = 200


def _box(center, half, class_id, rng) -> Box:
    col = np.clip(class_color(class_id) + rng.uniform(-0.05, 0.05, size=3), 0.0, 1.0)
    return Box(tuple(float(v) for v in center), tuple(float(v) for v in half), int(class_id), tuple(float(v) for v in col))


def _overlaps(a_lo, a_hi, b_lo, b_hi, gap=0.0) -> bool:
    return bool(np.all(a_lo < b_hi + gap) and np.all(b_lo < a_hi + gap))


def generate_scene(seed: int, config: SceneConfig | None = None) -> SceneGraph:
    """A walled room with optional partition walls and non-overlapping furniture."""
    cfg = config or SceneConfig()
    if cfg.num_classes < 2:
        raise ConfigurationError("need at least floor and wall classes")
    if cfg.n_furniture > 0 and cfg.num_classes < 3:
        raise ConfigurationError("furniture needs a class id >= 2")
    rng = make_rng(seed)
    sx, sy = cfg.room_size
    hx, hy = sx / 2, sy / 2
    t = cfg.wall_thickness
    H = cfg.wall_height
    boxes = [
        _box((0.0, 0.0, -0.05), (hx + t, hy + t, 0.05), FLOOR_CLASS, rng),
        _box((hx + t / 2, 0.0, H / 2), (t / 2, hy + t, H / 2), WALL_CLASS, rng),
        _box((-hx - t / 2, 0.0, H / 2), (t / 2, hy + t, H / 2), WALL_CLASS, rng),
        _box((0.0, hy + t / 2, H / 2), (hx, t / 2, H / 2), WALL_CLASS, rng),
        _box((0.0, -hy - t / 2, H / 2), (hx, t / 2, H / 2), WALL_CLASS, rng),
    ]
    placed: list[tuple[np.ndarray, np.ndarray]] = []
    for _ in range(cfg.n_partitions):
        # a stub wall sticking out from one side, leaving a gap to walk around
        length = rng.uniform(0.3, 0.5) * (sx if rng.random() < 0.5 else sy)
        if rng.random() < 0.5:
            x = rng.uniform(-hx * 0.5, hx * 0.5)
            side = 1.0 if rng.random() < 0.5 else -1.0
            cy = side * (hy - length / 2)
            b = _box((x, cy, H / 2), (t / 2, length / 2, H / 2), WALL_CLASS, rng)
        else:
            y = rng.uniform(-hy * 0.5, hy * 0.5)
            side = 1.0 if rng.random() < 0.5 else -1.0
            cx = side * (hx - length / 2)
            b = _box((cx, y, H / 2), (length / 2, t / 2, H / 2), WALL_CLASS, rng)
        boxes.append(b)
        placed.append((b.lo, b.hi))
    lo_xy, hi_xy = cfg.furniture_half_xy
    lo_z, hi_z = cfg.furniture_half_z
    for _ in range(cfg.n_furniture):
        for _attempt in range(cfg.max_retries):
            half = np.array([rng.uniform(lo_xy, hi_xy), rng.uniform(lo_xy, hi_xy), rng.uniform(lo_z, hi_z)])
            cx = rng.uniform(-hx + half[0], hx - half[0])
            cy = rng.uniform(-hy + half[1], hy - half[1])
            center = np.array([cx, cy, half[2]])
            lo, hi = center - half, center + half
            if all(not _overlaps(lo, hi, plo, phi, gap=0.05) for plo, phi in placed):
                cls = int(rng.integers(2, cfg.num_classes))
                boxes.append(_box(center, half, cls, rng))
                placed.append((lo, hi))
                break
        else:
            raise GenerationError(f"could not place furniture after {cfg.max_retries} tries (seed {seed})")
    bounds_lo = (-hx - 2 * t, -hy - 2 * t, -0.2)
    bounds_hi = (hx + 2 * t, hy + 2 * t, H + 0.2)
    return SceneGraph(boxes, bounds_lo, bounds_hi, cfg.num_classes, int(seed))


# -- camera ------------------------------------------------------------------------------------

@dataclass(frozen=True)
class CameraPose:
    position: tuple[float, float, float]
    yaw: float = 0.0
    pitch: float = 0.0
    fx: float = 32.0
    fy: float = 32.0
    cx: float = 32.0
    cy: float = 32.0
    width: int = 64
    height: int = 64

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ContractViolation("focal lengths must be positive")
        if abs(self.pitch) >= math.pi / 2:
            raise ContractViolation("|pitch| must be below pi/2")

    @classmethod
    def with_fov(cls, position, yaw=0.0, pitch=0.0, width=64, height=64, hfov=math.pi / 2) -> "CameraPose":
        f = (width / 2) / math.tan(hfov / 2)
        return cls(tuple(float(v) for v in position), float(yaw), float(pitch), f, f, width / 2, height / 2, width, height)

    def axes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(forward, left, up) unit vectors in world coordinates."""
        cy, sy = math.cos(self.yaw), math.sin(self.yaw)
        cp, sp = math.cos(self.pitch), math.sin(self.pitch)
        fwd = np.array([cp * cy, cp * sy, sp])
        left = np.array([-sy, cy, 0.0])
        up = np.array([-sp * cy, -sp * sy, cp])
        return fwd, left, up

    def pixel_rays(self) -> np.ndarray:
        """Unnormalised ray directions [h, w, 3] with unit optical-axis component."""
        u = np.arange(self.width, dtype=np.float64)
        v = np.arange(self.height, dtype=np.float64)
        a = (self.cx - u) / self.fx
        b = (self.cy - v) / self.fy
        fwd, left, up = self.axes()
        return fwd[None, None, :] + a[None, :, None] * left[None, None, :] + b[:, None, None] * up[None, None, :]


@dataclass
class RenderedView:
    depth: np.ndarray  # [h, w] metres along optical axis, 0 = miss
    labels: np.ndarray  # [h, w] int, BACKGROUND where depth == 0
    color: np.ndarray  # [h, w, 3]
    pose: CameraPose | None = field(default=None, repr=False)


def cast_rays(scene: SceneGraph, origin: np.ndarray, dirs: np.ndarray, eps: float = 1e-9):
    """Nearest box hit per ray: (t [n], box index [n], -1 on miss).

    Slab test per axis; boxes that contain the origin are ignored.
    """
    lo, hi, _, _ = scene.arrays()
    n = dirs.shape[0]
    if lo.shape[0] == 0 or n == 0:
        return np.zeros(n), np.full(n, -1, dtype=np.int64)
    o = np.asarray(origin, dtype=np.float64)
    t_near = np.full((n, lo.shape[0]), -np.inf)
    t_far = np.full((n, lo.shape[0]), np.inf)
    for ax in range(3):
        d = dirs[:, ax][:, None]
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            t1 = (lo[None, :, ax] - o[ax]) / d
            t2 = (hi[None, :, ax] - o[ax]) / d
        a, b = np.minimum(t1, t2), np.maximum(t1, t2)
        par = (d == 0.0)[:, 0]
        if par.any():
            inside = (lo[:, ax] <= o[ax]) & (o[ax] <= hi[:, ax])
            a[par] = np.where(inside, -np.inf, np.inf)[None]
            b[par] = np.where(inside, np.inf, -np.inf)[None]
        np.maximum(t_near, a, out=t_near)
        np.minimum(t_far, b, out=t_far)
    hit = (t_near <= t_far) & (t_near > eps)
    t_near = np.where(hit, t_near, np.inf)
    idx = np.argmin(t_near, axis=1)
    t = t_near[np.arange(n), idx]
    miss = ~np.isfinite(t)
    idx = np.where(miss, -1, idx)
    t = np.where(miss, 0.0, t)
    return t, idx


def render_view(scene: SceneGraph, pose: CameraPose, label_noise: float = 0.0, noise_seed: int = 0) -> RenderedView:
    """Ray-cast every pixel against the scene's boxes; nearest hit wins.

    ``label_noise`` replaces that fraction of hit labels with random classes.
    """
    rays = pose.pixel_rays().reshape(-1, 3)
    t, idx = cast_rays(scene, np.asarray(pose.position), rays)
    _, _, ids, cols = scene.arrays()
    h, w = pose.height, pose.width
    hit = idx >= 0
    labels = np.full(h * w, BACKGROUND, dtype=np.int64)
    color = np.zeros((h * w, 3))
    if hit.any():
        labels[hit] = ids[idx[hit]]
        color[hit] = cols[idx[hit]]
    if label_noise > 0 and hit.any():
        g = make_rng(noise_seed)
        flip = hit & (g.random(h * w) < label_noise)
        labels[flip] = g.integers(0, scene.num_classes, size=int(flip.sum()))
    return RenderedView(t.reshape(h, w), labels.reshape(h, w), color.reshape(h, w, 3), pose)


R2R_PITCHES = (-0.5, 0.0, 0.5)


def panorama_poses(
    position,
    headings: int = 12,
    pitches=R2R_PITCHES,
    width: int = 64,
    height: int = 64,
    hfov: float = math.pi / 2,
    start_yaw: float = 0.0,
) -> list[CameraPose]:
    if headings < 1:
        raise ContractViolation("headings must be >= 1")
    poses = []
    for p in pitches:
        for k in range(headings):
            poses.append(CameraPose.with_fov(position, start_yaw + 2 * math.pi * k / headings, p, width, height, hfov))
    return poses


def render_panorama(scene: SceneGraph, position, headings: int = 12, pitches=R2R_PITCHES, **camera) -> list[RenderedView]:
    """Views ordered pitch-major, heading ascending, headings evenly over 2*pi."""
    return [render_view(scene, pose) for pose in panorama_poses(position, headings, pitches, **camera)]


def sample_free_position(scene: SceneGraph, rng: np.random.Generator, height: float = 1.5, margin: float = 0.3,
                         max_tries: int = 1000) -> tuple[float, float, float]:
    """Random camera position inside the bounds, at least ``margin`` from every box."""
    lo, hi, _, _ = scene.arrays()
    blo, bhi = np.asarray(scene.bounds_lo), np.asarray(scene.bounds_hi)
    for _ in range(max_tries):
        p = np.array([rng.uniform(blo[0] + 1.0, bhi[0] - 1.0), rng.uniform(blo[1] + 1.0, bhi[1] - 1.0), height])
        if lo.shape[0] == 0 or not np.any(np.all((p >= lo - margin) & (p <= hi + margin), axis=1)):
            return (float(p[0]), float(p[1]), float(p[2]))
    raise GenerationError("no free camera position found")


def points_on_surface(scene: SceneGraph, points: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    """Whether each point lies on some box face (within ``tol``)."""
    lo, hi, _, _ = scene.arrays()
    p = np.asarray(points, dtype=np.float64)
    if p.shape[0] == 0:
        return np.zeros(0, dtype=bool)
    if lo.shape[0] == 0:
        return np.zeros(p.shape[0], dtype=bool)
    P = p[:, None, :]
    inside = np.all((P >= lo[None] - tol) & (P <= hi[None] + tol), axis=2)
    on_face = np.any((np.abs(P - lo[None]) <= tol) | (np.abs(P - hi[None]) <= tol), axis=2)
    return np.any(inside & on_face, axis=1)
