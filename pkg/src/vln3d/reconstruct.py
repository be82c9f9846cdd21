"""Depth unprojection, panorama merging, and sparse multi-hot voxelization."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadMagicError, BadVersionError, ConfigurationError, ContractViolation, GridIOError, TruncatedFileError
from .scene import BACKGROUND, CameraPose, RenderedView

GRID_MAGIC = b"SVXG"
GRID_VERSION = 1


@dataclass
class SemanticPointCloud:
    points: np.ndarray  # [n, 3] metres
    classes: np.ndarray  # [n] int

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.classes = np.asarray(self.classes, dtype=np.int64).reshape(-1)
        if self.points.shape[0] != self.classes.shape[0]:
            raise ContractViolation("points and classes differ in length")

    def __len__(self) -> int:
        return self.points.shape[0]

    @classmethod
    def empty(cls) -> "SemanticPointCloud":
        return cls(np.zeros((0, 3)), np.zeros(0, dtype=np.int64))

    @classmethod
    def concat(cls, clouds) -> "SemanticPointCloud":
        clouds = list(clouds)
        if not clouds:
            return cls.empty()
        return cls(np.concatenate([c.points for c in clouds]), np.concatenate([c.classes for c in clouds]))


@dataclass(frozen=True)
class VoxelConfig:
    voxel_size: tuple[float, float, float] = (0.25, 0.25, 0.25)
    half_range: tuple[float, float, float] = (4.0, 4.0, 2.0)
    num_classes: int = 12

    def __post_init__(self):
        if any(s <= 0 for s in self.voxel_size) or any(r <= 0 for r in self.half_range):
            raise ConfigurationError("voxel sizes and ranges must be positive")
        for s, r in zip(self.voxel_size, self.half_range):
            n = 2 * r / s
            if abs(n - round(n)) > 1e-9:
                raise ConfigurationError(f"range {r} is not a whole number of {s} m voxels")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(round(2 * r / s)) for s, r in zip(self.voxel_size, self.half_range))

    @property
    def dense_shape(self) -> tuple[int, int, int, int]:
        return (self.num_classes,) + self.dims


DESK_VOXELS = VoxelConfig((0.25, 0.25, 0.25), (4.0, 4.0, 2.0), 12)
PAPER_VOXELS = VoxelConfig((0.125, 0.125, 0.25), (8.0, 8.0, 4.0), 150)
VOXEL_PRESETS = {"desk": DESK_VOXELS, "paper": PAPER_VOXELS}


@dataclass
class SparseVoxelGrid:
    """COO occupancy: ``indices`` rows are (batch, ix, iy, iz), ``labels`` multi-hot."""

    config: VoxelConfig
    indices: np.ndarray  # [k, 4] int64, lexicographically sorted
    labels: np.ndarray  # [k, C] bool

    def __len__(self) -> int:
        return self.indices.shape[0]

    @property
    def k(self) -> int:
        return self.indices.shape[0]

    def batch_size(self) -> int:
        return int(self.indices[:, 0].max()) + 1 if self.k else 0

    def __eq__(self, other) -> bool:
        if not isinstance(other, SparseVoxelGrid):
            return NotImplemented
        return (
            self.config == other.config
            and self.indices.shape == other.indices.shape
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.labels, other.labels)
        )

    def dense(self) -> np.ndarray:
        """[B, C, X, Y, Z] bool occupancy."""
        B = max(self.batch_size(), 1)
        out = np.zeros((B,) + self.config.dense_shape, dtype=bool)
        b, x, y, z = self.indices.T
        for c in range(self.config.num_classes):
            sel = self.labels[:, c]
            out[b[sel], c, x[sel], y[sel], z[sel]] = True
        return out

    def voxel_centers(self) -> np.ndarray:
        s = np.asarray(self.config.voxel_size)
        r = np.asarray(self.config.half_range)
        return (self.indices[:, 1:4] + 0.5) * s - r

    def split(self) -> list["SparseVoxelGrid"]:
        out = []
        for b in range(self.batch_size()):
            sel = self.indices[:, 0] == b
            idx = self.indices[sel].copy()
            idx[:, 0] = 0
            out.append(SparseVoxelGrid(self.config, idx, self.labels[sel].copy()))
        return out


# -- unprojection ------------------------------------------------------------------------------

def unproject_view(view: RenderedView, pose: CameraPose | None = None) -> SemanticPointCloud:
    """World-frame points for every hit pixel of a view."""
    pose = pose or view.pose
    if pose is None:
        raise ContractViolation("view has no pose")
    if view.depth.shape != view.labels.shape:
        raise ContractViolation("depth and label images differ in shape")
    hit = (view.depth > 0) & (view.labels != BACKGROUND)
    if not hit.any():
        return SemanticPointCloud.empty()
    v, u = np.nonzero(hit)
    d = view.depth[v, u]
    a = d * (pose.cx - u) / pose.fx  # along camera-left
    b = d * (pose.cy - v) / pose.fy  # along camera-up
    fwd, left, up = pose.axes()
    pts = np.asarray(pose.position)[None] + d[:, None] * fwd + a[:, None] * left + b[:, None] * up
    return SemanticPointCloud(pts, view.labels[v, u])


def rotate_quarter_turns(points: np.ndarray, quarters: int) -> np.ndarray:
    """Rotate xy by ``-quarters * 90`` degrees exactly (world -> agent heading frame)."""
    q = quarters % 4
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    if q == 0:
        return points.copy()
    if q == 1:
        return np.stack([y, -x, z], axis=1)
    if q == 2:
        return np.stack([-x, -y, z], axis=1)
    return np.stack([-y, x, z], axis=1)


def merge_panorama(views, poses, agent_position, heading_quarters: int = 0) -> SemanticPointCloud:
    """Concatenate per-view clouds, re-centred so the agent sits at the origin.

    ``heading_quarters`` additionally expresses the cloud in the frame of an
    agent facing ``heading_quarters * 90`` degrees (used by the grid world).
    """
    views, poses = list(views), list(poses)
    if len(views) != len(poses):
        raise ContractViolation(f"{len(views)} views but {len(poses)} poses")
    a = np.asarray(agent_position, dtype=np.float64)
    for p in poses:
        if not np.allclose(np.asarray(p.position), a, atol=1e-9):
            raise ContractViolation("all panorama poses must share the agent position")
    clouds = [unproject_view(v, p) for v, p in zip(views, poses)]
    merged = SemanticPointCloud.concat(clouds)
    pts = merged.points - a[None]
    if heading_quarters % 4:
        pts = rotate_quarter_turns(pts, heading_quarters)
    return SemanticPointCloud(pts, merged.classes)


# -- voxelization --------------------------------------------------------------------------------

def voxel_coords(points: np.ndarray, config: VoxelConfig) -> tuple[np.ndarray, np.ndarray]:
    """Integer voxel coordinates and an in-range mask."""
    s = np.asarray(config.voxel_size)
    r = np.asarray(config.half_range)
    idx = np.floor((points + r) / s).astype(np.int64)
    dims = np.asarray(config.dims)
    ok = np.all((idx >= 0) & (idx < dims), axis=1) & np.all(np.isfinite(points), axis=1)
    return idx, ok


def voxelize(cloud: SemanticPointCloud, config: VoxelConfig = DESK_VOXELS, batch_index: int = 0) -> SparseVoxelGrid:
    """Binary multi-hot occupancy of the in-range points, canonically sorted."""
    C = config.num_classes
    if len(cloud) and (cloud.classes.min() < 0 or cloud.classes.max() >= C):
        raise ContractViolation(f"class ids must lie in [0, {C})")
    idx, ok = voxel_coords(cloud.points, config)
    idx, cls = idx[ok], cloud.classes[ok]
    X, Y, Z = config.dims
    if idx.shape[0] == 0:
        return SparseVoxelGrid(config, np.zeros((0, 4), dtype=np.int64), np.zeros((0, C), dtype=bool))
    key = (idx[:, 0] * Y + idx[:, 1]) * Z + idx[:, 2]
    uniq, inv = np.unique(key, return_inverse=True)
    labels = np.zeros((uniq.shape[0], C), dtype=bool)
    labels[inv.reshape(-1), cls] = True
    ix = uniq // (Y * Z)
    iy = (uniq // Z) % Y
    iz = uniq % Z
    indices = np.stack([np.full_like(uniq, batch_index), ix, iy, iz], axis=1).astype(np.int64)
    return SparseVoxelGrid(config, indices, labels)


def collate(grids) -> SparseVoxelGrid:
    """Stack single grids into one batch; the batch column becomes list position."""
    grids = list(grids)
    if not grids:
        raise ContractViolation("nothing to collate")
    cfg = grids[0].config
    for g in grids[1:]:
        if g.config != cfg:
            raise ContractViolation("cannot collate grids with different voxel configs")
    idx = []
    for b, g in enumerate(grids):
        i = g.indices.copy()
        i[:, 0] = b
        idx.append(i)
    return SparseVoxelGrid(cfg, np.concatenate(idx), np.concatenate([g.labels for g in grids]))


# -- grid files ----------------------------------------------------------------------------------

def grid_to_bytes(grid: SparseVoxelGrid) -> bytes:
    cfg = grid.config
    C = cfg.num_classes
    head = GRID_MAGIC + struct.pack("<I", GRID_VERSION)
    head += struct.pack("<6d", *cfg.voxel_size, *cfg.half_range)
    head += struct.pack("<IQ", C, grid.k)
    rec = np.zeros(grid.k, dtype=np.dtype([("idx", "<u4", (4,)), ("lab", "u1", (math.ceil(C / 8),))]))
    if grid.k:
        if grid.indices.min() < 0:
            raise ContractViolation("negative voxel index")
        rec["idx"] = grid.indices
        rec["lab"] = np.packbits(grid.labels, axis=1, bitorder="little")
    return head + rec.tobytes()


def grid_from_bytes(data: bytes) -> SparseVoxelGrid:
    if len(data) < 4:
        raise TruncatedFileError("file shorter than magic")
    if data[:4] != GRID_MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}")
    header = 4 + 4 + 48 + 12
    if len(data) < header:
        raise TruncatedFileError("header truncated")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != GRID_VERSION:
        raise BadVersionError(f"unsupported grid version {version}")
    vals = struct.unpack_from("<6d", data, 8)
    C, k = struct.unpack_from("<IQ", data, 56)
    cfg = VoxelConfig(tuple(vals[:3]), tuple(vals[3:]), int(C))
    nb = math.ceil(C / 8)
    dt = np.dtype([("idx", "<u4", (4,)), ("lab", "u1", (nb,))])
    need = header + k * dt.itemsize
    if len(data) < need:
        raise TruncatedFileError(f"expected {need} bytes, got {len(data)}")
    if len(data) > need:
        raise GridIOError("trailing bytes after last record")
    rec = np.frombuffer(data, dtype=dt, count=k, offset=header)
    indices = rec["idx"].astype(np.int64).reshape(k, 4)
    labels = np.unpackbits(rec["lab"].reshape(k, nb), axis=1, count=C, bitorder="little").astype(bool)
    return SparseVoxelGrid(cfg, indices, labels)


def save_grid(path, grid: SparseVoxelGrid) -> None:
    Path(path).write_bytes(grid_to_bytes(grid))


def load_grid(path) -> SparseVoxelGrid:
    return grid_from_bytes(Path(path).read_bytes())
