"""Sparse 3D convolutions over COO voxel sites and the scene encoder built on them.

Neighbour lookup uses sorted linear site keys and ``np.searchsorted``; each
(kernel offset, input row, output row) triple goes into a rulebook, and the
convolution becomes one gather-matmul-scatter per offset. Offsets are
processed in a fixed order, so forward and backward are deterministic.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractViolation
from .nn import Module
from .reconstruct import DESK_VOXELS, PAPER_VOXELS, SparseVoxelGrid, VoxelConfig
from .tensor import Tensor


@dataclass
class SparseFeatureMap:
    indices: np.ndarray  # [k, 4] (batch, x, y, z), sorted
    features: Tensor  # [k, D]
    dims: tuple[int, int, int]
    batch_size: int
    stride: int = 1

    def __post_init__(self):
        if self.features.shape[0] != self.indices.shape[0]:
            raise ContractViolation("feature rows must match site count")

    @property
    def k(self) -> int:
        return self.indices.shape[0]

    def dense(self) -> np.ndarray:
        """[B, X, Y, Z, D] array with zeros at inactive sites."""
        out = np.zeros((self.batch_size,) + tuple(self.dims) + (self.features.shape[1],))
        b, x, y, z = self.indices.T
        out[b, x, y, z] = self.features.data
        return out

    @classmethod
    def from_grid(cls, grid: SparseVoxelGrid, batch_size: int | None = None, coords: bool = False) -> "SparseFeatureMap":
        """Multi-hot label features, optionally followed by voxel-centre coordinates scaled to [-1, 1]."""
        B = batch_size if batch_size is not None else max(grid.batch_size(), 1)
        feats = grid.labels.astype(np.float64)
        if coords:
            xyz = grid.voxel_centers() / np.asarray(grid.config.half_range)
            feats = np.concatenate([feats, xyz], axis=1)
        return cls(grid.indices.copy(), Tensor(feats), grid.config.dims, B, 1)


def site_keys(indices: np.ndarray, dims) -> np.ndarray:
    X, Y, Z = dims
    b, x, y, z = (indices[:, i].astype(np.int64) for i in range(4))
    return ((b * X + x) * Y + y) * Z + z


def keys_to_indices(keys: np.ndarray, dims) -> np.ndarray:
    X, Y, Z = dims
    z = keys % Z
    y = (keys // Z) % Y
    x = (keys // (Y * Z)) % X
    b = keys // (X * Y * Z)
    return np.stack([b, x, y, z], axis=1).astype(np.int64)


def _lookup(sorted_keys: np.ndarray, query: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pos = np.searchsorted(sorted_keys, query)
    pos_c = np.minimum(pos, max(sorted_keys.shape[0] - 1, 0))
    found = (pos < sorted_keys.shape[0]) & (sorted_keys[pos_c] == query) if sorted_keys.shape[0] else np.zeros(query.shape, bool)
    return pos_c, found


def kernel_offsets(kernel, centered: bool) -> list[tuple[int, int, int]]:
    kx, ky, kz = kernel
    if centered:
        rx, ry, rz = kx // 2, ky // 2, kz // 2
        return list(itertools.product(range(-rx, rx + 1), range(-ry, ry + 1), range(-rz, rz + 1)))
    return list(itertools.product(range(kx), range(ky), range(kz)))


Rule = tuple[int, np.ndarray, np.ndarray]  # (offset id, input rows, output rows)


def submanifold_rules(indices: np.ndarray, dims, kernel=(3, 3, 3)) -> list[Rule]:
    if any(k % 2 == 0 for k in kernel):
        raise ContractViolation("submanifold convolution needs odd kernel sizes")
    keys = site_keys(indices, dims)
    rows = np.arange(indices.shape[0])
    dims_a = np.asarray(dims)
    rules = []
    for oid, off in enumerate(kernel_offsets(kernel, centered=True)):
        nb = indices[:, 1:4] + np.asarray(off)
        ok = np.all((nb >= 0) & (nb < dims_a), axis=1)
        if not ok.any():
            continue
        q = site_keys(np.concatenate([indices[ok, :1], nb[ok]], axis=1), dims)
        pos, found = _lookup(keys, q)
        if found.any():
            rules.append((oid, pos[found], rows[ok][found]))
    return rules


def strided_rules(indices: np.ndarray, dims, kernel=(2, 2, 2), stride: int = 2):
    """Rulebook, output sites and output dims for a strided (downsampling) conv."""
    out_dims = tuple((d - k) // stride + 1 for d, k in zip(dims, kernel))
    if any(d < 1 for d in out_dims):
        raise ContractViolation(f"kernel {kernel} does not fit dims {dims}")
    od = np.asarray(out_dims)
    cand = []
    per_off = []
    for oid, off in enumerate(kernel_offsets(kernel, centered=False)):
        rel = indices[:, 1:4] - np.asarray(off)
        ok = np.all(rel >= 0, axis=1) & np.all(rel % stride == 0, axis=1)
        out = rel // stride
        ok &= np.all(out < od, axis=1)
        oi = np.concatenate([indices[:, :1], out], axis=1)[ok]
        per_off.append((oid, np.nonzero(ok)[0], oi))
        cand.append(oi)
    allc = np.concatenate(cand) if cand else np.zeros((0, 4), np.int64)
    out_keys = np.unique(site_keys(allc, out_dims)) if allc.shape[0] else np.zeros(0, np.int64)
    out_idx = keys_to_indices(out_keys, out_dims)
    rules = []
    for oid, in_rows, oi in per_off:
        if in_rows.shape[0] == 0:
            continue
        pos, found = _lookup(out_keys, site_keys(oi, out_dims))
        assert found.all()
        rules.append((oid, in_rows, pos))
    return rules, out_idx, out_dims


def rulebook_conv(x: Tensor, weight: Tensor, rules: list[Rule], n_out: int) -> Tensor:
    """sum over offsets of scatter(out_rows, x[in_rows] @ W[offset]).

    Within one offset every output row receives at most one input row, so
    plain fancy-index accumulation is exact.
    """
    K = int(np.prod(weight.shape[:-2]))
    din, dout = weight.shape[-2:]
    if x.shape[1] != din:
        raise ContractViolation(f"input width {x.shape[1]} != kernel input width {din}")
    W = weight.data.reshape(K, din, dout)
    out = np.zeros((n_out, dout))
    for oid, i_in, i_out in rules:
        out[i_out] += x.data[i_in] @ W[oid]

    def bw(g):
        gx = np.zeros_like(x.data) if x.requires_grad else None
        gw = np.zeros_like(W) if weight.requires_grad else None
        for oid, i_in, i_out in rules:
            go = g[i_out]
            if gx is not None:
                gx[i_in] += go @ W[oid].T
            if gw is not None:
                gw[oid] += x.data[i_in].T @ go
        return gx, (gw.reshape(weight.shape) if gw is not None else None)

    return T.custom_op(out, (x, weight), bw, "sparse_conv")


def sparse_conv3d(
    inp: SparseFeatureMap,
    weight: Tensor,
    stride: int = 1,
    mode: str = "submanifold",
    bias: Tensor | None = None,
) -> SparseFeatureMap:
    """Sparse convolution; ``weight`` is ``[kx, ky, kz, Din, Dout]``."""
    if weight.ndim != 5:
        raise ContractViolation("weight must be [kx, ky, kz, Din, Dout]")
    kernel = weight.shape[:3]
    if inp.features.shape[1] != weight.shape[3]:
        raise ContractViolation(f"input width {inp.features.shape[1]} != kernel input width {weight.shape[3]}")
    if mode == "submanifold":
        rules = submanifold_rules(inp.indices, inp.dims, kernel)
        out_idx, out_dims, out_stride = inp.indices, inp.dims, inp.stride
    elif mode == "strided":
        rules, out_idx, out_dims = strided_rules(inp.indices, inp.dims, kernel, stride)
        out_stride = inp.stride * stride
    else:
        raise ContractViolation(f"unknown mode {mode!r}")
    feats = rulebook_conv(inp.features, weight, rules, out_idx.shape[0])
    if bias is not None and out_idx.shape[0]:
        feats = feats + bias
    return SparseFeatureMap(out_idx, feats, tuple(out_dims), inp.batch_size, out_stride)


def sparse_relu(fm: SparseFeatureMap) -> SparseFeatureMap:
    return SparseFeatureMap(fm.indices, T.relu(fm.features), fm.dims, fm.batch_size, fm.stride)


def dense_conv3d_reference(dense: np.ndarray, weight: np.ndarray, stride: int = 1, mode: str = "submanifold", active=None) -> np.ndarray:
    """Plain dense convolution on ``[B, X, Y, Z, Din]``.

    Submanifold mode: zero-padded 'same' convolution, then zeroed wherever
    ``active`` (``[B, X, Y, Z]`` bool) is false. Strided mode: valid
    convolution with the kernel anchored at ``o * stride``.
    """
    kx, ky, kz, din, dout = weight.shape
    B, X, Y, Z, _ = dense.shape
    if mode == "submanifold":
        rx, ry, rz = kx // 2, ky // 2, kz // 2
        pad = np.zeros((B, X + 2 * rx, Y + 2 * ry, Z + 2 * rz, din))
        pad[:, rx:rx + X, ry:ry + Y, rz:rz + Z] = dense
        out = np.zeros((B, X, Y, Z, dout))
        for a in range(kx):
            for b in range(ky):
                for c in range(kz):
                    out += pad[:, a:a + X, b:b + Y, c:c + Z] @ weight[a, b, c]
        if active is not None:
            out *= active[..., None]
        return out
    OX, OY, OZ = (X - kx) // stride + 1, (Y - ky) // stride + 1, (Z - kz) // stride + 1
    out = np.zeros((B, OX, OY, OZ, dout))
    for a in range(kx):
        for b in range(ky):
            for c in range(kz):
                sl = dense[:, a:a + stride * (OX - 1) + 1:stride, b:b + stride * (OY - 1) + 1:stride, c:c + stride * (OZ - 1) + 1:stride]
                out += sl @ weight[a, b, c]
    return out


# -- encoder -----------------------------------------------------------------------------------

@dataclass(frozen=True)
class EncoderConfig:
    voxels: VoxelConfig
    width: int
    stage_channels: tuple[int, ...]
    downsample: tuple[bool, ...]
    kernel: int = 3
    pool: int = 2
    coord_features: bool = False  # append voxel coordinates so pooled tokens can keep height

    @property
    def in_channels(self) -> int:
        return self.voxels.num_classes + (3 if self.coord_features else 0)

    def __post_init__(self):
        if len(self.stage_channels) != len(self.downsample):
            raise ConfigurationError("one downsample flag per stage")
        if self.stage_channels[-1] != self.width:
            raise ConfigurationError("last stage must produce the token width")

    @property
    def token_grid(self) -> tuple[int, int, int]:
        dims = self.voxels.dims
        for ds in self.downsample:
            if ds:
                dims = tuple((d - self.pool) // self.pool + 1 for d in dims)
        return dims

    @property
    def output_shape(self) -> tuple[int, int]:
        X, Y, _ = self.token_grid
        return (X * Y, self.width)

    @classmethod
    def desk(cls, width: int = 64, voxels: VoxelConfig = DESK_VOXELS) -> "EncoderConfig":
        return cls(voxels, width, (width // 4, width // 2, width, width), (True, True, True, False))

    @classmethod
    def paper(cls, width: int = 2048, voxels: VoxelConfig = PAPER_VOXELS) -> "EncoderConfig":
        # 128 x 128 x 32 needs five halvings to reach the 4 x 4 token grid
        return cls(voxels, width, (width // 4, width // 2, width, width, width, width), (True,) * 5 + (False,))


ENCODER_PRESETS = {"desk": EncoderConfig.desk, "paper": EncoderConfig.paper}


class SparseEncoder(Module):
    """Alternating submanifold / strided sparse convs, Z mean-pool, 4x4 tokens."""

    def __init__(self, config: EncoderConfig, rng: np.random.Generator | None = None):
        self.config = config
        k, p = config.kernel, config.pool
        cin = config.in_channels
        self.sub_w, self.sub_b, self.down_w, self.down_b = [], [], [], []
        for cout, ds in zip(config.stage_channels, config.downsample):
            self.sub_w.append(self._init((k, k, k, cin, cout), rng))
            self.sub_b.append(Tensor(np.zeros(cout), requires_grad=True))
            if ds:
                self.down_w.append(self._init((p, p, p, cout, cout), rng))
                self.down_b.append(Tensor(np.zeros(cout), requires_grad=True))
            cin = cout

    @staticmethod
    def _init(shape, rng) -> Tensor:
        # He init with the fan-in a surface actually sees: about k*k of the k^3 taps are occupied
        fan_in = int(np.prod(shape[:-1])) // shape[0]
        if rng is None:
            return Tensor(np.zeros(shape), requires_grad=True)
        return Tensor(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape), requires_grad=True)

    def stages(self, fm: SparseFeatureMap) -> list[SparseFeatureMap]:
        """Every intermediate feature map (post-activation), in order."""
        out = []
        n = len(self.config.stage_channels)
        di = 0
        for s in range(n):
            fm = sparse_conv3d(fm, self.sub_w[s], 1, "submanifold", self.sub_b[s])
            last = s == n - 1
            if not last:
                fm = sparse_relu(fm)
            out.append(fm)
            if self.config.downsample[s]:
                fm = sparse_relu(sparse_conv3d(fm, self.down_w[di], self.config.pool, "strided", self.down_b[di]))
                di += 1
                out.append(fm)
        return out

    def encode_batch(self, grid: SparseVoxelGrid, batch_size: int | None = None) -> Tensor:
        """Tokens ``[B, X'*Y', D]`` for a (collated) grid."""
        if grid.config != self.config.voxels:
            raise ConfigurationError("grid voxel config does not match the encoder")
        B = batch_size if batch_size is not None else max(grid.batch_size(), 1)
        fm = SparseFeatureMap.from_grid(grid, B, self.config.coord_features)
        fm = self.stages(fm)[-1]
        X, Y, Z = fm.dims
        b, x, y = fm.indices[:, 0], fm.indices[:, 1], fm.indices[:, 2]
        rows = (b * X + x) * Y + y
        pooled = T.scatter_rows(fm.features, rows, B * X * Y) * (1.0 / Z)
        return pooled.reshape(B, X * Y, self.config.width)

    def __call__(self, grid: SparseVoxelGrid) -> Tensor:
        return encode_scene(grid, self)


def encode_scene(grid: SparseVoxelGrid, encoder: SparseEncoder) -> Tensor:
    """``[T, D]`` visual tokens for a single (batch-0) grid."""
    if grid.k and grid.batch_size() > 1:
        raise ContractViolation("encode_scene takes a single grid; use encode_batch")
    tokens = encoder.encode_batch(grid, 1)
    return tokens.reshape(tokens.shape[1:])
