"""Region-query pretraining: "is there an object of class c inside this box?"

Queries are answered against the sparse grid (voxel centres) by an exact
oracle, balanced per class, and used to train the sparse encoder through a
single cross-attention readout.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractViolation
from .nn import AdamW, Linear, Module, MultiHeadAttention, param
from .reconstruct import DESK_VOXELS, SemanticPointCloud, SparseVoxelGrid, VoxelConfig, collate, merge_panorama, voxelize
from .rng import substream
from .scene import SceneConfig, SceneGraph, generate_scene, render_panorama, sample_free_position
from .sparse_conv import EncoderConfig, SparseEncoder, encode_scene
from .tensor import Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class RegionQuery:
    """Box stored in tuple order (x1, y1, z1, x2, y2, z2), metres, agent-centric."""

    x1: float
    y1: float
    z1: float
    x2: float
    y2: float
    z2: float
    c: int

    def __post_init__(self):
        if not (self.x1 <= self.x2 and self.y1 <= self.y2 and self.z1 <= self.z2):
            raise ContractViolation(f"degenerate box {self}")
        if self.c < 0:
            raise ContractViolation("class id must be non-negative")

    @property
    def lo(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.z1])

    @property
    def hi(self) -> np.ndarray:
        return np.array([self.x2, self.y2, self.z2])

    def encoder_order(self) -> tuple[float, ...]:
        """Coordinates as the query encoder consumes them: (x1, x2, y1, y2, z1, z2)."""
        return (self.x1, self.x2, self.y1, self.y2, self.z1, self.z2)


@dataclass(frozen=True)
class QuerySample:
    query: RegionQuery
    answer: bool
    scene_id: int = -1


def query_oracle(source: SemanticPointCloud | SparseVoxelGrid, query: RegionQuery) -> bool:
    """Ground truth: any point (or voxel centre) of class c inside the closed box."""
    if isinstance(source, SparseVoxelGrid):
        if query.c >= source.config.num_classes or source.k == 0:
            return False
        sel = source.labels[:, query.c]
        pts = source.voxel_centers()[sel]
    else:
        pts = source.points[source.classes == query.c]
    if pts.shape[0] == 0:
        return False
    inside = np.all((pts >= query.lo) & (pts <= query.hi), axis=1)
    return bool(inside.any())


def _oracle_many(grid: SparseVoxelGrid, lo: np.ndarray, hi: np.ndarray, cls: np.ndarray) -> np.ndarray:
    """Vectorised grid oracle for many boxes at once."""
    centers = grid.voxel_centers()
    inside = np.all((centers[None] >= lo[:, None]) & (centers[None] <= hi[:, None]), axis=2)  # [n, k]
    has = grid.labels[:, cls].T  # [n, k]
    return np.any(inside & has, axis=1)


@dataclass(frozen=True)
class RegionSampling:
    extent_xy: tuple[float, float] = (0.5, 4.0)
    extent_z: tuple[float, float] = (0.5, 3.0)


def sample_regions(grid: SparseVoxelGrid, count: int, rng: np.random.Generator, scene_id: int = -1,
                   sampling: RegionSampling = RegionSampling()) -> list[QuerySample]:
    """Boxes anchored on uniformly chosen occupied voxels, random class, oracle answer."""
    if count <= 0 or grid.k == 0:
        return []
    C = grid.config.num_classes
    centers = grid.voxel_centers()
    anchor = centers[rng.integers(0, grid.k, size=count)]
    ext = np.stack([
        rng.uniform(*sampling.extent_xy, size=count),
        rng.uniform(*sampling.extent_xy, size=count),
        rng.uniform(*sampling.extent_z, size=count),
    ], axis=1)
    lo = anchor - rng.uniform(0.0, 1.0, size=(count, 3)) * ext
    hi = lo + ext
    cls = rng.integers(0, C, size=count)
    ans = _oracle_many(grid, lo, hi, cls)
    out = []
    for i in range(count):
        q = RegionQuery(*(float(v) for v in lo[i]), *(float(v) for v in hi[i]), int(cls[i]))
        out.append(QuerySample(q, bool(ans[i]), scene_id))
    return out


def balance_samples(samples: list[QuerySample], rng: np.random.Generator) -> list[QuerySample]:
    """Per class, truncate the larger of positives/negatives to the smaller count.

    Usually negatives dominate and every positive survives; for classes so
    common that positives dominate, positives are subsampled instead.
    """
    by_class: dict[int, tuple[list[int], list[int]]] = {}
    for i, s in enumerate(samples):
        pos, neg = by_class.setdefault(s.query.c, ([], []))
        (pos if s.answer else neg).append(i)
    keep: list[int] = []
    for c in sorted(by_class):
        pos, neg = by_class[c]
        n = min(len(pos), len(neg))
        for side in (pos, neg):
            if len(side) == n:
                keep.extend(side)
            elif n:
                keep.extend(int(j) for j in rng.choice(np.asarray(side), size=n, replace=False))
    keep.sort()
    order = rng.permutation(len(keep)) if keep else np.zeros(0, dtype=np.int64)
    return [samples[keep[j]] for j in order]


@dataclass(frozen=True)
class AugmentParams:
    scale: tuple[float, float] = (0.9, 1.1)
    yaw: float = math.pi  # rotation drawn from [-yaw, yaw]
    translation: tuple[float, float, float] = (0.5, 0.5, 0.1)
    noise_sigma: float = 0.02

    @classmethod
    def identity(cls) -> "AugmentParams":
        return cls((1.0, 1.0), 0.0, (0.0, 0.0, 0.0), 0.0)


def augment_cloud(cloud: SemanticPointCloud, rng: np.random.Generator, params: AugmentParams = AugmentParams()) -> SemanticPointCloud:
    """Scale, yaw-rotate about Z, translate, then jitter with Gaussian noise."""
    p = cloud.points
    s = rng.uniform(*params.scale) if params.scale[0] != params.scale[1] else params.scale[0]
    th = rng.uniform(-params.yaw, params.yaw) if params.yaw else 0.0
    t = np.array([rng.uniform(-r, r) if r else 0.0 for r in params.translation])
    out = p * s if s != 1.0 else p.copy()
    if th:
        c, sn = math.cos(th), math.sin(th)
        x, y = out[:, 0].copy(), out[:, 1].copy()
        out[:, 0] = c * x - sn * y
        out[:, 1] = sn * x + c * y
    if np.any(t):
        out = out + t
    if params.noise_sigma > 0:
        out = out + rng.normal(0.0, params.noise_sigma, size=out.shape)
    return SemanticPointCloud(out, cloud.classes.copy())


def compact_cloud(cloud: SemanticPointCloud, resolution: float = 0.05) -> SemanticPointCloud:
    """One representative point per (fine cell, class); keeps augmentation memory small."""
    if len(cloud) == 0:
        return cloud
    cell = np.floor(cloud.points / resolution).astype(np.int64)
    key = np.concatenate([cell, cloud.classes[:, None]], axis=1)
    _, first = np.unique(key, axis=0, return_index=True)
    first.sort()
    return SemanticPointCloud(cloud.points[first], cloud.classes[first])


# -- model -------------------------------------------------------------------------------------

@dataclass(frozen=True)
class PretextConfig:
    encoder: EncoderConfig
    heads: int = 4
    class_embed: int = 16
    null_token: bool = False  # learned extra key/value a head can attend to when nothing matches

    @property
    def width(self) -> int:
        return self.encoder.width

    @classmethod
    def desk(cls) -> "PretextConfig":
        return cls(EncoderConfig.desk(64), heads=4, class_embed=16)

    @classmethod
    def paper(cls) -> "PretextConfig":
        return cls(EncoderConfig.paper(2048), heads=64, class_embed=64)


class PretextModel(Module):
    def __init__(self, config: PretextConfig, rng: np.random.Generator | None = None):
        d = config.width
        C = config.encoder.voxels.num_classes
        n_tok = config.encoder.output_shape[0]
        self.config = config
        self.encoder = SparseEncoder(config.encoder, rng)
        self.class_embed = param((C, config.class_embed), rng, 1.0)
        self.query_fc1 = Linear(6 + config.class_embed, d, rng)
        self.query_fc2 = Linear(d, d, rng)
        self.token_pos = param((n_tok, d), rng, 0.1)
        self.null_token = param((1, d), rng, 0.1) if config.null_token else None
        self.attn = MultiHeadAttention(d, config.heads, rng)
        self.head_h = Linear(d, 2, rng, bias=False)
        self.head_q = Linear(d, 2, rng)

    def query_features(self, queries: list[RegionQuery]) -> tuple[np.ndarray, np.ndarray]:
        C = self.config.encoder.voxels.num_classes
        r = np.asarray(self.config.encoder.voxels.half_range)
        coords = np.array([q.encoder_order() for q in queries], dtype=np.float64).reshape(-1, 6)
        coords = coords / np.repeat(r, 2)[None]  # (x1,x2,y1,y2,z1,z2) / (Rx,Rx,Ry,Ry,Rz,Rz)
        cls = np.array([q.c for q in queries], dtype=np.int64)
        if cls.size and (cls.max() >= C or cls.min() < 0):
            raise ContractViolation(f"query class outside [0, {C})")
        return coords, cls

    def encode_query(self, queries: list[RegionQuery]) -> Tensor:
        """``q = MLP([box coords ; W_c[c]])``, shape ``[n, d]``."""
        coords, cls = self.query_features(queries)
        emb = T.take_rows(self.class_embed, cls)
        x = T.concat([Tensor(coords), emb], axis=-1)
        return self.query_fc2(T.gelu(self.query_fc1(x)))

    def logits(self, tokens: Tensor, q: Tensor, return_weights: bool = False):
        """``W_h Attn(q, F, F) + W_q q``; tokens ``[..., T, d]``, q ``[..., n, d]``."""
        kv = tokens + self.token_pos
        if self.null_token is not None:
            null = self.null_token
            if kv.ndim > 2:
                null = T.mul(Tensor(np.ones(kv.shape[:-2] + (1, 1))), null)
            kv = T.concat([kv, null], axis=-2)
        h = self.attn(q, kv, kv, return_weights=return_weights)
        if return_weights:
            h, w = h
            return self.head_h(h) + self.head_q(q), w
        return self.head_h(h) + self.head_q(q)


def encode_query(query: RegionQuery, model: PretextModel) -> Tensor:
    return model.encode_query([query]).reshape(model.config.width)


def answer_query(grid: SparseVoxelGrid, query: RegionQuery, model: PretextModel) -> Tensor:
    """Probabilities ``[False, True]`` for one query against one grid."""
    tokens = encode_scene(grid, model.encoder)
    q = model.encode_query([query])
    return T.softmax(model.logits(tokens, q)).reshape(2)


# -- data & training -----------------------------------------------------------------------------

@dataclass
class PretextScene:
    scene_id: int
    grid: SparseVoxelGrid
    cloud: SemanticPointCloud | None = None  # compacted, agent-centric; needed for augmentation


@dataclass
class PretextTrainConfig:
    epochs: int = 20
    lr: float = 1e-3
    weight_decay: float = 0.01
    batch_scenes: int = 8
    regions_per_scene: int = 256
    augment_prob: float = 0.0
    augment: AugmentParams = field(default_factory=AugmentParams)
    sampling: RegionSampling = field(default_factory=RegionSampling)
    seed: int = 0


@dataclass
class PretextMetrics:
    epoch: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)

    def as_rows(self) -> list[dict]:
        return [
            {"epoch": e, "train_loss": l, "train_acc": a, "val_acc": v}
            for e, l, a, v in zip(self.epoch, self.train_loss, self.train_acc, self.val_acc)
        ]


def scene_samples(scene: PretextScene, cfg: PretextTrainConfig, rng: np.random.Generator) -> list[QuerySample]:
    raw = sample_regions(scene.grid, cfg.regions_per_scene, rng, scene.scene_id, cfg.sampling)
    return balance_samples(raw, rng)


def augmented_scene(scene: PretextScene, rng: np.random.Generator, params: AugmentParams) -> PretextScene:
    """Transform the cloud, re-voxelize; labels are then re-derived by the oracle."""
    if scene.cloud is None:
        raise ConfigurationError("augmentation needs the scene point cloud")
    cloud = augment_cloud(scene.cloud, rng, params)
    return PretextScene(scene.scene_id, voxelize(cloud, scene.grid.config), cloud)


def _batch_forward(model: PretextModel, grids: list[SparseVoxelGrid], samples: list[list[QuerySample]]):
    """Logits ``[B*nq, 2]`` (padded), targets and row weights for a scene batch."""
    B = len(grids)
    tokens = model.encoder.encode_batch(collate(grids), B)
    nq = max(max(len(s) for s in samples), 1)
    flat, targets, weights = [], [], []
    dummy = samples_dummy(model)
    for s in samples:
        flat.extend(x.query for x in s)
        flat.extend([dummy] * (nq - len(s)))
        targets.extend(int(x.answer) for x in s)
        targets.extend([0] * (nq - len(s)))
        weights.extend([1.0] * len(s) + [0.0] * (nq - len(s)))
    q = model.encode_query(flat).reshape(B, nq, model.config.width)
    logits = model.logits(tokens, q).reshape(B * nq, 2)
    return logits, np.asarray(targets), np.asarray(weights)


def samples_dummy(model: PretextModel) -> RegionQuery:
    return RegionQuery(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0)


def evaluate_pretext(model: PretextModel, scenes: list[PretextScene], samples: list[list[QuerySample]], batch_scenes: int = 16) -> float:
    correct = total = 0
    with T.no_grad():
        for i in range(0, len(scenes), batch_scenes):
            grids = [s.grid for s in scenes[i:i + batch_scenes]]
            smp = samples[i:i + batch_scenes]
            if not any(smp):
                continue
            logits, tgt, w = _batch_forward(model, grids, smp)
            pred = logits.data.argmax(axis=1)
            m = w > 0
            correct += int((pred[m] == tgt[m]).sum())
            total += int(m.sum())
    return correct / total if total else float("nan")


def train_pretext(
    train: list[PretextScene],
    val: list[PretextScene],
    model: PretextModel,
    cfg: PretextTrainConfig,
    on_epoch=None,
) -> PretextMetrics:
    """AdamW on balanced region-query cross-entropy; deterministic per ``cfg.seed``."""
    if not train or not val:
        raise ConfigurationError("pretext training needs non-empty train and val splits")
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    val_samples = [scene_samples(s, cfg, np.random.Generator(np.random.PCG64([cfg.seed, 1, s.scene_id]))) for s in val]
    base_samples = [scene_samples(s, cfg, np.random.Generator(np.random.PCG64([cfg.seed, 2, s.scene_id]))) for s in train]
    params = model.parameters()
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    metrics = PretextMetrics()
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(train))
        loss_sum = 0.0
        correct = total = 0
        for i in range(0, len(order), cfg.batch_scenes):
            idx = order[i:i + cfg.batch_scenes]
            grids, smp = [], []
            for j in idx:
                sc = train[j]
                if cfg.augment_prob > 0 and rng.random() < cfg.augment_prob:
                    sc = augmented_scene(sc, rng, cfg.augment)
                    grids.append(sc.grid)
                    smp.append(scene_samples(sc, cfg, rng))
                else:
                    grids.append(sc.grid)
                    smp.append(base_samples[j])
            if not any(smp):
                continue
            logits, tgt, w = _batch_forward(model, grids, smp)
            n = w.sum()
            loss = T.cross_entropy(logits, tgt, reduction="sum", weights=w) * (1.0 / n)
            opt.zero_grad()
            T.backward(loss)
            opt.step()
            loss_sum += loss.item() * n
            m = w > 0
            correct += int((logits.data.argmax(1)[m] == tgt[m]).sum())
            total += int(n)
        metrics.epoch.append(epoch)
        metrics.train_loss.append(loss_sum / max(total, 1))
        metrics.train_acc.append(correct / max(total, 1))
        metrics.val_acc.append(evaluate_pretext(model, val, val_samples))
        log.info("pretext epoch %d loss %.4f train %.3f val %.3f", epoch, metrics.train_loss[-1], metrics.train_acc[-1], metrics.val_acc[-1])
        if on_epoch is not None:
            on_epoch(epoch, metrics)
    return metrics


def pretext_scene_from(scene: SceneGraph, voxels: VoxelConfig = DESK_VOXELS, camera_height: float = 1.5,
                       keep_cloud: bool = True) -> PretextScene:
    """Render a panorama at a seeded free spot of ``scene`` and voxelize around it."""
    pos = sample_free_position(scene, substream(scene.seed, "agent-position"), camera_height)
    views = render_panorama(scene, pos)
    cloud = merge_panorama(views, [v.pose for v in views], pos)
    grid = voxelize(cloud, voxels)
    return PretextScene(int(scene.seed), grid, compact_cloud(cloud) if keep_cloud else None)


def build_pretext_scene(seed: int, scene_config: SceneConfig | None = None, voxels: VoxelConfig = DESK_VOXELS,
                        camera_height: float = 1.5, keep_cloud: bool = True) -> PretextScene:
    """Generate a room and build its pretext sample."""
    scene = generate_scene(seed, scene_config or SceneConfig(num_classes=voxels.num_classes))
    return pretext_scene_from(scene, voxels, camera_height, keep_cloud)
