"""Instruction-following agent: recurrent state, cross-modal attention, bilinear action scores.

Visual inputs are 16 egocentric tokens per step, either from the sparse 3D
encoder, from a small colour-panorama convnet, or both (fused: each visual
attention runs on both token sets and the two outputs are averaged).
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractViolation
from .navsim import (
    DIRS,
    NUM_SLOTS,
    SLOT_ANGLES,
    STOP,
    VOCAB,
    Episode,
    NavEnv,
    NavMetrics,
    absolute_to_relative,
    mean_metrics,
    relative_to_absolute,
    score,
)
from .nn import AdamW, Linear, LSTMCell, Module, MultiHeadAttention, PsiBlock, param
from .reconstruct import collate
from .rng import substream
from .sparse_conv import SparseEncoder
from .tensor import Tensor

log = logging.getLogger(__name__)

MODES = ("3d-only", "rgb-only", "fused")


@dataclass(frozen=True)
class AgentConfig:
    width: int = 64
    heads: int = 4
    angle_width: int = 16
    n_tokens: int = 16
    vocab_size: int = len(VOCAB)
    rgb_channels: int = 16
    rgb_shape: tuple[int, int] = (12, 48)
    shared_fusion: bool = True  # one set of visual attention weights for both modalities
    token_width: int | None = None  # 3D token width when it differs from the model width

    def __post_init__(self):
        if self.width % 2:
            raise ConfigurationError("width must be even for the bidirectional encoder")
        if self.width % self.heads:
            raise ConfigurationError(f"width {self.width} not divisible by {self.heads} heads")
        if self.angle_width % 4:
            raise ConfigurationError("angle width must be a multiple of 4")
        if self.rgb_shape[0] % 3 or self.rgb_shape[1] % 3 or (self.rgb_shape[0] // 3) * (self.rgb_shape[1] // 3) != 4 * self.n_tokens:
            raise ConfigurationError("rgb panorama must split into 3x3 patches forming 4 rows of n_tokens columns")

    @classmethod
    def desk(cls) -> "AgentConfig":
        return cls()

    @classmethod
    def paper(cls) -> "AgentConfig":
        return cls(width=1024, heads=64, angle_width=128, rgb_channels=256, token_width=2048)


def tile_angles(a: np.ndarray, width: int) -> np.ndarray:
    return np.tile(np.asarray(a, dtype=np.float64), width // 4)


# -- language ----------------------------------------------------------------------------------

@dataclass
class LanguageFeatures:
    f_L: Tensor  # [B, T, d]
    f_L_star: Tensor  # [B, d]
    mask: np.ndarray  # [B, T] real-token positions


def pad_tokens(seqs: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    if not seqs or any(len(s) == 0 for s in seqs):
        raise ContractViolation("instructions must be non-empty")
    n = max(len(s) for s in seqs)
    tok = np.zeros((len(seqs), n), dtype=np.int64)
    mask = np.zeros((len(seqs), n), dtype=bool)
    for i, s in enumerate(seqs):
        tok[i, :len(s)] = s
        mask[i, :len(s)] = True
    return tok, mask


class LanguageEncoder(Module):
    """Token embeddings, one bidirectional LSTM layer, projected mean for the sentence feature."""

    def __init__(self, config: AgentConfig, rng=None):
        d = config.width
        self.embed = param((config.vocab_size, d), rng, 1.0)
        self.fwd = LSTMCell(d, d // 2, rng)
        self.bwd = LSTMCell(d, d // 2, rng)
        self.proj = Linear(d, d, rng)
        self.config = config

    def __call__(self, seqs: list[list[int]]) -> LanguageFeatures:
        tok, mask = pad_tokens(seqs)
        if tok.max() >= self.config.vocab_size or tok.min() < 0:
            raise ContractViolation("unknown token id")
        B, n = tok.shape
        half = self.config.width // 2
        x = T.take_rows(self.embed, tok.reshape(-1)).reshape(B, n, self.config.width)
        zero = Tensor(np.zeros((B, half)))

        def run(cell, order):
            h, c, outs = zero, zero, [None] * n
            for t in order:
                m = mask[:, t:t + 1].astype(np.float64)
                h2, c2 = cell(x[:, t, :], h, c)
                # padded positions leave the state untouched
                h = h2 * m + h * (1.0 - m)
                c = c2 * m + c * (1.0 - m)
                outs[t] = h
            return T.stack(outs, axis=1)

        f = run(self.fwd, range(n))
        b = run(self.bwd, range(n - 1, -1, -1))
        f_L = T.concat([f, b], axis=-1)
        w = mask / mask.sum(axis=1, keepdims=True)
        mean = T.tsum(f_L * w[:, :, None], axis=1)
        return LanguageFeatures(f_L, self.proj(mean), mask)


def encode_instruction(tokens: list[int], model: "NavAgent") -> LanguageFeatures:
    """Single instruction; ``f_L`` is ``[T, d]`` and ``f_L_star`` is ``[d]``."""
    lf = model.lang([list(tokens)])
    return LanguageFeatures(lf.f_L.reshape(lf.f_L.shape[1:]), lf.f_L_star.reshape(model.config.width), lf.mask[0])


# -- colour branch ------------------------------------------------------------------------------

def rgb_patches(pano: np.ndarray) -> np.ndarray:
    """[B, H, W, 3] -> [B, H/3, W/3, 27] non-overlapping 3x3 patches."""
    B, H, W, C = pano.shape
    p = pano.reshape(B, H // 3, 3, W // 3, 3, C).transpose(0, 1, 3, 2, 4, 5)
    return p.reshape(B, H // 3, W // 3, 9 * C)


class RGBEncoder(Module):
    """3x3/stride-3 patch conv, a (rows x 1) column conv giving azimuth tokens,
    a learned token mixing and a final linear map to the token width."""

    def __init__(self, config: AgentConfig, rng=None):
        c1, d, n = config.rgb_channels, config.width, config.n_tokens
        self.patch = Linear(27, c1, rng)
        self.column = Linear(4 * c1, d, rng)
        mix = np.eye(n)
        if rng is not None:
            mix = mix + rng.normal(0.0, 0.1 / math.sqrt(n), size=(n, n))
        self.mix = Tensor(mix, requires_grad=True)
        self.out = Linear(d, d, rng)
        self.config = config

    def __call__(self, pano: np.ndarray) -> Tensor:
        pano = np.asarray(pano, dtype=np.float64)
        if pano.ndim == 3:
            pano = pano[None]
        if pano.shape[1:] != self.config.rgb_shape + (3,):
            raise ContractViolation(f"rgb panorama must be {self.config.rgb_shape + (3,)}, got {pano.shape[1:]}")
        B = pano.shape[0]
        x = T.relu(self.patch(Tensor(rgb_patches(pano) - 0.5)))  # [B, 4, n, c1]
        x = T.transpose(x, (0, 2, 1, 3)).reshape(B, self.config.n_tokens, -1)
        x = T.relu(self.column(x))
        x = self.mix @ x
        return self.out(x)


# -- navigation model -----------------------------------------------------------------------------

@dataclass
class AgentState:
    h: Tensor
    c: Tensor
    g: Tensor
    prev_angle: np.ndarray  # [B, 4]


class NavAgent(Module):
    def __init__(self, config: AgentConfig = AgentConfig(), rng=None, mode: str = "3d-only"):
        d, A = config.width, config.angle_width
        self.config = config
        self.mode = mode
        self.lang = LanguageEncoder(config, rng)
        self.init_h = Linear(d, d, rng)
        self.init_c = Linear(d, d, rng)
        self.init_g = Linear(d, d, rng)
        self.vis_pos = param((config.n_tokens, d), rng, 0.1)
        tw = config.token_width
        self.vis_proj = Linear(tw, d, rng) if tw is not None and tw != d else None
        self.attn_v = MultiHeadAttention(d, config.heads, rng)
        self.psi_v = PsiBlock(d, rng)
        self.lstm = LSTMCell(d + A, d, rng)
        self.attn_l = MultiHeadAttention(d, config.heads, rng)
        self.psi_l = PsiBlock(d, rng)
        self.attn_g = MultiHeadAttention(d, config.heads, rng)
        self.psi_g = PsiBlock(d, rng)
        self.w_b = param((d, A), rng, 1.0 / math.sqrt(d))
        self.stop_emb = param((A,), rng, 1.0)
        self.value = Linear(d, 1, rng)
        self.rgb = RGBEncoder(config, rng)
        if not config.shared_fusion:
            self.attn_v_rgb = MultiHeadAttention(d, config.heads, rng)
            self.attn_g_rgb = MultiHeadAttention(d, config.heads, rng)

    @property
    def mode(self) -> str:
        return self._mode

    @mode.setter
    def mode(self, value: str) -> None:
        if value not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}")
        self._mode = value

    def nav_parameters(self) -> list[Tensor]:
        """Everything except the colour encoder."""
        return [p for n, p in self.named_parameters() if not n.startswith("rgb.")]

    def visual_attend(self, query: Tensor, which: str, tokens3d: Tensor | None, tokens_rgb: Tensor | None) -> Tensor:
        """Attention of ``query`` [B, 1, d] over the visual tokens in the current mode."""
        own = self.attn_v if which == "v" else self.attn_g
        other = own if self.config.shared_fusion else (self.attn_v_rgb if which == "v" else self.attn_g_rgb)
        if tokens3d is not None and self.vis_proj is not None:
            tokens3d = self.vis_proj(tokens3d)
        if self.mode == "3d-only":
            kv = tokens3d + self.vis_pos
            return own(query, kv, kv)
        if self.mode == "rgb-only":
            kv = tokens_rgb + self.vis_pos
            return other(query, kv, kv)
        a = tokens3d + self.vis_pos
        b = tokens_rgb + self.vis_pos
        return (own(query, a, a) + other(query, b, b)) * 0.5


def init_state(f_L_star: Tensor, model: NavAgent) -> AgentState:
    """h0, c0, g0 from three separate linear maps of the sentence feature."""
    if f_L_star.shape[-1] != model.config.width:
        raise ContractViolation("sentence feature width differs from the model width")
    x = f_L_star if f_L_star.ndim == 2 else f_L_star.reshape(1, -1)
    return AgentState(model.init_h(x), model.init_c(x), model.init_g(x), np.zeros((x.shape[0], 4)))


def nav_step(state: AgentState, visual: Tensor | None, lang: LanguageFeatures, model: NavAgent,
             rgb_tokens: Tensor | None = None) -> tuple[AgentState, Tensor]:
    """One decision. Returns the new state and unmasked scores ``[B, 5]`` (4 moves, stop)."""
    cfg = model.config
    B = state.h.shape[0]
    need3d = model.mode in ("3d-only", "fused")
    needrgb = model.mode in ("rgb-only", "fused")
    if (need3d and visual is None) or (needrgb and rgb_tokens is None):
        raise ContractViolation(f"mode {model.mode} needs its visual tokens")
    tw = cfg.token_width or cfg.width
    for tok, w in ((visual if need3d else None, tw), (rgb_tokens if needrgb else None, cfg.width)):
        if tok is not None and tok.shape != (B, cfg.n_tokens, w):
            raise ContractViolation(f"visual tokens must be {(B, cfg.n_tokens, w)}, got {tok.shape}")
    d = cfg.width
    g = state.g.reshape(B, 1, d)
    v = model.psi_v(model.visual_attend(g, "v", visual, rgb_tokens), g).reshape(B, d)
    prev = Tensor(np.tile(state.prev_angle, (1, cfg.angle_width // 4)))
    h, c = model.lstm(T.concat([v, prev], axis=-1), state.h, state.c)
    h3 = h.reshape(B, 1, d)
    q_l = model.psi_l(model.attn_l(h3, lang.f_L, lang.f_L, key_mask=lang.mask), h3)
    g_new = model.psi_g(model.visual_attend(q_l, "g", visual, rgb_tokens), q_l).reshape(B, d)
    cand = Tensor(np.tile(SLOT_ANGLES, (1, cfg.angle_width // 4)))  # [4, A]
    keys = T.concat([cand, model.stop_emb.reshape(1, -1)], axis=0)  # [5, A]
    scores = (g_new @ model.w_b) @ T.transpose(keys, (1, 0))
    return AgentState(h, c, g_new, state.prev_angle), scores


def after_action(state: AgentState, slots: np.ndarray) -> AgentState:
    """Record the chosen slots' angle features for the next step (zeros after stop)."""
    slots = np.asarray(slots)
    prev = np.zeros((slots.shape[0], 4))
    move = slots < STOP
    prev[move] = SLOT_ANGLES[slots[move]]
    return AgentState(state.h, state.c, state.g, prev)


def score_mask(candidates: np.ndarray) -> np.ndarray:
    cand = np.asarray(candidates, dtype=bool).reshape(-1, 4)
    return np.concatenate([cand, np.ones((cand.shape[0], 1), dtype=bool)], axis=1)


# -- observation table ------------------------------------------------------------------------------

@dataclass
class ObservationTable:
    """Every (layout, cell, heading) observation, indexed for batched lookups."""

    index: dict[tuple[int, int, int, int], int]
    grids: list
    rgb: np.ndarray  # [N, 12, 48, 3]
    candidates: np.ndarray  # [N, 4]
    tokens3d: np.ndarray | None = None  # [N, 16, d] from a frozen encoder
    envs: dict[int, NavEnv] = field(default_factory=dict, repr=False)

    @classmethod
    def build(cls, envs: dict[int, NavEnv]) -> "ObservationTable":
        index, grids, rgb, cand = {}, [], [], []
        for seed in sorted(envs):
            env = envs[seed]
            for cell in env.layout.free_cells():
                for h in range(4):
                    index[(seed, cell[0], cell[1], h)] = len(grids)
                    grids.append(env.grid(cell, h))
                    rgb.append(env.rgb(cell, h))
                    cand.append(env.candidates(cell, h))
        return cls(index, grids, np.stack(rgb), np.stack(cand), None, dict(envs))

    def encode(self, encoder: SparseEncoder, batch: int = 32) -> None:
        out = []
        with T.no_grad():
            for i in range(0, len(self.grids), batch):
                chunk = self.grids[i:i + batch]
                out.append(encoder.encode_batch(collate(chunk), len(chunk)).data)
        self.tokens3d = np.concatenate(out, axis=0)

    def save(self, path, encoder_digest: str = "") -> None:
        keys = sorted(self.index, key=self.index.get)
        offsets = np.cumsum([0] + [g.k for g in self.grids])
        arrays = {
            "keys": np.array(keys, dtype=np.int64).reshape(-1, 4),
            "offsets": offsets,
            "voxel_indices": np.concatenate([g.indices for g in self.grids]) if self.grids else np.zeros((0, 4), np.int64),
            "voxel_labels": np.concatenate([g.labels for g in self.grids]) if self.grids else np.zeros((0, 0), bool),
            "rgb": self.rgb,
            "candidates": self.candidates,
            "encoder_digest": np.array(encoder_digest),
        }
        if self.tokens3d is not None:
            arrays["tokens3d"] = self.tokens3d
        with open(path, "wb") as f:
            np.savez(f, **arrays)

    @classmethod
    def load(cls, path, envs: dict[int, NavEnv], voxels) -> tuple["ObservationTable", str]:
        """The table plus the digest of the encoder its tokens came from ('' when absent)."""
        from .reconstruct import SparseVoxelGrid

        with np.load(path) as z:
            arr = {k: z[k] for k in z.files}  # each NpzFile lookup re-reads the member
        keys, off = arr["keys"], arr["offsets"]
        idx, lab = arr["voxel_indices"], arr["voxel_labels"]
        grids = [SparseVoxelGrid(voxels, idx[a:b], lab[a:b]) for a, b in zip(off[:-1], off[1:])]
        index = {tuple(int(v) for v in k): i for i, k in enumerate(keys)}
        return cls(index, grids, arr["rgb"], arr["candidates"], arr.get("tokens3d"), dict(envs)), str(arr["encoder_digest"])

    def lookup(self, seeds, cells, headings) -> np.ndarray:
        return np.array([self.index[(int(s), int(c[0]), int(c[1]), int(h) % 4)] for s, c, h in zip(seeds, cells, headings)])


def visual_inputs(model: NavAgent, table: ObservationTable, rows: np.ndarray, encoder: SparseEncoder | None = None,
                  rgb_cache: Tensor | None = None) -> tuple[Tensor | None, Tensor | None]:
    tok3d = tokrgb = None
    if model.mode in ("3d-only", "fused"):
        if encoder is not None:
            grids = [table.grids[r] for r in rows]
            tok3d = encoder.encode_batch(collate(grids), len(grids))
        else:
            if table.tokens3d is None:
                raise ConfigurationError("observation table has no 3D tokens; call encode() first")
            tok3d = Tensor(table.tokens3d[rows])
    if model.mode in ("rgb-only", "fused"):
        tokrgb = model.rgb(table.rgb[rows])
    return tok3d, tokrgb


# -- losses ------------------------------------------------------------------------------------------

def teacher_trace(ep: Episode) -> tuple[list[tuple[int, int]], list[int], list[int]]:
    """(cells, headings, relative slots) visited and chosen by the teacher."""
    cells = list(ep.path)
    heads = [ep.start[2]]
    slots = []
    for a in ep.actions:
        if a == STOP:
            slots.append(STOP)
        else:
            slots.append(absolute_to_relative(heads[-1], a))
            heads.append(a)
    return cells, heads, slots


def il_loss(model: NavAgent, episodes: list[Episode], table: ObservationTable,
            encoder: SparseEncoder | None = None) -> Tensor:
    """Teacher-forced cross-entropy summed over steps, averaged over episodes."""
    B = len(episodes)
    traces = [teacher_trace(e) for e in episodes]
    lang = model.lang([e.tokens for e in episodes])
    state = init_state(lang.f_L_star, model)
    seeds = [e.layout_seed for e in episodes]
    total = None
    for t in range(max(len(tr[2]) for tr in traces)):
        active = np.array([t < len(tr[2]) for tr in traces])
        cells = [tr[0][min(t, len(tr[0]) - 1)] for tr in traces]
        heads = [tr[1][min(t, len(tr[1]) - 1)] for tr in traces]
        target = np.array([tr[2][t] if t < len(tr[2]) else STOP for tr in traces])
        rows = table.lookup(seeds, cells, heads)
        tok3d, tokrgb = visual_inputs(model, table, rows, encoder)
        state, scores = nav_step(state, tok3d, lang, model, tokrgb)
        ce = T.cross_entropy(scores, target, reduction="sum", mask=score_mask(table.candidates[rows]),
                             weights=active.astype(np.float64))
        total = ce if total is None else total + ce
        state = after_action(state, target)
    return total * (1.0 / B)


@dataclass
class Rollout:
    paths: list[list[tuple[int, int]]]
    log_probs: list[Tensor]  # per step, [B]
    values: list[Tensor]  # per step, [B]
    rewards: np.ndarray  # [B, steps]
    active: np.ndarray  # [B, steps]


def rollout(model: NavAgent, episodes: list[Episode], table: ObservationTable, max_steps: int = 15,
            rng: np.random.Generator | None = None, encoder: SparseEncoder | None = None,
            success_radius: int = 1) -> Rollout:
    """Run the policy: sampled when ``rng`` is given, greedy otherwise.

    Rewards: cells of progress toward the goal per move; +2 for stopping
    within the success radius, -2 otherwise. Hitting ``max_steps`` counts as
    stopping where the agent stands.
    """
    B = len(episodes)
    lang = model.lang([e.tokens for e in episodes])
    state = init_state(lang.f_L_star, model)
    seeds = [e.layout_seed for e in episodes]
    cells = [tuple(e.start[:2]) for e in episodes]
    heads = [e.start[2] for e in episodes]
    dist = [table.envs[e.layout_seed].layout.distances_from(tuple(e.goal)) for e in episodes]
    done = np.zeros(B, dtype=bool)
    paths = [[c] for c in cells]
    logps, values, rewards, actives = [], [], [], []
    for t in range(max_steps + 1):
        rows = table.lookup(seeds, cells, heads)
        tok3d, tokrgb = visual_inputs(model, table, rows, encoder)
        state, scores = nav_step(state, tok3d, lang, model, tokrgb)
        mask = score_mask(table.candidates[rows])
        if t == max_steps:
            mask[:, :4] = False  # out of moves
        lsm = T.log_softmax(scores, mask)
        if rng is not None:
            p = np.exp(lsm.data) * mask
            p /= p.sum(axis=1, keepdims=True)
            slots = np.array([rng.choice(NUM_SLOTS, p=p[b]) for b in range(B)])
        else:
            slots = np.where(mask, scores.data, -np.inf).argmax(axis=1)
        slots = np.where(done, STOP, slots)
        act = ~done
        r = np.zeros(B)
        for b in np.flatnonzero(act):
            if slots[b] == STOP:
                r[b] = 2.0 if dist[b][cells[b]] <= success_radius else -2.0
                done[b] = True
            else:
                d = relative_to_absolute(heads[b], int(slots[b]))
                nxt = (cells[b][0] + DIRS[d][0], cells[b][1] + DIRS[d][1])
                r[b] = float(dist[b][cells[b]] - dist[b][nxt])
                cells[b], heads[b] = nxt, d
                paths[b].append(nxt)
        logps.append(T.getitem(lsm, (np.arange(B), slots)))
        values.append(model.value(state.h).reshape(B))
        rewards.append(r)
        actives.append(act)
        state = after_action(state, slots)
        if done.all():
            break
    return Rollout(paths, logps, values, np.stack(rewards, axis=1), np.stack(actives, axis=1))


def discounted_returns(rewards: np.ndarray, active: np.ndarray, gamma: float) -> np.ndarray:
    out = np.zeros_like(rewards)
    run = np.zeros(rewards.shape[0])
    for t in range(rewards.shape[1] - 1, -1, -1):
        run = np.where(active[:, t], rewards[:, t] + gamma * run, 0.0)
        out[:, t] = run
    return out


def a2c_loss(ro: Rollout, gamma: float = 0.9, value_coef: float = 0.5) -> tuple[Tensor, np.ndarray]:
    """Policy-gradient plus value regression on a sampled rollout; also returns the advantages."""
    R = discounted_returns(ro.rewards, ro.active, gamma)
    B = R.shape[0]
    total = None
    advs = np.zeros_like(R)
    for t, (lp, v) in enumerate(zip(ro.log_probs, ro.values)):
        m = ro.active[:, t].astype(np.float64)
        adv = (R[:, t] - v.data) * m
        advs[:, t] = adv
        pg = -T.tsum(lp * adv)
        vl = T.tsum(T.square(v - R[:, t]) * m) * value_coef
        term = pg + vl
        total = term if total is None else total + term
    return total * (1.0 / B), advs


# -- distillation -------------------------------------------------------------------------------------

def param_digest(module: Module) -> str:
    h = hashlib.sha256()
    for name, p in module.named_parameters():
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


@dataclass(frozen=True)
class DistillConfig:
    epochs: int = 30
    lr: float = 3e-3
    batch_size: int = 64
    weight_decay: float = 0.0
    seed: int = 0


def distill_rgb_branch(table: ObservationTable, encoder: SparseEncoder, rgb_encoder: RGBEncoder,
                       cfg: DistillConfig = DistillConfig(), rows: np.ndarray | None = None) -> float:
    """Train ``rgb_encoder`` to reproduce the frozen 3D tokens; returns the final MSE."""
    if len(table.grids) != table.rgb.shape[0]:
        raise ContractViolation("grids and colour panoramas are not paired")
    rows = np.arange(len(table.grids)) if rows is None else np.asarray(rows)
    before = param_digest(encoder)
    target = np.empty((len(table.grids), rgb_encoder.config.n_tokens, rgb_encoder.config.width))
    with T.no_grad():
        for i in range(0, len(rows), 32):
            r = rows[i:i + 32]
            target[r] = encoder.encode_batch(collate([table.grids[j] for j in r]), len(r)).data
    opt = AdamW(rgb_encoder.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = substream(cfg.seed, "distill")
    for _ in range(cfg.epochs):
        order = rows[rng.permutation(len(rows))]
        for i in range(0, len(order), cfg.batch_size):
            r = order[i:i + cfg.batch_size]
            loss = T.mse(rgb_encoder(table.rgb[r]), Tensor(target[r]))
            opt.zero_grad()
            T.backward(loss)
            opt.step()
    with T.no_grad():
        final = float(np.mean([
            np.mean((rgb_encoder(table.rgb[rows[i:i + 256]]).data - target[rows[i:i + 256]]) ** 2)
            for i in range(0, len(rows), 256)
        ]))
    if param_digest(encoder) != before:
        raise ContractViolation("distillation modified the frozen 3D encoder")
    return final


# -- training ------------------------------------------------------------------------------------------

@dataclass(frozen=True)
class StageConfig:
    stage: str = "B"
    mode: str = "3d-only"
    lr: float = 1e-3
    epochs: int = 10
    lam: float = 0.2
    batch_size: int = 16
    weight_decay: float = 0.01
    gamma: float = 0.9
    max_steps: int = 15
    freeze_encoder: bool = True
    rgb_lr: float | None = None  # colour-branch learning rate, defaults to lr
    seed: int = 0

    def __post_init__(self):
        if self.stage not in ("B", "C"):
            raise ConfigurationError("stage must be B or C")
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}")
        if self.lam < 0 or self.lr < 0 or self.epochs < 0 or self.batch_size < 1:
            raise ConfigurationError("lam, lr and epochs must be non-negative, batch_size positive")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "StageConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"stage config is not valid JSON: {e}") from None
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown stage config keys {sorted(unknown)}")
        return cls(**raw)

    @classmethod
    def load(cls, path) -> "StageConfig":
        return cls.from_json(Path(path).read_text())


def evaluate(model: NavAgent, episodes: list[Episode], table: ObservationTable, max_steps: int = 15,
             batch_size: int = 64, encoder: SparseEncoder | None = None) -> tuple[NavMetrics, list[NavMetrics]]:
    """Greedy decoding; mean metrics and the per-episode list."""
    per = []
    with T.no_grad():
        for i in range(0, len(episodes), batch_size):
            chunk = episodes[i:i + batch_size]
            ro = rollout(model, chunk, table, max_steps, None, encoder)
            for ep, path in zip(chunk, ro.paths):
                per.append(score(table.envs[ep.layout_seed].layout, ep, path, max_steps=max_steps))
    return mean_metrics(per), per


@dataclass
class TrainHistory:
    epochs: list[int] = field(default_factory=list)
    il: list[float] = field(default_factory=list)
    a2c: list[float] = field(default_factory=list)
    metrics: dict[str, list[NavMetrics]] = field(default_factory=dict)


def train_nav(episodes: list[Episode], model: NavAgent, cfg: StageConfig, table: ObservationTable,
              eval_sets: dict[str, list[Episode]] | None = None, encoder: SparseEncoder | None = None,
              on_epoch=None) -> TrainHistory:
    """IL (+ lam * A2C) with AdamW; deterministic per ``cfg.seed``.

    With a frozen encoder the table's precomputed 3D tokens are used; an
    unfrozen ``encoder`` is finetuned along with the agent.
    """
    if cfg.mode in ("3d-only", "fused") and table.tokens3d is None and encoder is None:
        raise ConfigurationError("3D modes need an encoder checkpoint or precomputed tokens")
    model.mode = cfg.mode
    live_encoder = None if cfg.freeze_encoder else encoder
    params = model.nav_parameters()
    if cfg.mode != "3d-only":
        params = params + model.rgb.parameters()
    if live_encoder is not None:
        params = params + live_encoder.parameters()
    opt = AdamW(model.nav_parameters() + (live_encoder.parameters() if live_encoder else []), lr=cfg.lr,
                weight_decay=cfg.weight_decay)
    rgb_opt = AdamW(model.rgb.parameters(), lr=cfg.rgb_lr if cfg.rgb_lr is not None else cfg.lr,
                    weight_decay=cfg.weight_decay) if cfg.mode != "3d-only" else None
    order_rng = substream(cfg.seed, "nav-order", ord(cfg.stage))
    sample_rng = substream(cfg.seed, "rollout", ord(cfg.stage))
    hist = TrainHistory()
    for epoch in range(cfg.epochs):
        order = order_rng.permutation(len(episodes))
        il_sum = a2c_sum = 0.0
        nb = 0
        for i in range(0, len(order), cfg.batch_size):
            batch = [episodes[j] for j in order[i:i + cfg.batch_size]]
            T.zero_grad(params)
            loss = il_loss(model, batch, table, live_encoder)
            il_sum += loss.item()
            if cfg.lam > 0:
                ro = rollout(model, batch, table, cfg.max_steps, sample_rng, live_encoder)
                rl, _ = a2c_loss(ro, cfg.gamma)
                a2c_sum += rl.item()
                loss = loss + rl * cfg.lam
            T.backward(loss)
            for p in params:
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
            opt.step()
            if rgb_opt is not None:
                rgb_opt.step()
            nb += 1
        hist.epochs.append(epoch)
        hist.il.append(il_sum / max(nb, 1))
        hist.a2c.append(a2c_sum / max(nb, 1))
        for split, eps in (eval_sets or {}).items():
            m, _ = evaluate(model, eps, table, cfg.max_steps, encoder=live_encoder)
            hist.metrics.setdefault(split, []).append(m)
        log.info("stage %s epoch %d il %.4f a2c %.4f %s", cfg.stage, epoch, hist.il[-1], hist.a2c[-1],
                 {k: round(v[-1].SR, 3) for k, v in hist.metrics.items()})
        if on_epoch is not None:
            on_epoch(epoch, hist)
    return hist


# -- statistics -----------------------------------------------------------------------------------------

def sign_test(a, b, direction: str = "greater") -> tuple[float, int, int]:
    """One-sided sign test that ``a`` beats ``b`` pairwise; ties are dropped.

    Returns (p-value, wins, non-tied pairs).
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractViolation("paired samples must have equal length")
    diff = a - b if direction == "greater" else b - a
    n = int(np.sum(diff != 0))
    wins = int(np.sum(diff > 0))
    if n == 0:
        return 1.0, 0, 0
    p = sum(math.comb(n, k) for k in range(wins, n + 1)) / 2.0 ** n
    return p, wins, n
