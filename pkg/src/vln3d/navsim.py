"""Grid-world navigation with panoramic observations and templated instructions.

The lattice has 2 m cells and four headings. Heading ``h`` is the yaw
``h * 90`` degrees, so 0 = east (+x), 1 = north (+y), 2 = west, 3 = south.
Agents act in their own frame: candidate slot ``r`` turns ``r`` quarter turns
counter-clockwise (0 forward, 1 left, 2 back, 3 right) and moves; slot 4 stops.
"""

from __future__ import annotations

import csv
import io
import json
import math
import threading
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ContractViolation, GenerationError, SamplingError
from .reconstruct import DESK_VOXELS, SemanticPointCloud, SparseVoxelGrid, VoxelConfig, merge_panorama, rotate_quarter_turns, voxelize
from .rng import make_rng, substream
from .scene import FLOOR_CLASS, WALL_CLASS, Box, SceneGraph, class_color, panorama_poses, render_view

CELL_SIZE = 2.0
CAMERA_HEIGHT = 1.5
STOP = 4
NUM_SLOTS = 5
DIRS = ((1, 0), (0, 1), (-1, 0), (0, -1))  # E N W S
HEADING_NAMES = ("east", "north", "west", "south")

CLASS_NAMES = ("floor", "wall", "chair", "table", "sofa", "bed", "lamp", "shelf", "plant", "desk", "cabinet", "stove")
LANDMARK_CLASSES = tuple(range(2, len(CLASS_NAMES)))
NUMBER_WORDS = ("zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine")
VOCAB_VERSION = "navsim-vocab/1"
VOCAB = (
    ("<pad>", "walk", "forward", "to", "the", "turn", "left", "right", "around", "stop", "near", "and", "then")
    + NUMBER_WORDS[1:]
    + CLASS_NAMES[2:]
)
TOKEN_ID = {w: i for i, w in enumerate(VOCAB)}


def encode_words(words: list[str]) -> list[int]:
    try:
        return [TOKEN_ID[w] for w in words]
    except KeyError as e:
        raise ContractViolation(f"word {e.args[0]!r} is not in {VOCAB_VERSION}") from None


def decode_tokens(tokens) -> list[str]:
    out = []
    for t in tokens:
        if not 0 <= int(t) < len(VOCAB):
            raise ContractViolation(f"token id {t} outside the vocabulary")
        out.append(VOCAB[int(t)])
    return out


# -- layouts -------------------------------------------------------------------------------------

@dataclass(frozen=True)
class LayoutConfig:
    size: int = 5
    n_landmarks: int = 7
    block_prob: float = 0.2
    min_free_frac: float = 0.6
    wall_height: float = 2.6
    max_retries: int = 100

    def __post_init__(self):
        if self.size < 4:
            raise ConfigurationError("layout size must be at least 4")
        if self.n_landmarks < 0:
            raise ConfigurationError("landmark count must be non-negative")


@dataclass
class Layout:
    seed: int
    config: LayoutConfig
    free: np.ndarray  # [size, size] bool, indexed [i, j] = (x, y)
    landmarks: list[tuple[int, tuple[int, int]]]  # (class id, cell)
    scene: SceneGraph = field(repr=False)

    @property
    def size(self) -> int:
        return self.config.size

    def node_id(self, cell) -> int:
        return int(cell[1]) * self.size + int(cell[0])

    def cell_of(self, node: int) -> tuple[int, int]:
        return (node % self.size, node // self.size)

    def is_free(self, cell) -> bool:
        i, j = cell
        return 0 <= i < self.size and 0 <= j < self.size and bool(self.free[i, j])

    def neighbors(self, cell) -> list[int]:
        """Absolute directions (0..3) whose neighbouring cell is free."""
        return [d for d, (dx, dy) in enumerate(DIRS) if self.is_free((cell[0] + dx, cell[1] + dy))]

    def free_cells(self) -> list[tuple[int, int]]:
        return sorted((tuple(map(int, c)) for c in np.argwhere(self.free)), key=self.node_id)

    def cell_center(self, cell) -> tuple[float, float, float]:
        off = (self.size - 1) / 2.0
        return ((cell[0] - off) * CELL_SIZE, (cell[1] - off) * CELL_SIZE, CAMERA_HEIGHT)

    def distances_from(self, cell) -> np.ndarray:
        """BFS hop counts from ``cell``; -1 where unreachable."""
        dist = np.full((self.size, self.size), -1, dtype=np.int64)
        dist[cell] = 0
        queue = deque([tuple(cell)])
        while queue:
            c = queue.popleft()
            for d in self.neighbors(c):
                n = (c[0] + DIRS[d][0], c[1] + DIRS[d][1])
                if dist[n] < 0:
                    dist[n] = dist[c] + 1
                    queue.append(n)
        return dist

    def landmark_classes(self) -> frozenset[int]:
        return frozenset(c for c, _ in self.landmarks)


def _largest_component(free: np.ndarray) -> np.ndarray:
    n = free.shape[0]
    label = np.full(free.shape, -1, dtype=np.int64)
    sizes = []
    for start in map(tuple, np.argwhere(free)):
        if label[start] >= 0:
            continue
        k = len(sizes)
        label[start] = k
        queue, count = deque([start]), 0
        while queue:
            c = queue.popleft()
            count += 1
            for dx, dy in DIRS:
                m = (c[0] + dx, c[1] + dy)
                if 0 <= m[0] < n and 0 <= m[1] < n and free[m] and label[m] < 0:
                    label[m] = k
                    queue.append(m)
        sizes.append(count)
    if not sizes:
        return np.zeros_like(free)
    return label == int(np.argmax(sizes))


def _layout_scene(seed: int, cfg: LayoutConfig, free: np.ndarray, landmarks, rng) -> SceneGraph:
    n = cfg.size
    half = n * CELL_SIZE / 2
    H, t = cfg.wall_height, 0.1

    def box(center, half_ext, cls):
        col = np.clip(class_color(cls) + rng.uniform(-0.05, 0.05, size=3), 0.0, 1.0)
        return Box(tuple(float(v) for v in center), tuple(float(v) for v in half_ext), int(cls), tuple(float(v) for v in col))

    boxes = [
        box((0.0, 0.0, -0.05), (half + t, half + t, 0.05), FLOOR_CLASS),
        box((half + t / 2, 0.0, H / 2), (t / 2, half + t, H / 2), WALL_CLASS),
        box((-half - t / 2, 0.0, H / 2), (t / 2, half + t, H / 2), WALL_CLASS),
        box((0.0, half + t / 2, H / 2), (half, t / 2, H / 2), WALL_CLASS),
        box((0.0, -half - t / 2, H / 2), (half, t / 2, H / 2), WALL_CLASS),
    ]
    off = (n - 1) / 2.0
    for i, j in np.argwhere(~free):
        boxes.append(box(((i - off) * CELL_SIZE, (j - off) * CELL_SIZE, H / 2), (CELL_SIZE / 2, CELL_SIZE / 2, H / 2), WALL_CLASS))
    for cls, (i, j) in landmarks:
        # pushed toward a corner so the agent standing at the cell centre stays clear
        hx, hy, hz = rng.uniform(0.2, 0.3), rng.uniform(0.2, 0.3), rng.uniform(0.25, 0.6)
        sx, sy = rng.choice([-1.0, 1.0], size=2)
        cx = (i - off) * CELL_SIZE + sx * (0.9 - hx)
        cy = (j - off) * CELL_SIZE + sy * (0.9 - hy)
        boxes.append(box((cx, cy, hz), (hx, hy, hz), cls))
    lo = (-half - 2 * t, -half - 2 * t, -0.2)
    hi = (half + 2 * t, half + 2 * t, H + 0.2)
    return SceneGraph(boxes, lo, hi, len(CLASS_NAMES), int(seed))


def generate_layout(seed: int, size: int = 5, n_landmarks: int = 7, config: LayoutConfig | None = None,
                    landmark_pool=LANDMARK_CLASSES) -> Layout:
    """Blocked cells become wall pillars; the largest free component is the graph."""
    cfg = config or LayoutConfig(size=size, n_landmarks=n_landmarks)
    pool = sorted(set(int(c) for c in landmark_pool))
    if cfg.n_landmarks > len(pool):
        raise ConfigurationError(f"{cfg.n_landmarks} landmarks need that many distinct classes")
    rng = make_rng(seed)
    n = cfg.size
    for _ in range(cfg.max_retries):
        free = _largest_component(rng.random((n, n)) >= cfg.block_prob)
        cells = np.argwhere(free)
        if len(cells) < max(cfg.min_free_frac * n * n, cfg.n_landmarks, 2):
            continue
        picks = rng.choice(len(cells), size=cfg.n_landmarks, replace=False)
        classes = rng.choice(pool, size=cfg.n_landmarks, replace=False)
        landmarks = sorted(
            ((int(c), (int(cells[p][0]), int(cells[p][1]))) for c, p in zip(classes, picks)),
            key=lambda x: (x[1][1], x[1][0]),
        )
        scene = _layout_scene(seed, cfg, free, landmarks, rng)
        layout = Layout(int(seed), cfg, free, landmarks, scene)
        dist = layout.distances_from(tuple(map(int, cells[0])))
        if np.all(dist[free] >= 0):
            return layout
    raise GenerationError(f"no connected layout after {cfg.max_retries} tries (seed {seed})")


# -- episodes ------------------------------------------------------------------------------------

@dataclass
class Episode:
    layout_seed: int
    start: tuple[int, int, int]  # (i, j, heading)
    goal: tuple[int, int]
    tokens: list[int]
    path: list[tuple[int, int]]
    actions: list[int]  # absolute move directions, then STOP
    episode_id: int = 0

    @property
    def instruction(self) -> str:
        return " ".join(decode_tokens(self.tokens))

    @property
    def shortest(self) -> int:
        return len(self.path) - 1

    def to_record(self) -> dict:
        return {
            "id": self.episode_id,
            "layout_seed": self.layout_seed,
            "start": list(self.start),
            "goal": list(self.goal),
            "tokens": list(self.tokens),
            "path": [list(c) for c in self.path],
            "actions": list(self.actions),
        }

    @classmethod
    def from_record(cls, r: dict) -> "Episode":
        return cls(int(r["layout_seed"]), tuple(r["start"]), tuple(r["goal"]), [int(t) for t in r["tokens"]],
                   [tuple(c) for c in r["path"]], [int(a) for a in r["actions"]], int(r.get("id", 0)))


def teacher_path(layout: Layout, start, goal) -> list[tuple[int, int]]:
    """Shortest path; among equally short next cells the lowest node id wins."""
    dist = layout.distances_from(tuple(goal))
    cur = tuple(start)
    if dist[cur] < 0:
        raise SamplingError(f"{goal} unreachable from {start}")
    path = [cur]
    while cur != tuple(goal):
        nxt = [(cur[0] + DIRS[d][0], cur[1] + DIRS[d][1]) for d in layout.neighbors(cur)]
        nxt = [c for c in nxt if dist[c] == dist[cur] - 1]
        cur = min(nxt, key=layout.node_id)
        path.append(cur)
    return path


def path_actions(path) -> list[int]:
    acts = []
    for a, b in zip(path[:-1], path[1:]):
        acts.append(DIRS.index((b[0] - a[0], b[1] - a[1])))
    return acts + [STOP]


def _landmark_at(layout: Layout, cell) -> int | None:
    for c, where in layout.landmarks:
        if where == tuple(cell):
            return c
    return None


def goal_landmark(layout: Layout, goal) -> int | None:
    """Landmark class within one cell of the goal: the goal cell first, then by node id."""
    near = [tuple(goal)] + sorted(
        ((goal[0] + dx, goal[1] + dy) for dx, dy in DIRS), key=layout.node_id
    )
    for cell in near:
        c = _landmark_at(layout, cell)
        if c is not None:
            return c
    return None


_TURN_WORDS = {1: ["turn", "left"], 2: ["turn", "around"], 3: ["turn", "right"]}


def instruction_words(layout: Layout, start_heading: int, path) -> list[str]:
    acts = path_actions(path)[:-1]
    words: list[str] = []
    heading, k = start_heading, 0
    while k < len(acts):
        d = acts[k]
        run = 1
        while k + run < len(acts) and acts[k + run] == d:
            run += 1
        turn = (d - heading) % 4
        if words:
            words.append("then")
        if turn:
            words += _TURN_WORDS[turn] + ["and"]
        end = path[k + run]
        lm = _landmark_at(layout, end)
        if lm is not None:
            words += ["walk", "to", "the", CLASS_NAMES[lm]]
        else:
            words += ["walk", "forward", NUMBER_WORDS[min(run, 9)]]
        heading, k = d, k + run
    if words:
        words.append("then")
    lm = goal_landmark(layout, path[-1])
    words += ["stop", "near", "the", CLASS_NAMES[lm]] if lm is not None else ["stop"]
    return words


def make_episode(layout: Layout, rng: np.random.Generator, min_len: int = 3, max_len: int = 7,
                 episode_id: int = 0, max_tries: int = 200) -> Episode:
    """Random start/goal whose teacher needs ``min_len..max_len`` actions (moves plus the final stop)."""
    if min_len < 1 or max_len < min_len:
        raise ContractViolation("need 1 <= min_len <= max_len")
    cells = layout.free_cells()
    for _ in range(max_tries):
        start = cells[int(rng.integers(len(cells)))]
        dist = layout.distances_from(start)
        goals = [c for c in cells if min_len <= dist[c] + 1 <= max_len]
        if not goals:
            continue
        goal = goals[int(rng.integers(len(goals)))]
        heading = int(rng.integers(4))
        path = teacher_path(layout, start, goal)
        tokens = encode_words(instruction_words(layout, heading, path))
        return Episode(layout.seed, (start[0], start[1], heading), goal, tokens, path, path_actions(path), episode_id)
    raise SamplingError(f"no start/goal pair needing {min_len}..{max_len} actions")


# -- environment -----------------------------------------------------------------------------------

@dataclass
class Observation:
    grid: SparseVoxelGrid
    rgb: np.ndarray  # [12, 48, 3] egocentric colour panorama
    candidates: np.ndarray  # [4] bool, movable relative slots
    angles: np.ndarray  # [4, 4] (sin θ, cos θ, sin φ, cos φ) per relative slot


def relative_to_absolute(heading: int, slot: int) -> int:
    return (heading + slot) % 4


def absolute_to_relative(heading: int, direction: int) -> int:
    return (direction - heading) % 4


SLOT_ANGLES = np.array([[math.sin(r * math.pi / 2), math.cos(r * math.pi / 2), 0.0, 1.0] for r in range(4)])
SLOT_ANGLES[np.abs(SLOT_ANGLES) < 1e-15] = 0.0


@dataclass(frozen=True)
class ObservationConfig:
    voxels: VoxelConfig = DESK_VOXELS
    view_size: int = 32
    headings: int = 12
    rgb_block: int = 8  # each view is block-averaged down to view_size / rgb_block pixels

    def __post_init__(self):
        if self.headings % 4:
            raise ConfigurationError("panorama headings must be a multiple of 4 for quarter-turn rotation")
        if self.view_size % self.rgb_block:
            raise ConfigurationError("rgb_block must divide view_size")


class NavEnv:
    """One layout with observation caches.

    Caches fill lazily under a lock; after :meth:`precompute` readers never
    write, so concurrent rollouts only read.
    """

    def __init__(self, layout: Layout, config: ObservationConfig = ObservationConfig()):
        self.layout = layout
        self.config = config
        self._cloud: dict[tuple[int, int], SemanticPointCloud] = {}
        self._rgb: dict[tuple[int, int], np.ndarray] = {}
        self._grid: dict[tuple[int, int, int], SparseVoxelGrid] = {}
        self._lock = threading.Lock()

    def __getstate__(self):
        d = dict(self.__dict__)
        del d["_lock"]
        return d

    def __setstate__(self, d):
        self.__dict__.update(d)
        self._lock = threading.Lock()

    def _render(self, cell) -> None:
        cfg = self.config
        pos = self.layout.cell_center(cell)
        poses = panorama_poses(pos, cfg.headings, width=cfg.view_size, height=cfg.view_size)
        views = [render_view(self.layout.scene, p) for p in poses]
        self._cloud[cell] = merge_panorama(views, poses, pos)
        b, m = cfg.rgb_block, cfg.view_size // cfg.rgb_block
        blocks = [v.color.reshape(m, b, m, b, 3).mean(axis=(1, 3)) for v in views]
        n_pitch = len(views) // cfg.headings
        rows = [np.concatenate(blocks[p * cfg.headings:(p + 1) * cfg.headings], axis=1) for p in range(n_pitch)]
        # top row of the image is the highest pitch
        self._rgb[cell] = np.concatenate(rows[::-1], axis=0)

    def cloud(self, cell) -> SemanticPointCloud:
        cell = (int(cell[0]), int(cell[1]))
        if not self.layout.is_free(cell):
            raise ContractViolation(f"{cell} is not a free cell")
        if cell not in self._cloud:
            with self._lock:
                if cell not in self._cloud:
                    self._render(cell)
        return self._cloud[cell]

    def grid(self, cell, heading: int) -> SparseVoxelGrid:
        key = (int(cell[0]), int(cell[1]), int(heading) % 4)
        if key not in self._grid:
            cloud = self.cloud(cell)
            pts = rotate_quarter_turns(cloud.points, key[2])
            g = voxelize(SemanticPointCloud(pts, cloud.classes), self.config.voxels)
            with self._lock:
                self._grid.setdefault(key, g)
        return self._grid[key]

    def rgb(self, cell, heading: int) -> np.ndarray:
        self.cloud(cell)
        per_quarter = self._rgb[(int(cell[0]), int(cell[1]))].shape[1] // 4
        # column block k then looks k * 30 degrees counter-clockwise of the heading
        return np.roll(self._rgb[(int(cell[0]), int(cell[1]))], -per_quarter * (int(heading) % 4), axis=1)

    def candidates(self, cell, heading: int) -> np.ndarray:
        mask = np.zeros(4, dtype=bool)
        for d in self.layout.neighbors(cell):
            mask[absolute_to_relative(heading, d)] = True
        return mask

    def observe(self, cell, heading: int) -> Observation:
        return Observation(self.grid(cell, heading), self.rgb(cell, heading), self.candidates(cell, heading), SLOT_ANGLES.copy())

    def precompute(self) -> None:
        for cell in self.layout.free_cells():
            for h in range(4):
                self.grid(cell, h)

    def step(self, state: "NavState", slot: int) -> tuple["NavState", Observation]:
        """Apply a relative action slot (0..3 move, 4 stop)."""
        if state.done:
            if slot != STOP:
                raise ContractViolation("episode already stopped")
            return state, self.observe(state.cell, state.heading)
        if slot == STOP:
            s = NavState(state.cell, state.heading, True, state.steps)
            return s, self.observe(s.cell, s.heading)
        if not 0 <= slot < 4 or not self.candidates(state.cell, state.heading)[slot]:
            raise ContractViolation(f"slot {slot} is not movable from {state}")
        d = relative_to_absolute(state.heading, slot)
        cell = (state.cell[0] + DIRS[d][0], state.cell[1] + DIRS[d][1])
        s = NavState(cell, d, False, state.steps + 1)
        return s, self.observe(cell, d)


@dataclass(frozen=True)
class NavState:
    cell: tuple[int, int]
    heading: int
    done: bool = False
    steps: int = 0


def step(env: NavEnv, state: NavState, action: int) -> tuple[NavState, Observation]:
    """Absolute action: 0..3 moves toward that compass direction, 4 stops."""
    if action == STOP:
        return env.step(state, STOP)
    if not 0 <= action < 4:
        raise ContractViolation(f"unknown action {action}")
    return env.step(state, absolute_to_relative(state.heading, action))


# -- metrics ------------------------------------------------------------------------------------

@dataclass(frozen=True)
class NavMetrics:
    TL: float
    NE: float
    SR: float
    SPL: float


def score(layout: Layout, episode: Episode, path, success_radius: int = 1, max_steps: int = 15) -> NavMetrics:
    """Metrics for the cells visited; moves past ``max_steps`` are cut off."""
    path = [tuple(c) for c in path]
    if not path or path[0] != tuple(episode.start[:2]):
        raise ContractViolation("agent path must begin at the episode start")
    path = path[: max_steps + 1]
    moves = len(path) - 1
    ne_cells = int(layout.distances_from(tuple(episode.goal))[path[-1]])
    if ne_cells < 0:
        raise ContractViolation("agent ended in a cell disconnected from the goal")
    tl = moves * CELL_SIZE
    ne = ne_cells * CELL_SIZE
    sr = 1.0 if ne_cells <= success_radius else 0.0
    shortest = episode.shortest * CELL_SIZE
    spl = sr * shortest / max(tl, shortest) if shortest > 0 else sr
    return NavMetrics(tl, ne, sr, spl)


def mean_metrics(ms: list[NavMetrics]) -> NavMetrics:
    if not ms:
        return NavMetrics(float("nan"), float("nan"), float("nan"), float("nan"))
    a = np.array([[m.TL, m.NE, m.SR, m.SPL] for m in ms])
    return NavMetrics(*(float(v) for v in a.mean(axis=0)))


def metrics_csv(rows: dict[str, NavMetrics]) -> str:
    """CSV text with columns split,TL,NE,SR,SPL; SR and SPL in percent."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["split", "TL", "NE", "SR", "SPL"])
    for split, m in rows.items():
        w.writerow([split, f"{m.TL:.4f}", f"{m.NE:.4f}", f"{100 * m.SR:.4f}", f"{100 * m.SPL:.4f}"])
    return buf.getvalue()


def write_metrics_csv(path, rows: dict[str, NavMetrics]) -> None:
    Path(path).write_text(metrics_csv(rows))


# -- random baseline --------------------------------------------------------------------------

def random_rollout(env: NavEnv, episode: Episode, rng: np.random.Generator, max_steps: int = 15) -> list[tuple[int, int]]:
    """Uniform choice among the movable slots and stop, every step."""
    i, j, h = episode.start
    cell, path = (i, j), [(i, j)]
    for _ in range(max_steps):
        opts = np.flatnonzero(env.candidates(cell, h)).tolist() + [STOP]
        slot = opts[int(rng.integers(len(opts)))]
        if slot == STOP:
            break
        h = relative_to_absolute(h, slot)
        cell = (cell[0] + DIRS[h][0], cell[1] + DIRS[h][1])
        path.append(cell)
    return path


def random_baseline(envs: dict[int, NavEnv], episodes: list[Episode], seed: int, rollouts: int = 8,
                    max_steps: int = 15, success_radius: int = 1) -> NavMetrics:
    """Random-policy metrics averaged over ``rollouts`` draws per episode."""
    ms = []
    for ep in episodes:
        rng = substream(seed, "random-policy", ep.episode_id)
        env = envs[ep.layout_seed]
        for _ in range(rollouts):
            ms.append(score(env.layout, ep, random_rollout(env, ep, rng, max_steps), success_radius, max_steps))
    return mean_metrics(ms)


def random_policy_success(layout: Layout, episode: Episode, max_steps: int = 15, success_radius: int = 1) -> float:
    """Exact success probability of the uniform random policy, by dynamic programming."""
    goal_dist = layout.distances_from(tuple(episode.goal))
    # p[(cell, heading)] = probability of being there, still walking
    i, j, h = episode.start
    p = {((i, j), h): 1.0}
    success = 0.0
    for t in range(max_steps + 1):
        nxt: dict = {}
        for (cell, hd), pr in p.items():
            ok = goal_dist[cell] <= success_radius
            if t == max_steps:
                success += pr * ok
                continue
            dirs = layout.neighbors(cell)
            share = pr / (len(dirs) + 1)
            success += share * ok
            for d in dirs:
                key = ((cell[0] + DIRS[d][0], cell[1] + DIRS[d][1]), d)
                nxt[key] = nxt.get(key, 0.0) + share
        p = nxt
    return success


# -- splits and files ------------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitConfig:
    n_layouts: int = 40
    episodes_per_layout: int = 25
    min_len: int = 3
    max_len: int = 7
    layout: LayoutConfig = LayoutConfig()


SPLIT_OFFSETS = {"train": 0, "seen": 0, "unseen": 1_000_000}


def split_layouts(root_seed: int, split: str, cfg: SplitConfig, exclude_combos: set | None = None) -> list[Layout]:
    """Layouts for a split. ``seen`` shares the train layouts; ``unseen`` uses fresh seeds
    whose landmark class sets never occur in ``exclude_combos``."""
    if split not in SPLIT_OFFSETS:
        raise ConfigurationError(f"unknown split {split!r}")
    base = int(substream(root_seed, "layouts").integers(0, 2**31 - 2_000_000)) + SPLIT_OFFSETS[split]
    out, k = [], 0
    while len(out) < cfg.n_layouts:
        if k > 50 * cfg.n_layouts + 1000:
            raise SamplingError("could not find enough layouts with unused landmark combinations")
        lay = generate_layout(base + k, config=cfg.layout)
        k += 1
        if exclude_combos and lay.landmark_classes() in exclude_combos:
            continue
        out.append(lay)
    return out


def split_episodes(root_seed: int, split: str, layouts: list[Layout], cfg: SplitConfig) -> list[Episode]:
    out = []
    for n, lay in enumerate(layouts):
        rng = substream(root_seed, "episodes-" + split, lay.seed)
        for k in range(cfg.episodes_per_layout):
            out.append(make_episode(lay, rng, cfg.min_len, cfg.max_len, episode_id=n * cfg.episodes_per_layout + k))
    return out


def save_episodes(path, episodes: list[Episode], layout_config: LayoutConfig) -> None:
    header = {"format": "vln3d-episodes/1", "vocab": VOCAB_VERSION, "layout": layout_config.__dict__}
    lines = [json.dumps(header, sort_keys=True)] + [json.dumps(e.to_record(), sort_keys=True) for e in episodes]
    Path(path).write_text("\n".join(lines) + "\n")


def load_episodes(path) -> tuple[list[Episode], LayoutConfig]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ConfigurationError(f"{path} is empty")
    header = json.loads(lines[0])
    if header.get("format") != "vln3d-episodes/1":
        raise ConfigurationError(f"{path} is not an episode file")
    if header.get("vocab") != VOCAB_VERSION:
        raise ConfigurationError(f"episode vocabulary {header.get('vocab')!r} != {VOCAB_VERSION}")
    return [Episode.from_record(json.loads(l)) for l in lines[1:] if l.strip()], LayoutConfig(**header["layout"])
