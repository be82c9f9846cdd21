"""End-to-end stages, artifact layout, manifests and the ablation report.

Run directory layout::

    scenes/scene_NNNN.json      procedural rooms for pretext training
    grids/scene_NNNN.svxg       their voxelized panoramas
    pretext/encoder.ckpt        sparse encoder after region-query training
    episodes/{train,seen,unseen}.jsonl
    nav/observations.npz        every (layout, cell, heading) observation
    nav/<name>.ckpt + .json     agent weights and their mode
    eval/<name>.csv             split,TL,NE,SR,SPL
    report/table.csv, report/stages.json
    manifest.json
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .agent import (
    AgentConfig,
    DistillConfig,
    NavAgent,
    ObservationTable,
    RGBEncoder,
    StageConfig,
    distill_rgb_branch,
    evaluate,
    param_digest,
    train_nav,
)
from .errors import ConfigurationError
from .navsim import (
    LayoutConfig,
    NavEnv,
    ObservationConfig,
    SplitConfig,
    generate_layout,
    load_episodes,
    metrics_csv,
    random_baseline,
    save_episodes,
    split_episodes,
    split_layouts,
)
from .nn import load_checkpoint, save_checkpoint
from .pretext import PretextConfig, PretextModel, PretextScene, PretextTrainConfig, evaluate_pretext, pretext_scene_from, scene_samples, train_pretext
from .reconstruct import VOXEL_PRESETS, load_grid, save_grid
from .rng import derive_seed, substream
from .scene import SceneConfig, SceneGraph, generate_scene
from .sparse_conv import EncoderConfig, SparseEncoder

log = logging.getLogger(__name__)

ROWS = {
    "3D": ("3d-only", None),
    "RGB-scratch": ("rgb-only", "scratch"),
    "RGB-distilled": ("rgb-only", "distilled"),
    "3D+RGB-scratch": ("fused", "scratch"),
    "3D+RGB-distilled": ("fused", "distilled"),
}
ROW_FILES = {name: name.replace("+", "_").lower() for name in ROWS}
SPLITS = ("seen", "unseen")
UNAVAILABLE = "row unavailable"


class StageFailure(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage


# -- configuration ------------------------------------------------------------------------------

@dataclass(frozen=True)
class NavDataConfig:
    train_layouts: int = 30
    unseen_layouts: int = 20
    episodes_per_layout: int = 25
    seen_episodes_per_layout: int = 10
    min_len: int = 3
    max_len: int = 7
    layout: LayoutConfig = LayoutConfig()

    def split(self, name: str) -> SplitConfig:
        n = {"train": self.train_layouts, "seen": self.train_layouts, "unseen": self.unseen_layouts}[name]
        per = self.seen_episodes_per_layout if name == "seen" else self.episodes_per_layout
        return SplitConfig(n, per, self.min_len, self.max_len, self.layout)


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    preset: str = "desk"
    train_scenes: int = 200
    val_scenes: int = 50
    pretext: PretextTrainConfig = PretextTrainConfig()
    nav: NavDataConfig = NavDataConfig()
    stage_b: StageConfig = StageConfig(stage="B", mode="3d-only", lr=1e-3, epochs=4, lam=0.2)
    stage_c: StageConfig = StageConfig(stage="C", mode="fused", lr=3e-4, epochs=3, lam=0.0)
    distill: DistillConfig = DistillConfig()
    max_steps: int = 15
    threads: int = 1

    def __post_init__(self):
        if self.preset not in VOXEL_PRESETS:
            raise ConfigurationError(f"preset must be one of {sorted(VOXEL_PRESETS)}")
        if self.train_scenes < 1 or self.val_scenes < 1:
            raise ConfigurationError("need at least one train and one val scene")
        if self.max_steps < 1:
            raise ConfigurationError("max_steps must be positive")

    @property
    def voxels(self):
        return VOXEL_PRESETS[self.preset]

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig.paper() if self.preset == "paper" else EncoderConfig.desk(64)

    def pretext_config(self) -> PretextConfig:
        return PretextConfig.paper() if self.preset == "paper" else PretextConfig.desk()

    def agent_config(self) -> AgentConfig:
        return AgentConfig.paper() if self.preset == "paper" else AgentConfig.desk()

    def to_dict(self) -> dict:
        return asdict(self)

    def digest(self, *keys: str) -> str:
        d = self.to_dict()
        if keys:
            d = {k: d[k] for k in keys}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, raw: dict) -> "PipelineConfig":
        nested = {
            "pretext": PretextTrainConfig, "nav": NavDataConfig, "stage_b": StageConfig,
            "stage_c": StageConfig, "distill": DistillConfig,
        }
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
        kw = {}
        try:
            for k, v in raw.items():
                if k in nested:
                    sub = dict(v)
                    if k == "nav" and "layout" in sub:
                        sub["layout"] = LayoutConfig(**sub["layout"])
                    if k == "pretext":
                        for key in ("augment", "sampling"):
                            if key in sub:
                                from .pretext import AugmentParams, RegionSampling
                                typ = AugmentParams if key == "augment" else RegionSampling
                                sub[key] = typ(**{a: tuple(b) if isinstance(b, list) else b for a, b in sub[key].items()})
                    kw[k] = nested[k](**sub)
                else:
                    kw[k] = v
            return cls(**kw)
        except TypeError as e:
            raise ConfigurationError(f"bad config: {e}") from None

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigurationError(f"cannot read config {path}: {e}") from None
        return cls.from_dict(raw)


# -- hashing & manifests ---------------------------------------------------------------------------

def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def source_version() -> str:
    """Content hash of the package sources, like a git tree id."""
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


class RunDir:
    """Artifact paths plus a per-stage stamp record used to skip finished stages."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._stamps_path = self.root / "stamps.json"
        self.stamps = json.loads(self._stamps_path.read_text()) if self._stamps_path.exists() else {}

    def path(self, *parts) -> Path:
        p = self.root.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def fresh(self, stage: str, key: str, outputs: list[Path]) -> bool:
        return self.stamps.get(stage, {}).get("key") == key and all(p.exists() for p in outputs)

    def stamp(self, stage: str, key: str, outputs: list[Path]) -> None:
        self.stamps[stage] = {"key": key, "outputs": {str(p.relative_to(self.root)): file_hash(p) for p in outputs}}
        self._stamps_path.write_text(json.dumps(self.stamps, sort_keys=True, indent=1))

    def output_hash(self, stage: str) -> str:
        return hashlib.sha256(json.dumps(self.stamps.get(stage, {}).get("outputs", {}), sort_keys=True).encode()).hexdigest()

    def lock(self):
        return _Lock(self.root / ".lock")


class _Lock:
    def __init__(self, path: Path):
        self.path = path

    def __enter__(self):
        try:
            fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigurationError(f"run directory is locked by another pipeline ({self.path})") from None
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        return self

    def __exit__(self, *exc):
        self.path.unlink(missing_ok=True)


def _pmap(fn, items, threads: int):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(threads) as ex:
        return list(ex.map(fn, items))


# -- stages --------------------------------------------------------------------------------------

def scene_seed(cfg: PipelineConfig, i: int) -> int:
    return derive_seed(cfg.seed, "scene", i) % (2**31)


def gen_scenes(run: RunDir, cfg: PipelineConfig) -> list[Path]:
    n = cfg.train_scenes + cfg.val_scenes
    scfg = SceneConfig(num_classes=cfg.voxels.num_classes)
    out = []
    for i in range(n):
        p = run.path("scenes", f"scene_{i:04d}.json")
        generate_scene(scene_seed(cfg, i), scfg).save(p)
        out.append(p)
    return out


def voxelize_scenes(run: RunDir, cfg: PipelineConfig) -> list[Path]:
    paths = sorted(run.root.joinpath("scenes").glob("scene_*.json"))
    if not paths:
        raise ConfigurationError("no scenes to voxelize; run gen-scenes first")

    def one(p):
        ps = pretext_scene_from(SceneGraph.load(p), cfg.voxels, keep_cloud=False)
        q = run.path("grids", p.stem + ".svxg")
        save_grid(q, ps.grid)
        return q

    return _pmap(one, paths, cfg.threads)


def load_pretext_scenes(run: RunDir, cfg: PipelineConfig) -> tuple[list[PretextScene], list[PretextScene]]:
    paths = sorted(run.root.joinpath("grids").glob("scene_*.svxg"))
    n = cfg.train_scenes + cfg.val_scenes
    if len(paths) < n:
        raise ConfigurationError(f"expected {n} voxel grids, found {len(paths)}")
    scenes = [PretextScene(i, load_grid(p)) for i, p in enumerate(paths[:n])]
    return scenes[:cfg.train_scenes], scenes[cfg.train_scenes:]


def pretext_train(run: RunDir, cfg: PipelineConfig) -> list[Path]:
    train, val = load_pretext_scenes(run, cfg)
    model = PretextModel(cfg.pretext_config(), substream(cfg.seed, "init", 0))
    metrics = train_pretext(train, val, model, replace(cfg.pretext, seed=derive_seed(cfg.seed, "sample") % (2**31)))
    enc_p, head_p, csv_p = run.path("pretext", "encoder.ckpt"), run.path("pretext", "model.ckpt"), run.path("pretext", "metrics.csv")
    save_checkpoint(enc_p, model.encoder)
    save_checkpoint(head_p, model)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_loss", "train_acc", "val_acc"])
    for r in metrics.as_rows():
        w.writerow([r["epoch"], f"{r['train_loss']:.6f}", f"{r['train_acc']:.6f}", f"{r['val_acc']:.6f}"])
    csv_p.write_text(buf.getvalue())
    return [enc_p, head_p, csv_p]


def pretext_eval(run: RunDir, cfg: PipelineConfig) -> float:
    _, val = load_pretext_scenes(run, cfg)
    model = PretextModel(cfg.pretext_config())
    model.load_state_dict(load_checkpoint(run.root / "pretext" / "model.ckpt"))
    tc = replace(cfg.pretext, seed=derive_seed(cfg.seed, "sample") % (2**31))
    samples = [scene_samples(s, tc, np.random.Generator(np.random.PCG64([tc.seed, 1, s.scene_id]))) for s in val]
    return evaluate_pretext(model, val, samples)


def load_encoder(path, cfg: PipelineConfig) -> SparseEncoder:
    if not Path(path).exists():
        raise ConfigurationError(f"missing encoder checkpoint {path}")
    enc = SparseEncoder(cfg.encoder_config())
    enc.load_state_dict(load_checkpoint(path))
    return enc


def make_episodes(run: RunDir, cfg: PipelineConfig) -> list[Path]:
    nav = cfg.nav
    train_layouts = split_layouts(cfg.seed, "train", nav.split("train"))
    combos = {l.landmark_classes() for l in train_layouts}
    unseen_layouts = split_layouts(cfg.seed, "unseen", nav.split("unseen"), combos)
    out = []
    for split, layouts in (("train", train_layouts), ("seen", train_layouts), ("unseen", unseen_layouts)):
        eps = split_episodes(cfg.seed, split, layouts, nav.split(split))
        p = run.path("episodes", f"{split}.jsonl")
        save_episodes(p, eps, nav.layout)
        out.append(p)
    return out


@dataclass
class NavData:
    episodes: dict[str, list]
    envs: dict[int, NavEnv]
    table: ObservationTable


def load_nav_data(run: RunDir, cfg: PipelineConfig, encoder: SparseEncoder | None) -> NavData:
    """Episodes, environments and the observation table (cached on disk)."""
    episodes, layout_cfg = {}, None
    for split in ("train", "seen", "unseen"):
        p = run.root / "episodes" / f"{split}.jsonl"
        if not p.exists():
            raise ConfigurationError(f"missing {p}; run make-episodes first")
        episodes[split], layout_cfg = load_episodes(p)
    seeds = sorted({e.layout_seed for eps in episodes.values() for e in eps})
    envs = {s: NavEnv(generate_layout(s, config=layout_cfg), ObservationConfig(voxels=cfg.voxels)) for s in seeds}
    cache = run.root / "nav" / "observations.npz"
    want = param_digest(encoder) if encoder is not None else ""
    table = None
    if cache.exists():
        table, have = ObservationTable.load(cache, envs, cfg.voxels)
        if set(table.index) != {(s, c[0], c[1], h) for s in seeds for c in envs[s].layout.free_cells() for h in range(4)}:
            table = None
        elif encoder is not None and have != want:
            table.encode(encoder)
            table.save(cache, want)
    if table is None:
        _pmap(lambda e: e.precompute(), list(envs.values()), cfg.threads)
        table = ObservationTable.build(envs)
        if encoder is not None:
            table.encode(encoder)
        table.save(run.path("nav", "observations.npz"), want)
    return NavData(episodes, envs, table)


def save_agent(run: RunDir, name: str, model: NavAgent, extra: dict | None = None) -> list[Path]:
    ck, meta = run.path("nav", f"{name}.ckpt"), run.path("nav", f"{name}.json")
    save_checkpoint(ck, model)
    meta.write_text(json.dumps({"mode": model.mode, "config": asdict(model.config), **(extra or {})}, sort_keys=True, indent=1))
    return [ck, meta]


def load_agent(path, cfg: PipelineConfig) -> NavAgent:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"missing agent checkpoint {path}")
    meta = json.loads(path.with_suffix(".json").read_text())
    model = NavAgent(cfg.agent_config(), None, meta["mode"])
    model.load_state_dict(load_checkpoint(path))
    return model


def _history_csv(hist) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "il", "a2c"] + [f"{s}_{m}" for s in hist.metrics for m in ("TL", "NE", "SR", "SPL")])
    for i, e in enumerate(hist.epochs):
        row = [e, f"{hist.il[i]:.6f}", f"{hist.a2c[i]:.6f}"]
        for s in hist.metrics:
            m = hist.metrics[s][i]
            row += [f"{m.TL:.4f}", f"{m.NE:.4f}", f"{100 * m.SR:.4f}", f"{100 * m.SPL:.4f}"]
        w.writerow(row)
    return buf.getvalue()


def nav_train_b(run: RunDir, cfg: PipelineConfig, data: NavData, stage: StageConfig | None = None, seed: int | None = None) -> list[Path]:
    seed = cfg.seed if seed is None else seed
    stage = replace(stage or cfg.stage_b, stage="B", max_steps=cfg.max_steps, seed=derive_seed(seed, "rollout") % (2**31))
    model = NavAgent(cfg.agent_config(), substream(seed, "init", 1), stage.mode)
    hist = train_nav(data.episodes["train"], model, stage, data.table, {"seen": data.episodes["seen"]})
    p = run.path("nav", "B_history.csv")
    p.write_text(_history_csv(hist))
    return save_agent(run, "B", model, {"stage": "B"}) + [p]


def distill(run: RunDir, cfg: PipelineConfig, data: NavData, encoder: SparseEncoder) -> list[Path]:
    train_seeds = {e.layout_seed for e in data.episodes["train"]}
    rows = np.array(sorted(i for k, i in data.table.index.items() if k[0] in train_seeds))
    rgb = RGBEncoder(cfg.agent_config(), substream(cfg.seed, "init", 2))
    mse = distill_rgb_branch(data.table, encoder, rgb, replace(cfg.distill, seed=derive_seed(cfg.seed, "sample", 2) % (2**31)), rows)
    ck, js = run.path("nav", "rgb_distilled.ckpt"), run.path("nav", "rgb_distilled.json")
    save_checkpoint(ck, rgb)
    js.write_text(json.dumps({"mse": round(mse, 10)}, indent=1))
    return [ck, js]


def nav_train_c(run: RunDir, cfg: PipelineConfig, data: NavData, row: str, stage: StageConfig | None = None) -> list[Path]:
    """Finetune the stage-B agent for one ablation row; everything but the row's factor is shared."""
    if row not in ROWS:
        raise ConfigurationError(f"unknown row {row!r}")
    mode, init = ROWS[row]
    model = load_agent(run.root / "nav" / "B.ckpt", cfg)
    if init == "scratch":
        model.rgb.load_state_dict(RGBEncoder(cfg.agent_config(), substream(cfg.seed, "init", 2)).state_dict())
    elif init == "distilled":
        ck = run.root / "nav" / "rgb_distilled.ckpt"
        if not ck.exists():
            raise ConfigurationError("distilled colour encoder missing; run distill first")
        model.rgb.load_state_dict(load_checkpoint(ck))
    stage = replace(stage or cfg.stage_c, stage="C", mode=mode, max_steps=cfg.max_steps,
                    seed=derive_seed(cfg.seed, "rollout", 3) % (2**31))
    model.mode = mode
    train_nav(data.episodes["train"], model, stage, data.table)
    return save_agent(run, "C_" + ROW_FILES[row], model, {"stage": "C", "row": row})


def nav_eval(run: RunDir, cfg: PipelineConfig, data: NavData, model_path, name: str, splits=SPLITS,
             max_steps: int | None = None) -> Path:
    model = load_agent(model_path, cfg)
    ms = max_steps or cfg.max_steps
    rows = {s: evaluate(model, data.episodes[s], data.table, ms)[0] for s in splits}
    p = run.path("eval", f"{name}.csv")
    p.write_text(metrics_csv(rows))
    return p


def random_eval(run: RunDir, cfg: PipelineConfig, data: NavData) -> Path:
    rows = {s: random_baseline(data.envs, data.episodes[s], derive_seed(cfg.seed, "random-eval") % (2**31),
                               max_steps=cfg.max_steps) for s in SPLITS}
    p = run.path("eval", "random.csv")
    p.write_text(metrics_csv(rows))
    return p


# -- report --------------------------------------------------------------------------------------

def read_metrics_csv(path) -> dict[str, dict[str, str]]:
    with open(path, newline="") as f:
        return {r["split"]: r for r in csv.DictReader(f)}


def report(run_dir) -> tuple[Path, Path]:
    """Ablation table (CSV) and per-stage SR series (JSON); missing evaluations are marked."""
    root = Path(run_dir)
    out_dir = root / "report"
    out_dir.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["features", "split", "TL", "NE", "SR", "SPL"])
    for row, fname in ROW_FILES.items():
        p = root / "eval" / f"C_{fname}.csv"
        have = read_metrics_csv(p) if p.exists() else {}
        for split in SPLITS:
            r = have.get(split)
            if r is None:
                w.writerow([row, split, UNAVAILABLE, UNAVAILABLE, UNAVAILABLE, UNAVAILABLE])
            else:
                w.writerow([row, split, r["TL"], r["NE"], r["SR"], r["SPL"]])
    table = out_dir / "table.csv"
    table.write_text(buf.getvalue())
    series = []
    for stage, fname in (("B", "B"), ("C", "C_" + ROW_FILES["3D+RGB-distilled"])):
        p = root / "eval" / f"{fname}.csv"
        if p.exists():
            m = read_metrics_csv(p)
            series.append({"stage": stage, **{f"SR_{s}": float(m[s]["SR"]) for s in SPLITS if s in m}})
    stages = out_dir / "stages.json"
    stages.write_text(json.dumps({"series": series}, indent=1, sort_keys=True))
    return table, stages


# -- pipeline ------------------------------------------------------------------------------------

PIPELINE_STAGES = ("gen-scenes", "voxelize", "pretext-train", "make-episodes", "nav-train-B", "distill", "nav-train-C", "nav-eval")


def run_pipeline(config_path, out_dir, overrides: dict | None = None) -> dict:
    """Run every stage, skipping those whose stamped inputs and outputs are unchanged."""
    t0 = time.time()
    cfg = PipelineConfig.load(config_path) if config_path else PipelineConfig()
    if overrides:
        cfg = replace(cfg, **overrides)
    run = RunDir(out_dir)
    outputs: dict[str, list[Path]] = {}
    with run.lock():
        def stage(name, key, expected, fn):
            key = hashlib.sha256((name + key).encode()).hexdigest()
            if run.fresh(name, key, expected):
                log.info("stage %s cached", name)
                outputs[name] = expected
                return
            log.info("stage %s", name)
            try:
                paths = fn()
            except ConfigurationError:
                raise
            except Exception as e:
                raise StageFailure(name, e) from e
            run.stamp(name, key, paths)
            outputs[name] = paths

        n = cfg.train_scenes + cfg.val_scenes
        scene_paths = [run.root / "scenes" / f"scene_{i:04d}.json" for i in range(n)]
        stage("gen-scenes", cfg.digest("seed", "preset", "train_scenes", "val_scenes"), scene_paths, lambda: gen_scenes(run, cfg))
        grid_paths = [run.root / "grids" / f"scene_{i:04d}.svxg" for i in range(n)]
        stage("voxelize", run.output_hash("gen-scenes"), grid_paths, lambda: voxelize_scenes(run, cfg))
        pre = [run.root / "pretext" / f for f in ("encoder.ckpt", "model.ckpt", "metrics.csv")]
        stage("pretext-train", cfg.digest("seed", "preset", "pretext") + run.output_hash("voxelize"), pre, lambda: pretext_train(run, cfg))
        eps = [run.root / "episodes" / f"{s}.jsonl" for s in ("train", "seen", "unseen")]
        stage("make-episodes", cfg.digest("seed", "nav"), eps, lambda: make_episodes(run, cfg))

        encoder = load_encoder(run.root / "pretext" / "encoder.ckpt", cfg)
        data_holder: list[NavData] = []

        def data() -> NavData:
            if not data_holder:
                data_holder.append(load_nav_data(run, cfg, encoder))
            return data_holder[0]

        upstream = run.output_hash("pretext-train") + run.output_hash("make-episodes")
        b_out = [run.root / "nav" / f for f in ("B.ckpt", "B.json", "B_history.csv")]
        stage("nav-train-B", cfg.digest("seed", "preset", "stage_b", "max_steps") + upstream, b_out, lambda: nav_train_b(run, cfg, data()))
        d_out = [run.root / "nav" / f for f in ("rgb_distilled.ckpt", "rgb_distilled.json")]
        stage("distill", cfg.digest("seed", "preset", "distill") + upstream, d_out, lambda: distill(run, cfg, data(), encoder))
        c_key = cfg.digest("seed", "preset", "stage_c", "max_steps") + run.output_hash("nav-train-B") + run.output_hash("distill")
        for row, fname in ROW_FILES.items():
            c_out = [run.root / "nav" / f"C_{fname}.{ext}" for ext in ("ckpt", "json")]
            stage(f"nav-train-C:{row}", c_key, c_out, lambda row=row: nav_train_c(run, cfg, data(), row))
        for name in ["B"] + ["C_" + f for f in ROW_FILES.values()]:
            key = run.output_hash("nav-train-B" if name == "B" else f"nav-train-C:{next(r for r, f in ROW_FILES.items() if 'C_' + f == name)}")
            stage(f"nav-eval:{name}", key + str(cfg.max_steps) + run.output_hash("make-episodes"), [run.root / "eval" / f"{name}.csv"],
                  lambda name=name: [nav_eval(run, cfg, data(), run.root / "nav" / f"{name}.ckpt", name)])
        stage("nav-eval:random", str(cfg.max_steps) + run.output_hash("make-episodes"), [run.root / "eval" / "random.csv"],
              lambda: [random_eval(run, cfg, data())])
        table, stages_json = report(run.root)
        outputs["report"] = [table, stages_json]
        manifest = {
            "command": "run-pipeline",
            "config_hash": cfg.digest(),
            "config": cfg.to_dict(),
            "seed": cfg.seed,
            "inputs": {"config": file_hash(config_path) if config_path else None},
            "outputs": {str(p.relative_to(run.root)): file_hash(p) for ps in outputs.values() for p in ps},
            "wall_clock_s": round(time.time() - t0, 3),
            "version": source_version(),
        }
        run.path("manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest
