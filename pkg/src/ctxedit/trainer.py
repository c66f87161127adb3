"""Multi-task training under phase-based curricula, with exact checkpoint/resume."""
from __future__ import annotations

import collections
import copy
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
import torch
from scipy import stats

from .backbone import DiTConfig
from .errors import ConfigError, FormatError, MissingDataset, NonFiniteActivation, NonFiniteLoss
from .flow import flow_loss
from .layout import ID_TASKS, SlotRegistry, TaskKind, default_registry
from .model import EditModel
from .synthetic import BENCHMARK_SEED_BASE, generate_sample, load_sample, read_manifest
from .tensorio import CHECKPOINT_MAGIC, read_container, write_container
from .tokenizers import FLATTEN_ORDER

CHECKPOINT_VERSION = 1
HISTORY_LEN = 256
ALL_TASKS = tuple(TaskKind)


@dataclass(frozen=True)
class Phase:
    tasks: tuple[TaskKind, ...]
    steps: int


@dataclass(frozen=True)
class TrainSchedule:
    name: str
    phases: tuple[Phase, ...]

    def __post_init__(self) -> None:
        if not self.phases:
            raise ConfigError("schedule has no phases")
        for i, ph in enumerate(self.phases):
            if not ph.tasks:
                raise ConfigError(f"phase {i} has an empty task set")
            if ph.steps <= 0:
                raise ConfigError(f"phase {i} has non-positive step budget {ph.steps}")
        enabled = set().union(*(set(p.tasks) for p in self.phases))
        if set(self.phases[-1].tasks) != enabled:
            raise ConfigError("final phase must contain every task used by the schedule")

    @property
    def total_steps(self) -> int:
        return sum(p.steps for p in self.phases)

    def phase_at(self, step: int) -> int:
        """Index of the phase that owns global step ``step`` (0-based)."""
        end = 0
        for i, ph in enumerate(self.phases):
            end += ph.steps
            if step < end:
                return i
        return len(self.phases) - 1

    def to_dict(self) -> dict:
        return {"name": self.name, "phases": [{"tasks": [t.value for t in p.tasks], "steps": p.steps}
                                              for p in self.phases]}

    @classmethod
    def from_dict(cls, data: dict) -> "TrainSchedule":
        phases = tuple(Phase(tuple(TaskKind.parse(t) for t in p["tasks"]), int(p["steps"])) for p in data["phases"])
        return cls(data.get("name", "custom"), phases)

    def restricted(self, tasks: Iterable[TaskKind]) -> "TrainSchedule":
        """Drop disabled tasks; phases left empty are removed."""
        keep = set(tasks)
        phases = tuple(Phase(tuple(t for t in p.tasks if t in keep), p.steps) for p in self.phases)
        return TrainSchedule(self.name, tuple(p for p in phases if p.tasks))


def _ordered(tasks: Iterable[TaskKind]) -> tuple[TaskKind, ...]:
    s = set(tasks)
    return tuple(t for t in ALL_TASKS if t in s)


def hard_to_easy(steps_per_phase: int = 3000) -> TrainSchedule:
    cam = {TaskKind.RECAMERA}
    ids = cam | set(ID_TASKS)
    return TrainSchedule("hard_to_easy", (
        Phase(_ordered(cam), steps_per_phase),
        Phase(_ordered(ids), steps_per_phase),
        Phase(_ordered(ids | {TaskKind.STYLIZATION, TaskKind.PROPAGATION}), steps_per_phase),
    ))


def easy_to_hard(steps_per_phase: int = 3000) -> TrainSchedule:
    ids = set(ID_TASKS)
    return TrainSchedule("easy_to_hard", (
        Phase(_ordered(ids), steps_per_phase),
        Phase(_ordered(ids | {TaskKind.STYLIZATION, TaskKind.PROPAGATION}), steps_per_phase),
        Phase(ALL_TASKS, steps_per_phase),
    ))


def joint(total_steps: int = 9000) -> TrainSchedule:
    return TrainSchedule("joint", (Phase(ALL_TASKS, total_steps),))


PRESETS: dict[str, Callable[[int], TrainSchedule]] = {
    "hard_to_easy": hard_to_easy,
    "easy_to_hard": easy_to_hard,
    "joint": lambda steps_per_phase=3000: joint(3 * steps_per_phase),
}


def preset(name: str, steps_per_phase: int = 3000) -> TrainSchedule:
    key = name.lower().replace("-", "_").replace("hardtoeasy", "hard_to_easy").replace("easytohard", "easy_to_hard")
    if key not in PRESETS:
        raise ConfigError(f"unknown schedule preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[key](steps_per_phase)


def parse_phases(spec: str) -> TrainSchedule:
    """Inline phases such as ``"recamera:100;recamera,id_insert:200"``."""
    phases = []
    for chunk in spec.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        try:
            names, steps = chunk.rsplit(":", 1)
            phases.append(Phase(_ordered(TaskKind.parse(n) for n in names.split(",") if n.strip()), int(steps)))
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"bad phase spec {chunk!r}: {exc}") from None
    return TrainSchedule("custom", tuple(phases))


@dataclass
class TrainConfig:
    batch_size: int = 16
    lr: float = 3e-4
    warmup: int = 200
    weight_decay: float = 0.01
    grad_clip: float = 1.0
    seed: int = 0
    checkpoint_every: int = 500
    height: int = 16
    width: int = 16
    frames: tuple[int, ...] = (8,)
    use_text: bool = False
    decay: str = "none"  # "none" or "cosine" down to min_lr_ratio over the whole schedule
    min_lr_ratio: float = 0.05

    def __post_init__(self) -> None:
        self.frames = tuple(int(f) for f in self.frames)
        if self.batch_size < 1 or self.lr <= 0 or self.warmup < 0:
            raise ConfigError("batch_size, lr and warmup must be positive")
        if self.decay not in ("none", "cosine"):
            raise ConfigError(f"unknown lr decay {self.decay!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["frames"] = list(self.frames)
        return d


# --- data sources -------------------------------------------------------------------------------

class ProceduralSource:
    """Fresh generated samples; training seeds stay below the benchmark seed range."""

    def __init__(self, height: int = 16, width: int = 16, frames: Sequence[int] = (8,)):
        self.height, self.width, self.frames = height, width, tuple(frames)

    def draw(self, kind: TaskKind, rng: np.random.Generator):
        seed = int(rng.integers(BENCHMARK_SEED_BASE))
        f = self.frames[int(rng.integers(len(self.frames)))]
        return generate_sample(kind, seed, self.height, self.width, f)

    def check(self, tasks: Iterable[TaskKind]) -> None:
        pass


class DatasetSource:
    """Samples from a generated dataset directory (``manifest.txt`` index)."""

    def __init__(self, root):
        self.root = Path(root)
        manifest = self.root / "manifest.txt"
        if not manifest.exists():
            raise MissingDataset(f"no manifest at {manifest}")
        self.by_kind: dict[TaskKind, list[str]] = collections.defaultdict(list)
        for e in read_manifest(manifest):
            self.by_kind[e.kind].append(e.path)
        self._cache: dict[str, object] = {}

    def check(self, tasks: Iterable[TaskKind]) -> None:
        missing = [t.value for t in tasks if not self.by_kind.get(t)]
        if missing:
            raise MissingDataset(f"dataset {self.root} has no samples for {missing}")

    def draw(self, kind: TaskKind, rng: np.random.Generator):
        paths = self.by_kind[kind]
        rel = paths[int(rng.integers(len(paths)))]
        if rel not in self._cache:
            self._cache[rel] = load_sample(self.root / rel)
        return self._cache[rel]


# --- state and checkpoints ----------------------------------------------------------------------

@dataclass
class TrainState:
    model: EditModel
    optimizer: torch.optim.Optimizer
    schedule: TrainSchedule
    config: TrainConfig
    rng: np.random.Generator  # task and sample selection
    noise: torch.Generator  # flow-matching t and x0
    step: int = 0
    history: collections.deque = field(default_factory=lambda: collections.deque(maxlen=HISTORY_LEN))

    @property
    def phase(self) -> int:
        return self.schedule.phase_at(self.step)


def make_optimizer(model: EditModel, cfg: TrainConfig) -> torch.optim.Optimizer:
    params = [p for p in model.parameters() if p.requires_grad]
    return torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)


def init_state(model_cfg: DiTConfig, schedule: TrainSchedule, cfg: TrainConfig,
               registry: Optional[SlotRegistry] = None) -> TrainState:
    torch.manual_seed(cfg.seed)
    model = EditModel(model_cfg, registry or default_registry(), codec_seed=cfg.seed)
    return TrainState(model, make_optimizer(model, cfg), schedule, cfg, np.random.default_rng(cfg.seed),
                      torch.Generator().manual_seed(cfg.seed))


def lr_at(cfg: TrainConfig, step: int, total: Optional[int] = None) -> float:
    scale = 1.0 if cfg.warmup == 0 else min(1.0, (step + 1) / cfg.warmup)
    if cfg.decay == "cosine" and total and total > cfg.warmup:
        frac = min(1.0, max(0.0, (step - cfg.warmup) / (total - cfg.warmup)))
        scale *= cfg.min_lr_ratio + (1 - cfg.min_lr_ratio) * 0.5 * (1 + math.cos(math.pi * frac))
    return cfg.lr * scale


def _rng_state_json(rng: np.random.Generator) -> dict:
    return json.loads(json.dumps(rng.bit_generator.state))


def save_checkpoint(path, state: TrainState) -> str:
    model = state.model
    header = {
        "version": CHECKPOINT_VERSION,
        "model": model.cfg.to_dict(),
        "registry": model.registry.to_dict(),
        "registry_fingerprint": model.registry.fingerprint(),
        "flatten_order": FLATTEN_ORDER,
        "schedule": state.schedule.to_dict(),
        "train": state.config.to_dict(),
        "step": state.step,
        "phase": state.phase,
        "rng": _rng_state_json(state.rng),
        "history": [list(h) for h in state.history],
    }
    tensors: dict[str, np.ndarray] = {}
    for name, t in model.state_dict().items():
        tensors[f"model/{name}"] = t.detach().cpu().numpy()
    opt = state.optimizer.state_dict()
    for idx, st in opt["state"].items():
        for key, val in st.items():
            tensors[f"opt/{idx}/{key}"] = torch.as_tensor(val).detach().cpu().numpy()
    header["optimizer_groups"] = [{k: v for k, v in g.items() if k != "params"} for g in opt["param_groups"]]
    tensors["noise_rng"] = state.noise.get_state().numpy()
    return write_container(path, CHECKPOINT_MAGIC, header, tensors)


def load_checkpoint(path) -> TrainState:
    header, tensors = read_container(path, CHECKPOINT_MAGIC)
    if header.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {header.get('version')}")
    if header.get("flatten_order") != FLATTEN_ORDER:
        raise FormatError(f"checkpoint pose flattening {header.get('flatten_order')!r} != {FLATTEN_ORDER!r}")
    registry = SlotRegistry.from_dict(header["registry"])
    if registry.fingerprint() != header["registry_fingerprint"]:
        raise FormatError("registry fingerprint mismatch")
    mcfg = DiTConfig(**header["model"])
    tcfg = TrainConfig(**header["train"])
    schedule = TrainSchedule.from_dict(header["schedule"])
    model = EditModel(mcfg, registry)
    sd = {k[len("model/"):]: torch.from_numpy(v) for k, v in tensors.items() if k.startswith("model/")}
    model.load_state_dict(sd)
    optimizer = make_optimizer(model, tcfg)
    opt_sd = optimizer.state_dict()
    state_dict: dict = collections.defaultdict(dict)
    for k, v in tensors.items():
        if k.startswith("opt/"):
            _, idx, key = k.split("/", 2)
            state_dict[int(idx)][key] = torch.from_numpy(v)
    groups = []
    for g_saved, g in zip(header["optimizer_groups"], opt_sd["param_groups"]):
        groups.append({**g_saved, "params": g["params"]})
    optimizer.load_state_dict({"state": dict(state_dict), "param_groups": groups})
    rng = np.random.default_rng()
    rng.bit_generator.state = header["rng"]
    noise = torch.Generator()
    noise.set_state(torch.from_numpy(tensors["noise_rng"]))
    hist = collections.deque((tuple(h) for h in header["history"]), maxlen=HISTORY_LEN)
    return TrainState(model, optimizer, schedule, tcfg, rng, noise, int(header["step"]), hist)


def load_model(path) -> EditModel:
    model = load_checkpoint(path).model
    model.eval()
    return model


# --- training loop ------------------------------------------------------------------------------

@dataclass
class StepRecord:
    step: int
    phase: int
    loss: float
    per_task: dict

    def line(self) -> str:
        tasks = "\t".join(f"{k}={v:.6g}" for k, v in sorted(self.per_task.items()))
        return f"step={self.step}\tphase={self.phase}\tloss={self.loss:.6g}\t{tasks}"

    @classmethod
    def parse(cls, line: str) -> "StepRecord":
        fields = dict(p.split("=", 1) for p in line.strip().split("\t"))
        step, phase, loss = int(fields.pop("step")), int(fields.pop("phase")), float(fields.pop("loss"))
        return cls(step, phase, loss, {k: float(v) for k, v in fields.items()})


def read_metrics(path) -> list[StepRecord]:
    return [StepRecord.parse(l) for l in Path(path).read_text().splitlines() if l.strip()]


def draw_batch(state: TrainState, source) -> list:
    tasks = state.schedule.phases[state.phase].tasks
    out = []
    for _ in range(state.config.batch_size):
        kind = tasks[int(state.rng.integers(len(tasks)))]
        out.append(source.draw(kind, state.rng))
    return out


def train_step(state: TrainState, source) -> StepRecord:
    model, opt = state.model, state.optimizer
    model.train()
    samples = draw_batch(state, source)
    preps = [model.prepare(s, use_text=state.config.use_text) for s in samples]
    for g in opt.param_groups:
        g["lr"] = lr_at(state.config, state.step, state.schedule.total_steps)
    opt.zero_grad(set_to_none=True)
    try:
        loss, per = flow_loss(model, preps, state.noise)
    except NonFiniteActivation as exc:
        raise NonFiniteLoss(f"step {state.step}: {exc}") from exc
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"non-finite loss at step {state.step}")
    loss.backward()
    if state.config.grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), state.config.grad_clip)
    opt.step()
    by_task: dict[str, list[float]] = collections.defaultdict(list)
    for p, l in zip(preps, per.tolist()):
        by_task[p.kind.value].append(l)
    rec = StepRecord(state.step, state.phase, float(loss.detach()), {k: float(np.mean(v)) for k, v in by_task.items()})
    state.history.append((rec.step, rec.loss))
    state.step += 1
    return rec


def train(state: TrainState, source=None, out_dir=None, until: Optional[int] = None,
          log: Optional[Callable[[StepRecord], None]] = None) -> list[StepRecord]:
    """Run ``state`` forward to ``until`` (default: end of schedule).

    With ``out_dir`` the metrics log is appended and checkpoints land at phase
    boundaries, every ``checkpoint_every`` steps and at the end (``last.cxck``).
    """
    cfg = state.config
    source = source or ProceduralSource(cfg.height, cfg.width, cfg.frames)
    source.check({t for p in state.schedule.phases for t in p.tasks})
    end = state.schedule.total_steps if until is None else min(until, state.schedule.total_steps)
    out = Path(out_dir) if out_dir is not None else None
    boundaries = set(np.cumsum([p.steps for p in state.schedule.phases]).tolist())
    metrics = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        metrics = open(out / "metrics.log", "a")
    records = []
    try:
        while state.step < end:
            rec = train_step(state, source)
            records.append(rec)
            if metrics is not None:
                metrics.write(rec.line() + "\n")
                metrics.flush()
            if log is not None:
                log(rec)
            if out is not None and (state.step in boundaries or state.step % cfg.checkpoint_every == 0):
                save_checkpoint(out / f"ckpt_{state.step:06d}.cxck", state)
                save_checkpoint(out / "last.cxck", state)
        if out is not None:
            save_checkpoint(out / "last.cxck", state)
    finally:
        if metrics is not None:
            metrics.close()
    return records


def phase_trend(records: Sequence[StepRecord], phase: int, window: int = 25, alpha: float = 0.05) -> dict:
    """Kendall trend test on the smoothed loss of one phase.

    Passes unless the smoothed loss shows a significant upward trend.
    """
    losses = np.array([r.loss for r in records if r.phase == phase], dtype=np.float64)
    if len(losses) < 2 * window:
        return {"ok": True, "tau": 0.0, "p": 1.0, "n": int(len(losses))}
    smooth = np.convolve(losses, np.ones(window) / window, mode="valid")[::window]
    if len(smooth) < 3:
        return {"ok": True, "tau": 0.0, "p": 1.0, "n": int(len(losses))}
    res = stats.kendalltau(np.arange(len(smooth)), smooth, alternative="greater")
    tau = 0.0 if math.isnan(res.statistic) else float(res.statistic)
    p = 1.0 if math.isnan(res.pvalue) else float(res.pvalue)
    return {"ok": not (p < alpha), "tau": tau, "p": p, "n": int(len(losses))}


# --- D1..D4 -------------------------------------------------------------------------------------

ABLATIONS = {
    "D1": {"rope_mode": "sequential", "condition_bias": False},
    "D2": {"rope_mode": "sequential", "condition_bias": True},
    "D3": {"rope_mode": "task_aware", "condition_bias": False},
    "D4": {"rope_mode": "task_aware", "condition_bias": True},
}


def ablation_configs(base: DiTConfig) -> dict[str, DiTConfig]:
    return {name: replace(base, **opts) for name, opts in ABLATIONS.items()}


def ablation_grid(base: DiTConfig, schedule: TrainSchedule, cfg: TrainConfig, out_dir=None,
                  source_factory: Optional[Callable[[], object]] = None,
                  log: Optional[Callable[[str, StepRecord], None]] = None) -> dict[str, TrainState]:
    """Train D1..D4 with identical seeds, schedule and data stream."""
    results = {}
    for name, mcfg in ablation_configs(base).items():
        state = init_state(mcfg, schedule, copy.deepcopy(cfg))
        source = source_factory() if source_factory else None
        sub = None if out_dir is None else Path(out_dir) / name
        train(state, source, sub, log=(lambda r, n=name: log(n, r)) if log else None)
        results[name] = state
    return results
