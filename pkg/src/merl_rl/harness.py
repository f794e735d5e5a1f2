"""Experiment orchestration: seeded runs, the head ablation grid, task transfer,
and seed aggregation.

Per run ``<name>`` inside ``out_dir``:

``<name>.metrics.jsonl``  one record per update; byte-identical across reruns
``<name>.timing.jsonl``   wall-clock milliseconds per update (not deterministic)
``<name>.ckpt-NNNNN.json`` periodic agent checkpoints
``<name>.final.json``     final agent checkpoint
``<name>.FAILED``         present only if the run aborted
"""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import re
import time
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .agent import AgentParams, agent_to_dict, init_agent, param_hash
from .algo import HyperParams, RolloutCollector, init_optimizer, prepare_batch, profile_hyper, update
from .diffcore import ConfigurationError, NumericalError
from .envs import make_env

log = logging.getLogger(__name__)

VARIANTS = {
    "none": (False, False),
    "ve": (True, False),
    "fs": (False, True),
    "ve_fs": (True, True),
}


@dataclass
class ExperimentConfig:
    env_id: str = "PointMass2D"
    transfer_env_id: Optional[str] = None
    profile: str = "control"
    architecture: str = "separate"
    hyper: HyperParams = field(default_factory=HyperParams)
    ve_head: bool = True
    fs_head: bool = True
    seeds: list[int] = field(default_factory=lambda: [0])
    switch_step: Optional[int] = None
    out_dir: str = "runs"
    hidden: tuple[int, ...] = (64, 64)
    env_kwargs: dict = field(default_factory=dict)
    checkpoint_every: int = 0
    return_window: int = 100

    def __post_init__(self):
        if isinstance(self.hyper, dict):
            self.hyper = HyperParams.from_dict(self.hyper)
        self.hidden = tuple(int(h) for h in self.hidden)
        self.seeds = [int(s) for s in self.seeds]
        self.validate()

    def validate(self) -> None:
        if not self.seeds:
            raise ConfigurationError("seed list must not be empty")
        if self.architecture not in ("separate", "shared"):
            raise ConfigurationError(f"unknown architecture {self.architecture!r}")
        if self.total_steps < self.hyper.batch_size:
            raise ConfigurationError("total_steps must cover at least one rollout")
        if self.switch_step is not None and not 0 < self.switch_step < self.total_steps:
            raise ConfigurationError("switch_step must lie strictly inside (0, total_steps)")

    @property
    def total_steps(self) -> int:
        return self.hyper.total_steps

    @property
    def variant(self) -> str:
        for name, flags in VARIANTS.items():
            if flags == (self.ve_head, self.fs_head):
                return name
        raise AssertionError("unreachable")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        profile = data.get("profile", "control")
        base = default_config(profile).to_dict()
        hyper = {**base.pop("hyper"), **data.pop("hyper", {})}
        return cls(**{**base, **data, "hyper": hyper})


def default_config(profile: str = "control") -> ExperimentConfig:
    """The two shipped presets.

    ``control``: separate networks on PointMass2D. ``shared``: shared trunk,
    four actors, GridRooms-A with GridRooms-B as the transfer task.
    """
    if profile == "control":
        return ExperimentConfig(env_id="PointMass2D", profile="control", architecture="separate",
                                hyper=profile_hyper("control", total_steps=200_000))
    if profile == "shared":
        return ExperimentConfig(env_id="GridRooms-A", transfer_env_id="GridRooms-B", profile="shared",
                                architecture="shared", hyper=profile_hyper("shared", total_steps=200_000))
    raise ConfigurationError(f"unknown profile {profile!r}")


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    """Apply ``key=value`` strings; dotted keys reach into nested sections."""
    data = copy.deepcopy(data)
    for item in overrides or []:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = _parse_value(raw)
    return data


def load_config(path: Optional[str] = None, overrides: Optional[list[str]] = None,
                profile: Optional[str] = None) -> ExperimentConfig:
    data: dict = {}
    if path:
        try:
            with open(path) as f:
                data = json.load(f)
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    if profile:
        data.setdefault("profile", profile)
    data = apply_overrides(data, overrides or [])
    return ExperimentConfig.from_dict(data)


# -- training loop ------------------------------------------------------------


@dataclass
class RunResult:
    name: str
    seed: int
    status: str  # "ok" or "failed"
    metrics_path: Path
    updates: int
    error: Optional[str] = None
    final_score: Optional[float] = None
    extra: dict = field(default_factory=dict)


def _clean(x):
    if isinstance(x, float):
        return x if math.isfinite(x) else None
    if isinstance(x, (np.floating, np.integer)):
        return _clean(x.item())
    return x


class Trainer:
    """Parameters, optimizer state and RNG streams for one seeded run."""

    def __init__(self, config: ExperimentConfig, seed: int, ve_head: Optional[bool] = None,
                 fs_head: Optional[bool] = None, env_id: Optional[str] = None):
        self.config = config
        self.seed = int(seed)
        self.hyper = config.hyper
        env_id = env_id or config.env_id
        spec = make_env(env_id, **config.env_kwargs.get(env_id, {})).spec()
        self.params: AgentParams = init_agent(
            spec.observation.dim, spec.action, config.architecture, config.hidden,
            config.ve_head if ve_head is None else ve_head,
            config.fs_head if fs_head is None else fs_head,
            seed=self.seed,
        )
        self.opt = init_optimizer(self.params)
        self.shuffle_rng = np.random.default_rng([self.seed, 1])
        self.global_step = 0
        self.update_index = 0
        self._phase_count = 0
        self.collector: Optional[RolloutCollector] = None
        self.set_env(env_id)

    def set_env(self, env_id: str) -> None:
        """Start fresh episodes on ``env_id``; parameters and optimizer are untouched."""
        n = self.hyper.num_actors
        envs = [make_env(env_id, **self.config.env_kwargs.get(env_id, {})) for _ in range(n)]
        self.collector = RolloutCollector(envs, [self.seed, 2, self._phase_count])
        self._phase_count += 1
        self.recent = deque(maxlen=self.config.return_window)
        self._seen_episodes = 0

    def iterate(self) -> tuple[dict, dict]:
        """One collect / prepare / update cycle; returns (metrics record, timing)."""
        h = self.hyper
        t0 = time.perf_counter()
        batch = self.collector.collect(self.params, h.horizon)
        t1 = time.perf_counter()
        batch, targets = prepare_batch(batch, h)
        t2 = time.perf_counter()
        self.params, self.opt, stats = update(batch, targets, self.params, self.opt, h, self.shuffle_rng)
        t3 = time.perf_counter()
        self.global_step += len(batch)
        self.update_index += 1
        new = self.collector.episode_returns[self._seen_episodes:]
        self._seen_episodes += len(new)
        self.recent.extend(new)
        record = {
            "step": self.global_step,
            "update": self.update_index,
            "mean_return": float(np.mean(self.recent)) if self.recent else None,
            "episodes": len(self.collector.episode_returns),
            **{k: _clean(v) for k, v in stats.items()},
            **{k: _clean(v) for k, v in targets.stats().items()},
        }
        timing = {
            "update": self.update_index,
            "collect_ms": 1e3 * (t1 - t0),
            "prepare_ms": 1e3 * (t2 - t1),
            "update_ms": 1e3 * (t3 - t2),
            "iteration_ms": 1e3 * (t3 - t0),
        }
        return record, timing


class RunFiles:
    def __init__(self, out_dir, name: str):
        self.dir = Path(out_dir)
        try:
            self.dir.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise OSError(f"cannot create output directory {self.dir}: {exc}") from exc
        self.name = name
        self.metrics = self.dir / f"{name}.metrics.jsonl"
        self.timing = self.dir / f"{name}.timing.jsonl"
        self.failed = self.dir / f"{name}.FAILED"
        for p in (self.metrics, self.timing, self.failed):
            if p.exists():
                p.unlink()

    def checkpoint(self, params: AgentParams, tag: str) -> Path:
        path = self.dir / f"{self.name}.{tag}.json"
        with open(path, "w") as f:
            json.dump(agent_to_dict(params), f, sort_keys=True)
        return path

    def append(self, path: Path, record: dict) -> None:
        with open(path, "a") as f:
            f.write(json.dumps(record) + "\n")


def _train_phase(trainer: Trainer, files: RunFiles, n_updates: int, phase: str) -> None:
    every = trainer.config.checkpoint_every
    for _ in range(n_updates):
        record, timing = trainer.iterate()
        record["phase"] = phase
        timing["phase"] = phase
        files.append(files.metrics, record)
        files.append(files.timing, timing)
        if every and trainer.update_index % every == 0:
            files.checkpoint(trainer.params, f"ckpt-{trainer.update_index:05d}")


def _guarded(files: RunFiles, seed: int, body) -> RunResult:
    try:
        extra = body() or {}
    except (NumericalError, FloatingPointError) as exc:
        msg = f"{type(exc).__name__}: {exc}"
        with open(files.failed, "w") as f:
            json.dump({"error": msg, "stats": _jsonable(getattr(exc, "stats", {}))}, f)
        log.error("run %s aborted: %s", files.name, msg)
        return RunResult(files.name, seed, "failed", files.metrics, _count_lines(files.metrics), msg)
    records = read_metrics(files.metrics)
    score = records[-1]["mean_return"] if records else None
    return RunResult(files.name, seed, "ok", files.metrics, len(records), final_score=score, extra=extra)


def _jsonable(d: dict) -> dict:
    return {k: _clean(v) for k, v in d.items()}


def _count_lines(path: Path) -> int:
    return sum(1 for _ in open(path)) if path.exists() else 0


def run_experiment(config: ExperimentConfig, seed: int, name: Optional[str] = None,
                   env_id: Optional[str] = None) -> RunResult:
    """Train one seed for ``total_steps``; deterministic given (config, seed)."""
    name = name or f"{config.variant}_seed{seed}"
    files = RunFiles(config.out_dir, name)
    n_updates = config.total_steps // config.hyper.batch_size

    def body():
        trainer = Trainer(config, seed, env_id=env_id)
        _train_phase(trainer, files, n_updates, "train")
        files.checkpoint(trainer.params, "final")

    return _guarded(files, seed, body)


def _run_variant(args):
    config, seed, variant = args
    ve, fs = VARIANTS[variant]
    cfg = replace(config, ve_head=ve, fs_head=fs)
    name = f"{variant}_seed{seed}"
    try:
        return run_experiment(cfg, seed, name)
    except Exception as exc:  # keep the rest of the grid alive
        files = Path(cfg.out_dir) / f"{name}.FAILED"
        files.write_text(json.dumps({"error": f"{type(exc).__name__}: {exc}"}))
        return RunResult(name, seed, "failed", Path(cfg.out_dir) / f"{name}.metrics.jsonl", 0, str(exc))


def run_ablation(config: ExperimentConfig, variants=tuple(VARIANTS), workers: int = 1) -> list[RunResult]:
    """Every head combination on every seed; one metrics file per (variant, seed)."""
    jobs = [(config, seed, v) for seed in config.seeds for v in variants]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(_run_variant, jobs))
    return [_run_variant(j) for j in jobs]


def _opt_hash(opt) -> str:
    h = hashlib.sha256()
    for group in sorted(opt):
        st = opt[group]
        h.update(group.encode())
        h.update(st.m.tobytes())
        h.update(st.v.tobytes())
        h.update(str(st.step).encode())
    return h.hexdigest()


def check_transfer_compatible(env_a: str, env_b: str, env_kwargs: Optional[dict] = None) -> None:
    env_kwargs = env_kwargs or {}
    a = make_env(env_a, **env_kwargs.get(env_a, {})).spec()
    b = make_env(env_b, **env_kwargs.get(env_b, {})).spec()
    if a.observation != b.observation or a.action != b.action:
        raise ConfigurationError(f"{env_a} and {env_b} differ in observation or action spec")


def transfer_switch_step(config: ExperimentConfig) -> int:
    bs = config.hyper.batch_size
    switch = config.switch_step if config.switch_step is not None else config.total_steps // 2
    switch = (switch // bs) * bs
    if switch <= 0 or switch >= config.total_steps - bs + 1:
        raise ConfigurationError("switch_step must leave at least one rollout on each side")
    if config.switch_step is not None and config.switch_step % bs:
        raise ConfigurationError(f"switch_step must be a multiple of the rollout size {bs}")
    return switch


def run_transfer(config: ExperimentConfig) -> list[RunResult]:
    """Train on ``env_id``, then silently swap to ``transfer_env_id``.

    Parameters and optimizer state carry over; the only visible change is
    that new episodes come from the second task. A plain-PPO control run
    trained from scratch on the second task covers the post-switch budget.
    """
    if not config.transfer_env_id:
        raise ConfigurationError("transfer needs transfer_env_id")
    check_transfer_compatible(config.env_id, config.transfer_env_id, config.env_kwargs)
    switch = transfer_switch_step(config)
    bs = config.hyper.batch_size
    pre = switch // bs
    post = config.total_steps // bs - pre
    results = []
    for seed in config.seeds:
        files = RunFiles(config.out_dir, f"{config.variant}_transfer_seed{seed}")

        def body(seed=seed, files=files):
            trainer = Trainer(config, seed)
            _train_phase(trainer, files, pre, "pre")
            before = {"params": param_hash(trainer.params), "optimizer": _opt_hash(trainer.opt)}
            files.checkpoint(trainer.params, "switch")
            trainer.set_env(config.transfer_env_id)
            after = {"params": param_hash(trainer.params), "optimizer": _opt_hash(trainer.opt)}
            info = {"switch_step": trainer.global_step, "before": before, "after": after,
                    "continuous": before == after}
            with open(files.dir / f"{files.name}.switch.json", "w") as f:
                json.dump(info, f, indent=1, sort_keys=True)
            _train_phase(trainer, files, post, "post")
            files.checkpoint(trainer.params, "final")
            return info

        results.append(_guarded(files, seed, body))

        control_files = RunFiles(config.out_dir, f"control_seed{seed}")

        def control(seed=seed, files=control_files):
            trainer = Trainer(config, seed, ve_head=False, fs_head=False, env_id=config.transfer_env_id)
            trainer.global_step = switch
            _train_phase(trainer, files, post, "control")
            files.checkpoint(trainer.params, "final")

        results.append(_guarded(control_files, seed, control))
    return results


# -- aggregation --------------------------------------------------------------


class AlignmentError(ValueError):
    """Metrics files do not share the same step sequence."""


def read_metrics(path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def _mean_std(values: list[float]) -> tuple[float, float]:
    # fsum is exactly rounded, so the result ignores seed order.
    n = len(values)
    mean = math.fsum(values) / n
    if n < 2:
        return mean, 0.0
    return mean, math.sqrt(math.fsum((v - mean) ** 2 for v in values) / (n - 1))


@dataclass
class SeedSummary:
    steps: list[int]
    mean: list[Optional[float]]
    std: list[Optional[float]]
    finals: list[float]
    final_mean: float
    final_std: float
    warnings: list[str]

    def csv(self) -> str:
        rows = ["step,mean,std"]
        for s, m, d in zip(self.steps, self.mean, self.std):
            rows.append(f"{s},{'' if m is None else repr(m)},{'' if d is None else repr(d)}")
        return "\n".join(rows) + "\n"


def aggregate_seeds(paths) -> SeedSummary:
    """Per-step mean and sample std across seeds, plus the final-score spread.

    A run's final score is its last rolling mean return, i.e. the mean of
    its last ``return_window`` (100) episodes.
    """
    paths = list(paths)
    if not paths:
        raise ValueError("need at least one metrics file")
    runs = [read_metrics(p) for p in paths]
    steps = [r["step"] for r in runs[0]]
    for p, r in zip(paths, runs):
        if [x["step"] for x in r] != steps:
            raise AlignmentError(f"{p} has a different step sequence than {paths[0]}")
    if not steps:
        raise AlignmentError("metrics files are empty")
    means, stds = [], []
    for i in range(len(steps)):
        vals = [r[i]["mean_return"] for r in runs]
        if any(v is None for v in vals):
            means.append(None)
            stds.append(None)
            continue
        m, s = _mean_std(vals)
        means.append(m)
        stds.append(s)
    finals = [r[-1]["mean_return"] for r in runs]
    if any(v is None for v in finals):
        raise ValueError("a run finished without any completed episode")
    fm, fs = _mean_std(finals)
    warnings = ["single seed: std reported as 0"] if len(paths) == 1 else []
    for w in warnings:
        log.warning(w)
    return SeedSummary(steps, means, stds, finals, fm, fs, warnings)


def format_score(mean: float, std: float) -> str:
    return f"{mean:.2f}±{std:.2f}"


def table_row(task: str, baseline: SeedSummary, merl: SeedSummary) -> str:
    """One row shaped ``task | baseline mean±std | MERL mean±std``."""
    return (f"{task} | {format_score(baseline.final_mean, baseline.final_std)}"
            f" | {format_score(merl.final_mean, merl.final_std)}")


_SEED_RE = re.compile(r"^(?P<group>.+)_seed(?P<seed>\d+)\.metrics\.jsonl$")


def group_metrics_files(paths) -> dict[str, list[Path]]:
    groups: dict[str, list[Path]] = {}
    for p in map(Path, paths):
        m = _SEED_RE.match(p.name)
        group = m.group("group") if m else p.name.removesuffix(".metrics.jsonl")
        groups.setdefault(group, []).append(p)
    return {g: sorted(v) for g, v in sorted(groups.items())}
