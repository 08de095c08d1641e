"""Experiment configuration, training runs, the ablation suite and plot data."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

import medeyes
from medeyes.core import RewardWeights, Source, Trajectory
from medeyes.cvs import (
    CvsConfig,
    ReplayBuffer,
    build_buffer,
    build_random_buffer,
    generate_expert_trajectory,
    generate_flat_trajectory,
)
from medeyes.env import Episode, GeneratorConfig, OracleConfig, check_answer, generate_episode
from medeyes.grn import Exploration, GrnConfig
from medeyes.grpo import METRIC_COLUMNS, AdamW, GrpoConfig, MissingCoverage, TrainContext, train_step
from medeyes.policy import (
    ActionVocab,
    DecodeRule,
    Featurizer,
    FeatureSpec,
    PolicyParams,
    sample_rollout,
    save_checkpoint,
)
from medeyes.rewards import DiversityConfig

log = logging.getLogger(__name__)

BUFFER_SOURCES = ("grn_cvs", "random", "recency", "reward_oriented")
COMPONENT_VARIANTS = ("full", "no_grn", "no_cvs", "no_offpolicy", "scanning_only", "drilling_only")
EVAL_SEED_BASE = 10**9
TRAIN_SEED_STRIDE = 10**6
SMOOTH_WINDOW = 10


class ConfigError(ValueError):
    pass


# ----------------------------------------------------------------- config


@dataclass(frozen=True)
class RewardSettings:
    weights: RewardWeights = RewardWeights()
    diversity: DiversityConfig = DiversityConfig()


@dataclass(frozen=True)
class Ablation:
    disable_grn: bool = False
    disable_cvs: bool = False
    disable_offpolicy: bool = False
    scanning_only: bool = False
    drilling_only: bool = False
    buffer_source: str = "grn_cvs"

    def __post_init__(self):
        if self.buffer_source not in BUFFER_SOURCES:
            raise ConfigError(f"buffer_source must be one of {BUFFER_SOURCES}, got {self.buffer_source!r}")

    def effective(self) -> Ablation:
        """Same switches with the ones that cannot matter reset, for deduplication."""
        if self.disable_offpolicy:
            return Ablation(disable_offpolicy=True)
        if self.buffer_source != "grn_cvs":
            return Ablation(buffer_source=self.buffer_source)
        if self.disable_grn:
            return replace(self, scanning_only=False, drilling_only=False)
        return self


@dataclass(frozen=True)
class RunSettings:
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    out_dir: str = "runs"
    n_train: int = 128
    n_eval: int = 200
    # policy-generated entries kept per episode by the recency / reward-oriented sources
    history_size: int = 8
    workers: int = 1
    checkpoint_every: int = 100
    # read the expert buffer from this JSONL instead of building it; "{seed}" is substituted
    buffer_path: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if any(not 0 <= s < 1000 for s in self.seeds):
            raise ConfigError("seeds must lie in [0, 1000)")
        if not 1 <= self.n_train < TRAIN_SEED_STRIDE:
            raise ConfigError(f"n_train must lie in [1, {TRAIN_SEED_STRIDE})")
        if self.n_eval < 1 or self.history_size < 1 or self.workers < 1 or self.checkpoint_every < 0:
            raise ConfigError("n_eval, history_size and workers must be >= 1; checkpoint_every >= 0")


def _needle_generator() -> GeneratorConfig:
    return GeneratorConfig.needle_mode()


def _desk_grpo() -> GrpoConfig:
    return GrpoConfig(iterations=500)


@dataclass(frozen=True)
class ExperimentConfig:
    generator: GeneratorConfig = field(default_factory=_needle_generator)
    oracle: OracleConfig = OracleConfig()
    grn: GrnConfig = GrnConfig()
    cvs: CvsConfig = CvsConfig()
    reward: RewardSettings = RewardSettings()
    grpo: GrpoConfig = field(default_factory=_desk_grpo)
    run: RunSettings = RunSettings()
    ablation: Ablation = Ablation()

    def __post_init__(self):
        if self.cvs.t_max > self.grpo.t_max:
            raise ConfigError("cvs.t_max must not exceed grpo.t_max (expert steps must be emittable)")

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    @classmethod
    def from_dict(cls, data: dict) -> ExperimentConfig:
        try:
            return _build(cls, data or {}, "")
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def hash(self) -> str:
        """Digest of everything that affects per-seed results."""
        d = self.to_dict()
        for k in ("seeds", "out_dir", "workers"):
            d["run"].pop(k)
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_ablation(self, ablation: Ablation) -> ExperimentConfig:
        return replace(self, ablation=ablation)


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, Exploration):
        return x.value
    return x


def _build(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section {where or 'root'!r} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where or 'root'}: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        default = getattr(cls(), name) if name not in _NESTED.get(cls, {}) else None
        sub = _NESTED.get(cls, {}).get(name)
        if sub is not None:
            kwargs[name] = _build(sub, value, f"{where}.{name}".strip("."))
        elif isinstance(default, tuple) and isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


_NESTED = {
    ExperimentConfig: {
        "generator": GeneratorConfig, "oracle": OracleConfig, "grn": GrnConfig, "cvs": CvsConfig,
        "reward": RewardSettings, "grpo": GrpoConfig, "run": RunSettings, "ablation": Ablation,
    },
    RewardSettings: {"weights": RewardWeights, "diversity": DiversityConfig},
}


def load_config(path: str | Path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        try:
            data = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return ExperimentConfig.from_dict(data or {})


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)


# ------------------------------------------------------------ components


@dataclass
class Components:
    vocab: ActionVocab
    featurizer: Featurizer
    ctx: TrainContext


def components(cfg: ExperimentConfig) -> Components:
    g = cfg.generator
    vocab = ActionVocab(g.grid_size, g.bin_size)
    featurizer = Featurizer(FeatureSpec(grid_size=g.grid_size, bin_size=g.bin_size), DecodeRule(vocab, cfg.grpo.t_max))
    ctx = TrainContext(vocab, featurizer, cfg.reward.weights, cfg.reward.diversity)
    return Components(vocab, featurizer, ctx)


def train_episodes(cfg: ExperimentConfig, seed: int) -> list[Episode]:
    return [generate_episode(seed * TRAIN_SEED_STRIDE + i, cfg.generator) for i in range(cfg.run.n_train)]


def eval_episodes(cfg: ExperimentConfig) -> list[Episode]:
    """Held-out set; its seeds lie above every training seed."""
    return [generate_episode(EVAL_SEED_BASE + i, cfg.generator) for i in range(cfg.run.n_eval)]


class HistoryBuffer:
    """Off-policy source filled from the policy's own earlier rollouts.

    Keeps ``size`` entries per episode: the most recent ones ("recency") or
    the highest composite reward ones ("reward_oriented", ties go to the
    more recent). Episodes not yet visited have no entries.
    """

    strict = False

    def __init__(self, rule: str, size: int = 8):
        if rule not in ("recency", "reward_oriented"):
            raise ValueError(f"unknown history rule {rule!r}")
        self.rule = rule
        self.size = size
        self._store: dict[str, list[tuple[float, int, Trajectory]]] = {}
        self._clock = 0

    def record(self, ref: str, traj: Trajectory, reward: float) -> None:
        entry = replace(traj, source=Source.OFF)
        self._clock += 1
        pool = self._store.setdefault(ref, [])
        pool.append((reward, self._clock, entry))
        if self.rule == "recency":
            pool.sort(key=lambda e: -e[1])
        else:
            pool.sort(key=lambda e: (-e[0], -e[1]))
        del pool[self.size:]

    def for_episode(self, ref: str) -> list[Trajectory]:
        return [t for _, _, t in self._store.get(ref, [])]

    def __len__(self) -> int:
        return sum(len(v) for v in self._store.values())


def expert_generator(ab: Ablation, grn_cfg: GrnConfig):
    """Expert trajectory function and navigator config implied by the switches."""
    if ab.disable_grn:
        return generate_flat_trajectory, grn_cfg
    if ab.scanning_only and ab.drilling_only:
        return _no_navigation, grn_cfg
    if ab.scanning_only:
        return generate_expert_trajectory, replace(grn_cfg, exploration=Exploration.SCANNING_ONLY)
    if ab.drilling_only:
        return generate_expert_trajectory, replace(grn_cfg, exploration=Exploration.DRILLING_ONLY)
    return generate_expert_trajectory, grn_cfg


def _no_navigation(episode, oracle_cfg, grn_cfg, cvs_cfg, rng, vocab=None):
    # both exploration modes removed: the expert answers with no evidence
    return generate_expert_trajectory(episode, oracle_cfg, grn_cfg, replace(cvs_cfg, t_max=1), rng, vocab)


def build_offpolicy_source(cfg: ExperimentConfig, episodes: list[Episode], seed: int, vocab: ActionVocab):
    ab = cfg.ablation
    if ab.disable_offpolicy:
        return None
    if ab.buffer_source in ("recency", "reward_oriented"):
        return HistoryBuffer(ab.buffer_source, cfg.run.history_size)
    if ab.buffer_source == "random":
        return build_random_buffer(episodes, cfg.cvs.n_expert, cfg.cvs.t_max, seed, vocab)
    if cfg.run.buffer_path:
        path = cfg.run.buffer_path.format(seed=seed)
        buf = ReplayBuffer.from_jsonl(path, vocab)
        have = buf.refs()
        for ep in episodes:
            if ep.ref not in have:
                raise MissingCoverage(f"buffer {path} has no entries for episode {ep.ref}")
        return buf
    gen, grn_cfg = expert_generator(ab, cfg.grn)
    cvs_cfg = replace(cfg.cvs, enabled=False) if ab.disable_cvs else cfg.cvs
    return build_buffer(episodes, cfg.oracle, grn_cfg, cvs_cfg, seed, vocab, generator=gen)


# --------------------------------------------------------------- training


@dataclass
class RunManifest:
    config_hash: str
    variant: str
    seeds: list[int]
    code_version: str
    metric_files: dict[str, str]
    summary_files: dict[str, str]
    out_dir: str
    wall_clock: float = 0.0

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> RunManifest:
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def smoothed(values: list[float], window: int = SMOOTH_WINDOW) -> np.ndarray:
    """Trailing moving average; the first ``window - 1`` points average what exists."""
    x = np.asarray(values, dtype=np.float64)
    c = np.cumsum(np.insert(x, 0, 0.0))
    idx = np.arange(1, len(x) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def evaluate(params: PolicyParams, episodes: list[Episode], comps: Components, t_max: int, seed: int) -> float:
    """Held-out success: mean accuracy reward of one sampled rollout per episode."""
    rng = np.random.default_rng([seed, 0xE7A1])
    hits = [check_answer(ep.query, sample_rollout(params, ep, comps.vocab, comps.featurizer, rng, t_max).answer)
            for ep in episodes]
    return float(np.mean(hits))


def train_seed(cfg: ExperimentConfig, seed: int, run_dir: str | Path) -> dict:
    """Buffer build, GRPO loop, evaluation and artifacts for one seed."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    comps = components(cfg)
    episodes = train_episodes(cfg, seed)
    source = build_offpolicy_source(cfg, episodes, seed, comps.vocab)
    if isinstance(source, ReplayBuffer):
        source.to_jsonl(run_dir / "buffer.jsonl")
    history = source if isinstance(source, HistoryBuffer) else None
    params = PolicyParams.zeros(comps.featurizer.dim, comps.vocab.size)
    opt = AdamW.from_config(params.theta.shape, cfg.grpo)
    rng = np.random.default_rng([seed, 0x7A1])
    rows = []
    every = cfg.run.checkpoint_every
    for it in range(cfg.grpo.iterations):
        pick = rng.choice(len(episodes), size=min(cfg.grpo.prompts_per_iter, len(episodes)), replace=False)
        prompts = [episodes[i] for i in pick]
        params, m = train_step(params, prompts, source, comps.ctx, cfg.grpo, opt, rng, it, history)
        rows.append(m)
        if every and (it + 1) % every == 0:
            save_checkpoint(params, comps.vocab, run_dir / f"ckpt_{it + 1:05d}.bin")
    save_checkpoint(params, comps.vocab, run_dir / "policy.bin")
    metrics_path = run_dir / "metrics.csv"
    with open(metrics_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for m in rows:
            w.writerow([_fmt(m[c]) for c in METRIC_COLUMNS])
    rewards = [m["mean_reward_on"] for m in rows]
    sm = smoothed(rewards) if rows else np.zeros(0)
    success = evaluate(params, eval_episodes(cfg), comps, cfg.grpo.t_max, seed)
    summary = {
        "seed": seed,
        "iterations": len(rows),
        "initial_smoothed_reward": float(sm[SMOOTH_WINDOW - 1]) if len(sm) >= SMOOTH_WINDOW else None,
        "final_smoothed_reward": float(sm[-1]) if len(sm) else None,
        "mean_length_curve": [m["mean_len"] for m in rows],
        "held_out_success": success,
        "n_eval": cfg.run.n_eval,
    }
    summary_path = run_dir / "summary.json"
    summary_path.write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    return {"seed": seed, "metrics": str(metrics_path), "summary": str(summary_path), "success": success}


def _job(args):
    cfg, seed, run_dir = args
    return train_seed(cfg, seed, run_dir)


def _run_jobs(jobs: list[tuple], workers: int) -> list[dict]:
    if workers <= 1 or len(jobs) <= 1:
        return [_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_job, jobs))


def run_training(cfg: ExperimentConfig, variant: str = "full", out_dir: str | Path | None = None) -> RunManifest:
    """Train every configured seed; write metrics, summaries, checkpoints and a manifest."""
    if not cfg.run.seeds:
        raise ConfigError("no seeds configured")
    base = Path(out_dir if out_dir is not None else cfg.run.out_dir) / variant
    base.mkdir(parents=True, exist_ok=True)
    save_config(cfg, base / "config.yaml")
    t0 = time.perf_counter()
    results = _run_jobs([(cfg, s, base / f"seed_{s}") for s in cfg.run.seeds], cfg.run.workers)
    manifest = RunManifest(
        config_hash=cfg.hash(),
        variant=variant,
        seeds=list(cfg.run.seeds),
        code_version=medeyes.__version__,
        metric_files={str(r["seed"]): r["metrics"] for r in results},
        summary_files={str(r["seed"]): r["summary"] for r in results},
        out_dir=str(base),
        wall_clock=time.perf_counter() - t0,
    )
    manifest.save(base / "manifest.json")
    successes = [r["success"] for r in results]
    (base / "summary.json").write_text(json.dumps({
        "variant": variant,
        "config_hash": manifest.config_hash,
        "seeds": manifest.seeds,
        "held_out_success": successes,
        "mean_held_out_success": float(np.mean(successes)),
    }, indent=2) + "\n", encoding="utf-8")
    log.info("variant %s: mean held-out success %.3f over %d seed(s)", variant, np.mean(successes), len(successes))
    return manifest


# ------------------------------------------------------------ ablations


def component_ablation(name: str) -> Ablation:
    return {
        "full": Ablation(),
        "no_grn": Ablation(disable_grn=True),
        "no_cvs": Ablation(disable_cvs=True),
        "no_offpolicy": Ablation(disable_offpolicy=True),
        "scanning_only": Ablation(scanning_only=True),
        "drilling_only": Ablation(drilling_only=True),
    }[name]


def ablation_matrix(components_: tuple[str, ...] = COMPONENT_VARIANTS,
                    sources: tuple[str, ...] = BUFFER_SOURCES) -> dict[str, Ablation]:
    """Named switch combinations; the name is the component, plus ``+source`` off the default source."""
    out = {}
    for c in components_:
        for s in sources:
            name = c if s == "grn_cvs" else f"{c}+{s}"
            out[name] = replace(component_ablation(c), buffer_source=s)
    return out


@dataclass
class SuiteRow:
    variant: str
    aliases: list[str]
    per_seed: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_seed))


def run_ablation_suite(cfg: ExperimentConfig, variants: dict[str, Ablation] | None = None,
                       out_dir: str | Path | None = None) -> list[SuiteRow]:
    """Run each distinct switch combination and rank variants by mean held-out success.

    Combinations whose effective switches coincide (for example any
    component switch together with a policy-history buffer) run once and are
    reported under the first name, with the others as aliases.
    """
    if not cfg.run.seeds:
        raise ConfigError("ablation suite needs at least one seed")
    variants = ablation_matrix() if variants is None else variants
    if not variants:
        raise ConfigError("ablation suite needs at least one variant")
    base = Path(out_dir if out_dir is not None else cfg.run.out_dir)
    groups: dict[Ablation, list[str]] = {}
    for name, ab in variants.items():
        groups.setdefault(ab.effective(), []).append(name)
    jobs, owners = [], []
    for ab, names in groups.items():
        vcfg = cfg.with_ablation(ab)
        (base / names[0]).mkdir(parents=True, exist_ok=True)
        save_config(vcfg, base / names[0] / "config.yaml")
        for s in cfg.run.seeds:
            jobs.append((vcfg, s, base / names[0] / f"seed_{s}"))
            owners.append(names[0])
    results = _run_jobs(jobs, cfg.run.workers)
    by_variant: dict[str, list[dict]] = {}
    for owner, r in zip(owners, results):
        by_variant.setdefault(owner, []).append(r)
    rows = []
    for ab, names in groups.items():
        res = by_variant[names[0]]
        vcfg = cfg.with_ablation(ab)
        RunManifest(
            config_hash=vcfg.hash(), variant=names[0], seeds=list(cfg.run.seeds),
            code_version=medeyes.__version__,
            metric_files={str(r["seed"]): r["metrics"] for r in res},
            summary_files={str(r["seed"]): r["summary"] for r in res},
            out_dir=str(base / names[0]),
        ).save(base / names[0] / "manifest.json")
        rows.append(SuiteRow(names[0], names[1:], [r["success"] for r in res]))
    rows.sort(key=lambda r: -r.mean)
    write_suite_table(rows, cfg.run.seeds, base / "ablation.csv")
    return rows


def write_suite_table(rows: list[SuiteRow], seeds, path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "variant", "mean_success"] + [f"seed_{s}" for s in seeds] + ["aliases"])
        for i, r in enumerate(rows, 1):
            w.writerow([i, r.variant, repr(r.mean)] + [repr(x) for x in r.per_seed] + [" ".join(r.aliases)])


def format_suite(rows: list[SuiteRow]) -> str:
    width = max(len(r.variant) for r in rows)
    lines = [f"{'rank':>4}  {'variant':<{width}}  mean    per-seed"]
    for i, r in enumerate(rows, 1):
        seeds = " ".join(f"{x:.3f}" for x in r.per_seed)
        lines.append(f"{i:>4}  {r.variant:<{width}}  {r.mean:.3f}   {seeds}")
    return "\n".join(lines)


# ------------------------------------------------------------- plot data


def _read_metrics(path: str | Path) -> list[dict]:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"missing metrics file {p}")
    with open(p, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def emit_plots_data(manifests: list[RunManifest] | RunManifest, out_dir: str | Path) -> dict[str, Path]:
    """Tidy CSVs: reward vs iteration and mean length vs iteration, per variant and seed."""
    if isinstance(manifests, RunManifest):
        manifests = [manifests]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reward_path, length_path = out / "reward.csv", out / "length.csv"
    with open(reward_path, "w", newline="", encoding="utf-8") as rf, \
            open(length_path, "w", newline="", encoding="utf-8") as lf:
        rw = csv.writer(rf, lineterminator="\n")
        lw = csv.writer(lf, lineterminator="\n")
        rw.writerow(["variant", "seed", "iter", "reward", "reward_smoothed"])
        lw.writerow(["variant", "seed", "iter", "mean_len"])
        for man in manifests:
            for seed, path in sorted(man.metric_files.items(), key=lambda kv: int(kv[0])):
                rows = _read_metrics(path)
                rewards = [float(r["mean_reward_on"]) for r in rows]
                sm = smoothed(rewards)
                for r, s in zip(rows, sm):
                    rw.writerow([man.variant, seed, r["iter"], r["mean_reward_on"], repr(float(s))])
                    lw.writerow([man.variant, seed, r["iter"], r["mean_len"]])
    return {"reward": reward_path, "length": length_path}


def find_manifests(root: str | Path) -> list[RunManifest]:
    paths = sorted(Path(root).glob("*/manifest.json"))
    if not paths:
        raise FileNotFoundError(f"no run manifests under {root}")
    return [RunManifest.load(p) for p in paths]


__all__ = [
    "Ablation",
    "BUFFER_SOURCES",
    "COMPONENT_VARIANTS",
    "ConfigError",
    "ExperimentConfig",
    "HistoryBuffer",
    "RewardSettings",
    "RunManifest",
    "RunSettings",
    "SuiteRow",
    "ablation_matrix",
    "component_ablation",
    "emit_plots_data",
    "evaluate",
    "find_manifests",
    "format_suite",
    "load_config",
    "run_ablation_suite",
    "run_training",
    "save_config",
    "smoothed",
    "train_seed",
]
