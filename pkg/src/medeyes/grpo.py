"""Dual-stream GRPO: per-source advantage normalization, source-adaptive
importance ratios, clipped surrogate objective and the update step."""
from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from medeyes import kernels
from medeyes.core import RewardWeights, Source, Trajectory
from medeyes.env import Episode
from medeyes.policy import ActionVocab, Featurizer, PolicyParams, _policy_rows, sample_rollout
from medeyes.rewards import DiversityConfig, composite_reward

METRIC_COLUMNS = ("iter", "mean_reward_on", "mean_reward_off", "mean_len", "clip_frac", "sigma_on", "sigma_off")


@dataclass(frozen=True)
class GrpoConfig:
    eps_clip: float = 0.2
    eps_std: float = 1e-6
    learning_rate: float = 0.1
    rollouts_per_prompt: int = 8
    offpolicy_per_prompt: int = 6
    prompts_per_iter: int = 1
    iterations: int = 80
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    # off-policy ratio denominator: "expert-one" (pi_expert = 1) or "frozen-current"
    off_ratio: str = "expert-one"
    # "token" ratios per position, or one "trajectory" ratio shared by all positions
    ratio_level: str = "token"
    t_max: int = 3
    # statistics per source over the whole batch ("batch") or per prompt and source ("prompt")
    group_scope: str = "prompt"

    def __post_init__(self):
        if not 0.0 < self.eps_clip < 1.0:
            raise ValueError("eps_clip must be in (0, 1)")
        if self.eps_std <= 0:
            raise ValueError("eps_std must be positive")
        if self.off_ratio not in ("expert-one", "frozen-current"):
            raise ValueError(f"unknown off_ratio {self.off_ratio!r}")
        if self.group_scope not in ("batch", "prompt"):
            raise ValueError(f"unknown group_scope {self.group_scope!r}")
        if self.ratio_level not in ("token", "trajectory"):
            raise ValueError(f"unknown ratio_level {self.ratio_level!r}")
        if self.rollouts_per_prompt < 1 or self.prompts_per_iter < 1 or self.offpolicy_per_prompt < 0:
            raise ValueError("batch sizes must be positive")


@dataclass
class AdvantageBatch:
    advantages: np.ndarray
    sources: list[Source]
    stats: dict[Source, tuple[float, float]] = field(default_factory=dict)

    def mean_std(self, source: Source) -> tuple[float, float] | None:
        return self.stats.get(Source(source))


def _group_stats(r: np.ndarray) -> tuple[float, float]:
    if np.all(r == r[0]):
        return float(r[0]), 0.0
    return float(r.mean()), float(r.std())


def decoupled_advantages(rewards: Sequence[float], sources: Sequence[Source | str], eps_std: float = 1e-6) -> AdvantageBatch:
    """Standardize rewards separately within the on- and off-policy groups (population std)."""
    r = np.asarray(rewards, dtype=np.float64)
    src = [Source(s) for s in sources]
    if r.size == 0:
        raise ValueError("empty batch")
    if len(src) != r.size:
        raise ValueError("rewards and sources differ in length")
    adv = np.zeros_like(r)
    stats = {}
    for s in (Source.ON, Source.OFF):
        idx = np.array([i for i, x in enumerate(src) if x is s], dtype=np.int64)
        if idx.size == 0:
            continue
        mu, sigma = _group_stats(r[idx])
        stats[s] = (mu, sigma)
        adv[idx] = (r[idx] - mu) / (sigma + eps_std)
    return AdvantageBatch(adv, src, stats)


def _log_probs(params: PolicyParams, traj: Trajectory):
    feats, toks, allowed = _policy_rows(traj, params.vocab_size)
    logp, probs = kernels.batch_log_probs(feats, params.theta, toks, allowed)
    return feats, toks, logp, probs


def importance_ratio(params: PolicyParams, params_old: PolicyParams | None, traj: Trajectory,
                     cfg: GrpoConfig = GrpoConfig()) -> np.ndarray:
    """Per mask-in token ratios.

    On-policy: pi_theta / pi_old. Off-policy: pi_theta / 1 by default, or
    pi_theta / pi_old under ``off_ratio="frozen-current"``.
    """
    _, _, logp, _ = _log_probs(params, traj)
    if traj.source is Source.OFF and cfg.off_ratio == "expert-one":
        log_ratio = logp
    else:
        if params_old is None:
            raise ValueError("params_old required for this ratio")
        _, _, logp_old, _ = _log_probs(params_old, traj)
        log_ratio = logp - logp_old
    if cfg.ratio_level == "trajectory":
        log_ratio = np.full_like(log_ratio, log_ratio.sum())
    return np.exp(log_ratio)


@dataclass
class ObjectiveResult:
    value: float
    grad: np.ndarray
    clip_frac: float
    n_tokens: int


def objective(
    trajs: Sequence[Trajectory],
    advantages: Sequence[float],
    params: PolicyParams,
    params_old: PolicyParams | None,
    cfg: GrpoConfig = GrpoConfig(),
) -> ObjectiveResult:
    """Clipped surrogate averaged over trajectories and their mask-in tokens, with its gradient."""
    if len(trajs) == 0:
        raise ValueError("empty batch")
    if len(trajs) != len(advantages):
        raise ValueError("trajectories and advantages differ in length")
    n = len(trajs)
    lo, hi = 1.0 - cfg.eps_clip, 1.0 + cfg.eps_clip
    total = 0.0
    clipped = 0
    count = 0
    feats_all, probs_all, toks_all, w_all = [], [], [], []
    for traj, a in zip(trajs, advantages):
        feats, toks, logp, probs = _log_probs(params, traj)
        m = len(toks)
        if m == 0:
            continue
        if traj.source is Source.OFF and cfg.off_ratio == "expert-one":
            log_ratio = logp
        else:
            _, _, logp_old, _ = _log_probs(params_old, traj)
            log_ratio = logp - logp_old
        if cfg.ratio_level == "trajectory":
            rho = np.full(m, np.exp(log_ratio.sum()))
        else:
            rho = np.exp(log_ratio)
        unclipped = rho * a
        clipped_term = np.clip(rho, lo, hi) * a
        active = unclipped <= clipped_term
        total += np.minimum(unclipped, clipped_term).sum() / m
        clipped += int((~active).sum())
        count += m
        if cfg.ratio_level == "trajectory":
            # d/dtheta of rho_traj * a, spread over every position of the trajectory
            w = np.full(m, a * rho[0] / n) if active[0] else np.zeros(m)
        else:
            w = np.where(active, a * rho, 0.0) / (n * m)
        feats_all.append(feats)
        probs_all.append(probs)
        toks_all.append(toks)
        w_all.append(w)
    if feats_all:
        grad = kernels.weighted_grad(
            np.ascontiguousarray(np.concatenate(feats_all)),
            np.ascontiguousarray(np.concatenate(probs_all)),
            np.ascontiguousarray(np.concatenate(toks_all)),
            np.ascontiguousarray(np.concatenate(w_all)),
        )
    else:
        grad = np.zeros_like(params.theta)
    return ObjectiveResult(total / n, grad, clipped / max(count, 1), count)


class AdamW:
    """Adaptive-moment ascent with decoupled weight decay."""

    def __init__(self, shape, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.lr, self.beta1, self.beta2, self.eps, self.weight_decay = lr, beta1, beta2, eps, weight_decay
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    @classmethod
    def from_config(cls, shape, cfg: GrpoConfig) -> AdamW:
        return cls(shape, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)

    def ascend(self, params: PolicyParams, grad: np.ndarray) -> PolicyParams:
        if self.lr == 0.0:
            return params.copy()
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        theta = params.theta * (1 - self.lr * self.weight_decay) + self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return PolicyParams(theta)


# ------------------------------------------------------------ train step


class MissingCoverage(KeyError):
    pass


@dataclass
class TrainContext:
    vocab: ActionVocab
    featurizer: Featurizer
    weights: RewardWeights = RewardWeights()
    diversity: DiversityConfig = DiversityConfig()
    _reward_cache: dict = field(default_factory=dict)

    def reward(self, traj: Trajectory, episode: Episode):
        if traj.source is not Source.OFF:
            return composite_reward(traj, episode.query, None, self.weights, self.diversity)
        # off-policy entries are replayed many times; the cache holds them alive so ids stay unique
        hit = self._reward_cache.get(id(traj))
        if hit is not None and hit[0] is traj:
            return hit[1]
        value = composite_reward(traj, episode.query, None, self.weights, self.diversity)
        self._reward_cache[id(traj)] = (traj, value)
        return value

    def prepare(self, traj: Trajectory, episode: Episode) -> Trajectory:
        if traj.features is None:
            self.featurizer.attach(traj, episode)
        return traj


def draw_offpolicy(source, episode: Episode, k: int, rng: np.random.Generator) -> list[Trajectory]:
    """Up to ``k`` off-policy trajectories for ``episode`` from a buffer-like source."""
    if source is None or k == 0:
        return []
    pool = source.for_episode(episode.ref)
    if not pool and getattr(source, "strict", True):
        raise MissingCoverage(f"replay buffer has no entries for episode {episode.ref}")
    if len(pool) <= k:
        return list(pool)
    pick = rng.choice(len(pool), size=k, replace=False)
    return [pool[i] for i in sorted(pick)]


def train_step(
    params: PolicyParams,
    prompts: Sequence[Episode],
    buffer,
    ctx: TrainContext,
    cfg: GrpoConfig,
    optimizer: AdamW,
    rng: np.random.Generator,
    iteration: int = 0,
    history=None,
) -> tuple[PolicyParams, dict]:
    """Sample on-policy groups, pair them with off-policy draws, take one ascent step.

    ``history`` (optional) receives every on-policy rollout via ``record``.
    """
    trajs: list[Trajectory] = []
    rewards: list[float] = []
    sources: list[Source] = []
    groups: list[int] = []
    lengths: list[int] = []
    for g, ep in enumerate(prompts):
        group = [sample_rollout(params, ep, ctx.vocab, ctx.featurizer, rng, cfg.t_max)
                 for _ in range(cfg.rollouts_per_prompt)]
        off = [ctx.prepare(t, ep) for t in draw_offpolicy(buffer, ep, cfg.offpolicy_per_prompt, rng)]
        scores = [ctx.reward(t, ep).composite for t in group + off]
        if history is not None:
            for t, r in zip(group, scores):
                history.record(ep.ref, t, r)
        trajs += group + off
        rewards += scores
        sources += [Source.ON] * len(group) + [Source.OFF] * len(off)
        groups += [g] * (len(group) + len(off))
        lengths += [t.n_policy_tokens for t in group]
    r = np.asarray(rewards)
    if cfg.group_scope == "batch":
        batch = decoupled_advantages(r, sources, cfg.eps_std)
        advs = batch.advantages
        sig_on = [batch.stats[Source.ON][1]]
        sig_off = [batch.stats[Source.OFF][1]] if Source.OFF in batch.stats else []
    else:
        advs = np.zeros_like(r)
        sig_on, sig_off = [], []
        gid = np.asarray(groups)
        for g in range(len(prompts)):
            idx = np.flatnonzero(gid == g)
            batch = decoupled_advantages(r[idx], [sources[i] for i in idx], cfg.eps_std)
            advs[idx] = batch.advantages
            sig_on.append(batch.stats[Source.ON][1])
            if Source.OFF in batch.stats:
                sig_off.append(batch.stats[Source.OFF][1])
    on_rewards = [x for x, s in zip(rewards, sources) if s is Source.ON]
    off_rewards = [x for x, s in zip(rewards, sources) if s is Source.OFF]
    result = objective(trajs, advs, params, params, cfg)
    new_params = optimizer.ascend(params, result.grad)
    metrics = {
        "iter": iteration,
        "mean_reward_on": float(np.mean(on_rewards)),
        "mean_reward_off": float(np.mean(off_rewards)) if off_rewards else None,
        "mean_len": float(np.mean(lengths)),
        "clip_frac": result.clip_frac,
        "sigma_on": float(np.mean(sig_on)),
        "sigma_off": float(np.mean(sig_off)) if sig_off else None,
    }
    return new_params, metrics
