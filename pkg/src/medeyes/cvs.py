"""Confidence value sampler: nucleus focus selection, adaptive termination and
construction of the off-policy expert replay buffer."""
from __future__ import annotations

import json
from collections.abc import Iterable
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from medeyes import grammar, grn, kernels
from medeyes.core import Answer, BBox, Gaze, ReasoningStep, Source, Trajectory
from medeyes.env import (
    ANSWER_VOCAB,
    Episode,
    OracleConfig,
    answer_from_evidence,
    render_feedback,
)
from medeyes.grn import AttentionState, Exploration, GrnConfig, Mode
from medeyes.policy import ActionVocab


@dataclass(frozen=True)
class CvsConfig:
    p0: float = 0.9
    xi: float = 0.85
    t_max: int = 3
    n_expert: int = 6
    # "proportional" (c_i / sum c) or "softmax" over confidences
    selection: str = "proportional"
    temperature: float = 0.1
    # False: greedy top-1 focus and no early termination (sampler ablated)
    enabled: bool = True

    def __post_init__(self):
        if not 0.0 < self.p0 <= 1.0:
            raise ValueError("p0 must be in (0, 1]")
        if not 0.0 < self.xi <= 1.0:
            raise ValueError("xi must be in (0, 1]")
        if self.t_max < 1 or self.n_expert < 1:
            raise ValueError("t_max and n_expert must be >= 1")
        if self.selection not in ("proportional", "softmax"):
            raise ValueError(f"unknown selection rule {self.selection!r}")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


def _check_probs(probs) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.size == 0:
        raise ValueError("probabilities must be a non-empty vector")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError("probabilities must be finite and nonnegative")
    if abs(p.sum() - 1.0) > 1e-9:
        raise ValueError(f"probabilities sum to {p.sum()!r}, expected 1")
    return p


def _nucleus_order(p: np.ndarray, p0: float) -> list[int]:
    order = sorted(range(len(p)), key=lambda i: (-p[i], i))
    keep = []
    total = 0.0
    for i in order:
        total += p[i]
        if total > p0 + 1e-12:
            break
        keep.append(i)
    return keep or order[:1]


def nucleus_set(probs, p0: float) -> set[int]:
    """Longest descending-probability prefix with cumulative mass <= p0 (top-1 if empty)."""
    if not 0.0 < p0 <= 1.0:
        raise ValueError("p0 must be in (0, 1]")
    return set(_nucleus_order(_check_probs(probs), p0))


def sample_action(probs, p0: float, rng: np.random.Generator) -> int:
    if not 0.0 < p0 <= 1.0:
        raise ValueError("p0 must be in (0, 1]")
    p = _check_probs(probs)
    keep = _nucleus_order(p, p0)
    sub = np.ascontiguousarray(p[keep])
    return keep[kernels.sample_index(sub, rng.random())]


def selection_probs(confidences, cfg: CvsConfig) -> np.ndarray:
    c = np.asarray(confidences, dtype=np.float64)
    if cfg.selection == "softmax":
        z = np.exp((c - c.max()) / cfg.temperature)
        return z / z.sum()
    total = c.sum()
    if total <= 0:
        return np.full(len(c), 1.0 / len(c))
    return c / total


def _select_focus(state: AttentionState, cfg: CvsConfig, rng) -> int:
    regions = state.regions
    if not cfg.enabled:
        return max(regions, key=lambda r: (r.confidence, -r.region_id)).region_id
    probs = selection_probs([r.confidence for r in regions], cfg)
    return regions[sample_action(probs, cfg.p0, rng)].region_id


def generate_expert_trajectory(
    episode: Episode,
    oracle_cfg: OracleConfig,
    grn_cfg: GrnConfig,
    cvs_cfg: CvsConfig,
    rng: np.random.Generator,
    vocab: ActionVocab | None = None,
) -> Trajectory:
    """Run the navigator with sampled focus choices until confident or out of budget.

    The ``t_max`` budget counts dialog steps: each drilled (or, for
    scanning-only exploration, viewed) region becomes a gaze step and the
    answer takes the last slot. Scans are narrated in the reasoning text and
    do not use budget; at most ``t_max`` scans run, so an image with no
    proposals yields ``t_max`` scans and then the answer. The answer comes from the
    cells seen in the gazes.
    """
    image, query = episode.image, episode.query
    mode = grn_cfg.exploration
    state = grn.initial_state()
    if mode is Exploration.DRILLING_ONLY:
        tiles = grn.tile_regions(image.size, vocab.bin_size if vocab else 4)
        state = replace(state, regions=tiles, next_id=len(tiles))
    gazes: list[tuple[BBox, str]] = []
    notes: list[str] = []
    scans = 0
    max_gazes = cvs_cfg.t_max - 1
    done = False
    while len(gazes) < max_gazes and not done:
        if state.mode is Mode.GLOBAL:
            if mode is Exploration.DRILLING_ONLY:
                state = state.focus_on(_select_focus(state, cvs_cfg, rng))
                continue
            if scans == cvs_cfg.t_max:
                break
            state, rec = grn.step(state, image, oracle_cfg, grn_cfg, rng)
            scans += 1
            notes.append(rec.reasoning_text)
            if not state.regions:
                # nothing to focus on; rescan while scans remain (distractors may appear)
                continue
            state = state.focus_on(_select_focus(state, cvs_cfg, rng))
            if mode is Exploration.SCANNING_ONLY:
                region = state.region(state.focus)
                notes.append(f"Viewing region {region.bbox.to_text()} (confidence {region.confidence:.2f}).")
                gazes.append((region.bbox, " ".join(notes)))
                notes = []
                done = cvs_cfg.enabled and region.confidence > cvs_cfg.xi
                state = replace(state, mode=Mode.GLOBAL, focus=None)
            continue
        focus = state.region(state.focus)
        state, rec = grn.step(state, image, oracle_cfg, grn_cfg, rng)
        notes.append(rec.reasoning_text)
        gazes.append((focus.bbox, " ".join(notes)))
        notes = []
        done = cvs_cfg.enabled and rec.observation > cvs_cfg.xi
    boxes = [b for b, _ in gazes]
    answer = answer_from_evidence(image, query, boxes)
    steps = [ReasoningStep(text, Gaze(b), render_feedback(image, b)) for b, text in gazes]
    notes.append(f"Concluding from {len(boxes)} inspected region(s).")
    steps.append(ReasoningStep(" ".join(notes), Answer()))
    ids, mask = vocab.tokenize(steps, answer) if vocab is not None else ([], [])
    return Trajectory(steps, answer, Source.OFF, ids, mask, episode.ref)


def generate_flat_trajectory(
    episode: Episode,
    oracle_cfg: OracleConfig,
    grn_cfg: GrnConfig,
    cvs_cfg: CvsConfig,
    rng: np.random.Generator,
    vocab: ActionVocab | None = None,
) -> Trajectory:
    """Expert without the navigator: one scan, then ``t_max - 1`` sampled looks.

    There is no drilling, no confidence refinement and no mode switching, so
    the sampler cannot stop early; focus draws still follow ``cvs_cfg``.
    """
    image, query = episode.image, episode.query
    state, rec = grn.step(grn.initial_state(), image, oracle_cfg, grn_cfg, rng)
    notes = [rec.reasoning_text]
    gazes: list[tuple[BBox, str]] = []
    if state.regions:
        for _ in range(cvs_cfg.t_max - 1):
            region = state.region(_select_focus(state, cvs_cfg, rng))
            notes.append(f"Viewing region {region.bbox.to_text()} (confidence {region.confidence:.2f}).")
            gazes.append((region.bbox, " ".join(notes)))
            notes = []
    boxes = [b for b, _ in gazes]
    answer = answer_from_evidence(image, query, boxes)
    steps = [ReasoningStep(text, Gaze(b), render_feedback(image, b)) for b, text in gazes]
    notes.append(f"Concluding from {len(boxes)} inspected region(s).")
    steps.append(ReasoningStep(" ".join(notes), Answer()))
    ids, mask = vocab.tokenize(steps, answer) if vocab is not None else ([], [])
    return Trajectory(steps, answer, Source.OFF, ids, mask, episode.ref)


def random_trajectory(
    episode: Episode, rng: np.random.Generator, t_max: int, vocab: ActionVocab | None = None
) -> Trajectory:
    """Grammar-valid trajectory with uniformly random gaze boxes and a random answer."""
    g = episode.image.size
    steps = []
    for _ in range(int(rng.integers(0, t_max))):
        x1, x2 = sorted(rng.choice(g + 1, size=2, replace=False))
        y1, y2 = sorted(rng.choice(g + 1, size=2, replace=False))
        box = BBox(int(x1), int(y1), int(x2), int(y2))
        steps.append(ReasoningStep(f"Looking at {box.to_text()}.", Gaze(box), render_feedback(episode.image, box)))
    answer = ANSWER_VOCAB[int(rng.integers(len(ANSWER_VOCAB)))]
    steps.append(ReasoningStep("Answering.", Answer()))
    ids, mask = vocab.tokenize(steps, answer) if vocab is not None else ([], [])
    return Trajectory(steps, answer, Source.OFF, ids, mask, episode.ref)


def episode_rng(seed: int, episode: Episode, k: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, episode.image.seed, k])


# ---------------------------------------------------------------- buffer


@dataclass
class ReplayBuffer:
    entries: list[tuple[str, Trajectory]] = field(default_factory=list)
    capacity: int | None = None

    def add(self, traj: Trajectory) -> None:
        if not grammar.validate(grammar.serialize(traj)).overall:
            raise ValueError("refusing to store a grammar-invalid trajectory")
        traj.source = Source.OFF
        self.entries.append((traj.episode_ref, traj))
        if self.capacity is not None and len(self.entries) > self.capacity:
            del self.entries[0]

    def __len__(self) -> int:
        return len(self.entries)

    def for_episode(self, ref: str) -> list[Trajectory]:
        return [t for r, t in self.entries if r == ref]

    def refs(self) -> set[str]:
        return {r for r, _ in self.entries}

    def to_jsonl(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for ref, traj in self.entries:
                fh.write(json.dumps({"episode_ref": ref, "source": "off", "dialog": grammar.serialize(traj)}) + "\n")

    @classmethod
    def from_jsonl(cls, path: str | Path, vocab: ActionVocab | None = None) -> ReplayBuffer:
        buf = cls()
        tok = vocab.tokenize if vocab is not None else None
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                traj = grammar.parse(rec["dialog"], source=Source.OFF, episode_ref=rec["episode_ref"], tokenizer=tok)
                buf.entries.append((rec["episode_ref"], traj))
        return buf


def build_buffer(
    episodes: Iterable[Episode],
    oracle_cfg: OracleConfig,
    grn_cfg: GrnConfig,
    cvs_cfg: CvsConfig,
    seed: int,
    vocab: ActionVocab | None = None,
    capacity: int | None = None,
    generator=generate_expert_trajectory,
) -> ReplayBuffer:
    """``n_expert`` trajectories per episode, each from its own RNG stream.

    ``generator`` has the signature of ``generate_expert_trajectory``.
    """
    buf = ReplayBuffer(capacity=capacity)
    for ep in episodes:
        for k in range(cvs_cfg.n_expert):
            buf.add(generator(ep, oracle_cfg, grn_cfg, cvs_cfg, episode_rng(seed, ep, k), vocab))
    return buf


def build_random_buffer(
    episodes: Iterable[Episode], n_per_episode: int, t_max: int, seed: int, vocab: ActionVocab | None = None
) -> ReplayBuffer:
    """Random-gaze, random-answer trajectories: grammar-valid but uninformed."""
    buf = ReplayBuffer()
    for ep in episodes:
        for k in range(n_per_episode):
            buf.add(random_trajectory(ep, episode_rng(seed, ep, k), t_max, vocab))
    return buf
