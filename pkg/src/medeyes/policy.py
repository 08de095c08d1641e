"""Linear-softmax autoregressive action policy.

One mask-in token per reasoning step (a gaze box or an answer); each gaze is
followed by one mask-out ``OBS`` token standing for the environment feedback.
Context features are recomputed from the image's coarse view, the query and
the transcript prefix, so expert and policy trajectories are scored the same way.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from medeyes import kernels
from medeyes.core import Answer, BBox, Gaze, ReasoningStep, Source, Trajectory
from medeyes.env import ANSWER_VOCAB, Episode, QueryKind, SynthImage, Query, parse_feedback, render_feedback

ABSTAIN = "unknown"


class ActionVocab:
    """Token layout: STOP, SCAN, DRILL quadrants, GAZE bins, ANSWER strings, OBS."""

    def __init__(self, grid_size: int = 16, bin_size: int = 4, answers=ANSWER_VOCAB):
        if grid_size % bin_size or grid_size % 2:
            raise ValueError("grid_size must be even and a multiple of bin_size")
        self.grid_size = grid_size
        self.bin_size = bin_size
        self.bins_per_side = grid_size // bin_size
        half = grid_size // 2
        self.tokens: list[str] = ["STOP", "SCAN"]
        self.boxes: dict[int, BBox] = {1: BBox.full(grid_size)}
        for q, (x, y) in enumerate([(0, 0), (half, 0), (0, half), (half, half)]):
            self.boxes[len(self.tokens)] = BBox(x, y, x + half, y + half)
            self.tokens.append(f"DRILL_{q}")
        self.first_bin = len(self.tokens)
        for by in range(self.bins_per_side):
            for bx in range(self.bins_per_side):
                x, y = bx * bin_size, by * bin_size
                self.boxes[len(self.tokens)] = BBox(x, y, x + bin_size, y + bin_size)
                self.tokens.append(f"GAZE_{by * self.bins_per_side + bx}")
        self.answers = tuple(answers)
        self.answer_ids = {}
        for a in self.answers:
            self.answer_ids[a] = len(self.tokens)
            self.tokens.append(f"ANS_{a}")
        self.obs = len(self.tokens)
        self.tokens.append("OBS")
        self.stop = 0
        self._box_ids = {b: t for t, b in self.boxes.items()}

    @property
    def size(self) -> int:
        return len(self.tokens)

    def digest(self) -> bytes:
        text = f"{self.grid_size}/{self.bin_size}/" + "|".join(self.tokens)
        return hashlib.sha256(text.encode()).digest()[:8]

    def is_gaze(self, tok: int) -> bool:
        return tok in self.boxes

    def answer_of(self, tok: int) -> str | None:
        name = self.tokens[tok]
        return name[4:] if name.startswith("ANS_") else None

    def box_token(self, bbox: BBox) -> int:
        """Token for a gaze box: exact match, else the bin holding the box centre."""
        tok = self._box_ids.get(bbox)
        if tok is not None:
            return tok
        cx, cy = bbox.center
        bx = min(int(cx // self.bin_size), self.bins_per_side - 1)
        by = min(int(cy // self.bin_size), self.bins_per_side - 1)
        return self.first_bin + by * self.bins_per_side + bx

    def answer_token(self, answer: str) -> int:
        return self.answer_ids.get(answer.strip().casefold(), self.stop)

    def tokenize(self, steps: list[ReasoningStep], answer: str | None = None) -> tuple[list[int], list[bool]]:
        ids: list[int] = []
        mask: list[bool] = []
        for step in steps:
            if isinstance(step.action, Gaze):
                ids += [self.box_token(step.action.bbox), self.obs]
                mask += [True, False]
            else:
                ids.append(self.answer_token(answer if answer is not None else ABSTAIN))
                mask.append(True)
        return ids, mask


@dataclass(frozen=True)
class DecodeRule:
    """Which tokens the policy may emit at each decision.

    OBS stands for environment feedback and is never emitted. At the last of
    ``t_max`` decisions only answers and STOP (abstain) remain. The same rows
    are used for sampling and for every log-probability, so the scored
    distribution is exactly the sampled one.
    """

    vocab: ActionVocab
    t_max: int = 3

    def __post_init__(self):
        if self.t_max < 1:
            raise ValueError("t_max must be >= 1")

    def row(self, t: int) -> np.ndarray:
        v = self.vocab
        if t >= self.t_max - 1:
            m = np.zeros(v.size, dtype=np.uint8)
            m[v.stop] = 1
            m[list(v.answer_ids.values())] = 1
        else:
            m = np.ones(v.size, dtype=np.uint8)
            m[v.obs] = 0
        return m

    def matrix(self, mask: list[bool]) -> np.ndarray:
        """Rows aligned with a token list; decision t is the t-th mask-in token."""
        out = np.ones((len(mask), self.vocab.size), dtype=np.uint8)
        t = 0
        for i, m in enumerate(mask):
            if m:
                out[i] = self.row(t)
                t += 1
        return out


def retokenize(traj: Trajectory, vocab: ActionVocab) -> Trajectory:
    traj.token_ids, traj.mask = vocab.tokenize(traj.steps, traj.answer)
    return traj


# -------------------------------------------------------------- features


@dataclass(frozen=True)
class FeatureSpec:
    grid_size: int = 16
    bin_size: int = 4
    max_steps: int = 4
    resolution: int = 4
    min_share: float = 0.8

    @property
    def n_bins(self) -> int:
        return (self.grid_size // self.bin_size) ** 2

    @property
    def dim(self) -> int:
        # bias, step one-hot, coarse bins, query kind, last-look (4), memory (2), visited
        return 1 + self.max_steps + self.n_bins + 3 + 4 + 2 + 1


_KINDS = (QueryKind.PRESENCE, QueryKind.LOCATION, QueryKind.COUNT)


def coarse_view(image: SynthImage, spec: FeatureSpec) -> np.ndarray:
    """Which bins contain any abnormal cell (type-agnostic low-resolution view)."""
    b = spec.bin_size
    n = spec.grid_size // b
    occ = (image.grid > 0).reshape(n, b, n, b).any(axis=(1, 3))
    return occ.astype(np.float64).ravel()


def look_summary(crop: np.ndarray, target: int, spec: FeatureSpec) -> tuple[float, float, float]:
    """(target seen, other abnormality seen, nothing seen) after pooling to the target resolution."""
    pooled = kernels.pool_labels(np.ascontiguousarray(crop, dtype=np.int8), spec.resolution, spec.min_share)
    match = float((pooled == target).any())
    other = float(((pooled > 0) & (pooled != target)).any())
    return match, other, float(not match and not other)


class Featurizer:
    """Builds the context vector for each decision position of an episode."""

    def __init__(self, spec: FeatureSpec, rule: DecodeRule | None = None):
        self.spec = spec
        self.rule = rule

    @property
    def dim(self) -> int:
        return self.spec.dim

    def base(self, image: SynthImage, query: Query) -> np.ndarray:
        s = self.spec
        phi = np.zeros(s.dim)
        phi[0] = 1.0
        o = 1 + s.max_steps
        phi[o:o + s.n_bins] = coarse_view(image, s)
        o += s.n_bins
        phi[o + _KINDS.index(query.kind)] = 1.0
        return phi

    def at(self, base: np.ndarray, t: int, last: tuple[float, float, float] | None,
           memory: tuple[float, float], n_gazes: int) -> np.ndarray:
        s = self.spec
        phi = base.copy()
        phi[1 + min(t, s.max_steps - 1)] = 1.0
        o = 1 + s.max_steps + s.n_bins + 3
        if last is not None:
            phi[o:o + 3] = last
            phi[o + 3] = 1.0
        phi[o + 4:o + 6] = memory
        phi[o + 6] = n_gazes / s.max_steps
        return phi

    def matrix(self, traj: Trajectory, image: SynthImage, query: Query) -> np.ndarray:
        """Feature rows aligned with ``traj.token_ids`` (zeros on mask-out rows)."""
        base = self.base(image, query)
        rows = []
        last = None
        memory = (0.0, 0.0)
        n_gazes = 0
        for t, step in enumerate(traj.steps):
            rows.append(self.at(base, t, last, memory, n_gazes))
            if isinstance(step.action, Gaze):
                rows.append(np.zeros(self.dim))
                last = look_summary(parse_feedback(step.feedback), query.target, self.spec)
                memory = (max(memory[0], last[0]), max(memory[1], last[1]))
                n_gazes += 1
        return np.array(rows).reshape(len(rows), self.dim)

    def attach(self, traj: Trajectory, episode: Episode) -> Trajectory:
        traj.features = self.matrix(traj, episode.image, episode.query)
        traj.admissible = self.rule.matrix(traj.mask) if self.rule is not None else None
        return traj


# ---------------------------------------------------------------- params


@dataclass
class PolicyParams:
    theta: np.ndarray

    def __post_init__(self):
        self.theta = np.ascontiguousarray(self.theta, dtype=np.float64)
        if self.theta.ndim != 2:
            raise ValueError("theta must be a matrix")
        if not np.all(np.isfinite(self.theta)):
            raise ValueError("theta has non-finite entries")

    @property
    def feature_dim(self) -> int:
        return self.theta.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.theta.shape[1]

    @classmethod
    def zeros(cls, feature_dim: int, vocab_size: int) -> PolicyParams:
        return cls(np.zeros((feature_dim, vocab_size)))

    def copy(self) -> PolicyParams:
        return PolicyParams(self.theta.copy())


def token_log_prob(params: PolicyParams, context: np.ndarray, token: int,
                   allowed: np.ndarray | None = None) -> float:
    """log softmax(theta^T phi)[token], over the ``allowed`` tokens if given."""
    if not 0 <= token < params.vocab_size:
        raise ValueError(f"token {token} outside vocabulary of size {params.vocab_size}")
    logits = np.asarray(context, dtype=np.float64) @ params.theta
    if allowed is not None:
        logits = np.where(np.asarray(allowed) != 0, logits, -np.inf)
    m = logits.max()
    with np.errstate(divide="ignore"):
        return float(logits[token] - m - np.log(np.exp(logits - m).sum()))


def _policy_rows(traj: Trajectory, vocab_size: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Features, tokens and admissible rows of the mask-in positions."""
    if traj.features is None:
        raise ValueError("trajectory has no features attached; call Featurizer.attach first")
    sel = np.flatnonzero(np.asarray(traj.mask, dtype=bool))
    feats = np.ascontiguousarray(traj.features[sel], dtype=np.float64)
    toks = np.ascontiguousarray(np.asarray(traj.token_ids, dtype=np.int64)[sel])
    if traj.admissible is None:
        allowed = np.ones((len(sel), vocab_size), dtype=np.uint8)
    else:
        allowed = np.ascontiguousarray(traj.admissible[sel], dtype=np.uint8)
        if len(toks) and not allowed[np.arange(len(toks)), toks].all():
            raise ValueError(f"trajectory {traj.episode_ref!r} has a token outside its admissible set")
    return feats, toks, allowed


def token_log_probs(params: PolicyParams, traj: Trajectory) -> np.ndarray:
    """Log-probabilities of the mask-in tokens, in order."""
    feats, toks, allowed = _policy_rows(traj, params.vocab_size)
    if len(toks) == 0:
        return np.zeros(0)
    logp, _ = kernels.batch_log_probs(feats, params.theta, toks, allowed)
    return logp


def trajectory_log_prob(params: PolicyParams, traj: Trajectory) -> float:
    return float(token_log_probs(params, traj).sum())


def log_prob_grad(params: PolicyParams, traj: Trajectory) -> np.ndarray:
    feats, toks, allowed = _policy_rows(traj, params.vocab_size)
    if len(toks) == 0:
        return np.zeros_like(params.theta)
    _, probs = kernels.batch_log_probs(feats, params.theta, toks, allowed)
    return kernels.weighted_grad(feats, probs, toks, np.ones(len(toks)))


# --------------------------------------------------------------- rollout

_GAZE_TEXT = "Inspecting region {box} for the queried finding."
_ANSWER_TEXT = "Concluding from the evidence gathered so far."


def sample_rollout(
    params: PolicyParams,
    episode: Episode,
    vocab: ActionVocab,
    featurizer: Featurizer,
    rng: np.random.Generator,
    t_max: int,
) -> Trajectory:
    """Sample one on-policy trajectory of at most ``t_max`` steps.

    Each decision samples from the softmax restricted by ``DecodeRule``, so
    OBS is never emitted and the last decision is an answer or STOP.
    """
    image, query = episode.image, episode.query
    base = featurizer.base(image, query)
    theta = params.theta
    rule = DecodeRule(vocab, t_max)
    steps: list[ReasoningStep] = []
    ids: list[int] = []
    mask: list[bool] = []
    rows: list[np.ndarray] = []
    last = None
    memory = (0.0, 0.0)
    answer = ABSTAIN
    for t in range(t_max):
        phi = featurizer.at(base, t, last, memory, len(steps))
        probs = kernels.softmax_row(phi, theta, rule.row(t))
        tok = int(kernels.sample_index(probs, rng.random()))
        rows.append(phi)
        if vocab.is_gaze(tok):
            box = vocab.boxes[tok]
            crop = image.crop(box)
            steps.append(ReasoningStep(_GAZE_TEXT.format(box=box.to_text()), Gaze(box), render_feedback(image, box)))
            ids += [tok, vocab.obs]
            mask += [True, False]
            rows.append(np.zeros_like(phi))
            last = look_summary(crop, query.target, featurizer.spec)
            memory = (max(memory[0], last[0]), max(memory[1], last[1]))
            continue
        answer = vocab.answer_of(tok) or ABSTAIN
        ids.append(tok)
        mask.append(True)
        break
    steps.append(ReasoningStep(_ANSWER_TEXT, Answer()))
    traj = Trajectory(steps, answer, Source.ON, ids, mask, episode.ref)
    traj.features = np.array(rows)
    traj.admissible = rule.matrix(mask)
    return traj


# ------------------------------------------------------------ checkpoint

_MAGIC = b"MEDEYES1"


def save_checkpoint(params: PolicyParams, vocab: ActionVocab, path: str | Path) -> None:
    """Header: magic, rows, cols (uint32 LE), 8-byte vocab digest; then float64 LE data."""
    theta = params.theta
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<II", *theta.shape) + vocab.digest())
        fh.write(theta.astype("<f8").tobytes())


def load_checkpoint(path: str | Path, vocab: ActionVocab | None = None) -> PolicyParams:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError("not a policy checkpoint")
    rows, cols = struct.unpack("<II", raw[8:16])
    digest = raw[16:24]
    if vocab is not None and (digest != vocab.digest() or cols != vocab.size):
        raise ValueError("checkpoint vocabulary does not match")
    data = np.frombuffer(raw[24:], dtype="<f8")
    if data.size != rows * cols:
        raise ValueError("truncated checkpoint")
    return PolicyParams(data.reshape(rows, cols).astype(np.float64))
