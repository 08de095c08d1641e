"""Verifiable rewards: answer accuracy, dialog grammar, spatial diversity."""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass
from math import comb

import numpy as np

from medeyes import grammar, kernels
from medeyes.core import BBox, RewardWeights, Trajectory
from medeyes.env import Query, check_answer


@dataclass(frozen=True)
class DiversityConfig:
    n: int = 5
    eps_iou: float = 0.1

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if not 0.0 < self.eps_iou < 1.0:
            raise ValueError("eps_iou must be in (0, 1)")


@dataclass(frozen=True)
class RewardBreakdown:
    r_acc: int
    r_grammar: int
    r_div: float
    composite: float

    def as_dict(self) -> dict:
        return asdict(self)


def accuracy_reward(traj: Trajectory, query: Query) -> int:
    return check_answer(query, traj.answer)


def grammar_reward(dialog: str) -> int:
    return int(grammar.validate(dialog).overall)


def unique_boxes(boxes: list[BBox]) -> list[BBox]:
    return list(dict.fromkeys(boxes))


def diversity_reward(boxes: list[BBox], cfg: DiversityConfig = DiversityConfig()) -> float:
    """Coverage term min(1, |U|/n) plus the fraction of well-separated pairs of unique boxes."""
    uniq = unique_boxes(boxes)
    k = len(uniq)
    coverage = min(1.0, k / cfg.n)
    if k < 2:
        return coverage
    arr = np.array([b.as_list() for b in uniq], dtype=np.int64)
    return coverage + kernels.separated_pairs(arr, cfg.eps_iou) / comb(k, 2)


def weighted(r_acc: float, r_grammar: float, r_div: float, weights: RewardWeights) -> float:
    return weights.lambda_acc * r_acc + weights.lambda_grammar * r_grammar + weights.lambda_div * r_div


def composite_reward(
    traj: Trajectory,
    query: Query,
    dialog: str | None = None,
    weights: RewardWeights = RewardWeights(),
    cfg: DiversityConfig = DiversityConfig(),
) -> RewardBreakdown:
    if dialog is None:
        dialog = grammar.serialize(traj)
    r_acc = accuracy_reward(traj, query)
    r_grammar = grammar_reward(dialog)
    r_div = diversity_reward(traj.gaze_boxes, cfg)
    return RewardBreakdown(r_acc, r_grammar, r_div, weighted(r_acc, r_grammar, r_div, weights))


def breakdowns_to_csv(rows: list[tuple[str, RewardBreakdown]]) -> str:
    out = io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["episode_ref", "r_acc", "r_grammar", "r_div", "composite"])
    for ref, b in rows:
        w.writerow([ref, b.r_acc, b.r_grammar, repr(b.r_div), repr(b.composite)])
    return out.getvalue()
