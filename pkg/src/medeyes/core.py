"""Shared value types: boxes, regions, reasoning steps and trajectories."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np


class Source(str, enum.Enum):
    ON = "on"
    OFF = "off"


@dataclass(frozen=True, order=True)
class BBox:
    """Integer cell box covering x1 <= x < x2, y1 <= y < y2."""

    x1: int
    y1: int
    x2: int
    y2: int

    def __post_init__(self):
        for v in (self.x1, self.y1, self.x2, self.y2):
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
                raise TypeError(f"box coordinates must be integers, got {v!r}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box {self.as_list()}")
        if min(self.x1, self.y1) < 0:
            raise ValueError(f"negative coordinate in {self.as_list()}")

    @property
    def area(self) -> int:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    @property
    def center(self) -> tuple[float, float]:
        return (self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0

    def within(self, grid_size: int) -> bool:
        return self.x2 <= grid_size and self.y2 <= grid_size

    def check_bounds(self, grid_size: int) -> None:
        if not self.within(grid_size):
            raise ValueError(f"box {self.as_list()} outside grid of size {grid_size}")

    def as_list(self) -> list[int]:
        return [int(self.x1), int(self.y1), int(self.x2), int(self.y2)]

    def to_text(self) -> str:
        return "[{},{},{},{}]".format(*self.as_list())

    @classmethod
    def full(cls, grid_size: int) -> BBox:
        return cls(0, 0, grid_size, grid_size)


def intersection_area(a: BBox, b: BBox) -> int:
    w = min(a.x2, b.x2) - max(a.x1, b.x1)
    h = min(a.y2, b.y2) - max(a.y1, b.y1)
    if w <= 0 or h <= 0:
        return 0
    return w * h


def iou(a: BBox, b: BBox) -> float:
    inter = intersection_area(a, b)
    return inter / (a.area + b.area - inter)


@dataclass(frozen=True)
class Region:
    bbox: BBox
    confidence: float
    region_id: int

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    def with_confidence(self, confidence: float) -> Region:
        return Region(self.bbox, confidence, self.region_id)


@dataclass(frozen=True)
class Gaze:
    bbox: BBox


@dataclass(frozen=True)
class Answer:
    pass


@dataclass(frozen=True)
class ReasoningStep:
    reasoning_text: str
    action: Gaze | Answer
    feedback: str | None = None

    def __post_init__(self):
        if isinstance(self.action, Gaze) != (self.feedback is not None):
            raise ValueError("feedback must be present exactly when the action is a gaze")

    @property
    def is_gaze(self) -> bool:
        return isinstance(self.action, Gaze)


@dataclass(eq=False)
class Trajectory:
    """One reasoning transcript.

    ``steps`` includes the terminal answer step, so ``len(steps)`` is the
    trajectory length T. ``token_ids``/``mask`` are the policy-vocabulary view
    (mask False marks environment feedback). ``features`` holds the per-token
    context matrix once a featurizer has been applied and ``admissible`` the
    matching per-token 0/1 rows of tokens the policy may emit there. Neither
    is part of equality.
    """

    steps: list[ReasoningStep]
    answer: str
    source: Source = Source.ON
    token_ids: list[int] = field(default_factory=list)
    mask: list[bool] = field(default_factory=list)
    episode_ref: str = ""
    features: np.ndarray | None = None
    admissible: np.ndarray | None = None

    def __post_init__(self):
        self.source = Source(self.source)
        if not self.steps:
            raise ValueError("trajectory needs at least one step")
        if not isinstance(self.steps[-1].action, Answer):
            raise ValueError("trajectory must end with an answer step")
        if any(isinstance(s.action, Answer) for s in self.steps[:-1]):
            raise ValueError("answer step must be last")
        if len(self.token_ids) != len(self.mask):
            raise ValueError("token_ids and mask differ in length")

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (
            self.steps == other.steps
            and self.answer == other.answer
            and self.source == other.source
            and list(self.token_ids) == list(other.token_ids)
            and [bool(m) for m in self.mask] == [bool(m) for m in other.mask]
            and self.episode_ref == other.episode_ref
        )

    __hash__ = None

    @property
    def length(self) -> int:
        return len(self.steps)

    @property
    def gaze_boxes(self) -> list[BBox]:
        return [s.action.bbox for s in self.steps if isinstance(s.action, Gaze)]

    @property
    def n_policy_tokens(self) -> int:
        return int(sum(bool(m) for m in self.mask))


@dataclass(frozen=True)
class RewardWeights:
    lambda_acc: float = 0.7
    lambda_grammar: float = 0.2
    lambda_div: float = 0.1

    def __post_init__(self):
        if min(self.lambda_acc, self.lambda_grammar, self.lambda_div) < 0:
            raise ValueError("reward weights must be nonnegative")
