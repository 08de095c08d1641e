"""Mixed-policy GRPO with gaze-guided expert trajectories."""
from medeyes.core import Answer, BBox, Gaze, ReasoningStep, Region, RewardWeights, Source, Trajectory, iou

__version__ = "0.1.0"

__all__ = [
    "Answer",
    "BBox",
    "Gaze",
    "ReasoningStep",
    "Region",
    "RewardWeights",
    "Source",
    "Trajectory",
    "iou",
]
