"""Gaze-guided navigator: scanning/drilling state machine over candidate regions."""
from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np

from medeyes.core import BBox, Region
from medeyes.env import OracleConfig, SynthImage, oracle_drill, oracle_scan


class Mode(str, enum.Enum):
    GLOBAL = "global"
    LOCAL = "local"


class Exploration(str, enum.Enum):
    DUAL = "dual"
    SCANNING_ONLY = "scanning_only"
    DRILLING_ONLY = "drilling_only"


@dataclass(frozen=True)
class GrnConfig:
    delta_threshold: float = 0.15
    eps_stability: float = 1e-6
    n_regions: int = 5
    # keep regions from earlier scans instead of replacing the candidate set
    merge_scans: bool = False
    exploration: Exploration = Exploration.DUAL

    def __post_init__(self):
        object.__setattr__(self, "exploration", Exploration(self.exploration))
        if self.delta_threshold <= 0 or self.eps_stability <= 0:
            raise ValueError("delta_threshold and eps_stability must be positive")
        if self.n_regions < 1:
            raise ValueError("n_regions must be >= 1")


@dataclass(frozen=True)
class AttentionState:
    regions: tuple[Region, ...] = ()
    mode: Mode = Mode.GLOBAL
    focus: int | None = None
    step_index: int = 0
    next_id: int = 0
    # refined confidences by box, carried across rescans
    refined: tuple[tuple[BBox, float], ...] = ()

    def __post_init__(self):
        ids = [r.region_id for r in self.regions]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate region ids")
        if self.mode is Mode.LOCAL and self.focus not in ids:
            raise ValueError("local mode needs a focus present in regions")

    @property
    def confidences(self) -> dict[int, float]:
        return {r.region_id: r.confidence for r in self.regions}

    def region(self, region_id: int) -> Region:
        for r in self.regions:
            if r.region_id == region_id:
                return r
        raise KeyError(region_id)

    def focus_on(self, region_id: int) -> AttentionState:
        self.region(region_id)
        return replace(self, mode=Mode.LOCAL, focus=region_id)


@dataclass(frozen=True)
class ScanPrompt:
    pass


@dataclass(frozen=True)
class DrillPrompt:
    region_id: int


@dataclass(frozen=True)
class GrnStepRecord:
    prompt_kind: ScanPrompt | DrillPrompt
    observation: tuple[Region, ...] | float
    reasoning_text: str
    resulting_state: AttentionState
    delta: float | None = None
    prior: float | None = None


def confidence_delta(c_prev: float, c_new: float, eps: float) -> float:
    """Relative confidence change; unbounded as the prior approaches zero."""
    return (c_new - c_prev) / (c_prev + eps)


def next_mode(delta: float, cfg: GrnConfig) -> Mode:
    return Mode.LOCAL if delta >= cfg.delta_threshold else Mode.GLOBAL


def initial_state() -> AttentionState:
    return AttentionState()


def tile_regions(grid_size: int, tile: int, id_offset: int = 0, confidence: float = 0.5) -> tuple[Region, ...]:
    """Fixed grid tiling used when exploration starts without a scan."""
    out = []
    for y in range(0, grid_size, tile):
        for x in range(0, grid_size, tile):
            out.append(Region(BBox(x, y, x + tile, y + tile), confidence, id_offset + len(out)))
    return tuple(out)


def _scan(state: AttentionState, image: SynthImage, oracle_cfg: OracleConfig, cfg: GrnConfig, rng):
    ocfg = replace(oracle_cfg, n_regions=cfg.n_regions)
    proposals = oracle_scan(image, ocfg, rng, id_offset=state.next_id)
    refined = dict(state.refined)
    regions = [p.with_confidence(refined[p.bbox]) if p.bbox in refined else p for p in proposals]
    if cfg.merge_scans:
        seen = {r.bbox for r in regions}
        regions += [r for r in state.regions if r.bbox not in seen]
    regions.sort(key=lambda r: (-r.confidence, r.region_id))
    regions = tuple(regions[: cfg.n_regions])
    new = replace(
        state,
        regions=regions,
        mode=Mode.GLOBAL,
        focus=None,
        step_index=state.step_index + 1,
        next_id=state.next_id + len(proposals),
    )
    text = f"Scanning the whole image for abnormal regions: {len(regions)} candidate(s) found."
    return new, GrnStepRecord(ScanPrompt(), regions, text, new)


def _drill(state: AttentionState, image: SynthImage, oracle_cfg: OracleConfig, cfg: GrnConfig, rng):
    target = state.region(state.focus)
    c_new = oracle_drill(image, target, oracle_cfg, rng)
    delta = confidence_delta(target.confidence, c_new, cfg.eps_stability)
    mode = next_mode(delta, cfg)
    regions = tuple(r.with_confidence(c_new) if r.region_id == target.region_id else r for r in state.regions)
    refined = dict(state.refined)
    refined[target.bbox] = c_new
    new = replace(
        state,
        regions=regions,
        mode=mode,
        focus=target.region_id if mode is Mode.LOCAL else None,
        step_index=state.step_index + 1,
        refined=tuple(refined.items()),
    )
    text = (f"Analyzing region {target.bbox.to_text()} in detail: confidence "
            f"{target.confidence:.2f} -> {c_new:.2f}.")
    return new, GrnStepRecord(DrillPrompt(target.region_id), c_new, text, new, delta, target.confidence)


def step(
    state: AttentionState,
    image: SynthImage,
    oracle_cfg: OracleConfig,
    cfg: GrnConfig,
    rng: np.random.Generator,
) -> tuple[AttentionState, GrnStepRecord]:
    """One transition: scan in global mode, drill the focus in local mode.

    After a scan the successor stays global; choosing a focus (and thereby
    switching to local mode) is left to the caller.
    """
    if state.mode is Mode.GLOBAL:
        return _scan(state, image, oracle_cfg, cfg, rng)
    return _drill(state, image, oracle_cfg, cfg, rng)

