"""Seedable synthetic diagnostic environment and simulated expert oracle.

Images are small integer grids: 0 is normal tissue, k > 0 an abnormality of
type k. Planted components are axis-aligned blobs separated by at least one
normal cell, so connected components and planted lesions coincide.
"""
from __future__ import annotations

import enum
import json
from dataclasses import asdict, dataclass, field
from functools import cached_property

import numpy as np
from scipy import ndimage

from medeyes.core import BBox, Region, iou

ANSWER_VOCAB = (
    "yes", "no",
    "0", "1", "2", "3",
    "upper-left", "upper-right", "lower-left", "lower-right", "none",
)
QUADRANTS = ("upper-left", "upper-right", "lower-left", "lower-right")


class QueryKind(str, enum.Enum):
    PRESENCE = "presence"
    LOCATION = "location"
    COUNT = "count"


@dataclass(frozen=True)
class GeneratorConfig:
    grid_size: int = 16
    k_max: int = 3
    n_types: int = 2
    query_kinds: tuple[str, ...] = ("presence", "location", "count")
    # fixes the number of planted components when set
    force_k: int | None = None
    # single small lesion inside one bin, presence queries only
    needle: bool = False
    bin_size: int = 4
    max_blob: int = 4

    def __post_init__(self):
        object.__setattr__(self, "query_kinds", tuple(self.query_kinds))
        if self.grid_size < 4 or self.grid_size % self.bin_size:
            raise ValueError("grid_size must be a multiple of bin_size and >= 4")
        if not 0 <= self.k_max <= 3:
            raise ValueError("k_max must be in [0, 3]")
        if self.force_k is not None and not 0 <= self.force_k <= self.k_max:
            raise ValueError("force_k must lie in [0, k_max]")
        if self.n_types < 1:
            raise ValueError("n_types must be >= 1")
        if not self.query_kinds or any(k not in QueryKind._value2member_map_ for k in self.query_kinds):
            raise ValueError(f"unknown query kind in {self.query_kinds}")
        if not 1 <= self.max_blob <= self.bin_size:
            raise ValueError("max_blob must be in [1, bin_size]")

    @classmethod
    def needle_mode(cls, **kw) -> GeneratorConfig:
        kw.setdefault("needle", True)
        kw.setdefault("query_kinds", ("presence",))
        kw.setdefault("max_blob", 3)
        return cls(**kw)


@dataclass(frozen=True)
class OracleConfig:
    n_regions: int = 5
    conf_noise: float = 0.05
    distractor_rate: float = 0.5
    drill_gain: float = 0.2
    # scan confidence of a normal-region proposal before noise
    distractor_conf: float = 0.5
    # fraction of confidence removed when drilling a region with no lesion
    drill_decay: float = 0.5
    # IoU with a lesion box above which a drill counts as a true positive
    tp_iou: float = 0.3

    def __post_init__(self):
        if self.n_regions < 1:
            raise ValueError("n_regions must be >= 1")
        for name in ("conf_noise", "distractor_rate", "drill_gain", "distractor_conf", "drill_decay", "tp_iou"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")


@dataclass(frozen=True)
class Component:
    label: int
    bbox: BBox
    area: int

    @property
    def fill(self) -> float:
        return self.area / self.bbox.area


@dataclass(frozen=True, eq=False)
class SynthImage:
    grid: np.ndarray
    seed: int

    @property
    def size(self) -> int:
        return int(self.grid.shape[0])

    @cached_property
    def components(self) -> list[Component]:
        labeled, n = ndimage.label(self.grid > 0)
        comps = []
        for idx, sl in enumerate(ndimage.find_objects(labeled), start=1):
            ys, xs = sl
            cells = labeled[sl] == idx
            label = int(self.grid[sl][cells][0])
            comps.append(Component(label, BBox(xs.start, ys.start, xs.stop, ys.stop), int(cells.sum())))
        return comps

    def crop(self, bbox: BBox) -> np.ndarray:
        bbox.check_bounds(self.size)
        return self.grid[bbox.y1:bbox.y2, bbox.x1:bbox.x2]

    def __eq__(self, other):
        return isinstance(other, SynthImage) and self.seed == other.seed and np.array_equal(self.grid, other.grid)


@dataclass(frozen=True)
class Query:
    kind: QueryKind
    target: int
    text: str
    gold_answer: str


@dataclass(frozen=True, eq=False)
class Episode:
    ref: str
    image: SynthImage
    query: Query

    def __eq__(self, other):
        return isinstance(other, Episode) and (self.ref, self.image, self.query) == (other.ref, other.image, other.query)


def episode_ref(seed: int) -> str:
    return f"ep-{seed}"


def seed_of(ref: str) -> int:
    if not ref.startswith("ep-"):
        raise ValueError(f"not an episode ref: {ref!r}")
    return int(ref[3:])


def quadrant(bbox: BBox, grid_size: int) -> str:
    cx, cy = bbox.center
    half = grid_size / 2.0
    return QUADRANTS[(2 if cy >= half else 0) + (1 if cx >= half else 0)]


def _blob(rng: np.random.Generator, w: int, h: int) -> np.ndarray:
    cells = np.ones((h, w), dtype=bool)
    if w >= 3 and h >= 3:
        for cy, cx in ((0, 0), (0, w - 1), (h - 1, 0), (h - 1, w - 1)):
            if rng.random() < 0.5:
                cells[cy, cx] = False
    elif w == 2 and h == 2 and rng.random() < 0.5:
        cells[rng.integers(2), rng.integers(2)] = False
    return cells


def _place(rng, grid: np.ndarray, cfg: GeneratorConfig, label: int, tries: int = 200) -> bool:
    g = cfg.grid_size
    for _ in range(tries):
        w = int(rng.integers(1 if not cfg.needle else 2, cfg.max_blob + 1))
        h = int(rng.integers(1 if not cfg.needle else 2, cfg.max_blob + 1))
        if cfg.needle:
            # stay inside a single bin so one bin-sized gaze covers the lesion
            bx = int(rng.integers(g // cfg.bin_size)) * cfg.bin_size
            by = int(rng.integers(g // cfg.bin_size)) * cfg.bin_size
            x = bx + int(rng.integers(cfg.bin_size - w + 1))
            y = by + int(rng.integers(cfg.bin_size - h + 1))
        else:
            x = int(rng.integers(g - w + 1))
            y = int(rng.integers(g - h + 1))
        cells = _blob(rng, w, h)
        halo = grid[max(y - 1, 0):y + h + 1, max(x - 1, 0):x + w + 1]
        if halo.any():
            continue
        grid[y:y + h, x:x + w][cells] = label
        return True
    return False


def _gold(image: SynthImage, kind: QueryKind, target: int) -> str:
    comps = [c for c in image.components if c.label == target]
    if kind is QueryKind.PRESENCE:
        return "yes" if comps else "no"
    if kind is QueryKind.COUNT:
        return str(len(comps))
    if not comps:
        return "none"
    best = max(comps, key=lambda c: (c.area, -c.bbox.y1, -c.bbox.x1))
    return quadrant(best.bbox, image.size)


_QUESTION = {
    QueryKind.PRESENCE: "Is there a type-{t} abnormality in the image?",
    QueryKind.LOCATION: "In which quadrant is the largest type-{t} abnormality?",
    QueryKind.COUNT: "How many type-{t} abnormalities are there?",
}


def make_query(image: SynthImage, kind: QueryKind, target: int) -> Query:
    return Query(kind, target, _QUESTION[kind].format(t=target), _gold(image, kind, target))


def generate_episode(seed: int, cfg: GeneratorConfig) -> Episode:
    rng = np.random.default_rng([seed, 0x5EED])
    g = cfg.grid_size
    grid = np.zeros((g, g), dtype=np.int8)
    if cfg.needle:
        k = 1 if cfg.force_k is None else cfg.force_k
    else:
        k = int(rng.integers(cfg.k_max + 1)) if cfg.force_k is None else cfg.force_k
    for _ in range(k):
        _place(rng, grid, cfg, int(rng.integers(1, cfg.n_types + 1)))
    image = SynthImage(grid, seed)
    kind = QueryKind(cfg.query_kinds[int(rng.integers(len(cfg.query_kinds)))])
    target = int(rng.integers(1, cfg.n_types + 1))
    return Episode(episode_ref(seed), image, make_query(image, kind, target))


def episode_record(ep: Episode) -> dict:
    return {
        "episode_ref": ep.ref,
        "seed": ep.image.seed,
        "grid": ep.image.grid.tolist(),
        "query": {"kind": ep.query.kind.value, "target": ep.query.target,
                  "text": ep.query.text, "gold_answer": ep.query.gold_answer},
    }


def dump_episodes(episodes, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ep in episodes:
            fh.write(json.dumps(episode_record(ep), sort_keys=True) + "\n")


# ---------------------------------------------------------------- oracle


def _clamp(x: float) -> float:
    return float(min(1.0, max(0.0, x)))


def _distractor(rng, image: SynthImage, tries: int = 50) -> BBox | None:
    g = image.size
    for _ in range(tries):
        w = int(rng.integers(1, 4))
        h = int(rng.integers(1, 4))
        x = int(rng.integers(g - w + 1))
        y = int(rng.integers(g - h + 1))
        box = BBox(x, y, x + w, y + h)
        if not image.crop(box).any():
            return box
    return None


def oracle_scan(image: SynthImage, cfg: OracleConfig, rng: np.random.Generator, id_offset: int = 0) -> list[Region]:
    """Propose candidate regions, highest confidence first (at most ``cfg.n_regions``)."""
    proposals: list[tuple[BBox, float]] = []
    for comp in image.components:
        noise = rng.normal(0.0, cfg.conf_noise) if cfg.conf_noise > 0 else 0.0
        proposals.append((comp.bbox, _clamp(comp.fill + noise)))
    for _ in range(max(cfg.n_regions - len(proposals), 0)):
        if rng.random() >= cfg.distractor_rate:
            continue
        box = _distractor(rng, image)
        if box is None:
            continue
        noise = rng.normal(0.0, cfg.conf_noise) if cfg.conf_noise > 0 else 0.0
        proposals.append((box, _clamp(cfg.distractor_conf + noise)))
    order = sorted(range(len(proposals)), key=lambda i: (-proposals[i][1], i))[: cfg.n_regions]
    return [Region(proposals[i][0], proposals[i][1], id_offset + rank) for rank, i in enumerate(order)]


def is_true_positive(image: SynthImage, bbox: BBox, cfg: OracleConfig) -> bool:
    return any(iou(bbox, c.bbox) > cfg.tp_iou for c in image.components)


def oracle_drill(image: SynthImage, region: Region, cfg: OracleConfig, rng: np.random.Generator) -> float:
    """Refined confidence for one region."""
    region.bbox.check_bounds(image.size)
    noise = rng.normal(0.0, cfg.conf_noise) if cfg.conf_noise > 0 else 0.0
    prior = region.confidence
    if is_true_positive(image, region.bbox, cfg):
        return _clamp(prior + cfg.drill_gain + noise)
    return _clamp(prior * (1.0 - cfg.drill_decay) + noise)


# --------------------------------------------------------------- feedback


def render_feedback(image: SynthImage, bbox: BBox) -> str:
    """Row-major cell labels: cells joined by ',', rows by ';'."""
    sub = image.crop(bbox)
    return ";".join(",".join(str(int(v)) for v in row) for row in sub)


def parse_feedback(text: str) -> np.ndarray:
    rows = [[int(v) for v in row.split(",")] for row in text.split(";")]
    if len({len(r) for r in rows}) != 1:
        raise ValueError("ragged feedback rendering")
    return np.array(rows, dtype=np.int8)


def normalize_answer(text: str) -> str:
    return text.strip().casefold()


def check_answer(query: Query, answer: str) -> int:
    return int(normalize_answer(answer) == normalize_answer(query.gold_answer))


def answer_from_evidence(image: SynthImage, query: Query, seen: list[BBox]) -> str:
    """Answer implied by the cells inside ``seen`` boxes only.

    Matches the gold answer whenever every relevant lesion was looked at.
    """
    mask = np.zeros(image.grid.shape, dtype=bool)
    for b in seen:
        mask[b.y1:b.y2, b.x1:b.x2] = True
    seen_comps = [
        c for c in image.components
        if c.label == query.target and (mask[c.bbox.y1:c.bbox.y2, c.bbox.x1:c.bbox.x2]
                                         & (image.crop(c.bbox) == c.label)).any()
    ]
    if query.kind is QueryKind.PRESENCE:
        return "yes" if seen_comps else "no"
    if query.kind is QueryKind.COUNT:
        return str(len(seen_comps))
    if not seen_comps:
        return "none"
    best = max(seen_comps, key=lambda c: (c.area, -c.bbox.y1, -c.bbox.x1))
    return quadrant(best.bbox, image.size)


@dataclass
class EnvConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)

    def to_dict(self) -> dict:
        return {"generator": asdict(self.generator), "oracle": asdict(self.oracle)}
