"""Tagged multi-round dialog format: parse, serialize and validate.

Canonical form, one cycle per reasoning block::

    <reasoning>...</reasoning><action>{"name": "Gaze", "coordinate": [x1,y1,x2,y2]}</action><feedback>...</feedback>
    <reasoning>...</reasoning><answer>...</answer>

(no whitespace between tags when serialized). The parser accepts whitespace
between tags. Content may not contain any of the tag literals.
"""
from __future__ import annotations

import json
import re
from collections.abc import Callable
from dataclasses import dataclass, field

from medeyes.core import Answer, BBox, Gaze, ReasoningStep, Source, Trajectory

TAGS = ("reasoning", "action", "feedback", "answer")
TAG_LITERALS = tuple(f"<{t}>" for t in TAGS) + tuple(f"</{t}>" for t in TAGS)
_TAG_RE = re.compile(r"</?(?:reasoning|action|feedback|answer)>")
_LOOKS_LIKE_TAG = re.compile(r"</?[A-Za-z_][\w\-]*>")

# ParseError reasons
UNKNOWN_TAG = "unknown tag"
STRAY_TEXT = "stray text"
UNCLOSED_TAG = "unclosed tag"
UNEXPECTED_CLOSE = "unexpected closing tag"
MISSING_REASONING = "missing reasoning"
MISSING_ACTION = "missing action"
MISSING_FEEDBACK = "missing feedback"
UNEXPECTED_FEEDBACK = "feedback without action"
CONTENT_AFTER_ANSWER = "content after answer"
MISSING_ANSWER = "missing answer"
EMPTY_ANSWER = "empty answer"
MALFORMED_ACTION = "malformed action"
MALFORMED_COORDINATE = "malformed coordinate array"
INVALID_BOX = "coordinates violate box invariants"

Tokenizer = Callable[[list[ReasoningStep], str], "tuple[list[int], list[bool]]"]


class ParseError(ValueError):
    """Raised for any dialog that is not in the grammar.

    ``cycle`` is the zero-based reasoning cycle the error is attributed to,
    or ``None`` for terminal (answer) errors.
    """

    def __init__(self, reason: str, position: int, cycle: int | None = None):
        super().__init__(f"{reason} at offset {position}")
        self.reason = reason
        self.position = position
        self.cycle = cycle


@dataclass
class GrammarReport:
    per_cycle_ok: list[bool] = field(default_factory=list)
    terminal_ok: bool = False

    @property
    def overall(self) -> bool:
        return all(self.per_cycle_ok) and self.terminal_ok


@dataclass
class _Block:
    tag: str
    content: str
    start: int
    end: int


def format_action(bbox: BBox) -> str:
    return '{"name": "Gaze", "coordinate": ' + bbox.to_text() + "}"


def serialize_steps(steps: list[ReasoningStep], answer: str) -> str:
    out = []
    for step in steps:
        out.append(f"<reasoning>{step.reasoning_text}</reasoning>")
        if isinstance(step.action, Gaze):
            out.append(f"<action>{format_action(step.action.bbox)}</action>")
            out.append(f"<feedback>{step.feedback}</feedback>")
        else:
            out.append(f"<answer>{answer}</answer>")
    return "".join(out)


def serialize(traj: Trajectory) -> str:
    check_content(traj)
    return serialize_steps(traj.steps, traj.answer)


def check_content(traj: Trajectory) -> None:
    texts = [traj.answer] + [s.reasoning_text for s in traj.steps]
    texts += [s.feedback for s in traj.steps if s.feedback is not None]
    for text in texts:
        if any(lit in text for lit in TAG_LITERALS):
            raise ValueError(f"content contains a tag literal: {text!r}")
    if not traj.answer.strip():
        raise ValueError("answer content is empty")


def _cycle_at(text: str, pos: int) -> int:
    return max(text.count("<reasoning>", 0, pos) - 1, 0)


def _lex(text: str, offset: int = 0) -> list[_Block]:
    blocks: list[_Block] = []
    matches = list(_TAG_RE.finditer(text))
    i = 0
    cursor = 0

    def check_gap(a: int, b: int) -> None:
        gap = text[a:b]
        if gap.strip():
            m = _LOOKS_LIKE_TAG.search(gap)
            reason = UNKNOWN_TAG if m else STRAY_TEXT
            pos = a + (m.start() if m else len(gap) - len(gap.lstrip()))
            raise ParseError(reason, offset + pos, _cycle_at(text, pos))

    while i < len(matches):
        m = matches[i]
        check_gap(cursor, m.start())
        lit = m.group()
        if lit.startswith("</"):
            raise ParseError(UNEXPECTED_CLOSE, offset + m.start(), _cycle_at(text, m.start()))
        tag = lit[1:-1]
        if i + 1 >= len(matches) or matches[i + 1].group() != f"</{tag}>":
            cyc = None if tag == "answer" else _cycle_at(text, m.start())
            raise ParseError(UNCLOSED_TAG, offset + m.start(), cyc)
        close = matches[i + 1]
        blocks.append(_Block(tag, text[m.end():close.start()], offset + m.start(), offset + close.end()))
        cursor = close.end()
        i += 2
    check_gap(cursor, len(text))
    return blocks


def _parse_action(block: _Block, cycle: int, grid_size: int | None) -> BBox:
    try:
        payload = json.loads(block.content)
    except json.JSONDecodeError:
        raise ParseError(MALFORMED_ACTION, block.start, cycle) from None
    if not isinstance(payload, dict) or set(payload) != {"name", "coordinate"} or payload["name"] != "Gaze":
        raise ParseError(MALFORMED_ACTION, block.start, cycle)
    coords = payload["coordinate"]
    if (
        not isinstance(coords, list)
        or len(coords) != 4
        or any(isinstance(c, bool) or not isinstance(c, int) for c in coords)
    ):
        raise ParseError(MALFORMED_COORDINATE, block.start, cycle)
    try:
        bbox = BBox(*coords)
        if grid_size is not None:
            bbox.check_bounds(grid_size)
    except ValueError:
        raise ParseError(INVALID_BOX, block.start, cycle) from None
    return bbox


def _assemble(blocks: list[_Block], text_len: int, grid_size: int | None) -> tuple[list[ReasoningStep], str]:
    steps: list[ReasoningStep] = []
    i = 0
    cycle = 0
    while i < len(blocks):
        b = blocks[i]
        if b.tag != "reasoning":
            if b.tag == "answer":
                raise ParseError(MISSING_REASONING, b.start, None)
            if b.tag == "feedback":
                raise ParseError(UNEXPECTED_FEEDBACK, b.start, cycle)
            raise ParseError(MISSING_REASONING, b.start, cycle)
        reasoning = b.content
        if i + 1 >= len(blocks):
            raise ParseError(MISSING_ANSWER, b.end, None)
        nxt = blocks[i + 1]
        if nxt.tag == "answer":
            if not nxt.content.strip():
                raise ParseError(EMPTY_ANSWER, nxt.start, None)
            if i + 2 < len(blocks):
                raise ParseError(CONTENT_AFTER_ANSWER, blocks[i + 2].start, None)
            steps.append(ReasoningStep(reasoning, Answer()))
            return steps, nxt.content
        if nxt.tag == "action":
            bbox = _parse_action(nxt, cycle, grid_size)
            if i + 2 >= len(blocks) or blocks[i + 2].tag != "feedback":
                pos = blocks[i + 2].start if i + 2 < len(blocks) else nxt.end
                raise ParseError(MISSING_FEEDBACK, pos, cycle)
            steps.append(ReasoningStep(reasoning, Gaze(bbox), blocks[i + 2].content))
            i += 3
            cycle += 1
            continue
        if nxt.tag == "feedback":
            raise ParseError(UNEXPECTED_FEEDBACK, nxt.start, cycle)
        raise ParseError(MISSING_ACTION, nxt.start, cycle)
    raise ParseError(MISSING_ANSWER, text_len, None)


def parse(
    dialog: str,
    *,
    source: Source | str = Source.ON,
    episode_ref: str = "",
    tokenizer: Tokenizer | None = None,
    grid_size: int | None = None,
) -> Trajectory:
    """Parse a dialog into a :class:`Trajectory`; raises :class:`ParseError`."""
    steps, answer = _assemble(_lex(dialog), len(dialog), grid_size)
    token_ids, mask = tokenizer(steps, answer) if tokenizer is not None else ([], [])
    return Trajectory(steps, answer, Source(source), list(token_ids), list(mask), episode_ref)


def canonicalize(dialog: str) -> str:
    traj = parse(dialog)
    return serialize(traj)


def _terminal_ok(dialog: str) -> bool:
    opens = dialog.count("<answer>")
    if opens != 1 or dialog.count("</answer>") != 1:
        return False
    start = dialog.index("<answer>")
    end = dialog.index("</answer>")
    if end < start or not dialog[start + len("<answer>"):end].strip():
        return False
    return not dialog[end + len("</answer>"):].strip()


def _cycle_segments(dialog: str) -> list[str]:
    starts = [m.start() for m in re.finditer(re.escape("<reasoning>"), dialog)]
    return [dialog[a:b] for a, b in zip(starts, starts[1:] + [len(dialog)])]


def _segment_ok(segment: str, last: bool) -> bool:
    try:
        blocks = _lex(segment)
    except ParseError:
        return False
    tags = [b.tag for b in blocks]
    if tags == ["reasoning", "action", "feedback"]:
        try:
            _parse_action(blocks[1], 0, None)
        except ParseError:
            return False
        return True
    return last and tags == ["reasoning", "answer"] and bool(blocks[1].content.strip())


def validate(dialog: str, *, grid_size: int | None = None) -> GrammarReport:
    """Per-cycle (W) and terminal (E) checks; ``overall`` agrees with :func:`parse`."""
    segments = _cycle_segments(dialog)
    try:
        parse(dialog, grid_size=grid_size)
    except ParseError as err:
        flags = [_segment_ok(s, i == len(segments) - 1) for i, s in enumerate(segments)]
        terminal = _terminal_ok(dialog)
        if err.cycle is None:
            terminal = False
        else:
            flags.extend([True] * (err.cycle + 1 - len(flags)))
            flags[err.cycle] = False
        return GrammarReport(flags, terminal)
    return GrammarReport([True] * len(segments), True)
