"""Prompt templates and strict answer parsers.

Every template is an exact string contract: tests compare formatted output
byte-for-byte against golden fixtures, so whitespace here is intentional
(including trailing spaces before the answer region).

Parsers are strict (anchored, no leading zeros, range-checked) and raise
ParseFailure; callers that need total evaluation catch it and substitute a
documented fallback.
"""

from __future__ import annotations

import re

from .errors import ContractError, ParseFailure

IMAGE_BLOCK = "<Img> <ImageFeature> </Img>"

# decimal integer without leading zeros
_NUM = r"(0|[1-9][0-9]*)"
_RGB_RE = re.compile(rf"^\[{_NUM},{_NUM},{_NUM}\]$")
_BBOX_RE = re.compile(rf"^\[{_NUM},{_NUM},{_NUM},{_NUM}\]$")


def _check_coord(name: str, value: int, limit: int) -> None:
    if not 0 <= value < limit:
        raise ContractError(f"{name}={value} outside [0, {limit})")


def format_pvp_prompt(x: int, y: int, width: int, height: int) -> str:
    """Prompt asking for the color of target pixel (x, y)."""
    _check_coord("x", x, width)
    _check_coord("y", y, height)
    return f"{IMAGE_BLOCK} [reconstruct] loc: [{x},{y}] rgb: "


def format_pvp_answer(r: int, g: int, b: int) -> str:
    for name, v in (("r", r), ("g", g), ("b", b)):
        if not 0 <= v <= 255:
            raise ContractError(f"{name}={v} outside [0, 255]")
    return f"[{r},{g},{b}]"


def parse_pvp_answer(text: str) -> tuple[int, int, int]:
    """Parse `[r,g,b]`; raises ParseFailure on any deviation."""
    m = _RGB_RE.match(text.strip())
    if m is None:
        raise ParseFailure(text, "answer does not match [r,g,b]")
    vals = tuple(int(g) for g in m.groups())
    if any(v > 255 for v in vals):
        raise ParseFailure(text, "channel value above 255")
    return vals


def format_caption_prompt() -> str:
    return f"{IMAGE_BLOCK} [caption] "


def format_seg_prompt(sentence: str, x: int, y: int, width: int, height: int) -> str:
    """Per-pixel membership query for the object named by `sentence`."""
    _check_coord("x", x, width)
    _check_coord("y", y, height)
    return f"{IMAGE_BLOCK} [segmentation] {sentence} loc: [{x},{y}] mask: "


def format_mask_answer(bit: int) -> str:
    if bit not in (0, 1):
        raise ContractError(f"mask bit must be 0 or 1, got {bit}")
    return str(bit)


def parse_mask_answer(text: str) -> int:
    t = text.strip()
    if t == "0":
        return 0
    if t == "1":
        return 1
    raise ParseFailure(text, "mask answer is not a single 0/1 bit")


def format_refer_prompt(sentence: str) -> str:
    return f"{IMAGE_BLOCK} [refer] {sentence} bbox: "


def format_bbox_answer(x1: int, y1: int, x2: int, y2: int, width: int, height: int) -> str:
    _check_coord("x1", x1, width)
    _check_coord("x2", x2, width)
    _check_coord("y1", y1, height)
    _check_coord("y2", y2, height)
    if x2 < x1 or y2 < y1:
        raise ContractError(f"degenerate box ({x1},{y1},{x2},{y2})")
    return f"[{x1},{y1},{x2},{y2}]"


def parse_bbox_answer(text: str, width: int, height: int) -> tuple[int, int, int, int]:
    """Parse `[x1,y1,x2,y2]` with corner ordering and bounds checks."""
    m = _BBOX_RE.match(text.strip())
    if m is None:
        raise ParseFailure(text, "answer does not match [x1,y1,x2,y2]")
    x1, y1, x2, y2 = (int(g) for g in m.groups())
    if x2 < x1 or y2 < y1:
        raise ParseFailure(text, "box corners out of order")
    if x2 >= width or y2 >= height:
        raise ParseFailure(text, "box extends past image bounds")
    return x1, y1, x2, y2


def format_game_prompt(instruction: str, n_frames: int, action_labels: list[str]) -> str:
    """Multi-frame observation followed by an explicit action menu."""
    if n_frames < 1:
        raise ContractError(f"n_frames must be >= 1, got {n_frames}")
    if not action_labels:
        raise ContractError("action_labels is empty")
    frames = "".join(IMAGE_BLOCK for _ in range(n_frames))
    menu = "[" + ", ".join(f"{i}: {lab}" for i, lab in enumerate(action_labels)) + "]"
    return f"{frames} {instruction} [game] choose an action from Action Space: {menu} "


def format_action_answer(action: int, action_labels: list[str]) -> str:
    if not 0 <= action < len(action_labels):
        raise ContractError(f"action id {action} outside action space")
    return action_labels[action]


def parse_action_answer(text: str, action_labels: list[str]) -> int:
    """Map a generated label back to its action id by exact match."""
    t = text.strip()
    for i, lab in enumerate(action_labels):
        if t == lab:
            return i
    raise ParseFailure(text, "not an action label")
