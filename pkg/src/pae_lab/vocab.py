"""Closed vocabulary and token sequences.

Numerals are digit-tokenized (one token per digit) so generation lengths
stay bounded and parse rules are exact. Encoding is greedy longest-match;
decode is plain concatenation, the exact inverse on encode's image.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, TokenizeError

PAD = "<PAD>"
BOS = "<BOS>"
EOS = "<EOS>"
IMG_OPEN = "<Img>"
IMG_CLOSE = "</Img>"
IMG_FEATURE = "<ImageFeature>"

TASK_TOKENS = ["[reconstruct]", "[segmentation]", "[refer]", "[game]", "[caption]"]

COLOR_WORDS = ["red", "green", "blue", "yellow", "cyan", "magenta", "orange", "purple"]
SHAPE_WORDS = ["circle", "square", "triangle"]
SPATIAL_WORDS = ["leftmost", "rightmost", "topmost", "bottommost"]
ACTION_WORDS = ["LEFT", "STRAIGHT", "RIGHT"]
GAME_WORDS = [
    "drive", "car", "stay", "on", "road",
    "choose", "an", "action", "from", "Action", "Space",
]
GLUE_WORDS = ["the", "a", "and", "loc", "rgb", "mask", "bbox"]

DIGITS = [str(d) for d in range(10)]
PUNCT = ["[", "]", ",", ":", " "]


def default_token_list() -> list[str]:
    """Full vocabulary in id order; order is part of the persisted format."""
    toks = [PAD, BOS, EOS, IMG_OPEN, IMG_CLOSE, IMG_FEATURE]
    toks += TASK_TOKENS
    toks += DIGITS
    toks += PUNCT
    toks += COLOR_WORDS + SHAPE_WORDS + SPATIAL_WORDS + GLUE_WORDS
    toks += GAME_WORDS + ACTION_WORDS
    return toks


class Vocabulary:
    """Immutable closed vocabulary with greedy longest-match encoding."""

    def __init__(self, tokens: list[str] | None = None):
        self.tokens = list(tokens) if tokens is not None else default_token_list()
        if len(set(self.tokens)) != len(self.tokens):
            raise ContractError("duplicate token in vocabulary")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        # first-character buckets, longest token first, for the greedy scanner
        self._by_first: dict[str, list[str]] = {}
        for t in self.tokens:
            self._by_first.setdefault(t[0], []).append(t)
        for bucket in self._by_first.values():
            bucket.sort(key=len, reverse=True)

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def bos_id(self) -> int:
        return self.index[BOS]

    @property
    def eos_id(self) -> int:
        return self.index[EOS]

    @property
    def image_feature_id(self) -> int:
        return self.index[IMG_FEATURE]

    def encode(self, text: str) -> list[int]:
        ids = []
        pos = 0
        n = len(text)
        while pos < n:
            for cand in self._by_first.get(text[pos], ()):
                if text.startswith(cand, pos):
                    ids.append(self.index[cand])
                    pos += len(cand)
                    break
            else:
                span = text[pos : pos + 12]
                raise TokenizeError(f"no token matches {span!r} at position {pos}")
        return ids

    def decode(self, ids) -> str:
        return "".join(self.tokens[int(i)] for i in ids)

    def decode_answer(self, ids) -> str:
        """Decode generated ids, stopping at the first end-of-sequence token."""
        out = []
        for i in ids:
            if int(i) == self.eos_id:
                break
            out.append(self.tokens[int(i)])
        return "".join(out)


@dataclass
class TokenSeq:
    """Encoded prompt+answer with loss mask and image-slot positions."""

    ids: np.ndarray           # int32 [L]
    loss_mask: np.ndarray     # bool  [L], True only on answer tokens + EOS
    image_slots: np.ndarray   # int32 [n_images * tokens_per_image]
    n_images: int = 1

    def __len__(self) -> int:
        return len(self.ids)


def build_seq(
    vocab: Vocabulary,
    prompt: str,
    answer: str,
    tokens_per_image: int,
    n_images: int = 1,
) -> TokenSeq:
    """Encode prompt+answer, expanding each image placeholder to its slots.

    The sequence is BOS + prompt + answer + EOS; the loss mask covers the
    answer tokens and the EOS, never any prompt token.
    """
    raw = vocab.encode(prompt)
    feat = vocab.image_feature_id
    n_found = sum(1 for i in raw if i == feat)
    if n_found != n_images:
        raise ContractError(
            f"prompt has {n_found} image placeholders, expected {n_images}"
        )
    ids: list[int] = [vocab.bos_id]
    slots: list[int] = []
    for i in raw:
        if i == feat:
            for _ in range(tokens_per_image):
                slots.append(len(ids))
                ids.append(feat)
        else:
            ids.append(i)
    prompt_len = len(ids)
    ids.extend(vocab.encode(answer))
    ids.append(vocab.eos_id)
    mask = np.zeros(len(ids), dtype=bool)
    mask[prompt_len:] = True
    return TokenSeq(
        ids=np.asarray(ids, dtype=np.int32),
        loss_mask=mask,
        image_slots=np.asarray(slots, dtype=np.int32),
        n_images=n_images,
    )


def build_prompt_ids(
    vocab: Vocabulary,
    prompt: str,
    tokens_per_image: int,
    n_images: int = 1,
) -> tuple[np.ndarray, np.ndarray]:
    """Encode a generation prompt: BOS + prompt with image slots expanded.

    Returns (ids, image_slots); no answer tokens and no EOS are appended.
    """
    seq = build_seq(vocab, prompt, "", tokens_per_image, n_images)
    return seq.ids[:-1], seq.image_slots
