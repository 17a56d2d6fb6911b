"""Tokenizer and prompt-grammar tests.

The golden file freezes every template byte-for-byte; parser tests cover
strict acceptance, rejection, and totality under fuzzed input.
"""

import itertools
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pae_lab import prompts, vocab as V
from pae_lab.errors import ContractError, ParseFailure, TokenizeError
from pae_lab.vocab import Vocabulary, build_seq

GOLDEN = Path(__file__).parent / "goldens" / "prompts.txt"

ACTIONS = ["LEFT", "STRAIGHT", "RIGHT"]
INSTRUCTION = "drive the car and stay on the road"


def golden_lines():
    return GOLDEN.read_text().split("\n")


class TestGoldenTemplates:
    def test_templates_match_fixture_bytes(self):
        lines = golden_lines()
        produced = [
            prompts.format_pvp_prompt(3, 5, 16, 16),
            prompts.format_pvp_answer(12, 200, 3),
            prompts.format_caption_prompt(),
            prompts.format_seg_prompt("the red circle", 4, 7, 16, 16),
            prompts.format_mask_answer(1),
            prompts.format_refer_prompt("the blue square"),
            prompts.format_bbox_answer(2, 3, 9, 12, 16, 16),
            prompts.format_game_prompt(INSTRUCTION, 2, ACTIONS),
            prompts.format_action_answer(0, ACTIONS),
        ]
        for i, (want, got) in enumerate(zip(lines, produced)):
            assert got == want, f"golden line {i + 1} mismatch: {got!r} != {want!r}"

    def test_templates_end_before_answer_region(self):
        # prompt templates carry the trailing space that separates them
        # from the first answer token
        assert prompts.format_pvp_prompt(0, 0, 16, 16).endswith("rgb: ")
        assert prompts.format_seg_prompt("a", 0, 0, 16, 16).endswith("mask: ")
        assert prompts.format_refer_prompt("a").endswith("bbox: ")
        assert prompts.format_game_prompt("a", 1, ACTIONS).endswith("] ")


class TestCoordinateValidation:
    def test_pvp_prompt_rejects_out_of_range(self):
        with pytest.raises(ContractError):
            prompts.format_pvp_prompt(16, 0, 16, 16)
        with pytest.raises(ContractError):
            prompts.format_pvp_prompt(0, -1, 16, 16)

    def test_answer_formatter_rejects_bad_channel(self):
        with pytest.raises(ContractError):
            prompts.format_pvp_answer(0, 256, 0)

    def test_bbox_formatter_rejects_disorder(self):
        with pytest.raises(ContractError):
            prompts.format_bbox_answer(9, 3, 2, 12, 16, 16)


class TestPvpParser:
    def test_round_trip(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            r, g, b = (int(v) for v in rng.integers(0, 256, size=3))
            assert prompts.parse_pvp_answer(prompts.format_pvp_answer(r, g, b)) == (r, g, b)

    @pytest.mark.parametrize(
        "bad",
        [
            "", "[1,2]", "[1,2,3,4]", "(1,2,3)", "[1, 2, 3]",
            "[01,2,3]", "[256,0,0]", "[1,2,3] extra", "rgb: [1,2,3]",
            "[-1,2,3]", "[1,2,3", "[999,999,999]",
        ],
    )
    def test_rejects(self, bad):
        with pytest.raises(ParseFailure):
            prompts.parse_pvp_answer(bad)

    def test_surrounding_whitespace_tolerated(self):
        assert prompts.parse_pvp_answer(" [0,0,255] ") == (0, 0, 255)

    @given(st.text(max_size=30))
    @settings(max_examples=300, deadline=None)
    def test_total_on_arbitrary_text(self, text):
        try:
            r, g, b = prompts.parse_pvp_answer(text)
            assert all(0 <= v <= 255 for v in (r, g, b))
        except ParseFailure:
            pass


class TestMaskParser:
    def test_bits(self):
        assert prompts.parse_mask_answer("0") == 0
        assert prompts.parse_mask_answer(" 1 ") == 1

    @pytest.mark.parametrize("bad", ["", "2", "01", "10", "yes", "0 1"])
    def test_rejects(self, bad):
        with pytest.raises(ParseFailure):
            prompts.parse_mask_answer(bad)


class TestBboxParser:
    def test_round_trip(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            x1, x2 = sorted(int(v) for v in rng.integers(0, 16, size=2))
            y1, y2 = sorted(int(v) for v in rng.integers(0, 16, size=2))
            text = prompts.format_bbox_answer(x1, y1, x2, y2, 16, 16)
            assert prompts.parse_bbox_answer(text, 16, 16) == (x1, y1, x2, y2)

    @pytest.mark.parametrize(
        "bad",
        ["[9,3,2,12]", "[0,0,16,0]", "[0,0,0,16]", "[1,2,3]", "box", "[00,0,0,0]"],
    )
    def test_rejects(self, bad):
        with pytest.raises(ParseFailure):
            prompts.parse_bbox_answer(bad, 16, 16)


class TestActionParser:
    def test_all_labels(self):
        for i, lab in enumerate(ACTIONS):
            assert prompts.parse_action_answer(lab, ACTIONS) == i

    def test_rejects_non_label(self):
        with pytest.raises(ParseFailure):
            prompts.parse_action_answer("FORWARD", ACTIONS)
        with pytest.raises(ParseFailure):
            prompts.parse_action_answer("LEFT RIGHT", ACTIONS)


def grammar_sentences():
    """Every referring/caption noun phrase the scene grammar can emit."""
    out = []
    for color, shape in itertools.product(V.COLOR_WORDS, V.SHAPE_WORDS):
        out.append(f"the {color} {shape}")
        out.append(f"a {color} {shape}")
        for spatial in V.SPATIAL_WORDS:
            out.append(f"the {spatial} {color} {shape}")
    return out


class TestVocabulary:
    def test_image_feature_is_single_token(self):
        v = Vocabulary()
        ids = v.encode("<ImageFeature>")
        assert len(ids) == 1
        assert ids[0] == v.image_feature_id

    def test_round_trip_on_all_templates(self):
        v = Vocabulary()
        for line in golden_lines():
            assert v.decode(v.encode(line)) == line

    def test_round_trip_on_grammar_sentences(self):
        v = Vocabulary()
        for s in grammar_sentences():
            assert v.decode(v.encode(s)) == s
            joined = " and ".join([s, "a red square"])
            assert v.decode(v.encode(joined)) == joined

    def test_digits_tokenize_individually(self):
        v = Vocabulary()
        ids = v.encode("123")
        assert len(ids) == 3
        assert [v.tokens[i] for i in ids] == ["1", "2", "3"]

    def test_unknown_text_raises_with_span(self):
        v = Vocabulary()
        with pytest.raises(TokenizeError, match="zebra"):
            v.encode("the red zebra")

    def test_ids_are_dense_and_stable(self):
        v1, v2 = Vocabulary(), Vocabulary()
        assert v1.tokens == v2.tokens
        assert sorted(v1.index.values()) == list(range(len(v1)))

    def test_greedy_prefers_longest(self):
        v = Vocabulary()
        # "and" must win over "a"; "[reconstruct]" over "["
        assert [v.tokens[i] for i in v.encode("and")] == ["and"]
        assert [v.tokens[i] for i in v.encode("[reconstruct]")] == ["[reconstruct]"]
        assert [v.tokens[i] for i in v.encode("[1]")] == ["[", "1", "]"]

    @given(st.lists(st.sampled_from(grammar_sentences()), min_size=1, max_size=4))
    @settings(max_examples=200, deadline=None)
    def test_fuzzed_sentence_joins_round_trip(self, parts):
        v = Vocabulary()
        s = " and ".join(parts)
        assert v.decode(v.encode(s)) == s


class TestBuildSeq:
    def test_structure(self):
        v = Vocabulary()
        prompt = prompts.format_pvp_prompt(3, 5, 16, 16)
        answer = prompts.format_pvp_answer(12, 200, 3)
        seq = build_seq(v, prompt, answer, tokens_per_image=4)
        assert seq.ids[0] == v.bos_id
        assert seq.ids[-1] == v.eos_id
        # four slots, contiguous, starting right after BOS + <Img> + space
        assert len(seq.image_slots) == 4
        assert list(np.diff(seq.image_slots)) == [1, 1, 1]
        assert all(seq.ids[p] == v.image_feature_id for p in seq.image_slots)

    def test_loss_mask_covers_answer_and_eos_only(self):
        v = Vocabulary()
        prompt = prompts.format_seg_prompt("the red circle", 4, 7, 16, 16)
        seq = build_seq(v, prompt, "1", tokens_per_image=4)
        n_answer = int(seq.loss_mask.sum())
        assert n_answer == 2  # the bit and EOS
        assert seq.loss_mask[-1] and seq.loss_mask[-2]
        assert not seq.loss_mask[: len(seq) - 2].any()
        # masked positions decode back to the answer
        answer_ids = seq.ids[seq.loss_mask][:-1]
        assert v.decode(answer_ids) == "1"

    def test_multi_image_expansion(self):
        v = Vocabulary()
        prompt = prompts.format_game_prompt(INSTRUCTION, 2, ACTIONS)
        seq = build_seq(v, prompt, "LEFT", tokens_per_image=4, n_images=2)
        assert len(seq.image_slots) == 8
        # slots come in two contiguous runs of four
        gaps = np.diff(seq.image_slots)
        assert (gaps == 1).sum() == 6

    def test_image_count_mismatch_raises(self):
        v = Vocabulary()
        with pytest.raises(ContractError, match="placeholders"):
            build_seq(v, prompts.format_caption_prompt(), "a red circle",
                      tokens_per_image=4, n_images=2)

    def test_mask_never_true_inside_prompt(self):
        v = Vocabulary()
        for sentence in grammar_sentences()[:24]:
            prompt = prompts.format_refer_prompt(sentence)
            seq = build_seq(v, prompt, "[0,0,3,3]", tokens_per_image=4)
            first = int(np.argmax(seq.loss_mask))
            assert not seq.loss_mask[:first].any()
            assert seq.loss_mask[first:].all()
