import json
from pathlib import Path

import pytest

from errors import ConfigurationError, DatasetError
from prompts import (
    HEADER,
    NUM_CHOICES,
    McqaInstance,
    PromptSpec,
    Vocab,
    build_vocab,
    colors_corpus,
    colors_instance,
    consistency_prompts,
    gen_colors,
    icl_positions,
    load_mcqa_jsonl,
    permute_choices,
    render_generative,
    render_generative_shots,
    render_prompt,
    resolve_symbol_set,
    write_mcqa_jsonl,
)

GOLDEN = Path(__file__).parent / "golden"


@pytest.fixture
def corn():
    return colors_instance("corn", "yellow", ["grey", "blue", "pink"], 0)


class TestRenderPrompt:
    def test_zero_shot_matches_golden(self, corn, vocab):
        prompt = render_prompt(corn, PromptSpec("ABCD", 0, 0), None, vocab)
        expected = (GOLDEN / "corn_abcd_0shot.txt").read_text(encoding="utf-8")
        assert prompt.text == expected
        assert prompt.gold_symbol == "A"
        assert prompt.gold_token_id == vocab.token_id(" A")

    def test_gold_follows_requested_position(self, corn, vocab):
        prompt = render_prompt(corn, PromptSpec("NUM1234", 1, 0), None, vocab)
        assert prompt.gold_position == 1
        assert prompt.gold_token_id == vocab.token_id(" 2")
        assert "\n2. yellow\n" in prompt.text
        assert prompt.displayed_choices == ("grey", "yellow", "blue", "pink")

    def test_token_ids_start_with_bos_and_decode_back(self, corn, vocab):
        prompt = render_prompt(corn, PromptSpec("QZRX", 3, 0), None, vocab)
        assert prompt.token_ids[0] == vocab.bos_id
        assert vocab.unk_id not in prompt.token_ids
        assert vocab.decode(prompt.token_ids) == prompt.text

    def test_three_shot_examples_carry_their_answers(self, colors, vocab):
        icl, test = colors
        prompt = render_prompt(test[0], PromptSpec("ABCD", 2, 3), icl, vocab)
        assert prompt.text.startswith(HEADER + "\n\n")
        assert prompt.text.count("Phrase:") == 4
        assert prompt.text.count("The correct answer is:") == 4
        for example, position in zip(icl, icl_positions(0)):
            symbol = "ABCD"[position]
            assert f"{symbol}. {example.answer}\n" in prompt.text
        assert prompt.text.endswith("The correct answer is:")
        assert len(prompt.token_ids) <= 256

    def test_three_shot_without_examples_is_rejected(self, corn, vocab):
        with pytest.raises(ConfigurationError):
            render_prompt(corn, PromptSpec("ABCD", 0, 3), None, vocab)

    def test_consistency_prompts_cover_sets_and_positions(self, corn, vocab, colors):
        prompts = consistency_prompts(corn, colors[0], vocab, ["ABCD", "QZRX", "1234"])
        assert len(prompts) == 12
        assert sorted({(p.symbol_set, p.gold_position) for p in prompts}) == sorted(
            (name, pos) for name in ("ABCD", "QZRX", "NUM1234") for pos in range(NUM_CHOICES)
        )


class TestPermutation:
    def test_answer_moves_and_distractors_keep_order(self, corn):
        for position in range(NUM_CHOICES):
            displayed = permute_choices(corn, position)
            assert displayed[position] == "yellow"
            assert [c for c in displayed if c != "yellow"] == ["grey", "blue", "pink"]

    def test_inverse_recovers_instance(self):
        inst = colors_instance("sky", "blue", ["red", "green", "black"], 2)
        for position in range(NUM_CHOICES):
            displayed = permute_choices(inst, position)
            assert permute_choices(McqaInstance(inst.question, displayed, position, inst.context), inst.answer_index) == list(inst.choices)

    def test_icl_positions_are_a_permutation(self):
        assert sorted(icl_positions(0)) == [0, 1, 2]
        assert icl_positions(5) == icl_positions(5)


class TestSymbolSets:
    def test_alias(self):
        assert resolve_symbol_set("1234").name == "NUM1234"

    def test_custom(self):
        assert resolve_symbol_set("custom:WXYZ").symbols == ("W", "X", "Y", "Z")

    @pytest.mark.parametrize("name", ["custom:WXY", "custom:WWXY", "custom:W_XY", "ABCE"])
    def test_rejected(self, name):
        with pytest.raises(ConfigurationError):
            resolve_symbol_set(name)


class TestVocab:
    def test_reserved_and_answer_tokens(self, vocab):
        assert vocab.tokens[:2] == ["<bos>", "<unk>"]
        for token in [" A", " Q", " O", " 1", " 4", "\n", " yellow", "Phrase"]:
            assert token in vocab

    def test_deterministic(self):
        assert build_vocab(colors_corpus()).tokens == build_vocab(colors_corpus()).tokens

    def test_unknown_piece_maps_to_unk(self, vocab):
        assert vocab.encode(" zebra") == [vocab.unk_id]

    def test_save_load(self, vocab, tmp_path):
        path = tmp_path / "vocab.txt"
        vocab.save(path)
        assert Vocab.load(path).tokens == vocab.tokens

    def test_empty_corpus(self):
        with pytest.raises(ConfigurationError):
            build_vocab([])


class TestColors:
    def test_sizes(self, colors):
        icl, test = colors
        assert len(icl) == 3
        assert len(test) == 105

    def test_deterministic_per_seed(self):
        assert gen_colors(7) == gen_colors(7)
        assert gen_colors(7) != gen_colors(8)

    def test_answers_are_copied_from_context(self, colors):
        for inst in colors[1]:
            assert inst.context.endswith(f" is {inst.answer}.")
            assert len(set(inst.choices)) == NUM_CHOICES

    def test_generative_rendering(self, corn, colors):
        assert render_generative(corn) == " Corn is yellow. What color is corn?"
        shots = render_generative_shots(corn, colors[0])
        assert shots.count("?") == 4
        assert shots.endswith("What color is corn?")

    def test_generative_needs_context(self):
        with pytest.raises(ConfigurationError):
            render_generative(McqaInstance("Q?", ("a", "b", "c", "d"), 0))


class TestJsonl:
    def test_round_trip(self, colors, tmp_path):
        path = tmp_path / "test.jsonl"
        write_mcqa_jsonl(path, colors[1])
        assert load_mcqa_jsonl(path) == colors[1]

    def test_bad_record_reports_line(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        good = {"question": "Q?", "choices": ["a", "b", "c", "d"], "answer_index": 0}
        bad = {"question": "Q?", "choices": ["a", "b", "c", "d", "e"], "answer_index": 0}
        path.write_text(json.dumps(good) + "\n" + json.dumps(bad) + "\n", encoding="utf-8")
        with pytest.raises(DatasetError) as excinfo:
            load_mcqa_jsonl(path)
        assert excinfo.value.line_number == 2
        assert excinfo.value.field == "choices"

    @pytest.mark.parametrize("record", [
        {"question": "Q?", "choices": ["a", "a", "c", "d"], "answer_index": 0},
        {"question": "Q?", "choices": ["a", "b", "c", "d"], "answer_index": 4},
        {"question": "Q?", "choices": ["a", "b", "c", "d"], "answer_index": True},
        {"question": "", "choices": ["a", "b", "c", "d"], "answer_index": 0},
    ])
    def test_invalid_records(self, record, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text(json.dumps(record) + "\n", encoding="utf-8")
        with pytest.raises(DatasetError):
            load_mcqa_jsonl(path)

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text("{not json\n", encoding="utf-8")
        with pytest.raises(DatasetError, match="line 1"):
            load_mcqa_jsonl(path)

    def test_invalid_utf8_reports_line(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_bytes(b'{"question": "x"}\n\xff\xfe\n')
        with pytest.raises(DatasetError, match="invalid UTF-8") as excinfo:
            load_mcqa_jsonl(path)
        assert excinfo.value.line_number == 2

    def test_records_keep_their_line(self, tmp_path):
        path = tmp_path / "test.jsonl"
        record = {"question": "Q?", "choices": ["a", "b", "c", "d"], "answer_index": 1}
        path.write_text(json.dumps(record) + "\n\n" + json.dumps(record) + "\n", encoding="utf-8")
        assert [inst.line_number for inst in load_mcqa_jsonl(path)] == [1, 3]
