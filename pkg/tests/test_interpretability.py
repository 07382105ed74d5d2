import numpy as np
import pytest

from errors import ConfigurationError, EmptyCohortError, ProtocolError
from interpretability import (
    HeadHeatmap,
    PatchSpec,
    PatchSweepRow,
    PatchSweepTable,
    ProjectionMode,
    ProjectionRecord,
    activation_patch,
    average_lens,
    component_lens,
    first_positive_layer,
    head_heatmap,
    head_sparsity,
    heads_for_share,
    key_layer,
    lens_sweep,
    majority_layer,
    patch_sweep,
    symbol_switch_layer,
    vocab_project,
)
from prompts import RenderedPrompt
from transformer import EMBED, HookKind, HookSite

ANSWER_IDS = (20, 21, 22, 23)
SOURCE_IDS = (0, 3, 5, 7, 9, 11)
TARGET_IDS = (0, 4, 6, 8, 10, 12)


def prompt_for(model, token_ids, answer_ids=ANSWER_IDS, gold=None):
    """Prompt whose gold position is whatever the model already prefers, unless forced"""
    if gold is None:
        gold = int(np.argmax(model.next_token_logits(token_ids)[list(answer_ids)]))
    return RenderedPrompt(text="", answer_token_ids=tuple(answer_ids), gold_position=gold,
                          symbols=("A", "B", "C", "D"), token_ids=tuple(token_ids))


def record(layer, logits, gold=0, reference=None):
    values = dict(zip("ABCD", logits))
    best = int(np.argmax(logits))
    others = [v for i, v in enumerate(logits) if i != best]
    return ProjectionRecord(
        site=HookSite(layer), mode=ProjectionMode.WITH_FINAL_LN, symbols=("A", "B", "C", "D"), gold_position=gold,
        answer_logits=values, answer_probits={s: 0.25 for s in "ABCD"}, max_other_logit=0.0, max_other_probit=0.0,
        logit_difference=logits[best] - max(others), predicted_position=best, tie=False,
        reference_logits=dict(zip("WXYZ", reference)) if reference else {},
    )


@pytest.fixture
def model(random_model):
    return random_model(std=0.4)


class TestLens:
    def test_last_layer_with_ln_reproduces_logits(self, model):
        prompt = prompt_for(model, SOURCE_IDS)
        last = lens_sweep(model, prompt)[-1]
        final = model.next_token_logits(prompt.token_ids)
        np.testing.assert_allclose(list(last.answer_logits.values()), final[list(ANSWER_IDS)], rtol=0, atol=1e-6)
        assert last.predicted_position == prompt.gold_position

    def test_final_residual_projection_is_the_forward_pass(self, random_model, random_prompts):
        model = random_model(std=0.25)
        last = HookSite(model.config.n_layers - 1)
        for ids in random_prompts(100, 24, 32, seed=3):
            trace = model.forward(ids, capture=[last])
            logits, _ = vocab_project(model, trace[last], ProjectionMode.WITH_FINAL_LN)
            np.testing.assert_allclose(logits, trace.final_logits, rtol=0, atol=1e-6)

    def test_raw_projection_is_additive(self, model):
        prompt = prompt_for(model, SOURCE_IDS)
        embed = lens_sweep(model, prompt, [HookSite(EMBED)], ProjectionMode.RAW)[0]
        last = lens_sweep(model, prompt, [HookSite(1)], ProjectionMode.RAW)[0]
        parts = component_lens(model, prompt)
        total = np.array(list(embed.answer_logits.values()))
        for part in parts:
            total += np.array(list(part.answer_logits.values()))
        np.testing.assert_allclose(total, list(last.answer_logits.values()), rtol=1e-5, atol=1e-4)

    def test_default_modes(self, model):
        prompt = prompt_for(model, SOURCE_IDS)
        records = lens_sweep(model, prompt, [HookSite(0), HookSite(0, HookKind.MLP_OUT)])
        assert [r.mode for r in records] == [ProjectionMode.WITH_FINAL_LN, ProjectionMode.RAW]

    def test_probits_sum_to_one(self, model):
        _, probits = vocab_project(model, np.ones(16, dtype=np.float32), ProjectionMode.WITH_FINAL_LN)
        assert probits.sum() == pytest.approx(1.0, abs=1e-5)

    def test_logit_difference(self):
        r = record(0, [5.0, 2.0, 1.0, 0.0])
        assert r.logit_difference == 3.0
        assert r.gold_difference == 3.0
        assert record(0, [5.0, 2.0, 1.0, 0.0], gold=2).gold_difference == -4.0

    def test_row_columns(self):
        row = record(1, [1.0, 2.0, 3.0, 4.0]).to_row(7)
        assert row["instance_id"] == 7
        assert row["sym_4_logit"] == 4.0
        assert row["logit_diff"] == 1.0

    def test_first_positive_layer(self):
        records = [record(0, [0, 1, 0, 0]), record(1, [2, 1, 0, 0]), record(2, [0, 3, 0, 0]), record(3, [4, 1, 0, 0])]
        assert first_positive_layer(records) == 3
        records[2] = record(2, [3, 1, 0, 0])
        assert first_positive_layer(records) == 1
        assert first_positive_layer([record(0, [0, 1, 0, 0])]) is None

    def test_symbol_switch_layer(self):
        records = [
            record(0, [0, 0, 0, 0], reference=[1, 0, 0, 0]),
            record(1, [2, 0, 0, 0], reference=[1, 0, 0, 0]),
            record(2, [3, 0, 0, 0], reference=[1, 0, 0, 0]),
        ]
        assert symbol_switch_layer(records) == 1
        with pytest.raises(ConfigurationError):
            symbol_switch_layer([record(0, [1, 0, 0, 0])])

    def test_average_lens(self):
        runs = [[record(0, [1, 0, 0, 0]), record(1, [3, 0, 0, 0])], [record(0, [3, 0, 0, 0]), record(1, [5, 0, 0, 0])]]
        summaries = average_lens(runs)
        assert [s.site.layer for s in summaries] == [0, 1]
        assert summaries[0].n == 2
        assert summaries[0].mean["sym_1_logit"] == 2.0
        assert summaries[1].std["sym_1_logit"] == 1.0


class TestPatching:
    def test_self_patch_is_identity(self, model):
        prompt = prompt_for(model, SOURCE_IDS)
        result = activation_patch(model, PatchSpec(prompt, prompt, HookSite(0)), require_distinct_answers=False)
        np.testing.assert_array_equal(result.answer_logits, result.clean_answer_logits)
        assert result.shift == 0.0
        assert result.flipped

    def test_last_layer_transfers_the_source_prediction(self, model):
        source, target = prompt_for(model, SOURCE_IDS), prompt_for(model, TARGET_IDS)
        result = activation_patch(model, PatchSpec(source, target, HookSite(1)), require_distinct_answers=False)
        source_logits = model.next_token_logits(SOURCE_IDS)[list(ANSWER_IDS)]
        np.testing.assert_allclose(result.answer_logits, source_logits, atol=1e-5)
        assert result.predicted_position == source.gold_position
        assert result.flipped

    def test_preconditions(self, model):
        source = prompt_for(model, SOURCE_IDS)
        wrong = prompt_for(model, TARGET_IDS)
        wrong = prompt_for(model, TARGET_IDS, gold=(wrong.gold_position + 1) % 4)
        with pytest.raises(ProtocolError) as excinfo:
            activation_patch(model, PatchSpec(source, wrong, HookSite(0)), require_distinct_answers=False)
        assert excinfo.value.condition == "target_correct"
        with pytest.raises(ProtocolError) as excinfo:
            activation_patch(model, PatchSpec(source, source, HookSite(0)))
        assert excinfo.value.condition == "distinct_answers"

    def test_to_rows(self, model):
        prompt = prompt_for(model, SOURCE_IDS)
        result = activation_patch(model, PatchSpec(prompt, prompt, HookSite(0, HookKind.HEAD_OUT, head=1)),
                                  require_distinct_answers=False)
        rows = result.to_rows(3)
        assert [r["metric_space"] for r in rows] == ["logit", "probit"]
        assert rows[0]["head"] == 1
        assert rows[1]["predicted"] == "ABCD"[prompt.gold_position]

    def test_head_sweep_shape(self, model):
        pairs = [(prompt_for(model, SOURCE_IDS), prompt_for(model, TARGET_IDS))]
        table = patch_sweep(model, pairs, HookKind.HEAD_OUT, require_distinct_answers=False)
        assert [(row.layer, row.head) for row in table.rows] == [(0, 0), (0, 1), (1, 0), (1, 1)]
        assert table.n_used == 1
        assert len(table.records) == 4
        assert set(head_sparsity(table)) == {0, 1}

    def test_layer_sweep_ends_at_full_transfer(self, model):
        pairs = [(prompt_for(model, SOURCE_IDS), prompt_for(model, TARGET_IDS))]
        table = patch_sweep(model, pairs, HookKind.LAYER_OUT, require_distinct_answers=False)
        assert table.rows[-1].flip_rate == 1.0
        assert key_layer(table) in (0, 1)

    def test_sweep_skips_and_counts(self, model):
        good = (prompt_for(model, SOURCE_IDS), prompt_for(model, TARGET_IDS))
        target = prompt_for(model, TARGET_IDS)
        bad = (good[0], prompt_for(model, TARGET_IDS, gold=(target.gold_position + 1) % 4))
        table = patch_sweep(model, [good, bad], HookKind.MLP_OUT, require_distinct_answers=False)
        assert table.n_used == 1
        assert table.skipped_reasons == {"target_correct": 1}
        with pytest.raises(EmptyCohortError):
            patch_sweep(model, [bad], HookKind.MLP_OUT, require_distinct_answers=False)

    def test_sweep_rejects_capture_only_family(self, model):
        with pytest.raises(ConfigurationError):
            patch_sweep(model, [], HookKind.ATTN_IN)


def sweep_table(shifts):
    rows = [PatchSweepRow(layer, head, np.zeros(4), np.zeros(4), flip, shift, 1)
            for layer, head, flip, shift in shifts]
    return PatchSweepTable(HookKind.HEAD_OUT, rows, [], 1, 0, {})


def test_key_layer_needs_every_later_layer():
    table = sweep_table([(0, 0, 0.9, 0.0), (1, 0, 0.1, 0.0), (2, 0, 0.8, 0.0), (3, 0, 1.0, 0.0)])
    assert key_layer(table) == 2


def test_head_sparsity_counts_large_shifts():
    table = sweep_table([(0, 0, 0, 10.0), (0, 1, 0, 0.5), (1, 0, 0, -2.0), (1, 1, 0, 1.5)])
    assert head_sparsity(table) == {0: 1, 1: 2}


def test_majority_layer():
    assert majority_layer([2, 3, 3, None, 2, 1]) == 2
    assert majority_layer([3, 3, 1]) == 3
    assert majority_layer([None, None]) is None


def test_heads_for_share():
    values = np.array([[5.0, -3.0, 1.0, 1.0], [1.0, 1.0, 1.0, 1.0], [0.0, 0.0, 0.0, 0.0]])
    heatmap = HeadHeatmap([0, 1, 2], 4, {("sum", "logit"): values}, 3, 0)
    assert heads_for_share(heatmap) == {0: 2, 1: 4, 2: 0}
    assert heads_for_share(heatmap, share=0.5) == {0: 1, 1: 2, 2: 0}
    with pytest.raises(ConfigurationError):
        heads_for_share(heatmap, share=0.0)


class TestHeatmap:
    def test_zeroed_head_contributes_nothing(self, model):
        model.weights["blocks.1.attn.W_O"][8:16] = 0.0
        prompts = [prompt_for(model, SOURCE_IDS), prompt_for(model, TARGET_IDS)]
        heatmap = head_heatmap(model, prompts)
        assert heatmap.values[("sum", "logit")].shape == (2, 2)
        assert heatmap.values[("sum", "logit")][1, 1] == 0.0
        assert heatmap.values[("diff", "logit")][1, 1] == 0.0
        assert heatmap.values[("sum", "probit")][1, 1] == pytest.approx(4 / 24, abs=1e-6)
        assert heatmap.n_instances == 2
        assert len(heatmap.to_rows()) == 2 * 2 * 4

    def test_head_sums_match_mhsa_projection(self, model):
        prompt = prompt_for(model, SOURCE_IDS)
        heatmap = head_heatmap(model, [prompt], layers=[1])
        mhsa = lens_sweep(model, prompt, [HookSite(1, HookKind.MHSA_OUT)], ProjectionMode.RAW)[0]
        expected = sum(mhsa.answer_logits.values())
        assert heatmap.values[("sum", "logit")][0].sum() == pytest.approx(expected, rel=1e-5, abs=1e-4)

    def test_only_correct_prompts_count(self, model):
        prompt = prompt_for(model, SOURCE_IDS)
        wrong = prompt_for(model, SOURCE_IDS, gold=(prompt.gold_position + 1) % 4)
        assert head_heatmap(model, [prompt, wrong]).n_skipped == 1
        with pytest.raises(EmptyCohortError):
            head_heatmap(model, [wrong])
