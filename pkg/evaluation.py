"""
Evaluation for mcqa-lens
Restricted-argmax scoring over the answer symbols and the position x symbol-set consistency protocol
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from config import Config
from errors import ConfigurationError, DatasetError
from prompts import (
    NUM_CHOICES,
    McqaInstance,
    RenderedPrompt,
    Vocab,
    consistency_prompts,
    resolve_symbol_set,
    generative_target,
    render_generative_shots,
)

logger = logging.getLogger(__name__)


class LanguageModel(Protocol):
    def next_token_logits(self, token_ids: Sequence[int]) -> np.ndarray:
        ...


@dataclass(frozen=True)
class InstanceScore:
    predicted_position: int
    correct: bool
    tie: bool
    greedy_token_id: int
    greedy_is_answer: bool


def restricted_argmax(answer_scores: Sequence[float]) -> Tuple[int, bool]:
    """Index of the best answer score, lowest displayed position on ties, plus the tie flag"""
    scores = np.asarray(answer_scores)
    best = int(np.argmax(scores))
    return best, bool(np.count_nonzero(scores == scores[best]) > 1)


def score_instance(final_logits: np.ndarray, answer_token_ids: Sequence[int], gold_position: int) -> InstanceScore:
    """Restricted argmax over the four answer-symbol logits"""
    ids = [int(i) for i in answer_token_ids]
    if len(ids) != NUM_CHOICES or len(set(ids)) != NUM_CHOICES:
        raise ConfigurationError(f"expected {NUM_CHOICES} distinct answer token ids, got {ids}")
    logits = np.asarray(final_logits)
    predicted, tie = restricted_argmax(logits[ids])
    greedy = int(np.argmax(logits))
    return InstanceScore(predicted, predicted == gold_position, tie, greedy, greedy in ids)


@dataclass
class SymbolSetAccuracy:
    symbol_set: str
    position_accuracy: List[float]
    position_counts: List[int]

    @property
    def mean(self) -> float:
        return float(np.mean(self.position_accuracy))


@dataclass
class ConsistencyReport:
    per_set: Dict[str, SymbolSetAccuracy]
    n_instances: int
    n_ties: int
    analysis_sets: Dict[str, SymbolSetAccuracy] = field(default_factory=dict)
    greedy_disagreements: int = 0

    @property
    def min_over_sets(self) -> float:
        return min(acc.mean for acc in self.per_set.values())

    @property
    def mean_over_sets(self) -> float:
        return float(np.mean([acc.mean for acc in self.per_set.values()]))

    @property
    def max_over_sets(self) -> float:
        return max(acc.mean for acc in self.per_set.values())

    def to_json(self) -> dict:
        def block(sets: Dict[str, SymbolSetAccuracy]) -> dict:
            return {
                name: {"position_accuracy": acc.position_accuracy, "position_counts": acc.position_counts, "mean": acc.mean}
                for name, acc in sets.items()
            }

        return {
            "per_set": block(self.per_set),
            "analysis_sets": block(self.analysis_sets),
            "min_over_sets": self.min_over_sets,
            "mean_over_sets": self.mean_over_sets,
            "max_over_sets": self.max_over_sets,
            "n_instances": self.n_instances,
            "n_ties": self.n_ties,
            "greedy_disagreements": self.greedy_disagreements,
        }

    def to_rows(self) -> List[dict]:
        rows = []
        for acc in list(self.per_set.values()) + list(self.analysis_sets.values()):
            for position in range(NUM_CHOICES):
                rows.append({
                    "symbol_set": acc.symbol_set,
                    "position": position,
                    "accuracy": acc.position_accuracy[position],
                    "n": acc.position_counts[position],
                })
        return rows


def eval_consistency(model: LanguageModel, instances: Sequence[McqaInstance], vocab: Vocab,
                     shots: int = Config.NUM_SHOTS, icl: Optional[Sequence[McqaInstance]] = None,
                     symbol_sets: Sequence[str] = tuple(Config.CONSISTENCY_SYMBOL_SETS),
                     analysis_sets: Sequence[str] = (), icl_seed: int = Config.ICL_SEED) -> ConsistencyReport:
    """Score every instance under each symbol set with the gold answer at each of the four positions"""
    if not instances:
        raise ConfigurationError("eval_consistency needs at least one instance")
    names = list(symbol_sets) + [name for name in analysis_sets if name not in symbol_sets]
    correct = {name: [0] * NUM_CHOICES for name in names}
    caller_names = {resolve_symbol_set(name).name: name for name in names}
    ties = 0
    disagreements = 0
    for inst in instances:
        for prompt in consistency_prompts(inst, icl, vocab, names, shots, icl_seed):
            score = score_instance(model.next_token_logits(prompt.token_ids), prompt.answer_token_ids, prompt.gold_position)
            correct[caller_names[prompt.symbol_set]][prompt.gold_position] += score.correct
            ties += score.tie
            disagreements += score.greedy_token_id != prompt.answer_token_ids[score.predicted_position]
    if ties:
        logger.warning(f"{ties} prompt(s) had tied answer logits; broken toward the lowest position")
    n = len(instances)

    def accuracy(name: str) -> SymbolSetAccuracy:
        return SymbolSetAccuracy(name, [c / n for c in correct[name]], [n] * NUM_CHOICES)

    report = ConsistencyReport(
        per_set={name: accuracy(name) for name in symbol_sets},
        n_instances=n,
        n_ties=ties,
        analysis_sets={name: accuracy(name) for name in names if name not in symbol_sets},
        greedy_disagreements=disagreements,
    )
    logger.info(f"consistency over {n} instances: min-over-sets {report.min_over_sets:.3f}")
    return report


def eval_generative(model: LanguageModel, instances: Sequence[McqaInstance], vocab: Vocab,
                    shots: int = Config.NUM_SHOTS, icl: Optional[Sequence[McqaInstance]] = None) -> float:
    """Fraction of instances whose first greedy token is the answer word"""
    if shots and (not icl or len(icl) < shots):
        raise ConfigurationError(f"{shots}-shot generative evaluation needs {shots} in-context examples")
    examples = list(icl[:shots]) if shots else []
    hits = 0
    for inst in instances:
        target_text = generative_target(inst)
        if target_text not in vocab:
            raise DatasetError(f"answer {inst.answer!r} is not a single vocabulary token", inst.line_number, "choices")
        target = vocab.index[target_text]
        token_ids = vocab.encode(render_generative_shots(inst, examples), add_bos=True)
        hits += int(np.argmax(model.next_token_logits(token_ids))) == target
    accuracy = hits / len(instances) if instances else 0.0
    logger.info(f"generative accuracy {accuracy:.3f} over {len(instances)} instances")
    return accuracy


def mean_logit_difference(model: LanguageModel, prompts: Sequence[RenderedPrompt]) -> Tuple[Optional[float], int]:
    """Mean final-layer logit difference over the prompts the model answers correctly, and how many those were"""
    diffs = []
    for prompt in prompts:
        logits = np.asarray(model.next_token_logits(prompt.token_ids))
        answer = logits[list(prompt.answer_token_ids)]
        score = score_instance(logits, prompt.answer_token_ids, prompt.gold_position)
        if score.correct:
            diffs.append(float(answer[score.predicted_position] - np.max(np.delete(answer, score.predicted_position))))
    if not diffs:
        return None, 0
    return float(np.mean(diffs)), len(diffs)
