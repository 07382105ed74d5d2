"""
Interpretability for mcqa-lens
Vocabulary projection (logit lens), activation patching and per-head heatmaps, reported as both logits and probits
"""

import enum
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from config import Config
from errors import ConfigurationError, DimensionError, EmptyCohortError, ProtocolError
from evaluation import restricted_argmax, score_instance
from prompts import NUM_CHOICES, RenderedPrompt
from tensor_ops import layer_norm, softmax_rows
from transformer import HookKind, HookSite, Transformer

logger = logging.getLogger(__name__)


class ProjectionMode(enum.Enum):
    WITH_FINAL_LN = "ln"
    RAW = "raw"


def default_mode(site: HookSite) -> ProjectionMode:
    """Residual states go through the final LN; component outputs stay raw so they add up"""
    return ProjectionMode.WITH_FINAL_LN if site.kind is HookKind.LAYER_OUT else ProjectionMode.RAW


def vocab_project(model: Transformer, state: np.ndarray, mode: ProjectionMode) -> Tuple[np.ndarray, np.ndarray]:
    """Full-vocabulary (logits, probits) for one hidden state"""
    state = np.asarray(state)
    if state.shape != (model.config.d_model,):
        raise DimensionError(f"projected state has shape {state.shape}, expected ({model.config.d_model},)")
    if mode is ProjectionMode.WITH_FINAL_LN:
        state = layer_norm(state[None, :], model.weights["ln_final.gain"], model.weights["ln_final.bias"])[0]
    logits = (state[None, :] @ model.weights["W_U"].T)[0]
    return logits, softmax_rows(logits)


def _max_other(values: np.ndarray, exclude: Sequence[int]) -> float:
    mask = np.ones(values.shape[0], dtype=bool)
    mask[list(exclude)] = False
    return float(np.max(values[mask]))


@dataclass
class ProjectionRecord:
    site: HookSite
    mode: ProjectionMode
    symbols: Tuple[str, ...]
    gold_position: int
    answer_logits: Dict[str, float]
    answer_probits: Dict[str, float]
    max_other_logit: float
    max_other_probit: float
    logit_difference: float
    predicted_position: int
    tie: bool
    reference_logits: Dict[str, float] = field(default_factory=dict)
    reference_probits: Dict[str, float] = field(default_factory=dict)

    @property
    def gold_difference(self) -> float:
        """Gold-symbol logit minus the best other answer-symbol logit (negative when wrong)"""
        values = list(self.answer_logits.values())
        gold = values.pop(self.gold_position)
        return gold - max(values)

    def to_row(self, instance_id) -> dict:
        logits = list(self.answer_logits.values())
        probits = list(self.answer_probits.values())
        row = {"instance_id": instance_id, "layer": self.site.layer, "site": self.site.kind.value, "mode": self.mode.value}
        row.update({f"sym_{i + 1}_logit": logits[i] for i in range(NUM_CHOICES)})
        row.update({f"sym_{i + 1}_probit": probits[i] for i in range(NUM_CHOICES)})
        row.update({"max_other_logit": self.max_other_logit, "max_other_probit": self.max_other_probit,
                    "logit_diff": self.logit_difference})
        return row


def project_record(model: Transformer, state: np.ndarray, site: HookSite, mode: ProjectionMode,
                   prompt: RenderedPrompt, reference_token_ids: Sequence[int] = (),
                   reference_symbols: Sequence[str] = ()) -> ProjectionRecord:
    logits, probits = vocab_project(model, state, mode)
    ids = list(prompt.answer_token_ids)
    answer = logits[ids]
    predicted, tie = restricted_argmax(answer)
    others = np.delete(answer, predicted)
    return ProjectionRecord(
        site=site,
        mode=mode,
        symbols=prompt.symbols,
        gold_position=prompt.gold_position,
        answer_logits={s: float(v) for s, v in zip(prompt.symbols, answer)},
        answer_probits={s: float(v) for s, v in zip(prompt.symbols, probits[ids])},
        max_other_logit=_max_other(logits, ids),
        max_other_probit=_max_other(probits, ids),
        logit_difference=float(answer[predicted] - np.max(others)),
        predicted_position=predicted,
        tie=tie,
        reference_logits={s: float(logits[i]) for s, i in zip(reference_symbols, reference_token_ids)},
        reference_probits={s: float(probits[i]) for s, i in zip(reference_symbols, reference_token_ids)},
    )


def layer_sites(model: Transformer, kind: HookKind = HookKind.LAYER_OUT) -> List[HookSite]:
    return [HookSite(layer, kind) for layer in range(model.config.n_layers)]


def head_sites(model: Transformer, layers: Optional[Iterable[int]] = None) -> List[HookSite]:
    layers = range(model.config.n_layers) if layers is None else layers
    return [HookSite(layer, HookKind.HEAD_OUT, head=h) for layer in layers for h in range(model.config.n_heads)]


def lens_sweep(model: Transformer, prompt: RenderedPrompt, sites: Optional[Sequence[HookSite]] = None,
               mode: Optional[ProjectionMode] = None, reference_token_ids: Sequence[int] = (),
               reference_symbols: Sequence[str] = ()) -> List[ProjectionRecord]:
    """One projection record per site at the prompt's final token"""
    sites = list(sites) if sites is not None else layer_sites(model)
    trace = model.forward(prompt.token_ids, capture=sites)
    return [
        project_record(model, trace[site], site, mode or default_mode(site), prompt, reference_token_ids, reference_symbols)
        for site in sites
    ]


def component_lens(model: Transformer, prompt: RenderedPrompt) -> List[ProjectionRecord]:
    """RAW projections of every layer's MHSA and MLP outputs"""
    sites = layer_sites(model, HookKind.MHSA_OUT) + layer_sites(model, HookKind.MLP_OUT)
    return lens_sweep(model, prompt, sites, ProjectionMode.RAW)


def first_positive_layer(records: Sequence[ProjectionRecord]) -> Optional[int]:
    """Earliest layer from which the gold symbol leads the other answer symbols through the last layer"""
    ordered = sorted(records, key=lambda r: r.site.layer)
    result = None
    for record in reversed(ordered):
        if record.gold_difference <= 0:
            break
        result = record.site.layer
    return result


def symbol_switch_layer(records: Sequence[ProjectionRecord]) -> Optional[int]:
    """Earliest layer from which the prompt's own best symbol outscores every reference symbol, and keeps doing so"""
    ordered = sorted(records, key=lambda r: r.site.layer)
    if not ordered or not ordered[0].reference_logits:
        raise ConfigurationError("symbol_switch_layer needs records projected with reference symbols")
    result = None
    for record in reversed(ordered):
        if max(record.answer_logits.values()) <= max(record.reference_logits.values()):
            break
        result = record.site.layer
    return result


def majority_layer(layers: Iterable[Optional[int]]) -> Optional[int]:
    """Most frequent layer among instances that have one; ties go to the earlier layer"""
    counts = Counter(layer for layer in layers if layer is not None)
    if not counts:
        return None
    return min(counts, key=lambda layer: (-counts[layer], layer))


@dataclass
class LensSummary:
    site: HookSite
    mode: ProjectionMode
    gold_position: Optional[int]
    n: int
    mean: Dict[str, float]
    std: Dict[str, float]


_SUMMARY_FIELDS = (
    [f"sym_{i + 1}_logit" for i in range(NUM_CHOICES)]
    + [f"sym_{i + 1}_probit" for i in range(NUM_CHOICES)]
    + ["max_other_logit", "max_other_probit", "logit_diff"]
)


def average_lens(records_by_instance: Sequence[Sequence[ProjectionRecord]], by_gold_position: bool = True) -> List[LensSummary]:
    """Mean and standard deviation over instances, per site and (optionally) per gold position"""
    groups: Dict[Tuple, List[dict]] = defaultdict(list)
    first: Dict[Tuple, ProjectionRecord] = {}
    for records in records_by_instance:
        for record in records:
            key = (record.site, record.mode, record.gold_position if by_gold_position else None)
            groups[key].append(record.to_row(None))
            first.setdefault(key, record)
    summaries = []
    for key in sorted(groups, key=lambda k: (-1 if k[2] is None else k[2], k[0].kind.value, k[0].layer, k[0].head or 0)):
        rows = groups[key]
        table = np.array([[row[name] for name in _SUMMARY_FIELDS] for row in rows], dtype=np.float64)
        summaries.append(LensSummary(
            site=key[0], mode=key[1], gold_position=key[2], n=len(rows),
            mean=dict(zip(_SUMMARY_FIELDS, table.mean(axis=0).tolist())),
            std=dict(zip(_SUMMARY_FIELDS, table.std(axis=0).tolist())),
        ))
    return summaries


@dataclass(frozen=True)
class PatchSpec:
    source_prompt: RenderedPrompt
    target_prompt: RenderedPrompt
    site: HookSite


@dataclass
class PatchResult:
    site: HookSite
    answer_logits: np.ndarray
    answer_probits: np.ndarray
    predicted_position: int
    predicted_symbol: str
    tie: bool
    source_gold_position: int
    clean_answer_logits: np.ndarray
    final_logits: np.ndarray = field(repr=False, default=None)

    @property
    def flipped(self) -> bool:
        """Prediction moved to the source prompt's gold position"""
        return self.predicted_position == self.source_gold_position

    @property
    def shift(self) -> float:
        """Change of the logit at the source's gold position relative to the clean target run"""
        position = self.source_gold_position
        return float(self.answer_logits[position] - self.clean_answer_logits[position])

    def to_rows(self, instance_id) -> List[dict]:
        rows = []
        for space, values in (("logit", self.answer_logits), ("probit", self.answer_probits)):
            row = {"instance_id": instance_id, "layer": self.site.layer, "site": self.site.kind.value,
                   "head": "" if self.site.head is None else self.site.head, "metric_space": space}
            row.update({f"sym_{i + 1}": float(values[i]) for i in range(NUM_CHOICES)})
            row["predicted"] = self.predicted_symbol
            rows.append(row)
        return rows


def _check_preconditions(source: RenderedPrompt, target: RenderedPrompt, source_logits: np.ndarray,
                         target_logits: np.ndarray, require_distinct_answers: bool) -> None:
    if require_distinct_answers and source.gold_token_id == target.gold_token_id:
        raise ProtocolError("source and target prompts share the same gold answer symbol", "distinct_answers")
    if not score_instance(source_logits, source.answer_token_ids, source.gold_position).correct:
        raise ProtocolError("model does not predict the source prompt correctly", "source_correct")
    if not score_instance(target_logits, target.answer_token_ids, target.gold_position).correct:
        raise ProtocolError("model does not predict the target prompt correctly", "target_correct")


def _patch_result(site: HookSite, final_logits: np.ndarray, target: RenderedPrompt, source: RenderedPrompt,
                  clean_logits: np.ndarray) -> PatchResult:
    ids = list(target.answer_token_ids)
    probits = softmax_rows(final_logits)
    predicted, tie = restricted_argmax(final_logits[ids])
    return PatchResult(
        site=site,
        answer_logits=final_logits[ids].astype(np.float64),
        answer_probits=probits[ids].astype(np.float64),
        predicted_position=predicted,
        predicted_symbol=target.symbols[predicted],
        tie=tie,
        source_gold_position=source.gold_position,
        clean_answer_logits=clean_logits[ids].astype(np.float64),
        final_logits=final_logits,
    )


def activation_patch(model: Transformer, spec: PatchSpec, require_distinct_answers: bool = True) -> PatchResult:
    """Capture spec.site from the source run, substitute it into the target run and rescore"""
    source, target = spec.source_prompt, spec.target_prompt
    source_trace = model.forward(source.token_ids, capture=[spec.site])
    clean_logits = model.next_token_logits(target.token_ids)
    _check_preconditions(source, target, source_trace.final_logits, clean_logits, require_distinct_answers)
    patched = model.forward(target.token_ids, patches={spec.site: source_trace[spec.site]})
    return _patch_result(spec.site, patched.final_logits, target, source, clean_logits)


@dataclass
class PatchSweepRow:
    layer: int
    head: Optional[int]
    mean_logits: np.ndarray
    mean_probits: np.ndarray
    flip_rate: float
    mean_shift: float
    n: int


@dataclass
class PatchSweepTable:
    family: HookKind
    rows: List[PatchSweepRow]
    records: List[Tuple[int, PatchResult]]
    n_used: int
    n_skipped: int
    skipped_reasons: Dict[str, int]


def patch_sweep(model: Transformer, pairs: Sequence[Tuple[RenderedPrompt, RenderedPrompt]], family: HookKind,
                layers: Optional[Sequence[int]] = None, heads: Optional[Sequence[int]] = None,
                require_distinct_answers: bool = True) -> PatchSweepTable:
    """Patch every (layer[, head]) site of one family for each qualifying (source, target) pair and average"""
    if family not in (HookKind.LAYER_OUT, HookKind.MHSA_OUT, HookKind.MLP_OUT, HookKind.HEAD_OUT):
        raise ConfigurationError(f"cannot sweep site family {family.value}")
    layers = list(range(model.config.n_layers)) if layers is None else list(layers)
    if family is HookKind.HEAD_OUT:
        heads = list(range(model.config.n_heads)) if heads is None else list(heads)
        sites = [HookSite(layer, family, head=h) for layer in layers for h in heads]
    else:
        sites = [HookSite(layer, family) for layer in layers]

    per_site: Dict[HookSite, List[PatchResult]] = {site: [] for site in sites}
    records: List[Tuple[int, PatchResult]] = []
    skipped: Counter = Counter()
    used = 0
    for instance_id, (source, target) in enumerate(pairs):
        source_trace = model.forward(source.token_ids, capture=sites)
        clean_logits = model.next_token_logits(target.token_ids)
        try:
            _check_preconditions(source, target, source_trace.final_logits, clean_logits, require_distinct_answers)
        except ProtocolError as e:
            skipped[e.condition] += 1
            continue
        used += 1
        for site in sites:
            patched = model.forward(target.token_ids, patches={site: source_trace[site]})
            result = _patch_result(site, patched.final_logits, target, source, clean_logits)
            per_site[site].append(result)
            records.append((instance_id, result))
    n_skipped = sum(skipped.values())
    if n_skipped:
        logger.warning(f"patch sweep skipped {n_skipped} pair(s): {dict(skipped)}")
    if not used:
        raise EmptyCohortError(f"no pair satisfied the patching preconditions ({dict(skipped)})")

    rows = []
    for site in sites:
        results = per_site[site]
        rows.append(PatchSweepRow(
            layer=site.layer,
            head=site.head,
            mean_logits=np.mean([r.answer_logits for r in results], axis=0),
            mean_probits=np.mean([r.answer_probits for r in results], axis=0),
            flip_rate=float(np.mean([r.flipped for r in results])),
            mean_shift=float(np.mean([r.shift for r in results])),
            n=len(results),
        ))
    logger.info(f"{family.value} patch sweep over {used} pair(s), {len(sites)} site(s)")
    return PatchSweepTable(family, rows, records, used, n_skipped, dict(skipped))


def key_layer(table: PatchSweepTable, threshold: float = Config.FLIP_RATE_THRESHOLD) -> Optional[int]:
    """Earliest layer from which patching flips the prediction to the source answer through the last layer"""
    by_layer: Dict[int, List[float]] = defaultdict(list)
    for row in table.rows:
        by_layer[row.layer].append(row.flip_rate)
    result = None
    for layer in sorted(by_layer, reverse=True):
        if max(by_layer[layer]) < threshold:
            break
        result = layer
    return result


def head_sparsity(table: PatchSweepTable, ratio: float = Config.HEAD_SPARSITY_RATIO) -> Dict[int, int]:
    """Per layer, how many heads shift the source-answer logit by more than `ratio` of the largest shift"""
    if table.family is not HookKind.HEAD_OUT:
        raise ConfigurationError("head_sparsity needs a HEAD_OUT sweep")
    largest = max(abs(row.mean_shift) for row in table.rows)
    counts: Dict[int, int] = defaultdict(int)
    for row in table.rows:
        counts[row.layer] += int(largest > 0 and abs(row.mean_shift) > ratio * largest)
    return dict(sorted(counts.items()))


HEATMAP_METRICS = ("sum", "diff")
HEATMAP_SPACES = ("logit", "probit")


@dataclass
class HeadHeatmap:
    layers: List[int]
    n_heads: int
    values: Dict[Tuple[str, str], np.ndarray]  # (metric, space) -> [len(layers) x n_heads]
    n_instances: int
    n_skipped: int

    def to_rows(self) -> List[dict]:
        rows = []
        for i, layer in enumerate(self.layers):
            for head in range(self.n_heads):
                for metric in HEATMAP_METRICS:
                    for space in HEATMAP_SPACES:
                        rows.append({"layer": layer, "head": head, "metric": metric, "space": space,
                                     "value": float(self.values[(metric, space)][i, head]),
                                     "n_instances": self.n_instances})
        return rows


def _answer_metrics(values: np.ndarray, gold_position: int) -> Tuple[float, float]:
    others = np.delete(values, gold_position)
    return float(values.sum()), float(values[gold_position] - others.max())


def head_heatmap(model: Transformer, prompts: Sequence[RenderedPrompt], layers: Optional[Sequence[int]] = None) -> HeadHeatmap:
    """RAW projections of every head's output: answer-symbol sum and gold-minus-best-other, on correct prompts"""
    if len({p.symbol_set for p in prompts}) > 1:
        raise ConfigurationError("head_heatmap prompts must share one symbol set")
    layers = list(range(model.config.n_layers)) if layers is None else list(layers)
    H = model.config.n_heads
    sites = head_sites(model, layers)
    totals = {(m, s): np.zeros((len(layers), H), dtype=np.float64) for m in HEATMAP_METRICS for s in HEATMAP_SPACES}
    used = 0
    for prompt in prompts:
        trace = model.forward(prompt.token_ids, capture=sites)
        if not score_instance(trace.final_logits, prompt.answer_token_ids, prompt.gold_position).correct:
            continue
        used += 1
        ids = list(prompt.answer_token_ids)
        for site in sites:
            logits, probits = vocab_project(model, trace[site], ProjectionMode.RAW)
            i = layers.index(site.layer)
            for space, values in (("logit", logits[ids]), ("probit", probits[ids])):
                total, diff = _answer_metrics(values.astype(np.float64), prompt.gold_position)
                totals[("sum", space)][i, site.head] += total
                totals[("diff", space)][i, site.head] += diff
    if not used:
        raise EmptyCohortError("no prompt was predicted correctly; the head heatmap would be empty")
    values = {key: total / used for key, total in totals.items()}
    logger.info(f"head heatmap over {used} correct prompt(s) of {len(prompts)}")
    return HeadHeatmap(layers, H, values, used, len(prompts) - used)


def heads_for_share(heatmap: HeadHeatmap, share: float = Config.HEAD_SHARE, metric: str = "sum",
                    space: str = "logit") -> Dict[int, int]:
    """Per layer, the fewest heads whose absolute contributions reach `share` of the layer's absolute total"""
    if not 0.0 < share <= 1.0:
        raise ConfigurationError(f"share must lie in (0, 1], got {share}")
    values = np.abs(heatmap.values[(metric, space)])
    counts = {}
    for i, layer in enumerate(heatmap.layers):
        ranked = np.sort(values[i])[::-1]
        total = float(ranked.sum())
        if total == 0.0:
            counts[layer] = 0
            continue
        needed = int(np.searchsorted(np.cumsum(ranked), share * total)) + 1
        counts[layer] = min(needed, heatmap.n_heads)
    return counts
