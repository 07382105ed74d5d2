"""
Prompt and dataset utilities for mcqa-lens
Word-level vocabulary, the Colors copying task, MCQA JSONL records and formatted-MCQA rendering
"""

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from config import Config
from errors import ConfigurationError, DatasetError

logger = logging.getLogger(__name__)

BOS_TOKEN = "<bos>"
UNK_TOKEN = "<unk>"
NUM_CHOICES = 4

HEADER = "For each of the following phrases, select the best completion."
ANSWER_SUFFIX = "The correct answer is:"

SYMBOL_SETS: Dict[str, Tuple[str, ...]] = {
    "ABCD": ("A", "B", "C", "D"),
    "QZRX": ("Q", "Z", "R", "X"),
    "OEBP": ("O", "E", "B", "P"),
    "NUM1234": ("1", "2", "3", "4"),
}
SYMBOL_SET_ALIASES = {"1234": "NUM1234"}

# Pieces are a word with an optional leading space, one punctuation mark, an underscore
# or one whitespace character; together they cover every character of any string.
_PIECE_RE = re.compile(r" ?[^\W_]+|[^\w\s]|_|\s")

COLORS = ["yellow", "red", "green", "blue", "orange", "brown", "white", "black", "pink", "grey"]

# The first three pairs are the in-context examples; the remaining 105 are the test set.
COLOR_PAIRS: List[Tuple[str, str]] = [
    ("banana", "yellow"), ("grass", "green"), ("snow", "white"),
    ("corn", "yellow"), ("lemon", "yellow"), ("butter", "yellow"), ("sunflower", "yellow"),
    ("canary", "yellow"), ("yolk", "yellow"), ("daffodil", "yellow"), ("mustard", "yellow"),
    ("taxi", "yellow"), ("dandelion", "yellow"),
    ("tomato", "red"), ("strawberry", "red"), ("cherry", "red"), ("blood", "red"),
    ("ruby", "red"), ("firetruck", "red"), ("raspberry", "red"), ("lobster", "red"),
    ("ladybug", "red"), ("radish", "red"), ("brick", "red"),
    ("lime", "green"), ("broccoli", "green"), ("spinach", "green"), ("frog", "green"),
    ("emerald", "green"), ("lettuce", "green"), ("cucumber", "green"), ("pea", "green"),
    ("leaf", "green"), ("pickle", "green"),
    ("sky", "blue"), ("ocean", "blue"), ("sapphire", "blue"), ("blueberry", "blue"),
    ("jeans", "blue"), ("bluebird", "blue"), ("denim", "blue"), ("sea", "blue"),
    ("bluebell", "blue"), ("lagoon", "blue"),
    ("carrot", "orange"), ("pumpkin", "orange"), ("tangerine", "orange"), ("apricot", "orange"),
    ("mango", "orange"), ("tiger", "orange"), ("goldfish", "orange"), ("marigold", "orange"),
    ("papaya", "orange"), ("cantaloupe", "orange"), ("clementine", "orange"),
    ("chocolate", "brown"), ("coffee", "brown"), ("cinnamon", "brown"), ("walnut", "brown"),
    ("mud", "brown"), ("acorn", "brown"), ("chestnut", "brown"), ("soil", "brown"),
    ("cocoa", "brown"), ("hazelnut", "brown"), ("toast", "brown"),
    ("milk", "white"), ("cloud", "white"), ("swan", "white"), ("salt", "white"),
    ("sugar", "white"), ("rice", "white"), ("cotton", "white"), ("chalk", "white"),
    ("paper", "white"), ("pearl", "white"),
    ("coal", "black"), ("crow", "black"), ("ink", "black"), ("tar", "black"),
    ("raven", "black"), ("licorice", "black"), ("soot", "black"), ("panther", "black"),
    ("tire", "black"), ("charcoal", "black"), ("onyx", "black"),
    ("flamingo", "pink"), ("bubblegum", "pink"), ("pig", "pink"), ("salmon", "pink"),
    ("shrimp", "pink"), ("piglet", "pink"), ("tongue", "pink"), ("peony", "pink"),
    ("ham", "pink"), ("grapefruit", "pink"),
    ("elephant", "grey"), ("ash", "grey"), ("concrete", "grey"), ("steel", "grey"),
    ("dolphin", "grey"), ("koala", "grey"), ("pebble", "grey"), ("smoke", "grey"),
    ("granite", "grey"), ("pigeon", "grey"), ("slate", "grey"),
]
NUM_ICL = 3


@dataclass(frozen=True)
class SymbolSet:
    name: str
    symbols: Tuple[str, ...]

    @property
    def answer_tokens(self) -> Tuple[str, ...]:
        return tuple(f" {symbol}" for symbol in self.symbols)


def resolve_symbol_set(name: Union[str, SymbolSet]) -> SymbolSet:
    """Look up a named symbol set or parse custom:WXYZ"""
    if isinstance(name, SymbolSet):
        return name
    if name.startswith("custom:"):
        symbols = tuple(name[len("custom:"):])
        if len(symbols) != NUM_CHOICES or len(set(symbols)) != NUM_CHOICES:
            raise ConfigurationError(f"custom symbol set needs {NUM_CHOICES} distinct characters, got '{name}'")
        if not all(re.fullmatch(r"[^\W_]", symbol) for symbol in symbols):
            raise ConfigurationError(f"custom symbols must be letters or digits, got '{name}'")
        return SymbolSet(name, symbols)
    key = SYMBOL_SET_ALIASES.get(name, name)
    if key not in SYMBOL_SETS:
        raise ConfigurationError(f"unknown symbol set '{name}'")
    return SymbolSet(key, SYMBOL_SETS[key])


def split_pieces(text: str) -> List[str]:
    return _PIECE_RE.findall(text)


class Vocab:
    """Bijective token <-> id mapping; ids are line numbers of the vocabulary file"""

    def __init__(self, tokens: Sequence[str]):
        if list(tokens[:2]) != [BOS_TOKEN, UNK_TOKEN]:
            raise ConfigurationError("vocabulary must start with the reserved <bos> and <unk> tokens")
        if len(set(tokens)) != len(tokens):
            raise ConfigurationError("vocabulary tokens must be unique")
        self.tokens: List[str] = list(tokens)
        self.index: Dict[str, int] = {token: i for i, token in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    @property
    def bos_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    def token_id(self, token: str) -> int:
        if token not in self.index:
            raise ConfigurationError(f"token {token!r} is not in the vocabulary")
        return self.index[token]

    def encode(self, text: str, add_bos: bool = False) -> List[int]:
        ids = [self.index.get(piece, self.unk_id) for piece in split_pieces(text)]
        unknown = ids.count(self.unk_id)
        if unknown:
            logger.debug(f"{unknown} piece(s) mapped to <unk> while encoding")
        return [self.bos_id] + ids if add_bos else ids

    def decode(self, ids: Iterable[int]) -> str:
        return "".join(self.tokens[i] for i in ids if i != self.bos_id)

    def to_text(self) -> str:
        return "".join(_escape(token) + "\n" for token in self.tokens)

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Vocab":
        text = Path(path).read_text(encoding="utf-8")
        lines = text.split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls([_unescape(line) for line in lines])


def _escape(token: str) -> str:
    return token.replace("\\", "\\\\").replace("\n", "\\n").replace("\r", "\\r").replace("\t", "\\t")


def _unescape(line: str) -> str:
    out = []
    chars = iter(line)
    for char in chars:
        if char == "\\":
            nxt = next(chars, "")
            out.append({"n": "\n", "r": "\r", "t": "\t", "\\": "\\"}.get(nxt, nxt))
        else:
            out.append(char)
    return "".join(out)


def build_vocab(corpus: Sequence[str], extra_symbol_sets: Sequence[str] = ()) -> Vocab:
    """Word-level vocabulary in first-occurrence order with template and answer symbols forced in"""
    if not corpus:
        raise ConfigurationError("cannot build a vocabulary from an empty corpus")
    tokens: List[str] = [BOS_TOKEN, UNK_TOKEN]
    seen = set(tokens)

    def add(token: str) -> None:
        if token and token not in seen:
            seen.add(token)
            tokens.append(token)

    add("\n")
    add(" ")
    for name in list(SYMBOL_SETS) + list(extra_symbol_sets):
        for symbol in resolve_symbol_set(name).symbols:
            add(symbol)
            add(f" {symbol}")
    for text in [HEADER, "Phrase: Choices: " + ANSWER_SUFFIX] + list(corpus):
        for piece in split_pieces(text):
            add(piece.lstrip(" ") or piece)
            add(piece)
            if piece[0] != " " and re.fullmatch(r"[^\W_]+", piece):
                add(f" {piece}")
    logger.debug(f"built vocabulary with {len(tokens)} tokens")
    return Vocab(tokens)


@dataclass(frozen=True)
class McqaInstance:
    question: str
    choices: Tuple[str, ...]
    answer_index: int
    context: Optional[str] = None
    line_number: Optional[int] = field(default=None, compare=False, repr=False)  # source JSONL line, if any

    def __post_init__(self):
        object.__setattr__(self, "choices", tuple(self.choices))
        if len(self.choices) != NUM_CHOICES:
            raise DatasetError(f"expected {NUM_CHOICES} choices, got {len(self.choices)}", field="choices")
        if len(set(self.choices)) != NUM_CHOICES:
            raise DatasetError("choices must be pairwise distinct", field="choices")
        if not 0 <= self.answer_index < NUM_CHOICES:
            raise DatasetError(f"answer_index {self.answer_index} out of range", field="answer_index")

    @property
    def answer(self) -> str:
        return self.choices[self.answer_index]

    def to_dict(self) -> dict:
        record = {"question": self.question, "choices": list(self.choices), "answer_index": self.answer_index}
        if self.context is not None:
            record["context"] = self.context
        return record


@dataclass(frozen=True)
class PromptSpec:
    symbol_set: str = "ABCD"
    correct_position: int = 0
    num_shots: int = Config.NUM_SHOTS
    icl_seed: int = Config.ICL_SEED

    def __post_init__(self):
        resolve_symbol_set(self.symbol_set)
        if not 0 <= self.correct_position < NUM_CHOICES:
            raise ConfigurationError(f"correct_position {self.correct_position} out of range")
        if self.num_shots not in (0, NUM_ICL):
            raise ConfigurationError(f"num_shots must be 0 or {NUM_ICL}, got {self.num_shots}")


@dataclass(frozen=True)
class RenderedPrompt:
    text: str
    answer_token_ids: Tuple[int, ...]
    gold_position: int
    symbols: Tuple[str, ...]
    token_ids: Tuple[int, ...] = field(default=(), repr=False)
    symbol_set: str = "ABCD"
    displayed_choices: Tuple[str, ...] = ()

    @property
    def gold_token_id(self) -> int:
        return self.answer_token_ids[self.gold_position]

    @property
    def gold_symbol(self) -> str:
        return self.symbols[self.gold_position]


def permute_choices(inst: McqaInstance, position: int) -> List[str]:
    """Place the correct answer at `position`, keeping the distractors in their original order"""
    others = [choice for i, choice in enumerate(inst.choices) if i != inst.answer_index]
    return others[:position] + [inst.answer] + others[position:]


def _question_block(inst: McqaInstance, displayed: Sequence[str], symbols: Sequence[str]) -> str:
    phrase = f"{inst.context} {inst.question}" if inst.context else inst.question
    lines = [f"Phrase: {phrase}", "Choices:"]
    lines += [f"{symbol}. {choice}" for symbol, choice in zip(symbols, displayed)]
    lines.append(ANSWER_SUFFIX)
    return "\n".join(lines)


def icl_positions(icl_seed: int) -> List[int]:
    """Gold positions for the three in-context examples: 0, 1, 2 shuffled by seed"""
    return [int(p) for p in np.random.default_rng(icl_seed).permutation(NUM_ICL)]


def render_prompt(inst: McqaInstance, spec: PromptSpec, icl: Optional[Sequence[McqaInstance]], vocab: Vocab) -> RenderedPrompt:
    """Render the formatted-MCQA template with the correct answer at spec.correct_position"""
    symbol_set = resolve_symbol_set(spec.symbol_set)
    symbols = symbol_set.symbols
    blocks = [HEADER, ""]
    if spec.num_shots:
        if not icl or len(icl) < spec.num_shots:
            raise ConfigurationError(f"{spec.num_shots}-shot prompt requested without {spec.num_shots} in-context examples")
        for example, position in zip(icl[: spec.num_shots], icl_positions(spec.icl_seed)):
            block = _question_block(example, permute_choices(example, position), symbols)
            blocks.append(f"{block} {symbols[position]}\n")
    displayed = permute_choices(inst, spec.correct_position)
    blocks.append(_question_block(inst, displayed, symbols))
    text = "\n".join(blocks)
    answer_ids = tuple(vocab.token_id(token) for token in symbol_set.answer_tokens)
    return RenderedPrompt(
        text=text,
        answer_token_ids=answer_ids,
        gold_position=spec.correct_position,
        symbols=symbols,
        token_ids=tuple(vocab.encode(text, add_bos=True)),
        symbol_set=symbol_set.name,
        displayed_choices=tuple(displayed),
    )


def consistency_prompts(inst: McqaInstance, icl: Optional[Sequence[McqaInstance]], vocab: Vocab,
                        symbol_sets: Sequence[str], shots: int = Config.NUM_SHOTS,
                        icl_seed: int = Config.ICL_SEED) -> List[RenderedPrompt]:
    """All symbol-set x gold-position variants of one instance"""
    return [
        render_prompt(inst, PromptSpec(name, position, shots, icl_seed), icl, vocab)
        for name in symbol_sets
        for position in range(NUM_CHOICES)
    ]


def render_generative(inst: McqaInstance) -> str:
    """' Corn is yellow. What color is corn?'; the expected continuation is the answer word"""
    if not inst.context:
        raise ConfigurationError("generative rendering needs an instance with a context sentence")
    return f" {inst.context} {inst.question}"


def generative_target(inst: McqaInstance) -> str:
    return f" {inst.answer}"


def render_generative_shots(inst: McqaInstance, icl: Sequence[McqaInstance] = ()) -> str:
    lines = [render_generative(example) + generative_target(example) for example in icl]
    lines.append(render_generative(inst))
    return "\n".join(lines)


def colors_instance(obj: str, color: str, distractors: Sequence[str], answer_index: int) -> McqaInstance:
    choices = list(distractors)
    choices.insert(answer_index, color)
    return McqaInstance(
        question=f"What color is {obj}?",
        choices=tuple(choices),
        answer_index=answer_index,
        context=f"{obj[0].upper()}{obj[1:]} is {color}.",
    )


def _sample_colors_instance(rng: np.random.Generator, obj: str, color: str) -> McqaInstance:
    remaining = [c for c in COLORS if c != color]
    picks = rng.choice(len(remaining), size=NUM_CHOICES - 1, replace=False)
    distractors = [remaining[int(i)] for i in picks]
    return colors_instance(obj, color, distractors, int(rng.integers(NUM_CHOICES)))


def gen_colors(seed: int = Config.DATASET_SEED) -> Tuple[List[McqaInstance], List[McqaInstance]]:
    """Copying-Colors dataset: (3 in-context examples, 105 test instances)"""
    rng = np.random.default_rng(seed)
    instances = [_sample_colors_instance(rng, obj, color) for obj, color in COLOR_PAIRS]
    return instances[:NUM_ICL], instances[NUM_ICL:]


def sample_training_instance(rng: np.random.Generator) -> McqaInstance:
    """Colors instance with an object and a uniformly random color, so the answer must be copied"""
    obj = COLOR_PAIRS[int(rng.integers(len(COLOR_PAIRS)))][0]
    color = COLORS[int(rng.integers(len(COLORS)))]
    return _sample_colors_instance(rng, obj, color)


def colors_corpus() -> List[str]:
    """Every word the Colors task can render"""
    texts = []
    for obj, _ in COLOR_PAIRS:
        texts.append(f"{obj[0].upper()}{obj[1:]} is {obj}. What color is {obj}?")
    texts.append(" ".join(COLORS))
    return texts


def corpus_from_instances(instances: Iterable[McqaInstance]) -> List[str]:
    texts = []
    for inst in instances:
        if inst.context:
            texts.append(inst.context)
        texts.append(inst.question)
        texts.extend(inst.choices)
    return texts


def _validate_record(record, line_number: int) -> McqaInstance:
    if not isinstance(record, dict):
        raise DatasetError("record must be a JSON object", line_number)
    question = record.get("question")
    if not isinstance(question, str) or not question:
        raise DatasetError("'question' must be a non-empty string", line_number, "question")
    choices = record.get("choices")
    if not isinstance(choices, list) or not all(isinstance(c, str) for c in choices):
        raise DatasetError("'choices' must be a list of strings", line_number, "choices")
    if len(choices) != NUM_CHOICES:
        raise DatasetError(f"'choices' must have exactly {NUM_CHOICES} entries, got {len(choices)}", line_number, "choices")
    if len(set(choices)) != NUM_CHOICES:
        raise DatasetError("'choices' must be pairwise distinct", line_number, "choices")
    answer_index = record.get("answer_index")
    if isinstance(answer_index, bool) or not isinstance(answer_index, int) or not 0 <= answer_index < NUM_CHOICES:
        raise DatasetError(f"'answer_index' must be an integer in 0..{NUM_CHOICES - 1}", line_number, "answer_index")
    context = record.get("context")
    if context is not None and not isinstance(context, str):
        raise DatasetError("'context' must be a string when present", line_number, "context")
    return McqaInstance(question, tuple(choices), answer_index, context, line_number)


def load_mcqa_jsonl(path: Union[str, Path]) -> List[McqaInstance]:
    """Load validated MCQA records, one JSON object per line, in file order"""
    instances = []
    with open(path, "rb") as handle:
        for line_number, raw in enumerate(handle, start=1):
            try:
                line = raw.decode("utf-8")
            except UnicodeDecodeError as e:
                raise DatasetError(f"{path}: invalid UTF-8 at byte {e.start}", line_number) from e
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise DatasetError(f"invalid JSON ({e.msg})", line_number) from e
            instances.append(_validate_record(record, line_number))
    logger.info(f"loaded {len(instances)} MCQA instances from {path}")
    return instances


def write_mcqa_jsonl(path: Union[str, Path], instances: Iterable[McqaInstance]) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for inst in instances:
            handle.write(json.dumps(inst.to_dict(), ensure_ascii=False) + "\n")
