"""
Decoder-only transformer for mcqa-lens
Pre-LN blocks, x_mid = x + MHSA(LN1(x)), x_out = x_mid + MLP(LN2(x_mid)), with capture and
patching at layer, MHSA, MLP and per-head output sites
"""

import enum
import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Tuple, Union

import numpy as np

from config import Config
from errors import ConfigurationError, DimensionError, InterventionError
from tensor_ops import check_finite, gelu, layer_norm, matmul, softmax_rows

logger = logging.getLogger(__name__)

Weights = Dict[str, np.ndarray]

EMBED = -1  # layer index of the embedding stream x_0
FINAL = -2  # layer index of the final logits
_MASK_VALUE = -1e9


@dataclass
class ModelConfig:
    n_layers: int
    n_heads: int
    d_model: int
    vocab_size: int
    max_seq: int
    d_ff: Optional[int] = None

    def __post_init__(self):
        if self.d_ff is None:
            self.d_ff = 4 * self.d_model
        self.validate()

    def validate(self) -> None:
        for name, value in asdict(self).items():
            if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
                raise ConfigurationError(f"ModelConfig.{name} must be a positive integer, got {value!r}")
        if self.d_model % self.n_heads:
            raise ConfigurationError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if self.d_model < 2:
            raise ConfigurationError("d_model must be at least 2 for layer normalization")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping) -> "ModelConfig":
        try:
            return cls(**{key: data[key] for key in ("n_layers", "n_heads", "d_model", "vocab_size", "max_seq", "d_ff")})
        except (KeyError, TypeError) as e:
            raise ConfigurationError(f"invalid model config {dict(data)!r}: {e}") from e


def weight_shapes(config: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Canonical parameter names and shapes, in checkpoint order"""
    d, d_ff, V = config.d_model, config.d_ff, config.vocab_size
    shapes = {"tok_embed": (V, d), "pos_embed": (config.max_seq, d)}
    for layer in range(config.n_layers):
        p = f"blocks.{layer}"
        shapes.update({
            f"{p}.ln1.gain": (d,), f"{p}.ln1.bias": (d,),
            f"{p}.attn.W_Q": (d, d), f"{p}.attn.W_K": (d, d), f"{p}.attn.W_V": (d, d),
            f"{p}.attn.W_O": (d, d),
            f"{p}.ln2.gain": (d,), f"{p}.ln2.bias": (d,),
            f"{p}.mlp.W_in": (d, d_ff), f"{p}.mlp.W_out": (d_ff, d),
        })
    shapes.update({"ln_final.gain": (d,), "ln_final.bias": (d,), "W_U": (V, d)})
    return shapes


def init_weights(config: ModelConfig, seed: int, std: float = Config.INIT_STD) -> Weights:
    """Gaussian init (std 0.02), unit LN gains, zero LN biases; deterministic by seed"""
    rng = np.random.default_rng(seed)
    weights: Weights = {}
    for name, shape in weight_shapes(config).items():
        if name.endswith(".gain"):
            weights[name] = np.ones(shape, dtype=np.float32)
        elif name.endswith(".bias"):
            weights[name] = np.zeros(shape, dtype=np.float32)
        else:
            weights[name] = rng.normal(0.0, std, size=shape).astype(np.float32)
    return weights


def validate_weights(config: ModelConfig, weights: Mapping[str, np.ndarray]) -> None:
    expected = weight_shapes(config)
    missing = [name for name in expected if name not in weights]
    if missing:
        raise ConfigurationError(f"weights missing tensors: {', '.join(missing)}")
    for name, shape in expected.items():
        if tuple(weights[name].shape) != shape:
            raise DimensionError(f"weight '{name}' has shape {tuple(weights[name].shape)}, expected {shape}")
        check_finite(f"weight '{name}'", weights[name])


class HookKind(enum.Enum):
    LAYER_OUT = "layer_out"
    MHSA_OUT = "mhsa_out"
    MLP_OUT = "mlp_out"
    HEAD_OUT = "head_out"
    ATTN_IN = "attn_in"  # LN1 output rows consumed by a layer's MHSA (whole context)
    LOGITS = "logits"


@dataclass(frozen=True)
class HookSite:
    layer: int
    kind: HookKind = HookKind.LAYER_OUT
    head: Optional[int] = None
    position: Optional[int] = None  # None means the final token

    def __post_init__(self):
        if self.kind is HookKind.HEAD_OUT and self.head is None:
            raise ConfigurationError("HEAD_OUT sites need a head index")
        if self.kind is not HookKind.HEAD_OUT and self.head is not None:
            raise ConfigurationError(f"{self.kind.value} sites do not take a head index")
        if self.layer == EMBED and self.kind is not HookKind.LAYER_OUT:
            raise ConfigurationError("the embedding stream only has a LAYER_OUT site")
        if (self.layer == FINAL) != (self.kind is HookKind.LOGITS):
            raise ConfigurationError("LOGITS sites live at the FINAL layer and nowhere else")

    @classmethod
    def final(cls, position: Optional[int] = None) -> "HookSite":
        return cls(FINAL, HookKind.LOGITS, position=position)

    def at(self, position: Optional[int]) -> "HookSite":
        return HookSite(self.layer, self.kind, self.head, position)

    @property
    def label(self) -> str:
        layer = {EMBED: "embed", FINAL: "final"}.get(self.layer, str(self.layer))
        head = f".h{self.head}" if self.head is not None else ""
        return f"{layer}.{self.kind.value}{head}"


@dataclass
class TraceCapture:
    """Captured vectors keyed by the requested site, plus logits at every position"""

    captures: Dict[HookSite, np.ndarray] = field(default_factory=dict)
    logits: Optional[np.ndarray] = None

    def __getitem__(self, site: HookSite) -> np.ndarray:
        return self.captures[site]

    def __contains__(self, site: HookSite) -> bool:
        return site in self.captures

    @property
    def final_logits(self) -> np.ndarray:
        return self.logits[-1]


PatchInput = Union[Mapping[HookSite, np.ndarray], Iterable[Tuple[HookSite, np.ndarray]]]


class Transformer:
    """Immutable weights plus the forward pass; safe to share between readers"""

    def __init__(self, config: ModelConfig, weights: Weights):
        validate_weights(config, weights)
        self.config = config
        self.weights = weights

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int) -> "Transformer":
        return cls(config, init_weights(config, seed))

    @property
    def vocab_size(self) -> int:
        return self.config.vocab_size

    def _w(self, layer: int, name: str) -> np.ndarray:
        return self.weights[f"blocks.{layer}.{name}"]

    def _check_layer(self, layer: int) -> None:
        if not 0 <= layer < self.config.n_layers:
            raise InterventionError(f"layer {layer} out of range for a {self.config.n_layers}-layer model")

    def _resolve(self, site: HookSite, seq_len: int) -> Tuple[HookSite, int]:
        position = seq_len - 1 if site.position is None else site.position
        if not 0 <= position < seq_len:
            raise InterventionError(f"site {site.label} at position {position} is beyond a {seq_len}-token sequence")
        if site.layer not in (EMBED, FINAL):
            self._check_layer(site.layer)
        if site.head is not None and not 0 <= site.head < self.config.n_heads:
            raise InterventionError(f"head {site.head} out of range for {self.config.n_heads} heads")
        return site, position

    def head_outputs(self, layer: int, attn_in: np.ndarray) -> np.ndarray:
        """Weighted head contributions W_O,h . Att_h for every position: [H, T, d]"""
        cfg = self.config
        seq_len = attn_in.shape[0]
        H, dh = cfg.n_heads, cfg.d_head

        def split(x: np.ndarray) -> np.ndarray:
            return x.reshape(seq_len, H, dh).transpose(1, 0, 2)

        q = split(matmul(attn_in, self._w(layer, "attn.W_Q")))
        k = split(matmul(attn_in, self._w(layer, "attn.W_K")))
        v = split(matmul(attn_in, self._w(layer, "attn.W_V")))
        scores = np.matmul(q, k.transpose(0, 2, 1)) / q.dtype.type(np.sqrt(dh))
        causal = np.tril(np.ones((seq_len, seq_len), dtype=bool))
        probs = softmax_rows(np.where(causal, scores, q.dtype.type(_MASK_VALUE)))
        z = np.matmul(probs, v)
        w_o = self._w(layer, "attn.W_O").reshape(H, dh, cfg.d_model)
        return np.matmul(z, w_o)

    def decompose_heads(self, layer: int, attn_in: np.ndarray, position: Optional[int] = None) -> np.ndarray:
        """Per-head contributions [H, d] at one position; their sum is that position's MHSA output"""
        self._check_layer(layer)
        attn_in = np.asarray(attn_in)
        if attn_in.ndim != 2 or attn_in.shape[1] != self.config.d_model:
            raise DimensionError(f"attention input must be [T x {self.config.d_model}], got {attn_in.shape}")
        _, position = self._resolve(HookSite(layer, HookKind.ATTN_IN, position=position), attn_in.shape[0])
        return self.head_outputs(layer, attn_in)[:, position, :]

    def forward(self, token_ids, capture: Iterable[HookSite] = (), patches: Optional[PatchInput] = None) -> TraceCapture:
        """Run one sequence, recording `capture` sites and substituting `patches` where they enter the residual sum"""
        cfg = self.config
        ids = np.asarray(token_ids, dtype=np.int64)
        seq_len = int(ids.shape[0]) if ids.ndim == 1 else 0
        if not 1 <= seq_len <= cfg.max_seq:
            raise DimensionError(f"sequence length {seq_len} outside 1..{cfg.max_seq}")
        if ids.min() < 0 or ids.max() >= cfg.vocab_size:
            raise DimensionError(f"token ids must lie in 0..{cfg.vocab_size - 1}")

        wanted: Dict[Tuple[int, HookKind, Optional[int]], List[Tuple[HookSite, int]]] = {}
        for site in capture:
            site, position = self._resolve(site, seq_len)
            wanted.setdefault((site.layer, site.kind, site.head), []).append((site, position))

        swaps: Dict[Tuple[int, HookKind, Optional[int]], List[Tuple[int, np.ndarray]]] = {}
        items = patches.items() if isinstance(patches, Mapping) else (patches or ())
        for site, vector in items:
            if site.kind in (HookKind.ATTN_IN, HookKind.LOGITS):
                raise InterventionError(f"{site.kind.value} sites can be captured but not patched")
            site, position = self._resolve(site, seq_len)
            vector = np.asarray(vector)
            if vector.shape != (cfg.d_model,):
                raise DimensionError(f"patch for {site.label} has shape {vector.shape}, expected ({cfg.d_model},)")
            check_finite(f"patch for {site.label}", vector)
            swaps.setdefault((site.layer, site.kind, site.head), []).append((position, vector))

        trace = TraceCapture()

        def visit(layer: int, kind: HookKind, rows: np.ndarray, head: Optional[int] = None) -> np.ndarray:
            for position, vector in swaps.get((layer, kind, head), ()):
                rows[position] = vector
            for site, position in wanted.get((layer, kind, head), ()):
                trace.captures[site] = rows.copy() if kind is HookKind.ATTN_IN else rows[position].copy()
            return rows

        x = self.weights["tok_embed"][ids] + self.weights["pos_embed"][:seq_len]
        x = visit(EMBED, HookKind.LAYER_OUT, x)
        for layer in range(cfg.n_layers):
            attn_in = layer_norm(x, self._w(layer, "ln1.gain"), self._w(layer, "ln1.bias"))
            visit(layer, HookKind.ATTN_IN, attn_in)
            heads = self.head_outputs(layer, attn_in)
            for head in range(cfg.n_heads):
                visit(layer, HookKind.HEAD_OUT, heads[head], head)
            attn_out = heads[0].copy()
            for head in range(1, cfg.n_heads):
                attn_out += heads[head]
            attn_out = visit(layer, HookKind.MHSA_OUT, attn_out)
            x = x + attn_out
            mlp_in = layer_norm(x, self._w(layer, "ln2.gain"), self._w(layer, "ln2.bias"))
            hidden = gelu(matmul(mlp_in, self._w(layer, "mlp.W_in")))
            mlp_out = visit(layer, HookKind.MLP_OUT, matmul(hidden, self._w(layer, "mlp.W_out")))
            x = visit(layer, HookKind.LAYER_OUT, x + mlp_out)
        final = layer_norm(x, self.weights["ln_final.gain"], self.weights["ln_final.bias"])
        trace.logits = check_finite("logits", matmul(final, self.weights["W_U"].T))
        visit(FINAL, HookKind.LOGITS, trace.logits)
        return trace

    def next_token_logits(self, token_ids) -> np.ndarray:
        return self.forward(token_ids).final_logits

    def greedy_next_token(self, token_ids) -> int:
        return int(np.argmax(self.next_token_logits(token_ids)))
