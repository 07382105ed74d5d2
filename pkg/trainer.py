"""
Trainer for mcqa-lens
Toy next-token training on the Colors task with explicit numpy backward formulas, AdamW,
checkpoint series and the cross-checkpoint sweeps built on them
"""

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from checkpoint_utils import load_model, save_checkpoint
from config import Config
from errors import ConfigurationError, NumericError, TrainingError
from evaluation import eval_consistency, mean_logit_difference
from interpretability import average_lens, lens_sweep
from prompts import (
    NUM_CHOICES,
    McqaInstance,
    PromptSpec,
    Vocab,
    consistency_prompts,
    generative_target,
    render_generative_shots,
    render_prompt,
    sample_training_instance,
)
from tensor_ops import gelu, gelu_grad, log_softmax, softmax_rows
from transformer import ModelConfig, Transformer, Weights, init_weights, weight_shapes

logger = logging.getLogger(__name__)

_MASK_VALUE = -1e9
SWEEP_ANALYSES = ("consistency", "logit_difference_curve", "lens")


@dataclass
class TrainConfig:
    steps: int = Config.TRAIN_STEPS
    batch_size: int = Config.BATCH_SIZE
    learning_rate: float = Config.LEARNING_RATE
    warmup_steps: int = Config.WARMUP_STEPS
    beta1: float = Config.ADAM_BETA1
    beta2: float = Config.ADAM_BETA2
    adam_eps: float = Config.ADAM_EPS
    weight_decay: float = Config.WEIGHT_DECAY
    seed: int = 0
    checkpoint_every: int = Config.CHECKPOINT_EVERY
    generative_fraction: float = Config.GENERATIVE_FRACTION
    shots: int = Config.NUM_SHOTS
    symbol_sets: Tuple[str, ...] = tuple(Config.CONSISTENCY_SYMBOL_SETS)

    def __post_init__(self):
        self.symbol_sets = tuple(self.symbol_sets)
        self.validate()

    def validate(self) -> None:
        for name in ("steps", "batch_size", "checkpoint_every"):
            value = getattr(self, name)
            if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
                raise ConfigurationError(f"TrainConfig.{name} must be a positive integer, got {value!r}")
        # a zero learning rate is a frozen run, used to check the update path
        if self.learning_rate < 0 or self.warmup_steps < 0 or self.weight_decay < 0 or self.seed < 0:
            raise ConfigurationError("learning_rate, warmup_steps, weight_decay and seed must be non-negative")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1) or self.adam_eps <= 0:
            raise ConfigurationError("Adam betas must lie in (0, 1) and eps must be positive")
        if self.steps % self.checkpoint_every:
            raise ConfigurationError(f"checkpoint_every {self.checkpoint_every} does not divide steps {self.steps}")
        if not 0.0 <= self.generative_fraction <= 1.0:
            raise ConfigurationError(f"generative_fraction must lie in [0, 1], got {self.generative_fraction}")
        if self.shots not in (0, 3):
            raise ConfigurationError(f"shots must be 0 or 3, got {self.shots}")
        if not self.symbol_sets:
            raise ConfigurationError("at least one training symbol set is required")

    def to_dict(self) -> dict:
        data = asdict(self)
        data["symbol_sets"] = list(self.symbol_sets)
        return data

    @classmethod
    def from_dict(cls, data: Mapping) -> "TrainConfig":
        try:
            return cls(**dict(data))
        except TypeError as e:
            raise ConfigurationError(f"invalid train config: {e}") from e


def _ln_forward(x: np.ndarray, gain: np.ndarray, bias: np.ndarray):
    mean = np.mean(x, axis=-1, keepdims=True)
    centered = x - mean
    std = np.sqrt(np.mean(centered * centered, axis=-1, keepdims=True) + x.dtype.type(Config.LAYER_NORM_EPS))
    normed = centered / std
    return normed * gain + bias, (normed, std)


def _ln_backward(dy: np.ndarray, gain: np.ndarray, cache) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    normed, std = cache
    dnormed = dy * gain
    dx = (dnormed - np.mean(dnormed, axis=-1, keepdims=True)
          - normed * np.mean(dnormed * normed, axis=-1, keepdims=True)) / std
    return dx, np.sum(dy * normed, axis=0), np.sum(dy, axis=0)


def _forward(weights: Weights, config: ModelConfig, ids: np.ndarray):
    T = ids.shape[0]
    H, dh, d = config.n_heads, config.d_head, config.d_model
    dtype = weights["W_U"].dtype
    scale = dtype.type(np.sqrt(dh))
    causal = np.tril(np.ones((T, T), dtype=bool))

    def split(x: np.ndarray) -> np.ndarray:
        return x.reshape(T, H, dh).transpose(1, 0, 2)

    x = weights["tok_embed"][ids] + weights["pos_embed"][:T]
    caches = []
    for layer in range(config.n_layers):
        w = {name[len(f"blocks.{layer}."):]: value for name, value in weights.items() if name.startswith(f"blocks.{layer}.")}
        attn_in, ln1 = _ln_forward(x, w["ln1.gain"], w["ln1.bias"])
        q, k, v = (split(attn_in @ w[f"attn.W_{p}"]) for p in "QKV")
        scores = np.where(causal, np.matmul(q, k.transpose(0, 2, 1)) / scale, dtype.type(_MASK_VALUE))
        probs = softmax_rows(scores)
        z = np.matmul(probs, v).transpose(1, 0, 2).reshape(T, d)
        x_mid = x + z @ w["attn.W_O"]
        mlp_in, ln2 = _ln_forward(x_mid, w["ln2.gain"], w["ln2.bias"])
        pre = mlp_in @ w["mlp.W_in"]
        hidden = gelu(pre)
        x = x_mid + hidden @ w["mlp.W_out"]
        caches.append({"w": w, "attn_in": attn_in, "ln1": ln1, "q": q, "k": k, "v": v, "probs": probs, "z": z,
                       "mlp_in": mlp_in, "ln2": ln2, "pre": pre, "hidden": hidden})
    final, ln_final = _ln_forward(x, weights["ln_final.gain"], weights["ln_final.bias"])
    return final @ weights["W_U"].T, final, ln_final, caches


def sequence_loss(weights: Weights, config: ModelConfig, token_ids: Sequence[int]) -> float:
    """Mean next-token cross-entropy over every position of one sequence"""
    ids = _check_sequence(config, token_ids)
    logits = _forward(weights, config, ids)[0]
    logp = log_softmax(logits[:-1])
    return float(-np.mean(logp[np.arange(ids.shape[0] - 1), ids[1:]]))


def _check_sequence(config: ModelConfig, token_ids: Sequence[int]) -> np.ndarray:
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.ndim != 1 or not 2 <= ids.shape[0] <= config.max_seq:
        raise ConfigurationError(f"training sequences need 2..{config.max_seq} tokens, got {ids.shape}")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise ConfigurationError(f"token ids must lie in 0..{config.vocab_size - 1}")
    return ids


def loss_and_grads(weights: Weights, config: ModelConfig, token_ids: Sequence[int]) -> Tuple[float, Weights]:
    """Loss of one sequence and its gradient for every parameter tensor, in the weights' dtype"""
    ids = _check_sequence(config, token_ids)
    T = ids.shape[0]
    H, dh, d = config.n_heads, config.d_head, config.d_model
    logits, final, ln_final, caches = _forward(weights, config, ids)
    scale = logits.dtype.type(np.sqrt(dh))

    targets = ids[1:]
    rows = np.arange(T - 1)
    logp = log_softmax(logits[:-1])
    loss = float(-np.mean(logp[rows, targets]))
    dlogits = np.zeros_like(logits)
    dlogits[:-1] = softmax_rows(logits[:-1])
    dlogits[rows, targets] -= 1
    dlogits /= logits.dtype.type(T - 1)

    grads: Weights = {name: np.zeros_like(value) for name, value in weights.items()}
    grads["W_U"] = dlogits.T @ final
    dx, grads["ln_final.gain"], grads["ln_final.bias"] = _ln_backward(dlogits @ weights["W_U"], weights["ln_final.gain"], ln_final)

    def merge(t: np.ndarray) -> np.ndarray:
        return t.transpose(1, 0, 2).reshape(T, d)

    for layer in reversed(range(config.n_layers)):
        c = caches[layer]
        w = c["w"]
        p = f"blocks.{layer}."
        grads[p + "mlp.W_out"] = c["hidden"].T @ dx
        dpre = (dx @ w["mlp.W_out"].T) * gelu_grad(c["pre"])
        grads[p + "mlp.W_in"] = c["mlp_in"].T @ dpre
        dmid, grads[p + "ln2.gain"], grads[p + "ln2.bias"] = _ln_backward(dpre @ w["mlp.W_in"].T, w["ln2.gain"], c["ln2"])
        dx_mid = dx + dmid

        grads[p + "attn.W_O"] = c["z"].T @ dx_mid
        dz = (dx_mid @ w["attn.W_O"].T).reshape(T, H, dh).transpose(1, 0, 2)
        probs = c["probs"]
        dprobs = np.matmul(dz, c["v"].transpose(0, 2, 1))
        dv = np.matmul(probs.transpose(0, 2, 1), dz)
        dscores = probs * (dprobs - np.sum(dprobs * probs, axis=-1, keepdims=True)) / scale
        dq = np.matmul(dscores, c["k"])
        dk = np.matmul(dscores.transpose(0, 2, 1), c["q"])
        dattn_in = np.zeros_like(dx)
        for name, dproj in (("attn.W_Q", merge(dq)), ("attn.W_K", merge(dk)), ("attn.W_V", merge(dv))):
            grads[p + name] = c["attn_in"].T @ dproj
            dattn_in += dproj @ w[name].T
        dres, grads[p + "ln1.gain"], grads[p + "ln1.bias"] = _ln_backward(dattn_in, w["ln1.gain"], c["ln1"])
        dx = dx_mid + dres

    np.add.at(grads["tok_embed"], ids, dx)
    grads["pos_embed"][:T] = dx
    return loss, grads


def finite_difference(weights: Weights, config: ModelConfig, token_ids: Sequence[int], name: str,
                      index: Tuple[int, ...], h: float) -> float:
    """Central difference (L(w + h) - L(w - h)) / 2h of the loss along one coordinate"""
    shifted = {key: value.copy() for key, value in weights.items()}
    original = shifted[name][index]
    shifted[name][index] = original + h
    plus = sequence_loss(shifted, config, token_ids)
    shifted[name][index] = original - h
    minus = sequence_loss(shifted, config, token_ids)
    return (plus - minus) / (2 * h)


def grad_check(config: ModelConfig, seed: int, h: float = Config.GRAD_CHECK_STEP,
               samples: int = Config.GRAD_CHECK_SAMPLES, seq_len: int = 8) -> float:
    """Max relative error between analytic and central-difference gradients, in float64"""
    rng = np.random.default_rng(seed)
    weights = {name: value.astype(np.float64) for name, value in init_weights(config, seed).items()}
    # unit gains and zero biases make LN gradients degenerate; jitter them
    for name in weights:
        if name.endswith((".gain", ".bias")):
            weights[name] = weights[name] + rng.normal(0.0, 0.1, size=weights[name].shape)
    token_ids = rng.integers(config.vocab_size, size=min(seq_len, config.max_seq))
    _, grads = loss_and_grads(weights, config, token_ids)

    worst = 0.0
    for name, shape in weight_shapes(config).items():
        rows = shape[0] if name != "pos_embed" else len(token_ids)
        for _ in range(samples):
            index = (int(rng.integers(rows)),) + tuple(int(rng.integers(n)) for n in shape[1:])
            analytic = float(grads[name][index])
            numeric = finite_difference(weights, config, token_ids, name, index, h)
            error = abs(analytic - numeric) / max(abs(analytic) + abs(numeric), 1e-4)
            if error > worst:
                logger.debug(f"grad check {name}{list(index)}: analytic {analytic:.6e} numeric {numeric:.6e}")
            worst = max(worst, error)
    logger.info(f"grad check max relative error {worst:.3e} (h={h})")
    return worst


class AdamW:
    """Adam with decoupled weight decay on matrices; LN gains and biases are not decayed"""

    def __init__(self, weights: Weights, config: TrainConfig):
        self.config = config
        self.t = 0
        self.m = {name: np.zeros_like(value) for name, value in weights.items()}
        self.v = {name: np.zeros_like(value) for name, value in weights.items()}

    def step(self, weights: Weights, grads: Weights, lr: float) -> None:
        cfg = self.config
        self.t += 1
        correction1 = 1.0 - cfg.beta1 ** self.t
        correction2 = 1.0 - cfg.beta2 ** self.t
        for name, grad in grads.items():
            m = self.m[name] = cfg.beta1 * self.m[name] + (1.0 - cfg.beta1) * grad
            v = self.v[name] = cfg.beta2 * self.v[name] + (1.0 - cfg.beta2) * grad * grad
            update = (m / correction1) / (np.sqrt(v / correction2) + cfg.adam_eps)
            if weights[name].ndim == 2:
                update = update + cfg.weight_decay * weights[name]
            weights[name] -= (lr * update).astype(weights[name].dtype)


def learning_rate_at(config: TrainConfig, step: int) -> float:
    """Linear warmup over warmup_steps, then constant; step counts from 1"""
    if config.warmup_steps and step < config.warmup_steps:
        return config.learning_rate * step / config.warmup_steps
    return config.learning_rate


def training_sequence(rng: np.random.Generator, config: TrainConfig, vocab: Vocab,
                      icl: Sequence[McqaInstance]) -> List[int]:
    """One generative or formatted-MCQA sequence with a fresh object-color pairing"""
    inst = sample_training_instance(rng)
    examples = list(icl[: config.shots]) if config.shots else []
    if rng.random() < config.generative_fraction:
        return vocab.encode(render_generative_shots(inst, examples) + generative_target(inst), add_bos=True)
    spec = PromptSpec(
        symbol_set=config.symbol_sets[int(rng.integers(len(config.symbol_sets)))],
        correct_position=int(rng.integers(NUM_CHOICES)),
        num_shots=config.shots,
        icl_seed=int(rng.integers(2 ** 31)),
    )
    prompt = render_prompt(inst, spec, examples, vocab)
    return list(prompt.token_ids) + [prompt.gold_token_id]


@dataclass
class SeriesEntry:
    step: int
    checkpoint: str
    consistency: dict
    mean_logit_difference: Optional[float]
    n_correct: int

    @property
    def min_over_sets(self) -> float:
        return self.consistency["min_over_sets"]


@dataclass
class CheckpointSeries:
    """Checkpoints of one run in step order, each with its evaluation snapshot"""

    entries: List[SeriesEntry] = field(default_factory=list)
    train_config: Optional[dict] = None
    model_config: Optional[dict] = None

    def __post_init__(self):
        steps = [entry.step for entry in self.entries]
        if any(b <= a for a, b in zip(steps, steps[1:])):
            raise ConfigurationError(f"checkpoint steps must be strictly increasing, got {steps}")

    def append(self, entry: SeriesEntry) -> None:
        if self.entries and entry.step <= self.entries[-1].step:
            raise ConfigurationError(f"step {entry.step} does not follow step {self.entries[-1].step}")
        self.entries.append(entry)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def steps(self) -> List[int]:
        return [entry.step for entry in self.entries]

    def to_json(self, base: Optional[Path] = None) -> dict:
        """Checkpoint paths are written relative to `base` when they live under it"""
        checkpoints = []
        for entry in self.entries:
            raw = asdict(entry)
            if base is not None and Path(entry.checkpoint).parent.resolve() == base.resolve():
                raw["checkpoint"] = Path(entry.checkpoint).name
            checkpoints.append(raw)
        return {"train_config": self.train_config, "model_config": self.model_config, "checkpoints": checkpoints}

    def save(self, path: Union[str, Path]) -> None:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(path.parent), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "CheckpointSeries":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        base = Path(path).parent
        entries = []
        for raw in data["checkpoints"]:
            entry = SeriesEntry(**raw)
            if not Path(entry.checkpoint).is_absolute():
                entry.checkpoint = str(base / entry.checkpoint)
            entries.append(entry)
        return cls(entries, data.get("train_config"), data.get("model_config"))


def evaluate_snapshot(model: Transformer, vocab: Vocab, icl: Sequence[McqaInstance], test: Sequence[McqaInstance],
                      shots: int = Config.NUM_SHOTS,
                      symbol_sets: Sequence[str] = tuple(Config.CONSISTENCY_SYMBOL_SETS)) -> Tuple[dict, Optional[float], int]:
    """Consistency summary plus mean final-layer logit difference on correct reference-set predictions"""
    report = eval_consistency(model, test, vocab, shots, icl, symbol_sets)
    prompts = [p for inst in test for p in consistency_prompts(inst, icl, vocab, [Config.REFERENCE_SYMBOL_SET], shots)]
    mean_diff, n_correct = mean_logit_difference(model, prompts)
    return report.to_json(), mean_diff, n_correct


def train(config: TrainConfig, model_config: ModelConfig, vocab: Vocab, icl: Sequence[McqaInstance],
          test: Sequence[McqaInstance], out_dir: Union[str, Path]) -> CheckpointSeries:
    """Train from a seeded init, writing checkpoints, the training log and the series manifest into out_dir"""
    if model_config.vocab_size != len(vocab):
        raise ConfigurationError(f"model vocab_size {model_config.vocab_size} != vocabulary size {len(vocab)}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    vocab.save(out_dir / Config.VOCAB_FILE)

    weights = init_weights(model_config, config.seed)
    optimizer = AdamW(weights, config)
    rng = np.random.default_rng([config.seed, 1])
    series = CheckpointSeries(train_config=config.to_dict(), model_config=model_config.to_dict())

    def snapshot(step: int) -> None:
        path = out_dir / f"step_{step:06d}.bin"
        save_checkpoint(weights, model_config, path)
        consistency, mean_diff, n_correct = evaluate_snapshot(
            Transformer(model_config, weights), vocab, icl, test, config.shots, config.symbol_sets)
        series.append(SeriesEntry(step, str(path), consistency, mean_diff, n_correct))
        series.save(out_dir / Config.SERIES_FILE)
        logger.info(f"step {step}: min-over-sets {consistency['min_over_sets']:.3f}, mean logit diff {mean_diff}")

    snapshot(0)
    last_good = 0
    with open(out_dir / Config.TRAIN_LOG_FILE, "w", newline="", encoding="utf-8") as log_handle:
        writer = csv.writer(log_handle)
        writer.writerow(["step", "loss", "lr"])
        progress = tqdm(range(1, config.steps + 1), desc="train", unit="step")
        for step in progress:
            lr = learning_rate_at(config, step)
            total: Dict[str, np.ndarray] = {name: np.zeros_like(value) for name, value in weights.items()}
            losses = []
            try:
                for _ in range(config.batch_size):
                    sequence = training_sequence(rng, config, vocab, icl)
                    loss, grads = loss_and_grads(weights, model_config, sequence)
                    losses.append(loss)
                    for name, grad in grads.items():
                        total[name] += grad
            except NumericError as e:
                raise TrainingError(f"non-finite activations at step {step}: {e}", last_good) from e
            loss = float(np.mean(losses))
            if not np.isfinite(loss):
                raise TrainingError(f"loss became {loss} at step {step}", last_good)
            optimizer.step(weights, {name: grad / config.batch_size for name, grad in total.items()}, lr)
            last_good = step
            writer.writerow([step, f"{loss:.6f}", f"{lr:.6g}"])
            progress.set_postfix(loss=f"{loss:.4f}", lr=f"{lr:.2e}")
            if step % config.checkpoint_every == 0:
                log_handle.flush()
                snapshot(step)
    logger.info(f"training finished after {config.steps} steps; {len(series)} checkpoints in {out_dir}")
    return series


def transition_window(series: CheckpointSeries, low: float = 0.35, high: float = 0.9) -> Optional[Tuple[int, int]]:
    """(last step at or below `low`, first step at or above `high`) around the first rise in min-over-sets accuracy"""
    accuracies = [entry.min_over_sets for entry in series.entries]
    above = next((i for i, acc in enumerate(accuracies) if acc >= high), None)
    if above is None:
        return None
    below = next((i for i in range(above - 1, -1, -1) if accuracies[i] <= low), None)
    if below is None:
        return None
    return series.entries[below].step, series.entries[above].step


def first_post_transition(series: CheckpointSeries, low: float = 0.35, high: float = 0.9) -> Optional[SeriesEntry]:
    window = transition_window(series, low, high)
    if window is None:
        return None
    return next(entry for entry in series.entries if entry.step == window[1])


def sweep_checkpoints(series: CheckpointSeries, analysis: str, vocab: Vocab, icl: Sequence[McqaInstance],
                      test: Sequence[McqaInstance], shots: int = Config.NUM_SHOTS,
                      symbol_sets: Sequence[str] = tuple(Config.CONSISTENCY_SYMBOL_SETS),
                      cohort_size: int = Config.COHORT_SIZE) -> List[dict]:
    """Re-run one analysis at every checkpoint from the saved files and tabulate it by step"""
    if analysis not in SWEEP_ANALYSES:
        raise ConfigurationError(f"unknown sweep analysis '{analysis}', expected one of {', '.join(SWEEP_ANALYSES)}")
    if len(series) < 2:
        raise ConfigurationError(f"a checkpoint sweep needs at least 2 checkpoints, got {len(series)}")
    rows = []
    for entry in series.entries:
        model = load_model(entry.checkpoint)
        if analysis == "consistency":
            report = eval_consistency(model, test, vocab, shots, icl, symbol_sets)
            row = {"step": entry.step, "min_over_sets": report.min_over_sets,
                   "mean_over_sets": report.mean_over_sets, "max_over_sets": report.max_over_sets}
            row.update({f"acc_{name}": acc.mean for name, acc in report.per_set.items()})
            rows.append(row)
        elif analysis == "logit_difference_curve":
            prompts = [p for inst in test for p in consistency_prompts(inst, icl, vocab, [Config.REFERENCE_SYMBOL_SET], shots)]
            mean_diff, n_correct = mean_logit_difference(model, prompts)
            rows.append({"step": entry.step, "mean_logit_diff": "" if mean_diff is None else mean_diff, "n_correct": n_correct})
        else:
            prompts = [p for inst in test[:cohort_size]
                       for p in consistency_prompts(inst, icl, vocab, [Config.REFERENCE_SYMBOL_SET], shots)]
            summaries = average_lens([lens_sweep(model, prompt) for prompt in prompts], by_gold_position=False)
            for summary in summaries:
                rows.append({"step": entry.step, "layer": summary.site.layer,
                             "mean_logit_diff": summary.mean["logit_diff"], "n": summary.n})
        logger.info(f"{analysis} at step {entry.step} done")
    return rows
