#!/usr/bin/env python3
"""
Command-line entry point for mcqa-lens
Every subcommand writes its manifest first, then CSV tables and SVG plots under --out
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from checkpoint_utils import checkpoint_sha256, load_model
from config import Config
from errors import ConfigurationError, EmptyCohortError, MCQALensError
from evaluation import eval_consistency, eval_generative
from interpretability import (
    ProjectionMode,
    average_lens,
    first_positive_layer,
    head_heatmap,
    head_sparsity,
    heads_for_share,
    key_layer,
    lens_sweep,
    majority_layer,
    patch_sweep,
    symbol_switch_layer,
)
from prompts import (
    NUM_CHOICES,
    McqaInstance,
    PromptSpec,
    RenderedPrompt,
    Vocab,
    build_vocab,
    colors_corpus,
    gen_colors,
    load_mcqa_jsonl,
    render_prompt,
    resolve_symbol_set,
    write_mcqa_jsonl,
)
from report_utils import (
    CONSISTENCY_HEADER,
    HEATMAP_HEADER,
    LENS_HEADER,
    PATCH_HEADER,
    RunManifest,
    RunReportPDF,
    emit_plots,
    read_csv,
    write_csv,
)
from trainer import (
    SWEEP_ANALYSES,
    CheckpointSeries,
    TrainConfig,
    first_post_transition,
    grad_check,
    sweep_checkpoints,
    train,
    transition_window,
)
from transformer import EMBED, HookKind, HookSite, ModelConfig, Transformer

logger = logging.getLogger(__name__)

PATCH_SWEEP_HEADER = ["source_position", "target_position", "layer", "head", "flip_rate", "mean_shift", "n"]
ICL_FILE = "colors_icl.jsonl"
TEST_FILE = "colors_test.jsonl"
SITE_KINDS = {kind.value: kind for kind in (HookKind.LAYER_OUT, HookKind.MHSA_OUT, HookKind.MLP_OUT, HookKind.HEAD_OUT)}
PRESETS = {"small": Config.SMALL_MODEL, "reference": Config.REFERENCE_MODEL}


def parse_layers(text: str) -> List[int]:
    """'a..b' inclusive, or a single layer index"""
    try:
        if ".." in text:
            start, end = (int(part) for part in text.split("..", 1))
            return list(range(start, end + 1))
        return [int(text)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a layer range like 0..3, got '{text}'")


def parse_positions(text: str) -> List[int]:
    if text == "all":
        return list(range(NUM_CHOICES))
    try:
        position = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'all' or 0..{NUM_CHOICES - 1}, got '{text}'")
    if not 0 <= position < NUM_CHOICES:
        raise argparse.ArgumentTypeError(f"position {position} out of range 0..{NUM_CHOICES - 1}")
    return [position]


def parse_symbols(text: str) -> str:
    try:
        resolve_symbol_set(text)
    except ConfigurationError as e:
        raise argparse.ArgumentTypeError(str(e))
    return text


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--out", required=True, type=Path, help="Experiment directory (created if missing)")
    parser.add_argument("--seed", type=int, default=Config.DATASET_SEED, help="Dataset / model seed")
    parser.add_argument("--pdf", action="store_true", help="Also write a PDF summary of the run tables")
    parser.add_argument("--verbose", action="store_true", help="Debug logging")


def _add_model_inputs(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--ckpt", required=True, type=Path, help="Checkpoint file; vocab.txt must sit beside it")
    parser.add_argument("--dataset", type=Path, help="MCQA JSONL (default: Colors test split for --seed)")
    parser.add_argument("--icl", type=Path, help="JSONL with the in-context examples (default: Colors ICL split)")
    parser.add_argument("--shots", type=int, choices=[0, 3], default=Config.NUM_SHOTS)
    parser.add_argument("--cohort-size", type=int, default=None, help="Use only the first N instances")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog=Config.TOOL_NAME, description="Interpretability toolkit for formatted MCQA")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-colors", help="Write the Copying-Colors dataset and its vocabulary")
    _add_common(p)

    p = sub.add_parser("train", help="Train a toy model on Colors and save a checkpoint series")
    _add_common(p)
    p.add_argument("--preset", choices=sorted(PRESETS), default="reference")
    p.add_argument("--steps", type=int, default=Config.TRAIN_STEPS)
    p.add_argument("--checkpoint-every", type=int, default=Config.CHECKPOINT_EVERY)
    p.add_argument("--batch-size", type=int, default=Config.BATCH_SIZE)
    p.add_argument("--shots", type=int, choices=[0, 3], default=Config.NUM_SHOTS)
    p.add_argument("--cohort-size", type=int, default=None, help="Evaluate snapshots on the first N test instances")

    p = sub.add_parser("grad-check", help="Compare analytic and finite-difference gradients on the tiny config")
    _add_common(p)

    p = sub.add_parser("eval", help="Consistency accuracy over positions and symbol sets")
    _add_common(p)
    _add_model_inputs(p)
    p.add_argument("--symbols", type=parse_symbols, action="append", help="Repeatable; default ABCD, QZRX, 1234")
    p.add_argument("--oebp", action="store_true", help="Add the OEBP analysis column (never part of the min)")

    p = sub.add_parser("eval-generative", help="Greedy generative accuracy")
    _add_common(p)
    _add_model_inputs(p)

    p = sub.add_parser("lens", help="Vocabulary projection of every layer at the final token")
    _add_common(p)
    _add_model_inputs(p)
    p.add_argument("--symbols", type=parse_symbols, default=Config.REFERENCE_SYMBOL_SET)
    p.add_argument("--positions", type=parse_positions, default=parse_positions("all"))
    p.add_argument("--site", choices=["layer_out", "mhsa_out", "mlp_out"], default="layer_out")
    p.add_argument("--mode", choices=[m.value for m in ProjectionMode], default=None)
    p.add_argument("--layers", type=parse_layers, default=None)

    for name, helptext in (("patch", "Patch one source->target recipe across layers"),
                           ("patch-sweep", "Patch every ordered pair of gold positions across layers")):
        p = sub.add_parser(name, help=helptext)
        _add_common(p)
        _add_model_inputs(p)
        p.add_argument("--site", choices=sorted(SITE_KINDS), default="layer_out")
        p.add_argument("--layers", type=parse_layers, default=None)
        p.add_argument("--head", type=int, action="append", help="Restrict head_out sweeps to these heads")
        p.add_argument("--source-symbols", type=parse_symbols, default=Config.REFERENCE_SYMBOL_SET)
        p.add_argument("--target-symbols", type=parse_symbols, default=Config.REFERENCE_SYMBOL_SET)
        if name == "patch":
            p.add_argument("--source-position", type=int, choices=range(NUM_CHOICES), required=True)
            p.add_argument("--target-position", type=int, choices=range(NUM_CHOICES), required=True)

    p = sub.add_parser("heads", help="Per-head RAW projections as layer x head heatmaps")
    _add_common(p)
    _add_model_inputs(p)
    p.add_argument("--symbols", type=parse_symbols, default=Config.REFERENCE_SYMBOL_SET)
    p.add_argument("--positions", type=parse_positions, default=parse_positions("all"))
    p.add_argument("--layers", type=parse_layers, default=None)

    p = sub.add_parser("sweep-checkpoints", help="Re-run an analysis over a training run's checkpoints")
    _add_common(p)
    p.add_argument("--series", required=True, type=Path, help="series.json written by train")
    p.add_argument("--analysis", choices=SWEEP_ANALYSES, default="consistency")
    p.add_argument("--dataset", type=Path)
    p.add_argument("--icl", type=Path)
    p.add_argument("--shots", type=int, choices=[0, 3], default=Config.NUM_SHOTS)
    p.add_argument("--cohort-size", type=int, default=Config.COHORT_SIZE)
    return parser


class Run:
    """One experiment directory: manifest first, then tables, plots and the optional PDF"""

    def __init__(self, args: argparse.Namespace, outputs: Sequence[str], checkpoint: Optional[Path] = None):
        self.args = args
        self.out: Path = args.out
        self.out.mkdir(parents=True, exist_ok=True)
        flags = {key: value for key, value in vars(args).items() if key not in ("func", "command")}
        self.manifest = RunManifest(
            command=args.command,
            flags=json.loads(json.dumps(flags, default=str)),
            dataset_seed=getattr(args, "seed", None),
            checkpoint_sha256=checkpoint_sha256(checkpoint) if checkpoint else None,
            outputs=[str(self.out / name) for name in outputs],
        )
        self.manifest.write(self.out)
        self.tables: Dict[str, List[dict]] = {}
        self.symbols: Dict[str, Sequence[str]] = {}

    def table(self, name: str, header: Sequence[str], rows: List[dict], plot: bool = True,
              symbols: Optional[Sequence[str]] = None) -> None:
        write_csv(self.out / f"{name}.csv", header, rows)
        if plot:
            self.tables[name] = rows
        if symbols:
            self.symbols[name] = list(symbols)

    def json(self, name: str, data) -> None:
        (self.out / f"{name}.json").write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def finish(self, checkpoint: Optional[Path] = None) -> None:
        self.manifest.outputs += [str(path) for path in emit_plots(self.tables, self.out, self.symbols)]
        if checkpoint is not None:
            self.manifest.checkpoint_sha256 = checkpoint_sha256(checkpoint)
        if self.args.pdf:
            tables = {path.stem: read_csv(path) for path in sorted(self.out.glob("*.csv"))}
            pdf = RunReportPDF().build(self.out / "report.pdf", self.manifest, tables)
            self.manifest.outputs.append(str(pdf))
        self.manifest.write(self.out)


def _load_inputs(args) -> Tuple[Transformer, Vocab, List[McqaInstance], List[McqaInstance]]:
    model = load_model(args.ckpt)
    vocab_path = args.ckpt.parent / Config.VOCAB_FILE
    if not vocab_path.exists():
        raise ConfigurationError(f"no {Config.VOCAB_FILE} next to checkpoint {args.ckpt}")
    vocab = Vocab.load(vocab_path)
    if len(vocab) != model.vocab_size:
        raise ConfigurationError(f"vocabulary has {len(vocab)} tokens but the model expects {model.vocab_size}")
    icl, test = _load_dataset(args, args.cohort_size)
    return model, vocab, icl, test


def _load_dataset(args, cohort_size: Optional[int] = None) -> Tuple[List[McqaInstance], List[McqaInstance]]:
    default_icl, default_test = gen_colors(args.seed)
    icl = load_mcqa_jsonl(args.icl) if args.icl else default_icl
    test = load_mcqa_jsonl(args.dataset) if args.dataset else default_test
    if cohort_size is not None:
        if cohort_size <= 0:
            raise ConfigurationError(f"--cohort-size must be positive, got {cohort_size}")
        test = test[:cohort_size]
    if not test:
        raise ConfigurationError("the dataset has no instances")
    return icl, test


def _render(instances, icl, vocab, symbols: str, position: int, shots: int) -> List[RenderedPrompt]:
    return [render_prompt(inst, PromptSpec(symbols, position, shots), icl, vocab) for inst in instances]


def cmd_gen_colors(args) -> int:
    run = Run(args, [ICL_FILE, TEST_FILE, Config.VOCAB_FILE])
    icl, test = gen_colors(args.seed)
    write_mcqa_jsonl(args.out / ICL_FILE, icl)
    write_mcqa_jsonl(args.out / TEST_FILE, test)
    vocab = build_vocab(colors_corpus())
    vocab.save(args.out / Config.VOCAB_FILE)
    run.finish()
    print(f"Colors dataset: {len(icl)} in-context + {len(test)} test instances, vocabulary of {len(vocab)} tokens")
    return 0


def cmd_train(args) -> int:
    run = Run(args, [Config.SERIES_FILE, Config.TRAIN_LOG_FILE, Config.VOCAB_FILE])
    config = TrainConfig(steps=args.steps, checkpoint_every=args.checkpoint_every, seed=args.seed,
                         batch_size=args.batch_size, shots=args.shots)
    vocab = build_vocab(colors_corpus())
    model_config = ModelConfig(vocab_size=len(vocab), **PRESETS[args.preset])
    icl, test = gen_colors(args.seed)
    if args.cohort_size is not None:
        if args.cohort_size <= 0:
            raise ConfigurationError(f"--cohort-size must be positive, got {args.cohort_size}")
        test = test[: args.cohort_size]

    print("=" * 60)
    print(f"{Config.TOOL_NAME} - training {args.preset} model")
    print(f"  Layers/heads/width: {model_config.n_layers}/{model_config.n_heads}/{model_config.d_model}")
    print(f"  Steps: {config.steps} (checkpoint every {config.checkpoint_every})")
    print("=" * 60)

    series = train(config, model_config, vocab, icl, test, args.out)
    curve = [{"step": e.step, "min_over_sets": e.min_over_sets,
              "mean_logit_diff": "" if e.mean_logit_difference is None else e.mean_logit_difference}
             for e in series.entries]
    run.table("accuracy_curve", ["step", "min_over_sets", "mean_logit_diff"], curve)
    run.tables["train_log"] = read_csv(args.out / Config.TRAIN_LOG_FILE)

    window = transition_window(series)
    post = first_post_transition(series)
    final = series.entries[-1]
    run.json("training_summary", {
        "transition_window": list(window) if window else None,
        "first_post_transition_step": post.step if post else None,
        "first_post_transition_logit_diff": post.mean_logit_difference if post else None,
        "final_step": final.step,
        "final_min_over_sets": final.min_over_sets,
        "final_logit_diff": final.mean_logit_difference,
    })
    run.finish(checkpoint=Path(final.checkpoint))
    print(f"Final min-over-sets accuracy: {final.min_over_sets:.3f}; transition window: {window}")
    return 0


def cmd_grad_check(args) -> int:
    run = Run(args, ["grad_check.json"])
    model_config = ModelConfig(vocab_size=32, **Config.TINY_MODEL)
    error = grad_check(model_config, args.seed)
    run.json("grad_check", {"max_relative_error": error, "h": Config.GRAD_CHECK_STEP,
                            "model_config": model_config.to_dict(), "seed": args.seed})
    run.finish()
    print(f"Max relative gradient error: {error:.3e}")
    if error > 1e-3:
        logger.error(f"gradient check failed: {error:.3e} > 1e-3")
        return 1
    return 0


def cmd_eval(args) -> int:
    run = Run(args, ["consistency.csv", "consistency.json"], args.ckpt)
    model, vocab, icl, test = _load_inputs(args)
    symbol_sets = args.symbols or Config.CONSISTENCY_SYMBOL_SETS
    analysis = Config.ANALYSIS_SYMBOL_SETS if args.oebp else ()
    report = eval_consistency(model, test, vocab, args.shots, icl, symbol_sets, analysis)
    run.table("consistency", CONSISTENCY_HEADER, report.to_rows(), plot=False)
    run.json("consistency", report.to_json())
    run.finish()
    print(f"Consistency over {report.n_instances} instances: min {report.min_over_sets:.3f}, "
          f"mean {report.mean_over_sets:.3f}, max {report.max_over_sets:.3f}")
    return 0


def cmd_eval_generative(args) -> int:
    run = Run(args, ["generative.json"], args.ckpt)
    model, vocab, icl, test = _load_inputs(args)
    accuracy = eval_generative(model, test, vocab, args.shots, icl)
    run.json("generative", {"accuracy": accuracy, "n_instances": len(test), "shots": args.shots})
    run.finish()
    print(f"Generative accuracy over {len(test)} instances: {accuracy:.3f}")
    return 0


def cmd_lens(args) -> int:
    run = Run(args, ["lens.csv", "lens_summary.json"], args.ckpt)
    model, vocab, icl, test = _load_inputs(args)
    kind = HookKind(args.site)
    layers = args.layers if args.layers is not None else list(range(model.config.n_layers))
    sites = [HookSite(layer, kind) for layer in layers]
    if kind is HookKind.LAYER_OUT and args.layers is None:
        sites = [HookSite(EMBED)] + sites
    mode = ProjectionMode(args.mode) if args.mode else None
    reference = resolve_symbol_set(Config.REFERENCE_SYMBOL_SET)
    own = resolve_symbol_set(args.symbols)
    track_reference = own.name != reference.name
    reference_ids = [vocab.token_id(token) for token in reference.answer_tokens] if track_reference else []

    rows, all_records, first_layers, switch_layers = [], [], [], []
    for position in args.positions:
        for i, prompt in enumerate(_render(test, icl, vocab, args.symbols, position, args.shots)):
            records = lens_sweep(model, prompt, sites, mode, reference_ids,
                                 reference.symbols if track_reference else ())
            all_records.append(records)
            rows += [record.to_row(f"{i}/{position}") for record in records]
            layer_records = [r for r in records if r.site.layer != EMBED]
            first_layers.append(first_positive_layer(layer_records))
            if track_reference:
                switch_layers.append(symbol_switch_layer(layer_records))
    run.table("lens", LENS_HEADER, rows, symbols=own.symbols)
    summaries = average_lens(all_records)
    run.json("lens_summary", {
        "first_positive_layer": first_layers,
        "first_positive_layer_majority": majority_layer(first_layers),
        "symbol_switch_layer": switch_layers if track_reference else None,
        "per_gold_position": [
            {"layer": s.site.layer, "site": s.site.kind.value, "gold_position": s.gold_position, "n": s.n,
             "mean": s.mean, "std": s.std}
            for s in summaries
        ],
    })
    run.finish()
    print(f"Lens over {len(all_records)} prompts at {len(sites)} sites")
    return 0


def _patch_inputs(args):
    kind = SITE_KINDS[args.site]
    if args.head and kind is not HookKind.HEAD_OUT:
        raise ConfigurationError("--head only applies to --site head_out")
    return kind, args.layers, args.head


def cmd_patch(args) -> int:
    run = Run(args, ["patch.csv", "patch_summary.json"], args.ckpt)
    model, vocab, icl, test = _load_inputs(args)
    kind, layers, heads = _patch_inputs(args)
    sources = _render(test, icl, vocab, args.source_symbols, args.source_position, args.shots)
    targets = _render(test, icl, vocab, args.target_symbols, args.target_position, args.shots)
    table = patch_sweep(model, list(zip(sources, targets)), kind, layers, heads)
    rows = [row for instance_id, result in table.records for row in result.to_rows(instance_id)]
    run.table("patch", PATCH_HEADER, rows, symbols=resolve_symbol_set(args.target_symbols).symbols)
    summary = {
        "key_layer": key_layer(table),
        "n_used": table.n_used,
        "n_skipped": table.n_skipped,
        "skipped_reasons": table.skipped_reasons,
        "sites": [{"layer": r.layer, "head": r.head, "flip_rate": r.flip_rate, "mean_shift": r.mean_shift, "n": r.n}
                  for r in table.rows],
    }
    if kind is HookKind.HEAD_OUT:
        summary["head_sparsity"] = head_sparsity(table)
    run.json("patch_summary", summary)
    run.finish()
    print(f"Patched {table.n_used} pair(s), skipped {table.n_skipped}; key layer {summary['key_layer']}")
    return 0


def cmd_patch_sweep(args) -> int:
    run = Run(args, ["patch_sweep.csv"], args.ckpt)
    model, vocab, icl, test = _load_inputs(args)
    kind, layers, heads = _patch_inputs(args)
    rows = []
    for source_position in range(NUM_CHOICES):
        sources = _render(test, icl, vocab, args.source_symbols, source_position, args.shots)
        for target_position in range(NUM_CHOICES):
            if source_position == target_position:
                continue
            targets = _render(test, icl, vocab, args.target_symbols, target_position, args.shots)
            try:
                table = patch_sweep(model, list(zip(sources, targets)), kind, layers, heads)
            except EmptyCohortError as e:
                logger.warning(f"{source_position}->{target_position}: {e}")
                continue
            rows += [{"source_position": source_position, "target_position": target_position, "layer": r.layer,
                      "head": "" if r.head is None else r.head, "flip_rate": r.flip_rate,
                      "mean_shift": r.mean_shift, "n": r.n} for r in table.rows]
    if not rows:
        raise EmptyCohortError("no position pair had a qualifying instance")
    run.table("patch_sweep", PATCH_SWEEP_HEADER, rows, plot=False)
    run.finish()
    print(f"Patch sweep wrote {len(rows)} row(s)")
    return 0


def cmd_heads(args) -> int:
    run = Run(args, ["heatmap.csv", "heads_summary.json"], args.ckpt)
    model, vocab, icl, test = _load_inputs(args)
    prompts = [p for position in args.positions for p in _render(test, icl, vocab, args.symbols, position, args.shots)]
    heatmap = head_heatmap(model, prompts, args.layers)
    run.table("heatmap", HEATMAP_HEADER, heatmap.to_rows())
    run.json("heads_summary", {
        "heads_for_share": heads_for_share(heatmap),
        "share": Config.HEAD_SHARE,
        "n_instances": heatmap.n_instances,
        "n_skipped": heatmap.n_skipped,
    })
    run.finish()
    print(f"Head heatmap over {heatmap.n_instances} correct prompt(s), {heatmap.n_skipped} skipped")
    return 0


def cmd_sweep_checkpoints(args) -> int:
    name = f"sweep_{args.analysis}"
    run = Run(args, [f"{name}.csv"])
    series = CheckpointSeries.load(args.series)
    vocab = Vocab.load(args.series.parent / Config.VOCAB_FILE)
    icl, test = _load_dataset(args)
    rows = sweep_checkpoints(series, args.analysis, vocab, icl, test, args.shots, cohort_size=args.cohort_size)
    run.table(name, list(rows[0]), rows)
    run.finish()
    print(f"Swept {len(series)} checkpoints ({args.analysis})")
    return 0


COMMANDS = {
    "gen-colors": cmd_gen_colors,
    "train": cmd_train,
    "grad-check": cmd_grad_check,
    "eval": cmd_eval,
    "eval-generative": cmd_eval_generative,
    "lens": cmd_lens,
    "patch": cmd_patch,
    "patch-sweep": cmd_patch_sweep,
    "heads": cmd_heads,
    "sweep-checkpoints": cmd_sweep_checkpoints,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else Config.LOG_LEVEL, format=Config.LOG_FORMAT)
    try:
        return COMMANDS[args.command](args)
    except (MCQALensError, OSError) as e:
        logger.error(f"{args.command} failed: {e}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
