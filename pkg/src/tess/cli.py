"""``tess`` command-line entry point.

Exit codes: 0 success, 2 input/config error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .data_io import (CheckpointError, DataError, corpus_sequences, iter_documents,
                      load_checkpoint, load_classification_dataset, save_checkpoint)
from .finetune import (GRID_EPOCHS, GRID_LRS, FinetuneConfig, SweepConfig, evaluate,
                       fewshot_sweep, finetune)
from .model import ConfigError, ModelConfig, build_model, count_parameters
from .pretrain import NonFiniteLossError, PretrainConfig, pretrain_loop
from .tokenizer import VocabError, Vocabulary, train_vocab

log = logging.getLogger("tess")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


class InputError(Exception):
    pass


# ------------------------------------------------------------------ helpers


def _read_json(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as e:
        raise InputError(f"cannot read config {path}: {e.strerror}") from e
    except json.JSONDecodeError as e:
        raise InputError(f"{path}: invalid JSON ({e.msg} at line {e.lineno})") from e


def load_run_config(path: str | None) -> tuple[ModelConfig, PretrainConfig]:
    """``{"model": {...}, "pretrain": {...}}``; a bare object is read as the model section."""
    raw = _read_json(path) if path else {}
    if "model" not in raw and "pretrain" not in raw:
        raw = {"model": raw}
    try:
        return (ModelConfig.from_dict(raw.get("model", {})),
                PretrainConfig.from_dict(raw.get("pretrain", {})))
    except (ValueError, TypeError) as e:
        raise InputError(f"{path}: {e}") from e


def _floats(s: str) -> list[float]:
    try:
        return [float(x) for x in s.split(",") if x]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {s!r}") from e


def _ints(s: str) -> list[int]:
    try:
        return [int(x) for x in s.split(",") if x]
    except ValueError as e:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from e


def _sizes(s: str) -> list[int | str]:
    out: list[int | str] = []
    for x in s.split(","):
        if x == "full":
            out.append(x)
        elif x:
            try:
                out.append(int(x))
            except ValueError as e:
                raise argparse.ArgumentTypeError(f"bad size {x!r}") from e
    return out


def write_manifest(path: Path, subcommand: str, argv: list[str], config: dict, seed,
                   inputs: dict, outputs: list[str]) -> None:
    manifest = {
        "tool": "tess",
        "version": __version__,
        "subcommand": subcommand,
        "argv": argv,
        "config": config,
        "seed": seed,
        "inputs": inputs,
        "outputs": outputs,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _vocab(path: str) -> Vocabulary:
    try:
        return Vocabulary.load(path)
    except OSError as e:
        raise InputError(f"cannot read vocabulary {path}: {e.strerror}") from e


def _dataset(path: str):
    if not Path(path).is_file():
        raise InputError(f"dataset not found: {path}")
    return load_classification_dataset(path)


# ------------------------------------------------------------------ subcommands


def cmd_build_vocab(args, argv) -> int:
    if not Path(args.corpus).is_dir():
        raise InputError(f"corpus directory not found: {args.corpus}")
    vocab = train_vocab(iter_documents(args.corpus), args.size)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    vocab.save(out)
    write_manifest(out.with_name(out.name + ".manifest.json"), "build-vocab", argv,
                   {"size": args.size}, None, {"corpus": args.corpus}, [str(out)])
    print(f"wrote {len(vocab)} tokens to {out}")
    return EXIT_OK


def cmd_pretrain(args, argv) -> int:
    mcfg, pcfg = load_run_config(args.config)
    for flag, key in (("steps", "total_steps"), ("batch", "batch_size"), ("lr", "peak_lr"),
                      ("seed", "seed"), ("micro_batch", "micro_batch"),
                      ("log_every", "log_every"), ("checkpoint_every", "checkpoint_every")):
        val = getattr(args, flag)
        if val is not None:
            setattr(pcfg, key, val)
    vocab = _vocab(args.vocab)
    mcfg.vocab_size = len(vocab)
    try:
        mcfg.validate()
        pcfg.validate()
    except ValueError as e:
        raise InputError(str(e)) from e
    seqs = corpus_sequences(args.corpus, vocab, mcfg.max_positions)
    if not seqs:
        raise InputError(f"corpus {args.corpus} produced no training sequences")
    out = Path(args.out)
    state, start = None, 0
    if args.resume:
        model, state, extra = load_checkpoint(args.resume, expected_config=mcfg)
        start = int(extra.get("step", 0))
    else:
        model = build_model(mcfg, seed=pcfg.seed)
    res = pretrain_loop(model, seqs, pcfg, out_dir=out, state=state, start_step=start)
    save_checkpoint(model, out / "model.ckpt", state=res.state,
                    extra={"step": res.final_step, "pretrain": pcfg.to_dict()})
    outputs = [str(p) for p in res.checkpoints] + [str(out / "loss.csv"), str(out / "model.ckpt")]
    write_manifest(out / "manifest.json", "pretrain", argv,
                   {"model": mcfg.to_dict(), "pretrain": pcfg.to_dict()}, pcfg.seed,
                   {"config": args.config, "corpus": args.corpus, "vocab": args.vocab,
                    "resume": args.resume}, outputs)
    if res.loss_log:
        print(f"final loss {res.loss_log[-1][2]:.4f} after {res.final_step} steps")
    return EXIT_OK


def _load_model(path: str):
    if not Path(path).is_file():
        raise InputError(f"checkpoint not found: {path}")
    model, _, _ = load_checkpoint(path)
    return model


def cmd_finetune(args, argv) -> int:
    base = _load_model(args.checkpoint)
    vocab = _vocab(args.vocab)
    train = _dataset(args.train)
    k = args.num_classes or max(ex.label for ex in train) + 1
    cfg = FinetuneConfig(lr=args.lr, epochs=args.epochs, batch_size=args.batch, seed=args.seed,
                         max_len=min(args.max_len, base.config.max_positions))
    res = finetune(base, train, vocab, cfg, k)
    out = Path(args.out)
    save_checkpoint(res.model, out / "finetuned.ckpt", extra={"finetune": asdict(cfg)})
    metrics = evaluate(res.model, train, vocab, cfg.max_len)
    (out / "train_metrics.json").write_text(json.dumps(asdict(metrics), indent=2) + "\n")
    write_manifest(out / "manifest.json", "finetune", argv, {"finetune": asdict(cfg),
                   "num_classes": k}, cfg.seed,
                   {"checkpoint": args.checkpoint, "vocab": args.vocab, "train": args.train},
                   [str(out / "finetuned.ckpt"), str(out / "train_metrics.json")])
    print(f"{res.steps} steps; train f1_macro {metrics.f1_macro:.4f}")
    return EXIT_OK


def cmd_eval(args, argv) -> int:
    model = _load_model(args.checkpoint)
    if model.classifier is None:
        raise InputError(f"{args.checkpoint} has no classification head; fine-tune it first")
    vocab = _vocab(args.vocab)
    data = _dataset(args.eval)
    max_len = min(args.max_len, model.config.max_positions)
    metrics = evaluate(model, data, vocab, max_len)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(asdict(metrics), indent=2) + "\n")
    write_manifest(out / "manifest.json", "eval", argv, {"max_len": max_len}, None,
                   {"checkpoint": args.checkpoint, "vocab": args.vocab, "eval": args.eval},
                   [str(out / "metrics.json")])
    print(json.dumps({"accuracy": metrics.accuracy, "f1_macro": metrics.f1_macro,
                      "f1_weighted": metrics.f1_weighted, "f1_binary": metrics.f1_binary}))
    return EXIT_OK


def cmd_sweep(args, argv) -> int:
    base = _load_model(args.checkpoint)
    vocab = _vocab(args.vocab)
    train = _dataset(args.train)
    eval_set = _dataset(args.eval)
    sizes = sorted(len(train) if s == "full" else s for s in args.sizes)
    sweep = SweepConfig(sizes=sizes, lrs=[lr * args.lr_scale for lr in args.lrs],
                        epochs_grid=args.epochs, seeds=args.seeds,
                        stratified=not args.no_stratify, batch_size=args.batch,
                        max_len=args.max_len)
    try:
        sweep.validate(len(train))
    except ValueError as e:
        raise InputError(str(e)) from e
    report = fewshot_sweep(base, train, eval_set, vocab, sweep, num_classes=args.num_classes)
    out = Path(args.out)
    paths = report.write(out)
    write_manifest(out / "manifest.json", "sweep", argv, {"sweep": asdict(sweep)}, args.seeds,
                   {"checkpoint": args.checkpoint, "vocab": args.vocab, "train": args.train,
                    "eval": args.eval}, [str(p) for p in paths])
    print(f"{len(report.rows)} rows ({sweep.num_cells} cells)"
          + (f"; {len(report.failures)} failed, report is partial" if report.partial else ""))
    return EXIT_OK


def cmd_count_params(args, argv) -> int:
    mcfg, _ = load_run_config(args.config)
    try:
        report = count_parameters(mcfg)
        other = count_parameters(load_run_config(args.compare)[0]) if args.compare else None
    except ConfigError as e:
        raise InputError(str(e)) from e
    payload = {"config": args.config, "total": report.total, "unique": report.unique,
               "logical": report.logical, "by_block": report.by_block}
    if other is not None:
        payload["compare"] = {"config": args.compare, "total": other.total,
                              "by_block": other.by_block}
        payload["ratio"] = report.total / other.total
    if args.json:
        print(json.dumps(payload, indent=2, sort_keys=True))
        return EXIT_OK
    print(f"{args.config}: {report.total:,} parameters "
          f"(logical with sharing expanded: {report.logical:,})")
    for block, n in report.by_block.items():
        print(f"  {block:<12}{n:>14,}")
    if other is not None:
        print(f"{args.compare}: {other.total:,} parameters")
        print(f"ratio: {payload['ratio']:.4f}")
    return EXIT_OK


def cmd_replay(args, argv) -> int:
    manifest = _read_json(args.manifest)
    if "argv" not in manifest:
        raise InputError(f"{args.manifest}: not a run manifest")
    return main(manifest["argv"])


# ------------------------------------------------------------------ parser


class _HelpFormatter(argparse.HelpFormatter):
    """Show defaults only where one exists."""

    def _get_help_string(self, action):
        text = action.help or ""
        if (action.default not in (None, False, argparse.SUPPRESS) and not action.required
                and "%(default)" not in text):
            text += " (default: %(default)s)"
        return text


def build_parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    p = argparse.ArgumentParser(prog="tess", description="TESS encoder toolkit.",
                                formatter_class=fmt)
    p.add_argument("--version", action="version", version=f"tess {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("build-vocab", help="train a WordPiece vocabulary", formatter_class=fmt)
    s.add_argument("--corpus", required=True, help="directory of .txt files")
    s.add_argument("--size", type=int, required=True, help="target vocabulary size")
    s.add_argument("--out", required=True, help="vocabulary file to write")
    s.set_defaults(func=cmd_build_vocab)

    s = sub.add_parser("pretrain", help="masked-language-model pretraining", formatter_class=fmt)
    d = PretrainConfig()
    s.add_argument("--config", default=None,
                   help="JSON run config (model + pretrain sections); built-in defaults if omitted")
    s.add_argument("--corpus", required=True, help="directory of .txt files")
    s.add_argument("--vocab", required=True, help="vocabulary file")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--steps", type=int, default=None,
                   help=f"total optimizer steps (config default: {d.total_steps})")
    s.add_argument("--batch", type=int, default=None,
                   help=f"sequences per step (config default: {d.batch_size})")
    s.add_argument("--micro-batch", type=int, default=None,
                   help="gradient-accumulation micro-batch size (default: the whole batch)")
    s.add_argument("--lr", type=float, default=None,
                   help=f"peak learning rate (config default: {d.peak_lr})")
    s.add_argument("--seed", type=int, default=None, help=f"seed (config default: {d.seed})")
    s.add_argument("--log-every", type=int, default=None,
                   help=f"loss logging interval in steps (config default: {d.log_every})")
    s.add_argument("--checkpoint-every", type=int, default=None,
                   help=f"checkpoint interval in steps (config default: {d.checkpoint_every})")
    s.add_argument("--resume", default=None,
                   help="checkpoint to resume from (default: start from a fresh model)")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("finetune", help="fine-tune a classifier", formatter_class=fmt)
    _common_ft(s)
    s.add_argument("--train", required=True, help="JSON-lines training set")
    s.add_argument("--lr", type=float, default=3e-5, help="peak learning rate")
    s.add_argument("--epochs", type=int, default=3, help="training epochs")
    s.add_argument("--seed", type=int, default=0, help="seed")
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("eval", help="evaluate a fine-tuned classifier", formatter_class=fmt)
    s.add_argument("--checkpoint", required=True, help="fine-tuned checkpoint")
    s.add_argument("--vocab", required=True, help="vocabulary file")
    s.add_argument("--eval", required=True, help="JSON-lines evaluation set")
    s.add_argument("--max-len", type=int, default=768, help="maximum sequence length")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="few-shot learning-curve sweep", formatter_class=fmt)
    _common_ft(s)
    s.add_argument("--train", required=True, help="JSON-lines training pool")
    s.add_argument("--eval", required=True, help="JSON-lines evaluation split")
    s.add_argument("--sizes", type=_sizes, default=[50, 200, 500, 800, 1000],
                   help="comma-separated training sizes; 'full' means the whole pool")
    s.add_argument("--lrs", type=_floats, default=list(GRID_LRS), help="learning rates")
    s.add_argument("--lr-scale", type=float, default=1.0,
                   help="multiplier applied to every learning rate (toy models)")
    s.add_argument("--epochs", type=_ints, default=list(GRID_EPOCHS), help="epoch grid")
    s.add_argument("--seeds", type=_ints, default=[0], help="seeds")
    s.add_argument("--no-stratify", action="store_true", help="sample without stratification")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("count-params", help="closed-form parameter counts", formatter_class=fmt)
    s.add_argument("--config", required=True, help="JSON model or run config")
    s.add_argument("--compare", default=None, help="baseline config to compare against")
    s.add_argument("--json", action="store_true", help="machine-readable output")
    s.set_defaults(func=cmd_count_params)

    s = sub.add_parser("replay", help="re-run a command from its manifest", formatter_class=fmt)
    s.add_argument("manifest", help="manifest.json written by an earlier run")
    s.set_defaults(func=cmd_replay)
    return p


def _common_ft(s: argparse.ArgumentParser) -> None:
    s.add_argument("--checkpoint", required=True, help="base checkpoint")
    s.add_argument("--vocab", required=True, help="vocabulary file")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--num-classes", type=int, default=None,
                   help="number of classes (default: max label + 1)")
    s.add_argument("--batch", type=int, default=16, help="batch size")
    s.add_argument("--max-len", type=int, default=768, help="maximum sequence length")


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, argv)
    except NonFiniteLossError as e:
        print(f"error: numeric divergence: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, DataError, VocabError, ConfigError, CheckpointError, ValueError,
            FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
