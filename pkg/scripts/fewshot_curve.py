"""Few-shot learning curve on a synthetic separable task.

Runs the full size x lr x epochs grid and writes ``report.csv`` and
``best.csv``. Starts from ``--checkpoint`` when given (its vocabulary must
come with ``--vocab``), otherwise from a freshly initialized toy model.
"""
import argparse
import json
import time
from pathlib import Path

from tess.data_io import load_checkpoint, save_classification_dataset
from tess.finetune import GRID_EPOCHS, GRID_LRS, SweepConfig, fewshot_sweep
from tess.model import ModelConfig, build_model
from tess.synthetic import separable_task, task_corpus
from tess.tokenizer import Vocabulary, train_vocab

ROOT = Path(__file__).resolve().parents[1]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/fewshot")
    ap.add_argument("--checkpoint", default=None)
    ap.add_argument("--vocab", default=None)
    ap.add_argument("--pool", type=int, default=2000, help="training pool size")
    ap.add_argument("--eval-size", type=int, default=500)
    ap.add_argument("--sizes", default="50,200,500,800,1000")
    ap.add_argument("--lr-scale", type=float, default=100.0)
    ap.add_argument("--seeds", default="0")
    args = ap.parse_args(argv)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train = separable_task(args.pool, seed=0)
    dev = separable_task(args.eval_size, seed=1)
    save_classification_dataset(train, out / "train.jsonl")
    save_classification_dataset(dev, out / "dev.jsonl")
    if args.checkpoint:
        base, _, _ = load_checkpoint(args.checkpoint)
        vocab = Vocabulary.load(args.vocab)
    else:
        vocab = train_vocab(task_corpus(train), 90)
        raw = json.loads((ROOT / "configs" / "toy.json").read_text())["model"]
        base = build_model(ModelConfig.from_dict(dict(raw, vocab_size=len(vocab))), seed=0)
    sweep = SweepConfig(sizes=[int(s) for s in args.sizes.split(",")],
                        lrs=[lr * args.lr_scale for lr in GRID_LRS],
                        epochs_grid=list(GRID_EPOCHS),
                        seeds=[int(s) for s in args.seeds.split(",")],
                        max_len=base.config.max_positions)
    t0 = time.perf_counter()
    report = fewshot_sweep(base, train, dev, vocab, sweep)
    report.write(out)
    print(f"{len(report.rows)} rows in {time.perf_counter() - t0:.0f}s")
    for r in report.best:
        print(f"n={r.train_size:5d}  lr={r.lr:.0e}  epochs={r.epochs}  "
              f"f1={r.metrics.f1_binary:.3f}  acc={r.metrics.accuracy:.3f}")


if __name__ == "__main__":
    main()
