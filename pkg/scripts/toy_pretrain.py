"""Desk-scale pretraining run: synthetic topic corpus, toy config, MLM loss curve.

Writes the corpus, vocabulary, checkpoints and ``loss.csv`` under ``--out``.
"""
import argparse
import json
import math
import warnings
from pathlib import Path

from tess.data_io import corpus_sequences, iter_documents, save_checkpoint
from tess.model import ModelConfig, build_model
from tess.pretrain import PretrainConfig, pretrain_loop
from tess.synthetic import topic_corpus, write_corpus
from tess.tokenizer import train_vocab

ROOT = Path(__file__).resolve().parents[1]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/toy_pretrain")
    ap.add_argument("--config", default=str(ROOT / "configs" / "toy.json"))
    ap.add_argument("--docs", type=int, default=240)
    ap.add_argument("--topics", type=int, default=8)
    ap.add_argument("--words-per-topic", type=int, default=3)
    ap.add_argument("--steps", type=int, default=None)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args(argv)

    out = Path(args.out)
    corpus = write_corpus(topic_corpus(args.docs, args.topics, args.words_per_topic,
                                       seed=args.seed), out / "corpus")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        vocab = train_vocab(iter_documents(corpus), 200)
    vocab.save(out / "vocab.txt")

    raw = json.loads(Path(args.config).read_text())
    cfg = ModelConfig.from_dict(dict(raw["model"], vocab_size=len(vocab)))
    pcfg = PretrainConfig.from_dict(dict(raw.get("pretrain", {}), seed=args.seed))
    if args.steps:
        pcfg.total_steps = args.steps
    seqs = corpus_sequences(corpus, vocab, cfg.max_positions)
    model = build_model(cfg, seed=pcfg.seed)
    res = pretrain_loop(model, seqs, pcfg, out_dir=out / "run",
                        on_log=lambda s, lr, loss: s % 50 == 0 and print(
                            f"step {s:5d}  lr {lr:.2e}  loss {loss:.4f}", flush=True))
    save_checkpoint(model, out / "run" / "model.ckpt", state=res.state,
                    extra={"step": res.final_step, "pretrain": pcfg.to_dict()})
    first = res.loss_log[0][2]
    tail = res.loss_log[-20:]
    last = sum(r[2] for r in tail) / len(tail)
    print(f"V={len(vocab)} ln V={math.log(len(vocab)):.3f} initial={first:.3f} "
          f"final(mean of last {len(tail)})={last:.3f} ratio={last / first:.3f}")


if __name__ == "__main__":
    main()
