#!/usr/bin/env python3
"""End-to-end desk experiment: synthesize a corpus, train the tokenizer, run
both pre-training stages, and report held-out structure metrics plus the
contrastive alignment gap.

    python scripts/desk_pretrain.py --n 50000 --out runs/desk
"""

import argparse
import time

import numpy as np

from urlbert_lab import corpus as cp
from urlbert_lab import pretrain as pt
from urlbert_lab import tokenizer as tk
from urlbert_lab.encoder import EncoderConfig


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=50_000)
    ap.add_argument("--seed", type=int, default=71)
    ap.add_argument("--vocab-size", type=int, default=1024)
    ap.add_argument("--layers", type=int, default=2)
    ap.add_argument("--heads", type=int, default=4)
    ap.add_argument("--hidden", type=int, default=128)
    ap.add_argument("--max-len", type=int, default=64)
    ap.add_argument("--stage1-epochs", type=int, default=3)
    ap.add_argument("--stage2-epochs", type=int, default=1)
    ap.add_argument("--stage2-subset", type=int, default=16_000)
    ap.add_argument("--batch-size", type=int, default=128)
    ap.add_argument("--lr", type=float, default=3e-4)
    ap.add_argument("--out", default="runs/desk")
    args = ap.parse_args()

    t_all = time.time()
    records = cp.synth_corpus(args.n, seed=args.seed)
    train, held = cp.split(records, cp.SplitSpec(train_fraction=0.96, seed=args.seed + 1))
    print(f"[{time.time()-t_all:6.0f}s] corpus: {len(train)} train / {len(held)} held out")
    vocab = tk.train_vocab(records, target_size=args.vocab_size)
    print(f"[{time.time()-t_all:6.0f}s] vocab: {vocab.size} tokens")

    enc_cfg = EncoderConfig(layers=args.layers, heads=args.heads, hidden=args.hidden,
                            max_len=args.max_len, vocab_size=vocab.size)
    cfg = pt.PretrainConfig(stage1_epochs=args.stage1_epochs,
                            stage2_epochs=args.stage2_epochs,
                            batch_size=args.batch_size, lr=args.lr, seed=args.seed + 2)
    target = 0.55 * np.log(3.0)

    def hook(epoch, store):
        loss, auc = pt.evaluate_rstd(cfg, held, vocab, pt_encoder, store, seed=9)
        print(f"[{time.time()-t_all:6.0f}s] stage1 epoch {epoch}: held-out loss "
              f"{loss:.4f} (uniform {np.log(3):.4f}), detection AUC {auc:.4f}")
        return loss <= target and auc >= 0.75

    pt_encoder, store = pt.init_model(enc_cfg, seed=cfg.seed)
    result = pt.pretrain_all(cfg, enc_cfg, train, vocab, args.out,
                             stage2_records=train[:args.stage2_subset])
    encoder, store = result["encoder"], result["store"]
    loss, auc = pt.evaluate_rstd(cfg, held, vocab, encoder, store, seed=9)
    pos, neg = pt.evaluate_alignment(cfg, held, vocab, encoder, store, seed=9)
    print(f"[{time.time()-t_all:6.0f}s] final held-out: corruption loss {loss:.4f}, "
          f"detection AUC {auc:.4f}")
    print(f"[{time.time()-t_all:6.0f}s] alignment: positive cos {pos:.4f}, "
          f"negative cos {neg:.4f}, gap {pos-neg:.4f}")
    print(f"checkpoints and train log in {args.out}")


if __name__ == "__main__":
    main()
