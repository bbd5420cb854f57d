"""Command-line entry point wiring every stage of the pipeline.

Subcommands: train-tokenizer, synth-corpus, pretrain, finetune, finetune-mt,
extract-features, evaluate, ablate-pooling.  Each run writes its resolved
flat config into the output directory; all randomness hangs off the recorded
seeds, so a run is reproducible from that snapshot.
"""

from __future__ import annotations

import os

# cap BLAS worker threads before numpy loads anywhere in the package
_threads = os.environ.get("URLBERT_LAB_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                 "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse
import csv
import json
import sys

import numpy as np

from . import corpus as corpus_mod
from . import tokenizer as tok_mod
from .checkpoint import load_checkpoint, save_checkpoint
from .configio import (apply_overrides, dataclass_from_flat, dataclass_to_flat,
                       load_config_file, write_config)
from .encoder import Encoder, EncoderConfig
from .eval_features import (classify_gnb, classify_knn, classify_lr, extract_features,
                            roc_points, save_features, save_roc_csv)
from .finetune import (FinetuneSchedule, HeadSpec, POOL_KINDS, TaskSpec, evaluate_task,
                       finetune_joint, finetune_multitask, finetune_two_stage)
from .pretrain import PretrainConfig, pretrain_all


def _write_snapshot(out_dir: str, subcommand: str, flat: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    write_config({"subcommand": subcommand, **flat}, os.path.join(out_dir, "resolved_config.txt"))


def _load_grammar(path):
    if path is None:
        return corpus_mod.default_grammar()
    return corpus_mod.SynthGrammar.from_json(path)


# ------------------------------------------------------------------ subcommands


def cmd_train_tokenizer(args) -> int:
    records = corpus_mod.load_corpus(args.corpus)
    vocab = tok_mod.train_vocab(records, target_size=args.target_size, seed=args.seed)
    _write_snapshot(args.out, "train-tokenizer",
                    {"corpus": args.corpus, "target_size": str(args.target_size),
                     "seed": str(args.seed)})
    vocab.save(os.path.join(args.out, "vocab.json"))
    print(f"trained vocab of {vocab.size} tokens -> {args.out}/vocab.json")
    return 0


def cmd_synth_corpus(args) -> int:
    grammar = _load_grammar(args.grammar)
    _write_snapshot(args.out, "synth-corpus",
                    {"n": str(args.n), "seed": str(args.seed),
                     "grammar": args.grammar or "default",
                     "labeled": str(args.labeled), "families": args.families,
                     "task_id": str(args.task_id)})
    if args.labeled:
        families = tuple(int(x) for x in args.families.split(","))
        records = corpus_mod.synth_task(args.n, args.seed, families=families,
                                        task_id=args.task_id, grammar=grammar)
        corpus_mod.save_labeled(records, os.path.join(args.out, "labeled.tsv"))
        corpus_mod.write_label_map(
            {i: grammar.families[fam]["name"] for i, fam in enumerate(families)},
            os.path.join(args.out, "label_map.json"))
        print(f"wrote {len(records)} labeled URLs -> {args.out}/labeled.tsv")
    else:
        records = corpus_mod.synth_corpus(args.n, args.seed, grammar=grammar)
        corpus_mod.save_corpus(records, os.path.join(args.out, "corpus.txt"))
        print(f"wrote {len(records)} URLs -> {args.out}/corpus.txt")
    return 0


def _resolve_pretrain_flat(args) -> dict:
    flat = load_config_file(args.config) if args.config else {}
    return apply_overrides(flat, args.set)


def cmd_pretrain(args) -> int:
    flat = _resolve_pretrain_flat(args)
    cfg = dataclass_from_flat(PretrainConfig, flat, "pretrain.")
    records = corpus_mod.load_corpus(args.corpus)
    vocab_file = flat.get("vocab.file")
    if vocab_file in ("", "none"):
        vocab_file = None
    target = int(flat.get("vocab.target_size", "1024"))
    if vocab_file:
        vocab = tok_mod.Vocab.load(vocab_file)
    else:
        vocab = tok_mod.train_vocab(records, target_size=target, seed=cfg.seed)
    enc_defaults = {"encoder.layers": "2", "encoder.heads": "4", "encoder.hidden": "128",
                    "encoder.max_len": "64", "encoder.ffn_mult": "4",
                    "encoder.dropout_p": "0.1"}
    enc_flat = {**enc_defaults, **{k: v for k, v in flat.items() if k.startswith("encoder.")},
                "encoder.vocab_size": str(vocab.size)}
    enc_cfg = dataclass_from_flat(EncoderConfig, enc_flat, "encoder.")
    _write_snapshot(args.out, "pretrain",
                    {**dataclass_to_flat(cfg, "pretrain."),
                     **dataclass_to_flat(enc_cfg, "encoder."),
                     "corpus": args.corpus, "vocab.file": vocab_file or "none",
                     "vocab.target_size": str(target),
                     "skip_stage1": str(args.skip_stage1)})
    audit = os.path.join(args.out, "corruption_audit.txt") if args.dump_corruption else None
    result = pretrain_all(cfg, enc_cfg, records, vocab, args.out,
                          skip_stage1=args.skip_stage1, dump_corruption_path=audit)
    print(f"stage1 checksum: {result['stage1_checksum']}")
    print(f"stage2 checksum: {result['stage2_checksum']}")
    print(f"artifacts in {args.out}")
    return 0


def _load_model(checkpoint_dir: str):
    store, manifest = load_checkpoint(checkpoint_dir)
    meta = manifest["meta"]
    enc_cfg = EncoderConfig.from_dict(meta["encoder"])
    encoder = Encoder(enc_cfg)
    vocab_rel = meta.get("vocab_file", "vocab.json")
    vocab_path = os.path.normpath(os.path.join(checkpoint_dir, vocab_rel))
    if not os.path.exists(vocab_path):
        vocab_path = os.path.join(checkpoint_dir, "vocab.json")
    vocab = tok_mod.Vocab.load(vocab_path)
    return store, encoder, vocab, manifest


def _load_task(path, task_id: int, head_kind: str, num_classes, layer, split_seed: int,
               train_fraction: float):
    records = corpus_mod.load_labeled(path, task_id=task_id)
    n_classes = num_classes or max(r.label for r in records) + 1
    train, test = corpus_mod.split(records, corpus_mod.SplitSpec(
        train_fraction=train_fraction, seed=split_seed, stratified=True))
    head = HeadSpec(kind=head_kind, num_classes=n_classes, layer=layer)
    return TaskSpec(task_id=task_id, train=train, test=test, head=head,
                    name=os.path.basename(str(path)))


def cmd_finetune(args) -> int:
    store, encoder, vocab, manifest = _load_model(args.checkpoint)
    flat = apply_overrides(load_config_file(args.config) if args.config else {}, args.set)
    sched = dataclass_from_flat(FinetuneSchedule, flat, "ft.")
    task = _load_task(args.task, args.task_id, args.head, args.num_classes, args.layer,
                      split_seed=sched.seed,
                      train_fraction=float(flat.get("split.train_fraction", "0.8")))
    _write_snapshot(args.out, "finetune",
                    {**dataclass_to_flat(sched, "ft."), "checkpoint": args.checkpoint,
                     "task": args.task, "head": args.head,
                     "num_classes": str(task.head.num_classes),
                     "two_stage": str(args.two_stage),
                     "split.train_fraction": flat.get("split.train_fraction", "0.8")})
    if args.two_stage:
        store, result = finetune_two_stage(store, encoder, vocab, task, sched)
        metrics = result["stage_b"]
        result["stage_a"].save(os.path.join(args.out, "metrics_stage_a.json"))
    else:
        store, per_task, _ = finetune_joint(store, encoder, vocab, task,
                                            epochs=sched.stage_b_epochs,
                                            lr=sched.stage_b_lr,
                                            batch_size=sched.batch_size,
                                            weight_decay=sched.weight_decay,
                                            seed=sched.seed)
        metrics = per_task[task.task_id]
    metrics.save(os.path.join(args.out, "metrics.json"))
    meta = {"encoder": encoder.cfg.to_dict(), "stage": "finetuned",
            "parent_checksum": manifest.get("checksum"),
            "head": task.head.to_dict(), "head_prefix": task.prefix,
            "vocab_file": "vocab.json"}
    save_checkpoint(store, os.path.join(args.out, "model"), meta=meta)
    vocab.save(os.path.join(args.out, "model", "vocab.json"))
    print(json.dumps({k: getattr(metrics, k) for k in
                      ("accuracy", "precision", "recall", "f1", "auc")}, indent=2))
    return 0


def cmd_finetune_mt(args) -> int:
    store, encoder, vocab, manifest = _load_model(args.checkpoint)
    paths = args.tasks.split(",")
    if len(paths) < 1:
        raise ValueError("finetune-mt: need at least one task file")
    tasks = [_load_task(p, tid, args.head, None, None, split_seed=args.seed,
                        train_fraction=0.8) for tid, p in enumerate(paths)]
    _write_snapshot(args.out, "finetune-mt",
                    {"checkpoint": args.checkpoint, "tasks": args.tasks,
                     "epochs": str(args.epochs), "lr": str(args.lr),
                     "batch_size": str(args.batch_size), "seed": str(args.seed),
                     "head": args.head})
    store, per_task, batch_log = finetune_multitask(store, encoder, vocab, tasks,
                                                    epochs=args.epochs, lr=args.lr,
                                                    batch_size=args.batch_size,
                                                    seed=args.seed)
    summary = {}
    for t in tasks:
        m = per_task[t.task_id]
        m.save(os.path.join(args.out, f"metrics_task{t.task_id}.json"))
        summary[t.name] = {"accuracy": m.accuracy, "auc": m.auc}
    meta = {"encoder": encoder.cfg.to_dict(), "stage": "finetuned-mt",
            "parent_checksum": manifest.get("checksum"),
            "heads": {t.task_id: t.head.to_dict() for t in tasks},
            "vocab_file": "vocab.json"}
    save_checkpoint(store, os.path.join(args.out, "model"), meta=meta)
    vocab.save(os.path.join(args.out, "model", "vocab.json"))
    print(json.dumps(summary, indent=2))
    return 0


def cmd_extract_features(args) -> int:
    store, encoder, vocab, manifest = _load_model(args.checkpoint)
    try:
        records = corpus_mod.load_labeled(args.data, task_id=0)
    except ValueError:
        records = corpus_mod.load_corpus(args.data)
    spec = HeadSpec(kind=args.pool, num_classes=2, layer=args.layer)
    _write_snapshot(args.out, "extract-features",
                    {"checkpoint": args.checkpoint, "data": args.data,
                     "pool": args.pool, "layer": str(args.layer)})
    fm = extract_features(store, encoder, vocab, records, spec)
    save_features(fm, os.path.join(args.out, "features"))
    print(f"extracted {fm.rows.shape[0]} x {fm.rows.shape[1]} features -> "
          f"{args.out}/features")
    if args.classifier != "none":
        train, test = corpus_mod.split(records, corpus_mod.SplitSpec(
            train_fraction=0.8, seed=args.seed, stratified=True))
        fm_train = extract_features(store, encoder, vocab, train, spec)
        fm_test = extract_features(store, encoder, vocab, test, spec)
        clf = {"knn": classify_knn, "lr": classify_lr, "gnb": classify_gnb}[args.classifier]
        metrics = clf(fm_train, fm_test)
        metrics.save(os.path.join(args.out, f"metrics_{args.classifier}.json"))
        print(json.dumps({"classifier": args.classifier, "accuracy": metrics.accuracy,
                          "auc": metrics.auc}, indent=2))
    return 0


def cmd_evaluate(args) -> int:
    store, encoder, vocab, manifest = _load_model(args.checkpoint)
    meta = manifest["meta"]
    if "head" not in meta:
        raise ValueError("evaluate: checkpoint has no fine-tuned head "
                         "(run finetune first)")
    head = HeadSpec.from_dict(meta["head"])
    prefix = meta["head_prefix"]
    records = corpus_mod.load_labeled(args.data, task_id=0)
    _write_snapshot(args.out, "evaluate", {"checkpoint": args.checkpoint,
                                           "data": args.data})
    metrics = evaluate_task(store, encoder, vocab, records, head, prefix)
    metrics.save(os.path.join(args.out, "metrics.json"))
    if head.num_classes == 2:
        from .finetune import predict
        labels = np.asarray([r.label for r in records])
        _, scores = predict(store, encoder, vocab, records, head, prefix)
        save_roc_csv(roc_points(labels, scores[:, 1]), os.path.join(args.out, "roc.csv"))
    print(json.dumps({k: getattr(metrics, k) for k in
                      ("accuracy", "precision", "recall", "f1", "auc")}, indent=2))
    return 0


def ablation_specs(depth: int, num_classes: int) -> list[tuple[str, HeadSpec]]:
    """The ten layer/pooling configurations: the four deepest single-layer CLS
    picks plus the six last-4 combination strategies."""
    if depth < 4:
        raise ValueError(f"ablate-pooling needs encoder depth >= 4, got {depth}")
    specs = [(f"layer_{k}", HeadSpec(kind="cls_layer", num_classes=num_classes, layer=k))
             for k in range(depth - 3, depth + 1)]
    specs += [(kind, HeadSpec(kind=kind, num_classes=num_classes))
              for kind in POOL_KINDS if kind != "cls_layer"]
    return specs


def cmd_ablate_pooling(args) -> int:
    store, encoder, vocab, manifest = _load_model(args.checkpoint)
    records = corpus_mod.load_labeled(args.task, task_id=0)
    n_classes = max(r.label for r in records) + 1
    train, test = corpus_mod.split(records, corpus_mod.SplitSpec(
        train_fraction=0.8, seed=args.seed, stratified=True))
    _write_snapshot(args.out, "ablate-pooling",
                    {"checkpoint": args.checkpoint, "task": args.task,
                     "epochs": str(args.epochs), "lr": str(args.lr),
                     "batch_size": str(args.batch_size), "seed": str(args.seed)})
    rows = []
    for name, head in ablation_specs(encoder.cfg.layers, n_classes):
        task = TaskSpec(task_id=0, train=train, test=test, head=head, name=name)
        trial_store = store.clone()
        trial_store, per_task, _ = finetune_joint(trial_store, encoder, vocab, task,
                                                  epochs=args.epochs, lr=args.lr,
                                                  batch_size=args.batch_size,
                                                  seed=args.seed)
        m = per_task[0]
        m.save(os.path.join(args.out, f"metrics_{name}.json"))
        rows.append({"configuration": name, "accuracy": m.accuracy,
                     "precision": m.precision, "recall": m.recall, "f1": m.f1,
                     "auc": m.auc})
        print(f"{name:20s} accuracy={m.accuracy:.4f} auc={m.auc:.4f}")
    with open(os.path.join(args.out, "ablation.csv"), "w", encoding="utf-8",
              newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["configuration", "accuracy", "precision",
                                               "recall", "f1", "auc"])
        writer.writeheader()
        writer.writerows(rows)
    print(f"{len(rows)} configurations -> {args.out}/ablation.csv")
    return 0


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="urlbert-lab",
                                     description="Desk-scale URL encoder laboratory")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("train-tokenizer", help="train the subword vocabulary")
    p.add_argument("--corpus", required=True)
    p.add_argument("--target-size", type=int, default=1024)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_tokenizer)

    p = sub.add_parser("synth-corpus", help="generate a deterministic synthetic corpus")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--grammar", default=None)
    p.add_argument("--labeled", action="store_true")
    p.add_argument("--families", default="0,1")
    p.add_argument("--task-id", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth_corpus)

    p = sub.add_parser("pretrain", help="two-stage self-supervised pre-training")
    p.add_argument("--config", default=None)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--skip-stage1", action="store_true")
    p.add_argument("--dump-corruption", action="store_true")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="supervised fine-tuning on a labeled TSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--head", default="cnn_head")
    p.add_argument("--layer", type=int, default=None)
    p.add_argument("--num-classes", type=int, default=None)
    p.add_argument("--task-id", type=int, default=0)
    p.add_argument("--two-stage", action="store_true")
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("finetune-mt", help="multi-task fine-tuning over shared encoder")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tasks", required=True, help="comma-separated labeled TSV files")
    p.add_argument("--head", default="cls_layer")
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--lr", type=float, default=2e-5)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune_mt)

    p = sub.add_parser("extract-features", help="frozen-encoder feature extraction")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--pool", default="cls_layer", choices=POOL_KINDS)
    p.add_argument("--layer", type=int, default=None)
    p.add_argument("--classifier", default="none", choices=["none", "knn", "lr", "gnb"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract_features)

    p = sub.add_parser("evaluate", help="metrics for a fine-tuned checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate-pooling", help="run all ten layer/pooling configurations")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--epochs", type=int, default=2)
    p.add_argument("--lr", type=float, default=2e-5)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate_pooling)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # surface a diagnostic, exit 1 per contract
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
