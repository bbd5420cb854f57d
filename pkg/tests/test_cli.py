"""End-to-end CLI checks on a miniature pipeline (everything in-process)."""

import json

import numpy as np
import pytest

from urlbert_lab import corpus as cp
from urlbert_lab.cli import main


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def corpus_file(workdir):
    out = workdir / "synth"
    assert main(["synth-corpus", "--n", "300", "--seed", "3", "--out", str(out)]) == 0
    return out / "corpus.txt"


@pytest.fixture(scope="module")
def task_files(workdir):
    paths = []
    for tid, fams in enumerate(["0,1", "2,3", "4,5"]):
        out = workdir / f"task{tid}"
        assert main(["synth-corpus", "--n", "120", "--seed", str(40 + tid),
                     "--labeled", "--families", fams, "--task-id", str(tid),
                     "--out", str(out)]) == 0
        paths.append(out / "labeled.tsv")
    return paths


@pytest.fixture(scope="module")
def pretrained(workdir, corpus_file):
    cfg = workdir / "pretrain.cfg"
    cfg.write_text("\n".join([
        "pretrain.stage1_epochs = 1",
        "pretrain.stage2_epochs = 1",
        "pretrain.batch_size = 16",
        "pretrain.max_steps_per_epoch = 3",
        "pretrain.lr = 1e-3",
        "vocab.target_size = 192",
        "encoder.layers = 4",
        "encoder.heads = 2",
        "encoder.hidden = 16",
        "encoder.max_len = 32",
        "encoder.ffn_mult = 2",
        "encoder.dropout_p = 0.1",
    ]) + "\n", encoding="utf-8")
    out = workdir / "pretrained"
    assert main(["pretrain", "--config", str(cfg), "--corpus", str(corpus_file),
                 "--out", str(out), "--dump-corruption"]) == 0
    return out


def test_synth_corpus_byte_identical(workdir):
    a = workdir / "synth_a"
    b = workdir / "synth_b"
    assert main(["synth-corpus", "--n", "100", "--seed", "1", "--out", str(a)]) == 0
    assert main(["synth-corpus", "--n", "100", "--seed", "1", "--out", str(b)]) == 0
    assert (a / "corpus.txt").read_bytes() == (b / "corpus.txt").read_bytes()


def test_synth_labeled_writes_label_map(workdir):
    out = workdir / "synth_lab"
    assert main(["synth-corpus", "--n", "50", "--seed", "2", "--labeled",
                 "--families", "0,1", "--out", str(out)]) == 0
    label_map = json.loads((out / "label_map.json").read_text())
    assert set(label_map) == {"0", "1"}
    recs = cp.load_labeled(out / "labeled.tsv", task_id=0)
    assert {r.label for r in recs} == {0, 1}


def test_train_tokenizer_cli(workdir, corpus_file):
    out = workdir / "tok"
    assert main(["train-tokenizer", "--corpus", str(corpus_file),
                 "--target-size", "160", "--seed", "0", "--out", str(out)]) == 0
    from urlbert_lab.tokenizer import Vocab
    vocab = Vocab.load(out / "vocab.json")
    assert vocab.size == 160
    assert (out / "resolved_config.txt").exists()


def test_pretrain_cli_artifacts(pretrained):
    assert (pretrained / "stage1" / "manifest.json").exists()
    assert (pretrained / "stage2" / "manifest.json").exists()
    assert (pretrained / "vocab.json").exists()
    assert (pretrained / "trainlog.jsonl").exists()
    assert (pretrained / "resolved_config.txt").exists()
    assert (pretrained / "corruption_audit.txt").exists()
    manifest = json.loads((pretrained / "stage2" / "manifest.json").read_text())
    assert manifest["meta"]["parent_checksum"]
    lines = (pretrained / "trainlog.jsonl").read_text().splitlines()
    stages = {json.loads(l)["stage"] for l in lines}
    assert stages == {"stage1", "stage2"}


def test_finetune_two_stage_cli(workdir, pretrained, task_files):
    out = workdir / "ft"
    assert main(["finetune", "--checkpoint", str(pretrained / "stage2"),
                 "--task", str(task_files[0]), "--head", "cls_layer", "--two-stage",
                 "--set", "ft.stage_a_epochs=2", "--set", "ft.stage_b_epochs=1",
                 "--set", "ft.batch_size=16", "--out", str(out)]) == 0
    metrics = json.loads((out / "metrics.json").read_text())
    for key in ("accuracy", "precision", "recall", "f1", "auc"):
        assert key in metrics
    assert (out / "metrics_stage_a.json").exists()
    assert (out / "model" / "manifest.json").exists()


def test_evaluate_cli(workdir, task_files, pretrained):
    ft_out = workdir / "ft"
    out = workdir / "eval"
    assert main(["evaluate", "--checkpoint", str(ft_out / "model"),
                 "--data", str(task_files[0]), "--out", str(out)]) == 0
    metrics = json.loads((out / "metrics.json").read_text())
    assert set(("accuracy", "precision", "recall", "f1", "auc")) <= set(metrics)
    assert (out / "roc.csv").exists()
    assert (out / "roc.csv").read_text().startswith("fpr,tpr,threshold")


def test_finetune_mt_cli(workdir, pretrained, task_files):
    out = workdir / "mt"
    assert main(["finetune-mt", "--checkpoint", str(pretrained / "stage2"),
                 "--tasks", ",".join(str(p) for p in task_files),
                 "--epochs", "1", "--batch-size", "16", "--out", str(out)]) == 0
    for tid in range(3):
        metrics = json.loads((out / f"metrics_task{tid}.json").read_text())
        assert "accuracy" in metrics
    assert (out / "model" / "manifest.json").exists()


def test_extract_features_cli(workdir, pretrained, task_files):
    out = workdir / "feat"
    assert main(["extract-features", "--checkpoint", str(pretrained / "stage2"),
                 "--data", str(task_files[0]), "--pool", "last4_mean",
                 "--classifier", "lr", "--out", str(out)]) == 0
    assert (out / "features" / "manifest.json").exists()
    metrics = json.loads((out / "metrics_lr.json").read_text())
    assert 0.0 <= metrics["accuracy"] <= 1.0


def test_ablate_pooling_cli(workdir, pretrained, task_files):
    out = workdir / "ablate"
    assert main(["ablate-pooling", "--checkpoint", str(pretrained / "stage2"),
                 "--task", str(task_files[1]), "--epochs", "1",
                 "--lr", "1e-3", "--batch-size", "16", "--out", str(out)]) == 0
    lines = (out / "ablation.csv").read_text().splitlines()
    assert lines[0] == "configuration,accuracy,precision,recall,f1,auc"
    assert len(lines) == 11  # header + the ten configurations
    names = [l.split(",")[0] for l in lines[1:]]
    assert names[:4] == ["layer_1", "layer_2", "layer_3", "layer_4"]
    assert set(names[4:]) == {"last4_concat", "last4_mean", "last4_max", "last4_min",
                              "last4_weighted", "last4_attention"}


def test_unknown_flag_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(["synth-corpus", "--n", "10", "--seed", "1", "--out", "/tmp/x",
              "--definitely-not-a-flag"])
    assert exc.value.code == 2


def test_missing_file_exits_1(workdir, capsys):
    assert main(["train-tokenizer", "--corpus", "/nonexistent.txt",
                 "--out", str(workdir / "nope")]) == 1
    assert "error:" in capsys.readouterr().err


def test_run_reproducible_from_snapshot(workdir, corpus_file):
    # replaying the recorded snapshot keys yields identical checkpoints
    snap = (workdir / "pretrained" / "resolved_config.txt").read_text()
    from urlbert_lab.configio import parse_config_text
    flat = parse_config_text(snap)
    cfg_file = workdir / "replay.cfg"
    cfg_file.write_text("".join(f"{k} = {v}\n" for k, v in flat.items()
                                if k.startswith(("pretrain.", "encoder.", "vocab."))
                                and k != "encoder.vocab_size"),
                        encoding="utf-8")
    out = workdir / "replay"
    assert main(["pretrain", "--config", str(cfg_file), "--corpus", str(corpus_file),
                 "--out", str(out)]) == 0
    m1 = json.loads((workdir / "pretrained" / "stage2" / "manifest.json").read_text())
    m2 = json.loads((out / "stage2" / "manifest.json").read_text())
    assert m1["checksum"] == m2["checksum"]
