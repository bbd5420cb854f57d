import json

import numpy as np
import pytest

from urlbert_lab import autodiff as ad
from urlbert_lab import corpus as cp
from urlbert_lab import tokenizer as tk
from urlbert_lab import pretrain as pt
from urlbert_lab.checkpoint import load_checkpoint
from urlbert_lab.encoder import EncoderConfig


@pytest.fixture(scope="module")
def setup():
    recs = cp.synth_corpus(80, seed=12)
    vocab = tk.train_vocab(recs, target_size=200)
    enc_cfg = EncoderConfig(layers=2, heads=2, hidden=16, max_len=32,
                            vocab_size=vocab.size, ffn_mult=2, dropout_p=0.1)
    return recs, vocab, enc_cfg


def small_cfg(**kw):
    base = dict(stage1_epochs=1, stage2_epochs=1, batch_size=8, lr=1e-3, seed=5,
                max_steps_per_epoch=4)
    base.update(kw)
    return pt.PretrainConfig(**base)


def test_config_validation():
    with pytest.raises(ValueError, match="epochs"):
        pt.PretrainConfig(stage1_epochs=0)
    with pytest.raises(ValueError, match="batch_size"):
        pt.PretrainConfig(batch_size=1)


def test_stage1_lr_zero_leaves_params(setup, f64):
    recs, vocab, enc_cfg = setup
    encoder, store = pt.init_model(enc_cfg, seed=1)
    before = {n: t.data.copy() for n, t in store.items()}
    cfg = small_cfg(lr=0.0, max_steps_per_epoch=1)
    store, log = pt.run_stage1(cfg, recs, vocab, encoder, store)
    for n, t in store.items():
        np.testing.assert_array_equal(t.data, before[n])
    assert store.step_count == 1
    assert len(log.records) == 1


def test_stage1_deterministic_checkpoints(setup, f64, tmp_path):
    recs, vocab, enc_cfg = setup
    cfg = small_cfg()

    def run():
        encoder, store = pt.init_model(enc_cfg, seed=2)
        store, log = pt.run_stage1(cfg, recs, vocab, encoder, store)
        return store.checksum(), [r["loss_rstd"] for r in log.records]

    c1, l1 = run()
    c2, l2 = run()
    assert c1 == c2
    assert l1 == l2


def test_stage1_log_fields_and_monotone_steps(setup):
    recs, vocab, enc_cfg = setup
    encoder, store = pt.init_model(enc_cfg, seed=3)
    store, log = pt.run_stage1(small_cfg(), recs, vocab, encoder, store)
    steps = [r["step"] for r in log.records]
    assert steps == sorted(steps)
    for r in log.records:
        assert r["stage"] == "stage1"
        assert np.isfinite(r["loss_rstd"])


def test_stage1_learns_on_tiny_corpus(setup):
    recs, vocab, enc_cfg = setup
    encoder, store = pt.init_model(enc_cfg, seed=4)
    cfg = small_cfg(stage1_epochs=6, max_steps_per_epoch=None, lr=3e-3)
    store, log = pt.run_stage1(cfg, recs, vocab, encoder, store)
    losses = log.losses("stage1", "loss_rstd")
    assert np.mean(losses[-5:]) < np.mean(losses[:5])


def test_stage1_epoch_hook_early_stop(setup):
    recs, vocab, enc_cfg = setup
    encoder, store = pt.init_model(enc_cfg, seed=4)
    cfg = small_cfg(stage1_epochs=5)
    seen = []
    store, log = pt.run_stage1(cfg, recs, vocab, encoder, store,
                               epoch_hook=lambda e, s: seen.append(e) or e >= 1)
    assert seen == [0, 1]
    assert max(r["epoch"] for r in log.records) == 1


def test_stage1_nan_abort_writes_diagnostic(setup, tmp_path):
    recs, vocab, enc_cfg = setup
    encoder, store = pt.init_model(enc_cfg, seed=6)
    store["head.rstd.w"].data[:] = np.inf
    with pytest.raises(FloatingPointError, match="non-finite loss"):
        pt.run_stage1(small_cfg(), recs, vocab, encoder, store, out_dir=str(tmp_path))
    assert (tmp_path / "diagnostic" / "manifest.json").exists()


def test_stage2_lr_zero_leaves_params(setup, f64):
    recs, vocab, enc_cfg = setup
    encoder, store = pt.init_model(enc_cfg, seed=7)
    before = {n: t.data.copy() for n, t in store.items()}
    cfg = small_cfg(lr=0.0, max_steps_per_epoch=1)
    store, log = pt.run_stage2(cfg, recs, vocab, encoder, store)
    for n, t in store.items():
        np.testing.assert_array_equal(t.data, before[n])


def test_stage2_log_carries_all_components(setup):
    recs, vocab, enc_cfg = setup
    encoder, store = pt.init_model(enc_cfg, seed=8)
    cfg = small_cfg(max_steps_per_epoch=3)
    store, log = pt.run_stage2(cfg, recs, vocab, encoder, store)
    assert len(log.records) == 3
    for r in log.records:
        assert r["stage"] == "stage2"
        for key in ("loss_con", "loss_mlm", "loss_vat", "loss_total"):
            assert np.isfinite(r[key])
        np.testing.assert_allclose(
            r["loss_total"],
            r["loss_con"] + r["loss_mlm"] + cfg.vat_weight * r["loss_vat"],
            rtol=1e-5)


def test_stage2_step_composite_weighting(setup, f64):
    recs, vocab, enc_cfg = setup
    encoder, store = pt.init_model(enc_cfg, seed=9)
    data = tk.encode_batch(vocab, recs[:8], enc_cfg.max_len)
    sub = pt._trim(data, np.arange(8))
    cfg = small_cfg()
    total, con, mlm, vat = pt.stage2_step(cfg, encoder, store, sub, vocab, step=0)
    np.testing.assert_allclose(total.scalar,
                               con.scalar + mlm.scalar + 10.0 * vat.scalar, rtol=1e-12)
    assert con.n_contributing == 16  # 2N anchors


def test_stage2_deterministic(setup, f64):
    recs, vocab, enc_cfg = setup
    cfg = small_cfg(max_steps_per_epoch=2)

    def run():
        encoder, store = pt.init_model(enc_cfg, seed=10)
        store, log = pt.run_stage2(cfg, recs, vocab, encoder, store)
        return store.checksum(), [r["loss_total"] for r in log.records]

    c1, l1 = run()
    c2, l2 = run()
    assert c1 == c2 and l1 == l2


def test_mlm_distribution_rows_sum_to_one(setup, f64):
    recs, vocab, enc_cfg = setup
    encoder, store = pt.init_model(enc_cfg, seed=11)
    data = tk.encode_batch(vocab, recs[:6], enc_cfg.max_len)
    sub = pt._trim(data, np.arange(6))
    from urlbert_lab.corruption import mask_mlm
    masked = mask_mlm(sub, 0.15, vocab, seed=1)
    dist_fn = pt.mlm_distribution_fn(small_cfg(), encoder, store,
                                     sub.attention_mask, masked.targets)
    emb = encoder.embed(store, masked.masked_ids)
    with ad.no_grad():
        dist = dist_fn(emb).data
    np.testing.assert_allclose(dist.sum(axis=1), 1.0, atol=1e-9)
    assert (dist >= 0).all()


def test_pretrain_all_handoff_and_lineage(setup, tmp_path):
    recs, vocab, enc_cfg = setup
    cfg = small_cfg(max_steps_per_epoch=2)
    out = pt.pretrain_all(cfg, enc_cfg, recs, vocab, str(tmp_path / "run"))
    # stage-2 initial parameters are exactly the stage-1 finals
    _, manifest2 = load_checkpoint(out["stage2_dir"])
    assert manifest2["meta"]["parent_checksum"] == out["stage1_checksum"]
    assert manifest2["meta"]["stage2_initial_checksum"] == out["stage1_checksum"]
    store1, manifest1 = load_checkpoint(out["stage1_dir"])
    assert store1.checksum() == out["stage1_checksum"]
    assert manifest1["meta"]["stage"] == "stage1"
    assert (tmp_path / "run" / "vocab.json").exists()
    assert (tmp_path / "run" / "trainlog.jsonl").exists()
    lines = (tmp_path / "run" / "trainlog.jsonl").read_text().splitlines()
    stages = [json.loads(l)["stage"] for l in lines]
    assert "stage1" in stages and "stage2" in stages


def test_pretrain_all_skip_stage1_provenance(setup, tmp_path):
    recs, vocab, enc_cfg = setup
    cfg = small_cfg(max_steps_per_epoch=2)
    out = pt.pretrain_all(cfg, enc_cfg, recs, vocab, str(tmp_path / "skip"),
                          skip_stage1=True)
    _, manifest = load_checkpoint(out["stage2_dir"])
    assert manifest["meta"]["skipped_stage1"] is True
    assert manifest["meta"]["parent_checksum"] is None
    assert out["stage1_dir"] is None


def test_dump_corruption_flag(setup, tmp_path):
    recs, vocab, enc_cfg = setup
    encoder, store = pt.init_model(enc_cfg, seed=13)
    audit = tmp_path / "audit.txt"
    pt.run_stage1(small_cfg(max_steps_per_epoch=1), recs, vocab, encoder, store,
                  dump_corruption_path=str(audit))
    assert audit.exists() and "sequence 0" in audit.read_text()


def test_evaluate_rstd_outputs(setup):
    recs, vocab, enc_cfg = setup
    encoder, store = pt.init_model(enc_cfg, seed=14)
    loss, auc = pt.evaluate_rstd(small_cfg(), recs[:40], vocab, encoder, store, seed=3)
    assert np.isfinite(loss) and loss > 0
    assert 0.0 <= auc <= 1.0


def test_evaluate_alignment_outputs(setup):
    recs, vocab, enc_cfg = setup
    encoder, store = pt.init_model(enc_cfg, seed=15)
    pos, neg = pt.evaluate_alignment(small_cfg(), recs[:24], vocab, encoder, store, seed=3)
    assert -1.0 <= neg <= 1.0 and -1.0 <= pos <= 1.0
