import numpy as np
import pytest

from urlbert_lab import autodiff as ad
from urlbert_lab import corpus as cp
from urlbert_lab import finetune as ft
from urlbert_lab import pretrain as pt
from urlbert_lab import tokenizer as tk
from urlbert_lab.encoder import Encoder, EncoderConfig, HiddenStack
from urlbert_lab.optim import grad_check


@pytest.fixture(scope="module")
def setup():
    recs = cp.synth_corpus(120, seed=30)
    vocab = tk.train_vocab(recs, target_size=200)
    enc_cfg = EncoderConfig(layers=4, heads=2, hidden=16, max_len=32,
                            vocab_size=vocab.size, ffn_mult=2, dropout_p=0.0)
    encoder, store = pt.init_model(enc_cfg, seed=40)
    return recs, vocab, enc_cfg, encoder, store


def make_task(task_id=0, n_train=60, n_test=30, families=(0, 1), head=None, vocab=None):
    train = cp.synth_task(n_train, seed=50 + task_id, families=families, task_id=task_id)
    test = cp.synth_task(n_test, seed=90 + task_id, families=families, task_id=task_id)
    head = head or ft.HeadSpec(kind="cls_layer", num_classes=2)
    return ft.TaskSpec(task_id=task_id, train=train, test=test, head=head)


# ---------------------------------------------------------------- head specs


def test_head_spec_validation():
    with pytest.raises(ValueError, match="unknown head kind"):
        ft.HeadSpec(kind="nope", num_classes=2)
    with pytest.raises(ValueError, match="num_classes"):
        ft.HeadSpec(kind="cnn_head", num_classes=1)
    with pytest.raises(ValueError, match="odd"):
        ft.HeadSpec(kind="cnn_head", num_classes=2, kernel=4)


# ---------------------------------------------------------------- pooling


def _stack_from(vals):
    # vals: list of (B, L, H) arrays
    return HiddenStack(states=[ad.constant(v) for v in vals])


def test_pool_degenerate_equality(rng):
    # identical CLS across the four final layers -> every variant returns it
    B, L, H = 3, 5, 8
    base = rng.normal(size=(B, L, H))
    states = [rng.normal(size=(B, L, H)) for _ in range(2)] + [base.copy() for _ in range(4)]
    stack = _stack_from(states)
    from urlbert_lab.checkpoint import ParamStore
    store = ParamStore()
    for kind in ("last4_mean", "last4_max", "last4_min", "last4_weighted", "last4_attention"):
        spec = ft.HeadSpec(kind=kind, num_classes=2)
        ft.init_head_params(store, spec, H, f"p{kind}", seed=1)
        out = ft.pool(stack, spec, store=store, prefix=f"p{kind}")
        np.testing.assert_allclose(out.data, base[:, 0, :], atol=1e-6)


def test_pool_concat_width_and_mean(f64, rng):
    B, L, H = 2, 4, 6
    states = [rng.normal(size=(B, L, H)) for _ in range(7)]
    stack = _stack_from(states)
    out = ft.pool(stack, ft.HeadSpec(kind="last4_concat", num_classes=2))
    assert out.shape == (B, 4 * H)
    mean = ft.pool(stack, ft.HeadSpec(kind="last4_mean", num_classes=2))
    want = np.stack([s[:, 0, :] for s in states[-4:]], axis=1).mean(axis=1)
    np.testing.assert_allclose(mean.data, want, rtol=1e-6)


def test_pool_weighted_uniform_logits_is_average(rng):
    B, L, H = 2, 3, 4
    states = [rng.normal(size=(B, L, H)) for _ in range(5)]
    stack = _stack_from(states)
    from urlbert_lab.checkpoint import ParamStore
    store = ParamStore()
    spec = ft.HeadSpec(kind="last4_weighted", num_classes=2)
    ft.init_head_params(store, spec, H, "w", seed=0)  # pool.w starts at zeros
    out = ft.pool(stack, spec, store=store, prefix="w")
    want = np.stack([s[:, 0, :] for s in states[-4:]], axis=1).mean(axis=1)
    np.testing.assert_allclose(out.data, want, rtol=1e-6)


def test_pool_cls_layer_pick(f64, rng):
    B, L, H = 2, 3, 4
    states = [rng.normal(size=(B, L, H)) for _ in range(4)]
    stack = _stack_from(states)
    out = ft.pool(stack, ft.HeadSpec(kind="cls_layer", num_classes=2, layer=1))
    np.testing.assert_array_equal(out.data, states[1][:, 0, :])


def test_pool_depth_below_4_rejected(rng):
    stack = _stack_from([rng.normal(size=(1, 2, 4)) for _ in range(3)])  # depth 2
    with pytest.raises(ValueError, match="depth"):
        ft.pool(stack, ft.HeadSpec(kind="last4_mean", num_classes=2))


# ---------------------------------------------------------------- cnn head


def test_cnn_head_shape_and_pad_invariance(setup, rng):
    recs, vocab, enc_cfg, encoder, store = setup
    spec = ft.HeadSpec(kind="cnn_head", num_classes=3, filters=8)
    ft.init_head_params(store.clone(), spec, enc_cfg.hidden, "tmp", seed=0)
    s = store.clone()
    ft.init_head_params(s, spec, enc_cfg.hidden, "h", seed=0)
    B, L, H = 4, 10, enc_cfg.hidden
    states = rng.normal(size=(B, L, H))
    mask = np.zeros((B, L), dtype=np.int8)
    lens = [10, 3, 7, 1]
    for b, n in enumerate(lens):
        mask[b, :n] = 1
    logits = ft.cnn_head_forward(ad.constant(states), mask, s, "h", spec)
    assert logits.shape == (B, 3)
    # junk in padded positions must not change the logits
    states2 = states.copy()
    states2[mask == 0] = rng.normal(size=(mask == 0).sum() * H).reshape(-1, H) * 50
    logits2 = ft.cnn_head_forward(ad.constant(states2), mask, s, "h", spec)
    np.testing.assert_array_equal(logits.data, logits2.data)


def test_cnn_head_all_pad_rejected(setup, rng):
    recs, vocab, enc_cfg, encoder, store = setup
    spec = ft.HeadSpec(kind="cnn_head", num_classes=2, filters=4)
    s = store.clone()
    ft.init_head_params(s, spec, enc_cfg.hidden, "h", seed=0)
    mask = np.zeros((1, 5), dtype=np.int8)
    with pytest.raises(ValueError, match="all-pad"):
        ft.cnn_head_forward(ad.constant(rng.normal(size=(1, 5, enc_cfg.hidden))),
                            mask, s, "h", spec)


def test_cnn_head_gradcheck(f64, rng):
    from urlbert_lab.checkpoint import ParamStore
    spec = ft.HeadSpec(kind="cnn_head", num_classes=2, filters=3)
    store = ParamStore()
    ft.init_head_params(store, spec, 4, "h", seed=1)
    states = ad.Tensor(rng.normal(size=(2, 5, 4)), requires_grad=True)
    mask = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]], dtype=np.int8)
    labels = np.array([0, 1])

    def f():
        logits = ft.cnn_head_forward(states, mask, store, "h", spec)
        from urlbert_lab.objectives import loss_cls
        return loss_cls(logits, labels).value

    params = {"states": states, **{n: store[n] for n in store.names()}}
    report = grad_check(f, params)
    assert report.passed, report.summary()


def test_pool_heads_gradcheck(f64, rng):
    from urlbert_lab.checkpoint import ParamStore
    B, L, H = 2, 3, 4
    states = [ad.Tensor(rng.normal(size=(B, L, H)), requires_grad=True) for _ in range(5)]
    stack = HiddenStack(states=states)
    for kind in ("last4_weighted", "last4_attention"):
        store = ParamStore()
        spec = ft.HeadSpec(kind=kind, num_classes=2)
        ft.init_head_params(store, spec, H, "h", seed=2)
        # move pooling weights off the symmetric zero point
        if kind == "last4_weighted":
            store["h.pool.w"].data = np.array([0.2, -0.1, 0.4, 0.05])

        def f():
            logits = ft.head_forward(store, spec, stack, np.ones((B, L)), "h")
            from urlbert_lab.objectives import loss_cls
            return loss_cls(logits, np.array([0, 1])).value

        params = {n: store[n] for n in store.names()}
        params["s4"] = states[4]
        report = grad_check(f, params)
        assert report.passed, f"{kind}: {report.summary()}"


# ---------------------------------------------------------------- two-stage


def test_two_stage_freezes_encoder_and_trains(setup):
    recs, vocab, enc_cfg, encoder, store = setup
    s = store.clone()
    task = make_task(task_id=1)
    sched = ft.FinetuneSchedule(stage_a_epochs=2, stage_b_epochs=1, batch_size=16, seed=7)
    enc_before = s.checksum(encoder.param_names())
    s, result = ft.finetune_two_stage(s, encoder, vocab, task, sched)
    assert result["stage_a"].accuracy >= 0.5
    assert result["stage_b"].accuracy >= result["stage_a"].accuracy - 0.2
    # encoder changed only in stage B
    assert any(r["stage"] == "ft_a" for r in result["log"])
    assert any(r["stage"] == "ft_b" for r in result["log"])


def test_two_stage_zero_stage_a_degenerates(setup):
    recs, vocab, enc_cfg, encoder, store = setup
    s = store.clone()
    task = make_task(task_id=2)
    sched = ft.FinetuneSchedule(stage_a_epochs=0, stage_b_epochs=1, batch_size=16, seed=3)
    s, result = ft.finetune_two_stage(s, encoder, vocab, task, sched)
    assert all(r["stage"] == "ft_b" for r in result["log"])


def test_two_stage_encoder_checksum_stable_through_stage_a(setup):
    recs, vocab, enc_cfg, encoder, store = setup
    s = store.clone()
    task = make_task(task_id=3)
    sched = ft.FinetuneSchedule(stage_a_epochs=3, stage_b_epochs=0, batch_size=16, seed=5)
    enc_names = encoder.param_names()
    before = s.checksum(enc_names)
    s, result = ft.finetune_two_stage(s, encoder, vocab, task, sched)
    assert s.checksum(enc_names) == before  # bit-frozen through stage A


def test_two_stage_learns_synthetic_families(setup):
    # untrained encoder, so give the head room: a long stage A plus a joint
    # stage at a workable rate must separate the two disjoint keyword pools
    recs, vocab, enc_cfg, encoder, store = setup
    s = store.clone()
    task = make_task(task_id=4, n_train=160, n_test=60)
    sched = ft.FinetuneSchedule(stage_a_epochs=20, stage_b_epochs=4, batch_size=8,
                                stage_b_lr=1e-3, seed=9)
    s, result = ft.finetune_two_stage(s, encoder, vocab, task, sched)
    assert result["stage_b"].accuracy >= 0.9


# ---------------------------------------------------------------- multi-task


def test_multitask_batches_are_homogeneous_and_exhaustive(setup):
    recs, vocab, enc_cfg, encoder, store = setup
    s = store.clone()
    tasks = [make_task(task_id=10, n_train=40), make_task(task_id=11, n_train=24,
                                                          families=(2, 3))]
    s, per_task, batch_log = ft.finetune_multitask(s, encoder, vocab, tasks,
                                                   epochs=2, batch_size=16, seed=4)
    assert set(per_task) == {10, 11}
    for epoch in (0, 1):
        eb = [r for r in batch_log if r["epoch"] == epoch]
        # ceil(40/16)=3 and ceil(24/16)=2 batches per epoch
        assert sum(1 for r in eb if r["task"] == 10) == 3
        assert sum(1 for r in eb if r["task"] == 11) == 2
        assert sum(r["batch_size"] for r in eb if r["task"] == 10) == 40
        assert sum(r["batch_size"] for r in eb if r["task"] == 11) == 24


def test_multitask_single_task_equals_joint(setup):
    recs, vocab, enc_cfg, encoder, store = setup
    task = make_task(task_id=12, n_train=32)
    s1, _, log1 = ft.finetune_multitask(store.clone(), encoder, vocab, [task],
                                        epochs=1, batch_size=8, seed=6)
    s2, _, log2 = ft.finetune_joint(store.clone(), encoder, vocab, task,
                                    epochs=1, batch_size=8, seed=6)
    assert [r["loss"] for r in log1] == [r["loss"] for r in log2]
    assert s1.checksum() == s2.checksum()


def test_multitask_duplicate_ids_rejected(setup):
    recs, vocab, enc_cfg, encoder, store = setup
    t = make_task(task_id=13)
    with pytest.raises(ValueError, match="duplicate task ids"):
        ft.finetune_multitask(store.clone(), encoder, vocab, [t, t], epochs=1)


def test_multitask_empty_dataset_rejected():
    with pytest.raises(ValueError, match="empty train set"):
        ft.TaskSpec(task_id=0, train=[], test=[], head=ft.HeadSpec("cls_layer", 2))


def test_multitask_other_heads_untouched(setup):
    recs, vocab, enc_cfg, encoder, store = setup
    s = store.clone()
    tasks = [make_task(task_id=20, n_train=16), make_task(task_id=21, n_train=16,
                                                          families=(2, 3))]
    # after init, train 1 epoch; each head's moments only advance on its own batches
    s, per_task, batch_log = ft.finetune_multitask(s, encoder, vocab, tasks,
                                                   epochs=1, batch_size=16, seed=1)
    for r in batch_log:
        assert r["task"] in (20, 21)
    assert len({r["task"] for r in batch_log}) == 2
