import io
import math

import numpy as np
import pytest

from crma.autodiff import Tape
from crma.data import BatchIterator, ShiftSpec, TaskSpec, generate_task
from crma.losses import ast_beta, domain_weights, intra_consistency_loss, pseudo_label, source_ce_loss
from crma.nn import EXTRACTOR_GROUP, CrmaModel, parameters_digest
from crma.trainer import (
    AblationFlags,
    ConfidenceTracker,
    DivergedRunError,
    SgdOptimizer,
    TrainConfig,
    TrainState,
    evaluate,
    learning_rate,
    load_checkpoint,
    save_checkpoint,
    step_ast,
    step_classifiers,
    step_extractor,
    step_source,
    train,
    write_history_csv,
)


def tiny_task(seed=0, n=80):
    return generate_task(TaskSpec(samples_per_domain=n, seed=seed))


def fresh_state(task, seed=0, momentum=True, **cfg_kwargs):
    cfg = TrainConfig(
        epochs=1,
        batch_per_domain=16,
        seed=seed,
        optimizer="sgd_momentum" if momentum else "sgd",
        extractor_hidden=(16, 8),
        head_hidden=(8,),
        **cfg_kwargs,
    )
    model = CrmaModel(
        input_dim=2,
        num_classes=task.spec.num_classes,
        num_domains=task.num_sources,
        extractor_hidden=cfg.extractor_hidden,
        head_hidden=cfg.head_hidden,
        rng=np.random.default_rng(seed),
    )
    optimizer = SgdOptimizer(model.parameters(), momentum=0.9 if momentum else 0.0)
    return TrainState(
        model=model,
        optimizer=optimizer,
        tracker=ConfidenceTracker(task.num_sources),
        config=cfg,
    )


def first_batch(task, b=16, seed=0):
    return next(iter(BatchIterator(task.sources, task.target, b, seed=seed)))


def digests(model):
    ext = parameters_digest(model.group_parameters(EXTRACTOR_GROUP))
    clf = parameters_digest(model.group_parameters("classifier"))
    return ext, clf


# individual phases -----------------------------------------------------------


def test_step_source_zero_lr_keeps_parameters():
    task = tiny_task()
    state = fresh_state(task)
    batch = first_batch(task)
    before = parameters_digest(state.model.parameters())
    loss = step_source(state, batch, lr=0.0)
    assert loss > 0
    assert parameters_digest(state.model.parameters()) == before


def test_step_source_descends_on_full_batch():
    task = tiny_task(seed=4)
    state = fresh_state(task, seed=4)
    n_target = task.target.features.shape[0]
    batch = first_batch(task, b=min(80, n_target))
    values = [step_source(state, batch, lr=0.05) for _ in range(40)]
    assert values[-1] < values[0]
    assert all(b <= a + 1e-6 for a, b in zip(values, values[1:]))  # near-monotone


def test_source_gradients_stay_in_own_heads():
    task = tiny_task(seed=5)
    state = fresh_state(task, seed=5)
    batch = first_batch(task)
    model = state.model
    with Tape() as tape:
        feats = model.forward_features(batch.source_features[0])
        pair = model.predict_pair(0, feats)
        loss = source_ce_loss([pair], [batch.source_labels[0]])
    state.optimizer.zero_grad()
    tape.backward(loss)
    for p in model.parameters():
        if p.group.startswith("classifier.0"):
            assert p.tensor.grad is not None
        elif p.group != EXTRACTOR_GROUP:
            assert p.tensor.grad is None


def test_step_classifiers_freezes_extractor():
    task = tiny_task(seed=6)
    state = fresh_state(task, seed=6)
    batch = first_batch(task)
    ext_before, clf_before = digests(state.model)
    result = step_classifiers(state, batch, lr=1e-3)
    assert result is not None
    ext_after, clf_after = digests(state.model)
    assert ext_after == ext_before
    assert clf_after != clf_before


def test_step_classifiers_skipped_when_ablated():
    task = tiny_task(seed=7)
    state = fresh_state(task, seed=7, ablation=AblationFlags(intra_da=False))
    batch = first_batch(task)
    before = parameters_digest(state.model.parameters())
    assert step_classifiers(state, batch, lr=1e-3) is None
    assert parameters_digest(state.model.parameters()) == before


def test_step_extractor_freezes_classifiers():
    task = tiny_task(seed=8)
    state = fresh_state(task, seed=8)
    batch = first_batch(task)
    ext_before, clf_before = digests(state.model)
    result = step_extractor(state, batch, lr=1e-3)
    assert result is not None
    ext_after, clf_after = digests(state.model)
    assert clf_after == clf_before
    assert ext_after != ext_before


def test_step_extractor_noop_when_single_source_and_intra_off():
    task = generate_task(
        TaskSpec(samples_per_domain=60, seed=9, source_shifts=[ShiftSpec()])
    )
    state = fresh_state(task, seed=9, ablation=AblationFlags(intra_da=False, inter_da=True))
    batch = first_batch(task)
    before = parameters_digest(state.model.parameters())
    assert step_extractor(state, batch, lr=1e-3) is None
    assert parameters_digest(state.model.parameters()) == before


def test_minmax_direction_on_full_batch():
    # after source pretraining, the classifier step pushes the pair
    # discrepancy up and the extractor step pushes its objective down
    increases, decreases = 0, 0
    for seed in range(3):
        task = tiny_task(seed=seed, n=120)
        state = fresh_state(task, seed=seed, momentum=False)
        n_target = task.target.features.shape[0]
        batch = first_batch(task, b=min(120, n_target), seed=seed)
        for _ in range(150):
            step_source(state, batch, lr=0.05)

        def measure():
            feats = state.model.forward_features(batch.target_features)
            intra, _ = intra_consistency_loss(state.model.predict_all_pairs(feats))
            return intra.item()

        before = measure()
        step_classifiers(state, batch, lr=1e-4)
        if measure() > before:
            increases += 1

        before_obj = measure()
        step_extractor(state, batch, lr=1e-4)
        if measure() < before_obj:
            decreases += 1
    assert increases == 3 and decreases == 3


def test_step_ast_skipped_when_ablated_or_before_start():
    task = tiny_task(seed=10)
    batch = first_batch(task)

    state = fresh_state(task, seed=10, ablation=AblationFlags(ast=False))
    before = parameters_digest(state.model.parameters())
    assert step_ast(state, batch, lr=1e-3) is None
    assert parameters_digest(state.model.parameters()) == before
    assert state.tracker.counts.sum() == 0

    state = fresh_state(task, seed=10, ast_start_epoch=3)
    state.epoch = 0
    assert step_ast(state, batch, lr=1e-3) is None


def test_step_ast_first_iteration_matches_hand_oracle():
    task = tiny_task(seed=11)
    state = fresh_state(task, seed=11, record_ast_trace=True)
    batch = first_batch(task)

    # oracle forward pass before the step mutates anything
    model = state.model
    feats = model.forward_features(batch.target_features)
    pairs = model.predict_all_pairs(feats)
    k = task.spec.num_classes
    d_expected = np.stack(
        [np.abs(pa.probs.values - pb.probs.values).sum(axis=1) / k for pa, pb in pairs],
        axis=1,
    )
    means_expected = d_expected.mean(axis=0)  # first batch bootstraps the means
    mean_preds = np.stack([(pa.probs.values + pb.probs.values) / 2 for pa, pb in pairs])

    result = step_ast(state, batch, lr=1e-3)
    assert result is not None
    trace = state.ast_trace[0]

    np.testing.assert_allclose(trace["d_matrix"], d_expected, rtol=1e-12)
    np.testing.assert_allclose(trace["running_means"], means_expected, rtol=1e-12)
    for i in range(d_expected.shape[0]):
        w = domain_weights(d_expected[i], means_expected, state.config.lam)
        np.testing.assert_allclose(trace["raw_weights"][i], w.raw, rtol=1e-12)
        np.testing.assert_allclose(
            trace["pseudo_probs"][i], pseudo_label(mean_preds[:, i, :], w), rtol=1e-12
        )
        assert trace["betas"][i] == pytest.approx(ast_beta(w.raw, means_expected), rel=1e-12)


def test_step_ast_update_then_weight_golden_trace():
    # two iterations on a fixed setup; the frozen numbers pin down the
    # update-then-weight tracker order
    task = tiny_task(seed=12)
    state = fresh_state(task, seed=12, record_ast_trace=True)
    stream = iter(BatchIterator(task.sources, task.target, 16, seed=0))
    for _ in range(2):
        step_ast(state, next(stream), lr=1e-3)
    golden_means = [
        [0.04471152171515645, 0.046852316450951725, 0.021901119072283738],
        [0.03677322291053872, 0.05246596254989201, 0.026094707220443696],
    ]
    np.testing.assert_allclose(state.ast_trace[0]["running_means"], golden_means[0], rtol=1e-9)
    np.testing.assert_allclose(state.ast_trace[1]["running_means"], golden_means[1], rtol=1e-9)
    golden_beta0 = 4.721722202852189
    assert state.ast_trace[0]["betas"][0] == pytest.approx(golden_beta0, rel=1e-9)


def test_step_ast_zero_gradient_when_heads_match_pseudo():
    task = tiny_task(seed=13)
    state = fresh_state(task, seed=13, momentum=False)
    model = state.model
    reference = model.heads[(0, "a")].params
    for key in model.heads:
        for p_dst, p_src in zip(model.heads[key].params, reference):
            p_dst.tensor.values[...] = p_src.tensor.values
    batch = first_batch(task)
    before = parameters_digest(model.parameters())
    result = step_ast(state, batch, lr=1e-3)
    assert result is not None and result[0] == pytest.approx(0.0, abs=1e-15)
    assert parameters_digest(model.parameters()) == before


def test_parameter_groups_partition_exactly():
    model = CrmaModel(2, 3, 2, (8, 4), (4,), rng=np.random.default_rng(0))
    params = model.parameters()
    assert len({p.name for p in params}) == len(params)
    groups = {p.group for p in params}
    assert groups == {EXTRACTOR_GROUP, "classifier.0.a", "classifier.0.b",
                      "classifier.1.a", "classifier.1.b"}
    covered = set()
    for g in groups:
        members = {p.name for p in params if p.group == g}
        assert not covered & members
        covered |= members
    assert covered == {p.name for p in params}


# confidence tracker -------------------------------------------------------------


def test_tracker_matches_explicit_replay():
    rng = np.random.default_rng(14)
    tracker = ConfidenceTracker(3)
    history = []
    for _ in range(50):
        d = rng.uniform(0.0, 1.0, (rng.integers(1, 9), 3))
        tracker.update(d)
        history.append(d)
        full = np.vstack(history)
        np.testing.assert_allclose(tracker.means, full.mean(axis=0), atol=1e-12)
    np.testing.assert_array_equal(tracker.counts, full.shape[0])


def test_tracker_counts_monotone():
    tracker = ConfidenceTracker(2)
    last = tracker.counts.copy()
    for n in (3, 1, 7):
        tracker.update(np.zeros((n, 2)))
        assert np.all(tracker.counts >= last)
        last = tracker.counts.copy()


# full training loop ---------------------------------------------------------------


def test_all_ablations_off_equals_pure_source_loop():
    task = tiny_task(seed=15)
    cfg = TrainConfig(
        epochs=2,
        batch_per_domain=16,
        seed=15,
        ablation=AblationFlags(False, False, False),
        extractor_hidden=(16, 8),
        head_hidden=(8,),
    )
    state, _ = train(cfg, task)

    # hand-rolled source-only loop with the same seeds
    from crma.seeds import stream_rng, stream_seed

    model = CrmaModel(2, 2, task.num_sources, (16, 8), (8,), rng=stream_rng(15, "init"))
    optimizer = SgdOptimizer(model.parameters(), momentum=0.9)
    iterator = BatchIterator(task.sources, task.target, 16, stream_seed(15, "shuffle"))
    stream = iter(iterator)
    for _ in range(2 * iterator.batches_per_epoch):
        batch = next(stream)
        with Tape() as tape:
            pairs = []
            for m, x in enumerate(batch.source_features):
                feats = model.forward_features(x)
                pairs.append(model.predict_pair(m, feats))
            loss = source_ce_loss(pairs, batch.source_labels)
        optimizer.zero_grad()
        tape.backward(loss)
        optimizer.step(1e-3)

    assert parameters_digest(model.parameters()) == parameters_digest(state.model.parameters())


def test_training_is_deterministic():
    task = tiny_task(seed=16)
    cfg = TrainConfig(epochs=2, batch_per_domain=16, seed=16, extractor_hidden=(16, 8), head_hidden=(8,))
    _, hist_a = train(cfg, task)
    _, hist_b = train(cfg, task)
    assert hist_a == hist_b


def test_history_shape_and_finiteness():
    task = tiny_task(seed=17)
    cfg = TrainConfig(epochs=3, batch_per_domain=16, seed=17, extractor_hidden=(16, 8), head_hidden=(8,))
    _, history = train(cfg, task)
    assert len(history) == 3
    for row in history:
        for key in ("L_src", "L_intra", "L_inter", "L_AST", "lr", "target_acc"):
            assert math.isfinite(row[key])
        for m in range(task.num_sources):
            assert math.isfinite(row[f"mean_w_{m}"])
            assert math.isfinite(row[f"bar_L_{m}"])


def test_cosine_schedule_endpoints():
    cfg = TrainConfig(epochs=10, scheduler="cosine_annealing", base_lr=1e-3)
    assert learning_rate(cfg, 0) == pytest.approx(1e-3)
    assert learning_rate(cfg, 9) <= 0.01 * 1e-3 + 1e-15
    mid = [learning_rate(cfg, e) for e in range(10)]
    assert all(a >= b for a, b in zip(mid, mid[1:]))  # monotone decay

    constant = TrainConfig(epochs=10, scheduler="constant", base_lr=1e-3)
    assert learning_rate(constant, 7) == 1e-3


def test_divergence_guard_aborts_with_history(monkeypatch):
    import crma.losses as losses_module
    from crma.autodiff import NumericError, Tensor

    task = tiny_task(seed=18)
    cfg = TrainConfig(epochs=5, batch_per_domain=16, seed=18, extractor_hidden=(16, 8), head_hidden=(8,))

    # source_ce_loss runs twice per iteration (source + classifier phases);
    # 80-sample domains at batch 16 give 5 iterations per epoch, so blow up
    # early in epoch 2
    real_ce = losses_module.source_ce_loss
    calls = {"n": 0}

    def exploding_ce(pairs, labels):
        calls["n"] += 1
        if calls["n"] > 10:
            return Tensor(2e6)
        return real_ce(pairs, labels)

    monkeypatch.setattr(losses_module, "source_ce_loss", exploding_ce)
    with pytest.raises(DivergedRunError) as excinfo:
        train(cfg, task)
    assert excinfo.value.iteration > 0
    assert len(excinfo.value.history) >= 1  # completed epochs survive

    # a numeric overflow mid-run surfaces the same way
    monkeypatch.setattr(
        losses_module,
        "source_ce_loss",
        lambda pairs, labels: (_ for _ in ()).throw(NumericError("overflow")),
    )
    with pytest.raises(DivergedRunError, match="overflow"):
        train(cfg, task)


def test_extractor_lr_multiplier_slows_extractor():
    task = tiny_task(seed=19)
    batch = first_batch(task)
    deltas = {}
    for mult in (1.0, 0.1):
        state = fresh_state(task, seed=19, extractor_lr_multiplier=mult, momentum=False)
        before = [p.tensor.values.copy() for p in state.model.extractor.params]
        step_source(state, batch, lr=1e-2)
        after = state.model.extractor.params
        deltas[mult] = sum(
            float(np.abs(a.tensor.values - b).sum()) for a, b in zip(after, before)
        )
    assert deltas[0.1] < deltas[1.0]
    assert deltas[0.1] == pytest.approx(0.1 * deltas[1.0], rel=1e-9)


# evaluation ------------------------------------------------------------------------


def test_evaluate_perfect_and_chance_levels():
    task = generate_task(
        TaskSpec(
            generator="gaussian_blobs",
            num_classes=2,
            samples_per_domain=400,
            source_shifts=[ShiftSpec()],
            target_shift=ShiftSpec(),
            seed=20,
            generator_noise=0.05,  # far-apart blobs: trivially separable
        )
    )
    cfg = TrainConfig(epochs=10, batch_per_domain=64, seed=20, extractor_hidden=(16, 8), head_hidden=(8,))
    state, _ = train(cfg, task)
    acc, per_class = evaluate(state.model, task.target_test_features, task.target_test_labels)
    assert acc == 1.0
    np.testing.assert_array_equal(per_class, 1.0)

    # labels independent of features: any fixed model sits at chance
    rng = np.random.default_rng(21)
    x = rng.standard_normal((2000, 2))
    y = np.tile([0, 1], 1000)
    model = CrmaModel(2, 2, 1, (8,), (4,), rng=rng)
    acc, _ = evaluate(model, x, y)
    assert abs(acc - 0.5) < 0.05


def test_evaluate_matches_explicit_loop():
    task = tiny_task(seed=22)
    model = CrmaModel(2, 2, 3, (8,), (4,), rng=np.random.default_rng(22))
    acc, per_class = evaluate(model, task.target_test_features, task.target_test_labels)
    probs, labels = model.final_prediction(task.target_test_features)
    correct = sum(
        1 for i in range(labels.size) if labels[i] == task.target_test_labels[i]
    )
    assert acc == pytest.approx(correct / labels.size)
    for c in (0, 1):
        members = [i for i in range(labels.size) if task.target_test_labels[i] == c]
        expected = sum(1 for i in members if labels[i] == c) / len(members)
        assert per_class[c] == pytest.approx(expected)


# persistence ------------------------------------------------------------------------


def test_checkpoint_round_trip_and_resumed_evaluation(tmp_path):
    task = tiny_task(seed=23)
    cfg = TrainConfig(epochs=2, batch_per_domain=16, seed=23, extractor_hidden=(16, 8), head_hidden=(8,))
    state, _ = train(cfg, task)
    path = tmp_path / "trainer.ckpt"
    save_checkpoint(state, path)
    restored = load_checkpoint(path, cfg)

    assert parameters_digest(restored.model.parameters()) == parameters_digest(
        state.model.parameters()
    )
    for p in state.optimizer.params:
        np.testing.assert_array_equal(
            restored.optimizer.velocity[p.name], state.optimizer.velocity[p.name]
        )
    np.testing.assert_array_equal(restored.tracker.sums, state.tracker.sums)
    np.testing.assert_array_equal(restored.tracker.counts, state.tracker.counts)
    assert (restored.iteration, restored.epoch) == (state.iteration, state.epoch)

    acc_orig, _ = evaluate(state.model, task.target_test_features, task.target_test_labels)
    acc_restored, _ = evaluate(restored.model, task.target_test_features, task.target_test_labels)
    assert acc_restored == acc_orig

    save_checkpoint(restored, tmp_path / "second.ckpt")
    assert (tmp_path / "second.ckpt").read_bytes() == path.read_bytes()


def test_history_csv_schema():
    task = tiny_task(seed=24)
    cfg = TrainConfig(epochs=2, batch_per_domain=16, seed=24, extractor_hidden=(16, 8), head_hidden=(8,))
    _, history = train(cfg, task)
    buf = io.StringIO()
    write_history_csv(history, task.num_sources, buf)
    lines = buf.getvalue().strip().splitlines()
    assert lines[0] == (
        "epoch,L_src,L_intra,L_inter,L_AST,lr,target_acc,"
        "mean_w_0,mean_w_1,mean_w_2,bar_L_0,bar_L_1,bar_L_2"
    )
    assert len(lines) == 3
    parsed = [float(v) for v in lines[1].split(",")]
    assert parsed[0] == 0.0
