import numpy as np
import pytest

from duoadapt.autodiff import Adam, Tensor
from duoadapt.data import Dataset, PdaTaskSpec, gen_synthetic_pda
from duoadapt.losses import KernelSpec
from duoadapt.model import build_models, parameter_groups
from duoadapt.train import (STEP_MAP, TRACE_COLUMNS, BatchSampler, ModelConfig,
                            RewardTrace, StepId, TraceRow, TrainConfig,
                            build_extractor, compute_reward, eval_mode,
                            pretrain_contrastive, run_epoch, run_step,
                            selection_study, stopping_check,
                            train_interactive, train_source_only_baseline)

FAST = TrainConfig(pretrain_epochs=2, epochs=2, iters_per_step=2,
                   batch_size=16, desired_reward=1.0)
SMALL = ModelConfig(feature_dim=8, mlp_hidden=(16,), proj_dim=4,
                    rda_hidden=(12, 8, 12), clf_hidden=(10, 8))


def _task(seed=0, **kw):
    kw.setdefault("source_classes", 2)
    kw.setdefault("target_classes", (0, 1))
    kw.setdefault("samples_per_class", 16)
    return gen_synthetic_pda(PdaTaskSpec(seed=seed, **kw))


def _pretrained_pair(source, target, cfg=FAST, model_cfg=SMALL):
    in_dim = source.inputs.shape[-1]
    g_s = build_extractor(model_cfg, in_dim, cfg.seed)
    g_t = build_extractor(model_cfg, in_dim, cfg.seed)
    pretrain_contrastive(g_s, source, cfg, rng=np.random.default_rng(1))
    pretrain_contrastive(g_t, target, cfg, rng=np.random.default_rng(2))
    n_classes = max(source.labels) + 1
    return build_models(n_classes, g_s, g_t, seed=3,
                        rda_hidden=model_cfg.rda_hidden,
                        clf_hidden=model_cfg.clf_hidden)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(desired_reward=0.0)
    with pytest.raises(ValueError):
        TrainConfig(desired_reward=1.5)
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=-1.0)


def test_step_map_schedule():
    assert STEP_MAP[StepId.S1_train_Cs] == ("L_s_s", "theta_s")
    assert STEP_MAP[StepId.S2_align_Fs] == ("MMD_s", "phi_s")
    assert STEP_MAP[StepId.S3_guide_Ct] == ("L_t_t", "theta_t")
    assert STEP_MAP[StepId.S4_align_Ft] == ("MMD_t", "phi_t")
    assert STEP_MAP[StepId.S5_source_Ct] == ("L_t_s", "theta_t")
    assert STEP_MAP[StepId.S6_feedback_Fs] == ("L_st_t", "phi_s")
    # frozen extractor groups are never scheduled
    scheduled = {g for _, g in STEP_MAP.values()}
    assert scheduled == {"theta_s", "theta_t", "phi_s", "phi_t"}


def test_reward_trace_validation_and_csv():
    trace = RewardTrace(config_hash="deadbeef")
    losses = {c: 0.5 for c in TRACE_COLUMNS[2:8]}
    trace.append(TraceRow(1, 0.25, losses, "epoch_1", 0.5))
    with pytest.raises(ValueError, match="out of"):
        trace.append(TraceRow(2, 1.5, losses, "epoch_2"))
    with pytest.raises(ValueError, match="strictly increase"):
        trace.append(TraceRow(1, 0.5, losses, "epoch_1b"))
    trace.append(TraceRow(2, 0.75, losses, "epoch_2"))
    csv_text = trace.to_csv()
    lines = csv_text.splitlines()
    assert lines[0] == "# config_hash=deadbeef"
    assert lines[2] == ",".join(TRACE_COLUMNS)
    assert len(lines) == 5


def test_eval_mode_restores_training_flags():
    source, target, _ = _task()
    ms, mt = _pretrained_pair(source, target)
    ms.set_training(True)
    mt.set_training(False)
    with eval_mode(ms, mt):
        assert not any(m.training for _, m in ms.walk())
    # frozen extractor modules stay out of training mode permanently
    assert all(m.training for _, m in ms.walk() if not m.frozen)
    assert all(not m.training for _, m in ms.walk() if m.frozen)
    assert not any(m.training for _, m in mt.walk())


def test_batch_sampler_shapes_and_determinism():
    source, target, _ = _task(samples_per_class=20)
    s1 = BatchSampler(source, target, 8, np.random.default_rng(5))
    s2 = BatchSampler(source, target, 8, np.random.default_rng(5))
    x1, y1 = s1.source_batch()
    x2, y2 = s2.source_batch()
    assert x1.shape == (8, 8) and len(y1) == 8
    assert np.array_equal(x1.data, x2.data) and y1 == y2
    t1 = s1.target_batch()
    assert t1.shape == (8, 8)
    # batch is capped at the dataset size
    tiny = Dataset(Tensor(np.ones((3, 2))), [0, 1, 0], "source")
    s3 = BatchSampler(tiny, target, 8, np.random.default_rng(6))
    xb, yb = s3.source_batch()
    assert xb.shape[0] == 3 and sorted(yb) == [0, 0, 1]


def test_pretrain_reduces_loss_and_freezes():
    source, _, _ = _task(samples_per_class=32, class_separation=4.0)
    cfg = TrainConfig(pretrain_epochs=6, epochs=1, iters_per_step=1,
                      batch_size=32)
    g = build_extractor(SMALL, 8, 0)
    history = pretrain_contrastive(g, source, cfg,
                                   rng=np.random.default_rng(7))
    assert len(history) == 6
    assert history[-1] < history[0]
    assert g.pretrained
    assert all(not t.requires_grad for t in g.named_parameters("G").values())


def test_run_step_touches_only_its_group():
    source, target, _ = _task(seed=1)
    ms, mt = _pretrained_pair(source, target)
    pset = parameter_groups(ms, mt)
    optimizers = {g: Adam(1e-3) for g in ("phi_s", "phi_t", "theta_s", "theta_t")}
    sampler = BatchSampler(source, target, 16, np.random.default_rng(8))
    kernel = KernelSpec()
    for step in StepId:
        _, group = STEP_MAP[step]
        before = {n: t.data.tobytes() for n, t in pset.entries.items()}
        run_step(step, ms, mt, sampler, FAST, pset, optimizers, kernel)
        for name, t in pset.entries.items():
            changed = t.data.tobytes() != before[name]
            if name in pset.groups[group]:
                assert changed, f"{step.name}: {name} should move"
            else:
                assert not changed, f"{step.name}: {name} must stay"


def test_compute_reward_agreement():
    source, target, _ = _task(seed=2)
    ms, mt = _pretrained_pair(source, target)
    r = compute_reward(ms, mt, target.inputs)
    assert 0.0 <= r <= 1.0
    # a model always agrees with itself
    assert compute_reward(ms, ms, target.inputs) == 1.0
    with pytest.raises(ValueError, match="empty"):
        compute_reward(ms, mt, Tensor(np.zeros((0, 8))))


def test_run_epoch_records_all_losses():
    source, target, eval_target = _task(seed=3)
    ms, mt = _pretrained_pair(source, target)
    pset = parameter_groups(ms, mt)
    optimizers = {g: Adam(1e-3) for g in ("phi_s", "phi_t", "theta_s", "theta_t")}
    sampler = BatchSampler(source, target, 16, np.random.default_rng(9))
    trace = RewardTrace()
    checkpoints = {}
    row = run_epoch(ms, mt, sampler, FAST, pset, optimizers, trace, 1,
                    checkpoints, eval_target=eval_target)
    assert set(row.losses) == set(TRACE_COLUMNS[2:8])
    assert all(np.isfinite(v) for v in row.losses.values())
    assert 0.0 <= row.V <= 1.0
    assert row.checkpoint_id == "epoch_1" and "epoch_1" in checkpoints
    assert row.target_accuracy is not None
    assert checkpoints["epoch_1"].reward == row.V


def test_stopping_check_threshold_budget_and_tie_break():
    losses = {c: 0.0 for c in TRACE_COLUMNS[2:8]}
    cfg = TrainConfig(epochs=5, desired_reward=0.9)
    trace = RewardTrace()
    trace.append(TraceRow(1, 0.7, losses, "epoch_1"))
    assert stopping_check(trace, cfg) == ("continue", "epoch_1")
    trace.append(TraceRow(2, 0.95, losses, "epoch_2"))
    assert stopping_check(trace, cfg) == ("stop", "epoch_2")
    # ties go to the earliest epoch; budget exhaustion also stops
    trace2 = RewardTrace()
    for e in range(1, 6):
        trace2.append(TraceRow(e, 0.8 if e in (2, 4) else 0.6, losses,
                               f"epoch_{e}"))
    assert stopping_check(trace2, cfg) == ("stop", "epoch_2")


def test_train_interactive_end_to_end_and_determinism():
    spec = PdaTaskSpec(source_classes=2, target_classes=(0, 1),
                       samples_per_class=24, class_separation=4.0, seed=4)
    source, target, eval_target = gen_synthetic_pda(spec)
    cfg = TrainConfig(pretrain_epochs=2, epochs=2, iters_per_step=3,
                      batch_size=16, desired_reward=1.0, seed=4)
    r1 = train_interactive(source, target, cfg, SMALL, eval_target)
    r2 = train_interactive(source, target, cfg, SMALL, eval_target)
    assert r1.trace.to_csv() == r2.trace.to_csv()
    assert r1.best_checkpoint_id in r1.checkpoints
    assert r1.best.reward == max(row.V for row in r1.trace.rows)
    # returned models carry the best checkpoint's weights
    for name, arr in r1.best.arrays.items():
        if not name.startswith("buffer:"):
            got = parameter_groups(r1.ms, r1.mt).entries[name].data
            assert np.array_equal(got, arr), name
    assert not r1.ms.training and not r1.mt.training


def test_train_interactive_stops_at_desired_reward():
    spec = PdaTaskSpec(source_classes=2, target_classes=(0, 1),
                       samples_per_class=50, class_separation=6.0, seed=0)
    source, target, eval_target = gen_synthetic_pda(spec)
    cfg = TrainConfig(pretrain_epochs=2, epochs=10, iters_per_step=40,
                      batch_size=64, desired_reward=1.0, seed=0)
    result = train_interactive(source, target, cfg, SMALL, eval_target)
    # easy well-separated task: full agreement well before the epoch budget
    assert result.trace.rows[-1].V == 1.0
    assert len(result.trace.rows) < cfg.epochs


def test_train_interactive_requires_labels():
    source, target, _ = _task()
    with pytest.raises(ValueError, match="labeled"):
        train_interactive(source.without_labels(), target, FAST, SMALL)


def test_source_only_baseline_learns_source():
    spec = PdaTaskSpec(source_classes=2, target_classes=(0, 1),
                       samples_per_class=40, class_separation=5.0, seed=5)
    source, _, eval_target = gen_synthetic_pda(spec)
    cfg = TrainConfig(pretrain_epochs=2, epochs=2, iters_per_step=10,
                      batch_size=32, seed=5)
    result = train_source_only_baseline(source, cfg, SMALL, eval_target)
    # zero shift: the source-only classifier transfers essentially intact
    assert result.target_accuracy is not None
    assert result.target_accuracy > 0.8


def test_selection_study_regrets():
    losses = {c: 0.0 for c in TRACE_COLUMNS[2:8]}
    trace = RewardTrace()
    rows = [(1, 0.5, 3.0, 0.60), (2, 0.9, 2.0, 0.80), (3, 0.7, 1.0, 0.90)]
    for e, v, loss_val, acc in rows:
        l = dict(losses)
        l["L_s_s"] = loss_val
        trace.append(TraceRow(e, v, l, f"epoch_{e}", acc))
    out = selection_study(trace)
    assert out["epoch_argmax_V"] == 2.0
    assert out["epoch_argmin_loss"] == 3.0
    assert out["epoch_true_best"] == 3.0
    assert abs(out["regret_V_rule"] - 0.10) <= 1e-12
    assert out["regret_loss_rule"] == 0.0
    trace.rows[0].target_accuracy = None
    with pytest.raises(ValueError, match="accuracies"):
        selection_study(trace)
