import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from anomize import tensorcore as tc
from anomize.benchmark import desk_model_config, desk_train_config
from anomize.model import Anomize
from anomize.tensorcore import Tensor
from anomize.training import (
    AdamW,
    BatchLabels,
    TextContext,
    TrainConfig,
    Trainer,
    TrainingAbort,
    compute_loss_weights,
    loss_categorization,
    loss_detection_mil,
    run_joint,
    run_stage1,
    run_stage2,
    video_level_mil,
)


def scalar(t):
    return float(t.data)


# ------------------------------------------------------------ categorization


def test_sep_zero_gap():
    _, _, L_sep = loss_categorization(Tensor(np.array([0.5, 0.5])), [1, 0])
    assert scalar(L_sep) == pytest.approx(1.0)


def test_sep_wide_gap():
    _, _, L_sep = loss_categorization(Tensor(np.array([0.1, 0.9])), [0, 1])
    assert scalar(L_sep) == pytest.approx(0.2)


def test_ce_direct_value():
    L_cat, L_ce, L_sep = loss_categorization(Tensor(np.array([0.25, 0.75])), [0, 1])
    assert scalar(L_ce) == pytest.approx(-math.log(0.75), abs=1e-6)
    assert scalar(L_ce) == pytest.approx(0.287682, abs=1e-6)
    assert scalar(L_cat) == pytest.approx(scalar(L_ce) + scalar(L_sep))


def test_sep_uses_best_anomaly_probability():
    p = np.array([[0.2, 0.5, 0.3], [0.6, 0.1, 0.3]])
    _, _, L_sep = loss_categorization(Tensor(p), np.eye(3)[[1, 0]])
    expected = np.mean([1 - abs(0.5 - 0.2), 1 - abs(0.3 - 0.6)])
    assert scalar(L_sep) == pytest.approx(expected)


def test_ce_clamps_zero_probability():
    _, L_ce, _ = loss_categorization(Tensor(np.array([1.0, 0.0])), [0, 1], eps_log=1e-7)
    assert scalar(L_ce) == pytest.approx(-math.log(1e-7), rel=1e-6)


def test_categorization_needs_anomaly_slice():
    with pytest.raises(ValueError):
        loss_categorization(Tensor(np.array([[1.0]])), [[1.0]])


def test_sep_switch_off():
    L_cat, L_ce, _ = loss_categorization(Tensor(np.array([0.4, 0.6])), [0, 1], use_sep=False)
    assert scalar(L_cat) == scalar(L_ce)


@given(st.integers(1, 6), st.integers(2, 6), st.integers(0, 2**31 - 1))
def test_categorization_ranges(N, c, seed):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(c), size=N)
    g = np.eye(c)[rng.integers(0, c, N)]
    L_cat, L_ce, L_sep = loss_categorization(Tensor(p), g)
    assert 0.0 <= scalar(L_sep) <= 1.0 + 1e-12
    assert scalar(L_ce) >= 0.0
    assert scalar(L_cat) == pytest.approx(scalar(L_ce) + scalar(L_sep))


def test_categorization_gradient():
    rng = np.random.default_rng(3)
    logits = rng.standard_normal((3, 4))
    g = np.eye(4)[[1, 0, 3]]

    def f(z):
        L_cat, _, _ = loss_categorization(tc.softmax(z, axis=-1), g)
        return L_cat

    assert tc.check_gradients(f, [logits], tol=1e-4).passed


# ------------------------------------------------------------------ MIL


@pytest.mark.parametrize("n", [1, 5, 16, 40])
def test_mil_constant_scores(n):
    assert scalar(video_level_mil(np.full((n, 1), 0.3))) == pytest.approx(0.3)


def test_mil_two_frames_takes_max():
    assert scalar(video_level_mil(np.array([[0.2], [0.9]]))) == pytest.approx(0.9)


def test_mil_forty_eight_frames():
    s = np.round(np.arange(48, 0, -1) * 0.01, 2).reshape(-1, 1)
    oracle = np.sort(s.ravel())[::-1][:3].mean()
    assert oracle == pytest.approx(0.47)
    assert scalar(video_level_mil(s)) == pytest.approx(0.47)


def test_mil_unit_divisor_is_full_mean():
    s = np.random.default_rng(0).random((23, 1))
    assert scalar(video_level_mil(s, topm_divisor=1)) == pytest.approx(s.mean(), abs=1e-6)


def test_mil_correct_negative_is_near_zero():
    eps = 1e-7
    L_det, L_d, L_s = loss_detection_mil([Tensor(np.array(eps))], None, [0.0], [1.0], eps_log=eps)
    assert scalar(L_d) == pytest.approx(0.0, abs=1e-6)
    assert L_s is None
    assert scalar(L_det) == scalar(L_d)


def test_mil_weighted_positive():
    L_det, L_d, _ = loss_detection_mil([Tensor(np.array(0.75))], None, [1.0], [2.0])
    assert scalar(L_d) == pytest.approx(-2 * math.log(0.75), abs=1e-6)
    assert scalar(L_d) == pytest.approx(0.575364, abs=1e-6)


def test_mil_weighted_positive_averaged_over_batch():
    qh = [Tensor(np.array(0.75)), Tensor(np.array(0.5))]
    _, L_d, _ = loss_detection_mil(qh, None, [1.0, 0.0], [2.0, 1.0])
    assert scalar(L_d) == pytest.approx((0.575364 + math.log(2)) / 2, abs=1e-6)


def test_mil_balanced_predictions_ln2():
    qh = [Tensor(np.array(0.5)) for _ in range(4)]
    L_det, L_d, L_s = loss_detection_mil(qh, qh, [0, 1, 0, 1], np.ones(4))
    assert scalar(L_d) == pytest.approx(math.log(2))
    assert scalar(L_s) == pytest.approx(math.log(2))
    assert scalar(L_det) == pytest.approx(2 * math.log(2))


def test_mil_needs_a_stream():
    with pytest.raises(ValueError):
        loss_detection_mil(None, None, [1.0], [1.0])


@given(st.integers(1, 8), st.integers(0, 2**31 - 1))
def test_mil_nonnegative(N, seed):
    rng = np.random.default_rng(seed)
    qh = [Tensor(np.array(v)) for v in rng.random(N)]
    q = rng.integers(0, 2, N).astype(float)
    L_det, L_d, L_s = loss_detection_mil(qh, qh, q, compute_loss_weights(q))
    assert scalar(L_d) >= 0 and scalar(L_s) >= 0
    assert scalar(L_det) == pytest.approx(scalar(L_d) + scalar(L_s))


def test_detection_gradient():
    rng = np.random.default_rng(5)
    s_dyn = rng.random((20, 1)) * 0.8 + 0.1
    s_sta = rng.random((12, 1)) * 0.8 + 0.1

    def f(a, b):
        L_det, _, _ = loss_detection_mil([video_level_mil(a)], [video_level_mil(b)], [1.0], [3.0])
        return L_det

    assert tc.check_gradients(f, [s_dyn, s_sta], tol=1e-4).passed


# --------------------------------------------------------------- weights


def test_weights_three_to_one():
    np.testing.assert_array_equal(compute_loss_weights([0, 0, 0, 1]), [1, 1, 1, 3.0])


def test_weights_balanced():
    np.testing.assert_array_equal(compute_loss_weights([0, 1, 1, 0]), np.ones(4))


@pytest.mark.parametrize("q", [[0, 0, 0], [1, 1]])
def test_weights_degenerate(q):
    np.testing.assert_array_equal(compute_loss_weights(q), np.ones(len(q)))


def test_batch_labels():
    bl = BatchLabels.from_labels([0, 2, 0, 0], c=3)
    assert bl.N == 4
    np.testing.assert_array_equal(bl.g.sum(axis=1), np.ones(4))
    np.testing.assert_array_equal(bl.q, [0, 1, 0, 0])
    np.testing.assert_array_equal(bl.w, [1, 3, 1, 1])
    assert np.all(bl.w >= 1)


# --------------------------------------------------------------- config


def test_default_hyperparameters():
    cfg = TrainConfig()
    assert cfg.lr == 2e-5
    assert cfg.batch_size == 32
    assert (cfg.epochs_stage1, cfg.epochs_stage2) == (16, 64)
    assert (cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay) == (0.9, 0.999, 1e-8, 0.01)
    assert cfg.eps_log == 1e-7


def test_config_round_trip_and_stage_lr():
    cfg = TrainConfig(lr=1e-2, lr_stage2=1e-3)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.stage_lr("1") == 1e-2 and cfg.stage_lr("2") == 1e-3
    assert TrainConfig(lr=0.5).stage_lr("2") == 0.5


@pytest.mark.parametrize("bad", [dict(lr=-1.0), dict(batch_size=0), dict(epochs_stage1=-1), dict(lr_stage2=-1.0)])
def test_config_rejects(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


# ------------------------------------------------------------- optimizer


def test_adamw_zero_lr_is_noop():
    p = tc.Parameter("w", np.random.default_rng(0).standard_normal((3, 3)).astype(np.float32))
    before = p.data.tobytes()
    p.grad = np.ones_like(p.data)
    AdamW([p], lr=0.0).step()
    assert p.data.tobytes() == before


def test_adamw_first_step_matches_closed_form():
    p = tc.Parameter("w", np.array([1.0, -2.0]))
    p.grad = np.array([0.5, -0.25])
    AdamW([p], lr=0.1, weight_decay=0.01).step()
    # after bias correction the first update is g / (|g| + eps)
    expected = np.array([1.0, -2.0]) * (1 - 0.1 * 0.01) - 0.1 * np.array([0.5, -0.25]) / (np.array([0.5, 0.25]) + 1e-8)
    np.testing.assert_allclose(p.data, expected, rtol=1e-12)


def test_adamw_skips_frozen():
    p = tc.Parameter("w", np.ones(2), trainable=False)
    p.grad = np.ones(2)
    AdamW([p], lr=0.1).step()
    np.testing.assert_array_equal(p.data, np.ones(2))


# --------------------------------------------------------------- trainer


def fresh(bench, seed=0, **mkw):
    return Anomize(desk_model_config(bench.grouped.t_desc.shape[1], **mkw), seed=seed)


def quick_cfg(**kw):
    return desk_train_config(**{"epochs_stage1": 3, "epochs_stage2": 3, **kw})


def snapshot(model):
    return {k: v.tobytes() for k, v in model.state_dict().items()}


def changed(a, b):
    return {k for k in a if a[k] != b[k]}


def test_zero_epochs_leave_state_unchanged(small_bench):
    model = fresh(small_bench)
    before = snapshot(model)
    cfg = quick_cfg(epochs_stage1=0, epochs_stage2=0)
    log1 = run_stage1(model, small_bench.dataset.train, small_bench.grouped, cfg).log
    log2 = run_stage2(model, small_bench.dataset.train, small_bench.grouped, cfg).log
    assert log1 == [] and log2 == []
    assert snapshot(model) == before


def test_stage1_freezes_everything_but_lstm(small_bench):
    model = fresh(small_bench)
    before = snapshot(model)
    run_stage1(model, small_bench.dataset.train, small_bench.grouped, quick_cfg())
    diff = changed(before, snapshot(model))
    assert diff and all(k.startswith("temporal.") for k in diff)


def test_stage2_freezes_lstm(small_bench):
    model = fresh(small_bench)
    before = snapshot(model)
    run_stage2(model, small_bench.dataset.train, small_bench.grouped, quick_cfg())
    diff = changed(before, snapshot(model))
    assert diff and not any(k.startswith("temporal.") for k in diff)
    assert any(k.startswith("dyn.") for k in diff) and any(k.startswith("sta.") for k in diff)


def test_zero_lr_training_is_noop(small_bench):
    model = fresh(small_bench)
    before = snapshot(model)
    cfg = quick_cfg(lr=0.0, lr_stage2=0.0, epochs_stage1=1, epochs_stage2=1)
    Trainer(model, small_bench.dataset.train, small_bench.grouped, cfg).run("joint", 1)
    assert snapshot(model) == before


def test_fixed_seed_is_bitwise_deterministic(small_bench):
    results = []
    for _ in range(2):
        model = fresh(small_bench, seed=3)
        tr = Trainer(model, small_bench.dataset.train, small_bench.grouped, quick_cfg(seed=3))
        tr.run("1", 2)
        tr.run("2", 2)
        results.append((snapshot(model), [{k: v for k, v in r.items() if k != "wall_ms"} for r in tr.history]))
    assert results[0] == results[1]


def test_stage_logs_and_checkpoints(small_bench, tmp_path):
    model = fresh(small_bench)
    log_path = tmp_path / "log.jsonl"
    tr = Trainer(model, small_bench.dataset.train, small_bench.grouped, quick_cfg(),
                 checkpoint_dir=tmp_path / "ckpt", log_path=log_path)
    tr.run("1", 2)
    tr.run("2", 2)
    rows = [json.loads(line) for line in log_path.read_text().splitlines()]
    assert [(r["stage"], r["epoch"]) for r in rows] == [("1", 1), ("1", 2), ("2", 1), ("2", 2)]
    for r in rows[:2]:
        assert {"L_cat", "L_ce", "L_sep", "wall_ms"} <= set(r)
        assert r["L_cat"] == pytest.approx(r["L_ce"] + r["L_sep"])
    for r in rows[2:]:
        assert {"L_det", "L_D_MIL", "L_S_MIL", "wall_ms"} <= set(r)
        assert r["L_det"] == pytest.approx(r["L_D_MIL"] + r["L_S_MIL"])
    names = sorted(p.name for p in (tmp_path / "ckpt").iterdir())
    assert names == ["stage1_epoch001.json", "stage1_epoch002.json", "stage2_epoch001.json", "stage2_epoch002.json"]


def test_stage1_reduces_categorization_loss(small_bench):
    model = fresh(small_bench)
    log = run_stage1(model, small_bench.dataset.train, small_bench.grouped, quick_cfg(epochs_stage1=8)).log
    assert log[-1]["L_cat"] < log[0]["L_cat"]


def test_joint_mode_trains_both_and_is_finite(small_bench):
    model = fresh(small_bench)
    before = snapshot(model)
    log = run_joint(model, small_bench.dataset.train, small_bench.grouped, quick_cfg(), epochs=2).log
    for r in log:
        assert all(np.isfinite(r[k]) for k in ("L_cat", "L_det", "L_D_MIL", "L_S_MIL"))
    diff = changed(before, snapshot(model))
    assert any(k.startswith("temporal.") for k in diff) and any(k.startswith("dyn.") for k in diff)


def test_single_stream_training_logs_one_mil_term(small_bench):
    model = fresh(small_bench, streams="dynamic")
    log = run_stage2(model, small_bench.dataset.train, small_bench.grouped, quick_cfg(epochs_stage2=1)).log
    assert "L_D_MIL" in log[0] and "L_S_MIL" not in log[0]


def test_non_finite_loss_aborts_with_diagnostic(small_bench, tmp_path):
    model = fresh(small_bench)
    model.params["temporal.lstm.w_in"].data[:] = np.nan
    with pytest.raises(TrainingAbort) as info:
        Trainer(model, small_bench.dataset.train, small_bench.grouped, quick_cfg(),
                checkpoint_dir=tmp_path).run("1", 1)
    diag = info.value.diagnostic
    assert diag["batch"] == 0 and diag["stage"] == "1"
    assert "temporal.lstm.w_in" in diag["param_norms"]
    dumped = json.loads((tmp_path / "abort_diagnostic.json").read_text())
    assert dumped["videos"] == diag["videos"]


def test_trainer_without_concepts_for_dynamic_model(small_bench):
    text = TextContext(small_bench.grouped.t_desc, None)
    model = fresh(small_bench, streams="dynamic")
    log = run_stage2(model, small_bench.dataset.train, text, quick_cfg(epochs_stage2=1)).log
    assert np.isfinite(log[0]["L_det"])
