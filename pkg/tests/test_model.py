import math

import numpy as np
import pytest

from anomize import model as mdl
from anomize import tensorcore as tc
from anomize.model import Anomize, ConfigError, ModelConfig
from anomize.tensorcore import Parameter, Tensor
from anomize.training import loss_categorization, loss_detection_mil, video_level_mil


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


# ------------------------------------------------------------------ config

@pytest.mark.parametrize("kw", [dict(d=10, heads=4), dict(K=0), dict(beta=1.5), dict(tau=0.0),
                                dict(streams="both!"), dict(beta_overrides={"novel": -0.1})])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        ModelConfig(**kw)


def test_config_round_trip():
    cfg = ModelConfig(d=16, beta_overrides={"novel": 0.0})
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_effective_beta():
    cfg = ModelConfig(d=8, heads=2, beta=0.5, beta_overrides={"novel": 0.0})
    assert cfg.effective_beta() == 0.5
    assert cfg.effective_beta("novel") == 0.0
    assert ModelConfig(d=8, heads=2, streams="dynamic").effective_beta() == 1.0


# -------------------------------------------------------- temporal encoder

def lstm_params(d, w_in=None, w_rec=None, bias=None):
    return {"temporal.lstm.w_in": Parameter("temporal.lstm.w_in", np.zeros((d, 4 * d)) if w_in is None else w_in),
            "temporal.lstm.w_rec": Parameter("temporal.lstm.w_rec", np.zeros((d, 4 * d)) if w_rec is None else w_rec),
            "temporal.lstm.bias": Parameter("temporal.lstm.bias", np.zeros(4 * d) if bias is None else bias)}


def test_lstm_zero_weights_zero_output(rng):
    out = mdl.temporal_encode(rng.standard_normal((5, 3)), lstm_params(3))
    assert np.all(out.data == 0.0)


def test_lstm_single_cell_hand_value():
    out = mdl.temporal_encode(np.array([[1.0]]), lstm_params(1, w_in=np.ones((1, 4))))
    s = 1 / (1 + math.exp(-1))
    # h = o * tanh(c), c = i * g with every gate pre-activation equal to 1
    assert out.data[0, 0] == pytest.approx(s * math.tanh(s * math.tanh(1.0)), abs=1e-6)
    assert out.data[0, 0] == pytest.approx(0.369606, abs=1e-6)


def test_lstm_shapes(rng):
    for _ in range(5):
        n, d = int(rng.integers(1, 33)), int(rng.integers(1, 17))
        params = mdl.init_parameters(ModelConfig(d=d, heads=1), seed=1)
        assert mdl.temporal_encode(rng.standard_normal((n, d)).astype(np.float32), params).shape == (n, d)


def test_lstm_is_causal(rng):
    params = mdl.init_parameters(ModelConfig(d=4, heads=1), seed=2)
    x = rng.standard_normal((6, 4)).astype(np.float32)
    y = x.copy()
    y[4:] += 1.0
    a, b = mdl.temporal_encode(x, params).data, mdl.temporal_encode(y, params).data
    assert a[:4].tobytes() == b[:4].tobytes()
    assert not np.array_equal(a[4:], b[4:])


def test_lstm_empty_sequence():
    with pytest.raises(ValueError):
        mdl.temporal_encode(np.zeros((0, 2)), lstm_params(2))


# ------------------------------------------------------------------ fusion

def test_fuse_visual():
    x = np.array([[1.0, 2.0]])
    assert mdl.fuse_visual(x, x, 0.0).data.tolist() == [[1.0, 2.0]]
    assert mdl.fuse_visual(x, x, 1.0).data.tolist() == [[2.0, 4.0]]
    with pytest.raises(tc.DimensionError):
        mdl.fuse_visual(x, np.ones((2, 2)), 1.0)


def test_alpha_mode_flag(rng):
    cfg = ModelConfig(d=8, heads=2, alpha_train=1.0, alpha_test=2.0)
    m = Anomize(cfg, seed=0)
    x = rng.standard_normal((5, 8)).astype(np.float32)
    t = unit_rows(rng, 3, 8)
    tr = m.forward(x, t, train=True, detect=False)
    te = m.forward(x, t, train=False, detect=False)
    np.testing.assert_allclose(tr.x_fused.data, tr.x_tem.data + x, rtol=1e-6)
    np.testing.assert_allclose(te.x_fused.data, te.x_tem.data + 2 * x, rtol=1e-6)


# --------------------------------------------------------------- alignment

def test_align_frames_direction_equal_row(rng):
    t = unit_rows(rng, 4, 6)
    p = mdl.align_frames(np.stack([3.0 * t[2], t[0]]), t).data
    assert p.shape == (2, 4)
    assert p[0, 2] == pytest.approx(1.0, abs=1e-9)
    assert mdl.align_frames(np.array([[1.0, 0.0]]), np.array([[0.0, 1.0]])).data[0, 0] == 0.0


def test_temperature_scales_before_softmax():
    p = np.array([[0.2, 0.6], [0.4, 0.0]])
    out = mdl.aggregate_topM(p, 16, tau=0.5).data
    e = np.exp(np.array([0.4, 0.6]) / 0.5)
    np.testing.assert_allclose(out, e / e.sum())


def test_aggregate_topM_hand_value():
    out = mdl.aggregate_topM(np.array([[0.2, 0.6], [0.4, 0.0]]), 16).data
    np.testing.assert_allclose(out, [0.450166, 0.549834], atol=1e-6)


def test_aggregate_full_mean_when_divisor_one(rng):
    p = rng.uniform(-1, 1, (9, 4))
    e = np.exp(p.mean(axis=0))
    np.testing.assert_allclose(mdl.aggregate_topM(p, 1).data, e / e.sum(), atol=1e-12)


def test_num_top():
    assert mdl.num_top(32, 16) == 2
    assert mdl.num_top(5, 16) == 1
    assert mdl.num_top(48, 16) == 3


def test_predict_video():
    assert mdl.predict_video([0.1, 0.7, 0.2]) == 1
    assert mdl.predict_video([0.5, 0.5]) == 0


def test_predict_shift_invariant(rng):
    z = rng.standard_normal(6)
    a = mdl.predict_video(tc.softmax(z).data)
    b = mdl.predict_video(tc.softmax(z + 13.0).data)
    assert a == b == int(np.argmax(z))


# ---------------------------------------------------------------- augmenter

def identity_augmenter(d, prefix="dyn.augmenter"):
    params = {}
    for proj in ("q", "k", "v", "o"):
        params[f"{prefix}.attn.{proj}.weight"] = Parameter("w", np.eye(d))
        params[f"{prefix}.attn.{proj}.bias"] = Parameter("b", np.zeros(d))
    rng = np.random.default_rng(0)
    for name, shape in (("fc", (d, d)), ("mlp.0", (2 * d, d)), ("mlp.1", (d, d))):
        params[f"{prefix}.{name}.weight"] = Parameter("w", rng.standard_normal(shape) / math.sqrt(shape[0]))
        params[f"{prefix}.{name}.bias"] = Parameter("b", np.zeros(shape[1]))
    return params


def test_augment_single_key_identity():
    params = identity_augmenter(4)
    key = np.array([[1.0, -2.0, 0.5, 3.0]])
    q = np.random.default_rng(1).standard_normal((3, 4))
    _, e_refine, w = mdl.augment(q, key, params, "dyn.augmenter", heads=2, return_weights=True)
    assert np.all(w.probs == 1.0)
    np.testing.assert_allclose(e_refine.data, np.repeat(key, 3, axis=0), atol=1e-9)


def test_augment_per_frame_weights_sum_to_one(rng):
    params = identity_augmenter(8, "sta.augmenter")
    keys = rng.standard_normal((5, 3, 8))
    _, _, w = mdl.augment(rng.standard_normal((5, 8)), keys, params, "sta.augmenter", heads=2, return_weights=True)
    assert w.probs.shape == (2, 5, 3)
    np.testing.assert_allclose(w.probs.sum(axis=-1), 1.0, atol=1e-6)


def test_augment_shape(rng):
    params = mdl.init_parameters(ModelConfig(d=8, heads=2), seed=0)
    out = mdl.augment(rng.standard_normal((5, 8)).astype(np.float32), rng.standard_normal((3, 8)).astype(np.float32),
                      params, "dyn.augmenter", heads=2)
    assert out.shape == (5, 8)


def test_augment_heads_must_divide_d(rng):
    params = mdl.init_parameters(ModelConfig(d=6, heads=2), seed=0)
    with pytest.raises(ConfigError):
        mdl.augment(rng.standard_normal((2, 6)), rng.standard_normal((3, 6)), params, "dyn.augmenter", heads=4)
    with pytest.raises(ConfigError):
        mdl.augment(rng.standard_normal((2, 6)), rng.standard_normal((3, 6)), params, "dyn.augmenter", heads=4,
                    text_augment=False)


# ------------------------------------------------------------------ streams

def zero_head(params, stream):
    for suffix in ("weight", "bias"):
        params[f"{stream}.detector.fc.{suffix}"].data[...] = 0.0


def test_zero_detector_head_gives_half(rng):
    cfg = ModelConfig(d=8, heads=2, K=2)
    m = Anomize(cfg, seed=0)
    zero_head(m.params, "dyn")
    zero_head(m.params, "sta")
    out = m.forward(rng.standard_normal((6, 8)), unit_rows(rng, 3, 8), unit_rows(rng, 5, 8), categorize=False)
    assert out.s_dyn.shape == (6, 1) and out.s_sta.shape == (6, 1)
    assert np.all(out.s_dyn.data == 0.5) and np.all(out.s_sta.data == 0.5)


def test_scores_in_unit_interval(rng):
    m = Anomize(ModelConfig(d=8, heads=2, K=3), seed=4)
    out = m.forward(rng.standard_normal((7, 8)), unit_rows(rng, 4, 8), unit_rows(rng, 9, 8))
    for s in (out.s_dyn, out.s_sta, out.s):
        assert np.all(s.data > 0) and np.all(s.data < 1)


def test_retrieve_concepts_exact_row(rng):
    lib = unit_rows(rng, 20, 6)
    sel = mdl.retrieve_concepts(2.5 * lib[[7, 3]], lib, 5)
    assert sel.indices[0, 0] == 7 and sel.indices[1, 0] == 3
    assert sel.s_f[0, 0] == pytest.approx(1.0)
    np.testing.assert_allclose(sel.weights.sum(axis=1), 1.0, atol=1e-6)


def test_retrieve_concepts_single_weight(rng):
    sel = mdl.retrieve_concepts(rng.standard_normal((4, 6)), unit_rows(rng, 10, 6), 1)
    assert np.all(sel.weights == 1.0)


def test_retrieve_concepts_sort_oracle(rng):
    lib = rng.standard_normal((20, 6))
    x = rng.standard_normal((8, 6))
    sel = mdl.retrieve_concepts(x, lib, 5)
    sim = (x / np.linalg.norm(x, axis=1, keepdims=True)) @ (lib / np.linalg.norm(lib, axis=1, keepdims=True)).T
    for i in range(8):
        oracle = sorted(range(20), key=lambda j: (-sim[i, j], j))[:5]
        assert sel.indices[i].tolist() == oracle
        w = np.exp(sim[i, oracle] - sim[i, oracle].max())
        np.testing.assert_allclose(sel.h_f_new[i], (w / w.sum())[:, None] * lib[oracle], atol=1e-9)


def test_retrieve_concepts_k_too_large(rng):
    with pytest.raises(ValueError):
        mdl.retrieve_concepts(rng.standard_normal((2, 4)), rng.standard_normal((3, 4)), 4)


def test_static_k_from_config(rng):
    cfg = ModelConfig(d=8, heads=2, K=25)
    m = Anomize(cfg, seed=0)
    lib = unit_rows(rng, 30, 8)
    x = rng.standard_normal((4, 8)).astype(np.float32)
    s_sta, _ = mdl.static_score(x, lib, cfg.K, m.params, cfg.heads)
    assert s_sta.shape == (4, 1)
    assert mdl.retrieve_concepts(x, lib, cfg.K).indices.shape == (4, 25)


def test_fuse_scores():
    a, b = Tensor(np.array([[0.8]])), Tensor(np.array([[0.4]]))
    assert mdl.fuse_scores(a, b, 1.0) is a
    assert mdl.fuse_scores(a, b, 0.0) is b
    assert mdl.fuse_scores(a, b, 0.5).data[0, 0] == pytest.approx(0.6)
    with pytest.raises(ConfigError):
        mdl.fuse_scores(a, b, 1.2)


# ----------------------------------------------------------- whole forward

@pytest.mark.parametrize("n", [1, 7, 256])
@pytest.mark.parametrize("d", [8, 16])
@pytest.mark.parametrize("c", [2, 7])
@pytest.mark.parametrize("K", [1, 5])
def test_forward_shapes_and_ranges(n, d, c, K):
    rng = np.random.default_rng(n * 1000 + d * 10 + c + K)
    m = Anomize(ModelConfig(d=d, heads=4, K=K), seed=1)
    out = m.forward(rng.standard_normal((n, d)), unit_rows(rng, c, d), unit_rows(rng, 12, d))
    assert out.p_frame.shape == (n, c)
    assert np.all(np.abs(out.p_frame.data) <= 1.0)
    assert out.p_avg.shape == (c,)
    assert abs(float(out.p_avg.data.sum()) - 1.0) <= 1e-6
    assert out.M == max(1, n // 16)
    for s in (out.s_dyn, out.s_sta, out.s):
        assert s.shape == (n, 1)
        assert np.all(np.isfinite(s.data)) and np.all((s.data >= 0) & (s.data <= 1))


def test_forward_deterministic(rng):
    m = Anomize(ModelConfig(d=8, heads=2, K=2), seed=3)
    args = (rng.standard_normal((9, 8)), unit_rows(rng, 3, 8), unit_rows(rng, 6, 8))
    a, b = m.forward(*args), m.forward(*args)
    assert a.s.data.tobytes() == b.s.data.tobytes()
    assert a.p_avg.data.tobytes() == b.p_avg.data.tobytes()


def test_forward_rejects_wrong_dim(rng):
    m = Anomize(ModelConfig(d=8, heads=2), seed=0)
    with pytest.raises(tc.DimensionError):
        m.forward(rng.standard_normal((3, 6)), unit_rows(rng, 2, 8), unit_rows(rng, 4, 8))


def test_ablation_switches_forward(rng):
    args = (rng.standard_normal((5, 8)), unit_rows(rng, 3, 8), unit_rows(rng, 6, 8))
    dyn = Anomize(ModelConfig(d=8, heads=2, K=2, streams="dynamic"), seed=0).forward(*args)
    assert dyn.s_sta is None and dyn.s is dyn.s_dyn
    sta = Anomize(ModelConfig(d=8, heads=2, K=2, streams="static"), seed=0).forward(*args)
    assert sta.s_dyn is None and sta.s is sta.s_sta
    plain = Anomize(ModelConfig(d=8, heads=2, K=2, text_augment=False), seed=0).forward(*args)
    assert np.all(np.isfinite(plain.s.data))
    no_tem = Anomize(ModelConfig(d=8, heads=2, K=2, temporal_encoder=False), seed=0).forward(*args, train=True)
    np.testing.assert_allclose(no_tem.x_fused.data, 2 * args[0].astype(np.float32), rtol=1e-6)


def test_split_beta_override(rng):
    m = Anomize(ModelConfig(d=8, heads=2, K=2, beta_overrides={"novel": 0.0}), seed=0)
    args = (rng.standard_normal((5, 8)), unit_rows(rng, 3, 8), unit_rows(rng, 6, 8))
    out = m.forward(*args, split="novel")
    assert out.s is out.s_sta


# ---------------------------------------------------------- freeze masks

def test_stage_masks():
    names = mdl.init_parameters(ModelConfig(d=4, heads=2)).keys()
    s1 = {n for n in names if mdl.stage_mask(n, "1")}
    s2 = {n for n in names if mdl.stage_mask(n, "2")}
    assert s1 == {n for n in names if n.startswith("temporal.")}
    assert s2 == {n for n in names if n.startswith(("dyn.", "sta."))}
    assert {n for n in names if mdl.stage_mask(n, "joint")} == set(names)
    assert not any(mdl.stage_mask(n, "2", "dynamic") for n in names if n.startswith("sta."))


def _losses(m, x, t, lib, train=True):
    out = m.forward(x, t, lib, train=train)
    L_cat, _, _ = loss_categorization([out.p_avg], np.eye(t.shape[0])[[1]])
    L_det, _, _ = loss_detection_mil([video_level_mil(out.s_dyn)], [video_level_mil(out.s_sta)], np.array([1.0]),
                                     np.array([1.0]))
    return tc.add(L_cat, L_det)


def test_frozen_gradients_exactly_zero(rng):
    m = Anomize(ModelConfig(d=8, heads=2, K=2), seed=0)
    x, t, lib = rng.standard_normal((6, 8)), unit_rows(rng, 3, 8), unit_rows(rng, 5, 8)
    m.set_stage("2")
    m.zero_grad()
    _losses(m, x, t, lib).backward()
    for name, p in m.params.items():
        if name.startswith("temporal."):
            assert np.all(p.grad == 0.0), name
    # the same graph with the LSTM unfrozen does carry gradient into it
    m.set_stage("joint")
    m.zero_grad()
    _losses(m, x, t, lib).backward()
    assert any(np.any(m.params[n].grad != 0) for n in m.params if n.startswith("temporal."))


# ------------------------------------------------------ full-model gradcheck

def test_full_model_gradient_check():
    cfg = ModelConfig(d=6, heads=2, K=2, topm_divisor=16)
    rng = np.random.default_rng(11)
    base = Anomize(cfg, seed=5, dtype=np.float64)
    for p in base.params.values():  # break the zero biases so every path is exercised
        p.data = p.data + 0.05 * rng.standard_normal(p.shape)
    names = sorted(base.params)
    x = rng.standard_normal((4, 6))
    t = unit_rows(rng, 3, 6)
    lib = unit_rows(rng, 5, 6)
    sel = mdl.retrieve_concepts(x, lib, cfg.K)

    def loss(*leaves):
        m = Anomize(cfg, params=dict(zip(names, leaves)))
        out = m.forward(x, t, lib, train=True, selection=sel)
        L_cat, _, _ = loss_categorization([out.p_avg], np.eye(3)[[2]])
        L_det, _, _ = loss_detection_mil([video_level_mil(out.s_dyn)], [video_level_mil(out.s_sta)],
                                         np.array([1.0]), np.array([1.0]))
        return tc.add(L_cat, L_det)

    rep = tc.check_gradients(loss, [base.params[n].data for n in names], tol=1e-3)
    worst = names[int(np.argmax(rep.per_input))]
    assert rep.passed, f"max rel error {rep.max_rel_error:.2e} at {worst}"


def test_state_dict_round_trip():
    a = Anomize(ModelConfig(d=8, heads=2), seed=1)
    b = Anomize(ModelConfig(d=8, heads=2), seed=2)
    b.load_state_dict(a.state_dict())
    assert all(a.params[k].data.tobytes() == b.params[k].data.tobytes() for k in a.params)
    with pytest.raises(KeyError):
        b.load_state_dict({"x": np.zeros(1)})
