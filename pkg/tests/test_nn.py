import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drf.nn import (AdamState, CoordinateFrame, DivergenceError, MlpModel, PositionalEncoder,
                    adam_step, backward, clip_by_global_norm, inject_coordinate_noise,
                    load_checkpoint, make_model, mlp_forward, positional_encode, save_checkpoint)
from drf.tensor_io import RngStream

FRAME = CoordinateFrame.build((-20.0, 20.0, -15.0, 15.0), (8, 8))


def test_encoder_width_and_zero_encoding():
    enc = PositionalEncoder()
    assert enc.levels == (1, 5, 10)
    assert enc.width == 64
    g0 = positional_encode(0, 0, 0, 0, 0, 0)
    assert g0.shape == (64,)
    np.testing.assert_array_equal(g0.reshape(-1, 2), np.tile([0.0, 1.0], (32, 1)))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=6, max_size=6))
def test_encoder_formula(p):
    got = positional_encode(*p)
    want = []
    for i, x in enumerate(p):
        for level in range((1, 5, 10)[i // 2]):
            a = 2.0**level * math.pi * x
            want += [math.sin(a), math.cos(a)]
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_encoder_rejects_bad_shape():
    with pytest.raises(ValueError):
        PositionalEncoder()(np.zeros((3, 5)))
    assert PositionalEncoder(0, 2, 0).width == 8


def test_frame_normalization():
    c = np.array([[0.0, 1.0, -20.0, 15.0, 0.0, 7.0], [0.5, 0.5, 0.0, 0.0, 3.5, 3.5]])
    n = FRAME.normalize(c)
    np.testing.assert_allclose(n[0], [-0.5, 0.5, -0.5, 0.5, -0.5, 0.5])
    np.testing.assert_allclose(n[1], 0.0)
    assert FRAME.subview_center == (3.5, 3.5)
    np.testing.assert_array_equal(FRAME.subview_grid[0], np.arange(8))
    assert FRAME.angular_contains(np.array([0.0, 25.0]), np.array([0.0, 0.0])).tolist() == [True, False]


def test_default_parameter_count():
    m = MlpModel()
    assert m.widths == (64, 32, 32, 32, 1)
    assert m.n_params == 64 * 32 + 32 + 2 * (32 * 32 + 32) + 32 + 1 == 4225
    assert make_model("ours", FRAME, RngStream(0)).n_params == 4225
    assert make_model("vanilla", FRAME, RngStream(0)).widths == (6, 32, 32, 32, 1)


def test_siren_initialization_bounds():
    m = make_model("ours", FRAME, RngStream(1, 2))
    sl = m.layer_slices()
    ws, bs, fan_in, _ = sl[0]
    assert np.abs(m.theta[ws]).max() <= 1 / fan_in
    ws, bs, fan_in, _ = sl[1]
    assert np.abs(m.theta[ws]).max() <= math.sqrt(6 / fan_in)
    assert np.abs(m.theta[ws]).max() > 0.5 * math.sqrt(6 / fan_in)
    assert np.abs(m.theta[bs]).max() <= 1 / math.sqrt(fan_in)


def test_relu_baseline_initialization():
    m = make_model("vanilla", FRAME, RngStream(1, 2))
    for ws, bs, fan_in, _ in m.layer_slices():
        assert np.abs(m.theta[ws]).max() <= math.sqrt(6 / fan_in)
        np.testing.assert_array_equal(m.theta[bs], 0.0)


def test_zero_head_predicts_zero():
    m = make_model("ours", FRAME, RngStream(0), head="zero")
    assert np.all(mlp_forward(m, np.random.default_rng(0).random((5, 64))) == 0)
    with pytest.raises(ValueError):
        make_model("ours", FRAME, RngStream(0), head="ones")
    with pytest.raises(ValueError):
        make_model("transformer", FRAME, RngStream(0))


def test_forward_single_sample_and_width_check():
    m = make_model("ours", FRAME, RngStream(0))
    f = np.random.default_rng(1).random((3, 64))
    batch = mlp_forward(m, f)
    assert batch.shape == (3,)
    assert mlp_forward(m, f[1]) == pytest.approx(batch[1], rel=1e-5)
    with pytest.raises(ValueError):
        mlp_forward(m, np.zeros((2, 10)))


@pytest.mark.parametrize("kind", ["ours", "vanilla"])
def test_parameter_gradient_matches_finite_differences(kind):
    m = make_model(kind, FRAME, RngStream(3), dtype="float64")
    feats = m.features(FRAME.normalize(np.random.default_rng(2).random((7, 6)) * [1, 1, 30, 20, 7, 7] - [0, 0, 15, 10, 0, 0]))
    upstream = np.random.default_rng(3).standard_normal(7)
    g = backward(m, feats, upstream)

    def f(theta):
        mm = m.copy()
        mm.theta = theta
        return float(np.dot(mlp_forward(mm, feats), upstream))

    idx = np.random.default_rng(4).choice(m.n_params, 40, replace=False)
    fd = []
    for i in idx:
        tp, tm = m.theta.copy(), m.theta.copy()
        tp[i] += 1e-6
        tm[i] -= 1e-6
        fd.append((f(tp) - f(tm)) / 2e-6)
    np.testing.assert_allclose(g[idx], fd, rtol=1e-5, atol=1e-7)


def test_adam_first_steps_match_reference():
    theta = np.array([1.0, -2.0, 0.5])
    grads = [np.array([0.1, -0.2, 0.0]), np.array([0.3, 0.1, -0.4])]
    st_ = AdamState(base_lr=0.01, total_epochs=10, clip_norm=math.inf)
    m = v = np.zeros(3)
    ref = theta.copy()
    for t, g in enumerate(grads, start=1):
        theta = adam_step(st_, theta, g, epoch=2)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mh, vh = m / (1 - 0.9**t), v / (1 - 0.999**t)
        ref = ref - 0.01 * (1 - 2 / 10) * mh / (np.sqrt(vh) + 1e-8)
    np.testing.assert_allclose(theta, ref, rtol=1e-12)
    assert st_.step == 2


def test_lr_schedule_and_clipping():
    st_ = AdamState(base_lr=1e-3, total_epochs=800)
    assert st_.lr(0) == 1e-3
    assert st_.lr(400) == pytest.approx(5e-4)
    g, norm = clip_by_global_norm(np.array([3.0, 4.0]), 1.0)
    assert norm == 5.0
    np.testing.assert_allclose(g, [0.6, 0.8])
    g, _ = clip_by_global_norm(np.array([0.3, 0.4]), 1.0)
    np.testing.assert_array_equal(g, [0.3, 0.4])


def test_adam_rejects_non_finite_gradient():
    with pytest.raises(DivergenceError, match="diverged"):
        adam_step(AdamState(), np.zeros(2), np.array([np.nan, 0.0]), 0)
    with pytest.raises(ValueError):
        adam_step(AdamState(), np.zeros(2), np.zeros(3), 0)


def test_coordinate_noise():
    c = np.zeros((20000, 6))
    np.testing.assert_array_equal(inject_coordinate_noise(c), c)  # eval mode
    n = inject_coordinate_noise(c, RngStream(0, 5))
    np.testing.assert_allclose(n.std(axis=0), [5e-3, 5e-3, 1e-2, 1e-2, 1e-3, 1e-3], rtol=0.05)
    np.testing.assert_array_equal(n, inject_coordinate_noise(c, RngStream(0, 5)))


def test_checkpoint_round_trip(tmp_path):
    m = make_model("ours", FRAME, RngStream(9), encoder=PositionalEncoder(1, 4, 6), hidden=16, depth=2)
    save_checkpoint(m, tmp_path / "ck", extra={"channel": "G"})
    back = load_checkpoint(tmp_path / "ck")
    assert back.widths == m.widths and back.encoder == m.encoder and back.frame == m.frame
    np.testing.assert_array_equal(back.theta, m.theta)
    first = (tmp_path / "ck.json").read_bytes() + (tmp_path / "ck.theta.bin").read_bytes()
    save_checkpoint(back, tmp_path / "ck2", extra={"channel": "G"})
    second = (tmp_path / "ck2.json").read_bytes().replace(b"ck2.theta", b"ck.theta") + \
        (tmp_path / "ck2.theta.bin").read_bytes()
    assert first == second

    v = make_model("vanilla", FRAME, RngStream(9))
    save_checkpoint(v, tmp_path / "v")
    assert load_checkpoint(tmp_path / "v.json").encoder is None


def test_footprint_radiance_averages_subview():
    m = make_model("ours", CoordinateFrame.build((-10, 10, -10, 10), (2, 3)), RngStream(4))
    out = m.footprint_radiance(0.5, 0.5, np.array([[0.0, 1.0]]), 2.0)
    assert out.shape == (1, 2)
    coords = np.array([[0.5, 0.5, 1.0, 2.0, s, t] for s in range(2) for t in range(3)])
    assert out[0, 1] == pytest.approx(m.radiance(coords).mean(), rel=1e-5)
