"""Recurrent model: cells, forward passes, hybrid loss, BPTT, Adam, training."""

import math

import numpy as np
import pytest

from rislab.errors import DataFormatError, NumericalError, ValidationError
from rislab.neural import (
    LossSpec,
    LSTMCellParams,
    ModelParams,
    OptimizerState,
    TrainConfig,
    adam_arrays,
    adam_step,
    backward,
    bilstm_forward,
    clip_gradients,
    clone_params,
    grid_search,
    hybrid_loss,
    init_params,
    load_checkpoint,
    load_params,
    lstm_cell,
    model_forward,
    param_arrays,
    param_entries,
    save_checkpoint,
    save_params,
    softmax,
    train,
)


def tiny_theta(seed=0, d_in=6, n_classes=3, hidden=4, embed_dim=3):
    rng = np.random.default_rng(seed)
    return init_params(
        rng, d_in, n_classes, hidden=hidden, hidden2=hidden, embed_dim=embed_dim
    )


def tiny_batch(seed=1, B=2, F=5, d_in=6, n_classes=3):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((B, F, d_in))
    k_idx = rng.integers(0, n_classes, B)
    u = rng.standard_normal((B, 2))
    y = np.zeros((B, n_classes))
    y[np.arange(B), k_idx] = 1.0
    return x, k_idx, u, y


def synth_training_set(seed, n, F=6, d_in=5, n_classes=3):
    """Learnable toy task: coordinates are a linear readout of the sequence."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, F, d_in))
    w = rng.standard_normal((d_in, 2))
    u = x.mean(axis=1) @ w + 0.01 * rng.standard_normal((n, 2))
    k_idx = rng.integers(0, n_classes, n)
    y = np.zeros((n, n_classes))
    y[np.arange(n), k_idx] = 1.0
    return x, k_idx, u, y


# ---------------------------------------------------------------------------
# lstm_cell


def test_zero_weights_give_zero_state():
    w = LSTMCellParams(wx=np.zeros((3, 8)), wh=np.zeros((2, 8)), b=np.zeros(8))
    h, c = lstm_cell(np.array([1.0, -2.0, 3.0]), np.zeros(2), np.zeros(2), w)
    assert np.array_equal(h, np.zeros(2))
    assert np.array_equal(c, np.zeros(2))


def test_single_unit_matches_scalar_hand_computation():
    # independent scalar route: plain math.exp/math.tanh, gate order i,f,g,o
    w = LSTMCellParams(
        wx=np.array([[0.5, -0.3, 0.8, 0.2]]),
        wh=np.array([[0.1, 0.4, -0.2, 0.3]]),
        b=np.array([0.05, -0.1, 0.2, 0.6]),
    )
    x, h_prev, c_prev = 0.7, 0.3, -0.4

    def sigmoid(z):
        return 1.0 / (1.0 + math.exp(-z))

    z = [x * w.wx[0, j] + h_prev * w.wh[0, j] + w.b[j] for j in range(4)]
    i, f, o = sigmoid(z[0]), sigmoid(z[1]), sigmoid(z[3])

    g_tanh = math.tanh(z[2])
    c_tanh = f * c_prev + i * g_tanh
    h_tanh = o * math.tanh(c_tanh)
    h, c = lstm_cell(np.array([x]), np.array([h_prev]), np.array([c_prev]), w)
    assert abs(c[0] - c_tanh) < 1e-12
    assert abs(h[0] - h_tanh) < 1e-12

    g_relu = max(z[2], 0.0)
    c_relu = f * c_prev + i * g_relu
    h_relu = o * max(c_relu, 0.0)
    h, c = lstm_cell(
        np.array([x]), np.array([h_prev]), np.array([c_prev]), w, activation="relu"
    )
    assert abs(c[0] - c_relu) < 1e-12
    assert abs(h[0] - h_relu) < 1e-12


def test_tanh_cell_output_is_bounded():
    rng = np.random.default_rng(2)
    w = LSTMCellParams(
        wx=rng.standard_normal((4, 12)) * 10,
        wh=rng.standard_normal((3, 12)) * 10,
        b=rng.standard_normal(12) * 10,
    )
    h, _ = lstm_cell(rng.standard_normal(4) * 100, rng.standard_normal(3),
                     rng.standard_normal(3) * 50, w)
    assert np.all(np.abs(h) <= 1.0)


def test_cell_rejects_width_mismatch():
    w = LSTMCellParams(wx=np.zeros((2, 8)), wh=np.zeros((2, 8)), b=np.zeros(8))
    with pytest.raises(ValidationError):
        lstm_cell(np.zeros(3), np.zeros(2), np.zeros(2), w)


# ---------------------------------------------------------------------------
# bilstm_forward


def _mirror_theta(seed=3, d_in=4, hidden=3):
    """Model whose backward cell shares the forward cell's weights."""
    theta = tiny_theta(seed=seed, d_in=d_in, hidden=hidden)
    theta.bilstm_bw = LSTMCellParams(
        wx=theta.bilstm_fw.wx.copy(),
        wh=theta.bilstm_fw.wh.copy(),
        b=theta.bilstm_fw.b.copy(),
    )
    return theta


def test_palindrome_swaps_direction_halves():
    theta = _mirror_theta()
    H = theta.bilstm_fw.hidden
    rng = np.random.default_rng(4)
    half = rng.standard_normal((3, 4))
    seq = np.vstack([half, half[::-1]])  # palindromic in time
    out = bilstm_forward(seq, theta)
    F = seq.shape[0]
    for t in range(F):
        assert np.array_equal(out[t, :H], out[F - 1 - t, H:])


def test_single_step_sees_both_directions_equal():
    theta = _mirror_theta()
    H = theta.bilstm_fw.hidden
    out = bilstm_forward(np.random.default_rng(5).standard_normal((1, 4)), theta)
    assert out.shape == (1, 2 * H)
    assert np.array_equal(out[0, :H], out[0, H:])


def test_bilstm_matches_step_by_step_reference():
    # straight-line oracle built from the public single-step cell
    theta = tiny_theta(seed=6, d_in=5, hidden=4)
    H = theta.bilstm_fw.hidden
    rng = np.random.default_rng(7)
    seq = rng.standard_normal((8, 5))

    def run(cell, steps):
        h = np.zeros(H)
        c = np.zeros(H)
        out = []
        for x_t in steps:
            h, c = lstm_cell(x_t, h, c, cell, activation="tanh")
            out.append(h)
        return np.array(out)

    fw = run(theta.bilstm_fw, seq)
    bw = run(theta.bilstm_bw, seq[::-1])[::-1]
    expected = np.hstack([fw, bw])
    got = bilstm_forward(seq, theta)
    assert got.shape == (8, 2 * H)
    assert np.max(np.abs(got - expected)) < 1e-12


# ---------------------------------------------------------------------------
# model_forward and softmax


def test_softmax_uniform_and_simplex():
    assert np.allclose(softmax(np.zeros(7)), np.full(7, 1.0 / 7.0), atol=1e-15)
    rng = np.random.default_rng(8)
    for _ in range(20):
        p = softmax(rng.standard_normal(9) * 30)
        assert abs(p.sum() - 1.0) < 1e-12
        assert np.all(p > 0)


def test_softmax_shift_invariance():
    rng = np.random.default_rng(9)
    z = rng.standard_normal(6)
    assert np.allclose(softmax(z + 123.456), softmax(z), atol=1e-12)


def test_zero_heads_predict_zero_coordinates():
    theta = tiny_theta(seed=10)
    theta.head_coord_w = np.zeros_like(theta.head_coord_w)
    theta.head_coord_b = np.zeros_like(theta.head_coord_b)
    x, k_idx, _, _ = tiny_batch(seed=11)
    u_hat, probs = model_forward(x[0], int(k_idx[0]), theta)
    assert np.array_equal(u_hat, np.zeros(2))
    assert abs(probs.sum() - 1.0) < 1e-12


def test_model_forward_rejects_bad_class_index():
    theta = tiny_theta(seed=12)
    x, _, _, _ = tiny_batch(seed=13)
    with pytest.raises(ValidationError):
        model_forward(x[0], 3, theta)  # K = 3, valid indices 0..2
    with pytest.raises(ValidationError):
        model_forward(x[0], -1, theta)


# ---------------------------------------------------------------------------
# hybrid loss


def test_perfect_fit_has_zero_loss():
    theta = tiny_theta(seed=14)
    spec = LossSpec(alpha=0.0, n_classes=3)
    u = np.array([[1.0, 2.0]])
    probs = np.array([[0.0, 1.0, 0.0]])
    y = np.array([[0.0, 1.0, 0.0]])
    loss = hybrid_loss(u, probs, u, y, theta, spec)
    assert loss.coord == 0.0
    assert loss.xent == 0.0
    assert loss.reg == 0.0
    assert loss.total == 0.0


def test_unit_offset_uniform_probs_example():
    # off by (1, 0) plus uniform probabilities over 4 classes: 1 + ln 4
    theta = tiny_theta(seed=15, n_classes=4)
    spec = LossSpec(alpha=0.0, n_classes=4)
    loss = hybrid_loss(
        np.array([[1.0, 0.0]]),
        np.array([[0.25, 0.25, 0.25, 0.25]]),
        np.array([[0.0, 0.0]]),
        np.array([[1.0, 0.0, 0.0, 0.0]]),
        theta,
        spec,
    )
    assert abs(loss.total - (1.0 + math.log(4.0))) < 1e-12
    assert abs(loss.total - 2.3863) < 1e-4


def test_alpha_sensitivity_equals_parameter_norm():
    theta = tiny_theta(seed=16)
    sq_norm = sum(float(np.sum(a * a)) for a in param_arrays(theta))
    u = np.array([[0.5, -0.5]])
    probs = np.array([[0.6, 0.3, 0.1]])
    y = np.array([[1.0, 0.0, 0.0]])
    l1 = hybrid_loss(u, probs, u, y, theta, LossSpec(alpha=1.0, n_classes=3))
    l0 = hybrid_loss(u, probs, u, y, theta, LossSpec(alpha=0.0, n_classes=3))
    assert l0.reg == 0.0
    assert l1.reg == sq_norm
    assert abs((l1.total - l0.total) - sq_norm) < 1e-12 * max(1.0, sq_norm)


def test_loss_matches_per_sample_accumulation():
    # brute-force route: loop over samples, average the two data terms
    rng = np.random.default_rng(17)
    theta = tiny_theta(seed=18)
    spec = LossSpec(alpha=0.25, n_classes=3)
    N = 13
    u_hat = rng.standard_normal((N, 2))
    u_true = rng.standard_normal((N, 2))
    probs = softmax(rng.standard_normal((N, 3)))
    k = rng.integers(0, 3, N)
    y = np.zeros((N, 3))
    y[np.arange(N), k] = 1.0
    loss = hybrid_loss(u_hat, probs, u_true, y, theta, spec)
    coord = sum(float(np.sum((u_true[i] - u_hat[i]) ** 2)) for i in range(N)) / N
    xent = sum(-math.log(probs[i, k[i]]) for i in range(N)) / N
    reg = spec.alpha * sum(float(np.sum(a * a)) for a in param_arrays(theta))
    assert abs(loss.coord - coord) < 1e-12
    assert abs(loss.xent - xent) < 1e-12
    assert abs(loss.reg - reg) < 1e-12
    assert abs(loss.total - (loss.coord + loss.xent + loss.reg)) < 1e-12


def test_loss_validates_inputs():
    theta = tiny_theta(seed=19)
    with pytest.raises(ValidationError):
        LossSpec(alpha=-1.0, n_classes=3)
    with pytest.raises(ValidationError):
        hybrid_loss(
            np.array([[0.0, 0.0]]),
            np.array([[0.5, 0.5]]),  # 2 classes vs spec 3
            np.array([[0.0, 0.0]]),
            np.array([[1.0, 0.0]]),
            theta,
            LossSpec(alpha=0.0, n_classes=3),
        )


# ---------------------------------------------------------------------------
# gradients


def test_gradients_match_central_finite_differences():
    theta = tiny_theta(seed=20)
    x, k_idx, u, y = tiny_batch(seed=21)
    spec = LossSpec(alpha=0.01, n_classes=3)
    _, grads = backward(x, k_idx, u, y, theta, spec)

    def loss_at(t):
        outs = [model_forward(x[b], int(k_idx[b]), t) for b in range(x.shape[0])]
        u_hat = np.array([o[0] for o in outs])
        probs = np.array([o[1] for o in outs])
        return hybrid_loss(u_hat, probs, u, y, t, spec).total

    step = 1e-5
    worst = 0.0
    for (name, g_an) in param_entries(grads):
        param = dict(param_entries(theta))[name]
        it = np.nditer(param, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = param[idx]
            param[idx] = orig + step
            up = loss_at(theta)
            param[idx] = orig - step
            down = loss_at(theta)
            param[idx] = orig
            g_fd = (up - down) / (2.0 * step)
            err = abs(g_fd - g_an[idx]) / max(abs(g_fd), abs(g_an[idx]), 1e-3)
            worst = max(worst, err)
    assert worst < 1e-4


def test_regularizer_gradient_is_two_alpha_theta():
    theta = tiny_theta(seed=22)
    x, k_idx, u, y = tiny_batch(seed=23)
    alpha = 0.7
    _, g_a = backward(x, k_idx, u, y, theta, LossSpec(alpha=alpha, n_classes=3))
    _, g_0 = backward(x, k_idx, u, y, theta, LossSpec(alpha=0.0, n_classes=3))
    for ga, g0, th in zip(param_arrays(g_a), param_arrays(g_0), param_arrays(theta)):
        assert np.allclose(ga - g0, 2.0 * alpha * th, atol=1e-12)


def test_embedding_gradient_is_row_sparse():
    theta = tiny_theta(seed=24)
    x, _, u, y = tiny_batch(seed=25)
    k_idx = np.array([1, 1])
    y = np.zeros((2, 3))
    y[:, 1] = 1.0
    _, grads = backward(x, k_idx, u, y, theta, LossSpec(alpha=0.0, n_classes=3))
    assert np.array_equal(grads.embed[0], np.zeros(3))
    assert np.array_equal(grads.embed[2], np.zeros(3))
    assert np.any(grads.embed[1] != 0.0)


def test_sharded_backward_is_schedule_independent():
    from concurrent.futures import ThreadPoolExecutor

    theta = tiny_theta(seed=26)
    x, k_idx, u, y = tiny_batch(seed=27, B=7)
    spec = LossSpec(alpha=0.1, n_classes=3)
    loss1, g1 = backward(x, k_idx, u, y, theta, spec, n_shards=3)
    with ThreadPoolExecutor(max_workers=3) as pool:
        loss2, g2 = backward(x, k_idx, u, y, theta, spec, n_shards=3, pool=pool)
    assert loss1.total == loss2.total
    for a, b in zip(param_arrays(g1), param_arrays(g2)):
        assert np.array_equal(a, b)
    # different shard counts agree to rounding
    _, g_serial = backward(x, k_idx, u, y, theta, spec, n_shards=1)
    for a, b in zip(param_arrays(g_serial), param_arrays(g1)):
        assert np.allclose(a, b, atol=1e-12)


def test_backward_rejects_empty_batch():
    theta = tiny_theta(seed=28)
    with pytest.raises(ValidationError):
        backward(
            np.zeros((0, 5, 6)), np.zeros(0, dtype=int), np.zeros((0, 2)),
            np.zeros((0, 3)), theta, LossSpec(alpha=0.0, n_classes=3),
        )


# ---------------------------------------------------------------------------
# Adam


def test_adam_first_step_matches_hand_evaluation():
    arrays = [np.array([0.0])]
    grads = [np.array([1.0])]
    state = OptimizerState.for_params(arrays, lr=0.1)
    new_arrays, new_state = adam_arrays(arrays, grads, state)
    assert abs(new_arrays[0][0] - (-0.1 / (1.0 + 1e-8))) < 1e-15
    assert new_state.step == 1


def test_adam_zero_gradient_from_rest_leaves_parameters():
    arrays = [np.array([1.5, -2.0])]
    state = OptimizerState.for_params(arrays, lr=0.1)
    arrays2, state2 = adam_arrays(arrays, [np.zeros(2)], state)
    assert np.array_equal(arrays2[0], arrays[0])  # zero moments stay zero
    assert np.array_equal(state2.m[0], np.zeros(2))
    # once momentum exists, a zero gradient decays it by beta1 exactly
    arrays3, state3 = adam_arrays(arrays2, [np.array([1.0, -1.0])], state2)
    _, state4 = adam_arrays(arrays3, [np.zeros(2)], state3)
    assert np.array_equal(state4.m[0], 0.9 * state3.m[0])


def test_adam_vectorized_matches_scalar_loop():
    # 1000 steps on a 3-element parameter, re-derived element by element with
    # plain Python floats in the same operation order
    rng = np.random.default_rng(29)
    a_vec = [np.array([0.3, -0.7, 1.1])]
    state = OptimizerState.for_params(a_vec, lr=0.01)
    a_ref = [0.3, -0.7, 1.1]
    m_ref = [0.0, 0.0, 0.0]
    v_ref = [0.0, 0.0, 0.0]
    b1, b2, eps, lr = state.beta1, state.beta2, state.eps, state.lr
    for t in range(1, 1001):
        g = rng.standard_normal(3)
        a_vec, state = adam_arrays(a_vec, [g], state)
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for j in range(3):
            m_ref[j] = b1 * m_ref[j] + (1.0 - b1) * g[j]
            v_ref[j] = b2 * v_ref[j] + (1.0 - b2) * (g[j] * g[j])
            a_ref[j] = a_ref[j] - lr * (m_ref[j] / c1) / (math.sqrt(v_ref[j] / c2) + eps)
        assert a_vec[0].tolist() == a_ref


def test_adam_rejects_non_finite_gradient():
    arrays = [np.array([0.0])]
    state = OptimizerState.for_params(arrays)
    with pytest.raises(NumericalError):
        adam_arrays(arrays, [np.array([math.nan])], state)


def test_adam_step_is_pure():
    theta = tiny_theta(seed=30)
    before = [a.copy() for a in param_arrays(theta)]
    grads = clone_params(theta)
    state = OptimizerState.for_params(theta, lr=0.05)
    new_theta, new_state = adam_step(theta, grads, state)
    for a, b in zip(param_arrays(theta), before):
        assert np.array_equal(a, b)
    assert state.step == 0 and new_state.step == 1
    assert any(
        not np.array_equal(a, b)
        for a, b in zip(param_arrays(new_theta), param_arrays(theta))
    )


def test_clip_gradients_scales_to_max_norm():
    g = [np.array([3.0, 0.0]), np.array([[4.0]])]
    norm = clip_gradients(g, 2.5)
    assert abs(norm - 5.0) < 1e-12
    clipped = math.sqrt(sum(float(np.sum(a * a)) for a in g))
    assert abs(clipped - 2.5) < 1e-12
    g2 = [np.array([0.3])]
    norm2 = clip_gradients(g2, 2.5)
    assert abs(norm2 - 0.3) < 1e-15
    assert g2[0][0] == 0.3
    g3 = [np.array([100.0])]
    assert clip_gradients(g3, None) == 100.0
    assert g3[0][0] == 100.0


# ---------------------------------------------------------------------------
# training loop


def _small_cfg(**kw):
    base = dict(epochs=5, batch_size=16, lr=3e-3, alpha=1e-4, seed=0,
                hidden=8, hidden2=8, embed_dim=4)
    base.update(kw)
    return TrainConfig(**base)


def test_zero_epochs_returns_initialization():
    data = synth_training_set(31, 40)
    val = synth_training_set(32, 12)
    result = train(data, val, _small_cfg(epochs=0))
    assert result.history == []
    assert result.best_epoch == 0
    for a, b in zip(param_arrays(result.params), param_arrays(result.final_params)):
        assert np.array_equal(a, b)


def test_best_checkpoint_attains_min_recorded_val_loss():
    data = synth_training_set(33, 60)
    val = synth_training_set(34, 20)
    result = train(data, val, _small_cfg(epochs=8))
    val_losses = [row[2] for row in result.history]
    assert result.val_loss == min(val_losses) or result.best_epoch == 0
    if result.best_epoch > 0:
        assert result.history[result.best_epoch - 1][2] == result.val_loss


def test_smoke_training_improves_validation_loss():
    data = synth_training_set(35, 100)
    val = synth_training_set(36, 30)
    cfg = _small_cfg(epochs=30)
    result = train(data, val, cfg)
    spec = LossSpec(alpha=cfg.alpha, n_classes=3)
    from rislab.neural import _eval_loss  # initial reference point

    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(10, 0)))
    theta0 = init_params(rng, 5, 3, hidden=8, hidden2=8, embed_dim=4)
    init_val = _eval_loss(val[0], val[1], val[2], val[3], theta0, spec).total
    assert result.val_loss < init_val
    assert result.best_epoch >= 1


def test_training_is_seed_deterministic(tmp_path):
    data = synth_training_set(37, 50)
    val = synth_training_set(38, 15)
    r1 = train(data, val, _small_cfg(epochs=4))
    r2 = train(data, val, _small_cfg(epochs=4))
    assert r1.history == r2.history
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(p1, r1.params, {"seed": 0})
    save_checkpoint(p2, r2.params, {"seed": 0})
    assert p1.read_bytes() == p2.read_bytes()


def test_sharded_training_matches_serial():
    data = synth_training_set(39, 48)
    val = synth_training_set(40, 16)
    serial = train(data, val, _small_cfg(epochs=3, n_shards=2), workers=1)
    threaded = train(data, val, _small_cfg(epochs=3, n_shards=2), workers=2)
    assert serial.history == threaded.history
    for a, b in zip(param_arrays(serial.params), param_arrays(threaded.params)):
        assert np.array_equal(a, b)


@pytest.mark.filterwarnings("ignore:overflow encountered:RuntimeWarning")
def test_divergent_loss_aborts_with_location():
    data = synth_training_set(41, 40)
    x, k_idx, u, y = data
    u = u.copy()
    u[0] = 1e200  # first batch overflows the squared-error term
    val = synth_training_set(42, 12)
    with pytest.raises(NumericalError, match="epoch"):
        train((x, k_idx, u, y), val, _small_cfg(epochs=1, batch_size=40))


def test_train_rejects_empty_split():
    data = synth_training_set(43, 20)
    empty = tuple(a[:0] for a in data)
    with pytest.raises(ValidationError):
        train(empty, data, _small_cfg())
    with pytest.raises(ValidationError):
        train(data, empty, _small_cfg())


# ---------------------------------------------------------------------------
# grid search


def test_grid_search_singleton_and_table():
    data = synth_training_set(44, 30)
    val = synth_training_set(45, 10)
    best, result, table = grid_search(
        [{"lr": 1e-3}], data, val, _small_cfg(), epochs=2
    )
    assert best == {"lr": 1e-3}
    assert len(table) == 1
    assert table[0][1] == result.val_loss


def test_grid_search_alpha_zero_attains_lower_train_loss():
    data = synth_training_set(46, 40)
    val = synth_training_set(47, 12)
    table_rows = {}
    for alpha in (0.0, 10.0):
        result = train(data, val, _small_cfg(epochs=3, alpha=alpha))
        table_rows[alpha] = result.history[-1][1]
    assert table_rows[0.0] < table_rows[10.0]


def test_grid_search_tie_break_keeps_first_point():
    data = synth_training_set(48, 30)
    val = synth_training_set(49, 10)
    best, _, table = grid_search(
        [{"lr": 2e-3}, {"lr": 2e-3}], data, val, _small_cfg(), epochs=1
    )
    assert best == {"lr": 2e-3}
    assert len(table) == 2
    assert table[0][1] == table[1][1]


def test_grid_search_rejects_empty_grid():
    data = synth_training_set(50, 20)
    with pytest.raises(ValidationError):
        grid_search([], data, data, _small_cfg())


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip_preserves_forward_outputs(tmp_path):
    theta = tiny_theta(seed=51)
    x, k_idx, _, _ = tiny_batch(seed=52, B=3)
    path = tmp_path / "model.ckpt"
    meta = {"dataset_hash": "ab" * 32, "seed": 9, "val_loss": 0.5}
    save_checkpoint(path, theta, meta)
    theta2, header = load_checkpoint(path)
    assert header["dataset_hash"] == "ab" * 32
    assert header["seed"] == 9
    assert header["arch"] == "bilstm-dual"
    for b in range(3):
        u1, p1 = model_forward(x[b], int(k_idx[b]), theta)
        u2, p2 = model_forward(x[b], int(k_idx[b]), theta2)
        assert np.array_equal(u1, u2)
        assert np.array_equal(p1, p2)


def test_checkpoint_save_is_canonical(tmp_path):
    theta = tiny_theta(seed=53)
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(p1, theta, {"seed": 1})
    save_checkpoint(p2, clone_params(theta), {"seed": 1})
    assert p1.read_bytes() == p2.read_bytes()


def test_load_rejects_truncated_blob(tmp_path):
    theta = tiny_theta(seed=54)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, theta, {})
    data = path.read_bytes()
    path.write_bytes(data[:-16])
    with pytest.raises(DataFormatError, match="truncated"):
        load_params(path)


def test_load_rejects_trailing_bytes(tmp_path):
    theta = tiny_theta(seed=55)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, theta, {})
    path.write_bytes(path.read_bytes() + b"\x00" * 8)
    with pytest.raises(DataFormatError, match="trailing"):
        load_params(path)


def test_load_rejects_wrong_version(tmp_path):
    path = tmp_path / "model.ckpt"
    save_params(path, [("w", np.zeros(2))], {"arch": "bilstm-dual"})
    raw = path.read_bytes()
    nl = raw.find(b"\n")
    header = raw[:nl].replace(b'"version":1', b'"version":9')
    path.write_bytes(header + raw[nl:])
    with pytest.raises(ValidationError, match="version"):
        load_params(path)


def test_load_checkpoint_rejects_foreign_arch(tmp_path):
    path = tmp_path / "model.ckpt"
    save_params(path, [("w", np.zeros(2))], {"arch": "mlp-baseline"})
    with pytest.raises(ValidationError, match="arch"):
        load_checkpoint(path)


def test_load_rejects_headerless_file(tmp_path):
    path = tmp_path / "model.ckpt"
    path.write_bytes(b"\x01\x02\x03")
    with pytest.raises(DataFormatError):
        load_params(path)
