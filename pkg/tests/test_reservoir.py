"""Reservoir update, training, forecasting, and echo-state checks.

The probability simplex gives two exact laws worth pinning: reservoir
coordinates started at zero sum to 1 - (1 - eps)^t after t steps, and two
recurrence-free copies under a shared drive contract at exactly 1 - eps
per step.
"""

import numpy as np
import pytest

from qrcdyn import dynamics, qcore, reservoir
from qrcdyn.dynamics import MinMaxScaler, generate_trajectory, lorenz63, split_and_scale
from qrcdyn.qcore import NoiseModel
from qrcdyn.reservoir import (
    ForecastDivergedError,
    QRC,
    RFQRC,
    ReservoirConfig,
    batch_probabilities,
    closed_loop_run,
    closed_loop_step,
    esp_contraction_test,
    open_loop_run,
    recurrence_angles,
    reservoir_step,
    select_beta,
    train_readout,
    vpt,
)


@pytest.fixture(scope="module")
def small_split():
    traj = generate_trajectory(lorenz63(), dt=0.01, n_steps=800, n_discard=200, seed=0)
    return split_and_scale(traj, washout_lt=0.5, train_lt=3.0, test_lt=2.0)


def small_config(variant=RFQRC, epsilon=0.3, noise=NoiseModel()):
    return ReservoirConfig.create(
        n_qubits=4, in_dim=3, epsilon=epsilon, variant=variant, seed=7, noise=noise
    )


@pytest.mark.parametrize("variant", [RFQRC, QRC])
def test_state_mass_follows_leak_law(variant):
    # probabilities sum to one, so sum(r_t) = 1 - (1 - eps)^t from r_0 = 0
    cfg = small_config(variant=variant, epsilon=0.21)
    rng = np.random.default_rng(3)
    r = np.zeros(cfg.n_r)
    for t in range(1, 12):
        r = reservoir_step(r, rng.uniform(0, 1, 3), cfg)
        assert abs(r.sum() - (1.0 - (1.0 - 0.21) ** t)) < 1e-12


def test_reservoir_step_is_convex_blend():
    cfg = small_config(epsilon=0.4)
    u = np.array([0.2, 0.6, 0.9])
    probs = qcore.measure_probabilities(qcore.run_circuit_pure(u, cfg.layout))
    r0 = np.full(cfg.n_r, 1.0 / cfg.n_r)
    assert np.allclose(reservoir_step(r0, u, cfg), 0.6 * r0 + 0.4 * probs, atol=1e-15)


def test_batch_probabilities_matches_per_step():
    cfg = small_config()
    rng = np.random.default_rng(11)
    drive = rng.uniform(0, 1, (9, 3))
    batch = batch_probabilities(cfg, drive)
    for t in range(9):
        single = qcore.measure_probabilities(qcore.run_circuit_pure(drive[t], cfg.layout))
        assert np.array_equal(batch[t], single)


def test_batch_probabilities_rejects_recurrent_variant():
    cfg = small_config(variant=QRC)
    with pytest.raises(ValueError):
        batch_probabilities(cfg, np.zeros((4, 3)))


def test_open_loop_run_windows_and_state(small_split):
    cfg = small_config(epsilon=0.25)
    r_mat, r_last = open_loop_run(small_split, cfg)
    assert r_mat.shape == (cfg.n_r, len(small_split.train))
    assert np.array_equal(r_mat[:, -1], r_last)
    # replay by hand: washout steps update the state but are not recorded
    raw = small_split.traj.states[
        small_split.washout.start : small_split.train.stop
    ]
    inputs = np.clip(
        small_split.scaler.scale(raw),
        reservoir.SCALED_INPUT_MIN,
        reservoir.SCALED_INPUT_MAX,
    )
    r = np.zeros(cfg.n_r)
    for t in range(len(small_split.washout)):
        r = reservoir_step(r, inputs[t], cfg)
    r = reservoir_step(r, inputs[len(small_split.washout)], cfg)
    assert np.allclose(r_mat[:, 0], r, atol=1e-13)


def test_open_loop_run_recurrent_variant(small_split):
    cfg = small_config(variant=QRC, epsilon=0.25)
    r_mat, r_last = open_loop_run(small_split, cfg)
    assert r_mat.shape == (cfg.n_r, len(small_split.train))
    assert np.all(np.isfinite(r_mat))
    assert abs(r_last.sum() - 1.0) < 1e-6  # leak law limit after many steps


def test_ridge_solution_satisfies_normal_equations():
    rng = np.random.default_rng(5)
    r_mat = rng.standard_normal((16, 40))
    targets = rng.standard_normal((40, 3))
    for beta in (1e-9, 1e-3, 1.0):
        w = train_readout(r_mat, targets, beta)
        resid = (r_mat @ r_mat.T + beta * np.eye(16)) @ w - r_mat @ targets
        assert np.abs(resid).max() < 1e-9
        # any perturbation must increase the penalized objective
        def objective(wm):
            return np.sum((r_mat.T @ wm - targets) ** 2) + beta * np.sum(wm**2)

        base = objective(w)
        for _ in range(3):
            assert objective(w + 1e-4 * rng.standard_normal(w.shape)) > base


def test_ridge_recovers_exact_linear_map():
    rng = np.random.default_rng(8)
    w_true = rng.standard_normal((10, 2))
    r_mat = rng.standard_normal((10, 60))
    targets = r_mat.T @ w_true
    w = train_readout(r_mat, targets, 1e-12)
    assert np.abs(w - w_true).max() < 1e-8


def test_train_readout_validates_shapes():
    with pytest.raises(ValueError):
        train_readout(np.zeros((4, 10)), np.zeros((9, 2)), 1e-9)
    with pytest.raises(ValueError):
        train_readout(np.zeros((4, 10)), np.zeros((10, 2)), -1.0)


def test_select_beta_prefers_generalization():
    # pure-noise targets: the tiny-beta fit memorizes them and loses the holdout
    rng = np.random.default_rng(13)
    r_mat = rng.standard_normal((30, 36))
    targets = rng.standard_normal((36, 2))
    cfg = small_config()
    cfg = ReservoirConfig(
        layout=cfg.layout, epsilon=cfg.epsilon, beta_grid=(1e-12, 10.0)
    )
    assert select_beta(r_mat, targets, cfg) == 10.0


def test_select_beta_clean_targets_takes_smallest():
    rng = np.random.default_rng(14)
    r_mat = rng.standard_normal((8, 50))
    targets = r_mat.T @ rng.standard_normal((8, 3))
    cfg = small_config()
    assert select_beta(r_mat, targets, cfg) == min(cfg.beta_grid)


def test_closed_loop_step_clamps_feedback():
    cfg = small_config(epsilon=0.5)
    scaler = MinMaxScaler(mins=np.zeros(3), maxs=np.ones(3))
    # readout far outside the data box must be clipped before encoding
    w_out = np.zeros((cfg.n_r, 3))
    w_out[0] = [50.0, -50.0, 0.5]
    r = np.zeros(cfg.n_r)
    r[0] = 1.0
    stepped = closed_loop_step(r, w_out, cfg, scaler)
    u_clipped = np.array(
        [reservoir.SCALED_INPUT_MAX, reservoir.SCALED_INPUT_MIN, 0.5]
    )
    assert np.allclose(stepped, reservoir_step(r, u_clipped, cfg), atol=1e-15)


def test_closed_loop_run_shapes_and_divergence():
    cfg = small_config()
    scaler = MinMaxScaler(mins=np.zeros(3), maxs=np.ones(3))
    r0 = np.full(cfg.n_r, 1.0 / cfg.n_r)
    w_ok = np.full((cfg.n_r, 3), 0.5 / cfg.n_r)
    preds, r_end = closed_loop_run(r0, w_ok, cfg, 5, scaler)
    assert preds.shape == (5, 3)
    assert r_end.shape == (cfg.n_r,)
    w_bad = np.full((cfg.n_r, 3), 1e9)
    with pytest.raises(ForecastDivergedError):
        closed_loop_run(r0, w_bad, cfg, 3, scaler)


def test_closed_loop_run_replays_steps():
    cfg = small_config()
    scaler = MinMaxScaler(mins=-np.ones(3), maxs=np.ones(3))
    rng = np.random.default_rng(2)
    w = 0.1 * rng.standard_normal((cfg.n_r, 3))
    r = np.full(cfg.n_r, 1.0 / cfg.n_r)
    preds, _ = closed_loop_run(r, w, cfg, 4, scaler)
    for i in range(4):
        assert np.allclose(preds[i], w.T @ r, atol=1e-15)
        r = closed_loop_step(r, w, cfg, scaler)


def test_esp_contraction_exact_for_recurrence_free():
    cfg = small_config(epsilon=0.37)
    rng = np.random.default_rng(4)
    drive = rng.uniform(0, 1, (20, 3))
    r1 = rng.uniform(0, 1, cfg.n_r)
    r2 = rng.uniform(0, 1, cfg.n_r)
    gammas = esp_contraction_test(cfg, drive, r1, r2)
    assert len(gammas) > 0
    assert np.abs(gammas - (1.0 - 0.37)).max() < 1e-12


def test_esp_recurrent_variant_forgets_initial_state():
    cfg = small_config(variant=QRC, epsilon=0.3)
    rng = np.random.default_rng(6)
    drive = rng.uniform(0, 1, (60, 3))
    r1 = rng.uniform(0, 1, cfg.n_r)
    r2 = rng.uniform(0, 1, cfg.n_r)
    gammas = esp_contraction_test(cfg, drive, r1, r2)
    d_ratio = np.prod(gammas)
    assert d_ratio < 1e-3  # separation shrinks by orders of magnitude
    assert np.all(gammas < 1.05)  # never strongly expanding


def test_esp_identical_states_short_circuit():
    cfg = small_config()
    r = np.full(cfg.n_r, 1.0 / cfg.n_r)
    gammas = esp_contraction_test(cfg, np.zeros((5, 3)), r, r.copy())
    assert gammas.size == 0


def test_sampling_noise_reproducible_and_gated():
    cfg = small_config(noise=NoiseModel.sampling(shots=500))
    u = np.array([0.3, 0.5, 0.7])
    r = np.zeros(cfg.n_r)
    a = reservoir_step(r, u, cfg, np.random.default_rng(9))
    b = reservoir_step(r, u, cfg, np.random.default_rng(9))
    assert np.array_equal(a, b)
    with pytest.raises(ValueError):
        reservoir_step(r, u, cfg)


def test_vpt_known_crossing():
    lt_steps = 10
    t = np.arange(50)
    truth = np.stack([np.sin(0.3 * t), np.cos(0.3 * t)], axis=1)
    dev = truth - truth.mean(axis=0)
    denom = np.sqrt(np.mean(np.sum(dev**2, axis=1)))
    pred = truth.copy()
    pred[23:] += denom  # error/denom = 1 > 0.4 from step 23 onward
    assert vpt(pred, truth, lt_steps) == pytest.approx(2.3)
    assert vpt(truth, truth, lt_steps) == pytest.approx(5.0)  # never exceeds


def test_vpt_validates_input():
    with pytest.raises(ValueError):
        vpt(np.zeros((5, 2)), np.zeros((6, 2)), 10)
    with pytest.raises(ValueError):
        vpt(np.zeros((5, 2)), np.zeros((5, 2)), 0)
    with pytest.raises(ValueError):
        vpt(np.ones((5, 2)), np.ones((5, 2)), 10)  # constant truth has no scale


def test_config_validation():
    layout = qcore.CircuitLayout.random(3, 3, seed=0)
    with pytest.raises(ValueError):
        ReservoirConfig(layout=layout, epsilon=0.0)
    with pytest.raises(ValueError):
        ReservoirConfig(layout=layout, epsilon=1.5)
    with pytest.raises(ValueError):
        ReservoirConfig(layout=layout, epsilon=0.3, variant="esn")
    with pytest.raises(ValueError):
        ReservoirConfig(layout=layout, epsilon=0.3, variant=QRC)  # no projection
    with pytest.raises(ValueError):
        ReservoirConfig(
            layout=layout,
            epsilon=0.3,
            variant=QRC,
            projection=np.ones((3, 8)),  # rows not unit norm
        )
    with pytest.raises(ValueError):
        ReservoirConfig(
            layout=layout, epsilon=0.3, variant=RFQRC, projection=np.ones((3, 8))
        )


def test_create_is_deterministic_per_seed():
    a = ReservoirConfig.create(5, 3, 0.2, variant=QRC, seed=42)
    b = ReservoirConfig.create(5, 3, 0.2, variant=QRC, seed=42)
    c = ReservoirConfig.create(5, 3, 0.2, variant=QRC, seed=43)
    assert np.array_equal(a.layout.alpha, b.layout.alpha)
    assert np.array_equal(a.projection, b.projection)
    assert not np.array_equal(a.layout.alpha, c.layout.alpha)
    norms = np.linalg.norm(a.projection, axis=1)
    assert np.abs(norms - 1.0).max() < 1e-12


def test_recurrence_angles_bounded():
    rng = np.random.default_rng(1)
    proj = rng.standard_normal((4, 16))
    proj /= np.linalg.norm(proj, axis=1, keepdims=True)
    angles = recurrence_angles(proj, 100.0 * rng.standard_normal(16))
    assert np.all(np.abs(angles) <= np.pi)


def test_save_load_round_trip(tmp_path, small_split):
    cfg = small_config(epsilon=0.21)
    r_mat, r_last = open_loop_run(small_split, cfg)
    targets = small_split.traj.states[
        small_split.train.start + 1 : small_split.train.stop + 1
    ]
    w_out = train_readout(r_mat, targets, 1e-9)
    prefix = tmp_path / "model"
    reservoir.save_model(prefix, cfg, small_split.scaler, w_out, r_last)
    cfg2, scaler2, w2, r_last2 = reservoir.load_model(prefix)
    assert np.array_equal(w2, w_out)
    assert np.array_equal(r_last2, r_last)
    assert cfg2.epsilon == cfg.epsilon
    assert cfg2.variant == cfg.variant
    assert np.array_equal(cfg2.layout.alpha, cfg.layout.alpha)
    assert np.array_equal(scaler2.mins, small_split.scaler.mins)
    assert np.array_equal(scaler2.maxs, small_split.scaler.maxs)
    # loaded model must predict the same values (memory layout of the
    # loaded blocks may reorder BLAS sums at the last ulp)
    r0 = np.full(cfg.n_r, 1.0 / cfg.n_r)
    p1, _ = closed_loop_run(r0, w_out, cfg, 3, small_split.scaler)
    p2, _ = closed_loop_run(r0, w2, cfg2, 3, scaler2)
    assert np.allclose(p1, p2, rtol=0, atol=1e-12)
