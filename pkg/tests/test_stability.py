"""QR spectrum loop, attractor dimension, CLVs, and synchronization classes.

Constant linear maps make exact oracles: the Lyapunov exponents are the
log moduli of the eigenvalues and the covariant vectors are the
eigenvectors, so every piece of the tangent machinery can be checked to
near machine precision before it ever touches a reservoir.
"""

import numpy as np
import pytest

from qrcdyn.dynamics import generate_trajectory, lorenz63, split_and_scale
from qrcdyn.reservoir import QRC, RFQRC, ReservoirConfig
from qrcdyn.stability import (
    DGS,
    GS_NON_DIFFERENTIABLE,
    NO_GS,
    classify_gs,
    clv_angles,
    clv_backward,
    conditional_les,
    kaplan_yorke,
    lyapunov_spectrum,
    save_spectrum_csv,
)


def constant_map(a):
    """Advancer/Jacobian pair for w -> a w with a fixed-point state."""
    return (lambda r: r), (lambda r: a)


def test_spectrum_of_symmetric_linear_map():
    rng = np.random.default_rng(0)
    q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    eig = np.array([2.0, 0.9, 0.5, 0.1])
    a = q @ np.diag(eig) @ q.T
    advance, jac = constant_map(a)
    result, _ = lyapunov_spectrum(
        jac, advance, np.zeros(4), d_t=4, n_steps=300, n_skip=50, dt=1.0
    )
    assert np.abs(result.exponents - np.log(eig)).max() < 1e-10


def test_spectrum_scales_with_time_step():
    a = np.diag([1.5, 0.4])
    advance, jac = constant_map(a)
    res1, _ = lyapunov_spectrum(jac, advance, np.zeros(2), 2, 100, 10, dt=1.0)
    res2, _ = lyapunov_spectrum(jac, advance, np.zeros(2), 2, 100, 10, dt=0.01)
    assert np.allclose(res2.exponents, res1.exponents / 0.01, atol=1e-9)


def test_spectrum_degenerate_rotation_pair():
    rho, theta = 0.8, 0.7
    a = rho * np.array(
        [[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]]
    )
    advance, jac = constant_map(a)
    result, _ = lyapunov_spectrum(jac, advance, np.zeros(2), 2, 400, 100, dt=1.0)
    assert np.abs(result.exponents - np.log(rho)).max() < 1e-8


def test_spectrum_accepts_factored_jacobians():
    a = np.diag([1.2, 0.3])
    advance = lambda r: r
    jac = lambda r: (lambda w: a @ w)  # apply form instead of a matrix
    result, _ = lyapunov_spectrum(jac, advance, np.zeros(2), 2, 120, 20, dt=1.0)
    assert np.abs(result.exponents - np.log([1.2, 0.3])).max() < 1e-10


def test_spectrum_history_reconstructs_tangent_flow():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((3, 3))
    a = a @ a.T / 3 + 0.5 * np.eye(3)  # positive definite, well conditioned
    advance, jac = constant_map(a)
    result, hist = lyapunov_spectrum(
        jac, advance, np.zeros(3), 3, 60, 10, dt=1.0, save_history=True
    )
    assert hist.q_seq.shape == (50, 3, 3)
    assert hist.r_seq.shape == (50, 3, 3)
    assert hist.finite_time_les.shape == (3, 50)
    for i in range(1, 50):
        prod = hist.q_seq[i] @ hist.r_seq[i]
        assert np.abs(prod - a @ hist.q_seq[i - 1]).max() < 1e-12
        assert np.all(np.diagonal(hist.r_seq[i]) > 0)
    # running means must end at the reported exponents
    assert np.allclose(result.convergence_series[:, -1], result.exponents, atol=1e-12)


def test_spectrum_validates_arguments():
    advance, jac = constant_map(np.eye(2))
    with pytest.raises(ValueError):
        lyapunov_spectrum(jac, advance, np.zeros(2), 3, 10, 2, dt=1.0)
    with pytest.raises(ValueError):
        lyapunov_spectrum(jac, advance, np.zeros(2), 2, 10, 10, dt=1.0)
    with pytest.raises(ValueError):
        lyapunov_spectrum(jac, advance, np.zeros(2), 2, 10, 2, dt=0.0)


def test_spectrum_is_seed_deterministic():
    a = np.diag([1.4, 0.6])
    advance, jac = constant_map(a)
    r1, _ = lyapunov_spectrum(jac, advance, np.zeros(2), 2, 80, 20, dt=1.0, seed=5)
    r2, _ = lyapunov_spectrum(jac, advance, np.zeros(2), 2, 80, 20, dt=1.0, seed=5)
    assert np.array_equal(r1.exponents, r2.exponents)


def test_kaplan_yorke_values():
    assert kaplan_yorke(np.array([0.9, 0.0, -14.6])) == pytest.approx(
        2.0 + 0.9 / 14.6
    )
    assert kaplan_yorke(np.array([1.0, -1.0])) == pytest.approx(2.0)
    assert kaplan_yorke(np.array([-0.5, -1.0])) == 0.0
    assert kaplan_yorke(np.array([0.5, -0.2, -0.2, -10.0])) == pytest.approx(
        3.0 + 0.1 / 10.0
    )


def test_kaplan_yorke_rejects_bad_input():
    with pytest.raises(ValueError):
        kaplan_yorke(np.array([0.5, 0.2]))  # all partial sums positive
    with pytest.raises(ValueError):
        kaplan_yorke(np.array([0.1, 0.5, -3.0]))  # not descending
    with pytest.raises(ValueError):
        kaplan_yorke(np.array([np.nan, -1.0]))
    with pytest.raises(ValueError):
        kaplan_yorke(np.array([]))


@pytest.fixture(scope="module")
def tiny_split():
    traj = generate_trajectory(lorenz63(), dt=0.01, n_steps=500, n_discard=200, seed=3)
    return split_and_scale(traj, washout_lt=0.5, train_lt=2.5, test_lt=0.5)


def test_conditional_les_recurrence_free_exact_law(tiny_split):
    cfg = ReservoirConfig.create(3, 3, epsilon=0.2, seed=0)
    results = conditional_les(cfg, tiny_split, epsilons=[0.2, 0.5, 0.9])
    dt = tiny_split.traj.dt
    for res in results:
        expect = np.log(1.0 - res.epsilon) / dt
        assert np.abs(res.exponents - expect).max() < 1e-10
        assert res.max_cle == pytest.approx(expect)


def test_conditional_les_recurrent_variant_contracts(tiny_split):
    cfg = ReservoirConfig.create(3, 3, epsilon=0.3, variant=QRC, seed=1)
    (res,) = conditional_les(cfg, tiny_split, epsilons=[0.3])
    assert res.exponents.shape == (3,)
    assert np.all(np.isfinite(res.exponents))
    # the recurrence perturbs the leak law but stays dissipative here
    assert res.max_cle < 0


def test_classify_gs_cases():
    assert classify_gs(0.1, -5.0).gs_class == NO_GS
    assert classify_gs(0.0, -5.0).gs_class == NO_GS
    assert classify_gs(-1.0, -5.0).gs_class == GS_NON_DIFFERENTIABLE
    assert classify_gs(-8.0, -5.0).gs_class == DGS
    with pytest.raises(ValueError):
        classify_gs(-1.0, 0.0)


def test_clvs_of_triangular_map_are_eigenvectors():
    # non-normal map: backward iteration must find the true eigvecs, not
    # the orthogonal QR basis
    a = np.array([[2.0, 1.0], [0.0, 0.5]])
    advance, jac = constant_map(a)
    _, hist = lyapunov_spectrum(
        jac, advance, np.zeros(2), 2, 220, 20, dt=1.0, save_history=True
    )
    clvs = clv_backward(hist, n_transient_fwd=40, n_transient_bwd=40, seed=0)
    v1 = np.array([1.0, 0.0])
    v2 = np.array([1.0, -1.5]) / np.linalg.norm([1.0, -1.5])
    for t in range(clvs.vectors.shape[0]):
        assert abs(abs(clvs.vectors[t, :, 0] @ v1) - 1.0) < 1e-9
        assert abs(abs(clvs.vectors[t, :, 1] @ v2) - 1.0) < 1e-9
    expect_angle = np.degrees(np.arccos(abs(v1 @ v2)))
    assert np.abs(clvs.angles - expect_angle).max() < 1e-6
    assert clvs.pairs == [(0, 1)]
    assert clvs.start_index == 40


def test_clvs_are_covariant_under_the_map():
    rng = np.random.default_rng(7)
    a = np.array([[1.8, 0.3, 0.0], [0.0, 0.7, 0.2], [0.0, 0.0, 0.2]])
    advance, jac = constant_map(a)
    _, hist = lyapunov_spectrum(
        jac, advance, np.zeros(3), 3, 260, 20, dt=1.0, save_history=True
    )
    clvs = clv_backward(hist, 60, 60, seed=1)
    # J v_i(t) must stay parallel to v_i(t+1)
    for t in range(0, clvs.vectors.shape[0] - 1, 17):
        for i in range(3):
            pushed = a @ clvs.vectors[t, :, i]
            pushed /= np.linalg.norm(pushed)
            align = abs(pushed @ clvs.vectors[t + 1, :, i])
            assert align > 1.0 - 1e-9


def test_clv_backward_validates_transients():
    a = np.diag([1.5, 0.5])
    advance, jac = constant_map(a)
    _, hist = lyapunov_spectrum(
        jac, advance, np.zeros(2), 2, 30, 5, dt=1.0, save_history=True
    )
    with pytest.raises(ValueError):
        clv_backward(hist, 20, 20)
    with pytest.raises(ValueError):
        clv_backward(hist, -1, 0)


def test_clv_angle_histograms_integrate_to_one():
    a = np.array([[2.0, 1.0], [0.0, 0.5]])
    advance, jac = constant_map(a)
    _, hist = lyapunov_spectrum(
        jac, advance, np.zeros(2), 2, 160, 20, dt=1.0, save_history=True
    )
    clvs = clv_backward(hist, 30, 30, seed=0)
    stats = clv_angles(clvs, n_bins=45)
    assert stats.densities.shape == (1, 45)
    widths = np.diff(stats.bin_edges)
    assert np.abs(stats.densities @ widths - 1.0).max() < 1e-12
    with pytest.raises(ValueError):
        clv_angles(clvs, n_bins=0)


def test_save_spectrum_csv_format(tmp_path):
    path = tmp_path / "spec.csv"
    save_spectrum_csv(np.array([0.9056, -0.005, -14.6]), path)
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "exponent_index,value"
    assert lines[1].startswith("1,0.905")
    assert len(lines) == 4
    assert not path.with_name(path.name + ".tmp").exists()
