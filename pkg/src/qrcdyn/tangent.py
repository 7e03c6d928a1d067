"""Analytic tangent dynamics of the reservoir maps.

Derivatives of the measured probabilities with respect to circuit
angles come from the parameter-shift identity for Ry rotations,

    dp/dtheta = (p(theta + pi/2) - p(theta - pi/2)) / 2,

exact per rotation; an input component that is re-uploaded on several
wires gets the sum of its per-slot shifts (each slot angle is pi * u_j,
so the chain rule contributes a factor pi per slot). The identity
survives fixed CPTP channels interleaved with the gates, so under
channel noise the shifted evaluations run through the density path and
the Jacobian differentiates the noisy map itself. Sampling noise keeps
statevector gradients: the sampled probabilities are unbiased around
them, and only the state sequence is perturbed.

Besides the dense Jacobian constructors this module provides closure
factories bundling a state advancer with a matching Jacobian provider
for the spectrum loop; the pair shares one batched circuit evaluation
per step and applies the tangent operator in factored form, so the
N_r x N_r matrix is never materialized on the hot path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import qcore
from .dynamics import MinMaxScaler
from .qcore import CircuitLayout, NoiseModel
from .reservoir import (
    QRC,
    RFQRC,
    SCALED_INPUT_MAX,
    SCALED_INPUT_MIN,
    ReservoirConfig,
    batch_probabilities,
    recurrence_angles,
)
from .seeding import STREAM_SHOTS, make_rng

KIND_CLOSED_LOOP = "closed_loop"
KIND_CONDITIONAL = "conditional"


@dataclass(frozen=True)
class JacobianRecord:
    """A tangent matrix tagged with the map it linearizes."""

    matrix: np.ndarray
    kind: str
    at_step: int | None = None


def _gradient_noise(noise: NoiseModel | None) -> NoiseModel | None:
    """The channel the shift evaluations must run through, if any.

    Sampling noise keeps exact gradients (the sampled probabilities are
    unbiased around the statevector ones), but channel noise reshapes the
    map itself, so its derivatives must be taken through the density path.
    The pi/2 shift rule survives composition with parameter-independent
    CPTP maps: every density entry stays a first-harmonic function of
    each rotation angle.
    """
    if noise is not None and noise.is_channel:
        return noise
    return None


def parameter_shift_dprobs_du(
    u_scaled: np.ndarray,
    layout: CircuitLayout,
    r_angles: np.ndarray | None = None,
    noise: NoiseModel | None = None,
) -> np.ndarray:
    """d(probabilities)/d(scaled input), shape (N_r, D), by parameter shift.

    Each encoding slot is shifted by pi/2 on its own; the derivative for
    component j sums the shifts of every slot that re-uploads u_j, each
    scaled by the encoding chain factor pi. A channel noise model routes
    the shifted evaluations through the density path.
    """
    u = np.asarray(u_scaled, dtype=float)
    if u.shape != (layout.in_dim,):
        raise ValueError(f"u_scaled must have shape ({layout.in_dim},)")
    if r_angles is not None:
        r_angles = np.asarray(r_angles, dtype=float)
        if r_angles.shape != (layout.n,):
            raise ValueError(f"r_angles must have shape ({layout.n},)")
    base = qcore.encode_angles(u, layout)
    active = layout.active_slots
    comps = layout.slot_components[active]
    a = len(active)
    rows = np.repeat(base[None, :], 2 * a, axis=0)
    adx = np.arange(a)
    rows[adx, active] += 0.5 * np.pi
    rows[a + adx, active] -= 0.5 * np.pi
    channel = _gradient_noise(noise)
    if channel is not None:
        r_batch = None
        if r_angles is not None:
            r_batch = np.repeat(r_angles[None, :], rows.shape[0], axis=0)
        probs = qcore.run_noisy_encoded_batch(rows, layout, channel, r_batch)
    else:
        probs = qcore.measure_probabilities(
            qcore._run_encoded_batch(rows, layout, r_angles)
        )
    diff = 0.5 * (probs[:a] - probs[a:])  # (A, N_r), dP/d(slot angle)
    onehot = np.zeros((a, layout.in_dim))
    onehot[adx, comps] = 1.0
    return np.pi * diff.T @ onehot


def parameter_shift_dprobs_dphi(
    u_scaled: np.ndarray,
    phi: np.ndarray,
    layout: CircuitLayout,
    noise: NoiseModel | None = None,
) -> np.ndarray:
    """d(probabilities)/d(recurrence angles), shape (N_r, n)."""
    phi = np.asarray(phi, dtype=float)
    n = layout.n
    if phi.shape != (n,):
        raise ValueError(f"phi must have shape ({n},)")
    u = np.asarray(u_scaled, dtype=float)
    shifts = np.repeat(phi[None, :], 2 * n, axis=0)
    idx = np.arange(n)
    shifts[idx, idx] += 0.5 * np.pi
    shifts[n + idx, idx] -= 0.5 * np.pi
    channel = _gradient_noise(noise)
    if channel is not None:
        enc = qcore.encode_angles(u, layout)
        probs = qcore.run_noisy_encoded_batch(
            np.repeat(enc[None, :], 2 * n, axis=0), layout, channel, shifts
        )
    else:
        states = qcore.run_circuit_pure_batch(
            np.repeat(u[None, :], 2 * n, axis=0), layout, shifts
        )
        probs = qcore.measure_probabilities(states)
    return 0.5 * (probs[:n] - probs[n:]).T


def _dphi_dr(projection: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Derivative of the recurrence angles phi = pi * tanh(P r), shape (n, N_r)."""
    z = projection @ r
    return np.pi * (1.0 - np.tanh(z) ** 2)[:, None] * projection


def _clamp_mask(u_scaled: np.ndarray) -> np.ndarray:
    """1 where the scaled input moves with the readout, 0 where clamped."""
    u = np.asarray(u_scaled, dtype=float)
    return ((u > SCALED_INPUT_MIN) & (u < SCALED_INPUT_MAX)).astype(float)


def jacobian_conditional(
    config: ReservoirConfig, r: np.ndarray, u_scaled: np.ndarray
) -> JacobianRecord:
    """Tangent of the driven (input held fixed) reservoir update.

    For the recurrence-free variant the probabilities do not depend on
    the state at all, so the matrix is exactly (1 - eps) * I - no
    circuit evaluation involved. The recurrent variant adds the
    state-feedback term through the recurrence layer.
    """
    n_r = config.n_r
    eps = config.epsilon
    if config.variant == RFQRC:
        return JacobianRecord((1.0 - eps) * np.eye(n_r), KIND_CONDITIONAL)
    r = np.asarray(r, dtype=float)
    phi = recurrence_angles(config.projection, r)
    dp_dphi = parameter_shift_dprobs_dphi(u_scaled, phi, config.layout, noise=config.noise)
    dp_dr = dp_dphi @ _dphi_dr(config.projection, r)
    return JacobianRecord((1.0 - eps) * np.eye(n_r) + eps * dp_dr, KIND_CONDITIONAL)


def jacobian_rfqrc_closed(
    r: np.ndarray,
    u_scaled: np.ndarray,
    w_out: np.ndarray,
    epsilon: float,
    layout: CircuitLayout,
    scaler: MinMaxScaler,
    noise: NoiseModel | None = None,
) -> JacobianRecord:
    """Tangent of the autonomous recurrence-free update at one point.

    u_scaled must be the clamped, scaled readout of r. The feedback chain
    is d(probs)/d(u_scaled) * d(scale)/d(physical) * W^T, with clamped
    components contributing zero slope.
    """
    dp_du = parameter_shift_dprobs_du(u_scaled, layout, noise=noise)
    slope = scaler.slope * _clamp_mask(u_scaled)
    n_r = layout.n_states
    mat = (1.0 - epsilon) * np.eye(n_r) + epsilon * (dp_du @ (slope[:, None] * w_out.T))
    return JacobianRecord(mat, KIND_CLOSED_LOOP)


def jacobian_qrc_closed(
    r: np.ndarray,
    u_scaled: np.ndarray,
    w_out: np.ndarray,
    config: ReservoirConfig,
    scaler: MinMaxScaler,
) -> JacobianRecord:
    """Tangent of the autonomous recurrent update: feedback plus recurrence terms."""
    if config.variant != QRC:
        raise ValueError("config must be the recurrent variant")
    r = np.asarray(r, dtype=float)
    phi = recurrence_angles(config.projection, r)
    dp_du = parameter_shift_dprobs_du(
        u_scaled, config.layout, r_angles=phi, noise=config.noise
    )
    dp_dphi = parameter_shift_dprobs_dphi(u_scaled, phi, config.layout, noise=config.noise)
    slope = scaler.slope * _clamp_mask(u_scaled)
    eps = config.epsilon
    n_r = config.n_r
    mat = (
        (1.0 - eps) * np.eye(n_r)
        + eps * (dp_du @ (slope[:, None] * w_out.T))
        + eps * (dp_dphi @ _dphi_dr(config.projection, r))
    )
    return JacobianRecord(mat, KIND_CLOSED_LOOP)


def finite_difference_jacobian(step_fn, r: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference Jacobian of an arbitrary state map, column by column."""
    if h <= 0:
        raise ValueError("h must be positive")
    r = np.asarray(r, dtype=float)
    n = r.size
    cols = []
    for i in range(n):
        plus = r.copy()
        minus = r.copy()
        plus[i] += h
        minus[i] -= h
        cols.append((step_fn(plus) - step_fn(minus)) / (2.0 * h))
    return np.stack(cols, axis=1)


def _circuit_gradients(
    u_scaled: np.ndarray,
    layout: CircuitLayout,
    r_angles: np.ndarray | None,
    need_base: bool,
    need_dphi: bool,
    noise: NoiseModel | None = None,
):
    """Base probabilities and input/recurrence gradients for one step.

    Statevector configs evaluate every shift row in one batch. Channel
    configs take the forward-sensitivity path for the input gradients
    (density stack of 1 + D rows) and shift rows only for the recurrence
    angles, which the state-free hot path never needs.
    """
    u = np.asarray(u_scaled, dtype=float)
    n = layout.n
    base_angles = qcore.encode_angles(u, layout)
    active = layout.active_slots
    comps = layout.slot_components[active]
    a = len(active)
    channel = _gradient_noise(noise)
    if channel is not None:
        weights = np.zeros((layout.in_dim, base_angles.shape[0]))
        weights[comps, active] = np.pi
        base, dp_du = qcore.run_noisy_encoded_grads(
            base_angles, layout, channel, weights, r_angles
        )
        dp_dphi = None
        if need_dphi:
            dp_dphi = parameter_shift_dprobs_dphi(u, r_angles, layout, noise=channel)
        return base, dp_du, dp_dphi
    n_rows = 2 * a + (1 if need_base else 0) + (2 * n if need_dphi else 0)
    rows = np.repeat(base_angles[None, :], n_rows, axis=0)
    adx = np.arange(a)
    rows[adx, active] += 0.5 * np.pi
    rows[a + adx, active] -= 0.5 * np.pi
    if r_angles is None:
        r_batch = None
    else:
        r_batch = np.repeat(np.asarray(r_angles, dtype=float)[None, :], n_rows, axis=0)
        if need_dphi:
            qdx = np.arange(n)
            off = 2 * a + (1 if need_base else 0)
            r_batch[off + qdx, qdx] += 0.5 * np.pi
            r_batch[off + n + qdx, qdx] -= 0.5 * np.pi
    probs = qcore.measure_probabilities(
        qcore._run_encoded_batch(rows, layout, r_batch)
    )
    diff = 0.5 * (probs[:a] - probs[a : 2 * a])
    onehot = np.zeros((a, layout.in_dim))
    onehot[adx, comps] = 1.0
    dp_du = np.pi * diff.T @ onehot
    base = probs[2 * a] if need_base else None
    dp_dphi = None
    if need_dphi:
        off = 2 * a + (1 if need_base else 0)
        dp_dphi = 0.5 * (probs[off : off + n] - probs[off + n : off + 2 * n]).T
    return base, dp_du, dp_dphi


def closed_loop_system(
    config: ReservoirConfig,
    w_out: np.ndarray,
    scaler: MinMaxScaler,
    rng: np.random.Generator | None = None,
    clamp: bool = True,
):
    """Advancer/Jacobian-provider pair for the autonomous reservoir map.

    Built for the spectrum loop's call order (jacobian first, then
    advance, on the same state object): both closures share one batched
    circuit evaluation per step, and the Jacobian is returned as a
    factored apply W -> J @ W. With channel noise both the state update
    and the shift-rule tangent run through the density path, so the
    Jacobian linearizes the map actually being iterated; with sampling
    noise the update consumes one multinomial draw per step around exact
    statevector gradients.

    ``clamp=True`` reproduces the guarded forecasting map (feedback
    clipped to the admissible input range, clipped directions zeroed in
    the Jacobian). ``clamp=False`` evolves the free map; use this for
    spectrum estimation, where the rare clip events otherwise bias the
    leading exponents of a trained model.
    """
    layout = config.layout
    eps = config.epsilon
    w_t = np.ascontiguousarray(w_out.T)
    slope = scaler.slope
    noise = config.noise
    is_qrc = config.variant == QRC
    cache: dict = {"r": None}

    def _ensure(r: np.ndarray) -> dict:
        if cache["r"] is not r:
            u_hat = w_t @ r
            u_raw = scaler.scale(u_hat)
            if clamp:
                u_sc = np.clip(u_raw, SCALED_INPUT_MIN, SCALED_INPUT_MAX)
                mask = (
                    (u_raw > SCALED_INPUT_MIN) & (u_raw < SCALED_INPUT_MAX)
                ).astype(float)
            else:
                u_sc = u_raw
                mask = np.ones_like(u_raw)
            phi = recurrence_angles(config.projection, r) if is_qrc else None
            base, dp_du, dp_dphi = _circuit_gradients(
                u_sc, layout, phi, need_base=True, need_dphi=is_qrc, noise=noise
            )
            if noise.kind == qcore.NOISE_SAMPLING:
                if rng is None:
                    raise ValueError("sampling noise needs an rng")
                probs = qcore.sample_shots(base, noise.shots, rng)
            else:
                probs = base
            cache.update(
                r=r,
                probs=probs,
                dp_du=dp_du,
                slope_mask=slope * mask,
                dp_dphi=dp_dphi,
                dphi_dr=_dphi_dr(config.projection, r) if is_qrc else None,
            )
        return cache

    def advance(r: np.ndarray) -> np.ndarray:
        c = _ensure(r)
        return (1.0 - eps) * r + eps * c["probs"]

    def jacobian(r: np.ndarray):
        c = _ensure(r)
        dp_du = c["dp_du"]
        sm = c["slope_mask"]
        dp_dphi = c["dp_dphi"]
        dphi_dr = c["dphi_dr"]

        def apply(w: np.ndarray) -> np.ndarray:
            out = (1.0 - eps) * w + eps * (dp_du @ (sm[:, None] * (w_t @ w)))
            if dp_dphi is not None:
                out += eps * (dp_dphi @ (dphi_dr @ w))
            return out

        return apply

    return advance, jacobian


def driven_probabilities(
    config: ReservoirConfig, inputs_scaled: np.ndarray, seed: int = 0
) -> np.ndarray:
    """Probabilities along a teacher-forced drive for the state-free variant."""
    rng = make_rng(config.noise.seed, seed, STREAM_SHOTS)
    return batch_probabilities(config, inputs_scaled, rng)


def conditional_system(
    config: ReservoirConfig,
    inputs_scaled: np.ndarray,
    seed: int = 0,
    probs_seq: np.ndarray | None = None,
):
    """Advancer/Jacobian-provider pair for the teacher-forced reservoir.

    The drive is indexed by an internal step counter, so the pair is
    single-use and relies on the spectrum loop's jacobian-before-advance
    call order. Returns (advance, jacobian_provider, initial state).
    For the recurrence-free variant a precomputed probability sequence
    may be shared across leak rates.
    """
    inputs = np.asarray(inputs_scaled, dtype=float)
    if inputs.ndim != 2 or inputs.shape[1] != config.layout.in_dim:
        raise ValueError(f"inputs must have shape (T, {config.layout.in_dim})")
    eps = config.epsilon
    n_r = config.n_r
    r0 = np.zeros(n_r)
    if config.variant == RFQRC:
        if probs_seq is None:
            probs_seq = driven_probabilities(config, inputs, seed=seed)
        state_idx = {"t": 0}

        def advance(r: np.ndarray) -> np.ndarray:
            t = state_idx["t"]
            state_idx["t"] = t + 1
            return (1.0 - eps) * r + eps * probs_seq[t]

        def jacobian(r: np.ndarray):
            return lambda w: (1.0 - eps) * w

        return advance, jacobian, r0

    rng = make_rng(config.noise.seed, seed, STREAM_SHOTS)
    cache: dict = {"r": None, "t": 0}

    def _ensure(r: np.ndarray) -> dict:
        if cache["r"] is not r:
            u = inputs[cache["t"]]
            phi = recurrence_angles(config.projection, r)
            base, _, dp_dphi = _circuit_gradients(
                u, config.layout, phi, need_base=True, need_dphi=True,
                noise=config.noise,
            )
            if config.noise.kind == qcore.NOISE_SAMPLING:
                probs = qcore.sample_shots(base, config.noise.shots, rng)
            else:
                probs = base
            cache.update(
                r=r, probs=probs, dp_dr=dp_dphi @ _dphi_dr(config.projection, r)
            )
        return cache

    def advance(r: np.ndarray) -> np.ndarray:
        c = _ensure(r)
        cache["t"] += 1
        cache["r"] = None  # next step re-evaluates even if the array is reused
        return (1.0 - eps) * r + eps * c["probs"]

    def jacobian(r: np.ndarray):
        c = _ensure(r)
        dp_dr = c["dp_dr"]
        return lambda w: (1.0 - eps) * w + eps * (dp_dr @ w)

    return advance, jacobian, r0
