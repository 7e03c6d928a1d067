"""Stability diagnostics: Lyapunov spectra, conditional exponents,
Kaplan-Yorke dimension, covariant Lyapunov vectors, and the
synchronization verdict they imply.

The spectrum routine is map-agnostic: it only sees a state advancer and
a Jacobian provider, so the same QR loop serves the reference systems
and the trained reservoirs. Jacobian providers may return a dense
matrix or a callable W -> J @ W for maps whose tangent operator is
cheaper to apply than to materialize.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace as dc_replace
from pathlib import Path

import numpy as np
import scipy.linalg

from .seeding import STREAM_CLV, STREAM_TANGENT, make_rng

# synchronization classes
NO_GS = "no-gs"
GS_NON_DIFFERENTIABLE = "gs-non-differentiable"
DGS = "dgs"


class TangentDegenerateError(RuntimeError):
    """Tangent basis lost rank during propagation."""


@dataclass
class TangentHistory:
    """Per-step QR factors and finite-time exponents from one spectrum run.

    q_seq[i], r_seq[i] satisfy Q_i R_i = J_i Q_{i-1}; the diagonal of
    every R_i is positive. finite_time_les is in basis order (the order
    the QR loop produced), not sorted.
    """

    q_seq: np.ndarray           # (n_saved, N, d_t)
    r_seq: np.ndarray           # (n_saved, d_t, d_t)
    finite_time_les: np.ndarray  # (d_t, n_saved)
    dt: float


@dataclass
class LyapunovResult:
    exponents: np.ndarray           # descending, per unit time
    ky_dimension: float
    convergence_series: np.ndarray  # (d_t, n_saved) running means, sorted order


def _qr_pos(w: np.ndarray):
    """QR with the sign convention diag(R) > 0."""
    q, r = np.linalg.qr(w)
    s = np.sign(np.diagonal(r)).copy()
    s[s == 0] = 1.0
    return q * s, r * s[:, None]


def _apply_jacobian(jac, w: np.ndarray) -> np.ndarray:
    jac = getattr(jac, "matrix", jac)
    if callable(jac):
        return jac(w)
    return jac @ w


def lyapunov_spectrum(
    jacobian_provider,
    state_advancer,
    state0: np.ndarray,
    d_t: int,
    n_steps: int,
    n_skip: int,
    dt: float,
    seed: int = 0,
    save_history: bool = False,
) -> tuple[LyapunovResult, TangentHistory | None]:
    """Leading d_t Lyapunov exponents of a discrete map by QR reorthonormalization.

    Each step evaluates the Jacobian at the current state, advances the
    state, pushes the tangent basis forward and re-orthonormalizes it.
    Growth rates are accumulated only after n_skip alignment steps, and
    the exponents are time means of log diag(R) / dt over the accumulated
    steps. jacobian_provider is always called before state_advancer
    within a step, so paired closures may share per-state work.
    """
    state = np.asarray(state0, dtype=float)
    n_dim = state.size
    if not 1 <= d_t <= n_dim:
        raise ValueError("d_t must lie in [1, state dimension]")
    if n_skip < 0 or n_steps <= n_skip:
        raise ValueError("need n_steps > n_skip >= 0")
    if dt <= 0:
        raise ValueError("dt must be positive")
    rng = make_rng(seed, STREAM_TANGENT)
    w, _ = _qr_pos(rng.standard_normal((n_dim, d_t)))
    n_saved = n_steps - n_skip
    fin_les = np.empty((d_t, n_saved))
    q_seq = np.empty((n_saved, n_dim, d_t)) if save_history else None
    r_seq = np.empty((n_saved, d_t, d_t)) if save_history else None
    k = 0
    for i in range(n_steps):
        jac = jacobian_provider(state)
        state = state_advancer(state)
        w = _apply_jacobian(jac, w)
        q, r = _qr_pos(w)
        diag = np.diagonal(r)
        if np.any(diag < 1e-300):
            raise TangentDegenerateError(f"tangent basis collapsed at step {i}")
        w = q
        if i >= n_skip:
            fin_les[:, k] = np.log(diag) / dt
            if save_history:
                q_seq[k] = q
                r_seq[k] = r
            k += 1
    raw = fin_les.mean(axis=1)
    order = np.argsort(raw, kind="stable")[::-1]
    exponents = raw[order]
    running = np.cumsum(fin_les[order], axis=1) / np.arange(1, n_saved + 1)
    try:
        ky = kaplan_yorke(exponents)
    except ValueError:
        # d_t exponents do not bracket the dimension; keep the spectrum
        ky = float("nan")
    result = LyapunovResult(
        exponents=exponents,
        ky_dimension=ky,
        convergence_series=running,
    )
    history = (
        TangentHistory(q_seq=q_seq, r_seq=r_seq, finite_time_les=fin_les, dt=dt)
        if save_history
        else None
    )
    return result, history


def kaplan_yorke(exponents: np.ndarray) -> float:
    """Kaplan-Yorke dimension from a descending spectrum.

    Returns 0 when even the leading exponent is non-positive. If every
    partial sum is positive the dimension is not defined by the spectrum
    and a ValueError is raised: one more contracting exponent is needed.
    """
    lam = np.asarray(exponents, dtype=float)
    if lam.ndim != 1 or lam.size < 1:
        raise ValueError("exponents must be a non-empty vector")
    if not np.all(np.isfinite(lam)):
        raise ValueError("exponents must be finite")
    if np.any(np.diff(lam) > 0):
        raise ValueError("exponents must be sorted descending")
    if lam[0] < 0:
        return 0.0
    csum = np.cumsum(lam)
    positive = np.nonzero(csum > 0)[0]
    if positive.size == 0:
        return 0.0
    # descending exponents make csum concave, so positivity is a prefix
    count = int(positive[-1]) + 1
    if count == lam.size:
        raise ValueError(
            "all partial sums positive; spectrum needs one more negative exponent"
        )
    return count + csum[count - 1] / abs(lam[count])


@dataclass
class ConditionalResult:
    """Conditional (drive-forced) exponents for one leak rate."""

    epsilon: float
    max_cle: float
    exponents: np.ndarray


def conditional_les(config, split, epsilons, d_t: int | None = None, seed: int = 0):
    """Conditional Lyapunov exponents of the driven reservoir, per leak rate.

    Teacher-forces the reservoir along the washout+train window of the
    split and propagates the conditional tangent dynamics (input held
    fixed, no feedback) with the same QR loop. Exponents accumulate after
    the washout. Returns one ConditionalResult per requested epsilon.
    """
    from . import tangent as tangent_mod

    eps_list = [float(e) for e in np.atleast_1d(np.asarray(epsilons, dtype=float))]
    if not eps_list:
        raise ValueError("need at least one epsilon")
    traj = split.traj
    if d_t is None:
        d_t = traj.dim
    drive = traj.states[split.washout.start : split.train.stop]
    inputs = np.clip(split.scaler.scale(drive), -0.05, 1.05)
    n_skip = len(split.washout)
    n_steps = inputs.shape[0]
    shared_probs = None
    if config.variant == "rfqrc":
        # conditional tangent is input- and state-independent, and the
        # driven probabilities do not depend on epsilon: compute them once
        shared_probs = tangent_mod.driven_probabilities(config, inputs, seed=seed)
    out = []
    for eps in eps_list:
        cfg = dc_replace(config, epsilon=eps)
        advance, jac_provider, r0 = tangent_mod.conditional_system(
            cfg, inputs, seed=seed, probs_seq=shared_probs
        )
        result, _ = lyapunov_spectrum(
            jacobian_provider=jac_provider,
            state_advancer=advance,
            state0=r0,
            d_t=d_t,
            n_steps=n_steps,
            n_skip=n_skip,
            dt=traj.dt,
            seed=seed,
        )
        out.append(
            ConditionalResult(
                epsilon=eps,
                max_cle=float(result.exponents[0]),
                exponents=result.exponents,
            )
        )
    return out


@dataclass
class CLVResult:
    """Covariant Lyapunov vectors over the converged sampling window."""

    vectors: np.ndarray   # (n_valid, N, d_t), unit columns
    angles: np.ndarray    # (n_valid, n_pairs), degrees in [0, 90]
    pairs: list[tuple[int, int]]
    start_index: int      # offset of vectors[0] within the source history


def clv_backward(
    history: TangentHistory,
    n_transient_fwd: int,
    n_transient_bwd: int,
    seed: int = 0,
) -> CLVResult:
    """Covariant Lyapunov vectors by backward iteration on the R factors.

    A random upper-triangular coefficient matrix is pulled backward
    through C_{i-1} = R_i^{-1} C_i with column renormalization; CLVs are
    Q_i C_i. The first n_transient_fwd steps (Q not yet aligned) and the
    last n_transient_bwd steps (C not yet converged) are discarded.
    """
    if n_transient_fwd < 0 or n_transient_bwd < 0:
        raise ValueError("transients must be non-negative")
    q_seq, r_seq = history.q_seq, history.r_seq
    n_hist = r_seq.shape[0]
    d_t = r_seq.shape[1]
    if n_hist <= n_transient_fwd + n_transient_bwd:
        raise ValueError("history shorter than the requested transients")
    rng = make_rng(seed, STREAM_CLV)
    coeff = np.triu(rng.standard_normal((d_t, d_t)))
    ii = np.diag_indices(d_t)
    coeff[ii] = np.abs(coeff[ii]) + 0.5  # keep the flag generic and non-singular
    coeff /= np.linalg.norm(coeff, axis=0)
    coeffs = np.empty((n_hist, d_t, d_t))
    coeffs[n_hist - 1] = coeff
    for i in range(n_hist - 1, 0, -1):
        try:
            back = scipy.linalg.solve_triangular(
                r_seq[i], coeffs[i], lower=False, check_finite=False
            )
        except scipy.linalg.LinAlgError as exc:
            raise TangentDegenerateError(f"singular R factor at step {i}") from exc
        norms = np.linalg.norm(back, axis=0)
        if np.any(norms < 1e-300) or not np.all(np.isfinite(norms)):
            raise TangentDegenerateError(f"coefficient collapse at step {i}")
        coeffs[i - 1] = back / norms
    start = n_transient_fwd
    stop = n_hist - n_transient_bwd
    vecs = np.einsum("tnk,tkj->tnj", q_seq[start:stop], coeffs[start:stop])
    vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
    pairs = [(i, j) for i in range(d_t) for j in range(i + 1, d_t)]
    angles = np.empty((vecs.shape[0], len(pairs)))
    for k, (i, j) in enumerate(pairs):
        dots = np.abs(np.einsum("tn,tn->t", vecs[:, :, i], vecs[:, :, j]))
        angles[:, k] = np.degrees(np.arccos(np.clip(dots, 0.0, 1.0)))
    return CLVResult(vectors=vecs, angles=angles, pairs=pairs, start_index=start)


@dataclass
class CLVAngleStats:
    """Histograms of pairwise CLV angles over the sampling window."""

    pairs: list[tuple[int, int]]
    bin_edges: np.ndarray   # (n_bins + 1,), uniform over [0, 90] degrees
    densities: np.ndarray   # (n_pairs, n_bins), normalized as PDFs


def clv_angles(clvs: CLVResult, n_bins: int = 90) -> CLVAngleStats:
    if n_bins < 1:
        raise ValueError("need at least one bin")
    edges = np.linspace(0.0, 90.0, n_bins + 1)
    densities = np.empty((len(clvs.pairs), n_bins))
    for k in range(len(clvs.pairs)):
        densities[k], _ = np.histogram(clvs.angles[:, k], bins=edges, density=True)
    return CLVAngleStats(pairs=list(clvs.pairs), bin_edges=edges, densities=densities)


@dataclass
class GSVerdict:
    max_cle: float
    lambda_star: float  # most negative exponent of the drive
    gs_class: str


def classify_gs(max_cle: float, lambda_star: float) -> GSVerdict:
    """Synchronization class from the conditional and drive spectra.

    A non-negative max CLE rules synchronization out; a negative one
    implies generalized synchronization, which is differentiable only
    when the response contracts faster than the slowest drive direction
    (max CLE below lambda_star).
    """
    max_cle = float(max_cle)
    lambda_star = float(lambda_star)
    if not lambda_star < 0:
        raise ValueError("drive must have a negative exponent (lambda_star < 0)")
    if max_cle >= 0:
        cls = NO_GS
    elif max_cle < lambda_star:
        cls = DGS
    else:
        cls = GS_NON_DIFFERENTIABLE
    return GSVerdict(max_cle=max_cle, lambda_star=lambda_star, gs_class=cls)


def save_spectrum_csv(exponents: np.ndarray, path) -> None:
    """Write a spectrum as CSV with columns exponent_index,value."""
    path = Path(path)
    lines = ["exponent_index,value"]
    for i, v in enumerate(np.asarray(exponents, dtype=float), start=1):
        lines.append(f"{i},{v:.17g}")
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, path)
