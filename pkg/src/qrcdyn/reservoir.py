"""Leaky-integrator quantum reservoirs and their linear readout.

The reservoir state is the vector of measured basis probabilities,
low-pass filtered with leak rate epsilon:

    r(t+1) = (1 - eps) * r(t) + eps * p(t+1)

where p comes from the circuit driven by the scaled input (and, for the
recurrent variant, by angles derived from the previous reservoir state).
The recurrence-free variant keeps its memory in the leak term only,
which is what makes its conditional tangent dynamics exactly
(1 - eps) * I.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg

from . import qcore
from .dynamics import DatasetSplit, MinMaxScaler
from .qcore import CircuitLayout, NoiseModel
from .seeding import STREAM_PROJECTION, make_rng

RFQRC = "rfqrc"
QRC = "qrc"

# scaled inputs are clamped to this window before encoding; the slack
# beyond [0, 1] absorbs small closed-loop drift
SCALED_INPUT_MIN = -0.05
SCALED_INPUT_MAX = 1.05

# beyond this, an autonomous trajectory has left the trained manifold for
# good and its tangent statistics describe an artifact, not the model
SCALED_ESCAPE_MIN = -0.55
SCALED_ESCAPE_MAX = 1.55

FORECAST_LIMIT = 1.0e6

CONTRACTION_FLOOR = 1e-14


class ForecastDivergedError(RuntimeError):
    """Closed-loop prediction left the physical range."""

    def __init__(self, step: int | None = None, message: str | None = None):
        super().__init__(message or f"forecast diverged at step {step}")
        self.step = step


class SingularSystemError(RuntimeError):
    """Readout normal equations could not be factorized."""


@dataclass(frozen=True, eq=False)
class ReservoirConfig:
    """Everything that defines one reservoir instance."""

    layout: CircuitLayout
    epsilon: float
    variant: str = RFQRC
    projection: np.ndarray | None = None  # (n, N_r) state-feedback map, recurrent only
    beta_grid: tuple[float, ...] = (1e-9, 1e-12)
    noise: NoiseModel = NoiseModel()

    def __post_init__(self):
        if not 0.0 < self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in (0, 1]")
        if self.variant not in (RFQRC, QRC):
            raise ValueError(f"unknown variant {self.variant!r}")
        object.__setattr__(self, "beta_grid", tuple(float(b) for b in self.beta_grid))
        if any(b < 0 for b in self.beta_grid):
            raise ValueError("regularization strengths must be non-negative")
        if self.variant == QRC:
            if self.projection is None:
                raise ValueError("recurrent variant needs a projection matrix")
            proj = np.asarray(self.projection, dtype=float).copy()
            if proj.shape != (self.layout.n, self.layout.n_states):
                raise ValueError(
                    f"projection must have shape ({self.layout.n}, {self.layout.n_states})"
                )
            norms = np.linalg.norm(proj, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-9):
                raise ValueError("projection rows must have unit norm")
            proj.flags.writeable = False
            object.__setattr__(self, "projection", proj)
        elif self.projection is not None:
            raise ValueError("recurrence-free variant takes no projection")

    @property
    def n_qubits(self) -> int:
        return self.layout.n

    @property
    def n_r(self) -> int:
        return self.layout.n_states

    @classmethod
    def create(
        cls,
        n_qubits: int,
        in_dim: int,
        epsilon: float,
        variant: str = RFQRC,
        seed: int = 0,
        beta_grid: tuple[float, ...] = (1e-9, 1e-12),
        noise: NoiseModel = NoiseModel(),
    ) -> "ReservoirConfig":
        layout = CircuitLayout.random(n_qubits, in_dim, seed)
        projection = None
        if variant == QRC:
            raw = make_rng(seed, STREAM_PROJECTION).standard_normal(
                (n_qubits, 1 << n_qubits)
            )
            projection = raw / np.linalg.norm(raw, axis=1, keepdims=True)
        return cls(
            layout=layout,
            epsilon=epsilon,
            variant=variant,
            projection=projection,
            beta_grid=beta_grid,
            noise=noise,
        )

    def to_json_dict(self) -> dict:
        return {
            "layout": self.layout.to_json_dict(),
            "epsilon": self.epsilon,
            "variant": self.variant,
            "beta_grid": list(self.beta_grid),
            "noise": self.noise.to_json_dict(),
            "has_projection": self.projection is not None,
        }


def recurrence_angles(projection: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Bounded rotation angles fed back from the reservoir state."""
    return np.pi * np.tanh(projection @ r)


def _step_probs(
    config: ReservoirConfig,
    u_scaled: np.ndarray,
    r: np.ndarray | None,
    rng: np.random.Generator | None,
) -> np.ndarray:
    r_angles = None
    if config.variant == QRC:
        if r is None:
            raise ValueError("recurrent variant needs the current reservoir state")
        r_angles = recurrence_angles(config.projection, r)
    noise = config.noise
    if noise.is_channel:
        return qcore.run_circuit_noisy(u_scaled, config.layout, noise, r_angles)
    probs = qcore.measure_probabilities(
        qcore.run_circuit_pure(u_scaled, config.layout, r_angles)
    )
    if noise.kind == qcore.NOISE_SAMPLING:
        if rng is None:
            raise ValueError("sampling noise needs an rng")
        probs = qcore.sample_shots(probs, noise.shots, rng)
    return probs


def reservoir_step(
    r: np.ndarray,
    u_scaled: np.ndarray,
    config: ReservoirConfig,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """One leaky-integrator update of the reservoir state."""
    r = np.asarray(r, dtype=float)
    if r.shape != (config.n_r,):
        raise ValueError(f"reservoir state must have shape ({config.n_r},)")
    probs = _step_probs(config, u_scaled, r, rng)
    return (1.0 - config.epsilon) * r + config.epsilon * probs


def batch_probabilities(
    config: ReservoirConfig,
    inputs_scaled: np.ndarray,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Measured probabilities for a sequence of inputs, state-free variants only.

    Valid for the recurrence-free reservoir, whose circuit does not see the
    reservoir state: the whole drive can be evaluated in chunked batches.
    Sampling noise draws one multinomial per step; channel noise runs
    batched density evolutions with a tighter (quadratic-size) chunk.
    """
    if config.variant != RFQRC:
        raise ValueError("batched probabilities are only state-free for rfqrc")
    inputs = np.asarray(inputs_scaled, dtype=float)
    if inputs.ndim != 2 or inputs.shape[1] != config.layout.in_dim:
        raise ValueError(f"inputs must have shape (T, {config.layout.in_dim})")
    noise = config.noise
    if noise.is_channel:
        chunk = max(1, (1 << 24) // (config.n_r * config.n_r))
        out = np.empty((inputs.shape[0], config.n_r))
        for start in range(0, inputs.shape[0], chunk):
            stop = min(start + chunk, inputs.shape[0])
            enc = np.stack(
                [qcore.encode_angles(u, config.layout) for u in inputs[start:stop]]
            )
            out[start:stop] = qcore.run_noisy_encoded_batch(enc, config.layout, noise)
        return out
    chunk = max(1, (1 << 22) // config.n_r)
    out = np.empty((inputs.shape[0], config.n_r))
    for start in range(0, inputs.shape[0], chunk):
        stop = min(start + chunk, inputs.shape[0])
        states = qcore.run_circuit_pure_batch(inputs[start:stop], config.layout)
        out[start:stop] = qcore.measure_probabilities(states)
    if noise.kind == qcore.NOISE_SAMPLING:
        if rng is None:
            raise ValueError("sampling noise needs an rng")
        out = qcore.sample_shots(out, noise.shots, rng)
    return out


def open_loop_run(
    split: DatasetSplit,
    config: ReservoirConfig,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Teacher-forced drive through washout and train windows.

    Starts from r = 0, discards the washout, and returns the matrix of
    train-window reservoir states (one column per step, column k holding
    the state after consuming the k-th train input) together with the
    final state.
    """
    traj = split.traj
    if len(split.train) < 1:
        raise ValueError("train window is empty")
    raw = traj.states[split.washout.start : split.train.stop]
    inputs = np.clip(split.scaler.scale(raw), SCALED_INPUT_MIN, SCALED_INPUT_MAX)
    n_wash = len(split.washout)
    n_train = len(split.train)
    r = np.zeros(config.n_r)
    r_mat = np.empty((config.n_r, n_train))
    if config.variant == RFQRC:
        probs = batch_probabilities(config, inputs, rng)
        eps = config.epsilon
        for t in range(inputs.shape[0]):
            r = (1.0 - eps) * r + eps * probs[t]
            if t >= n_wash:
                r_mat[:, t - n_wash] = r
    else:
        for t in range(inputs.shape[0]):
            r = reservoir_step(r, inputs[t], config, rng)
            if t >= n_wash:
                r_mat[:, t - n_wash] = r
    return r_mat, r


def train_readout(r_mat: np.ndarray, targets: np.ndarray, beta: float) -> np.ndarray:
    """Ridge-regressed readout solving (R R^T + beta I) W = R U^T.

    r_mat is (N_r, T); targets is (T, D) in physical units, row k being
    the state the k-th column of r_mat should map to. Returns W (N_r, D).
    A singular factorization at tiny beta is retried once with a
    trace-scaled jitter before giving up.
    """
    r_mat = np.asarray(r_mat, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if r_mat.ndim != 2 or targets.ndim != 2 or r_mat.shape[1] != targets.shape[0]:
        raise ValueError("r_mat (N_r, T) and targets (T, D) must share T")
    if beta < 0:
        raise ValueError("beta must be non-negative")
    n_r = r_mat.shape[0]
    gram = r_mat @ r_mat.T
    rhs = r_mat @ targets
    eye = np.eye(n_r)
    try:
        factor = scipy.linalg.cho_factor(gram + beta * eye, check_finite=False)
        return scipy.linalg.cho_solve(factor, rhs, check_finite=False)
    except scipy.linalg.LinAlgError:
        jitter = 1e-12 * np.trace(gram) / n_r
        try:
            factor = scipy.linalg.cho_factor(gram + (beta + jitter) * eye, check_finite=False)
            return scipy.linalg.cho_solve(factor, rhs, check_finite=False)
        except scipy.linalg.LinAlgError as exc:
            raise SingularSystemError(
                f"normal equations singular even with jitter {jitter:.3e}"
            ) from exc


def select_beta(
    r_mat: np.ndarray,
    targets: np.ndarray,
    config: ReservoirConfig,
    val_fraction: float = 0.2,
) -> float:
    """Pick the ridge strength by one-step error on a trailing holdout.

    Refitting on the full window is the caller's job; ties prefer the
    smaller beta.
    """
    if not config.beta_grid:
        raise ValueError("beta grid is empty")
    if not 0.0 < val_fraction <= 0.5:
        raise ValueError("val_fraction must lie in (0, 0.5]")
    targets = np.asarray(targets, dtype=float)
    n_total = r_mat.shape[1]
    n_val = max(1, int(round(val_fraction * n_total)))
    if n_total - n_val < 1:
        raise ValueError("not enough columns to hold out a validation set")
    r_fit, r_val = r_mat[:, : n_total - n_val], r_mat[:, n_total - n_val :]
    t_fit, t_val = targets[: n_total - n_val], targets[n_total - n_val :]
    best_beta = None
    best_mse = np.inf
    for beta in sorted(config.beta_grid):
        w = train_readout(r_fit, t_fit, beta)
        mse = float(np.mean((r_val.T @ w - t_val) ** 2))
        if mse < best_mse:
            best_mse = mse
            best_beta = beta
    return best_beta


def closed_loop_step(
    r: np.ndarray,
    w_out: np.ndarray,
    config: ReservoirConfig,
    scaler: MinMaxScaler,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """One autonomous update: read out, rescale, clamp, feed back."""
    u_hat = w_out.T @ r
    u_scaled = np.clip(scaler.scale(u_hat), SCALED_INPUT_MIN, SCALED_INPUT_MAX)
    return reservoir_step(r, u_scaled, config, rng)


def closed_loop_run(
    r_init: np.ndarray,
    w_out: np.ndarray,
    config: ReservoirConfig,
    n_steps: int,
    scaler: MinMaxScaler,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Autonomous forecast from a trained state.

    Returns (predictions, final reservoir state); predictions are in
    physical units, row i being the readout before the i-th feedback
    step. Raises ForecastDivergedError when a prediction leaves the
    plausible range.
    """
    if n_steps < 0:
        raise ValueError("n_steps must be non-negative")
    r = np.asarray(r_init, dtype=float).copy()
    dim = w_out.shape[1]
    preds = np.empty((n_steps, dim))
    for i in range(n_steps):
        u_hat = w_out.T @ r
        if not np.all(np.isfinite(u_hat)) or np.any(np.abs(u_hat) > FORECAST_LIMIT):
            raise ForecastDivergedError(i)
        preds[i] = u_hat
        u_scaled = np.clip(scaler.scale(u_hat), SCALED_INPUT_MIN, SCALED_INPUT_MAX)
        r = reservoir_step(r, u_scaled, config, rng)
    return preds, r


def esp_contraction_test(
    config: ReservoirConfig,
    drive_scaled: np.ndarray,
    r1_init: np.ndarray,
    r2_init: np.ndarray,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Per-step contraction ratio of two states under a common drive.

    gamma(t) = |r1(t) - r2(t)| / |r1(t-1) - r2(t-1)|. For the
    recurrence-free variant the same measured probabilities update both
    copies, so gamma is exactly 1 - eps; the recurrent variant evaluates
    each copy's circuit noise-free. Stops once the separation falls
    below the floor where ratios are pure round-off.
    """
    drive = np.asarray(drive_scaled, dtype=float)
    if drive.ndim != 2 or drive.shape[1] != config.layout.in_dim:
        raise ValueError(f"drive must have shape (T, {config.layout.in_dim})")
    r1 = np.asarray(r1_init, dtype=float).copy()
    r2 = np.asarray(r2_init, dtype=float).copy()
    eps = config.epsilon
    d_prev = np.linalg.norm(r1 - r2)
    gammas = []
    if d_prev < CONTRACTION_FLOOR:
        return np.array([])
    for u in drive:
        if config.variant == RFQRC:
            probs = _step_probs(config, u, None, rng)
            r1 = (1.0 - eps) * r1 + eps * probs
            r2 = (1.0 - eps) * r2 + eps * probs
        else:
            p1 = qcore.measure_probabilities(
                qcore.run_circuit_pure(
                    u, config.layout, recurrence_angles(config.projection, r1)
                )
            )
            p2 = qcore.measure_probabilities(
                qcore.run_circuit_pure(
                    u, config.layout, recurrence_angles(config.projection, r2)
                )
            )
            r1 = (1.0 - eps) * r1 + eps * p1
            r2 = (1.0 - eps) * r2 + eps * p2
        d_new = np.linalg.norm(r1 - r2)
        gammas.append(d_new / d_prev)
        if d_new < CONTRACTION_FLOOR:
            break
        d_prev = d_new
    return np.array(gammas)


def vpt(
    prediction: np.ndarray,
    truth: np.ndarray,
    lt_steps: int,
    threshold: float = 0.4,
) -> float:
    """Valid prediction time in Lyapunov-time units.

    First step where the prediction error, normalized by the truth's RMS
    deviation from its time mean, exceeds the threshold; the full horizon
    if it never does.
    """
    prediction = np.asarray(prediction, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if prediction.shape != truth.shape or prediction.ndim != 2:
        raise ValueError("prediction and truth must be matching (T, D) arrays")
    if lt_steps < 1:
        raise ValueError("lt_steps must be positive")
    dev = truth - truth.mean(axis=0)
    denom = np.sqrt(np.mean(np.sum(dev**2, axis=1)))
    if denom <= 0:
        raise ValueError("truth signal has no variance")
    err = np.linalg.norm(prediction - truth, axis=1) / denom
    exceed = err > threshold
    idx = int(np.argmax(exceed)) if exceed.any() else truth.shape[0]
    return idx / lt_steps


# --- model persistence ------------------------------------------------------


def save_model(
    prefix: str | Path,
    config: ReservoirConfig,
    scaler: MinMaxScaler,
    w_out: np.ndarray,
    final_state: np.ndarray,
) -> None:
    """Persist a trained reservoir as a JSON header plus raw float64 blocks."""
    prefix = Path(prefix)
    w_out = np.ascontiguousarray(w_out, dtype=float)
    final_state = np.ascontiguousarray(final_state, dtype=float)
    blocks = [("w_out", w_out), ("final_state", final_state)]
    if config.projection is not None:
        blocks.append(("projection", np.ascontiguousarray(config.projection, dtype=float)))
    arrays = {}
    offset = 0
    payload = bytearray()
    for name, arr in blocks:
        arrays[name] = {"offset": offset, "shape": list(arr.shape)}
        raw = arr.tobytes(order="C")
        payload.extend(raw)
        offset += len(raw)
    header = {
        "config": config.to_json_dict(),
        "scaler": {"mins": list(map(float, scaler.mins)), "maxs": list(map(float, scaler.maxs))},
        "arrays": arrays,
        "dtype": "<f8",
        "order": "C",
    }
    bin_path = prefix.with_suffix(".bin")
    tmp = bin_path.with_name(bin_path.name + ".tmp")
    tmp.write_bytes(bytes(payload))
    os.replace(tmp, bin_path)
    json_path = prefix.with_suffix(".json")
    tmp = json_path.with_name(json_path.name + ".tmp")
    tmp.write_text(json.dumps(header, sort_keys=True, indent=2) + "\n")
    os.replace(tmp, json_path)


def load_model(prefix: str | Path):
    """Inverse of save_model; returns (config, scaler, w_out, final_state)."""
    prefix = Path(prefix)
    header = json.loads(prefix.with_suffix(".json").read_text())
    payload = prefix.with_suffix(".bin").read_bytes()

    def block(name: str) -> np.ndarray:
        info = header["arrays"][name]
        shape = tuple(info["shape"])
        count = int(np.prod(shape))
        start = info["offset"]
        arr = np.frombuffer(payload, dtype=np.float64, count=count, offset=start)
        return arr.reshape(shape).copy()

    cfg = header["config"]
    projection = block("projection") if "projection" in header["arrays"] else None
    config = ReservoirConfig(
        layout=CircuitLayout.from_json_dict(cfg["layout"]),
        epsilon=float(cfg["epsilon"]),
        variant=cfg["variant"],
        projection=projection,
        beta_grid=tuple(cfg["beta_grid"]),
        noise=NoiseModel.from_json_dict(cfg["noise"]),
    )
    scaler = MinMaxScaler(
        mins=np.asarray(header["scaler"]["mins"], dtype=float),
        maxs=np.asarray(header["scaler"]["maxs"], dtype=float),
    )
    return config, scaler, block("w_out"), block("final_state")
