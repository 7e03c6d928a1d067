"""Lorenz-63 and Lorenz-96 reference systems.

Fixed-step RK4 integration, analytic state Jacobians, and the exact
tangent map of the discrete RK4 update. The tangent map drives the
reference Lyapunov computations, so the ground-truth spectra and the
data-driven ones are produced by the same QR machinery.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .seeding import STREAM_DATA, make_rng

LORENZ63 = "lorenz63"
LORENZ96 = "lorenz96"

# leading Lyapunov exponent (per unit time) of the stock configurations
_DEFAULT_LAMBDA1 = {
    (LORENZ63, 3): 0.9056,
    (LORENZ96, 10): 1.2,
    (LORENZ96, 20): 1.5,
}

# a state leaving this ball is treated as numerical blow-up
DIVERGENCE_LIMIT = 1.0e6


class IntegrationDivergedError(RuntimeError):
    """Trajectory left the attractor basin (|x_i| beyond DIVERGENCE_LIMIT)."""

    def __init__(self, step: int):
        super().__init__(f"integration diverged at step {step}")
        self.step = step


@dataclass(frozen=True)
class SystemSpec:
    """Which vector field to integrate and with which parameters."""

    kind: str
    params: tuple[float, ...]
    dim: int

    def __post_init__(self):
        params = tuple(float(p) for p in self.params)
        object.__setattr__(self, "params", params)
        if not np.all(np.isfinite(params)):
            raise ValueError("system parameters must be finite")
        if self.kind == LORENZ63:
            if self.dim != 3:
                raise ValueError("lorenz63 is three-dimensional")
            if len(params) != 3:
                raise ValueError("lorenz63 takes (sigma, rho, beta)")
        elif self.kind == LORENZ96:
            if self.dim < 4:
                raise ValueError("lorenz96 needs dim >= 4 (cyclic coupling degenerates below)")
            if len(params) != 1:
                raise ValueError("lorenz96 takes a single forcing parameter")
        else:
            raise ValueError(f"unknown system kind {self.kind!r}")

    def default_lambda1(self) -> float | None:
        return _DEFAULT_LAMBDA1.get((self.kind, self.dim))

    def to_json_dict(self) -> dict:
        return {"kind": self.kind, "params": list(self.params), "dim": self.dim}

    @classmethod
    def from_json_dict(cls, d: dict) -> "SystemSpec":
        return cls(kind=d["kind"], params=tuple(d["params"]), dim=int(d["dim"]))


def lorenz63(sigma: float = 10.0, rho: float = 28.0, beta: float = 8.0 / 3.0) -> SystemSpec:
    return SystemSpec(LORENZ63, (sigma, rho, beta), 3)


def lorenz96(dim: int = 10, forcing: float = 8.0) -> SystemSpec:
    return SystemSpec(LORENZ96, (forcing,), dim)


def rhs(spec: SystemSpec, x: np.ndarray) -> np.ndarray:
    """Time derivative of the state."""
    x = np.asarray(x, dtype=float)
    if x.shape != (spec.dim,):
        raise ValueError(f"state must have shape ({spec.dim},)")
    if spec.kind == LORENZ63:
        s, r, b = spec.params
        return np.array(
            [
                s * (x[1] - x[0]),
                x[0] * (r - x[2]) - x[1],
                x[0] * x[1] - b * x[2],
            ]
        )
    f = spec.params[0]
    # dx_i/dt = (x_{i+1} - x_{i-2}) x_{i-1} - x_i + F, indices cyclic
    return (np.roll(x, -1) - np.roll(x, 2)) * np.roll(x, 1) - x + f


def system_jacobian(spec: SystemSpec, x: np.ndarray) -> np.ndarray:
    """Analytic Jacobian of the vector field at x."""
    x = np.asarray(x, dtype=float)
    if x.shape != (spec.dim,):
        raise ValueError(f"state must have shape ({spec.dim},)")
    if spec.kind == LORENZ63:
        s, r, b = spec.params
        return np.array(
            [
                [-s, s, 0.0],
                [r - x[2], -1.0, -x[0]],
                [x[1], x[0], -b],
            ]
        )
    m = spec.dim
    idx = np.arange(m)
    jac = np.zeros((m, m))
    jac[idx, idx] = -1.0
    jac[idx, (idx + 1) % m] = np.roll(x, 1)        # x_{i-1}
    jac[idx, (idx - 2) % m] = -np.roll(x, 1)       # -x_{i-1}
    jac[idx, (idx - 1) % m] = np.roll(x, -1) - np.roll(x, 2)  # x_{i+1} - x_{i-2}
    return jac


def rk4_step(spec: SystemSpec, x: np.ndarray, dt: float) -> np.ndarray:
    """One classical fixed-step RK4 update."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    k1 = rhs(spec, x)
    k2 = rhs(spec, x + 0.5 * dt * k1)
    k3 = rhs(spec, x + 0.5 * dt * k2)
    k4 = rhs(spec, x + dt * k3)
    out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    if not np.all(np.isfinite(out)):
        raise OverflowError("non-finite value in RK4 update")
    return out


def rk4_jacobian(spec: SystemSpec, x: np.ndarray, dt: float) -> np.ndarray:
    """Exact Jacobian of the discrete rk4_step map at x.

    Differentiates the integrator itself rather than the flow, so that
    products of these matrices are the exact tangent dynamics of the
    generated trajectories.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    eye = np.eye(spec.dim)
    k1 = rhs(spec, x)
    a1 = system_jacobian(spec, x)
    x2 = x + 0.5 * dt * k1
    k2 = rhs(spec, x2)
    a2 = system_jacobian(spec, x2) @ (eye + 0.5 * dt * a1)
    x3 = x + 0.5 * dt * k2
    k3 = rhs(spec, x3)
    a3 = system_jacobian(spec, x3) @ (eye + 0.5 * dt * a2)
    x4 = x + dt * k3
    a4 = system_jacobian(spec, x4) @ (eye + dt * a3)
    return eye + (dt / 6.0) * (a1 + 2.0 * a2 + 2.0 * a3 + a4)


@dataclass(frozen=True)
class Trajectory:
    """Integrated states on the attractor plus time metadata."""

    states: np.ndarray  # (n_steps, dim)
    dt: float
    lambda1: float      # leading Lyapunov exponent, per unit time

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        object.__setattr__(self, "states", states)
        if states.ndim != 2 or states.shape[0] < 1:
            raise ValueError("states must be a non-empty (n_steps, dim) array")
        if not np.all(np.isfinite(states)):
            raise ValueError("trajectory contains non-finite states")
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.lambda1 <= 0:
            raise ValueError("lambda1 must be positive")
        if self.lt_steps < 1:
            raise ValueError("one Lyapunov time must span at least one step")

    @property
    def n_steps(self) -> int:
        return self.states.shape[0]

    @property
    def dim(self) -> int:
        return self.states.shape[1]

    @property
    def lt_steps(self) -> int:
        """Steps per Lyapunov time."""
        return int(round(1.0 / (self.lambda1 * self.dt)))


def generate_trajectory(
    spec: SystemSpec,
    dt: float,
    n_steps: int,
    n_discard: int = 0,
    x0: np.ndarray | None = None,
    seed: int = 0,
    lambda1: float | None = None,
) -> Trajectory:
    """Integrate the system and keep n_steps states after a spin-up.

    The first n_discard steps are dropped so the recorded states sit on
    the attractor. With x0=None the initial condition is drawn from a
    seeded unit normal.
    """
    if n_steps < 1:
        raise ValueError("trajectory would be empty (n_steps < 1)")
    if n_discard < 0:
        raise ValueError("n_discard must be non-negative")
    if lambda1 is None:
        lambda1 = spec.default_lambda1()
        if lambda1 is None:
            raise ValueError(
                f"no stock lambda1 for {spec.kind} dim={spec.dim}; pass lambda1 explicitly"
            )
    if x0 is None:
        x = make_rng(seed, STREAM_DATA).standard_normal(spec.dim)
    else:
        x = np.asarray(x0, dtype=float).copy()
        if x.shape != (spec.dim,):
            raise ValueError(f"x0 must have shape ({spec.dim},)")
    for i in range(n_discard):
        x = rk4_step(spec, x, dt)
        if np.any(np.abs(x) > DIVERGENCE_LIMIT):
            raise IntegrationDivergedError(i)
    states = np.empty((n_steps, spec.dim))
    for i in range(n_steps):
        states[i] = x
        x = rk4_step(spec, x, dt)
        if np.any(np.abs(x) > DIVERGENCE_LIMIT):
            raise IntegrationDivergedError(n_discard + i)
    return Trajectory(states=states, dt=dt, lambda1=float(lambda1))


@dataclass(frozen=True)
class MinMaxScaler:
    """Per-component affine map of the train range onto [0, 1]."""

    mins: np.ndarray
    maxs: np.ndarray

    def __post_init__(self):
        mins = np.asarray(self.mins, dtype=float)
        maxs = np.asarray(self.maxs, dtype=float)
        object.__setattr__(self, "mins", mins)
        object.__setattr__(self, "maxs", maxs)
        if mins.shape != maxs.shape or mins.ndim != 1:
            raise ValueError("mins and maxs must be matching vectors")
        if np.any(maxs <= mins):
            raise ValueError("degenerate scaler: max must exceed min in every component")

    @classmethod
    def fit(
        cls,
        data: np.ndarray,
        feature_range: tuple[float, float] = (0.0, 1.0),
    ) -> "MinMaxScaler":
        """Fit so the data box maps onto feature_range.

        Narrower ranges shrink the encoded rotation angles; wide-input
        systems need that to keep the measured features low-order enough
        for a linear readout.
        """
        data = np.asarray(data, dtype=float)
        if data.ndim != 2 or data.shape[0] < 2:
            raise ValueError("need at least two samples to fit a scaler")
        lo, hi = feature_range
        if not hi > lo:
            raise ValueError("feature_range must be increasing")
        span = (data.max(axis=0) - data.min(axis=0)) / (hi - lo)
        mins = data.min(axis=0) - lo * span
        return cls(mins=mins, maxs=mins + span)

    @property
    def slope(self) -> np.ndarray:
        """d(scaled)/d(physical), per component."""
        return 1.0 / (self.maxs - self.mins)

    def scale(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.mins) / (self.maxs - self.mins)

    def unscale(self, y: np.ndarray) -> np.ndarray:
        return np.asarray(y, dtype=float) * (self.maxs - self.mins) + self.mins


@dataclass(frozen=True)
class DatasetSplit:
    """Contiguous washout/train/test windows over one trajectory."""

    traj: Trajectory
    washout: range
    train: range
    test: range
    scaler: MinMaxScaler


def split_and_scale(
    traj: Trajectory,
    washout_lt: float,
    train_lt: float,
    test_lt: float,
    feature_range: tuple[float, float] = (0.0, 1.0),
) -> DatasetSplit:
    """Partition a trajectory by Lyapunov-time budgets and fit the scaler.

    The scaler is fit on the train window only; washout and test data are
    mapped through the same affine transform.
    """
    lt = traj.lt_steps
    n_w = int(round(washout_lt * lt))
    n_tr = int(round(train_lt * lt))
    n_te = int(round(test_lt * lt))
    if n_w < 0 or n_te < 0:
        raise ValueError("window lengths must be non-negative")
    if n_tr < 2:
        raise ValueError("train window must span at least two steps")
    if n_w + n_tr + n_te > traj.n_steps:
        raise ValueError(
            f"requested {n_w + n_tr + n_te} steps but trajectory has {traj.n_steps}"
        )
    washout = range(0, n_w)
    train = range(n_w, n_w + n_tr)
    test = range(n_w + n_tr, n_w + n_tr + n_te)
    scaler = MinMaxScaler.fit(traj.states[train.start : train.stop], feature_range)
    return DatasetSplit(traj=traj, washout=washout, train=train, test=test, scaler=scaler)


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def save_trajectory(
    traj: Trajectory, spec: SystemSpec, csv_path: str | Path, seed: int | None = None
) -> None:
    """Write states as CSV (t, x1..xD at 17 significant digits) plus a JSON sidecar."""
    csv_path = Path(csv_path)
    dim = traj.dim
    header = "t," + ",".join(f"x{i + 1}" for i in range(dim))
    lines = [header]
    for i in range(traj.n_steps):
        t = i * traj.dt
        row = ",".join(f"{v:.17g}" for v in traj.states[i])
        lines.append(f"{t:.17g},{row}")
    _atomic_write_text(csv_path, "\n".join(lines) + "\n")
    meta = {
        "kind": spec.kind,
        "params": list(spec.params),
        "dt": traj.dt,
        "lambda1": traj.lambda1,
        "seed": seed,
    }
    _atomic_write_text(csv_path.with_suffix(".json"), json.dumps(meta, sort_keys=True, indent=2) + "\n")


def load_trajectory(csv_path: str | Path) -> tuple[Trajectory, SystemSpec, int | None]:
    """Inverse of save_trajectory."""
    csv_path = Path(csv_path)
    meta = json.loads(csv_path.with_suffix(".json").read_text())
    raw = np.loadtxt(csv_path, delimiter=",", skiprows=1, ndmin=2)
    states = raw[:, 1:]
    spec = SystemSpec(kind=meta["kind"], params=tuple(meta["params"]), dim=states.shape[1])
    traj = Trajectory(states=states, dt=float(meta["dt"]), lambda1=float(meta["lambda1"]))
    return traj, spec, meta.get("seed")


def reference_lyapunov(
    spec: SystemSpec,
    traj: Trajectory,
    n_exponents: int | None = None,
    n_skip: int | None = None,
    seed: int = 0,
):
    """Ground-truth Lyapunov exponents along a trajectory's own dynamics.

    Re-integrates from the trajectory's first state using the exact RK4
    tangent map; a run of at least ~50 Lyapunov times is recommended for
    converged estimates. Returns exponents sorted descending.
    """
    from . import stability

    if n_exponents is None:
        n_exponents = spec.dim
    if not 1 <= n_exponents <= spec.dim:
        raise ValueError("n_exponents must lie in [1, dim]")
    if n_skip is None:
        n_skip = traj.lt_steps
    result, _ = stability.lyapunov_spectrum(
        jacobian_provider=lambda x: rk4_jacobian(spec, x, traj.dt),
        state_advancer=lambda x: rk4_step(spec, x, traj.dt),
        state0=traj.states[0],
        d_t=n_exponents,
        n_steps=traj.n_steps,
        n_skip=n_skip,
        dt=traj.dt,
        seed=seed,
    )
    return result.exponents
