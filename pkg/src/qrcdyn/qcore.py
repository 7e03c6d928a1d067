"""Gate-level simulation of the measured reservoir circuit.

The circuit is Ry rotations interleaved with fully connected CNOT
blocks: an optional recurrence layer, ceil(D/n) input-encoding layers
(component j sits on qubit j mod n of layer j div n, unused slots get
angle zero), and a fixed random rotation layer V(alpha). Basis-index
convention: qubit 0 is the most significant bit.

Two evaluation paths share the layout, and both carry a leading batch
axis. The statevector path applies each CNOT block as one precomputed
basis permutation. The density-matrix path interleaves a single-qubit
Kraus channel after every gate - on the one rotated qubit for Ry,
independently on both wires for CNOT - which is what the channel noise
models require.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .seeding import STREAM_ALPHA, make_rng

NOISE_NONE = "none"
NOISE_SAMPLING = "sampling"
NOISE_DEPOLARIZING = "depolarizing"
NOISE_AMPLITUDE_DAMPING = "amplitude_damping"
_CHANNEL_KINDS = (NOISE_DEPOLARIZING, NOISE_AMPLITUDE_DAMPING)

# the dense density-matrix path is quadratic in state size; cap it
DENSITY_MAX_QUBITS = 10

TRACE_TOL = 1e-8


class TraceIntegrityError(RuntimeError):
    """Density-matrix trace drifted beyond tolerance."""


def entangler_pairs(n: int) -> list[tuple[int, int]]:
    """All ordered qubit pairs (i, j) with i < j, lexicographic."""
    return [(i, j) for i in range(n - 1) for j in range(i + 1, n)]


@lru_cache(maxsize=None)
def _cnot_fetch(n: int, control: int, target: int) -> np.ndarray:
    """Index map f with (CNOT psi)[k] = psi[f[k]]."""
    idx = np.arange(1 << n)
    cbit = (idx >> (n - 1 - control)) & 1
    fetch = idx ^ (cbit << (n - 1 - target))
    fetch.flags.writeable = False
    return fetch


@lru_cache(maxsize=None)
def _entangler_fetch(n: int) -> np.ndarray:
    """Composite fetch map of the full CNOT block."""
    fetch = np.arange(1 << n)
    for c, t in entangler_pairs(n):
        fetch = fetch[_cnot_fetch(n, c, t)]
    fetch.flags.writeable = False
    return fetch


@dataclass(frozen=True, eq=False)
class CircuitLayout:
    """Static circuit structure: width, random rotation angles, input slots."""

    n: int
    alpha: np.ndarray  # (n,) angles of the fixed rotation layer, in [0, 4*pi]
    in_dim: int
    seed: int | None = None

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("need at least one qubit")
        if self.in_dim < 1:
            raise ValueError("input dimension must be positive")
        alpha = np.asarray(self.alpha, dtype=float).copy()
        if alpha.shape != (self.n,):
            raise ValueError(f"alpha must have shape ({self.n},)")
        if np.any(alpha < 0) or np.any(alpha > 4 * np.pi):
            raise ValueError("alpha entries must lie in [0, 4*pi]")
        alpha.flags.writeable = False
        object.__setattr__(self, "alpha", alpha)

    @property
    def n_states(self) -> int:
        return 1 << self.n

    @property
    def encoding_layers(self) -> int:
        return -(-self.in_dim // self.n)

    @property
    def n_slots(self) -> int:
        return self.encoding_layers * self.n

    @property
    def slot_components(self) -> np.ndarray:
        """Input component carried by each encoding Ry slot.

        Slot s (flat (layer, qubit) order) carries component s mod D, so
        the input is uploaded cyclically until every rotation wire is
        used. The repetition is what gives the measured probabilities
        harmonic content beyond first order in each component; with one
        upload per component the readout's feature span degrades to the
        point of closed-loop collapse.
        """
        out = np.arange(self.n_slots) % self.in_dim
        out.flags.writeable = False
        return out

    @property
    def active_slots(self) -> np.ndarray:
        out = np.flatnonzero(self.slot_components >= 0)
        out.flags.writeable = False
        return out

    @classmethod
    def random(cls, n: int, in_dim: int, seed: int) -> "CircuitLayout":
        alpha = make_rng(seed, STREAM_ALPHA).uniform(0.0, 4 * np.pi, size=n)
        return cls(n=n, alpha=alpha, in_dim=in_dim, seed=seed)

    def to_json_dict(self) -> dict:
        return {
            "n": self.n,
            "alpha": [float(a) for a in self.alpha],
            "encoding_layers": self.encoding_layers,
            "entangler": "full",
            "seed": self.seed,
            "in_dim": self.in_dim,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "CircuitLayout":
        if d.get("entangler", "full") != "full":
            raise ValueError("only the fully connected entangler is supported")
        layout = cls(
            n=int(d["n"]),
            alpha=np.asarray(d["alpha"], dtype=float),
            in_dim=int(d["in_dim"]),
            seed=d.get("seed"),
        )
        if "encoding_layers" in d and int(d["encoding_layers"]) != layout.encoding_layers:
            raise ValueError("encoding_layers inconsistent with n and in_dim")
        return layout


def encode_angles(u_scaled: np.ndarray, layout: CircuitLayout) -> np.ndarray:
    """Rotation angle for every encoding-layer Ry, flat in (layer, qubit) order.

    Component j maps to angle pi * u_j at flat slot j, and the components
    re-upload cyclically on every remaining wire; the distinct encoded
    parameters stay the D inputs.
    """
    u = np.asarray(u_scaled, dtype=float)
    if u.shape != (layout.in_dim,):
        raise ValueError(f"u_scaled must have shape ({layout.in_dim},)")
    return encode_angles_batch(u[None, :], layout)[0]


def encode_angles_batch(u_batch: np.ndarray, layout: CircuitLayout) -> np.ndarray:
    """encode_angles over a batch, shape (B, layers * n)."""
    u_batch = np.asarray(u_batch, dtype=float)
    angles = np.zeros((u_batch.shape[0], layout.n_slots))
    active = layout.active_slots
    angles[:, active] = np.pi * u_batch[:, layout.slot_components[active]]
    return angles


def _apply_ry_layer(states: np.ndarray, angles: np.ndarray, n: int) -> None:
    """Ry on every qubit, in place. states (B, 2^n); angles (n,) or (B, n)."""
    batch = states.shape[0]
    per_column = angles.ndim == 2
    for q in range(n):
        theta = angles[:, q] if per_column else angles[q]
        if np.all(theta == 0.0):
            continue
        c = np.cos(0.5 * theta)
        s = np.sin(0.5 * theta)
        if per_column:
            c = c[:, None, None]
            s = s[:, None, None]
        view = states.reshape(batch, 1 << q, 2, 1 << (n - 1 - q))
        x0 = view[:, :, 0, :]
        x1 = view[:, :, 1, :]
        t0 = c * x0 - s * x1
        t1 = s * x0 + c * x1
        view[:, :, 0, :] = t0
        view[:, :, 1, :] = t1


def _run_encoded_batch(
    angles_batch: np.ndarray, layout: CircuitLayout, r_angles: np.ndarray | None
) -> np.ndarray:
    """Circuit run from pre-encoded slot angles (B, layers * n)."""
    batch = angles_batch.shape[0]
    n = layout.n
    states = np.zeros((batch, layout.n_states), dtype=complex)
    states[:, 0] = 1.0
    fetch = _entangler_fetch(n)
    if r_angles is not None:
        _apply_ry_layer(states, r_angles, n)
        states = states[:, fetch]
    for layer in range(layout.encoding_layers):
        _apply_ry_layer(states, angles_batch[:, layer * n : (layer + 1) * n], n)
        states = states[:, fetch]
    _apply_ry_layer(states, layout.alpha, n)
    states = states[:, fetch]
    return states


def _run_pure_batch(
    u_batch: np.ndarray, layout: CircuitLayout, r_angles: np.ndarray | None
) -> np.ndarray:
    return _run_encoded_batch(encode_angles_batch(u_batch, layout), layout, r_angles)


def run_circuit_pure(
    u_scaled: np.ndarray, layout: CircuitLayout, r_angles: np.ndarray | None = None
) -> np.ndarray:
    """Statevector after the full circuit for one input vector."""
    u = np.asarray(u_scaled, dtype=float)
    if u.shape != (layout.in_dim,):
        raise ValueError(f"u_scaled must have shape ({layout.in_dim},)")
    if r_angles is not None:
        r_angles = np.asarray(r_angles, dtype=float)
        if r_angles.shape != (layout.n,):
            raise ValueError(f"r_angles must have shape ({layout.n},)")
    return _run_pure_batch(u[None, :], layout, r_angles)[0]


def run_circuit_pure_batch(
    u_batch: np.ndarray, layout: CircuitLayout, r_angles: np.ndarray | None = None
) -> np.ndarray:
    """Statevectors for a batch of inputs, shape (B, 2^n).

    r_angles may be a single (n,) vector shared by the batch or a (B, n)
    matrix with one recurrence layer per row.
    """
    u_batch = np.asarray(u_batch, dtype=float)
    if u_batch.ndim != 2 or u_batch.shape[1] != layout.in_dim:
        raise ValueError(f"u_batch must have shape (B, {layout.in_dim})")
    if r_angles is not None:
        r_angles = np.asarray(r_angles, dtype=float)
        if r_angles.shape not in ((layout.n,), (u_batch.shape[0], layout.n)):
            raise ValueError("r_angles must be (n,) or (B, n)")
    return _run_pure_batch(u_batch, layout, r_angles)


def _infer_n(size: int) -> int:
    n = size.bit_length() - 1
    if size < 2 or (1 << n) != size:
        raise ValueError("state length must be a power of two")
    return n


def apply_ry(state: np.ndarray, qubit: int, angle: float) -> np.ndarray:
    """Single Ry gate on one statevector."""
    state = np.asarray(state, dtype=complex)
    if state.ndim != 1:
        raise ValueError("state must be a vector")
    n = _infer_n(state.size)
    if not 0 <= qubit < n:
        raise ValueError(f"qubit must lie in [0, {n})")
    out = state.copy()
    _apply_ry_layer(out[None, :], np.array([[angle if q == qubit else 0.0 for q in range(n)]]), n)
    return out


def apply_cnot(state: np.ndarray, control: int, target: int) -> np.ndarray:
    """Single CNOT gate on one statevector."""
    state = np.asarray(state, dtype=complex)
    if state.ndim != 1:
        raise ValueError("state must be a vector")
    n = _infer_n(state.size)
    if not (0 <= control < n and 0 <= target < n):
        raise ValueError(f"qubits must lie in [0, {n})")
    if control == target:
        raise ValueError("control and target must differ")
    return state[_cnot_fetch(n, control, target)]


def measure_probabilities(state: np.ndarray) -> np.ndarray:
    """Computational-basis probabilities |amplitude|^2 along the last axis."""
    state = np.asarray(state)
    return (state.real ** 2 + state.imag ** 2).astype(float)


def sample_shots(probs: np.ndarray, shots: int, rng: np.random.Generator) -> np.ndarray:
    """Empirical frequencies from a finite number of measurement shots."""
    if shots < 1:
        raise ValueError("shots must be at least 1")
    p = np.asarray(probs, dtype=float)
    if np.any(p < -1e-9):
        raise ValueError("probabilities must be non-negative")
    p = np.clip(p, 0.0, None)
    sums = p.sum(axis=-1, keepdims=True)
    if np.any(sums <= 0):
        raise ValueError("probabilities must have positive mass")
    counts = rng.multinomial(shots, p / sums)
    return counts / shots


@dataclass(frozen=True)
class NoiseModel:
    """What imperfection, if any, corrupts the measured probabilities."""

    kind: str = NOISE_NONE
    shots: int | None = None
    p: float | None = None
    seed: int = 0

    def __post_init__(self):
        if self.kind == NOISE_NONE:
            if self.shots is not None or self.p is not None:
                raise ValueError("noise-free model takes no parameters")
        elif self.kind == NOISE_SAMPLING:
            if self.shots is None or self.shots < 1:
                raise ValueError("sampling noise needs shots >= 1")
            if self.p is not None:
                raise ValueError("sampling noise takes no channel probability")
        elif self.kind in _CHANNEL_KINDS:
            if self.p is None or not 0.0 <= self.p <= 1.0:
                raise ValueError("channel probability must lie in [0, 1]")
            if self.shots is not None:
                raise ValueError("channel noise takes no shot count")
        else:
            raise ValueError(f"unknown noise kind {self.kind!r}")

    @property
    def is_channel(self) -> bool:
        return self.kind in _CHANNEL_KINDS

    @classmethod
    def none(cls) -> "NoiseModel":
        return cls()

    @classmethod
    def sampling(cls, shots: int, seed: int = 0) -> "NoiseModel":
        return cls(kind=NOISE_SAMPLING, shots=int(shots), seed=seed)

    @classmethod
    def depolarizing(cls, p: float, seed: int = 0) -> "NoiseModel":
        return cls(kind=NOISE_DEPOLARIZING, p=float(p), seed=seed)

    @classmethod
    def amplitude_damping(cls, p: float, seed: int = 0) -> "NoiseModel":
        return cls(kind=NOISE_AMPLITUDE_DAMPING, p=float(p), seed=seed)

    def to_json_dict(self) -> dict:
        return {"kind": self.kind, "shots": self.shots, "p": self.p, "seed": self.seed}

    @classmethod
    def from_json_dict(cls, d: dict) -> "NoiseModel":
        return cls(
            kind=d.get("kind", NOISE_NONE),
            shots=d.get("shots"),
            p=d.get("p"),
            seed=int(d.get("seed", 0)),
        )


# --- single-qubit channels ------------------------------------------------

_PAULI_X = np.array([[0, 1], [1, 0]], dtype=complex)
_PAULI_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
_PAULI_Z = np.array([[1, 0], [0, -1]], dtype=complex)


def amplitude_damping_kraus(p: float) -> list[np.ndarray]:
    """Kraus pair of the amplitude-damping channel with decay probability p."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    k0 = np.array([[1.0, 0.0], [0.0, math.sqrt(max(0.0, 1.0 - p))]], dtype=complex)
    k1 = np.array([[0.0, math.sqrt(max(0.0, p))], [0.0, 0.0]], dtype=complex)
    return [k0, k1]


def depolarizing_kraus(p: float) -> list[np.ndarray]:
    """Four-operator Kraus form of the depolarizing channel."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    return [
        math.sqrt(max(0.0, 1.0 - 3.0 * p / 4.0)) * np.eye(2, dtype=complex),
        math.sqrt(p / 4.0) * _PAULI_X,
        math.sqrt(p / 4.0) * _PAULI_Y,
        math.sqrt(p / 4.0) * _PAULI_Z,
    ]


def depolarizing_apply(rho: np.ndarray, p: float) -> np.ndarray:
    """Depolarizing channel on a single-qubit density matrix."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    rho = np.asarray(rho, dtype=complex)
    if rho.shape != (2, 2):
        raise ValueError("expected a 2x2 density matrix")
    return (1.0 - p) * rho + p * 0.5 * np.trace(rho) * np.eye(2, dtype=complex)


def apply_kraus(rho: np.ndarray, kraus: list[np.ndarray]) -> np.ndarray:
    """Generic channel application sum_k K rho K^dagger."""
    rho = np.asarray(rho, dtype=complex)
    out = np.zeros_like(rho)
    for k in kraus:
        out += k @ rho @ k.conj().T
    return out


# --- density-matrix circuit path -------------------------------------------


def density_from_state(state: np.ndarray) -> np.ndarray:
    state = np.asarray(state, dtype=complex)
    return np.outer(state, state.conj())


def _apply_ry_rho(rho: np.ndarray, qubit: int, n: int, angle) -> None:
    """Ry on both sides of a batch of density matrices, in place.

    rho has shape (B, dim, dim); angle is a scalar shared by the batch
    or a length-B vector of per-row angles.
    """
    a = np.asarray(angle, dtype=float)
    c = np.cos(0.5 * a)
    s = np.sin(0.5 * a)
    if a.ndim:
        c3, s3 = c[:, None, None], s[:, None, None]
        c4, s4 = c[:, None, None, None], s[:, None, None, None]
    else:
        c3 = c4 = c
        s3 = s4 = s
    dim = 1 << n
    left = 1 << qubit
    right = 1 << (n - 1 - qubit)
    b = rho.shape[0]
    v = rho.reshape(b, left, 2, right * dim)
    x0 = v[:, :, 0, :]
    x1 = v[:, :, 1, :]
    t0 = c3 * x0 - s3 * x1
    t1 = s3 * x0 + c3 * x1
    v[:, :, 0, :] = t0
    v[:, :, 1, :] = t1
    w = rho.reshape(b, dim, left, 2, right)
    y0 = w[:, :, :, 0, :]
    y1 = w[:, :, :, 1, :]
    u0 = c4 * y0 - s4 * y1
    u1 = s4 * y0 + c4 * y1
    w[:, :, :, 0, :] = u0
    w[:, :, :, 1, :] = u1


def _ry_derivative_insertion(rho: np.ndarray, qubit: int, n: int, angle: float) -> np.ndarray:
    """d/dtheta [Ry rho Ry^T] for real symmetric rho, shape (dim, dim).

    With R' = dRy/dtheta = Ry(theta + pi)/2 and symmetric rho the product
    rule collapses to M + M^T where M = R' rho Ry^T, so one asymmetric
    rotation apply replaces a pair of shifted circuit evaluations.
    """
    c = math.cos(0.5 * angle)
    s = math.sin(0.5 * angle)
    dim = 1 << n
    left = 1 << qubit
    right = 1 << (n - 1 - qubit)
    m = rho.copy()
    v = m.reshape(left, 2, right * dim)
    x0 = v[:, 0, :].copy()
    x1 = v[:, 1, :]
    # left factor Ry(theta + pi): cos half-angle -> -s, sin half-angle -> c
    v[:, 0, :] = -s * x0 - c * x1
    v[:, 1, :] = c * x0 - s * x1
    w = m.reshape(dim, left, 2, right)
    y0 = w[:, :, 0, :].copy()
    y1 = w[:, :, 1, :]
    w[:, :, 0, :] = c * y0 - s * y1
    w[:, :, 1, :] = s * y0 + c * y1
    m *= 0.5
    return m + m.T


def _qubit_blocks(rho: np.ndarray, qubit: int, n: int):
    left = 1 << qubit
    right = 1 << (n - 1 - qubit)
    b = rho.shape[0]
    return rho.reshape(b, left, 2, right, left, 2, right)


def _apply_amplitude_damping_rho(rho: np.ndarray, qubit: int, n: int, p: float) -> None:
    v = _qubit_blocks(rho, qubit, n)
    sq = math.sqrt(max(0.0, 1.0 - p))
    v[:, :, 0, :, :, 0, :] += p * v[:, :, 1, :, :, 1, :]
    v[:, :, 0, :, :, 1, :] *= sq
    v[:, :, 1, :, :, 0, :] *= sq
    v[:, :, 1, :, :, 1, :] *= 1.0 - p


def _apply_depolarizing_rho(rho: np.ndarray, qubit: int, n: int, p: float) -> None:
    v = _qubit_blocks(rho, qubit, n)
    tq = v[:, :, 0, :, :, 0, :] + v[:, :, 1, :, :, 1, :]  # partial trace over the qubit
    rho *= 1.0 - p
    v[:, :, 0, :, :, 0, :] += 0.5 * p * tq
    v[:, :, 1, :, :, 1, :] += 0.5 * p * tq


_CHANNEL_APPLIERS = {
    NOISE_DEPOLARIZING: _apply_depolarizing_rho,
    NOISE_AMPLITUDE_DAMPING: _apply_amplitude_damping_rho,
}


def run_noisy_encoded_grads(
    enc: np.ndarray,
    layout: CircuitLayout,
    noise: NoiseModel,
    weights: np.ndarray,
    r_angles: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Noisy probabilities plus weighted slot-angle gradients, one pass.

    weights has shape (G, n_slots); gradient column g is
    sum_s weights[g, s] * d(probs)/d(enc_s). Forward sensitivity: the
    stack carries the density matrix and one tangent per group through
    the same gate/channel sequence, and each encoding rotation adds its
    derivative insertion (computed from the pre-gate state) to the
    tangents of the groups that weight it. Exact, like the shift rule,
    but the stack is 1+G rows instead of 1+2*n_slots.
    """
    n = layout.n
    if n > DENSITY_MAX_QUBITS:
        raise ValueError(f"density path supports at most {DENSITY_MAX_QUBITS} qubits")
    channel = _CHANNEL_APPLIERS[noise.kind]
    p = noise.p
    pairs = entangler_pairs(n)
    dim = layout.n_states
    enc = np.asarray(enc, dtype=float)
    weights = np.asarray(weights, dtype=float)
    if weights.ndim != 2 or weights.shape[1] != enc.shape[0]:
        raise ValueError(f"weights must have shape (G, {enc.shape[0]})")
    n_groups = weights.shape[0]
    rows = np.zeros((1 + n_groups, dim, dim))
    rows[0, 0, 0] = 1.0

    def fixed_ry_layer(angles: np.ndarray):
        for q in range(n):
            _apply_ry_rho(rows, q, n, angles[q])
            channel(rows, q, n, p)

    def cnot_block():
        nonlocal rows
        for c, t in pairs:
            fetch = _cnot_fetch(n, c, t)
            rows = rows[:, fetch[:, None], fetch]
            channel(rows, c, n, p)
            channel(rows, t, n, p)

    if r_angles is not None:
        fixed_ry_layer(np.asarray(r_angles, dtype=float))
        cnot_block()
    for layer in range(layout.encoding_layers):
        for q in range(n):
            slot = layer * n + q
            w_s = weights[:, slot]
            hit = np.nonzero(w_s)[0]
            ins = None
            if hit.size:
                ins = _ry_derivative_insertion(rows[0], q, n, enc[slot])
                channel(ins[None], q, n, p)
            _apply_ry_rho(rows, q, n, enc[slot])
            channel(rows, q, n, p)
            if ins is not None:
                rows[1 + hit] += w_s[hit, None, None] * ins
        cnot_block()
    fixed_ry_layer(layout.alpha)
    cnot_block()
    trace = np.einsum("ii->", rows[0])
    if abs(trace - 1.0) > TRACE_TOL:
        raise TraceIntegrityError(f"density-matrix trace drifted to {trace!r}")
    probs = np.ascontiguousarray(np.diagonal(rows[0]))
    grads = np.ascontiguousarray(np.diagonal(rows[1:], axis1=1, axis2=2).T)
    return probs, grads


def run_circuit_noisy(
    u_scaled: np.ndarray,
    layout: CircuitLayout,
    noise: NoiseModel,
    r_angles: np.ndarray | None = None,
) -> np.ndarray:
    """Measured probabilities under per-gate channel noise.

    Evolves the full density matrix, applying the configured channel after
    every Ry (on its qubit) and after every CNOT (independently on both
    wires). Returns the diagonal of the final density matrix.
    """
    if not noise.is_channel:
        raise ValueError("run_circuit_noisy needs a depolarizing or amplitude-damping model")
    u = np.asarray(u_scaled, dtype=float)
    if u.shape != (layout.in_dim,):
        raise ValueError(f"u_scaled must have shape ({layout.in_dim},)")
    if r_angles is not None:
        r_angles = np.asarray(r_angles, dtype=float)
        if r_angles.shape != (layout.n,):
            raise ValueError(f"r_angles must have shape ({layout.n},)")
    return run_noisy_encoded(encode_angles(u, layout), layout, noise, r_angles)


def run_noisy_encoded(
    enc: np.ndarray,
    layout: CircuitLayout,
    noise: NoiseModel,
    r_angles: np.ndarray | None = None,
) -> np.ndarray:
    """Density-path probabilities from pre-encoded slot angles.

    Shared by the noisy forward run and the parameter-shift gradients of
    noisy circuits, which differentiate by re-running with shifted slot
    or recurrence angles.
    """
    enc = np.asarray(enc, dtype=float)
    r_batch = None if r_angles is None else np.asarray(r_angles, dtype=float)[None, :]
    return run_noisy_encoded_batch(enc[None, :], layout, noise, r_batch)[0]


def run_noisy_encoded_batch(
    enc: np.ndarray,
    layout: CircuitLayout,
    noise: NoiseModel,
    r_angles: np.ndarray | None = None,
) -> np.ndarray:
    """Density-path probabilities for a batch of slot-angle rows, (B, N_r).

    The rows march through the shared gate sequence together; this is
    what makes the parameter-shift batches of noisy circuits (2 rows per
    differentiated angle) affordable.
    """
    n = layout.n
    if n > DENSITY_MAX_QUBITS:
        raise ValueError(f"density path supports at most {DENSITY_MAX_QUBITS} qubits")
    channel = _CHANNEL_APPLIERS[noise.kind]
    p = noise.p
    pairs = entangler_pairs(n)
    dim = layout.n_states
    enc = np.asarray(enc, dtype=float)
    n_rows = enc.shape[0]
    # everything here is real: Ry is a real rotation, CNOT a permutation,
    # and both channels map real density matrices to real ones
    rho = np.zeros((n_rows, dim, dim))
    rho[:, 0, 0] = 1.0

    def ry_layer(angles: np.ndarray):
        # angles: (B, n), one column per qubit
        nonlocal rho
        for q in range(n):
            _apply_ry_rho(rho, q, n, angles[:, q])
            channel(rho, q, n, p)

    def cnot_block():
        nonlocal rho
        for c, t in pairs:
            fetch = _cnot_fetch(n, c, t)
            rho = rho[:, fetch[:, None], fetch]
            channel(rho, c, n, p)
            channel(rho, t, n, p)

    if r_angles is not None:
        ry_layer(np.asarray(r_angles, dtype=float))
        cnot_block()
    for layer in range(layout.encoding_layers):
        ry_layer(enc[:, layer * n : (layer + 1) * n])
        cnot_block()
    ry_layer(np.broadcast_to(layout.alpha, (n_rows, n)))
    cnot_block()
    traces = np.einsum("bii->b", rho)
    worst = np.abs(traces - 1.0).max()
    if worst > TRACE_TOL:
        raise TraceIntegrityError(f"density-matrix trace drifted by {worst!r}")
    return np.ascontiguousarray(np.diagonal(rho, axis1=1, axis2=2))
