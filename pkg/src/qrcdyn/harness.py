"""Experiment orchestration: configurations, ensemble runs, parameter
sweeps, and deterministic report files.

A single declarative config names the dynamical system, the data
windows in Lyapunov-time units, the reservoir, and the diagnostics to
run. Ensembles differ only in the member seed; every random draw is
keyed by (member seed, purpose), so reruns with the same config and
seeds reproduce all emitted files byte for byte. For that reason wall
times are never written into report files.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace as dc_replace
from pathlib import Path

import numpy as np

from . import dynamics, qcore, reservoir, stability, tangent
from .dynamics import DatasetSplit, SystemSpec, Trajectory
from .qcore import NoiseModel
from .reservoir import ReservoirConfig
from .seeding import STREAM_FORECAST, STREAM_SHOTS, STREAM_SPECTRUM, make_rng


@dataclass(frozen=True)
class ExperimentConfig:
    """Declarative description of one ensemble experiment."""

    name: str
    system: SystemSpec
    dt: float = 0.01
    lambda1: float | None = None       # None: use the system's stock value
    spinup_lt: float = 100.0
    washout_lt: float = 5.0
    train_lt: float = 20.0
    test_lt: float = 10.0
    n_qubits: int = 7
    epsilon: float = 0.21
    variant: str = reservoir.RFQRC
    beta_grid: tuple[float, ...] = (1e-9, 1e-12)
    input_range: tuple[float, float] = (0.0, 1.0)
    noise: NoiseModel = NoiseModel()
    d_t: int | None = None             # None: system dimension
    spectrum_lt: float = 50.0
    spectrum_skip_lt: float = 5.0
    clv: bool = False
    clv_transient_lt: float = 5.0
    reference_lt: float = 500.0
    seeds: tuple[int, ...] = tuple(range(10))
    data_seed: int = 12345

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "beta_grid", tuple(float(b) for b in self.beta_grid))
        object.__setattr__(self, "input_range", tuple(float(v) for v in self.input_range))
        if not self.seeds:
            raise ValueError("need at least one seed")
        if self.dt <= 0:
            raise ValueError("dt must be positive")

    def resolved_lambda1(self) -> float:
        lam = self.lambda1 if self.lambda1 is not None else self.system.default_lambda1()
        if lam is None:
            raise ValueError("lambda1 unknown for this system; set it in the config")
        return float(lam)

    @property
    def lt_steps(self) -> int:
        return int(round(1.0 / (self.resolved_lambda1() * self.dt)))

    @property
    def tangent_dim(self) -> int:
        return self.d_t if self.d_t is not None else self.system.dim

    def to_json_dict(self) -> dict:
        return {
            "name": self.name,
            "system": self.system.to_json_dict(),
            "dt": self.dt,
            "lambda1": self.lambda1,
            "spinup_lt": self.spinup_lt,
            "washout_lt": self.washout_lt,
            "train_lt": self.train_lt,
            "test_lt": self.test_lt,
            "n_qubits": self.n_qubits,
            "epsilon": self.epsilon,
            "variant": self.variant,
            "beta_grid": list(self.beta_grid),
            "input_range": list(self.input_range),
            "noise": self.noise.to_json_dict(),
            "d_t": self.d_t,
            "spectrum_lt": self.spectrum_lt,
            "spectrum_skip_lt": self.spectrum_skip_lt,
            "clv": self.clv,
            "clv_transient_lt": self.clv_transient_lt,
            "reference_lt": self.reference_lt,
            "seeds": list(self.seeds),
            "data_seed": self.data_seed,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "ExperimentConfig":
        return cls(
            name=d["name"],
            system=SystemSpec.from_json_dict(d["system"]),
            dt=float(d.get("dt", 0.01)),
            lambda1=d.get("lambda1"),
            spinup_lt=float(d.get("spinup_lt", 100.0)),
            washout_lt=float(d.get("washout_lt", 5.0)),
            train_lt=float(d.get("train_lt", 20.0)),
            test_lt=float(d.get("test_lt", 10.0)),
            n_qubits=int(d.get("n_qubits", 7)),
            epsilon=float(d.get("epsilon", 0.21)),
            variant=d.get("variant", reservoir.RFQRC),
            beta_grid=tuple(d.get("beta_grid", (1e-9, 1e-12))),
            input_range=tuple(d.get("input_range", (0.0, 1.0))),
            noise=NoiseModel.from_json_dict(d.get("noise", {"kind": "none"})),
            d_t=d.get("d_t"),
            spectrum_lt=float(d.get("spectrum_lt", 50.0)),
            spectrum_skip_lt=float(d.get("spectrum_skip_lt", 5.0)),
            clv=bool(d.get("clv", False)),
            clv_transient_lt=float(d.get("clv_transient_lt", 5.0)),
            reference_lt=float(d.get("reference_lt", 500.0)),
            seeds=tuple(d.get("seeds", range(10))),
            data_seed=int(d.get("data_seed", 12345)),
        )


def load_config(path: str | Path) -> ExperimentConfig:
    return ExperimentConfig.from_json_dict(json.loads(Path(path).read_text()))


def save_config(config: ExperimentConfig, path: str | Path) -> None:
    _atomic_write(Path(path), json.dumps(config.to_json_dict(), sort_keys=True, indent=2) + "\n")


# --- data preparation -------------------------------------------------------


def prepare_data(config: ExperimentConfig) -> tuple[Trajectory, DatasetSplit]:
    """Spin up, integrate, and window the drive trajectory."""
    lam = config.resolved_lambda1()
    lt = config.lt_steps
    n_keep = int(round((config.washout_lt + config.train_lt + config.test_lt) * lt)) + 1
    traj = dynamics.generate_trajectory(
        config.system,
        config.dt,
        n_steps=n_keep,
        n_discard=int(round(config.spinup_lt * lt)),
        seed=config.data_seed,
        lambda1=lam,
    )
    split = dynamics.split_and_scale(
        traj, config.washout_lt, config.train_lt, config.test_lt,
        feature_range=config.input_range,
    )
    return traj, split


def reference_spectrum(config: ExperimentConfig, n_exponents: int | None = None) -> np.ndarray:
    """Ground-truth exponents of the drive, from a long run of the same orbit."""
    lam = config.resolved_lambda1()
    lt = config.lt_steps
    traj = dynamics.generate_trajectory(
        config.system,
        config.dt,
        n_steps=int(round(config.reference_lt * lt)),
        n_discard=int(round(config.spinup_lt * lt)),
        seed=config.data_seed,
        lambda1=lam,
    )
    return dynamics.reference_lyapunov(
        config.system, traj, n_exponents=n_exponents or config.tangent_dim
    )


# --- per-seed pipeline ------------------------------------------------------


@dataclass
class SeedResult:
    seed: int
    error: str | None = None
    beta: float | None = None
    exponents: np.ndarray | None = None
    ky: float | None = None
    max_cle: float | None = None
    vpt_lt: float | None = None
    clv_angle_samples: np.ndarray | None = None  # (n_valid, n_pairs) degrees
    guarded_spectrum: bool = False  # sweep fallback: free map escaped


def _make_reservoir(config: ExperimentConfig, seed: int, epsilon: float | None = None,
                    noise: NoiseModel | None = None) -> ReservoirConfig:
    noise = config.noise if noise is None else noise
    return ReservoirConfig.create(
        n_qubits=config.n_qubits,
        in_dim=config.system.dim,
        epsilon=config.epsilon if epsilon is None else epsilon,
        variant=config.variant,
        seed=seed,
        beta_grid=config.beta_grid,
        noise=dc_replace(noise, seed=noise.seed + seed),
    )


def _train(rcfg: ReservoirConfig, split: DatasetSplit, seed: int,
           pure_probs: np.ndarray | None = None):
    """Drive, pick beta, fit the readout. Returns (w_out, r_last, beta).

    pure_probs, when given, are precomputed noise-free probabilities over
    washout+train for the state-free variant; sampling noise is applied
    on top with the seed's own stream.
    """
    traj = split.traj
    rng = make_rng(seed, STREAM_SHOTS, rcfg.noise.seed)
    if pure_probs is not None:
        if rcfg.noise.kind == qcore.NOISE_SAMPLING:
            probs = qcore.sample_shots(pure_probs, rcfg.noise.shots, rng)
        else:
            probs = pure_probs
        eps = rcfg.epsilon
        n_wash = len(split.washout)
        r = np.zeros(rcfg.n_r)
        r_mat = np.empty((rcfg.n_r, len(split.train)))
        for t in range(probs.shape[0]):
            r = (1.0 - eps) * r + eps * probs[t]
            if t >= n_wash:
                r_mat[:, t - n_wash] = r
        r_last = r
    else:
        r_mat, r_last = reservoir.open_loop_run(split, rcfg, rng)
    targets = traj.states[split.train.start + 1 : split.train.stop + 1]
    beta = reservoir.select_beta(r_mat, targets, rcfg)
    w_out = reservoir.train_readout(r_mat, targets, beta)
    return w_out, r_last, beta


def _closed_loop_spectrum(
    config: ExperimentConfig,
    rcfg: ReservoirConfig,
    w_out: np.ndarray,
    r_init: np.ndarray,
    split: DatasetSplit,
    seed: int,
    save_history: bool,
    clamp: bool = False,
):
    lt = split.traj.lt_steps
    n_skip = int(round(config.spectrum_skip_lt * lt))
    n_steps = n_skip + int(round(config.spectrum_lt * lt))
    rng = make_rng(seed, STREAM_SPECTRUM, rcfg.noise.seed)
    # Spectrum runs evolve the free autonomous map: the forecast clamp
    # fires on <1% of steps yet measurably deflates the two leading
    # exponents, and the tangent diagnostics are defined for the smooth map.
    # clamp=True is the sweep fallback for models whose free map escapes.
    advance, jac = tangent.closed_loop_system(
        rcfg, w_out, split.scaler, rng, clamp=clamp
    )
    w_t = np.ascontiguousarray(w_out.T)
    escapes = 0

    def checked_advance(r):
        nonlocal escapes
        u_raw = split.scaler.scale(w_t @ r)
        if np.any(u_raw < reservoir.SCALED_ESCAPE_MIN) or np.any(
            u_raw > reservoir.SCALED_ESCAPE_MAX
        ):
            escapes += 1
        return advance(r)

    out = stability.lyapunov_spectrum(
        jacobian_provider=jac,
        state_advancer=checked_advance,
        state0=r_init,
        d_t=config.tangent_dim,
        n_steps=n_steps,
        n_skip=n_skip,
        dt=split.traj.dt,
        seed=seed,
        save_history=save_history,
    )
    if escapes and not clamp:
        raise reservoir.ForecastDivergedError(
            message=f"autonomous run left the trained input range on "
            f"{escapes} of {n_steps} steps; its spectrum would describe "
            f"an artifact, not the model"
        )
    return out


def run_single_seed(
    config: ExperimentConfig,
    seed: int,
    split: DatasetSplit,
    pure_probs: np.ndarray | None = None,
) -> SeedResult:
    """Full train/forecast/stability pipeline for one ensemble member."""
    traj = split.traj
    out = SeedResult(seed=seed)
    try:
        rcfg = _make_reservoir(config, seed)
        w_out, r_last, beta = _train(rcfg, split, seed, pure_probs)
        out.beta = beta
        if len(split.test) > 0:
            preds, _ = reservoir.closed_loop_run(
                r_last,
                w_out,
                rcfg,
                len(split.test),
                split.scaler,
                make_rng(seed, STREAM_FORECAST, rcfg.noise.seed),
            )
            truth = traj.states[split.test.start : split.test.stop]
            out.vpt_lt = reservoir.vpt(preds, truth, traj.lt_steps)
        result, history = _closed_loop_spectrum(
            config, rcfg, w_out, r_last, split, seed, save_history=config.clv
        )
        out.exponents = result.exponents
        out.ky = result.ky_dimension
        cles = stability.conditional_les(
            rcfg, split, [rcfg.epsilon], d_t=config.tangent_dim, seed=seed
        )
        out.max_cle = cles[0].max_cle
        if config.clv:
            lt = traj.lt_steps
            n_tr = int(round(config.clv_transient_lt * lt))
            clvs = stability.clv_backward(history, n_tr, n_tr, seed=seed)
            out.clv_angle_samples = clvs.angles
    except Exception as exc:  # per-seed isolation: record, let the ensemble continue
        out.error = f"{type(exc).__name__}: {exc}"
    return out


# --- ensemble experiment ----------------------------------------------------


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    reference_exponents: np.ndarray
    reference_ky: float
    lambda_star: float
    per_seed: list[SeedResult]
    exponents_mean: np.ndarray | None
    exponents_std: np.ndarray | None
    ky_mean: float | None
    ky_std: float | None
    max_cle_mean: float | None
    vpt_mean: float | None
    gs: stability.GSVerdict | None
    clv_target_samples: np.ndarray | None = None

    @property
    def n_failed(self) -> int:
        return sum(1 for s in self.per_seed if s.error is not None)

    @property
    def all_succeeded(self) -> bool:
        return self.n_failed == 0


def _pool_map(fn, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def run_experiment(config: ExperimentConfig, workers: int = 1) -> ExperimentReport:
    """Run the ensemble and aggregate. Fails only if every seed fails."""
    traj, split = prepare_data(config)
    ref = reference_spectrum(config, n_exponents=config.system.dim)
    lambda_star = float(ref[-1])
    results = _pool_map(
        lambda s: run_single_seed(config, s, split), list(config.seeds), workers
    )
    ok = [r for r in results if r.error is None]
    if not ok:
        msgs = "; ".join(f"seed {r.seed}: {r.error}" for r in results)
        raise RuntimeError(f"all seeds failed: {msgs}")
    exps = np.stack([r.exponents for r in ok])
    kys = np.array([r.ky for r in ok])
    cles = np.array([r.max_cle for r in ok])
    vpts = np.array([r.vpt_lt for r in ok if r.vpt_lt is not None])
    clv_target = None
    if config.clv:
        clv_target = _reference_clv_angles(config, split)
    return ExperimentReport(
        config=config,
        reference_exponents=ref,
        reference_ky=stability.kaplan_yorke(ref),
        lambda_star=lambda_star,
        per_seed=results,
        exponents_mean=exps.mean(axis=0),
        exponents_std=exps.std(axis=0),
        ky_mean=float(np.nanmean(kys)) if np.any(np.isfinite(kys)) else None,
        ky_std=float(np.nanstd(kys)) if np.any(np.isfinite(kys)) else None,
        max_cle_mean=float(cles.mean()),
        vpt_mean=float(vpts.mean()) if vpts.size else None,
        gs=stability.classify_gs(float(cles.mean()), lambda_star),
        clv_target_samples=clv_target,
    )


def _reference_clv_angles(config: ExperimentConfig, split: DatasetSplit) -> np.ndarray:
    """Pairwise CLV angle samples of the drive over a matching window."""
    spec = config.system
    traj = split.traj
    lt = traj.lt_steps
    n_skip = int(round(config.spectrum_skip_lt * lt))
    n_steps = n_skip + int(round(config.spectrum_lt * lt))
    _, hist = stability.lyapunov_spectrum(
        jacobian_provider=lambda x: dynamics.rk4_jacobian(spec, x, traj.dt),
        state_advancer=lambda x: dynamics.rk4_step(spec, x, traj.dt),
        state0=traj.states[0],
        d_t=config.tangent_dim,
        n_steps=n_steps,
        n_skip=n_skip,
        dt=traj.dt,
        seed=config.data_seed,
        save_history=True,
    )
    n_tr = int(round(config.clv_transient_lt * lt))
    clvs = stability.clv_backward(hist, n_tr, n_tr, seed=config.data_seed)
    return clvs.angles


# --- sweeps -----------------------------------------------------------------


@dataclass
class SweepPoint:
    label: dict
    n_ok: int
    n_failed: int
    exponents_mean: np.ndarray | None
    exponents_std: np.ndarray | None
    max_cle_mean: float | None
    vpt_mean: float | None
    vpt_std: float | None
    ky_mean: float | None
    lambda1_err_mean: float | None = None
    lambda1_err_std: float | None = None


@dataclass
class SweepReport:
    config: ExperimentConfig
    reference_exponents: np.ndarray
    points: list[SweepPoint]

    @property
    def all_succeeded(self) -> bool:
        return all(p.n_failed == 0 for p in self.points)


def _aggregate_point(label: dict, results: list[SeedResult], ref_lambda1: float) -> SweepPoint:
    ok = [r for r in results if r.error is None]
    point = SweepPoint(
        label=label,
        n_ok=len(ok),
        n_failed=len(results) - len(ok),
        exponents_mean=None,
        exponents_std=None,
        max_cle_mean=None,
        vpt_mean=None,
        vpt_std=None,
        ky_mean=None,
    )
    if not ok:
        return point
    exps = np.stack([r.exponents for r in ok])
    point.exponents_mean = exps.mean(axis=0)
    point.exponents_std = exps.std(axis=0)
    cles = [r.max_cle for r in ok if r.max_cle is not None]
    point.max_cle_mean = float(np.mean(cles)) if cles else None
    vpts = [r.vpt_lt for r in ok if r.vpt_lt is not None]
    if vpts:
        point.vpt_mean = float(np.mean(vpts))
        point.vpt_std = float(np.std(vpts))
    kys = [r.ky for r in ok if r.ky is not None and np.isfinite(r.ky)]
    point.ky_mean = float(np.mean(kys)) if kys else None
    errs = np.abs(exps[:, 0] - ref_lambda1)
    point.lambda1_err_mean = float(errs.mean())
    point.lambda1_err_std = float(errs.std())
    return point


def _sweep_seed_run(config, split, seed, epsilon=None, noise=None,
                    pure_probs=None, with_cle=True) -> SeedResult:
    """One (sweep point, seed) pipeline; epsilon/noise override the config."""
    out = SeedResult(seed=seed)
    try:
        rcfg = _make_reservoir(config, seed, epsilon=epsilon, noise=noise)
        w_out, r_last, beta = _train(rcfg, split, seed, pure_probs)
        out.beta = beta
        if len(split.test) > 0:
            preds, _ = reservoir.closed_loop_run(
                r_last, w_out, rcfg, len(split.test), split.scaler,
                make_rng(seed, STREAM_FORECAST, rcfg.noise.seed),
            )
            truth = split.traj.states[split.test.start : split.test.stop]
            out.vpt_lt = reservoir.vpt(preds, truth, split.traj.lt_steps)
        try:
            result, _ = _closed_loop_spectrum(
                config, rcfg, w_out, r_last, split, seed, False
            )
        except reservoir.ForecastDivergedError:
            # a model this wrong has no free-map attractor to measure; the
            # guarded map still has a finite spectrum whose lambda1 error
            # quantifies the failure instead of blanking the sweep point
            result, _ = _closed_loop_spectrum(
                config, rcfg, w_out, r_last, split, seed, False, clamp=True
            )
            out.guarded_spectrum = True
        out.exponents = result.exponents
        out.ky = result.ky_dimension
        if with_cle:
            cles = stability.conditional_les(
                rcfg, split, [rcfg.epsilon], d_t=config.tangent_dim, seed=seed
            )
            out.max_cle = cles[0].max_cle
    except Exception as exc:
        out.error = f"{type(exc).__name__}: {exc}"
    return out


def _shared_drive_probs(config: ExperimentConfig, split: DatasetSplit, seed: int,
                        noise: NoiseModel | None = None) -> np.ndarray | None:
    """Per-seed drive probabilities reusable across leak rates (state-free only).

    Noise-free and sampling configs share the statevector probabilities
    (sampling draws happen later, per point); channel configs share the
    noisy probabilities, which do not depend on the leak rate either.
    """
    if config.variant != reservoir.RFQRC:
        return None
    noise = config.noise if noise is None else noise
    rcfg = _make_reservoir(config, seed, noise=noise)
    raw = split.traj.states[split.washout.start : split.train.stop]
    inputs = np.clip(
        split.scaler.scale(raw), reservoir.SCALED_INPUT_MIN, reservoir.SCALED_INPUT_MAX
    )
    if rcfg.noise.is_channel:
        return reservoir.batch_probabilities(rcfg, inputs)
    pure_cfg = dc_replace(rcfg, noise=NoiseModel())
    return reservoir.batch_probabilities(pure_cfg, inputs)


def sweep_leak_rate(
    config: ExperimentConfig, epsilons, workers: int = 1
) -> SweepReport:
    """Ensemble diagnostics per leak rate; per-point failures are recorded."""
    eps_list = [float(e) for e in epsilons]
    if not eps_list:
        raise ValueError("need at least one epsilon")
    traj, split = prepare_data(config)
    ref = reference_spectrum(config, n_exponents=config.system.dim)
    shared = {s: _shared_drive_probs(config, split, s) for s in config.seeds}

    def run_point(eps: float) -> SweepPoint:
        results = _pool_map(
            lambda s: _sweep_seed_run(config, split, s, epsilon=eps, pure_probs=shared[s]),
            list(config.seeds),
            workers,
        )
        return _aggregate_point({"epsilon": eps}, results, float(ref[0]))

    return SweepReport(config=config, reference_exponents=ref,
                       points=[run_point(e) for e in eps_list])


def sweep_shots(
    config: ExperimentConfig, shot_counts, epsilons=None, workers: int = 1
) -> SweepReport:
    """Leading-exponent error under finite sampling, per (shots, leak rate)."""
    shots_list = [int(s) for s in shot_counts]
    if not shots_list or any(s < 1 for s in shots_list):
        raise ValueError("shot counts must be positive")
    eps_list = [float(e) for e in (epsilons if epsilons is not None else [config.epsilon])]
    traj, split = prepare_data(config)
    ref = reference_spectrum(config, n_exponents=config.system.dim)
    shared = {s: _shared_drive_probs(config, split, s) for s in config.seeds}
    points = []
    for shots in shots_list:
        noise = NoiseModel.sampling(shots, seed=config.noise.seed + shots)
        for eps in eps_list:
            results = _pool_map(
                lambda s: _sweep_seed_run(
                    config, split, s, epsilon=eps, noise=noise, pure_probs=shared[s]
                ),
                list(config.seeds),
                workers,
            )
            points.append(
                _aggregate_point({"shots": shots, "epsilon": eps}, results, float(ref[0]))
            )
    return SweepReport(config=config, reference_exponents=ref, points=points)


def sweep_channel_noise(
    config: ExperimentConfig, kind: str, intensities, epsilons=None, workers: int = 1
) -> SweepReport:
    """Leading-exponent error under per-gate channel noise, per (p, leak rate)."""
    if kind not in (qcore.NOISE_DEPOLARIZING, qcore.NOISE_AMPLITUDE_DAMPING):
        raise ValueError(f"unknown channel kind {kind!r}")
    p_list = [float(p) for p in intensities]
    if not p_list:
        raise ValueError("need at least one intensity")
    eps_list = [float(e) for e in (epsilons if epsilons is not None else [config.epsilon])]
    traj, split = prepare_data(config)
    ref = reference_spectrum(config, n_exponents=config.system.dim)
    points = []
    for p in p_list:
        noise = NoiseModel(kind=kind, p=p, seed=config.noise.seed)
        # channel probabilities do not depend on the leak rate: share per seed
        shared = {s: _shared_drive_probs(config, split, s, noise=noise)
                  for s in config.seeds}
        for eps in eps_list:
            results = _pool_map(
                lambda s: _sweep_seed_run(
                    config, split, s, epsilon=eps, noise=noise, pure_probs=shared[s]
                ),
                list(config.seeds),
                workers,
            )
            points.append(
                _aggregate_point({"kind": kind, "p": p, "epsilon": eps}, results, float(ref[0]))
            )
    return SweepReport(config=config, reference_exponents=ref, points=points)


# --- report emission --------------------------------------------------------


def _fmt(x) -> str:
    if x is None:
        return ""
    return f"{float(x):.17g}"


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _write_csv(path: Path, header: str, rows: list[str]) -> None:
    _atomic_write(path, "\n".join([header] + rows) + "\n")


def emit_report(report: ExperimentReport, out_dir: str | Path) -> list[Path]:
    """Write the experiment's CSV/JSON artifacts; returns the paths."""
    out = Path(out_dir)
    name = report.config.name
    written = []

    d_t = report.config.tangent_dim
    ref = list(report.reference_exponents) + [None] * (d_t - len(report.reference_exponents))
    rows = []
    for i in range(d_t):
        mean = report.exponents_mean[i] if report.exponents_mean is not None else None
        std = report.exponents_std[i] if report.exponents_std is not None else None
        rows.append(f"{i + 1},{_fmt(ref[i])},{_fmt(mean)},{_fmt(std)}")
    path = out / f"{name}_spectrum.csv"
    _write_csv(path, "exponent_index,target,inferred_mean,inferred_std", rows)
    written.append(path)

    lam_cols = ",".join(f"lambda_{i + 1}" for i in range(d_t))
    rows = []
    for s in sorted(report.per_seed, key=lambda r: r.seed):
        if s.error is not None:
            lam = "," * (d_t - 1)
            rows.append(f"{s.seed},failed,,,,,{lam}")
            continue
        lam = ",".join(_fmt(v) for v in s.exponents)
        rows.append(
            f"{s.seed},ok,{_fmt(s.beta)},{_fmt(s.vpt_lt)},{_fmt(s.ky)},{_fmt(s.max_cle)},{lam}"
        )
    path = out / f"{name}_per_seed.csv"
    _write_csv(path, f"seed,status,beta,vpt_lt,ky,max_cle,{lam_cols}", rows)
    written.append(path)

    summary = {
        "config": report.config.to_json_dict(),
        "reference_exponents": [float(v) for v in report.reference_exponents],
        "reference_ky": report.reference_ky,
        "lambda_star": report.lambda_star,
        "exponents_mean": [float(v) for v in report.exponents_mean],
        "exponents_std": [float(v) for v in report.exponents_std],
        "ky_mean": report.ky_mean,
        "ky_std": report.ky_std,
        "max_cle_mean": report.max_cle_mean,
        "vpt_mean": report.vpt_mean,
        "gs_class": report.gs.gs_class if report.gs else None,
        "n_failed": report.n_failed,
        "failures": {
            str(s.seed): s.error for s in report.per_seed if s.error is not None
        },
    }
    path = out / f"{name}_summary.json"
    _atomic_write(path, json.dumps(summary, sort_keys=True, indent=2) + "\n")
    written.append(path)

    if report.config.clv:
        model = np.concatenate(
            [s.clv_angle_samples for s in report.per_seed
             if s.error is None and s.clv_angle_samples is not None]
        )
        pairs = [(i, j) for i in range(d_t) for j in range(i + 1, d_t)]
        written.append(_emit_angle_pdfs(out / f"{name}_clv_angle_pdfs.csv", model, pairs))
        if report.clv_target_samples is not None:
            written.append(
                _emit_angle_pdfs(
                    out / f"{name}_clv_angle_pdfs_target.csv",
                    report.clv_target_samples,
                    pairs,
                )
            )
    return written


def _emit_angle_pdfs(path: Path, samples: np.ndarray, pairs) -> Path:
    edges = np.linspace(0.0, 90.0, 91)
    rows = []
    for k, (i, j) in enumerate(pairs):
        dens, _ = np.histogram(samples[:, k], bins=edges, density=True)
        for b in range(90):
            rows.append(f"{i + 1}-{j + 1},{_fmt(edges[b])},{_fmt(dens[b])}")
    _write_csv(path, "pair,bin_left_deg,density", rows)
    return path


def emit_sweep(report: SweepReport, out_dir: str | Path, stem: str) -> list[Path]:
    """Write sweep results as one CSV plus a JSON summary."""
    out = Path(out_dir)
    label_keys = sorted({k for p in report.points for k in p.label})
    d_t = report.config.tangent_dim
    lam_cols = ",".join(f"lambda_{i + 1}_mean" for i in range(d_t))
    header = (
        ",".join(label_keys)
        + f",n_ok,n_failed,max_cle_mean,vpt_mean,vpt_std,ky_mean,"
        + f"lambda1_err_mean,lambda1_err_std,{lam_cols}"
    )
    rows = []
    for p in report.points:
        label = ",".join(_fmt(p.label[k]) if isinstance(p.label.get(k), float)
                         else str(p.label.get(k, "")) for k in label_keys)
        lams = (
            ",".join(_fmt(v) for v in p.exponents_mean)
            if p.exponents_mean is not None
            else "," * (d_t - 1)
        )
        rows.append(
            f"{label},{p.n_ok},{p.n_failed},{_fmt(p.max_cle_mean)},{_fmt(p.vpt_mean)},"
            f"{_fmt(p.vpt_std)},{_fmt(p.ky_mean)},{_fmt(p.lambda1_err_mean)},"
            f"{_fmt(p.lambda1_err_std)},{lams}"
        )
    path = out / f"{stem}.csv"
    _write_csv(path, header, rows)
    summary = {
        "config": report.config.to_json_dict(),
        "reference_exponents": [float(v) for v in report.reference_exponents],
        "n_points": len(report.points),
        "n_failed_points": sum(1 for p in report.points if p.n_failed > 0),
    }
    spath = out / f"{stem}_summary.json"
    _atomic_write(spath, json.dumps(summary, sort_keys=True, indent=2) + "\n")
    return [path, spath]


# --- presets ----------------------------------------------------------------


def config_lorenz63(**overrides) -> ExperimentConfig:
    """Stock three-variable configuration: 7 qubits, leak 0.21."""
    base = dict(
        name="lorenz63",
        system=dynamics.lorenz63(),
        dt=0.01,
        washout_lt=5.0,
        train_lt=20.0,
        test_lt=10.0,
        n_qubits=7,
        epsilon=0.21,
        spectrum_lt=50.0,
        seeds=tuple(range(10)),
    )
    base.update(overrides)
    return ExperimentConfig(**base)


def config_lorenz96_10(**overrides) -> ExperimentConfig:
    """Ten-variable cyclic configuration: 9 qubits, leak 0.15."""
    base = dict(
        name="lorenz96_10",
        system=dynamics.lorenz96(dim=10),
        dt=0.01,
        washout_lt=10.0,
        train_lt=200.0,
        test_lt=10.0,
        n_qubits=9,
        epsilon=0.15,
        input_range=(0.15, 0.40),
        spectrum_lt=60.0,
        seeds=tuple(range(10)),
    )
    base.update(overrides)
    return ExperimentConfig(**base)


def config_lorenz96_20(**overrides) -> ExperimentConfig:
    """Twenty-variable configuration: 13 qubits, leak 0.12. Heavy."""
    base = dict(
        name="lorenz96_20",
        system=dynamics.lorenz96(dim=20),
        dt=0.01,
        washout_lt=10.0,
        train_lt=200.0,
        test_lt=10.0,
        n_qubits=13,
        epsilon=0.12,
        input_range=(0.15, 0.40),
        spectrum_lt=60.0,
        seeds=tuple(range(10)),
    )
    base.update(overrides)
    return ExperimentConfig(**base)


def config_smoke(**overrides) -> ExperimentConfig:
    """Three-qubit short run for CI and determinism checks."""
    base = dict(
        name="smoke",
        system=dynamics.lorenz63(),
        washout_lt=2.0,
        train_lt=5.0,
        test_lt=2.0,
        n_qubits=3,
        epsilon=0.3,
        spectrum_lt=5.0,
        spectrum_skip_lt=1.0,
        clv=True,
        clv_transient_lt=1.0,
        reference_lt=20.0,
        seeds=(0, 1),
    )
    base.update(overrides)
    return ExperimentConfig(**base)


_LEAK_GRID = (0.05, 0.1, 0.15, 0.21, 0.3, 0.4, 0.5, 0.7, 0.9, 1.0)
_SHOT_GRID = (1000, 5000, 10000, 25000, 50000)
_CHANNEL_GRID = (0.001, 0.01, 0.05, 0.1)

PRESETS = {
    "table3-lorenz63-spectrum": "Ensemble spectrum of the trained reservoir vs the drive",
    "table5-ky-dimensions": "Kaplan-Yorke dimensions for all stock systems",
    "fig3-clv-pdfs": "CLV angle PDFs, inferred vs ground truth",
    "fig4-clv-angle-series": "CLV angles along the attractor, seed 0 vs truth",
    "fig5-les-vs-leak": "Closed-loop exponents across the leak-rate grid",
    "fig6-les-vs-maxcle": "Same sweep keyed by the conditional exponent",
    "fig7-cle-vpt-variants": "Max CLE and VPT vs leak for both reservoir variants",
    "fig8-shot-noise": "Leading-exponent error under finite sampling",
    "fig9-channel-noise": "Leading-exponent error under per-gate channels",
    "appc-lorenz96-leak": "Leak-rate sweep on the ten-variable system",
    "appd-qrc-cle": "Conditional exponents of the recurrent variant vs leak",
    "smoke": "Tiny deterministic end-to-end run",
}


def run_preset(
    name: str,
    out_dir: str | Path,
    seeds: tuple[int, ...] | None = None,
    extended: bool = False,
    workers: int = 1,
) -> bool:
    """Run one named preset and emit its artifacts. True iff nothing failed."""
    out = Path(out_dir)
    ov = {"seeds": seeds} if seeds else {}
    if name == "table3-lorenz63-spectrum":
        report = run_experiment(config_lorenz63(**ov), workers)
        emit_report(report, out)
        return report.all_succeeded
    if name == "table5-ky-dimensions":
        configs = [config_lorenz63(**ov), config_lorenz96_10(**ov)]
        if extended:
            configs.append(config_lorenz96_20(**ov))
        rows = []
        ok = True
        for cfg in configs:
            report = run_experiment(cfg, workers)
            emit_report(report, out)
            ok = ok and report.all_succeeded
            rows.append(
                f"{cfg.name},{_fmt(report.reference_ky)},{_fmt(report.ky_mean)},"
                f"{_fmt(report.ky_std)},"
                f"{_fmt(100.0 * abs(report.ky_mean - report.reference_ky) / report.reference_ky)}"
            )
        _write_csv(
            out / "table5_ky.csv",
            "system,target_ky,inferred_ky_mean,inferred_ky_std,pct_error",
            rows,
        )
        return ok
    if name == "fig3-clv-pdfs":
        report = run_experiment(config_lorenz63(name="lorenz63_clv", clv=True, **ov), workers)
        emit_report(report, out)
        return report.all_succeeded
    if name == "fig4-clv-angle-series":
        return _preset_angle_series(out, ov, workers)
    if name in ("fig5-les-vs-leak", "fig6-les-vs-maxcle"):
        cfg = config_lorenz63(name="lorenz63_leak", **ov)
        report = sweep_leak_rate(cfg, _LEAK_GRID, workers)
        emit_sweep(report, out, "lorenz63_leak_sweep")
        return report.all_succeeded
    if name == "fig7-cle-vpt-variants":
        ok = True
        for variant in (reservoir.RFQRC, reservoir.QRC):
            cfg = config_lorenz63(name=f"lorenz63_{variant}", variant=variant, **ov)
            report = sweep_leak_rate(cfg, _LEAK_GRID, workers)
            emit_sweep(report, out, f"lorenz63_{variant}_leak_sweep")
            ok = ok and report.all_succeeded
        return ok
    if name == "fig8-shot-noise":
        cfg = config_lorenz63(
            name="lorenz63_shots", n_qubits=8, seeds=seeds or tuple(range(5))
        )
        report = sweep_shots(cfg, _SHOT_GRID, epsilons=(0.1, 0.2, 0.3, 0.4, 0.6),
                             workers=workers)
        emit_sweep(report, out, "lorenz63_shots_sweep")
        return report.all_succeeded
    if name == "fig9-channel-noise":
        ok = True
        for kind in (qcore.NOISE_DEPOLARIZING, qcore.NOISE_AMPLITUDE_DAMPING):
            cfg = config_lorenz63(
                name=f"lorenz63_{kind}", seeds=seeds or tuple(range(3))
            )
            report = sweep_channel_noise(
                cfg, kind, _CHANNEL_GRID, epsilons=(0.05, 0.1, 0.21, 0.3), workers=workers
            )
            emit_sweep(report, out, f"lorenz63_{kind}_sweep")
            ok = ok and report.all_succeeded
        return ok
    if name == "appc-lorenz96-leak":
        cfg = config_lorenz96_10(name="lorenz96_10_leak", **ov)
        report = sweep_leak_rate(cfg, (0.05, 0.1, 0.15, 0.3, 0.5), workers)
        emit_sweep(report, out, "lorenz96_10_leak_sweep")
        return report.all_succeeded
    if name == "appd-qrc-cle":
        return _preset_qrc_cle(out, ov, workers)
    if name == "smoke":
        report = run_experiment(config_smoke(**ov), workers)
        emit_report(report, out)
        return report.all_succeeded
    raise ValueError(f"unknown preset {name!r}; known: {', '.join(sorted(PRESETS))}")


def _preset_angle_series(out: Path, ov: dict, workers: int) -> bool:
    """CLV angle time series (seed 0) next to the drive's own series."""
    cfg = config_lorenz63(name="lorenz63_clv_series", clv=True,
                          seeds=(ov.get("seeds") or (0,))[:1])
    traj, split = prepare_data(cfg)
    result = run_single_seed(cfg, cfg.seeds[0], split)
    if result.error is not None:
        return False
    target = _reference_clv_angles(cfg, split)
    n = min(result.clv_angle_samples.shape[0], target.shape[0])
    pairs = [(i, j) for i in range(cfg.tangent_dim) for j in range(i + 1, cfg.tangent_dim)]
    header = "step," + ",".join(
        f"inferred_{i + 1}_{j + 1}" for i, j in pairs
    ) + "," + ",".join(f"target_{i + 1}_{j + 1}" for i, j in pairs)
    rows = []
    for t in range(n):
        inf = ",".join(_fmt(v) for v in result.clv_angle_samples[t])
        tgt = ",".join(_fmt(v) for v in target[t])
        rows.append(f"{t},{inf},{tgt}")
    _write_csv(out / "lorenz63_clv_angle_series.csv", header, rows)
    return True


def _preset_qrc_cle(out: Path, ov: dict, workers: int) -> bool:
    """Conditional exponents of both variants across the leak grid."""
    seeds = ov.get("seeds") or (0, 1, 2)
    cfg = config_lorenz63(name="lorenz63_qrc_cle", variant=reservoir.QRC, seeds=seeds)
    traj, split = prepare_data(cfg)
    rows = []
    for eps in _LEAK_GRID:
        per_seed = []
        for seed in seeds:
            rcfg = _make_reservoir(cfg, seed, epsilon=eps)
            res = stability.conditional_les(rcfg, split, [eps], seed=seed)
            per_seed.append(res[0].max_cle)
        law = np.log(1.0 - eps) / cfg.dt if eps < 1.0 else -np.inf
        rows.append(
            f"{_fmt(eps)},{_fmt(np.mean(per_seed))},{_fmt(np.std(per_seed))},{_fmt(law)}"
        )
    _write_csv(
        out / "lorenz63_qrc_cle.csv",
        "epsilon,qrc_max_cle_mean,qrc_max_cle_std,rfqrc_max_cle_exact",
        rows,
    )
    return True
