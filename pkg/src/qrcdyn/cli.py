"""Command-line front end.

Subcommands cover the full workflow: data generation, training,
closed-loop forecasting, Lyapunov/conditional/CLV diagnostics, the
three parameter sweeps, and named reproduction presets. Every command
exits 0 only if all requested seeds succeeded.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace as dc_replace
from pathlib import Path

import numpy as np

from . import dynamics, harness, qcore, reservoir, stability
from .seeding import STREAM_FORECAST, STREAM_SHOTS, make_rng

_STOCK = {
    "lorenz63": harness.config_lorenz63,
    "lorenz96_10": harness.config_lorenz96_10,
    "lorenz96_20": harness.config_lorenz96_20,
    "smoke": harness.config_smoke,
}


def _parse_seeds(text: str) -> tuple[int, ...]:
    """Accepts '0,1,5' and '0-9' (inclusive) and mixtures of both."""
    seeds: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part[1:]:
            lo, hi = part.split("-", 1)
            seeds.extend(range(int(lo), int(hi) + 1))
        elif part:
            seeds.append(int(part))
    if not seeds:
        raise argparse.ArgumentTypeError("empty seed list")
    return tuple(seeds)


def _parse_floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(",") if x.strip())


def _parse_ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None,
                   help="experiment config JSON; overrides --stock")
    p.add_argument("--stock", choices=sorted(_STOCK), default="lorenz63",
                   help="built-in configuration to start from")
    p.add_argument("--out", type=Path, default=Path("results"),
                   help="output directory (or file, where noted)")
    p.add_argument("--seeds", type=_parse_seeds, default=None,
                   help="ensemble seeds, e.g. 0-9 or 0,3,7")
    p.add_argument("--extended", action="store_true",
                   help="include the heavy twenty-variable runs")
    p.add_argument("--workers", type=int, default=1,
                   help="bounded worker pool for ensemble members")


def _load_config(args) -> harness.ExperimentConfig:
    if args.config is not None:
        cfg = harness.load_config(args.config)
    else:
        cfg = _STOCK[args.stock]()
    if getattr(args, "seeds", None):
        cfg = dc_replace(cfg, seeds=args.seeds)
    return cfg


def _cmd_gen_data(args) -> int:
    if args.system == "lorenz63":
        spec = dynamics.lorenz63()
    else:
        spec = dynamics.lorenz96(dim=args.dim, forcing=args.forcing)
    traj = dynamics.generate_trajectory(
        spec, args.dt, args.steps, n_discard=args.discard,
        seed=args.seed, lambda1=args.lambda1,
    )
    out = args.out if args.out.suffix == ".csv" else args.out / "trajectory.csv"
    dynamics.save_trajectory(traj, spec, out, seed=args.seed)
    print(f"wrote {out} ({traj.n_steps} steps, dim {traj.dim})")
    return 0


def _cmd_train(args) -> int:
    cfg = _load_config(args)
    seeds = args.seeds or cfg.seeds[:1]
    traj, split = harness.prepare_data(cfg)
    failures = 0
    for seed in seeds:
        rcfg = harness._make_reservoir(cfg, seed)
        try:
            w_out, r_last, beta = harness._train(rcfg, split, seed)
        except Exception as exc:
            print(f"seed {seed}: FAILED ({type(exc).__name__}: {exc})")
            failures += 1
            continue
        prefix = args.out / f"{cfg.name}_seed{seed}"
        reservoir.save_model(prefix, rcfg, split.scaler, w_out, r_last)
        print(f"seed {seed}: beta={beta:g} -> {prefix}.json/.bin")
    return 1 if failures else 0


def _cmd_forecast(args) -> int:
    rcfg, scaler, w_out, r_state = reservoir.load_model(args.model)
    traj, spec, _seed = dynamics.load_trajectory(args.data)
    lt = traj.lt_steps
    n_wash = int(round(args.washout_lt * lt))
    n_fc = int(round(args.lt * lt))
    if n_wash >= traj.n_steps:
        print("data shorter than the washout window", file=sys.stderr)
        return 1
    rng = make_rng(args.seed, STREAM_SHOTS, rcfg.noise.seed)
    r = np.zeros(rcfg.n_r)
    drive = np.clip(scaler.scale(traj.states[:n_wash]),
                    reservoir.SCALED_INPUT_MIN, reservoir.SCALED_INPUT_MAX)
    for t in range(n_wash):
        r = reservoir.reservoir_step(r, drive[t], rcfg, rng)
    try:
        preds, _ = reservoir.closed_loop_run(
            r, w_out, rcfg, n_fc, scaler,
            make_rng(args.seed, STREAM_FORECAST, rcfg.noise.seed),
        )
    except reservoir.ForecastDivergedError as exc:
        print(f"forecast diverged at step {exc.step}", file=sys.stderr)
        return 1
    out = args.out if args.out.suffix == ".csv" else args.out / "forecast.csv"
    cols = ",".join(f"x{i + 1}" for i in range(preds.shape[1]))
    rows = [
        f"{(n_wash + k) * traj.dt:.17g}," + ",".join(f"{v:.17g}" for v in preds[k])
        for k in range(preds.shape[0])
    ]
    harness._write_csv(out, f"t,{cols}", rows)
    print(f"wrote {out}")
    if n_wash + n_fc <= traj.n_steps:
        truth = traj.states[n_wash : n_wash + n_fc]
        print(f"vpt: {reservoir.vpt(preds, truth, lt):.3f} Lyapunov times")
    return 0


def _cmd_lyapunov(args) -> int:
    cfg = _load_config(args)
    if args.truth:
        ref = harness.reference_spectrum(cfg, n_exponents=cfg.system.dim)
        out = args.out if args.out.suffix == ".csv" else (
            args.out / f"{cfg.name}_reference_spectrum.csv")
        stability.save_spectrum_csv(ref, out)
        ky = stability.kaplan_yorke(ref)
        print(f"wrote {out}; exponents {np.array2string(ref, precision=4)}; ky={ky:.4f}")
        return 0
    report = harness.run_experiment(cfg, workers=args.workers)
    harness.emit_report(report, args.out)
    print(
        f"{cfg.name}: mean exponents "
        f"{np.array2string(report.exponents_mean, precision=4)}, "
        f"ky={report.ky_mean:.4f}, failures={report.n_failed}"
    )
    return 0 if report.all_succeeded else 1


def _cmd_cle(args) -> int:
    cfg = _load_config(args)
    eps_grid = args.epsilons or (cfg.epsilon,)
    traj, split = harness.prepare_data(cfg)
    ref = harness.reference_spectrum(cfg, n_exponents=cfg.system.dim)
    lambda_star = float(ref[-1])
    rows = []
    failures = 0
    for seed in cfg.seeds:
        rcfg = harness._make_reservoir(cfg, seed)
        try:
            results = stability.conditional_les(rcfg, split, eps_grid, seed=seed)
        except Exception as exc:
            print(f"seed {seed}: FAILED ({type(exc).__name__}: {exc})")
            failures += 1
            continue
        for res in results:
            verdict = stability.classify_gs(res.max_cle, lambda_star)
            rows.append(
                f"{res.epsilon:.17g},{seed},{res.max_cle:.17g},{verdict.gs_class}"
            )
    out = args.out / f"{cfg.name}_cle.csv"
    harness._write_csv(out, "epsilon,seed,max_cle,gs_class", rows)
    print(f"wrote {out} (lambda_star={lambda_star:.4f})")
    return 1 if failures else 0


def _cmd_clv(args) -> int:
    cfg = dc_replace(_load_config(args), clv=True)
    report = harness.run_experiment(cfg, workers=args.workers)
    harness.emit_report(report, args.out)
    print(f"{cfg.name}: CLV angle PDFs written, failures={report.n_failed}")
    return 0 if report.all_succeeded else 1


def _cmd_sweep_leak(args) -> int:
    cfg = _load_config(args)
    eps = args.epsilons or harness._LEAK_GRID
    report = harness.sweep_leak_rate(cfg, eps, workers=args.workers)
    harness.emit_sweep(report, args.out, f"{cfg.name}_leak_sweep")
    print(f"{cfg.name}: {len(report.points)} leak points written")
    return 0 if report.all_succeeded else 1


def _cmd_sweep_shots(args) -> int:
    cfg = _load_config(args)
    shots = args.shots or harness._SHOT_GRID
    report = harness.sweep_shots(cfg, shots, epsilons=args.epsilons, workers=args.workers)
    harness.emit_sweep(report, args.out, f"{cfg.name}_shots_sweep")
    print(f"{cfg.name}: {len(report.points)} sampling points written")
    return 0 if report.all_succeeded else 1


def _cmd_sweep_noise(args) -> int:
    cfg = _load_config(args)
    ps = args.ps or harness._CHANNEL_GRID
    report = harness.sweep_channel_noise(
        cfg, args.kind, ps, epsilons=args.epsilons, workers=args.workers
    )
    harness.emit_sweep(report, args.out, f"{cfg.name}_{args.kind}_sweep")
    print(f"{cfg.name}: {len(report.points)} channel points written")
    return 0 if report.all_succeeded else 1


def _cmd_repro(args) -> int:
    ok = harness.run_preset(
        args.preset, args.out, seeds=args.seeds,
        extended=args.extended, workers=args.workers,
    )
    print(f"preset {args.preset}: {'ok' if ok else 'FAILED seeds present'}")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qrcdyn",
        description="Quantum reservoir computing diagnostics for chaotic systems",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="integrate a trajectory to CSV")
    p.add_argument("--system", choices=("lorenz63", "lorenz96"), default="lorenz63")
    p.add_argument("--dim", type=int, default=10, help="lorenz96 dimension")
    p.add_argument("--forcing", type=float, default=8.0)
    p.add_argument("--dt", type=float, default=0.01)
    p.add_argument("--steps", type=int, default=20000)
    p.add_argument("--discard", type=int, default=100000)
    p.add_argument("--seed", type=int, default=12345)
    p.add_argument("--lambda1", type=float, default=None)
    p.add_argument("--out", type=Path, default=Path("results"))
    p.set_defaults(func=_cmd_gen_data)

    p = sub.add_parser("train", help="fit readouts and save model files")
    _add_common(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("forecast", help="closed-loop forecast from a saved model")
    p.add_argument("--model", type=Path, required=True, help="model file prefix")
    p.add_argument("--data", type=Path, required=True, help="trajectory CSV")
    p.add_argument("--washout-lt", type=float, default=5.0)
    p.add_argument("--lt", type=float, default=10.0, help="forecast horizon")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("results"))
    p.set_defaults(func=_cmd_forecast)

    p = sub.add_parser("lyapunov", help="closed-loop spectrum ensemble (or --truth)")
    _add_common(p)
    p.add_argument("--truth", action="store_true",
                   help="only the reference spectrum of the drive")
    p.set_defaults(func=_cmd_lyapunov)

    p = sub.add_parser("cle", help="conditional exponents along the drive")
    _add_common(p)
    p.add_argument("--epsilons", type=_parse_floats, default=None)
    p.set_defaults(func=_cmd_cle)

    p = sub.add_parser("clv", help="covariant vector angle statistics")
    _add_common(p)
    p.set_defaults(func=_cmd_clv)

    p = sub.add_parser("sweep-leak", help="diagnostics across leak rates")
    _add_common(p)
    p.add_argument("--epsilons", type=_parse_floats, default=None)
    p.set_defaults(func=_cmd_sweep_leak)

    p = sub.add_parser("sweep-shots", help="diagnostics across shot counts")
    _add_common(p)
    p.add_argument("--shots", type=_parse_ints, default=None)
    p.add_argument("--epsilons", type=_parse_floats, default=None)
    p.set_defaults(func=_cmd_sweep_shots)

    p = sub.add_parser("sweep-noise", help="diagnostics across channel strengths")
    _add_common(p)
    p.add_argument("--kind", choices=(qcore.NOISE_DEPOLARIZING,
                                      qcore.NOISE_AMPLITUDE_DAMPING),
                   default=qcore.NOISE_DEPOLARIZING)
    p.add_argument("--ps", type=_parse_floats, default=None)
    p.add_argument("--epsilons", type=_parse_floats, default=None)
    p.set_defaults(func=_cmd_sweep_noise)

    p = sub.add_parser("repro", help="run a named reproduction preset")
    p.add_argument("preset", choices=sorted(harness.PRESETS))
    p.add_argument("--out", type=Path, default=Path("results"))
    p.add_argument("--seeds", type=_parse_seeds, default=None)
    p.add_argument("--extended", action="store_true")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=_cmd_repro)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
