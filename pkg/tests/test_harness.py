"""Experiment orchestration, artifact emission, and the CLI surface.

End-to-end pieces run on the three-qubit smoke configuration so the
whole file stays in CI time. Determinism checks compare emitted files
byte for byte.
"""

import json

import numpy as np
import pytest

from qrcdyn import cli, dynamics, harness
from qrcdyn.harness import (
    ExperimentConfig,
    config_lorenz63,
    config_lorenz96_10,
    config_lorenz96_20,
    config_smoke,
    load_config,
    prepare_data,
    reference_spectrum,
    run_experiment,
    save_config,
    sweep_leak_rate,
    sweep_shots,
)


def test_config_json_round_trip(tmp_path):
    cfg = config_lorenz96_10(seeds=(0, 3), d_t=5, clv=True)
    back = ExperimentConfig.from_json_dict(cfg.to_json_dict())
    assert back == cfg
    assert back.input_range == (0.15, 0.40)
    path = tmp_path / "cfg.json"
    save_config(cfg, path)
    assert load_config(path) == cfg


def test_config_validation():
    with pytest.raises(ValueError):
        config_smoke(seeds=())
    with pytest.raises(ValueError):
        config_smoke(dt=0.0)


def test_config_time_scales():
    assert config_lorenz63().lt_steps == 110
    assert config_lorenz96_10().lt_steps == 83
    assert config_lorenz96_20().lt_steps == 67
    assert config_lorenz63().tangent_dim == 3
    assert config_lorenz96_10(d_t=4).tangent_dim == 4


def test_prepare_data_windows_and_scaling():
    cfg = config_smoke()
    traj, split = prepare_data(cfg)
    lt = traj.lt_steps
    assert len(split.washout) == round(cfg.washout_lt * lt)
    assert len(split.train) == round(cfg.train_lt * lt)
    assert len(split.test) == round(cfg.test_lt * lt)
    # scaler is fit on the train window alone, onto the configured range
    train = traj.states[split.train.start : split.train.stop]
    scaled = split.scaler.scale(train)
    lo, hi = cfg.input_range
    assert np.allclose(scaled.min(axis=0), lo, atol=1e-12)
    assert np.allclose(scaled.max(axis=0), hi, atol=1e-12)
    # regeneration is deterministic
    traj2, split2 = prepare_data(cfg)
    assert np.array_equal(traj.states, traj2.states)
    assert np.array_equal(split.scaler.mins, split2.scaler.mins)


def test_prepare_data_narrow_input_range():
    cfg = config_smoke(input_range=(0.15, 0.40))
    traj, split = prepare_data(cfg)
    train = traj.states[split.train.start : split.train.stop]
    scaled = split.scaler.scale(train)
    assert scaled.min() >= 0.15 - 1e-12
    assert scaled.max() <= 0.40 + 1e-12


def test_reference_spectrum_deterministic():
    cfg = config_smoke()
    a = reference_spectrum(cfg, n_exponents=3)
    b = reference_spectrum(cfg, n_exponents=3)
    assert np.array_equal(a, b)
    assert a.shape == (3,)
    assert a[0] > 0.5  # chaotic drive


@pytest.fixture(scope="module")
def smoke_report():
    return run_experiment(config_smoke(), workers=1)


def test_run_experiment_smoke_shape(smoke_report):
    rep = smoke_report
    assert len(rep.per_seed) == 2
    assert rep.exponents_mean.shape == (3,)
    assert rep.exponents_std.shape == (3,)
    assert np.all(np.isfinite(rep.exponents_mean))
    assert rep.lambda_star < 0
    assert rep.gs is not None
    assert rep.max_cle_mean == pytest.approx(np.log(1.0 - 0.3) / 0.01)
    assert rep.clv_target_samples is not None  # smoke preset has clv on
    assert rep.n_failed + sum(1 for s in rep.per_seed if s.error is None) == 2
    for s in rep.per_seed:
        if s.error is None:
            assert s.beta in config_smoke().beta_grid
            assert s.vpt_lt is not None and s.vpt_lt >= 0
            assert s.clv_angle_samples is not None
            assert np.all(s.clv_angle_samples >= 0)
            assert np.all(s.clv_angle_samples <= 90)


def test_emit_report_files_and_determinism(tmp_path, smoke_report):
    d1, d2 = tmp_path / "a", tmp_path / "b"
    files1 = harness.emit_report(smoke_report, d1)
    files2 = harness.emit_report(smoke_report, d2)
    names = sorted(p.name for p in files1)
    assert names == [
        "smoke_clv_angle_pdfs.csv",
        "smoke_clv_angle_pdfs_target.csv",
        "smoke_per_seed.csv",
        "smoke_spectrum.csv",
        "smoke_summary.json",
    ]
    for p1, p2 in zip(sorted(files1), sorted(files2)):
        assert p1.read_bytes() == p2.read_bytes()
    summary = json.loads((d1 / "smoke_summary.json").read_text())
    assert summary["config"]["name"] == "smoke"
    assert "gs_class" in summary


def test_run_experiment_rerun_identical(smoke_report):
    rep2 = run_experiment(config_smoke(), workers=2)
    assert np.array_equal(rep2.exponents_mean, smoke_report.exponents_mean)
    for a, b in zip(
        sorted(rep2.per_seed, key=lambda s: s.seed),
        sorted(smoke_report.per_seed, key=lambda s: s.seed),
    ):
        assert a.error == b.error
        if a.error is None:
            assert np.array_equal(a.exponents, b.exponents)
            assert a.vpt_lt == b.vpt_lt


def test_sweep_leak_rate_smoke(tmp_path):
    cfg = config_smoke(clv=False, seeds=(0,))
    report = sweep_leak_rate(cfg, [0.3, 0.9])
    assert [p.label["epsilon"] for p in report.points] == [0.3, 0.9]
    for p in report.points:
        assert p.n_ok + p.n_failed == 1
        if p.n_ok:
            assert p.lambda1_err_mean is not None
    files = harness.emit_sweep(report, tmp_path, "smoke_leak")
    assert (tmp_path / "smoke_leak.csv").exists()
    header = (tmp_path / "smoke_leak.csv").read_text().splitlines()[0]
    assert header.startswith("epsilon,")


def test_sweep_validation():
    cfg = config_smoke()
    with pytest.raises(ValueError):
        sweep_leak_rate(cfg, [])
    with pytest.raises(ValueError):
        sweep_shots(cfg, [0])
    with pytest.raises(ValueError):
        harness.sweep_channel_noise(cfg, "thermal", [0.1])


def test_parse_seeds():
    assert cli._parse_seeds("0-3") == (0, 1, 2, 3)
    assert cli._parse_seeds("0,2,5-6") == (0, 2, 5, 6)
    assert cli._parse_seeds("7") == (7,)
    with pytest.raises(Exception):
        cli._parse_seeds(" , ")


def test_cli_gen_data_round_trip(tmp_path):
    out = tmp_path / "traj.csv"
    rc = cli.main(
        [
            "gen-data", "--system", "lorenz63", "--dt", "0.01",
            "--steps", "500", "--discard", "100", "--seed", "3",
            "--out", str(out),
        ]
    )
    assert rc == 0
    traj, spec, seed = dynamics.load_trajectory(out)
    assert traj.n_steps == 500
    assert spec.kind == "lorenz63"
    assert seed == 3


def test_cli_lyapunov_truth(tmp_path):
    rc = cli.main(
        ["lyapunov", "--stock", "smoke", "--truth", "--out", str(tmp_path)]
    )
    assert rc == 0
    csv = tmp_path / "smoke_reference_spectrum.csv"
    assert csv.exists()
    lines = csv.read_text().strip().splitlines()
    assert lines[0] == "exponent_index,value"
    assert len(lines) == 4


def test_cli_train_then_forecast(tmp_path):
    data = tmp_path / "traj.csv"
    assert cli.main(
        ["gen-data", "--steps", "1200", "--discard", "200", "--seed", "5",
         "--out", str(data)]
    ) == 0
    rc = cli.main(
        ["train", "--stock", "smoke", "--seeds", "0", "--out", str(tmp_path)]
    )
    assert rc == 0
    model = tmp_path / "smoke_seed0"
    assert model.with_suffix(".json").exists()
    fc = tmp_path / "forecast.csv"
    rc = cli.main(
        ["forecast", "--model", str(model), "--data", str(data),
         "--washout-lt", "1", "--lt", "0.5", "--out", str(fc)]
    )
    assert rc == 0
    lines = fc.read_text().strip().splitlines()
    assert lines[0] == "t,x1,x2,x3"
    assert len(lines) == 1 + round(0.5 * 110)


def test_cli_repro_smoke_deterministic(tmp_path):
    d1, d2 = tmp_path / "r1", tmp_path / "r2"
    assert cli.main(["repro", "smoke", "--out", str(d1)]) == 0
    assert cli.main(["repro", "smoke", "--out", str(d2)]) == 0
    files1 = sorted(p for p in d1.iterdir())
    files2 = sorted(p for p in d2.iterdir())
    assert [p.name for p in files1] == [p.name for p in files2]
    assert len(files1) >= 3
    for p1, p2 in zip(files1, files2):
        assert p1.read_bytes() == p2.read_bytes(), p1.name


def test_cli_rejects_bad_input(tmp_path):
    with pytest.raises(SystemExit):
        cli.main(["repro", "no-such-preset", "--out", str(tmp_path)])
    with pytest.raises(SystemExit):
        cli.main(["lyapunov", "--stock", "no-such-system"])
    with pytest.raises(SystemExit):
        cli.main([])


def test_cli_cle_smoke(tmp_path):
    rc = cli.main(
        ["cle", "--stock", "smoke", "--seeds", "0", "--epsilons", "0.3,0.6",
         "--out", str(tmp_path)]
    )
    assert rc == 0
    lines = (tmp_path / "smoke_cle.csv").read_text().strip().splitlines()
    assert lines[0] == "epsilon,seed,max_cle,gs_class"
    assert len(lines) == 3
    # state-free law: max CLE is ln(1-eps)/dt regardless of the drive
    eps, seed, cle, gs = lines[1].split(",")
    assert float(cle) == pytest.approx(np.log(1.0 - float(eps)) / 0.01)
