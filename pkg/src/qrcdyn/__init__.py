"""Quantum reservoir computing diagnostics for chaotic dynamical systems.

Gate-based reservoir models (recurrent and state-free variants) driven
by chaotic flows, with trainable linear readouts, closed-loop
forecasting, and the stability toolbox used to judge them: Lyapunov
spectra via tangent-space QR, conditional exponents along the drive,
covariant vector angles, Kaplan-Yorke dimensions, and
generalized-synchronization classification. Includes sampling and
per-gate channel noise models and a deterministic experiment harness.
"""

from .dynamics import (
    DatasetSplit,
    IntegrationDivergedError,
    MinMaxScaler,
    SystemSpec,
    Trajectory,
    generate_trajectory,
    load_trajectory,
    lorenz63,
    lorenz96,
    reference_lyapunov,
    rhs,
    rk4_jacobian,
    rk4_step,
    save_trajectory,
    split_and_scale,
    system_jacobian,
)
from .harness import (
    ExperimentConfig,
    ExperimentReport,
    PRESETS,
    config_lorenz63,
    config_lorenz96_10,
    config_lorenz96_20,
    config_smoke,
    emit_report,
    emit_sweep,
    load_config,
    prepare_data,
    reference_spectrum,
    run_experiment,
    run_preset,
    run_single_seed,
    save_config,
    sweep_channel_noise,
    sweep_leak_rate,
    sweep_shots,
)
from .qcore import (
    CircuitLayout,
    NoiseModel,
    TraceIntegrityError,
    amplitude_damping_kraus,
    apply_cnot,
    apply_kraus,
    apply_ry,
    depolarizing_kraus,
    encode_angles,
    entangler_pairs,
    measure_probabilities,
    run_circuit_noisy,
    run_circuit_pure,
    run_circuit_pure_batch,
    sample_shots,
)
from .reservoir import (
    ForecastDivergedError,
    QRC,
    RFQRC,
    ReservoirConfig,
    SingularSystemError,
    closed_loop_run,
    closed_loop_step,
    esp_contraction_test,
    load_model,
    open_loop_run,
    reservoir_step,
    save_model,
    select_beta,
    train_readout,
    vpt,
)
from .stability import (
    CLVAngleStats,
    CLVResult,
    ConditionalResult,
    GSVerdict,
    LyapunovResult,
    TangentHistory,
    classify_gs,
    clv_angles,
    clv_backward,
    conditional_les,
    kaplan_yorke,
    lyapunov_spectrum,
    save_spectrum_csv,
)
from .tangent import (
    JacobianRecord,
    closed_loop_system,
    conditional_system,
    driven_probabilities,
    finite_difference_jacobian,
    jacobian_conditional,
    jacobian_qrc_closed,
    jacobian_rfqrc_closed,
    parameter_shift_dprobs_du,
    parameter_shift_dprobs_dphi,
)

__version__ = "0.1.0"
