"""Multichannel speech separation with per-bin frame-domain filters.

Three solvers over the same signal model: exact multichannel inverse
filtering (mint), a power-minimizing distortionless variant (mpdr), and
l1-minimizing recovery under a quadratic fitting constraint (classo),
plus an unconstrained FISTA baseline (lasso).
"""

from .classo import (
    ClassoConfig,
    ClassoResult,
    ToleranceModel,
    compute_tolerance,
    power_iteration,
    project_ball,
    project_constraint,
    shrinkage,
    solve_classo,
    solve_lasso_fista,
)
from .config import ConfigError, RunConfig, build_config, parse_config_file
from .ctf import (
    CtfTensor,
    ZetaKernel,
    ctf_adjoint,
    ctf_convolve,
    ctf_energy,
    ctf_length,
    rir_to_ctf,
    sampled_zeta_taps,
    zeta_kernel,
)
from .inverse_filtering import (
    IfSolverConfig,
    InverseFilterSet,
    TargetSignal,
    apply_inverse_filter,
    build_target,
    convolution_matrix,
    design_mint_filters,
    design_mpdr_filters,
    filter_length,
    solve_mint,
    solve_mpdr,
)
from .metrics import MetricsReport, input_snr, npm, output_snr, output_snr_projection, sdr, sir
from .pipeline import BenchSpec, RunResult, run_benchmark, run_separation
from .scenario import MixResult, Scenario, ScenarioSpec, make_scenario, mix, perturb_rirs, synth_rir, synth_sources
from .signals import MultichannelSignal, Spectrogram, WindowPair, design_windows, istft, stft
from .wavio import WavFormatError, load_wav, save_wav

__version__ = "0.1.0"
