"""Diffusion tensor estimation toolkit.

Classical per-voxel least-squares fitters (OLS, CWLLS, CNLS), a synthetic
phantom generator with Rician noise, a minimal reverse-mode autodiff engine,
two patch-sequence attention estimators trained in two stages, and an
evaluation harness. See the README for the tour.
"""

__version__ = "0.1.0"

from .core import (
    SKARE6_DIRECTIONS,
    DesignMatrix,
    DiffusionTensor,
    EigenSystem,
    GradientScheme,
    angular_error,
    build_design_matrix,
    eigendecompose,
    fibonacci_directions,
    fractional_anisotropy,
    load_fsl_scheme,
    mean_diffusivity,
    predict_signals,
    save_fsl_scheme,
    skare6,
    uniform_sphere_scheme,
)
from .fitters import (
    CnlsConfig,
    FitResult,
    WeightingScheme,
    fit_cnls,
    fit_ols,
    fit_volume,
    fit_voxel,
    fit_wlls_constrained,
)
from .phantom import (
    NoiseSpec,
    PhantomSpec,
    RegionSpec,
    add_rician_noise,
    generate_phantom,
    make_rng,
    synthesize_dwi,
)
from .volume import Volume4D, load_volume, save_volume
from .transformer import (
    ModelConfig,
    ModelS,
    ModelST,
    PatchSequence,
    TwoStage,
    extract_patches,
    load_model,
    normalize_dwi,
    predict_volume,
    save_model_s,
    save_two_stage,
)
from .training import (
    Adam,
    PatchDataset,
    TrainConfig,
    TrainLog,
    build_patch_dataset,
    he_initialize,
    loss_mse,
    train_model_s,
    train_model_st,
)
from .metrics import (
    BlandAltman,
    MetricsReport,
    SweepResult,
    bland_altman_data,
    classical_method,
    compare_volumes,
    learned_method,
    noise_sweep,
)
