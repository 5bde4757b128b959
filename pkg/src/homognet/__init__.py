"""Microstructure to effective conductivity: synthesis, solver, features,
neural models and evaluation for periodic two-phase RVE images."""

from .grid import (
    InclusionSpec,
    RveImage,
    as_rve,
    generate_rve,
    phase_invert,
    rotate90,
    translate_periodic,
    volume_fraction,
)
from .homogenize import (
    ConductivityTensor,
    ContrastSpec,
    solve_effective_conductivity,
    voigt_reuss_bounds,
)
from .features import (
    FeatureConfig,
    FeaturePipeline,
    PcaBasis,
    StandardizationStats,
    assemble_feature_vector,
    band_features,
    conv_periodic,
    edge_distributions,
    feature_names,
    fit_pca,
    global_directional_mean,
    local_volume_distribution,
    project,
    standardize_apply,
    standardize_fit,
    two_pcf,
)
from .neural import TrainConfig, adamw_step, early_stop, gradient_check
from .models import (
    AugmentConfig,
    ModelBundle,
    ModelData,
    augment_translate,
    bayesian_loss,
    build_bnn,
    build_deep_inception,
    build_generic_convnet,
    build_hybrid_model,
    build_model,
    multistage_train,
    scale_contrast,
    train_model,
)
from .metrics import evaluate, rel_rmse, rotation_consistency, thresholded_errors, translation_robustness
from .mining import MiningRecord, rank_and_export, records_from_predictions, relative_error
from .selection import anova_f, pearson_matrix, rank_features, rfe_rank, subset_sweep
from . import dataio

__version__ = "0.1.0"
