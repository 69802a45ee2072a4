"""Diffusion-generated ocean states with physics-guided sampling and checks."""

from .constraint import ConstraintConfig, boundary_fixup, constraint_gradient, constraint_value, kappa
from .denoiser import (
    Denoiser,
    DenoiserParams,
    NetConfig,
    adamw_update,
    cosine_lr,
    crop_channels,
    init_params,
    load_checkpoint,
    pad_channels,
    save_checkpoint,
    time_embedding,
)
from .diffusion import (
    NoiseSchedule,
    SampleTrace,
    build_schedule,
    forward_noise,
    guided_reverse_step,
    reverse_step,
    sample,
    training_loss,
)
from .errors import ConfigError, FormatError, NumericError, OceanDiffError, ValidationError
from .grid import (
    GridGeometry,
    NormStats,
    OceanState,
    as_channels,
    build_box_geometry,
    channels_to_state,
    compute_norm_stats,
    denormalize_state,
    normalize_state,
    read_state,
    write_state,
)
from .integrator import DriftReport, IntegratorConfig, convective_adjust_column, integrate, step
from .physics import (
    EosParams,
    MetricsReport,
    WaterMassBox,
    default_boxes,
    density,
    density_error,
    evaluate,
    surface_variance,
    water_mass_stats,
    zonal_mean_density,
)
from .synthdata import SynthParams, generate_dataset, generate_state, geometry_for, load_manifest
from .trainer import TrainConfig, resume, train

__all__ = [name for name in dir() if not name.startswith("_")]
