"""aberray: ray-traced camera-lens simulation for depth-from-focus work.

The library traces published lens prescriptions surface by surface to get
spatially-varying point spread functions, fits fast surrogates to them (an
MLP and a trilinear kernel grid), renders aberrated focal stacks from RGBD
input by per-pixel convolution, and quantifies how the resulting off-axis
aberrations bias classical depth-from-focus estimates.
"""

__version__ = "0.1.0"

from .lens import (
    LensPrescription,
    Material,
    ParaxialSummary,
    Surface,
    focus_to,
    load_lens,
    paraxial_analyze,
    parse_prescription,
)
from .raytrace import Ray, SpotDiagram, intersect_surface, refract, rms_radius, trace_point
from .psf import (
    Frustum,
    ObjectQuery,
    PsfGrid,
    gaussian_coc_psf,
    normalize_query,
    rasterize,
    raytraced_psfs,
    splat_weight,
)
from .surrogate import (
    GridModel,
    MlpModel,
    TrainConfig,
    build_grid_model,
    evaluate_surrogate,
    grid_query,
    mlp_backward,
    mlp_forward,
    train_mlp,
)
from .render import (
    FocalStack,
    RgbdImage,
    local_convolve,
    local_convolve_patched,
    pixel_psf_field,
    simulate_stack,
)
from .dff import (
    DepthMetrics,
    FocusProbability,
    compute_metrics,
    estimate_depth,
    radial_error_map,
    sharpness_volume,
    synthesize_aif,
)

__all__ = [
    "LensPrescription", "Material", "ParaxialSummary", "Surface",
    "focus_to", "load_lens", "paraxial_analyze", "parse_prescription",
    "Ray", "SpotDiagram", "intersect_surface", "refract", "rms_radius",
    "trace_point",
    "Frustum", "ObjectQuery", "PsfGrid", "gaussian_coc_psf",
    "normalize_query", "rasterize", "raytraced_psfs", "splat_weight",
    "GridModel", "MlpModel", "TrainConfig", "build_grid_model",
    "evaluate_surrogate", "grid_query", "mlp_backward", "mlp_forward",
    "train_mlp",
    "FocalStack", "RgbdImage", "local_convolve", "local_convolve_patched",
    "pixel_psf_field", "simulate_stack",
    "DepthMetrics", "FocusProbability", "compute_metrics", "estimate_depth",
    "radial_error_map", "sharpness_volume", "synthesize_aif",
]
