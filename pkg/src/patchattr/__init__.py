"""Nonparametric patch-influence data attribution for diffusion training sets."""

__version__ = "0.1.0"

from .aggregation import (
    AttributionMatrix,
    InfluenceConfig,
    PatchProvenance,
    ProvenanceEntry,
    attribute_batch,
    attribute_image,
    top_influencers,
)
from .core import (
    Dataset,
    DiffusionSchedule,
    ImageTensor,
    NoisyImage,
    PatchView,
    build_schedule,
    downsample,
    extract_patch,
    noise_image,
)
from .estimator import PatchInfluenceAttributor, RawPixelAttributor
from .evaluation import (
    LDSInput,
    LDSReport,
    attribution_prediction,
    lds,
    make_synthetic_lds,
    raw_pixel_baseline,
    spearman,
)
from .exceptions import (
    ComputeError,
    ConfigurationError,
    DataFormatError,
    FingerprintMismatchError,
    IncompleteMatrixError,
    LookupFailure,
    PatchAttrError,
    ShapeError,
)
from .influence import (
    distance_map_fast,
    distance_map_naive,
    global_score,
    local_score,
    multiscale_influence,
    patch_influence,
)
