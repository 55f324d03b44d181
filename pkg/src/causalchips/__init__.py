"""Causal inference with geolocated image chips."""

from .confound import (
    ConfoundingResult,
    ModelConfig,
    PropensityModel,
    analyze_image_confounding,
    bootstrap_ate,
    evaluate_propensity,
    fit_propensity,
    hajek_ate,
    predict_propensity,
)
from .embed import EmbeddingConfig, EmbeddingMatrix, KernelBank, MemorySource, embed_corpus, make_kernels
from .frame import CausalFrame, drop_na, read_frame, write_frame
from .geochip import ChipRequest, GeoTransform, extract_chip, extract_from_pool, parse_raster, world_to_pixel
from .hetero import (
    HeterogeneityConfig,
    HeterogeneityFit,
    analyze_image_heterogeneity,
    fit_effect_clusters,
    implied_ate,
    transportability,
)
from .recordstore import RecordReader, read_by_keys, read_sequential, validate, write_records

__version__ = "0.1.0"
