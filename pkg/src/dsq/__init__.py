"""Disentangling quantizer for speech feature sequences."""

from .bitstream import Bitstream, BitrateReport, bitrate, pack, unpack
from .codebook import Codebook, KMeansConfig, fit_kmeans, fit_residual_stack
from .config import PRESETS, QuantizerConfig, load_config
from .features import (
    ChannelStats,
    FeatureMatrix,
    SyntheticSpec,
    denormalize,
    generate_synthetic,
    instance_normalize,
    read_feature_file,
    write_feature_file,
)
from .manipulate import flatten_prosody, swap_speaker
from .metrics import eer, feature_distance, pearson
from .pipeline import (
    DisentangledCodes,
    FilmParams,
    FittedPipeline,
    decode,
    encode,
    film,
    fit_film_readout,
    fit_pipeline,
)
from .quantize import (
    grvq_dequantize,
    grvq_quantize,
    rvq_dequantize,
    rvq_quantize,
    vq_quantize,
)

__version__ = "0.1.0"
