"""Multi-sensor lake ice monitoring with a sensor-invariant embedding.

Per-sensor encoders (MODIS, VIIRS, Sentinel-1 SAR) map their inputs to a
common 12x12x32 embedding, trained through a frozen / non-frozen
segmentation task. A temporal regressor turns windows of embeddings into a
daily water fraction, from which ice-on and ice-off dates are extracted.
"""

from .acquisition import AcquisitionCalendar, effective_temporal_resolution
from .evaluation import (ConfusionMatrix, PhenologyEvents, WaterFractionSeries, compare_to_reference,
                         extract_ice_dates, mean_iou, mean_pixel_accuracy)
from .geometry import GridSpec, LakeGeometry, build_clean_pixel_mask
from .losses import (LossWeights, intra_day_coherence_loss, line_loss, masked_cross_entropy, mse_loss,
                     regression_loss)
from .model import EmbeddingTensor, FusionModel, embed_observation, encode_optical, encode_sar, segment, \
    shared_embed
from .patches import SensorObservation, filter_by_cloud_fraction, pad_to_patch
from .regression import TemporalRegressor, build_window, fuse_daily, regress_fraction
from .sensors import SensorKind
from .synthetic import SyntheticSeasonConfig, generate_desk_dataset, generate_synthetic_season
from .training import (TrainConfig, finetune_shared_with_sar, make_split, pretrain_optical_and_shared,
                       pretrain_sar_encoder, train_ensemble, train_regression)

__version__ = "0.1.0"
