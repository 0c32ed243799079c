"""whodet: linear object detection with whitened features.

Templates are learned from positive samples only, by whitening the mean
positive against stationary background statistics; detection runs a
multi-scale sliding window accelerated with per-plane Fourier transforms.
"""

from .bgstats import (BackgroundStats, StatsAccumulator, learn_stats,
                      load_stats, merge_stats, save_stats, stored_offsets)
from .detector import (Detection, NmsConfig, ScoreMap, box_iou, convolve_score,
                       detect, nms, score_naive)
from .errors import (CholeskyError, CovarianceMemoryError, FormatError,
                     PipelineMismatchError, ValidationError, WhodetError)
from .evalkit import (DetectionRecord, EvalCounts, EvalReport, FpDistribution,
                      FpType, GroundTruth, classify_fp, compute_pr_ap,
                      evaluate_class, fp_distribution, impact_analysis, iou,
                      match_detections)
from .featmap import (CellGeometry, FeatureExtractorConfig, FeatureMap,
                      FeaturePyramid, LayerParam, build_pyramid,
                      derive_geometry, extract_hog, load_feature_map,
                      save_feature_map)
from .learner import (LdaSolveInfo, LearnerConfig, ModelComponent, ModelShape,
                      choose_model_size, cluster_samples,
                      estimate_covariance_bytes, extract_positive,
                      learn_exemplar_lda, reconstruct_covariance)
from .modelstore import DetectorModel, load_model, save_model
from .pipeline import FeaturePipeline
from .transform import (ChannelMaxAccumulator, ChannelScaler, PcaAccumulator,
                        PcaTransform, apply_pca, apply_scaler, combine_layers,
                        learn_channel_maxima, learn_pca, load_pca, load_scaler,
                        save_pca, save_scaler)

__version__ = "0.1.0"
