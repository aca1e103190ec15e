"""Grad-CAM driven selective data retention for on-device retraining."""
from ._accel import BACKEND
from .calibration import (CalibrationProfile, ClassScoreList, ClassThresholds, build_profile,
                          collect_scores, histogram, load_profile, save_profile, window_thresholds)
from .data import (LabeledDataset, NoiseSpec, SplitSpec, inject_noise, load_idx, random_retention,
                   split, synth_blobs)
from .errors import DripError, NoThresholdsError, ParseError, ProfileMismatchError, RejectedInputError
from .gradcam import (ChannelWeights, DripScore, HeatMap, channel_weights, compute_drips, raw_heatmap,
                      rectify, upsample)
from .network import (NetworkSpec, TrainedModel, forward, forward_with_tap, grad_wrt_feature_map,
                      load_model, save_model, train)
from .retention import Reason, RetentionDecision, Verdict, decide, filter_stream, predict_class

__version__ = "0.1.0"
