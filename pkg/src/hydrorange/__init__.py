"""Underwater acoustic source range estimation.

Library + CLI covering the full pipeline: synthetic tow-path generation,
multi-channel ingestion and one-second segmentation, log-mel / GCC-PHAT
branch features, adaptive gain control, a dual-branch convolution +
conformer regressor with partially shared kernels, 6-fold training with
Adam, cross-domain fine-tuning, and metric/figure reports.
"""

__version__ = "0.1.0"

from .agc import AgcParams, agc_backward, agc_forward, energy
from .errors import DataError, HydrorangeError, NumericError, UsageError
from .features import FeaturePair, FeatureSet, MelConfig, StftConfig, featurize_segment, gcc_phat, logmel, stft
from .learn import Hyper, MetricsReport, assign_folds, evaluate, finetune, mae, mse, pcl5, split, train
from .net import NetConfig, build_model, load_checkpoint, param_count, save_checkpoint
from .signal_io import LabeledSegment, LabelTable, MultiChannelClip, attach_labels, load_multichannel_audio, segment_clip
from .synthgen import Scenario, doppler_shift, synth_towpath
