"""Unified-threshold sample-to-sample losses, margin softmax losses and verification metrics."""

__version__ = "0.1.0"

from .config import PRESETS, ExperimentConfig, load_config
from .errors import UssError
from .evaluation import (EvalReport, ScoreSet, eer, evaluate_embeddings, kfold_accuracy,
                         pair_scores, per_identity_thresholds, tar_at_far,
                         unified_threshold_check)
from .model import SGD, EmbeddingNet, LrSchedule, lr_at, sgd_step
from .numerics import cosine_similarity, l2_normalize, sigmoid, softplus
from .pairing import (IdentityDataset, PairBatch, generate_synthetic, make_pair_batch,
                      partition_similarities)
from .s2c import S2CConfig, combined_loss, s2c_logits, s2c_loss
from .s2s import (LossConfig, LossOutput, SimilarityRow, ThresholdParams, check_inequalities,
                  naive_loss, s2s_bce_loss, s2s_softmax_loss, stationary_b, uss_loss)
from .training import load_checkpoint, save_checkpoint, train
