"""Latent-diffusion monocular depth estimation, toy scale, CPU friendly."""

from .core_types import (DepthMap, ModelConfig, RgbdSample, RgbImage,
                         derive_valid_mask, load_sample, save_sample,
                         validate_sample)
from .data_pipeline import (AugmentConfig, SyntheticSceneSpec, augment,
                            generate_synthetic, load_manifest,
                            resize_cross_dataset)
from .denoising_unet import (DenoisingUNet, NoiseSchedule, build_schedule,
                             diffusion_loss, forward_diffuse)
from .depth_decoder import DepthDecoder, DepthPrediction, depth_loss, silog_loss
from .latent_codec import (FrozenWeights, LatentTensor, encode_latent,
                           init_frozen_encoder)
from .metrics_eval import (EvalProtocolConfig, MetricsReport, compute_metrics,
                           evaluate_split, garg_crop_mask,
                           split_flip_fuse_predict)
from .model import DepthEstimationModel
from .semantic_encoder import (DilatedConvEnhance, FeaturePyramid,
                               ImageSemanticEncoder, SpatialAttentionGate)
from .trainer import (FreezePolicy, OneCycleSchedule, TrainerConfig,
                      TrainState, build_optimizer, fit, init_train_state,
                      load_checkpoint, lr_at, make_freeze_policy,
                      save_checkpoint, train_step)

__version__ = "0.1.0"
