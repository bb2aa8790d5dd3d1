"""Video prediction with stacked spatiotemporal recurrent cells.

Dual clip encoders feed a stack of gated cells that carry separate temporal
and spatial states; decoders recall matching encoder activations on the way
back up, and training couples reconstruction with an adversarial and a
learned-perceptual term.
"""

from .adversarial import (Discriminator, LossBundle, derive_disc_depth,
                          feature_distance, gan_loss_discriminator,
                          gan_loss_predictor, lp_loss, mse_loss, total_loss)
from .autoencoder import (ClipEncoder, FeatureStack, FusionHead, Predictor,
                          RecallDecoder, predict_next_frame)
from .complexity import (ComplexityReport, analyze_stgru_unit, count_macs,
                         count_params, estimate_flops, stgru_conv_macs,
                         stgru_param_count)
from .config import (DataConfig, EvalConfig, ModelConfig, RunConfig,
                     TrainConfig, load_run_config, parse_run_config)
from .data import (ClipWindow, DatasetManifest, VideoSequence,
                   generate_moving_shapes, load_manifest, load_sequence,
                   make_clip, pixel_shuffle, pixel_unshuffle, read_frames,
                   save_sequence, write_frames)
from .errors import FormatError, NumericError, ValidationError
from .metrics import MetricsReport, evaluate, psnr, ssim
from .stgru import (ChannelLayerNorm, GateActivations, LayerState, STGRUCell,
                    STGRUStack, TemporalFusion)
from .trainer import (Checkpoint, SequenceDataset, Trainer,
                      build_from_checkpoint, load_checkpoint, rollout,
                      save_checkpoint)

__version__ = "0.1.0"
