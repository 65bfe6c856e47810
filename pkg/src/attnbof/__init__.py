"""Neural bag-of-features sequence classifiers with 2D attention, on a small numpy autodiff core."""
from .attention import (AttentionBlock, apply_2da, attention_mask, codeword_attention,
                        input_attention, temporal_attention)
from .data import (Dataset, inject_noise_bands, kfold_split, load_seqb, sliding_windows,
                   synth_clusters, write_seqb)
from .gradcheck import GradReport, finite_difference_gradcheck
from .metrics import Metrics, macro_f1, sens_spec_mean
from .model import LayerSpec, Model, ModelConfig, build_model, parse_layers
from .optim import (LRSchedule, OptimState, adam_step, apply_max_norm, class_weights_from_counts,
                    lr_schedule_value)
from .quantization import (Codebook, accumulate_histogram, hyperbolic_quantize, rbf_quantize,
                           tnbof_forward)
from .tensor import Tensor, tensor_create
from .train import Checkpoint, TrainConfig, evaluate, load_config, train

__version__ = "0.1.0"
