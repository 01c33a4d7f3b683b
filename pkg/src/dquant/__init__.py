"""Depthwise quantization in numpy.

Tensors are split along one axis into ``M`` slices and each slice is
vector-quantized by its own codebook.  The package provides the quantizer,
entropy and mutual-information estimators over code streams, a small
reverse-mode autodiff with a hierarchical quantized autoencoder, binary
file formats and the ``dquant`` experiment CLI.
"""

from .autodiff import Node, constant, parameter, stop_gradient
from .config import ConfigError, ExperimentConfig, load_config, parse_config
from .dqae import DQAE, DqaeConfig, evaluate, load_checkpoint, save_checkpoint, train, train_step
from .experiment import run_experiment
from .formats import (FormatError, ShapeMismatchError, import_tensors, load_codebooks, load_parameters,
                      load_tensor, save_codebooks, save_parameters, save_tensor)
from .info import (InfoReport, JointHistogram, UsageHistogram, entropy, mutual_information,
                   pairwise_mi_matrix, position_entropy_map, posthoc_density_estimate)
from .optim import AdamW, DivergenceError, optimizer_step
from .quantizer import (CapacityReport, Codebook, DepthwiseQuantizer, QuantizationResult, capacity,
                        dq_forward, ema_update, nearest_code, quantization_loss, reinit_dead_codes,
                        vq_forward)
from .ste import straight_through_quantize
from .synthetic import SyntheticSpec, cross_channel_correlation, generate_synthetic, synthetic_images
from .tensor import AxisDecomposition, decompose, reassemble

__version__ = "0.1.0"
