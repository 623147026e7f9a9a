"""auxquant: quantization-aware training with a full-precision auxiliary
side network, built on a small numpy reverse-mode autodiff engine.

The low-precision backbone is trained jointly with a full-precision side
network that reads its block outputs; the shared parameters receive the
average of both loss gradients, and the side network is discarded at
inference.
"""

from .auxiliary import (AdaptorSpec, AuxiliaryModule, AuxiliarySpec,
                        additional_loss_baseline, aggregate, build_auxiliary,
                        forward_mixed, joint_backward, joint_loss, kd_baseline)
from .checkpoint import Checkpoint
from .config import ExperimentConfig, load_experiment, parse_experiment
from .data import (Dataset, DatasetSpec, Pipeline, load_cifar10_binary,
                   load_dataset, load_idx, synth_generate, write_idx)
from .errors import (DataFormatError, NumericFaultError, ShapeMismatchError,
                     SpecValidationError, TrainingDiverged)
from .network import (BlockSpec, Network, NetworkSpec, build_network,
                      forward_backbone, plain4_spec, res4_spec)
from .quantize import (PrecisionPolicy, QuantScheme, binarize,
                       quantize_activation, quantize_unit, quantize_weight)
from .tensor import (Parameter, Tensor, backward, backward_multi, no_grad,
                     register_custom_backward)
from .training import (MetricsRow, TrainConfig, evaluate, finetune,
                       metrics_to_csv, metrics_to_json, pretrain,
                       run_comparison)

__version__ = "0.1.0"
