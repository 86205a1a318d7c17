"""QuartzNet acoustic models built from 1D time-channel separable convolutions,
with a numpy autodiff core, CTC training and decoding."""

from .ctc import Vocabulary, ctc_loss
from .decode import BeamConfig, beam_search, greedy_decode
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    EmptyDataset,
    FormatError,
    InfeasibleTarget,
    NumericError,
    QuartzNetError,
    ShapeError,
)
from .model import AcousticModel, ModelConfig, build, count_params, load_checkpoint, load_config, save_checkpoint
from .tensor import Tensor, check_gradient, no_grad

__version__ = "0.1.0"
