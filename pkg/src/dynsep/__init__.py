"""Dynamic width/depth band-split separation with subnetwork extraction."""

from .deploy import (
    CostTable,
    SubnetConfig,
    enumerate_costs,
    extract_subnet,
    load_checkpoint,
    save_checkpoint,
    select_config,
)
from .model import DESK, PAPER, FullModelParams, ModelConfig, init_model, model_costs, model_forward
from .spectral import BandScheme, Spectrogram, Waveform, istft, snr_db, stft
from .tensor import Tensor, backward, grad_check, no_grad

__version__ = "0.1.0"
