"""KARMA: long-horizon multivariate time-series forecasting.

The model splits each lookback window into trend and seasonal parts with
channel attention, refines the seasonal part in a wavelet frequency domain
alongside a normalized temporal residual using stacked selective state-space
blocks, and trains against a hybrid time and frequency-domain objective —
all on a self-contained reverse-mode autodiff core with a compiled scan
kernel (pure-numpy fallback selected at import).

Typical flow::

    from karma import KarmaConfig, init_parameters, train_loop, Rng

or, from a shell::

    karma synth --out_dir run
    karma train --data run/synthetic.csv --out_dir run
"""

__version__ = "0.1.0"

from .backend import BACKEND, available_backends
from .data import (ScalerStats, SeriesTable, SyntheticSpec, WindowSample,
                   apply_scaler, chrono_split, default_components,
                   default_ratios, fit_apply_scaler, generate_synthetic,
                   inverse_scaler, load_csv, make_windows, write_csv)
from .decomposition import (AtcdParams, FreqComponents, WaveletFilter,
                            atcd_forward, dwt_analyze, dwt_synthesize,
                            hftd_decompose, hftd_inverse, init_atcd,
                            make_wavelet)
from .errors import (ConfigError, ContractError, DataError, DivergenceError,
                     KarmaError, ShapeError)
from .model import (KarmaConfig, KarmaModel, init_parameters, karma_block,
                    karma_forward, load_checkpoint, parameter_count,
                    save_checkpoint)
from .rng import Rng
from .ssm import SsmParams, discretize, init_ssm, mamba_forward
from .tensor import Tensor, backward, no_grad
from .training import (AdamState, EarlyStop, LossConfig, Metrics, TrainConfig,
                       adam_step, early_stop_update, evaluate, hybrid_loss,
                       lr_decay, train_loop)

__all__ = [
    "BACKEND", "available_backends",
    "ScalerStats", "SeriesTable", "SyntheticSpec", "WindowSample",
    "apply_scaler", "chrono_split", "default_components", "default_ratios",
    "fit_apply_scaler", "generate_synthetic", "inverse_scaler", "load_csv",
    "make_windows", "write_csv",
    "AtcdParams", "FreqComponents", "WaveletFilter", "atcd_forward",
    "dwt_analyze", "dwt_synthesize", "hftd_decompose", "hftd_inverse",
    "init_atcd", "make_wavelet",
    "ConfigError", "ContractError", "DataError", "DivergenceError",
    "KarmaError", "ShapeError",
    "KarmaConfig", "KarmaModel", "init_parameters", "karma_block",
    "karma_forward", "load_checkpoint", "parameter_count", "save_checkpoint",
    "Rng",
    "SsmParams", "discretize", "init_ssm", "mamba_forward",
    "Tensor", "backward", "no_grad",
    "AdamState", "EarlyStop", "LossConfig", "Metrics", "TrainConfig",
    "adam_step", "early_stop_update", "evaluate", "hybrid_loss", "lr_decay",
    "train_loop",
    "__version__",
]
