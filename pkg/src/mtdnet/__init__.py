"""Multi-temporal-depth 3D convolutional networks for frame-level video regression."""

__version__ = "0.1.0"

from .autodiff import Parameter, Tape
from .data import SyntheticSpec, VideoSample, extract_clips, generate_synthetic
from .metrics import EvalReport, accuracy, evaluate, icc, pearson, run_loso
from .network import MtdModuleSpec, MtdNetwork, NetworkSpec, build_network, layer_count, make_network_spec
from .optim import SgdConfig, lr_at, sgd_step

__all__ = [
    "Parameter", "Tape", "SyntheticSpec", "VideoSample", "extract_clips", "generate_synthetic",
    "EvalReport", "accuracy", "evaluate", "icc", "pearson", "run_loso", "MtdModuleSpec",
    "MtdNetwork", "NetworkSpec", "build_network", "layer_count", "make_network_spec",
    "SgdConfig", "lr_at", "sgd_step",
]
