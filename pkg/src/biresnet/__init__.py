"""Bi-ResNet fault diagnosis for synchronous motors, with a dq0 fault simulator."""
__version__ = "0.1.0"

from .nncore import NumericalError, ShapeError, UsageError
from .intralink import IntraLinkConfig, IntraLinkReLU, intralink_backward, intralink_forward
from .model import BiResNet, BiResNetConfig, STBlockConfig, load_model, param_count, save_checkpoint
from .motorsim import CLASS_NAMES, FaultClass, FaultSpec, MachineParams, SimConfig, generate_dataset
from .datapipe import Dataset, DataError, add_noise, downsample, normalize, split
from .trainer import TrainConfig, TrainHistory, evaluate, train
from .estimator import BiResNetClassifier, ChannelStandardizer, Downsampler, NoiseInjector
