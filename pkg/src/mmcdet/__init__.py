"""Two single-modality detectors trained to mimic each other, on synthetic RGB/thermal scenes."""

__version__ = "0.1.0"

from .anchors import AnchorSet, Detection, decode_detections
from .attack import AttackSpec, attack_sweep, pgd_targeted
from .config import VARIANTS, TrainConfig, load_config
from .corruptions import KINDS, CorruptionSpec, corrupt, corruption_sweep
from .data import Dataset, Sample, SceneSpec, build_dataset, generate_scene
from .evaluate import EvalReport, evaluate
from .losses import LossWeights, detection_loss, kl_mimicry, mmc_total, reconstruction_loss
from .tensor import Tensor, grad_check
from .train import build_system, load_system, train

__all__ = [
    "AnchorSet", "AttackSpec", "CorruptionSpec", "Dataset", "Detection", "EvalReport", "KINDS",
    "LossWeights", "Sample", "SceneSpec", "Tensor", "TrainConfig", "VARIANTS", "attack_sweep",
    "build_dataset", "build_system", "corrupt", "corruption_sweep", "decode_detections",
    "detection_loss", "evaluate", "generate_scene", "grad_check", "kl_mimicry", "load_config",
    "load_system", "mmc_total", "pgd_targeted", "reconstruction_loss", "train",
]
