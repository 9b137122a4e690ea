"""Microbubble localization for ultrasound super-resolution with a deformable detection transformer."""

from .config import PipelineConfig, load_config
from .criterion import LossWeights, hungarian, set_loss
from .dataset import PatchLayout, SplitManifest, split_by_correlation, split_patches
from .detector import Detector, DetectorConfig
from .evaluation import EvalConfig, EvalReport, evaluate
from .postprocess import Detection, merge_patches
from .renderer import RenderConfig, SRMap, render_sequence
from .simulator import Frame, MBAnnotation, PSFModel, SceneSpec, simulate_sequence
from .training import infer, load_model, train

__version__ = "0.1.0"
