"""Hierarchical visual prompt tuning for unified face attack detection."""

from .app import AppGates, RoutingDecision, cdc_conv, fadc_conv, route_batch, route_sample
from .config import RunConfig, load_config
from .dataset import Manifest, Sample, generate_dataset, load_manifest, save_manifest
from .dpi import DynamicPromptIntegration, build_text_prompts
from .encoders import CoOpBaseline, DualEncoder, EncoderConfig, class_probabilities, pretrain_encoders
from .evaluation import MetricsReport, ProtocolSplit, compute_metrics, format_report, make_protocol_split
from .model import HiPTune, ModelConfig, hiptune_score
from .pipeline import run_protocol, run_seeds
from .taxonomy import AttackTaxonomy, build_taxonomy
from .training import LossConfig, asymmetric_triplet_loss, cross_entropy_loss, train_stage1, train_stage2
from .vptree import PromptTree, init_prompt_tree, integrate_prompts, select_supervised_path

__version__ = "0.1.0"

__all__ = [
    "AppGates",
    "AttackTaxonomy",
    "CoOpBaseline",
    "DualEncoder",
    "DynamicPromptIntegration",
    "EncoderConfig",
    "HiPTune",
    "LossConfig",
    "Manifest",
    "MetricsReport",
    "ModelConfig",
    "PromptTree",
    "ProtocolSplit",
    "RoutingDecision",
    "RunConfig",
    "Sample",
    "asymmetric_triplet_loss",
    "build_taxonomy",
    "build_text_prompts",
    "cdc_conv",
    "class_probabilities",
    "compute_metrics",
    "cross_entropy_loss",
    "fadc_conv",
    "format_report",
    "generate_dataset",
    "hiptune_score",
    "init_prompt_tree",
    "integrate_prompts",
    "load_config",
    "load_manifest",
    "make_protocol_split",
    "pretrain_encoders",
    "route_batch",
    "route_sample",
    "run_protocol",
    "run_seeds",
    "save_manifest",
    "select_supervised_path",
    "train_stage1",
    "train_stage2",
]
