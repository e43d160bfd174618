"""Learn token-level prompt compression policies against black-box generation LMs."""
from .text import PromptRecord, RenderedPrompt, Segment, Token, TokenizerSpec, apply_actions, segment_and_mask
from .metrics import compression_ratio, lcs_length, rouge_l
from .policy import FeatureConfig, PolicyParams
from .trainer import PolicySetup, TrainingConfig, train

__version__ = "0.1.0"

__all__ = [
    "FeatureConfig",
    "PolicyParams",
    "PolicySetup",
    "PromptRecord",
    "RenderedPrompt",
    "Segment",
    "Token",
    "TokenizerSpec",
    "TrainingConfig",
    "apply_actions",
    "compression_ratio",
    "lcs_length",
    "rouge_l",
    "segment_and_mask",
    "train",
]
