"""Masked-diffusion generation of part-wise sign tokens from text, at desk scale."""
from .diffusion import MaskState, TokenSequence, VocabSpec, forward_mask, reverse_step
from .kernels import BACKEND
from .scheduler import build_schedule, count_orders_plain, count_orders_utc, training_index_filter

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "MaskState",
    "TokenSequence",
    "VocabSpec",
    "build_schedule",
    "count_orders_plain",
    "count_orders_utc",
    "forward_mask",
    "reverse_step",
    "training_index_filter",
]
