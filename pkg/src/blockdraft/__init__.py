"""Block-draft speculative decoding with an exact autoregressive verifier,
drafter alignment losses, and brute-force losslessness oracles."""

from .core import Dist, RngStream, Vocab, kl_divergence, sample_categorical, tv_distance
from .engine import DecodeTrace, accept_prob, decode, decode_baseline_ar, residual_dist, verify_position
from .models import DrafterParams, TargetParams, draft_block_factorized, draft_block_sequential, target_next_dist

__version__ = "0.1.0"
