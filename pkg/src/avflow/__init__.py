"""Audio-driven latent video generation testbed.

Flow-matching diffusion over patch tokens of an invertible video latent,
conditioned on a reference image, compressed motion history, a short script,
and temporally aligned audio - trained and evaluated on a synthetic corpus
where every conditioning pathway has a measurable ground truth.
"""

from .codec import CodecConfig, LatentVideo, PixelVideo, decode, encode, encode_reference
from .config import RunConfig, StageConfig, build_config, load_config
from .flow import SamplerConfig, euler_step, generate, interpolate, sample_t, velocity_target
from .framepack import MotionHistory, PackSchedule, pack, token_count
from .model import Conditioning, Denoiser, ModelConfig, cfg_velocity, count_parameters
from .tokens import (
    BudgetPlan,
    PatchConfig,
    Segment,
    TokenSequence,
    assemble,
    compute_token_count,
    fit_to_budget,
    patchify,
    unpatchify,
)

__version__ = "0.1.0"
