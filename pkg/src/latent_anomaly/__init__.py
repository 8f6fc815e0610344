"""Conditioned partial-diffusion anomaly detection on synthetic patch latents."""
from ._kernels import BACKEND
from .denoiser import (
    AnalyticDenoiser,
    ArchetypeMixture,
    ConditionEmbedding,
    DenoiserNet,
    analytic_eps,
    condition_weights,
    loss_and_grad,
    net_forward,
)
from .diffusion import NoiseSchedule, build_schedule, forward_diffuse, posterior_params
from .evaluation import EvalConfig, EvalReport, evaluate, timestep_sweep
from .prompting import KeywordPool, WeightedPrompt, compose_condition, select_keywords, similarities
from .sampler import make_grid, reconstruct, sample
from .synthdata import Dataset, SlideGrid, build_world, gen_dataset

__version__ = "0.1.0"
