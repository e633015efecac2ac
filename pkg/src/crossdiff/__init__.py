"""Cross-domain sequential recommendation with conditional diffusion.

Single-domain histories are lifted into a target domain by generating
pseudo interactions with a language model, grounding them onto the real
catalog via embedding retrieval, and training a conditional diffusion
model to restore target-domain preference vectors from source-domain
conditions. An expert-mixture head fuses the condition with the restored
vector for ranking.
"""

from .config import ABLATIONS, TrainConfig, apply_ablation, load_config
from .corpus import (
    CandidateList,
    Corpus,
    DatasetSplit,
    Event,
    Item,
    TestCase,
    UserRecord,
    build_inter_domain_split,
    load_corpus,
    load_corpus_dir,
    save_corpus,
)
from .diffusion import (
    Denoiser,
    GaussianNoise,
    NoiseSchedule,
    ZeroNoise,
    build_noise_schedule,
    forward_sample,
    posterior_step,
    reverse_generate,
)
from .evaluation import MetricsReport, evaluate, hit_rate_at, ndcg_at, run_sweep
from .model import CrossDomainModel, build_model, load_checkpoint, save_checkpoint
from .synthetic import MappingStubClient, SyntheticSpec, generate_synthetic_corpus
from .trainer import TrainResult, train

__all__ = [
    "ABLATIONS",
    "CandidateList",
    "Corpus",
    "CrossDomainModel",
    "DatasetSplit",
    "Denoiser",
    "Event",
    "GaussianNoise",
    "Item",
    "MappingStubClient",
    "MetricsReport",
    "NoiseSchedule",
    "SyntheticSpec",
    "TestCase",
    "TrainConfig",
    "TrainResult",
    "UserRecord",
    "ZeroNoise",
    "apply_ablation",
    "build_inter_domain_split",
    "build_model",
    "build_noise_schedule",
    "evaluate",
    "forward_sample",
    "generate_synthetic_corpus",
    "hit_rate_at",
    "load_checkpoint",
    "load_config",
    "load_corpus",
    "load_corpus_dir",
    "ndcg_at",
    "posterior_step",
    "reverse_generate",
    "run_sweep",
    "save_checkpoint",
    "save_corpus",
    "train",
]
