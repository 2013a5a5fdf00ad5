"""Adversarial purification with caption-conditioned latent diffusion."""

__version__ = "0.1.0"

from .attacks import AttackConfig, AttackResult, Pipeline, bpda_gradient, eot_gradient, pgd_attack, run_attack
from .codec import IdentityCodec, ImageBatch, LatentBatch, PretrainedVAECodec, decode, encode
from .conditioning import (
    Caption,
    ConstantCaptionProvider,
    HashTextEncoder,
    LabelTemplateCaptionProvider,
    TextCondition,
    encode_text,
    generate_captions,
)
from .diffusion import (
    NoiseSource,
    Purifier,
    PurifierConfig,
    forward_diffuse,
    purify,
    reverse_denoise,
)
from .errors import (
    AdapterError,
    AttackError,
    ConfigError,
    ContractError,
    DivergenceError,
    PurifyError,
    ReportError,
    ShapeMismatchError,
)
from .finetune import FinetuneConfig, build_purified_dataset, finetune_classifier
from .harness import EvalReport, evaluate, render_report, sample_fixed_subset
from .schedules import VarianceSchedule, fraction_to_step, make_linear_schedule

__all__ = [name for name in dir() if not name.startswith("_")]
