"""Forward noising, conditioned reverse denoising, and the purification pipeline.

Purification: caption the (possibly adversarial) image, encode it to a latent,
run the forward recursion for ``round(t_frac * T)`` steps, denoise back to
step 0 under the caption condition, decode and clamp.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Protocol, Tuple, runtime_checkable

import numpy as np
import torch

from .codec import ImageBatch, LatentBatch, LatentCodec, decode, encode
from .conditioning import Caption, CaptionProvider, TextCondition, TextEncoder, encode_text, generate_captions
from .errors import AdapterError, ConfigError, ContractError, ShapeMismatchError
from .schedules import VarianceSchedule, fraction_to_step


def derive_seed(*parts: int) -> int:
    """Mix integers into a 63-bit seed (stable across platforms and numpy versions)."""
    if any(int(p) < 0 for p in parts):
        raise ValueError(f"seed components must be non-negative, got {parts}")
    hi, lo = np.random.SeedSequence([int(p) for p in parts]).generate_state(2, dtype=np.uint32)
    return ((int(hi) << 32) | int(lo)) & ((1 << 63) - 1)


class NoiseSource:
    """Seeded Gaussian noise where draw ``i`` depends only on ``(seed, i)``.

    One instance per purify call; never share an instance between concurrent calls.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self.index = 0

    def draw(self, shape, dtype=torch.float32) -> torch.Tensor:
        gen = torch.Generator().manual_seed(derive_seed(self.seed, self.index))
        self.index += 1
        return torch.randn(tuple(shape), generator=gen, dtype=dtype)


class ZeroNoise(NoiseSource):
    """Deterministic sampler: every draw is zero."""

    def __init__(self):
        super().__init__(0)

    def draw(self, shape, dtype=torch.float32):
        self.index += 1
        return torch.zeros(tuple(shape), dtype=dtype)


@runtime_checkable
class Denoiser(Protocol):
    """One reverse step ``z_t -> z_{t_prev}`` under a text condition.

    ``condition_contract`` is the ``(L, d)`` the denoiser accepts, or None for any.
    """

    condition_contract: Optional[Tuple[int, int]]

    def step(
        self,
        z: torch.Tensor,
        t: int,
        noise: torch.Tensor,
        condition: TextCondition,
        schedule: VarianceSchedule,
        t_prev: Optional[int] = None,
    ) -> torch.Tensor: ...


class IdentityDenoiser:
    """Stub denoiser whose every step returns its input."""

    condition_contract = None

    def step(self, z, t, noise, condition, schedule, t_prev=None):
        return z

    def to_config(self):
        return {"type": "stub"}


def ancestral_step(
    z: torch.Tensor,
    eps: torch.Tensor,
    t: int,
    t_prev: int,
    noise: torch.Tensor,
    schedule: VarianceSchedule,
    x0_clip: Optional[Tuple[float, float]] = None,
) -> torch.Tensor:
    """Sample ``z_{t_prev}`` from the Gaussian posterior given a noise prediction.

    Works for non-adjacent ``t_prev < t`` by using the effective beta
    ``1 - abar_t / abar_prev``; for ``t_prev == t - 1`` this is the usual DDPM step.
    """
    ab_t = schedule.alpha_bar(t)
    ab_prev = schedule.alpha_bar(t_prev)
    beta_eff = 1.0 - ab_t / ab_prev
    x0 = (z - math.sqrt(1.0 - ab_t) * eps) / math.sqrt(ab_t)
    if x0_clip is not None:
        x0 = x0.clamp(*x0_clip)
    coef_x0 = math.sqrt(ab_prev) * beta_eff / (1.0 - ab_t)
    coef_z = math.sqrt(1.0 - beta_eff) * (1.0 - ab_prev) / (1.0 - ab_t)
    mean = coef_x0 * x0 + coef_z * z
    if t_prev == 0:
        return mean
    var = beta_eff * (1.0 - ab_prev) / (1.0 - ab_t)
    return mean + math.sqrt(var) * noise


def forward_diffuse(
    z0: LatentBatch,
    schedule: VarianceSchedule,
    step: int,
    noise_source: NoiseSource,
) -> LatentBatch:
    """Apply ``z_t = sqrt(1 - beta_t) z_{t-1} + sqrt(beta_t) eps_t`` for t = 1..step."""
    if not 0 <= step <= schedule.T:
        raise ValueError(f"step {step} outside [0, {schedule.T}]")
    z = z0.data
    for t in range(1, step + 1):
        beta = schedule.beta(t)
        eps = noise_source.draw(z.shape, dtype=z.dtype)
        z = math.sqrt(1.0 - beta) * z + math.sqrt(beta) * eps
    return LatentBatch(data=z, origin_shape=z0.origin_shape)


def reverse_timesteps(from_step: int, sampler_steps: Optional[int] = None) -> List[int]:
    """Descending visit order ``[from_step, ..., 0]``; a respaced subsequence if ``sampler_steps`` is set."""
    if from_step == 0:
        return [0]
    if sampler_steps is None or sampler_steps >= from_step:
        return list(range(from_step, -1, -1))
    if sampler_steps < 1:
        raise ConfigError("sampler_steps must be >= 1")
    ts = np.round(np.linspace(from_step, 0, sampler_steps + 1)).astype(int)
    return sorted(set(ts.tolist()), reverse=True)


def _check_condition(denoiser: Denoiser, condition: TextCondition, batch: int) -> None:
    if len(condition) != batch:
        raise ContractError(f"condition has {len(condition)} rows for a batch of {batch}")
    contract = getattr(denoiser, "condition_contract", None)
    if contract is not None and tuple(condition.contract) != tuple(contract):
        raise ContractError(f"condition shape (L, d)={condition.contract} does not match denoiser contract {contract}")


@torch.no_grad()
def reverse_denoise(
    zT: LatentBatch,
    from_step: int,
    denoiser: Denoiser,
    schedule: VarianceSchedule,
    condition: TextCondition,
    noise_source: NoiseSource,
    sampler_steps: Optional[int] = None,
) -> LatentBatch:
    """Iterate the denoiser from ``from_step`` down to step 0."""
    if not 0 <= from_step <= schedule.T:
        raise ValueError(f"from_step {from_step} outside [0, {schedule.T}]")
    _check_condition(denoiser, condition, zT.data.shape[0])
    z = zT.data
    ts = reverse_timesteps(from_step, sampler_steps)
    for t, t_prev in zip(ts[:-1], ts[1:]):
        eps = noise_source.draw(z.shape, dtype=z.dtype)
        out = denoiser.step(z, t, eps, condition, schedule, t_prev=t_prev)
        if out.shape != z.shape:
            raise ShapeMismatchError(f"denoiser changed latent shape {tuple(z.shape)} -> {tuple(out.shape)}")
        z = out
    return LatentBatch(data=z, origin_shape=zT.origin_shape)


@dataclass
class PurifierConfig:
    """Everything one purification needs.

    ``t_frac`` is the fraction of the forward process applied before denoising.
    """

    t_frac: float
    schedule: VarianceSchedule
    codec: LatentCodec
    captioner: CaptionProvider
    text_encoder: TextEncoder
    denoiser: Denoiser
    seed: int = 0
    sampler_steps: Optional[int] = None
    extra: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.t_frac <= 1.0:
            raise ConfigError(f"t_frac must lie in [0, 1], got {self.t_frac}")

    @property
    def start_step(self) -> int:
        return fraction_to_step(self.t_frac, self.schedule.T)

    def to_config(self) -> Dict[str, Any]:
        def echo(obj):
            fn = getattr(obj, "to_config", None)
            return fn() if fn else {"type": type(obj).__name__}

        sched = dict(self.schedule.to_config())
        sched["start_step"] = self.start_step
        return {
            "t_frac": self.t_frac,
            "schedule": sched,
            "codec": echo(self.codec),
            "caption": echo(self.captioner),
            "text_encoder": echo(self.text_encoder),
            "denoiser": echo(self.denoiser),
            "seed": self.seed,
            "sampler_steps": self.sampler_steps,
            **self.extra,
        }


def purify_with_captions(
    x: ImageBatch, config: PurifierConfig, seed: Optional[int] = None
) -> Tuple[ImageBatch, List[Caption]]:
    """Like :func:`purify` but also returns the captions used as the condition."""
    seed = config.seed if seed is None else seed
    with torch.no_grad():
        captions = generate_captions(config.captioner, x)
        condition = encode_text(config.text_encoder, captions)
        z0 = encode(config.codec, x)
        step = config.start_step
        noise = NoiseSource(seed)
        zt = forward_diffuse(z0, config.schedule, step, noise)
        z = reverse_denoise(zt, step, config.denoiser, config.schedule, condition, noise, config.sampler_steps)
        out = decode(config.codec, z)
    if out.data.shape != x.data.shape:
        raise ShapeMismatchError(f"purified shape {tuple(out.data.shape)} != input {tuple(x.data.shape)}")
    return ImageBatch(data=out.data.to(x.data.dtype), labels=x.labels), captions


def purify(x: ImageBatch, config: PurifierConfig, seed: Optional[int] = None) -> ImageBatch:
    """Caption, encode, partially diffuse, denoise under the caption, decode."""
    return purify_with_captions(x, config, seed)[0]


class Purifier:
    """Tensor-level callable around :func:`purify` for attacks and the harness."""

    def __init__(self, config: PurifierConfig):
        self.config = config

    def __call__(self, x: torch.Tensor, labels: Optional[torch.Tensor] = None, seed: Optional[int] = None) -> torch.Tensor:
        return purify(ImageBatch(x.detach(), labels), self.config, seed).data

    def to_config(self):
        return self.config.to_config()


class PretrainedUNetDenoiser:
    """Adapter around a ``diffusers`` ``UNet2DConditionModel`` (noise prediction).

    Steps are 1-based here and 0-based in diffusers, hence ``t - 1``. With
    ``guidance_scale != 1`` the unconditional embedding is required for
    classifier-free guidance.
    """

    def __init__(
        self,
        model_id: str,
        subfolder: Optional[str] = "unet",
        guidance_scale: float = 7.5,
        unconditional: Optional[TextCondition] = None,
        max_tokens: int = 77,
        device: str = "cpu",
        local_files_only: bool = False,
    ):
        try:
            from diffusers import UNet2DConditionModel
        except ImportError as exc:
            raise AdapterError("the pretrained denoiser needs the optional 'diffusers' package") from exc
        try:
            kwargs = {"subfolder": subfolder} if subfolder else {}
            self.unet = UNet2DConditionModel.from_pretrained(model_id, local_files_only=local_files_only, **kwargs)
        except Exception as exc:
            raise AdapterError(f"could not load denoiser {model_id!r}: {exc}") from exc
        self.unet.to(device).eval().requires_grad_(False)
        self.model_id = model_id
        self.device = device
        self.guidance_scale = guidance_scale
        self.unconditional = unconditional
        self.condition_contract = (max_tokens, self.unet.config.cross_attention_dim)

    @torch.no_grad()
    def step(self, z, t, noise, condition, schedule, t_prev=None):
        t_prev = t - 1 if t_prev is None else t_prev
        zz = z.to(self.device, torch.float32)
        cond = condition.embedding.to(self.device, torch.float32)
        eps = self.unet(zz, t - 1, encoder_hidden_states=cond).sample
        if self.guidance_scale != 1.0:
            if self.unconditional is None:
                raise ContractError("classifier-free guidance needs the unconditional embedding")
            uncond = self.unconditional.embedding[:1].expand(z.shape[0], -1, -1).to(self.device, torch.float32)
            eps_u = self.unet(zz, t - 1, encoder_hidden_states=uncond).sample
            eps = eps_u + self.guidance_scale * (eps - eps_u)
        return ancestral_step(z, eps.to(z.device, z.dtype), t, t_prev, noise, schedule)

    def to_config(self):
        return {"type": "pretrained", "model_id": self.model_id, "guidance_scale": self.guidance_scale}
