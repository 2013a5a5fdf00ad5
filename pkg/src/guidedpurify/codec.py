"""Image batches and the latent encoder/decoder pair diffusion runs between."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Protocol, Tuple, runtime_checkable

import torch
import torch.nn.functional as F

from .errors import AdapterError, ShapeMismatchError


@dataclass
class ImageBatch:
    """Images in NCHW layout with values in [0, 1], optionally labelled."""

    data: torch.Tensor
    labels: Optional[torch.Tensor] = None

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ShapeMismatchError(f"ImageBatch needs a rank-4 (N, C, H, W) tensor, got {tuple(self.data.shape)}")
        if self.labels is not None:
            self.labels = torch.as_tensor(self.labels, dtype=torch.long)
            if self.labels.shape != (self.data.shape[0],):
                raise ShapeMismatchError(
                    f"labels shape {tuple(self.labels.shape)} does not match batch size {self.data.shape[0]}"
                )

    def __len__(self) -> int:
        return self.data.shape[0]

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.data.shape[1:])

    def in_range(self) -> bool:
        return bool(((self.data >= 0) & (self.data <= 1)).all())

    def check_labels(self, num_classes: int) -> None:
        if self.labels is not None and ((self.labels < 0) | (self.labels >= num_classes)).any():
            raise ShapeMismatchError(f"labels outside [0, {num_classes})")


@dataclass
class LatentBatch:
    data: torch.Tensor
    origin_shape: Tuple[int, int, int] = field(default=())

    def __post_init__(self):
        if self.data.ndim != 4:
            raise ShapeMismatchError(f"LatentBatch needs a rank-4 tensor, got {tuple(self.data.shape)}")
        self.origin_shape = tuple(self.origin_shape)


@runtime_checkable
class LatentCodec(Protocol):
    def latent_shape(self, image_shape: Tuple[int, int, int]) -> Tuple[int, int, int]: ...

    def encode(self, x: ImageBatch) -> LatentBatch: ...

    def decode(self, z: LatentBatch) -> ImageBatch: ...


class IdentityCodec:
    """Latent space == pixel space. Used for pixel-space toy runs and tests."""

    name = "identity"

    def latent_shape(self, image_shape):
        return tuple(image_shape)

    def encode(self, x: ImageBatch) -> LatentBatch:
        return LatentBatch(data=x.data, origin_shape=x.image_shape)

    def decode(self, z: LatentBatch) -> ImageBatch:
        if z.origin_shape and tuple(z.data.shape[1:]) != z.origin_shape:
            raise ShapeMismatchError(f"latent {tuple(z.data.shape[1:])} does not decode to {z.origin_shape}")
        return ImageBatch(data=z.data.clamp(0.0, 1.0))

    def to_config(self):
        return {"type": "identity"}


class PretrainedVAECodec:
    """Adapter around a ``diffusers`` ``AutoencoderKL``.

    Encoding uses the posterior mean so that the codec is deterministic. Images
    smaller than ``resolution`` are bilinearly resized up before encoding and
    back down after decoding.
    """

    name = "pretrained"

    def __init__(
        self,
        model_id: str,
        subfolder: Optional[str] = "vae",
        resolution: Optional[int] = 256,
        scaling_factor: Optional[float] = None,
        device: str = "cpu",
        local_files_only: bool = False,
    ):
        self.model_id = model_id
        self.subfolder = subfolder
        self.resolution = resolution
        self.device = device
        try:
            from diffusers import AutoencoderKL
        except ImportError as exc:
            raise AdapterError("the pretrained codec needs the optional 'diffusers' package") from exc
        try:
            kwargs = {"subfolder": subfolder} if subfolder else {}
            self.vae = AutoencoderKL.from_pretrained(model_id, local_files_only=local_files_only, **kwargs)
        except Exception as exc:  # hub / filesystem / format errors all mean "unavailable"
            raise AdapterError(f"could not load VAE {model_id!r}: {exc}") from exc
        self.vae.to(device).eval().requires_grad_(False)
        self.scaling_factor = scaling_factor or getattr(self.vae.config, "scaling_factor", 0.18215)
        self._down = 2 ** (len(self.vae.config.block_out_channels) - 1)

    def _size(self, image_shape):
        _, h, w = image_shape
        if self.resolution is None:
            return h, w
        return self.resolution, self.resolution

    def latent_shape(self, image_shape):
        h, w = self._size(image_shape)
        return (self.vae.config.latent_channels, h // self._down, w // self._down)

    @torch.no_grad()
    def encode(self, x: ImageBatch) -> LatentBatch:
        if x.data.shape[1] != self.vae.config.in_channels:
            raise ShapeMismatchError(
                f"VAE expects {self.vae.config.in_channels} channels, got {x.data.shape[1]}"
            )
        h, w = self._size(x.image_shape)
        img = x.data.to(self.device, torch.float32)
        if (h, w) != tuple(img.shape[-2:]):
            img = F.interpolate(img, size=(h, w), mode="bilinear", align_corners=False)
        posterior = self.vae.encode(img * 2.0 - 1.0).latent_dist
        z = posterior.mean * self.scaling_factor
        return LatentBatch(data=z.to(x.data.dtype).cpu(), origin_shape=x.image_shape)

    @torch.no_grad()
    def decode(self, z: LatentBatch) -> ImageBatch:
        expected = self.latent_shape(z.origin_shape)
        if tuple(z.data.shape[1:]) != expected:
            raise ShapeMismatchError(f"latent shape {tuple(z.data.shape[1:])} != {expected}")
        img = self.vae.decode(z.data.to(self.device, torch.float32) / self.scaling_factor).sample
        img = (img + 1.0) / 2.0
        _, h, w = z.origin_shape
        if tuple(img.shape[-2:]) != (h, w):
            img = F.interpolate(img, size=(h, w), mode="bilinear", align_corners=False, antialias=True)
        return ImageBatch(data=img.clamp(0.0, 1.0).to(z.data.dtype).cpu())

    def to_config(self):
        return {"type": "pretrained", "model_id": self.model_id, "resize": self.resolution}


def encode(codec: LatentCodec, x: ImageBatch) -> LatentBatch:
    return codec.encode(x)


def decode(codec: LatentCodec, z: LatentBatch) -> ImageBatch:
    """Decode and clamp to [0, 1]."""
    out = codec.decode(z)
    return ImageBatch(data=out.data.clamp(0.0, 1.0), labels=out.labels)
