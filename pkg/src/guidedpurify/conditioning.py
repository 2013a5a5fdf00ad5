"""Caption providers and text encoders.

Captions are produced from the image exactly as it reaches the purifier, so at
attack time they describe the adversarial image. The text encoder turns them
into a per-token conditioning tensor of shape ``(N, L, d)``.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Protocol, Sequence, runtime_checkable

import numpy as np
import torch

from .codec import ImageBatch
from .errors import AdapterError, ContractError

_TOKEN_RE = re.compile(r"[a-z0-9]+")


@dataclass(frozen=True)
class Caption:
    text: str
    provider_id: str

    @property
    def is_null(self) -> bool:
        return self.text.strip() == ""


@dataclass
class TextCondition:
    """Encoded captions.

    Attributes:
        embedding: ``(N, L, d)`` per-token vectors.
        mask: ``(N, L)`` boolean, True where a real token sits.
        captions: the captions that were encoded, in row order.
    """

    embedding: torch.Tensor
    mask: torch.Tensor
    captions: List[Caption] = field(default_factory=list)

    def __post_init__(self):
        if self.embedding.ndim != 3:
            raise ContractError(f"condition embedding must be (N, L, d), got {tuple(self.embedding.shape)}")
        if self.mask.shape != self.embedding.shape[:2]:
            raise ContractError("condition mask must match the (N, L) prefix of the embedding")

    @property
    def contract(self):
        return tuple(self.embedding.shape[1:])

    def __len__(self):
        return self.embedding.shape[0]


@runtime_checkable
class CaptionProvider(Protocol):
    provider_id: str

    def __call__(self, x: ImageBatch) -> List[Caption]: ...


class ConstantCaptionProvider:
    """Every image gets the same caption. An empty string yields unconditional purification."""

    def __init__(self, text: str = ""):
        self.text = text
        self.provider_id = f"constant:{text!r}"

    def __call__(self, x: ImageBatch) -> List[Caption]:
        return [Caption(self.text, self.provider_id) for _ in range(len(x))]

    def to_config(self):
        return {"provider": "constant", "text": self.text}


class LabelTemplateCaptionProvider:
    """Fills a template with the ground-truth class name.

    Test-only: it reads the labels attached to the batch, so reports built with
    it are flagged ``uses_ground_truth_labels``.
    """

    uses_ground_truth_labels = True

    def __init__(self, class_names: Sequence[str], template: str = "a photo of a {label}"):
        if "{label}" not in template:
            raise ValueError("template must contain a '{label}' placeholder")
        self.class_names = list(class_names)
        self.template = template
        self.provider_id = f"label_template:{template}"

    def __call__(self, x: ImageBatch) -> List[Caption]:
        if x.labels is None:
            raise ValueError("label-template captions need labelled images")
        return [
            Caption(self.template.format(label=self.class_names[int(y)]), self.provider_id)
            for y in x.labels.tolist()
        ]

    def to_config(self):
        return {
            "provider": "label_template",
            "template": self.template,
            "class_names": self.class_names,
            "uses_ground_truth_labels": True,
        }


class PretrainedCaptionProvider:
    """BLIP-style image-to-text model loaded through ``transformers``.

    Decoding runs with the model's own generation defaults; they are echoed by
    :meth:`to_config` so reports record what was used.
    """

    def __init__(
        self,
        model_id: str = "Salesforce/blip-image-captioning-base",
        device: str = "cpu",
        max_new_tokens: Optional[int] = None,
        local_files_only: bool = False,
    ):
        self.model_id = model_id
        self.device = device
        self.max_new_tokens = max_new_tokens
        self.provider_id = f"pretrained:{model_id}"
        try:
            from transformers import BlipForConditionalGeneration, BlipProcessor
        except ImportError as exc:
            raise AdapterError("the pretrained caption provider needs 'transformers'") from exc
        try:
            self.processor = BlipProcessor.from_pretrained(model_id, local_files_only=local_files_only)
            self.model = BlipForConditionalGeneration.from_pretrained(model_id, local_files_only=local_files_only)
        except Exception as exc:
            raise AdapterError(f"could not load caption model {model_id!r}: {exc}") from exc
        self.model.to(device).eval()

    @torch.no_grad()
    def __call__(self, x: ImageBatch) -> List[Caption]:
        images = [img for img in (x.data.clamp(0, 1) * 255).round().to(torch.uint8).cpu()]
        if x.data.shape[1] == 1:
            images = [img.expand(3, -1, -1) for img in images]
        try:
            inputs = self.processor(images=images, return_tensors="pt", do_rescale=True).to(self.device)
            kwargs = {"max_new_tokens": self.max_new_tokens} if self.max_new_tokens else {}
            out = self.model.generate(**inputs, **kwargs)
            texts = self.processor.batch_decode(out, skip_special_tokens=True)
        except Exception as exc:
            raise AdapterError(f"caption generation failed: {exc}") from exc
        return [Caption(t.strip(), self.provider_id) for t in texts]

    def to_config(self):
        gen = self.model.generation_config.to_diff_dict() if hasattr(self.model, "generation_config") else {}
        return {"provider": "pretrained", "model_id": self.model_id, "generation_defaults": gen,
                "max_new_tokens": self.max_new_tokens}


def generate_captions(provider: CaptionProvider, x: ImageBatch) -> List[Caption]:
    """One caption per image in ``x``."""
    captions = list(provider(x))
    if len(captions) != len(x):
        raise AdapterError(f"provider {provider.provider_id} returned {len(captions)} captions for {len(x)} images")
    return captions


# -- text encoders ----------------------------------------------------------


@runtime_checkable
class TextEncoder(Protocol):
    max_tokens: int
    embed_dim: int

    def unconditional(self, n: int) -> TextCondition: ...

    def __call__(self, captions: Sequence[Caption]) -> TextCondition: ...


def tokenize(text: str) -> List[str]:
    return _TOKEN_RE.findall(text.lower())


def hash_token_vector(token: str, dim: int) -> np.ndarray:
    """Deterministic pseudo-embedding in [-1, 1) derived from BLAKE2b digests of the token."""
    n_blocks = -(-dim // 16)
    raw = b"".join(
        hashlib.blake2b(f"{block}:{token}".encode("utf-8"), digest_size=64).digest()
        for block in range(n_blocks)
    )
    words = np.frombuffer(raw, dtype="<u4")[:dim].astype(np.float64)
    return words / 2.0**31 - 1.0


class HashTextEncoder:
    """Toy text encoder: each word maps to a fixed hashed vector, padded with zeros to ``max_tokens``.

    The empty caption encodes to all zeros, which is also the unconditional embedding.
    """

    def __init__(self, max_tokens: int = 16, embed_dim: int = 32, dtype=torch.float32):
        self.max_tokens = max_tokens
        self.embed_dim = embed_dim
        self.dtype = dtype
        self._cache: Dict[str, np.ndarray] = {}

    def _vec(self, token):
        if token not in self._cache:
            self._cache[token] = hash_token_vector(token, self.embed_dim)
        return self._cache[token]

    def unconditional(self, n: int) -> TextCondition:
        return TextCondition(
            embedding=torch.zeros(n, self.max_tokens, self.embed_dim, dtype=self.dtype),
            mask=torch.zeros(n, self.max_tokens, dtype=torch.bool),
            captions=[Caption("", "null")] * n,
        )

    def __call__(self, captions: Sequence[Caption]) -> TextCondition:
        emb = np.zeros((len(captions), self.max_tokens, self.embed_dim), dtype=np.float64)
        mask = np.zeros((len(captions), self.max_tokens), dtype=bool)
        for i, cap in enumerate(captions):
            # Truncate at the token budget.
            for j, tok in enumerate(tokenize(cap.text)[: self.max_tokens]):
                emb[i, j] = self._vec(tok)
                mask[i, j] = True
        return TextCondition(
            embedding=torch.from_numpy(emb).to(self.dtype),
            mask=torch.from_numpy(mask),
            captions=list(captions),
        )

    def to_config(self):
        return {"encoder": "hash", "max_tokens": self.max_tokens, "embed_dim": self.embed_dim,
                "truncation": "drop tokens beyond max_tokens"}


class PretrainedTextEncoder:
    """CLIP text tower via ``transformers``; the empty string is the unconditional embedding."""

    def __init__(
        self,
        model_id: str,
        subfolder: Optional[str] = None,
        max_tokens: int = 77,
        device: str = "cpu",
        local_files_only: bool = False,
    ):
        try:
            from transformers import CLIPTextModel, CLIPTokenizer
        except ImportError as exc:
            raise AdapterError("the pretrained text encoder needs 'transformers'") from exc
        kwargs = {"subfolder": subfolder} if subfolder else {}
        tok_kwargs = {"subfolder": "tokenizer"} if subfolder else {}
        try:
            self.tokenizer = CLIPTokenizer.from_pretrained(model_id, local_files_only=local_files_only, **tok_kwargs)
            self.model = CLIPTextModel.from_pretrained(model_id, local_files_only=local_files_only, **kwargs)
        except Exception as exc:
            raise AdapterError(f"could not load text encoder {model_id!r}: {exc}") from exc
        self.model.to(device).eval().requires_grad_(False)
        self.model_id = model_id
        self.device = device
        self.max_tokens = max_tokens
        self.embed_dim = self.model.config.hidden_size

    @torch.no_grad()
    def _encode(self, texts: List[str]) -> TextCondition:
        tok = self.tokenizer(texts, padding="max_length", truncation=True,
                             max_length=self.max_tokens, return_tensors="pt")
        emb = self.model(tok.input_ids.to(self.device))[0].cpu()
        return TextCondition(embedding=emb, mask=tok.attention_mask.bool())

    def unconditional(self, n: int) -> TextCondition:
        cond = self._encode([""] * n)
        cond.captions = [Caption("", "null")] * n
        return cond

    def __call__(self, captions: Sequence[Caption]) -> TextCondition:
        cond = self._encode([c.text for c in captions])
        cond.captions = list(captions)
        return cond

    def to_config(self):
        return {"encoder": "pretrained", "model_id": self.model_id, "max_tokens": self.max_tokens,
                "truncation": "tokenizer truncation at max_tokens"}


def encode_text(encoder: TextEncoder, captions: Sequence[Caption]) -> TextCondition:
    """Encode captions; null (empty) captions take the encoder's unconditional embedding."""
    if len(captions) == 0:
        raise ContractError("encode_text needs at least one caption")
    cond = encoder(captions)
    null_rows = [i for i, c in enumerate(captions) if c.is_null]
    if null_rows:
        uncond = encoder.unconditional(len(null_rows))
        cond.embedding = cond.embedding.clone()
        cond.mask = cond.mask.clone()
        cond.embedding[null_rows] = uncond.embedding.to(cond.embedding.dtype)
        cond.mask[null_rows] = uncond.mask
    return cond
