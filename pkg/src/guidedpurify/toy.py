"""Desk-scale stand-ins: a synthetic two-class dataset, a small noise-prediction
denoiser with additive condition embedding, and a small classifier.

The dataset is deliberately fragile: each class is a faint stripe pattern
(amplitude below 8/255) on mid-grey plus pixel noise, so an undefended
classifier is easy to fool inside an 8/255 L-inf ball.
"""

from __future__ import annotations

import copy
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .codec import ImageBatch
from .conditioning import LabelTemplateCaptionProvider, TextCondition, TextEncoder, encode_text
from .diffusion import ancestral_step, derive_seed
from .errors import DivergenceError
from .schedules import VarianceSchedule

TOY_CLASS_NAMES = ("horizontal", "vertical")
TOY_TEMPLATE = "a photo of {label} stripes"


def stripe_patterns(size: int = 16, period: int = 4) -> torch.Tensor:
    """(2, size, size) patterns of +-1: horizontal stripes, then vertical."""
    idx = torch.arange(size)
    wave = torch.where((idx % period) < period // 2, 1.0, -1.0)
    horizontal = wave[:, None].expand(size, size)
    vertical = wave[None, :].expand(size, size)
    return torch.stack([horizontal, vertical]).to(torch.float64)


def make_toy_dataset(
    n: int,
    seed: int,
    size: int = 16,
    amplitude: float = 0.015,
    noise_std: float = 0.05,
    dtype=torch.float32,
) -> ImageBatch:
    """Balanced two-class stripes dataset: ``0.5 + amplitude * pattern + noise``, clipped to [0, 1].

    Exactly ``n // 2`` images per class (class 1 gets the odd one out), shuffled.
    """
    gen = torch.Generator().manual_seed(derive_seed(seed, 0x70F))
    labels = torch.cat([torch.zeros(n - n // 2, dtype=torch.long), torch.ones(n // 2, dtype=torch.long)])
    labels = labels[torch.randperm(n, generator=gen)]
    patterns = stripe_patterns(size)
    noise = torch.randn(n, 1, size, size, generator=gen, dtype=torch.float64)
    x = 0.5 + amplitude * patterns[labels][:, None] + noise_std * noise
    return ImageBatch(data=x.clamp(0.0, 1.0).to(dtype), labels=labels)


def timestep_embedding(t: torch.Tensor, dim: int, T: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(1000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = (t.float()[:, None] / T) * 1000.0 * freqs[None]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def pool_condition(condition: TextCondition) -> torch.Tensor:
    """Masked mean over tokens; all-zero for the unconditional embedding."""
    mask = condition.mask.to(condition.embedding.dtype)[..., None]
    count = mask.sum(dim=1).clamp(min=1.0)
    return (condition.embedding * mask).sum(dim=1) / count


class _ResBlock(nn.Module):
    def __init__(self, width):
        super().__init__()
        self.norm = nn.LayerNorm(width)
        self.fc1 = nn.Linear(width, width)
        self.fc2 = nn.Linear(width, width)

    def forward(self, h, emb):
        return h + self.fc2(F.silu(self.fc1(F.silu(self.norm(h))) + emb))


class ToyDenoiser(nn.Module):
    """MLP noise predictor; time and pooled caption embeddings are added to hidden features.

    Inputs are preconditioned with the training-set mean image and scalar std so
    that the network sees unit-scale inputs at every step; a time-dependent gain
    carries a linear residual path from input to output.
    """

    def __init__(
        self,
        image_shape: Tuple[int, int, int] = (1, 16, 16),
        T: int = 100,
        hidden: int = 128,
        n_blocks: int = 2,
        time_dim: int = 64,
        max_tokens: int = 16,
        embed_dim: int = 32,
        guidance_scale: float = 1.0,
        x0_clip: Optional[Tuple[float, float]] = (0.0, 1.0),
    ):
        super().__init__()
        self.image_shape = tuple(image_shape)
        self.T = T
        self.time_dim = time_dim
        self.condition_contract = (max_tokens, embed_dim)
        self.guidance_scale = guidance_scale
        self.x0_clip = tuple(x0_clip) if x0_clip is not None else None
        d = int(np.prod(image_shape))
        self.register_buffer("alpha_bars", torch.ones(T + 1))
        self.register_buffer("data_mean", torch.zeros(d))
        self.register_buffer("data_std", torch.ones(()))
        self.inp = nn.Linear(d, hidden)
        self.time_proj = nn.Sequential(nn.Linear(time_dim, hidden), nn.SiLU(), nn.Linear(hidden, hidden))
        self.cond_proj = nn.Sequential(nn.Linear(embed_dim, hidden), nn.SiLU(), nn.Linear(hidden, hidden))
        self.blocks = nn.ModuleList(_ResBlock(hidden) for _ in range(n_blocks))
        self.out = nn.Sequential(nn.LayerNorm(hidden), nn.SiLU(), nn.Linear(hidden, d))
        self.gain = nn.Linear(time_dim, 1)
        self.loss_history: List[float] = []
        self.heldout_history: List[float] = []
        self.epochs_seen = 0

    def fit_preconditioning(self, schedule: VarianceSchedule, data: torch.Tensor) -> None:
        if schedule.T != self.T:
            raise ValueError(f"schedule has T={schedule.T}, denoiser expects {self.T}")
        flat = data.flatten(1).to(torch.float64)
        with torch.no_grad():
            self.alpha_bars.copy_(torch.as_tensor(np.array(schedule.alpha_bars)))
            self.data_mean.copy_(flat.mean(0))
            self.data_std.copy_((flat - flat.mean(0)).std())

    def hparams(self) -> Dict:
        return {
            "image_shape": list(self.image_shape),
            "T": self.T,
            "hidden": self.inp.out_features,
            "n_blocks": len(self.blocks),
            "time_dim": self.time_dim,
            "max_tokens": self.condition_contract[0],
            "embed_dim": self.condition_contract[1],
            "guidance_scale": self.guidance_scale,
            "x0_clip": list(self.x0_clip) if self.x0_clip else None,
        }

    def forward(self, z: torch.Tensor, t: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        """Predict the noise in ``z`` at integer steps ``t`` given pooled conditions ``cond``."""
        ab = self.alpha_bars[t][:, None]
        u = (z.flatten(1) - ab.sqrt() * self.data_mean) / (ab * self.data_std**2 + 1 - ab).sqrt()
        temb = timestep_embedding(t, self.time_dim, self.T)
        emb = self.time_proj(temb) + self.cond_proj(cond)
        h = self.inp(u) + emb
        for block in self.blocks:
            h = block(h, emb)
        return (self.out(h) + self.gain(temb) * u).view_as(z)

    @torch.no_grad()
    def predict_eps(self, z: torch.Tensor, t: int, condition: TextCondition) -> torch.Tensor:
        dtype = self.inp.weight.dtype
        zz = z.to(dtype)
        tt = torch.full((z.shape[0],), t, dtype=torch.long)
        cond = pool_condition(condition).to(dtype)
        eps = self(zz, tt, cond)
        if self.guidance_scale != 1.0:
            eps_u = self(zz, tt, torch.zeros_like(cond))
            eps = eps_u + self.guidance_scale * (eps - eps_u)
        return eps.to(z.dtype)

    def step(self, z, t, noise, condition, schedule, t_prev=None):
        t_prev = t - 1 if t_prev is None else t_prev
        eps = self.predict_eps(z, t, condition)
        return ancestral_step(z, eps, t, t_prev, noise, schedule, x0_clip=self.x0_clip)

    def to_config(self):
        return {"type": "toy", **self.hparams(), "epochs_seen": self.epochs_seen}


class ToyClassifier(nn.Module):
    """Flatten -> MLP -> logits."""

    def __init__(self, image_shape=(1, 16, 16), num_classes: int = 2, hidden: int = 64):
        super().__init__()
        self.image_shape = tuple(image_shape)
        self.num_classes = num_classes
        self.hidden = hidden
        self.net = nn.Sequential(
            nn.Flatten(),
            nn.Linear(int(np.prod(image_shape)), hidden),
            nn.ReLU(),
            nn.Linear(hidden, num_classes),
        )

    def hparams(self):
        return {"image_shape": list(self.image_shape), "num_classes": self.num_classes, "hidden": self.hidden}

    def forward(self, x):
        return self.net(x.to(self.net[1].weight.dtype))


@dataclass
class ToyTrainConfig:
    epochs: int = 40
    batch_size: int = 128
    learning_rate: float = 2e-3
    p_uncond: float = 0.2
    holdout_fraction: float = 0.1
    hidden: int = 128
    n_blocks: int = 2


def _conditions_for(dataset: ImageBatch, encoder: TextEncoder, class_names, template) -> torch.Tensor:
    captions = LabelTemplateCaptionProvider(class_names, template)(dataset)
    return pool_condition(encode_text(encoder, captions))


def _noise_batch(x0, t, schedule, gen):
    ab = torch.tensor(schedule.alpha_bars, dtype=x0.dtype)[t].view(-1, 1, 1, 1)
    eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
    return ab.sqrt() * x0 + (1 - ab).sqrt() * eps, eps


def train_toy_denoiser(
    dataset: ImageBatch,
    schedule: VarianceSchedule,
    encoder: TextEncoder,
    epochs: int = 40,
    seed: int = 0,
    config: Optional[ToyTrainConfig] = None,
    class_names: Sequence[str] = TOY_CLASS_NAMES,
    template: str = TOY_TEMPLATE,
) -> ToyDenoiser:
    """Train a :class:`ToyDenoiser` with the noise-prediction MSE objective.

    Captions come from the label template; with probability ``p_uncond`` a
    sample's condition is dropped to the unconditional embedding, so one model
    serves both guided and unguided purification. A held-out split, noised with
    a fixed seed, is scored before training and after every epoch.
    """
    cfg = config or ToyTrainConfig()
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    gen = torch.Generator().manual_seed(derive_seed(seed, 2))
    with torch.random.fork_rng():
        torch.manual_seed(derive_seed(seed, 1))
        model = ToyDenoiser(
            image_shape=dataset.image_shape,
            T=schedule.T,
            hidden=cfg.hidden,
            n_blocks=cfg.n_blocks,
            max_tokens=encoder.max_tokens,
            embed_dim=encoder.embed_dim,
        )
    x = dataset.data.to(torch.float32)
    model.fit_preconditioning(schedule, x)
    cond = _conditions_for(dataset, encoder, class_names, template).to(torch.float32)
    n_hold = int(round(len(dataset) * cfg.holdout_fraction))
    perm = torch.randperm(len(dataset), generator=gen)
    hold, train = perm[:n_hold], perm[n_hold:]
    if len(train) == 0:
        train = hold

    hold_gen = torch.Generator().manual_seed(derive_seed(seed, 3))
    hold_t = torch.randint(1, schedule.T + 1, (len(hold),), generator=hold_gen)
    hold_zt, hold_eps = _noise_batch(x[hold], hold_t, schedule, hold_gen)

    def heldout_loss():
        if len(hold) == 0:
            return float("nan")
        model.eval()
        with torch.no_grad():
            return F.mse_loss(model(hold_zt, hold_t, cond[hold]), hold_eps).item()

    model.heldout_history.append(heldout_loss())
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    for epoch in range(epochs):
        model.train()
        order = train[torch.randperm(len(train), generator=gen)]
        total, count = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            t = torch.randint(1, schedule.T + 1, (len(idx),), generator=gen)
            zt, eps = _noise_batch(x[idx], t, schedule, gen)
            c = cond[idx]
            drop = torch.rand(len(idx), generator=gen) < cfg.p_uncond
            c = torch.where(drop[:, None], torch.zeros_like(c), c)
            loss = F.mse_loss(model(zt, t, c), eps)
            if not torch.isfinite(loss):
                raise DivergenceError(f"non-finite denoiser loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            count += len(idx)
        model.loss_history.append(total / count)
        model.heldout_history.append(heldout_loss())
        model.epochs_seen += 1
    model.eval()
    return model


def train_classifier(
    dataset: ImageBatch,
    epochs: int = 20,
    seed: int = 0,
    learning_rate: float = 1e-3,
    batch_size: int = 128,
    hidden: int = 64,
    num_classes: int = 2,
) -> ToyClassifier:
    """Plain cross-entropy training of a :class:`ToyClassifier` from scratch."""
    gen = torch.Generator().manual_seed(derive_seed(seed, 12))
    with torch.random.fork_rng():
        torch.manual_seed(derive_seed(seed, 11))
        model = ToyClassifier(dataset.image_shape, num_classes=num_classes, hidden=hidden)
    opt = torch.optim.Adam(model.parameters(), lr=learning_rate)
    x, y = dataset.data.to(torch.float32), dataset.labels
    for _ in range(epochs):
        order = torch.randperm(len(dataset), generator=gen)
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            loss = F.cross_entropy(model(x[idx]), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    model.eval()
    return model


def save_module(model: nn.Module, path) -> None:
    """Checkpoint with hparams; bytes depend only on the model, not on ``path``."""
    buf = io.BytesIO()
    torch.save({"class": type(model).__name__, "hparams": model.hparams(), "state_dict": model.state_dict(),
                "extra": {k: getattr(model, k) for k in ("loss_history", "heldout_history", "epochs_seen")
                          if hasattr(model, k)}}, buf)
    Path(path).write_bytes(buf.getvalue())


def load_module(path) -> nn.Module:
    blob = torch.load(path, map_location="cpu", weights_only=False)
    cls = {"ToyDenoiser": ToyDenoiser, "ToyClassifier": ToyClassifier}[blob["class"]]
    hp = dict(blob["hparams"])
    if "image_shape" in hp:
        hp["image_shape"] = tuple(hp["image_shape"])
    if hp.get("x0_clip") is not None:
        hp["x0_clip"] = tuple(hp["x0_clip"])
    model = cls(**hp)
    model.load_state_dict(blob["state_dict"])
    for k, v in blob.get("extra", {}).items():
        setattr(model, k, copy.deepcopy(v))
    model.eval()
    return model
