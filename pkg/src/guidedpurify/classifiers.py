"""Classifier adapters. Input normalisation lives here so attack budgets stay in raw pixel units."""

from __future__ import annotations

from pathlib import Path
from typing import Optional, Sequence

import torch
import torch.nn as nn

from .errors import AdapterError
from .toy import ToyClassifier, load_module, save_module


class NormalizedClassifier(nn.Module):
    """Applies ``(x - mean) / std`` per channel, then the wrapped model."""

    def __init__(self, model: nn.Module, mean: Sequence[float], std: Sequence[float]):
        super().__init__()
        self.model = model
        self.register_buffer("mean", torch.tensor(list(mean), dtype=torch.float32).view(1, -1, 1, 1))
        self.register_buffer("std", torch.tensor(list(std), dtype=torch.float32).view(1, -1, 1, 1))

    def forward(self, x):
        return self.model((x - self.mean.to(x.dtype)) / self.std.to(x.dtype))


def load_robustbench(model_id: str, dataset: str = "cifar10", threat_model: str = "Linf", model_dir=None) -> nn.Module:
    try:
        from robustbench.utils import load_model
    except ImportError as exc:
        raise AdapterError("loading RobustBench models needs the optional 'robustbench' package") from exc
    try:
        kwargs = {"model_dir": str(model_dir)} if model_dir else {}
        return load_model(model_name=model_id, dataset=dataset, threat_model=threat_model, **kwargs).eval()
    except Exception as exc:
        raise AdapterError(f"could not load RobustBench model {model_id!r}: {exc}") from exc


def load_classifier(
    kind: str,
    checkpoint: Optional[str] = None,
    model_id: Optional[str] = None,
    dataset: str = "cifar10",
    threat_model: str = "Linf",
    mean: Optional[Sequence[float]] = None,
    std: Optional[Sequence[float]] = None,
) -> nn.Module:
    """Load a classifier for ``kind`` in {toy, torchscript, robustbench}."""
    if kind == "toy":
        if not checkpoint or not Path(checkpoint).exists():
            raise AdapterError(f"toy classifier checkpoint not found: {checkpoint}")
        model = load_module(checkpoint)
    elif kind == "torchscript":
        if not checkpoint or not Path(checkpoint).exists():
            raise AdapterError(f"TorchScript checkpoint not found: {checkpoint}")
        model = torch.jit.load(checkpoint, map_location="cpu").eval()
    elif kind == "robustbench":
        model = load_robustbench(model_id, dataset, threat_model)
    else:
        raise AdapterError(f"unknown classifier type {kind!r}")
    if mean is not None and std is not None:
        model = NormalizedClassifier(model, mean, std).eval()
    return model


def save_classifier(model: nn.Module, path) -> None:
    if isinstance(model, ToyClassifier):
        save_module(model, path)
    elif isinstance(model, torch.jit.ScriptModule):
        model.save(str(path))
    else:
        torch.jit.save(torch.jit.script(model), str(path))
