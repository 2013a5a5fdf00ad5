"""Fine-tune a classifier on purified clean samples.

The purified set is built once and written to disk as fixed-layout ``.npy``
arrays plus a JSON manifest; training then runs over those stored samples.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
import shutil
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .codec import ImageBatch
from .diffusion import PurifierConfig, derive_seed, purify
from .errors import ConfigError, DivergenceError

MANIFEST_VERSION = 1


def array_checksum(images: np.ndarray, labels: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(images).tobytes())
    h.update(np.ascontiguousarray(labels).tobytes())
    return h.hexdigest()


def state_checksum(module: nn.Module) -> str:
    """SHA-256 over a module's state dict, in key order."""
    h = hashlib.sha256()
    for key, value in module.state_dict().items():
        h.update(key.encode())
        h.update(value.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


@dataclass
class PurifiedDataset:
    batch: ImageBatch
    manifest: Dict

    def __len__(self):
        return len(self.batch)


def build_purified_dataset(
    dataset: ImageBatch,
    purifier_config: PurifierConfig,
    seed: int,
    out_dir=None,
    batch_size: int = 256,
) -> PurifiedDataset:
    """Replace every sample by its purification; labels are kept.

    Batch ``b`` is purified with seed ``derive_seed(seed, b)``. When ``out_dir``
    is given the result is written there atomically: either the complete
    directory appears or nothing does.
    """
    if dataset.labels is None:
        raise ValueError("the dataset to purify must carry labels")
    chunks = []
    for b, start in enumerate(range(0, len(dataset), batch_size)):
        part = ImageBatch(dataset.data[start:start + batch_size], dataset.labels[start:start + batch_size])
        chunks.append(purify(part, purifier_config, seed=derive_seed(seed, b)).data)
    data = torch.cat(chunks) if chunks else dataset.data[:0]
    batch = ImageBatch(data=data, labels=dataset.labels.clone())
    images = batch.data.to(torch.float32).numpy()
    labels = batch.labels.numpy().astype(np.int64)
    manifest = {
        "schema_version": MANIFEST_VERSION,
        "purifier": purifier_config.to_config(),
        "seed": seed,
        "batch_size": batch_size,
        "sample_count": int(len(batch)),
        "image_shape": list(batch.image_shape),
        "checksum": array_checksum(images, labels),
        "layout": {"images": "images.npy float32 (N, C, H, W)", "labels": "labels.npy int64 (N,)"},
        "subset": "full input set",
    }
    if out_dir is not None:
        save_dataset(out_dir, images, labels, manifest)
    return PurifiedDataset(batch=batch, manifest=manifest)


def save_dataset(out_dir, images: np.ndarray, labels: np.ndarray, manifest: Dict) -> None:
    out_dir = Path(out_dir)
    if out_dir.exists():
        raise FileExistsError(f"{out_dir} already exists")
    out_dir.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out_dir.name}.", dir=out_dir.parent))
    try:
        np.save(tmp / "images.npy", images)
        np.save(tmp / "labels.npy", labels)
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        os.replace(tmp, out_dir)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def load_purified_dataset(path) -> PurifiedDataset:
    """Load a materialized dataset and verify its checksum."""
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    images = np.load(path / "images.npy")
    labels = np.load(path / "labels.npy")
    if array_checksum(images, labels) != manifest["checksum"]:
        raise ValueError(f"checksum mismatch in {path}")
    return PurifiedDataset(ImageBatch(torch.from_numpy(images), torch.from_numpy(labels)), manifest)


@dataclass
class FinetuneConfig:
    epochs: int = 15
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    batch_size: int = 128
    seed: int = 0
    augment: bool = False

    def __post_init__(self):
        if not isinstance(self.epochs, int) or self.epochs < 0:
            raise ConfigError("epochs must be a non-negative integer")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    def to_config(self):
        return asdict(self)


def _augment(x: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    flip = torch.rand(x.shape[0], generator=gen) < 0.5
    return torch.where(flip[:, None, None, None], x.flip(-1), x)


def finetune_classifier(classifier: nn.Module, dataset, config: FinetuneConfig) -> nn.Module:
    """Minimise mean cross-entropy of ``classifier`` on the (purified) dataset.

    Returns a new module; the input is never modified. Per-epoch mean losses
    are stored on the result as ``finetune_history``.

    Raises:
        DivergenceError: on a non-finite loss; ``snapshot`` holds the state
            dict from the end of the last completed epoch.
    """
    batch = dataset.batch if isinstance(dataset, PurifiedDataset) else dataset
    if len(batch) == 0:
        raise ValueError("cannot fine-tune on an empty dataset")
    model = copy.deepcopy(classifier)
    history: List[float] = []
    model.finetune_history = history
    if config.epochs == 0:
        return model

    gen = torch.Generator().manual_seed(derive_seed(config.seed, 21))
    params = [p for p in model.parameters() if p.requires_grad]
    if config.optimizer == "adam":
        opt = torch.optim.Adam(params, lr=config.learning_rate)
    else:
        opt = torch.optim.SGD(params, lr=config.learning_rate)
    x, y = batch.data, batch.labels
    dtype = next(model.parameters()).dtype
    last_good = copy.deepcopy(model.state_dict())
    model.train()
    for epoch in range(config.epochs):
        order = torch.randperm(len(batch), generator=gen)
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            xb = x[idx].to(dtype)
            if config.augment:
                xb = _augment(xb, gen)
            loss = F.cross_entropy(model(xb), y[idx])
            if not torch.isfinite(loss):
                model.load_state_dict(last_good)
                raise DivergenceError(f"non-finite loss in epoch {epoch}", snapshot=last_good)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        history.append(total / len(order))
        last_good = copy.deepcopy(model.state_dict())
    model.eval()
    return model
