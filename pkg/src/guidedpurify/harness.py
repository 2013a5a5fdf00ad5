"""Dataset ingestion, fixed-subset selection, evaluation and reporting."""

from __future__ import annotations

import csv
import hashlib
import json
import pickle
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Union

import numpy as np
import torch

from .attacks import AttackConfig, AttackResult, Pipeline, run_attack
from .codec import ImageBatch
from .diffusion import derive_seed
from .errors import ConfigError, ReportError

REPORT_SCHEMA_VERSION = 1
REQUIRED_ECHOES = ("purifier", "attacks", "classifier", "caption")


# -- datasets ---------------------------------------------------------------


@dataclass
class DatasetSource:
    """A labelled image collection addressable by integer index.

    ``loader(indices)`` returns ``(images NCHW float in [0,1], labels)``.
    """

    root: str
    size: int
    image_shape: tuple
    loader: Callable[[Sequence[int]], tuple]
    label_names: Optional[List[str]] = None
    split: str = "test"

    def __len__(self):
        return self.size

    def load(self, indices: Sequence[int]) -> ImageBatch:
        images, labels = self.loader(list(indices))
        return ImageBatch(torch.as_tensor(images), torch.as_tensor(labels, dtype=torch.long))

    def to_config(self):
        return {"root": str(self.root), "size": self.size, "image_shape": list(self.image_shape),
                "split": self.split, "label_names": self.label_names}


def _to_float(images: np.ndarray) -> np.ndarray:
    if images.dtype == np.uint8:
        return images.astype(np.float32) / 255.0
    return images.astype(np.float32)


def from_batch(batch: ImageBatch, root: str = "<memory>", label_names=None, split="test") -> DatasetSource:
    data, labels = batch.data, batch.labels

    def loader(idx):
        return data[idx], labels[idx]

    return DatasetSource(root, len(batch), batch.image_shape, loader, label_names, split)


def load_npz(path) -> DatasetSource:
    """``.npz`` with ``images`` (NCHW float in [0,1], or NHWC uint8) and ``labels``."""
    arch = np.load(path, allow_pickle=False)
    images = arch["images"]
    if images.dtype == np.uint8 and images.shape[-1] in (1, 3) and images.shape[1] not in (1, 3):
        images = images.transpose(0, 3, 1, 2)
    images = _to_float(images)
    labels = arch["labels"].astype(np.int64)
    names = [str(n) for n in arch["label_names"]] if "label_names" in arch.files else None
    batch = ImageBatch(torch.from_numpy(np.ascontiguousarray(images)), torch.from_numpy(labels))
    return from_batch(batch, str(path), names)


def load_image_folder(root) -> DatasetSource:
    """Directory of images plus ``labels.csv`` (``filename,label`` rows) or ``labels.json`` ({filename: label}).

    Rows are taken in sorted filename order.
    """
    from PIL import Image

    root = Path(root)
    if (root / "labels.csv").exists():
        with open(root / "labels.csv", newline="") as fh:
            rows = [r for r in csv.reader(fh) if r and r[0] != "filename"]
        mapping = {r[0]: int(r[1]) for r in rows}
    elif (root / "labels.json").exists():
        mapping = {k: int(v) for k, v in json.loads((root / "labels.json").read_text()).items()}
    else:
        raise FileNotFoundError(f"{root} has no labels.csv or labels.json")
    names = None
    if (root / "classes.txt").exists():
        names = [ln.strip() for ln in (root / "classes.txt").read_text().splitlines() if ln.strip()]
    files = sorted(mapping)
    for f in files:
        if not (root / f).exists():
            raise FileNotFoundError(f"label index lists missing file {f}")

    def read(f):
        arr = np.asarray(Image.open(root / f))
        if arr.ndim == 2:
            arr = arr[:, :, None]
        return arr.transpose(2, 0, 1)

    first = read(files[0])

    def loader(idx):
        imgs = np.stack([read(files[i]) for i in idx]) if idx else np.zeros((0, *first.shape), np.uint8)
        return torch.from_numpy(_to_float(imgs)), torch.tensor([mapping[files[i]] for i in idx])

    src = DatasetSource(str(root), len(files), tuple(first.shape), loader, names)
    src.filenames = files
    return src


def load_cifar_batches(root, split: str = "test") -> DatasetSource:
    """CIFAR-10/100 "python version" pickles (``data_batch_*`` / ``test_batch`` or ``train`` / ``test``)."""
    root = Path(root)
    if (root / "test_batch").exists():
        files = sorted(root.glob("data_batch_*")) if split == "train" else [root / "test_batch"]
        label_key = b"labels"
        meta_file, names_key = root / "batches.meta", b"label_names"
    else:
        files = [root / split]
        label_key = b"fine_labels"
        meta_file, names_key = root / "meta", b"fine_label_names"
    data, labels = [], []
    for f in files:
        with open(f, "rb") as fh:
            d = pickle.load(fh, encoding="bytes")
        data.append(np.asarray(d[b"data"], dtype=np.uint8).reshape(-1, 3, 32, 32))
        labels.extend(d[label_key])
    names = None
    if meta_file.exists():
        with open(meta_file, "rb") as fh:
            names = [n.decode() for n in pickle.load(fh, encoding="bytes")[names_key]]
    images = torch.from_numpy(_to_float(np.concatenate(data)))
    batch = ImageBatch(images, torch.tensor(labels))
    return from_batch(batch, str(root), names, split)


def open_dataset(path, split: str = "test") -> DatasetSource:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    if path.suffix == ".npz":
        return load_npz(path)
    if path.is_dir() and ((path / "labels.csv").exists() or (path / "labels.json").exists()):
        return load_image_folder(path)
    if path.is_dir() and ((path / "test_batch").exists() or (path / "test").exists()):
        return load_cifar_batches(path, split)
    if path.is_dir() and (path / "images.npy").exists():
        images = np.load(path / "images.npy")
        labels = np.load(path / "labels.npy")
        return from_batch(ImageBatch(torch.from_numpy(images), torch.from_numpy(labels)), str(path))
    raise ConfigError(f"unrecognised dataset format at {path}")


# -- subset ------------------------------------------------------------------


def sample_fixed_subset(dataset: Union[DatasetSource, int], n: int, seed: int) -> List[int]:
    """``n`` indices drawn uniformly without replacement, returned in ascending order.

    Partial Fisher-Yates over ``range(N)`` driven by ``n`` uniforms from a
    PCG64 stream seeded with ``seed``.
    """
    size = dataset if isinstance(dataset, int) else len(dataset)
    if not 0 < n <= size:
        raise ConfigError(f"subset size {n} must be in [1, {size}]")
    if n == size:
        return list(range(size))
    u = np.random.Generator(np.random.PCG64(seed)).random(n)
    pool = np.arange(size)
    for i in range(n):
        j = i + int(u[i] * (size - i))
        pool[i], pool[j] = pool[j], pool[i]
    return sorted(pool[:n].tolist())


# -- reports -----------------------------------------------------------------


def _bits(mask: torch.Tensor) -> str:
    return "".join("1" if b else "0" for b in mask.tolist())


@dataclass
class EvalReport:
    natural_accuracy: float
    robust_accuracy: Dict[str, float]
    n_evaluated: int
    natural_correct: int
    robust_correct: Dict[str, int]
    subset_seed: int
    subset_indices: List[int]
    config: Dict[str, Any]
    correct_bitmaps: Dict[str, str]
    wall_clock_seconds: float = 0.0
    artifact_checksums: Dict[str, str] = field(default_factory=dict)
    schema_version: int = REPORT_SCHEMA_VERSION

    def validate(self) -> "EvalReport":
        if self.n_evaluated <= 0:
            raise ReportError("n_evaluated must be positive")
        missing = [k for k in REQUIRED_ECHOES if k not in self.config]
        if missing:
            raise ReportError(f"report lacks provenance for {missing}")
        accs = {"natural": self.natural_accuracy, **self.robust_accuracy}
        counts = {"natural": self.natural_correct, **self.robust_correct}
        if set(accs) != set(counts):
            raise ReportError("accuracy and count keys differ")
        for name, acc in accs.items():
            if not 0.0 <= acc <= 100.0:
                raise ReportError(f"{name} accuracy {acc} outside [0, 100]")
            if abs(acc - 100.0 * counts[name] / self.n_evaluated) > 1e-9:
                raise ReportError(f"{name} accuracy inconsistent with its correct count")
            bits = self.correct_bitmaps.get(name)
            if bits is None or len(bits) != self.n_evaluated or bits.count("1") != counts[name]:
                raise ReportError(f"{name} correctness bitmap inconsistent")
        if len(self.subset_indices) != self.n_evaluated:
            raise ReportError("subset_indices length differs from n_evaluated")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return {
            "schema_version": self.schema_version,
            "natural_accuracy": self.natural_accuracy,
            "robust_accuracy": dict(self.robust_accuracy),
            "n_evaluated": self.n_evaluated,
            "natural_correct": self.natural_correct,
            "robust_correct": dict(self.robust_correct),
            "subset_seed": self.subset_seed,
            "subset_indices": list(self.subset_indices),
            "config": self.config,
            "correct_bitmaps": dict(self.correct_bitmaps),
            "wall_clock_seconds": self.wall_clock_seconds,
            "artifact_checksums": dict(self.artifact_checksums),
        }

    @classmethod
    def from_dict(cls, d: Dict[str, Any]) -> "EvalReport":
        if d.get("schema_version") != REPORT_SCHEMA_VERSION:
            raise ReportError(f"unsupported report schema {d.get('schema_version')!r}")
        return cls(**d).validate()

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(render_report(self, "json"))
        return path

    @classmethod
    def load(cls, path) -> "EvalReport":
        return cls.from_dict(json.loads(Path(path).read_text()))


def render_report(report: EvalReport, fmt: str = "table") -> str:
    """``json`` is the lossless machine form; ``table`` mirrors a Natural / Robust layout."""
    report.validate()
    if fmt == "json":
        return json.dumps(report.to_dict(), indent=2)
    if fmt != "table":
        raise ValueError(f"unknown report format {fmt!r}")
    attacks = list(report.robust_accuracy)
    if len(attacks) <= 1:
        headers = ["Natural", "Robust"]
        values = [report.natural_accuracy] + [report.robust_accuracy[a] for a in attacks]
        if not attacks:
            values.append(None)
    else:
        headers = ["Natural"] + [f"Robust ({a})" for a in attacks]
        values = [report.natural_accuracy] + [report.robust_accuracy[a] for a in attacks]
    cells = ["" if v is None else f"{v:.2f}" for v in values]
    widths = [max(len(h), len(c)) for h, c in zip(headers, cells)]
    line = lambda items: "| " + " | ".join(s.rjust(w) for s, w in zip(items, widths)) + " |"
    rule = "|" + "|".join("-" * (w + 2) for w in widths) + "|"
    caption = report.config.get("caption", {})
    notes = [f"n = {report.n_evaluated}, subset seed = {report.subset_seed}"]
    if attacks and len(attacks) == 1:
        notes.append(f"attack: {attacks[0]}")
    if isinstance(caption, dict) and caption.get("uses_ground_truth_labels"):
        notes.append("captions use ground-truth labels (test-only)")
    return "\n".join([line(headers), rule, line(cells), *notes]) + "\n"


# -- evaluation --------------------------------------------------------------


def _echo(obj, default_type="none"):
    if obj is None:
        return {"type": default_type}
    fn = getattr(obj, "to_config", None)
    return fn() if fn else {"type": type(obj).__name__}


def evaluate(
    classifier,
    purifier=None,
    attacks: Optional[Sequence] = None,
    dataset: Union[DatasetSource, ImageBatch, None] = None,
    subset_size: Optional[int] = None,
    seed: int = 0,
    batch_size: int = 256,
    classifier_info: Optional[Dict[str, Any]] = None,
    extra_config: Optional[Dict[str, Any]] = None,
    checksums: Optional[Dict[str, str]] = None,
) -> EvalReport:
    """Natural and robust accuracy of ``purifier -> classifier`` on a fixed subset.

    Every attack (an :class:`AttackConfig` or an external callable
    ``(pipeline, x, y) -> AttackResult``) is run on the same subset in the same
    order. Batch ``b`` is purified with seed ``derive_seed(seed, b)`` for both
    clean and attacked inputs, so natural and robust bitmaps are paired.
    """
    start_time = time.perf_counter()
    if dataset is None:
        raise ConfigError("evaluate needs a dataset")
    source = from_batch(dataset) if isinstance(dataset, ImageBatch) else dataset
    n = len(source) if subset_size is None else min(subset_size, len(source))
    indices = sample_fixed_subset(source, n, seed)
    attacks = list(attacks or [])
    names = []
    for a in attacks:
        name = getattr(a, "name", None) or type(a).__name__
        if name in names:
            raise ConfigError(f"duplicate attack name {name!r}")
        names.append(name)

    pipeline = Pipeline(classifier, purifier)
    natural = []
    robust: Dict[str, list] = {nm: [] for nm in names}
    for b, start in enumerate(range(0, n, batch_size)):
        batch = source.load(indices[start:start + batch_size])
        x, y = batch.data, batch.labels
        pseed = derive_seed(seed, b)
        natural.append(pipeline.predict(x, y, pseed) == y)
        for name, atk in zip(names, attacks):
            if isinstance(atk, AttackConfig):
                cfg = replace(atk, seed=atk.seed + b * 7919)
                result: AttackResult = run_attack(pipeline, x, y, cfg)
            else:
                result = atk(pipeline, x, y)
            robust[name].append(pipeline.predict(result.x_adv, y, pseed) == y)

    nat = torch.cat(natural)
    rob = {k: torch.cat(v) for k, v in robust.items()}
    caption_echo = {"provider": "none"}
    purifier_echo = _echo(purifier)
    if isinstance(purifier_echo, dict) and "caption" in purifier_echo:
        caption_echo = purifier_echo["caption"]
    config = {
        "purifier": purifier_echo,
        "attacks": [a.to_config() if isinstance(a, AttackConfig) else _echo(a) for a in attacks],
        "classifier": classifier_info or {"type": type(classifier).__name__},
        "caption": caption_echo,
        "dataset": source.to_config(),
        "seed": seed,
        "batch_size": batch_size,
        **(extra_config or {}),
    }
    report = EvalReport(
        natural_accuracy=100.0 * int(nat.sum()) / n,
        robust_accuracy={k: 100.0 * int(v.sum()) / n for k, v in rob.items()},
        n_evaluated=n,
        natural_correct=int(nat.sum()),
        robust_correct={k: int(v.sum()) for k, v in rob.items()},
        subset_seed=seed,
        subset_indices=indices,
        config=config,
        correct_bitmaps={"natural": _bits(nat), **{k: _bits(v) for k, v in rob.items()}},
        wall_clock_seconds=time.perf_counter() - start_time,
        artifact_checksums={"subset": hashlib.sha256(json.dumps(indices).encode()).hexdigest(),
                            **(checksums or {})},
    )
    return report.validate()
