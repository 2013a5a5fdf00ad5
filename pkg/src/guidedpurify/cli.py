"""``guidedpurify`` command-line interface.

Every command reads one YAML run config plus ``--set key=value`` overrides,
validates it completely, does its work in memory and only then writes its
output directory in one atomic rename. Each output directory holds the
resolved ``config.yaml`` and a ``manifest.json`` with the command line,
package version and SHA-256 of every written file.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import os
import shutil
import sys
import tempfile
from dataclasses import asdict, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
import yaml

from . import __version__
from .attacks import AttackConfig, Pipeline, run_attack
from .benchmark import ToyBenchmarkConfig, build_toy_stack
from .classifiers import load_classifier, save_classifier
from .codec import IdentityCodec, ImageBatch, PretrainedVAECodec
from .conditioning import (
    ConstantCaptionProvider,
    HashTextEncoder,
    LabelTemplateCaptionProvider,
    PretrainedCaptionProvider,
    PretrainedTextEncoder,
)
from .config import RunConfig, load_config, resolve_path
from .diffusion import IdentityDenoiser, PretrainedUNetDenoiser, Purifier, PurifierConfig, derive_seed, purify
from .errors import ConfigError, PurifyError
from .finetune import array_checksum, build_purified_dataset, finetune_classifier, load_purified_dataset, state_checksum
from .harness import DatasetSource, evaluate, from_batch, open_dataset, render_report
from .schedules import schedule_from_config
from .toy import TOY_CLASS_NAMES, load_module, make_toy_dataset, save_module

log = logging.getLogger("guidedpurify")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


# -- paths and outputs --------------------------------------------------------


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def check_output_dir(path, force: bool = False) -> Path:
    out = Path(path)
    if out.exists() and not force and (not out.is_dir() or any(out.iterdir())):
        raise ConfigError(f"output {out} already exists; pass --force to replace it")
    return out


@contextlib.contextmanager
def staged_output(path, cfg: RunConfig, command: str, argv: Sequence[str], force: bool = False, extra=None):
    """Yield a scratch directory that replaces ``path`` only if the block succeeds."""
    out = check_output_dir(path, force)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        yield tmp
        cfg.dump(tmp / "config.yaml")
        files = {p.relative_to(tmp).as_posix(): _sha256(p) for p in sorted(tmp.rglob("*")) if p.is_file()}
        manifest = {
            "command": command,
            "argv": list(argv),
            "version": __version__,
            "seed": cfg.seed,
            "files": files,
            **(extra or {}),
        }
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        if out.exists():
            shutil.rmtree(out)
        os.replace(tmp, out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise


def _write_images(out_dir: Path, batch: ImageBatch, filenames: Optional[List[str]] = None) -> None:
    np.save(out_dir / "images.npy", batch.data.to(torch.float32).numpy())
    if batch.labels is not None:
        np.save(out_dir / "labels.npy", batch.labels.numpy().astype(np.int64))
    if filenames:
        from PIL import Image

        arr = (batch.data.clamp(0, 1) * 255).round().to(torch.uint8).numpy()
        for img, name in zip(arr, filenames):
            pixels = img[0] if img.shape[0] == 1 else img.transpose(1, 2, 0)
            Image.fromarray(pixels).save(out_dir / Path(name).with_suffix(".png").name)


# -- component builders -------------------------------------------------------


def build_schedule(cfg: RunConfig):
    return schedule_from_config(asdict(cfg.schedule))


def build_codec(cfg: RunConfig):
    if cfg.codec.type == "identity":
        return IdentityCodec()
    model_id = cfg.codec.model_id or cfg.denoiser.model_id
    if not model_id:
        raise ConfigError("codec.model_id (or denoiser.model_id) is required for the pretrained codec")
    return PretrainedVAECodec(model_id, subfolder=cfg.codec.subfolder, resolution=cfg.codec.resize,
                              device=cfg.device)


def build_captioner(cfg: RunConfig):
    c = cfg.caption
    if c.provider == "constant":
        return ConstantCaptionProvider(c.text)
    if c.provider == "label_template":
        return LabelTemplateCaptionProvider(c.class_names, c.template)
    return PretrainedCaptionProvider(c.model_id, device=cfg.device)


def build_text_encoder(cfg: RunConfig):
    c = cfg.caption
    if c.encoder == "hash":
        return HashTextEncoder(max_tokens=c.max_tokens, embed_dim=c.embed_dim)
    model_id = c.encoder_model_id or cfg.denoiser.model_id
    if not model_id:
        raise ConfigError("caption.encoder_model_id (or denoiser.model_id) is required for the pretrained encoder")
    subfolder = None if c.encoder_model_id else "text_encoder"
    return PretrainedTextEncoder(model_id, subfolder=subfolder, max_tokens=c.max_tokens, device=cfg.device)


def build_denoiser(cfg: RunConfig, encoder):
    d = cfg.denoiser
    scale = cfg.diffusion.guidance_scale
    if d.type == "stub":
        return IdentityDenoiser()
    if d.type == "toy":
        path = resolve_path(d.checkpoint)
        if not path or not Path(path).exists():
            raise FileNotFoundError(f"toy denoiser checkpoint not found: {d.checkpoint}")
        model = load_module(path)
        if scale is not None:
            model.guidance_scale = float(scale)
        return model
    if not d.model_id:
        raise ConfigError("denoiser.model_id is required for the pretrained denoiser")
    return PretrainedUNetDenoiser(d.model_id, subfolder=d.subfolder, guidance_scale=7.5 if scale is None else scale,
                                  unconditional=encoder.unconditional(1), max_tokens=cfg.caption.max_tokens,
                                  device=cfg.device)


def build_purifier_config(cfg: RunConfig) -> Optional[PurifierConfig]:
    """None when ``denoiser.type`` is ``none`` (undefended classifier)."""
    if cfg.denoiser.type == "none":
        return None
    encoder = build_text_encoder(cfg)
    return PurifierConfig(
        t_frac=cfg.diffusion.t_frac,
        schedule=build_schedule(cfg),
        codec=build_codec(cfg),
        captioner=build_captioner(cfg),
        text_encoder=encoder,
        denoiser=build_denoiser(cfg, encoder),
        seed=cfg.seed,
        sampler_steps=cfg.diffusion.sampler_steps,
    )


def build_classifier(cfg: RunConfig, checkpoint: Optional[str] = None):
    c = cfg.classifier
    return load_classifier(c.type, resolve_path(checkpoint or c.checkpoint), c.model_id, c.dataset,
                           c.threat_model, c.mean, c.std)


def classifier_info(cfg: RunConfig, model) -> Dict:
    return {**asdict(cfg.classifier), "state_checksum": state_checksum(model)}


def open_input(path: str, cfg: RunConfig, split: Optional[str] = None) -> DatasetSource:
    """Open a dataset; ``toy:train`` / ``toy:test`` regenerate the synthetic toy splits."""
    if path in ("toy:train", "toy:test"):
        train = path == "toy:train"
        n = cfg.toy.n_train if train else cfg.toy.n_test
        batch = make_toy_dataset(n, seed=cfg.seed if train else cfg.seed + 1)
        return from_batch(batch, path, list(TOY_CLASS_NAMES), "train" if train else "test")
    resolved = resolve_path(path)
    if resolved.endswith(".npy"):
        if not Path(resolved).exists():
            raise FileNotFoundError(resolved)
        images = torch.from_numpy(np.load(resolved)).to(torch.float32)
        batch = ImageBatch(images)
        return DatasetSource(resolved, len(batch), batch.image_shape, lambda idx: (images[idx], None))
    return open_dataset(resolved, split or cfg.harness.split)


def _load_all(source: DatasetSource) -> ImageBatch:
    images, labels = source.loader(list(range(len(source))))
    labels = None if labels is None else torch.as_tensor(labels, dtype=torch.long)
    return ImageBatch(torch.as_tensor(images), labels)


def _require_input(path: Optional[str], what: str) -> str:
    if not path:
        raise ConfigError(f"no {what} given")
    if path.startswith("toy:"):
        return path
    resolved = resolve_path(path)
    if not Path(resolved).exists():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


# -- commands -----------------------------------------------------------------


def cmd_purify(cfg: RunConfig, args) -> int:
    src = _require_input(args.input, "input")
    check_output_dir(args.output, args.force)
    pcfg = build_purifier_config(cfg)
    if pcfg is None:
        raise ConfigError("purify needs a denoiser (denoiser.type is 'none')")
    source = open_input(src, cfg)
    data = _load_all(source)
    bs = cfg.harness.batch_size
    chunks = []
    for b, start in enumerate(range(0, len(data), bs)):
        labels = None if data.labels is None else data.labels[start:start + bs]
        part = ImageBatch(data.data[start:start + bs], labels)
        chunks.append(purify(part, pcfg, seed=derive_seed(cfg.seed, b)).data)
    out = ImageBatch(torch.cat(chunks), data.labels)
    extra = {"purifier": pcfg.to_config(), "input": str(src), "sample_count": len(out),
             "batch_seeds": "derive_seed(seed, batch_index)", "batch_size": bs}
    with staged_output(args.output, cfg, "purify", args.argv, args.force, extra) as tmp:
        _write_images(tmp, out, getattr(source, "filenames", None))
    print(f"purified {len(out)} images -> {args.output}")
    return EXIT_OK


def cmd_build_dataset(cfg: RunConfig, args) -> int:
    src = _require_input(args.input or cfg.harness.dataset, "input dataset")
    check_output_dir(args.output, args.force)
    pcfg = build_purifier_config(cfg)
    if pcfg is None:
        raise ConfigError("build-dataset needs a denoiser (denoiser.type is 'none')")
    source = open_input(src, cfg, split=args.split)
    data = _load_all(source)
    if data.labels is None:
        raise ConfigError("build-dataset needs a labelled input")
    ds = build_purified_dataset(data, pcfg, seed=cfg.seed, batch_size=cfg.harness.batch_size)
    with staged_output(args.output, cfg, "build-dataset", args.argv, args.force, {"input": str(src)}) as tmp:
        _write_images(tmp, ds.batch)
        (tmp / "dataset.json").write_text(json.dumps(ds.manifest, indent=2, sort_keys=True))
    print(f"wrote {len(ds)} purified samples -> {args.output}")
    return EXIT_OK


def _open_purified(path: str):
    path = resolve_path(path)
    p = Path(path)
    if (p / "dataset.json").exists():
        meta = json.loads((p / "dataset.json").read_text())
        images, labels = np.load(p / "images.npy"), np.load(p / "labels.npy")
        if array_checksum(images, labels) != meta["checksum"]:
            raise PurifyError(f"checksum mismatch in {p}")
        return ImageBatch(torch.from_numpy(images), torch.from_numpy(labels))
    return load_purified_dataset(p).batch


def cmd_finetune(cfg: RunConfig, args) -> int:
    dataset = _require_input(args.dataset or cfg.finetune.dataset, "purified dataset")
    ckpt = args.classifier or cfg.classifier.checkpoint
    if cfg.classifier.type != "robustbench":
        _require_input(ckpt, "classifier checkpoint")
    check_output_dir(args.output, args.force)
    ft_cfg = cfg.finetune.build()
    batch = _open_purified(dataset)
    model = build_classifier(cfg, ckpt)
    tuned = finetune_classifier(model, batch, ft_cfg)
    extra = {"dataset": str(dataset), "sample_count": len(batch), "input_checkpoint": ckpt,
             "finetune": ft_cfg.to_config(),
             "input_state_checksum": state_checksum(model), "state_checksum": state_checksum(tuned),
             "history": getattr(tuned, "finetune_history", [])}
    with staged_output(args.output, cfg, "finetune", args.argv, args.force, extra) as tmp:
        save_classifier(tuned, tmp / "classifier.pt")
    print(f"fine-tuned classifier -> {args.output}")
    return EXIT_OK


def _attack_list(cfg: RunConfig) -> List[AttackConfig]:
    return [a.build() for a in cfg.attack]


def cmd_attack(cfg: RunConfig, args) -> int:
    src = _require_input(args.input or cfg.harness.dataset, "input dataset")
    attacks = _attack_list(cfg)
    if not attacks:
        raise ConfigError("attack needs at least one attack section with a mode")
    check_output_dir(args.output, args.force)
    pcfg = build_purifier_config(cfg)
    classifier = build_classifier(cfg)
    source = open_input(src, cfg)
    data = _load_all(source)
    if data.labels is None:
        raise ConfigError("attack needs a labelled input")
    pipeline = Pipeline(classifier, Purifier(pcfg) if pcfg else None)
    bs = cfg.harness.batch_size
    results = {}
    for atk in attacks:
        parts, success = [], []
        for b, start in enumerate(range(0, len(data), bs)):
            x, y = data.data[start:start + bs], data.labels[start:start + bs]
            res = run_attack(pipeline, x, y, replace(atk, seed=atk.seed + b * 7919))
            parts.append(res.x_adv)
            success.append(res.success)
        results[atk.name] = (torch.cat(parts), torch.cat(success))
    extra = {
        "input": str(src),
        "purifier": pcfg.to_config() if pcfg else {"type": "none"},
        "attacks": {a.name: {**a.to_config(), "success_rate": float(results[a.name][1].float().mean())}
                    for a in attacks},
        "batch_seeds": "attack.seed + 7919 * batch_index",
    }
    with staged_output(args.output, cfg, "attack", args.argv, args.force, extra) as tmp:
        for name, (x_adv, _) in results.items():
            (tmp / name).mkdir()
            _write_images(tmp / name, ImageBatch(x_adv, data.labels))
    for name, (_, success) in results.items():
        print(f"{name}: attack success {100 * success.float().mean():.2f}%")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, args) -> int:
    src = _require_input(args.input or cfg.harness.dataset, "evaluation dataset")
    attacks = _attack_list(cfg)
    out = check_output_dir(args.output, args.force) if args.output else None
    pcfg = build_purifier_config(cfg)
    classifier = build_classifier(cfg)
    source = open_input(src, cfg)
    checksums = {"classifier": state_checksum(classifier)}
    if pcfg is not None and isinstance(pcfg.denoiser, torch.nn.Module):
        checksums["denoiser"] = state_checksum(pcfg.denoiser)
    report = evaluate(
        classifier,
        Purifier(pcfg) if pcfg else None,
        attacks,
        dataset=source,
        subset_size=cfg.harness.subset_size,
        seed=cfg.seed,
        batch_size=cfg.harness.batch_size,
        classifier_info=classifier_info(cfg, classifier),
        checksums=checksums,
    )
    table = render_report(report, "table")
    if out is not None:
        with staged_output(out, cfg, "evaluate", args.argv, args.force) as tmp:
            report.save(tmp / "report.json")
            (tmp / "report.txt").write_text(table)
    print(table, end="")
    return EXIT_OK


def toy_benchmark_config(cfg: RunConfig) -> ToyBenchmarkConfig:
    s = cfg.schedule
    if s.type != "linear":
        raise ConfigError("train-toy uses a linear schedule")
    return ToyBenchmarkConfig(
        seed=cfg.seed, n_train=cfg.toy.n_train, n_test=cfg.toy.n_test, T=s.T, beta_start=s.beta_start,
        beta_end=s.beta_end, t_frac=cfg.diffusion.t_frac, denoiser_epochs=cfg.toy.denoiser_epochs,
        hidden=cfg.toy.hidden, classifier_epochs=cfg.toy.classifier_epochs,
        finetune_samples=cfg.toy.finetune_samples, finetune=cfg.finetune.build(),
        subset_size=cfg.harness.subset_size, batch_size=cfg.harness.batch_size,
    )


def cmd_train_toy(cfg: RunConfig, args) -> int:
    out = check_output_dir(args.output, args.force)
    bench = toy_benchmark_config(cfg)
    stack = build_toy_stack(bench)
    final = out.resolve()
    # A ready-to-run config for `evaluate` that points at the new checkpoints.
    eval_doc = cfg.to_dict()
    eval_doc["denoiser"].update(type="toy", checkpoint=str(final / "denoiser.pt"))
    eval_doc["classifier"].update(type="toy", checkpoint=str(final / "classifier.pt"))
    if not eval_doc["harness"]["dataset"]:
        eval_doc["harness"]["dataset"] = "toy:test"
    extra = {"checksums": stack.checksums(), "benchmark": bench.to_config(),
             "denoiser_heldout_loss": stack.denoiser.heldout_history}
    with staged_output(out, cfg, "train-toy", args.argv, args.force, extra) as tmp:
        save_module(stack.denoiser, tmp / "denoiser.pt")
        save_module(stack.base_classifier, tmp / "classifier_base.pt")
        save_module(stack.classifier, tmp / "classifier.pt")
        (tmp / "eval.yaml").write_text(yaml.safe_dump(eval_doc, sort_keys=False))
    print(f"toy denoiser held-out loss {stack.denoiser.heldout_history[0]:.4f} -> "
          f"{stack.denoiser.heldout_history[-1]:.4f}; checkpoints in {out}")
    return EXIT_OK


COMMANDS = {
    "purify": cmd_purify,
    "build-dataset": cmd_build_dataset,
    "finetune": cmd_finetune,
    "attack": cmd_attack,
    "evaluate": cmd_evaluate,
    "train-toy": cmd_train_toy,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="guidedpurify", description="Caption-guided diffusion purification.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, output_required=True):
        p.add_argument("--config", "-c", help="run config (YAML); pkg://toy.yaml is the bundled toy config")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value, e.g. --set attack.epsilon=4/255 (repeatable)")
        p.add_argument("--output", "-o", required=output_required, help="output directory")
        p.add_argument("--force", action="store_true", help="replace an existing output directory")
        p.add_argument("--verbose", "-v", action="store_true")
        return p

    p = common(sub.add_parser("purify", help="purify a batch of images"))
    p.add_argument("--input", "-i", required=True, help=".npy, .npz, image folder or toy:test")
    p = common(sub.add_parser("build-dataset", help="materialise a purified training set"))
    p.add_argument("--input", "-i", help="labelled dataset (default: harness.dataset)")
    p.add_argument("--split", default="train")
    p = common(sub.add_parser("finetune", help="fine-tune a classifier on a purified dataset"))
    p.add_argument("--dataset", "-d", help="output of build-dataset (default: finetune.dataset)")
    p.add_argument("--classifier", help="input checkpoint (default: classifier.checkpoint)")
    p = common(sub.add_parser("attack", help="generate adversarial examples"))
    p.add_argument("--input", "-i", help="labelled dataset (default: harness.dataset)")
    p = common(sub.add_parser("evaluate", help="natural and robust accuracy report"), output_required=False)
    p.add_argument("--input", "-i", help="evaluation dataset (default: harness.dataset)")
    common(sub.add_parser("train-toy", help="train the toy denoiser and classifiers"))
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(resolve_path(args.config), args.overrides)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (PurifyError, OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
