"""End-to-end toy benchmark: train the toy stack, then measure natural and
robust accuracy with and without purification."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, Optional

import torch.nn as nn

from .attacks import AttackConfig
from .codec import IdentityCodec, ImageBatch
from .conditioning import ConstantCaptionProvider, HashTextEncoder, LabelTemplateCaptionProvider
from .diffusion import Purifier, PurifierConfig
from .finetune import FinetuneConfig, build_purified_dataset, finetune_classifier, state_checksum
from .harness import EvalReport, evaluate
from .schedules import VarianceSchedule, make_linear_schedule
from .toy import (
    TOY_CLASS_NAMES,
    TOY_TEMPLATE,
    ToyDenoiser,
    ToyTrainConfig,
    make_toy_dataset,
    train_classifier,
    train_toy_denoiser,
)

log = logging.getLogger(__name__)


@dataclass
class ToyBenchmarkConfig:
    seed: int = 0
    n_train: int = 8192
    n_test: int = 512
    T: int = 100
    beta_start: float = 1e-3
    beta_end: float = 0.2
    t_frac: float = 0.5
    denoiser_epochs: int = 40
    hidden: int = 128
    classifier_epochs: int = 20
    finetune_samples: int = 2048
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    subset_size: int = 256
    batch_size: int = 256
    epsilon: float = 8 / 255
    steps: int = 40
    eot_samples: int = 15

    def to_config(self):
        return asdict(self)


@dataclass
class ToyStack:
    config: ToyBenchmarkConfig
    train: ImageBatch
    test: ImageBatch
    schedule: VarianceSchedule
    encoder: HashTextEncoder
    denoiser: ToyDenoiser
    base_classifier: nn.Module
    classifier: nn.Module

    def purifier_config(self, guided: bool = True, seed: Optional[int] = None) -> PurifierConfig:
        captioner = (
            LabelTemplateCaptionProvider(TOY_CLASS_NAMES, TOY_TEMPLATE) if guided else ConstantCaptionProvider("")
        )
        return PurifierConfig(
            t_frac=self.config.t_frac,
            schedule=self.schedule,
            codec=IdentityCodec(),
            captioner=captioner,
            text_encoder=self.encoder,
            denoiser=self.denoiser,
            seed=self.config.seed if seed is None else seed,
        )

    def purifier(self, guided: bool = True) -> Purifier:
        return Purifier(self.purifier_config(guided))

    def checksums(self) -> Dict[str, str]:
        return {
            "denoiser": state_checksum(self.denoiser),
            "base_classifier": state_checksum(self.base_classifier),
            "classifier": state_checksum(self.classifier),
        }


def build_toy_stack(config: Optional[ToyBenchmarkConfig] = None) -> ToyStack:
    """Train the denoiser and classifier, then fine-tune on purified clean samples."""
    cfg = config or ToyBenchmarkConfig()
    train = make_toy_dataset(cfg.n_train, seed=cfg.seed)
    test = make_toy_dataset(cfg.n_test, seed=cfg.seed + 1)
    schedule = make_linear_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    encoder = HashTextEncoder()
    log.info("training toy denoiser (%d epochs)", cfg.denoiser_epochs)
    denoiser = train_toy_denoiser(train, schedule, encoder, epochs=cfg.denoiser_epochs, seed=cfg.seed,
                                  config=ToyTrainConfig(epochs=cfg.denoiser_epochs, hidden=cfg.hidden))
    log.info("training base classifier")
    base = train_classifier(train, epochs=cfg.classifier_epochs, seed=cfg.seed)
    stack = ToyStack(cfg, train, test, schedule, encoder, denoiser, base, base)
    n_ft = min(cfg.finetune_samples, len(train))
    subset = ImageBatch(train.data[:n_ft], train.labels[:n_ft])
    log.info("purifying %d clean samples for fine-tuning", n_ft)
    purified = build_purified_dataset(subset, stack.purifier_config(guided=True), seed=cfg.seed + 17)
    stack.classifier = finetune_classifier(base, purified, cfg.finetune)
    return stack


def attack_configs(cfg: ToyBenchmarkConfig) -> Dict[str, AttackConfig]:
    common = dict(epsilon=cfg.epsilon, steps=cfg.steps, seed=cfg.seed)
    return {
        "pgd": AttackConfig(mode="preprocessor_blind", name="pgd", **common),
        "bpda": AttackConfig(mode="bpda", name="bpda", **common),
        "bpda_eot": AttackConfig(mode="bpda_eot", eot_samples=cfg.eot_samples, name="bpda_eot", **common),
    }


def run_toy_benchmark(stack: ToyStack, adaptive: bool = True) -> Dict[str, EvalReport]:
    """Reports for the undefended base classifier, unguided and guided purification.

    All three share the subset and seeds; adaptive attacks run only against the
    guided stack.
    """
    cfg = stack.config
    attacks = attack_configs(cfg)
    common = dict(dataset=stack.test, subset_size=cfg.subset_size, seed=cfg.seed, batch_size=cfg.batch_size,
                  checksums=stack.checksums())
    reports = {
        "undefended": evaluate(stack.base_classifier, None, [attacks["pgd"]],
                               classifier_info={"type": "toy", "stage": "base"}, **common),
        "unguided": evaluate(stack.classifier, stack.purifier(guided=False), [attacks["pgd"]],
                             classifier_info={"type": "toy", "stage": "finetuned"}, **common),
    }
    guided_attacks = [attacks["pgd"]] + ([attacks["bpda"], attacks["bpda_eot"]] if adaptive else [])
    reports["guided"] = evaluate(stack.classifier, stack.purifier(guided=True), guided_attacks,
                                 classifier_info={"type": "toy", "stage": "finetuned"}, **common)
    return reports
