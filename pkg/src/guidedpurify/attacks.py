"""L-inf PGD against the bare classifier or against purifier + classifier.

Three gradient pathways drive the same PGD loop:

* preprocessor-blind: gradient of the classifier at ``x`` (purifier unseen);
* BPDA: purify ``x``, take the classifier gradient at the purified point and
  pass it straight through the purifier (identity backward);
* BPDA+EOT: average of BPDA gradients over ``n`` purifier seeds.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Callable, List, Optional, Protocol, Union

import torch
import torch.nn.functional as F

from .diffusion import derive_seed
from .errors import AdapterError, AttackError, ConfigError

MODES = ("preprocessor_blind", "bpda", "bpda_eot")

Classifier = Callable[[torch.Tensor], torch.Tensor]
PurifyFn = Callable[..., torch.Tensor]


def parse_epsilon(value: Union[str, float, int]) -> float:
    """Accept floats or ``"k/255"``-style fractions."""
    if isinstance(value, bool):
        raise ConfigError(f"invalid epsilon {value!r}")
    if isinstance(value, (int, float)):
        eps = float(value)
    else:
        try:
            eps = float(Fraction(str(value).strip()))
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigError(f"invalid epsilon {value!r}") from exc
    if not 0.0 <= eps <= 1.0:
        raise ConfigError(f"epsilon must lie in [0, 1], got {eps}")
    return eps


@dataclass
class AttackConfig:
    epsilon: float = 8 / 255
    steps: int = 40
    step_size: Optional[float] = None
    eot_samples: int = 15
    mode: str = "preprocessor_blind"
    seed: int = 0
    random_start: bool = True
    name: Optional[str] = None

    def __post_init__(self):
        self.epsilon = parse_epsilon(self.epsilon)
        if self.mode not in MODES:
            raise ConfigError(f"attack mode must be one of {MODES}, got {self.mode!r}")
        if not isinstance(self.steps, int) or self.steps < 0:
            raise ConfigError(f"steps must be a non-negative integer, got {self.steps!r}")
        if self.step_size is None:
            # eps/4 by default; any positive size works when the ball is degenerate.
            self.step_size = self.epsilon / 4 if self.epsilon > 0 else 1.0 / 255
        self.step_size = float(self.step_size)
        if self.steps > 0 and self.step_size <= 0:
            raise ConfigError("step_size must be positive")
        if not isinstance(self.eot_samples, int) or self.eot_samples < 1:
            raise ConfigError("eot_samples must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        if self.name is None:
            self.name = self.mode if self.mode != "bpda_eot" else f"bpda_eot{self.eot_samples}"

    @property
    def effective_eot(self) -> int:
        return self.eot_samples if self.mode == "bpda_eot" else 1

    def to_config(self):
        cfg = asdict(self)
        cfg["eot_samples"] = self.effective_eot
        return cfg


@dataclass
class AttackResult:
    x_adv: torch.Tensor
    success: torch.Tensor
    losses: List[float]
    config: dict
    seeds: List[List[int]] = field(default_factory=list)


def check_containment(x: torch.Tensor, x_adv: torch.Tensor, epsilon: float) -> None:
    """Raise if ``x_adv`` leaves the eps-ball around ``x`` or the [0, 1] box."""
    tol = 2 * torch.finfo(x_adv.dtype).eps
    if x_adv.shape != x.shape:
        raise AttackError("adversarial batch changed shape")
    if x.numel() == 0:
        return
    if (x_adv - x).abs().max().item() > epsilon + tol:
        raise AttackError("adversarial example left the epsilon ball")
    if x_adv.min().item() < 0.0 or x_adv.max().item() > 1.0:
        raise AttackError("adversarial example left [0, 1]")


def project(x_adv: torch.Tensor, x0: torch.Tensor, epsilon: float) -> torch.Tensor:
    """Projection onto ``B_inf(x0, eps) ∩ [0, 1]^n``."""
    return torch.min(torch.max(x_adv, x0 - epsilon), x0 + epsilon).clamp(0.0, 1.0)


def _ce_grad(classifier: Classifier, x: torch.Tensor, y: torch.Tensor):
    x = x.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        loss = F.cross_entropy(classifier(x), y, reduction="sum")
        (grad,) = torch.autograd.grad(loss, x)
    return grad.detach(), loss.item()


class GradientOracle(Protocol):
    """``(x, y, seed) -> dL/dx`` for a declared target; exposes ``last_loss`` after each call."""

    target: str
    seeds_per_call: int
    last_loss: float

    def __call__(self, x: torch.Tensor, y: torch.Tensor, seed: int) -> torch.Tensor: ...


class ClassifierGradient:
    """Gradient of the summed cross-entropy of the bare classifier."""

    target = "classifier"
    seeds_per_call = 1

    def __init__(self, classifier: Classifier):
        self.classifier = classifier
        self.last_loss = float("nan")

    def __call__(self, x, y, seed=0):
        grad, self.last_loss = _ce_grad(self.classifier, x, y)
        return grad

    def predict(self, x, y, seed=0):
        with torch.no_grad():
            return self.classifier(x).argmax(dim=1)


@dataclass
class Pipeline:
    """Purifier followed by classifier. ``purifier(x, labels, seed)`` returns purified pixels."""

    classifier: Classifier
    purifier: Optional[PurifyFn] = None

    def purify(self, x, y, seed):
        if self.purifier is None:
            return x
        return self.purifier(x, y, seed)

    def predict(self, x, y, seed):
        with torch.no_grad():
            return self.classifier(self.purify(x, y, seed)).argmax(dim=1)


def _bpda(pipeline: Pipeline, x, y, seed):
    x_pur = pipeline.purify(x.detach(), y, seed).to(x.dtype)
    return _ce_grad(pipeline.classifier, x_pur, y)


def bpda_gradient(pipeline: Pipeline, x: torch.Tensor, y: torch.Tensor, seed: int) -> torch.Tensor:
    """Classifier input-gradient at ``purify(x)``, with the purifier treated as identity on the backward pass."""
    return _bpda(pipeline, x, y, seed)[0]


def eot_gradient(
    grad_fn: Callable[[torch.Tensor, torch.Tensor, int], torch.Tensor],
    x: torch.Tensor,
    y: torch.Tensor,
    n: int,
    base_seed: int,
    trace: Optional[list] = None,
) -> torch.Tensor:
    """Mean of ``grad_fn(x, y, base_seed + i)`` for ``i < n``.

    If ``trace`` is a list, ``(seed, gradient)`` pairs are appended to it.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    mean = None
    for i in range(n):
        seed = base_seed + i
        g = grad_fn(x, y, seed)
        if trace is not None:
            trace.append((seed, g))
        # Running mean: stays bitwise equal to g when every draw is identical.
        mean = g.clone() if mean is None else mean + (g - mean) / (i + 1)
    return mean


class BPDAGradient:
    target = "purifier+classifier (identity backward)"
    seeds_per_call = 1

    def __init__(self, pipeline: Pipeline):
        self.pipeline = pipeline
        self.last_loss = float("nan")

    def __call__(self, x, y, seed):
        grad, self.last_loss = _bpda(self.pipeline, x, y, seed)
        return grad

    def predict(self, x, y, seed):
        return self.pipeline.predict(x, y, seed)


class EOTGradient:
    target = "purifier+classifier (identity backward, EOT)"

    def __init__(self, inner, n: int):
        self.inner = inner
        self.seeds_per_call = n
        self.last_loss = float("nan")
        self.last_seeds: List[int] = []

    def __call__(self, x, y, seed):
        trace: list = []
        losses = []

        def fn(xx, yy, s):
            g = self.inner(xx, yy, s)
            losses.append(self.inner.last_loss)
            return g

        grad = eot_gradient(fn, x, y, self.seeds_per_call, seed, trace)
        self.last_seeds = [s for s, _ in trace]
        self.last_loss = sum(losses) / len(losses)
        return grad

    def predict(self, x, y, seed):
        return self.inner.predict(x, y, seed)


def pgd_attack(oracle, x: torch.Tensor, y: torch.Tensor, config: AttackConfig) -> AttackResult:
    """L-inf PGD: ``x <- Proj(x + step_size * sign(grad))``, from a seeded random start.

    Step ``k`` queries the oracle with seed ``config.seed + k * oracle.seeds_per_call``,
    so every purifier draw is attributable. Success flags are judged by the
    oracle's own target evaluated with ``config.seed``.
    """
    if y is None:
        raise ValueError("PGD needs labels")
    eps = config.epsilon
    x0 = x.detach()
    if config.random_start and eps > 0:
        gen = torch.Generator().manual_seed(derive_seed(config.seed, 0x5747))
        delta = (torch.rand(x0.shape, generator=gen, dtype=torch.float64) * 2 - 1) * eps
        x_adv = project(x0 + delta.to(x0.dtype), x0, eps)
    else:
        x_adv = x0.clone()
    stride = getattr(oracle, "seeds_per_call", 1)
    losses: List[float] = []
    seeds: List[List[int]] = []
    for k in range(config.steps):
        step_seed = config.seed + k * stride
        grad = oracle(x_adv, y, step_seed)
        if not torch.isfinite(grad).all():
            raise AttackError(f"non-finite gradient at PGD step {k} (seed {step_seed})")
        losses.append(float(getattr(oracle, "last_loss", float("nan"))))
        seeds.append(list(getattr(oracle, "last_seeds", [step_seed])))
        x_adv = project(x_adv + config.step_size * grad.sign(), x0, eps)
    check_containment(x0, x_adv, eps)
    success = oracle.predict(x_adv, y, config.seed) != y
    return AttackResult(x_adv=x_adv, success=success, losses=losses, config=config.to_config(), seeds=seeds)


def bpda_eot_attack(pipeline: Pipeline, x, y, config: AttackConfig) -> AttackResult:
    """PGD whose per-step gradient is an EOT average of BPDA gradients."""
    if config.mode != "bpda_eot":
        raise ConfigError("bpda_eot_attack needs mode='bpda_eot'")
    return pgd_attack(EOTGradient(BPDAGradient(pipeline), config.eot_samples), x, y, config)


def make_oracle(pipeline: Pipeline, config: AttackConfig):
    if config.mode == "preprocessor_blind":
        return ClassifierGradient(pipeline.classifier)
    if config.mode == "bpda":
        return BPDAGradient(pipeline)
    return EOTGradient(BPDAGradient(pipeline), config.eot_samples)


def run_attack(pipeline: Pipeline, x, y, config: AttackConfig) -> AttackResult:
    """Dispatch on ``config.mode``."""
    return pgd_attack(make_oracle(pipeline, config), x, y, config)


class AutoAttackAdapter:
    """Slot for the external ``autoattack`` package (standard L-inf version).

    Attacks the bare classifier; the harness then evaluates the purified result.
    """

    def __init__(self, epsilon=8 / 255, version="standard", seed=0, name="autoattack"):
        try:
            from autoattack import AutoAttack  # noqa: F401
        except ImportError as exc:
            raise AdapterError("AutoAttack requires the external 'autoattack' package") from exc
        self.epsilon = parse_epsilon(epsilon)
        self.version = version
        self.seed = seed
        self.name = name

    def __call__(self, pipeline: Pipeline, x, y) -> AttackResult:
        from autoattack import AutoAttack

        adversary = AutoAttack(pipeline.classifier, norm="Linf", eps=self.epsilon, version=self.version,
                               seed=self.seed, device=str(x.device))
        x_adv = adversary.run_standard_evaluation(x, y, bs=len(x)).detach()
        x_adv = project(x_adv, x, self.epsilon)
        check_containment(x, x_adv, self.epsilon)
        with torch.no_grad():
            success = pipeline.classifier(x_adv).argmax(1) != y
        cfg = {"mode": "external:autoattack", "epsilon": self.epsilon, "version": self.version,
               "seed": self.seed, "name": self.name}
        return AttackResult(x_adv=x_adv, success=success, losses=[], config=cfg)
