import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from guidedpurify.attacks import (
    AttackConfig,
    AutoAttackAdapter,
    BPDAGradient,
    ClassifierGradient,
    EOTGradient,
    Pipeline,
    bpda_eot_attack,
    bpda_gradient,
    check_containment,
    eot_gradient,
    parse_epsilon,
    pgd_attack,
    project,
    run_attack,
)
from guidedpurify.errors import AdapterError, AttackError, ConfigError
from toys import NoisyPurifier, identity_purifier, linear_classifier, two_layer_classifier


def _data(n=6, d=12, seed=0, dtype=torch.float64, classes=2):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n, d, generator=g, dtype=dtype), torch.randint(0, classes, (n,), generator=g)


@pytest.mark.parametrize(
    "text, value",
    [("8/255", 8 / 255), ("0", 0.0), (0.5, 0.5), ("4/255", 4 / 255), (1, 1.0), (" 2/255 ", 2 / 255)],
)
def test_parse_epsilon(text, value):
    assert parse_epsilon(text) == pytest.approx(value, abs=0, rel=1e-15)


@pytest.mark.parametrize("bad", ["8/0", "eight", "-1/255", "2", True, "", "1/2/3"])
def test_parse_epsilon_rejects(bad):
    with pytest.raises(ConfigError):
        parse_epsilon(bad)


def test_attack_config_defaults():
    cfg = AttackConfig()
    assert cfg.epsilon == 8 / 255 and cfg.steps == 40 and cfg.step_size == pytest.approx(2 / 255)
    assert cfg.name == "preprocessor_blind" and cfg.effective_eot == 1
    eot = AttackConfig(mode="bpda_eot", eot_samples=15)
    assert eot.name == "bpda_eot15" and eot.effective_eot == 15
    with pytest.raises(ConfigError):
        AttackConfig(mode="fgsm")
    with pytest.raises(ConfigError):
        AttackConfig(eot_samples=0)


@pytest.mark.parametrize("mode", ["preprocessor_blind", "bpda", "bpda_eot"])
def test_zero_epsilon_returns_input(mode):
    x, y = _data()
    pipe = Pipeline(linear_classifier(), NoisyPurifier())
    res = run_attack(pipe, x, y, AttackConfig(epsilon=0, steps=5, mode=mode, eot_samples=3))
    assert torch.equal(res.x_adv, x)


def test_one_step_linear_closed_form():
    model = linear_classifier(d=12, seed=4)
    g = torch.Generator().manual_seed(1)
    x = 0.1 + 0.8 * torch.rand(64, 12, generator=g, dtype=torch.float64)
    y = torch.randint(0, 2, (64,), generator=g)
    eps = 8 / 255
    cfg = AttackConfig(epsilon=eps, steps=1, step_size=eps, random_start=False)
    res = pgd_attack(ClassifierGradient(model), x, y, cfg)
    w_diff = model.weight[1] - model.weight[0]
    direction = torch.where(y[:, None] == 0, w_diff.sign(), -w_diff.sign())
    expected = (x + eps * direction).clamp(0, 1)
    assert torch.equal((res.x_adv - x).sign(), direction)
    assert (res.x_adv - expected).abs().max().item() <= 1e-9


def test_bpda_identity_purifier_equals_classifier_gradient():
    model = two_layer_classifier()
    x, y = _data(classes=3)
    got = bpda_gradient(Pipeline(model, identity_purifier), x, y, seed=5)
    xr = x.clone().requires_grad_(True)
    F.cross_entropy(model(xr), y, reduction="sum").backward()
    assert torch.equal(got, xr.grad)


def test_bpda_uses_purified_point():
    model = two_layer_classifier()
    x, y = _data(classes=3)
    purifier = NoisyPurifier(0.2)
    got = bpda_gradient(Pipeline(model, purifier), x, y, seed=5)
    xp = purifier(x, y, 5).requires_grad_(True)
    F.cross_entropy(model(xp), y, reduction="sum").backward()
    assert torch.equal(got, xp.grad)


def _stochastic_grad(x, y, seed):
    g = torch.Generator().manual_seed(seed)
    return x * 2.0 + torch.randn(x.shape, generator=g, dtype=x.dtype)


def test_eot_single_sample_is_base_gradient():
    x, y = _data()
    assert torch.equal(eot_gradient(_stochastic_grad, x, y, 1, 17), _stochastic_grad(x, y, 17))


@pytest.mark.parametrize("n", [1, 2, 3, 7, 10, 15, 33])
def test_eot_of_deterministic_gradient_is_exact(n):
    x, y = _data()
    g = torch.randn(x.shape, dtype=torch.float64) / 3

    def fn(xx, yy, seed):
        return g.clone()

    assert torch.equal(eot_gradient(fn, x, y, n, 0), g)


def test_eot_matches_logged_mean():
    x, y = _data()
    pipe = Pipeline(two_layer_classifier(classes=2), NoisyPurifier(0.1))
    trace = []
    got = eot_gradient(lambda a, b, s: bpda_gradient(pipe, a, b, s), x, y, 10, 100, trace)
    assert [s for s, _ in trace] == list(range(100, 110))
    recomputed = sum(bpda_gradient(pipe, x, y, s) for s, _ in trace) / 10
    assert (got - recomputed).abs().max().item() <= 1e-6


def test_eot_affine_stochastic_mean_is_analytic():
    # grad_fn(x; s) = A x + b + xi_s, so the EOT mean is A x + b + mean(xi_s).
    g = torch.Generator().manual_seed(0)
    A = torch.randn(12, 12, generator=g, dtype=torch.float64)
    b = torch.randn(12, generator=g, dtype=torch.float64)

    def xi(seed):
        return torch.randn(12, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)

    def fn(x, y, seed):
        return x @ A.T + b + xi(seed)

    x, y = _data()
    n = 9
    expected = x @ A.T + b + torch.stack([xi(40 + i) for i in range(n)]).mean(0)
    assert torch.allclose(eot_gradient(fn, x, y, n, 40), expected, rtol=0, atol=1e-12)


def test_eot_with_eot_one_reproduces_bpda_trajectory():
    x, y = _data(classes=3)
    pipe = Pipeline(two_layer_classifier(), NoisyPurifier(0.1))
    common = dict(epsilon=0.1, steps=10, seed=3)
    plain = run_attack(pipe, x, y, AttackConfig(mode="bpda", **common))
    eot = bpda_eot_attack(pipe, x, y, AttackConfig(mode="bpda_eot", eot_samples=1, **common))
    assert torch.equal(plain.x_adv, eot.x_adv)
    assert plain.losses == eot.losses
    assert plain.seeds == eot.seeds


def test_eot_step_seeds_are_disjoint():
    x, y = _data(classes=3)
    pipe = Pipeline(two_layer_classifier(), NoisyPurifier(0.1))
    res = bpda_eot_attack(pipe, x, y, AttackConfig(mode="bpda_eot", eot_samples=4, steps=3, seed=10))
    assert res.seeds == [[10, 11, 12, 13], [14, 15, 16, 17], [18, 19, 20, 21]]


def test_eot_gradient_object_records_seeds():
    x, y = _data(classes=3)
    oracle = EOTGradient(BPDAGradient(Pipeline(two_layer_classifier(), NoisyPurifier())), 3)
    oracle(x, y, 5)
    assert oracle.last_seeds == [5, 6, 7]


@pytest.mark.parametrize("mode", ["preprocessor_blind", "bpda", "bpda_eot"])
def test_attack_seed_determinism(mode):
    x, y = _data(classes=3)
    pipe = Pipeline(two_layer_classifier(), NoisyPurifier(0.1))
    cfg = AttackConfig(epsilon=0.05, steps=5, mode=mode, eot_samples=3, seed=2)
    a, b = run_attack(pipe, x, y, cfg), run_attack(pipe, x, y, cfg)
    assert torch.equal(a.x_adv, b.x_adv)
    assert torch.equal(a.success, b.success)
    assert a.losses == b.losses


def test_pgd_raises_loss_on_linear_model():
    model = linear_classifier(seed=2)
    x, y = _data(n=32)
    res = pgd_attack(ClassifierGradient(model), x, y, AttackConfig(epsilon=0.1, steps=10, random_start=False))
    before = F.cross_entropy(model(x), y, reduction="sum").item()
    after = F.cross_entropy(model(res.x_adv), y, reduction="sum").item()
    assert after > before


def test_non_finite_gradient_raises():
    class Bad:
        def __call__(self, x, y, seed):
            return torch.full_like(x, float("nan"))

        def predict(self, x, y, seed):
            return y

    x, y = _data()
    with pytest.raises(AttackError):
        pgd_attack(Bad(), x, y, AttackConfig(steps=1))


def test_check_containment_detects_violations():
    x = torch.full((2, 3), 0.5, dtype=torch.float64)
    check_containment(x, x + 0.1, 0.1)
    with pytest.raises(AttackError):
        check_containment(x, x + 0.11, 0.1)
    with pytest.raises(AttackError):
        check_containment(torch.ones(1), torch.ones(1) + 1e-3, 0.1)


_box = st.floats(0, 1, allow_nan=False)


@settings(max_examples=200, deadline=None)
@given(
    x0=st.lists(_box, min_size=1, max_size=8),
    eps=st.floats(0, 1),
    shift=st.lists(st.floats(-2, 2), min_size=8, max_size=8),
)
def test_projection_feasible_and_idempotent(x0, eps, shift):
    x0 = torch.tensor(x0, dtype=torch.float64)
    p = project(x0 + torch.tensor(shift[: len(x0)], dtype=torch.float64), x0, eps)
    check_containment(x0, p, eps)
    assert torch.equal(project(p, x0, eps), p)


def test_autoattack_adapter_reports_missing_package(monkeypatch):
    import builtins

    real_import = builtins.__import__

    def fake_import(name, *args, **kwargs):
        if name == "autoattack":
            raise ImportError("no autoattack")
        return real_import(name, *args, **kwargs)

    monkeypatch.setattr(builtins, "__import__", fake_import)
    with pytest.raises(AdapterError):
        AutoAttackAdapter()
