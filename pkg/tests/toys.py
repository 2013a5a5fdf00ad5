"""Small fixed models shared by the attack tests and the acceptance suite."""

import torch
import torch.nn as nn


def linear_classifier(d=12, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    model = nn.Linear(d, 2).to(dtype)
    with torch.no_grad():
        model.weight.copy_(torch.randn(2, d, generator=g, dtype=dtype))
        model.bias.copy_(torch.randn(2, generator=g, dtype=dtype))
    return model.requires_grad_(False)


def two_layer_classifier(d=12, hidden=16, classes=3, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    model = nn.Sequential(nn.Flatten(), nn.Linear(d, hidden), nn.Tanh(), nn.Linear(hidden, classes)).to(dtype)
    with torch.no_grad():
        for p in model.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=dtype))
    return model.requires_grad_(False)


class NoisyPurifier:
    """Stochastic stand-in purifier: adds seeded Gaussian noise, then clamps to [0, 1]."""

    def __init__(self, sigma=0.05):
        self.sigma = sigma

    def __call__(self, x, labels=None, seed=0):
        g = torch.Generator().manual_seed(int(seed))
        noise = torch.randn(x.shape, generator=g, dtype=x.dtype)
        return (x + self.sigma * noise).clamp(0, 1)


def identity_purifier(x, labels=None, seed=0):
    return x
