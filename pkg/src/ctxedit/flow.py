"""Flow-matching objective, linear interpolant and Euler sampler."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import torch

from .errors import NonFiniteActivation, NonFiniteInput, ShapeMismatch


@dataclass
class SamplerConfig:
    steps: int = 50
    seed: int = 0

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise ValueError("sampler needs at least one step")

    def grid(self) -> torch.Tensor:
        return torch.linspace(0.0, 1.0, self.steps + 1, dtype=torch.float64)


def interpolate(x0: torch.Tensor, x1: torch.Tensor, t) -> torch.Tensor:
    """``t * x1 + (1 - t) * x0``; ``t`` is a scalar or broadcasts against the leading axis."""
    if x0.shape != x1.shape:
        raise ShapeMismatch(f"x0 {tuple(x0.shape)} vs x1 {tuple(x1.shape)}")
    t = torch.as_tensor(t, dtype=x1.dtype)
    if t.ndim == 1:
        t = t.reshape(-1, *([1] * (x1.ndim - 1)))
    return t * x1 + (1 - t) * x0


def fm_loss(v_pred: torch.Tensor, x0: torch.Tensor, x1: torch.Tensor) -> torch.Tensor:
    """Mean squared error between predicted velocity and ``x1 - x0``."""
    if not (v_pred.shape == x0.shape == x1.shape):
        raise ShapeMismatch(f"shapes differ: {tuple(v_pred.shape)}, {tuple(x0.shape)}, {tuple(x1.shape)}")
    for name, x in (("v_pred", v_pred), ("x0", x0), ("x1", x1)):
        if not torch.isfinite(x).all():
            raise NonFiniteInput(f"{name} has non-finite entries")
    return ((v_pred - (x1 - x0)) ** 2).mean()


def draw_noise(preps, generator: torch.Generator, dtype) -> tuple[torch.Tensor, list[torch.Tensor]]:
    """Uniform ``t`` per sample, then one standard normal ``x0`` per sample, in batch order."""
    t = torch.rand(len(preps), generator=generator, dtype=torch.float64).to(dtype)
    x0 = [torch.randn(p.x1.shape, generator=generator, dtype=torch.float64).to(dtype) for p in preps]
    return t, x0


def flow_loss(model, preps, generator: torch.Generator) -> tuple[torch.Tensor, torch.Tensor]:
    """Batch loss and per-sample losses; only noisy tokens are supervised."""
    dtype = model.codec.weight.dtype
    t, x0 = draw_noise(preps, generator, dtype)
    x_t = [interpolate(a, p.x1, ti) for a, p, ti in zip(x0, preps, t)]
    v = model.velocity(preps, x_t, t)
    per = torch.stack([fm_loss(vi, a, p.x1) for vi, a, p in zip(v, x0, preps)])
    return per.mean(), per.detach()


def training_step(model, preps, generator: torch.Generator):
    """Loss, per-sample losses and gradients for every named parameter."""
    model.zero_grad(set_to_none=True)
    loss, per = flow_loss(model, preps, generator)
    loss.backward()
    grads = {n: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
             for n, p in model.named_parameters()}
    return loss.detach(), per, grads


def euler_integrate(velocity: Callable[[torch.Tensor, float], torch.Tensor], x0: torch.Tensor,
                    steps: int) -> torch.Tensor:
    """Explicit Euler on the uniform grid ``t_k = k / steps`` from 0 to 1."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    x = x0
    dt = 1.0 / steps
    for k in range(steps):
        x = x + dt * velocity(x, k / steps)
    return x


@torch.no_grad()
def sample_ode(model, preps, cfg: SamplerConfig, seeds: Optional[Sequence[int]] = None) -> list[torch.Tensor]:
    """Integrate the learned field from seeded Gaussian noise for each prepared sample.

    Condition tokens are computed once and reused at every step.
    """
    single = not isinstance(preps, (list, tuple))
    preps = [preps] if single else list(preps)
    seeds = [cfg.seed] * len(preps) if seeds is None else list(seeds)
    dtype = model.codec.weight.dtype
    xs = []
    for p, s in zip(preps, seeds):
        g = torch.Generator().manual_seed(int(s))
        xs.append(torch.randn(p.x1.shape, generator=g, dtype=torch.float64).to(dtype))
    grids = [model.condition_grids(p) for p in preps]
    dt = 1.0 / cfg.steps
    for k in range(cfg.steps):
        t = torch.full((len(preps),), k / cfg.steps, dtype=dtype)
        v = model.velocity(preps, xs, t, grids)
        xs = [x + dt * vi for x, vi in zip(xs, v)]
        if not all(torch.isfinite(x).all() for x in xs):
            raise NonFiniteActivation(k, "sampler step")
    return xs[0] if single else xs
