"""Adversarial loss algebra for the two-discriminator objective.

All functions are pure given their tensor inputs (and an epsilon seed for
the gradient penalty) and differentiable wherever training needs them.
"""

from __future__ import annotations

from typing import Callable

import torch

from .errors import InvalidArgumentError

L1_WEIGHT = 100.0
DEFAULT_GP_WEIGHT = 10.0

OBJECTIVE_MODES = ("no_l1", "with_l1")


def _check_nonempty(name: str, t: torch.Tensor) -> None:
    if t.numel() == 0:
        raise InvalidArgumentError(f"{name} must not be empty")


def lsgan_d_loss(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    """0.5 * mean((d_real - 1)^2) + 0.5 * mean(d_fake^2); targets are {1, 0}."""
    _check_nonempty("d_real", d_real)
    _check_nonempty("d_fake", d_fake)
    return 0.5 * ((d_real - 1.0) ** 2).mean() + 0.5 * (d_fake ** 2).mean()


def lsgan_g_loss(d_fake: torch.Tensor) -> torch.Tensor:
    """0.5 * mean((d_fake - 1)^2): the generator pushes fakes toward target 1."""
    _check_nonempty("d_fake", d_fake)
    return 0.5 * ((d_fake - 1.0) ** 2).mean()


def interpolate_samples(real: torch.Tensor, fake: torch.Tensor,
                        eps: torch.Tensor) -> torch.Tensor:
    """x_hat = eps * real + (1 - eps) * fake with per-sample eps."""
    if real.shape != fake.shape:
        raise InvalidArgumentError(f"real/fake shapes differ: {real.shape} vs {fake.shape}")
    if eps.shape[0] != real.shape[0]:
        raise InvalidArgumentError(f"eps batch {eps.shape[0]} != data batch {real.shape[0]}")
    eps = eps.reshape(eps.shape[0], *([1] * (real.dim() - 1))).to(real.dtype)
    return eps * real + (1.0 - eps) * fake


def gradient_penalty(critic: Callable[[torch.Tensor], torch.Tensor],
                     real: torch.Tensor, fake: torch.Tensor,
                     eps: torch.Tensor) -> torch.Tensor:
    """mean((||grad_xhat critic(xhat)||_2 - 1)^2) with explicit epsilons."""
    x_hat = interpolate_samples(real.detach(), fake.detach(), eps).requires_grad_(True)
    scores = critic(x_hat)
    grads = torch.autograd.grad(
        outputs=scores, inputs=x_hat,
        grad_outputs=torch.ones_like(scores),
        create_graph=True, retain_graph=True)[0]
    norms = grads.reshape(grads.shape[0], -1).norm(2, dim=1)
    return ((norms - 1.0) ** 2).mean()


def _draw_eps(batch: int, rng_seed: int | torch.Generator | None,
              device: torch.device) -> torch.Tensor:
    if isinstance(rng_seed, torch.Generator):
        gen = rng_seed
    else:
        gen = torch.Generator(device=device)
        if rng_seed is not None:
            gen.manual_seed(int(rng_seed))
    return torch.rand(batch, generator=gen, device=device)


def wgan_gp_d_loss(critic: Callable[[torch.Tensor], torch.Tensor],
                   real_batch: torch.Tensor, fake_batch: torch.Tensor,
                   gp_weight: float = DEFAULT_GP_WEIGHT,
                   rng_seed: int | torch.Generator | None = None) -> torch.Tensor:
    """mean(critic(fake)) - mean(critic(real)) + gp_weight * gradient penalty."""
    if gp_weight < 0:
        raise InvalidArgumentError(f"gradient-penalty weight must be >= 0, got {gp_weight}")
    if real_batch.shape[0] != fake_batch.shape[0]:
        raise InvalidArgumentError(
            f"batch sizes differ: {real_batch.shape[0]} vs {fake_batch.shape[0]}")
    _check_nonempty("real_batch", real_batch)
    wasserstein = critic(fake_batch).mean() - critic(real_batch).mean()
    if gp_weight == 0:
        return wasserstein
    eps = _draw_eps(real_batch.shape[0], rng_seed, real_batch.device)
    return wasserstein + gp_weight * gradient_penalty(critic, real_batch, fake_batch, eps)


def wgan_g_loss(critic_fake: torch.Tensor) -> torch.Tensor:
    """-mean(critic(fake)): the generator raises the critic's score."""
    _check_nonempty("critic_fake", critic_fake)
    return -critic_fake.mean()


def l1_term(fake_nodule: torch.Tensor, real_nodule: torch.Tensor) -> torch.Tensor:
    """Mean absolute voxel difference (unweighted; the 100x lives in the objective)."""
    if fake_nodule.shape != real_nodule.shape:
        raise InvalidArgumentError(
            f"nodule shapes differ: {fake_nodule.shape} vs {real_nodule.shape}")
    return (fake_nodule - real_nodule).abs().mean()


def generator_objective(mode: str,
                        lsgan_g: torch.Tensor,
                        wgan_g: torch.Tensor,
                        l1: torch.Tensor | None = None) -> torch.Tensor:
    """Composite objective: adversarial terms, plus 100x the l1 term in with_l1 mode."""
    if mode not in OBJECTIVE_MODES:
        raise InvalidArgumentError(f"unknown objective mode {mode!r}; expected {OBJECTIVE_MODES}")
    total = lsgan_g + wgan_g
    if mode == "with_l1":
        if l1 is None:
            raise InvalidArgumentError("with_l1 mode requires the l1 term")
        total = total + L1_WEIGHT * l1
    return total
