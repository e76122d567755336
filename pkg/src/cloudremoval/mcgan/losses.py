"""Adversarial and channel-weighted L1 objectives."""

from __future__ import annotations

from typing import Sequence

import torch
import torch.nn.functional as F

PROB_EPS = 1e-7


def l1_loss(target: torch.Tensor, predicted: torch.Tensor,
            channel_weights: Sequence[float] | torch.Tensor | None = None) -> torch.Tensor:
    """(1 / CHW) sum_c sum_v sum_u lambda_c |target - predicted|, averaged over the batch.

    Tensors are (N, C, H, W) or (C, H, W).
    """
    if target.shape != predicted.shape:
        raise ValueError(f"shape mismatch: {tuple(target.shape)} vs {tuple(predicted.shape)}")
    diff = (target - predicted).abs()
    if channel_weights is not None:
        w = torch.as_tensor(channel_weights, dtype=diff.dtype, device=diff.device)
        channel_dim = diff.dim() - 3
        if w.numel() != diff.shape[channel_dim]:
            raise ValueError(f"{w.numel()} channel weights for {diff.shape[channel_dim]} channels")
        diff = diff * w.view(-1, 1, 1)
    return diff.sum() / diff.numel()


def _log_terms(d_real: torch.Tensor, d_fake: torch.Tensor, from_logits: bool):
    if from_logits:
        return F.logsigmoid(d_real), F.logsigmoid(-d_fake)
    real = d_real.clamp(PROB_EPS, 1.0 - PROB_EPS)
    fake = d_fake.clamp(PROB_EPS, 1.0 - PROB_EPS)
    return real.log(), (1.0 - fake).log()


def cgan_objective(d_real: torch.Tensor, d_fake: torch.Tensor, from_logits: bool = False) -> torch.Tensor:
    """E[log D(x, y)] + E[log(1 - D(x, G(x)))], expectations over patches and batch."""
    log_real, log_not_fake = _log_terms(d_real, d_fake, from_logits)
    return log_real.mean() + log_not_fake.mean()


def cgan_losses(d_real: torch.Tensor, d_fake: torch.Tensor,
                from_logits: bool = False) -> tuple[torch.Tensor, torch.Tensor]:
    """Return (discriminator loss, generator adversarial loss).

    The discriminator minimizes the negated objective; the generator uses
    the non-saturating -E[log D(x, G(x))]. Probabilities are clamped to
    [1e-7, 1 - 1e-7]; with ``from_logits`` the log-sigmoid is used instead.
    """
    return discriminator_loss(d_real, d_fake, from_logits), generator_adversarial_loss(d_fake, from_logits)


def discriminator_loss(d_real: torch.Tensor, d_fake: torch.Tensor, from_logits: bool = False) -> torch.Tensor:
    return -cgan_objective(d_real, d_fake, from_logits)


def generator_adversarial_loss(d_fake: torch.Tensor, from_logits: bool = False) -> torch.Tensor:
    if from_logits:
        return -F.logsigmoid(d_fake).mean()
    return -d_fake.clamp(PROB_EPS, 1.0 - PROB_EPS).log().mean()
