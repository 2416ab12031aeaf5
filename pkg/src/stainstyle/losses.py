"""Reconstruction, conditional-GAN and feature-preserving losses.

Every loss reduces by batch mean, so values do not depend on batch size.
"""

from __future__ import annotations

from dataclasses import dataclass
import math

import torch

EPS = 1e-7


class LossInputError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_recon: float = 10.0
    lambda_fp: float = 1.0

    def __post_init__(self):
        for name in ("lambda_recon", "lambda_fp"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise LossInputError(f"{name} must be finite and nonnegative, got {value}")


def recon_loss(generated: torch.Tensor, original: torch.Tensor) -> torch.Tensor:
    """Batch mean of per-tile L2 distance divided by sqrt(pixel count).

    Tiles are ``(n, c, h, w)``; a constant per-pixel error vector ``e`` gives
    exactly ``|e|`` at any resolution.
    """
    if generated.shape != original.shape:
        raise LossInputError(f"shape mismatch {tuple(generated.shape)} vs {tuple(original.shape)}")
    n_pixels = generated.shape[-1] * generated.shape[-2]
    diff = (generated - original).flatten(1)
    return (torch.linalg.vector_norm(diff, dim=1) / math.sqrt(n_pixels)).mean()


def _check_probs(p: torch.Tensor, name: str) -> torch.Tensor:
    if not torch.all(torch.isfinite(p)) or torch.any(p < 0) or torch.any(p > 1):
        raise LossInputError(f"{name} must be probabilities in [0, 1]")
    return p.clamp(EPS, 1 - EPS)


def gan_loss_d(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    """Discriminator cross-entropy: ``-mean log D(real) - mean log(1 - D(fake))``."""
    d_real = _check_probs(d_real, "d_real")
    d_fake = _check_probs(d_fake, "d_fake")
    return -torch.log(d_real).mean() - torch.log1p(-d_fake).mean()


def gan_loss_g(d_fake: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator objective ``-mean log D(fake)``."""
    return -torch.log(_check_probs(d_fake, "d_fake")).mean()


def feature_preserving_loss(feat_original: torch.Tensor, feat_generated: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of KL(softmax(original) || softmax(generated))."""
    if feat_original.shape != feat_generated.shape:
        raise LossInputError(
            f"feature shape mismatch {tuple(feat_original.shape)} vs {tuple(feat_generated.shape)}"
        )
    if not (torch.all(torch.isfinite(feat_original)) and torch.all(torch.isfinite(feat_generated))):
        raise LossInputError("features must be finite")
    p = torch.softmax(feat_original, dim=-1)
    q = torch.softmax(feat_generated, dim=-1).clamp_min(EPS)
    kl = (torch.xlogy(p, p) - p * torch.log(q)).sum(dim=-1)
    return kl.mean()


def total_generator_loss(recon, gan_g, fp, w: LossWeights):
    return w.lambda_recon * recon + gan_g + w.lambda_fp * fp
