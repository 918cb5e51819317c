"""Loss functions for all five training methods.

Every function here is a pure, differentiable map from torch tensors to a
scalar (or a per-pixel surface) and is safe to call from any thread.

Tensor conventions:

* predictions: float tensor ``(N, C, H, W)`` (or ``(C, H, W)`` for a single
  image) of per-pixel class probabilities, each pixel vector summing to 1
* labels: int64 tensor ``(N, H, W)`` / ``(H, W)`` with class indices in
  ``[0, C)``; pixels equal to ``IGNORE_INDEX`` are excluded from means
* betting maps: float tensor ``(N, H, W)`` / ``(H, W)`` of nonnegative
  per-pixel investments summing to 1 per image

Batch losses are the mean of per-image losses.
"""

from __future__ import annotations

import torch
from torch import Tensor

from .errors import (
    ConfigError,
    DegenerateInputError,
    NotNormalizedError,
    ShapeMismatchError,
)

# Probability clamp applied before any log; softmax outputs cannot reach
# exact 0/1 anyway, this bounds the loss for degenerate inputs.
CLAMP_EPS = 1e-7

# Validation tolerance for "sums to one" checks. Looser than the 1e-6
# invariant so that float32 softmax outputs and finite-difference probes
# (step 1e-5) never trip it.
SUM_TOL = 1e-4

IGNORE_INDEX = 255


def _as_batched(pred: Tensor, label: Tensor) -> tuple[Tensor, Tensor]:
    if pred.dim() == 3:
        pred = pred.unsqueeze(0)
    if label.dim() == 2:
        label = label.unsqueeze(0)
    if pred.dim() != 4:
        raise ShapeMismatchError(f"prediction must be (N,C,H,W) or (C,H,W), got {tuple(pred.shape)}")
    if label.dim() != 3:
        raise ShapeMismatchError(f"label must be (N,H,W) or (H,W), got {tuple(label.shape)}")
    n, _, h, w = pred.shape
    if label.shape != (n, h, w):
        raise ShapeMismatchError(
            f"label shape {tuple(label.shape)} does not match prediction {tuple(pred.shape)}"
        )
    return pred, label


def _validate_prediction(pred: Tensor) -> None:
    if pred.min() < -SUM_TOL or pred.max() > 1.0 + SUM_TOL:
        raise NotNormalizedError("prediction entries must lie in [0, 1]")
    sums = pred.sum(dim=1)
    if (sums - 1.0).abs().max() > SUM_TOL:
        raise NotNormalizedError(
            f"per-pixel class probabilities must sum to 1 (max deviation {(sums - 1.0).abs().max():.3g})"
        )


def _validate_label(label: Tensor, num_classes: int) -> Tensor:
    """Return the boolean mask of non-ignored pixels."""
    valid = label != IGNORE_INDEX
    bad = valid & ((label < 0) | (label >= num_classes))
    if bad.any():
        raise ShapeMismatchError(
            f"label contains class indices outside [0, {num_classes}) at {int(bad.sum())} pixels"
        )
    return valid


def _masked_mean_per_image(surface: Tensor, valid: Tensor) -> Tensor:
    """Mean of ``surface`` over valid pixels, per image, then over the batch."""
    counts = valid.sum(dim=(1, 2))
    if (counts == 0).any():
        raise DegenerateInputError("an image has no non-ignored pixels")
    per_image = surface.sum(dim=(1, 2)) / counts
    return per_image.mean()


def pixel_cross_entropy(pred: Tensor, label: Tensor) -> Tensor:
    """Per-pixel cross-entropy surface: entry (i,j) is -log p_true.

    Ignored pixels yield exactly 0. Returns shape (N, H, W), or (H, W)
    when the inputs were unbatched.
    """
    squeeze = pred.dim() == 3
    pred, label = _as_batched(pred, label)
    _validate_prediction(pred)
    valid = _validate_label(label, pred.shape[1])
    gather_idx = torch.where(valid, label, torch.zeros_like(label))
    p_true = pred.gather(1, gather_idx.unsqueeze(1)).squeeze(1)
    surface = -torch.log(p_true.clamp(min=CLAMP_EPS))
    surface = torch.where(valid, surface, torch.zeros_like(surface))
    return surface.squeeze(0) if squeeze else surface


def mean_cross_entropy(pred: Tensor, label: Tensor) -> Tensor:
    """Mean of the cross-entropy surface over non-ignored pixels."""
    pred, label = _as_batched(pred, label)
    surface = pixel_cross_entropy(pred, label)
    return _masked_mean_per_image(surface, label != IGNORE_INDEX)


def focal_loss(pred: Tensor, label: Tensor, gamma: float) -> Tensor:
    """Mean of -(1 - p_t)^gamma * log(p_t) over non-ignored pixels.

    gamma = 0 reduces to mean_cross_entropy bit-for-bit.
    """
    if gamma < 0:
        raise ConfigError(f"focusing factor gamma must be >= 0, got {gamma}")
    pred, label = _as_batched(pred, label)
    _validate_prediction(pred)
    valid = _validate_label(label, pred.shape[1])
    gather_idx = torch.where(valid, label, torch.zeros_like(label))
    p_true = pred.gather(1, gather_idx.unsqueeze(1)).squeeze(1).clamp(min=CLAMP_EPS)
    surface = (1.0 - p_true).pow(gamma) * -torch.log(p_true)
    surface = torch.where(valid, surface, torch.zeros_like(surface))
    return _masked_mean_per_image(surface, valid)


def normalize_betting_map(raw: Tensor, beta: float, ignore: Tensor | None = None) -> Tensor:
    """Turn raw sigmoid outputs into a smoothed per-image budget distribution.

    weights = (raw + beta) / sum(raw + beta), summed over all pixels of the
    image. Ignored pixels contribute raw value 0 but stay in the denominator,
    so the normalization is independent of the mask. The division is done in
    float64 so the returned weights sum to 1 well within 1e-6.
    """
    if beta < 0:
        raise ConfigError(f"smoothing factor beta must be >= 0, got {beta}")
    squeeze = raw.dim() == 2
    if squeeze:
        raw = raw.unsqueeze(0)
    if raw.dim() != 3:
        raise ShapeMismatchError(f"raw betting map must be (N,H,W) or (H,W), got {tuple(raw.shape)}")
    if raw.min() < 0 or raw.max() > 1:
        raise DegenerateInputError("raw betting values must lie in [0, 1]")
    if ignore is not None:
        if ignore.shape != raw.shape[-2:] and ignore.shape != raw.shape:
            raise ShapeMismatchError("ignore mask shape does not match betting map")
        raw = torch.where(ignore.to(torch.bool).expand_as(raw), torch.zeros_like(raw), raw)
    shifted = raw.double() + beta
    sums = shifted.sum(dim=(1, 2), keepdim=True)
    if (sums == 0).any():
        raise DegenerateInputError("all-zero raw betting map with beta = 0 cannot be normalized")
    weights = (shifted / sums).to(raw.dtype)
    return weights.squeeze(0) if squeeze else weights


def _validate_bets(bets: Tensor, shape: tuple[int, int, int]) -> None:
    if bets.shape != shape:
        raise ShapeMismatchError(f"betting map shape {tuple(bets.shape)} does not match labels {shape}")
    if bets.min() < 0:
        raise NotNormalizedError("betting map has negative entries")
    sums = bets.double().sum(dim=(1, 2))
    if (sums - 1.0).abs().max() > SUM_TOL:
        raise NotNormalizedError(
            f"betting map must sum to 1 per image (max deviation {(sums - 1.0).abs().max():.3g})"
        )


def gambling_loss(pred: Tensor, label: Tensor, bets: Tensor) -> Tensor:
    """Gambler objective: -(1/(w*h)) * sum of bets * pixel cross-entropy.

    Negative by construction, so the gambler maximizes its expected winnings
    by minimizing this value. Ignored pixels contribute 0. The literal
    1/(w*h) factor is kept even though bets already sum to one.
    """
    pred, label = _as_batched(pred, label)
    if bets.dim() == 2:
        bets = bets.unsqueeze(0)
    _validate_bets(bets, tuple(label.shape))
    surface = pixel_cross_entropy(pred, label)
    _, h, w = label.shape
    per_image = -(bets * surface).sum(dim=(1, 2)) / (w * h)
    return per_image.mean()


def segmenter_gambling_loss(pred: Tensor, label: Tensor, bets: Tensor) -> Tensor:
    """Segmenter objective: mean cross-entropy minus the gambler's objective."""
    return mean_cross_entropy(pred, label) - gambling_loss(pred, label, bets)


def binary_cross_entropy(score: Tensor, target: float) -> Tensor:
    """Mean BCE of per-patch scores against a constant 0/1 target."""
    if score.min() < 0 or score.max() > 1:
        raise DegenerateInputError("scores must lie in [0, 1]")
    score = score.clamp(min=CLAMP_EPS, max=1.0 - CLAMP_EPS)
    if target == 1:
        return (-torch.log(score)).mean()
    if target == 0:
        return (-torch.log(1.0 - score)).mean()
    raise ConfigError(f"binary target must be 0 or 1, got {target}")


def discriminator_loss(fake_score: Tensor, real_score: Tensor) -> Tensor:
    """BCE(fake, 0) + BCE(real, 1), averaged over patch scores."""
    return binary_cross_entropy(fake_score, 0) + binary_cross_entropy(real_score, 1)


def generator_adversarial_loss(fake_score: Tensor, lambda_adv: float) -> Tensor:
    """Non-saturating adversarial term lambda * BCE(fake, 1).

    The caller adds the pixel-wise cross-entropy.
    """
    if lambda_adv < 0:
        raise ConfigError(f"adversarial coefficient lambda must be >= 0, got {lambda_adv}")
    return lambda_adv * binary_cross_entropy(fake_score, 1)


def embedding_loss(fake_embedding: Tensor, real_embedding: Tensor) -> Tensor:
    """Euclidean norm of the difference of paired discriminator embeddings.

    Accepts a single feature vector or a batch (norm per sample, then mean).
    """
    if fake_embedding.shape != real_embedding.shape:
        raise ShapeMismatchError(
            f"embedding shapes differ: {tuple(fake_embedding.shape)} vs {tuple(real_embedding.shape)}"
        )
    diff = fake_embedding - real_embedding
    if diff.dim() <= 1:
        return diff.norm(p=2)
    return diff.flatten(start_dim=1).norm(p=2, dim=1).mean()


def one_hot(label: Tensor, num_classes: int) -> Tensor:
    """One-hot encode a label map to (N, C, H, W); ignored pixels get all zeros."""
    squeeze = label.dim() == 2
    if squeeze:
        label = label.unsqueeze(0)
    valid = _validate_label(label, num_classes)
    idx = torch.where(valid, label, torch.zeros_like(label))
    enc = torch.nn.functional.one_hot(idx, num_classes).permute(0, 3, 1, 2).float()
    enc = enc * valid.unsqueeze(1)
    return enc.squeeze(0) if squeeze else enc
