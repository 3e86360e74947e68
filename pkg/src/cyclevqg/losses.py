"""The six training loss terms, the category center bank, and the hyper-prior.

Every loss is a pure function returning a 0-dim float64 tensor, averaged
over the batch, differentiable through autograd.  ``update_centers`` is the
one stateful operation: it moves the center bank and is excluded from
gradient descent.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn

from .data import PAD

EPS = 1e-12


class TrainingError(RuntimeError):
    """Non-finite loss or other unrecoverable optimization failure."""


@dataclass
class LossWeights:
    """Multipliers for the combined objective; defaults are the trained values."""

    question: float = 3.0
    image_recon: float = 1.0
    category_recon: float = 2.0
    consistency: float = 2.0
    center: float = 3.0
    hyperprior: float = 3.0
    hyperprior_reg: float = 2.0

    def __post_init__(self):
        for name, value in vars(self).items():
            if value < 0:
                raise ValueError(f"loss weight {name} must be nonnegative, got {value}")


@dataclass
class LossBreakdown:
    """Component values for one step plus their weighted total."""

    question: float
    image_recon: float
    category_recon: float
    consistency: float
    center: float
    hyperprior: float
    total: float = None

    def parts(self):
        return {
            "question": self.question,
            "image_recon": self.image_recon,
            "category_recon": self.category_recon,
            "consistency": self.consistency,
            "center": self.center,
            "hyperprior": self.hyperprior,
        }


class HyperPrior(nn.Module):
    """Learnable per-dimension inverse variance of the zero-mean latent prior.

    Stored as log-alpha so the optimizer works unconstrained; alpha stays
    strictly positive by construction.
    """

    def __init__(self, dim):
        super().__init__()
        self.log_alpha = nn.Parameter(torch.zeros(dim, dtype=torch.float64))

    @property
    def alpha(self):
        return torch.exp(self.log_alpha)


class CenterBank:
    """One latent center per answer category, nudged toward batch means.

    Centers are optimizer-external state: ``update_centers`` moves them and
    must be serialized with respect to concurrent readers.
    """

    def __init__(self, n_categories, dim, update_scale=0.5):
        if not 0.0 < update_scale < 1.0:
            raise ValueError(f"update scale must lie in (0, 1), got {update_scale}")
        self.centers = torch.zeros(n_categories, dim, dtype=torch.float64)
        self.update_scale = update_scale

    @property
    def n_categories(self):
        return self.centers.shape[0]

    def clone(self):
        bank = CenterBank(*self.centers.shape, update_scale=self.update_scale)
        bank.centers = self.centers.clone()
        return bank


def _rows(x):
    return x if x.dim() == 2 else x.unsqueeze(0)


def question_loss(logits, gt):
    """Mean per-token negative log-likelihood of the ground-truth question.

    Logits row t scores the token following position t, so targets are the
    ground truth shifted left by one; pad positions are masked out.
    """
    single = logits.dim() == 2
    logits = logits.unsqueeze(0) if single else logits
    gt = torch.as_tensor(gt, dtype=torch.long)
    gt = gt.unsqueeze(0) if single or gt.dim() == 1 else gt
    steps = logits.shape[1]
    targets = gt[:, 1:]
    if targets.shape[1] > steps:
        raise ValueError(
            f"{targets.shape[1]} target tokens but only {steps} logit rows"
        )
    if targets.shape[1] < steps:
        fill = torch.full((gt.shape[0], steps - targets.shape[1]), PAD, dtype=torch.long)
        targets = torch.cat([targets, fill], dim=1)
    mask = targets != PAD
    if not mask.any():
        raise ValueError("ground truth has no tokens after the start marker")
    logprobs = torch.log_softmax(logits, dim=-1)
    nll = -logprobs.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    return (nll * mask).sum() / mask.sum()


def image_recon_loss(pred, target):
    """Squared L2 distance between predicted and original image encodings."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")
    return ((_rows(pred) - _rows(target)) ** 2).sum(dim=-1).mean()


def category_recon_loss(pred, target):
    """Squared L2 distance between predicted and original category encodings."""
    return image_recon_loss(pred, target)


def consistency_loss(pred, gt):
    """Cross entropy between the predicted category distribution and the label."""
    pred = _rows(pred)
    gt = torch.as_tensor(gt, dtype=torch.long).reshape(-1)
    n = pred.shape[-1]
    if ((gt < 0) | (gt >= n)).any():
        raise ValueError(f"category id out of range [0, {n})")
    picked = pred.gather(-1, gt.unsqueeze(-1)).squeeze(-1)
    return -torch.log(picked.clamp_min(EPS)).mean()


def center_loss(z, categories, bank):
    """Squared distance from each latent code to its category's center."""
    z = _rows(z)
    categories = torch.as_tensor(categories, dtype=torch.long).reshape(-1)
    if ((categories < 0) | (categories >= bank.n_categories)).any():
        raise ValueError(f"category id out of range [0, {bank.n_categories})")
    return ((z - bank.centers[categories]) ** 2).sum(dim=-1).mean()


def update_centers(z, categories, bank):
    """Move each present category's center toward its batch mean.

    For category j with n_j batch members, the step is
    sum(c_j - z_i) / (1 + n_j), scaled by the bank's update constant.
    Categories absent from the batch are untouched.
    """
    z = _rows(z).detach()
    categories = torch.as_tensor(categories, dtype=torch.long).reshape(-1)
    if z.shape[0] == 0:
        raise ValueError("cannot update centers from an empty batch")
    for j in categories.unique().tolist():
        members = z[categories == j]
        delta = (bank.centers[j] - members).sum(dim=0) / (1 + members.shape[0])
        bank.centers[j] = bank.centers[j] - bank.update_scale * delta
    return bank


def hyperprior_kl(dist, prior):
    """KL divergence from the latent posterior to the learnable prior.

    Closed form per dimension for N(mu, sigma^2) against N(0, 1/alpha):
    -0.5*log(alpha*sigma^2) + 0.5*alpha*(sigma^2 + mu^2) - 0.5, summed over
    dimensions and averaged over the batch.
    """
    mean, std = _rows(dist.mean), _rows(dist.stddev)
    alpha = prior.alpha
    if (std <= 0).any():
        raise ValueError("stddev must be strictly positive")
    if (alpha <= 0).any():
        raise ValueError("prior inverse variances must be strictly positive")
    if mean.shape[-1] != alpha.shape[-1]:
        raise ValueError("latent and prior dimensions differ")
    var = std ** 2
    per_dim = -0.5 * torch.log((alpha * var).clamp_min(EPS)) + 0.5 * alpha * (var + mean ** 2) - 0.5
    return per_dim.sum(dim=-1).mean()


def hyperprior_reg(prior, reg_weight):
    """Sparsity pressure on the prior: penalizes variances away from 1."""
    return reg_weight * ((1.0 / prior.alpha - 1.0) ** 2).sum()


def total_loss(parts, weights):
    """Weighted sum of the six components; rejects non-finite inputs."""
    values = parts.parts()
    for name, value in values.items():
        finite = torch.isfinite(value).all() if torch.is_tensor(value) else (
            value == value and abs(value) != float("inf")
        )
        if not finite:
            raise TrainingError(f"non-finite loss component: {name}")
    return (
        weights.question * values["question"]
        + weights.image_recon * values["image_recon"]
        + weights.category_recon * values["category_recon"]
        + weights.consistency * values["consistency"]
        + weights.center * values["center"]
        + weights.hyperprior * values["hyperprior"]
    )
