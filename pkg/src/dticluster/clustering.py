"""Clustering objectives: (DTI) K-means, (DTI) GMM and the TI baseline.

Prototypes are always the transformed side: every prototype is aligned to
every sample with that sample's predicted parameters, and the sample is
compared to the aligned prototypes. Losses are averaged over the batch.
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn

from .transforms import compose_apply, covariance_apply

SIGMA_MIN = 0.25


class DivergenceError(RuntimeError):
    """Raised when a log-density or loss stops being finite."""


class KMeansState(nn.Module):
    def __init__(self, prototypes: torch.Tensor):
        super().__init__()
        if prototypes.dim() != 4 or prototypes.shape[0] < 1:
            raise ValueError("prototypes must be (K, C, H, W) with K >= 1")
        self.prototypes = nn.Parameter(prototypes.clone())

    @property
    def n_clusters(self) -> int:
        return self.prototypes.shape[0]

    @property
    def centers(self) -> torch.Tensor:
        return self.prototypes

    def copy_cluster(self, src: int, dst: int, noise: torch.Tensor | None = None):
        with torch.no_grad():
            self.prototypes[dst] = self.prototypes[src] + (0 if noise is None else noise)


class GMMState(nn.Module):
    """Diagonal Gaussian mixture; variances are ``var_params ** 2`` and the
    floor ``sigma_min ** 2`` is added when evaluating densities."""

    def __init__(self, means: torch.Tensor, init_var: float = 0.5, init_eta: float = 1.0,
                 sigma_min: float = SIGMA_MIN):
        super().__init__()
        K = means.shape[0]
        self.means = nn.Parameter(means.clone())
        self.var_params = nn.Parameter(torch.full_like(means, math.sqrt(init_var)))
        self.mixing_logits = nn.Parameter(torch.full((K,), float(init_eta), dtype=means.dtype))
        self.sigma_min = sigma_min

    @property
    def n_clusters(self) -> int:
        return self.means.shape[0]

    @property
    def centers(self) -> torch.Tensor:
        return self.means

    @property
    def variances(self) -> torch.Tensor:
        return self.var_params ** 2

    @property
    def mixing_probs(self) -> torch.Tensor:
        return torch.softmax(self.mixing_logits, dim=0)

    def copy_cluster(self, src: int, dst: int, noise: torch.Tensor | None = None):
        with torch.no_grad():
            self.means[dst] = self.means[src] + (0 if noise is None else noise)
            self.var_params[dst] = self.var_params[src]
            self.mixing_logits[dst] = self.mixing_logits[src]


def _expand_params(predicted, K):
    # list over steps of (N, K, P) -> list of (N*K, P)
    return [p.reshape(-1, p.shape[-1]) for p in predicted]


def align(centers: torch.Tensor, steps, predicted, pad: str = "border") -> torch.Tensor:
    """Transform every center for every sample: (K, C, H, W) -> (N, K, C, H, W)."""
    K = centers.shape[0]
    if not steps:
        return centers.unsqueeze(0)
    N = predicted[0].shape[0]
    flat = centers.unsqueeze(0).expand(N, -1, -1, -1, -1).reshape(N * K, *centers.shape[1:])
    out = compose_apply(flat, steps, _expand_params(predicted, K), pad)
    return out.view(N, K, *centers.shape[1:])


def align_variances(var: torch.Tensor, steps, predicted, pad: str = "border") -> torch.Tensor:
    K = var.shape[0]
    if not any(s.applies_to_covariance for s in steps):
        return var.unsqueeze(0)
    N = predicted[0].shape[0]
    flat = var.unsqueeze(0).expand(N, -1, -1, -1, -1).reshape(N * K, *var.shape[1:])
    out = covariance_apply(flat, steps, _expand_params(predicted, K), pad)
    return out.view(N, K, *var.shape[1:])


def squared_distances(batch, aligned, weights=None) -> torch.Tensor:
    """(N, K) weighted squared distances between samples and aligned prototypes."""
    diff = (batch.unsqueeze(1) - aligned) ** 2
    if weights is not None:
        diff = diff * weights
    return diff.flatten(2).sum(-1)


def kmeans_loss(batch, state, steps=(), predicted=(), weights=None, pad="border"):
    """Returns ``(loss, assignments, distances)``.

    ``loss`` is the batch mean of the distance to the closest aligned
    prototype; the hard min only lets gradient through the selected cluster.
    Ties go to the smallest cluster index.
    """
    aligned = align(state.centers, steps, predicted, pad)
    dist = squared_distances(batch, aligned, weights)
    assign = torch.argmin(dist.detach(), dim=1)
    loss = dist.gather(1, assign[:, None]).mean()
    return loss, assign, dist


def ti_loss(batch, state, steps, per_sample_params, weights=None, pad="border"):
    """Loss with free per-sample transformation parameters (N, K, P) per step."""
    return kmeans_loss(batch, state, steps, per_sample_params, weights, pad)


def rotation_orbit(images: torch.Tensor) -> torch.Tensor:
    """The four 90-degree rotations of (..., H, W) images, stacked in front."""
    return torch.stack([torch.rot90(images, k, dims=(-2, -1)) for k in range(4)])


def ti_loss_rotations(batch: torch.Tensor, prototypes: torch.Tensor, weights=None) -> torch.Tensor:
    """TI K-means loss over the finite group of 90-degree rotations, the min
    being taken by enumeration of all group elements."""
    orbit = rotation_orbit(prototypes)  # (4, K, C, H, W)
    cand = orbit.transpose(0, 1).reshape(-1, *prototypes.shape[1:])
    return squared_distances(batch, cand.unsqueeze(0), weights).min(dim=1).values.mean()


def gaussian_weight(H: int, W: int, sigma: float = 7.0, dtype=torch.float32) -> torch.Tensor:
    """Per-pixel weight centered on the image, max value 1; shape (1, H, W)."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    u = torch.arange(H, dtype=torch.float64) - (H - 1) / 2
    v = torch.arange(W, dtype=torch.float64) - (W - 1) / 2
    d2 = u[:, None] ** 2 + v[None, :] ** 2
    return torch.exp(-d2 / (2 * sigma ** 2)).to(dtype)[None]


def gmm_log_density(batch, state: GMMState, steps=(), predicted=(), weights=None, pad="border"):
    """(N, K) diagonal Gaussian log-densities of every sample under every
    aligned component."""
    mu = align(state.means, steps, predicted, pad)
    var = align_variances(state.variances, steps, predicted, pad) + state.sigma_min ** 2
    terms = torch.log(2 * math.pi * var) + (batch.unsqueeze(1) - mu) ** 2 / var
    if weights is not None:
        terms = terms * weights
    logp = -0.5 * terms.flatten(2).sum(-1)
    if not torch.isfinite(logp).all():
        raise DivergenceError("non-finite log-density (training diverged)")
    return logp


def _responsibilities(logp, state):
    log_joint = logp + torch.log_softmax(state.mixing_logits, dim=0)
    return torch.softmax(log_joint, dim=1)


def gmm_e_step(batch, state, steps=(), predicted=(), weights=None, pad="border", logp=None):
    """Responsibilities (N, K), computed in log space and detached."""
    if logp is None:
        logp = gmm_log_density(batch, state, steps, predicted, weights, pad)
    return _responsibilities(logp.detach(), state).detach()


def gmm_m_loss(batch, state, steps=(), predicted=(), gamma=None, weights=None, pad="border",
               logp=None):
    """Expected negative log-likelihood averaged over the batch."""
    if logp is None:
        logp = gmm_log_density(batch, state, steps, predicted, weights, pad)
    if gamma is None:
        gamma = _responsibilities(logp.detach(), state).detach()
    log_pi = torch.log_softmax(state.mixing_logits, dim=0)
    loss = -(gamma * (logp + log_pi)).sum(1).mean()
    if not torch.isfinite(loss):
        raise DivergenceError("non-finite GMM loss")
    return loss


def gmm_assign(batch, state, steps=(), predicted=(), weights=None, pad="border"):
    gamma = gmm_e_step(batch, state, steps, predicted, weights, pad)
    return torch.argmax(gamma, dim=1)


def gmm_step(batch, state, steps=(), predicted=(), weights=None, pad="border"):
    """One E-step + M-step objective. Returns ``(loss, assignments, gamma)``."""
    logp = gmm_log_density(batch, state, steps, predicted, weights, pad)
    gamma = gmm_e_step(batch, state, logp=logp)
    loss = gmm_m_loss(batch, state, gamma=gamma, logp=logp)
    return loss, torch.argmax(gamma, dim=1), gamma
