"""Objective terms for the generator, discriminator and MI critic."""
from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from pydantic import Field

from .config import StrictModel
from .models import (MICritic, PatchDiscriminator, PatchProjector, crop_target, resize_target,
                     sample_patch_embeddings)

# order used for reporting and for summing the generator objective
TERM_ORDER = ("adv", "sb", "rec", "reg", "cpl", "wreg", "idt")


class LossWeights(StrictModel):
    lambda_rec: float = Field(100.0, ge=0)
    lambda_reg: float = Field(1.0, ge=0)
    lambda_cpl: float = Field(10.0, ge=0)
    lambda_wreg: float = Field(1.0, ge=0)
    lambda_idt: float = Field(1.0, ge=0)
    lambda_sb: float = Field(1.0, ge=0)

    def weight(self, term: str) -> float:
        if term == "adv":
            return 1.0
        return getattr(self, f"lambda_{term}")


@dataclass
class LossReport:
    terms: dict[str, float]
    weights: dict[str, float]
    total: float
    extras: dict[str, float] = field(default_factory=dict)
    tensor: torch.Tensor | None = field(default=None, repr=False)

    def as_dict(self) -> dict:
        out = {f"G/{k}": v for k, v in self.terms.items()}
        out["G/total"] = self.total
        out.update(self.extras)
        return out


@contextmanager
def frozen(module: torch.nn.Module):
    """Temporarily stop gradients into ``module``'s parameters."""
    flags = [(p, p.requires_grad) for p in module.parameters()]
    for p, _ in flags:
        p.requires_grad_(False)
    try:
        yield module
    finally:
        for p, flag in flags:
            p.requires_grad_(flag)


# ---------------------------------------------------------------------------
# pixel losses


def loss_rec(x_hat: torch.Tensor, x_b: torch.Tensor) -> torch.Tensor:
    return (x_hat - x_b).abs().mean()


def loss_cpl(x_hat: torch.Tensor, x_b: torch.Tensor, x_prior: torch.Tensor) -> torch.Tensor:
    """Squared error restricted to the prior mask, averaged over all pixels."""
    return (x_prior * (x_hat - x_b) ** 2).mean()


# ---------------------------------------------------------------------------
# patchNCE


def patchnce_from_embeddings(q: torch.Tensor, k: torch.Tensor, temperature: float = 0.07) -> torch.Tensor:
    """InfoNCE over locations of one image.

    ``q`` and ``k`` are ``(N, P, D)`` (or ``(P, D)``) unit embeddings; row ``i``
    of ``q`` is positive with row ``i`` of ``k`` and negative with every other
    row of ``k`` from the same image.
    """
    if q.dim() == 2:
        q, k = q[None], k[None]
    n, p, _ = q.shape
    if p < 2:
        raise ValueError("patchNCE needs at least 2 locations")
    sim = torch.bmm(q, k.transpose(1, 2)) / temperature  # N, P, P
    pos = sim.diagonal(dim1=1, dim2=2)[..., None]
    off = ~torch.eye(p, dtype=torch.bool, device=q.device)
    neg = sim[:, off].reshape(n, p, p - 1)
    logits = torch.cat([pos, neg], dim=2).reshape(n * p, p)
    target = torch.zeros(n * p, dtype=torch.long, device=q.device)
    return F.cross_entropy(logits, target)


def sample_uniform_locations(grid_sizes, num_patches: int, rng: torch.Generator | None = None):
    locs = []
    for h, w in grid_sizes:
        perm = torch.randperm(h * w, generator=rng)
        locs.append(perm[:min(num_patches, h * w)])
    return locs


def sample_weighted_locations(x_prior: torch.Tensor, grid_sizes, num_patches: int,
                              rng: torch.Generator | None = None):
    """Locations drawn without replacement, weighted by local mask density.

    Cells with positive density come first (Gumbel top-k on log density);
    once they are exhausted the remainder is filled uniformly. An empty mask
    falls back to :func:`sample_uniform_locations` on the same stream.
    """
    if float(x_prior.sum()) == 0.0:
        return sample_uniform_locations(grid_sizes, num_patches, rng)
    m = x_prior.detach().to(torch.float64).mean(dim=0, keepdim=True)
    if m.dim() == 3:
        m = m[None]
    m = m.mean(dim=1, keepdim=True)
    locs = []
    for h, w in grid_sizes:
        dens = F.adaptive_avg_pool2d(m, (h, w)).flatten()
        u = torch.rand(h * w, generator=rng, dtype=torch.float64).clamp(1e-12, 1 - 1e-12)
        gumbel = -torch.log(-torch.log(u))
        score = torch.where(dens > 0, torch.log(dens.clamp_min(1e-300)) + gumbel, gumbel - 1e9)
        locs.append(torch.topk(score, min(num_patches, h * w)).indices)
    return locs


def encode_pair(generator, x_hat, x_src, t, z=None, detach_keys: bool = True):
    """Query features of ``x_hat`` and key features of ``x_src``; reusable across NCE terms."""
    feats_q = generator.encode(x_hat, t, z)
    if detach_keys:
        with torch.no_grad():
            feats_k = generator.encode(x_src, t, z)
    else:
        feats_k = generator.encode(x_src, t, z)
    return feats_q, feats_k


def _nce_over_layers(generator, projector, x_hat, x_src, t, z, locations, temperature, detach_keys,
                     feats=None):
    feats_q, feats_k = feats if feats is not None else encode_pair(generator, x_hat, x_src, t, z, detach_keys)
    if any(len(loc) < 2 for loc in locations):
        raise ValueError("patchNCE needs at least 2 locations per layer")
    emb_q = sample_patch_embeddings(feats_q, locations, projector)
    emb_k = sample_patch_embeddings(feats_k, locations, projector)
    losses = [patchnce_from_embeddings(q, k, temperature) for q, k in zip(emb_q, emb_k)]
    return torch.stack(losses).mean()


def feature_grids(generator, shape) -> list[tuple[int, int]]:
    """Spatial sizes of the patchNCE feature layers for an input of ``shape``."""
    h, w = shape[-2:]
    grids = []
    for idx in generator.nce_layers:
        n_down = min(idx, generator.cfg.n_down)
        grids.append((h // 2 ** n_down, w // 2 ** n_down))
    return grids


def loss_patchnce(generator, projector: PatchProjector, x_hat, x_src, t, z=None, locations=None,
                  num_patches: int = 256, temperature: float = 0.07,
                  rng: torch.Generator | None = None, detach_keys: bool = True, feats=None) -> torch.Tensor:
    """Contrastive loss between output patches (queries) and source patches (keys).

    ``feats`` may carry a precomputed :func:`encode_pair` result.
    """
    if locations is None:
        locations = sample_uniform_locations(feature_grids(generator, x_hat.shape), num_patches, rng)
    return _nce_over_layers(generator, projector, x_hat, x_src, t, z, locations, temperature, detach_keys, feats)


def loss_weighted_patchnce(generator, projector: PatchProjector, x_hat, x_src, x_prior, t, z=None,
                           num_patches: int = 256, temperature: float = 0.07,
                           rng: torch.Generator | None = None, detach_keys: bool = True,
                           locations=None, feats=None) -> torch.Tensor:
    """patchNCE with locations drawn according to the prior mask density."""
    if locations is None:
        locations = sample_weighted_locations(x_prior, feature_grids(generator, x_hat.shape), num_patches, rng)
    return _nce_over_layers(generator, projector, x_hat, x_src, t, z, locations, temperature, detach_keys, feats)


def loss_identity(generator, projector: PatchProjector, x_b, t, z=None, locations=None,
                  num_patches: int = 256, temperature: float = 0.07, rng: torch.Generator | None = None,
                  rec_weight: float = 1.0, nce_weight: float = 1.0, detach_keys: bool = True,
                  return_parts: bool = False):
    """Feed the target itself through the generator and ask for it back."""
    idt = generator(x_b, t, z)
    rec = loss_rec(idt, x_b)
    nce = loss_patchnce(generator, projector, idt, x_b, t, z, locations, num_patches, temperature,
                        rng, detach_keys)
    total = rec_weight * rec + nce_weight * nce
    if return_parts:
        return total, {"idt_rec": rec, "idt_nce": nce}
    return total


# ---------------------------------------------------------------------------
# adversarial


def discriminator_terms(disc: PatchDiscriminator, x_hat, x_b, t, crop_box=None) -> dict[str, torch.Tensor]:
    """Least-squares real/fake terms plus the decoder reconstructions on real images."""
    fake_score, _ = disc(x_hat.detach(), t)
    real_score, feats = disc(x_b, t)
    terms = {
        "fake": (fake_score ** 2).mean(),
        "real": ((real_score - 1) ** 2).mean(),
    }
    if disc.ssl:
        if crop_box is None:
            raise ValueError("crop_box is required when the discriminator has decoders")
        terms["rec_resize"] = ((disc.decode_resize(feats) - resize_target(x_b)) ** 2).mean()
        terms["rec_crop"] = ((disc.decode_crop(feats, crop_box) - crop_target(x_b, crop_box)) ** 2).mean()
    return terms


def loss_adv_discriminator(disc: PatchDiscriminator, x_hat, x_b, t, crop_box=None) -> torch.Tensor:
    return sum(discriminator_terms(disc, x_hat, x_b, t, crop_box).values())


def loss_adv_generator(disc: PatchDiscriminator, x_hat, t) -> torch.Tensor:
    score, _ = disc(x_hat, t)
    return ((score - 1) ** 2).mean()


# ---------------------------------------------------------------------------
# mutual information


def _masked(x, prior):
    return None if prior is None else x * prior


def log_mean_exp(v: torch.Tensor) -> torch.Tensor:
    return torch.logsumexp(v, dim=0) - math.log(v.numel())


def dv_bound(joint: torch.Tensor, marginal: torch.Tensor) -> torch.Tensor:
    """Donsker-Varadhan lower bound ``E_joint[T] - log E_marginal[exp T]``."""
    return joint.mean() - log_mean_exp(marginal.reshape(-1))


def loss_mi_estimator(critic: MICritic, x_t, x_b, x_prior=None, negatives=None, negative_prior=None,
                      literal: bool = False) -> torch.Tensor:
    """Critic objective. Default is the negative DV bound; ``literal``
    uses ``-mean E(x_t, x_b)`` with no contrast term.

    ``negatives`` are endpoint images mismatched with ``x_t``. When omitted
    they are formed by rolling the batch by one, which needs a batch of 2+.
    """
    joint = critic(x_t, x_b, _masked(x_b, x_prior))
    if literal:
        return -joint.mean()
    if negatives is None:
        if x_b.shape[0] < 2:
            raise ValueError("DV estimator needs negatives or a batch of at least 2")
        negatives = torch.roll(x_b, 1, dims=0)
        negative_prior = None if x_prior is None else torch.roll(x_prior, 1, dims=0)
    elif negative_prior is None:
        negative_prior = x_prior
    marginal = critic(x_t, negatives, _masked(negatives, negative_prior))
    return -dv_bound(joint, marginal)


def loss_mi_generator(critic: MICritic, x_t, x_hat, x_prior=None) -> torch.Tensor:
    with frozen(critic):
        return -critic(x_t, x_hat, _masked(x_hat, x_prior)).mean()


# ---------------------------------------------------------------------------
# total


def loss_total_generator(terms: dict[str, torch.Tensor], weights: LossWeights) -> LossReport:
    unknown = set(terms) - set(TERM_ORDER)
    if unknown:
        raise KeyError(f"unknown loss terms {sorted(unknown)}")
    active = [k for k in TERM_ORDER if k in terms]
    w = {k: weights.weight(k) for k in active}
    values = {k: float(terms[k].detach()) for k in active}
    total = 0.0
    tensor = None
    for k in active:
        total += w[k] * values[k]
        contrib = w[k] * terms[k]
        tensor = contrib if tensor is None else tensor + contrib
    if tensor is None:
        tensor = torch.zeros(())
    return LossReport(values, w, total, tensor=tensor)
