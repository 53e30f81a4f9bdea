"""Contrastive and entailment alignment objectives on the hyperboloid."""

from __future__ import annotations

from dataclasses import dataclass
import math

import numpy as np

from . import autodiff as ad
from .errors import ContractViolation
from .hypgeom import LorentzPoint, entailment_penalty, exp_map_origin, pairwise_distance

TAU_INIT = 0.07
TAU_MIN = 0.01
TAU_MAX = 100.0
LOG_TAU_MIN = math.log(TAU_MIN)
LOG_TAU_MAX = math.log(TAU_MAX)


@dataclass(frozen=True)
class HyperbolicBatch:
    """Spot/niche image and gene embeddings projected onto one hyperboloid."""

    I_s: LorentzPoint
    I_n: LorentzPoint
    G_s: LorentzPoint
    G_n: LorentzPoint

    def __post_init__(self):
        sizes = {ad.as_array(p.space).shape[0] for p in (self.I_s, self.I_n, self.G_s, self.G_n)}
        if len(sizes) != 1:
            raise ContractViolation(f"embedding sets differ in batch size: {sorted(sizes)}")

    @property
    def size(self) -> int:
        return ad.as_array(self.I_s.space).shape[0]


def project_batch(I_s, I_n, G_s, G_n, c=1.0) -> HyperbolicBatch:
    """Map four ``(B, d)`` Euclidean embedding sets to the hyperboloid."""
    return HyperbolicBatch(*(exp_map_origin(v, c) for v in (I_s, I_n, G_s, G_n)))


def info_nce_logits(logits):
    """Row-wise InfoNCE over a ``(B, B)`` logit matrix with positives on the diagonal."""
    B = ad.as_array(logits).shape[0]
    if B < 2:
        raise ContractViolation(f"contrastive loss needs a batch of at least 2, got {B}")
    idx = np.arange(B)
    pos = ad.take(logits, (idx, idx))
    return ad.mean(ad.sub(ad.logsumexp(logits, axis=1), pos))


def info_nce_hyperbolic(anchors: LorentzPoint, targets: LorentzPoint, tau, literal: bool = False):
    """InfoNCE with negative Lorentzian distance as similarity.

    ``anchors[i]`` is the positive partner of ``targets[i]``; every other
    target in the batch is a negative. The default includes the positive in
    the softmax denominator.

    ``literal=True`` switches to ``-mean(d_ii/tau - log sum_{j != i} exp(d_ij/tau))``,
    i.e. positive distance as the score and the positive excluded from the
    denominator. That form is unbounded below and rewards pulling positives
    apart; it exists only for comparison runs.
    """
    D = pairwise_distance(anchors, targets)
    B = ad.as_array(D).shape[0]
    if B < 2:
        raise ContractViolation(f"contrastive loss needs a batch of at least 2, got {B}")
    if not literal:
        return info_nce_logits(ad.div(ad.neg(D), tau))
    logits = ad.div(D, tau)
    idx = np.arange(B)
    off = ~np.eye(B, dtype=bool)
    # exp(-inf) on the diagonal drops the positive from the denominator
    masked = ad.where(off, logits, -np.inf)
    return ad.mean(ad.sub(ad.logsumexp(masked, axis=1), ad.take(logits, (idx, idx))))


def info_nce_cosine(anchors, targets, tau):
    """Euclidean InfoNCE on cosine similarity (the CLIP-style comparison arm)."""
    a = ad.div(anchors, ad.expand_dims(ad.norm(anchors, axis=-1), -1))
    t = ad.div(targets, ad.expand_dims(ad.norm(targets, axis=-1), -1))
    return info_nce_logits(ad.div(ad.matmul(a, ad.transpose(t)), tau))


def hca_loss(batch: HyperbolicBatch, tau, literal: bool = False):
    """Four-direction contrastive alignment.

    Spot image <-> spot gene both ways, plus niche -> spot in each cross-modal
    direction. Spot -> niche anchoring is left out on purpose: one spot-level
    embedding may legitimately match several niches in a batch.
    """
    terms = (
        (batch.I_s, batch.G_s),
        (batch.G_s, batch.I_s),
        (batch.G_n, batch.I_s),
        (batch.I_n, batch.G_s),
    )
    total = 0.0
    for a, t in terms:
        total = ad.add(total, info_nce_hyperbolic(a, t, tau, literal=literal))
    return ad.mul(total, 0.25)


def hca_loss_euclidean(I_s, I_n, G_s, G_n, tau):
    """Same four directions as :func:`hca_loss` with cosine similarity."""
    total = 0.0
    for a, t in ((I_s, G_s), (G_s, I_s), (G_n, I_s), (I_n, G_s)):
        total = ad.add(total, info_nce_cosine(a, t, tau))
    return ad.mul(total, 0.25)


# (parent, child) pairs; the last two are the image -> gene terms
HEA_PAIRS = (("I_s", "I_n"), ("G_s", "G_n"), ("I_s", "G_s"), ("I_n", "G_n"))


def hea_loss(batch: HyperbolicBatch, gene_image: bool = True, strict: bool = False):
    """Mean entailment penalty over spot->niche and image->gene hierarchies.

    Each pair term is averaged over the batch, then the terms are averaged.
    With ``gene_image=False`` only the two spot->niche terms remain, averaged
    with weight 1/2 each.
    """
    pairs = HEA_PAIRS if gene_image else HEA_PAIRS[:2]
    total = 0.0
    for parent, child in pairs:
        pen = entailment_penalty(getattr(batch, parent), getattr(batch, child), strict=strict)
        total = ad.add(total, ad.mean(pen))
    return ad.mul(total, 1.0 / len(pairs))
