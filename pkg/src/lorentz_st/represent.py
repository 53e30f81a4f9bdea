"""Multi-level representation extractors.

Spatial niches come from exact K-nearest-neighbour search; the image branch
is a frozen two-layer feature map with optional low-rank adapters, and the
gene branch a small trainable fully-connected network. Both branches apply
the same weights to the spot level and the niche level.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .errors import ContractViolation

DEFAULT_K = 7
# distances equal to this many µm count as ties
_TIE_DECIMALS = 6


@dataclass(frozen=True)
class NicheIndex:
    """Niche membership for every spot of one slide.

    ``neighbors[i]`` holds the K-1 nearest other spots of spot ``i`` (row
    indices into the slide), nearest first, ties broken by ascending id.
    """

    neighbors: np.ndarray
    K: int

    def members(self) -> np.ndarray:
        """``(M, K)`` index matrix: the centre followed by its neighbours."""
        centers = np.arange(len(self.neighbors))[:, None]
        return np.concatenate([centers, self.neighbors], axis=1)


def knn_neighbors(coords, K: int = DEFAULT_K, ids=None) -> NicheIndex:
    """Exact brute-force K-1 nearest neighbours within one slide.

    ``ids`` gives the tie-break order (defaults to row order); it may hold
    strings or numbers.
    """
    coords = np.asarray(coords, dtype=np.float64)
    M = len(coords)
    if K < 2:
        raise ContractViolation(f"niche size K must be at least 2, got {K}")
    if M < K:
        raise ContractViolation(f"need at least K={K} spots for a niche, slide has {M}")
    if not np.all(np.isfinite(coords)):
        raise ContractViolation("spot coordinates must be finite")
    if ids is None:
        rank = np.arange(M)
    else:
        rank = np.argsort(np.argsort(np.asarray(ids), kind="stable"), kind="stable")

    neighbors = np.empty((M, K - 1), dtype=np.int64)
    for start in range(0, M, 512):
        block = coords[start:start + 512]
        diff = block[:, None, :] - coords[None, :, :]
        dist = np.round(np.sqrt((diff * diff).sum(-1)), _TIE_DECIMALS)
        for row, i in enumerate(range(start, start + len(block))):
            d = dist[row].copy()
            d[i] = np.inf
            order = np.lexsort((rank, d))
            neighbors[i] = order[: K - 1]
    return NicheIndex(neighbors, K)


def niche_gene_profile(center, neighbors) -> np.ndarray:
    """Mean expression over the centre spot and its neighbours."""
    center = np.asarray(center, dtype=np.float64)
    neighbors = np.atleast_2d(np.asarray(neighbors, dtype=np.float64))
    if center.ndim != 1 or neighbors.ndim != 2 or neighbors.shape[1] != center.shape[0]:
        raise ContractViolation(
            f"neighbour profiles must have length {center.shape[-1]}, got shape {np.shape(neighbors)}"
        )
    return (center + neighbors.sum(axis=0)) / (len(neighbors) + 1)


def niche_average(values: np.ndarray, index: NicheIndex) -> np.ndarray:
    """Row-wise niche mean of ``values`` (spots x features) for a whole slide."""
    values = np.asarray(values, dtype=np.float64)
    return values[index.members()].mean(axis=1)


@dataclass(frozen=True)
class LowRankAdapter:
    """Trainable factors of the update ``B @ A`` (``B``: out x r, ``A``: r x in)."""

    B: np.ndarray
    A: np.ndarray

    @property
    def rank(self) -> int:
        return self.A.shape[0]


def low_rank_update(W, B, A=None):
    """Return ``W + B @ A`` without modifying ``W``.

    ``B`` may also be a :class:`LowRankAdapter`, in which case ``A`` is taken
    from it.
    """
    if isinstance(B, LowRankAdapter):
        B, A = B.B, B.A
    ws, bs, as_ = ad.as_array(W).shape, ad.as_array(B).shape, ad.as_array(A).shape
    if len(ws) != 2 or bs != (ws[0], as_[0]) or as_ != (bs[1], ws[1]):
        raise ContractViolation(f"adapter shapes B{bs} A{as_} do not conform to W{ws}")
    return ad.add(W, ad.matmul(B, A))


def _linear(x, w, b):
    return ad.add(ad.matmul(x, ad.transpose(w)), b)


def adapted_weight(params: Mapping, layer: int):
    w = params[f"image.base.w{layer}"]
    key = f"image.adapter{layer}"
    if f"{key}.B" in params:
        return low_rank_update(w, params[f"{key}.B"], params[f"{key}.A"])
    return w


def image_network(x, params: Mapping):
    """Adapted two-layer feature map: ``tanh`` hidden layer, linear output."""
    h = ad.tanh(_linear(x, adapted_weight(params, 1), params["image.base.b1"]))
    return _linear(h, adapted_weight(params, 2), params["image.base.b2"])


def encode_image(feat_spot, feat_niche, params: Mapping):
    """Spot- and niche-level image embeddings ``(I_s, I_n)``.

    Both levels go through the same adapted network. Inputs are precomputed
    feature vectors of shape ``(d_in,)`` or ``(B, d_in)``.
    """
    d_in = ad.as_array(params["image.base.w1"]).shape[1]
    for name, f in (("spot", feat_spot), ("niche", feat_niche)):
        if ad.as_array(f).shape[-1] != d_in:
            raise ContractViolation(f"{name} feature width {ad.as_array(f).shape[-1]} != {d_in}")
    return image_network(feat_spot, params), image_network(feat_niche, params)


def gene_network(y, params: Mapping):
    h = ad.tanh(_linear(y, params["gene.w1"], params["gene.b1"]))
    return _linear(h, params["gene.w2"], params["gene.b2"])


def encode_gene(Y_s, Y_n, params: Mapping):
    """Spot- and niche-level gene embeddings ``(G_s, G_n)`` from log expression."""
    n = ad.as_array(params["gene.w1"]).shape[1]
    for name, y in (("spot", Y_s), ("niche", Y_n)):
        if ad.as_array(y).shape[-1] != n:
            raise ContractViolation(f"{name} gene vector length {ad.as_array(y).shape[-1]} != {n}")
    return gene_network(Y_s, params), gene_network(Y_n, params)
