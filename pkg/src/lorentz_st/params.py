"""Named parameter store shared by the encoders, decoder and trainer."""

from __future__ import annotations

from dataclasses import dataclass, field
import math

import numpy as np

from .align import TAU_INIT
from .errors import ContractViolation


@dataclass(frozen=True)
class ModelDims:
    feature_dim: int = 32
    embed_dim: int = 32
    n_genes: int = 200
    gene_hidden: int = 512
    decoder_hidden: int = 512
    adapter_rank: int = 4
    adapter_layers: int = 2

    def __post_init__(self):
        if self.adapter_layers not in (0, 1, 2):
            raise ContractViolation(f"adapter_layers must be 0, 1 or 2, got {self.adapter_layers}")
        limit = min(self.feature_dim, self.embed_dim) / 4
        if self.adapter_layers and not 1 <= self.adapter_rank <= limit:
            raise ContractViolation(
                f"adapter rank {self.adapter_rank} must satisfy 1 <= r <= {limit:g} (d/4)"
            )


@dataclass
class ModelParams:
    """Ordered mapping of parameter name to float64 array.

    Iteration order is the insertion order fixed by :func:`init_params`, which
    is also the order used by checkpoints and the gradient checker. Names in
    ``frozen`` never receive optimizer updates.
    """

    dims: ModelDims
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    frozen: frozenset[str] = frozenset()

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __contains__(self, name: str) -> bool:
        return name in self.arrays

    def names(self) -> list[str]:
        return list(self.arrays)

    def trainable(self) -> list[str]:
        return [n for n in self.arrays if n not in self.frozen]

    def copy(self) -> "ModelParams":
        return ModelParams(self.dims, {k: v.copy() for k, v in self.arrays.items()}, self.frozen)

    def n_scalars(self, trainable_only: bool = True) -> int:
        names = self.trainable() if trainable_only else self.names()
        return sum(self.arrays[n].size for n in names)

    def equal(self, other: "ModelParams") -> bool:
        """Bitwise equality of names, shapes and values."""
        if self.names() != other.names():
            return False
        return all(
            a.shape == b.shape and a.tobytes() == b.tobytes()
            for a, b in zip(self.arrays.values(), other.arrays.values())
        )


# Output-layer gain of both encoders. Unit gain puts embeddings at norm ~4,
# where entailment cones are hairline-thin and the exterior angle saturates at pi.
EMBED_GAIN = 0.2


def _dense(rng: np.random.Generator, n_out: int, n_in: int, gain: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    w = rng.normal(0.0, gain / math.sqrt(n_in), size=(n_out, n_in))
    return w, np.zeros(n_out)


def init_params(dims: ModelDims, seed: int, base_seed: int = 0, gene_mean: np.ndarray | None = None) -> ModelParams:
    """Initialize all parameters.

    The frozen image base is drawn from ``base_seed`` alone so every run shares
    the same "pretrained" backbone; everything trainable comes from ``seed``.
    Adapter ``B`` factors start at zero so the adapted network equals the base
    network exactly at step 0. ``gene_mean`` (training mean log expression)
    seeds the decoder output bias and centres the gene network's first layer.
    """
    base_rng = np.random.default_rng([base_seed, 0xBA5E])
    rng = np.random.default_rng([seed, 0x7EA1])
    d_in, d, r = dims.feature_dim, dims.embed_dim, dims.adapter_rank
    a: dict[str, np.ndarray] = {}
    a["image.base.w1"], a["image.base.b1"] = _dense(base_rng, d, d_in)
    a["image.base.b1"] = base_rng.normal(0.0, 0.1, size=d)
    a["image.base.w2"], a["image.base.b2"] = _dense(base_rng, d, d, EMBED_GAIN)
    frozen = frozenset(a)
    # with one adapted layer it is the last one
    for layer in range(3 - dims.adapter_layers, 3):
        n_in = d_in if layer == 1 else d
        a[f"image.adapter{layer}.B"] = np.zeros((d, r))
        a[f"image.adapter{layer}.A"] = rng.normal(0.0, 0.01, size=(r, n_in))
    a["gene.w1"], a["gene.b1"] = _dense(rng, dims.gene_hidden, dims.n_genes)
    a["gene.w2"], a["gene.b2"] = _dense(rng, d, dims.gene_hidden, EMBED_GAIN)
    a["decoder.w1"], a["decoder.b1"] = _dense(rng, dims.decoder_hidden, 2 * d)
    a["decoder.w2"], a["decoder.b2"] = _dense(rng, dims.n_genes, dims.decoder_hidden)
    if gene_mean is not None:
        a["gene.b1"] = -a["gene.w1"] @ gene_mean
        a["decoder.b2"] = np.asarray(gene_mean, dtype=np.float64).copy()
    a["log_c"] = np.array(0.0)
    a["log_tau"] = np.array(math.log(TAU_INIT))
    return ModelParams(dims, a, frozen)
