"""Gene decoder and prediction loss."""

from __future__ import annotations

from typing import Mapping

import numpy as np

from . import autodiff as ad
from .errors import ContractViolation

DECODER_INPUTS = ("both", "spot", "niche")


def predict_expression(I_s, I_n, params: Mapping, decoder_input: str = "both"):
    """Decode log expression from ``concat(I_s, I_n)``.

    ``decoder_input`` selects the ablation arm: ``"spot"`` or ``"niche"``
    replace the other level with zeros, so the matching half of the first
    layer sees no signal and gets no gradient.
    """
    if decoder_input not in DECODER_INPUTS:
        raise ContractViolation(f"decoder_input must be one of {DECODER_INPUTS}, got {decoder_input!r}")
    w1 = params["decoder.w1"]
    width = ad.as_array(w1).shape[1]
    s_shape, n_shape = ad.as_array(I_s).shape, ad.as_array(I_n).shape
    if s_shape != n_shape or s_shape[-1] * 2 != width:
        raise ContractViolation(f"decoder expects two {width // 2}-wide inputs, got {s_shape} and {n_shape}")
    if decoder_input == "spot":
        I_n = np.zeros(n_shape)
    elif decoder_input == "niche":
        I_s = np.zeros(s_shape)
    x = ad.concat([I_s, I_n], axis=-1)
    h = ad.tanh(ad.add(ad.matmul(x, ad.transpose(w1)), params["decoder.b1"]))
    return ad.add(ad.matmul(h, ad.transpose(params["decoder.w2"])), params["decoder.b2"])


def prediction_loss(Y_pred, Y_true):
    """Squared L2 error summed over genes, averaged over the batch."""
    ps, ts = ad.as_array(Y_pred).shape, np.shape(Y_true)
    if ps != ts:
        raise ContractViolation(f"prediction shape {ps} != target shape {ts}")
    diff = ad.sub(Y_pred, Y_true)
    per_spot = ad.sum(ad.square(diff), axis=-1)
    return ad.mean(per_spot)
