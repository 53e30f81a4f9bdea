"""Expression-prediction metrics, slide-level splits and report output."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractViolation

PCC_KS = (10, 50, 200)


def _check_pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise ContractViolation(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    return pred, truth


def per_gene_pcc(pred, truth) -> np.ndarray:
    """Pearson correlation of each gene (column) across spots.

    Genes whose prediction or truth is constant get 0.
    """
    pred, truth = _check_pair(pred, truth)
    if pred.ndim != 2 or pred.shape[0] < 2:
        raise ContractViolation("Pearson correlation needs at least 2 spots")
    pc = pred - pred.mean(axis=0)
    tc = truth - truth.mean(axis=0)
    cov = (pc * tc).sum(axis=0)
    denom = np.sqrt((pc * pc).sum(axis=0) * (tc * tc).sum(axis=0))
    out = np.zeros(pred.shape[1])
    ok = denom > 0
    out[ok] = cov[ok] / denom[ok]
    return np.clip(out, -1.0, 1.0)


def pcc_at_k(pred, truth, k: int) -> float:
    """Mean of the ``k`` largest per-gene Pearson correlations."""
    r = per_gene_pcc(pred, truth)
    if not 1 <= k <= len(r):
        raise ContractViolation(f"k={k} outside 1..{len(r)}")
    return float(np.sort(r)[::-1][:k].mean())


def mse(pred, truth) -> float:
    pred, truth = _check_pair(pred, truth)
    return float(np.mean((pred - truth) ** 2))


def mae(pred, truth) -> float:
    pred, truth = _check_pair(pred, truth)
    return float(np.mean(np.abs(pred - truth)))


def pseudo_bulk(pred) -> np.ndarray:
    """Average predicted profile over all spots of a slide."""
    pred = np.asarray(pred, dtype=np.float64)
    if pred.ndim != 2 or pred.shape[0] == 0:
        raise ContractViolation("pseudo-bulk needs at least one spot")
    return pred.mean(axis=0)


@dataclass(frozen=True)
class SplitSpec:
    seed: int = 0
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1)


def split_slides(slide_ids: Sequence[str], spec: SplitSpec = SplitSpec()) -> dict[str, list[str]]:
    """Shuffle slides by seed and cut them into train/val/test.

    Validation and test each get ``max(1, floor(fraction * S))`` slides and the
    rest go to training.
    """
    slides = list(dict.fromkeys(slide_ids))
    S = len(slides)
    if S < 3:
        raise ContractViolation(f"need at least 3 slides for a train/val/test split, got {S}")
    _, f_val, f_test = spec.fractions
    # tolerate 0.1 * 10 == 0.9999999 style round-off
    n_test = max(1, math.floor(f_test * S + 1e-9))
    n_val = max(1, math.floor(f_val * S + 1e-9))
    if n_test + n_val >= S:
        n_test = n_val = 1
    order = np.random.default_rng([spec.seed, 0x5917]).permutation(S)
    shuffled = [slides[i] for i in order]
    return {
        "train": shuffled[: S - n_val - n_test],
        "val": shuffled[S - n_val - n_test: S - n_test],
        "test": shuffled[S - n_test:],
    }


@dataclass
class MetricsReport:
    per_gene_pcc: list[float]
    pcc_at: dict[int, float]
    mse: float
    mae: float
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "pcc_at": {str(k): v for k, v in self.pcc_at.items()},
            "mse": self.mse,
            "mae": self.mae,
            "per_gene_pcc": self.per_gene_pcc,
            **self.extra,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def write(self, path, gene_names: Sequence[str] | None = None, csv_path=None) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")
        if csv_path is not None:
            names = gene_names or [f"g{i}" for i in range(len(self.per_gene_pcc))]
            with open(csv_path, "w", newline="", encoding="utf-8") as f:
                w = csv.writer(f, lineterminator="\n")
                w.writerow(["gene", "pcc"])
                for g, r in zip(names, self.per_gene_pcc):
                    w.writerow([g, repr(float(r))])


def evaluate(pred, truth, ks: Sequence[int] = PCC_KS) -> MetricsReport:
    """PCC@k for each ``k`` (capped at the gene count), MSE and MAE."""
    pred, truth = _check_pair(pred, truth)
    r = per_gene_pcc(pred, truth)
    ranked = np.sort(r)[::-1]
    pcc_at = {int(k): float(ranked[: min(k, len(r))].mean()) for k in ks}
    return MetricsReport(r.tolist(), pcc_at, mse(pred, truth), mae(pred, truth))


def config_digest(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def aggregate(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation across splits."""
    v = np.asarray(values, dtype=np.float64)
    sd = float(v.std(ddof=1)) if len(v) > 1 else 0.0
    return float(v.mean()), sd
