"""Ablation matrix over alignment strategy and decoder input, across seeds."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.stats import binomtest

from .data import Dataset
from .evalx import aggregate
from .train import TrainConfig, evaluate_split, prepare, train

log = logging.getLogger(__name__)

ARMS: dict[str, dict] = {
    "full": {},
    "no_gi_hea": {"no_gi_hea": True},
    "no_hea": {"no_hea": True},
    "no_align": {"no_hea": True, "no_hca": True},
    "euclidean": {"euclidean": True},
    "only_spot": {"decoder_input": "spot"},
    "only_niche": {"decoder_input": "niche"},
}

# (better, worse) pairs whose ordering the ablation is expected to show
TREND_CHECKS = (("full", "no_hea"), ("no_hea", "no_align"), ("full", "only_spot"))
NONINFERIORITY = (("full", "euclidean"),)


def sign_test(better: Sequence[float], worse: Sequence[float]) -> float:
    """One-sided paired sign test p-value for ``better > worse``; ties dropped."""
    d = np.asarray(better) - np.asarray(worse)
    n = int(np.count_nonzero(d))
    if n == 0:
        return 1.0
    return float(binomtest(int((d > 0).sum()), n, 0.5, alternative="greater").pvalue)


@dataclass
class AblationReport:
    seeds: list[int]
    test_pcc200: dict[str, list[float]]
    test_metrics: dict[str, list[dict]] = field(default_factory=dict)

    def mean(self, arm: str) -> float:
        return float(np.mean(self.test_pcc200[arm]))

    def trend(self, better: str, worse: str) -> dict:
        b, w = self.test_pcc200[better], self.test_pcc200[worse]
        return {
            "better": better,
            "worse": worse,
            "mean_gap": self.mean(better) - self.mean(worse),
            "wins": int(sum(x > y for x, y in zip(b, w))),
            "p_value": sign_test(b, w),
        }

    def checks(self, alpha: float = 0.1) -> list[dict]:
        out = []
        for b, w in TREND_CHECKS:
            if b in self.test_pcc200 and w in self.test_pcc200:
                t = self.trend(b, w)
                t["kind"] = "ordering"
                t["passed"] = t["mean_gap"] > 0 and t["p_value"] < alpha
                out.append(t)
        for b, w in NONINFERIORITY:
            if b in self.test_pcc200 and w in self.test_pcc200:
                t = self.trend(b, w)
                t["kind"] = "non-inferiority"
                t["passed"] = t["mean_gap"] >= 0.0
                out.append(t)
        return out

    def to_dict(self) -> dict:
        return {
            "seeds": self.seeds,
            "arms": {
                arm: {"test_pcc@200": v, "mean": aggregate(v)[0], "sd": aggregate(v)[1]}
                for arm, v in self.test_pcc200.items()
            },
            "checks": self.checks(),
        }

    def table(self) -> str:
        lines = [f"{'arm':<12} {'PCC@200 mean':>13} {'sd':>7}   per-seed"]
        for arm, v in self.test_pcc200.items():
            m, sd = aggregate(v)
            lines.append(f"{arm:<12} {m:>13.4f} {sd:>7.4f}   " + " ".join(f"{x:.4f}" for x in v))
        for c in self.checks():
            status = "PASS" if c["passed"] else "FAIL"
            lines.append(
                f"{status} {c['kind']}: {c['better']} {'>=' if c['kind'] == 'non-inferiority' else '>'} {c['worse']} "
                f"gap={c['mean_gap']:+.4f} wins={c['wins']}/{len(self.seeds)} p={c['p_value']:.4f}"
            )
        return "\n".join(lines)


def run_ablation(
    dataset: Dataset,
    base: TrainConfig,
    seeds: Sequence[int] = (0, 1, 2, 3, 4),
    arms: Sequence[str] = tuple(ARMS),
) -> AblationReport:
    """Train every arm for every seed; the seed fixes both split and init."""
    pcc: dict[str, list[float]] = {a: [] for a in arms}
    metrics: dict[str, list[dict]] = {a: [] for a in arms}
    for seed in seeds:
        seeded = replace(base, seed=seed, split_seed=None)
        data = prepare(dataset, seeded)
        for arm in arms:
            cfg = replace(seeded, **ARMS[arm])
            result = train(data, cfg)
            rep = evaluate_split(result.params, data, "test", cfg)
            pcc[arm].append(rep.pcc_at[200])
            metrics[arm].append({"pcc_at": rep.pcc_at, "mse": rep.mse, "mae": rep.mae, "best_epoch": result.best_epoch})
            log.info("seed %d arm %-10s test PCC@200 %.4f (best epoch %d)", seed, arm, rep.pcc_at[200], result.best_epoch)
    return AblationReport(list(seeds), pcc, metrics)
