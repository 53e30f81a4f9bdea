"""Objective assembly, optimizer, training loop and gradient checking."""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from .align import LOG_TAU_MAX, LOG_TAU_MIN, hca_loss, hca_loss_euclidean, hea_loss, project_batch
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, GenePanel, log_transform, select_hmhvg
from .errors import ContractViolation
from .evalx import MetricsReport, SplitSpec, evaluate, split_slides
from .params import ModelDims, ModelParams, init_params
from .predict import DECODER_INPUTS, predict_expression, prediction_loss
from .represent import DEFAULT_K, encode_gene, encode_image, knn_neighbors, niche_average

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    """Everything that determines a training run besides the dataset."""

    alpha: float = 1.0
    beta: float = 0.2
    batch_size: int = 64
    epochs: int = 30
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    seed: int = 0
    split_seed: int | None = None
    base_seed: int = 0
    niche_k: int = DEFAULT_K
    n_genes: int = 200
    embed_dim: int = 32
    gene_hidden: int = 512
    decoder_hidden: int = 512
    adapter_rank: int = 4
    adapter_layers: int = 2
    no_hea: bool = False
    no_gi_hea: bool = False
    no_hca: bool = False
    euclidean: bool = False
    decoder_input: str = "both"
    literal_contrastive: bool = False

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ContractViolation("alpha and beta must be non-negative")
        if self.batch_size < 2:
            raise ContractViolation("batch_size must be at least 2 (in-batch negatives)")
        if self.epochs < 0:
            raise ContractViolation("epochs must be non-negative")
        if self.decoder_input not in DECODER_INPUTS:
            raise ContractViolation(f"decoder_input must be one of {DECODER_INPUTS}")

    @property
    def effective_split_seed(self) -> int:
        return self.seed if self.split_seed is None else self.split_seed

    def dims(self, feature_dim: int) -> ModelDims:
        return ModelDims(
            feature_dim=feature_dim,
            embed_dim=self.embed_dim,
            n_genes=self.n_genes,
            gene_hidden=self.gene_hidden,
            decoder_hidden=self.decoder_hidden,
            adapter_rank=self.adapter_rank,
            adapter_layers=self.adapter_layers,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


# data preparation -------------------------------------------------------


@dataclass(frozen=True)
class Batch:
    feat_s: np.ndarray
    feat_n: np.ndarray
    Y_s: np.ndarray
    Y_n: np.ndarray

    def __len__(self) -> int:
        return len(self.feat_s)

    def subset(self, idx) -> "Batch":
        return Batch(self.feat_s[idx], self.feat_n[idx], self.Y_s[idx], self.Y_n[idx])


@dataclass
class PreparedData:
    """Split, gene panel and per-spot model inputs derived from a dataset."""

    splits: dict[str, list[str]]
    panel: GenePanel
    parts: dict[str, Batch]
    rows: dict[str, np.ndarray]


def prepare(dataset: Dataset, config: TrainConfig) -> PreparedData:
    """Slide-level split, HMHVG panel on training spots, log transform, niches."""
    splits = split_slides(dataset.slides, SplitSpec(seed=config.effective_split_seed))
    train_rows = dataset.rows_for(splits["train"])
    if len(train_rows) < 2:
        raise ContractViolation("training split has fewer than 2 spots")
    panel, _ = select_hmhvg(dataset.counts[train_rows], config.n_genes, dataset.gene_names)
    Y = log_transform(dataset.counts[:, panel.indices])
    F = dataset.features.astype(np.float64)
    Y_n = np.empty_like(Y)
    F_n = np.empty_like(F)
    for slide in dataset.slides:
        rows = dataset.slide_rows(slide)
        index = knn_neighbors(dataset.coords[rows], config.niche_k, ids=dataset.spot_ids[rows])
        Y_n[rows] = niche_average(Y[rows], index)
        F_n[rows] = niche_average(F[rows], index)
    parts, row_map = {}, {}
    for name, slides in splits.items():
        r = dataset.rows_for(slides)
        if len(r) == 0:
            raise ContractViolation(f"{name} split is empty")
        row_map[name] = r
        parts[name] = Batch(F[r], F_n[r], Y[r], Y_n[r])
    return PreparedData(splits, panel, parts, row_map)


# objective --------------------------------------------------------------


def _forward(p: Mapping, batch: Batch, config: TrainConfig):
    I_s, I_n = encode_image(batch.feat_s, batch.feat_n, p)
    Y_pred = predict_expression(I_s, I_n, p, config.decoder_input)
    pred = prediction_loss(Y_pred, batch.Y_s)
    hca = hea = 0.0
    use_hca = not config.no_hca
    use_hea = not config.no_hea and not config.euclidean
    if use_hca or use_hea:
        G_s, G_n = encode_gene(batch.Y_s, batch.Y_n, p)
        tau = ad.exp(p["log_tau"])
        if config.euclidean:
            if use_hca:
                hca = hca_loss_euclidean(I_s, I_n, G_s, G_n, tau)
        else:
            hb = project_batch(I_s, I_n, G_s, G_n, ad.exp(p["log_c"]))
            if use_hca:
                hca = hca_loss(hb, tau, literal=config.literal_contrastive)
            if use_hea:
                hea = hea_loss(hb, gene_image=not config.no_gi_hea)
    total = ad.add(pred, ad.mul(config.alpha, ad.add(hca, ad.mul(config.beta, hea))))
    return total, {"pred": pred, "hca": hca, "hea": hea}


def total_loss(batch: Batch, params: ModelParams, config: TrainConfig) -> tuple[float, dict[str, float]]:
    """``pred + alpha * (hca + beta * hea)`` and its three components."""
    total, comps = _forward(params.arrays, batch, config)
    return float(total), {k: float(v) for k, v in comps.items()}


def loss_and_grad(batch: Batch, params: ModelParams, config: TrainConfig):
    """Total loss, components and analytic gradients of every trainable array."""
    leaves = {n: ad.Tensor(a, requires_grad=True, name=n) for n, a in params.arrays.items() if n not in params.frozen}
    p = {**params.arrays, **leaves}
    total, comps = _forward(p, batch, config)
    grads = {n: np.zeros_like(params.arrays[n]) for n in leaves}
    if ad.is_tensor(total):
        ad.backward(total)
        for n, t in leaves.items():
            if t.grad is not None:
                grads[n] = t.grad
    return float(ad.as_array(total)), {k: float(ad.as_array(v)) for k, v in comps.items()}, grads


def predict_rows(params: ModelParams, batch: Batch, config: TrainConfig) -> np.ndarray:
    I_s, I_n = encode_image(batch.feat_s, batch.feat_n, params.arrays)
    return np.asarray(predict_expression(I_s, I_n, params.arrays, config.decoder_input))


def evaluate_split(params: ModelParams, data: PreparedData, split: str, config: TrainConfig) -> MetricsReport:
    part = data.parts[split]
    return evaluate(predict_rows(params, part, config), part.Y_s)


# optimizer --------------------------------------------------------------


class AdamW:
    """Adam with decoupled weight decay and a cosine learning-rate schedule.

    Decay applies to weight matrices and adapter factors only, never to
    biases, ``log_c`` or ``log_tau``.
    """

    def __init__(self, params: ModelParams, lr: float, weight_decay: float, total_steps: int,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.total_steps = max(1, total_steps)
        self.b1, self.b2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {n: np.zeros_like(params[n]) for n in params.trainable()}
        self.v = {n: np.zeros_like(params[n]) for n in params.trainable()}

    @staticmethod
    def decays(name: str) -> bool:
        return name.endswith((".w1", ".w2", ".A", ".B"))

    def current_lr(self) -> float:
        t = min(self.step_count, self.total_steps)
        return self.lr * 0.5 * (1.0 + math.cos(math.pi * t / self.total_steps))

    def step(self, params: ModelParams, grads: Mapping[str, np.ndarray]) -> None:
        lr = self.current_lr()
        self.step_count += 1
        t = self.step_count
        for name in self.m:
            g = grads[name]
            self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * g * g
            m_hat = self.m[name] / (1 - self.b1 ** t)
            v_hat = self.v[name] / (1 - self.b2 ** t)
            p = params.arrays[name]
            if self.decays(name):
                p = p - lr * self.weight_decay * p
            # 0-d arithmetic yields numpy scalars; keep every entry an ndarray
            params.arrays[name] = np.asarray(p - lr * m_hat / (np.sqrt(v_hat) + self.eps))
        params.arrays["log_tau"] = np.asarray(np.clip(params.arrays["log_tau"], LOG_TAU_MIN, LOG_TAU_MAX))

    def state(self) -> dict[str, np.ndarray]:
        out = {f"opt.m/{n}": a for n, a in self.m.items()}
        out.update({f"opt.v/{n}": a for n, a in self.v.items()})
        out["opt.step"] = np.array(float(self.step_count))
        return out

    def load_state(self, groups: Mapping[str, np.ndarray]) -> None:
        for n in self.m:
            self.m[n] = groups[f"opt.m/{n}"].copy()
            self.v[n] = groups[f"opt.v/{n}"].copy()
        self.step_count = int(groups["opt.step"])


# checkpoints ------------------------------------------------------------


def params_from_groups(groups: Mapping[str, np.ndarray]) -> ModelParams:
    """Rebuild :class:`ModelParams` (dims inferred from shapes) from checkpoint groups."""
    names = [n for n in groups if not n.startswith(("opt.", "train.", "best/"))]
    adapters = sorted({int(n[len("image.adapter")]) for n in names if n.startswith("image.adapter")})
    try:
        dims = ModelDims(
            feature_dim=groups["image.base.w1"].shape[1],
            embed_dim=groups["image.base.w2"].shape[0],
            n_genes=groups["gene.w1"].shape[1],
            gene_hidden=groups["gene.w1"].shape[0],
            decoder_hidden=groups["decoder.w1"].shape[0],
            adapter_rank=groups[f"image.adapter{adapters[0]}.A"].shape[0] if adapters else 4,
            adapter_layers=len(adapters),
        )
    except KeyError as e:
        raise ContractViolation(f"checkpoint lacks parameter group {e}") from None
    arrays = {n: groups[n].copy() for n in names}
    frozen = frozenset(n for n in names if n.startswith("image.base."))
    return ModelParams(dims, arrays, frozen)


def save_model(path, params: ModelParams, extra: Mapping[str, np.ndarray] | None = None) -> None:
    save_checkpoint(path, {**params.arrays, **(extra or {})})


def load_model(path) -> tuple[ModelParams, dict[str, np.ndarray]]:
    groups = load_checkpoint(path)
    params = params_from_groups(groups)
    extra = {n: a for n, a in groups.items() if n not in params.arrays}
    return params, extra


# training loop ----------------------------------------------------------


@dataclass
class TrainResult:
    params: ModelParams
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0
    last_params: ModelParams | None = None
    optimizer: AdamW | None = None
    diverged: bool = False


def _metric_record(prefix: str, report: MetricsReport) -> dict:
    out = {f"{prefix}_pcc@{k}": v for k, v in report.pcc_at.items()}
    out[f"{prefix}_mse"] = report.mse
    out[f"{prefix}_mae"] = report.mae
    return out


def train(
    dataset: Dataset | PreparedData,
    config: TrainConfig,
    resume: tuple[ModelParams, Mapping[str, np.ndarray]] | None = None,
    on_epoch: Callable[[dict], None] | None = None,
    stop_epoch: int | None = None,
) -> TrainResult:
    """Train with the full objective; keep the parameters with the best
    validation PCC@200 (ties keep the earlier epoch).

    Shuffling uses a generator seeded from ``(seed, epoch)``, so a run resumed
    from a saved optimizer state continues exactly as an uninterrupted one.
    ``stop_epoch`` ends this call early without shortening the learning-rate
    schedule, which is how an interrupted run is produced.
    """
    data = dataset if isinstance(dataset, PreparedData) else prepare(dataset, config)
    train_part = data.parts["train"]
    n = len(train_part)
    steps_per_epoch = n // config.batch_size
    if steps_per_epoch == 0 and config.epochs > 0:
        raise ContractViolation(f"training split ({n} spots) smaller than one batch ({config.batch_size})")
    dims = config.dims(train_part.feat_s.shape[1])

    start_epoch, best_pcc, best_epoch = 0, -np.inf, 0
    if resume is None:
        params = init_params(dims, config.seed, config.base_seed, train_part.Y_s.mean(axis=0))
        opt = AdamW(params, config.learning_rate, config.weight_decay, config.epochs * steps_per_epoch)
        best = params.copy()
    else:
        params, extra = resume[0].copy(), resume[1]
        opt = AdamW(params, config.learning_rate, config.weight_decay, config.epochs * steps_per_epoch)
        opt.load_state(extra)
        start_epoch = int(extra["train.epoch"])
        best_pcc = float(extra["train.best_pcc"])
        best_epoch = int(extra["train.best_epoch"])
        best = params_from_groups({k[len("best/"):]: v for k, v in extra.items() if k.startswith("best/")})

    history: list[dict] = []
    diverged = False
    last = config.epochs if stop_epoch is None else min(config.epochs, stop_epoch)
    for epoch in range(start_epoch + 1, last + 1):
        rng = np.random.default_rng([config.seed, epoch, 0x5EED])
        order = rng.permutation(n)
        sums = {"loss": 0.0, "pred": 0.0, "hca": 0.0, "hea": 0.0}
        snapshot = params.copy()
        for s in range(steps_per_epoch):
            batch = train_part.subset(order[s * config.batch_size:(s + 1) * config.batch_size])
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                loss, comps, grads = loss_and_grad(batch, params, config)
            if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                diverged = True
                break
            opt.step(params, grads)
            sums["loss"] += loss
            for k, v in comps.items():
                sums[k] += v
        if diverged:
            log.warning("non-finite loss in epoch %d; keeping last finite parameters", epoch)
            params = snapshot
            history.append({"epoch": epoch, "diverged": True})
            break
        val = evaluate_split(params, data, "val", config)
        rec = {"epoch": epoch, **{k: v / steps_per_epoch for k, v in sums.items()}}
        rec["tau"] = float(np.exp(params["log_tau"]))
        rec["c"] = float(np.exp(params["log_c"]))
        rec.update(_metric_record("val", val))
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
        if val.pcc_at[200] > best_pcc:
            best_pcc, best_epoch, best = val.pcc_at[200], epoch, params.copy()
    return TrainResult(best, history, best_epoch, params, opt, diverged)


def resume_state(result: TrainResult, last_epoch: int) -> dict[str, np.ndarray]:
    """Checkpoint groups needed to continue ``result`` from ``last_epoch``."""
    best_pcc = -np.inf
    for rec in result.history:
        if rec.get("epoch") == result.best_epoch and "val_pcc@200" in rec:
            best_pcc = rec["val_pcc@200"]
    out = dict(result.optimizer.state()) if result.optimizer else {}
    out["train.epoch"] = np.array(float(last_epoch))
    out["train.best_epoch"] = np.array(float(result.best_epoch))
    out["train.best_pcc"] = np.array(best_pcc)
    out.update({f"best/{k}": v for k, v in result.params.arrays.items()})
    return out


def write_history(path, history: list[dict], append: bool = False) -> None:
    with open(path, "a" if append else "w", encoding="utf-8") as f:
        for rec in history:
            f.write(json.dumps(rec, sort_keys=True) + "\n")


# gradient check ---------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    skipped: list[tuple[str, int, str]]
    per_group: dict[str, float]
    worst: tuple[str, int, float, float] | None = None

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol

    def to_dict(self) -> dict:
        return {
            "max_rel_error": self.max_rel_error,
            "checked": self.checked,
            "skipped": [list(s) for s in self.skipped],
            "per_group": self.per_group,
            "worst": list(self.worst) if self.worst else None,
        }


def _pick_indices(size: int, k: int) -> np.ndarray:
    if size <= k:
        return np.arange(size)
    return np.unique(np.linspace(0, size - 1, k).round().astype(np.int64))


def grad_check(
    params: ModelParams,
    batch: Batch,
    config: TrainConfig,
    eps: float = 1e-5,
    per_group: int = 24,
    floor: float = 1e-6,
    min_total: int = 200,
) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    A deterministic spread of scalars is taken from every trainable array:
    ``per_group`` each, raised so that at least ``min_total`` are visited
    overall (``log_c`` and ``log_tau`` are single scalars and always checked).
    Relative error is ``|a - n| / max(|a|, |n|, floor * max(1, |L|))``;
    gradients below that floor are under the round-off level of a difference
    quotient of ``L``. A scalar is skipped when its stencil changes the branch
    taken by any clamp, hinge or selection in the loss, or when ``log_tau``
    sits on its clamp boundary.
    """
    if not 1e-7 <= eps <= 1e-3:
        warnings.warn(
            f"eps={eps:g} is outside [1e-7, 1e-3]; finite differences will be poorly conditioned",
            stacklevel=2,
        )
    loss0, _, grads = loss_and_grad(batch, params, config)
    abs_floor = floor * max(1.0, abs(loss0))
    work = params.copy()

    def f(name, flat_idx, value):
        arr = work.arrays[name]
        old = arr.flat[flat_idx]
        arr.flat[flat_idx] = value
        with ad.record_branches() as rec:
            loss, _ = total_loss(batch, work, config)
        arr.flat[flat_idx] = old
        return loss, rec.signature()

    with ad.record_branches() as rec0:
        total_loss(batch, work, config)
    sig0 = rec0.signature()

    names = params.trainable()
    sizes = [params[n].size for n in names]
    # smallest per-array quota reaching min_total (or every scalar, if fewer)
    while sum(min(sz, per_group) for sz in sizes) < min(min_total, sum(sizes)):
        per_group += 1
    worst_err, worst = 0.0, None
    checked = 0
    skipped: list[tuple[str, int, str]] = []
    groups: dict[str, float] = {}
    for name in names:
        arr = params[name]
        if name == "log_tau" and not (LOG_TAU_MIN + eps < float(arr) < LOG_TAU_MAX - eps):
            skipped.append((name, 0, "at temperature clamp boundary"))
            continue
        gmax = 0.0
        for i in _pick_indices(arr.size, per_group):
            x0 = float(arr.flat[i])
            fp, sp = f(name, i, x0 + eps)
            fm, sm = f(name, i, x0 - eps)
            if sp != sig0 or sm != sig0:
                skipped.append((name, int(i), "stencil crosses a clamp/hinge boundary"))
                continue
            num = (fp - fm) / (2 * eps)
            ana = float(grads[name].flat[i])
            err = abs(ana - num) / max(abs(ana), abs(num), abs_floor)
            checked += 1
            gmax = max(gmax, err)
            if err >= worst_err:
                worst_err, worst = err, (name, int(i), ana, num)
        groups[name] = gmax
    return GradCheckReport(worst_err, checked, skipped, groups, worst)


def with_flags(config: TrainConfig, **flags) -> TrainConfig:
    return replace(config, **flags)


def save_run(out_dir, result: TrainResult, config: TrainConfig, panel: GenePanel) -> None:
    """Write ``model.hstc`` (best), ``last.hstc`` (resumable), the panel and config."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_model(out / "model.hstc", result.params)
    last = result.last_params or result.params
    last_epoch = max([r["epoch"] for r in result.history if "epoch" in r and not r.get("diverged")], default=0)
    save_model(out / "last.hstc", last, resume_state(result, last_epoch))
    (out / "panel.json").write_text(panel.to_json(), encoding="utf-8")
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
