"""Command-line interface: ``synth``, ``train``, ``eval``, ``gradcheck``, ``ablate``.

Every option can also be given as a key of a flat JSON object passed with
``--config``; keys are the option names with dashes replaced by underscores.
Precedence is defaults < config file < command-line flags. Unknown keys are
an error.

Exit codes: 0 success, 1 validation error, 2 runtime failure, 3 a check
(gradient check or ablation trend) did not meet its threshold.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .data import SynthConfig, generate_synthetic, load_dataset, save_dataset
from .errors import ContractViolation, FormatError
from .evalx import config_digest
from .experiments import ARMS, run_ablation
from .predict import DECODER_INPUTS
from .train import (
    TrainConfig,
    evaluate_split,
    grad_check,
    init_params,
    load_model,
    prepare,
    save_run,
    train,
    write_history,
)

log = logging.getLogger("lorentz_st")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_THRESHOLD = 0, 1, 2, 3


class UsageError(Exception):
    """Bad flags, config keys or values; maps to exit code 1."""


@dataclass(frozen=True)
class Option:
    name: str
    type: type
    default: Any
    help: str
    choices: tuple | None = None

    @property
    def flag(self) -> str:
        return "--" + self.name.replace("_", "-")


_TD, _SD = TrainConfig(), SynthConfig()

SYNTH_OPTIONS = [
    Option("slides", int, _SD.slides, "number of synthetic slides"),
    Option("spots", int, _SD.spots_per_slide, "spots per slide"),
    Option("grid", str, _SD.grid, "spot lattice", ("hex", "square")),
    Option("latent_dim", int, _SD.niche_latent_dim, "niche latent dimension"),
    Option("spot_noise", float, _SD.spot_noise, "log-expression noise sd"),
    Option("perturbation", float, _SD.perturbation, "per-spot latent perturbation sd"),
    Option("feature_noise", float, _SD.feature_noise, "image-feature noise sd"),
    Option("niche_size", int, _SD.niche_size, "approximate spots per synthetic niche"),
    Option("genes_raw", int, _SD.n_genes_raw, "genes before panel selection"),
    Option("feature_dim", int, _SD.feature_dim, "image feature width"),
    Option("spacing_um", float, _SD.spacing_um, "lattice pitch in micrometres"),
    Option("gene_loading_seed", int, _SD.gene_loading_seed, "seed of the shared gene loadings"),
]

TRAIN_OPTIONS = [
    Option("alpha", float, _TD.alpha, "weight of the alignment terms"),
    Option("beta", float, _TD.beta, "weight of the entailment term inside the alignment"),
    Option("batch_size", int, _TD.batch_size, "spots per batch"),
    Option("epochs", int, _TD.epochs, "training epochs"),
    Option("learning_rate", float, _TD.learning_rate, "peak learning rate"),
    Option("weight_decay", float, _TD.weight_decay, "decoupled weight decay"),
    Option("split_seed", int, -1, "slide split seed (-1: use --seed)"),
    Option("base_seed", int, _TD.base_seed, "seed of the frozen image base"),
    Option("niche_k", int, _TD.niche_k, "spots per niche including the centre"),
    Option("n_genes", int, _TD.n_genes, "genes in the selected panel"),
    Option("embed_dim", int, _TD.embed_dim, "embedding width"),
    Option("gene_hidden", int, _TD.gene_hidden, "gene encoder hidden width"),
    Option("decoder_hidden", int, _TD.decoder_hidden, "decoder hidden width"),
    Option("adapter_rank", int, _TD.adapter_rank, "low-rank adapter rank"),
    Option("adapter_layers", int, _TD.adapter_layers, "image layers carrying adapters", (0, 1, 2)),
    Option("no_hea", bool, False, "drop the entailment term"),
    Option("no_gi_hea", bool, False, "drop only the image-to-gene entailment terms"),
    Option("no_hca", bool, False, "drop the contrastive term"),
    Option("no_align", bool, False, "drop both alignment terms"),
    Option("euclidean", bool, False, "cosine contrastive alignment instead of hyperbolic, no entailment"),
    Option("decoder_input", str, _TD.decoder_input, "embedding levels fed to the decoder", DECODER_INPUTS),
    Option("literal_contrastive", bool, False, "contrastive loss with +distance scores and the positive left out"),
]

COMMON = [
    Option("seed", int, 0, "seed of this command (data for synth, init and split otherwise)"),
    Option("verbose", bool, False, "log progress to stderr"),
]
DATA = Option("data", str, "", "dataset directory (empty: generate synthetic data in memory)")
OUT = Option("out", str, "run", "output directory")

COMMANDS: dict[str, tuple[str, list[Option]]] = {
    "synth": ("generate a synthetic dataset", [*COMMON, Option("out", str, "synth_data", "output directory"), *SYNTH_OPTIONS]),
    "train": (
        "train a model",
        [*COMMON, Option("data", str, "", "dataset directory (required)"), OUT,
         Option("resume", str, "", "continue from a last.hstc checkpoint"), *TRAIN_OPTIONS],
    ),
    "eval": (
        "evaluate a checkpoint on one split",
        [*COMMON, Option("data", str, "", "dataset directory (required)"),
         Option("checkpoint", str, "run/model.hstc", "model checkpoint"),
         Option("split", str, "test", "split to evaluate", ("train", "val", "test")),
         Option("report", str, "", "report path (default: <checkpoint dir>/eval_<split>.json)"),
         Option("per_gene_csv", str, "", "optional CSV of per-gene correlations"),
         *TRAIN_OPTIONS],
    ),
    "gradcheck": (
        "compare analytic and finite-difference gradients",
        [*COMMON, DATA, Option("checkpoint", str, "", "check at these parameters instead of a fresh init"),
         Option("eps", float, 1e-5, "finite-difference step"),
         Option("batch", int, 16, "spots in the checked batch"),
         Option("tolerance", float, 1e-4, "maximum allowed relative error"),
         Option("per_group", int, 24, "scalars sampled per parameter array"),
         *TRAIN_OPTIONS, *SYNTH_OPTIONS],
    ),
    "ablate": (
        "run the ablation arms over several seeds",
        [*COMMON, DATA, Option("out", str, "ablation", "output directory"),
         Option("seeds", str, "0,1,2,3,4", "comma-separated training seeds"),
         Option("arms", str, "all", "comma-separated arms, or 'all': " + ", ".join(ARMS)),
         *TRAIN_OPTIONS, *SYNTH_OPTIONS],
    ),
}

ALL_KEYS = {o.name: o for _, opts in COMMANDS.values() for o in opts}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with 2
        raise UsageError(message)


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lorentz-st", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for cmd, (desc, opts) in COMMANDS.items():
        p = sub.add_parser(cmd, help=desc, description=desc)
        p.add_argument("--config", default=argparse.SUPPRESS, help="flat JSON file of option values (default: none)")
        for o in opts:
            text = f"{o.help} (default: {o.default!r})"
            if o.type is bool:
                p.add_argument(o.flag, dest=o.name, nargs="?", const=True, type=_bool,
                               default=argparse.SUPPRESS, help=text)
            else:
                p.add_argument(o.flag, dest=o.name, type=o.type, choices=o.choices,
                               default=argparse.SUPPRESS, help=text)
    return parser


def _coerce(o: Option, value, source: str):
    if o.type is bool:
        if not isinstance(value, bool):
            raise UsageError(f"{source}: {o.name} must be true or false, got {value!r}")
    elif o.type is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise UsageError(f"{source}: {o.name} must be an integer, got {value!r}")
    elif o.type is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise UsageError(f"{source}: {o.name} must be a number, got {value!r}")
        value = float(value)
    elif not isinstance(value, str):
        raise UsageError(f"{source}: {o.name} must be a string, got {value!r}")
    if o.choices is not None and value not in o.choices:
        raise UsageError(f"{source}: {o.name} must be one of {list(o.choices)}, got {value!r}")
    return value


def read_config_file(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"{path}: config file not found") from None
    except json.JSONDecodeError as e:
        raise UsageError(f"{path}: line {e.lineno}: invalid JSON ({e.msg})") from None
    if not isinstance(raw, dict):
        raise UsageError(f"{path}: expected a flat JSON object")
    unknown = sorted(set(raw) - set(ALL_KEYS))
    if unknown:
        raise UsageError(f"{path}: unknown keys {unknown}")
    return {k: _coerce(ALL_KEYS[k], v, str(path)) for k, v in raw.items()}


def resolve(command: str, ns: argparse.Namespace, base: dict | None = None) -> dict:
    """Merge defaults, ``base`` (e.g. a run's saved config), the config file and flags."""
    opts = {o.name: o for o in COMMANDS[command][1]}
    values = {n: o.default for n, o in opts.items()}
    for k, v in (base or {}).items():
        if k in opts:
            values[k] = v
    if hasattr(ns, "config"):
        for k, v in read_config_file(ns.config).items():
            if k in opts:
                values[k] = v
    for k in opts:
        if hasattr(ns, k):
            values[k] = getattr(ns, k)
    return values


def synth_config(v: dict, seed: int) -> SynthConfig:
    return SynthConfig(
        slides=v["slides"], spots_per_slide=v["spots"], grid=v["grid"], niche_latent_dim=v["latent_dim"],
        spot_noise=v["spot_noise"], perturbation=v["perturbation"], feature_noise=v["feature_noise"],
        niche_size=v["niche_size"], n_genes_raw=v["genes_raw"], feature_dim=v["feature_dim"],
        spacing_um=v["spacing_um"], gene_loading_seed=v["gene_loading_seed"], seed=seed,
    )


def train_config(v: dict) -> TrainConfig:
    return TrainConfig(
        alpha=v["alpha"], beta=v["beta"], batch_size=v["batch_size"], epochs=v["epochs"],
        learning_rate=v["learning_rate"], weight_decay=v["weight_decay"], seed=v["seed"],
        split_seed=None if v["split_seed"] < 0 else v["split_seed"], base_seed=v["base_seed"],
        niche_k=v["niche_k"], n_genes=v["n_genes"], embed_dim=v["embed_dim"], gene_hidden=v["gene_hidden"],
        decoder_hidden=v["decoder_hidden"], adapter_rank=v["adapter_rank"], adapter_layers=v["adapter_layers"],
        no_hea=v["no_hea"] or v["no_align"], no_gi_hea=v["no_gi_hea"], no_hca=v["no_hca"] or v["no_align"],
        euclidean=v["euclidean"], decoder_input=v["decoder_input"], literal_contrastive=v["literal_contrastive"],
    )


def run_options(config: TrainConfig) -> dict:
    """Inverse of :func:`train_config`, used for the saved ``config.json``."""
    d = config.to_dict()
    d["split_seed"] = -1 if d["split_seed"] is None else d["split_seed"]
    d["no_align"] = False
    return d


def _load_data(v: dict):
    if not v["data"]:
        raise UsageError("--data is required")
    if not Path(v["data"]).is_dir():
        raise UsageError(f"{v['data']}: dataset directory not found")
    return load_dataset(v["data"])


def _data_or_synthetic(v: dict, synth_seed: int):
    if v["data"]:
        return _load_data(v)
    return generate_synthetic(synth_config(v, synth_seed))


# commands ---------------------------------------------------------------


def cmd_synth(v: dict) -> int:
    cfg = synth_config(v, v["seed"])
    ds = generate_synthetic(cfg)
    save_dataset(ds, v["out"])
    print(f"wrote {v['out']}: slides={len(ds.slides)} spots={len(ds)} genes={len(ds.gene_names)} "
          f"feature_dim={ds.features.shape[1]}")
    return EXIT_OK


def cmd_train(v: dict) -> int:
    config = train_config(v)
    ds = _load_data(v)
    data = prepare(ds, config)
    out = Path(v["out"])
    resume = None
    if v["resume"]:
        if not Path(v["resume"]).is_file():
            raise UsageError(f"{v['resume']}: checkpoint not found")
        resume = load_model(v["resume"])
    result = train(data, config, resume=resume,
                   on_epoch=lambda r: log.info("epoch %d loss %.4f val PCC@200 %.4f",
                                               r["epoch"], r["loss"], r["val_pcc@200"]))
    save_run(out, result, config, data.panel)
    (out / "config.json").write_text(json.dumps(run_options(config), indent=1, sort_keys=True) + "\n",
                                     encoding="utf-8")
    best = evaluate_split(result.params, data, "val", config)
    # last line: validation metrics of the selected (saved) parameters
    history = [*result.history, {"selected_epoch": result.best_epoch, **_val_record(best)}]
    write_history(out / "history.jsonl", history, append=resume is not None)
    status = " (diverged; kept last finite parameters)" if result.diverged else ""
    print(f"trained {len(result.history)} epochs{status}; best epoch {result.best_epoch}; wrote {out}")
    return EXIT_RUNTIME if result.diverged else EXIT_OK


def _val_record(report) -> dict:
    out = {f"val_pcc@{k}": x for k, x in report.pcc_at.items()}
    out.update(val_mse=report.mse, val_mae=report.mae)
    return out


def cmd_eval(v: dict, ns: argparse.Namespace) -> int:
    ckpt = Path(v["checkpoint"])
    if not ckpt.is_file():
        raise UsageError(f"{ckpt}: checkpoint not found")
    saved = ckpt.parent / "config.json"
    if saved.is_file():
        v = resolve("eval", ns, json.loads(saved.read_text(encoding="utf-8")))
    config = train_config(v)
    params, _ = load_model(ckpt)
    ds = _load_data(v)
    data = prepare(ds, config)
    if params["decoder.w2"].shape[0] != len(data.panel.names):
        raise UsageError(f"{ckpt}: model predicts {params['decoder.w2'].shape[0]} genes, "
                         f"panel has {len(data.panel.names)}")
    report = evaluate_split(params, data, v["split"], config)
    report.extra.update({"split": v["split"], "checkpoint": str(ckpt),
                         "config_digest": config_digest(config.to_dict())})
    path = Path(v["report"]) if v["report"] else ckpt.parent / f"eval_{v['split']}.json"
    report.write(path, data.panel.names, v["per_gene_csv"] or None)
    ks = " ".join(f"PCC@{k}={x:.4f}" for k, x in report.pcc_at.items())
    print(f"{v['split']}: {ks} MSE={report.mse:.4f} MAE={report.mae:.4f}; wrote {path}")
    return EXIT_OK


def cmd_gradcheck(v: dict) -> int:
    config = train_config(v)
    ds = _data_or_synthetic(v, 0)
    data = prepare(ds, config)
    part = data.parts["train"]
    if v["checkpoint"]:
        params, _ = load_model(v["checkpoint"])
    else:
        params = init_params(config.dims(part.feat_s.shape[1]), config.seed, config.base_seed,
                             part.Y_s.mean(axis=0))
    rng = np.random.default_rng([config.seed, 0x6C4E])
    batch = part.subset(np.sort(rng.choice(len(part), size=min(v["batch"], len(part)), replace=False)))
    rep = grad_check(params, batch, config, eps=v["eps"], per_group=v["per_group"])
    for name, err in rep.per_group.items():
        print(f"  {name:<22} max rel err {err:.3e}")
    ok = rep.passed(v["tolerance"])
    print(f"{'PASS' if ok else 'FAIL'}: max relative error {rep.max_rel_error:.3e} over {rep.checked} scalars "
          f"({len(rep.skipped)} skipped at clamp/hinge boundaries), tolerance {v['tolerance']:g}")
    if rep.worst:
        print(f"  worst: {rep.worst[0]}[{rep.worst[1]}] analytic {rep.worst[2]:.6e} numeric {rep.worst[3]:.6e}")
    return EXIT_OK if ok else EXIT_THRESHOLD


def cmd_ablate(v: dict) -> int:
    config = train_config(v)
    try:
        seeds = [int(s) for s in v["seeds"].split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seeds must be comma-separated integers, got {v['seeds']!r}") from None
    arms = list(ARMS) if v["arms"] == "all" else [a.strip() for a in v["arms"].split(",") if a.strip()]
    bad = [a for a in arms if a not in ARMS]
    if bad or not seeds:
        raise UsageError(f"unknown arms {bad}" if bad else "no seeds given")
    ds = _data_or_synthetic(v, v["seed"])
    report = run_ablation(ds, config, seeds, arms)
    out = Path(v["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.json").write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n",
                                       encoding="utf-8")
    table = report.table()
    (out / "ablation.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return EXIT_OK if all(c["passed"] for c in report.checks()) else EXIT_THRESHOLD


def main(argv: Sequence[str] | None = None) -> int:
    try:
        ns = build_parser().parse_args(argv)
        v = resolve(ns.command, ns)
        logging.basicConfig(level=logging.INFO if v["verbose"] else logging.WARNING,
                            format="%(levelname)s %(message)s")
        handlers: dict[str, Callable[[], int]] = {
            "synth": lambda: cmd_synth(v),
            "train": lambda: cmd_train(v),
            "eval": lambda: cmd_eval(v, ns),
            "gradcheck": lambda: cmd_gradcheck(v),
            "ablate": lambda: cmd_ablate(v),
        }
        return handlers[ns.command]()
    except (UsageError, ContractViolation, FormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as e:  # noqa: BLE001 - every other failure is a runtime failure
        print(f"runtime failure: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
