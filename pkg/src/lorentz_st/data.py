"""Spot datasets: in-memory model, on-disk format, preprocessing, synthesis.

On-disk layout of a dataset directory::

    spots.csv    slide_id,spot_id,x_um,y_um   (UTF-8, LF, '.' decimal)
    expr.bin     raw counts, spots x genes     magic b"HSTE"
    feats.bin    image features, spots x d_in  magic b"HSTF"
    genes.txt    one gene name per line
    panel.json   optional, gene-panel selection statistics

Each ``.bin`` file is ``magic, u32 version, u64 rows, u64 cols`` followed by
little-endian float32 values in row-major order, rows in ``spots.csv`` order.
"""

from __future__ import annotations

import csv
import io
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractViolation, FormatError

MATRIX_VERSION = 1
_HEADER = struct.Struct("<4sIQQ")
SPOTS_HEADER = ["slide_id", "spot_id", "x_um", "y_um"]


@dataclass(frozen=True)
class SpotRecord:
    slide_id: str
    spot_id: str
    x_um: float
    y_um: float
    counts: np.ndarray
    feature: np.ndarray


@dataclass
class Dataset:
    """Column-oriented collection of spots across slides.

    ``counts`` and ``features`` are float32 so they round-trip bit-exactly
    through the binary files.
    """

    slide_ids: np.ndarray
    spot_ids: np.ndarray
    coords: np.ndarray
    counts: np.ndarray
    features: np.ndarray
    gene_names: list[str]
    panel: "GenePanel | None" = None

    def __post_init__(self):
        self.slide_ids = np.asarray(self.slide_ids, dtype=str)
        self.spot_ids = np.asarray(self.spot_ids, dtype=str)
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(-1, 2)
        self.gene_names = [str(g) for g in self.gene_names]
        self.counts = np.asarray(self.counts, dtype=np.float32)
        self.features = np.asarray(self.features, dtype=np.float32)
        if self.counts.ndim != 2:
            self.counts = self.counts.reshape(len(self.slide_ids), len(self.gene_names))
        if self.features.ndim != 2:
            self.features = self.features.reshape(len(self.slide_ids), -1 if len(self.slide_ids) else 0)
        m = len(self.slide_ids)
        if not (len(self.spot_ids) == len(self.coords) == len(self.counts) == len(self.features) == m):
            raise ContractViolation("dataset columns differ in length")
        if self.counts.shape[1] != len(self.gene_names) and m:
            raise ContractViolation(
                f"{len(self.gene_names)} gene names for {self.counts.shape[1]} count columns"
            )
        if np.any(self.counts < 0):
            raise ContractViolation("counts must be non-negative")
        if not np.all(np.isfinite(self.coords)):
            raise ContractViolation("coordinates must be finite")
        keys = set(zip(self.slide_ids.tolist(), self.spot_ids.tolist()))
        if len(keys) != m:
            raise ContractViolation("(slide_id, spot_id) pairs must be unique")

    def __len__(self) -> int:
        return len(self.slide_ids)

    @property
    def slides(self) -> list[str]:
        """Slide ids in order of first appearance."""
        return list(dict.fromkeys(self.slide_ids.tolist()))

    def slide_rows(self, slide: str) -> np.ndarray:
        return np.flatnonzero(self.slide_ids == slide)

    def rows_for(self, slides: Sequence[str]) -> np.ndarray:
        return np.flatnonzero(np.isin(self.slide_ids, list(slides)))

    def record(self, i: int) -> SpotRecord:
        return SpotRecord(
            str(self.slide_ids[i]),
            str(self.spot_ids[i]),
            float(self.coords[i, 0]),
            float(self.coords[i, 1]),
            self.counts[i],
            self.features[i],
        )

    def equal(self, other: "Dataset") -> bool:
        return (
            self.slide_ids.tolist() == other.slide_ids.tolist()
            and self.spot_ids.tolist() == other.spot_ids.tolist()
            and self.coords.tobytes() == other.coords.tobytes()
            and self.counts.shape == other.counts.shape
            and self.counts.tobytes() == other.counts.tobytes()
            and self.features.shape == other.features.shape
            and self.features.tobytes() == other.features.tobytes()
            and self.gene_names == other.gene_names
        )


# preprocessing ----------------------------------------------------------


@dataclass(frozen=True)
class GenePanel:
    """Selected genes (in selection order) and the statistics that ranked them."""

    names: list[str]
    indices: list[int]
    means: list[float]
    variances: list[float]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "GenePanel":
        return cls(**json.loads(text))


def select_hmhvg(counts, n_genes: int = 200, names: Sequence[str] | None = None):
    """Pick the top ``n_genes`` highly-mean, highly-variable genes.

    Genes are ranked by mean (descending) and the top ``2 * n_genes`` kept;
    those are ranked by variance (descending) and the top ``n_genes`` kept.
    Ties at either stage go to the alphabetically smaller name. Pass only
    training spots. Returns ``(panel, reduced_counts)``.
    """
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 2 or counts.shape[0] < 2:
        raise ContractViolation("need a spots x genes matrix with at least 2 spots")
    n_raw = counts.shape[1]
    if n_genes > n_raw or n_genes < 1:
        raise ContractViolation(f"cannot select {n_genes} genes out of {n_raw}")
    if names is None:
        names = [f"g{i}" for i in range(n_raw)]
    names = np.asarray(names, dtype=str)
    name_rank = np.argsort(np.argsort(names, kind="stable"), kind="stable")
    means = counts.mean(axis=0)
    variances = counts.var(axis=0)
    by_mean = np.lexsort((name_rank, -means))[: min(2 * n_genes, n_raw)]
    by_var = by_mean[np.lexsort((name_rank[by_mean], -variances[by_mean]))][:n_genes]
    panel = GenePanel(
        names=names[by_var].tolist(),
        indices=by_var.tolist(),
        means=means[by_var].tolist(),
        variances=variances[by_var].tolist(),
    )
    return panel, counts[:, by_var]


def log_transform(counts) -> np.ndarray:
    """Elementwise ``log(1 + x)`` of non-negative counts."""
    counts = np.asarray(counts, dtype=np.float64)
    if np.any(counts < 0):
        raise ContractViolation("log_transform requires non-negative counts")
    return np.log1p(counts)


# synthetic data ---------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of the synthetic hierarchical spot generator.

    Spots sit on a grid with ``spacing_um`` pitch. Spots are grouped into
    spatially contiguous niches of roughly ``niche_size`` spots; each niche
    draws a latent vector and each spot adds its own perturbation. Log
    expression and image features are two different linear readouts of the
    same spot latent with independent noise.
    """

    slides: int = 5
    spots_per_slide: int = 400
    grid: str = "hex"
    niche_latent_dim: int = 8
    spot_noise: float = 0.5
    gene_loading_seed: int = 0
    seed: int = 0
    n_genes_raw: int = 400
    feature_dim: int = 32
    perturbation: float = 0.7
    feature_noise: float = 1.0
    niche_size: int = 20
    spacing_um: float = 100.0

    def __post_init__(self):
        for name in ("slides", "spots_per_slide", "niche_latent_dim", "n_genes_raw", "feature_dim", "niche_size"):
            if getattr(self, name) < 1:
                raise ContractViolation(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("spot_noise", "perturbation", "feature_noise"):
            if getattr(self, name) < 0:
                raise ContractViolation(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.grid not in ("hex", "square"):
            raise ContractViolation(f"grid must be 'hex' or 'square', got {self.grid!r}")
        if not self.spacing_um > 0:
            raise ContractViolation("spacing_um must be positive")


def grid_coords(n: int, grid: str = "hex", spacing: float = 100.0) -> np.ndarray:
    """First ``n`` points of a near-square hex or square lattice, in µm."""
    cols = max(1, math.ceil(math.sqrt(n)))
    idx = np.arange(n)
    r, q = idx // cols, idx % cols
    if grid == "hex":
        x = (q + 0.5 * (r % 2)) * spacing
        y = r * spacing * math.sqrt(3) / 2
    else:
        x, y = q * spacing, r * spacing
    return np.stack([x, y], axis=1).astype(np.float64)


def generate_synthetic(config: SynthConfig = SynthConfig()) -> Dataset:
    """Build a deterministic synthetic dataset from ``config``."""
    L = config.niche_latent_dim
    loading_rng = np.random.default_rng([config.gene_loading_seed, 0x6E4E])
    n_raw = config.n_genes_raw
    gene_mean = loading_rng.uniform(0.2, 3.0, size=n_raw)
    gene_scale = loading_rng.uniform(0.1, 1.0, size=n_raw)
    loading = loading_rng.normal(size=(n_raw, L)) * (gene_scale / math.sqrt(L))[:, None]
    feat_map = loading_rng.normal(size=(config.feature_dim, L)) / math.sqrt(L)
    gene_names = [f"gene{i:04d}" for i in range(n_raw)]

    slides, spots, coords, counts, feats = [], [], [], [], []
    for s in range(config.slides):
        rng = np.random.default_rng([config.seed, s, 0x511DE])
        M = config.spots_per_slide
        xy = grid_coords(M, config.grid, config.spacing_um)
        n_niche = max(1, M // config.niche_size)
        centers = xy[rng.choice(M, size=n_niche, replace=False)]
        d2 = ((xy[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
        assign = np.argmin(d2, axis=1)
        niche_latent = rng.normal(size=(n_niche, L))
        latent = niche_latent[assign] + config.perturbation * rng.normal(size=(M, L))
        log_expr = gene_mean + latent @ loading.T + config.spot_noise * rng.normal(size=(M, n_raw))
        feat = latent @ feat_map.T + config.feature_noise * rng.normal(size=(M, config.feature_dim))
        slides += [f"slide{s:02d}"] * M
        spots += [f"s{s:02d}_{i:05d}" for i in range(M)]
        coords.append(xy)
        counts.append(np.maximum(np.expm1(log_expr), 0.0))
        feats.append(feat)
    return Dataset(
        slides,
        spots,
        np.concatenate(coords) if coords else np.zeros((0, 2)),
        np.concatenate(counts) if counts else np.zeros((0, n_raw)),
        np.concatenate(feats) if feats else np.zeros((0, config.feature_dim)),
        gene_names,
    )


# file formats -----------------------------------------------------------


def write_matrix(path, magic: bytes, matrix: np.ndarray) -> None:
    m = np.ascontiguousarray(matrix, dtype="<f4")
    rows, cols = m.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(magic, MATRIX_VERSION, rows, cols))
        f.write(m.tobytes())


def read_matrix(path, magic: bytes) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise FormatError(path, "offset 0", f"{_HEADER.size}-byte header", f"{len(raw)} bytes")
    got_magic, version, rows, cols = _HEADER.unpack_from(raw)
    if got_magic != magic:
        raise FormatError(path, "offset 0", f"magic {magic!r}", repr(got_magic))
    if version != MATRIX_VERSION:
        raise FormatError(path, "offset 4", f"format version {MATRIX_VERSION}", str(version))
    expected = _HEADER.size + 4 * rows * cols
    if len(raw) != expected:
        raise FormatError(
            path,
            f"offset {_HEADER.size}",
            f"{expected} bytes total for {rows}x{cols} float32 payload",
            f"{len(raw)} bytes",
        )
    return np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(rows, cols).astype(np.float32)


def _fmt(x: float) -> str:
    return repr(float(x))


def save_dataset(dataset: Dataset, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO(newline="")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SPOTS_HEADER)
    for sl, sp, (x, y) in zip(dataset.slide_ids, dataset.spot_ids, dataset.coords):
        w.writerow([sl, sp, _fmt(x), _fmt(y)])
    (d / "spots.csv").write_bytes(buf.getvalue().encode("utf-8"))
    n_genes = len(dataset.gene_names)
    write_matrix(d / "expr.bin", b"HSTE", dataset.counts.reshape(len(dataset), n_genes))
    write_matrix(d / "feats.bin", b"HSTF", dataset.features)
    (d / "genes.txt").write_bytes("".join(g + "\n" for g in dataset.gene_names).encode("utf-8"))
    if dataset.panel is not None:
        (d / "panel.json").write_text(dataset.panel.to_json(), encoding="utf-8")


def _read_spots(path: Path):
    text = path.read_bytes().decode("utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or lines[0] != ",".join(SPOTS_HEADER):
        found = repr(lines[0]) if lines else "empty file"
        raise FormatError(path, "line 1", f"header {','.join(SPOTS_HEADER)!r}", found)
    slides, spots, coords = [], [], []
    for lineno, row in enumerate(csv.reader(lines[1:]), start=2):
        if len(row) != 4:
            raise FormatError(path, f"line {lineno}", "4 comma-separated fields", f"{len(row)} fields")
        try:
            x, y = float(row[2]), float(row[3])
        except ValueError:
            raise FormatError(path, f"line {lineno}", "numeric x_um,y_um", f"{row[2]!r},{row[3]!r}") from None
        slides.append(row[0])
        spots.append(row[1])
        coords.append((x, y))
    return slides, spots, np.array(coords, dtype=np.float64).reshape(-1, 2)


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    for name in ("spots.csv", "expr.bin", "feats.bin", "genes.txt"):
        if not (d / name).is_file():
            raise FileNotFoundError(f"{d / name}: missing dataset file")
    slides, spots, coords = _read_spots(d / "spots.csv")
    counts = read_matrix(d / "expr.bin", b"HSTE")
    feats = read_matrix(d / "feats.bin", b"HSTF")
    genes = (d / "genes.txt").read_bytes().decode("utf-8").split("\n")
    if genes and genes[-1] == "":
        genes.pop()
    m = len(slides)
    if counts.shape[0] != m:
        raise FormatError(d / "expr.bin", "offset 8", f"{m} rows to match spots.csv", f"{counts.shape[0]} rows")
    if feats.shape[0] != m:
        raise FormatError(d / "feats.bin", "offset 8", f"{m} rows to match spots.csv", f"{feats.shape[0]} rows")
    if counts.shape[1] != len(genes):
        raise FormatError(d / "expr.bin", "offset 16", f"{len(genes)} columns to match genes.txt", f"{counts.shape[1]}")
    panel = None
    if (d / "panel.json").is_file():
        panel = GenePanel.from_json((d / "panel.json").read_text(encoding="utf-8"))
    return Dataset(slides, spots, coords, counts, feats, genes, panel)
