"""Count matrices, dataset manifests, QC filtering and the synthetic generator.

On-disk layout of one dataset directory::

    matrix.mtx      Matrix Market coordinate file, rows = barcodes, cols = genes
    genes.tsv       one gene name per line
    barcodes.tsv    one barcode per line
    coords.tsv      optional, header ``x<TAB>y`` then one row per barcode

A collection is a JSON array of manifest entries (see :class:`DatasetManifest`).
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.io
import scipy.sparse as sp

MODALITIES = ("scRNA", "scATAC-activity", "spatial")


class DataError(ValueError):
    """Raised for malformed inputs: bad files, shapes or count values."""


@dataclass(frozen=True)
class DatasetManifest:
    dataset_id: str
    tissue: str
    modality: str
    species: str
    counts_path: str
    coords_path: str | None = None

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise DataError(f"{self.dataset_id}: unknown modality {self.modality!r}")
        if self.modality == "spatial" and not self.coords_path:
            raise DataError(f"{self.dataset_id}: coords required for spatial modality")


@dataclass(frozen=True, eq=False)
class CountMatrix:
    """Cells x genes UMI counts (CSC, int64) with names and optional 2-D coordinates."""

    values: sp.csc_matrix
    barcodes: tuple[str, ...]
    genes: tuple[str, ...]
    coords: np.ndarray | None = None

    def __post_init__(self):
        values = sp.csc_matrix(self.values)
        if values.dtype.kind == "f":
            if values.nnz and not np.all(values.data == np.round(values.data)):
                raise DataError("counts must be integral")
        elif values.dtype.kind not in "iu":
            raise DataError(f"unsupported count dtype {values.dtype}")
        values = values.astype(np.int64)
        values.indices = values.indices.astype(np.int64)
        values.indptr = values.indptr.astype(np.int64)
        if values.nnz and values.data.min() < 0:
            raise DataError("counts must be non-negative")
        n, p = values.shape
        barcodes, genes = tuple(self.barcodes), tuple(self.genes)
        if len(barcodes) != n or len(genes) != p:
            raise DataError(
                f"dimension mismatch: matrix {n}x{p}, {len(barcodes)} barcodes, {len(genes)} genes"
            )
        if len(set(genes)) != p:
            raise DataError("duplicate gene names")
        coords = self.coords
        if coords is not None:
            coords = np.asarray(coords, dtype=np.float64)
            if coords.shape != (n, 2):
                raise DataError(f"coords must be {n}x2, got {coords.shape}")
            coords.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "barcodes", barcodes)
        object.__setattr__(self, "genes", genes)
        object.__setattr__(self, "coords", coords)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def n_cells(self) -> int:
        return self.values.shape[0]

    @property
    def n_genes(self) -> int:
        return self.values.shape[1]

    def depths(self) -> np.ndarray:
        """Sequencing depth per cell (row sums)."""
        return np.asarray(self.values.sum(axis=1), dtype=np.int64).ravel()

    def dense(self, genes: Sequence[int] | None = None) -> np.ndarray:
        cols = self.values if genes is None else self.values[:, list(genes)]
        return cols.toarray().astype(np.float64)

    def subset(self, cells=None, genes=None) -> CountMatrix:
        cells = np.arange(self.n_cells) if cells is None else np.asarray(cells)
        genes = np.arange(self.n_genes) if genes is None else np.asarray(genes)
        if cells.dtype == bool:
            cells = np.flatnonzero(cells)
        if genes.dtype == bool:
            genes = np.flatnonzero(genes)
        return CountMatrix(
            values=self.values[cells][:, genes],
            barcodes=tuple(self.barcodes[i] for i in cells),
            genes=tuple(self.genes[j] for j in genes),
            coords=None if self.coords is None else self.coords[cells],
        )

    def equals(self, other: CountMatrix) -> bool:
        if self.shape != other.shape or self.genes != other.genes or self.barcodes != other.barcodes:
            return False
        if (self.values != other.values).nnz:
            return False
        if (self.coords is None) != (other.coords is None):
            return False
        return self.coords is None or np.array_equal(self.coords, other.coords)


@dataclass
class Dataset:
    manifest: DatasetManifest
    counts: CountMatrix


# ---------------------------------------------------------------------------
# I/O


def _read_names(path: Path) -> list[str]:
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n").split("\t")[0] for line in fh if line.strip()]


def _write_names(path: Path, names: Sequence[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(f"{name}\n" for name in names)


def write_counts(m: CountMatrix, directory: str | os.PathLike) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    coo = m.values.tocoo()
    # mmwrite emits entries in storage order; sort for byte-stable files
    order = np.lexsort((coo.col, coo.row))
    coo = sp.coo_matrix((coo.data[order], (coo.row[order], coo.col[order])), shape=coo.shape)
    scipy.io.mmwrite(str(directory / "matrix.mtx"), coo, field="integer")
    _write_names(directory / "genes.tsv", m.genes)
    _write_names(directory / "barcodes.tsv", m.barcodes)
    if m.coords is not None:
        write_coords(directory / "coords.tsv", m.coords)
    return directory


def write_coords(path: Path, coords: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("x\ty\n")
        for x, y in coords:
            fh.write(f"{float(x)!r}\t{float(y)!r}\n")


def read_coords(path: str | os.PathLike) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if header[:2] != ["x", "y"]:
            raise DataError(f"{path}: coordinate header must be 'x<TAB>y'")
        rows = [line.rstrip("\n").split("\t") for line in fh if line.strip()]
    try:
        return np.array([[float(r[0]), float(r[1])] for r in rows], dtype=np.float64).reshape(-1, 2)
    except (ValueError, IndexError) as exc:
        raise DataError(f"{path}: malformed coordinate row") from exc


def read_counts(directory: str | os.PathLike, coords_path: str | os.PathLike | None = None) -> CountMatrix:
    directory = Path(directory)
    for name in ("matrix.mtx", "genes.tsv", "barcodes.tsv"):
        if not (directory / name).exists():
            raise DataError(f"missing file: {directory / name}")
    mat = scipy.io.mmread(str(directory / "matrix.mtx"))
    mat = sp.csc_matrix(mat)
    coords = read_coords(coords_path) if coords_path is not None else None
    return CountMatrix(
        values=mat,
        barcodes=tuple(_read_names(directory / "barcodes.tsv")),
        genes=tuple(_read_names(directory / "genes.tsv")),
        coords=coords,
    )


def load_collection(manifest_path: str | os.PathLike) -> list[Dataset]:
    """Read a JSON manifest and every count matrix it references.

    Relative paths are resolved against the manifest's directory.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DataError(f"missing file: {manifest_path}")
    try:
        entries = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataError(f"{manifest_path}: invalid JSON ({exc})") from exc
    if not isinstance(entries, list):
        raise DataError("manifest must be a JSON array")
    base = manifest_path.parent
    out: list[Dataset] = []
    seen: set[str] = set()
    for raw in entries:
        entry = DatasetManifest(**raw)
        if entry.dataset_id in seen:
            raise DataError(f"duplicate dataset_id {entry.dataset_id!r}")
        seen.add(entry.dataset_id)
        coords = base / entry.coords_path if entry.coords_path else None
        if coords is not None and not coords.exists():
            raise DataError(f"missing file: {coords}")
        counts = read_counts(base / entry.counts_path, coords)
        out.append(Dataset(entry, counts))
    return out


def save_collection(datasets: Sequence[Dataset], directory: str | os.PathLike) -> Path:
    """Write matrices under ``directory/<dataset_id>/`` plus ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for ds in datasets:
        m = ds.manifest
        write_counts(ds.counts, directory / m.dataset_id)
        coords_path = None
        if ds.counts.coords is not None:
            coords_path = f"{m.dataset_id}/coords.tsv"
        entry = DatasetManifest(
            dataset_id=m.dataset_id,
            tissue=m.tissue,
            modality=m.modality,
            species=m.species,
            counts_path=m.dataset_id,
            coords_path=coords_path,
        )
        entries.append(asdict(entry))
    path = directory / "manifest.json"
    path.write_text(json.dumps(entries, indent=2) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------------------
# QC


def qc_filter(
    m: CountMatrix,
    min_counts: int = 200,
    min_cells: int = 3,
    mt_prefixes: Sequence[str] = ("MT-",),
) -> CountMatrix:
    """Drop low-depth barcodes, rarely detected genes and mitochondrial genes.

    Barcodes with total counts below ``min_counts`` go first, then genes
    detected in fewer than ``min_cells`` barcodes or whose name starts with one
    of ``mt_prefixes`` (case-insensitive). Removing genes lowers depths, so the
    two passes repeat until nothing changes; this makes the filter idempotent.
    """
    if m.n_cells == 0 or m.n_genes == 0:
        raise DataError("empty count matrix")
    prefixes = tuple(p.upper() for p in mt_prefixes)
    gene_ok = np.array([not g.upper().startswith(prefixes) for g in m.genes], dtype=bool)
    cur = m.subset(genes=gene_ok) if not gene_ok.all() else m
    while True:
        if cur.n_genes == 0:
            raise DataError("all cells/genes filtered")
        keep_cells = cur.depths() >= min_counts
        if not keep_cells.any():
            raise DataError("all cells/genes filtered")
        nxt = cur.subset(cells=keep_cells) if not keep_cells.all() else cur
        detected = np.diff(nxt.values.indptr)  # CSC: nonzeros per column
        keep_genes = detected >= min_cells
        if not keep_genes.any():
            raise DataError("all cells/genes filtered")
        nxt = nxt.subset(genes=keep_genes) if not keep_genes.all() else nxt
        if nxt.shape == cur.shape:
            return nxt
        cur = nxt


# ---------------------------------------------------------------------------
# Synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the Gamma-Poisson generator.

    ``base_mean`` is the average UMI count per gene per cell and ``dispersion``
    the squared coefficient of variation of the latent expression (so the
    latent Gamma shape is ``1/dispersion``).
    """

    n_datasets: int = 3
    n_cells: int = 2000
    n_genes: int = 200
    n_modules: int = 2
    module_size: int = 50
    within_corr: float = 0.8
    shared_gene_fraction: float = 0.6
    base_mean: float = 5.0
    dispersion: float = 0.5
    depth_sdlog: float = 0.3
    tissue: str = "heart"
    species: str = "human"
    modalities: tuple[str, ...] | None = None
    n_spatial_genes: int = 10
    module_mean_scale: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if min(self.n_datasets, self.n_cells, self.n_genes) < 1:
            raise DataError("infeasible spec: counts must be positive")
        if self.n_modules * self.module_size > self.n_genes:
            raise DataError("infeasible spec: n_modules * module_size > n_genes")
        if not 0.0 <= self.shared_gene_fraction <= 1.0:
            raise DataError("infeasible spec: shared_gene_fraction outside [0, 1]")
        if self.n_modules * self.module_size > round(self.shared_gene_fraction * self.n_genes):
            raise DataError("infeasible spec: modules need more shared genes than available")
        if self.module_mean_scale <= 0:
            raise DataError("infeasible spec: module_mean_scale must be positive")
        if not 0.0 <= self.within_corr < 1.0:
            raise DataError("infeasible spec: within_corr must be in [0, 1)")
        if self.base_mean <= 0 or self.dispersion <= 0:
            raise DataError("infeasible spec: base_mean and dispersion must be positive")
        if self.modalities is not None and len(self.modalities) != self.n_datasets:
            raise DataError("infeasible spec: one modality per dataset")


@dataclass
class PlantedTruth:
    """Ground truth of a synthetic collection.

    ``modules`` maps module index to gene names; ``latent_means[d]`` and
    ``size_factors[d]`` are the generator's own parameters for dataset ``d`` and
    ``latent[d]`` the drawn latent expression (cells x genes).
    """

    modules: list[list[str]]
    within_corr: float
    gene_names: list[list[str]]
    latent_means: list[np.ndarray]
    size_factors: list[np.ndarray]
    latent: list[np.ndarray] = field(repr=False, default_factory=list)
    spatial_genes: list[list[str]] = field(default_factory=list)

    def module_of(self) -> dict[str, int]:
        return {g: k for k, genes in enumerate(self.modules) for g in genes}

    def planted_adjacency(self, genes: Sequence[str]) -> np.ndarray:
        """Boolean adjacency linking genes that share a planted module."""
        lookup = self.module_of()
        labels = np.array([lookup.get(g, -1) for g in genes])
        adj = (labels[:, None] == labels[None, :]) & (labels[:, None] >= 0)
        np.fill_diagonal(adj, False)
        return adj

    def to_json(self) -> dict:
        return {
            "modules": self.modules,
            "within_corr": self.within_corr,
            "gene_names": self.gene_names,
            "latent_means": [m.tolist() for m in self.latent_means],
            "size_factors": [s.tolist() for s in self.size_factors],
            "spatial_genes": self.spatial_genes,
        }

    @classmethod
    def from_json(cls, obj: dict) -> PlantedTruth:
        return cls(
            modules=obj["modules"],
            within_corr=obj["within_corr"],
            gene_names=obj["gene_names"],
            latent_means=[np.asarray(m) for m in obj["latent_means"]],
            size_factors=[np.asarray(s) for s in obj["size_factors"]],
            spatial_genes=obj.get("spatial_genes", []),
        )


def generate_synthetic(spec: SyntheticSpec) -> tuple[list[Dataset], PlantedTruth]:
    """Sample a collection from a Gamma-Poisson hierarchy with planted modules.

    Latent expression of gene ``j`` in cell ``i`` is
    ``z_ij = mean_j * (G_i,module + G_ij) / a`` with independent
    ``G_i,module ~ Gamma(rho*a)`` shared inside a module and
    ``G_ij ~ Gamma((1-rho)*a)``, ``a = 1/dispersion``. Genes of one module then
    have latent correlation exactly ``rho`` and Gamma marginals, and
    ``x_ij | z ~ Poisson(s_i z_ij)`` is negative binomial.

    Module genes are expressed at ``module_mean_scale`` times the base level so
    that module totals barely move the depth; otherwise composition induces
    spurious negative co-expression between module and other genes.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    p, n = spec.n_genes, spec.n_cells
    n_shared = int(round(spec.shared_gene_fraction * p))
    n_module_genes = spec.n_modules * spec.module_size
    shared_pool = [f"G{k:04d}" for k in range(n_shared)]
    modules = [
        shared_pool[k * spec.module_size:(k + 1) * spec.module_size] for k in range(spec.n_modules)
    ]
    shared_log_means = rng.normal(0.0, 0.5, size=n_shared)
    shape = 1.0 / spec.dispersion
    modalities = spec.modalities or ("scRNA",) * spec.n_datasets

    datasets: list[Dataset] = []
    truth = PlantedTruth(
        modules=[list(m) for m in modules],
        within_corr=spec.within_corr,
        gene_names=[],
        latent_means=[],
        size_factors=[],
    )
    for d in range(spec.n_datasets):
        own = [f"D{d}_U{k:04d}" for k in range(p - n_shared)]
        names = shared_pool + own
        log_means = np.concatenate([
            shared_log_means + rng.normal(0.0, 0.1, size=n_shared),
            rng.normal(0.0, 0.5, size=p - n_shared),
        ])
        means = spec.base_mean * np.exp(log_means)
        size = np.exp(rng.normal(0.0, spec.depth_sdlog, size=n))

        g = np.empty((n, p))
        rho = spec.within_corr
        for k in range(spec.n_modules):
            cols = slice(k * spec.module_size, (k + 1) * spec.module_size)
            common = rng.gamma(rho * shape, size=(n, 1)) if rho > 0 else 0.0
            g[:, cols] = common + rng.gamma((1.0 - rho) * shape, size=(n, spec.module_size))
        g[:, n_module_genes:] = rng.gamma(shape, size=(n, p - n_module_genes))
        means[:n_module_genes] *= spec.module_mean_scale
        z = means[None, :] * g / shape

        coords = None
        spatial_genes: list[str] = []
        if modalities[d] == "spatial":
            coords = rng.uniform(0.0, 10.0, size=(n, 2))
            # a few independent genes get a smooth spatial gradient
            idx = np.arange(n_module_genes, min(p, n_module_genes + spec.n_spatial_genes))
            gradient = np.exp(0.15 * (coords[:, 0] - 5.0))
            z[:, idx] *= gradient[:, None] / gradient.mean()
            spatial_genes = [names[j] for j in idx]

        x = rng.poisson(size[:, None] * z)
        order = rng.permutation(p)  # genes are not stored module-first
        counts = CountMatrix(
            values=sp.csc_matrix(x[:, order]),
            barcodes=tuple(f"D{d}_C{i:05d}" for i in range(n)),
            genes=tuple(names[j] for j in order),
            coords=coords,
        )
        manifest = DatasetManifest(
            dataset_id=f"D{d}",
            tissue=spec.tissue,
            modality=modalities[d],
            species=spec.species,
            counts_path=f"D{d}",
            coords_path=f"D{d}/coords.tsv" if coords is not None else None,
        )
        datasets.append(Dataset(manifest, counts))
        truth.gene_names.append([names[j] for j in order])
        truth.latent_means.append(means[order])
        truth.size_factors.append(size)
        truth.latent.append(z[:, order])
        truth.spatial_genes.append(spatial_genes)
    return datasets, truth
