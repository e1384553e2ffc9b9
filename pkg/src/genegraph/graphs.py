"""Per-dataset gene graphs, cross-graph anchor sets and neighbourhood Jaccard weights."""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from itertools import permutations
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .formats import read_matrix, write_matrix
from .preprocess import ResidualMatrix


@dataclass(eq=False)
class GeneGraph:
    genes: tuple[str, ...]
    features: np.ndarray           # p x d_in
    adjacency: sp.csr_matrix       # symmetric, boolean, no self-loops
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.genes = tuple(self.genes)
        adj = sp.csr_matrix(self.adjacency, dtype=bool)
        adj.setdiag(False)
        adj.eliminate_zeros()
        if (adj != adj.T).nnz:
            raise ValueError("adjacency must be symmetric")
        adj.sort_indices()
        self.adjacency = adj
        if self.features.shape[0] != len(self.genes):
            raise ValueError("feature rows must align with genes")
        self._index = {g: i for i, g in enumerate(self.genes)}

    @property
    def dataset_id(self) -> str:
        return self.metadata.get("dataset_id", "")

    @property
    def modality(self) -> str:
        return self.metadata.get("modality", "scRNA")

    @property
    def n_nodes(self) -> int:
        return len(self.genes)

    def index_of(self, gene: str) -> int:
        return self._index[gene]

    def neighbors(self, i: int) -> np.ndarray:
        a = self.adjacency
        return a.indices[a.indptr[i]:a.indptr[i + 1]]

    def neighbor_names(self, i: int) -> set[str]:
        return {self.genes[k] for k in self.neighbors(i)}

    def degree(self) -> np.ndarray:
        return np.diff(self.adjacency.indptr)

    def edge_list(self) -> np.ndarray:
        """Undirected edges ``(i, j)`` with ``i < j``."""
        upper = sp.triu(self.adjacency, k=1).tocoo()
        order = np.lexsort((upper.col, upper.row))
        return np.column_stack([upper.row[order], upper.col[order]]).astype(np.int64)

    def dense_adjacency(self) -> np.ndarray:
        return self.adjacency.toarray().astype(np.float64)

    def induced(self, nodes: Sequence[int]) -> GeneGraph:
        nodes = np.asarray(nodes)
        return GeneGraph(
            genes=tuple(self.genes[i] for i in nodes),
            features=self.features[nodes],
            adjacency=self.adjacency[nodes][:, nodes],
            metadata=dict(self.metadata),
        )


def adjacency_from_edges(p: int, edges) -> sp.csr_matrix:
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    if edges.size and (edges.min() < 0 or edges.max() >= p):
        raise IndexError("edge index out of range")
    rows = np.concatenate([edges[:, 0], edges[:, 1]])
    cols = np.concatenate([edges[:, 1], edges[:, 0]])
    adj = sp.csr_matrix((np.ones(len(rows), dtype=bool), (rows, cols)), shape=(p, p))
    return adj


def assemble_graph(residuals: ResidualMatrix, hvgs: Sequence[int], edges, metadata: dict) -> GeneGraph:
    """Build a gene graph over the HVGs.

    ``edges`` index into ``hvgs`` (positions, not original gene indices). The
    feature row of a gene is its residual column, one value per cell.
    """
    hvgs = list(hvgs)
    features = np.ascontiguousarray(residuals.values[:, hvgs].T)
    adj = adjacency_from_edges(len(hvgs), edges)
    genes = tuple(residuals.genes[j] for j in hvgs)
    return GeneGraph(genes, features, adj, dict(metadata))


def save_graph(g: GeneGraph, directory: str | os.PathLike) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "metadata.json").write_text(
        json.dumps({**g.metadata, "genes": list(g.genes)}, indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    with open(directory / "edges.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("gene_a\tgene_b\n")
        for i, j in g.edge_list():
            fh.write(f"{g.genes[i]}\t{g.genes[j]}\n")
    write_matrix(directory / "features.bin", g.features, names=g.genes)
    return directory


def load_graph(directory: str | os.PathLike) -> GeneGraph:
    directory = Path(directory)
    meta = json.loads((directory / "metadata.json").read_text(encoding="utf-8"))
    genes = tuple(meta.pop("genes"))
    features, header = read_matrix(directory / "features.bin")
    if tuple(header["names"]) != genes:
        raise ValueError(f"{directory}: feature names do not match metadata genes")
    index = {gname: i for i, gname in enumerate(genes)}
    edges = []
    with open(directory / "edges.tsv", encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            a, b = line.rstrip("\n").split("\t")[:2]
            edges.append((index[a], index[b]))
    return GeneGraph(genes, features, adjacency_from_edges(len(genes), edges), meta)


# ---------------------------------------------------------------------------
# Anchors


@dataclass
class AnchorSet:
    common: np.ndarray                 # k x 2 index pairs (in i, in j), ordered by gene name
    diff_i: np.ndarray
    diff_j: np.ndarray
    diff_neighbors_i: list[np.ndarray]
    diff_neighbors_j: list[np.ndarray]
    lam: np.ndarray

    def restrict(self, keep_i: np.ndarray, keep_j: np.ndarray, g_i: GeneGraph, g_j: GeneGraph) -> AnchorSet:
        """Anchors for induced subgraphs on node subsets ``keep_i`` / ``keep_j``.

        Indices are remapped into the subgraphs; lambda values keep their
        full-graph values.
        """
        map_i = -np.ones(g_i.n_nodes, dtype=np.int64)
        map_i[keep_i] = np.arange(len(keep_i))
        map_j = -np.ones(g_j.n_nodes, dtype=np.int64)
        map_j[keep_j] = np.arange(len(keep_j))
        ok = (map_i[self.common[:, 0]] >= 0) & (map_j[self.common[:, 1]] >= 0)
        common = np.column_stack([map_i[self.common[ok, 0]], map_j[self.common[ok, 1]]])

        def remap(diff, neigh, mapping):
            keep = [k for k, d in enumerate(diff) if mapping[d] >= 0]
            new_diff = np.array([mapping[diff[k]] for k in keep], dtype=np.int64)
            new_neigh = []
            for k in keep:
                nb = mapping[neigh[k]]
                new_neigh.append(nb[nb >= 0])
            return new_diff, new_neigh

        di, ni = remap(self.diff_i, self.diff_neighbors_i, map_i)
        dj, nj = remap(self.diff_j, self.diff_neighbors_j, map_j)
        return AnchorSet(common.reshape(-1, 2), di, dj, ni, nj, self.lam[ok])


def jaccard(a: set, b: set) -> float:
    union = len(a | b)
    return len(a & b) / union if union else 0.0


def jaccard_weights(g_i: GeneGraph, g_j: GeneGraph, common: np.ndarray) -> np.ndarray:
    """Neighbourhood Jaccard overlap per common gene, neighbours matched by name."""
    return np.array(
        [jaccard(g_i.neighbor_names(a), g_j.neighbor_names(b)) for a, b in np.asarray(common).reshape(-1, 2)],
        dtype=np.float64,
    )


def anchor_sets(g_i: GeneGraph, g_j: GeneGraph) -> AnchorSet:
    shared = sorted(set(g_i.genes) & set(g_j.genes))
    common = np.array([(g_i.index_of(g), g_j.index_of(g)) for g in shared], dtype=np.int64).reshape(-1, 2)
    diff_i = np.array(sorted((g_i.index_of(g) for g in set(g_i.genes) - set(shared)), key=lambda k: g_i.genes[k]),
                      dtype=np.int64)
    diff_j = np.array(sorted((g_j.index_of(g) for g in set(g_j.genes) - set(shared)), key=lambda k: g_j.genes[k]),
                      dtype=np.int64)
    return AnchorSet(
        common=common,
        diff_i=diff_i,
        diff_j=diff_j,
        diff_neighbors_i=[g_i.neighbors(k).copy() for k in diff_i],
        diff_neighbors_j=[g_j.neighbors(k).copy() for k in diff_j],
        lam=jaccard_weights(g_i, g_j, common),
    )


def all_anchor_sets(graphs: Sequence[GeneGraph], workers: int = 1) -> dict[tuple[int, int], AnchorSet]:
    """Anchor sets for every ordered pair of graphs, keyed by position."""
    pairs = list(permutations(range(len(graphs)), 2))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(lambda ij: anchor_sets(graphs[ij[0]], graphs[ij[1]]), pairs))
    else:
        results = [anchor_sets(graphs[i], graphs[j]) for i, j in pairs]
    return dict(zip(pairs, results))


def _anchor_to_json(a: AnchorSet) -> dict:
    return {
        "common": a.common.tolist(),
        "diff_i": a.diff_i.tolist(),
        "diff_j": a.diff_j.tolist(),
        "diff_neighbors_i": [nb.tolist() for nb in a.diff_neighbors_i],
        "diff_neighbors_j": [nb.tolist() for nb in a.diff_neighbors_j],
        "lam": [float(v) for v in a.lam],
    }


def _anchor_from_json(d: dict) -> AnchorSet:
    idx = lambda v: np.asarray(v, dtype=np.int64)  # noqa: E731
    return AnchorSet(
        common=idx(d["common"]).reshape(-1, 2),
        diff_i=idx(d["diff_i"]),
        diff_j=idx(d["diff_j"]),
        diff_neighbors_i=[idx(nb) for nb in d["diff_neighbors_i"]],
        diff_neighbors_j=[idx(nb) for nb in d["diff_neighbors_j"]],
        lam=np.asarray(d["lam"], dtype=np.float64),
    )


def save_anchor_sets(path: str | os.PathLike, graphs: Sequence[GeneGraph],
                     anchors: dict[tuple[int, int], AnchorSet]) -> None:
    """Write anchors as JSON keyed by ``"<dataset_i>|<dataset_j>"``.

    Float weights survive the round trip exactly (JSON floats use repr).
    """
    body = {f"{graphs[i].dataset_id}|{graphs[j].dataset_id}": _anchor_to_json(a) for (i, j), a in anchors.items()}
    Path(path).write_text(json.dumps(body, sort_keys=True) + "\n", encoding="utf-8")


def load_anchor_sets(path: str | os.PathLike, graphs: Sequence[GeneGraph]) -> dict[tuple[int, int], AnchorSet]:
    body = json.loads(Path(path).read_text(encoding="utf-8"))
    pos = {g.dataset_id: k for k, g in enumerate(graphs)}
    out = {}
    for key, d in body.items():
        a, b = key.split("|")
        if a in pos and b in pos:
            out[(pos[a], pos[b])] = _anchor_from_json(d)
    missing = set(permutations(range(len(graphs)), 2)) - set(out)
    if missing:
        raise ValueError(f"{path}: anchor cache lacks {len(missing)} graph pairs")
    return out
