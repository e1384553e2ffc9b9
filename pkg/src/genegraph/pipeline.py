"""Count matrix to gene graph: QC, normalization, gene selection and co-expression edges."""

from __future__ import annotations

import logging
from dataclasses import dataclass

from .coexpression import build_edges, cscore_test, estimate_moments_irls
from .data import Dataset, DataError, qc_filter
from .graphs import GeneGraph, assemble_graph
from .preprocess import KERNELS, fit_nb_glm, pearson_residuals, select_hvgs, select_se_genes, sparkx_test

log = logging.getLogger(__name__)


@dataclass
class GraphSettings:
    n_genes: int = 1000
    alpha: float = 0.005
    min_counts: int = 200
    min_cells: int = 3
    kernels: tuple[str, ...] = KERNELS


def build_graph(ds: Dataset, settings: GraphSettings | None = None) -> GeneGraph:
    """Gene graph of one dataset.

    Spatial data picks its node set by the spatial dependence test before
    normalization; other modalities pick the most variable genes after it.
    The selection size is capped at the number of genes that survive QC.
    """
    st = settings or GraphSettings()
    man = ds.manifest
    try:
        m = qc_filter(ds.counts, min_counts=st.min_counts, min_cells=st.min_cells)
        k = min(st.n_genes, m.n_genes)
        meta = {"dataset_id": man.dataset_id, "tissue": man.tissue, "modality": man.modality,
                "species": man.species}
        if man.modality == "spatial":
            spatial = sparkx_test(m, st.kernels)
            keep = sorted(select_se_genes(spatial, k))
            m = m.subset(genes=keep)
            residuals = pearson_residuals(m, fit_nb_glm(m))
            nodes = list(range(m.n_genes))
        else:
            residuals = pearson_residuals(m, fit_nb_glm(m))
            nodes = select_hvgs(residuals, k)
        est = estimate_moments_irls(m, nodes)
        _, pvals = cscore_test(est, m)
        edges = build_edges(pvals, st.alpha)
    except DataError as exc:
        raise DataError(f"{man.dataset_id}: {exc}") from exc
    log.info("%s: %d genes, %d edges", man.dataset_id, len(nodes), len(edges))
    return assemble_graph(residuals, nodes, edges.as_array(), meta)
