"""Gene co-expression graphs, weight-sharing graph-transformer gene embeddings and
embedding benchmarks."""

__version__ = "0.1.0"
