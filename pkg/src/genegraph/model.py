"""Graph-transformer encoder with dataset-specific and modality-shared layers,
plus per-dataset elementwise decoders over the embedding Gram matrix."""

from __future__ import annotations

import json
import os
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graphs import GeneGraph


@dataclass
class ModelConfig:
    hidden_dim: int = 64
    embed_dim: int = 32
    heads: int = 4
    dataset_layers: int = 1
    shared_layers: int = 1
    decoder_hidden: int = 16
    edge_dim: int = 0
    weight_sharing: bool = True
    norm_eps: float = 1e-5


def kaiming_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    """U(-b, b) with b = sqrt(6 / fan_in), so the variance is 2 / fan_in."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


@dataclass
class GraphIndex:
    """Directed message edges ``src -> dst`` including one self-loop per node."""

    src: np.ndarray
    dst: np.ndarray
    n: int
    edge_attr: np.ndarray | None = None

    @classmethod
    def from_graph(cls, g: GeneGraph, edge_attr: np.ndarray | None = None) -> GraphIndex:
        coo = g.adjacency.tocoo()
        src = np.concatenate([coo.col, np.arange(g.n_nodes)]).astype(np.int64)
        dst = np.concatenate([coo.row, np.arange(g.n_nodes)]).astype(np.int64)
        order = np.lexsort((src, dst))
        attr = None if edge_attr is None else np.asarray(edge_attr)[order]
        return cls(src[order], dst[order], g.n_nodes, attr)


def graph_norm(x: Tensor, gamma: Tensor, beta: Tensor, alpha: Tensor, eps: float) -> Tensor:
    """Normalize features over the nodes of one graph with a learnable mean scale."""
    centered = x - alpha * x.mean(axis=0, keepdims=True)
    var = (centered * centered).mean(axis=0, keepdims=True)
    return gamma * centered / ad.sqrt(var + eps) + beta


class GTLayer:
    """Multi-head graph-transformer convolution, residual link, GraphNorm, Mish."""

    def __init__(self, in_dim: int, out_dim: int, heads: int, rng: np.random.Generator,
                 edge_dim: int = 0, eps: float = 1e-5):
        if out_dim % heads:
            raise ValueError(f"out_dim {out_dim} not divisible by {heads} heads")
        self.in_dim, self.out_dim, self.heads = in_dim, out_dim, heads
        self.head_dim = out_dim // heads
        self.eps = eps
        self.params: dict[str, Tensor] = {}
        for name in ("q", "k", "v"):
            self.params[f"W_{name}"] = ad.parameter(kaiming_uniform(rng, in_dim, out_dim))
            self.params[f"b_{name}"] = ad.parameter(np.zeros(out_dim))
        if edge_dim:
            self.params["W_e"] = ad.parameter(kaiming_uniform(rng, edge_dim, out_dim))
            self.params["b_e"] = ad.parameter(np.zeros(out_dim))
        if in_dim != out_dim:
            self.params["W_skip"] = ad.parameter(kaiming_uniform(rng, in_dim, out_dim))
        self.params["gamma"] = ad.parameter(np.ones(out_dim))
        self.params["beta"] = ad.parameter(np.zeros(out_dim))
        self.params["alpha"] = ad.parameter(np.ones(out_dim))
        # column c*d + t belongs to head c
        self._head_sum = np.kron(np.eye(heads), np.ones((self.head_dim, 1)))
        self.last_attention: np.ndarray | None = None

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def attention(self, h: Tensor, index: GraphIndex) -> tuple[Tensor, Tensor]:
        P = self.params
        q = h @ P["W_q"] + P["b_q"]
        k = h @ P["W_k"] + P["b_k"]
        v = h @ P["W_v"] + P["b_v"]
        q_i = ad.gather_rows(q, index.dst)
        k_j = ad.gather_rows(k, index.src)
        v_j = ad.gather_rows(v, index.src)
        if index.edge_attr is not None and "W_e" in P:
            e = Tensor(index.edge_attr) @ P["W_e"] + P["b_e"]
            k_j = k_j + e
            v_j = v_j + e
        scores = ((q_i * k_j) @ self._head_sum) * (1.0 / np.sqrt(self.head_dim))
        alpha = ad.segment_softmax(scores, index.dst, index.n)
        messages = v_j * (alpha @ self._head_sum.T)
        return ad.segment_sum(messages, index.dst, index.n), alpha

    def __call__(self, h: Tensor, index: GraphIndex) -> Tensor:
        agg, alpha = self.attention(h, index)
        self.last_attention = alpha.value
        skip = h if self.in_dim == self.out_dim else h @ self.params["W_skip"]
        P = self.params
        return ad.mish(graph_norm(agg + skip, P["gamma"], P["beta"], P["alpha"], self.eps))


class Decoder:
    """Scalar MLP 1 -> h -> 1 applied to every entry of ``e e^T``, sigmoid output."""

    def __init__(self, hidden: int, rng: np.random.Generator):
        self.params = {
            # positive magnitudes: the initial map from inner product to edge
            # probability is increasing, as in an inner-product decoder
            "W1": ad.parameter(np.abs(kaiming_uniform(rng, 1, hidden))),
            "b1": ad.parameter(np.zeros(hidden)),
            "W2": ad.parameter(np.abs(kaiming_uniform(rng, hidden, 1))),
            "b2": ad.parameter(np.zeros(1)),
        }

    def parameters(self) -> dict[str, Tensor]:
        return self.params

    def logits(self, e: Tensor) -> Tensor:
        p = e.shape[0]
        gram = e @ e.T
        gram = (gram + gram.T) * 0.5
        flat = ad.reshape(gram, (p * p, 1))
        hidden = ad.mish(flat @ self.params["W1"] + self.params["b1"])
        out = ad.reshape(hidden @ self.params["W2"] + self.params["b2"], (p, p))
        # identical inputs can round differently inside BLAS; force exact symmetry
        return (out + out.T) * 0.5

    def __call__(self, e: Tensor) -> Tensor:
        return ad.sigmoid(self.logits(e))


@dataclass
class DatasetSpec:
    dataset_id: str
    modality: str
    input_dim: int


class GeneEncoder:
    """Input projection and dataset layers per dataset, shared stack per modality.

    With ``weight_sharing`` off every dataset gets a private copy of the
    shared stack (keyed by dataset id instead of modality).
    """

    def __init__(self, datasets: Sequence[DatasetSpec], config: ModelConfig | None = None, seed: int = 0):
        self.config = config or ModelConfig()
        cfg = self.config
        rng = np.random.default_rng(seed)
        self.datasets = {d.dataset_id: d for d in datasets}
        if len(self.datasets) != len(datasets):
            raise ValueError("duplicate dataset ids")
        self.input_proj: dict[str, dict[str, Tensor]] = {}
        self.dataset_layers: dict[str, list[GTLayer]] = {}
        self.shared_layers: dict[str, list[GTLayer]] = {}
        self.decoders: dict[str, Decoder] = {}
        for d in datasets:
            self.input_proj[d.dataset_id] = {
                "W": ad.parameter(kaiming_uniform(rng, d.input_dim, cfg.hidden_dim)),
                "b": ad.parameter(np.zeros(cfg.hidden_dim)),
            }
            self.dataset_layers[d.dataset_id] = [
                GTLayer(cfg.hidden_dim, cfg.hidden_dim, cfg.heads, rng, cfg.edge_dim, cfg.norm_eps)
                for _ in range(cfg.dataset_layers)
            ]
        for d in datasets:
            key = self.shared_key(d.dataset_id)
            if key not in self.shared_layers:
                self.shared_layers[key] = self._shared_stack(rng)
        for d in datasets:
            self.decoders[d.dataset_id] = Decoder(cfg.decoder_hidden, rng)

    def _shared_stack(self, rng) -> list[GTLayer]:
        cfg = self.config
        dims = [cfg.hidden_dim] + [cfg.embed_dim] * cfg.shared_layers
        return [
            GTLayer(dims[k], dims[k + 1], cfg.heads, rng, cfg.edge_dim, cfg.norm_eps)
            for k in range(cfg.shared_layers)
        ]

    def shared_key(self, dataset_id: str) -> str:
        if dataset_id not in self.datasets:
            raise KeyError(f"unregistered dataset {dataset_id!r}")
        return self.datasets[dataset_id].modality if self.config.weight_sharing else dataset_id

    def shared_for(self, dataset_id: str) -> list[GTLayer]:
        return self.shared_layers[self.shared_key(dataset_id)]

    def encode(self, graph: GeneGraph, index: GraphIndex | None = None, features=None) -> Tensor:
        ds = graph.dataset_id
        if ds not in self.datasets:
            raise KeyError(f"unregistered dataset {ds!r}")
        if self.datasets[ds].modality != graph.modality:
            raise KeyError(f"dataset {ds!r} registered with modality {self.datasets[ds].modality!r}")
        index = index or GraphIndex.from_graph(graph)
        x = Tensor(graph.features if features is None else features)
        proj = self.input_proj[ds]
        h = x @ proj["W"] + proj["b"]
        for layer in self.dataset_layers[ds]:
            h = layer(h, index)
        for layer in self.shared_for(ds):
            h = layer(h, index)
        return h

    def decode(self, e: Tensor, dataset_id: str) -> Tensor:
        return self.decoders[dataset_id](e)

    # -- parameter registry ------------------------------------------------
    def encoder_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for ds, proj in self.input_proj.items():
            for name, t in proj.items():
                out[f"input.{ds}.{name}"] = t
        for ds, layers in self.dataset_layers.items():
            for k, layer in enumerate(layers):
                for name, t in layer.params.items():
                    out[f"dataset.{ds}.{k}.{name}"] = t
        for key, layers in self.shared_layers.items():
            for k, layer in enumerate(layers):
                for name, t in layer.params.items():
                    out[f"shared.{key}.{k}.{name}"] = t
        return out

    def decoder_parameters(self) -> dict[str, Tensor]:
        return {f"decoder.{ds}.{name}": t for ds, dec in self.decoders.items() for name, t in dec.params.items()}

    def named_parameters(self) -> dict[str, Tensor]:
        return {**self.encoder_parameters(), **self.decoder_parameters()}

    def n_parameters(self) -> int:
        return sum(t.value.size for t in self.named_parameters().values())

    def zero_grad(self) -> None:
        for t in self.named_parameters().values():
            t.grad = None

    # -- checkpoints -------------------------------------------------------
    def save(self, path: str | os.PathLike, **meta) -> None:
        """Single file: uint64 header length, JSON manifest, concatenated float64 LE."""
        params = self.named_parameters()
        entries, offset = [], 0
        for name, t in params.items():
            entries.append({"name": name, "shape": list(t.shape), "offset": offset})
            offset += t.value.size
        header = {
            "tensors": entries,
            "config": asdict(self.config),
            "datasets": [asdict(d) for d in self.datasets.values()],
            **meta,
        }
        blob = json.dumps(header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(struct.pack("<Q", len(blob)))
            fh.write(blob)
            for t in params.values():
                fh.write(np.ascontiguousarray(t.value, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: str | os.PathLike) -> tuple[GeneEncoder, dict]:
        data = Path(path).read_bytes()
        (length,) = struct.unpack("<Q", data[:8])
        header = json.loads(data[8:8 + length])
        body = np.frombuffer(data[8 + length:], dtype="<f8")
        model = cls([DatasetSpec(**d) for d in header["datasets"]], ModelConfig(**header["config"]))
        params = model.named_parameters()
        for entry in header["tensors"]:
            t = params[entry["name"]]
            size = int(np.prod(entry["shape"])) if entry["shape"] else 1
            t.value = body[entry["offset"]:entry["offset"] + size].reshape(entry["shape"]).astype(np.float64)
            t.grad = np.zeros_like(t.value)
        return model, header
