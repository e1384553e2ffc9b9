"""Losses, the Adam optimizer and the multi-graph training loop.

Per step on dataset ``i`` with a sampled partner ``j``:

    loss = BCE(rec_i, A_i) - weighted_cos(e_i, e_j) + lambda_c * InfoNCE

where the cosine term is averaged over the genes the two graphs share and
InfoNCE contrasts genes unique to each graph against the other graph.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graphs import AnchorSet, GeneGraph, all_anchor_sets
from .model import DatasetSpec, GeneEncoder, GraphIndex, ModelConfig

log = logging.getLogger(__name__)

PROB_CLIP = 1e-7


class NumericalError(RuntimeError):
    """Raised when a loss or gradient stops being finite."""


@dataclass
class Hyperparams:
    epochs: int = 2000
    lr_encoder: float = 1e-4
    lr_decoder: float = 1e-3
    lambda_c: float = 1e-2
    embed_dim: int = 32
    hidden_dim: int = 64
    heads: int = 4
    sample_size: int = 100
    tau: float = 0.07
    node_batch: int = 2000
    seed: int = 0
    sim_loss: bool = True
    infonce_loss: bool = True
    weight_sharing: bool = True
    shuffle_features: bool = False

    def validate(self) -> None:
        if self.lr_encoder <= 0 or self.lr_decoder <= 0:
            raise ValueError("learning rates must be positive")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.sample_size < 1:
            raise ValueError("sample_size must be at least 1")
        if self.epochs < 0 or self.node_batch < 2:
            raise ValueError("epochs must be >= 0 and node_batch >= 2")

    def model_config(self) -> ModelConfig:
        return ModelConfig(hidden_dim=self.hidden_dim, embed_dim=self.embed_dim, heads=self.heads,
                           weight_sharing=self.weight_sharing)

    @classmethod
    def desk(cls, **overrides) -> Hyperparams:
        """Short schedule for collections of a few hundred genes.

        Fifty epochs at three times the default learning rates reach the same
        reconstruction quality as the long default run on small graphs.
        """
        base = {"epochs": 50, "lr_encoder": 3e-4, "lr_decoder": 3e-3}
        base.update(overrides)
        return cls.from_dict(base)

    @classmethod
    def from_dict(cls, d: dict) -> Hyperparams:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown hyperparameters: {sorted(unknown)}")
        hp = cls(**d)
        hp.validate()
        return hp

    @classmethod
    def from_json(cls, path) -> Hyperparams:
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# losses


def bce_loss(rec: Tensor, target) -> Tensor:
    """Mean binary cross-entropy over the flattened matrices."""
    target = np.asarray(target, dtype=np.float64)
    if rec.shape != target.shape:
        raise ValueError(f"shape mismatch: {rec.shape} vs {target.shape}")
    r = ad.clip(rec, PROB_CLIP, 1.0 - PROB_CLIP)
    ll = Tensor(target) * ad.log(r) + Tensor(1.0 - target) * ad.log(1.0 - r)
    return -ll.mean()


def weighted_cosine_similarity(e_i: Tensor, e_j: Tensor, common, lam) -> Tensor:
    """Mean over shared genes of ``lam_g * cos(e_i[g], e_j[g])``.

    The trainer subtracts this value. Rows with zero norm on either side
    contribute zero.
    """
    common = np.asarray(common, dtype=np.int64).reshape(-1, 2)
    lam = np.asarray(lam, dtype=np.float64)
    k = len(common)
    if k == 0:
        return Tensor(0.0)
    ni = np.linalg.norm(e_i.value[common[:, 0]], axis=1)
    nj = np.linalg.norm(e_j.value[common[:, 1]], axis=1)
    ok = (ni > 0) & (nj > 0) & (lam != 0)
    if not ok.any():
        return Tensor(0.0)
    a = ad.l2_normalize_rows(ad.gather_rows(e_i, common[ok, 0]))
    b = ad.l2_normalize_rows(ad.gather_rows(e_j, common[ok, 1]))
    cos = (a * b).sum(axis=1)
    return (cos * lam[ok]).sum() * (1.0 / k)


def infonce_loss(queries: Tensor, positives: Tensor, negatives: Tensor, tau: float = 0.07) -> Tensor:
    """(K+1)-way softmax loss of the positive key, cosine similarities over ``tau``.

    ``positives`` pairs row-wise with ``queries``; every query is scored
    against all rows of ``negatives``.
    """
    if negatives.shape[0] < 1:
        raise ValueError("need at least one negative key")
    if queries.shape != positives.shape:
        raise ValueError("one positive per query")
    q = ad.l2_normalize_rows(queries)
    pos = ad.l2_normalize_rows(positives)
    neg = ad.l2_normalize_rows(negatives)
    s_pos = (q * pos).sum(axis=1, keepdims=True) * (1.0 / tau)
    s_neg = (q @ neg.T) * (1.0 / tau)
    logits = ad.concat([s_pos, s_neg], axis=1)
    return (ad.logsumexp_rows(logits) - s_pos).mean()


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    steps: dict[str, int] = field(default_factory=dict)


class Adam:
    """Adam with bias correction.

    Step counts are tracked per parameter, so tensors that sit out a step
    (no gradient on the tape) are not decayed and keep their own correction.
    """

    def __init__(self, params: dict[str, Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.state = OptimizerState()

    def step(self) -> None:
        st = self.state
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if name not in st.m:
                st.m[name] = np.zeros_like(p.value)
                st.v[name] = np.zeros_like(p.value)
                st.steps[name] = 0
            st.steps[name] += 1
            t = st.steps[name]
            st.m[name] = self.b1 * st.m[name] + (1 - self.b1) * g
            st.v[name] = self.b2 * st.v[name] + (1 - self.b2) * g * g
            m_hat = st.m[name] / (1 - self.b1 ** t)
            v_hat = st.v[name] / (1 - self.b2 ** t)
            p.value = p.value - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# sampling


def sample_pair(i: int, n_graphs: int, rng: np.random.Generator) -> int:
    """Uniform draw of a partner graph ``j != i``."""
    if n_graphs < 2:
        raise ValueError("need at least two graphs to sample a pair")
    j = int(rng.integers(n_graphs - 1))
    return j + (j >= i)


def sample_contrastive(diff: np.ndarray, neighbors: Sequence[np.ndarray], size: int,
                       rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Up to ``size`` query genes from ``diff`` with one random neighbour each.

    Genes without neighbours never become queries.
    """
    eligible = np.array([k for k in range(len(diff)) if len(neighbors[k])], dtype=np.int64)
    if eligible.size == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64)
    pick = np.sort(rng.choice(eligible, size=min(size, eligible.size), replace=False))
    queries = diff[pick]
    positives = np.array([neighbors[k][rng.integers(len(neighbors[k]))] for k in pick], dtype=np.int64)
    return queries, positives


# ---------------------------------------------------------------------------
# training


LOG_FIELDS = ("epoch", "dataset", "partner", "bce", "sim", "infonce", "total", "seconds")


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)

    def append(self, **row) -> None:
        self.rows.append(row)

    def epoch_totals(self) -> np.ndarray:
        if not self.rows:
            return np.empty(0)
        n = max(r["epoch"] for r in self.rows) + 1
        out = np.zeros(n)
        for r in self.rows:
            out[r["epoch"]] += r["total"]
        return out

    def to_csv(self, include_time: bool = False) -> str:
        buf = io.StringIO()
        cols = LOG_FIELDS if include_time else LOG_FIELDS[:-1]
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in self.rows:
            w.writerow([r[c] if isinstance(r[c], (int, str)) else repr(float(r[c])) for c in cols])
        return buf.getvalue()

    def write(self, path, include_time: bool = False) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv(include_time))


@dataclass
class TrainResult:
    model: GeneEncoder
    embeddings: dict[str, np.ndarray]
    log: TrainLog


def node_features(g: GeneGraph, hp: Hyperparams) -> np.ndarray:
    """Graph features, or the same constant vector on every node as a control."""
    if hp.shuffle_features:
        return np.ones_like(g.features)
    return g.features


def _batch(g: GeneGraph, size: int, rng) -> tuple[GeneGraph, np.ndarray]:
    if g.n_nodes <= size:
        return g, np.arange(g.n_nodes)
    keep = np.sort(rng.choice(g.n_nodes, size=size, replace=False))
    return g.induced(keep), keep


def reconstruction_target(g: GeneGraph) -> np.ndarray:
    """Adjacency with the self-loops the encoder attends over."""
    target = g.dense_adjacency()
    np.fill_diagonal(target, 1.0)
    return target


def loss_terms(model: GeneEncoder, g_i: GeneGraph, g_j: GeneGraph | None, anchors: AnchorSet | None,
               hp: Hyperparams, rng: np.random.Generator):
    """Encode, decode and return ``(total, bce, sim, infonce)`` tensors."""
    e_i = model.encode(g_i, features=node_features(g_i, hp))
    bce = bce_loss(model.decode(e_i, g_i.dataset_id), reconstruction_target(g_i))
    zero = Tensor(0.0)
    sim, nce = zero, zero
    if g_j is not None and (hp.sim_loss or hp.infonce_loss):
        e_j = model.encode(g_j, features=node_features(g_j, hp))
        if hp.sim_loss:
            sim = weighted_cosine_similarity(e_i, e_j, anchors.common, anchors.lam)
        if hp.infonce_loss:
            nce = _pair_infonce(e_i, e_j, anchors, hp, rng)
    total = bce - sim + nce * hp.lambda_c
    return total, bce, sim, nce


def _pair_infonce(e_i, e_j, anchors: AnchorSet, hp: Hyperparams, rng) -> Tensor:
    qi, pi = sample_contrastive(anchors.diff_i, anchors.diff_neighbors_i, hp.sample_size, rng)
    qj, pj = sample_contrastive(anchors.diff_j, anchors.diff_neighbors_j, hp.sample_size, rng)
    parts, counts = [], []
    # each side's queries are contrasted with the other side's sampled genes
    for q, p, e_own, qo, po, e_other in ((qi, pi, e_i, qj, pj, e_j), (qj, pj, e_j, qi, pi, e_i)):
        if q.size == 0 or qo.size == 0:
            continue
        neg = ad.gather_rows(e_other, np.concatenate([qo, po]))
        parts.append(infonce_loss(ad.gather_rows(e_own, q), ad.gather_rows(e_own, p), neg, hp.tau))
        counts.append(q.size)
    if not parts:
        return Tensor(0.0)
    total = parts[0] * float(counts[0])
    for part, c in zip(parts[1:], counts[1:]):
        total = total + part * float(c)
    return total * (1.0 / sum(counts))


def build_model(graphs: Sequence[GeneGraph], hp: Hyperparams) -> GeneEncoder:
    specs = [DatasetSpec(g.dataset_id, g.modality, g.features.shape[1]) for g in graphs]
    return GeneEncoder(specs, hp.model_config(), seed=hp.seed)


def train(graphs: Sequence[GeneGraph], hp: Hyperparams,
          anchors: dict[tuple[int, int], AnchorSet] | None = None,
          model: GeneEncoder | None = None, checkpoint_every: int = 0, checkpoint_path=None) -> TrainResult:
    """Run the epoch loop over datasets in order and return final embeddings."""
    hp.validate()
    graphs = list(graphs)
    if not graphs:
        raise ValueError("no graphs to train on")
    rng = np.random.default_rng(hp.seed + 1)
    model = model or build_model(graphs, hp)
    if anchors is None:
        anchors = all_anchor_sets(graphs)
    if len(graphs) < 2:
        log.warning("single graph: similarity and contrastive terms are skipped")
    enc_opt = Adam(model.encoder_parameters(), hp.lr_encoder)
    dec_opt = Adam(model.decoder_parameters(), hp.lr_decoder)
    train_log = TrainLog()
    for epoch in range(hp.epochs):
        for i, g in enumerate(graphs):
            t0 = time.perf_counter()
            j = sample_pair(i, len(graphs), rng) if len(graphs) > 1 else None
            g_i, keep_i = _batch(g, hp.node_batch, rng)
            g_j, pair = None, None
            if j is not None:
                g_j, keep_j = _batch(graphs[j], hp.node_batch, rng)
                pair = anchors[(i, j)]
                if len(keep_i) < g.n_nodes or len(keep_j) < graphs[j].n_nodes:
                    pair = pair.restrict(keep_i, keep_j, g, graphs[j])
            model.zero_grad()
            try:
                total, bce, sim, nce = loss_terms(model, g_i, g_j, pair, hp, rng)
                total.backward()
            except FloatingPointError as exc:
                raise NumericalError(f"non-finite value at epoch {epoch}, dataset {g.dataset_id}: {exc}") from exc
            for name, p in model.named_parameters().items():
                if p.grad is not None and not np.all(np.isfinite(p.grad)):
                    raise NumericalError(f"non-finite gradient for {name} at epoch {epoch}, dataset {g.dataset_id}")
            enc_opt.step()
            dec_opt.step()
            train_log.append(epoch=epoch, dataset=g.dataset_id, partner=graphs[j].dataset_id if j is not None else "",
                             bce=bce.item(), sim=sim.item(), infonce=nce.item(), total=total.item(),
                             seconds=time.perf_counter() - t0)
        if checkpoint_every and checkpoint_path and (epoch + 1) % checkpoint_every == 0:
            model.save(checkpoint_path, epoch=epoch + 1, hyperparams=asdict(hp))
    return TrainResult(model, embed_all(model, graphs, hp), train_log)


def embed_all(model: GeneEncoder, graphs: Sequence[GeneGraph], hp: Hyperparams | None = None) -> dict[str, np.ndarray]:
    hp = hp or Hyperparams()
    out = {}
    with ad.no_grad():
        for g in graphs:
            out[g.dataset_id] = model.encode(g, GraphIndex.from_graph(g), features=node_features(g, hp)).value.copy()
    return out
