"""Command-line entry points: simulate, build-graphs, train, embed, evaluate.

Every stage reads only the on-disk output of the previous one, so a run can
be resumed from any stage. A run directory looks like::

    <output>/graphs/<dataset_id>/      graph bundles
    <output>/graphs/anchors.json       cross-graph anchors
    <output>/graphs/build.json         input hash used to skip rebuilds
    <output>/<name>/model.ckpt         trained weights
    <output>/<name>/train_log.csv
    <output>/<name>/embeddings.csv
    <output>/<name>/report.{json,txt}, plot.csv

Each file gets a ``<file>.meta.json`` sidecar with the build id, seed and
config hash. Exit codes: 0 success, 1 configuration error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .data import DataError, PlantedTruth, SyntheticSpec, generate_synthetic, load_collection, save_collection
from .graphs import GeneGraph, all_anchor_sets, load_anchor_sets, load_graph, save_anchor_sets, save_graph
from .metrics import METRICS, EmbeddingTable, MetricsReport, aggregate, edge_auc, evaluate
from .model import GeneEncoder
from .pipeline import GraphSettings, build_graph
from .preprocess import KERNELS
from .training import Hyperparams, NumericalError, TrainResult, embed_all, train

log = logging.getLogger("genegraph")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
THREADS_ENV = "GENEGRAPH_THREADS"
PRESETS = ("default", "desk")


class ConfigError(Exception):
    """Invalid or inconsistent configuration."""


# ---------------------------------------------------------------------------
# configuration


@dataclass
class MetricSettings:
    k: int = 15
    resolution: float = 1.0
    perplexity: float = 30.0


@dataclass
class PipelineConfig:
    manifest: str = "manifest.json"
    output: str = "run"
    seed: int = 0
    preset: str = "default"
    hyperparams: dict = field(default_factory=dict)
    preprocess: GraphSettings = field(default_factory=GraphSettings)
    metrics: MetricSettings = field(default_factory=MetricSettings)

    def hp(self) -> Hyperparams:
        """Hyperparameters: preset, then explicit values, then the run seed."""
        try:
            overrides = {**self.hyperparams, "seed": self.seed}
            if self.preset == "desk":
                return Hyperparams.desk(**overrides)
            return Hyperparams.from_dict(overrides)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"hyperparams: {exc}") from exc

    def to_dict(self) -> dict:
        d = asdict(self)
        d["preprocess"]["kernels"] = list(self.preprocess.kernels)
        return d

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]

    @property
    def out(self) -> Path:
        return Path(self.output)


def _section(cls, raw, name):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{name} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown {name} keys: {sorted(unknown)}")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def config_from_dict(raw: dict, base: Path | None = None) -> PipelineConfig:
    """Parse a config object; relative paths resolve against ``base``."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    known = {f.name for f in fields(PipelineConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    pre = dict(raw.get("preprocess") or {})
    if "kernels" in pre:
        pre["kernels"] = tuple(pre["kernels"])
        bad = set(pre["kernels"]) - set(KERNELS)
        if bad:
            raise ConfigError(f"unknown kernels {sorted(bad)}; choose from {KERNELS}")
    cfg = PipelineConfig(
        manifest=str(raw.get("manifest", "manifest.json")),
        output=str(raw.get("output", "run")),
        seed=raw.get("seed", 0),
        preset=raw.get("preset", "default"),
        hyperparams=dict(raw.get("hyperparams") or {}),
        preprocess=_section(GraphSettings, pre, "preprocess"),
        metrics=_section(MetricSettings, raw.get("metrics"), "metrics"),
    )
    if not isinstance(cfg.seed, int) or cfg.seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    if cfg.preset not in PRESETS:
        raise ConfigError(f"preset must be one of {PRESETS}")
    if "seed" in cfg.hyperparams:
        raise ConfigError("set the seed at top level, not inside hyperparams")
    if base is not None:
        cfg.manifest = str(base / cfg.manifest) if not os.path.isabs(cfg.manifest) else cfg.manifest
        cfg.output = str(base / cfg.output) if not os.path.isabs(cfg.output) else cfg.output
    cfg.hp()
    return cfg


def load_config(args) -> PipelineConfig:
    raw: dict = {}
    base = None
    if args.config:
        path = Path(args.config)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        base = path.parent
    cfg = config_from_dict(raw, base)
    if getattr(args, "manifest", None):
        cfg.manifest = args.manifest
    if getattr(args, "output", None):
        cfg.output = args.output
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "preset", None):
        cfg.preset = args.preset
    hp = cfg.hyperparams
    if getattr(args, "epochs", None) is not None:
        hp["epochs"] = args.epochs
    for flag, key in (("no_sim", "sim_loss"), ("no_infonce", "infonce_loss"),
                      ("no_weight_sharing", "weight_sharing")):
        if getattr(args, flag, False):
            hp[key] = False
    if getattr(args, "shuffle_features", False):
        hp["shuffle_features"] = True
    cfg.hp()
    return cfg


def thread_count(args) -> int:
    value = getattr(args, "threads", None)
    if value is None:
        env = os.environ.get(THREADS_ENV)
        if env is None:
            return 1
        try:
            value = int(env)
        except ValueError as exc:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {env!r}") from exc
    if value < 1:
        raise ConfigError("thread count must be at least 1")
    return value


# ---------------------------------------------------------------------------
# provenance


def build_id() -> str:
    """Package version plus a digest of the package sources."""
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode("utf-8"))
        h.update(path.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def write_sidecar(path: Path, seed: int, config_hash: str, **extra) -> None:
    meta = {"build_id": build_id(), "seed": seed, "config_hash": config_hash, **extra}
    Path(f"{path}.meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def file_digest(paths: Sequence[Path]) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(str(p.name).encode("utf-8"))
        h.update(p.read_bytes())
    return h.hexdigest()


def run_name(hp: Hyperparams) -> str:
    parts = [name for flag, name in ((hp.sim_loss, "no-sim"), (hp.infonce_loss, "no-infonce"),
                                     (hp.weight_sharing, "no-weight-sharing")) if not flag]
    if hp.shuffle_features:
        parts.append("shuffle-features")
    return "+".join(parts) or "full"


# ---------------------------------------------------------------------------
# stages


def cmd_simulate(args) -> int:
    raw = {}
    if args.spec:
        try:
            raw = json.loads(Path(args.spec).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read spec {args.spec}: {exc}") from exc
    if args.seed is not None:
        raw["seed"] = args.seed
    if raw.get("modalities") is not None:
        raw["modalities"] = tuple(raw["modalities"])
    try:
        spec = SyntheticSpec(**raw)
    except TypeError as exc:
        raise ConfigError(f"synthetic spec: {exc}") from exc
    datasets, truth = generate_synthetic(spec)
    out = Path(args.out)
    try:
        manifest = save_collection(datasets, out)
    except OSError as exc:
        raise DataError(f"cannot write to {out}: {exc}") from exc
    truth_path = out / "truth.json"
    truth_path.write_text(json.dumps(truth.to_json(), sort_keys=True) + "\n", encoding="utf-8")
    spec_hash = hashlib.sha256(json.dumps(asdict(spec), sort_keys=True).encode("utf-8")).hexdigest()[:16]
    for p in (manifest, truth_path):
        write_sidecar(p, spec.seed, spec_hash, spec=asdict(spec))
    log.info("wrote %d datasets to %s", len(datasets), out)
    return EXIT_OK


def _input_files(cfg: PipelineConfig) -> list[Path]:
    manifest = Path(cfg.manifest)
    files = [manifest]
    for entry in json.loads(manifest.read_text(encoding="utf-8")):
        d = manifest.parent / entry["counts_path"]
        files += sorted(p for p in d.iterdir() if p.is_file())
        if entry.get("coords_path"):
            files.append(manifest.parent / entry["coords_path"])
    return sorted(set(files))


def cmd_build_graphs(args) -> int:
    cfg = load_config(args)
    workers = thread_count(args)
    gdir = cfg.out / "graphs"
    if not Path(cfg.manifest).exists():
        raise DataError(f"missing manifest: {cfg.manifest}")
    settings = asdict(cfg.preprocess)
    settings["kernels"] = list(cfg.preprocess.kernels)
    input_hash = hashlib.sha256(
        (file_digest(_input_files(cfg)) + json.dumps(settings, sort_keys=True)).encode("utf-8")
    ).hexdigest()
    stamp = gdir / "build.json"
    if stamp.exists():
        prior = json.loads(stamp.read_text(encoding="utf-8"))
        bundles = [gdir / d for d in prior.get("datasets", [])]
        if prior.get("input_hash") == input_hash and all((b / "metadata.json").exists() for b in bundles) \
                and (gdir / "anchors.json").exists():
            log.info("graphs up to date (%s)", input_hash[:12])
            return EXIT_OK
    datasets = load_collection(cfg.manifest)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            graphs = list(pool.map(lambda ds: build_graph(ds, cfg.preprocess), datasets))
    else:
        graphs = [build_graph(ds, cfg.preprocess) for ds in datasets]
    gdir.mkdir(parents=True, exist_ok=True)
    for g in graphs:
        bundle = save_graph(g, gdir / g.dataset_id)
        write_sidecar(bundle / "metadata.json", cfg.seed, cfg.digest())
    anchors = all_anchor_sets(graphs, workers)
    save_anchor_sets(gdir / "anchors.json", graphs, anchors)
    write_sidecar(gdir / "anchors.json", cfg.seed, cfg.digest())
    stamp.write_text(json.dumps({"input_hash": input_hash, "datasets": [g.dataset_id for g in graphs]},
                                indent=2) + "\n", encoding="utf-8")
    log.info("built %d graphs in %s", len(graphs), gdir)
    return EXIT_OK


def load_graphs(cfg: PipelineConfig) -> list[GeneGraph]:
    stamp = cfg.out / "graphs" / "build.json"
    if not stamp.exists():
        raise DataError(f"no graphs under {cfg.out / 'graphs'}; run build-graphs first")
    ids = json.loads(stamp.read_text(encoding="utf-8"))["datasets"]
    return [load_graph(cfg.out / "graphs" / d) for d in ids]


def _run_dir(cfg: PipelineConfig, args) -> Path:
    d = cfg.out / (args.name or run_name(cfg.hp()))
    d.mkdir(parents=True, exist_ok=True)
    return d


def write_embeddings(path: Path, graphs: Sequence[GeneGraph], embeddings: dict) -> EmbeddingTable:
    table = EmbeddingTable.from_graphs(graphs, embeddings)
    table.write(path)
    return table


def cmd_train(args) -> int:
    cfg = load_config(args)
    hp = cfg.hp()
    graphs = load_graphs(cfg)
    anchors = load_anchor_sets(cfg.out / "graphs" / "anchors.json", graphs)
    run = _run_dir(cfg, args)
    ckpt = run / "model.ckpt"
    result: TrainResult = train(graphs, hp, anchors=anchors,
                                checkpoint_every=args.checkpoint_every, checkpoint_path=ckpt)
    result.model.save(ckpt, epoch=hp.epochs, hyperparams=asdict(hp))
    result.log.write(run / "train_log.csv")
    write_embeddings(run / "embeddings.csv", graphs, result.embeddings)
    for p in (ckpt, run / "train_log.csv", run / "embeddings.csv"):
        write_sidecar(p, hp.seed, cfg.digest(), hyperparams=asdict(hp))
    last = result.log.epoch_totals()
    log.info("trained %s: %d epochs, final loss %.6g", run.name, hp.epochs, last[-1] if len(last) else float("nan"))
    return EXIT_OK


def cmd_embed(args) -> int:
    cfg = load_config(args)
    graphs = load_graphs(cfg)
    run = _run_dir(cfg, args)
    ckpt = Path(args.checkpoint) if args.checkpoint else run / "model.ckpt"
    if not ckpt.exists():
        raise DataError(f"missing checkpoint {ckpt}; run train first")
    model, meta = GeneEncoder.load(ckpt)
    hp = Hyperparams.from_dict(meta["hyperparams"]) if "hyperparams" in meta else cfg.hp()
    path = Path(args.out) if args.out else run / "embeddings.csv"
    write_embeddings(path, graphs, embed_all(model, graphs, hp))
    write_sidecar(path, hp.seed, cfg.digest(), checkpoint=str(ckpt))
    log.info("wrote %s", path)
    return EXIT_OK


def planted_auc(table: EmbeddingTable, graphs: Sequence[GeneGraph], truth: PlantedTruth) -> float:
    """Edge AUC against planted module membership of each graph's genes."""
    planted = [(g.dataset_id, g.genes, truth.planted_adjacency(g.genes)) for g in graphs]
    return edge_auc(table, planted)


def cmd_evaluate(args) -> int:
    cfg = load_config(args)
    graphs = load_graphs(cfg)
    paths = [Path(p) for p in args.embeddings] or [_run_dir(cfg, args) / "embeddings.csv"]
    names = args.names or [p.parent.name if p.name == "embeddings.csv" else p.stem for p in paths]
    if len(names) != len(paths):
        raise ConfigError("--names must match the number of embedding files")
    if len(set(names)) != len(names):
        raise ConfigError(f"method names must be unique: {names}")
    truth = None
    if args.truth:
        truth = PlantedTruth.from_json(json.loads(Path(args.truth).read_text(encoding="utf-8")))
    ms = cfg.metrics
    rows, extra = [], {}
    for name, path in zip(names, paths):
        if not path.exists():
            raise DataError(f"missing embeddings {path}")
        table = EmbeddingTable.read(path)
        m = evaluate(table, graphs, resolution=ms.resolution, seed=cfg.seed, k=ms.k, perplexity=ms.perplexity)
        rows.append([m[k] for k in METRICS])
        if truth is not None:
            extra[name] = planted_auc(table, graphs, truth)
    if len(rows) > 1:
        report = aggregate(np.array(rows), names)
    else:
        # a lone method has nothing to rank against: rank 1, every scaled metric 0.5
        x = np.array(rows)
        report = MetricsReport(names, METRICS, x, np.ones_like(x), np.full_like(x, 0.5),
                               np.ones(1), np.full(1, 0.5))
    report.meta = {"seed": cfg.seed, "config_hash": cfg.digest(), "build_id": build_id()}
    if truth is not None:
        report.meta["planted_auc"] = extra
    out = Path(args.out) if args.out else _run_dir(cfg, args)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    (out / "report.txt").write_text(report.to_text(), encoding="utf-8")
    (out / "plot.csv").write_text(report.plot_csv(), encoding="utf-8")
    for f in ("report.json", "report.txt", "plot.csv"):
        write_sidecar(out / f, cfg.seed, cfg.digest(), methods=names)
    sys.stdout.write(report.to_text())
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _common(p: argparse.ArgumentParser, training: bool = False) -> None:
    p.add_argument("--config", help="pipeline config JSON")
    p.add_argument("--manifest", help="override the manifest path")
    p.add_argument("--output", help="override the run directory")
    p.add_argument("--seed", type=int, help="override the seed")
    p.add_argument("--threads", type=int, help=f"worker cap (default ${THREADS_ENV} or 1)")
    if training:
        p.add_argument("--preset", choices=PRESETS, help="hyperparameter preset")
        p.add_argument("--epochs", type=int, help="override the epoch count")
        p.add_argument("--name", help="run subdirectory (default derived from the ablation flags)")
        p.add_argument("--no-sim", action="store_true", help="drop the weighted similarity term")
        p.add_argument("--no-infonce", action="store_true", help="drop the contrastive term")
        p.add_argument("--no-weight-sharing", action="store_true", help="give every dataset its own encoder stack")
        p.add_argument("--shuffle-features", action="store_true", help="replace node features by a constant")


def make_parser() -> argparse.ArgumentParser:
    # -v is accepted before or after the subcommand
    verbosity = argparse.ArgumentParser(add_help=False)
    verbosity.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS,
                           help="more log output (repeat for debug)")
    parser = argparse.ArgumentParser(prog="genegraph", description=__doc__.split("\n\n")[0],
                                     parents=[verbosity])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[verbosity], help="write a synthetic collection with planted modules")
    p.add_argument("--spec", help="JSON object of generator parameters")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("build-graphs", parents=[verbosity], help="QC, normalization, gene selection and co-expression graphs")
    _common(p)
    p.set_defaults(func=cmd_build_graphs)

    p = sub.add_parser("train", parents=[verbosity], help="train the encoder and write checkpoint, log and embeddings")
    _common(p, training=True)
    p.add_argument("--checkpoint-every", type=int, default=0, help="save every N epochs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", parents=[verbosity], help="embed all graphs with a saved checkpoint")
    _common(p, training=True)
    p.add_argument("--checkpoint", help="checkpoint path (default <run>/model.ckpt)")
    p.add_argument("--out", help="embedding CSV path")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("evaluate", parents=[verbosity], help="benchmark one or more embedding CSVs")
    _common(p, training=True)
    p.add_argument("--embeddings", nargs="*", default=[], help="embedding CSVs (default the run's own)")
    p.add_argument("--names", nargs="*", help="method names (default from file paths)")
    p.add_argument("--truth", help="planted truth JSON from simulate")
    p.add_argument("--out", help="report directory")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    verbose = getattr(args, "verbose", 0)
    level = logging.WARNING if verbose == 0 else logging.INFO if verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except NumericalError as exc:
        log.error("numerical error: %s", exc)
        return EXIT_NUMERIC
    except (DataError, ValueError, KeyError, OSError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
