"""End-to-end wiring: datasets, featurization, training, evaluation, and run-directory stages."""

from __future__ import annotations

import json
import logging
import time
from collections import Counter
from dataclasses import dataclass, field
from datetime import date, datetime, timezone
from pathlib import Path

import numpy as np
import torch

from . import tiles
from .config import ConfigError, RunConfig
from .estimation import (
    Estimator,
    LinearRegressionBaseline,
    MetricsReport,
    NeighborAverageBaseline,
    NeighborIndex,
    NoNeighborsError,
    TemporalNeighborBaseline,
    TripQuery,
    compute_metrics,
    trip_record,
    write_report,
)
from .features import DriverRegistry, EncodedSequence, FlowTable, StepEncoder, build_flow_table, load_flow_table, save_flow_table
from .graph import LineConfig, build_graph, load_embedding, save_embedding, train_line
from .grid import GridSequence, GridSpec, OutOfRegionError, SequenceTooShortError, build_sequence, read_sequences, write_sequences
from .ingest import Corpus, clean_trips, read_corpus, read_generic_csv, read_porto_csv, split_by_date, write_corpus
from .model import DeepI2T, ImageBank, ModelConfig, ablate_gridlstm, load_checkpoint
from .synth import DEFAULT_EPOCH, generate_city, load_city, sample_trips, save_city, synthetic_spec, trips_corpus
from .training import TrainConfig, TrainResult, predict_final, train, write_history

log = logging.getLogger(__name__)

VARIANTS = ("full", "gridlstm")
METHOD_NAMES = {"full": "DeepI2T", "gridlstm": "GridLSTM"}


class StageError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# in-memory building blocks
# ---------------------------------------------------------------------------


@dataclass
class Dataset:
    spec: GridSpec
    train: Corpus
    test: Corpus
    city: object = None
    removed: Counter = field(default_factory=Counter)


def grid_spec(cfg: RunConfig) -> GridSpec:
    if cfg.data.format == "synthetic":
        s = cfg.synth
        return synthetic_spec(s.width, s.height, s.cell_size, cfg.grid.min_lon, cfg.grid.min_lat)
    g = cfg.grid
    if g.width > 0 and g.height > 0:
        return GridSpec(g.min_lon, g.min_lat, g.cell_size, g.width, g.height)
    if g.max_lon <= g.min_lon or g.max_lat <= g.min_lat:
        raise ConfigError("grid.max_lon", "grid needs width/height or a bounding box")
    return GridSpec.from_bbox(g.min_lon, g.min_lat, g.max_lon, g.max_lat, g.cell_size)


def synthetic_cutoff(cfg: RunConfig) -> date:
    start = datetime.fromtimestamp(DEFAULT_EPOCH, timezone.utc).date()
    return date.fromordinal(start.toordinal() + cfg.synth.train_days)


def make_dataset(cfg: RunConfig) -> Dataset:
    spec = grid_spec(cfg)
    city = None
    removed: Counter = Counter()
    if cfg.data.format == "synthetic":
        city = generate_city(cfg.synth.seed, spec)
        corpus = trips_corpus(sample_trips(city, cfg.synth.trips, cfg.synth.days))
        cutoff = synthetic_cutoff(cfg)
    else:
        reader = {"porto": read_porto_csv, "generic": read_generic_csv}.get(cfg.data.format)
        if reader is None:
            corpus = read_corpus(cfg.data.path)
        else:
            corpus, removed = reader(cfg.data.path)
        cutoff = date.fromisoformat(cfg.data.cutoff)
    corpus = Corpus(list(corpus), "all", cfg.config_hash())
    corpus, report = clean_trips(corpus, cfg.data.min_time, cfg.data.max_time, cfg.data.min_points)
    removed.update(report.removed)
    train_c, test_c = split_by_date(corpus, cutoff, _tz(cfg))
    return Dataset(spec, train_c, test_c, city, removed)


def _tz(cfg: RunConfig):
    from .features import resolve_tz

    return resolve_tz(cfg.run.tz)


def sequences_for(corpus: Corpus, spec: GridSpec) -> tuple[list, list[GridSequence], Counter]:
    """Grid sequences for every trip that maps to at least two cells inside the region."""
    trajs, seqs, dropped = [], [], Counter()
    for traj in corpus:
        try:
            seqs.append(build_sequence(traj, spec))
        except OutOfRegionError:
            dropped["out_of_region"] += 1
            continue
        except SequenceTooShortError:
            dropped["single_cell"] += 1
            continue
        trajs.append(traj)
    return trajs, seqs, dropped


def model_config(cfg: RunConfig, n_cells: int, variant: str = "full") -> ModelConfig:
    kw = dict(residual_blocks=cfg.model.residual_blocks, time_scale=cfg.model.time_scale, line_dim=cfg.embedding.dim)
    if cfg.model.lstm_hidden:
        kw["lstm_hidden"] = cfg.model.lstm_hidden
    mc = ModelConfig.toy(n_cells, **kw) if cfg.model.profile == "toy" else ModelConfig(n_cells, **kw)
    if variant == "gridlstm":
        mc = ablate_gridlstm(mc)
    elif variant != "full":
        raise ConfigError("variant", f"unknown variant {variant!r}")
    return mc


def layout_rasters(cfg: RunConfig, spec: GridSpec, city=None) -> np.ndarray:
    """uint8 ``(n_cells, C, H, W)`` rasters in cell-index order at the model's input shape."""
    shape = tuple(model_config(cfg, spec.n_cells).image_shape)
    if cfg.tiles.source == "render":
        if city is None:
            raise StageError("synthetic rendering needs a synthetic city")
        return tiles.render_city(city, shape=shape)
    src = tiles.TileSource(
        cfg.tiles.url,
        cfg.tiles.zoom or tiles.choose_zoom(spec.cell_size, spec.ref_lat),
        Path(cfg.tiles.cache_dir or Path(cfg.run.out_dir) / "tile_cache"),
        rate_limit=cfg.tiles.rate_limit,
        user_agent=cfg.tiles.user_agent,
        concurrency=cfg.tiles.concurrency,
    )
    images = tiles.fetch_region(src, spec)
    out = np.empty((spec.n_cells, *shape), dtype=np.uint8)
    for cell, img in images.items():
        out[spec.cell_index(cell.col, cell.row)] = tiles.downscale(img.pixels, shape)
    return out


def line_config(cfg: RunConfig) -> LineConfig:
    e = cfg.embedding
    return LineConfig(e.dim, e.order, e.epochs, e.negatives, e.lr, e.samples_per_epoch or None, cfg.run.seed)


def embed_graph(cfg: RunConfig, spec: GridSpec):
    return train_line(build_graph(spec, cfg.embedding.max_hops), line_config(cfg))


def build_encoder(
    cfg: RunConfig,
    spec: GridSpec,
    train_seqs: list[GridSequence],
    flow: FlowTable | None = None,
    registry: DriverRegistry | None = None,
    split: str = "train",
) -> StepEncoder:
    flow = flow or build_flow_table(train_seqs, spec, _tz(cfg), split=split)
    if registry is None:
        registry = DriverRegistry()
        for s in train_seqs:
            registry.index(s.vehicle_id)
        registry.freeze()
    return StepEncoder(spec, flow, registry, cfg.run.tz, cfg.features.flow_unit)


def train_config(cfg: RunConfig) -> TrainConfig:
    t = cfg.training
    return TrainConfig(t.batch_size, t.epochs, t.lr, t.clip, t.seed, t.patience, threads=t.threads)


def eval_holdout(n: int, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Disjoint (fit, eval) index arrays; the eval share is held out of gradient updates."""
    perm = np.random.default_rng([seed, 101]).permutation(n)
    k = int(round(n * fraction))
    return np.sort(perm[k:]), np.sort(perm[:k])


def fit_variant(
    cfg: RunConfig,
    variant: str,
    train_enc: list[EncodedSequence],
    images: ImageBank,
    line_vectors: np.ndarray,
    checkpoint_path=None,
    resume_from=None,
    extra_state: dict | None = None,
) -> tuple[DeepI2T, TrainResult]:
    torch.manual_seed(cfg.training.seed)
    mc = model_config(cfg, images.pixels.shape[0], variant)
    model = DeepI2T(mc, line_init=line_vectors)
    fit_idx, eval_idx = eval_holdout(len(train_enc), cfg.training.eval_fraction, cfg.training.seed)
    result = train(
        model,
        [train_enc[i] for i in fit_idx],
        [train_enc[i] for i in eval_idx],
        images,
        train_config(cfg),
        checkpoint_path=checkpoint_path,
        resume_from=resume_from,
        extra_state=extra_state,
    )
    return model, result


@dataclass
class Workspace:
    """Everything needed to train and evaluate, independent of model weights."""

    cfg: RunConfig
    spec: GridSpec
    encoder: StepEncoder
    images: ImageBank
    line_vectors: np.ndarray
    train_trajs: list
    train_seqs: list[GridSequence]
    train_enc: list[EncodedSequence]
    test_trajs: list
    test_seqs: list[GridSequence]
    test_enc: list[EncodedSequence]
    city: object = None
    dropped: Counter = field(default_factory=Counter)

    def neighbor_index(self) -> NeighborIndex:
        recs = [
            trip_record(t, self.spec, e.hour, s, e)
            for t, s, e in zip(self.train_trajs, self.train_seqs, self.train_enc)
        ]
        return NeighborIndex(recs, self.spec)


def build_workspace(cfg: RunConfig, dataset: Dataset | None = None) -> Workspace:
    ds = dataset or make_dataset(cfg)
    t0 = time.perf_counter()
    train_trajs, train_seqs, d1 = sequences_for(ds.train, ds.spec)
    test_trajs, test_seqs, d2 = sequences_for(ds.test, ds.spec)
    encoder = build_encoder(cfg, ds.spec, train_seqs, split=ds.train.split)
    log.info("sequences: %d train, %d test (%.1fs)", len(train_seqs), len(test_seqs), time.perf_counter() - t0)
    t0 = time.perf_counter()
    images = ImageBank(layout_rasters(cfg, ds.spec, ds.city))
    log.info("layout images %s (%.1fs)", images.shape, time.perf_counter() - t0)
    t0 = time.perf_counter()
    emb = embed_graph(cfg, ds.spec)
    log.info("LINE embedding (%.1fs)", time.perf_counter() - t0)
    return Workspace(
        cfg,
        ds.spec,
        encoder,
        images,
        emb.vectors,
        train_trajs,
        train_seqs,
        encoder.encode_all(train_seqs),
        test_trajs,
        test_seqs,
        encoder.encode_all(test_seqs),
        ds.city,
        d1 + d2 + ds.removed,
    )


@dataclass
class Evaluation:
    results: dict[str, dict]  # method -> arrays over the common trip set
    metrics: dict[str, MetricsReport]  # on the common set
    full_metrics: dict[str, MetricsReport]  # path-aware methods and LR over all test trips
    coverage: float  # share of test queries answered path-blind
    n_test: int

    def summary(self) -> dict:
        return {
            "common": {k: v.as_row() for k, v in self.metrics.items()},
            "all_test": {k: v.as_row() for k, v in self.full_metrics.items()},
            "blind_coverage": self.coverage,
            "n_test": self.n_test,
        }


def evaluate(ws: Workspace, models: dict[str, DeepI2T], neighbor_cap: int = 50, seed: int = 0) -> Evaluation:
    """Score every method on the test split.

    Neighbor-based methods only answer trips with neighbors, so the headline
    comparison uses the common set of test trips every method answers.
    """
    spec = ws.spec
    index = ws.neighbor_index()
    T = np.array([e.targets[-1] for e in ws.test_enc])
    hours = np.array([e.hour for e in ws.test_enc])
    tids = [e.trip_id for e in ws.test_enc]
    l_test = np.array([trip_record(t, spec, 0).l1 for t in ws.test_trajs])
    est: dict[str, np.ndarray] = {}
    for variant, model in models.items():
        est[METHOD_NAMES.get(variant, variant)] = predict_final(model, ws.test_enc, ws.images)

    lr = LinearRegressionBaseline().fit([r.l1 for r in index.records], [r.travel_time for r in index.records])
    est["LR"] = lr.predict(l_test)
    avg, temp = NeighborAverageBaseline(index), TemporalNeighborBaseline(index)
    est["AVG"], est["TEMP"] = np.full(T.size, np.nan), np.full(T.size, np.nan)
    for i, tr in enumerate(ws.test_trajs):
        rec = trip_record(tr, spec, int(hours[i]))
        try:
            est["AVG"][i] = avg.predict(rec.origin, rec.destination, rec.l1)
            est["TEMP"][i] = temp.predict(rec.origin, rec.destination, rec.l1, rec.hour)
        except NoNeighborsError:
            pass

    if "full" in models:
        estimator = Estimator(models["full"], ws.encoder, ws.images)
        queries = [TripQuery.blind_from(t) for t in ws.test_trajs]
        blind, _ = estimator.estimate_path_blind_many(queries, index, neighbor_cap, seed)
        est["DeepI2T-blind"] = blind

    has_nb = ~np.isnan(est["AVG"])
    answered = np.logical_and.reduce([np.isfinite(v) for v in est.values()])
    coverage = float(np.mean(np.isfinite(est["DeepI2T-blind"]))) if "DeepI2T-blind" in est else float(has_nb.mean())
    common = answered & has_nb
    results = {
        m: {"trip_id": [t for t, k in zip(tids, common) if k], "T": T[common], "T_hat": v[common], "hour": hours[common]}
        for m, v in est.items()
    }
    metrics = {m: compute_metrics(r["T"], r["T_hat"]) for m, r in results.items()}
    full = {m: compute_metrics(T, est[m]) for m in est if np.all(np.isfinite(est[m]))}
    return Evaluation(results, metrics, full, coverage, int(T.size))


@dataclass
class Experiment:
    workspace: Workspace
    models: dict[str, DeepI2T]
    training: dict[str, TrainResult]
    evaluation: Evaluation
    config_hash: str


def run_experiment(cfg: RunConfig, variants=VARIANTS) -> Experiment:
    ws = build_workspace(cfg)
    models, results = {}, {}
    for v in variants:
        t0 = time.perf_counter()
        models[v], results[v] = fit_variant(cfg, v, ws.train_enc, ws.images, ws.line_vectors)
        log.info("trained %s in %.1fs (best epoch %d)", v, time.perf_counter() - t0, results[v].best_epoch)
    ev = evaluate(ws, models, cfg.evaluate.neighbor_cap, cfg.run.seed)
    return Experiment(ws, models, results, ev, cfg.config_hash())


# ---------------------------------------------------------------------------
# run-directory stages
# ---------------------------------------------------------------------------


class RunDir:
    """One directory per run; each stage writes its own subdirectory."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.root = Path(cfg.run.out_dir)
        self.hash = cfg.config_hash()

    def p(self, *parts) -> Path:
        return self.root.joinpath(*parts)

    corpus_train = property(lambda s: s.p("corpus", "train.tsv"))
    corpus_test = property(lambda s: s.p("corpus", "test.tsv"))
    grid_json = property(lambda s: s.p("corpus", "grid.json"))
    city_json = property(lambda s: s.p("corpus", "city.json"))
    seq_train = property(lambda s: s.p("sequences", "train.txt"))
    seq_test = property(lambda s: s.p("sequences", "test.txt"))
    archive = property(lambda s: s.p("images", "layout.bin"))
    embedding = property(lambda s: s.p("embedding", "line.emb"))
    flow = property(lambda s: s.p("features", "flow.bin"))
    drivers = property(lambda s: s.p("features", "drivers.txt"))

    def checkpoint(self, variant: str) -> Path:
        return self.p("checkpoints", f"{variant}.pt")

    def spec(self, force: bool = False) -> GridSpec:
        d = json.loads(self._need(self.grid_json, "preprocess").read_text())
        self._check_hash(self.grid_json, d.get("config_hash", ""), force)
        return GridSpec(**d["grid"])

    def _need(self, path: Path, stage: str) -> Path:
        if not path.exists():
            raise StageError(f"{path} missing; run the '{stage}' stage first")
        return path

    def _check_hash(self, path: Path, found: str, force: bool = False) -> None:
        if found != self.hash:
            msg = f"{path}: config hash {found or '<none>'} does not match this run's {self.hash}"
            if not force:
                raise StageError(msg + " (rerun the stage with --redo, or pass --force)")
            log.warning("%s; continuing because of --force", msg)


def _header_hash(path: Path) -> str:
    with open(path) as fh:
        first = fh.readline()
    for kv in first.strip().split("\t")[1:]:
        if kv.startswith("config="):
            return kv.split("=", 1)[1]
    return ""


def _skip(outputs: list[Path], redo: bool, stage: str) -> bool:
    if not redo and all(p.exists() for p in outputs):
        log.info("%s: outputs present, skipping (use --redo to rebuild)", stage)
        return True
    return False


def stage_preprocess(cfg: RunConfig, redo: bool = False) -> None:
    rd = RunDir(cfg)
    outs = [rd.corpus_train, rd.corpus_test, rd.grid_json, rd.seq_train, rd.seq_test]
    if _skip(outs, redo, "preprocess"):
        return
    ds = make_dataset(cfg)
    rd.p("corpus").mkdir(parents=True, exist_ok=True)
    cfg.save(rd.p("config.ini"))
    if ds.city is not None:
        save_city(ds.city, rd.city_json)
    dropped = Counter(ds.removed)
    for corpus, cpath, spath in ((ds.train, rd.corpus_train, rd.seq_train), (ds.test, rd.corpus_test, rd.seq_test)):
        trajs, seqs, d = sequences_for(corpus, ds.spec)
        dropped.update(d)
        write_corpus(Corpus(trajs, corpus.split, rd.hash), cpath)
        write_sequences(seqs, spath, rd.hash)
    rd.grid_json.write_text(json.dumps({"grid": ds.spec.to_dict(), "config_hash": rd.hash, "dropped": dict(dropped)}, indent=1))
    log.info("preprocess: %d train, %d test trips; dropped %s", len(ds.train), len(ds.test), dict(dropped))


def stage_tiles(cfg: RunConfig, redo: bool = False) -> None:
    rd = RunDir(cfg)
    if _skip([rd.archive], redo, "tiles"):
        return
    spec = rd.spec()
    city = load_city(rd.city_json) if rd.city_json.exists() else None
    tiles.write_archive(rd.archive, spec, layout_rasters(cfg, spec, city), rd.hash)


def stage_embed_graph(cfg: RunConfig, redo: bool = False) -> None:
    rd = RunDir(cfg)
    if _skip([rd.embedding], redo, "embed-graph"):
        return
    spec = rd.spec()
    save_embedding(rd.embedding, embed_graph(cfg, spec), spec, rd.hash)


def stage_features(cfg: RunConfig, redo: bool = False) -> None:
    rd = RunDir(cfg)
    if _skip([rd.flow, rd.drivers], redo, "features"):
        return
    spec = rd.spec()
    seqs = _load_sequences(rd, rd.seq_train)
    enc = build_encoder(cfg, spec, seqs)
    enc.flow.config_hash = rd.hash
    save_flow_table(rd.flow, enc.flow)
    enc.registry.save(rd.drivers, rd.hash)


def _load_sequences(rd: RunDir, path: Path, force: bool = False) -> list[GridSequence]:
    rd._need(path, "preprocess")
    rd._check_hash(path, _header_hash(path), force)
    return read_sequences(path)


def load_encoder(rd: RunDir, force: bool = False) -> StepEncoder:
    spec = rd.spec(force)
    flow = load_flow_table(rd._need(rd.flow, "features"))
    rd._check_hash(rd.flow, flow.config_hash, force)
    reg = DriverRegistry.load(rd._need(rd.drivers, "features"))
    rd._check_hash(rd.drivers, reg.config_hash, force)
    return StepEncoder(spec, flow, reg, rd.cfg.run.tz, rd.cfg.features.flow_unit)


def load_images(rd: RunDir, force: bool = False) -> ImageBank:
    rasters, _, header = tiles.read_archive(rd._need(rd.archive, "tiles"))
    rd._check_hash(rd.archive, header["config_hash"], force)
    return ImageBank(np.asarray(rasters))


def load_line(rd: RunDir, force: bool = False) -> np.ndarray:
    vectors, chash = load_embedding(rd._need(rd.embedding, "embed-graph"), rd.spec(force))
    rd._check_hash(rd.embedding, chash, force)
    return vectors


def stage_train(cfg: RunConfig, variant: str = "full", redo: bool = False, resume: bool = False) -> TrainResult | None:
    rd = RunDir(cfg)
    ck = rd.checkpoint(variant)
    if ck.exists() and not redo and not resume:
        _, payload = load_checkpoint(ck)
        if payload.get("complete"):
            log.info("train: %s exists, skipping (use --redo to retrain)", ck)
            return None
    encoder = load_encoder(rd)
    train_enc = encoder.encode_all(_load_sequences(rd, rd.seq_train))
    images = load_images(rd)
    extra = {
        "config_hash": rd.hash,
        "run_config": cfg.to_text(),
        "variant": variant,
        "driver_registry": encoder.registry.to_state(),
        "complete": False,
    }
    model, result = fit_variant(
        cfg, variant, train_enc, images, load_line(rd), ck, resume_from=ck if (resume and ck.exists()) else None, extra_state=extra
    )
    # final checkpoint: best weights, marked complete
    _, payload = load_checkpoint(ck)
    from .model import save_checkpoint

    payload.pop("state_dict", None)
    payload.pop("model_config", None)
    payload.pop("format", None)
    payload.pop("version", None)
    payload["complete"] = True
    save_checkpoint(ck, model, **payload)
    write_history(rd.p("checkpoints", f"history_{variant}.csv"), result.history)
    return result


def _checkpointed_model(rd: RunDir, path: Path, force: bool) -> DeepI2T:
    if not path.exists():
        raise StageError(f"checkpoint {path} not found")
    model, payload = load_checkpoint(path)
    rd._check_hash(path, payload.get("config_hash", ""), force)
    return model


def stage_evaluate(cfg: RunConfig, split: str = "test", report_dir: str | None = None, checkpoint: str | None = None, force: bool = False) -> Evaluation:
    rd = RunDir(cfg)
    ck = checkpoint or cfg.evaluate.checkpoint
    if not ck:
        raise ConfigError("evaluate.checkpoint", "required (set it in the config or pass --checkpoint)")
    if split not in ("test", "train"):
        raise ConfigError("split", f"unknown split {split!r}")
    models = {"full": _checkpointed_model(rd, Path(ck), force)}
    sibling = Path(ck).with_name("gridlstm.pt")
    if sibling.exists() and sibling != Path(ck):
        models["gridlstm"] = _checkpointed_model(rd, sibling, force)
    ws = workspace_from_run(rd, split, force)
    ev = evaluate(ws, models, cfg.evaluate.neighbor_cap, cfg.run.seed)
    out = Path(report_dir) if report_dir else rd.p("report")
    write_report(out, ev.results, rd.hash, plots=cfg.evaluate.plots)
    (out / "summary.json").write_text(json.dumps({"config_hash": rd.hash, "split": split, **ev.summary()}, indent=1))
    return ev


def workspace_from_run(rd: RunDir, split: str = "test", force: bool = False) -> Workspace:
    spec = rd.spec(force)
    encoder = load_encoder(rd, force)
    train_c, eval_c = read_corpus(rd.corpus_train), read_corpus(rd.corpus_train if split == "train" else rd.corpus_test)
    for path, c in ((rd.corpus_train, train_c), (rd.corpus_test, eval_c)):
        rd._check_hash(path, c.config_hash, force)
    train_seqs = _load_sequences(rd, rd.seq_train, force)
    eval_seqs = train_seqs if split == "train" else _load_sequences(rd, rd.seq_test, force)
    return Workspace(
        rd.cfg,
        spec,
        encoder,
        load_images(rd, force),
        load_line(rd, force),
        list(train_c),
        train_seqs,
        encoder.encode_all(train_seqs),
        list(eval_c),
        eval_seqs,
        encoder.encode_all(eval_seqs),
    )
