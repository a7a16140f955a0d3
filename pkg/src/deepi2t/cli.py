"""Command-line entry point: ``deepi2t <stage> --config run.ini``.

Exit codes: 0 success, 1 configuration or runtime failure, 2 usage error.
Logs go to stderr; data goes to files only.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path

import numpy as np

log = logging.getLogger("deepi2t")


def _parse_cells(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WxH, got {text!r}") from None
    return w, h


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deepi2t", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    def stage(name, help_):
        sp = sub.add_parser(name, help=help_, description=help_)
        sp.add_argument("--config", required=True, help="run config (INI)")
        sp.add_argument("--redo", action="store_true", help="rebuild outputs even if present")
        return sp

    stage("preprocess", "ingest, clean, split and grid the trip corpus")
    t = stage("tiles", "build the per-cell layout image archive")
    t.add_argument("action", nargs="?", choices=["fetch", "render-synthetic"], help="defaults to tiles.source")
    stage("embed-graph", "train LINE embeddings on the grid proximity graph")
    stage("features", "build the hourly flow table and driver registry")
    tr = stage("train", "train a model variant")
    tr.add_argument("--variant", choices=["full", "gridlstm"], default="full")
    tr.add_argument("--resume", action="store_true", help="continue from the variant's checkpoint")
    ev = stage("evaluate", "score the model and baselines, write a report")
    ev.add_argument("--split", choices=["test", "train"], default="test")
    ev.add_argument("--report", help="report directory (default <run>/report)")
    ev.add_argument("--checkpoint", help="checkpoint path (overrides evaluate.checkpoint)")
    ev.add_argument("--force", action="store_true", help="accept artifacts built under another config hash")
    q = stage("query", "answer trip queries from a CSV file")
    q.add_argument("--mode", choices=["aware", "blind"], required=True)
    q.add_argument("--input", required=True, help="aware: trip_id,vehicle_id,timestamp,lon,lat rows; "
                   "blind: trip_id,origin_lon,origin_lat,dest_lon,dest_lat,departure[,vehicle_id]")
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--output", help="output CSV (default <run>/queries_<mode>.csv)")
    q.add_argument("--force", action="store_true")

    syn = sub.add_parser("synth", help="synthetic-city tools", description="synthetic-city tools")
    ssub = syn.add_subparsers(dest="synth_command", required=True)
    g = ssub.add_parser("generate", help="generate a city, trips and layout images", description="generate a synthetic city with trips and layout images")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--cells", type=_parse_cells, default=(30, 30), help="grid size WxH (max 40x40)")
    g.add_argument("--cell-size", type=float, default=200.0, help="meters")
    g.add_argument("--trips", type=int, default=5000)
    g.add_argument("--days", type=int, default=14)
    g.add_argument("--image-profile", choices=["toy", "full"], default="toy", help="raster size of the image archive")
    g.add_argument("--png", action="store_true", help="also write one PNG per cell")
    g.add_argument("--out", required=True)
    return p


def _load(args):
    from .config import RunConfig

    return RunConfig.load(args.config)


def cmd_preprocess(args):
    from .pipeline import stage_preprocess

    stage_preprocess(_load(args), args.redo)


def cmd_tiles(args):
    from .config import ConfigError
    from .pipeline import stage_tiles

    cfg = _load(args)
    want = {"fetch": "xyz", "render-synthetic": "render"}.get(args.action, cfg.tiles.source)
    if want != cfg.tiles.source:
        raise ConfigError("tiles.source", f"is {cfg.tiles.source!r} but '{args.action}' was requested")
    stage_tiles(cfg, args.redo)


def cmd_embed_graph(args):
    from .pipeline import stage_embed_graph

    stage_embed_graph(_load(args), args.redo)


def cmd_features(args):
    from .pipeline import stage_features

    stage_features(_load(args), args.redo)


def cmd_train(args):
    from .pipeline import stage_train

    res = stage_train(_load(args), args.variant, args.redo, args.resume)
    if res is not None:
        log.info("best epoch %d, eval MAPE %.2f%%", res.best_epoch, res.best_eval_mape)


def cmd_evaluate(args):
    from .pipeline import stage_evaluate

    ev = stage_evaluate(_load(args), args.split, args.report, args.checkpoint, args.force)
    for m, r in ev.metrics.items():
        log.info("%-14s MAE %8.2f s  MAPE %6.2f%%  SR %6.2f%%  N %d", m, r.mae, r.mape, r.sr, r.n)


def _read_blind(path: str):
    from .estimation import TripQuery

    out = []
    with open(path, newline="") as fh:
        for i, row in enumerate(csv.DictReader(fh)):
            try:
                out.append(
                    TripQuery.path_blind(
                        (float(row["origin_lon"]), float(row["origin_lat"])),
                        (float(row["dest_lon"]), float(row["dest_lat"])),
                        int(row["departure"]),
                        row.get("vehicle_id", ""),
                        row.get("trip_id") or f"q{i}",
                    )
                )
            except (KeyError, ValueError) as exc:
                raise ValueError(f"{path}: row {i + 1}: {exc}") from None
    return out


def cmd_query(args):
    from .estimation import Estimator, TripQuery
    from .ingest import read_generic_csv
    from .pipeline import RunDir, _checkpointed_model, load_images, workspace_from_run

    cfg = _load(args)
    rd = RunDir(cfg)
    model = _checkpointed_model(rd, Path(args.checkpoint), args.force)
    out = Path(args.output) if args.output else rd.p(f"queries_{args.mode}.csv")
    rows = []
    if args.mode == "aware":
        from .pipeline import load_encoder

        est = Estimator(model, load_encoder(rd, args.force), load_images(rd, args.force))
        corpus, skipped = read_generic_csv(args.input)
        if skipped:
            log.warning("skipped rows: %s", dict(skipped))
        for traj in corpus:
            rows.append((traj.trip_id, est.estimate_path_aware(TripQuery.path_aware(traj)), ""))
    else:
        ws = workspace_from_run(rd, "test", args.force)
        est = Estimator(model, ws.encoder, ws.images)
        queries = _read_blind(args.input)
        values, counts = est.estimate_path_blind_many(queries, ws.neighbor_index(), cfg.evaluate.neighbor_cap, cfg.run.seed)
        missing = int(np.isnan(values).sum())
        if missing:
            log.warning("%d of %d queries have no neighboring training trips", missing, len(queries))
        rows = [(q.trip_id, v, int(c)) for q, v, c in zip(queries, values, counts)]
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["trip_id", "estimate_s", "neighbors"])
        for tid, v, c in rows:
            w.writerow([tid, "" if np.isnan(v) else f"{v:.3f}", c])
    log.info("wrote %d estimates to %s", len(rows), out)


def cmd_synth(args):
    from . import tiles
    from .grid import CellId
    from .ingest import write_corpus
    from .model import FULL_IMAGE_SHAPE, TOY_IMAGE_SHAPE
    from .synth import MAX_SIDE, generate_city, sample_trips, save_city, synthetic_spec, trips_corpus

    w, h = args.cells
    if not (1 <= w <= MAX_SIDE and 1 <= h <= MAX_SIDE):
        from .config import ConfigError

        raise ConfigError("--cells", f"grid must be at most {MAX_SIDE}x{MAX_SIDE}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec = synthetic_spec(w, h, args.cell_size)
    city = generate_city(args.seed, spec)
    save_city(city, out / "city.json")
    write_corpus(trips_corpus(sample_trips(city, args.trips, args.days)), out / "trips.tsv")
    shape = TOY_IMAGE_SHAPE if args.image_profile == "toy" else FULL_IMAGE_SHAPE
    rasters = tiles.render_city(city, shape=shape)
    tiles.write_archive(out / "layout.bin", spec, rasters)
    if args.png:
        for idx in range(spec.n_cells):
            c = spec.cell_of_index(idx)
            tiles.save_cell_png(rasters[idx], out / "cells" / f"{c.col}_{c.row}.png")
    log.info("synthetic city %dx%d, %d trips over %d days -> %s", w, h, args.trips, args.days, out)


COMMANDS = {
    "preprocess": cmd_preprocess,
    "tiles": cmd_tiles,
    "embed-graph": cmd_embed_graph,
    "features": cmd_features,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "query": cmd_query,
    "synth": cmd_synth,
}


def run_subcommand(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors exit 2, --help exits 0
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    from .config import ConfigError

    t0 = time.perf_counter()
    try:
        COMMANDS[args.command](args)
    except ConfigError as exc:
        log.error("config error at %s", exc)
        return 1
    except Exception as exc:  # noqa: BLE001 - every failure maps to exit 1
        log.error("%s failed: %s", args.command, exc)
        log.debug("traceback", exc_info=True)
        return 1
    log.info("stage %s done in %.2fs", args.command, time.perf_counter() - t0)
    return 0


def main() -> None:
    sys.exit(run_subcommand())


if __name__ == "__main__":
    main()
