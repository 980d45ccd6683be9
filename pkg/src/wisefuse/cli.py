"""Command-line entry points.

Every stage is runnable standalone on persisted artifacts so a failed run
can resume from its last good output. Exit codes: 0 success, 2 bad
configuration or usage, 3 stage failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import _kernels
from .distill import TrainConfig, assemble_triplets, save_checkpoint, train
from .encoder import EncodeRequest, EncoderGateway, RemoteProvider, SyntheticProvider
from .errors import ConfigError, StageError, WisefuseError
from .evalkit import WorldParams, generate_world, load_world, save_world
from .pipeline import ENCODER_URL_ENV, bench, config_from_json, run_pipeline
from .prompts import build_text_store, read_prompt_specs, text_embeddings_from_store
from .raster import raster_bytes, read_raster, tile_filename, write_raster
from .reports import ClassReportSet, read_representatives, representative_slides, write_representatives
from .selection import export_heatmap, select_topk, similarity_matrix, write_selection
from .store import EmbeddingStore, read_store, write_store
from .tiling import extract_patch, read_grid, tile_slide, write_grid


def _gateway_from_args(args) -> EncoderGateway:
    url = os.environ.get(ENCODER_URL_ENV) or getattr(args, "url", None)
    if url:
        return EncoderGateway(RemoteProvider(url))
    return EncoderGateway(SyntheticProvider(args.dim, args.seed))


def _add_provider_flags(parser) -> None:
    parser.add_argument("--dim", type=int, default=32,
                        help="synthetic provider dimension")
    parser.add_argument("--seed", type=int, default=0,
                        help="synthetic provider seed")
    parser.add_argument("--url", default=None,
                        help=f"remote encoder url (or ${ENCODER_URL_ENV})")


def _cmd_synth(args) -> int:
    params = WorldParams(
        classes=args.classes, slides_per_class=args.slides_per_class,
        grid_rows=args.grid_rows, grid_cols=args.grid_cols,
        scale_factor=args.scale_factor, dim=args.dim, alpha=args.alpha,
        gamma=args.gamma, sigma=args.sigma, sigma_text=args.sigma_text,
        mix_angle=args.mix_angle,
        planted_fraction=args.planted_fraction, seed=args.seed,
    )
    world = generate_world(params)
    save_world(world, args.out)
    print(f"world with {len(world.slide_ids)} slides, "
          f"{world.n_low()} coarse / {world.n_high()} fine patches -> {args.out}")
    return 0


def _cmd_tile(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = sorted(list(Path(args.slides).glob("*.pgm"))
                   + list(Path(args.slides).glob("*.ppm")))
    if not paths:
        raise ConfigError(f"no slides found in {args.slides}")
    for path in paths:
        slide = read_raster(path)
        grid = tile_slide(slide, args.patch_size, args.scale_factor, args.tissue_min)
        write_grid(grid, out / f"{slide.slide_id}.json")
        if args.write_tiles:
            tiles_dir = out / slide.slide_id
            tiles_dir.mkdir(exist_ok=True)
            for coord in grid.coarse + grid.fine:
                tile = extract_patch(slide, coord, args.patch_size, args.scale_factor)
                name = tile_filename(slide.slide_id, coord.scale, coord.row,
                                     coord.col, slide.channels)
                write_raster(tiles_dir / name, tile)
        print(f"{slide.slide_id}: {len(grid.coarse)} coarse, {len(grid.fine)} fine")
    return 0


def _cmd_encode(args) -> int:
    gateway = _gateway_from_args(args)
    store = EmbeddingStore(gateway.info().dim,
                           "low_res_raw" if args.scale == "coarse" else "high_res")
    for grid_path in sorted(Path(args.grids).glob("*.json")):
        grid = read_grid(grid_path)
        slide = read_raster(Path(args.slides) / f"{grid.slide_id}.pgm") \
            if (Path(args.slides) / f"{grid.slide_id}.pgm").exists() \
            else read_raster(Path(args.slides) / f"{grid.slide_id}.ppm")
        coords = grid.coarse if args.scale == "coarse" else grid.fine
        items = []
        for coord in coords:
            tile = extract_patch(slide, coord, grid.patch_size, grid.scale_factor)
            items.append((coord.patch_id, raster_bytes(tile)))
        if not items:
            continue
        batch = gateway.encode_batch(EncodeRequest(items, "vision"), kind=store.kind)
        for record_id in batch.ids:
            store.add(record_id, batch.get(record_id))
    write_store(store, args.out)
    print(f"{len(store)} {args.scale} embeddings (dim {store.dim}) -> {args.out}")
    return 0


def _cmd_reps(args) -> int:
    rep_sets = []
    if args.world:
        world = load_world(args.world)
        by_class: dict[str, list[str]] = {}
        for slide_id in world.slide_ids:
            by_class.setdefault(world.class_ids[world.labels[slide_id]], []).append(slide_id)
        for class_id in sorted(by_class):
            reports = world.reports.subset(by_class[class_id], "report")
            rep_sets.append(representative_slides(
                ClassReportSet(class_id, reports), args.n))
    else:
        gateway = _gateway_from_args(args)
        root = Path(args.reports)
        for class_dir in sorted(p for p in root.iterdir() if p.is_dir()):
            items = [
                (path.stem, path.read_text())
                for path in sorted(class_dir.glob("*.txt"))
            ]
            if not items:
                continue
            encoded = gateway.encode_batch(EncodeRequest(items, "text"), kind="report")
            rep_sets.append(representative_slides(
                ClassReportSet(class_dir.name, encoded), args.n))
    write_representatives(rep_sets, args.out)
    for rep in rep_sets:
        print(f"{rep.class_id}: {' '.join(rep.slide_ids)}")
    return 0


def _cmd_prompts(args) -> int:
    gateway = _gateway_from_args(args)
    specs = read_prompt_specs(args.specs)
    _, store = build_text_store(specs, gateway)
    write_store(store, args.out)
    print(f"{len(store)} class text embeddings -> {args.out}")
    return 0


def _cmd_distill(args) -> int:
    config = TrainConfig(
        lambda_global=args.lambda_global, lambda_local=args.lambda_local,
        lr=args.lr, epochs=args.epochs, batch_size=args.batch_size,
        prompts=args.prompts, negatives_per_triplet=args.negatives,
        seed=args.seed,
    )
    if args.world:
        world = load_world(args.world)
        grids = world.grids
        low_raw, high = world.low_raw, world.high
    else:
        if not (args.grids and args.low and args.high):
            raise ConfigError("need --world or all of --grids/--low/--high")
        grids = {p.stem: read_grid(p) for p in sorted(Path(args.grids).glob("*.json"))}
        low_raw = read_store(args.low, "low_res_raw")
        high = read_store(args.high, "high_res")
    slide_ids = sorted(grids)
    if args.reps:
        chosen = {s for ids in read_representatives(args.reps).values() for s in ids}
        slide_ids = [s for s in slide_ids if s in chosen]
    triplets = []
    for slide_id in slide_ids:
        triplets.extend(assemble_triplets(grids[slide_id], low_raw, high,
                                          config.negatives_per_triplet, config.seed))
    head, trace = train(triplets, config)
    save_checkpoint(head, args.out, config)
    first = trace[0] if trace else float("nan")
    last = trace[-1] if trace else float("nan")
    print(f"{len(triplets)} triplets, {config.epochs} epochs, "
          f"loss {first:.4f} -> {last:.4f}, checkpoint -> {args.out}")
    return 0


def _cmd_select(args) -> int:
    out = Path(args.out)
    (out / "selection").mkdir(parents=True, exist_ok=True)
    (out / "heatmaps").mkdir(exist_ok=True)
    distilled = read_store(args.low_distilled, "low_res_distilled")
    text_embeddings = text_embeddings_from_store(read_store(args.text, "text"))
    for grid_path in sorted(Path(args.grids).glob("*.json")):
        grid = read_grid(grid_path)
        ids = grid.coarse_ids()
        if not ids:
            continue
        sim = similarity_matrix(distilled.subset(ids), text_embeddings, grid.slide_id)
        result = select_topk(sim, args.ratio, grid)
        write_selection(result, out / "selection" / f"{grid.slide_id}.json")
        export_heatmap(sim, grid, out / "heatmaps" / grid.slide_id)
        print(f"{grid.slide_id}: k={result.k}, "
              f"{len(result.selected_fine_ids)} fine patches selected")
    return 0


def _cmd_fuse(args) -> int:
    from .fusion import fuse as fuse_op, write_fused
    from .selection import read_selection

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    distilled = read_store(args.low_distilled, "low_res_distilled")
    text_store = read_store(args.text, "text")
    text_embeddings = text_embeddings_from_store(text_store)
    high = read_store(args.high, "high_res")
    for selection_path in sorted(Path(args.selection).glob("*.json")):
        result = read_selection(selection_path)
        grid = read_grid(Path(args.grids) / f"{result.slide_id}.json")
        sim = similarity_matrix(distilled.subset(grid.coarse_ids()),
                                text_embeddings, result.slide_id)
        fused = fuse_op(result, sim, high, text_embeddings)
        write_fused(fused, out / f"{result.slide_id}.wfeb", high.dim, text_store.dim)
        print(f"{result.slide_id}: {len(fused)} fused vectors (dim {fused.dim})")
    return 0


def _cmd_run(args) -> int:
    overrides = {}
    if args.out:
        overrides["out_dir"] = args.out
    if args.ratio is not None:
        overrides["ratio"] = args.ratio
    config = config_from_json(args.config, overrides)
    result = run_pipeline(config)
    calls = result.ledger.patch_encode_calls()
    print(f"{len(result.selections)} slides, {calls} patch-encode calls "
          f"({result.n_high} fine patches total) -> {result.out_dir}")
    for record in result.ledger.stages:
        print(f"  {record.name:22s} {record.wall_ms:9.1f} ms "
              f"{record.encoder_calls:7d} calls")
    return 0


def _cmd_bench(args) -> int:
    config = config_from_json(args.config,
                              {"out_dir": args.out} if args.out else None)
    metrics = bench(config, args.baseline, args.seed)
    text = json.dumps(metrics, sort_keys=True, indent=1)
    if args.metrics:
        Path(args.metrics).write_text(text)
    print(text)
    return 0


def _cmd_backend(args) -> int:
    print(f"active compute backend: {_kernels.backend_name()}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wisefuse",
        description="coarse-to-fine patch selection with text fusion",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic planted-ROI world")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--slides-per-class", type=int, default=4)
    p.add_argument("--grid-rows", type=int, default=10)
    p.add_argument("--grid-cols", type=int, default=10)
    p.add_argument("--scale-factor", type=int, default=4)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--mix-angle", type=float, default=1.35)
    p.add_argument("--gamma", type=float, default=0.3)
    p.add_argument("--sigma", type=float, default=0.2)
    p.add_argument("--sigma-text", type=float, default=0.05)
    p.add_argument("--planted-fraction", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("tile", help="tile raster slides into two-scale grids")
    p.add_argument("--slides", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--patch-size", type=int, default=256)
    p.add_argument("--scale-factor", type=int, default=4)
    p.add_argument("--tissue-min", type=float, default=0.5)
    p.add_argument("--write-tiles", action="store_true")
    p.set_defaults(func=_cmd_tile)

    p = sub.add_parser("encode", help="encode grid patches into a store")
    p.add_argument("--slides", required=True)
    p.add_argument("--grids", required=True)
    p.add_argument("--scale", choices=["coarse", "fine"], required=True)
    p.add_argument("--out", required=True)
    _add_provider_flags(p)
    p.set_defaults(func=_cmd_encode)

    p = sub.add_parser("reps", help="pick representative slides per class")
    p.add_argument("--world", default=None)
    p.add_argument("--reports", default=None,
                   help="directory of {class}/{slide}.txt report files")
    p.add_argument("--n", type=int, default=5)
    p.add_argument("--out", required=True)
    _add_provider_flags(p)
    p.set_defaults(func=_cmd_reps)

    p = sub.add_parser("prompts", help="build class text embeddings")
    p.add_argument("--specs", required=True,
                   help="class prompt JSON file or directory")
    p.add_argument("--out", required=True)
    _add_provider_flags(p)
    p.set_defaults(func=_cmd_prompts)

    p = sub.add_parser("distill", help="train the cross-scale head")
    p.add_argument("--world", default=None)
    p.add_argument("--grids", default=None)
    p.add_argument("--low", default=None)
    p.add_argument("--high", default=None)
    p.add_argument("--reps", default=None, help="restrict to reps.json slides")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--lambda-global", type=float, default=500.0)
    p.add_argument("--lambda-local", type=float, default=1.0)
    p.add_argument("--prompts", type=int, default=30)
    p.add_argument("--negatives", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_distill)

    p = sub.add_parser("select", help="score and select coarse patches")
    p.add_argument("--low-distilled", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--grids", required=True)
    p.add_argument("--ratio", type=float, default=0.1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_select)

    p = sub.add_parser("fuse", help="fuse selected patches with text vectors")
    p.add_argument("--selection", required=True)
    p.add_argument("--grids", required=True)
    p.add_argument("--low-distilled", required=True)
    p.add_argument("--text", required=True)
    p.add_argument("--high", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_fuse)

    p = sub.add_parser("run", help="run the whole pipeline from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--ratio", type=float, default=None)
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("bench", help="score a policy on a synthetic world")
    p.add_argument("--config", required=True)
    p.add_argument("--baseline", choices=["all_high", "random_k", "wisefuse"],
                   required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="override out_dir")
    p.add_argument("--metrics", default=None, help="write metrics JSON here")
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("backend", help="show the active compute backend")
    p.set_defaults(func=_cmd_backend)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except WisefuseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
