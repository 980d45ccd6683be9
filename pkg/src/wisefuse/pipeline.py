"""End-to-end pipeline: tile, encode coarse, distill, score, select, encode
only the chosen fine patches, and fuse.

Every stage is timed and its encoder traffic recorded in a runtime ledger;
the patch-encode counters (encode_low + encode_high_selected) are the
hardware-independent cost of the run. Distillation consumes precomputed
high-resolution embeddings (from a synthetic world or a store built with
the standalone `encode` subcommand), so fine patches outside the selection
are never submitted to the encoder.
"""

from __future__ import annotations

import json
import os
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .distill import (
    TrainConfig,
    assemble_triplets,
    distill_store,
    init_head,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .encoder import (
    EncodeRequest,
    EncoderGateway,
    LookupProvider,
    RemoteProvider,
    SyntheticProvider,
)
from .errors import ConfigError, StageError, UnknownBaseline
from .evalkit import (
    BagTrainConfig,
    SyntheticWorld,
    leave_one_out_accuracy,
    load_world,
    recall_at_k,
)
from .fusion import fuse, write_fused
from .prompts import build_text_store, read_prompt_specs, text_embeddings_from_store
from .raster import raster_bytes, read_raster
from .reports import ClassReportSet, representative_slides, write_representatives
from .selection import (
    SelectionResult,
    export_heatmap,
    select_topk,
    similarity_matrix,
    write_selection,
)
from .store import EmbeddingStore, read_store, write_store
from .tiling import extract_patch, tile_slide, write_grid

ENCODER_URL_ENV = "WISEFUSE_ENCODER_URL"


# -- configuration -------------------------------------------------------------

@dataclass
class ProviderConfig:
    type: str = "synthetic"   # synthetic | lookup | remote
    dim: int = 32
    seed: int = 0
    url: str | None = None
    batch_max: int = 64


@dataclass
class TilingConfig:
    patch_size: int = 256
    scale_factor: int = 4
    tissue_min: float = 0.5


@dataclass
class PipelineConfig:
    out_dir: str
    world_dir: str | None = None
    slides_dir: str | None = None
    prompts_path: str | None = None
    reports_dir: str | None = None
    high_store: str | None = None   # precomputed fine embeddings for distillation
    provider: ProviderConfig = field(default_factory=ProviderConfig)
    tiling: TilingConfig = field(default_factory=TilingConfig)
    distill: TrainConfig = field(default_factory=TrainConfig)
    ratio: float = 0.1
    representatives_n: int = 5
    use_representatives: bool = True

    def validate(self) -> None:
        if not 0.0 < self.ratio <= 1.0:
            raise ConfigError(f"selection ratio must be in (0, 1], got {self.ratio}")
        if (self.world_dir is None) == (self.slides_dir is None):
            raise ConfigError("exactly one of world_dir / slides_dir is required")
        for label, path in (("world_dir", self.world_dir),
                            ("slides_dir", self.slides_dir),
                            ("prompts_path", self.prompts_path),
                            ("reports_dir", self.reports_dir),
                            ("high_store", self.high_store)):
            if path is not None and not Path(path).exists():
                raise ConfigError(f"{label} does not exist: {path}")
        if self.slides_dir is not None and self.prompts_path is None:
            raise ConfigError("raster mode needs prompts_path")
        if self.provider.type not in ("synthetic", "lookup", "remote"):
            raise ConfigError(f"unknown provider type {self.provider.type!r}")
        if self.provider.type == "remote" and not self.provider.url:
            raise ConfigError("remote provider needs a url")
        if self.representatives_n < 1:
            raise ConfigError("representatives_n must be >= 1")


def config_from_json(path, overrides: dict | None = None) -> PipelineConfig:
    """Load a config file, apply flat overrides, fill nested defaults."""
    doc = json.loads(Path(path).read_text())
    doc.update(overrides or {})
    return config_from_dict(doc)


def config_from_dict(doc: dict) -> PipelineConfig:
    try:
        provider = ProviderConfig(**doc.pop("provider", {}))
        tiling = TilingConfig(**doc.pop("tiling", {}))
        dist = TrainConfig(**doc.pop("distill", {}))
        config = PipelineConfig(provider=provider, tiling=tiling, distill=dist, **doc)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    url = os.environ.get(ENCODER_URL_ENV)
    if url:
        config.provider.type = "remote"
        config.provider.url = url
    config.validate()
    return config


# -- runtime ledger --------------------------------------------------------------

@dataclass
class StageRecord:
    name: str
    wall_ms: float
    encoder_calls: int


@dataclass
class RuntimeLedger:
    stages: list[StageRecord] = field(default_factory=list)

    def add(self, name: str, wall_ms: float, encoder_calls: int) -> None:
        self.stages.append(StageRecord(name, wall_ms, encoder_calls))

    def calls(self, name: str) -> int:
        return sum(s.encoder_calls for s in self.stages if s.name == name)

    def total_calls(self) -> int:
        return sum(s.encoder_calls for s in self.stages)

    def total_wall_ms(self) -> float:
        return sum(s.wall_ms for s in self.stages)

    def patch_encode_calls(self) -> int:
        return self.calls("encode_low") + self.calls("encode_high_selected")

    def to_json(self) -> dict:
        return {
            "stages": [asdict(s) for s in self.stages],
            "total_encoder_calls": self.total_calls(),
        }

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True, indent=1))


def reduction_factor(ledger: RuntimeLedger, baseline_calls: int) -> float:
    """Measured encoder-call reduction against exhaustive fine encoding."""
    ours = ledger.patch_encode_calls()
    return baseline_calls / ours if ours else float("inf")


@contextmanager
def _stage(ledger: RuntimeLedger, gateway: EncoderGateway, name: str):
    before = gateway.total_calls
    start = time.perf_counter()
    try:
        with gateway.stage(name):
            yield
    except Exception as exc:
        if isinstance(exc, StageError):
            raise
        raise StageError(name, exc) from exc
    ledger.add(name, (time.perf_counter() - start) * 1000.0,
               gateway.total_calls - before)


# -- pipeline --------------------------------------------------------------------

@dataclass
class PipelineResult:
    out_dir: Path
    ledger: RuntimeLedger
    rep_slides: list[str]
    selections: dict[str, SelectionResult]
    fused: dict[str, EmbeddingStore]
    distilled: EmbeddingStore
    n_low: int
    n_high: int


def _build_provider(config: PipelineConfig, world: SyntheticWorld | None):
    if world is not None:
        # world embeddings are precomputed; the gateway serves them by id
        return LookupProvider(world.high, world.low_raw)
    kind = config.provider.type
    if kind == "remote":
        return RemoteProvider(config.provider.url, config.provider.batch_max)
    if kind == "lookup":
        raise ConfigError("lookup provider requires world_dir")
    return SyntheticProvider(config.provider.dim, config.provider.seed)


def run_pipeline(config: PipelineConfig) -> PipelineResult:
    config.validate()
    out = Path(config.out_dir)
    for sub in ("grids", "stores", "selection", "heatmaps", "fused"):
        (out / sub).mkdir(parents=True, exist_ok=True)

    world = load_world(config.world_dir) if config.world_dir else None
    gateway = EncoderGateway(_build_provider(config, world))
    ledger = RuntimeLedger()

    slides: dict[str, object] = {}   # raster mode: slide_id -> SlideRaster
    grids = {}
    coarse_payloads: dict[str, bytes | str] = {}

    # tile_low: obtain grids and the coarse payloads headed to the encoder
    with _stage(ledger, gateway, "tile_low"):
        if world is not None:
            grids = world.grids
            for slide_id in world.slide_ids:
                for coarse_id in grids[slide_id].coarse_ids():
                    coarse_payloads[coarse_id] = coarse_id
        else:
            paths = sorted(
                list(Path(config.slides_dir).glob("*.pgm"))
                + list(Path(config.slides_dir).glob("*.ppm"))
            )
            if not paths:
                raise ConfigError(f"no .pgm/.ppm slides in {config.slides_dir}")
            for path in paths:
                slide = read_raster(path)
                slides[slide.slide_id] = slide
                grid = tile_slide(slide, config.tiling.patch_size,
                                  config.tiling.scale_factor, config.tiling.tissue_min)
                grids[slide.slide_id] = grid
                for coarse in grid.coarse:
                    tile = extract_patch(slide, coarse, config.tiling.patch_size,
                                         config.tiling.scale_factor)
                    coarse_payloads[coarse.patch_id] = raster_bytes(tile)
            for slide_id, grid in grids.items():
                write_grid(grid, out / "grids" / f"{slide_id}.json")

    slide_ids = sorted(grids)

    with _stage(ledger, gateway, "encode_low"):
        low_raw = EmbeddingStore(gateway.info().dim, "low_res_raw")
        for slide_id in slide_ids:
            ids = grids[slide_id].coarse_ids()
            if not ids:
                continue
            batch = gateway.encode_batch(
                EncodeRequest([(i, coarse_payloads[i]) for i in ids], "vision"),
                kind="low_res_raw",
            )
            for record_id in batch.ids:
                low_raw.add(record_id, batch.get(record_id))
        write_store(low_raw, out / "stores" / "low_raw.wfeb")

    # reps: pick training slides from report embeddings when available
    rep_slides = list(slide_ids)
    with _stage(ledger, gateway, "reps"):
        rep_sets = []
        if config.use_representatives and world is not None:
            by_class: dict[str, list[str]] = {}
            for slide_id in world.slide_ids:
                by_class.setdefault(world.class_ids[world.labels[slide_id]], []).append(slide_id)
            chosen = []
            for class_id in sorted(by_class):
                reports = world.reports.subset(by_class[class_id], "report")
                rep = representative_slides(ClassReportSet(class_id, reports),
                                            config.representatives_n)
                rep_sets.append(rep)
                chosen.extend(rep.slide_ids)
            rep_slides = sorted(chosen)
        if rep_sets:
            write_representatives(rep_sets, out / "reps.json")

    # distill_train: needs precomputed fine embeddings; skipped without them
    high_for_distill = None
    if world is not None:
        high_for_distill = world.high
    elif config.high_store:
        high_for_distill = read_store(config.high_store, "high_res")

    with _stage(ledger, gateway, "distill_train"):
        triplets = []
        if high_for_distill is not None:
            for slide_id in rep_slides:
                triplets.extend(assemble_triplets(
                    grids[slide_id], low_raw, high_for_distill,
                    config.distill.negatives_per_triplet, config.distill.seed,
                ))
        if triplets:
            head, trace = train(triplets, config.distill)
        else:
            head, trace = train_identity(low_raw.dim, config.distill)
        save_checkpoint(head, out / "checkpoint.wfeb", config.distill)
        (out / "distill_trace.json").write_text(json.dumps(trace))
        # reload so staged CLI runs and this run use identical (f32) parameters
        head, _ = load_checkpoint(out / "checkpoint.wfeb")

    with _stage(ledger, gateway, "distill_apply"):
        distilled = distill_store(head, low_raw)
        write_store(distilled, out / "stores" / "low_distilled.wfeb")

    with _stage(ledger, gateway, "prompts"):
        if world is not None:
            text_store = world.text
            text_embeddings = text_embeddings_from_store(text_store)
        else:
            specs = read_prompt_specs(config.prompts_path)
            text_embeddings, text_store = build_text_store(specs, gateway)
        write_store(text_store, out / "stores" / "text.wfeb")

    sims = {}
    with _stage(ledger, gateway, "similarity"):
        for slide_id in slide_ids:
            ids = grids[slide_id].coarse_ids()
            if not ids:
                continue
            sims[slide_id] = similarity_matrix(
                distilled.subset(ids), text_embeddings, slide_id
            )

    selections: dict[str, SelectionResult] = {}
    with _stage(ledger, gateway, "select"):
        for slide_id, sim in sims.items():
            result = select_topk(sim, config.ratio, grids[slide_id])
            selections[slide_id] = result
            write_selection(result, out / "selection" / f"{slide_id}.json")
            export_heatmap(sim, grids[slide_id], out / "heatmaps" / slide_id)

    fine_payloads: dict[str, bytes | str] = {}
    with _stage(ledger, gateway, "tile_high"):
        for slide_id, result in selections.items():
            if world is not None:
                for fine_id in result.selected_fine_ids:
                    fine_payloads[fine_id] = fine_id
            else:
                slide = slides[slide_id]
                grid = grids[slide_id]
                fine_by_id = {p.patch_id: p for p in grid.fine}
                for fine_id in result.selected_fine_ids:
                    tile = extract_patch(slide, fine_by_id[fine_id],
                                         config.tiling.patch_size,
                                         config.tiling.scale_factor)
                    fine_payloads[fine_id] = raster_bytes(tile)

    with _stage(ledger, gateway, "encode_high_selected"):
        high_selected = EmbeddingStore(gateway.info().dim, "high_res")
        for slide_id in slide_ids:
            ids = selections[slide_id].selected_fine_ids if slide_id in selections else []
            if not ids:
                continue
            batch = gateway.encode_batch(
                EncodeRequest([(i, fine_payloads[i]) for i in ids], "vision"),
                kind="high_res",
            )
            for record_id in batch.ids:
                high_selected.add(record_id, batch.get(record_id))
        write_store(high_selected, out / "stores" / "high_selected.wfeb")

    fused_stores: dict[str, EmbeddingStore] = {}
    with _stage(ledger, gateway, "fuse"):
        d_text = text_store.dim
        for slide_id in slide_ids:
            if slide_id not in selections:
                continue
            fused_store = fuse(selections[slide_id], sims[slide_id],
                               high_selected, text_embeddings)
            fused_stores[slide_id] = fused_store
            write_fused(fused_store, out / "fused" / f"{slide_id}.wfeb",
                        high_selected.dim, d_text)

    ledger.write(out / "ledger.json")

    n_high = sum(len(g.fine) for g in grids.values())
    assert ledger.total_calls() == gateway.total_calls
    return PipelineResult(
        out_dir=out, ledger=ledger, rep_slides=rep_slides,
        selections=selections, fused=fused_stores, distilled=distilled,
        n_low=len(low_raw), n_high=n_high,
    )


def train_identity(dim: int, config: TrainConfig):
    """Zero-epoch training: the freshly initialized (identity) head."""
    rng = np.random.default_rng(config.seed)
    return init_head(dim, config.prompts, rng), []


# -- benchmark policies -------------------------------------------------------------

BASELINES = ("all_high", "random_k", "wisefuse")


def bench(config: PipelineConfig, baseline: str, seed: int = 0) -> dict:
    """Run one policy on a synthetic world and score it with the bag classifier.

    wisefuse uses the full pipeline and fused features; random_k encodes the
    children of k random coarse patches per slide; all_high encodes every
    fine patch. The two baselines classify on visual features alone, which
    mirrors how random sampling is normally deployed.
    """
    if baseline not in BASELINES:
        raise UnknownBaseline(baseline)
    if config.world_dir is None:
        raise ConfigError("bench requires world_dir")
    world = load_world(config.world_dir)
    bag_config = BagTrainConfig(seed=seed)

    if baseline == "wisefuse":
        result = run_pipeline(config)
        bags = [(sid, store) for sid, store in sorted(result.fused.items())]
        accuracy = leave_one_out_accuracy(bags, world.labels, bag_config)
        recalls = [
            recall_at_k(result.selections[sid], world.truth[sid])
            for sid in sorted(result.selections)
        ]
        ledger = result.ledger
        n_high = result.n_high
        extra = {
            "reduction_factor_vs_all_high": reduction_factor(ledger, n_high),
            "rep_slides": result.rep_slides,
        }
    else:
        gateway = EncoderGateway(LookupProvider(world.high, world.low_raw))
        ledger = RuntimeLedger()
        rng = np.random.default_rng(seed)
        bags = []
        recalls = []
        with _stage(ledger, gateway, "encode_high_selected"):
            for slide_id in sorted(world.grids):
                grid = world.grids[slide_id]
                coarse = grid.coarse
                if baseline == "random_k":
                    n = len(coarse)
                    k = min(n, max(1, int(np.floor(config.ratio * n + 0.5))))
                    picked = [coarse[i] for i in sorted(rng.choice(n, k, replace=False))]
                else:
                    picked = list(coarse)
                fine_ids = []
                children = {}
                for patch in picked:
                    kids = grid.child_ids(patch.row, patch.col)
                    children[patch.patch_id] = kids
                    fine_ids.extend(kids)
                store = gateway.encode_batch(
                    EncodeRequest([(i, i) for i in fine_ids], "vision"),
                    kind="high_res",
                )
                bags.append((slide_id, store))
                selection = SelectionResult(
                    slide_id, len(picked), [p.patch_id for p in picked], [],
                    fine_ids, children,
                )
                recalls.append(recall_at_k(selection, world.truth[slide_id]))
        accuracy = leave_one_out_accuracy(bags, world.labels, bag_config)
        n_high = len(world.high)
        extra = {}

    metrics = {
        "policy": baseline,
        "seed": seed,
        "accuracy": accuracy,
        "mean_planted_recall": float(np.mean(recalls)),
        "encoder_calls": ledger.to_json()["total_encoder_calls"],
        "patch_encode_calls": ledger.patch_encode_calls(),
        "n_low": len(world.low_raw),
        "n_high": n_high,
        "wall_ms": ledger.total_wall_ms(),
    }
    metrics.update(extra)
    return metrics
