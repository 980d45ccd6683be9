import json
from pathlib import Path

import numpy as np
import pytest

from wisefuse.cli import main
from wisefuse.distill import TrainConfig
from wisefuse.errors import ConfigError, UnknownBaseline
from wisefuse.evalkit import WorldParams, generate_world, save_world
from wisefuse.pipeline import (
    PipelineConfig,
    ProviderConfig,
    bench,
    config_from_dict,
    reduction_factor,
    run_pipeline,
)
from wisefuse.store import read_store


@pytest.fixture(scope="module")
def small_world_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("world")
    world = generate_world(WorldParams(grid_rows=4, grid_cols=4, scale_factor=2,
                                       dim=12, seed=17))
    save_world(world, root)
    return root


def world_config(world_dir, out_dir, epochs=3, **kw):
    return PipelineConfig(
        out_dir=str(out_dir), world_dir=str(world_dir),
        distill=TrainConfig(epochs=epochs, prompts=6, seed=17),
        **kw,
    )


class TestConfig:
    def test_requires_exactly_one_input(self, tmp_path):
        with pytest.raises(ConfigError):
            PipelineConfig(out_dir=str(tmp_path)).validate()
        with pytest.raises(ConfigError):
            PipelineConfig(out_dir=str(tmp_path), world_dir=".",
                           slides_dir=".").validate()

    def test_ratio_bounds(self, small_world_dir, tmp_path):
        config = world_config(small_world_dir, tmp_path, ratio=0.0)
        with pytest.raises(ConfigError):
            config.validate()

    def test_missing_path(self, tmp_path):
        with pytest.raises(ConfigError):
            PipelineConfig(out_dir=str(tmp_path),
                           world_dir=str(tmp_path / "nope")).validate()

    def test_env_overrides_provider(self, small_world_dir, tmp_path, monkeypatch):
        monkeypatch.setenv("WISEFUSE_ENCODER_URL", "http://example:9")
        config = config_from_dict({"out_dir": str(tmp_path),
                                   "world_dir": str(small_world_dir)})
        assert config.provider.type == "remote"
        assert config.provider.url == "http://example:9"

    def test_unknown_keys_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            config_from_dict({"out_dir": str(tmp_path), "bogus": 1})


class TestRunPipeline:
    def test_ledger_conservation_and_no_leak(self, small_world_dir, tmp_path):
        config = world_config(small_world_dir, tmp_path / "out")
        result = run_pipeline(config)
        ledger = result.ledger

        # conservation: every stage's calls sum to the gateway total
        doc = json.loads((result.out_dir / "ledger.json").read_text())
        assert doc["total_encoder_calls"] == ledger.total_calls()
        assert ledger.total_calls() == ledger.calls("encode_low") \
            + ledger.calls("encode_high_selected")

        # no-leak: exactly the selected fine ids were submitted
        expected = []
        for sid in sorted(result.selections):
            expected.extend(result.selections[sid].selected_fine_ids)
        amount = ledger.calls("encode_high_selected")
        assert amount == len(expected)
        high_store = read_store(result.out_dir / "stores" / "high_selected.wfeb")
        assert high_store.ids == expected

    def test_distill_disabled_keeps_raw_embeddings(self, small_world_dir, tmp_path):
        config = world_config(small_world_dir, tmp_path / "out", epochs=0)
        result = run_pipeline(config)
        raw = read_store(result.out_dir / "stores" / "low_raw.wfeb")
        distilled = read_store(result.out_dir / "stores" / "low_distilled.wfeb")
        assert raw.ids == distilled.ids
        for record_id in raw.ids:
            assert np.array_equal(raw.get(record_id), distilled.get(record_id))

    def test_deterministic_artifacts_modulo_wall_ms(self, small_world_dir, tmp_path):
        config_a = world_config(small_world_dir, tmp_path / "a")
        config_b = world_config(small_world_dir, tmp_path / "b")
        result_a = run_pipeline(config_a)
        result_b = run_pipeline(config_b)

        files_a = sorted(p.relative_to(result_a.out_dir)
                         for p in result_a.out_dir.rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(result_b.out_dir)
                         for p in result_b.out_dir.rglob("*") if p.is_file())
        assert files_a == files_b
        for rel in files_a:
            a_bytes = (result_a.out_dir / rel).read_bytes()
            b_bytes = (result_b.out_dir / rel).read_bytes()
            if rel.name == "ledger.json":
                a_doc = json.loads(a_bytes)
                b_doc = json.loads(b_bytes)
                for stage in a_doc["stages"] + b_doc["stages"]:
                    stage["wall_ms"] = 0.0
                assert a_doc == b_doc
            else:
                assert a_bytes == b_bytes, rel

    def test_rep_slides_cover_all_when_n_exceeds_class_size(self, small_world_dir,
                                                            tmp_path):
        config = world_config(small_world_dir, tmp_path / "out")
        result = run_pipeline(config)
        assert len(result.rep_slides) == 8  # n=5 > 4 slides per class


class TestRasterMode:
    def make_slides(self, tmp_path, rng):
        from wisefuse.raster import write_raster

        slides_dir = tmp_path / "slides"
        slides_dir.mkdir()
        for name in ("s1", "s2"):
            data = rng.integers(10, 60, size=(512, 512)).astype(np.uint8)
            data[0, 0] = 255
            write_raster(slides_dir / f"{name}.pgm", data)
        return slides_dir

    def test_raster_pipeline_with_synthetic_provider(self, tmp_path, rng):
        from importlib import resources

        slides_dir = self.make_slides(tmp_path, rng)
        prompts = resources.files("wisefuse").joinpath(
            "data/prompts/brca_subtyping.json")
        with resources.as_file(prompts) as prompts_path:
            config = PipelineConfig(
                out_dir=str(tmp_path / "out"),
                slides_dir=str(slides_dir),
                prompts_path=str(prompts_path),
                provider=ProviderConfig(type="synthetic", dim=16, seed=1),
                distill=TrainConfig(epochs=0, prompts=4),
                ratio=0.5,
            )
            config.tiling.patch_size = 64
            config.tiling.scale_factor = 2
            result = run_pipeline(config)
        assert result.ledger.calls("encode_low") == result.n_low
        assert result.ledger.calls("prompts") > 0
        assert (result.out_dir / "grids" / "s1.json").exists()
        assert result.fused


class TestBench:
    def test_unknown_baseline(self, small_world_dir, tmp_path):
        config = world_config(small_world_dir, tmp_path / "out")
        with pytest.raises(UnknownBaseline):
            bench(config, "sorted_by_vibes")

    def test_all_high_metrics(self, small_world_dir, tmp_path):
        config = world_config(small_world_dir, tmp_path / "out")
        metrics = bench(config, "all_high", seed=3)
        assert metrics["patch_encode_calls"] == metrics["n_high"]
        assert metrics["mean_planted_recall"] == 1.0

    def test_wisefuse_metrics_schema_round_trips(self, small_world_dir, tmp_path):
        config = world_config(small_world_dir, tmp_path / "out")
        metrics = bench(config, "wisefuse", seed=3)
        parsed = json.loads(json.dumps(metrics))
        assert parsed == metrics
        assert 0.0 <= metrics["accuracy"] <= 1.0
        assert metrics["patch_encode_calls"] < metrics["n_high"]

    def test_random_k_uses_same_budget(self, small_world_dir, tmp_path):
        config = world_config(small_world_dir, tmp_path / "out")
        wise = bench(config, "wisefuse", seed=3)
        config2 = world_config(small_world_dir, tmp_path / "out2")
        rand = bench(config2, "random_k", seed=3)
        # same number of high-res patches encoded per policy
        assert rand["patch_encode_calls"] == wise["patch_encode_calls"] \
            - wise["n_low"]


class TestCli:
    def test_synth_run_bench_flow(self, tmp_path, capsys):
        world_dir = tmp_path / "w"
        assert main(["synth", "--out", str(world_dir), "--grid-rows", "4",
                     "--grid-cols", "4", "--scale-factor", "2", "--dim", "12",
                     "--seed", "17"]) == 0
        config_path = tmp_path / "config.json"
        config_path.write_text(json.dumps({
            "out_dir": str(tmp_path / "out"),
            "world_dir": str(world_dir),
            "distill": {"epochs": 2, "prompts": 4, "seed": 17},
        }))
        assert main(["run", "--config", str(config_path)]) == 0
        out = capsys.readouterr().out
        assert "patch-encode calls" in out
        metrics_path = tmp_path / "metrics.json"
        assert main(["bench", "--config", str(config_path), "--baseline",
                     "wisefuse", "--metrics", str(metrics_path),
                     "--out", str(tmp_path / "out2")]) == 0
        metrics = json.loads(metrics_path.read_text())
        assert metrics["policy"] == "wisefuse"

    def test_config_error_exit_code(self, tmp_path):
        config_path = tmp_path / "config.json"
        config_path.write_text(json.dumps({"out_dir": str(tmp_path / "o")}))
        assert main(["run", "--config", str(config_path)]) == 2

    def test_backend_command(self, capsys):
        assert main(["backend"]) == 0
        assert "backend" in capsys.readouterr().out

    def test_staged_cli_matches_run(self, tmp_path, rng):
        # tile -> encode -> prompts -> distill(identity) -> select -> fuse
        from wisefuse.raster import write_raster

        slides_dir = tmp_path / "slides"
        slides_dir.mkdir()
        data = rng.integers(10, 60, size=(512, 512)).astype(np.uint8)
        data[0, 0] = 255
        write_raster(slides_dir / "demo.pgm", data)

        grids = tmp_path / "grids"
        assert main(["tile", "--slides", str(slides_dir), "--out", str(grids),
                     "--patch-size", "64", "--scale-factor", "2"]) == 0
        assert main(["encode", "--slides", str(slides_dir), "--grids", str(grids),
                     "--scale", "coarse", "--out", str(tmp_path / "low.wfeb"),
                     "--dim", "16", "--seed", "1"]) == 0
        assert main(["encode", "--slides", str(slides_dir), "--grids", str(grids),
                     "--scale", "fine", "--out", str(tmp_path / "high.wfeb"),
                     "--dim", "16", "--seed", "1"]) == 0
        from importlib import resources
        prompts = resources.files("wisefuse").joinpath(
            "data/prompts/brca_subtyping.json")
        with resources.as_file(prompts) as prompts_path:
            assert main(["prompts", "--specs", str(prompts_path), "--out",
                         str(tmp_path / "text.wfeb"), "--dim", "16",
                         "--seed", "1"]) == 0
        assert main(["distill", "--grids", str(grids), "--low",
                     str(tmp_path / "low.wfeb"), "--high",
                     str(tmp_path / "high.wfeb"), "--out",
                     str(tmp_path / "ck.wfeb"), "--epochs", "2",
                     "--prompts", "4", "--seed", "3"]) == 0
        # apply the checkpoint then select and fuse on persisted artifacts
        from wisefuse.distill import distill_store, load_checkpoint
        from wisefuse.store import read_store, write_store

        head, _ = load_checkpoint(tmp_path / "ck.wfeb")
        distilled = distill_store(head, read_store(tmp_path / "low.wfeb"))
        write_store(distilled, tmp_path / "low_distilled.wfeb")
        assert main(["select", "--low-distilled",
                     str(tmp_path / "low_distilled.wfeb"), "--text",
                     str(tmp_path / "text.wfeb"), "--grids", str(grids),
                     "--ratio", "0.5", "--out", str(tmp_path / "sel")]) == 0
        assert main(["fuse", "--selection", str(tmp_path / "sel" / "selection"),
                     "--grids", str(grids), "--low-distilled",
                     str(tmp_path / "low_distilled.wfeb"), "--text",
                     str(tmp_path / "text.wfeb"), "--high",
                     str(tmp_path / "high.wfeb"), "--out",
                     str(tmp_path / "fused")]) == 0
        fused = read_store(tmp_path / "fused" / "demo.wfeb")
        assert fused.dim == 32


def test_reduction_factor_helper():
    from wisefuse.pipeline import RuntimeLedger

    ledger = RuntimeLedger()
    ledger.add("encode_low", 1.0, 100)
    ledger.add("encode_high_selected", 1.0, 160)
    assert abs(reduction_factor(ledger, 1600) - 1600 / 260) < 1e-12
