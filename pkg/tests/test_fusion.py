import json

import numpy as np
import pytest

from wisefuse.errors import MissingEmbedding, UnknownParent
from wisefuse.evalkit import WorldParams, generate_world
from wisefuse.fusion import fuse, weighted_text_vector, write_fused
from wisefuse.prompts import ClassTextEmbedding, text_embeddings_from_store
from wisefuse.selection import select_topk, similarity_matrix
from wisefuse.store import EmbeddingStore, read_store


def text_of(vectors):
    return [
        ClassTextEmbedding(f"c{i}", np.asarray(v, float), np.asarray(v, float),
                           np.asarray(v, float))
        for i, v in enumerate(vectors)
    ]


class TestWeightedTextVector:
    def test_direct_arithmetic(self):
        out = weighted_text_vector([0.5, 0.5], text_of([[1.0, 0.0], [0.0, 1.0]]))
        np.testing.assert_allclose(out, [0.5, 0.5])

    def test_one_hot_weights(self):
        out = weighted_text_vector([1.0, 0.0], text_of([[0.2, 0.8], [0.5, 0.5]]))
        np.testing.assert_allclose(out, [0.2, 0.8])

    def test_zero_weights_annihilate(self):
        out = weighted_text_vector([0.0, 0.0], text_of([[1.0, 2.0], [3.0, 4.0]]))
        assert not np.any(out)

    def test_linearity_in_the_row(self, rng):
        text = text_of(rng.normal(size=(3, 5)))
        row = rng.normal(size=3)
        np.testing.assert_allclose(weighted_text_vector(2.5 * row, text),
                                   2.5 * weighted_text_vector(row, text),
                                   atol=1e-12)

    def test_negative_weights_pass_through(self):
        out = weighted_text_vector([-1.0], text_of([[2.0, 0.0]]))
        np.testing.assert_allclose(out, [-2.0, 0.0])


@pytest.fixture()
def fused_setup():
    world = generate_world(WorldParams(grid_rows=3, grid_cols=3,
                                       scale_factor=2, dim=8, seed=13))
    sid = world.slide_ids[0]
    grid = world.grids[sid]
    text = text_embeddings_from_store(world.text)
    sim = similarity_matrix(world.low_raw.subset(grid.coarse_ids()), text, sid)
    selection = select_topk(sim, 0.25, grid)  # k=2 parents, 4 children each
    fused = fuse(selection, sim, world.high, text)
    return world, sid, grid, sim, selection, text, fused


class TestFuse:
    def test_output_dimension_is_sum(self, fused_setup):
        world, *_, fused = fused_setup
        assert fused.dim == world.high.dim + world.text.dim

    def test_record_count_is_children_of_selected(self, fused_setup):
        *_, selection, text, fused = fused_setup
        assert len(fused) == len(selection.selected_fine_ids) == 8
        assert fused.ids == selection.selected_fine_ids

    def test_segments_recover_inputs_bit_exactly(self, fused_setup):
        world, sid, grid, sim, selection, text, fused = fused_setup
        d = world.high.dim
        row_of = {p: i for i, p in enumerate(sim.patch_ids)}
        for parent in selection.selected_coarse_ids:
            segment = weighted_text_vector(sim.scores[row_of[parent]], text)
            segment32 = segment.astype(np.float32)
            for fine_id in selection.children[parent]:
                vec = fused.get(fine_id)
                assert np.array_equal(vec[:d], world.high.get(fine_id))
                assert np.array_equal(vec[d:], segment32)

    def test_children_share_text_segment(self, fused_setup):
        world, sid, grid, sim, selection, text, fused = fused_setup
        d = world.high.dim
        for parent in selection.selected_coarse_ids:
            kids = selection.children[parent]
            segments = {fused.get(k)[d:].tobytes() for k in kids}
            assert len(segments) == 1

    def test_zero_similarity_rows_zero_pad(self, fused_setup):
        world, sid, grid, sim, selection, text, fused = fused_setup
        sim.scores = np.zeros_like(sim.scores)
        refused = fuse(selection, sim, world.high, text)
        d = world.high.dim
        for fine_id in refused.ids:
            vec = refused.get(fine_id)
            assert not np.any(vec[d:])
            assert np.array_equal(vec[:d], world.high.get(fine_id))

    def test_missing_high_embedding(self, fused_setup):
        world, sid, grid, sim, selection, text, _ = fused_setup
        empty = EmbeddingStore(world.high.dim, "high_res")
        with pytest.raises(MissingEmbedding):
            fuse(selection, sim, empty, text)

    def test_unknown_parent(self, fused_setup):
        world, sid, grid, sim, selection, text, _ = fused_setup
        sim.patch_ids = [f"other:{p}" for p in sim.patch_ids]
        with pytest.raises(UnknownParent):
            fuse(selection, sim, world.high, text)

    def test_write_fused_sidecar_records_split(self, fused_setup, tmp_path):
        world, *_, fused = fused_setup
        path = tmp_path / "f.wfeb"
        write_fused(fused, path, world.high.dim, world.text.dim)
        sidecar = json.loads((tmp_path / "f.wfeb.json").read_text())
        assert sidecar["d_visual"] == world.high.dim
        assert sidecar["d_text"] == world.text.dim
        assert sidecar["kind"] == "fused"
        assert read_store(path) == fused
