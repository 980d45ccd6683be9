import numpy as np
import pytest

from wisefuse.errors import DegenerateHistogram, OutOfBounds, SlideTooSmall
from wisefuse.raster import SlideRaster
from wisefuse.tiling import (
    PatchCoord,
    extract_patch,
    grid_from_manifest,
    grid_to_manifest,
    otsu_threshold,
    tile_slide,
)


def brute_force_otsu(hist):
    """Exhaustive scan over all 255 candidate thresholds."""
    hist = np.asarray(hist, dtype=float)
    levels = np.arange(256.0)
    best_t, best_v = 0, -1.0
    for t in range(255):
        w0 = hist[: t + 1].sum()
        w1 = hist[t + 1:].sum()
        if w0 == 0 or w1 == 0:
            v = 0.0
        else:
            mu0 = (hist[: t + 1] * levels[: t + 1]).sum() / w0
            mu1 = (hist[t + 1:] * levels[t + 1:]).sum() / w1
            v = w0 * w1 * (mu0 - mu1) ** 2
        if v > best_v:
            best_t, best_v = t, v
    return best_t


class TestOtsu:
    def test_two_delta_histogram_tie_breaks_low(self):
        hist = np.zeros(256, dtype=int)
        hist[10] = 40
        hist[200] = 60
        assert otsu_threshold(hist) == 10

    def test_single_bin_degenerate(self):
        hist = np.zeros(256, dtype=int)
        hist[50] = 100
        with pytest.raises(DegenerateHistogram):
            otsu_threshold(hist)

    def test_matches_brute_force_on_random_histograms(self, rng):
        for _ in range(200):
            hist = rng.integers(0, 50, size=256)
            if np.count_nonzero(hist) < 2:
                continue
            assert otsu_threshold(hist) == brute_force_otsu(hist)


def make_slide(data: np.ndarray, slide_id="s") -> SlideRaster:
    h, w = data.shape[:2]
    channels = 1 if data.ndim == 2 else 3
    return SlideRaster(slide_id, w, h, channels, data)


def tissue_slide(rng, h, w):
    """Bimodal slide, ~85% dark tissue with scattered bright background."""
    dark = rng.integers(10, 40, size=(h, w))
    bright = rng.integers(200, 230, size=(h, w))
    data = np.where(rng.random(size=(h, w)) < 0.85, dark, bright).astype(np.uint8)
    return make_slide(data)


class TestTileSlide:
    def test_divisible_geometry(self, rng):
        slide = tissue_slide(rng, 2048, 2048)
        grid = tile_slide(slide, patch_size=256, scale_factor=4, tissue_min=0.5)
        assert len(grid.coarse) == 4
        assert len(grid.fine) == 64
        assert all(len(kids) == 16 for kids in grid.children.values())

    def test_background_half_dropped(self, rng):
        data = rng.integers(10, 60, size=(1024, 512)).astype(np.uint8)
        data[:512] = 255  # top half pure background
        grid = tile_slide(make_slide(data), patch_size=64, scale_factor=2,
                          tissue_min=0.5)
        top_coarse = [p for p in grid.coarse if p.row < 4]
        assert top_coarse == []
        # top half spans fine rows 0..7
        assert all(p.row >= 8 for p in grid.fine)

    def test_tissue_min_zero_keeps_everything(self, rng):
        slide = tissue_slide(rng, 512, 512)
        grid = tile_slide(slide, patch_size=64, scale_factor=2, tissue_min=0.0)
        assert len(grid.fine) == 4 * len(grid.coarse)

    def test_constant_slide_counts_as_tissue(self):
        data = np.full((256, 256), 40, dtype=np.uint8)
        grid = tile_slide(make_slide(data), patch_size=64, scale_factor=2,
                          tissue_min=0.5)
        assert len(grid.coarse) == 4 and len(grid.fine) == 16

    def test_too_small_slide(self, rng):
        slide = tissue_slide(rng, 128, 128)
        with pytest.raises(SlideTooSmall):
            tile_slide(slide, patch_size=256, scale_factor=4, tissue_min=0.5)

    def test_every_fine_patch_has_exactly_one_parent(self, rng):
        data = rng.integers(0, 256, size=(900, 700)).astype(np.uint8)
        grid = tile_slide(make_slide(data), patch_size=64, scale_factor=2,
                          tissue_min=0.3)
        seen = {}
        for (r, c), kids in grid.children.items():
            for kid in kids:
                assert kid not in seen, "fine patch with two parents"
                seen[kid] = (r, c)
                # geometric containment
                assert r * 2 <= kid[0] < (r + 1) * 2
                assert c * 2 <= kid[1] < (c + 1) * 2
        assert set(seen) == {(p.row, p.col) for p in grid.fine}

    def test_monotone_in_tissue_min(self, rng):
        data = rng.integers(0, 256, size=(768, 768)).astype(np.uint8)
        slide = make_slide(data)
        sizes = []
        for tissue_min in (0.0, 0.3, 0.6, 0.9):
            grid = tile_slide(slide, patch_size=64, scale_factor=2,
                              tissue_min=tissue_min)
            sizes.append((len(grid.coarse), len(grid.fine)))
        assert sizes == sorted(sizes, reverse=True)

    def test_deterministic(self, rng):
        data = rng.integers(0, 256, size=(512, 512)).astype(np.uint8)
        a = tile_slide(make_slide(data), 64, 2, 0.5)
        b = tile_slide(make_slide(data.copy()), 64, 2, 0.5)
        assert grid_to_manifest(a) == grid_to_manifest(b)

    def test_manifest_round_trip(self, rng):
        slide = tissue_slide(rng, 512, 512)
        grid = tile_slide(slide, 64, 2, 0.5)
        assert grid_to_manifest(grid_from_manifest(grid_to_manifest(grid))) \
            == grid_to_manifest(grid)


class TestExtractPatch:
    def test_fine_constant_tile(self):
        data = np.full((256, 256), 77, dtype=np.uint8)
        slide = make_slide(data)
        tile = extract_patch(slide, PatchCoord("s", "fine", 0, 0, 1.0), 64, 2)
        assert tile.shape == (64, 64)
        assert np.all(tile == 77)

    def test_coarse_is_box_mean(self, rng):
        data = rng.integers(0, 256, size=(1024, 1024)).astype(np.uint8)
        slide = make_slide(data)
        tile = extract_patch(slide, PatchCoord("s", "coarse", 0, 0, 1.0), 256, 4)
        # direct pixelwise averaging oracle with the documented rounding
        for r, c in [(0, 0), (13, 200), (255, 255)]:
            block = data[r * 4:(r + 1) * 4, c * 4:(c + 1) * 4].astype(float)
            assert tile[r, c] == np.floor(block.mean() + 0.5)

    def test_out_of_bounds(self, rng):
        slide = tissue_slide(rng, 256, 256)
        with pytest.raises(OutOfBounds):
            extract_patch(slide, PatchCoord("s", "fine", 4, 0, 1.0), 64, 2)
        with pytest.raises(OutOfBounds):
            extract_patch(slide, PatchCoord("s", "coarse", 0, 2, 1.0), 64, 2)
