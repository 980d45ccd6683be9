"""Two-scale patch grids over slide rasters.

A slide is tiled twice: a fine grid at full resolution and a coarse grid on
the box-mean downsampled image, with patches kept only where enough stained
tissue (dark pixels under the slide's Otsu threshold) is present. Each kept
coarse patch maps to the kept fine patches inside its footprint.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateHistogram, OutOfBounds, SlideTooSmall
from .raster import SlideRaster, grayscale

DEFAULT_PATCH_SIZE = 256
DEFAULT_SCALE_FACTOR = 4
DEFAULT_TISSUE_MIN = 0.5


@dataclass(frozen=True)
class PatchCoord:
    slide_id: str
    scale: str  # "coarse" or "fine"
    row: int
    col: int
    tissue_fraction: float

    @property
    def patch_id(self) -> str:
        return f"{self.slide_id}:{self.scale}:{self.row}:{self.col}"


@dataclass
class PatchGrid:
    slide_id: str
    patch_size: int
    scale_factor: int
    coarse: list[PatchCoord]
    fine: list[PatchCoord]
    # keyed by (row, col) of the coarse patch; values are fine (row, col) pairs
    children: dict[tuple[int, int], list[tuple[int, int]]] = field(default_factory=dict)

    def children_of(self, coarse_coord: PatchCoord) -> list[tuple[int, int]]:
        return self.children.get((coarse_coord.row, coarse_coord.col), [])

    def coarse_ids(self) -> list[str]:
        return [p.patch_id for p in self.coarse]

    def fine_ids(self) -> list[str]:
        return [p.patch_id for p in self.fine]

    def child_ids(self, row: int, col: int) -> list[str]:
        return [
            f"{self.slide_id}:fine:{r}:{c}" for r, c in self.children.get((row, col), [])
        ]


def otsu_threshold(histogram) -> int:
    """Threshold index t splitting bins into {0..t} and {t+1..255}.

    Maximizes between-class variance; ties resolve to the smallest t.
    Raises DegenerateHistogram when fewer than two bins are occupied.
    """
    counts = np.asarray(histogram, dtype=np.float64)
    if counts.shape != (256,):
        raise ValueError(f"expected a 256-bin histogram, got shape {counts.shape}")
    if np.count_nonzero(counts) < 2:
        raise DegenerateHistogram("need at least two occupied bins")

    levels = np.arange(256, dtype=np.float64)
    total = counts.sum()
    w0 = np.cumsum(counts)                      # mass of {0..t}
    m0 = np.cumsum(counts * levels)             # first moment of {0..t}
    w1 = total - w0
    m1 = m0[-1] - m0
    # between-class variance for t = 0..254; empty side contributes zero
    w0t, w1t, m0t, m1t = w0[:-1], w1[:-1], m0[:-1], m1[:-1]
    valid = (w0t > 0) & (w1t > 0)
    mu0 = np.divide(m0t, w0t, out=np.zeros(255), where=valid)
    mu1 = np.divide(m1t, w1t, out=np.zeros(255), where=valid)
    var_between = np.where(valid, w0t * w1t * (mu0 - mu1) ** 2, 0.0)
    return int(np.argmax(var_between))  # argmax takes the first (smallest) maximizer


def _box_mean(image: np.ndarray, factor: int) -> np.ndarray:
    """Mean over non-overlapping factor x factor blocks; trailing remainder dropped."""
    h, w = image.shape[:2]
    hh, ww = h // factor, w // factor
    trimmed = image[: hh * factor, : ww * factor].astype(np.float64)
    if image.ndim == 2:
        return trimmed.reshape(hh, factor, ww, factor).mean(axis=(1, 3))
    return trimmed.reshape(hh, factor, ww, factor, image.shape[2]).mean(axis=(1, 3))


def _round_u8(values: np.ndarray) -> np.ndarray:
    return np.floor(values + 0.5).astype(np.uint8)


def grid_dims(slide: SlideRaster, patch_size: int, scale_factor: int) -> tuple[int, int, int, int]:
    """(coarse_rows, coarse_cols, fine_rows, fine_cols) for a slide.

    Partial edge tiles are discarded, and the fine grid is clipped to the
    area covered by coarse tiles so every fine patch has a parent.
    """
    rows_c = (slide.height // scale_factor) // patch_size
    cols_c = (slide.width // scale_factor) // patch_size
    rows_f = min(slide.height // patch_size, rows_c * scale_factor)
    cols_f = min(slide.width // patch_size, cols_c * scale_factor)
    return rows_c, cols_c, rows_f, cols_f


def _tissue_threshold(gray: np.ndarray) -> int | None:
    """Otsu threshold of the grayscale slide, or None for single-level slides.

    A constant slide gives Otsu nothing to separate; it is treated as all
    tissue rather than failing the whole tiling step.
    """
    hist = np.bincount(gray.ravel(), minlength=256)
    try:
        return otsu_threshold(hist)
    except DegenerateHistogram:
        return None


def _fractions(gray: np.ndarray, threshold: int | None, patch_size: int,
               rows: int, cols: int) -> np.ndarray:
    """Per-cell fraction of pixels at or below the threshold (tissue is dark)."""
    if threshold is None:
        return np.ones((rows, cols))
    area = gray[: rows * patch_size, : cols * patch_size]
    dark = (area <= threshold).astype(np.float64)
    return dark.reshape(rows, patch_size, cols, patch_size).mean(axis=(1, 3))


def tile_slide(slide: SlideRaster, patch_size: int = DEFAULT_PATCH_SIZE,
               scale_factor: int = DEFAULT_SCALE_FACTOR,
               tissue_min: float = DEFAULT_TISSUE_MIN) -> PatchGrid:
    """Build the aligned coarse and fine grids for one slide.

    A patch survives iff its tissue fraction is >= tissue_min; children of a
    kept coarse patch are the surviving fine patches inside its footprint.
    """
    if not 0.0 <= tissue_min <= 1.0:
        raise ValueError(f"tissue_min must be in [0, 1], got {tissue_min}")
    if scale_factor < 1 or patch_size < 1:
        raise ValueError("patch_size and scale_factor must be positive")

    rows_c, cols_c, rows_f, cols_f = grid_dims(slide, patch_size, scale_factor)
    if rows_c == 0 or cols_c == 0:
        raise SlideTooSmall(
            f"{slide.slide_id}: {slide.width}x{slide.height} cannot hold a "
            f"{patch_size}px patch at 1/{scale_factor} scale"
        )

    gray = grayscale(slide)
    threshold = _tissue_threshold(gray)

    # both fractions count full-resolution pixels under the threshold; a
    # coarse patch's footprint spans patch_size * scale_factor of them
    frac_f = _fractions(gray, threshold, patch_size, rows_f, cols_f)
    frac_c = _fractions(gray, threshold, patch_size * scale_factor, rows_c, cols_c)

    fine_kept: dict[tuple[int, int], PatchCoord] = {}
    for r in range(rows_f):
        for c in range(cols_f):
            if frac_f[r, c] >= tissue_min:
                fine_kept[(r, c)] = PatchCoord(slide.slide_id, "fine", r, c, float(frac_f[r, c]))

    coarse: list[PatchCoord] = []
    children: dict[tuple[int, int], list[tuple[int, int]]] = {}
    for r in range(rows_c):
        for c in range(cols_c):
            if frac_c[r, c] < tissue_min:
                continue
            kids = [
                (fr, fc)
                for fr in range(r * scale_factor, min((r + 1) * scale_factor, rows_f))
                for fc in range(c * scale_factor, min((c + 1) * scale_factor, cols_f))
                if (fr, fc) in fine_kept
            ]
            coord = PatchCoord(slide.slide_id, "coarse", r, c, float(frac_c[r, c]))
            coarse.append(coord)
            children[(r, c)] = kids

    # fine patches only count when their parent survived
    covered = {kid for kids in children.values() for kid in kids}
    fine = [fine_kept[key] for key in sorted(covered)]
    return PatchGrid(slide.slide_id, patch_size, scale_factor, coarse, fine, children)


def extract_patch(slide: SlideRaster, coord: PatchCoord, patch_size: int,
                  scale_factor: int) -> np.ndarray:
    """Cut one patch tile: a direct crop (fine) or a box-mean reduction (coarse)."""
    rows_c, cols_c, rows_f, cols_f = grid_dims(slide, patch_size, scale_factor)
    if coord.scale == "fine":
        if not (0 <= coord.row < rows_f and 0 <= coord.col < cols_f):
            raise OutOfBounds(f"fine ({coord.row},{coord.col}) outside {rows_f}x{cols_f}")
        r0, c0 = coord.row * patch_size, coord.col * patch_size
        return slide.data[r0: r0 + patch_size, c0: c0 + patch_size].copy()
    if coord.scale == "coarse":
        if not (0 <= coord.row < rows_c and 0 <= coord.col < cols_c):
            raise OutOfBounds(f"coarse ({coord.row},{coord.col}) outside {rows_c}x{cols_c}")
        span = patch_size * scale_factor
        r0, c0 = coord.row * span, coord.col * span
        region = slide.data[r0: r0 + span, c0: c0 + span]
        return _round_u8(_box_mean(region, scale_factor))
    raise ValueError(f"unknown scale {coord.scale!r}")


# -- manifest (de)serialization ---------------------------------------------

def grid_to_manifest(grid: PatchGrid) -> dict:
    return {
        "slide_id": grid.slide_id,
        "patch_size": grid.patch_size,
        "scale_factor": grid.scale_factor,
        "coarse": [
            {"row": p.row, "col": p.col, "tissue_fraction": p.tissue_fraction}
            for p in grid.coarse
        ],
        "fine": [
            {"row": p.row, "col": p.col, "tissue_fraction": p.tissue_fraction}
            for p in grid.fine
        ],
        "children": {
            f"{r}_{c}": [[fr, fc] for fr, fc in kids]
            for (r, c), kids in grid.children.items()
        },
    }


def grid_from_manifest(doc: dict) -> PatchGrid:
    sid = doc["slide_id"]
    coarse = [
        PatchCoord(sid, "coarse", p["row"], p["col"], p["tissue_fraction"])
        for p in doc["coarse"]
    ]
    fine = [
        PatchCoord(sid, "fine", p["row"], p["col"], p["tissue_fraction"])
        for p in doc["fine"]
    ]
    children = {}
    for key, kids in doc["children"].items():
        r, c = key.split("_")
        children[(int(r), int(c))] = [(fr, fc) for fr, fc in kids]
    return PatchGrid(sid, doc["patch_size"], doc["scale_factor"], coarse, fine, children)


def write_grid(grid: PatchGrid, path) -> None:
    Path(path).write_text(json.dumps(grid_to_manifest(grid), sort_keys=True, indent=1))


def read_grid(path) -> PatchGrid:
    return grid_from_manifest(json.loads(Path(path).read_text()))
