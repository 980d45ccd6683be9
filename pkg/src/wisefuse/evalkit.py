"""Synthetic planted-ROI benchmark and desk-scale evaluation helpers.

Worlds are generated with known class-signal patches: children of planted
coarse cells point along their class direction, background children are
noise, and the raw coarse embeddings are attenuated noisy means of their
children, so there is real signal for distillation to recover. A mean-pool
logistic bag classifier compares selection policies on top.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadParams, DegenerateLabels, EmptyTruth
from .selection import SelectionResult
from .store import EmbeddingStore, read_store, write_store
from .tiling import PatchCoord, PatchGrid, read_grid, write_grid


@dataclass
class WorldParams:
    classes: int = 2
    slides_per_class: int = 4
    grid_rows: int = 10
    grid_cols: int = 10
    scale_factor: int = 4          # children per side of a coarse cell
    dim: int = 32
    alpha: float = 1.0             # class signal strength in planted children
    gamma: float = 0.3             # low-res attenuation of the region mean
    sigma: float = 0.2             # embedding noise (norm of each noise draw)
    sigma_text: float = 0.05       # noise on text/report vectors
    # feature-space rotation (radians) applied to the region mean in coarse
    # embeddings: the coarse view sees the same content through a fixed,
    # learnable skew, which is what the distillation head has to undo
    mix_angle: float = 1.35
    planted_fraction: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.alpha <= 0:
            raise BadParams("alpha must be positive")
        if not 0.0 < self.gamma < 1.0:
            raise BadParams("gamma must be in (0, 1)")
        if self.sigma < 0 or self.sigma_text < 0:
            raise BadParams("noise levels must be nonnegative")
        if self.classes < 2:
            raise BadParams("need at least two classes")
        if self.dim < self.classes:
            raise BadParams("dim must be at least the class count")
        if not 0.0 < self.planted_fraction <= 1.0:
            raise BadParams("planted_fraction must be in (0, 1]")
        if min(self.slides_per_class, self.grid_rows, self.grid_cols,
               self.scale_factor) < 1:
            raise BadParams("counts must be positive")


@dataclass
class SyntheticWorld:
    params: WorldParams
    class_ids: list[str]
    class_dirs: np.ndarray            # (C, dim) orthonormal rows
    slide_ids: list[str]
    labels: dict[str, int]            # slide -> class index
    grids: dict[str, PatchGrid]
    high: EmbeddingStore              # all fine embeddings
    low_raw: EmbeddingStore           # all coarse embeddings
    text: EmbeddingStore              # ids "text:{class_id}"
    reports: EmbeddingStore           # one record per slide
    truth: dict[str, list[str]]       # slide -> planted coarse patch ids

    def n_high(self) -> int:
        return len(self.high)

    def n_low(self) -> int:
        return len(self.low_raw)


def _unit(vec: np.ndarray) -> np.ndarray:
    return vec / np.linalg.norm(vec)


def mix_matrix(dim: int, angle: float) -> np.ndarray:
    """Fixed rotation by `angle` in every (2i, 2i+1) coordinate plane.

    Rotates any vector by exactly `angle` (odd trailing dimension passes
    through), giving the coarse view a systematic, invertible skew.
    """
    m = np.eye(dim)
    c, s = np.cos(angle), np.sin(angle)
    for i in range(0, dim - 1, 2):
        m[i, i] = c
        m[i, i + 1] = -s
        m[i + 1, i] = s
        m[i + 1, i + 1] = c
    return m


def _full_grid(slide_id: str, rows: int, cols: int, scale: int) -> PatchGrid:
    coarse = [
        PatchCoord(slide_id, "coarse", r, c, 1.0)
        for r in range(rows) for c in range(cols)
    ]
    fine = [
        PatchCoord(slide_id, "fine", r, c, 1.0)
        for r in range(rows * scale) for c in range(cols * scale)
    ]
    children = {
        (r, c): [
            (fr, fc)
            for fr in range(r * scale, (r + 1) * scale)
            for fc in range(c * scale, (c + 1) * scale)
        ]
        for r in range(rows) for c in range(cols)
    }
    return PatchGrid(slide_id, 256, scale, coarse, fine, children)


def generate_world(params: WorldParams) -> SyntheticWorld:
    """Deterministic world from params.seed; see module docstring for shape.

    Noise draws are random unit directions scaled by sigma, so sigma is the
    perturbation norm at any dimension. Coarse embeddings see the region
    mean through a fixed rotation (mix_angle) and attenuation gamma before
    their own noise is added.
    """
    params.validate()
    rng = np.random.default_rng(params.seed)
    d = params.dim
    n_classes = params.classes

    def noise_dir() -> np.ndarray:
        return _unit(rng.normal(size=d))

    # orthonormal class directions, sign-fixed for reproducibility
    raw = rng.normal(size=(d, n_classes))
    q, r = np.linalg.qr(raw)
    dirs = (q * np.sign(np.diag(r))).T  # (C, d)
    mix = mix_matrix(d, params.mix_angle)

    class_ids = [f"class{c}" for c in range(n_classes)]
    text = EmbeddingStore(d, "text")
    for c, cid in enumerate(class_ids):
        noisy = dirs[c] + params.sigma_text * noise_dir()
        text.add(f"text:{cid}", _unit(noisy).astype(np.float32))

    n_coarse = params.grid_rows * params.grid_cols
    n_planted = int(math.floor(params.planted_fraction * n_coarse + 0.5))
    scale = params.scale_factor

    high = EmbeddingStore(d, "high_res")
    low_raw = EmbeddingStore(d, "low_res_raw")
    reports = EmbeddingStore(d, "report")
    grids: dict[str, PatchGrid] = {}
    labels: dict[str, int] = {}
    truth: dict[str, list[str]] = {}
    slide_ids: list[str] = []

    for c in range(n_classes):
        for s in range(params.slides_per_class):
            slide_id = f"s{c}_{s:02d}"
            slide_ids.append(slide_id)
            labels[slide_id] = c
            grids[slide_id] = _full_grid(slide_id, params.grid_rows,
                                         params.grid_cols, scale)
            reports.add(slide_id,
                        _unit(dirs[c] + params.sigma_text * noise_dir())
                        .astype(np.float32))

            planted = set(rng.choice(n_coarse, size=n_planted, replace=False).tolist())
            truth[slide_id] = [
                f"{slide_id}:coarse:{idx // params.grid_cols}:{idx % params.grid_cols}"
                for idx in sorted(planted)
            ]

            for idx in range(n_coarse):
                row, col = idx // params.grid_cols, idx % params.grid_cols
                children = np.empty((scale * scale, d))
                for j in range(scale * scale):
                    if idx in planted:
                        children[j] = _unit(params.alpha * dirs[c]
                                            + params.sigma * noise_dir())
                    else:
                        # sigma scales out under normalization; sigma=0 still
                        # yields a random unit child by the same draw
                        children[j] = noise_dir()
                    fr = row * scale + j // scale
                    fc = col * scale + j % scale
                    high.add(f"{slide_id}:fine:{fr}:{fc}", children[j].astype(np.float32))
                low_vec = params.gamma * (mix @ children.mean(axis=0)) \
                    + params.sigma * noise_dir()
                low_raw.add(f"{slide_id}:coarse:{row}:{col}",
                            _unit(low_vec).astype(np.float32))

    return SyntheticWorld(
        params=params, class_ids=class_ids, class_dirs=dirs,
        slide_ids=slide_ids, labels=labels, grids=grids,
        high=high, low_raw=low_raw, text=text, reports=reports, truth=truth,
    )


# -- persistence ---------------------------------------------------------------

def save_world(world: SyntheticWorld, out_dir) -> None:
    out = Path(out_dir)
    (out / "grids").mkdir(parents=True, exist_ok=True)
    (out / "stores").mkdir(exist_ok=True)
    doc = {
        "params": asdict(world.params),
        "class_ids": world.class_ids,
        "class_dirs": world.class_dirs.tolist(),
        "slide_ids": world.slide_ids,
        "labels": world.labels,
    }
    (out / "world.json").write_text(json.dumps(doc, sort_keys=True, indent=1))
    (out / "truth.json").write_text(json.dumps(world.truth, sort_keys=True, indent=1))
    for slide_id, grid in world.grids.items():
        write_grid(grid, out / "grids" / f"{slide_id}.json")
    write_store(world.high, out / "stores" / "high.wfeb")
    write_store(world.low_raw, out / "stores" / "low_raw.wfeb")
    write_store(world.text, out / "stores" / "text.wfeb")
    write_store(world.reports, out / "stores" / "reports.wfeb")


def load_world(world_dir) -> SyntheticWorld:
    root = Path(world_dir)
    doc = json.loads((root / "world.json").read_text())
    params = WorldParams(**doc["params"])
    truth = json.loads((root / "truth.json").read_text())
    grids = {
        sid: read_grid(root / "grids" / f"{sid}.json") for sid in doc["slide_ids"]
    }
    return SyntheticWorld(
        params=params,
        class_ids=doc["class_ids"],
        class_dirs=np.asarray(doc["class_dirs"]),
        slide_ids=doc["slide_ids"],
        labels={k: int(v) for k, v in doc["labels"].items()},
        grids=grids,
        high=read_store(root / "stores" / "high.wfeb", "high_res"),
        low_raw=read_store(root / "stores" / "low_raw.wfeb", "low_res_raw"),
        text=read_store(root / "stores" / "text.wfeb", "text"),
        reports=read_store(root / "stores" / "reports.wfeb", "report"),
        truth=truth,
    )


# -- metrics ---------------------------------------------------------------------

def recall_at_k(selection: SelectionResult, truth_ids) -> float:
    """Fraction of planted coarse patches that made it into the selection."""
    truth = set(truth_ids)
    if not truth:
        raise EmptyTruth(selection.slide_id)
    hit = truth.intersection(selection.selected_coarse_ids)
    return len(hit) / len(truth)


def encoder_call_report(n_low: int, n_high: int, ratio: float) -> dict:
    """Projected call counts: encode every coarse patch, then only the
    children of the selected ones; baseline encodes all fine patches."""
    if not (n_high >= n_low >= 1):
        raise ValueError("need n_high >= n_low >= 1")
    selected = int(math.floor(ratio * n_low + 0.5))
    children_per_parent = n_high / n_low
    ours = n_low + selected * children_per_parent
    return {
        "baseline_calls": n_high,
        "wisefuse_calls": ours,
        "reduction_factor": n_high / ours,
    }


# -- mean-pool logistic bag classifier ---------------------------------------------

@dataclass
class BagTrainConfig:
    lr: float = 0.5
    epochs: int = 400
    seed: int = 0


@dataclass
class BagClassifier:
    classes: list[int]
    weights: np.ndarray   # (D, C)
    bias: np.ndarray      # (C,)
    trace: list[float] = field(default_factory=list)


def bag_feature(bag) -> np.ndarray:
    """Mean-pool a store or matrix of instance vectors into one feature."""
    if isinstance(bag, EmbeddingStore):
        return bag.matrix().astype(np.float64).mean(axis=0)
    matrix = np.asarray(bag, dtype=np.float64)
    return matrix.mean(axis=0) if matrix.ndim == 2 else matrix


def _bag_loss_and_grads(weights, bias, features, target_idx):
    logits = features @ weights + bias
    logits -= logits.max(axis=1, keepdims=True)
    exp = np.exp(logits)
    probs = exp / exp.sum(axis=1, keepdims=True)
    n = features.shape[0]
    loss = -np.log(probs[np.arange(n), target_idx]).mean()
    delta = probs.copy()
    delta[np.arange(n), target_idx] -= 1.0
    delta /= n
    return loss, features.T @ delta, delta.sum(axis=0)


def train_bag_classifier(bags, labels, config: BagTrainConfig | None = None) -> BagClassifier:
    """Multinomial logistic regression on mean-pooled bag features.

    `bags` is a sequence of (bag_id, store-or-feature); bags are sorted by id
    so full-batch training is invariant to input order.
    """
    config = config or BagTrainConfig()
    ordered = sorted(bags, key=lambda item: item[0])
    features = np.stack([bag_feature(bag) for _, bag in ordered])
    classes = sorted({labels[bag_id] for bag_id, _ in ordered})
    if len(classes) < 2:
        raise DegenerateLabels(f"labels present: {classes}")
    class_index = {label: i for i, label in enumerate(classes)}
    target_idx = np.array([class_index[labels[bag_id]] for bag_id, _ in ordered])

    rng = np.random.default_rng(config.seed)
    weights = rng.normal(0.0, 0.01, size=(features.shape[1], len(classes)))
    bias = np.zeros(len(classes))
    trace = []
    for _ in range(config.epochs):
        loss, g_w, g_b = _bag_loss_and_grads(weights, bias, features, target_idx)
        weights -= config.lr * g_w
        bias -= config.lr * g_b
        trace.append(float(loss))
    return BagClassifier(classes, weights, bias, trace)


def predict_bag(clf: BagClassifier, bag) -> int:
    scores = bag_feature(bag) @ clf.weights + clf.bias
    return clf.classes[int(np.argmax(scores))]


def leave_one_out_accuracy(bags, labels, config: BagTrainConfig | None = None) -> float:
    """Hold each bag out once; train on the rest and score the prediction."""
    bags = list(bags)
    correct = 0
    for i, (bag_id, bag) in enumerate(bags):
        fold = bags[:i] + bags[i + 1:]
        clf = train_bag_classifier(fold, labels, config)
        correct += int(predict_bag(clf, bag) == labels[bag_id])
    return correct / len(bags)
