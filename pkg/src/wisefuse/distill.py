"""Cross-scale distillation head and its training loop.

The head sharpens a raw coarse-patch embedding toward the mean embedding of
the fine patches in its footprint. Learnable prompt vectors attend over the
input, the attention context is concatenated onto it, and a linear layer
projects back to embedding space. Training balances a global KL alignment
term against a binary discriminator that tells in-region fine patches from
sampled outside ones. All math runs in float64; gradients are analytic and
checked against finite differences in the test suite.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import MissingEmbedding, ShapeMismatch
from .store import EmbeddingStore, global_targets, read_wfeb, write_wfeb
from .tiling import PatchGrid

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
BCE_CLIP = 1e-7


@dataclass
class TrainConfig:
    lambda_global: float = 500.0
    lambda_local: float = 1.0
    lr: float = 1e-4
    epochs: int = 200
    batch_size: int = 64
    prompts: int = 30
    # None means "as many negatives as the triplet has positives"
    negatives_per_triplet: int | None = None
    seed: int = 0


@dataclass
class DistillHead:
    """Trainable parameters: prompts, projection, and the region discriminator."""

    prompts: np.ndarray     # (m, d)
    proj: np.ndarray        # (d, 2d)
    proj_bias: np.ndarray   # (d,)
    disc: np.ndarray        # (d, d)
    disc_bias: float

    @property
    def dim(self) -> int:
        return self.prompts.shape[1]

    @property
    def n_prompts(self) -> int:
        return self.prompts.shape[0]

    def copy(self) -> "DistillHead":
        return DistillHead(
            self.prompts.copy(), self.proj.copy(), self.proj_bias.copy(),
            self.disc.copy(), float(self.disc_bias),
        )


def init_head(dim: int, n_prompts: int, rng: np.random.Generator) -> DistillHead:
    """No-op start: identity projection, zero discriminator, random prompts."""
    proj = np.concatenate([np.eye(dim), np.zeros((dim, dim))], axis=1)
    prompts = rng.normal(0.0, 1.0 / np.sqrt(dim), size=(n_prompts, dim))
    return DistillHead(prompts, proj, np.zeros(dim), np.zeros((dim, dim)), 0.0)


def _softmax(values: np.ndarray) -> np.ndarray:
    shifted = values - values.max()
    exp = np.exp(shifted)
    return exp / exp.sum()


def head_forward(head: DistillHead, e_raw) -> np.ndarray:
    """Prompt attention over the input, then the linear projection."""
    e = np.asarray(e_raw, dtype=np.float64).reshape(-1)
    if e.shape != (head.dim,):
        raise ShapeMismatch(f"input dim {e.shape[0]} != head dim {head.dim}")
    attention = _softmax(head.prompts @ e / np.sqrt(head.dim))
    context = head.prompts.T @ attention
    return head.proj @ np.concatenate([e, context]) + head.proj_bias


def head_apply(head: DistillHead, matrix: np.ndarray) -> np.ndarray:
    """Vectorized head_forward over the rows of (n, d)."""
    e = np.asarray(matrix, dtype=np.float64)
    scores = (e @ head.prompts.T) / np.sqrt(head.dim)
    scores -= scores.max(axis=1, keepdims=True)
    att = np.exp(scores)
    att /= att.sum(axis=1, keepdims=True)
    context = att @ head.prompts
    return np.concatenate([e, context], axis=1) @ head.proj.T + head.proj_bias


def distill_store(head: DistillHead, low_raw: EmbeddingStore) -> EmbeddingStore:
    """Run every raw low-res vector through the head."""
    out = EmbeddingStore(low_raw.dim, "low_res_distilled")
    z = head_apply(head, low_raw.matrix().astype(np.float64))
    for record_id, row in zip(low_raw.ids, z):
        out.add(record_id, row.astype(np.float32))
    return out


# -- losses -------------------------------------------------------------------

def loss_global(z, target) -> float:
    """KL(softmax(target) || softmax(z)) with natural log."""
    zq = np.asarray(z, dtype=np.float64)
    tp = np.asarray(target, dtype=np.float64)
    p = _softmax(tp)
    log_p = np.log(p)
    shifted = zq - zq.max()
    log_q = shifted - np.log(np.exp(shifted).sum())
    return float((p * (log_p - log_q)).sum())


def discriminator(head: DistillHead, z, patch) -> float:
    """Probability that `patch` lies inside the region summarized by `z`."""
    logit = float(np.asarray(z) @ head.disc @ np.asarray(patch) + head.disc_bias)
    return 1.0 / (1.0 + np.exp(-logit))


def loss_local(head: DistillHead, z, patches) -> float:
    """Mean binary cross-entropy of the discriminator over (vector, label) pairs."""
    if not patches:
        raise ValueError("patch list must be nonempty")
    total = 0.0
    for vector, label in patches:
        prob = np.clip(discriminator(head, z, vector), BCE_CLIP, 1.0 - BCE_CLIP)
        total += -(label * np.log(prob) + (1.0 - label) * np.log(1.0 - prob))
    return total / len(patches)


# -- triplets ------------------------------------------------------------------

@dataclass
class DistillTriplet:
    """One coarse patch with its region mean, children, and sampled outsiders.

    Fine vectors are shared per slide; the triplet stores row indices so the
    training loop can resample negatives from `pool_rows` each epoch.
    """

    parent_id: str
    low: np.ndarray                  # (d,) raw coarse embedding
    target: np.ndarray               # (d,) mean of child embeddings
    fine_vectors: np.ndarray         # (n_fine, d) shared slide matrix
    positive_rows: np.ndarray
    negative_rows: np.ndarray
    pool_rows: np.ndarray            # out-of-region candidates
    short_negatives: bool = False    # pool smaller than the requested count

    @property
    def positives(self) -> np.ndarray:
        return self.fine_vectors[self.positive_rows]

    @property
    def negatives(self) -> np.ndarray:
        return self.fine_vectors[self.negative_rows]

    def resample_negatives(self, rng: np.random.Generator, count: int | None) -> None:
        wanted = len(self.positive_rows) if count is None else count
        if len(self.pool_rows) == 0 or wanted == 0:
            self.negative_rows = np.empty(0, dtype=np.int64)
            return
        take = min(wanted, len(self.pool_rows))
        self.negative_rows = np.sort(rng.choice(self.pool_rows, size=take, replace=False))


def assemble_triplets(grid: PatchGrid, low_raw: EmbeddingStore, high: EmbeddingStore,
                      negatives_per: int | None = None, seed: int = 0) -> list[DistillTriplet]:
    """One triplet per coarse patch with children; negatives drawn without
    replacement from the slide's other fine patches (all of them if short)."""
    rng = np.random.default_rng(seed)
    fine_ids = grid.fine_ids()
    row_of = {fid: i for i, fid in enumerate(fine_ids)}
    try:
        fine_matrix = np.stack(
            [high.get(fid).astype(np.float64) for fid in fine_ids]
        ) if fine_ids else np.zeros((0, high.dim))
    except KeyError as exc:
        raise MissingEmbedding(str(exc)) from exc
    targets = {t.parent_id: t.vector for t in global_targets(high, grid)}

    triplets = []
    for coarse in grid.coarse:
        child_ids = grid.child_ids(coarse.row, coarse.col)
        if not child_ids:
            continue
        if coarse.patch_id not in low_raw:
            raise MissingEmbedding(coarse.patch_id)
        pos = np.array(sorted(row_of[cid] for cid in child_ids), dtype=np.int64)
        pool = np.array(
            sorted(set(range(len(fine_ids))) - set(pos.tolist())), dtype=np.int64
        )
        wanted = len(pos) if negatives_per is None else negatives_per
        short = len(pool) < wanted
        if len(pool) == 0 or wanted == 0:
            neg = np.empty(0, dtype=np.int64)
        else:
            neg = np.sort(rng.choice(pool, size=min(wanted, len(pool)), replace=False))
        triplets.append(DistillTriplet(
            parent_id=coarse.patch_id,
            low=low_raw.get(coarse.patch_id).astype(np.float64),
            target=targets[coarse.patch_id],
            fine_vectors=fine_matrix,
            positive_rows=pos,
            negative_rows=neg,
            pool_rows=pool,
            short_negatives=short,
        ))
    return triplets


# -- batched loss + gradients ---------------------------------------------------

def _batch_arrays(batch: list[DistillTriplet], dim: int):
    n = len(batch)
    m_max = max(len(t.positive_rows) + len(t.negative_rows) for t in batch)
    m_max = max(m_max, 1)
    e_raw = np.zeros((n, dim))
    targets = np.zeros((n, dim))
    patches = np.zeros((n, m_max, dim))
    labels = np.zeros((n, m_max))
    mask = np.zeros((n, m_max))
    for i, trip in enumerate(batch):
        e_raw[i] = trip.low
        targets[i] = trip.target
        n_pos = len(trip.positive_rows)
        n_all = n_pos + len(trip.negative_rows)
        patches[i, :n_pos] = trip.positives
        patches[i, n_pos:n_all] = trip.negatives
        labels[i, :n_pos] = 1.0
        mask[i, :n_all] = 1.0
    return e_raw, targets, patches, labels, mask


def loss_total_and_grads(head: DistillHead, batch: list[DistillTriplet],
                         config: TrainConfig):
    """Batch-mean total loss and analytic gradients for every parameter."""
    if not batch:
        raise ValueError("batch must be nonempty")
    e_raw, targets, patches, labels, mask = _batch_arrays(batch, head.dim)
    loss, g_p, g_w, g_b, g_a, g_bd = _kernels.distill_batch(
        head.prompts, head.proj, head.proj_bias, head.disc, head.disc_bias,
        e_raw, targets, patches, labels, mask,
        config.lambda_global, config.lambda_local,
    )
    grads = {
        "prompts": g_p,
        "proj": g_w,
        "proj_bias": g_b,
        "disc": g_a,
        "disc_bias": float(g_bd),
    }
    return float(loss), grads


# -- optimizer -------------------------------------------------------------------

@dataclass
class AdamState:
    """First/second moment accumulators mirroring the head's parameters."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def for_head(cls, head: DistillHead) -> "AdamState":
        shapes = {
            "prompts": head.prompts.shape,
            "proj": head.proj.shape,
            "proj_bias": head.proj_bias.shape,
            "disc": head.disc.shape,
            "disc_bias": (),
        }
        return cls(
            m={k: np.zeros(s) for k, s in shapes.items()},
            v={k: np.zeros(s) for k, s in shapes.items()},
        )

    def update(self, head: DistillHead, grads: dict, lr: float) -> None:
        self.step += 1
        correct1 = 1.0 - ADAM_BETA1 ** self.step
        correct2 = 1.0 - ADAM_BETA2 ** self.step
        new_values = {}
        for name, grad in grads.items():
            g = np.asarray(grad, dtype=np.float64)
            self.m[name] = ADAM_BETA1 * self.m[name] + (1.0 - ADAM_BETA1) * g
            self.v[name] = ADAM_BETA2 * self.v[name] + (1.0 - ADAM_BETA2) * g * g
            m_hat = self.m[name] / correct1
            v_hat = self.v[name] / correct2
            new_values[name] = lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
        head.prompts -= new_values["prompts"]
        head.proj -= new_values["proj"]
        head.proj_bias -= new_values["proj_bias"]
        head.disc -= new_values["disc"]
        head.disc_bias = float(head.disc_bias - new_values["disc_bias"])


# -- training ---------------------------------------------------------------------

def train(triplets: list[DistillTriplet], config: TrainConfig):
    """Train a fresh head; returns (head, per-epoch mean loss trace).

    One seeded stream drives prompt init, the per-epoch shuffle, and the
    per-epoch negative resampling, so identical inputs give identical heads.
    """
    if not triplets:
        raise ValueError("need at least one triplet")
    dim = triplets[0].low.shape[0]
    rng = np.random.default_rng(config.seed)
    head = init_head(dim, config.prompts, rng)
    state = AdamState.for_head(head)
    trace: list[float] = []
    n = len(triplets)
    for _ in range(config.epochs):
        perm = rng.permutation(n)
        loss_sum = 0.0
        for start in range(0, n, config.batch_size):
            batch = [triplets[i] for i in perm[start: start + config.batch_size]]
            for trip in batch:
                trip.resample_negatives(rng, config.negatives_per_triplet)
            loss, grads = loss_total_and_grads(head, batch, config)
            state.update(head, grads, config.lr)
            loss_sum += loss * len(batch)
        trace.append(loss_sum / n)
    return head, trace


def mean_target_cosine(head: DistillHead, triplets: list[DistillTriplet]) -> float:
    """Mean cosine between head outputs and the region means."""
    lows = np.stack([t.low for t in triplets])
    targets = np.stack([t.target for t in triplets])
    z = head_apply(head, lows)
    num = (z * targets).sum(axis=1)
    den = np.linalg.norm(z, axis=1) * np.linalg.norm(targets, axis=1)
    return float((num / den).mean())


# -- checkpoints --------------------------------------------------------------------
# Same container format as the embedding stores, rows padded to width 2d;
# parameters are float32 on disk like every other container.

def save_checkpoint(head: DistillHead, path, config: TrainConfig | None = None) -> None:
    d, m = head.dim, head.n_prompts
    width = 2 * d

    def padded(row):
        out = np.zeros(width, dtype=np.float64)
        row = np.atleast_1d(np.asarray(row, dtype=np.float64))
        out[: row.size] = row
        return out

    ids: list[str] = []
    rows: list[np.ndarray] = []
    for k in range(m):
        ids.append(f"P:{k}")
        rows.append(padded(head.prompts[k]))
    for r in range(d):
        ids.append(f"W:row:{r}")
        rows.append(padded(head.proj[r]))
    ids.append("b")
    rows.append(padded(head.proj_bias))
    for r in range(d):
        ids.append(f"A:row:{r}")
        rows.append(padded(head.disc[r]))
    ids.append("bD")
    rows.append(padded([head.disc_bias]))
    write_wfeb(path, width, ids, rows, check_norms=False)

    header = {"dim": d, "prompts": m}
    if config is not None:
        header["config"] = asdict(config)
    Path(str(path) + ".json").write_text(json.dumps(header, sort_keys=True, indent=1))


def load_checkpoint(path) -> tuple[DistillHead, dict]:
    header = json.loads(Path(str(path) + ".json").read_text())
    d, m = header["dim"], header["prompts"]
    _, ids, rows = read_wfeb(path, check_norms=False)
    by_id = {rid: row.astype(np.float64) for rid, row in zip(ids, rows)}
    head = DistillHead(
        prompts=np.stack([by_id[f"P:{k}"][:d] for k in range(m)]),
        proj=np.stack([by_id[f"W:row:{r}"] for r in range(d)]),
        proj_bias=by_id["b"][:d],
        disc=np.stack([by_id[f"A:row:{r}"][:d] for r in range(d)]),
        disc_bias=float(by_id["bD"][0]),
    )
    return head, header
