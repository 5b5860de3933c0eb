"""Plate embedding index, distance ranking, retrieval metrics, and training.

The evaluation path is shared by every identifier: anything that can rank
plates for a query image plugs in as a ranker callable, so the Siamese
route and the exhaustive mutual-information baseline produce reports
through identical code.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .imagekit import GrayImage, resize_bilinear, warp_affine, make_affine
from .metric import (
    CONTRASTIVE_MARGIN,
    TRIPLET_MARGIN,
    MiningMode,
    NoValidTriplets,
    PairBatch,
    batch_triplet_loss,
    contrastive_loss,
    mine_triplets,
    sample_pairs,
)
from .tensornet import (
    AdamState,
    Checkpoint,
    NetworkSpec,
    adam_step,
    backward,
    default_embed_net,
    forward,
    init_params,
)


class IndexEmpty(ValueError):
    """Ranking requested against an index with no plates."""


class EmptyTestSet(ValueError):
    """Evaluation requested with no queries."""


@dataclass(frozen=True)
class EmbeddingIndex:
    """Ordered plate embeddings (row i belongs to plate i)."""

    embeddings: np.ndarray
    checkpoint_id: str = ""

    def __post_init__(self):
        emb = np.asarray(self.embeddings)
        if emb.ndim != 2:
            raise ValueError(f"embeddings must be (K, L), got {emb.shape}")
        object.__setattr__(self, "embeddings", emb)

    def __len__(self) -> int:
        return self.embeddings.shape[0]


@dataclass(frozen=True)
class RankingResult:
    """All plates ordered by ascending distance; ties break to the lower index."""

    query_id: str
    order: np.ndarray
    distances: np.ndarray
    ground_truth_rank: int | None = None


@dataclass
class EvalReport:
    """Retrieval quality over a query set: mean ground-truth rank and hit rates."""

    n: int
    mae: float
    top1: float
    top3: float
    top5: float
    top10: float
    inference_seconds: float
    ranks: list = field(default_factory=list, repr=False)

    def to_json_dict(self) -> dict:
        return {"n": self.n, "mae": self.mae, "top1": self.top1, "top3": self.top3,
                "top5": self.top5, "top10": self.top10,
                "inference_seconds": self.inference_seconds}


def to_net_input(img: GrayImage, input_size: int) -> np.ndarray:
    if img.shape != (input_size, input_size):
        img = resize_bilinear(img, input_size, input_size)
    return img.pixels.astype(np.float32)[None, :, :]


def embed_images(images: Sequence[GrayImage], spec: NetworkSpec,
                 params: list) -> np.ndarray:
    """Embeddings for a list of images, in order.

    Images go through one at a time so index rows and later single-query
    embeddings are bitwise identical (batched BLAS kernels round differently).
    """
    rows = []
    for im in images:
        out, _ = forward(spec, params, to_net_input(im, spec.input_size)[None],
                         keep_state=False)
        rows.append(out[0])
    return np.stack(rows)


def build_index(plates: Sequence[GrayImage], spec: NetworkSpec, params: list,
                checkpoint_id: str = "") -> EmbeddingIndex:
    """Embed every plate with the shared network; index order = plate order."""
    if len(plates) == 0:
        raise IndexEmpty("no plates to index")
    return EmbeddingIndex(embed_images(plates, spec, params), checkpoint_id)


def rank_distances(distances: np.ndarray, query_id: str = "",
                   ground_truth: int | None = None) -> RankingResult:
    """Shared ranking core: ascending distance, stable tie-break to lower index."""
    distances = np.asarray(distances, dtype=np.float64)
    if distances.size == 0:
        raise IndexEmpty("cannot rank an empty plate set")
    order = np.argsort(distances, kind="stable")
    y = None
    if ground_truth is not None:
        y = int(np.nonzero(order == ground_truth)[0][0])
    return RankingResult(query_id, order, distances[order], y)


def rank_embedding(index: EmbeddingIndex, h: np.ndarray, query_id: str = "",
                   ground_truth: int | None = None) -> RankingResult:
    if len(index) == 0:
        raise IndexEmpty("empty index")
    emb = index.embeddings.astype(np.float64)
    d = np.sqrt(((emb - np.asarray(h, dtype=np.float64)[None, :]) ** 2).sum(axis=1))
    return rank_distances(d, query_id, ground_truth)


def rank_plates(index: EmbeddingIndex, img: GrayImage, spec: NetworkSpec,
                params: list, ground_truth: int | None = None,
                query_id: str = "") -> RankingResult:
    h = embed_images([img], spec, params)[0]
    return rank_embedding(index, h, query_id, ground_truth)


Ranker = Callable[[GrayImage, int, str], RankingResult]


def make_siamese_ranker(index: EmbeddingIndex, spec: NetworkSpec,
                        params: list) -> Ranker:
    def ranker(img: GrayImage, ground_truth: int, query_id: str = "") -> RankingResult:
        return rank_plates(index, img, spec, params, ground_truth, query_id)
    return ranker


def evaluate(queries: Sequence[GrayImage], truths: Sequence[int],
             ranker: Ranker) -> EvalReport:
    """MAE and TOP-n over a query set; wall time covers all embed+rank calls."""
    if len(queries) == 0:
        raise EmptyTestSet("no queries to evaluate")
    if len(queries) != len(truths):
        raise ValueError("queries and ground truths must align")
    started = time.perf_counter()
    ranks = [ranker(img, int(gt), f"query-{i}").ground_truth_rank
             for i, (img, gt) in enumerate(zip(queries, truths))]
    elapsed = time.perf_counter() - started
    return report_from_ranks(ranks, elapsed)


def report_from_ranks(ranks: Sequence[int], inference_seconds: float) -> EvalReport:
    ranks = [int(r) for r in ranks]
    if not ranks:
        raise EmptyTestSet("no ranks to aggregate")
    arr = np.asarray(ranks)
    return EvalReport(
        n=len(ranks),
        mae=float(arr.mean()),
        top1=float((arr < 1).mean()),
        top3=float((arr < 3).mean()),
        top5=float((arr < 5).mean()),
        top10=float((arr < 10).mean()),
        inference_seconds=inference_seconds,
        ranks=ranks,
    )


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainHistoryRow:
    iteration: int
    loss: float
    val_mae: float | None = None


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    best_iteration: int
    best_val_mae: float
    history: list
    stopped_early: bool


def _plate_jitter_transform(rng):
    return make_affine(rotation_deg=rng.uniform(-8.0, 8.0),
                       scale=rng.uniform(0.94, 1.06),
                       tx=rng.uniform(-0.04, 0.04),
                       ty=rng.uniform(-0.04, 0.04))


def train_identifier(
    train_images: Sequence[GrayImage],
    train_labels: Sequence[int],
    val_images: Sequence[GrayImage],
    val_labels: Sequence[int],
    atlas: Sequence[GrayImage],
    *,
    loss: str = "triplet",
    mining: MiningMode = MiningMode.SEMI_HARD,
    batch_size: int = 16,
    margin: float | None = None,
    input_size: int = 128,
    embed_dim: int = 64,
    learning_rate: float = 1e-4,
    max_iterations: int = 10_000,
    patience: int = 2_000,
    val_every: int = 250,
    seed: int = 0,
    plate_jitter: bool = True,
) -> TrainResult:
    """Train the embedding network on (slice, plate) data.

    Batches pair each sampled training slice with its ground-truth plate
    (optionally jittered by a small random affine, mirroring plate-side
    augmentation). Triplet losses mine within the batch; the contrastive
    loss consumes an alternating positive/negative pair stream. Training
    keeps the checkpoint with the best validation MAE and stops early when
    it has not improved for `patience` iterations.
    """
    if loss not in ("triplet", "contrastive"):
        raise ValueError(f"loss must be 'triplet' or 'contrastive', got {loss!r}")
    if batch_size < 4 or batch_size % 2:
        raise ValueError(f"batch_size must be even and >= 4, got {batch_size}")
    if len(train_images) != len(train_labels):
        raise ValueError("training images and labels must align")
    if not train_images:
        raise ValueError("empty training set")
    mining = MiningMode(mining)
    if margin is None:
        margin = TRIPLET_MARGIN if loss == "triplet" else CONTRASTIVE_MARGIN

    spec = default_embed_net(input_size, embed_dim)
    init_rng = np.random.default_rng([seed, 41])
    batch_rng = np.random.default_rng([seed, 42])
    jitter_rng = np.random.default_rng([seed, 43])
    params = init_params(spec, init_rng)
    adam = AdamState.init(params, learning_rate)

    train_inputs = [to_net_input(im, input_size) for im in train_images]
    train_labels = [int(v) for v in train_labels]
    plate_images = [resize_bilinear(p, input_size, input_size)
                    if p.shape != (input_size, input_size) else p for p in atlas]
    plate_inputs = [p.pixels.astype(np.float32)[None] for p in plate_images]

    def plate_input(idx: int) -> np.ndarray:
        if not plate_jitter:
            return plate_inputs[idx]
        t = _plate_jitter_transform(jitter_rng)
        return warp_affine(plate_images[idx], t).pixels.astype(np.float32)[None]

    pair_stream = (sample_pairs(train_labels, len(atlas), seed)
                   if loss == "contrastive" else None)

    def validation_mae() -> float:
        index = build_index(plate_images, spec, params)
        ranks = []
        for im, gt in zip(val_images, val_labels):
            ranks.append(rank_plates(index, im, spec, params, int(gt)).ground_truth_rank)
        return float(np.mean(ranks)) if ranks else float("nan")

    history: list[TrainHistoryRow] = []
    best_mae = validation_mae() if val_images else float("inf")
    best_params = [p.copy() for p in params]
    best_iteration = 0
    history.append(TrainHistoryRow(0, float("nan"), best_mae))
    stopped_early = False

    it = 0
    mining_exhausted = False
    while it < max_iterations:
        if loss == "triplet":
            resample_failures = 0
            triplets = None
            while triplets is None:
                picks = batch_rng.integers(len(train_inputs), size=batch_size // 2)
                inputs, labels = [], []
                for e in picks:
                    inputs.append(train_inputs[e])
                    inputs.append(plate_input(train_labels[e]))
                    labels.extend([train_labels[e]] * 2)
                x = np.stack(inputs)
                emb, state = forward(spec, params, x)
                try:
                    triplets = mine_triplets(emb, labels, mining, margin)
                except NoValidTriplets:
                    resample_failures += 1
                    if resample_failures >= 100:
                        if it == 0:
                            raise  # the data cannot produce triplets at all
                        # margin satisfied on 100 consecutive fresh batches:
                        # the model has converged for this mining mode
                        mining_exhausted = True
                        break
            if mining_exhausted:
                stopped_early = True
                break
            loss_value, grad_emb = batch_triplet_loss(emb, triplets, margin)
        else:
            samples = [next(pair_stream) for _ in range(batch_size)]
            inputs = [train_inputs[s.entry_index] for s in samples]
            inputs += [plate_input(s.plate) for s in samples]
            x = np.stack(inputs)
            emb, state = forward(spec, params, x)
            batch = PairBatch(emb[:batch_size], emb[batch_size:],
                              np.array([s.is_positive for s in samples]))
            loss_value, gf, gm = contrastive_loss(batch, margin)
            grad_emb = np.concatenate([gf, gm], axis=0)

        grads, _ = backward(spec, params, state, grad_emb.astype(np.float32),
                            need_input_grad=False)
        params, adam = adam_step(adam, params, grads)
        it += 1
        row = TrainHistoryRow(it, float(loss_value))

        if val_images and it % val_every == 0:
            mae = validation_mae()
            row.val_mae = mae
            if mae < best_mae:
                best_mae = mae
                best_params = [p.copy() for p in params]
                best_iteration = it
        history.append(row)

        if val_images and it - best_iteration >= patience:
            stopped_early = True
            break

    if not val_images:  # nothing to select on; keep the final parameters
        best_params, best_iteration = params, it
    checkpoint = Checkpoint(spec, best_params, step=best_iteration, seed=seed)
    return TrainResult(checkpoint, best_iteration, best_mae, history, stopped_early)
