"""Contrastive and triplet losses with gradients, plus in-batch triplet mining.

Distances are raw Euclidean (embeddings are not normalized). Batch losses
average over the pairs/triplets they are given, so gradient scale does not
depend on batch size. The zero-distance subgradient is taken as 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterator, NamedTuple, Sequence

import numpy as np

CONTRASTIVE_MARGIN = 1.0
TRIPLET_MARGIN = 0.5


class LengthMismatch(ValueError):
    """Embedding vectors have different lengths."""


class NoValidTriplets(ValueError):
    """The batch yields no triplet matching the mining mode; resample it."""


class MiningMode(str, Enum):
    SEMI_HARD = "semi_hard"
    HARD = "hard"
    ALL = "all"


class TripletKind(str, Enum):
    EASY = "easy"
    SEMI_HARD = "semi_hard"
    HARD = "hard"


@dataclass(frozen=True)
class MarginConfig:
    """Loss margin; defaults are 1.0 for contrastive and 0.5 for triplet."""

    m: float = TRIPLET_MARGIN

    def __post_init__(self):
        if not self.m > 0:
            raise ValueError(f"margin must be > 0, got {self.m}")


@dataclass(frozen=True)
class PairBatch:
    """Embeddings of (query, plate) pairs with a positive/negative flag per row."""

    h_f: np.ndarray
    h_m: np.ndarray
    is_positive: np.ndarray

    def __post_init__(self):
        hf = np.asarray(self.h_f)
        hm = np.asarray(self.h_m)
        pos = np.asarray(self.is_positive, dtype=bool)
        if hf.shape != hm.shape or hf.ndim != 2:
            raise LengthMismatch(
                f"pair embeddings must share a (B, L) shape, got {hf.shape} vs {hm.shape}")
        if pos.shape != (hf.shape[0],):
            raise LengthMismatch("is_positive must have one flag per pair")
        object.__setattr__(self, "h_f", hf)
        object.__setattr__(self, "h_m", hm)
        object.__setattr__(self, "is_positive", pos)


@dataclass(frozen=True)
class TripletSet:
    """(anchor, positive, negative) index triples into a batch of embeddings."""

    indices: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64).reshape(-1, 3)
        object.__setattr__(self, "indices", idx)

    def __len__(self) -> int:
        return self.indices.shape[0]


def euclidean_distance(h1: np.ndarray, h2: np.ndarray) -> float:
    h1 = np.asarray(h1, dtype=np.float64)
    h2 = np.asarray(h2, dtype=np.float64)
    if h1.shape != h2.shape or h1.ndim != 1:
        raise LengthMismatch(f"vector shapes differ: {h1.shape} vs {h2.shape}")
    return float(np.sqrt(((h1 - h2) ** 2).sum()))


def contrastive_loss(pairs: PairBatch, margin: float = CONTRASTIVE_MARGIN):
    """Mean pair loss: positives pull with d^2/2, negatives push inside the margin.

    Returns (loss, grad_h_f, grad_h_m).
    """
    hf = pairs.h_f.astype(np.float64)
    hm = pairs.h_m.astype(np.float64)
    pos = pairs.is_positive
    b = hf.shape[0]
    diff = hf - hm
    d = np.sqrt((diff ** 2).sum(axis=1))

    losses = np.where(pos, 0.5 * d ** 2, 0.5 * np.maximum(0.0, margin - d) ** 2)
    # positive: dL/dh_f = diff; negative inside margin: -(m-d) * diff/d
    safe_d = np.where(d > 0, d, 1.0)
    neg_scale = np.where((~pos) & (d > 0) & (d < margin),
                         -(margin - d) / safe_d, 0.0)
    scale = np.where(pos, 1.0, neg_scale)
    gf = scale[:, None] * diff / b
    return float(losses.mean()), gf, -gf


def triplet_loss(h_a: np.ndarray, h_p: np.ndarray, h_n: np.ndarray,
                 margin: float = TRIPLET_MARGIN):
    """Hinge on d(A,P) - d(A,N) + margin; returns (loss, g_a, g_p, g_n)."""
    h_a = np.asarray(h_a, dtype=np.float64)
    h_p = np.asarray(h_p, dtype=np.float64)
    h_n = np.asarray(h_n, dtype=np.float64)
    if not (h_a.shape == h_p.shape == h_n.shape) or h_a.ndim != 1:
        raise LengthMismatch("anchor/positive/negative must share one length")
    dap = np.sqrt(((h_a - h_p) ** 2).sum())
    dan = np.sqrt(((h_a - h_n) ** 2).sum())
    loss = max(dap - dan + margin, 0.0)
    zeros = np.zeros_like(h_a)
    if loss == 0.0:
        return 0.0, zeros, zeros.copy(), zeros.copy()
    uap = (h_a - h_p) / dap if dap > 0 else zeros
    uan = (h_a - h_n) / dan if dan > 0 else zeros
    return float(loss), uap - uan, -uap, uan


def batch_triplet_loss(embeddings: np.ndarray, triplets: TripletSet,
                       margin: float = TRIPLET_MARGIN):
    """Mean loss over the given triplets; returns (loss, grad wrt embeddings)."""
    emb = np.asarray(embeddings, dtype=np.float64)
    idx = triplets.indices
    if len(triplets) == 0:
        raise NoValidTriplets("empty triplet set")
    a, p, n = idx[:, 0], idx[:, 1], idx[:, 2]
    dap_v = emb[a] - emb[p]
    dan_v = emb[a] - emb[n]
    dap = np.sqrt((dap_v ** 2).sum(axis=1))
    dan = np.sqrt((dan_v ** 2).sum(axis=1))
    raw = dap - dan + margin
    active = raw > 0
    t = idx.shape[0]
    loss = float(np.maximum(raw, 0.0).mean())

    grad = np.zeros_like(emb)
    if active.any():
        uap = np.where((dap > 0)[:, None], dap_v / np.maximum(dap, 1e-300)[:, None], 0.0)
        uan = np.where((dan > 0)[:, None], dan_v / np.maximum(dan, 1e-300)[:, None], 0.0)
        w = active[:, None] / t
        np.add.at(grad, a, w * (uap - uan))
        np.add.at(grad, p, -w * uap)
        np.add.at(grad, n, w * uan)
    return loss, grad


def classify_triplet(dap: float, dan: float,
                     margin: float = TRIPLET_MARGIN) -> TripletKind:
    """hard: negative closer than positive; semi_hard: farther but loss > 0."""
    if dap < 0 or dan < 0:
        raise ValueError("distances must be nonnegative")
    if dan < dap:
        return TripletKind.HARD
    if dan < dap + margin:
        return TripletKind.SEMI_HARD
    return TripletKind.EASY


def mine_triplets(embeddings: np.ndarray, labels: Sequence[int],
                  mode: MiningMode = MiningMode.SEMI_HARD,
                  margin: float = TRIPLET_MARGIN) -> TripletSet:
    """All (a, p, n) index triples of the requested kind, in lexicographic order.

    mode=all keeps every triplet with positive loss (hard or semi-hard).
    Raises NoValidTriplets when the batch cannot produce any.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    if emb.ndim != 2 or labels.shape != (emb.shape[0],):
        raise LengthMismatch("embeddings must be (B, L) with one label per row")
    mode = MiningMode(mode)
    b = emb.shape[0]

    same = labels[:, None] == labels[None, :]
    valid_ap = same & ~np.eye(b, dtype=bool)
    valid_an = ~same
    if not valid_ap.any() or not valid_an.any():
        raise NoValidTriplets("need two classes and one class with two members")

    sq = ((emb[:, None, :] - emb[None, :, :]) ** 2).sum(axis=2)
    dist = np.sqrt(sq)
    dap = dist[:, :, None]
    dan = dist[:, None, :]
    if mode is MiningMode.HARD:
        keep = dan < dap
    elif mode is MiningMode.SEMI_HARD:
        keep = (dap <= dan) & (dan < dap + margin)
    else:
        keep = dan < dap + margin
    sel = valid_ap[:, :, None] & valid_an[:, None, :] & keep
    idx = np.argwhere(sel)
    if idx.shape[0] == 0:
        raise NoValidTriplets(f"no {mode.value} triplets in this batch")
    return TripletSet(idx)


class PairSample(NamedTuple):
    entry_index: int
    plate: int
    is_positive: bool


def sample_pairs(entry_labels: Sequence[int], num_plates: int,
                 seed: int) -> Iterator[PairSample]:
    """Endless alternating stream: positive (entry, its plate), then negative
    (entry, uniform other plate). Deterministic in seed."""
    labels = list(entry_labels)
    if num_plates < 2:
        raise ValueError("need at least 2 plates to form negative pairs")
    if not labels:
        raise ValueError("no entries to sample from")
    rng = np.random.default_rng([seed, 31])
    k = 0
    while True:
        e = int(rng.integers(len(labels)))
        gt = labels[e]
        if k % 2 == 0:
            yield PairSample(e, gt, True)
        else:
            other = int(rng.integers(num_plates - 1))
            if other >= gt:
                other += 1
            yield PairSample(e, other, False)
        k += 1
