"""Mutual-information affine registration and the exhaustive-MI identifier.

MI comes from a hard-binned joint histogram (natural log, 32 bins by
default), which keeps it exactly checkable on tiny images. The optimizer is
stochastic normalized gradient ascent over the six affine parameters with
central finite differences on a fresh pixel sample each iteration, run
coarse-to-fine over an image pyramid. The returned transform is the best of
all candidates (identity included) under full-image MI, so registration can
never report worse than doing nothing.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .identify import RankingResult, Ranker, rank_distances
from .imagekit import (
    AffineTransform,
    GrayImage,
    binomial_blur5,
    make_affine,
    resize_bilinear,
    warp_affine,
)
from .tensornet import (
    AdamState,
    Checkpoint,
    adam_step,
    backward,
    default_regression_net,
    forward,
    init_regression_params,
)

_DET_EPS = 1e-8
_FD_DELTA = 0.01

PYRAMID_KINDS = ("recursive", "shrinking", "smoothing")
SEARCH_ITERATIONS = tuple(range(200, 3001, 200))
SEARCH_RESOLUTIONS = (1, 2, 3, 4, 5, 6, 7)


class DimensionMismatch(ValueError):
    """Images must share dimensions for direct MI."""


def _sorted_entropy(p: np.ndarray) -> float:
    """-sum p log p over nonzero entries, summed in sorted order so the value
    depends only on the multiset of probabilities."""
    nz = np.sort(p[p > 0])
    return float(-(nz * np.log(nz)).sum())


@dataclass(frozen=True)
class JointHistogram:
    """Co-occurrence counts of hard-binned intensities."""

    counts: np.ndarray
    bins: int
    samples: int

    @classmethod
    def from_values(cls, a: np.ndarray, b: np.ndarray, bins: int) -> "JointHistogram":
        ia = np.minimum((a * bins).astype(np.int64), bins - 1)
        ib = np.minimum((b * bins).astype(np.int64), bins - 1)
        counts = np.bincount(ia * bins + ib, minlength=bins * bins)
        return cls(counts.reshape(bins, bins), bins, int(a.size))

    def mutual_information(self) -> float:
        # MI = H(rows) + H(cols) - H(joint). Entropies sum over sorted
        # probabilities, so the result is bitwise invariant under transpose
        # (exact symmetry) and MI(A, A) reduces to exactly 2H - H = H.
        p = self.counts / self.samples
        h_row = _sorted_entropy(p.sum(axis=1))
        h_col = _sorted_entropy(p.sum(axis=0))
        h_joint = _sorted_entropy(p.ravel())
        return (h_row + h_col) - h_joint


def mutual_information(fixed: GrayImage, moving: GrayImage, bins: int = 32,
                       sample_indices: np.ndarray | None = None) -> float:
    """MI in nats between two same-size images, optionally on a pixel subset."""
    if bins < 2:
        raise ValueError(f"bins must be >= 2, got {bins}")
    if fixed.shape != moving.shape:
        raise DimensionMismatch(f"shapes differ: {fixed.shape} vs {moving.shape}")
    a = fixed.pixels.ravel()
    b = moving.pixels.ravel()
    if sample_indices is not None:
        a = a[sample_indices]
        b = b[sample_indices]
    return JointHistogram.from_values(a, b, bins).mutual_information()


def marginal_entropy(img: GrayImage, bins: int = 32) -> float:
    """Shannon entropy (nats) of the hard-binned intensity distribution."""
    idx = np.minimum((img.pixels.ravel() * bins).astype(np.int64), bins - 1)
    return _sorted_entropy(np.bincount(idx, minlength=bins) / idx.size)


@dataclass(frozen=True)
class PyramidConfig:
    """Multi-resolution schedule for the affine optimizer."""

    num_resolutions: int = 3
    max_iterations: int = 1000
    samples: int = 10_000
    random_sample_region: bool = False
    pyramid: str = "recursive"

    def __post_init__(self):
        if self.num_resolutions not in SEARCH_RESOLUTIONS:
            raise ValueError(f"num_resolutions must be in 1..7, got {self.num_resolutions}")
        if self.max_iterations not in SEARCH_ITERATIONS:
            raise ValueError(
                f"max_iterations must be a multiple of 200 in [200, 3000], "
                f"got {self.max_iterations}")
        if self.samples < 1:
            raise ValueError(f"samples must be >= 1, got {self.samples}")
        if self.pyramid not in PYRAMID_KINDS:
            raise ValueError(f"pyramid must be one of {PYRAMID_KINDS}")


@dataclass
class RegistrationResult:
    transform: AffineTransform
    final_mi: float
    traces: list  # per level, best-so-far sampled MI per iteration
    seconds: float

    def to_json_dict(self) -> dict:
        return {
            "transform": list(self.transform.params()),
            "final_mi": self.final_mi,
            "traces": [[float(v) for v in tr] for tr in self.traces],
            "seconds": self.seconds,
        }


def _downsample2(px: np.ndarray) -> np.ndarray:
    return px[::2, ::2]


def _build_pyramid(px: np.ndarray, levels: int, kind: str) -> list[np.ndarray]:
    """Level 0 is finest. Levels below 4 px on a side are not generated."""
    out = [px]
    for _ in range(levels - 1):
        prev = out[-1]
        if kind == "recursive":
            nxt = _downsample2(binomial_blur5(prev))
        elif kind == "shrinking":
            nxt = _downsample2(prev)
        else:  # smoothing: blur only, resolution kept
            nxt = binomial_blur5(prev)
        if min(nxt.shape) < 4:
            break
        out.append(nxt)
    return out


def _inverse_params(p13: np.ndarray):
    """Inverse linear parts + translations for a stack of parameter rows."""
    a11, a12, a21, a22 = p13[:, 0], p13[:, 1], p13[:, 2], p13[:, 3]
    det = a11 * a22 - a12 * a21
    ok = np.abs(det) >= _DET_EPS
    safe = np.where(ok, det, 1.0)
    return (a22 / safe, -a12 / safe, -a21 / safe, a11 / safe), ok


def _mi_of_params(p_rows: np.ndarray, fixed_bins: np.ndarray,
                  xs: np.ndarray, ys: np.ndarray, moving: np.ndarray,
                  bins: int) -> np.ndarray:
    """Sampled MI for a stack of affine parameter rows (shared sample points).

    Returns -inf for rows whose linear part is singular.
    """
    m = p_rows.shape[0]
    h, w = moving.shape
    (i11, i12, i21, i22), ok = _inverse_params(p_rows)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    u = xs[None, :] - cx - p_rows[:, 4:5] * w
    v = ys[None, :] - cy - p_rows[:, 5:6] * h
    sx = i11[:, None] * u + i12[:, None] * v + cx
    sy = i21[:, None] * u + i22[:, None] * v + cy

    x0 = np.floor(sx)
    y0 = np.floor(sy)
    fx = sx - x0
    fy = sy - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    flat = moving.ravel()

    def fetch(yy, xx):
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        idx = np.clip(yy, 0, h - 1) * w + np.clip(xx, 0, w - 1)
        return flat[idx] * valid

    vals = ((1 - fy) * (1 - fx) * fetch(y0, x0)
            + (1 - fy) * fx * fetch(y0, x0 + 1)
            + fy * (1 - fx) * fetch(y0 + 1, x0)
            + fy * fx * fetch(y0 + 1, x0 + 1))

    mb = np.minimum((vals * bins).astype(np.int64), bins - 1)
    joint = (np.arange(m)[:, None] * bins * bins + fixed_bins[None, :] * bins + mb)
    counts = np.bincount(joint.ravel(), minlength=m * bins * bins)
    p = counts.reshape(m, bins, bins) / xs.size
    pi = p.sum(axis=2)
    pj = p.sum(axis=1)
    denom = pi[:, :, None] * pj[:, None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p / denom), 0.0)
    mi = terms.sum(axis=(1, 2))
    return np.where(ok, mi, -np.inf)


def _sample_coords(rng, h, w, cfg: PyramidConfig):
    n = h * w
    if cfg.samples >= n and not cfg.random_sample_region:
        ys, xs = np.divmod(np.arange(n), w)
        return xs.astype(np.float64), ys.astype(np.float64)
    if cfg.random_sample_region:
        side_h, side_w = max(2, h // 2), max(2, w // 2)
        top = int(rng.integers(h - side_h + 1))
        left = int(rng.integers(w - side_w + 1))
        xs = rng.integers(left, left + side_w, size=cfg.samples)
        ys = rng.integers(top, top + side_h, size=cfg.samples)
    else:
        xs = rng.integers(0, w, size=cfg.samples)
        ys = rng.integers(0, h, size=cfg.samples)
    return xs.astype(np.float64), ys.astype(np.float64)


def register_affine(fixed: GrayImage, moving: GrayImage,
                    cfg: PyramidConfig = PyramidConfig(), seed: int = 0,
                    bins: int = 32) -> RegistrationResult:
    """Maximize MI(warp(moving), fixed) over the six affine parameters.

    Coarse-to-fine over the configured pyramid; each level runs
    max_iterations of normalized finite-difference ascent with step length
    0.1/(1 + iteration/100) on a per-iteration random pixel sample. Steps
    that would make the transform singular are rejected. The result is the
    argmax of full-image MI over identity, each level's end point and each
    level's best sampled point.
    """
    started = time.perf_counter()
    rng = np.random.default_rng([seed, 51])
    fixed_pyr = _build_pyramid(fixed.pixels, cfg.num_resolutions, cfg.pyramid)
    moving_pyr = _build_pyramid(moving.pixels, cfg.num_resolutions, cfg.pyramid)
    levels = min(len(fixed_pyr), len(moving_pyr))

    params = np.array([1.0, 0.0, 0.0, 1.0, 0.0, 0.0])
    candidates = [params.copy()]
    traces = []
    deltas = np.full(6, _FD_DELTA)

    for level in range(levels - 1, -1, -1):
        fpx = fixed_pyr[level]
        mpx = moving_pyr[level]
        h, w = fpx.shape
        trace = []
        best_mi = -np.inf
        best_params = params.copy()
        for it in range(cfg.max_iterations):
            xs, ys = _sample_coords(rng, h, w, cfg)
            fixed_bins = np.minimum(
                (fpx[ys.astype(np.int64), xs.astype(np.int64)] * bins).astype(np.int64),
                bins - 1)
            rows = np.tile(params, (13, 1))
            for k in range(6):
                rows[1 + 2 * k, k] += deltas[k]
                rows[2 + 2 * k, k] -= deltas[k]
            mi = _mi_of_params(rows, fixed_bins, xs, ys, mpx, bins)
            if mi[0] > best_mi:
                best_mi = mi[0]
                best_params = params.copy()
            trace.append(best_mi)

            grad = (mi[1::2] - mi[2::2]) / (2 * deltas)
            grad = np.where(np.isfinite(grad), grad, 0.0)
            norm = np.sqrt((grad ** 2).sum())
            if norm == 0:
                continue
            step = 0.1 / (1.0 + it / 100.0)
            proposal = params + step * grad / norm
            det = proposal[0] * proposal[3] - proposal[1] * proposal[2]
            if abs(det) < _DET_EPS:
                continue  # reject the step; keep current parameters
            params = proposal
        traces.append(trace)
        candidates.append(best_params.copy())
        candidates.append(params.copy())

    # pick the winner by deterministic full-image MI at the finest scale
    best_t, best_full = None, -np.inf
    for cand in candidates:
        t = AffineTransform.from_params(cand)
        if abs(t.det()) < _DET_EPS:
            continue
        moved = warp_affine(moving, t, fixed.width, fixed.height)
        full = mutual_information(fixed, moved, bins)
        if full > best_full:
            best_full = full
            best_t = t
    return RegistrationResult(best_t, best_full, traces,
                              time.perf_counter() - started)


# ---------------------------------------------------------------------------
# Random hyperparameter search


def trial_seed(seed: int, trial: int) -> int:
    return int(np.random.SeedSequence([seed, 61, trial]).generate_state(1)[0])


def sample_search_config(rng: np.random.Generator) -> dict:
    """One draw from the search grids; estimation flags are sampled but inert."""
    return {
        "num_resolutions": int(rng.choice(SEARCH_RESOLUTIONS)),
        "max_iterations": int(rng.choice(SEARCH_ITERATIONS)),
        "random_sample_region": bool(rng.integers(2)),
        "pyramid": str(rng.choice(PYRAMID_KINDS)),
        "automatic_parameter_estimation": bool(rng.integers(2)),
        "automatic_scales_estimation": bool(rng.integers(2)),
    }


def random_search(fixed: GrayImage, moving: GrayImage, trials: int,
                  seed: int = 0, bins: int = 32,
                  samples: int = 10_000) -> tuple[RegistrationResult, list[dict]]:
    """Run `trials` random configurations; returns (best by final MI, trial log)."""
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials}")
    rng = np.random.default_rng([seed, 60])
    best = None
    log = []
    for k in range(trials):
        config = sample_search_config(rng)
        cfg = PyramidConfig(
            num_resolutions=config["num_resolutions"],
            max_iterations=config["max_iterations"],
            samples=samples,
            random_sample_region=config["random_sample_region"],
            pyramid=config["pyramid"],
        )
        result = register_affine(fixed, moving, cfg, seed=trial_seed(seed, k),
                                 bins=bins)
        log.append({"trial": k, "config": config,
                    "final_mi": result.final_mi, "seconds": result.seconds})
        if best is None or result.final_mi > best.final_mi:
            best = result
    return best, log


# ---------------------------------------------------------------------------
# Exhaustive-MI identification (the slow baseline)


def identify_by_mi(query: GrayImage, plates: Sequence[GrayImage],
                   cfg: PyramidConfig, seed: int = 0, bins: int = 32,
                   query_id: str = "", ground_truth: int | None = None,
                   ) -> tuple[RankingResult, list[RegistrationResult]]:
    """Affinely register the query against every plate; rank by final MI."""
    results = []
    for j, plate in enumerate(plates):
        moving = plate
        if plate.shape != query.shape:
            moving = resize_bilinear(plate, query.width, query.height)
        results.append(register_affine(query, moving, cfg,
                                       seed=trial_seed(seed, j), bins=bins))
    scores = np.array([r.final_mi for r in results])
    ranking = rank_distances(-scores, query_id, ground_truth)
    return ranking, results


def make_mi_ranker(plates: Sequence[GrayImage], cfg: PyramidConfig,
                   seed: int = 0, bins: int = 32) -> Ranker:
    def ranker(img: GrayImage, ground_truth: int, query_id: str = "") -> RankingResult:
        ranking, _ = identify_by_mi(img, plates, cfg, seed=seed, bins=bins,
                                    query_id=query_id, ground_truth=ground_truth)
        return ranking
    return ranker


# ---------------------------------------------------------------------------
# Regression-network registration


@dataclass
class RegressorTrainResult:
    checkpoint: Checkpoint
    pretrain_losses: list
    finetune_losses: list
    finetune_best_mi: float | None


def _random_pretrain_transform(rng) -> AffineTransform:
    return make_affine(rotation_deg=rng.uniform(-10.0, 10.0),
                       scale=rng.uniform(0.92, 1.08),
                       tx=rng.uniform(-0.08, 0.08),
                       ty=rng.uniform(-0.08, 0.08))


def _crop_border(px: np.ndarray, fraction: float) -> np.ndarray:
    out = px.copy()
    bh = int(round(fraction * out.shape[0]))
    bw = int(round(fraction * out.shape[1]))
    if bh > 0:
        out[:bh] = 0.0
        out[-bh:] = 0.0
    if bw > 0:
        out[:, :bw] = 0.0
        out[:, -bw:] = 0.0
    return out


def _to_size(img: GrayImage, size: int) -> GrayImage:
    if img.shape != (size, size):
        return resize_bilinear(img, size, size)
    return img


def _mi_loss_and_grad(pred: np.ndarray, moving: GrayImage, fixed: GrayImage,
                      bins: int) -> tuple[float, np.ndarray, float]:
    """loss = -MI(warp(moving, pred), fixed) plus its FD gradient over pred."""
    h, w = fixed.shape
    ys, xs = np.divmod(np.arange(h * w), w)
    fixed_bins = np.minimum((fixed.pixels.ravel() * bins).astype(np.int64), bins - 1)
    rows = np.tile(pred, (13, 1))
    deltas = np.full(6, _FD_DELTA)
    for k in range(6):
        rows[1 + 2 * k, k] += deltas[k]
        rows[2 + 2 * k, k] -= deltas[k]
    mi = _mi_of_params(rows, fixed_bins, xs.astype(np.float64),
                       ys.astype(np.float64), moving.pixels, bins)
    grad_mi = (mi[1::2] - mi[2::2]) / (2 * deltas)
    grad_mi = np.where(np.isfinite(grad_mi), grad_mi, 0.0)
    return -float(mi[0]), -grad_mi, float(mi[0])


def predict_affine(checkpoint: Checkpoint, moving: GrayImage,
                   fixed: GrayImage) -> AffineTransform:
    """Single forward pass of the regression network on (moving ‖ fixed)."""
    size = checkpoint.spec.input_size
    x = np.stack([_to_size(moving, size).pixels,
                  _to_size(fixed, size).pixels]).astype(np.float32)[None]
    out, _ = forward(checkpoint.spec, checkpoint.params, x, keep_state=False)
    return AffineTransform.from_params(out[0])


def train_regressor(plates: Sequence[GrayImage],
                    pairs: Sequence[tuple[GrayImage, GrayImage]] = (),
                    *,
                    pretrain_iterations: int = 3000,
                    finetune_iterations: int = 100,
                    learning_rate: float = 1e-4,
                    seed: int = 0,
                    bins: int = 32,
                    input_size: int = 128,
                    crop_fraction: float = 0.05) -> RegressorTrainResult:
    """Two-stage training of the affine regression network.

    Stage 1 self-supervises on the plates alone: a random transform of a
    plate (lightly border-cropped) plays the fixed image, the plate itself
    the moving image, and the network learns to output parameters whose warp
    maximizes MI between moved and fixed. MI is not differentiable under
    hard binning, so its gradient over the six outputs comes from central
    finite differences and enters the network as the upstream gradient.

    Stage 2 fine-tunes on real (fixed slice, moving plate) pairs without any
    added transforms, keeping the parameters that scored the best MI on them.
    """
    spec = default_regression_net(input_size)
    init_rng = np.random.default_rng([seed, 71])
    loop_rng = np.random.default_rng([seed, 72])
    params = init_regression_params(spec, init_rng)
    adam = AdamState.init(params, learning_rate)

    plates_sized = [_to_size(p, input_size) for p in plates]
    pretrain_losses = []
    for _ in range(pretrain_iterations):
        plate = plates_sized[int(loop_rng.integers(len(plates_sized)))]
        t_true = _random_pretrain_transform(loop_rng)
        fixed_px = _crop_border(warp_affine(plate, t_true).pixels, crop_fraction)
        fixed = GrayImage(fixed_px)
        x = np.stack([plate.pixels, fixed_px]).astype(np.float32)[None]
        out, state = forward(spec, params, x)
        loss, gpred, _ = _mi_loss_and_grad(out[0].astype(np.float64), plate,
                                           fixed, bins)
        grads, _ = backward(spec, params, state,
                            gpred.astype(np.float32)[None], need_input_grad=False)
        params, adam = adam_step(adam, params, grads)
        pretrain_losses.append(loss)

    finetune_losses = []
    finetune_best_mi = None
    if pairs and finetune_iterations > 0:
        best_params = [p.copy() for p in params]
        best_mi = -np.inf
        for it in range(finetune_iterations):
            fixed, moving = pairs[it % len(pairs)]
            fixed = _to_size(fixed, input_size)
            moving = _to_size(moving, input_size)
            x = np.stack([moving.pixels, fixed.pixels]).astype(np.float32)[None]
            out, state = forward(spec, params, x)
            loss, gpred, mi = _mi_loss_and_grad(out[0].astype(np.float64),
                                                moving, fixed, bins)
            if mi > best_mi:
                best_mi = mi
                best_params = [p.copy() for p in params]
            grads, _ = backward(spec, params, state,
                                gpred.astype(np.float32)[None], need_input_grad=False)
            params, adam = adam_step(adam, params, grads)
            finetune_losses.append(loss)
        params = best_params
        finetune_best_mi = float(best_mi)

    step = pretrain_iterations + (finetune_iterations if pairs else 0)
    checkpoint = Checkpoint(spec, params, step=step, seed=seed)
    return RegressorTrainResult(checkpoint, pretrain_losses, finetune_losses,
                                finetune_best_mi)
