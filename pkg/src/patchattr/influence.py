"""Patch-wise influence scores and the analytic score functions behind them.

A query patch ``x`` (taken from the noised query image) is compared with
every zero-padded patch ``u`` of every training image through the Gaussian
log-weight ``-||x - sqrt(abar) u||^2 / (2 (1 - abar))``. Normalizing those
log-weights over the whole training patch set gives the patch-wise
influence of ``u`` on the query location.

Two interchangeable distance backends exist:

``naive``
    unfolds training patches explicitly and broadcasts each query patch
    against them (``O(N L^2 C P^2)`` memory for a full dataset).
``fast``
    expands the square, ``||x||^2 - 2 sqrt(abar) <x, u> + abar ||u||^2``,
    where ``<x, u>`` is a cross-correlation of the query patch over the
    padded training image and ``||u||^2`` is a sliding box sum of squared
    pixels precomputed once per training image. Training images are
    processed in fixed-size chunks so the only full-size buffer is the
    ``B x N x L^2`` score output.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numba
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import logsumexp, softmax
from threadpoolctl import threadpool_limits

from .core import (
    Dataset,
    DiffusionSchedule,
    ImageTensor,
    NoisyImage,
    PatchView,
    downsample,
    pad_for_patches,
    unfold_patches,
)
from .exceptions import ConfigurationError, ShapeError

# Terms more than this many nats below a row maximum are skipped. Each is
# below e^-40 (4e-18) of the row's largest term, so a row of L*L patches
# loses at most L*L * 4e-18 of its sum in relative terms.
LOG_CUTOFF = 40.0

BACKENDS = ("fast", "naive")


@dataclass(frozen=True)
class Scale:
    """Patch geometry at one resolution.

    Patches are extracted at ``patch_size`` and mean-pooled with
    ``window`` before comparison; ``window == 1`` is the original scale.
    """

    patch_size: int
    window: int = 1

    def __post_init__(self):
        if self.patch_size < 1 or self.window < 1:
            raise ConfigurationError("patch size and window must be >= 1")
        if self.patch_size < self.window:
            raise ShapeError(
                f"patch size {self.patch_size} smaller than pooling window {self.window}"
            )

    @property
    def tag(self) -> str:
        return "original" if self.window == 1 else "low"

    @property
    def reduced(self) -> int:
        return self.patch_size // self.window

    @classmethod
    def original(cls, P: int) -> "Scale":
        return cls(int(P), 1)

    @classmethod
    def low(cls, P: int, window: int = 2) -> "Scale":
        return cls(int(P), int(window))


def _as_scale(scale) -> Scale:
    if isinstance(scale, Scale):
        return scale
    if isinstance(scale, int):
        return Scale.original(scale)
    raise ConfigurationError(f"cannot interpret {scale!r} as a patch scale")


@dataclass(frozen=True, eq=False)
class DistanceMap:
    train_index: int
    center: tuple
    t: Optional[int]
    scale: str
    values: np.ndarray  # (L, L)


@dataclass(frozen=True, eq=False)
class LogWeightSummary:
    """Normalizer and per-training-image top-k log-weights for one query patch.

    ``topk_index[n]`` holds row-major training patch centers of image ``n``
    ordered from most to least influential, ``topk_logw[n]`` the matching
    unnormalized log-weights.
    """

    center: tuple
    t: Optional[int]
    scale: str
    log_normalizer: float
    topk_index: np.ndarray  # (N, k) int
    topk_logw: np.ndarray  # (N, k)
    side: int

    def weights(self) -> np.ndarray:
        return np.exp(self.topk_logw - self.log_normalizer)

    def image_scores(self) -> np.ndarray:
        return self.weights().sum(axis=1)

    def dense(self) -> np.ndarray:
        """``(N, L*L)`` influence with zeros outside each top-k set."""
        out = np.zeros((self.topk_index.shape[0], self.side * self.side))
        np.put_along_axis(out, self.topk_index, self.weights(), axis=1)
        return out


@dataclass(frozen=True, eq=False)
class ScoreField:
    t: int
    values: np.ndarray  # (C, L, L)
    mode: str


# ---------------------------------------------------------------------------
# query side

def query_kernels(x_t: np.ndarray, scale: Scale) -> np.ndarray:
    """Every query patch at ``scale``, flattened: ``(L*L, C*Pr*Pr)``."""
    patches = unfold_patches(x_t, scale.patch_size)  # (L, L, C, P, P)
    if scale.window > 1:
        patches = downsample(patches, scale.window)
    L = x_t.shape[-1]
    return patches.reshape(L * L, -1)


def _patch_kernels(query_patches, scale: Scale) -> np.ndarray:
    if isinstance(query_patches, PatchView):
        query_patches = [query_patches]
    arr = np.stack([p.values if isinstance(p, PatchView) else np.asarray(p) for p in query_patches])
    if arr.shape[-1] != scale.patch_size or arr.shape[-2] != scale.patch_size:
        raise ShapeError(
            f"query patches are {arr.shape[-2:]} but the scale expects {scale.patch_size}"
        )
    if scale.window > 1:
        arr = downsample(arr, scale.window)
    return arr.reshape(arr.shape[0], -1).astype(np.float64)


# ---------------------------------------------------------------------------
# training side

def _box_sum(a: np.ndarray, size: int, out_rows: int, out_cols: int) -> np.ndarray:
    """Sliding ``size x size`` sums over the last two axes via an integral image."""
    ii = np.zeros(a.shape[:-2] + (a.shape[-2] + 1, a.shape[-1] + 1))
    ii[..., 1:, 1:] = a.cumsum(-2).cumsum(-1)
    r, c = out_rows, out_cols
    return (ii[..., size:size + r, size:size + c] - ii[..., :r, size:size + c]
            - ii[..., size:size + r, :c] + ii[..., :r, :c])


def _dilated_box_sum(a: np.ndarray, size: int, step: int, out_side: int) -> np.ndarray:
    """``out[y, x] = sum_{i, j < size} a[y + step*i, x + step*j]``."""
    if step == 1:
        return _box_sum(a, size, out_side, out_side)
    out = np.empty(a.shape[:-2] + (out_side, out_side))
    for ry in range(step):
        for rx in range(step):
            ny = len(range(ry, out_side, step))
            nx = len(range(rx, out_side, step))
            if ny and nx:
                out[..., ry::step, rx::step] = _box_sum(a[..., ry::step, rx::step], size, ny, nx)
    return out


class TrainBank:
    """Precomputed training-side arrays for one patch scale.

    Holds the zero-padded (and, for the low scale, stride-1 window-averaged)
    training images plus the squared norm of every training patch, computed
    with integral-image box sums. Built once per ``(dataset, scale)`` and
    shared read-only by every query.
    """

    def __init__(self, images: np.ndarray, scale: Scale):
        images = np.asarray(images, dtype=np.float64)
        self.scale = scale
        self.n_images, self.channels, self.side, _ = images.shape
        w = scale.window
        padded = pad_for_patches(images, scale.patch_size)
        if w > 1:
            H = padded.shape[-1] - w + 1
            pooled = np.zeros(padded.shape[:2] + (H, H))
            for a in range(w):
                for b in range(w):
                    pooled += padded[..., a:a + H, b:b + H]
            pooled /= w * w
        else:
            pooled = padded
        self.pooled = pooled
        self.pooled.flags.writeable = False
        sq = (pooled * pooled).sum(axis=1)
        self.sq_norms = _dilated_box_sum(sq, scale.reduced, w, self.side)
        self.sq_norms.flags.writeable = False

    @property
    def dim(self) -> int:
        return self.channels * self.scale.reduced ** 2

    def patch_matrix(self, start: int, stop: int, abar: float) -> np.ndarray:
        """Augmented unfolded patches ``[u, abar*||u||^2, 1]`` for images ``start:stop``.

        Shape ``(n * L * L, dim + 2)``; only ever built for one chunk.
        """
        Pr, w, L = self.scale.reduced, self.scale.window, self.side
        span = w * (Pr - 1) + 1
        win = sliding_window_view(self.pooled[start:stop], (span, span), axis=(2, 3))
        win = win[:, :, :L, :L, ::w, ::w]  # (n, C, L, L, Pr, Pr)
        n = stop - start
        out = np.empty((n, L, L, self.dim + 2))
        out[..., : self.dim].reshape(n, L, L, self.channels, Pr, Pr)[...] = (
            win.transpose(0, 2, 3, 1, 4, 5)
        )
        out[..., self.dim] = abar * self.sq_norms[start:stop]
        out[..., self.dim + 1] = 1.0
        return out.reshape(n * L * L, self.dim + 2)


def _augmented_queries(kernels: np.ndarray, abar: float) -> np.ndarray:
    B, K = kernels.shape
    q = np.empty((B, K + 2))
    q[:, :K] = -2.0 * np.sqrt(abar) * kernels
    q[:, K] = 1.0
    q[:, K + 1] = np.einsum("bk,bk->b", kernels, kernels)
    return q


def _fast_distances(kernels: np.ndarray, bank: TrainBank, start: int, stop: int, abar: float):
    """Squared distances ``(B, n, L*L)`` between query kernels and patches of a chunk."""
    if kernels.shape[1] != bank.dim:
        raise ShapeError(
            f"query patches have {kernels.shape[1]} values, training patches {bank.dim}"
        )
    u = bank.patch_matrix(start, stop, abar)
    d = _augmented_queries(kernels, abar) @ u.T
    np.maximum(d, 0.0, out=d)
    return d.reshape(kernels.shape[0], stop - start, bank.side ** 2)


def _naive_distances(kernels: np.ndarray, images: np.ndarray, scale: Scale, abar: float):
    """Reference distances by explicit unfolding and broadcasting."""
    patches = unfold_patches(images, scale.patch_size)  # (n, L, L, C, P, P)
    if scale.window > 1:
        patches = downsample(patches, scale.window)
    n, L = images.shape[0], images.shape[-1]
    u = np.sqrt(abar) * patches.reshape(n, L * L, -1)
    if kernels.shape[1] != u.shape[-1]:
        raise ShapeError(
            f"query patches have {kernels.shape[1]} values, training patches {u.shape[-1]}"
        )
    out = np.empty((kernels.shape[0], n, L * L))
    for b, x in enumerate(kernels):
        diff = x - u
        out[b] = np.einsum("nck,nck->nc", diff, diff)
    return out


def _check_abar(abar: float) -> float:
    abar = float(abar)
    if not 0.0 < abar <= 1.0:
        raise ConfigurationError(f"abar must lie in (0, 1], got {abar}")
    return abar


def _train_array(train_img) -> np.ndarray:
    if isinstance(train_img, ImageTensor):
        data = train_img.data
    else:
        data = np.asarray(train_img, dtype=np.float64)
    if data.ndim == 2:
        data = data[None]
    return data


def distance_map_naive(query_patch: PatchView, train_img, abar: float, window: int = 1,
                       train_index: int = 0, t: Optional[int] = None) -> DistanceMap:
    """Distances from one query patch to every patch of one training image (reference)."""
    abar = _check_abar(abar)
    z = _train_array(train_img)
    scale = Scale(query_patch.size, window)
    if query_patch.values.shape[0] != z.shape[0]:
        raise ShapeError(f"channel mismatch: {query_patch.values.shape[0]} vs {z.shape[0]}")
    d = _naive_distances(_patch_kernels(query_patch, scale), z[None], scale, abar)
    L = z.shape[-1]
    return DistanceMap(train_index, query_patch.center, t, scale.tag, d[0, 0].reshape(L, L))


def distance_map_fast(query_patches: Sequence[PatchView], train_img, abar: float, window: int = 1,
                      train_index: int = 0, t: Optional[int] = None) -> List[DistanceMap]:
    """Distances from a batch of query patches to every patch of one training image."""
    abar = _check_abar(abar)
    if isinstance(query_patches, PatchView):
        query_patches = [query_patches]
    if len(query_patches) == 0:
        raise ConfigurationError("need at least one query patch")
    z = _train_array(train_img)
    sizes = {p.size for p in query_patches}
    if len(sizes) != 1:
        raise ShapeError(f"query patches of mixed sizes {sorted(sizes)}")
    if query_patches[0].values.shape[0] != z.shape[0]:
        raise ShapeError(f"channel mismatch: {query_patches[0].values.shape[0]} vs {z.shape[0]}")
    scale = Scale(sizes.pop(), window)
    bank = TrainBank(z[None], scale)
    d = _fast_distances(_patch_kernels(query_patches, scale), bank, 0, 1, abar)
    L = z.shape[-1]
    return [DistanceMap(train_index, p.center, t, scale.tag, d[b, 0].reshape(L, L))
            for b, p in enumerate(query_patches)]


# ---------------------------------------------------------------------------
# streaming reduction

_N_BUCKETS = 64


@numba.njit(cache=True, nogil=True)
def _reduce_rows(d, inv2s, k, cutoff, dmin, argmin, row_log, topk_log):  # pragma: no cover - jitted
    """Per row of ``d``: minimum, argmin, log-sum of weights and of the top-k weights.

    Weights are taken relative to the row minimum and entries more than
    ``cutoff`` nats below it are skipped. Top-k selection buckets the
    remaining distances and sorts only the bucket straddling the k-th
    value, which is exact and linear in the row length.
    """
    B, n, M = d.shape
    dv = np.empty(M)
    ev = np.empty(M)
    nb = 64
    counts = np.zeros(nb, dtype=np.int64)
    span = cutoff / inv2s
    scale = nb / span
    for b in range(B):
        for j in range(n):
            row = d[b, j]
            best = row[0]
            arg = 0
            for c in range(1, M):
                if row[c] < best:
                    best = row[c]
                    arg = c
            thr = best + span
            s = 0.0
            cnt = 0
            for c in range(M):
                v = row[c]
                if v <= thr:
                    e = np.exp(-(v - best) * inv2s)
                    s += e
                    dv[cnt] = v
                    ev[cnt] = e
                    cnt += 1
            if cnt <= k:
                ts = s
            else:
                counts[:] = 0
                for c in range(cnt):
                    counts[min(int((dv[c] - best) * scale), nb - 1)] += 1
                below = 0
                jb = 0
                while below + counts[jb] < k:
                    below += counts[jb]
                    jb += 1
                ts = 0.0
                m = 0
                for c in range(cnt):
                    q = min(int((dv[c] - best) * scale), nb - 1)
                    if q < jb:
                        ts += ev[c]
                    elif q == jb:
                        dv[m] = dv[c]
                        ev[m] = ev[c]
                        m += 1
                order = np.argsort(dv[:m])
                for c in range(k - below):
                    ts += ev[order[c]]
            dmin[b, j] = best
            argmin[b, j] = arg
            row_log[b, j] = np.log(s)
            topk_log[b, j] = np.log(ts)


@dataclass(frozen=True, eq=False)
class ScanResult:
    """Image-level reduction of one query image against a training bank.

    All log quantities are unnormalized log-weights; subtract
    ``log_normalizer[:, None]`` to get influence.
    """

    log_normalizer: np.ndarray  # (B,)
    topk_log: np.ndarray  # (B, N): log of summed top-k weights per training image
    best_index: np.ndarray  # (B, N): row-major center of the best patch per image
    best_logw: np.ndarray  # (B, N)

    def image_influence(self) -> np.ndarray:
        """Summed top-k influence, ``(B, N)``."""
        return np.exp(self.topk_log - self.log_normalizer[:, None])

    def best_weight(self) -> np.ndarray:
        return np.exp(self.best_logw - self.log_normalizer[:, None])


def scan(kernels: np.ndarray, bank: TrainBank, abar: float, k: int, variance: Optional[float] = None,
         backend: str = "fast", chunk_size: int = 8, batch_size: int = 1024,
         n_jobs: int = 1, train_images: Optional[np.ndarray] = None) -> ScanResult:
    """Reduce all query patches against all training patches in one streaming pass.

    Work is split into fixed chunks of ``chunk_size`` training images; each
    chunk is reduced independently and the per-chunk results are combined
    in chunk order, so the output does not depend on ``n_jobs``.
    """
    abar = _check_abar(abar)
    if k < 1:
        raise ConfigurationError(f"k must be >= 1, got {k}")
    if backend not in BACKENDS:
        raise ConfigurationError(f"unknown backend {backend!r}")
    if backend == "naive" and train_images is None:
        raise ConfigurationError("the naive backend needs the raw training images")
    variance = 1.0 - abar if variance is None else float(variance)
    if variance <= 0:
        raise ConfigurationError("abar = 1 leaves no noise variance for the Gaussian weights")
    inv2s = 1.0 / (2.0 * variance)
    kernels = np.ascontiguousarray(kernels, dtype=np.float64)
    B = kernels.shape[0]
    N, M = bank.n_images, bank.side ** 2
    k = int(min(k, M))
    bounds = [(s, min(s + chunk_size, N)) for s in range(0, N, chunk_size)]

    def work(bound):
        start, stop = bound
        n = stop - start
        out = (np.empty((B, n)), np.empty((B, n), dtype=np.int64), np.empty((B, n)), np.empty((B, n)))
        for b0 in range(0, B, batch_size):
            kb = kernels[b0:b0 + batch_size]
            if backend == "fast":
                d = _fast_distances(kb, bank, start, stop, abar)
            else:
                d = _naive_distances(kb, train_images[start:stop], bank.scale, abar)
            sl = slice(b0, b0 + kb.shape[0])
            _reduce_rows(d, inv2s, k, LOG_CUTOFF, *(a[sl] for a in out))
        return out

    with threadpool_limits(limits=1):
        if n_jobs > 1 and len(bounds) > 1:
            with ThreadPoolExecutor(max_workers=n_jobs) as ex:
                results = list(ex.map(work, bounds))
        else:
            results = [work(b) for b in bounds]

    dmin = np.concatenate([r[0] for r in results], axis=1)
    argmin = np.concatenate([r[1] for r in results], axis=1)
    row_log = np.concatenate([r[2] for r in results], axis=1)
    topk_log = np.concatenate([r[3] for r in results], axis=1)
    best_logw = -dmin * inv2s
    log_norm = logsumexp(best_logw + row_log, axis=1)
    return ScanResult(log_norm, best_logw + topk_log, argmin, best_logw)


# ---------------------------------------------------------------------------
# per-patch summaries

def _scale_from(P: int, scale) -> Scale:
    if scale is None or scale == "original":
        return Scale.original(P)
    if isinstance(scale, Scale):
        return scale
    if isinstance(scale, tuple) and scale[0] == "low":
        _, window, p_low = scale
        return Scale.low(p_low, window)
    raise ConfigurationError(f"cannot interpret scale {scale!r}")


def all_log_weights(x_t: np.ndarray, trainset: Dataset, abar: float, scale: Scale,
                    backend: str = "fast", variance: Optional[float] = None) -> np.ndarray:
    """Unnormalized log-weights of every (query center, training image, training center).

    Shape ``(Lq*Lq, N, L*L)``; materialized in full, so meant for small inputs.
    """
    abar = _check_abar(abar)
    variance = 1.0 - abar if variance is None else variance
    kernels = query_kernels(np.asarray(x_t, dtype=np.float64), scale)
    if backend == "fast":
        d = _fast_distances(kernels, TrainBank(trainset.images, scale), 0, len(trainset), abar)
    elif backend == "naive":
        d = _naive_distances(kernels, trainset.images, scale, abar)
    else:
        raise ConfigurationError(f"unknown backend {backend!r}")
    return -d / (2.0 * variance)


def patch_influence(query: NoisyImage, trainset: Dataset, t: Optional[int] = None, P: int = 3,
                    k: int = 100, scale=None, backend: str = "fast",
                    variance: Optional[float] = None) -> List[LogWeightSummary]:
    """Top-k patch influence summaries, one per query patch center.

    ``scale`` is ``None``/``"original"``, a :class:`Scale`, or
    ``("low", window, P_low)``. Ties among equal distances are broken by
    lower row-major training center (training images are kept separate).
    """
    if len(trainset) == 0:
        raise ConfigurationError("training set is empty")
    if k < 1:
        raise ConfigurationError(f"k must be >= 1, got {k}")
    t = query.t if t is None else t
    sc = _scale_from(P, scale)
    logw = all_log_weights(query.x_t, trainset, query.abar, sc, backend, variance)
    B, N, M = logw.shape
    lse = logsumexp(logw.reshape(B, -1), axis=1)
    kk = min(k, M)
    # stable sort on -logw keeps lower centers first among ties
    order = np.argsort(-logw, axis=2, kind="stable")[..., :kk]
    top = np.take_along_axis(logw, order, axis=2)
    L = query.x_t.shape[-1]
    return [
        LogWeightSummary((b // L, b % L), t, sc.tag, float(lse[b]), order[b], top[b], trainset.side)
        for b in range(B)
    ]


def multiscale_influence(summary_orig: LogWeightSummary, summary_low: LogWeightSummary,
                         gamma: float) -> np.ndarray:
    """Convex combination of original- and low-scale influence for one query patch.

    Returns a dense ``(N, L*L)`` array over training patches. A patch present
    in only one scale's top-k set contributes zero for the other scale.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ConfigurationError(f"gamma must lie in [0, 1], got {gamma}")
    if summary_orig.center != summary_low.center or summary_orig.t != summary_low.t:
        raise ConfigurationError(
            "summaries describe different query patches: "
            f"{summary_orig.center}@{summary_orig.t} vs {summary_low.center}@{summary_low.t}"
        )
    if gamma == 1.0:
        return summary_orig.dense()
    if gamma == 0.0:
        return summary_low.dense()
    return gamma * summary_orig.dense() + (1.0 - gamma) * summary_low.dense()


# ---------------------------------------------------------------------------
# analytic score functions

def _noisy_parts(x_t, schedule: Optional[DiffusionSchedule], t: Optional[int]):
    if isinstance(x_t, NoisyImage):
        return x_t.x_t, x_t.t, x_t.abar
    if schedule is None or t is None:
        raise ConfigurationError("raw arrays need both a schedule and a timestep")
    return np.asarray(x_t, dtype=np.float64), int(t), schedule.abar(t)


def global_score(x_t, trainset: Dataset, schedule: Optional[DiffusionSchedule] = None,
                 t: Optional[int] = None) -> ScoreField:
    """Exact score of the noised empirical distribution (a Gaussian mixture)."""
    if len(trainset) == 0:
        raise ConfigurationError("training set is empty")
    x, t, abar = _noisy_parts(x_t, schedule, t)
    centers = np.sqrt(abar) * trainset.images
    resid = centers - x  # (N, C, L, L)
    d = np.einsum("nijk,nijk->n", resid, resid)
    w = softmax(-d / (2.0 * (1.0 - abar)))
    s = np.tensordot(w, resid, axes=1) / (1.0 - abar)
    return ScoreField(t, s, "global")


def local_score(x_t, trainset: Dataset, t: Optional[int] = None, P: int = 3,
                schedule: Optional[DiffusionSchedule] = None, backend: str = "fast") -> ScoreField:
    """Score of the patch-local, translation-equivariant optimal denoiser.

    Each pixel's score is the weight-averaged displacement toward the center
    pixels of all training patches, weighted by the exact (untruncated)
    patch influence.
    """
    if len(trainset) == 0:
        raise ConfigurationError("training set is empty")
    x, t, abar = _noisy_parts(x_t, schedule, t)
    logw = all_log_weights(x, trainset, abar, Scale.original(P), backend)
    B = logw.shape[0]
    w = softmax(logw.reshape(B, -1), axis=1).reshape(logw.shape)  # (Lq2, N, L2)
    C, L = x.shape[0], x.shape[-1]
    centers = trainset.images.reshape(len(trainset), C, -1)  # (N, C, L2)
    pulled = np.einsum("bnm,ncm->cb", w, centers)  # sum_u W u0, (C, Lq2)
    mass = w.sum(axis=(1, 2))
    s = (np.sqrt(abar) * pulled - x.reshape(C, -1) * mass) / (1.0 - abar)
    return ScoreField(t, s.reshape(C, L, L), f"local({P})")
