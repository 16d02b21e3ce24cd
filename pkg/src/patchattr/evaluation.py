"""Linear datamodeling score, rank statistics and raw-pixel baselines."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

from .aggregation import AttributionMatrix
from .core import Dataset
from .exceptions import ConfigurationError, DataFormatError, ShapeError


@dataclass(eq=False)
class LDSInput:
    """Subset masks ``(M, N)`` and model outputs ``(M, Q)`` measured on each subset."""

    masks: np.ndarray
    outputs: np.ndarray
    query_ids: Tuple[str, ...]
    fingerprint: str = ""

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=bool)
        self.outputs = np.asarray(self.outputs, dtype=np.float64)
        self.query_ids = tuple(str(q) for q in self.query_ids)
        if self.masks.ndim != 2:
            raise ShapeError(f"masks must be M x N, got shape {self.masks.shape}")
        M = self.masks.shape[0]
        if self.outputs.shape != (M, len(self.query_ids)):
            raise ShapeError(
                f"outputs shape {self.outputs.shape} does not match {M} subsets x {len(self.query_ids)} queries"
            )
        empty = np.flatnonzero(~self.masks.any(axis=1))
        if empty.size:
            raise DataFormatError(f"subset {int(empty[0])} selects no training example")
        if not np.all(np.isfinite(self.outputs)):
            raise DataFormatError("model outputs must be finite")

    @property
    def M(self) -> int:
        return self.masks.shape[0]


@dataclass(frozen=True)
class LDSReport:
    query_ids: Tuple[str, ...]
    rho: Tuple[Optional[float], ...]  # None marks a degenerate (constant) rank vector
    M: int
    method: str = "nda"

    @property
    def valid(self) -> np.ndarray:
        return np.array([r for r in self.rho if r is not None], dtype=np.float64)

    @property
    def n_degenerate(self) -> int:
        return sum(r is None for r in self.rho)

    @property
    def mean(self) -> float:
        v = self.valid
        return float(v.mean()) if v.size else math.nan

    @property
    def abs_mean(self) -> float:
        v = self.valid
        return float(np.abs(v).mean()) if v.size else math.nan

    @property
    def se(self) -> float:
        v = self.valid
        return float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else math.nan


def attribution_prediction(matrix: AttributionMatrix, mask, query_id: str) -> float:
    """Predicted effect of training on ``mask``: the sum of the selected scores."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (len(matrix.train_ids),):
        raise ShapeError(f"mask of length {mask.size} for {len(matrix.train_ids)} training images")
    return float(matrix.row(query_id)[mask].sum())


def spearman(a: Sequence[float], b: Sequence[float]) -> Optional[float]:
    """Rank correlation with averaged ranks for ties; ``None`` if either input is constant."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 1 or a.shape != b.shape:
        raise ShapeError(f"need two equal-length vectors, got {a.shape} and {b.shape}")
    if a.size < 2:
        raise ShapeError("need at least two values")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise DataFormatError("rank correlation inputs must be finite")
    ra = rankdata(a) - (a.size + 1) / 2.0
    rb = rankdata(b) - (b.size + 1) / 2.0
    saa, sbb = float(ra @ ra), float(rb @ rb)
    if saa == 0.0 or sbb == 0.0:
        return None
    rho = float(ra @ rb) / math.sqrt(saa * sbb)
    return min(1.0, max(-1.0, rho))


def _predictions(matrix: AttributionMatrix, masks: np.ndarray, query_ids) -> np.ndarray:
    rows = np.stack([matrix.row(q) for q in query_ids])  # (Q, N)
    return masks.astype(np.float64) @ rows.T  # (M, Q)


def lds(matrix: AttributionMatrix, data: LDSInput, method: str = "nda") -> LDSReport:
    """Per-query rank correlation between model outputs and predicted subset effects."""
    if data.M < 2:
        raise ConfigurationError(f"need at least 2 subsets, got {data.M}")
    if data.masks.shape[1] != len(matrix.train_ids):
        raise ShapeError(f"masks cover {data.masks.shape[1]} examples, matrix has {len(matrix.train_ids)}")
    g = _predictions(matrix, data.masks, data.query_ids)
    rho = tuple(spearman(data.outputs[:, j], g[:, j]) for j in range(len(data.query_ids)))
    return LDSReport(data.query_ids, rho, data.M, method)


def raw_pixel_baseline(queries: Dataset, trainset: Dataset, metric: str = "cosine") -> AttributionMatrix:
    """Inner product or cosine similarity of flattened pixels.

    Pairs involving a zero-norm image under ``cosine`` are NaN and flagged
    in the matrix's ``degenerate`` mask.
    """
    if metric not in ("dot", "cosine"):
        raise ConfigurationError(f"metric must be 'dot' or 'cosine', got {metric!r}")
    if queries.images.shape[1:] != trainset.images.shape[1:]:
        raise ShapeError(f"query shape {queries.images.shape[1:]} != train shape {trainset.images.shape[1:]}")
    X = queries.images.reshape(len(queries), -1)
    Z = trainset.images.reshape(len(trainset), -1)
    scores = X @ Z.T
    degenerate = np.zeros(scores.shape, dtype=bool)
    if metric == "cosine":
        nx = np.linalg.norm(X, axis=1)
        nz = np.linalg.norm(Z, axis=1)
        denom = np.outer(nx, nz)
        degenerate = denom == 0.0
        with np.errstate(invalid="ignore", divide="ignore"):
            scores = np.where(degenerate, np.nan, scores / np.where(degenerate, 1.0, denom))
    return AttributionMatrix(queries.ids, trainset.ids, scores, f"raw-pixel:{metric}",
                             degenerate if degenerate.any() else None)


def make_synthetic_lds(matrix: AttributionMatrix, M: int = 64, fraction: float = 0.5,
                       noise: float = 0.0, seed: int = 0) -> LDSInput:
    """Ground-truth outputs that the attribution predicts up to Gaussian noise.

    Each mask holds ``floor(fraction * N)`` (at least one) examples chosen
    uniformly. Outputs are ``g + noise * std(g) * e`` per query; an infinite
    ``noise`` gives pure noise independent of ``g``.
    """
    if not 0.0 < fraction < 1.0:
        raise ConfigurationError(f"fraction must lie in (0, 1), got {fraction}")
    if M < 1:
        raise ConfigurationError("M must be >= 1")
    if noise < 0 or math.isnan(noise):
        raise ConfigurationError("noise must be >= 0")
    N = len(matrix.train_ids)
    size = max(1, int(math.floor(fraction * N)))
    rng = np.random.default_rng(seed)
    masks = np.zeros((M, N), dtype=bool)
    for m in range(M):
        masks[m, rng.choice(N, size=size, replace=False)] = True
    g = _predictions(matrix, masks, matrix.query_ids)
    e = rng.standard_normal(g.shape)
    if math.isinf(noise):
        outputs = e
    elif noise == 0.0:
        outputs = g
    else:
        outputs = g + noise * g.std(axis=0, keepdims=True) * e
    return LDSInput(masks, outputs, matrix.query_ids, matrix.fingerprint)
