"""Estimator-style front end: ``fit`` on training images, ``transform`` queries.

``transform`` returns the dense ``(n_queries, n_train)`` score array;
``attribute`` returns the full :class:`AttributionMatrix` with ids,
fingerprint and patch provenance.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .aggregation import (
    REFERENCE_TIMESTEPS,
    AttributionMatrix,
    InfluenceConfig,
    TrainBankCache,
    attribute_batch,
)
from .core import DEFAULT_VALUE_RANGE, Dataset, build_schedule
from .evaluation import raw_pixel_baseline
from .exceptions import ConfigurationError, ShapeError


class NotFittedError(ConfigurationError, AttributeError):
    pass


def check_images(X, value_range=DEFAULT_VALUE_RANGE, ids: Optional[Sequence[str]] = None,
                 check_range: bool = True) -> Dataset:
    """Coerce ``X`` to a :class:`Dataset`; a single ``C x L x L`` image becomes a batch of one."""
    if isinstance(X, Dataset):
        ds = X if ids is None else Dataset(X.images, ids, X.value_range)
    else:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 3:
            X = X[None]
        if X.ndim != 4:
            raise ShapeError(f"expected images of shape (N, C, L, L), got {X.shape}")
        if X.shape[0] == 0:
            raise ShapeError("got zero images")
        ds = Dataset(X, ids, value_range)
    if check_range:
        ds.check_range()
    return ds


def check_is_fitted(est, attr: str = "trainset_") -> None:
    if not hasattr(est, attr):
        raise NotFittedError(f"{type(est).__name__} is not fitted yet; call fit first")


def _check_compatible(train: Dataset, queries: Dataset) -> None:
    if queries.images.shape[1:] != train.images.shape[1:]:
        raise ShapeError(
            f"queries have shape {queries.images.shape[1:]}, training images {train.images.shape[1:]}"
        )


class PatchInfluenceAttributor(TransformerMixin, BaseEstimator):
    """Nonparametric patch-influence attribution for diffusion training sets.

    Parameters mirror :class:`InfluenceConfig` plus the noise schedule and
    the worker count. Defaults follow the tuned configuration: timesteps
    100..500, ``k=100``, pooling window 2, ``gamma=0.75``.
    """

    def __init__(self, timesteps=REFERENCE_TIMESTEPS, patch_sizes=None, low_patch_sizes=None, window=2,
                 gammas=0.75, k=100, noise_mode="seeded", seed=0, draws=1, shared_noise=False,
                 backend="fast", low_variance_rescale=False, provenance_cap=16, chunk_size=8,
                 batch_size=1024, T=1000, beta_min=1e-4, beta_max=0.02, n_jobs=1):
        self.timesteps = timesteps
        self.patch_sizes = patch_sizes
        self.low_patch_sizes = low_patch_sizes
        self.window = window
        self.gammas = gammas
        self.k = k
        self.noise_mode = noise_mode
        self.seed = seed
        self.draws = draws
        self.shared_noise = shared_noise
        self.backend = backend
        self.low_variance_rescale = low_variance_rescale
        self.provenance_cap = provenance_cap
        self.chunk_size = chunk_size
        self.batch_size = batch_size
        self.T = T
        self.beta_min = beta_min
        self.beta_max = beta_max
        self.n_jobs = n_jobs

    def _config(self) -> InfluenceConfig:
        return InfluenceConfig(
            timesteps=self.timesteps, patch_sizes=self.patch_sizes, low_patch_sizes=self.low_patch_sizes,
            window=self.window, gammas=self.gammas, k=self.k, noise_mode=self.noise_mode, seed=self.seed,
            draws=self.draws, shared_noise=self.shared_noise, backend=self.backend,
            low_variance_rescale=self.low_variance_rescale, provenance_cap=self.provenance_cap,
            chunk_size=self.chunk_size, batch_size=self.batch_size,
        )

    def fit(self, X, y=None, ids: Optional[Sequence[str]] = None):
        if self.n_jobs < 1:
            raise ConfigurationError(f"n_jobs must be >= 1, got {self.n_jobs}")
        config = self._config()
        schedule = build_schedule(self.T, self.beta_min, self.beta_max)
        config.check_schedule(schedule)
        self.config_ = config
        self.schedule_ = schedule
        self.trainset_ = check_images(X, ids=ids)
        self.banks_ = TrainBankCache(self.trainset_)
        self.n_features_in_ = int(np.prod(self.trainset_.images.shape[1:]))
        return self

    def attribute(self, X, ids: Optional[Sequence[str]] = None, checkpoint_dir=None,
                  on_row=None) -> AttributionMatrix:
        check_is_fitted(self)
        queries = check_images(X, ids=ids)
        _check_compatible(self.trainset_, queries)
        return attribute_batch(queries, self.trainset_, self.schedule_, self.config_, self.n_jobs,
                               checkpoint_dir, self.banks_, on_row)

    def transform(self, X, ids: Optional[Sequence[str]] = None) -> np.ndarray:
        return self.attribute(X, ids).scores


class RawPixelAttributor(TransformerMixin, BaseEstimator):
    """Raw-pixel similarity baseline (``metric`` is ``"dot"`` or ``"cosine"``)."""

    def __init__(self, metric="cosine"):
        self.metric = metric

    def fit(self, X, y=None, ids: Optional[Sequence[str]] = None):
        if self.metric not in ("dot", "cosine"):
            raise ConfigurationError(f"metric must be 'dot' or 'cosine', got {self.metric!r}")
        self.trainset_ = check_images(X, ids=ids)
        self.n_features_in_ = int(np.prod(self.trainset_.images.shape[1:]))
        return self

    def attribute(self, X, ids: Optional[Sequence[str]] = None) -> AttributionMatrix:
        check_is_fitted(self)
        queries = check_images(X, ids=ids)
        _check_compatible(self.trainset_, queries)
        return raw_pixel_baseline(queries, self.trainset_, self.metric)

    def transform(self, X, ids: Optional[Sequence[str]] = None) -> np.ndarray:
        return self.attribute(X, ids).scores
