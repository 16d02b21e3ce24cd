"""Images, datasets, patches and the forward-noising schedule.

Everything here is immutable after construction: arrays handed to the
constructors are copied and frozen, so instances can be shared freely
between worker threads.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import ConfigurationError, DataFormatError, LookupFailure, ShapeError

DEFAULT_VALUE_RANGE = (-1.0, 1.0)


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class ImageTensor:
    """A single ``C x L x L`` image."""

    data: np.ndarray
    value_range: Tuple[float, float] = DEFAULT_VALUE_RANGE

    def __post_init__(self):
        data = _frozen(self.data)
        if data.ndim != 3 or data.shape[1] != data.shape[2]:
            raise ShapeError(f"expected a C x L x L image, got shape {data.shape}")
        object.__setattr__(self, "data", data)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def side(self) -> int:
        return self.data.shape[1]

    def check_range(self) -> None:
        check_value_range(self.data[None], self.value_range)


def check_value_range(images: np.ndarray, value_range=DEFAULT_VALUE_RANGE) -> None:
    """Raise ``DataFormatError`` naming the first value outside ``value_range``."""
    lo, hi = value_range
    flat = np.asarray(images).reshape(-1)
    bad = ~np.isfinite(flat) | (flat < lo) | (flat > hi)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise DataFormatError(
            f"value {flat[i]!r} at flat index {i} outside declared range [{lo}, {hi}]"
        )


@dataclass(frozen=True, eq=False)
class Dataset:
    """An ordered collection of same-shape images with unique string ids.

    ``images`` has shape ``(N, C, L, L)``. Index order is the canonical
    column order of every attribution matrix built against this dataset.
    """

    images: np.ndarray
    ids: Tuple[str, ...] = None
    value_range: Tuple[float, float] = DEFAULT_VALUE_RANGE

    def __post_init__(self):
        images = _frozen(self.images)
        if images.ndim != 4 or images.shape[2] != images.shape[3]:
            raise ShapeError(f"expected N x C x L x L images, got shape {images.shape}")
        ids = self.ids
        if ids is None:
            ids = tuple(str(i) for i in range(images.shape[0]))
        ids = tuple(str(i) for i in ids)
        if len(ids) != images.shape[0]:
            raise ShapeError(f"{len(ids)} ids for {images.shape[0]} images")
        if len(set(ids)) != len(ids):
            seen = set()
            dup = next(i for i in ids if i in seen or seen.add(i))
            raise DataFormatError(f"duplicate image id {dup!r}")
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "value_range", tuple(float(v) for v in self.value_range))

    @classmethod
    def from_images(cls, images: Sequence[ImageTensor], ids: Optional[Iterable[str]] = None):
        if not images:
            raise DataFormatError("cannot build a dataset from zero images")
        shapes = {im.data.shape for im in images}
        if len(shapes) != 1:
            raise ShapeError(f"images have differing shapes: {sorted(shapes)}")
        return cls(np.stack([im.data for im in images]), ids, images[0].value_range)

    def __len__(self) -> int:
        return self.images.shape[0]

    def __getitem__(self, i: int) -> ImageTensor:
        return ImageTensor(self.images[i], self.value_range)

    @property
    def size(self) -> int:
        return len(self)

    @property
    def channels(self) -> int:
        return self.images.shape[1]

    @property
    def side(self) -> int:
        return self.images.shape[2]

    def index_of(self, image_id: str) -> int:
        try:
            return self.ids.index(image_id)
        except ValueError:
            raise LookupFailure(f"unknown image id {image_id!r}") from None

    def subset(self, indices) -> "Dataset":
        indices = list(indices)
        return Dataset(self.images[indices], [self.ids[i] for i in indices], self.value_range)

    def check_range(self) -> None:
        check_value_range(self.images, self.value_range)


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    """Variance schedule tables indexed by timestep ``t`` in ``[1, T]``."""

    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)

    def __post_init__(self):
        betas = _frozen(self.betas)
        if betas.ndim != 1 or betas.size == 0:
            raise ConfigurationError("betas must be a non-empty 1-d array")
        if not np.all((betas > 0) & (betas < 1)):
            raise ConfigurationError("every beta must lie in (0, 1)")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", _frozen(1.0 - betas))
        object.__setattr__(self, "alpha_bars", _frozen(np.cumprod(1.0 - betas)))

    @property
    def T(self) -> int:
        return self.betas.size

    def abar(self, t: int) -> float:
        """Cumulative signal level at ``t``; ``abar(0) == 1``."""
        if t == 0:
            return 1.0
        self.check_timestep(t)
        return float(self.alpha_bars[t - 1])

    def check_timestep(self, t: int) -> None:
        if not 1 <= int(t) <= self.T:
            raise ConfigurationError(f"timestep {t} outside [1, {self.T}]")


def build_schedule(T: int = 1000, beta_min: float = 1e-4, beta_max: float = 0.02) -> DiffusionSchedule:
    """Linear beta schedule from ``beta_min`` to ``beta_max`` over ``T`` steps."""
    if int(T) != T or T < 1:
        raise ConfigurationError(f"T must be a positive integer, got {T}")
    if not 0 < beta_min <= beta_max < 1:
        raise ConfigurationError(
            f"need 0 < beta_min <= beta_max < 1, got {beta_min}, {beta_max}"
        )
    if T == 1:
        betas = np.array([beta_min], dtype=np.float64)
    else:
        steps = np.arange(T, dtype=np.float64) / (T - 1)
        betas = beta_min + steps * (beta_max - beta_min)
    return DiffusionSchedule(betas)


def _noise_key(seed: int, image_id: str, t: Optional[int], draw: int) -> np.ndarray:
    digest = hashlib.sha256(str(image_id).encode("utf-8")).digest()
    words = list(np.frombuffer(digest[:16], dtype="<u4"))
    # timesteps start at 1, so 0 marks a draw shared across timesteps
    entropy = [int(seed) & 0xFFFFFFFF, int(seed) >> 32, *map(int, words),
               0 if t is None else int(t), int(draw)]
    return np.random.SeedSequence(entropy).generate_state(2, dtype=np.uint64)


def gaussian_noise(shape, seed: int, image_id: str, t: Optional[int], draw: int = 0) -> np.ndarray:
    """Standard normal draws from a counter-based stream keyed by ``(seed, id, t, draw)``.

    Pass ``t=None`` to share one draw across all timesteps.
    """
    gen = np.random.Generator(np.random.Philox(key=_noise_key(seed, image_id, t, draw)))
    return gen.standard_normal(shape)


@dataclass(frozen=True, eq=False)
class NoisyImage:
    base: ImageTensor
    t: int
    abar: float
    epsilon: Optional[np.ndarray]
    x_t: np.ndarray

    @property
    def data(self) -> np.ndarray:
        return self.x_t


def forward_noise(x: np.ndarray, abar: float, eps: Optional[np.ndarray]) -> np.ndarray:
    """Closed-form forward sample ``sqrt(abar) * x + sqrt(1 - abar) * eps``."""
    out = np.sqrt(abar) * np.asarray(x, dtype=np.float64)
    if eps is not None:
        out = out + np.sqrt(1.0 - abar) * eps
    return out


def noise_image(
    x,
    t: int,
    schedule: DiffusionSchedule,
    noise_mode: str = "seeded",
    seed: int = 0,
    image_id: str = "",
    draw: int = 0,
    shared_across_t: bool = False,
) -> NoisyImage:
    """Noise ``x`` to timestep ``t``.

    ``noise_mode`` is ``"seeded"`` (deterministic Gaussian stream) or
    ``"zero"`` (epsilon fixed to zero, so ``x_t = sqrt(abar_t) * x``).
    """
    if not isinstance(x, ImageTensor):
        x = ImageTensor(x)
    schedule.check_timestep(t)
    abar = schedule.abar(t)
    if noise_mode == "zero":
        eps = None
    elif noise_mode == "seeded":
        eps = gaussian_noise(x.data.shape, seed, image_id, None if shared_across_t else t, draw)
        eps.flags.writeable = False
    else:
        raise ConfigurationError(f"unknown noise mode {noise_mode!r}")
    return NoisyImage(x, int(t), abar, eps, _frozen(forward_noise(x.data, abar, eps)))


def patch_offset(P: int) -> int:
    """Offset from a patch's top-left corner to its center pixel."""
    return (P - 1) // 2


@dataclass(frozen=True, eq=False)
class PatchView:
    source: Optional[int]
    center: Tuple[int, int]
    size: int
    values: np.ndarray

    @property
    def center_pixel(self) -> np.ndarray:
        o = patch_offset(self.size)
        return self.values[:, o, o]


def extract_patch(img, center: Tuple[int, int], P: int, source: Optional[int] = None) -> PatchView:
    """``P x P`` window centred at ``center``, zero-filled outside the image."""
    if isinstance(img, (ImageTensor, NoisyImage)):
        data = img.data
    else:
        data = np.asarray(img, dtype=np.float64)
    if data.ndim == 2:
        data = data[None]
    C, L, _ = data.shape
    r, c = map(int, center)
    if P < 1:
        raise ConfigurationError(f"patch size must be >= 1, got {P}")
    if not (0 <= r < L and 0 <= c < L):
        raise ShapeError(f"center {center} outside a {L}x{L} image")
    o = patch_offset(P)
    out = np.zeros((C, P, P))
    r0, c0 = r - o, c - o
    rs, re = max(r0, 0), min(r0 + P, L)
    cs, ce = max(c0, 0), min(c0 + P, L)
    out[:, rs - r0:re - r0, cs - c0:ce - c0] = data[:, rs:re, cs:ce]
    return PatchView(source, (r, c), P, _frozen(out))


def pad_for_patches(images: np.ndarray, P: int) -> np.ndarray:
    """Zero-pad the two trailing axes so every center has a full ``P x P`` window."""
    o = patch_offset(P)
    widths = [(0, 0)] * (images.ndim - 2) + [(o, P - 1 - o)] * 2
    return np.pad(images, widths)


def unfold_patches(images: np.ndarray, P: int) -> np.ndarray:
    """All zero-padded patches: ``(..., C, L, L) -> (..., L, L, C, P, P)``.

    This materializes ``L^2 * C * P^2`` values per image; it backs the
    naive distance path and query-side extraction only.
    """
    images = np.asarray(images, dtype=np.float64)
    padded = pad_for_patches(images, P)
    win = sliding_window_view(padded, (P, P), axis=(-2, -1))
    # win: (..., C, L, L, P, P) -> (..., L, L, C, P, P)
    win = np.moveaxis(win, -5, -3)
    return np.ascontiguousarray(win)


def downsample(patch: np.ndarray, window: int) -> np.ndarray:
    """Non-overlapping ``window x window`` mean pooling over the last two axes.

    Trailing rows and columns that do not fill a window are dropped.
    """
    patch = np.asarray(patch, dtype=np.float64)
    window = int(window)
    if window < 1:
        raise ConfigurationError(f"window must be >= 1, got {window}")
    P = patch.shape[-1]
    if patch.shape[-2] < window or P < window:
        raise ShapeError(f"patch of size {patch.shape[-2:]} smaller than window {window}")
    if window == 1:
        return patch.copy()
    m = P // window
    n = patch.shape[-2] // window
    cropped = patch[..., : n * window, : m * window]
    shaped = cropped.reshape(*patch.shape[:-2], n, window, m, window)
    return shaped.mean(axis=(-3, -1))
