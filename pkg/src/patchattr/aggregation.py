"""Image-level attribution: from patch influence to a query x train matrix.

For every timestep in the configured set, the query is noised, each of its
patches distributes unit influence over all training patches, and each
training image collects the influence of its ``k`` most influential patches.
Contributions are summed over query locations, mixed across the original
and pooled scales with ``gamma_t``, and averaged over timesteps.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from .core import Dataset, DiffusionSchedule, ImageTensor, noise_image
from .exceptions import (
    ConfigurationError,
    DataFormatError,
    IncompleteMatrixError,
    LookupFailure,
    ShapeError,
)
from .influence import BACKENDS, Scale, TrainBank, query_kernels, scan

REFERENCE_TIMESTEPS = (100, 200, 300, 400, 500)

# Best patch sizes per timestep on CIFAR-2 (original and pooled scale).
_PATCH_TABLE = ((100, 5, 8), (200, 7, 8), (300, 9, 10), (400, 21, 21), (500, 21, 21))


def default_patch_size(t: int, low: bool = False) -> int:
    """Tuned patch size for timestep ``t``; timesteps past the table reuse its last row."""
    for t_max, p, p_low in _PATCH_TABLE:
        if t <= t_max:
            return p_low if low else p
    return _PATCH_TABLE[-1][2 if low else 1]


def _per_timestep(value, n: int, name: str, cast) -> Tuple:
    if np.ndim(value) == 0:
        return (cast(value),) * n
    value = tuple(cast(v) for v in value)
    if len(value) != n:
        raise ConfigurationError(f"{name} has {len(value)} entries for {n} timesteps")
    return value


@dataclass(frozen=True)
class InfluenceConfig:
    """All knobs of the attribution method.

    Per-timestep fields accept a scalar (broadcast) or one value per
    timestep; ``None`` patch sizes pick the tuned defaults.
    """

    timesteps: Tuple[int, ...] = REFERENCE_TIMESTEPS
    patch_sizes: Optional[Tuple[int, ...]] = None
    low_patch_sizes: Optional[Tuple[int, ...]] = None
    window: int = 2
    gammas: Tuple[float, ...] = 0.75
    k: int = 100
    noise_mode: str = "seeded"
    seed: int = 0
    draws: int = 1
    shared_noise: bool = False
    backend: str = "fast"
    low_variance_rescale: bool = False
    provenance_cap: Optional[int] = 16
    chunk_size: int = 8
    batch_size: int = 1024

    def __post_init__(self):
        ts = tuple(int(t) for t in np.atleast_1d(self.timesteps))
        if not ts:
            raise ConfigurationError("timesteps must be non-empty")
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ConfigurationError(f"timesteps must be strictly increasing, got {ts}")
        n = len(ts)
        ps = self.patch_sizes
        ps = tuple(default_patch_size(t) for t in ts) if ps is None else _per_timestep(ps, n, "patch_sizes", int)
        lps = self.low_patch_sizes
        lps = (tuple(default_patch_size(t, low=True) for t in ts) if lps is None
               else _per_timestep(lps, n, "low_patch_sizes", int))
        gammas = _per_timestep(self.gammas, n, "gammas", float)
        object.__setattr__(self, "timesteps", ts)
        object.__setattr__(self, "patch_sizes", ps)
        object.__setattr__(self, "low_patch_sizes", lps)
        object.__setattr__(self, "gammas", gammas)
        if min(ps + lps) < 1:
            raise ConfigurationError("patch sizes must be >= 1")
        if not all(0.0 <= g <= 1.0 for g in gammas):
            raise ConfigurationError(f"gammas must lie in [0, 1], got {gammas}")
        if self.window < 1:
            raise ConfigurationError("window must be >= 1")
        for g, p in zip(gammas, lps):
            if g < 1.0 and p < self.window:
                raise ConfigurationError(f"low-scale patch size {p} smaller than window {self.window}")
        if self.k < 1:
            raise ConfigurationError(f"k must be >= 1, got {self.k}")
        if self.noise_mode not in ("seeded", "zero"):
            raise ConfigurationError(f"noise_mode must be 'seeded' or 'zero', got {self.noise_mode!r}")
        if self.seed < 0:
            raise ConfigurationError("seed must be non-negative")
        if self.draws < 1:
            raise ConfigurationError("draws must be >= 1")
        if self.backend not in BACKENDS:
            raise ConfigurationError(f"backend must be one of {BACKENDS}, got {self.backend!r}")
        if self.provenance_cap is not None and self.provenance_cap < 0:
            raise ConfigurationError("provenance_cap must be >= 0 or None")
        if self.chunk_size < 1 or self.batch_size < 1:
            raise ConfigurationError("chunk_size and batch_size must be >= 1")

    def check_schedule(self, schedule: DiffusionSchedule) -> None:
        for t in self.timesteps:
            schedule.check_timestep(t)

    def scales(self, i: int) -> Tuple[Optional[Scale], Optional[Scale]]:
        """Original and low scale needed at timestep index ``i`` (``None`` if weight is 0)."""
        g = self.gammas[i]
        orig = Scale.original(self.patch_sizes[i]) if g > 0.0 else None
        low = Scale.low(self.low_patch_sizes[i], self.window) if g < 1.0 else None
        return orig, low

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("timesteps", "patch_sizes", "low_patch_sizes", "gammas"):
            d[key] = list(d[key])
        return d


def fingerprint(cfg: InfluenceConfig, schedule: DiffusionSchedule, train_ids: Sequence[str]) -> str:
    """Stable hex digest of everything that determines an attribution matrix's columns."""
    payload = {
        "config": cfg.to_dict(),
        "betas_sha256": hashlib.sha256(np.ascontiguousarray(schedule.betas, "<f8").tobytes()).hexdigest(),
        "train_ids": list(train_ids),
    }
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


class ProvenanceEntry(NamedTuple):
    query_center: Tuple[int, int]
    train_center: Tuple[int, int]
    t: int
    scale: str
    patch_size: int
    draw: int
    weight: float


@dataclass(frozen=True)
class PatchProvenance:
    """Most influential patch matches behind one (query, training image) score.

    Each entry pairs a query location with its single best-matching patch in
    the training image at one timestep and scale; entries are sorted by
    descending weight.
    """

    query_id: str
    train_id: str
    entries: Tuple[ProvenanceEntry, ...]


@dataclass(eq=False)
class AttributionMatrix:
    query_ids: Tuple[str, ...]
    train_ids: Tuple[str, ...]
    scores: np.ndarray
    fingerprint: str = ""
    degenerate: Optional[np.ndarray] = None
    provenance: Optional[Dict[str, List[PatchProvenance]]] = field(default=None, repr=False)

    def __post_init__(self):
        self.query_ids = tuple(self.query_ids)
        self.train_ids = tuple(self.train_ids)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.shape != (len(self.query_ids), len(self.train_ids)):
            raise ShapeError(
                f"scores shape {self.scores.shape} does not match "
                f"{len(self.query_ids)} queries x {len(self.train_ids)} train ids"
            )

    @property
    def shape(self):
        return self.scores.shape

    def query_index(self, query_id: str) -> int:
        try:
            return self.query_ids.index(query_id)
        except ValueError:
            raise LookupFailure(f"unknown query id {query_id!r}") from None

    def train_index(self, train_id: str) -> int:
        try:
            return self.train_ids.index(train_id)
        except ValueError:
            raise LookupFailure(f"unknown train id {train_id!r}") from None

    def row(self, query_id: str) -> np.ndarray:
        return self.scores[self.query_index(query_id)]


class TrainBankCache:
    """Lazily built :class:`TrainBank` per patch scale for one dataset."""

    def __init__(self, trainset: Dataset):
        self.trainset = trainset
        self._banks: Dict[Scale, TrainBank] = {}

    def __getitem__(self, scale: Scale) -> TrainBank:
        bank = self._banks.get(scale)
        if bank is None:
            bank = self._banks[scale] = TrainBank(self.trainset.images, scale)
        return bank


def _select_provenance(cands, cap: Optional[int], query_id: str, train_ids) -> List[PatchProvenance]:
    if not cands:
        return [PatchProvenance(query_id, tid, ()) for tid in train_ids]
    weights = np.concatenate([c["weight"] for c in cands], axis=0)  # (R, N)
    best = np.concatenate([c["best"] for c in cands], axis=0)
    meta = []
    for c in cands:
        meta.extend((q, c["t"], c["scale"], c["patch_size"], c["draw"]) for q in c["centers"])
    R = weights.shape[0]
    take = R if cap is None else min(cap, R)
    order = np.argsort(-weights, axis=0, kind="stable")[:take]
    side = cands[0]["side"]
    out = []
    for n, tid in enumerate(train_ids):
        entries = []
        for r in order[:, n]:
            q, t, scale, p, draw = meta[r]
            tc = divmod(int(best[r, n]), side)
            entries.append(ProvenanceEntry(q, tc, t, scale, p, draw, float(weights[r, n])))
        out.append(PatchProvenance(query_id, tid, tuple(entries)))
    return out


def attribute_image(query, trainset: Dataset, schedule: DiffusionSchedule, cfg: InfluenceConfig,
                    query_id: Optional[str] = None, banks: Optional[TrainBankCache] = None,
                    n_jobs: int = 1) -> Tuple[np.ndarray, List[PatchProvenance]]:
    """Attribution row of one query against every training image, plus provenance."""
    if len(trainset) == 0:
        raise ConfigurationError("training set is empty")
    cfg.check_schedule(schedule)
    if not isinstance(query, ImageTensor):
        query = ImageTensor(query)
    if query.channels != trainset.channels:
        raise ShapeError(f"query has {query.channels} channels, training set {trainset.channels}")
    query_id = "query" if query_id is None else str(query_id)
    banks = banks if banks is not None else TrainBankCache(trainset)
    raw = trainset.images if cfg.backend == "naive" else None
    collect = cfg.provenance_cap is None or cfg.provenance_cap > 0
    L = query.side
    centers = [divmod(b, L) for b in range(L * L)]

    per_t = []
    cands = []
    for i, t in enumerate(cfg.timesteps):
        g = cfg.gammas[i]
        orig, low = cfg.scales(i)
        abar = schedule.abar(t)
        draw_rows = []
        for draw in range(cfg.draws):
            noisy = noise_image(query, t, schedule, cfg.noise_mode, cfg.seed, query_id, draw,
                                shared_across_t=cfg.shared_noise)
            parts = {}
            for scale in (orig, low):
                if scale is None:
                    continue
                variance = 1.0 - abar
                if scale.window > 1 and cfg.low_variance_rescale:
                    variance /= scale.window ** 2
                res = scan(query_kernels(noisy.x_t, scale), banks[scale], abar, cfg.k, variance,
                           cfg.backend, cfg.chunk_size, cfg.batch_size, n_jobs, raw)
                parts[scale.tag] = res.image_influence().sum(axis=0)
                if collect:
                    cands.append({"weight": res.best_weight(), "best": res.best_index, "centers": centers,
                                  "t": t, "scale": scale.tag, "patch_size": scale.patch_size,
                                  "draw": draw, "side": trainset.side})
            if g == 1.0:
                draw_rows.append(parts["original"])
            elif g == 0.0:
                draw_rows.append(parts["low"])
            else:
                draw_rows.append(g * parts["original"] + (1.0 - g) * parts["low"])
        row_t = draw_rows[0] if cfg.draws == 1 else np.sum(draw_rows, axis=0) / cfg.draws
        per_t.append(row_t)
    row = np.sum(per_t, axis=0) / len(per_t)
    prov = _select_provenance(cands, cfg.provenance_cap, query_id, trainset.ids) if collect else []
    return row, prov


# ---------------------------------------------------------------------------
# batches and checkpoints

_SCALE_CODES = {"original": 0, "low": 1}


def _row_file(query_id: str) -> str:
    # keyed by id so runs over different query subsets can share a directory
    return f"row-{hashlib.sha256(query_id.encode()).hexdigest()[:20]}.npz"


def _save_row(path: Path, fp: str, query_id: str, row: np.ndarray, prov: List[PatchProvenance]) -> None:
    flat = [(n, e) for n, p in enumerate(prov) for e in p.entries]
    arrays = {
        "fingerprint": np.array(fp),
        "query_id": np.array(query_id),
        "scores": row,
        "prov_counts": np.array([len(p.entries) for p in prov], dtype=np.int64),
        "prov_ints": np.array(
            [[*e.query_center, *e.train_center, e.t, _SCALE_CODES[e.scale], e.patch_size, e.draw]
             for _, e in flat], dtype=np.int64).reshape(-1, 8),
        "prov_weights": np.array([e.weight for _, e in flat], dtype=np.float64),
    }
    tmp = path.with_suffix(".tmp.npz")
    np.savez(tmp, **arrays)
    os.replace(tmp, path)


def _load_row(path: Path, fp: str, query_id: str, train_ids) -> Optional[Tuple[np.ndarray, list]]:
    try:
        with np.load(path, allow_pickle=False) as z:
            if str(z["fingerprint"]) != fp or str(z["query_id"]) != query_id:
                return None
            row = z["scores"].copy()
            counts = z["prov_counts"]
            ints = z["prov_ints"]
            weights = z["prov_weights"]
    except (OSError, KeyError, ValueError):
        return None
    if row.shape != (len(train_ids),):
        return None
    names = {v: k for k, v in _SCALE_CODES.items()}
    prov, pos = [], 0
    for tid, c in zip(train_ids, counts) if len(counts) else []:
        entries = tuple(
            ProvenanceEntry((int(a[0]), int(a[1])), (int(a[2]), int(a[3])), int(a[4]), names[int(a[5])],
                            int(a[6]), int(a[7]), float(w))
            for a, w in zip(ints[pos:pos + c], weights[pos:pos + c])
        )
        pos += c
        prov.append(PatchProvenance(query_id, tid, entries))
    return row, prov


def attribute_batch(queries: Dataset, trainset: Dataset, schedule: DiffusionSchedule, cfg: InfluenceConfig,
                    n_jobs: int = 1, checkpoint_dir=None, banks: Optional[TrainBankCache] = None,
                    on_row: Optional[Callable[[int, str], None]] = None) -> AttributionMatrix:
    """Attribution matrix for every query, one row per query in query order.

    With ``checkpoint_dir`` each finished row is written atomically and
    reused on the next call with the same fingerprint, so an interrupted run
    resumes where it stopped. Rows that raise are retried on the next call;
    if any remain missing an :class:`IncompleteMatrixError` is raised after
    all other rows are done.
    """
    if len(trainset) == 0:
        raise ConfigurationError("training set is empty")
    cfg.check_schedule(schedule)
    if queries.channels != trainset.channels:
        raise ShapeError(f"queries have {queries.channels} channels, training set {trainset.channels}")
    fp = fingerprint(cfg, schedule, trainset.ids)
    banks = banks if banks is not None else TrainBankCache(trainset)
    ckpt = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt is not None:
        ckpt.mkdir(parents=True, exist_ok=True)

    rows: List[Optional[np.ndarray]] = [None] * len(queries)
    prov: Dict[str, List[PatchProvenance]] = {}
    failed = {}
    for i, qid in enumerate(queries.ids):
        path = ckpt / _row_file(qid) if ckpt is not None else None
        loaded = _load_row(path, fp, qid, trainset.ids) if path is not None and path.exists() else None
        if loaded is None:
            try:
                row, p = attribute_image(queries[i], trainset, schedule, cfg, qid, banks, n_jobs)
            except (ConfigurationError, ShapeError, DataFormatError):
                raise
            except Exception as exc:  # noqa: BLE001 - recorded and surfaced below
                failed[i] = f"{type(exc).__name__}: {exc}"
                continue
            if path is not None:
                _save_row(path, fp, qid, row, p)
        else:
            row, p = loaded
        rows[i] = row
        prov[qid] = p
        if on_row is not None:
            on_row(i, qid)
    if failed:
        detail = "; ".join(f"row {i} ({queries.ids[i]}): {msg}" for i, msg in sorted(failed.items()))
        raise IncompleteMatrixError(f"{len(failed)} rows missing, rerun to retry: {detail}")
    return AttributionMatrix(queries.ids, trainset.ids, np.stack(rows), fp, provenance=prov)


def top_influencers(matrix: AttributionMatrix, query_id: str, m: int, sign: str = "proponents") -> List[str]:
    """``m`` training ids with the largest (proponents) or smallest (opponents) scores.

    Ties go to the lower training index; degenerate (NaN) entries rank last.
    """
    row = matrix.row(query_id)
    N = row.size
    if not 0 <= m <= N:
        raise ConfigurationError(f"m must lie in [0, {N}], got {m}")
    if sign == "proponents":
        key = -row
    elif sign == "opponents":
        key = row.copy()
    else:
        raise ConfigurationError(f"sign must be 'proponents' or 'opponents', got {sign!r}")
    order = np.argsort(key, kind="stable")
    return [matrix.train_ids[j] for j in order[:m]]
