"""Dataset loaders, run configuration and on-disk artifacts.

Binary matrix layout (all integers little-endian)::

    b"NDAM"  u32 version  u64 rows  u64 cols  u32 flags
    u32 len + utf-8 fingerprint
    rows*cols float64 scores, row-major
    rows query ids, then cols train ids, each as u32 len + utf-8
    rows*cols bytes degenerate mask     (only if flags & 1)
"""

from __future__ import annotations

import csv
import io as _io
import math
import os
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

from .aggregation import AttributionMatrix, InfluenceConfig, PatchProvenance, top_influencers
from .core import DEFAULT_VALUE_RANGE, Dataset, build_schedule, patch_offset
from .evaluation import LDSInput, LDSReport
from .exceptions import (
    ConfigurationError,
    DataFormatError,
    FingerprintMismatchError,
    LookupFailure,
    ShapeError,
)

CIFAR_RECORD = 3073
CIFAR_SIDE = 32
LOSSLESS_SUFFIXES = (".png", ".bmp", ".ppm", ".tif", ".tiff")

MATRIX_MAGIC = b"NDAM"
MATRIX_VERSION = 1


def _atomic_write(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# datasets

def load_cifar_binary(path, labels: Optional[Iterable[int]] = None) -> Dataset:
    """Read a CIFAR-10 binary batch: per record one label byte then 3072 pixel bytes."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) == 0:
        raise DataFormatError(f"{path}: empty file")
    if len(raw) % CIFAR_RECORD:
        whole = len(raw) // CIFAR_RECORD
        raise DataFormatError(
            f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD}; "
            f"partial record starts at byte offset {whole * CIFAR_RECORD}"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    keep = np.arange(records.shape[0])
    if labels is not None:
        wanted = np.array(sorted({int(v) for v in labels}), dtype=np.int64)
        keep = np.flatnonzero(np.isin(records[:, 0], wanted))
        if keep.size == 0:
            raise DataFormatError(f"{path}: no records with labels {wanted.tolist()}")
    pixels = records[keep, 1:].reshape(-1, 3, CIFAR_SIDE, CIFAR_SIDE)
    images = pixels.astype(np.float64) / 127.5 - 1.0
    ids = [f"{path.stem}:{i}" for i in keep]
    return Dataset(images, ids, DEFAULT_VALUE_RANGE)


def cifar_labels(path, labels: Optional[Iterable[int]] = None) -> np.ndarray:
    """Label byte of every record kept by :func:`load_cifar_binary` with the same filter."""
    records = np.frombuffer(Path(path).read_bytes(), dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    lab = records[:, 0].astype(np.int64)
    if labels is not None:
        lab = lab[np.isin(lab, list(labels))]
    return lab


def _center_crop(im: Image.Image, size: int, name: str) -> Image.Image:
    w, h = im.size
    if size > min(w, h):
        raise ShapeError(f"{name}: crop {size} larger than image {w}x{h}")
    left, top = (w - size) // 2, (h - size) // 2
    return im.crop((left, top, left + size, top + size))


def load_image_directory(path, resize: Optional[int] = None, crop: Optional[int] = None) -> Dataset:
    """8-bit RGB images from a directory in lexicographic file order.

    Optional center crop to ``crop x crop`` then bilinear resize to
    ``resize x resize``. Every regular file must be a lossless raster.
    """
    path = Path(path)
    if not path.is_dir():
        raise DataFormatError(f"{path}: not a directory")
    files = sorted(p for p in path.iterdir() if p.is_file())
    if not files:
        raise DataFormatError(f"{path}: no image files")
    arrays, shape0 = [], None
    for f in files:
        if f.suffix.lower() not in LOSSLESS_SUFFIXES:
            raise DataFormatError(f"{f.name}: not a lossless raster ({', '.join(LOSSLESS_SUFFIXES)})")
        try:
            with Image.open(f) as im:
                im.load()
                if im.mode != "RGB":
                    raise DataFormatError(f"{f.name}: expected 8-bit RGB, got mode {im.mode}")
                if crop is not None:
                    im = _center_crop(im, int(crop), f.name)
                if resize is not None:
                    im = im.resize((int(resize), int(resize)), Image.BILINEAR)
                a = np.asarray(im, dtype=np.uint8)
        except (OSError, SyntaxError) as exc:
            raise DataFormatError(f"{f.name}: unreadable image ({exc})") from None
        if a.shape[0] != a.shape[1]:
            raise ShapeError(f"{f.name}: image is {a.shape[1]}x{a.shape[0]}, need square (use crop/resize)")
        if shape0 is None:
            shape0 = a.shape
        elif a.shape != shape0:
            raise ShapeError(f"{f.name}: size {a.shape[:2]} differs from {shape0[:2]}")
        arrays.append(a)
    images = np.stack(arrays).transpose(0, 3, 1, 2).astype(np.float64) / 127.5 - 1.0
    return Dataset(images, [f.name for f in files], DEFAULT_VALUE_RANGE)


def load_raw_tensor(path, C: int, L: int, value_range=DEFAULT_VALUE_RANGE, ids=None) -> Dataset:
    """u64 image count followed by ``N*C*L*L`` float32 values, both little-endian."""
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 8:
        raise DataFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    (n,) = struct.unpack("<Q", raw[:8])
    if n == 0:
        raise DataFormatError(f"{path}: dataset is empty")
    per = int(C) * int(L) * int(L)
    expected = 8 + 4 * n * per
    if len(raw) != expected:
        raise DataFormatError(
            f"{path}: {len(raw)} bytes, expected {expected} for N={n}, C={C}, L={L}"
        )
    values = np.frombuffer(raw, dtype="<f4", offset=8).astype(np.float64)
    lo, hi = value_range
    bad = ~np.isfinite(values) | (values < lo) | (values > hi)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise DataFormatError(f"{path}: value {values[i]!r} at index {i} outside [{lo}, {hi}]")
    return Dataset(values.reshape(n, C, L, L), ids, value_range)


def save_raw_tensor(path, dataset: Dataset) -> None:
    images = np.asarray(dataset.images)
    payload = struct.pack("<Q", images.shape[0]) + images.astype("<f4").tobytes()
    _atomic_write(path, payload)


@dataclass(frozen=True)
class DatasetSource:
    kind: str
    path: str
    channels: Optional[int] = None
    side: Optional[int] = None
    labels: Optional[Tuple[int, ...]] = None
    crop: Optional[int] = None
    resize: Optional[int] = None

    KINDS = ("cifar_binary", "image_directory", "raw_tensor")

    def __post_init__(self):
        if self.kind not in self.KINDS:
            raise ConfigurationError(f"unknown dataset kind {self.kind!r}; choose from {self.KINDS}")
        if self.kind == "raw_tensor" and (self.channels is None or self.side is None):
            raise ConfigurationError("raw_tensor sources need channels and side")

    def load(self) -> Dataset:
        if self.kind == "cifar_binary":
            ds = load_cifar_binary(self.path, self.labels)
        elif self.kind == "image_directory":
            ds = load_image_directory(self.path, self.resize, self.crop)
        else:
            ds = load_raw_tensor(self.path, self.channels, self.side)
        if self.channels is not None and ds.channels != self.channels:
            raise ShapeError(f"{self.path}: {ds.channels} channels, expected {self.channels}")
        if self.side is not None and ds.side != self.side:
            raise ShapeError(f"{self.path}: side {ds.side}, expected {self.side}")
        return ds


def infer_kind(path) -> str:
    path = Path(path)
    if path.is_dir():
        return "image_directory"
    if path.suffix == ".bin":
        return "cifar_binary"
    return "raw_tensor"


# ---------------------------------------------------------------------------
# configuration

def _ints(s: str) -> Tuple[int, ...]:
    return tuple(int(v) for v in str(s).replace(" ", "").split(",") if v)


def _floats(s: str) -> Tuple[float, ...]:
    return tuple(float(v) for v in str(s).replace(" ", "").split(",") if v)


def _bool(s) -> bool:
    if isinstance(s, bool):
        return s
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _opt_int(s):
    return None if s is None or str(s).lower() in ("", "none", "all") else int(s)


# key -> (parser, default, help)
CONFIG_SCHEMA: Dict[str, Tuple] = {
    "train": (str, None, "training set path"),
    "train_kind": (str, None, "cifar_binary | image_directory | raw_tensor (default: inferred)"),
    "query": (str, None, "query set path"),
    "query_kind": (str, None, "like train_kind"),
    "channels": (_opt_int, None, "image channels (required for raw_tensor)"),
    "side": (_opt_int, None, "image side L (required for raw_tensor)"),
    "labels": (_ints, None, "keep only these CIFAR labels, e.g. 1,7 for automobile/horse"),
    "crop": (_opt_int, None, "center-crop size for image directories (CelebA: 140)"),
    "resize": (_opt_int, None, "resize side for image directories (CelebA: 64)"),
    "timesteps": (_ints, "100,200,300,400,500", "timestep set (default 100..500)"),
    "patch_sizes": (_ints, "5,7,9,21,21", "original-scale patch size per timestep"),
    "low_patch_sizes": (_ints, "8,8,10,21,21", "pooled-scale patch size per timestep"),
    "window": (int, "2", "average-pooling window of the pooled scale"),
    "gammas": (_floats, "0.75", "weight of the original scale per timestep (0.75 works best)"),
    "k": (int, "100", "top patches kept per training image"),
    "noise_mode": (str, "seeded", "seeded | zero"),
    "seed": (int, "0", "noise seed"),
    "draws": (int, "1", "noise draws per timestep, averaged"),
    "shared_noise": (_bool, "false", "reuse one noise draw across timesteps"),
    "backend": (str, "fast", "fast (GEMM + box filter) | naive (explicit unfolding)"),
    "low_variance_rescale": (_bool, "false", "divide the pooled-scale noise variance by window^2"),
    "provenance_cap": (_opt_int, "16", "patch matches kept per (query, train) pair; 'all' for no cap"),
    "chunk_size": (int, "8", "training images per work item"),
    "batch_size": (int, "1024", "query patches per GEMM"),
    "T": (int, "1000", "diffusion steps"),
    "beta_min": (float, "1e-4", "first beta of the linear schedule"),
    "beta_max": (float, "0.02", "last beta of the linear schedule"),
    "out": (str, "nda-out", "output directory"),
    "workers": (int, "1", "worker threads; results do not depend on it"),
    "checkpoint": (_bool, "true", "write one checkpoint file per finished query row"),
}

_INFLUENCE_KEYS = ("timesteps", "patch_sizes", "low_patch_sizes", "window", "gammas", "k", "noise_mode",
                   "seed", "draws", "shared_noise", "backend", "low_variance_rescale", "provenance_cap",
                   "chunk_size", "batch_size")


def parse_config_text(text: str, origin: str = "<config>") -> Dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out: Dict[str, str] = {}
    for no, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{origin}:{no}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_SCHEMA:
            raise ConfigurationError(f"{origin}:{no}: unknown key {key!r}")
        if key in out:
            raise ConfigurationError(f"{origin}:{no}: duplicate key {key!r}")
        out[key] = value
    return out


def read_config(path) -> Dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, str(path))


@dataclass(frozen=True)
class RunConfig:
    influence: InfluenceConfig
    T: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 0.02
    train: Optional[DatasetSource] = None
    query: Optional[DatasetSource] = None
    out: str = "nda-out"
    workers: int = 1
    checkpoint: bool = True
    raw: Dict[str, str] = field(default_factory=dict, compare=False)

    @classmethod
    def from_mapping(cls, values: Dict[str, object]) -> "RunConfig":
        parsed = {}
        for key, (parse, default, _) in CONFIG_SCHEMA.items():
            v = values.get(key)
            if v is None:
                v = default
            if v is None:
                parsed[key] = None
                continue
            try:
                parsed[key] = parse(v) if isinstance(v, str) or parse in (_bool, _opt_int) else v
            except (TypeError, ValueError) as exc:
                raise ConfigurationError(f"bad value for {key}: {v!r} ({exc})") from None
        ts = parsed["timesteps"]
        # user-chosen timesteps fall back to the tuned per-timestep table
        sizes_default = "timesteps" in values and values.get("timesteps") is not None
        inf = {k: parsed[k] for k in _INFLUENCE_KEYS}
        for key in ("patch_sizes", "low_patch_sizes"):
            if values.get(key) is None and sizes_default:
                inf[key] = None
        if len(inf["gammas"]) == 1:
            inf["gammas"] = inf["gammas"][0]
        for key in ("patch_sizes", "low_patch_sizes"):
            if inf[key] is not None and len(inf[key]) == 1:
                inf[key] = inf[key][0]
        influence = InfluenceConfig(timesteps=ts, **{k: v for k, v in inf.items() if k != "timesteps"})
        if parsed["workers"] < 1:
            raise ConfigurationError("workers must be >= 1")
        build_schedule(parsed["T"], parsed["beta_min"], parsed["beta_max"])  # validates bounds

        def source(key):
            if parsed[key] is None:
                return None
            kind = parsed[f"{key}_kind"] or infer_kind(parsed[key])
            return DatasetSource(kind, parsed[key], parsed["channels"], parsed["side"], parsed["labels"],
                                 parsed["crop"], parsed["resize"])

        return cls(influence, parsed["T"], parsed["beta_min"], parsed["beta_max"], source("train"),
                   source("query"), parsed["out"], parsed["workers"], parsed["checkpoint"],
                   {k: str(v) for k, v in values.items() if v is not None})

    def schedule(self):
        return build_schedule(self.T, self.beta_min, self.beta_max)


# ---------------------------------------------------------------------------
# attribution matrices

def _pack_str(s: str) -> bytes:
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def matrix_bytes(matrix: AttributionMatrix) -> bytes:
    rows, cols = matrix.scores.shape
    flags = 1 if matrix.degenerate is not None else 0
    parts = [MATRIX_MAGIC, struct.pack("<IQQI", MATRIX_VERSION, rows, cols, flags), _pack_str(matrix.fingerprint),
             np.ascontiguousarray(matrix.scores, dtype="<f8").tobytes()]
    parts.extend(_pack_str(q) for q in matrix.query_ids)
    parts.extend(_pack_str(t) for t in matrix.train_ids)
    if flags & 1:
        parts.append(np.asarray(matrix.degenerate, dtype=np.uint8).tobytes())
    return b"".join(parts)


def write_matrix(path, matrix: AttributionMatrix) -> None:
    _atomic_write(path, matrix_bytes(matrix))


def read_matrix(path) -> AttributionMatrix:
    path = Path(path)
    buf = path.read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise DataFormatError(f"{path}: truncated at byte offset {pos}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    def take_str():
        (n,) = struct.unpack("<I", take(4))
        try:
            return take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise DataFormatError(f"{path}: invalid utf-8 near byte offset {pos}") from None

    if take(4) != MATRIX_MAGIC:
        raise DataFormatError(f"{path}: not an attribution matrix (bad magic)")
    version, rows, cols, flags = struct.unpack("<IQQI", take(24))
    if version != MATRIX_VERSION:
        raise DataFormatError(f"{path}: unsupported matrix version {version}")
    fp = take_str()
    scores = np.frombuffer(take(8 * rows * cols), dtype="<f8").reshape(rows, cols).astype(np.float64)
    qids = [take_str() for _ in range(rows)]
    tids = [take_str() for _ in range(cols)]
    degenerate = None
    if flags & 1:
        degenerate = np.frombuffer(take(rows * cols), dtype=np.uint8).reshape(rows, cols).astype(bool)
    if pos != len(buf):
        raise DataFormatError(f"{path}: {len(buf) - pos} trailing bytes after offset {pos}")
    return AttributionMatrix(qids, tids, scores, fp, degenerate)


def write_matrix_csv(path, matrix: AttributionMatrix) -> None:
    out = _io.StringIO()
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["query_id", *matrix.train_ids])
    for qid, row in zip(matrix.query_ids, matrix.scores):
        w.writerow([qid, *(repr(float(v)) for v in row)])
    _atomic_write(path, out.getvalue().encode("utf-8"))


def write_id_list(path, ids: Sequence[str]) -> None:
    _atomic_write(path, "".join(f"{i}\n" for i in ids).encode("utf-8"))


def counterfactual_ids(matrix: AttributionMatrix, query_id: str, m: int) -> List[str]:
    """Removal list: the ``m`` strongest proponents, strongest first."""
    return top_influencers(matrix, query_id, m, "proponents")


# ---------------------------------------------------------------------------
# LDS inputs and reports

def _manifest(path) -> Dict[str, str]:
    out = {}
    for no, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataFormatError(f"{path}:{no}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k] = v
    return out


def write_lds_input(manifest_path, data: LDSInput, method: str = "") -> None:
    manifest_path = Path(manifest_path)
    stem = manifest_path.stem
    masks_name, outputs_name = f"{stem}.masks.txt", f"{stem}.outputs.csv"
    lines = ["".join("1" if b else "0" for b in row) + "\n" for row in data.masks]
    _atomic_write(manifest_path.with_name(masks_name), "".join(lines).encode())
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(data.query_ids)
    for row in data.outputs:
        w.writerow([repr(float(v)) for v in row])
    _atomic_write(manifest_path.with_name(outputs_name), buf.getvalue().encode())
    text = f"masks = {masks_name}\noutputs = {outputs_name}\nfingerprint = {data.fingerprint}\n"
    if method:
        text += f"method = {method}\n"
    _atomic_write(manifest_path, text.encode())


def read_lds_input(manifest_path) -> LDSInput:
    manifest_path = Path(manifest_path)
    try:
        m = _manifest(manifest_path)
    except OSError as exc:
        raise DataFormatError(f"cannot read LDS manifest {manifest_path}: {exc}") from None
    for key in ("masks", "outputs"):
        if key not in m:
            raise DataFormatError(f"{manifest_path}: missing key {key!r}")
    base = manifest_path.parent
    masks = []
    for no, line in enumerate((base / m["masks"]).read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if set(line) - {"0", "1"}:
            raise DataFormatError(f"{m['masks']}:{no}: mask lines must contain only 0 and 1")
        masks.append([c == "1" for c in line])
    if len({len(r) for r in masks}) > 1:
        raise DataFormatError(f"{m['masks']}: mask lines have differing lengths")
    with open(base / m["outputs"], newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataFormatError(f"{m['outputs']}: empty output table")
    try:
        outputs = np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64)
    except ValueError as exc:
        raise DataFormatError(f"{m['outputs']}: {exc}") from None
    outputs = outputs.reshape(len(rows) - 1, len(rows[0]))
    return LDSInput(np.array(masks, dtype=bool).reshape(len(masks), -1), outputs, rows[0], m.get("fingerprint", ""))


def check_fingerprints(*fingerprints: str) -> None:
    """Refuse to combine artifacts produced under different configurations."""
    seen = {f for f in fingerprints if f}
    if len(seen) > 1:
        raise FingerprintMismatchError(f"artifacts come from different configurations: {sorted(seen)}")


def write_lds_report(out_dir, report: LDSReport, fingerprint: str = "") -> Tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["query_id", "rho", "abs_rho", "degenerate"])
    for q, r in zip(report.query_ids, report.rho):
        if r is None:
            w.writerow([q, "", "", 1])
        else:
            w.writerow([q, repr(r), repr(abs(r)), 0])
    csv_path = out_dir / f"lds_{report.method}.csv"
    _atomic_write(csv_path, buf.getvalue().encode())

    def pct(v):
        return "nan" if math.isnan(v) else f"{100 * v:.2f}%"

    summary = (
        f"method: {report.method}\n"
        f"fingerprint: {fingerprint}\n"
        f"subsets (M): {report.M}\n"
        f"queries: {len(report.query_ids)} ({report.n_degenerate} degenerate, excluded)\n"
        f"mean LDS: {pct(report.mean)} +/- {pct(report.se)} (SE)\n"
        f"mean |LDS|: {pct(report.abs_mean)}\n"
    )
    txt_path = out_dir / f"lds_{report.method}.txt"
    _atomic_write(txt_path, summary.encode())
    return csv_path, txt_path


# ---------------------------------------------------------------------------
# heatmaps

def _to_rgb8(img: np.ndarray, value_range=DEFAULT_VALUE_RANGE) -> np.ndarray:
    lo, hi = value_range
    a = np.clip((np.asarray(img, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)
    a = np.rint(a * 255.0).astype(np.uint8)
    if a.shape[0] == 1:
        a = np.repeat(a, 3, axis=0)
    return np.ascontiguousarray(a[:3].transpose(1, 2, 0))


def patch_rect(center: Tuple[int, int], patch_size: int, L: int, window: int = 1) -> Tuple[int, int, int, int]:
    """Inclusive ``(r0, c0, r1, c1)`` pixel box of a patch, clipped to the image.

    For a pooled patch only the rows and columns that fill a whole window
    are covered.
    """
    o = patch_offset(patch_size)
    extent = window * (patch_size // window)
    r, c = center
    r0, c0 = r - o, c - o
    return max(r0, 0), max(c0, 0), min(r0 + extent, L) - 1, min(c0 + extent, L) - 1


def highlight_mask(provenance: PatchProvenance, L: int, n_patches: Optional[int] = None,
                   window: int = 2) -> np.ndarray:
    mask = np.zeros((L, L), dtype=bool)
    entries = provenance.entries if n_patches is None else provenance.entries[:n_patches]
    for e in entries:
        r0, c0, r1, c1 = patch_rect(e.train_center, e.patch_size, L, window if e.scale == "low" else 1)
        if r1 >= r0 and c1 >= c0:
            mask[r0:r1 + 1, c0:c1 + 1] = True
    return mask


def render_overlay(train_img: np.ndarray, provenance: PatchProvenance, dim: float = 0.35,
                   n_patches: Optional[int] = None, window: int = 2, value_range=DEFAULT_VALUE_RANGE) -> np.ndarray:
    """Training image with highlighted patches kept as is and the rest scaled by ``dim``."""
    if not 0.0 <= dim <= 1.0:
        raise ConfigurationError(f"dim must lie in [0, 1], got {dim}")
    rgb = _to_rgb8(train_img, value_range)
    if dim == 1.0:
        return rgb
    mask = highlight_mask(provenance, rgb.shape[0], n_patches, window)
    out = rgb.astype(np.float64)
    out[~mask] *= dim
    return np.rint(out).astype(np.uint8)


def composite(tiles: Sequence[np.ndarray], gutter: int = 2) -> np.ndarray:
    """Tiles side by side separated by white gutters; width ``n*L + (n-1)*gutter``."""
    L = tiles[0].shape[0]
    width = len(tiles) * L + (len(tiles) - 1) * gutter
    out = np.full((L, width, 3), 255, dtype=np.uint8)
    for i, tile in enumerate(tiles):
        x = i * (L + gutter)
        out[:, x:x + L] = tile
    return out


def _safe(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", name)


def write_heatmap(matrix: AttributionMatrix, trainset: Dataset, queries: Dataset, query_id: str, out_dir,
                  m: int = 5, dim: float = 0.35, n_patches: Optional[int] = None, window: int = 2,
                  gutter: int = 2) -> List[Path]:
    """Overlay rasters for the query's top ``m`` proponents plus a composite strip."""
    if matrix.provenance is None or query_id not in matrix.provenance:
        raise LookupFailure(f"no provenance for query {query_id!r}")
    qi = queries.index_of(query_id)
    prov = {p.train_id: p for p in matrix.provenance[query_id]}
    top = top_influencers(matrix, query_id, m, "proponents")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths, tiles = [], [_to_rgb8(queries.images[qi], queries.value_range)]
    for tid in top:
        p = prov.get(tid)
        if p is None or not p.entries:
            raise LookupFailure(f"no provenance entries for pair ({query_id!r}, {tid!r})")
        tile = render_overlay(trainset.images[trainset.index_of(tid)], p, dim, n_patches, window,
                              trainset.value_range)
        path = out_dir / f"{_safe(query_id)}__{_safe(tid)}.png"
        Image.fromarray(tile).save(path)
        paths.append(path)
        tiles.append(tile)
    strip = out_dir / f"{_safe(query_id)}__composite.png"
    Image.fromarray(composite(tiles, gutter)).save(strip)
    paths.append(strip)
    return paths
