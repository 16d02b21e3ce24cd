"""Validation harnesses shared by the ``score-check`` and ``selftest`` commands.

``run_score_check`` replays shipped distance fixtures (produced by a
scalar-loop reference) through both backends and checks the analytic score
degeneracies. ``ACCEPTANCE`` maps criterion numbers to functions that each
return a :class:`CheckResult`.
"""

from __future__ import annotations

import math
import tempfile
import time
import tracemalloc
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .aggregation import InfluenceConfig, TrainBankCache, attribute_batch, attribute_image
from .core import Dataset, build_schedule, extract_patch, noise_image, patch_offset
from .evaluation import lds, make_synthetic_lds, raw_pixel_baseline, spearman
from .influence import (
    Scale,
    TrainBank,
    all_log_weights,
    distance_map_fast,
    distance_map_naive,
    global_score,
    local_score,
    query_kernels,
    scan,
)
from .io import write_matrix

FIXTURE_FILE = "score_fixtures.npz"
DISTANCE_TOL = 1e-4


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str = ""
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name}  ({self.seconds:.1f}s)  {self.detail}"


def _timed(name: str, fn: Callable[[], Tuple[bool, str]]) -> CheckResult:
    t0 = time.perf_counter()
    ok, detail = fn()
    return CheckResult(name, bool(ok), detail, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# fixtures

def loop_distances(query_patch: np.ndarray, train_img: np.ndarray, abar: float, P: int,
                   window: int = 1) -> np.ndarray:
    """Scalar-loop reference: distance from a (pooled) query patch to every training patch."""
    C, L, _ = train_img.shape
    o = patch_offset(P)
    Pr = P // window
    sa = math.sqrt(abar)
    out = np.zeros((L, L))
    for r in range(L):
        for c in range(L):
            total = 0.0
            for ch in range(C):
                for i in range(Pr):
                    for j in range(Pr):
                        acc = 0.0
                        for a in range(window):
                            for b in range(window):
                                y, x = r - o + i * window + a, c - o + j * window + b
                                if 0 <= y < L and 0 <= x < L:
                                    acc += train_img[ch, y, x]
                        u = acc / (window * window)
                        diff = query_patch[ch, i, j] - sa * u
                        total += diff * diff
            out[r, c] = total
    return out


def generate_fixtures(path, seed: int = 20240601) -> None:
    """Write the 8x8 distance fixture set used by :func:`run_score_check`."""
    rng = np.random.default_rng(seed)
    names, queries, trains, abars, windows, sizes, centers, expected = [], [], [], [], [], [], [], []
    combos = [(P, C, w) for P in (3, 5, 7) for C in (1, 3) for w in (1, 2)]
    for i, (P, C, w) in enumerate(combos):
        q = rng.uniform(-1, 1, (C, 8, 8))
        z = rng.uniform(-1, 1, (C, 8, 8))
        abar = float(rng.uniform(0.3, 0.99))
        center = (int(rng.integers(8)), int(rng.integers(8)))
        patch = extract_patch(q, center, P).values
        if w > 1:
            Pr = P // w
            patch = patch[:, :Pr * w, :Pr * w].reshape(C, Pr, w, Pr, w).mean(axis=(2, 4))
        names.append(f"P{P}-C{C}-w{w}-{i:02d}")
        q3 = np.zeros((3, 8, 8))
        q3[:C] = q
        z3 = np.zeros((3, 8, 8))
        z3[:C] = z
        queries.append(q3)
        trains.append(z3)
        abars.append(abar)
        windows.append(w)
        sizes.append((P, C))
        centers.append(center)
        expected.append(loop_distances(patch, z, abar, P, w))
    np.savez(path, names=np.array(names), queries=np.array(queries), trains=np.array(trains),
             abars=np.array(abars), windows=np.array(windows), sizes=np.array(sizes),
             centers=np.array(centers), expected=np.array(expected))


def load_fixtures(path=None) -> Dict[str, np.ndarray]:
    if path is None:
        ref = resources.files("patchattr") / "data" / FIXTURE_FILE
        with resources.as_file(ref) as p:
            with np.load(p) as z:
                return {k: z[k] for k in z.files}
    with np.load(path) as z:
        return {k: z[k] for k in z.files}


# ---------------------------------------------------------------------------
# score-check harness

def run_score_check(fixtures=None, perturb: Optional[Tuple[str, float]] = None) -> List[CheckResult]:
    """Fixture distances through both backends plus the score degeneracies.

    ``perturb=(case, delta)`` adds ``delta`` to one fast-path distance of
    ``case`` before comparison, to demonstrate the harness catches it.
    """
    fx = load_fixtures(fixtures)
    results = []
    for i, name in enumerate(fx["names"]):
        name = str(name)
        P, C = (int(v) for v in fx["sizes"][i])
        w = int(fx["windows"][i])
        abar = float(fx["abars"][i])
        q, z = fx["queries"][i][:C], fx["trains"][i][:C]
        center = tuple(int(v) for v in fx["centers"][i])
        want = fx["expected"][i]

        def one(name=name, P=P, w=w, abar=abar, q=q, z=z, center=center, want=want):
            patch = extract_patch(q, center, P)
            fast = distance_map_fast([patch], z, abar, window=w)[0].values.copy()
            naive = distance_map_naive(patch, z, abar, window=w).values
            if perturb is not None and perturb[0] == name:
                fast[0, 0] += perturb[1]
            err_f = float(np.abs(fast - want).max())
            err_n = float(np.abs(naive - want).max())
            return max(err_f, err_n) <= DISTANCE_TOL, f"fast err {err_f:.2e}, naive err {err_n:.2e}"

        results.append(_timed(f"distance {name}", one))

    def degeneracy():
        sched = build_schedule()
        rng = np.random.default_rng(7)
        worst = 0.0
        for t in (1, 100, 500, 900):
            ds = Dataset(rng.uniform(-1, 1, (6, 1, 1, 1)))
            x = noise_image(rng.uniform(-1, 1, (1, 1, 1)), t, sched, seed=t, image_id="deg")
            a = local_score(x, ds, P=1).values
            b = global_score(x, ds).values
            worst = max(worst, float(np.abs(a - b).max()))
        return worst <= 1e-10, f"max |local - global| = {worst:.2e}"

    results.append(_timed("local score degenerates to global score", degeneracy))
    results.append(_timed("singleton global score closed form", lambda: _singleton_check(np.random.default_rng(8))))
    return results


def _singleton_check(rng) -> Tuple[bool, str]:
    sched = build_schedule()
    worst = 0.0
    for t in (1, 50, 300, 999):
        z = rng.uniform(-1, 1, (3, 4, 4))
        x = noise_image(rng.uniform(-1, 1, (3, 4, 4)), t, sched, seed=1, image_id="s")
        abar = sched.abar(t)
        want = (math.sqrt(abar) * z - x.x_t) / (1.0 - abar)
        got = global_score(x, Dataset(z[None])).values
        worst = max(worst, float(np.abs(got - want).max()))
    return worst <= 1e-10, f"max err {worst:.2e}"


# ---------------------------------------------------------------------------
# acceptance criteria

def criterion_1(cases: int = 200, seed: int = 1) -> CheckResult:
    def run():
        rng = np.random.default_rng(seed)
        worst, t0 = 0.0, time.perf_counter()
        for _ in range(cases):
            L = int(rng.choice([8, 16]))
            C = int(rng.choice([1, 3]))
            P = int(rng.choice([3, 5, 7]))
            abar = float(rng.uniform(0.3, 0.99))
            q = rng.uniform(-1, 1, (C, L, L))
            z = rng.uniform(-1, 1, (C, L, L))
            centers = [tuple(int(v) for v in rng.integers(0, L, 2)) for _ in range(8)]
            patches = [extract_patch(q, c, P) for c in centers]
            fast = distance_map_fast(patches, z, abar)
            for p, f in zip(patches, fast):
                n = distance_map_naive(p, z, abar)
                worst = max(worst, float(np.abs(f.values - n.values).max()))
        elapsed = time.perf_counter() - t0
        return worst <= 1e-4 and elapsed < 30.0, f"{cases} cases, max |fast - naive| = {worst:.2e}, {elapsed:.1f}s"

    return _timed("1 oracle equivalence", run)


def criterion_2(seed: int = 2) -> CheckResult:
    def run():
        rng = np.random.default_rng(seed)
        sched = build_schedule()
        worst = 0.0
        trainset = Dataset(rng.uniform(-1, 1, (12, 3, 8, 8)))  # 768 patches
        for t in (10, 100, 300, 700):
            x = noise_image(rng.uniform(-1, 1, (3, 8, 8)), t, sched, seed=seed, image_id="mass")
            for scale in (Scale.original(5), Scale.low(6, 2)):
                logw = all_log_weights(x.x_t, trainset, x.abar, scale, "naive")
                res = scan(query_kernels(x.x_t, scale), TrainBank(trainset.images, scale), x.abar, 100)
                mass = np.exp(logw - res.log_normalizer[:, None, None]).sum(axis=(1, 2))
                worst = max(worst, float(np.abs(mass - 1.0).max()))
        return worst <= 1e-6, f"max |sum w - 1| = {worst:.2e} over 4 timesteps x 2 scales x 64 patches"

    return _timed("2 softmax mass", run)


def criterion_3(seed: int = 3) -> CheckResult:
    def run():
        rng = np.random.default_rng(seed)
        sched = build_schedule()
        worst = 0.0
        for t in (1, 10, 100, 500, 1000):
            ds = Dataset(rng.uniform(-1, 1, (int(rng.integers(1, 20)), 1, 1, 1)))
            x = noise_image(rng.uniform(-1, 1, (1, 1, 1)), t, sched, seed=t, image_id="c3")
            worst = max(worst, float(np.abs(local_score(x, ds, P=1).values - global_score(x, ds).values).max()))
        ok2, d2 = _singleton_check(rng)
        return worst <= 1e-10 and ok2, f"local vs global {worst:.2e}; singleton {d2}"

    return _timed("3 score degeneracy", run)


def _smooth_images(rng, n: int, C: int, L: int) -> np.ndarray:
    """Random images with both coarse structure and pixel noise, in [-1, 1]."""
    coarse = rng.uniform(-1, 1, (n, C, L // 4, L // 4))
    up = np.repeat(np.repeat(coarse, 4, axis=2), 4, axis=3)
    return np.clip(0.7 * up + 0.3 * rng.uniform(-1, 1, (n, C, L, L)), -1.0, 1.0)


def criterion_4(trials: int = 100, N: int = 500, L: int = 32, seed: int = 4) -> CheckResult:
    def run():
        rng = np.random.default_rng(seed)
        trainset = Dataset(_smooth_images(rng, N, 3, L))
        sched = build_schedule()
        cfg = InfluenceConfig(timesteps=(100,), gammas=1.0, noise_mode="zero", provenance_cap=0)
        banks = TrainBankCache(trainset)
        picks = rng.choice(N, size=trials, replace=trials > N)
        wins, margins = 0, []
        for j in picks:
            row, _ = attribute_image(trainset[j], trainset, sched, cfg, f"dup{j}", banks)
            others = np.delete(row, j)
            if row[j] > others.max():
                wins += 1
            margins.append(row[j] - others.max())
        return wins == trials, f"{wins}/{trials} strict argmax, min margin {min(margins):.3g}"

    return _timed("4 duplicate detection", run)


def _small_setup(seed: int, N: int = 12, L: int = 8, Q: int = 2):
    rng = np.random.default_rng(seed)
    trainset = Dataset(rng.uniform(-1, 1, (N, 3, L, L)))
    queries = Dataset(rng.uniform(-1, 1, (Q, 3, L, L)), [f"q{i}" for i in range(Q)])
    return trainset, queries, build_schedule()


def single_scale_scores(queries: Dataset, trainset: Dataset, schedule, cfg: InfluenceConfig, tag: str) -> np.ndarray:
    """Single-scale image attribution straight from the streaming scan."""
    rows = []
    for i, qid in enumerate(queries.ids):
        per_t = []
        for j, t in enumerate(cfg.timesteps):
            scale = Scale.original(cfg.patch_sizes[j]) if tag == "original" else Scale.low(cfg.low_patch_sizes[j], cfg.window)
            x = noise_image(queries[i], t, schedule, cfg.noise_mode, cfg.seed, qid)
            res = scan(query_kernels(x.x_t, scale), TrainBank(trainset.images, scale), x.abar, cfg.k)
            per_t.append(res.image_influence().sum(axis=0))
        rows.append(np.sum(per_t, axis=0) / len(per_t))
    return np.stack(rows)


def criterion_5(seed: int = 5) -> CheckResult:
    def run():
        trainset, queries, sched = _small_setup(seed)
        base = dict(timesteps=(100, 300), patch_sizes=3, low_patch_sizes=4, k=10, provenance_cap=0)
        out = []
        for g, tag in ((1.0, "original"), (0.0, "low")):
            cfg = InfluenceConfig(gammas=g, **base)
            got = attribute_batch(queries, trainset, sched, cfg).scores
            want = single_scale_scores(queries, trainset, sched, cfg, tag)
            out.append(got.tobytes() == want.tobytes())
        return all(out), f"gamma=1 identical: {out[0]}, gamma=0 identical: {out[1]}"

    return _timed("5 multiscale endpoints", run)


def criterion_6(seed: int = 6, Q: int = 100, N: int = 40, M: int = 64) -> CheckResult:
    def run():
        trainset, queries, sched = _small_setup(seed, N=N, L=8, Q=Q)
        cfg = InfluenceConfig(timesteps=(100,), patch_sizes=3, gammas=1.0, k=10, provenance_cap=0)
        matrix = attribute_batch(queries, trainset, sched, cfg)
        exact = lds(matrix, make_synthetic_lds(matrix, M, 0.5, 0.0, seed))
        null = lds(matrix, make_synthetic_lds(matrix, M, 0.5, math.inf, seed))
        ok = exact.mean == 1.0 and exact.n_degenerate == 0 and abs(null.mean) < 3 * null.se
        return ok, (f"noise 0: mean {100 * exact.mean:.4f}%; pure noise: mean {null.mean:.4f}, "
                    f"3*SE {3 * null.se:.4f} (Q={Q}, M={M})")

    return _timed("6 LDS protocol", run)


def criterion_7() -> CheckResult:
    def run():
        a = spearman([1, 2, 3], [3, 2, 1])
        b = spearman([1, 2, 3, 4, 5], [2, 1, 4, 3, 5])
        return a == -1.0 and abs(b - 0.8) <= 1e-12, f"reversed {a}, worked example {b!r}"

    return _timed("7 Spearman unit values", run)


def criterion_8(seed: int = 8, workers=(1, 4, 8)) -> CheckResult:
    def run():
        rng = np.random.default_rng(seed)
        trainset = Dataset(rng.uniform(-1, 1, (64, 3, 16, 16)))
        queries = Dataset(rng.uniform(-1, 1, (2, 3, 16, 16)), ["a", "b"])
        sched = build_schedule()
        cfg = InfluenceConfig(timesteps=(100, 300), patch_sizes=(3, 5), low_patch_sizes=(4, 6), k=20, seed=seed)
        blobs = []
        with tempfile.TemporaryDirectory() as tmp:
            for n in workers:
                path = Path(tmp) / f"m{n}.ndam"
                write_matrix(path, attribute_batch(queries, trainset, sched, cfg, n_jobs=n))
                blobs.append(path.read_bytes())
        same = all(b == blobs[0] for b in blobs)
        return same, f"workers {list(workers)}: {'byte-identical' if same else 'DIFFERENT'} ({len(blobs[0])} bytes)"

    return _timed("8 determinism under parallelism", run)


def criterion_9(N: int = 500, L: int = 32, P: int = 9, budget_s: float = 60.0, seed: int = 9) -> CheckResult:
    def run():
        rng = np.random.default_rng(seed)
        trainset = Dataset(rng.uniform(-1, 1, (N, 3, L, L)))
        query = rng.uniform(-1, 1, (3, L, L))
        sched = build_schedule()
        cfg = InfluenceConfig(timesteps=(100,), patch_sizes=P, gammas=1.0)
        # warm the jitted kernels on a tiny instance so compile time is not billed
        attribute_image(query[:, :4, :4], Dataset(trainset.images[:2, :, :4, :4]), sched,
                        InfluenceConfig(timesteps=(100,), patch_sizes=3, gammas=1.0, k=2))
        tracemalloc.start()
        t0 = time.perf_counter()
        attribute_image(query, trainset, sched, cfg, "perf")
        elapsed = time.perf_counter() - t0
        _, peak = tracemalloc.get_traced_memory()
        tracemalloc.stop()
        B = cfg.batch_size
        bound = 4 * trainset.images.nbytes + B * N * L * L * 8
        unfolded = N * L * L * 3 * P * P * 8
        ok = elapsed <= budget_s and peak < bound and peak < unfolded
        return ok, (f"{elapsed:.1f}s (budget {budget_s:.0f}s); peak {peak / 2**20:.0f} MiB, "
                    f"bound {bound / 2**20:.0f} MiB, unfolded tensor would be {unfolded / 2**20:.0f} MiB")

    return _timed("9 performance budget", run)


def toy_classes(seed: int = 10, per_class: int = 20, queries_per_class: int = 10, L: int = 16, noise: float = 0.35):
    """Three classes of constant-color images plus Gaussian pixel noise."""
    rng = np.random.default_rng(seed)
    colors = np.array([[0.5, 0.4, 0.3], [-0.5, -0.4, -0.3], [0.45, -0.45, 0.0]])

    def draw(n):
        base = np.repeat(colors, n, axis=0)[:, :, None, None]
        return np.clip(base + noise * rng.standard_normal((3 * n, 3, L, L)), -1.0, 1.0)

    train = Dataset(draw(per_class))
    queries = Dataset(draw(queries_per_class), [f"q{i}" for i in range(3 * queries_per_class)])
    return train, queries, np.repeat(np.arange(3), per_class), np.repeat(np.arange(3), queries_per_class)


def class_ranking(scores: np.ndarray, train_labels: np.ndarray, query_labels: np.ndarray):
    """Fraction of queries whose same-class images all outrank the rest, and mean same-class rank."""
    separated, ranks = [], []
    for row, lab in zip(scores, query_labels):
        same = train_labels == lab
        separated.append(row[same].min() > row[~same].max())
        order = np.argsort(-row, kind="stable")
        pos = np.empty_like(order)
        pos[order] = np.arange(1, row.size + 1)
        ranks.append(pos[same].mean())
    return float(np.mean(separated)), float(np.mean(ranks))


def criterion_10(seed: int = 10) -> CheckResult:
    def run():
        train, queries, tl, ql = toy_classes(seed)
        sched = build_schedule()
        nda = attribute_batch(queries, train, sched, InfluenceConfig(provenance_cap=0, seed=seed)).scores
        raw = raw_pixel_baseline(queries, train, "cosine").scores
        f_nda, r_nda = class_ranking(nda, tl, ql)
        f_raw, r_raw = class_ranking(raw, tl, ql)
        ok = f_nda >= 0.9 and f_raw >= 0.9 and r_nda <= r_raw
        return ok, (f"separated: NDA {100 * f_nda:.0f}%, cosine {100 * f_raw:.0f}%; "
                    f"mean same-class rank: NDA {r_nda:.2f}, cosine {r_raw:.2f} (ideal 10.5)")

    return _timed("10 baseline ordering", run)


ACCEPTANCE: Dict[int, Callable[[], CheckResult]] = {
    1: criterion_1, 2: criterion_2, 3: criterion_3, 4: criterion_4, 5: criterion_5,
    6: criterion_6, 7: criterion_7, 8: criterion_8, 9: criterion_9, 10: criterion_10,
}


def run_acceptance(which=None, out=None) -> List[CheckResult]:
    results = []
    for n in sorted(ACCEPTANCE) if which is None else which:
        r = ACCEPTANCE[n]()
        results.append(r)
        if out is not None:
            print(r.line(), file=out, flush=True)
    return results
