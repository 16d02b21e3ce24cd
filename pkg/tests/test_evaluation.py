import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_dataset
from oracles import spearman_loop

from patchattr.aggregation import AttributionMatrix
from patchattr.core import Dataset
from patchattr.evaluation import (
    LDSInput,
    attribution_prediction,
    lds,
    make_synthetic_lds,
    raw_pixel_baseline,
    spearman,
)
from patchattr.exceptions import ConfigurationError, DataFormatError, ShapeError


def _matrix(scores, fp="fp"):
    scores = np.atleast_2d(scores)
    return AttributionMatrix([f"q{i}" for i in range(scores.shape[0])],
                             [f"t{j}" for j in range(scores.shape[1])], scores, fp)


class TestPrediction:
    def test_examples(self):
        m = _matrix([0.5, 0.2, 0.9])
        assert attribution_prediction(m, [False] * 3, "q0") == 0.0
        assert attribution_prediction(m, [True] * 3, "q0") == pytest.approx(1.6)
        assert attribution_prediction(m, [True, False, True], "q0") == pytest.approx(1.4)

    def test_length(self):
        with pytest.raises(ShapeError):
            attribution_prediction(_matrix([0.5, 0.2]), [True], "q0")


class TestSpearman:
    def test_units(self):
        assert spearman([1, 2, 3], [1, 2, 3]) == 1.0
        assert spearman([1, 2, 3], [3, 2, 1]) == -1.0
        assert spearman([1, 2, 3, 4, 5], [2, 1, 4, 3, 5]) == pytest.approx(0.8, abs=1e-12)

    def test_degenerate(self):
        assert spearman([1, 1, 1], [1, 2, 3]) is None
        assert spearman([1, 2, 3], [4, 4, 4]) is None

    def test_errors(self):
        with pytest.raises(ShapeError):
            spearman([1], [1])
        with pytest.raises(ShapeError):
            spearman([1, 2], [1, 2, 3])
        with pytest.raises(DataFormatError):
            spearman([1, np.nan], [1, 2])

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.integers(-5, 5), min_size=2, max_size=30), st.integers(0, 2**31))
    def test_against_loop_with_ties(self, a, seed):
        b = np.random.default_rng(seed).integers(-3, 3, len(a)).tolist()
        got = spearman(a, b)
        if len(set(a)) == 1 or len(set(b)) == 1:
            assert got is None
            return
        assert got == pytest.approx(spearman_loop(a, b), abs=1e-12)
        assert got == pytest.approx(spearman(b, a), abs=1e-15)
        assert -1.0 <= got <= 1.0
        assert spearman(a, a) == pytest.approx(1.0, abs=1e-15)


class TestLDS:
    def _setup(self, rng, Q=5, N=30):
        return _matrix(rng.uniform(size=(Q, N)))

    def test_monotone_transform(self, rng):
        m = self._setup(rng)
        data = make_synthetic_lds(m, 16, 0.5, 0.0, 1)
        warped = LDSInput(data.masks, np.exp(3 * data.outputs) + 7, data.query_ids)
        rep = lds(m, warped)
        assert all(r == 1.0 for r in rep.rho) and rep.mean == 1.0
        neg = lds(m, LDSInput(data.masks, -data.outputs, data.query_ids))
        assert all(r == -1.0 for r in neg.rho) and neg.abs_mean == 1.0

    def test_rank_invariance(self, rng):
        m = self._setup(rng)
        data = make_synthetic_lds(m, 20, 0.5, 1.0, 2)
        base = lds(m, data).rho
        scaled = _matrix(2.5 * m.scores + 4.0)
        assert lds(scaled, data).rho == pytest.approx(base, abs=1e-12)

    def test_null_distribution(self):
        rng = np.random.default_rng(5)
        m = _matrix(rng.uniform(size=(100, 40)))
        masks = np.zeros((64, 40), dtype=bool)
        for i in range(64):
            masks[i, rng.choice(40, 20, replace=False)] = True
        rep = lds(m, LDSInput(masks, rng.standard_normal((64, 100)), m.query_ids))
        assert abs(rep.mean) < 3 * rep.se

    def test_degenerate_counted(self):
        m = _matrix(np.ones((2, 4)))
        masks = np.array([[1, 1, 0, 0], [0, 0, 1, 1], [1, 0, 1, 0]], dtype=bool)
        rep = lds(m, LDSInput(masks, np.array([[1.0, 2.0], [2.0, 1.0], [3.0, 0.0]]), m.query_ids))
        assert rep.n_degenerate == 2 and rep.rho == (None, None) and math.isnan(rep.mean)

    def test_checks(self, rng):
        m = self._setup(rng)
        with pytest.raises(ConfigurationError):
            lds(m, LDSInput(np.ones((1, 30), bool), np.zeros((1, 5)), m.query_ids))
        with pytest.raises(ShapeError):
            lds(m, LDSInput(np.ones((3, 29), bool), np.zeros((3, 5)), m.query_ids))
        with pytest.raises(DataFormatError):
            LDSInput(np.zeros((2, 3), bool), np.zeros((2, 1)), ["a"])
        with pytest.raises(DataFormatError):
            LDSInput(np.ones((2, 3), bool), np.array([[np.inf], [0.0]]), ["a"])
        with pytest.raises(ShapeError):
            LDSInput(np.ones((2, 3), bool), np.zeros((3, 1)), ["a"])


class TestSynthetic:
    def test_exact_and_sizes(self, rng):
        m = _matrix(rng.uniform(size=(3, 31)))
        data = make_synthetic_lds(m, 64, 0.5, 0.0, 3)
        assert data.M == 64 and np.all(data.masks.sum(axis=1) == 15)
        rep = lds(m, data)
        assert rep.mean == 1.0 and rep.se == 0.0
        assert data.fingerprint == "fp"

    def test_deterministic(self, rng):
        m = _matrix(rng.uniform(size=(2, 10)))
        a, b = make_synthetic_lds(m, 8, 0.3, 0.5, 9), make_synthetic_lds(m, 8, 0.3, 0.5, 9)
        assert np.array_equal(a.masks, b.masks) and np.array_equal(a.outputs, b.outputs)

    def test_pure_noise(self):
        m = _matrix(np.random.default_rng(0).uniform(size=(100, 40)))
        rep = lds(m, make_synthetic_lds(m, 64, 0.5, math.inf, 4))
        assert abs(rep.mean) < 3 * rep.se

    def test_tiny_fraction_keeps_one(self):
        m = _matrix(np.ones((1, 5)))
        assert np.all(make_synthetic_lds(m, 3, 0.01).masks.sum(axis=1) == 1)

    @pytest.mark.parametrize("kw", [dict(fraction=0.0), dict(fraction=1.0), dict(M=0), dict(noise=-1.0)])
    def test_invalid(self, kw):
        with pytest.raises(ConfigurationError):
            make_synthetic_lds(_matrix(np.ones((1, 5))), **kw)


class TestBaseline:
    def test_cosine_self_max(self, rng):
        train = random_dataset(rng, 6)
        queries = Dataset(train.images[[2, 5]], ["a", "b"])
        m = raw_pixel_baseline(queries, train, "cosine")
        assert m.scores[0, 2] == pytest.approx(1.0, abs=1e-15) and m.scores[0].argmax() == 2
        assert m.scores[1].argmax() == 5 and m.degenerate is None

    def test_dot_orthogonal(self):
        a = np.zeros((1, 1, 2, 2))
        b = np.zeros((1, 1, 2, 2))
        a[0, 0, 0, 0] = 1.0
        b[0, 0, 1, 1] = 1.0
        assert raw_pixel_baseline(Dataset(a), Dataset(b), "dot").scores[0, 0] == 0.0

    def test_cosine_symmetric(self, rng):
        x = random_dataset(rng, 3, prefix="x")
        z = random_dataset(rng, 4, prefix="z")
        np.testing.assert_allclose(raw_pixel_baseline(x, z).scores, raw_pixel_baseline(z, x).scores.T, rtol=1e-14)

    def test_zero_norm_flagged(self):
        z = np.stack([np.zeros((1, 2, 2)), np.full((1, 2, 2), 0.5)])
        m = raw_pixel_baseline(Dataset(np.full((1, 1, 2, 2), 0.5)), Dataset(z), "cosine")
        assert m.degenerate.tolist() == [[True, False]]
        assert np.isnan(m.scores[0, 0]) and m.scores[0, 1] == pytest.approx(1.0)

    def test_errors(self, rng):
        with pytest.raises(ConfigurationError):
            raw_pixel_baseline(random_dataset(rng, 1), random_dataset(rng, 1), "l2")
        with pytest.raises(ShapeError):
            raw_pixel_baseline(random_dataset(rng, 1, L=4), random_dataset(rng, 1, L=8))
