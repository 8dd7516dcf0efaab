import logging

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import independence_table
from saac.outbound import (
    EmptyMonthError,
    MarginalSpec,
    StructuralInfeasibilityError,
    build_col_marginals,
    build_row_marginals,
    extract_outbound,
    ipf,
    reconcile,
    uniform_seed,
)


def spec(rows, cols):
    return reconcile(np.asarray(rows, float), np.asarray(cols, float))


class TestMarginals:
    def test_rows_zero(self):
        assert not build_row_marginals(np.zeros((3, 5))).any()

    def test_rows_sum_destinations(self):
        assert build_row_marginals([[100, 1], [250, 2]])[0] == 350

    def test_col_marginals_split_by_weight(self):
        w = pd.DataFrame({"dest_cbg": ["x", "x", "y"], "origin_cbg": ["a", "b", "a"],
                          "weight": [30.0, 10.0, 5.0]})
        cols = build_col_marginals(w, pd.Series({"x": 400.0, "y": 50.0}))
        assert cols.to_dict() == {"a": 350.0, "b": 100.0}

    def test_identity_rescale(self, caplog):
        s = spec([10, 20], [12, 18])
        assert s.rescale == 1.0

    def test_rescale_cols(self):
        s = spec([500, 500], [300, 500])
        assert s.rescale == 1.25
        np.testing.assert_allclose(s.cols, [375, 625])
        np.testing.assert_array_equal(s.rows, [500, 500])

    def test_rescale_warning(self, caplog):
        with caplog.at_level(logging.WARNING, logger="saac.outbound"):
            spec([1000], [300])
        assert any("rescaled" in r.message for r in caplog.records if r.levelno == logging.WARNING)
        caplog.clear()
        with caplog.at_level(logging.WARNING, logger="saac.outbound"):
            spec([1000], [800])
        assert not [r for r in caplog.records if r.levelno == logging.WARNING]

    def test_empty_month(self):
        with pytest.raises(EmptyMonthError):
            spec([0, 0], [1, 2])


class TestIpf:
    def test_two_by_two_independence(self):
        s = spec([10, 20], [12, 18])
        X, rep = ipf(uniform_seed(s), s)
        np.testing.assert_allclose(X, [[4, 6], [8, 12]], atol=1e-10, rtol=0)
        assert rep.converged

    def test_fixed_point(self):
        seed = np.array([[4.0, 6.0], [8.0, 12.0]])
        X, rep = ipf(seed, spec([10, 20], [12, 18]))
        assert rep.iterations == 0
        np.testing.assert_array_equal(X, seed)

    def test_structural_infeasibility_names_line(self):
        s = spec([10, 20], [12, 18])
        seed = np.array([[1.0, 1.0], [0.0, 0.0]])
        with pytest.raises(StructuralInfeasibilityError, match="row \\(hour\\) 1"):
            ipf(seed, s)
        seed = np.array([[1.0, 0.0], [1.0, 0.0]])
        with pytest.raises(StructuralInfeasibilityError, match="origin 1"):
            ipf(seed, s)

    def test_max_iter_reports_instead_of_raising(self):
        rng = np.random.default_rng(0)
        seed = rng.uniform(0.01, 1, (20, 30))
        s = spec(rng.uniform(1, 100, 20), rng.uniform(1, 100, 30))
        X, rep = ipf(seed, s, tol=1e-14, max_iter=1)
        assert rep.iterations == 1 and not rep.converged and (X >= 0).all()

    def test_zero_lines_stay_zero(self):
        s = spec([0, 30, 0], [10, 0, 20])
        X, rep = ipf(uniform_seed(s), s)
        np.testing.assert_allclose(X, independence_table([0, 30, 0], [10, 0, 20]), atol=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 30), st.integers(1, 30), st.integers(0, 2**32 - 1))
    def test_uniform_seed_gives_independence_table(self, t, n, seed):
        rng = np.random.default_rng(seed)
        rows = rng.uniform(0, 100, t) * (rng.random(t) > 0.2)
        cols = rng.uniform(0, 100, n) * (rng.random(n) > 0.2)
        if rows.sum() == 0 or cols.sum() == 0:
            return
        s = spec(rows, cols)
        X, rep = ipf(uniform_seed(s), s)
        assert rep.converged
        np.testing.assert_allclose(X, independence_table(rows, s.cols), rtol=1e-8, atol=1e-8)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(2, 25), st.integers(2, 25), st.integers(0, 2**32 - 1))
    def test_general_seed_properties(self, t, n, seed):
        rng = np.random.default_rng(seed)
        rows = rng.uniform(1, 100, t)
        cols = rng.uniform(1, 100, n)
        s = spec(rows, cols)
        start = rng.uniform(0.1, 1, (t, n))
        X, rep = ipf(start, s, tol=1e-10, max_iter=500)
        assert rep.converged and (X >= 0).all()
        tol = 1e-10
        assert np.all(np.abs(X.sum(axis=1) - s.rows) <= tol * np.maximum(s.rows, 1))
        assert np.all(np.abs(X.sum(axis=0) - s.cols) <= tol * np.maximum(s.cols, 1))
        assert X.sum() == pytest.approx(rows.sum(), rel=1e-9)
        # permuting origins permutes the answer
        perm = rng.permutation(n)
        s2 = MarginalSpec(s.rows, s.cols[perm], s.origins[perm])
        X2, _ = ipf(start[:, perm], s2, tol=1e-10, max_iter=500)
        np.testing.assert_allclose(X2, X[:, perm], rtol=1e-12, atol=1e-12)

    def test_negative_seed_rejected(self):
        s = spec([1, 1], [1, 1])
        with pytest.raises(ValueError):
            ipf(-np.ones((2, 2)), s)


class TestExtract:
    def test_single_cell(self):
        assert extract_outbound(np.array([[7.0]]), ["a"], ["a"])[0, 0] == 7

    def test_zero_column_and_non_origin(self):
        X = np.array([[1.0, 0.0], [2.0, 0.0]])
        out = extract_outbound(X, ["a", "b"], ["b", "c", "a"])
        np.testing.assert_array_equal(out, [[0, 0], [0, 0], [1, 2]])
