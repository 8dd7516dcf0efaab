import numpy as np
import pandas as pd
import pytest
from hypothesis import given
from hypothesis import strategies as st

from saac.inbound import (
    FLAG_ALL_ORIGINS_EXCLUDED,
    FLAG_INBOUND_MISSING,
    destination_expansion,
    estimate_month,
    expansion_factor,
    inbound_surface,
    origin_expansion_table,
)


class TestExpansion:
    def test_ratio(self):
        assert expansion_factor(1000, 50) == 20

    def test_zero_population(self):
        assert expansion_factor(0, 10) == 0

    def test_untracked_origin_is_none(self):
        assert expansion_factor(1500, 0) is None

    def test_single_origin(self):
        assert destination_expansion({"A": 7}, {"A": 20.0}).value == 20

    def test_weighted_mean(self):
        assert destination_expansion({"A": 60, "B": 40}, {"A": 10.0, "B": 20.0}).value == pytest.approx(14)

    def test_untracked_origin_excluded_and_renormalised(self):
        out = destination_expansion({"A": 60, "B": 40, "C": 100},
                                    {"A": 10.0, "B": 20.0, "C": expansion_factor(1500, 0)})
        assert out.value == pytest.approx(14) and out.excluded_origins == ("C",)

    def test_all_excluded(self):
        out = destination_expansion({"A": 5}, {"A": None})
        assert out.value == 0 and out.flags == (FLAG_ALL_ORIGINS_EXCLUDED,)

    @given(st.dictionaries(st.sampled_from("ABCDEFG"), st.integers(1, 500), min_size=1),
           st.floats(0.1, 100))
    def test_uniform_factor_ignores_shares(self, devices, c):
        assert destination_expansion(devices, {j: c for j in devices}).value == pytest.approx(c)

    @given(st.dictionaries(st.sampled_from("ABCDEFG"), st.tuples(st.integers(1, 500), st.floats(0, 50)),
                           min_size=1))
    def test_convex_combination(self, data):
        dev = {j: n for j, (n, _) in data.items()}
        fac = {j: p for j, (_, p) in data.items()}
        v = destination_expansion(dev, fac).value
        assert min(fac.values()) - 1e-9 <= v <= max(fac.values()) + 1e-9


class TestSurface:
    def test_zero_events(self):
        assert not inbound_surface(np.zeros(24), 2.5, 14).inbound.any()

    def test_direct_evaluation(self):
        s = inbound_surface([10.0], 2.5, 14)
        assert s.inbound[0] == pytest.approx(350) and s.devices[0] == pytest.approx(25)

    @given(st.lists(st.integers(0, 1000), min_size=1, max_size=48), st.floats(0.5, 10), st.floats(0, 50),
           st.floats(0.1, 5))
    def test_linear_in_each_factor(self, e, k, p, alpha):
        base = inbound_surface(e, k, p).inbound
        np.testing.assert_allclose(inbound_surface(e, alpha * k, p).inbound, alpha * base, rtol=1e-12)
        np.testing.assert_allclose(inbound_surface(e, k, alpha * p).inbound, alpha * base, rtol=1e-12)
        np.testing.assert_allclose(inbound_surface(np.asarray(e) * alpha, k, p).inbound, alpha * base,
                                   rtol=1e-12)
        s = inbound_surface(e, k, p)
        ok = s.devices > 0
        np.testing.assert_allclose(s.inbound[ok] / s.devices[ok], p)

    def test_rejects_bad_k(self):
        with pytest.raises(ValueError):
            inbound_surface([1.0], 0.0, 1.0)


def test_estimate_month_matches_scalar_path():
    residents = pd.DataFrame({"cbg": ["a", "b", "c", "d"], "population": [1000, 1500, 800, 600]})
    panel = pd.DataFrame({"cbg": ["a", "b", "c", "d"], "tracked_devices": [100, 75, 0, 60]})
    expansion = origin_expansion_table(residents, panel)
    assert expansion["a"] == 10 and np.isnan(expansion["c"])
    origins = pd.DataFrame({
        "dest_cbg": ["a", "a", "b", "b", "d"],
        "origin_cbg": ["b", "c", "a", "d", "c"],
        "devices": [60, 40, 30, 10, 5],
    })
    rng = np.random.default_rng(0)
    stops = rng.integers(0, 30, size=(4, 48)).astype(float)
    k = np.array([2.5, 2.5, 3.0, 2.0])
    m = estimate_month(np.array(["a", "b", "c", "d"]), stops, k, origins, expansion)

    exp_a = destination_expansion({"b": 60, "c": 40}, {"b": 20.0, "c": None})
    exp_b = destination_expansion({"a": 30, "d": 10}, {"a": 10.0, "d": 10.0})
    np.testing.assert_allclose(m.inbound[0], inbound_surface(stops[0], 2.5, exp_a.value).inbound)
    np.testing.assert_allclose(m.inbound[1], inbound_surface(stops[1], 2.5, exp_b.value).inbound)
    assert not m.inbound[2].any() and not m.inbound[3].any()
    assert m.audit["flags"].tolist() == ["", "", FLAG_INBOUND_MISSING, FLAG_ALL_ORIGINS_EXCLUDED]
    assert m.audit["excluded_origins"].tolist() == [1, 0, 0, 1]
    assert set(m.origin_weights["origin_cbg"]) == {"a", "b", "d"}
