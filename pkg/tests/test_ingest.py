"""Panel averaging, dummy detection and standardisation."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from spatial_bma.errors import ConfigurationError, ParseError
from spatial_bma.ingest import (
    CrossSection, PanelRecord, average_panel, detect_dummies, load_dataset, read_manifest, read_panel,
    standardize,
)
from spatial_bma.weights import GeoPoint


def cross(**cols):
    names = tuple(cols)
    values = np.column_stack([np.asarray(v, dtype=float) for v in cols.values()])
    ids = tuple(f"u{i}" for i in range(values.shape[0]))
    return CrossSection(ids, names, values, np.ones(values.shape, dtype=int))


class TestAveragePanel:
    def test_single_year_identity(self):
        rows = [PanelRecord("a", 2000, "x", 1.5), PanelRecord("b", 2000, "x", -2.0)]
        c = average_panel(rows)
        assert c.values[:, 0].tolist() == [1.5, -2.0]

    def test_two_years(self):
        rows = [PanelRecord("a", 2000, "x", 2.0), PanelRecord("a", 2001, "x", 4.0)]
        assert average_panel(rows).values[0, 0] == 3.0

    def test_gap_year(self):
        rows = [PanelRecord("a", y, "x", float(y - 2000)) for y in (2000, 2002)]
        c = average_panel(rows, (2000, 2002))
        assert c.values[0, 0] == 1.0 and c.counts[0, 0] == 2

    def test_year_range_filters(self):
        rows = [PanelRecord("a", 1980, "x", 100.0), PanelRecord("a", 1990, "x", 1.0)]
        assert average_panel(rows, (1985, 2015)).values[0, 0] == 1.0

    def test_missing_cell_listed(self):
        rows = [PanelRecord("a", 2000, "x", 1.0), PanelRecord("b", 2000, "y", 1.0)]
        with pytest.raises(ConfigurationError, match=r"\(a, y\).*\(b, x\)"):
            average_panel(rows)

    def test_empty_range(self):
        with pytest.raises(ConfigurationError):
            average_panel([], (2001, 2000))

    @settings(max_examples=30, deadline=None)
    @given(st.permutations(list(range(6))))
    def test_row_order_invariant(self, perm):
        base = [PanelRecord(u, y, "x", float(i)) for i, (u, y) in
                enumerate([("a", 1), ("a", 2), ("b", 1), ("b", 2), ("b", 3), ("a", 3)])]
        c1 = average_panel(base)
        c2 = average_panel([base[i] for i in perm])
        order = [c2.unit_ids.index(u) for u in c1.unit_ids]
        assert np.array_equal(c1.values, c2.values[order])


class TestDummies:
    @pytest.mark.parametrize("col, flag", [([0, 1, 0], True), ([0, 1, 2], False), ([0.0, 1.0, 1.0], True)])
    def test_value_rule(self, col, flag):
        assert detect_dummies(cross(v=col))["v"] is flag

    def test_override(self):
        assert detect_dummies(cross(v=[0, 1, 0]), {"v": False})["v"] is False


class TestStandardize:
    def test_one_two_three(self):
        ds = standardize(cross(y=[1, 2, 3], x=[1, 2, 3]), "y")
        assert np.allclose(ds.y, [-1, 0, 1], atol=1e-15)

    def test_dummy_untouched(self):
        ds = standardize(cross(y=[1, 2, 3], d=[0, 1, 1]), "y")
        assert ds.X[:, 0].tolist() == [0, 1, 1]
        assert ds.dummy == (True,)
        assert ds.standardization["d"] == (0.0, 1.0)

    def test_zero_variance_named(self):
        with pytest.raises(ConfigurationError, match="'c'"):
            standardize(cross(y=[1, 2, 3], c=[5, 5, 5]), "y")

    def test_forced_dummy_must_be_binary(self):
        with pytest.raises(ConfigurationError):
            standardize(cross(y=[1, 2, 3], x=[0, 2, 1]), "y", {"x": True})

    def test_non_finite(self):
        with pytest.raises(ConfigurationError):
            standardize(cross(y=[1, 2, np.nan], x=[0, 2, 1]), "y")

    def test_idempotent(self, rng):
        ds = standardize(cross(y=rng.normal(3, 2, 20), x=rng.normal(-1, 5, 20), d=rng.integers(0, 2, 20)), "y")
        again = standardize(ds.as_cross_section(), "y")
        assert np.allclose(again.X, ds.X, atol=1e-14) and np.allclose(again.y, ds.y, atol=1e-14)

    def test_round_trip(self, rng):
        y, x = rng.normal(50, 10, 30), rng.lognormal(3, 1, 30)
        ds = standardize(cross(y=y, x=x), "y")
        y2, X2 = ds.destandardize()
        assert np.allclose(y2, y, rtol=1e-10) and np.allclose(X2[:, 0], x, rtol=1e-10)

    @settings(max_examples=50, deadline=None)
    @given(hnp.arrays(np.float64, (12, 3), elements=st.floats(-1e4, 1e4)))
    def test_invariants(self, vals):
        vals = vals + np.arange(12)[:, None] * np.array([1.0, -2.0, 0.5])
        ds = standardize(cross(y=vals[:, 0], a=vals[:, 1], b=vals[:, 2]), "y")
        for col in (ds.y, ds.X[:, 0], ds.X[:, 1]):
            assert abs(col.mean()) < 1e-12
            assert abs(col.std(ddof=1) - 1) < 1e-12
        assert np.allclose(np.corrcoef(ds.X.T), np.corrcoef(vals[:, 1:].T), atol=1e-12)


class TestFiles:
    def test_manifest_roles(self, tmp_path):
        p = tmp_path / "m.json"
        p.write_text(json.dumps({"y": {"role": "outcome"}, "x": {"role": "covariate", "group": "econ"}}))
        specs = read_manifest(p)
        assert specs["x"].group == "econ"
        with pytest.raises(ConfigurationError):
            read_manifest({"x": {"role": "covariate"}})
        with pytest.raises(ConfigurationError):
            read_manifest({"y": {"role": "target"}})

    def test_panel_header(self, tmp_path):
        p = tmp_path / "p.csv"
        p.write_text("unit,year,variable,value\n")
        with pytest.raises(ParseError):
            read_panel(p)
        p.write_text("unit_id,year,variable,value\na,2000,x,oops\n")
        with pytest.raises(ParseError) as err:
            read_panel(p)
        assert err.value.line == 2

    def test_load_panel(self, tmp_path):
        lines = ["unit_id,year,variable,value"]
        vals = {"a": (1.0, 3.0, 0), "b": (2.0, 5.0, 1), "c": (4.0, 4.0, 1)}
        for u, (cpi, gdp, d) in vals.items():
            lines += [f"{u},2015,cpi,{cpi}", f"{u},2014,cpi,99", f"{u},2000,gdp,{gdp}",
                      f"{u},2001,gdp,{gdp + 2}", f"{u},2000,island,{d}"]
        p = tmp_path / "p.csv"
        p.write_text("\n".join(lines) + "\n")
        specs = read_manifest({"cpi": {"role": "outcome", "year": 2015}, "gdp": {"role": "covariate"},
                               "island": {"role": "covariate"}})
        ds = load_dataset(p, specs, (1985, 2015))
        assert ds.covariate_names == ("gdp", "island")
        assert ds.standardization["gdp"][0] == pytest.approx(5.0)
        assert ds.standardization["cpi"][0] == pytest.approx(7 / 3)
        assert ds.dummy == (False, True)
        pts = [GeoPoint("c", 0, 2), GeoPoint("a", 0, 0), GeoPoint("b", 0, 1)]
        ds2 = ds.with_points(pts)
        assert ds2.unit_ids == ("c", "a", "b") and ds2.y[0] == ds.y[2]

    def test_outcome_needs_year(self, tmp_path):
        p = tmp_path / "p.csv"
        p.write_text("unit_id,year,variable,value\na,1,y,1\na,2,y,2\na,1,x,1\nb,1,y,1\nb,1,x,2\nc,1,y,3\nc,1,x,0\n")
        with pytest.raises(ConfigurationError, match="reference year"):
            load_dataset(p, read_manifest({"y": {"role": "outcome"}, "x": {"role": "covariate"}}))
