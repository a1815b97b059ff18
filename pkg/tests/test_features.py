from __future__ import annotations

import copy
from datetime import date, timedelta

import numpy as np
import pytest
from hypothesis import given, strategies as st

from conftest import make_query
from filterank.features import (
    FEATURE_GROUPS,
    OOV,
    FeatureSchema,
    encode,
    encode_cyclical,
    encode_rows,
    fit_schema,
)


def test_cyclical_examples():
    for x, want in ((0, (0.0, 1.0)), (3, (1.0, 0.0)), (6, (0.0, -1.0))):
        got = encode_cyclical(x, 12)
        assert got == pytest.approx(want, abs=1e-12)
    with pytest.raises(ValueError):
        encode_cyclical(1, 0)
    with pytest.raises(ValueError):
        encode_cyclical(1, -7)


@given(st.floats(-1e6, 1e6, allow_nan=False), st.floats(1e-3, 1e4))
def test_cyclical_on_unit_circle(x, period):
    s, c = encode_cyclical(x, period)
    assert abs(s * s + c * c - 1.0) < 1e-12


@given(st.floats(0, 1000, allow_nan=False), st.integers(1, 5))
def test_cyclical_is_periodic(x, n):
    a = encode_cyclical(x, 7)
    b = encode_cyclical(x + 7 * n, 7)
    assert a == pytest.approx(b, abs=1e-9)


def queries(n=50, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        day = date(2025, 1, 1) + timedelta(days=int(rng.integers(0, 300)))
        ci = day + timedelta(days=int(rng.integers(0, 90)))
        out.append(make_query(location_id=int(rng.integers(0, 5)), adults=int(rng.integers(1, 6)),
                              children=int(rng.integers(0, 3)), checkin=ci,
                              checkout=ci + timedelta(days=int(rng.integers(1, 30))),
                              platform=str(rng.choice(["web", "ios"])), searched=day))
    return out


def test_schema_layout_and_feature_count():
    schema = fit_schema(queries(), k=8)
    # 14 query features plus the filter id fed to the conversion head
    assert len(schema.input_names) == 14
    assert schema.dense_dim == 5 + 2 * 6
    enc = encode(queries()[0], schema, filter_id=3)
    assert len(enc.dense) == schema.dense_dim and np.all(np.isfinite(enc.dense))
    assert enc.filter_index == 3
    with pytest.raises(ValueError):
        encode(queries()[0], schema, filter_id=9)


def test_degenerate_std_rule():
    qs = [make_query(adults=5) for _ in range(10)]
    schema = fit_schema(qs, k=4)
    name, mean, std = next(c for c in schema.continuous if c[0] == "num_adults")
    assert (mean, std) == (5.0, 1.0)


def test_unseen_category_maps_to_oov():
    schema = fit_schema(queries(), k=4)
    enc = encode(make_query(location_id=12345, platform="smart_fridge"), schema)
    names = [c.name for c in schema.categorical]
    assert enc.categorical_indices[names.index("location_id")] == OOV
    assert enc.categorical_indices[names.index("platform")] == OOV
    assert enc.categorical_indices[names.index("device_type")] != OOV


def test_z_scores_centered_on_training_data():
    qs = queries(200)
    schema = fit_schema(qs, k=4)
    dense = np.array([encode(q, schema).dense for q in qs])
    cont = dense[:, : len(schema.continuous)]
    assert np.abs(cont.mean(axis=0)).max() < 1e-9


def test_calendar_periods():
    schema = fit_schema(queries(), k=4)
    assert dict(schema.cyclical) == {
        "checkin_month": 12, "checkin_day_of_month": 31, "checkin_day_of_week": 7,
        "checkout_month": 12, "checkout_day_of_month": 31, "checkout_day_of_week": 7,
    }
    # 2025-03-03 is a Monday
    q = make_query(checkin=date(2025, 3, 3), checkout=date(2025, 3, 5), searched=date(2025, 3, 1))
    enc = encode(q, schema)
    offset = len(schema.continuous)
    pairs = {name: tuple(enc.dense[offset + 2 * i: offset + 2 * i + 2]) for i, (name, _) in enumerate(schema.cyclical)}
    assert pairs["checkin_month"] == pytest.approx((1.0, 0.0), abs=1e-12)
    assert pairs["checkin_day_of_week"] == pytest.approx((0.0, 1.0), abs=1e-12)
    assert pairs["checkin_day_of_month"] == pytest.approx(encode_cyclical(3, 31), abs=1e-15)


def test_encoding_deterministic_and_schema_frozen():
    qs = queries()
    schema = fit_schema(qs, k=4)
    before = copy.deepcopy(schema.to_json())
    a = encode(qs[0], schema)
    b = encode(qs[0], schema)
    encode(make_query(location_id=999), schema)
    assert a.categorical_indices == b.categorical_indices and np.array_equal(a.dense, b.dense)
    assert schema.to_json() == before


@given(
    st.integers(-5, 10_000),
    st.integers(0, 20), st.integers(0, 10), st.integers(0, 5),
    st.dates(date(2000, 1, 1), date(2040, 1, 1)), st.integers(0, 500), st.integers(1, 400),
    st.text(max_size=8), st.text(max_size=8),
)
def test_encoding_is_total(loc, adults, children, infants, searched, lead, nights, platform, device):
    schema = fit_schema(queries(), k=4)
    checkin = searched + timedelta(days=lead)
    q = make_query(loc, adults, children, infants, checkin, checkin + timedelta(days=nights), platform, device, searched)
    enc = encode(q, schema)
    assert np.all(np.isfinite(enc.dense))


def test_fit_rejects_empty_and_unknown_group():
    with pytest.raises(ValueError):
        fit_schema([], k=4)
    with pytest.raises(ValueError):
        fit_schema(queries(), k=4, exclude_groups=("weather",))


@pytest.mark.parametrize("group", sorted(FEATURE_GROUPS))
def test_excluding_a_group_removes_its_inputs(group):
    full = fit_schema(queries(), k=4)
    ablated = fit_schema(queries(), k=4, exclude_groups=(group,))
    assert len(ablated.input_names) < len(full.input_names)
    assert not set(ablated.input_names) & set(FEATURE_GROUPS[group])


def test_schema_save_load(tmp_path):
    schema = fit_schema(queries(), k=6)
    schema.save(tmp_path / "schema.json")
    loaded = FeatureSchema.load(tmp_path / "schema.json")
    assert loaded == schema and loaded.fingerprint() == schema.fingerprint()


def test_encode_rows_matches_single_encoding():
    qs = queries(10)
    schema = fit_schema(qs, k=4)
    batch = encode_rows(qs, [None, 1, 2, None, 0, 3, None, 1, 1, 2], schema)
    for i, q in enumerate(qs):
        enc = encode(q, schema)
        assert np.array_equal(batch.dense[i], enc.dense)
        assert tuple(batch.categorical[i]) == enc.categorical_indices
    assert batch.filter_index[0] == schema.none_filter == 4
