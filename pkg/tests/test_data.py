import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from twinpp.data import (EventLogRecord, Normalization, ProfileRecord, SampleSet, Taxonomy,
                         WindowConfig, build_samples, parse_event_log, parse_profiles,
                         query_sample, split_by_entity, split_entities, write_event_log)

TAX = Taxonomy.from_mapping({"ticket": ["ticket"], "error": ["PRT", "CNG", "IDC"]})


def _line(eid, t, sub):
    return json.dumps({"entity_id": eid, "timestamp": t, "main_type": TAX.main_of(sub),
                       "sub_type": sub}) + "\n"


def _records(eid, times, subs):
    return [EventLogRecord(eid, float(t), TAX.main_of(s), s) for t, s in zip(times, subs)]


def _profiles(*ids):
    return {e: ProfileRecord(e, {"age": float(k), "model": 1.0}) for k, e in enumerate(ids)}


# ---------------------------------------------------------------- parsing


def test_empty_file():
    log = parse_event_log(io.StringIO(""))
    assert log.records == [] and log.n_duplicates == 0


def test_duplicates_counted_once():
    text = _line("a", 1.0, "PRT") * 2
    log = parse_event_log(io.StringIO(text), TAX)
    assert len(log.records) == 1 and log.n_duplicates == 1


def test_sorted_and_stable_for_ties():
    text = _line("a", 5.0, "PRT") + _line("a", 2.0, "CNG") + _line("a", 2.0, "IDC")
    subs = [r.sub_type for r in parse_event_log(io.StringIO(text), TAX).records]
    assert subs == ["CNG", "IDC", "PRT"]


def test_malformed_line_number():
    text = _line("a", 1.0, "PRT") + "\n" + '{"entity_id": "a"}\n'
    with pytest.raises(ValueError, match="line 3"):
        parse_event_log(io.StringIO(text))


def test_unknown_sub_type():
    text = json.dumps({"entity_id": "a", "timestamp": 1, "main_type": "error",
                       "sub_type": "XYZ"}) + "\n"
    with pytest.raises(ValueError, match="XYZ"):
        parse_event_log(io.StringIO(text), TAX)


def test_parent_mismatch():
    text = json.dumps({"entity_id": "a", "timestamp": 1, "main_type": "ticket",
                       "sub_type": "PRT"}) + "\n"
    with pytest.raises(ValueError, match="belongs to"):
        parse_event_log(io.StringIO(text), TAX)


def test_profiles_csv():
    p = parse_profiles(io.StringIO("entity_id,age,model\na,1.5,2\nb,3,4\n"))
    assert p["b"].features == {"age": 3.0, "model": 4.0}
    with pytest.raises(ValueError, match="duplicate"):
        parse_profiles(io.StringIO("entity_id,age\na,1\na,2\n"))
    with pytest.raises(ValueError):
        parse_profiles(io.StringIO("id,age\na,1\n"))


def test_taxonomy_roundtrip():
    assert Taxonomy.loads(TAX.dumps()).to_mapping() == TAX.to_mapping()
    assert TAX.parent == [0, 1, 1, 1]


# ---------------------------------------------------------------- samples


def naive_samples(times, subs, static, wc, k_sub):
    """Quadratic recount straight from the definitions, one target at a time."""
    out = []
    for n in range(len(times)):
        hist = [i for i in range(len(times)) if times[i] < times[n]]
        if not hist:
            continue
        anchor = max(times[i] for i in hist)
        rows = []
        for k in range(wc.n_sub_windows, 0, -1):
            hi = anchor - (k - 1) * wc.sub_window_days
            lo = anchor - k * wc.sub_window_days
            counts = [0.0] * k_sub
            for i in hist:
                if lo < times[i] <= hi:
                    counts[subs[i]] += 1.0
            rows.append(list(static) + counts)
        last = hist[-wc.event_window_len:]
        types = [k_sub] * (wc.event_window_len - len(last)) + [subs[i] for i in last]
        dts = [0.0] * (wc.event_window_len - len(last)) + [
            times[i] - times[i - 1] if i > 0 else 0.0 for i in last]
        out.append((rows, types, dts, subs[n], times[n] - anchor))
    return out


def _check_against_naive(times, subs, wc=WindowConfig()):
    names = TAX.sub_types
    events = _records("a", times, [names[s] for s in subs])
    prof = _profiles("a")
    ss = build_samples(events, prof, wc, TAX)
    static = Normalization.fit(prof.values()).apply(prof["a"])
    oracle = naive_samples(list(times), list(subs), static, wc, len(names))
    assert len(ss.samples) == len(oracle)
    for s, (rows, types, dts, sub, gap) in zip(ss.samples, oracle):
        np.testing.assert_array_equal(s.ts_window, np.array(rows))
        assert s.event_types.tolist() == types
        np.testing.assert_allclose(s.event_dts, dts, rtol=0, atol=1e-12)
        assert (s.target_sub, s.target_main) == (sub, TAX.parent[sub])
        assert s.target_gap == pytest.approx(gap, abs=1e-12) and s.target_gap > 0


def test_single_event_gives_nothing():
    ss = build_samples(_records("a", [3.0], ["PRT"]), _profiles("a"), WindowConfig(), TAX)
    assert len(ss) == 0


def test_daily_events_recount():
    times = np.arange(1.0, 11.0)
    subs = [0, 1, 2, 3, 1, 1, 2, 0, 3, 2]
    _check_against_naive(times, subs)
    ss = build_samples(_records("a", times, [TAX.sub_types[s] for s in subs]), _profiles("a"),
                       WindowConfig(), TAX)
    assert len(ss) == 9
    # last sample: anchor at day 9, newest window covers days 3..9
    assert ss.samples[-1].ts_window[-1, 2:].sum() == 7


@settings(max_examples=40)
@given(st.lists(st.tuples(st.integers(0, 400), st.integers(0, 3)), min_size=1, max_size=30),
       st.integers(1, 4), st.integers(1, 4), st.floats(0.5, 10.0))
def test_recount_property(events, n_win, ev_len, width):
    events = sorted(set(events))
    times = [t / 8.0 for t, _ in events]
    subs = [s for _, s in events]
    _check_against_naive(times, subs, WindowConfig(width, n_win, ev_len))


def test_ties_are_not_history():
    # two events at the same instant never see each other
    ss = build_samples(_records("a", [1.0, 2.0, 2.0], ["PRT", "CNG", "IDC"]), _profiles("a"),
                       WindowConfig(), TAX)
    assert [s.anchor for s in ss.samples] == [1.0, 1.0]
    assert all(s.target_gap == 1.0 for s in ss.samples)


def test_missing_profile():
    with pytest.raises(ValueError, match="'b'"):
        build_samples(_records("b", [1.0, 2.0], ["PRT", "PRT"]), _profiles("a"),
                      WindowConfig(), TAX)


def test_canonical_order_and_header_roundtrip():
    events = _records("b", [1.0, 4.0, 6.0], ["PRT", "CNG", "PRT"]) + \
        _records("a", [0.5, 3.0], ["ticket", "IDC"])
    ss = build_samples(events, _profiles("a", "b"), WindowConfig(), TAX)
    assert [(s.entity_id, s.anchor) for s in ss.samples] == [("a", 0.5), ("b", 1.0), ("b", 4.0)]
    back = SampleSet.loads(ss.dumps())
    assert back.header() == ss.header()
    for x, y in zip(back.samples, ss.samples):
        np.testing.assert_array_equal(x.ts_window, y.ts_window)
        assert x.target_gap == y.target_gap
    assert ss.ts_feature_dim == 2 + 4


def _random_log(rng, n_entities=3, n=25):
    out = []
    for k in range(n_entities):
        times = np.unique(np.round(rng.uniform(0, 60, n), 2))
        out += _records(f"u{k}", times, rng.choice(TAX.sub_types, times.size))
    return out


@settings(max_examples=25)
@given(st.integers(0, 10_000), st.floats(0.0, 60.0))
def test_deleting_future_leaves_past_samples(seed, cut):
    rng = np.random.default_rng(seed)
    events = _random_log(rng)
    prof = _profiles("u0", "u1", "u2")
    norm = Normalization.fit(prof.values())
    victim = "u1"
    kept = [e for e in events if not (e.entity_id == victim and e.timestamp >= cut)]
    full = build_samples(events, prof, WindowConfig(), TAX, norm)
    trimmed = build_samples(kept, prof, WindowConfig(), TAX, norm)

    def key(ss):
        return {(s.entity_id, s.anchor, s.target_sub, s.target_gap): s for s in ss.samples
                if s.entity_id != victim or s.anchor + s.target_gap < cut}

    a, b = key(full), key(trimmed)
    assert a.keys() == b.keys()
    for k in a:
        np.testing.assert_array_equal(a[k].ts_window, b[k].ts_window)
        np.testing.assert_array_equal(a[k].event_types, b[k].event_types)
        np.testing.assert_array_equal(a[k].event_dts, b[k].event_dts)


def test_query_sample_uses_events_up_to_time():
    events = _records("a", [1.0, 3.0, 8.0], ["PRT", "CNG", "IDC"])
    static = np.zeros(2)
    q = query_sample("a", events, static, WindowConfig(), TAX, 3.0)
    assert q.anchor == 3.0 and q.event_types[-1] == TAX.sub_id("CNG")
    later = query_sample("a", events, static, WindowConfig(), TAX, 7.9)
    np.testing.assert_array_equal(q.ts_window, later.ts_window)
    with pytest.raises(ValueError, match="insufficient history"):
        query_sample("a", events, static, WindowConfig(), TAX, 0.5)


def test_window_config_validation():
    with pytest.raises(ValueError):
        WindowConfig(n_sub_windows=0)
    with pytest.raises(ValueError):
        WindowConfig(sub_window_days=0.0)


# ---------------------------------------------------------------- splits


def test_split_ten_entities():
    ids = [f"e{k}" for k in range(10)]
    train, test = split_entities(ids, 0.3, rng_seed=1)
    assert len(test) == 3
    assert (train, test) == split_entities(ids, 0.3, rng_seed=1)
    assert set(train) | set(test) == set(ids) and not set(train) & set(test)


@given(st.integers(2, 60), st.floats(0.0, 1.0), st.integers(0, 1000))
def test_split_fraction_within_one_entity(n, frac, seed):
    ids = [f"x{k}" for k in range(n)]
    train, test = split_entities(ids, frac, seed)
    assert abs(len(test) - frac * n) <= 1
    assert sorted(train + test) == sorted(ids)


def test_split_needs_two_entities():
    with pytest.raises(ValueError):
        split_entities(["only"], 0.5)


def test_split_by_entity_is_disjoint():
    rng = np.random.default_rng(0)
    events = _random_log(rng, n_entities=6)
    ss = build_samples(events, _profiles(*[f"u{k}" for k in range(6)]), WindowConfig(), TAX)
    tr, te = split_by_entity(ss, 0.5, 3)
    assert not set(tr.entity_ids()) & set(te.entity_ids())
    assert len(tr) + len(te) == len(ss)


def test_event_log_roundtrip():
    events = _random_log(np.random.default_rng(7))
    back = parse_event_log(io.StringIO(write_event_log(events)), TAX)
    assert back.records == sorted(events, key=lambda r: (r.entity_id, r.timestamp))
