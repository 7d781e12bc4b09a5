"""Event-log and profile ingestion, causal window features, entity splits.

A sample is anchored at the last event strictly before the event it
predicts. Everything it contains (sub-window counts, the event window) is
computed from events at or before the anchor, so nothing at or after the
target time can leak in.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence, TextIO

import numpy as np

from .model import Sample

log = logging.getLogger(__name__)

SAMPLES_FORMAT = "twinpp-samples"
SAMPLES_VERSION = 1


@dataclass(frozen=True)
class EventLogRecord:
    entity_id: str
    timestamp: float
    main_type: str
    sub_type: str

    def to_json(self) -> str:
        return json.dumps({"entity_id": self.entity_id, "timestamp": self.timestamp,
                           "main_type": self.main_type, "sub_type": self.sub_type})


@dataclass
class ProfileRecord:
    entity_id: str
    features: dict[str, float]


@dataclass
class WindowConfig:
    sub_window_days: float = 7.0
    n_sub_windows: int = 5
    event_window_len: int = 7

    def __post_init__(self):
        if not (self.sub_window_days > 0 and self.n_sub_windows >= 1 and self.event_window_len >= 1):
            raise ValueError("window sizes must all be >= 1")


@dataclass
class Taxonomy:
    """Two-level type vocabulary; subtype ids are global across main types."""

    main_types: list[str]
    sub_types: list[str]
    parent: list[int]

    def __post_init__(self):
        if len(self.parent) != len(self.sub_types):
            raise ValueError("every subtype needs a parent")
        if len(set(self.sub_types)) != len(self.sub_types):
            raise ValueError("subtype names must be unique")
        self._sub_index = {s: k for k, s in enumerate(self.sub_types)}
        self._main_index = {m: k for k, m in enumerate(self.main_types)}

    @classmethod
    def from_mapping(cls, mapping) -> "Taxonomy":
        """From ``{main: [subs]}`` or from ``[[main, [subs]], ...]`` pairs."""
        items = mapping.items() if isinstance(mapping, dict) else mapping
        mains, subs, parent = [], [], []
        for k, (main, children) in enumerate(items):
            mains.append(main)
            for s in children:
                subs.append(s)
                parent.append(k)
        return cls(mains, subs, parent)

    def to_mapping(self) -> dict[str, list[str]]:
        return {m: [s for s, p in zip(self.sub_types, self.parent) if p == k]
                for k, m in enumerate(self.main_types)}

    def to_pairs(self) -> list:
        """Ordered ``[[main, [subs]], ...]`` form; survives key-sorted JSON."""
        return [[m, subs] for m, subs in self.to_mapping().items()]

    def sub_id(self, name: str) -> int:
        try:
            return self._sub_index[name]
        except KeyError:
            raise ValueError(f"unknown sub_type {name!r}") from None

    def main_id(self, name: str) -> int:
        try:
            return self._main_index[name]
        except KeyError:
            raise ValueError(f"unknown main_type {name!r}") from None

    def main_of(self, sub: str) -> str:
        return self.main_types[self.parent[self.sub_id(sub)]]

    def dumps(self) -> str:
        return json.dumps({"version": 1, "taxonomy": self.to_pairs()}, indent=1)

    @classmethod
    def loads(cls, text: str) -> "Taxonomy":
        doc = json.loads(text)
        if isinstance(doc, dict) and "taxonomy" in doc:
            doc = doc["taxonomy"]
        return cls.from_mapping(doc)


@dataclass
class EventLog:
    records: list[EventLogRecord]
    n_duplicates: int = 0

    def by_entity(self) -> dict[str, list[EventLogRecord]]:
        out: dict[str, list[EventLogRecord]] = defaultdict(list)
        for r in self.records:
            out[r.entity_id].append(r)
        return dict(out)


def _sorted_dedup(records: Iterable[EventLogRecord]) -> tuple[list[EventLogRecord], int]:
    seen = set()
    kept = []
    dups = 0
    for r in records:
        key = (r.entity_id, r.timestamp, r.sub_type)
        if key in seen:
            dups += 1
            continue
        seen.add(key)
        kept.append(r)
    # stable: ties keep input order
    kept.sort(key=lambda r: (r.entity_id, r.timestamp))
    return kept, dups


def parse_event_log(stream: TextIO | Iterable[str], taxonomy: Taxonomy | None = None) -> EventLog:
    """Read JSONL events, one object per line; blank lines are skipped."""
    raw = []
    for lineno, line in enumerate(stream, start=1):
        if not line.strip():
            continue
        try:
            d = json.loads(line)
            rec = EventLogRecord(str(d["entity_id"]), float(d["timestamp"]),
                                 str(d["main_type"]), str(d["sub_type"]))
        except (ValueError, KeyError, TypeError) as exc:
            raise ValueError(f"malformed event on line {lineno}: {exc}") from None
        if not np.isfinite(rec.timestamp):
            raise ValueError(f"malformed event on line {lineno}: non-finite timestamp")
        if taxonomy is not None:
            try:
                expected = taxonomy.main_of(rec.sub_type)
            except ValueError as exc:
                raise ValueError(f"line {lineno}: {exc}") from None
            if expected != rec.main_type:
                raise ValueError(f"line {lineno}: sub_type {rec.sub_type!r} belongs to "
                                 f"{expected!r}, not {rec.main_type!r}")
        raw.append(rec)
    records, dups = _sorted_dedup(raw)
    if dups:
        log.warning("dropped %d duplicate event lines", dups)
    return EventLog(records, dups)


def write_event_log(records: Iterable[EventLogRecord]) -> str:
    return "".join(r.to_json() + "\n" for r in records)


def parse_profiles(stream: TextIO | Iterable[str]) -> dict[str, ProfileRecord]:
    """CSV with a header row; ``entity_id`` first, remaining columns numeric."""
    reader = csv.reader(stream)
    try:
        header = next(reader)
    except StopIteration:
        return {}
    if not header or header[0] != "entity_id":
        raise ValueError("profile CSV must start with an entity_id column")
    names = header[1:]
    out: dict[str, ProfileRecord] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise ValueError(f"profile line {lineno}: expected {len(header)} fields")
        try:
            feats = {n: float(v) for n, v in zip(names, row[1:])}
        except ValueError:
            raise ValueError(f"profile line {lineno}: non-numeric feature") from None
        if row[0] in out:
            raise ValueError(f"profile line {lineno}: duplicate entity {row[0]!r}")
        out[row[0]] = ProfileRecord(row[0], feats)
    return out


def write_profiles(profiles: Sequence[ProfileRecord]) -> str:
    names = list(profiles[0].features) if profiles else []
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["entity_id", *names])
    for p in profiles:
        w.writerow([p.entity_id, *(repr(p.features[n]) for n in names)])
    return buf.getvalue()


@dataclass
class Normalization:
    """z-score statistics for static profile features (from training entities)."""

    names: list[str]
    mean: list[float]
    std: list[float]

    @classmethod
    def fit(cls, profiles: Iterable[ProfileRecord]) -> "Normalization":
        profiles = list(profiles)
        names = list(profiles[0].features) if profiles else []
        X = np.array([[p.features[n] for n in names] for p in profiles], dtype=np.float64)
        if X.size == 0:
            return cls(names, [0.0] * len(names), [1.0] * len(names))
        std = X.std(axis=0)
        std[std == 0] = 1.0
        return cls(names, X.mean(axis=0).tolist(), std.tolist())

    def apply(self, p: ProfileRecord) -> np.ndarray:
        x = np.array([p.features[n] for n in self.names], dtype=np.float64)
        return (x - np.asarray(self.mean)) / np.asarray(self.std)


@dataclass
class SampleSet:
    samples: list[Sample]
    window: WindowConfig
    taxonomy: Taxonomy
    norm: Normalization
    feature_names: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def ts_feature_dim(self) -> int:
        return len(self.feature_names)

    def header(self) -> dict:
        return {
            "format": SAMPLES_FORMAT,
            "version": SAMPLES_VERSION,
            "window": asdict(self.window),
            "taxonomy": self.taxonomy.to_pairs(),
            "norm": asdict(self.norm),
            "feature_names": self.feature_names,
        }

    def with_samples(self, samples: list[Sample]) -> "SampleSet":
        return SampleSet(samples, self.window, self.taxonomy, self.norm, self.feature_names)

    def entity_ids(self) -> list[str]:
        return sorted({s.entity_id for s in self.samples})

    def dumps(self) -> str:
        lines = [json.dumps(self.header(), sort_keys=True)]
        lines.extend(json.dumps(s.to_dict(), sort_keys=True) for s in self.samples)
        return "\n".join(lines) + "\n"

    @classmethod
    def from_header(cls, header: dict, samples: list[Sample]) -> "SampleSet":
        if header.get("format") != SAMPLES_FORMAT or header.get("version") != SAMPLES_VERSION:
            raise ValueError("not a supported sample file")
        return cls(samples, WindowConfig(**header["window"]),
                   Taxonomy.from_mapping(header["taxonomy"]), Normalization(**header["norm"]),
                   list(header["feature_names"]))

    @classmethod
    def loads(cls, text: str) -> "SampleSet":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise ValueError("empty sample file")
        header = json.loads(lines[0])
        return cls.from_header(header, [Sample.from_dict(json.loads(ln)) for ln in lines[1:]])


def window_counts(times: np.ndarray, subs: np.ndarray, anchor: float, wc: WindowConfig,
                  k_sub: int) -> np.ndarray:
    """Per-subtype counts in the sub-windows (anchor - k*w, anchor - (k-1)*w], oldest first."""
    out = np.zeros((wc.n_sub_windows, k_sub))
    for k in range(1, wc.n_sub_windows + 1):
        hi = anchor - (k - 1) * wc.sub_window_days
        lo = anchor - k * wc.sub_window_days
        sel = (times > lo) & (times <= hi)
        out[wc.n_sub_windows - k] = np.bincount(subs[sel], minlength=k_sub)
    return out


def _history_features(times: np.ndarray, subs: np.ndarray, dts: np.ndarray, n_hist: int,
                      static: np.ndarray, wc: WindowConfig, k_sub: int):
    """(ts_window, event_types, event_dts, anchor) from the first ``n_hist`` events."""
    anchor = times[n_hist - 1]
    counts = window_counts(times[:n_hist], subs[:n_hist], anchor, wc, k_sub)
    ts = np.hstack([np.tile(static, (wc.n_sub_windows, 1)), counts])
    lo = max(0, n_hist - wc.event_window_len)
    ev_t = np.full(wc.event_window_len, k_sub, dtype=np.int64)   # k_sub = padding id
    ev_d = np.zeros(wc.event_window_len)
    m = n_hist - lo
    ev_t[-m:] = subs[lo:n_hist]
    ev_d[-m:] = dts[lo:n_hist]
    return ts, ev_t, ev_d, float(anchor)


def _arrays(events: Sequence[EventLogRecord], taxonomy: Taxonomy):
    times = np.array([e.timestamp for e in events], dtype=np.float64)
    subs = np.array([taxonomy.sub_id(e.sub_type) for e in events], dtype=np.int64)
    dts = np.concatenate([[0.0], np.diff(times)]) if times.size else times
    return times, subs, dts


def entity_samples(entity_id: str, events: Sequence[EventLogRecord], static: np.ndarray,
                   wc: WindowConfig, taxonomy: Taxonomy) -> list[Sample]:
    """Samples for one entity; ``events`` sorted by time."""
    times, subs, dts = _arrays(events, taxonomy)
    k_sub = len(taxonomy.sub_types)
    out = []
    for n in range(1, times.size):
        # history = events strictly before the target; ties with the target are excluded
        n_hist = int(np.searchsorted(times, times[n], side="left"))
        if n_hist == 0:
            continue
        ts, ev_t, ev_d, anchor = _history_features(times, subs, dts, n_hist, static, wc, k_sub)
        sub = int(subs[n])
        out.append(Sample(ts, ev_t, ev_d, taxonomy.parent[sub], sub,
                          float(times[n] - anchor), entity_id, anchor))
    return out


def query_sample(entity_id: str, events: Sequence[EventLogRecord], static: np.ndarray,
                 wc: WindowConfig, taxonomy: Taxonomy, at_time: float) -> Sample:
    """Features for predicting the first event after ``at_time``.

    Uses events at or before ``at_time``; the target fields are placeholders.
    Raises ValueError("insufficient history") when there are none.
    """
    times, subs, dts = _arrays(events, taxonomy)
    n_hist = int(np.searchsorted(times, at_time, side="right"))
    if n_hist == 0:
        raise ValueError(f"insufficient history for entity {entity_id!r} at t={at_time}")
    ts, ev_t, ev_d, anchor = _history_features(times, subs, dts, n_hist, static, wc,
                                               len(taxonomy.sub_types))
    return Sample(ts, ev_t, ev_d, 0, 0, 1.0, entity_id, anchor)


def build_samples(events: EventLog | Sequence[EventLogRecord], profiles: dict[str, ProfileRecord],
                  wc: WindowConfig, taxonomy: Taxonomy,
                  norm: Normalization | None = None) -> SampleSet:
    """Windowed samples for every entity in ``events``, in (entity, anchor) order."""
    log_ = events if isinstance(events, EventLog) else EventLog(_sorted_dedup(events)[0])
    grouped = log_.by_entity()
    missing = sorted(set(grouped) - set(profiles))
    if missing:
        raise ValueError(f"entity {missing[0]!r} has no profile")
    if norm is None:
        norm = Normalization.fit(profiles[e] for e in sorted(grouped))
    samples: list[Sample] = []
    for eid in sorted(grouped):
        samples.extend(entity_samples(eid, grouped[eid], norm.apply(profiles[eid]), wc, taxonomy))
    names = list(norm.names) + [f"count:{s}" for s in taxonomy.sub_types]
    return SampleSet(samples, wc, taxonomy, norm, names)


def split_entities(entity_ids: Iterable[str], test_fraction: float, rng_seed: int = 0):
    ids = sorted(set(entity_ids))
    if len(ids) < 2:
        raise ValueError("need at least 2 entities to split")
    if not 0.0 <= test_fraction <= 1.0:
        raise ValueError("test_fraction must be in [0, 1]")
    n_test = int(round(test_fraction * len(ids)))
    perm = np.random.default_rng(rng_seed).permutation(len(ids))
    test = sorted(ids[i] for i in perm[:n_test])
    train = sorted(ids[i] for i in perm[n_test:])
    return train, test


def split_by_entity(dataset: SampleSet, test_fraction: float, rng_seed: int = 0):
    """Entity-disjoint (train, test) split of a sample set."""
    train_ids, test_ids = split_entities(dataset.entity_ids(), test_fraction, rng_seed)
    test_set = set(test_ids)
    train = [s for s in dataset.samples if s.entity_id not in test_set]
    test = [s for s in dataset.samples if s.entity_id in test_set]
    return dataset.with_samples(train), dataset.with_samples(test)
