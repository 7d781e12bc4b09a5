"""Classical conditional-intensity families and Ogata thinning.

Intensities are evaluated in closed form from the event history. Sampling
uses thinning with a local upper bound valid over a look-ahead interval;
when a proposal falls past the interval the clock is advanced to its end and
a fresh bound is computed.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np
from scipy import integrate

# ---------------------------------------------------------------- models


def _table(times, values):
    times = np.asarray(times, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if times.ndim != 1 or times.shape != values.shape or times.size < 1:
        raise ValueError("piecewise-linear table needs aligned 1-D knots")
    if np.any(np.diff(times) <= 0):
        raise ValueError("table knots must be strictly increasing")
    if np.any(values < 0):
        raise ValueError("table values must be >= 0")
    return times, values


@dataclass(frozen=True)
class Poisson:
    mu0: float

    def __post_init__(self):
        if self.mu0 < 0:
            raise ValueError("mu0 must be >= 0")


@dataclass(frozen=True)
class TimeVaryingPoisson:
    """mu(t) linear between knots, held constant outside them."""

    times: tuple
    values: tuple

    def __post_init__(self):
        _table(self.times, self.values)

    def mu(self, t):
        return np.interp(t, self.times, self.values)


@dataclass(frozen=True)
class ReinforcedPoisson:
    """lambda(t) = gamma(t) * (number of events before t), gamma piecewise linear."""

    times: tuple
    values: tuple

    def __post_init__(self):
        _table(self.times, self.values)

    def gamma(self, t):
        return np.interp(t, self.times, self.values)


@dataclass(frozen=True)
class Hawkes:
    mu: float
    alpha: float
    beta: float

    def __post_init__(self):
        if self.mu < 0 or self.alpha < 0 or not self.beta > 0:
            raise ValueError("Hawkes needs mu >= 0, alpha >= 0, beta > 0")


@dataclass(frozen=True)
class Reactive:
    """Exciting minus inhibiting exponential kernels, clamped at zero."""

    mu: float
    alpha1: float
    beta1: float
    alpha2: float
    beta2: float

    def __post_init__(self):
        if self.mu < 0 or self.alpha1 < 0 or self.alpha2 < 0:
            raise ValueError("Reactive needs mu, alpha1, alpha2 >= 0")
        if not (self.beta1 > 0 and self.beta2 > 0):
            raise ValueError("Reactive needs beta1, beta2 > 0")


@dataclass(frozen=True)
class SelfCorrecting:
    """lambda(t) = exp(mu t - alpha * (number of events before t))."""

    mu: float
    alpha: float

    def __post_init__(self):
        if not (self.mu > 0 and self.alpha > 0):
            raise ValueError("SelfCorrecting needs mu > 0, alpha > 0")


@dataclass
class MultiHawkes:
    """D-dimensional Hawkes process with a shared exponential decay.

    ``adjacency[d, j]`` is the jump in dimension d's intensity caused by an
    event in dimension j.
    """

    mu: np.ndarray
    adjacency: np.ndarray
    beta: float

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(-1)
        self.adjacency = np.asarray(self.adjacency, dtype=np.float64)
        D = self.mu.size
        if D < 1 or self.adjacency.shape != (D, D):
            raise ValueError("mu must have length D >= 1 and adjacency shape (D, D)")
        if np.any(self.mu < 0) or np.any(self.adjacency < 0) or not self.beta > 0:
            raise ValueError("MultiHawkes needs mu >= 0, adjacency >= 0, beta > 0")

    @property
    def dim(self) -> int:
        return self.mu.size

    def spectral_radius(self) -> float:
        return float(np.max(np.abs(np.linalg.eigvals(self.adjacency / self.beta))))

    def stationary_rates(self) -> np.ndarray:
        return np.linalg.solve(np.eye(self.dim) - self.adjacency / self.beta, self.mu)

    def to_dict(self) -> dict:
        return {"kind": "multi_hawkes", "mu": self.mu.tolist(),
                "adjacency": self.adjacency.tolist(), "beta": float(self.beta)}

    @classmethod
    def from_dict(cls, d: dict) -> "MultiHawkes":
        if d.get("kind", "multi_hawkes") != "multi_hawkes":
            raise ValueError(f"not a multi_hawkes generator: {d.get('kind')!r}")
        return cls(d["mu"], d["adjacency"], d["beta"])


IntensityModel = Union[Poisson, TimeVaryingPoisson, ReinforcedPoisson, Hawkes, Reactive, SelfCorrecting]


@dataclass
class EventSequence:
    times: np.ndarray
    horizon: float
    marks: np.ndarray | None = None

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        if self.marks is not None:
            self.marks = np.asarray(self.marks, dtype=np.int64)
            if self.marks.shape != self.times.shape:
                raise ValueError("marks must align with times")
        if self.times.size:
            if np.any(np.diff(self.times) <= 0):
                raise ValueError("event times must be strictly increasing")
            if self.times[0] < 0 or self.times[-1] > self.horizon:
                raise ValueError("event times must lie in [0, horizon]")

    def __len__(self) -> int:
        return self.times.size


# ---------------------------------------------------------------- intensity


def _history(history) -> np.ndarray:
    if isinstance(history, EventSequence):
        return history.times
    h = np.asarray(history if history is not None else [], dtype=np.float64).reshape(-1)
    if h.size > 1 and np.any(np.diff(h) < 0):
        raise ValueError("history must be sorted")
    return h


def _exp_sum(h: np.ndarray, t: float, beta: float) -> float:
    past = h[h < t]
    return float(np.sum(np.exp(-beta * (t - past))))


def intensity_at(m: IntensityModel, t: float, history=()) -> float:
    """Conditional intensity at ``t``; only events strictly before ``t`` count."""
    if t < 0:
        raise ValueError("t must be >= 0")
    h = _history(history)
    if isinstance(m, Poisson):
        return float(m.mu0)
    if isinstance(m, TimeVaryingPoisson):
        return float(m.mu(t))
    if isinstance(m, ReinforcedPoisson):
        return float(m.gamma(t)) * int(np.sum(h < t))
    if isinstance(m, Hawkes):
        return m.mu + m.alpha * _exp_sum(h, t, m.beta)
    if isinstance(m, Reactive):
        lam = m.mu + m.alpha1 * _exp_sum(h, t, m.beta1) - m.alpha2 * _exp_sum(h, t, m.beta2)
        return max(lam, 0.0)
    if isinstance(m, SelfCorrecting):
        return math.exp(m.mu * t - m.alpha * int(np.sum(h < t)))
    raise TypeError(f"unsupported model {type(m).__name__}")


def multi_intensity_at(m: MultiHawkes, t: float, times, marks) -> np.ndarray:
    """Per-dimension intensities of a :class:`MultiHawkes` at ``t``."""
    times = np.asarray(times, dtype=np.float64)
    marks = np.asarray(marks, dtype=np.int64)
    keep = times < t
    decay = np.exp(-m.beta * (t - times[keep]))
    per_source = np.bincount(marks[keep], weights=decay, minlength=m.dim)
    return m.mu + m.adjacency @ per_source


def _piecewise_linear_integral(times, values, a: float, b: float) -> float:
    if b <= a:
        return 0.0
    knots = np.concatenate([[a], times[(times > a) & (times < b)], [b]])
    vals = np.interp(knots, times, values)
    return float(np.sum(0.5 * (vals[1:] + vals[:-1]) * np.diff(knots)))


def compensator(m: IntensityModel, t: float, history=()) -> float:
    """Integrated intensity over [0, t] given the event history."""
    h = _history(history)
    h = h[h < t]
    if isinstance(m, Poisson):
        return m.mu0 * t
    if isinstance(m, TimeVaryingPoisson):
        return _piecewise_linear_integral(np.asarray(m.times), np.asarray(m.values), 0.0, t)
    if isinstance(m, Hawkes):
        start = np.exp(-m.beta * (np.maximum(h, 0.0) - h))
        return m.mu * t + m.alpha / m.beta * float(np.sum(start - np.exp(-m.beta * (t - h))))
    # events at or before 0 only shift the starting count
    n0 = int(np.sum(h <= 0.0))
    edges = np.concatenate([[0.0], h[h > 0.0], [t]])
    if isinstance(m, SelfCorrecting):
        total = 0.0
        for k in range(edges.size - 1):
            a, b = edges[k], edges[k + 1]
            total += math.exp(-m.alpha * (n0 + k)) * (math.exp(m.mu * b) - math.exp(m.mu * a)) / m.mu
        return total
    if isinstance(m, ReinforcedPoisson):
        tt, vv = np.asarray(m.times), np.asarray(m.values)
        return sum((n0 + k) * _piecewise_linear_integral(tt, vv, edges[k], edges[k + 1])
                   for k in range(edges.size - 1))
    if isinstance(m, Reactive):
        return sum(integrate.quad(lambda s: intensity_at(m, s, h), edges[k], edges[k + 1])[0]
                   for k in range(edges.size - 1))
    raise TypeError(f"unsupported model {type(m).__name__}")


def multi_compensator(m: MultiHawkes, t: float, times, marks) -> np.ndarray:
    """Per-dimension integrated intensity over [0, t]."""
    times = np.asarray(times, dtype=np.float64)
    marks = np.asarray(marks, dtype=np.int64)
    keep = times < t
    mass = np.bincount(marks[keep], weights=1.0 - np.exp(-m.beta * (t - times[keep])),
                       minlength=m.dim)
    return m.mu * t + (m.adjacency @ mass) / m.beta


# ---------------------------------------------------------------- thinning


class UnboundedIntensity(ValueError):
    pass


def _bound(m, t: float, h: list, T: float):
    """Upper bound of the intensity on [t, t_end]; returns (bound, t_end)."""
    if isinstance(m, Poisson):
        return m.mu0, T
    if isinstance(m, (TimeVaryingPoisson, ReinforcedPoisson)):
        knots = np.asarray(m.times)
        ahead = knots[knots > t]
        t_end = min(float(ahead[0]), T) if ahead.size else T
        fn = m.mu if isinstance(m, TimeVaryingPoisson) else m.gamma
        peak = max(float(fn(t)), float(fn(t_end)))
        if isinstance(m, ReinforcedPoisson):
            peak *= len(h)
        return peak, t_end
    if isinstance(m, Hawkes):
        # non-increasing between events, so the value just after t bounds the gap
        hh = np.asarray(h)
        return m.mu + m.alpha * float(np.sum(np.exp(-m.beta * (t - hh)))), T
    if isinstance(m, Reactive):
        # the inhibiting part can only lower the intensity; the exciting part decays
        hh = np.asarray(h)
        return m.mu + m.alpha1 * float(np.sum(np.exp(-m.beta1 * (t - hh)))), T
    if isinstance(m, SelfCorrecting):
        t_end = min(t + 1.0 / m.mu, T)
        try:
            b = math.exp(m.mu * t_end - m.alpha * len(h))
        except OverflowError:
            b = math.inf
        return b, t_end
    raise TypeError(f"unsupported model {type(m).__name__}")


def _rng(rng_seed) -> np.random.Generator:
    if isinstance(rng_seed, np.random.Generator):
        return rng_seed
    return np.random.default_rng(rng_seed)


def sample_thinning(m: IntensityModel | MultiHawkes, T: float, rng_seed=0,
                    history: Sequence[float] = (), max_events: int | None = None) -> EventSequence:
    """Sample events on (0, T] by Ogata thinning.

    ``history`` conditions the process on earlier events (times <= 0 are
    allowed); it is not part of the returned sequence. For a
    :class:`MultiHawkes` each accepted event gets a mark drawn in proportion
    to the per-dimension intensities.
    """
    if T < 0:
        raise ValueError("T must be >= 0")
    rng = _rng(rng_seed)
    if isinstance(m, MultiHawkes):
        return _sample_multi(m, T, rng, max_events)
    h = list(np.asarray(history, dtype=np.float64))
    out: list[float] = []
    t = 0.0
    while t < T:
        lam_bar, t_end = _bound(m, t, h, T)
        if not math.isfinite(lam_bar):
            raise UnboundedIntensity(f"intensity bound is infinite at t={t}")
        if lam_bar <= 0.0:
            if t_end >= T:
                break
            t = t_end
            continue
        cand = t + rng.exponential(1.0 / lam_bar)
        if cand > t_end:
            t = t_end
            continue
        lam = intensity_at(m, cand, h)
        assert lam <= lam_bar * (1.0 + 1e-12), (lam, lam_bar)
        t = cand
        if rng.uniform() * lam_bar <= lam:
            h.append(cand)
            out.append(cand)
            if max_events is not None and len(out) >= max_events:
                break
    return EventSequence(np.asarray(out), T)


def _sample_multi(m: MultiHawkes, T: float, rng: np.random.Generator,
                  max_events: int | None, state: np.ndarray | None = None,
                  t0: float = 0.0) -> EventSequence:
    # state[j]: sum over past events in dim j of exp(-beta (t - t_k)), kept at the clock t
    excite = np.zeros(m.dim) if state is None else state.copy()
    times: list[float] = []
    marks: list[int] = []
    t = t0
    while True:
        lam_bar = float(np.sum(m.mu + m.adjacency @ excite))
        if lam_bar <= 0.0:
            break
        cand = t + rng.exponential(1.0 / lam_bar)
        if cand > T:
            break
        excite = excite * math.exp(-m.beta * (cand - t))
        t = cand
        lam = m.mu + m.adjacency @ excite
        total = float(lam.sum())
        assert total <= lam_bar * (1.0 + 1e-12), (total, lam_bar)
        if rng.uniform() * lam_bar <= total:
            d = int(rng.choice(m.dim, p=lam / total))
            times.append(t)
            marks.append(d)
            excite[d] += 1.0
            if max_events is not None and len(times) >= max_events:
                break
    return EventSequence(np.asarray(times), T, np.asarray(marks, dtype=np.int64))


def excitation_state(m: MultiHawkes, t: float, times, marks) -> np.ndarray:
    """Per-source decayed event mass at ``t`` (events strictly before ``t``)."""
    times = np.asarray(times, dtype=np.float64)
    marks = np.asarray(marks, dtype=np.int64)
    keep = times < t
    return np.bincount(marks[keep], weights=np.exp(-m.beta * (t - times[keep])),
                       minlength=m.dim)


def sample_continuation(m: MultiHawkes, t0: float, times, marks, rng, horizon: float = math.inf,
                        max_events: int = 1) -> EventSequence:
    """Continue a multivariate history forward from ``t0`` by thinning."""
    state = excitation_state(m, t0, times, marks)
    return _sample_multi(m, horizon, _rng(rng), max_events, state=state, t0=t0)


def check_stationarity(m: MultiHawkes) -> float:
    rho = m.spectral_radius()
    if rho >= 1.0:
        warnings.warn(f"spectral radius of adjacency/beta is {rho:.3f} >= 1; process is explosive",
                      RuntimeWarning, stacklevel=2)
    return rho


# ---------------------------------------------------------------- synthetic corpora

DEFAULT_TAXONOMY = {
    "ticket": ["ticket"],
    "error": ["PRT", "CNG", "IDC", "COMM", "LMTP", "MISC"],
}


def chain_hawkes(D: int, base: float = 0.02, forward: float = 0.6, self_excite: float = 0.1,
                 beta: float = 1.0) -> MultiHawkes:
    """Each dimension mostly triggers the next one (cyclically), plus weak self-excitation."""
    A = np.zeros((D, D))
    for j in range(D):
        A[(j + 1) % D, j] += forward * beta
        A[j, j] += self_excite * beta
    return MultiHawkes(np.full(D, base), A, beta)


@dataclass
class SyntheticSpec:
    n_entities: int = 20
    horizon: float = 200.0
    # [[main, [subs]], ...]; a list keeps the order through key-sorted JSON
    taxonomy: list = field(default_factory=lambda: [[k, list(v)] for k, v in DEFAULT_TAXONOMY.items()])
    generator: str = "hawkes"       # "poisson" or "hawkes"
    rate: float = 1.0               # total rate of the poisson generator (marks uniform)
    mu: list | None = None          # hawkes; None -> chain_hawkes defaults
    adjacency: list | None = None
    beta: float = 1.0
    chain_base: float = 0.02        # used when mu/adjacency are not given
    chain_forward: float = 0.6
    chain_self_excite: float = 0.1
    age_effect: float = 0.0         # base rates scaled by exp(age_effect * (age / 10 - 0.5))
    n_models: int = 5
    hierarchical: bool = True

    @property
    def sub_types(self) -> list[str]:
        items = self.taxonomy.items() if isinstance(self.taxonomy, dict) else self.taxonomy
        return [s for _, subs in items for s in subs]

    def generator_model(self) -> MultiHawkes:
        D = len(self.sub_types)
        if self.generator == "poisson":
            return MultiHawkes(np.full(D, self.rate / D), np.zeros((D, D)), 1.0)
        if self.generator == "hawkes":
            if self.mu is None and self.adjacency is None:
                return chain_hawkes(D, self.chain_base, self.chain_forward,
                                    self.chain_self_excite, self.beta)
            if self.mu is None or self.adjacency is None:
                raise ValueError("hawkes generator needs both mu and adjacency")
            return MultiHawkes(self.mu, self.adjacency, self.beta)
        raise ValueError(f"unknown generator {self.generator!r}")


@dataclass
class SyntheticDataset:
    events: list        # data.EventLogRecord
    profiles: list      # data.ProfileRecord
    taxonomy: object    # data.Taxonomy
    manifest: dict


def entity_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def make_synthetic_dataset(spec: SyntheticSpec, rng_seed: int = 0) -> SyntheticDataset:
    """Simulate labelled event logs and entity profiles from a known generator."""
    from .data import EventLogRecord, ProfileRecord, Taxonomy

    taxonomy = Taxonomy.from_mapping(spec.taxonomy)
    D = len(taxonomy.sub_types)
    if spec.hierarchical and (D < 2 or len(taxonomy.main_types) < 2):
        raise ValueError("hierarchical evaluation needs >= 2 subtypes in >= 2 main types")
    if spec.n_entities < 1 or spec.horizon < 0:
        raise ValueError("need n_entities >= 1 and horizon >= 0")
    base = spec.generator_model()
    check_stationarity(base)

    events, profiles, per_entity = [], [], {}
    width = max(4, len(str(spec.n_entities - 1)))
    for k in range(spec.n_entities):
        rng = entity_rng(rng_seed, k)
        eid = f"e{k:0{width}d}"
        age = float(np.round(rng.uniform(0.0, 10.0), 3))
        model_code = int(rng.integers(spec.n_models))
        scale = math.exp(spec.age_effect * (age / 10.0 - 0.5))
        gen = MultiHawkes(base.mu * scale, base.adjacency, base.beta)
        seq = sample_thinning(gen, spec.horizon, rng)
        profiles.append(ProfileRecord(eid, {"age": age, "model": float(model_code)}))
        for t, d in zip(seq.times, seq.marks):
            sub = taxonomy.sub_types[d]
            events.append(EventLogRecord(eid, float(t), taxonomy.main_of(sub), sub))
        per_entity[eid] = {"mu": gen.mu.tolist(), "n_events": len(seq)}

    manifest = {
        "version": 1,
        "seed": rng_seed,
        "horizon": spec.horizon,
        "settings": {k: v for k, v in spec.__dict__.items()},
        "generator": base.to_dict(),
        "sub_types": taxonomy.sub_types,
        "entities": per_entity,
    }
    return SyntheticDataset(events, profiles, taxonomy, manifest)
