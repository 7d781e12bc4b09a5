"""Twin-LSTM conditional-intensity network.

One LSTM reads the evenly spaced feature windows, a second one reads the
recent event sequence (type + inter-event gap). Their last hidden states are
fused into an embedding that feeds three heads: main type, subtype and the
gap (days) to the next event.

All computations are batched over samples (leading axis ``B``); a single
:class:`Sample` is just a batch of one.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from scipy.special import expit

from .numcore import FORMAT_VERSION, ParamStore, log_softmax

HEAD_MODES = ("flat", "hierarchical")
STREAMS = ("both", "ts", "event")
LOSS_MODES = ("joint", "main", "sub")
PEEPHOLES = ("diagonal", "dense")
GATES = ("i", "f", "c", "o")
DT_TRANSFORMS = ("log1p", "raw")


@dataclass
class ModelConfig:
    k_main: int
    k_sub: int
    ts_feature_dim: int
    event_feature_dim: int | None = None  # None -> raw one-hot + gap, no projection
    hidden_dim: int = 32
    embed_dim: int = 16
    head_mode: str = "hierarchical"
    sigma2: float = 10.0
    peephole: str = "diagonal"
    streams: str = "both"
    loss_mode: str = "joint"
    sub_parent: list[int] | None = None
    dt_transform: str = "log1p"     # encoding of the inter-event gap fed to the event LSTM

    def __post_init__(self):
        if self.k_main < 2:
            raise ValueError("k_main must be >= 2")
        if self.k_sub < self.k_main:
            raise ValueError("k_sub must be >= k_main")
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be > 0")
        if self.head_mode not in HEAD_MODES:
            raise ValueError(f"head_mode must be one of {HEAD_MODES}")
        if self.streams not in STREAMS:
            raise ValueError(f"streams must be one of {STREAMS}")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")
        if self.dt_transform not in DT_TRANSFORMS:
            raise ValueError(f"dt_transform must be one of {DT_TRANSFORMS}")
        if self.peephole not in PEEPHOLES:
            raise ValueError(f"peephole must be one of {PEEPHOLES}")
        if self.sub_parent is not None:
            self.sub_parent = [int(p) for p in self.sub_parent]
            if len(self.sub_parent) != self.k_sub or not all(0 <= p < self.k_main for p in self.sub_parent):
                raise ValueError("sub_parent must map every subtype to a main type id")
        if self.event_feature_dim is not None and not 1 <= self.event_feature_dim:
            raise ValueError("event_feature_dim must be >= 1")

    @property
    def null_type(self) -> int:
        """Reserved event-type id used to pad short event windows."""
        return self.k_sub

    @property
    def event_raw_dim(self) -> int:
        return self.k_sub + 2

    @property
    def event_input_dim(self) -> int:
        if self.event_feature_dim is None or self.event_feature_dim >= self.event_raw_dim:
            return self.event_raw_dim
        return self.event_feature_dim

    @property
    def projects_events(self) -> bool:
        return self.event_input_dim != self.event_raw_dim


@dataclass
class Sample:
    """One supervised instance.

    ``ts_window`` is (n_sub_windows, ts_feature_dim), oldest first;
    ``event_types``/``event_dts`` hold the event window, oldest first.
    """

    ts_window: np.ndarray
    event_types: np.ndarray
    event_dts: np.ndarray
    target_main: int
    target_sub: int
    target_gap: float
    entity_id: str = ""
    anchor: float = 0.0

    def __post_init__(self):
        self.ts_window = np.asarray(self.ts_window, dtype=np.float64)
        self.event_types = np.asarray(self.event_types, dtype=np.int64)
        self.event_dts = np.asarray(self.event_dts, dtype=np.float64)
        if self.ts_window.ndim != 2:
            raise ValueError("ts_window must be 2-D")
        if self.event_types.shape != self.event_dts.shape or self.event_types.ndim != 1:
            raise ValueError("event window arrays must be 1-D and aligned")
        if np.any(self.event_dts < 0):
            raise ValueError("event gaps must be >= 0")
        if not self.target_gap > 0:
            raise ValueError("target_gap must be > 0")

    def to_dict(self) -> dict:
        return {
            "entity_id": self.entity_id,
            "anchor": self.anchor,
            "ts_window": self.ts_window.tolist(),
            "event_types": self.event_types.tolist(),
            "event_dts": self.event_dts.tolist(),
            "target_main": int(self.target_main),
            "target_sub": int(self.target_sub),
            "target_gap": float(self.target_gap),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Sample":
        return cls(
            ts_window=np.asarray(d["ts_window"], dtype=np.float64),
            event_types=np.asarray(d["event_types"], dtype=np.int64),
            event_dts=np.asarray(d["event_dts"], dtype=np.float64),
            target_main=int(d["target_main"]),
            target_sub=int(d["target_sub"]),
            target_gap=float(d["target_gap"]),
            entity_id=d.get("entity_id", ""),
            anchor=float(d.get("anchor", 0.0)),
        )


@dataclass
class Batch:
    ts: np.ndarray          # (B, Ty, F)
    ev_types: np.ndarray    # (B, Tz)
    ev_dts: np.ndarray      # (B, Tz)
    main: np.ndarray        # (B,)
    sub: np.ndarray         # (B,)
    gap: np.ndarray         # (B,)

    @property
    def size(self) -> int:
        return self.main.shape[0]


def collate(samples: Sample | Sequence[Sample]) -> Batch:
    if isinstance(samples, Sample):
        samples = [samples]
    if len(samples) == 0:
        raise ValueError("empty batch")
    return Batch(
        ts=np.stack([s.ts_window for s in samples]),
        ev_types=np.stack([s.event_types for s in samples]),
        ev_dts=np.stack([s.event_dts for s in samples]),
        main=np.array([s.target_main for s in samples], dtype=np.int64),
        sub=np.array([s.target_sub for s in samples], dtype=np.int64),
        gap=np.array([s.target_gap for s in samples], dtype=np.float64),
    )


@dataclass
class ClassWeights:
    main: np.ndarray
    sub: np.ndarray

    def __post_init__(self):
        self.main = np.asarray(self.main, dtype=np.float64)
        self.sub = np.asarray(self.sub, dtype=np.float64)
        if np.any(self.main < 0) or np.any(self.sub < 0):
            raise ValueError("class weights must be >= 0")

    @classmethod
    def ones(cls, cfg: ModelConfig) -> "ClassWeights":
        return cls(np.ones(cfg.k_main), np.ones(cfg.k_sub)).for_mode(cfg.loss_mode)

    def for_mode(self, loss_mode: str) -> "ClassWeights":
        """Zero the disabled loss term: ``main`` mode drops the subtype term and vice versa."""
        main, sub = self.main.copy(), self.sub.copy()
        if loss_mode == "main":
            sub[:] = 0.0
        elif loss_mode == "sub":
            main[:] = 0.0
        return ClassWeights(main, sub)


# ---------------------------------------------------------------- parameters

def _lstm_shapes(prefix: str, n_in: int, h: int, peephole: str) -> dict[str, tuple]:
    shapes = {}
    for g in GATES:
        shapes[f"{prefix}.W_{g}"] = (h, n_in)
        shapes[f"{prefix}.U_{g}"] = (h, h)
        shapes[f"{prefix}.b_{g}"] = (h,)
        if g != "c":
            shapes[f"{prefix}.V_{g}"] = (h,) if peephole == "diagonal" else (h, h)
    return shapes


def param_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    h, e = cfg.hidden_dim, cfg.embed_dim
    shapes: dict[str, tuple] = {}
    if cfg.streams in ("both", "ts"):
        shapes.update(_lstm_shapes("ts", cfg.ts_feature_dim, h, cfg.peephole))
    if cfg.streams in ("both", "event"):
        if cfg.projects_events:
            shapes["ev.proj"] = (cfg.event_input_dim, cfg.event_raw_dim)
        shapes.update(_lstm_shapes("ev", cfg.event_input_dim, h, cfg.peephole))
    n_streams = 2 if cfg.streams == "both" else 1
    shapes["fuse.W"] = (e, n_streams * h)
    shapes["fuse.b"] = (e,)
    shapes["main.W"] = (cfg.k_main, e)
    shapes["main.b"] = (cfg.k_main,)
    sub_in = e + cfg.k_main if cfg.head_mode == "hierarchical" else e
    shapes["sub.W"] = (cfg.k_sub, sub_in)
    shapes["sub.b"] = (cfg.k_sub,)
    shapes["time.W"] = (1, e)
    shapes["time.b"] = (1,)
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0, scale: float = 0.08,
                time_bias: float | None = None) -> ParamStore:
    """Uniform(-scale, scale) weights; forget-gate biases start at +1.

    ``time_bias`` sets the gap head's bias (usually the mean training gap).
    Without it the head can only reach typical gaps by saturating the fused
    embedding, which stalls learning of the type heads.
    """
    rng = np.random.default_rng(seed)
    store = ParamStore()
    for name, shape in param_shapes(cfg).items():
        value = rng.uniform(-scale, scale, size=shape)
        if name.endswith(".b_f"):
            value = value + 1.0
        if name == "time.b" and time_bias is not None:
            value = np.full(shape, float(time_bias))
        store.add(name, value)
    return store


def zero_params(cfg: ModelConfig) -> ParamStore:
    store = ParamStore()
    for name, shape in param_shapes(cfg).items():
        store.add(name, np.zeros(shape))
    return store


# ---------------------------------------------------------------- LSTM

def _peep(v: np.ndarray, c: np.ndarray) -> np.ndarray:
    return c * v if v.ndim == 1 else c @ v.T


def _stacked(p: ParamStore, prefix: str):
    W = np.concatenate([p[f"{prefix}.W_{g}"] for g in GATES], axis=0)
    U = np.concatenate([p[f"{prefix}.U_{g}"] for g in GATES], axis=0)
    b = np.concatenate([p[f"{prefix}.b_{g}"] for g in GATES])
    V = tuple(p[f"{prefix}.V_{g}"] for g in ("i", "f", "o"))
    return W, U, b, V


def _cell(zx: np.ndarray, h_prev, c_prev, U, V, cache):
    """Gate arithmetic given the input part ``zx = x W^T + b`` of all four gates."""
    hd = h_prev.shape[-1]
    z = zx + h_prev @ U.T
    i = expit(z[..., :hd] + _peep(V[0], c_prev))
    f = expit(z[..., hd:2 * hd] + _peep(V[1], c_prev))
    g = np.tanh(z[..., 2 * hd:3 * hd])
    c = f * c_prev + i * g
    o = expit(z[..., 3 * hd:] + _peep(V[2], c))
    tc = np.tanh(c)
    h = o * tc
    if cache is not None:
        cache.append((h_prev, c_prev, i, f, g, c, o, tc))
    return h, c


def lstm_step(p: ParamStore, prefix: str, x: np.ndarray, h_prev: np.ndarray,
              c_prev: np.ndarray):
    """One peephole-LSTM step. Works on (n,) vectors or (B, n) batches."""
    W, U, b, V = _stacked(p, prefix)
    hd = U.shape[1]
    if x.shape[-1] != W.shape[1] or h_prev.shape[-1] != hd or c_prev.shape[-1] != hd:
        raise ValueError(
            f"lstm_step {prefix}: x{x.shape} h{h_prev.shape} c{c_prev.shape} "
            f"vs W_i{(hd, W.shape[1])}"
        )
    return _cell(x @ W.T + b, h_prev, c_prev, U, V, None)


def _lstm_run(p: ParamStore, prefix: str, xs: np.ndarray):
    """Run over xs (B, T, n) from zero state; return final h and the per-step cache."""
    W, U, b, V = _stacked(p, prefix)
    B, T, n = xs.shape
    if n != W.shape[1]:
        raise ValueError(f"{prefix} input dim {n} != {W.shape[1]}")
    hd = U.shape[1]
    zx = xs @ W.T + b
    h = np.zeros((B, hd))
    c = np.zeros((B, hd))
    cache: list = []
    for t in range(T):
        h, c = _cell(zx[:, t, :], h, c, U, V, cache)
    return h, cache


def _lstm_backward(p: ParamStore, prefix: str, xs: np.ndarray, cache: list,
                   dh: np.ndarray, want_dx: bool = False):
    """BPTT from the final hidden-state gradient ``dh``; returns dxs (B, T, n) if asked."""
    W, U, _, V = _stacked(p, prefix)
    Vi, Vf, Vo = V
    diag = Vi.ndim == 1
    B, T, _ = xs.shape
    hd = U.shape[1]
    dz = np.empty((B, T, 4 * hd))
    dU = np.zeros_like(U)
    dV = [np.zeros_like(v) for v in V]
    dc = np.zeros_like(dh)

    for t in range(T - 1, -1, -1):
        h_prev, c_prev, i, f, g, c, o, tc = cache[t]
        da_o = dh * tc * o * (1.0 - o)
        dct = dc + dh * o * (1.0 - tc * tc)
        if diag:
            dct = dct + da_o * Vo
            dV[2] += np.sum(da_o * c, axis=0)
        else:
            dct = dct + da_o @ Vo
            dV[2] += da_o.T @ c
        da_i = dct * g * i * (1.0 - i)
        da_f = dct * c_prev * f * (1.0 - f)
        da_c = dct * i * (1.0 - g * g)
        if diag:
            dc = dct * f + da_i * Vi + da_f * Vf
            dV[0] += np.sum(da_i * c_prev, axis=0)
            dV[1] += np.sum(da_f * c_prev, axis=0)
        else:
            dc = dct * f + da_i @ Vi + da_f @ Vf
            dV[0] += da_i.T @ c_prev
            dV[1] += da_f.T @ c_prev
        d = dz[:, t, :]
        d[:, :hd] = da_i
        d[:, hd:2 * hd] = da_f
        d[:, 2 * hd:3 * hd] = da_c
        d[:, 3 * hd:] = da_o
        dU += d.T @ h_prev
        dh = d @ U

    flat = dz.reshape(B * T, 4 * hd)
    dW = flat.T @ xs.reshape(B * T, -1)
    db = flat.sum(axis=0)
    for k, gate in enumerate(GATES):
        rows = slice(k * hd, (k + 1) * hd)
        p.accumulate(f"{prefix}.W_{gate}", dW[rows])
        p.accumulate(f"{prefix}.U_{gate}", dU[rows])
        p.accumulate(f"{prefix}.b_{gate}", db[rows])
    for gate, g in zip(("i", "f", "o"), dV):
        p.accumulate(f"{prefix}.V_{gate}", g)
    return dz @ W if want_dx else None


# ---------------------------------------------------------------- network

@dataclass
class Output:
    main_probs: np.ndarray   # (B, K_main)
    sub_probs: np.ndarray    # (B, K_sub)
    s_hat: np.ndarray        # (B,)
    main_logp: np.ndarray
    sub_logp: np.ndarray
    trace: dict = field(default_factory=dict, repr=False)


def encode_events(cfg: ModelConfig, ev_types: np.ndarray, ev_dts: np.ndarray) -> np.ndarray:
    """One-hot type (incl. the padding id) concatenated with the encoded gap; (B, T, k_sub + 2)."""
    if np.any(ev_types < 0) or np.any(ev_types > cfg.null_type):
        bad = ev_types[(ev_types < 0) | (ev_types > cfg.null_type)][0]
        raise ValueError(f"unknown event type id {int(bad)}")
    B, T = ev_types.shape
    raw = np.zeros((B, T, cfg.event_raw_dim))
    b_idx, t_idx = np.meshgrid(np.arange(B), np.arange(T), indexing="ij")
    raw[b_idx, t_idx, ev_types] = 1.0
    raw[:, :, -1] = np.log1p(ev_dts) if cfg.dt_transform == "log1p" else ev_dts
    return raw


def forward(params: ParamStore, samples, cfg: ModelConfig) -> Output:
    batch = samples if isinstance(samples, Batch) else collate(samples)
    trace: dict = {"batch": batch}
    hs = []
    if cfg.streams in ("both", "ts"):
        if batch.ts.shape[2] != cfg.ts_feature_dim:
            raise ValueError(f"ts feature dim {batch.ts.shape[2]} != {cfg.ts_feature_dim}")
        hy, trace["ts"] = _lstm_run(params, "ts", batch.ts)
        trace["ts_x"] = batch.ts
        hs.append(hy)
    if cfg.streams in ("both", "event"):
        raw = encode_events(cfg, batch.ev_types, batch.ev_dts)
        trace["ev_raw"] = raw
        xs = raw @ params["ev.proj"].T if cfg.projects_events else raw
        hz, trace["ev"] = _lstm_run(params, "ev", xs)
        trace["ev_x"] = xs
        hs.append(hz)
    hcat = np.concatenate(hs, axis=1)
    e = np.tanh(hcat @ params["fuse.W"].T + params["fuse.b"])
    main_logits = e @ params["main.W"].T + params["main.b"]
    main_logp = log_softmax(main_logits)
    main_probs = np.exp(main_logp)
    sub_in = np.concatenate([e, main_probs], axis=1) if cfg.head_mode == "hierarchical" else e
    sub_logp = log_softmax(sub_in @ params["sub.W"].T + params["sub.b"])
    sub_probs = np.exp(sub_logp)
    s_hat = (e @ params["time.W"].T + params["time.b"])[:, 0]
    trace.update(hcat=hcat, e=e, sub_in=sub_in)
    return Output(main_probs, sub_probs, s_hat, main_logp, sub_logp, trace)


def time_penalty(s_true, s_hat, sigma2: float):
    """Negative log of a N(s_hat, sigma2) density evaluated at s_true."""
    if not sigma2 > 0:
        raise ValueError("sigma2 must be > 0")
    d = np.asarray(s_true, dtype=np.float64) - np.asarray(s_hat, dtype=np.float64)
    out = 0.5 * math.log(2.0 * math.pi * sigma2) + d * d / (2.0 * sigma2)
    return out if np.ndim(out) else float(out)


def _check_weights(w: ClassWeights, cfg: ModelConfig) -> None:
    if w.main.shape != (cfg.k_main,) or w.sub.shape != (cfg.k_sub,):
        raise ValueError(
            f"class weight lengths ({w.main.size}, {w.sub.size}) != ({cfg.k_main}, {cfg.k_sub})"
        )


def per_sample_loss(out: Output, samples, w: ClassWeights, cfg: ModelConfig) -> np.ndarray:
    batch = samples if isinstance(samples, Batch) else collate(samples)
    _check_weights(w, cfg)
    w = w.for_mode(cfg.loss_mode)
    rows = np.arange(batch.size)
    main_term = -w.main[batch.main] * out.main_logp[rows, batch.main]
    sub_term = -w.sub[batch.sub] * out.sub_logp[rows, batch.sub]
    return main_term + sub_term + time_penalty(batch.gap, out.s_hat, cfg.sigma2)


def loss(out: Output, samples, w: ClassWeights, cfg: ModelConfig) -> float:
    """Mean over the batch of weighted cross-entropies plus the time penalty."""
    return float(np.mean(per_sample_loss(out, samples, w, cfg)))


def backward(params: ParamStore, samples, w: ClassWeights, cfg: ModelConfig,
             out: Output | None = None) -> float:
    """Accumulate d(mean loss)/d(params) into ``params``; returns the loss."""
    if out is None:
        out = forward(params, samples, cfg)
    batch: Batch = out.trace["batch"]
    _check_weights(w, cfg)
    value = loss(out, batch, w, cfg)
    w = w.for_mode(cfg.loss_mode)
    B = batch.size
    rows = np.arange(B)
    e, sub_in, hcat = out.trace["e"], out.trace["sub_in"], out.trace["hcat"]

    # subtype head
    d_sub = out.sub_probs.copy()
    d_sub[rows, batch.sub] -= 1.0
    d_sub *= (w.sub[batch.sub] / B)[:, None]
    params.accumulate("sub.W", d_sub.T @ sub_in)
    params.accumulate("sub.b", d_sub.sum(axis=0))
    d_sub_in = d_sub @ params["sub.W"]
    E = cfg.embed_dim
    de = d_sub_in[:, :E].copy()

    # main head (direct + through the hierarchical subtype input)
    d_main = out.main_probs.copy()
    d_main[rows, batch.main] -= 1.0
    d_main *= (w.main[batch.main] / B)[:, None]
    if cfg.head_mode == "hierarchical":
        dU = d_sub_in[:, E:]
        P = out.main_probs
        d_main += P * (dU - np.sum(dU * P, axis=1, keepdims=True))
    params.accumulate("main.W", d_main.T @ e)
    params.accumulate("main.b", d_main.sum(axis=0))
    de += d_main @ params["main.W"]

    # time head
    ds = ((out.s_hat - batch.gap) / cfg.sigma2 / B)[:, None]
    params.accumulate("time.W", ds.T @ e)
    params.accumulate("time.b", ds.sum(axis=0))
    de += ds @ params["time.W"]

    # fusion
    da = de * (1.0 - e * e)
    params.accumulate("fuse.W", da.T @ hcat)
    params.accumulate("fuse.b", da.sum(axis=0))
    dh = da @ params["fuse.W"]
    H = cfg.hidden_dim
    offset = 0
    if cfg.streams in ("both", "ts"):
        _lstm_backward(params, "ts", out.trace["ts_x"], out.trace["ts"], dh[:, offset:offset + H])
        offset += H
    if cfg.streams in ("both", "event"):
        dxs = _lstm_backward(params, "ev", out.trace["ev_x"], out.trace["ev"],
                             dh[:, offset:offset + H], want_dx=cfg.projects_events)
        if cfg.projects_events:
            raw = out.trace["ev_raw"]
            n = raw.shape[0] * raw.shape[1]
            params.accumulate("ev.proj", dxs.reshape(n, -1).T @ raw.reshape(n, -1))
    return value


def loss_and_grad(params: ParamStore, samples, w: ClassWeights, cfg: ModelConfig) -> float:
    return backward(params, samples, w, cfg)


@dataclass
class PredictedEvent:
    main_type: int
    sub_type: int
    gap_days: float


def _predict_from_output(out: Output, cfg: ModelConfig) -> list[PredictedEvent]:
    # np.argmax returns the first maximum, i.e. the lowest class id on ties
    subs = np.argmax(out.sub_probs, axis=1)
    if cfg.loss_mode == "sub" and cfg.sub_parent is not None:
        mains = np.array([cfg.sub_parent[s] for s in subs])
    else:
        mains = np.argmax(out.main_probs, axis=1)
    gaps = np.maximum(out.s_hat, 0.0)
    return [PredictedEvent(int(m), int(s), float(g)) for m, s, g in zip(mains, subs, gaps)]


def predict_next(params: ParamStore, samples, cfg: ModelConfig):
    """Argmax types and the non-negative predicted gap.

    When the main-type loss is disabled (``loss_mode="sub"``) and the
    taxonomy is known, the main type is the parent of the predicted subtype.
    Returns one :class:`PredictedEvent` for a single sample, else a list.
    """
    single = isinstance(samples, Sample)
    preds = _predict_from_output(forward(params, samples, cfg), cfg)
    return preds[0] if single else preds


def predict_batched(params: ParamStore, samples: Sequence[Sample], cfg: ModelConfig,
                    batch_size: int = 512) -> list[PredictedEvent]:
    preds: list[PredictedEvent] = []
    for start in range(0, len(samples), batch_size):
        preds.extend(predict_next(params, samples[start:start + batch_size], cfg))
    return preds


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_FORMAT = "twinpp-checkpoint"


def save_checkpoint(params: ParamStore, cfg: ModelConfig, vocab: dict,
                    extra: dict | None = None) -> str:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": FORMAT_VERSION,
        "kind": "rnn",
        "config": asdict(cfg),
        "vocab": vocab,
        "params": params.to_dict(),
    }
    if extra:
        doc.update(extra)
    return json.dumps(doc, sort_keys=True)


def load_checkpoint(text: str):
    doc = json.loads(text)
    if doc.get("format") != CHECKPOINT_FORMAT or doc.get("version") != FORMAT_VERSION:
        raise ValueError("not a supported checkpoint")
    cfg = ModelConfig(**doc["config"])
    params = ParamStore.from_dict(doc["params"])
    expected = param_shapes(cfg)
    if set(expected) != set(params.names()):
        raise ValueError("checkpoint parameters do not match its config")
    return params, cfg, doc
