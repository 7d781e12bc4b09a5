"""Dense float64 numerics shared by the model and the baselines.

Everything here works on plain ``numpy`` arrays. Gradients are kept next to
their parameters in a :class:`ParamStore` and are always *accumulated*, so a
parameter used at several time steps simply collects one contribution per use.
"""
from __future__ import annotations

import json
from typing import Callable, Iterator

import numpy as np

FORMAT_VERSION = 1


def _require_finite(x: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{what}: non-finite input")


def sigmoid(x):
    """Logistic function, stable for large |x|."""
    x = np.asarray(x, dtype=np.float64)
    _require_finite(x, "sigmoid")
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def softmax(v, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0 or v.shape[axis] == 0:
        raise ValueError("softmax of an empty vector")
    _require_finite(v, "softmax")
    z = v - v.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(v, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0 or v.shape[axis] == 0:
        raise ValueError("log_softmax of an empty vector")
    _require_finite(v, "log_softmax")
    z = v - v.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def matvec(m: np.ndarray, v: np.ndarray) -> np.ndarray:
    """``m @ v`` with an explicit shape check (no broadcasting)."""
    if m.ndim != 2 or v.ndim != 1 or m.shape[1] != v.shape[0]:
        raise ValueError(f"shape mismatch: {m.shape} @ {v.shape}")
    return m @ v


class ParamStore:
    """Named float64 tensors, each with a same-shaped gradient accumulator."""

    def __init__(self) -> None:
        self._values: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}

    def add(self, name: str, value) -> np.ndarray:
        if name in self._values:
            raise KeyError(f"duplicate parameter name {name!r}")
        arr = np.array(value, dtype=np.float64)
        _require_finite(arr, name)
        self._values[name] = arr
        self._grads[name] = np.zeros_like(arr)
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self._values[name]

    def __contains__(self, name: str) -> bool:
        return name in self._values

    def __iter__(self) -> Iterator[str]:
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def names(self) -> list[str]:
        return list(self._values)

    def grad(self, name: str) -> np.ndarray:
        return self._grads[name]

    def accumulate(self, name: str, g: np.ndarray) -> None:
        acc = self._grads[name]
        if np.shape(g) != acc.shape:
            raise ValueError(f"gradient shape {np.shape(g)} != {acc.shape} for {name!r}")
        acc += g

    def zero_grad(self) -> None:
        for g in self._grads.values():
            g.fill(0.0)

    def n_values(self) -> int:
        return sum(v.size for v in self._values.values())

    def copy(self) -> "ParamStore":
        out = ParamStore()
        for k, v in self._values.items():
            out.add(k, v.copy())
        return out

    def grad_norm(self) -> float:
        return float(np.sqrt(sum(float(np.sum(g * g)) for g in self._grads.values())))

    def to_dict(self) -> dict:
        return {
            "version": FORMAT_VERSION,
            "tensors": {
                k: {"shape": list(v.shape), "values": v.ravel().tolist()}
                for k, v in self._values.items()
            },
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ParamStore":
        version = doc.get("version")
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported parameter format version {version!r}")
        store = cls()
        for name, t in doc["tensors"].items():
            shape = tuple(t["shape"])
            vals = np.asarray(t["values"], dtype=np.float64)
            if vals.size != int(np.prod(shape, dtype=int)):
                raise ValueError(f"{name!r}: {vals.size} values for shape {shape}")
            store.add(name, vals.reshape(shape))
        return store

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def loads(cls, text: str) -> "ParamStore":
        return cls.from_dict(json.loads(text))


def gradient_check(loss_fn: Callable[[ParamStore], float], params: ParamStore,
                   eps: float = 1e-5) -> float:
    """Compare analytic gradients against central differences.

    ``loss_fn(params)`` must return the scalar loss and accumulate its
    analytic gradient into ``params``. Returns the largest relative error
    ``|a - n| / max(1, |a|, |n|)`` over every coordinate.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError(f"eps={eps} outside [1e-6, 1e-3]")
    params.zero_grad()
    f0 = loss_fn(params)
    analytic = {k: params.grad(k).copy() for k in params}
    params.zero_grad()
    f1 = loss_fn(params)
    if f0 != f1:
        raise RuntimeError("loss_fn is not deterministic")

    worst = 0.0
    for name in params:
        value = params[name]
        flat = value.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = loss_fn(params)
            flat[i] = orig - eps
            fm = loss_fn(params)
            flat[i] = orig
            num = (fp - fm) / (2.0 * eps)
            a = a_flat[i]
            err = abs(a - num) / max(1.0, abs(a), abs(num))
            worst = max(worst, err)
    params.zero_grad()
    return worst
