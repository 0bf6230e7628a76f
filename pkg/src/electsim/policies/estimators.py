"""Small online estimators used by adaptive baselines and context features."""

from __future__ import annotations

import math
from collections import deque

import numpy as np


class Ewma:
    """Exponentially weighted mean and variance."""

    def __init__(self, alpha: float = 0.125):
        self.alpha = alpha
        self.mean: float | None = None
        self.var = 0.0

    def update(self, x: float) -> None:
        if self.mean is None:
            self.mean = x
            return
        diff = x - self.mean
        incr = self.alpha * diff
        self.mean += incr
        self.var = (1 - self.alpha) * (self.var + diff * incr)

    @property
    def std(self) -> float:
        return math.sqrt(self.var)

    def state_dict(self) -> dict:
        return {"alpha": self.alpha, "mean": self.mean, "var": self.var}

    def load_state_dict(self, d: dict) -> None:
        self.alpha, self.mean, self.var = d["alpha"], d["mean"], d["var"]


class QuantileEstimator:
    """Decayed p-quantile over a bounded buffer of recent observations.

    Observation i (0 = newest) carries weight ``decay**i``; the estimate is the
    smallest buffered value whose cumulative weight reaches ``p`` of the total.
    """

    def __init__(self, p: float = 0.9, decay: float = 0.99, window: int = 256):
        if not 0 < p < 1:
            raise ValueError("quantile p must lie in (0, 1)")
        self.p = p
        self.decay = decay
        self.window = window
        self._buf: deque[float] = deque(maxlen=window)
        self._cache: float | None = None
        self._weights = decay ** np.arange(window)[::-1]

    def update(self, x: float) -> None:
        self._buf.append(float(x))
        self._cache = None

    def __len__(self) -> int:
        return len(self._buf)

    @property
    def estimate(self) -> float | None:
        if not self._buf:
            return None
        if self._cache is None:
            vals = np.fromiter(self._buf, float, len(self._buf))
            w = self._weights[-len(vals):]
            order = np.argsort(vals, kind="stable")
            cum = np.cumsum(w[order])
            idx = int(np.searchsorted(cum, self.p * cum[-1], side="left"))
            self._cache = float(vals[order[min(idx, len(vals) - 1)]])
        return self._cache

    def state_dict(self) -> dict:
        return {"p": self.p, "decay": self.decay, "window": self.window, "buf": list(self._buf)}

    def load_state_dict(self, d: dict) -> None:
        self.__init__(d["p"], d["decay"], d["window"])
        self._buf.extend(d["buf"])


class DelayEstimator:
    """Smoothed RTT / one-way heartbeat delay, RTT preferred when sampled."""

    def __init__(self, alpha: float = 0.125):
        self.rtt = Ewma(alpha)
        self.oneway = Ewma(alpha)

    def estimate(self, oneway_factor: float = 2.0) -> float | None:
        if self.rtt.mean is not None:
            return self.rtt.mean
        if self.oneway.mean is not None:
            return self.oneway.mean * oneway_factor
        return None

    def state_dict(self) -> dict:
        return {"rtt": self.rtt.state_dict(), "oneway": self.oneway.state_dict()}

    def load_state_dict(self, d: dict) -> None:
        self.rtt.load_state_dict(d["rtt"])
        self.oneway.load_state_dict(d["oneway"])


def phi(elapsed_ms: float, mean_ms: float, std_ms: float) -> float:
    """Accrual suspicion: -log10 P(inter-arrival > elapsed) under a normal model."""
    std = max(std_ms, 0.1 * mean_ms, 1.0)
    tail = 0.5 * math.erfc((elapsed_ms - mean_ms) / (std * math.sqrt(2)))
    return -math.log10(max(tail, 1e-300))


class RunningZ:
    """Online per-feature z-scoring (Welford)."""

    def __init__(self, dim: int):
        self.n = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def update(self, x: np.ndarray) -> None:
        self.n += 1
        delta = x - self.mean
        self.mean += delta / self.n
        self.m2 += delta * (x - self.mean)

    def transform(self, x: np.ndarray, clip: float | None = None) -> np.ndarray:
        if self.n < 2:
            z = np.zeros_like(x)
        else:
            std = np.sqrt(self.m2 / (self.n - 1))
            z = np.divide(x - self.mean, std, out=np.zeros_like(x), where=std > 0)
        if clip is not None:
            z = np.clip(z, -clip, clip)
        return z

    def state_dict(self) -> dict:
        return {"n": self.n, "mean": self.mean.tolist(), "m2": self.m2.tolist()}

    def load_state_dict(self, d: dict) -> None:
        self.n = d["n"]
        self.mean = np.array(d["mean"], float)
        self.m2 = np.array(d["m2"], float)
