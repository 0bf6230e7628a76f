"""Per-arm ridge-regression state for LinUCB and linear Thompson sampling.

Three update rules share one state layout:

* ``plain``    -- A += x xᵀ, b += r x (Sherman-Morrison keeps A⁻¹ current)
* ``discount`` -- A <- γA + (1-γ)λI + x xᵀ, b <- γb + r x
* ``window``   -- A = λI + Σ x xᵀ, b = Σ r x over the arm's last W samples
"""

from __future__ import annotations

from collections import deque

import numpy as np

MODES = ("plain", "discount", "window")


class LinearArms:
    def __init__(
        self,
        n_arms: int,
        dim: int,
        l2: float = 1.0,
        mode: str = "plain",
        gamma: float = 1.0,
        window: int = 200,
    ):
        if mode not in MODES:
            raise ValueError(f"unknown update mode {mode!r}")
        if mode == "discount" and not 0 < gamma <= 1:
            raise ValueError("discount gamma must lie in (0, 1]")
        if mode == "window" and window < 1:
            raise ValueError("window must be >= 1")
        if l2 <= 0:
            raise ValueError("l2 must be positive")
        self.n_arms = n_arms
        self.dim = dim
        self.l2 = l2
        self.mode = mode
        self.gamma = gamma
        self.window = window
        self._prior = l2 * np.eye(dim)
        self.A = np.stack([self._prior.copy() for _ in range(n_arms)])
        self.A_inv = np.stack([np.eye(dim) / l2 for _ in range(n_arms)])
        self.b = np.zeros((n_arms, dim))
        self.history: list[deque] = [deque(maxlen=window) for _ in range(n_arms)] if mode == "window" else []

    # -- inference ---------------------------------------------------------
    def theta(self, arm: int | None = None) -> np.ndarray:
        if arm is None:
            return np.einsum("kij,kj->ki", self.A_inv, self.b)
        return self.A_inv[arm] @ self.b[arm]

    def ucb_scores(self, x: np.ndarray, alpha: float) -> np.ndarray:
        Ainv_x = self.A_inv @ x  # (K, d)
        mean = np.einsum("kd,kd->k", Ainv_x, self.b)  # θ_aᵀx, A symmetric
        width = np.sqrt(np.maximum(Ainv_x @ x, 0.0))
        return mean + alpha * width

    def ucb_choose(self, x: np.ndarray, alpha: float) -> int:
        # argmax returns the first maximum: ties go to the lowest arm index
        return int(np.argmax(self.ucb_scores(x, alpha)))

    def ts_choose(self, x: np.ndarray, scale: float, rng: np.random.Generator) -> int:
        theta = self.theta()
        if scale == 0:
            return int(np.argmax(theta @ x))
        samples = np.empty(self.n_arms)
        for a in range(self.n_arms):
            # A⁻¹ is symmetric PD; symmetrise against round-off before factoring
            cov = 0.5 * (self.A_inv[a] + self.A_inv[a].T)
            L = np.linalg.cholesky(cov)
            tilde = theta[a] + scale * (L @ rng.standard_normal(self.dim))
            samples[a] = tilde @ x
        return int(np.argmax(samples))

    # -- learning ----------------------------------------------------------
    def update(self, arm: int, x: np.ndarray, r: float) -> None:
        x = np.asarray(x, dtype=float)
        if self.mode == "plain":
            self.A[arm] += np.outer(x, x)
            self.b[arm] += r * x
            Ax = self.A_inv[arm] @ x
            self.A_inv[arm] -= np.outer(Ax, Ax) / (1.0 + x @ Ax)
        elif self.mode == "discount":
            g = self.gamma
            self.A[arm] = g * self.A[arm] + (1.0 - g) * self._prior + np.outer(x, x)
            self.b[arm] = g * self.b[arm] + r * x
            self.A_inv[arm] = np.linalg.inv(self.A[arm])
        else:
            hist = self.history[arm]
            hist.append((x, float(r)))
            X = np.array([h[0] for h in hist])
            rs = np.array([h[1] for h in hist])
            self.A[arm] = self._prior + X.T @ X
            self.b[arm] = X.T @ rs
            self.A_inv[arm] = np.linalg.inv(self.A[arm])

    def decay_only(self, arm: int) -> None:
        """Apply one discount step with no new observation (x = 0)."""
        self.update(arm, np.zeros(self.dim), 0.0)

    # -- persistence -------------------------------------------------------
    def state_dict(self) -> dict:
        d = {
            "n_arms": self.n_arms, "dim": self.dim, "l2": self.l2, "mode": self.mode,
            "gamma": self.gamma, "window": self.window,
            "A": self.A.tolist(), "A_inv": self.A_inv.tolist(), "b": self.b.tolist(),
        }
        if self.mode == "window":
            d["history"] = [[(h[0].tolist(), h[1]) for h in hist] for hist in self.history]
        return d

    @classmethod
    def from_state_dict(cls, d: dict) -> "LinearArms":
        obj = cls(d["n_arms"], d["dim"], d["l2"], d["mode"], d["gamma"], d["window"])
        obj.A = np.array(d["A"], float)
        obj.A_inv = np.array(d["A_inv"], float)
        obj.b = np.array(d["b"], float)
        if obj.mode == "window":
            for hist, saved in zip(obj.history, d["history"]):
                hist.extend((np.array(x, float), float(r)) for x, r in saved)
        return obj
