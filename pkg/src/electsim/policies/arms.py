from __future__ import annotations

from dataclasses import dataclass

ARM_SETS: dict[str, tuple[tuple[float, float], ...]] = {
    "standard3": ((150, 300), (300, 600), (600, 1200)),
    "broad5": ((150, 300), (300, 600), (600, 1200), (1200, 1800), (1800, 2400)),
    "shifted3": ((300, 600), (600, 1200), (1200, 2400)),
    "fine7": ((150, 225), (225, 300), (300, 450), (450, 600), (600, 800), (800, 1000), (1000, 1200)),
}

# multiplier ranges over a quantile-derived base timeout
RELATIVE_ARMS = ((3.0, 5.0), (5.0, 7.0), (7.0, 9.0))


@dataclass(frozen=True)
class ArmSet:
    arms: tuple[tuple[float, float], ...]

    def __post_init__(self):
        errs = self.problems()
        if errs:
            raise ValueError("; ".join(errs))

    def problems(self) -> list[str]:
        errs = []
        if not self.arms:
            errs.append("arm set is empty")
        for i, (lo, hi) in enumerate(self.arms):
            if not lo < hi:
                errs.append(f"arm {i}: T_min {lo} must be < T_max {hi}")
            if lo <= 0:
                errs.append(f"arm {i}: T_min must be positive")
        los = [a[0] for a in self.arms]
        if any(b <= a for a, b in zip(los, los[1:])):
            errs.append("arms must be ordered by increasing T_min")
        return errs

    @classmethod
    def named(cls, name: str) -> "ArmSet":
        try:
            return cls(ARM_SETS[name])
        except KeyError:
            raise ValueError(f"unknown arm set {name!r}") from None

    def __len__(self) -> int:
        return len(self.arms)

    def __getitem__(self, i: int) -> tuple[float, float]:
        return self.arms[i]

    @property
    def safe_index(self) -> int:
        return len(self.arms) - 1

    def narrowed(self, width_ms: float) -> "ArmSet":
        """Shrink every arm to ``width_ms`` around its midpoint (alignment stress)."""
        out = []
        for lo, hi in self.arms:
            mid = (lo + hi) / 2
            out.append((mid - width_ms / 2, mid + width_ms / 2))
        return ArmSet(tuple(out))

    def pick3(self) -> tuple[int, int, int]:
        """Aggressive / moderate / conservative indices for three-level mappings."""
        return 0, len(self.arms) // 2, len(self.arms) - 1


def widen(lo_ms: float, hi_ms: float, min_width_ms: float) -> tuple[float, float]:
    if hi_ms - lo_ms >= min_width_ms:
        return lo_ms, hi_ms
    mid = (lo_ms + hi_ms) / 2
    return mid - min_width_ms / 2, mid + min_width_ms / 2


def sample_timeout(rng, lo_ms: float, hi_ms: float, min_width_ms: float = 0.0) -> tuple[int, float, float]:
    """Uniform draw in [lo, hi] (jitter-widened) as integer microseconds.

    Returns ``(timeout_us, lo_ms, hi_ms)`` with the effective bounds used.
    """
    lo_ms, hi_ms = widen(lo_ms, hi_ms, min_width_ms)
    lo_us = int(round(lo_ms * 1000))
    hi_us = int(round(hi_ms * 1000))
    t = lo_us + int(rng.random() * (hi_us - lo_us + 1))
    return min(t, hi_us), lo_ms, hi_ms
