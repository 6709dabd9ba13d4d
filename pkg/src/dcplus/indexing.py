"""Sparse unit selectors over the linear state ``(theta_1..theta_{n+m}, u_1..u_n)``.

Internal bus indices are zero-based: PQ buses ``0..n-1``, PV buses
``n..n+m-1``, slack ``n+m``. The angle of bus ``i`` sits at position ``i``;
the voltage deviation of PQ bus ``i`` sits at position ``i + n + m``. PV and
slack buses have no voltage coordinate and the slack has no angle coordinate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Selector:
    """Signed sum of unit vectors, stored as ``(positions, signs)``."""

    positions: tuple[int, ...] = ()
    signs: tuple[float, ...] = ()

    def __bool__(self) -> bool:
        return bool(self.positions)

    def __sub__(self, other: Selector) -> Selector:
        acc: dict[int, float] = {}
        for p, s in zip(self.positions, self.signs):
            acc[p] = acc.get(p, 0.0) + s
        for p, s in zip(other.positions, other.signs):
            acc[p] = acc.get(p, 0.0) - s
        kept = [(p, s) for p, s in acc.items() if s != 0.0]
        return Selector(tuple(p for p, _ in kept), tuple(s for _, s in kept))

    def apply(self, x: np.ndarray):
        """``selectorᵀ x``; works row-wise on 2-D ``x``."""
        if not self.positions:
            return np.zeros(x.shape[1:]) if x.ndim > 1 else 0.0
        return np.tensordot(np.asarray(self.signs), x[list(self.positions)], axes=1)

    def dot(self, other: Selector) -> float:
        mine = dict(zip(self.positions, self.signs))
        return float(sum(mine.get(p, 0.0) * s for p, s in zip(other.positions, other.signs)))

    def dense(self, dim: int) -> np.ndarray:
        out = np.zeros(dim)
        for p, s in zip(self.positions, self.signs):
            out[p] += s
        return out


ZERO = Selector()


class StateIndexer:
    """Index bookkeeping for a grid with ``n`` PQ and ``m`` PV buses."""

    def __init__(self, n: int, m: int):
        if n < 0 or m < 0:
            raise ValueError("bus counts must be non-negative")
        self.n = n
        self.m = m
        self.dim = 2 * n + m
        nb = n + m + 1
        self.eta_pos = np.where(np.arange(nb) < n + m, np.arange(nb), -1)
        self.zeta_pos = np.where(np.arange(nb) < n, np.arange(nb) + n + m, -1)

    def __repr__(self) -> str:
        return f"StateIndexer(n={self.n}, m={self.m})"

    def __eq__(self, other) -> bool:
        return isinstance(other, StateIndexer) and (self.n, self.m) == (other.n, other.m)

    def __hash__(self) -> int:
        return hash((self.n, self.m))

    def eta(self, i: int) -> Selector:
        if not 0 <= i < self.n + self.m:
            raise IndexError(f"bus {i} has no angle coordinate (slack is {self.n + self.m})")
        return Selector((i,), (1.0,))

    def zeta(self, i: int) -> Selector:
        if not 0 <= i <= self.n + self.m:
            raise IndexError(f"bus index {i} out of range")
        if i >= self.n:
            return ZERO
        return Selector((i + self.n + self.m,), (1.0,))

    def eta_or_zero(self, i: int) -> Selector:
        return ZERO if i == self.n + self.m else self.eta(i)

    def mu(self, i: int, j: int) -> Selector:
        """Angle difference selector; the slack contributes nothing."""
        return self.eta_or_zero(i) - self.eta_or_zero(j)

    def nu(self, i: int, j: int) -> Selector:
        """Voltage difference selector; PV and slack ends contribute nothing."""
        return self.zeta(i) - self.zeta(j)

    def split(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Split a state vector into ``(theta, u)``."""
        return x[: self.n + self.m], x[self.n + self.m:]
