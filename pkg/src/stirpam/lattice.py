"""Torus geometry, site/edge enumeration, and parabolic space-time norms.

The discrete torus has ``side**d`` sites with periodic nearest-neighbour
edges.  The canonical construction is dyadic (side ``2**N`` at level
``N >= 2``); an arbitrary-side mode exists for small combinatorial oracle
checks.  Sides 1 and 2 are rejected because they create multi-edges.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import DomainError

#: parabolic scaling (time counts twice) for d spatial dimensions
def parabolic_scaling(d: int) -> tuple[int, ...]:
    return (2,) + (1,) * d


@dataclass(frozen=True)
class TorusLattice:
    """Periodic lattice ``(Z/side Z)**d`` with row-major site indexing."""

    d: int
    side: int
    level: int | None  # dyadic level N when side == 2**N, else None

    def __post_init__(self):
        if self.d < 1:
            raise DomainError(f"dimension must be >= 1, got {self.d}")
        if self.side <= 2:
            raise DomainError(
                f"side {self.side} rejected: sides 1 and 2 produce degenerate multi-edges"
            )
        if self.level is not None:
            if self.level < 2 or 2 ** self.level != self.side:
                raise DomainError(
                    f"level {self.level} inconsistent with side {self.side} (need side=2**level, level>=2)"
                )

    @classmethod
    def dyadic(cls, d: int, level: int) -> "TorusLattice":
        """Torus of side ``2**level`` per dimension (smallest supported level is 2)."""
        if level < 2:
            raise DomainError(f"dyadic level must be >= 2, got {level}")
        return cls(d=d, side=2 ** level, level=level)

    @classmethod
    def with_side(cls, d: int, side: int) -> "TorusLattice":
        """Arbitrary-side torus for combinatorial oracle checks."""
        level = side.bit_length() - 1 if side >= 4 and (side & (side - 1)) == 0 else None
        return cls(d=d, side=side, level=level)

    @property
    def n_sites(self) -> int:
        return self.side ** self.d

    @property
    def n_edges(self) -> int:
        return self.d * self.side ** self.d

    @property
    def spacing(self) -> float:
        """Grid spacing of the rescaled torus (unit macroscopic circumference)."""
        return 1.0 / self.side

    @property
    def cell_volume(self) -> float:
        """Riemann weight of one site in semi-discrete integrals."""
        return self.spacing ** self.d

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.side,) * self.d

    # --- site indexing -------------------------------------------------

    def wrap(self, x) -> tuple[int, ...]:
        return tuple(int(c) % self.side for c in x)

    def site_index(self, x) -> int:
        idx = 0
        for c in x:
            idx = idx * self.side + (int(c) % self.side)
        return idx

    def site_coords(self, idx: int) -> tuple[int, ...]:
        if not 0 <= idx < self.n_sites:
            raise DomainError(f"site index {idx} out of range")
        out = []
        for _ in range(self.d):
            out.append(idx % self.side)
            idx //= self.side
        return tuple(reversed(out))

    def sites(self):
        """All sites in row-major order, as coordinate tuples."""
        return itertools.product(range(self.side), repeat=self.d)

    def validate_site(self, x) -> tuple[int, ...]:
        x = tuple(int(c) for c in x)
        if len(x) != self.d:
            raise DomainError(f"site {x} has wrong dimension (expected {self.d})")
        if any(not 0 <= c < self.side for c in x):
            raise DomainError(f"site {x} outside [0,{self.side})^{self.d}")
        return x

    def neighbours(self, x) -> list[tuple[int, ...]]:
        x = self.wrap(x)
        out = []
        for j in range(self.d):
            for s in (1, -1):
                y = list(x)
                y[j] = (y[j] + s) % self.side
                out.append(tuple(y))
        return out

    # --- metric --------------------------------------------------------

    def min_image(self, x, y) -> tuple[int, ...]:
        """Componentwise representative of ``x - y`` closest to 0."""
        out = []
        for a, b in zip(x, y):
            c = (int(a) - int(b)) % self.side
            if c > self.side - c:
                c = c - self.side
            out.append(c)
        return tuple(out)


def torus_distance(lattice: TorusLattice, x, y) -> int:
    """l1 distance on the torus (minimum over periodic images)."""
    x = lattice.validate_site(x)
    y = lattice.validate_site(y)
    return sum(abs(c) for c in lattice.min_image(x, y))


def torus_euclidean(lattice: TorusLattice, x, y) -> float:
    """Euclidean distance on the torus (minimum over periodic images)."""
    return math.sqrt(sum(c * c for c in lattice.min_image(x, y)))


@lru_cache(maxsize=None)
def edge_endpoints(lattice: TorusLattice) -> tuple[np.ndarray, np.ndarray]:
    """Endpoint site indices ``(a, b)`` of every undirected edge, listed once.

    Edge ``e`` with ``e = site_index * d + direction`` joins a site to its
    positive neighbour along ``direction``.
    """
    V, d, side = lattice.n_sites, lattice.d, lattice.side
    a = np.repeat(np.arange(V, dtype=np.int64), d)
    b = np.empty(V * d, dtype=np.int64)
    for idx in range(V):
        x = lattice.site_coords(idx)
        for j in range(d):
            y = list(x)
            y[j] = (y[j] + 1) % side
            b[idx * d + j] = lattice.site_index(y)
    return a, b


@lru_cache(maxsize=None)
def min_image_norms(lattice: TorusLattice) -> np.ndarray:
    """Euclidean min-image norm of each site displacement, indexed by site."""
    side = lattice.side
    axis = np.minimum(np.arange(side), side - np.arange(side)).astype(float)
    grids = np.meshgrid(*([axis] * lattice.d), indexing="ij")
    return np.sqrt(sum(g * g for g in grids)).reshape(-1)


# --- parabolic norms ---------------------------------------------------


def parabolic_norm(z, scaling=None) -> float:
    """``max_i |z_i|**(1/s_i)`` for a space-time vector ``z = (t, x_1..x_d)``."""
    z = tuple(float(c) for c in z)
    if scaling is None:
        scaling = parabolic_scaling(len(z) - 1)
    if len(scaling) != len(z):
        raise DomainError("scaling length must match the vector length")
    if any(int(s) <= 0 for s in scaling):
        raise DomainError("scaling entries must be positive integers")
    return max(abs(c) ** (1.0 / s) for c, s in zip(z, scaling))


def scaled_norm(z, level: int, scaling=None) -> float:
    """Parabolic norm floored at the lattice scale ``2**-level``."""
    return max(parabolic_norm(z, scaling), 2.0 ** (-level))


def scaled_test_function(phi, delta: float, z0, scaling=None):
    """Parabolic rescaling of a test function about ``z0``.

    Returns ``y -> delta**-|s| * phi(delta**-s_0 (y_0-z0_0), ...)``; mass is
    preserved under the semi-discrete integral up to the Riemann-sum error.
    """
    if delta <= 0:
        raise DomainError(f"scale delta must be positive, got {delta}")
    z0 = tuple(float(c) for c in z0)
    if scaling is None:
        scaling = parabolic_scaling(len(z0) - 1)
    if len(scaling) != len(z0):
        raise DomainError("scaling length must match the point length")
    total = sum(scaling)

    def scaled(y):
        y = tuple(float(c) for c in y)
        arg = tuple((c - c0) * delta ** (-s) for c, c0, s in zip(y, z0, scaling))
        return delta ** (-total) * phi(arg)

    return scaled


def semi_discrete_integral(values: np.ndarray, lattice: TorusLattice, dt_weights: np.ndarray) -> float:
    """Integral in time, Riemann sum in space, of values shaped (n_t, n_sites)."""
    values = np.asarray(values, dtype=float).reshape(len(dt_weights), -1)
    return float(dt_weights @ values.sum(axis=1)) * lattice.cell_volume
