"""Heat kernels on tori, decay-order certification, and transition bounds.

Kernels are tabulated on a time grid times the full torus.  The spectral
representation is exact: the periodic Laplacian diagonalizes in the
discrete Fourier basis, so a kernel slice is one inverse FFT of
``exp(-t * eigenvalue)``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.optimize import brentq

from .errors import DomainError
from .lattice import TorusLattice, min_image_norms

#: spectral tolerance target for tabulated kernels
KERNEL_ABS_TOL = 1e-12


@lru_cache(maxsize=None)
def walk_eigenvalues(lattice: TorusLattice, jump_rate: float) -> np.ndarray:
    """Spectrum of minus the walk generator, on the Fourier grid.

    ``jump_rate`` is the total jump rate of the walk (rate ``jump_rate/2d``
    per incident direction), so ``lambda_k = (rate/2d) * sum_j 2(1 - cos(2 pi k_j / side))``.
    """
    side, d = lattice.side, lattice.d
    per_dir = jump_rate / (2.0 * d)
    k = np.arange(side)
    one_dim = 2.0 * (1.0 - np.cos(2.0 * np.pi * k / side))
    grids = np.meshgrid(*([one_dim] * d), indexing="ij")
    return per_dir * sum(grids)


def heat_kernel(lattice: TorusLattice, jump_rate: float, t: float) -> np.ndarray:
    """Transition kernel p_t(x) of the continuous-time walk, indexed by site.

    Normalized so that ``sum_x p_t(x) = 1``; symmetric under ``x -> -x``.
    """
    if t < 0:
        raise DomainError(f"time must be nonnegative, got {t}")
    lam = walk_eigenvalues(lattice, jump_rate)
    vals = np.fft.ifftn(np.exp(-t * lam)).real
    return vals.reshape(-1)


def heat_kernel_table(lattice: TorusLattice, jump_rate: float, times) -> np.ndarray:
    times = np.asarray(times, dtype=float)
    return np.stack([heat_kernel(lattice, jump_rate, t) for t in times])


@dataclass(frozen=True)
class KernelGrid:
    """Tabulated space-time kernel with decay-order metadata.

    ``times`` has shape (n_t,) or (n_t, m) for multi-time kernels;
    ``values`` has shape (n_t, n_sites).  ``spacing`` converts lattice steps
    to the length unit of the order formula, and ``floor`` is the additive
    small-scale cutoff (``2**-N`` on level-N grids).
    """

    lattice: TorusLattice
    times: np.ndarray
    values: np.ndarray
    spacing: float = 1.0
    floor: float = 0.0
    claimed_order: float | None = None

    def __post_init__(self):
        t = np.atleast_1d(np.asarray(self.times, dtype=float))
        v = np.asarray(self.values, dtype=float)
        if v.shape != (t.shape[0], self.lattice.n_sites):
            raise DomainError(
                f"values shape {v.shape} does not match {t.shape[0]} times x {self.lattice.n_sites} sites"
            )
        if not np.all(np.isfinite(v)):
            raise DomainError("kernel values must be finite")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    @property
    def time_sums(self) -> np.ndarray:
        t = self.times
        return np.abs(t) if t.ndim == 1 else np.abs(t).sum(axis=1)


def kernel_order(grid: KernelGrid, zeta: float) -> float:
    """Exact grid supremum of ``(sqrt|t| + |x| + floor)**zeta * |p_t(x)|``.

    A kernel family is "of order zeta" when this constant stays bounded
    across levels; the caller compares constants across N.
    """
    norms = min_image_norms(grid.lattice) * grid.spacing
    weights = (np.sqrt(grid.time_sums)[:, None] + norms[None, :] + grid.floor) ** zeta
    return float(np.max(weights * np.abs(grid.values)))


def convolve_kernels(p1: KernelGrid, p2: KernelGrid, t_pairs=None) -> KernelGrid:
    """Semi-discrete space convolution ``cell_volume * sum_y p1_{t1}(x-y) p2_{t2}(y-z)``.

    Produces a two-time kernel on the pairs ``t_pairs`` (defaults to the full
    product of the input time grids).  Orders compose as
    ``zeta_1 + zeta_2 - d`` when that is positive.
    """
    if p1.lattice != p2.lattice:
        raise DomainError("kernel grids live on different lattices")
    if p1.times.ndim != 1 or p2.times.ndim != 1:
        raise DomainError("convolution inputs must be single-time kernels")
    lattice = p1.lattice
    shape = lattice.shape
    if t_pairs is None:
        t_pairs = list(itertools.product(range(len(p1.times)), range(len(p2.times))))
    times = np.array([[p1.times[i], p2.times[j]] for i, j in t_pairs])
    out = np.empty((len(t_pairs), lattice.n_sites))
    for row, (i, j) in enumerate(t_pairs):
        # c(z) = sum_y p1(-y) p2(y - z): flip both, then a circular convolution
        a = np.fft.fftn(_flip(p1.values[i].reshape(shape)))
        b = np.fft.fftn(_flip(p2.values[j].reshape(shape)))
        out[row] = np.fft.ifftn(a * b).real.reshape(-1)
    out *= lattice.cell_volume
    return KernelGrid(
        lattice=lattice,
        times=times,
        values=out,
        spacing=p1.spacing,
        floor=max(p1.floor, p2.floor),
    )


def _flip(arr: np.ndarray) -> np.ndarray:
    """values of x -> f(-x) on the torus grid."""
    out = arr
    for ax in range(arr.ndim):
        out = np.roll(np.flip(out, axis=ax), 1, axis=ax)
    return out


# --- the Legendre transform used in the transition bound ----------------


def legendre_phi(u: float) -> float:
    """``Phi(u) = sup_w (u w - w^2 cosh w)``, for ``u >= 0``.

    Behaves like ``u^2/4`` for small ``u`` and like ``u log u`` for large
    ``u``; convex, increasing, ``Phi(0) = 0``.
    """
    if u < 0:
        raise DomainError(f"Phi is evaluated on u >= 0, got {u}")
    if u == 0.0:
        return 0.0

    def slope(w):
        # derivative of w^2 cosh w
        return 2.0 * w * math.cosh(w) + w * w * math.sinh(w)

    hi = 1.0
    while slope(hi) < u:
        hi *= 2.0
        if hi > 745.0:  # cosh overflow guard; maximizer grows ~ log u
            break
    w_star = brentq(lambda w: slope(w) - u, 0.0, hi, xtol=1e-14, rtol=1e-15)
    return u * w_star - w_star * w_star * math.cosh(w_star)


# --- two-branch product bound on labelled transition probabilities ------


def _image_shifts(d: int, radius: int = 3):
    return list(itertools.product(range(-radius, radius + 1), repeat=d))


def pbar_large_t(lattice: TorusLattice, n_particles: int, t: float, dx, c2: float) -> float:
    """Large-time single-factor bound: Gaussian-type tail via the Legendre transform."""
    side, d = lattice.side, lattice.d
    log_t = math.log(t)
    acc = 0.0
    for shift in _image_shifts(d):
        disp = math.sqrt(sum((c + side * s) ** 2 for c, s in zip(dx, shift)))
        arg = disp * log_t / (c2 * c2 * t)
        acc += math.exp(-c2 * t / (2.0 * n_particles * log_t * log_t) * legendre_phi(arg))
    return acc / (1.0 + t) ** (d / 2.0)


def pbar_small_t(lattice: TorusLattice, dx) -> float:
    """Small-time single-factor bound: exponential decay in l1 distance."""
    side, d = lattice.side, lattice.d
    acc = 0.0
    for shift in _image_shifts(d):
        acc += math.exp(-sum(abs(c + side * s) for c, s in zip(dx, shift)))
    return acc


@dataclass
class BoundReport:
    """Worst-case ratios of exact transition probabilities to the bound product."""

    t: float
    c1: float
    c2: float
    branch: str
    max_ratio_small: float
    max_ratio_large: float | None
    argmax_pair: tuple

    @property
    def max_ratio(self) -> float:
        if self.branch == "small":
            return self.max_ratio_small
        return self.max_ratio_large


def gaussian_bound_check(lattice: TorusLattice, transition, t: float, c1: float, c2: float) -> BoundReport:
    """Ratio report of exact labelled transitions against the two-branch product bound.

    ``transition`` is an exact labelled transition table (see
    ``exclusion.exact_labelled_transition``).  The fitted constants are
    evidence of boundedness, never a proof; both branches are reported when
    the time is near the branch point.
    """
    states = transition.states
    n = len(states[0])
    matrix = transition.matrix
    coords = [tuple(lattice.site_coords(s) for s in st) for st in states]
    max_small = 0.0
    max_large = 0.0 if t > c1 else None
    arg = (states[0], states[0])
    for i, sx in enumerate(coords):
        row = matrix[i]
        for j, sy in enumerate(coords):
            p = row[j]
            if p <= 0.0:
                continue
            prod_small = 1.0
            for xi, yi in zip(sx, sy):
                prod_small *= pbar_small_t(lattice, lattice.min_image(xi, yi))
            ratio = p / (c1 * prod_small)
            if ratio > max_small:
                max_small = ratio
                arg = (states[i], states[j])
            if max_large is not None:
                prod_large = 1.0
                for xi, yi in zip(sx, sy):
                    prod_large *= pbar_large_t(lattice, n, t, lattice.min_image(xi, yi), c2)
                max_large = max(max_large, p / (c1 * prod_large))
    branch = "large" if t > c1 else "small"
    return BoundReport(
        t=t, c1=c1, c2=c2, branch=branch,
        max_ratio_small=max_small, max_ratio_large=max_large, argmax_pair=arg,
    )


def kernel_table_csv_rows(grid: KernelGrid):
    """Rows (t, x_1..x_d, value) for the optional CSV dump."""
    lattice = grid.lattice
    for it, t in enumerate(np.atleast_1d(grid.time_sums)):
        for idx in range(lattice.n_sites):
            yield (float(grid.times[it] if grid.times.ndim == 1 else grid.time_sums[it]),
                   *lattice.site_coords(idx), float(grid.values[it, idx]))
