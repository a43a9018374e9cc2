"""Renormalization constants of the rescaled exclusion noise.

The counterterm splits as ``C_N = c_N + c1_N + c2_N`` with
``c2_N = c21_N + c22_N + c23_N``.  Each constant is a semi-discrete
space-time integral of products of the level-N heat kernel (with a smooth
time cutoff) against joint cumulants of the rescaled occupancy field.

After substituting microscopic time, every deterministic integral here
collapses onto the single Green-type array

    abar(y) = int_0^{4**N} chi(u 4**-N) p_{2u}(y) du

via Chapman-Kolmogorov, so the quadrature is one-dimensional throughout:

    c_N   = k2 * 2**((d-2)N) * abar(0)
    c1_N  = k3 * 2**((3d/2-4)N) * abar(0)**2
    c22_N = k2^2 * 2**((2d-6)N) * sum_b w_b sum_w p_b(w)   A_b(w)^2
    c23_N = k2^2 * 2**((2d-6)N) * sum_b w_b sum_w p_b(w)^2 (abar*A_b)(w)
            - k2 * c_N * 2**((d-4)N) * sum_w abar(w)^2,    A_b = abar * p_b,

with ``*`` the plain lattice convolution and k_n the Bernoulli(rho)
cumulants.  The genuine fourth-cumulant part ``c21_N`` needs the
two-particle interacting transition kernel; its non-factorizing piece is
estimated by importance-sampled pair walks (with a confidence interval),
the factorizing pieces being exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import DomainError
from .kernels import KernelGrid, walk_eigenvalues
from .lattice import TorusLattice
from .cumulants import bernoulli_cumulant
from .seeding import derive_rng

C21_LEVEL_GUARD = 3


# ---------------------------------------------------------------------------
# smooth time cutoff and quadrature
# ---------------------------------------------------------------------------


def smooth_cutoff(t: float) -> float:
    """C-infinity cutoff: 1 on (-inf, 1/2], 0 on [1, inf)."""
    if t <= 0.5:
        return 1.0
    if t >= 1.0:
        return 0.0
    s = 2.0 * (t - 0.5)
    f1 = math.exp(-1.0 / s)
    f2 = math.exp(-1.0 / (1.0 - s))
    return f2 / (f1 + f2)


def _simpson(a: float, b: float, panels: int):
    panels = max(2, panels + (panels % 2))
    x = np.linspace(a, b, panels + 1)
    w = np.ones(panels + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    w *= (b - a) / panels / 3.0
    return x, w


def micro_time_grid(level: int, refine: int = 1, d: int = 3):
    """Quadrature nodes/weights on ``[0, 4**level]`` resolving the kernel head.

    Composite Simpson: linear panels on [0, 1] fine enough for the
    ``exp(-4d u)`` microscopic boundary layer (never coarser than the
    macroscopic step floor ``4**-N / 8``), log-uniform panels beyond.
    """
    horizon = 4.0 ** level
    head_x, head_w = _simpson(0.0, 1.0, max(24 * d, 8) * refine)
    octaves = 2 * level
    log_x, log_w = _simpson(0.0, math.log(horizon), 12 * octaves * refine)
    tail_x = np.exp(log_x)
    tail_w = log_w * tail_x
    nodes = np.concatenate([head_x, tail_x])
    weights = np.concatenate([head_w, tail_w])
    chi = np.array([smooth_cutoff(u / horizon) for u in nodes])
    return nodes, weights * chi


# ---------------------------------------------------------------------------
# spectral building blocks (microscopic kernels, per-direction rate 1)
# ---------------------------------------------------------------------------


@lru_cache(maxsize=None)
def _lattice_for(d: int, level: int) -> TorusLattice:
    return TorusLattice.dyadic(d, level)


def _eigenvalues(lattice: TorusLattice) -> np.ndarray:
    return walk_eigenvalues(lattice, 2.0 * lattice.d)


def green_cutoff_array(d: int, level: int, refine: int = 1) -> np.ndarray:
    """``abar(y) = int chi(u 4**-N) p_{2u}(y) du`` as a spatial array."""
    lattice = _lattice_for(d, level)
    lam = _eigenvalues(lattice)
    nodes, weights = micro_time_grid(level, refine, d)
    spectral = np.zeros_like(lam)
    for u, w in zip(nodes, weights):
        spectral += w * np.exp(-2.0 * u * lam)
    return np.fft.ifftn(spectral).real


def compute_cN(level: int, d: int, rho: float, refine: int = 1) -> float:
    """Pair-cumulant counterterm; diverges like ``2**N`` in d = 3."""
    k2 = bernoulli_cumulant(2, rho)
    abar0 = float(green_cutoff_array(d, level, refine).reshape(-1)[0])
    return k2 * 2.0 ** ((d - 2) * level) * abar0


def compute_cN1(level: int, d: int, rho: float, refine: int = 1) -> float:
    """Third-cumulant counterterm; diverges like ``2**(N/2)`` in d = 3."""
    k3 = bernoulli_cumulant(3, rho)
    abar0 = float(green_cutoff_array(d, level, refine).reshape(-1)[0])
    return k3 * 2.0 ** ((1.5 * d - 4.0) * level) * abar0 ** 2


def _chain_sums(d: int, level: int, refine: int = 1):
    """The two deterministic triple-time integrals behind c22 and c23.

    Returns ``(J2, J1, sum abar^2)`` where
    ``J2 = iiint chi^3 sum_w p_b(w) p_{b+2c}(w) p_{2a+b}(w)`` and
    ``J1 = iiint chi^3 sum_w p_b(w)^2 p_{2a+b+2c}(w)``.
    """
    lattice = _lattice_for(d, level)
    lam = _eigenvalues(lattice)
    abar = green_cutoff_array(d, level, refine)
    f_abar = np.fft.fftn(abar)
    nodes, weights = micro_time_grid(level, refine, d)
    j2 = 0.0
    j1 = 0.0
    for b, w in zip(nodes, weights):
        spec = np.exp(-b * lam)
        pb = np.fft.ifftn(spec).real
        a_b = np.fft.ifftn(f_abar * spec).real
        d_b = np.fft.ifftn(f_abar * f_abar * spec).real
        j2 += w * float((pb * a_b * a_b).sum())
        j1 += w * float((pb * pb * d_b).sum())
    return j2, j1, float((abar * abar).sum())


def compute_cN22(level: int, d: int, rho: float, refine: int = 1) -> float:
    """Pair-pair ladder counterterm; diverges like ``N`` in d = 3."""
    k2 = bernoulli_cumulant(2, rho)
    j2, _, _ = _chain_sums(d, level, refine)
    return k2 * k2 * 2.0 ** ((2 * d - 6) * level) * j2


def compute_cN23(level: int, d: int, rho: float, refine: int = 1,
                 c_n: float | None = None) -> float:
    """Renormalized-kernel sandwich counterterm; bounded in N for d = 3."""
    k2 = bernoulli_cumulant(2, rho)
    if c_n is None:
        c_n = compute_cN(level, d, rho, refine)
    _, j1, abar_sq = _chain_sums(d, level, refine)
    smooth = k2 * k2 * 2.0 ** ((2 * d - 6) * level) * j1
    delta = k2 * c_n * 2.0 ** ((d - 4) * level) * abar_sq
    return smooth - delta


# ---------------------------------------------------------------------------
# the interacting fourth-cumulant constant (Monte Carlo)
# ---------------------------------------------------------------------------


def _kernel_1d(side: int, t: float) -> np.ndarray:
    k = np.arange(side)
    lam = 2.0 * (1.0 - np.cos(2.0 * np.pi * k / side))
    return np.fft.ifft(np.exp(-t * lam)).real


def _sample_from_product_kernel(side: int, d: int, t: float, rng, size: int) -> np.ndarray:
    """Coordinates are independent 1-d walks, so sample each from its own kernel."""
    p1 = np.clip(_kernel_1d(side, t), 0.0, None)
    cdf = np.cumsum(p1)
    cdf /= cdf[-1]
    u = rng.random((size, d))
    return np.searchsorted(cdf, u).astype(np.int64)


def _pair_walk(neighbours, side: int, d: int, start_a, start_b, duration: float, rng):
    """Labelled two-particle stirring on the torus, run for ``duration``.

    Each of the up-to-4d incident edges fires at rate 1; the shared edge of
    an adjacent pair swaps the labels.
    """
    a = tuple(start_a)
    b = tuple(start_b)
    t = 0.0
    while True:
        na = neighbours[a]
        adjacent = b in na
        # 2d edges at a (shared edge, if any, listed there) + the rest at b
        total = 4 * d - (1 if adjacent else 0)
        t += rng.exponential(1.0 / total)
        if t > duration:
            return a, b
        pick = int(rng.integers(0, total))
        if pick < 2 * d:
            target = na[pick]
            if target == b:
                a, b = b, a
            else:
                a = target
        else:
            nb = neighbours[b]
            if adjacent:
                nb = tuple(w for w in nb if w != a)
            b = nb[pick - 2 * d]


def _single_walk(side: int, d: int, start, duration: float, rng):
    """One flow line: a plain rate-2d walk."""
    pos = list(start)
    n = int(rng.poisson(2.0 * d * duration))
    for _ in range(n):
        j = int(rng.integers(0, 2 * d))
        axis, sign = divmod(j, 2)
        pos[axis] = (pos[axis] + (1 if sign else -1)) % side
    return tuple(pos)


@dataclass
class McValue:
    estimate: float
    stderr: float
    samples: int


def c21_interaction_mc(level: int, d: int, rho: float, samples: int, seed: int,
                       refine: int = 1) -> McValue:
    """Importance-sampled estimate of the non-factorizing part of c21.

    The two interacting terms of the fourth cumulant reduce, after exact
    summation of the outer chains, to expectations over a labelled pair
    walk with kernel-weighted start points; the time integrals over the
    first and last kernel legs are importance sampled with densities
    matching the kernel decay.
    """
    lattice = _lattice_for(d, level)
    side = lattice.side
    horizon = 4.0 ** level
    abar = green_cutoff_array(d, level, refine)
    rng = derive_rng(seed, "c21", level, d)

    neighbours = {}
    for idx in range(lattice.n_sites):
        x = lattice.site_coords(idx)
        neighbours[x] = tuple(lattice.neighbours(x))

    # inverse-CDF samplers on (0, horizon]
    za = math.sqrt(1.0 + horizon) - 1.0

    def sample_a(u):
        return (1.0 + u * za) ** 2 - 1.0

    def dens_a(x):
        return 0.5 / (za * math.sqrt(1.0 + x))

    zb = 1.0 - 1.0 / math.sqrt(1.0 + horizon)

    def sample_b(u):
        return (1.0 - u * zb) ** (-2.0) - 1.0

    def dens_b(x):
        return 0.5 / (zb * (1.0 + x) ** 1.5)

    vals = np.empty(samples)
    for s in range(samples):
        ua, ub = rng.random(2)
        a_time = sample_a(ua)
        b_time = sample_b(ub)
        w_t = (smooth_cutoff(a_time / horizon) * smooth_cutoff(b_time / horizon)
               / (dens_a(a_time) * dens_b(b_time)))
        if w_t == 0.0:
            vals[s] = 0.0
            continue
        starts = _sample_from_product_kernel(side, d, a_time, rng, 2)
        y1 = tuple(int(c) for c in starts[0])
        x1 = tuple(int(c) for c in starts[1])
        if y1 == x1:
            # coincident coordinates ride one flow line and stay glued
            f1 = _single_walk(side, d, y1, b_time, rng)
            f2 = f1
        else:
            f1, f2 = _pair_walk(neighbours, side, d, y1, x1, b_time, rng)
        p1b = _kernel_1d(side, b_time)

        def pk(dx):
            out = 1.0
            for c in dx:
                out *= p1b[c % side]
            return out

        sep = tuple((u - v) % side for u, v in zip(f1, f2))
        g = abar[sep]
        val_ii = pk(tuple(u - v for u, v in zip(f2, x1))) * g
        val_iii = pk(tuple(u - v for u, v in zip(f1, x1))) * g
        vals[s] = w_t * (val_ii + val_iii)

    est = float(vals.mean())
    n_batches = min(40, samples)
    batches = np.array_split(vals, n_batches)
    bm = np.array([b.mean() for b in batches])
    stderr = float(bm.std(ddof=1) / math.sqrt(n_batches))
    return McValue(estimate=est, stderr=stderr, samples=samples)


def compute_cN21(level: int, d: int, rho: float, samples: int = 20_000, seed: int = 0,
                 refine: int = 1) -> McValue:
    """Fourth-cumulant counterterm c21 (exact factorizing part + MC rest).

    Guarded at level <= 3: the interacting kernel has no small exact
    representation, and boundedness in N makes larger levels immaterial.
    """
    if level > C21_LEVEL_GUARD:
        raise DomainError(
            f"c21 is estimated only for levels <= {C21_LEVEL_GUARD}; "
            "it is bounded in N and skipped above"
        )
    k2 = bernoulli_cumulant(2, rho)
    k4 = bernoulli_cumulant(4, rho)
    scale = 2.0 ** ((2 * d - 6) * level)
    abar0 = float(green_cutoff_array(d, level, refine).reshape(-1)[0])
    exact_chain = k4 * scale * abar0 ** 3
    j2, j1, _ = _chain_sums(d, level, refine)
    mc = c21_interaction_mc(level, d, rho, samples, seed, refine)
    est = exact_chain + k2 * k2 * scale * (mc.estimate - j1 - j2)
    return McValue(estimate=est, stderr=k2 * k2 * scale * mc.stderr, samples=samples)


# ---------------------------------------------------------------------------
# renormalized pair kernel and report assembly
# ---------------------------------------------------------------------------


@dataclass
class RenormalizedKernel:
    """Tabulated ``K^N * pair-cumulant`` with the Dirac counterweight."""

    grid: KernelGrid
    dirac_mass: float
    time_weights: np.ndarray

    def integral_against_one(self) -> float:
        lattice = self.grid.lattice
        riemann = float(self.time_weights @ self.grid.values.sum(axis=1))
        return riemann * lattice.cell_volume + self.dirac_mass * lattice.cell_volume


def renormalized_kernel_Q(level: int, d: int, rho: float, refine: int = 1) -> RenormalizedKernel:
    """``RQ(z) = K(z) cov(z) - c_N 2**(dN) delta_0(z)`` on the macroscopic grid.

    The Dirac mass is sized so the semi-discrete integral against the
    constant 1 cancels exactly on the tabulation quadrature.
    """
    lattice = _lattice_for(d, level)
    lam = _eigenvalues(lattice)
    k2 = bernoulli_cumulant(2, rho)
    nodes, weights = micro_time_grid(level, refine, d)
    horizon = 4.0 ** level
    values = np.empty((len(nodes), lattice.n_sites))
    for i, u in enumerate(nodes):
        p = np.fft.ifftn(np.exp(-u * lam)).real.reshape(-1)
        values[i] = k2 * 4.0 ** (d * level) * p * p
    c_n = compute_cN(level, d, rho, refine)
    macro_times = nodes / horizon
    macro_weights = weights / horizon
    # chi is already folded into the quadrature weights; tabulated values
    # off the weight support are the pointwise K * cov product
    grid = KernelGrid(lattice=lattice, times=macro_times, values=values,
                      spacing=lattice.spacing, floor=2.0 ** (-level))
    return RenormalizedKernel(grid=grid, dirac_mass=-c_n * 2.0 ** (d * level),
                              time_weights=macro_weights)


@dataclass
class RenormReport:
    level: int
    d: int
    rho: float
    c_n: float
    c_n1: float
    c_n21: float | None
    c_n21_stderr: float | None
    c_n22: float
    c_n23: float

    @property
    def alpha(self) -> float:
        return self.c_n / 2.0 ** self.level

    @property
    def beta(self) -> float:
        return self.c_n1 / 2.0 ** (self.level / 2.0)

    @property
    def gamma(self) -> float:
        return self.c_n22 / self.level

    @property
    def total(self) -> float:
        c21 = self.c_n21 if self.c_n21 is not None else 0.0
        return self.c_n + self.c_n1 + c21 + self.c_n22 + self.c_n23

    @property
    def note(self) -> str:
        if self.c_n21 is None:
            return "c21 skipped (bounded term; estimated only for N <= 3)"
        return ""


def total_CN(level: int, d: int, rho: float, refine: int = 1, with_c21: bool = True,
             c21_samples: int = 20_000, seed: int = 0) -> RenormReport:
    """All counterterm parts at one level, with normalized divergence ratios."""
    c_n = compute_cN(level, d, rho, refine)
    c_n1 = compute_cN1(level, d, rho, refine)
    c_n22 = compute_cN22(level, d, rho, refine)
    c_n23 = compute_cN23(level, d, rho, refine, c_n=c_n)
    c21 = stderr = None
    if with_c21 and level <= C21_LEVEL_GUARD:
        mc = compute_cN21(level, d, rho, samples=c21_samples, seed=seed, refine=refine)
        c21, stderr = mc.estimate, mc.stderr
    return RenormReport(level=level, d=d, rho=rho, c_n=c_n, c_n1=c_n1,
                        c_n21=c21, c_n21_stderr=stderr, c_n22=c_n22, c_n23=c_n23)
