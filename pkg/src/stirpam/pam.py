"""Renormalized lattice Anderson equation driven by frozen exclusion noise.

The equation on the level-N rescaled torus is

    du/dt = 4**N Lap u - [2**(Nd/2) (occupancy - rho) - C_N] u,

integrated by Strang splitting with an exact spectral diffusion step and an
exact pointwise potential factor.  The noise is piecewise constant between
stirring events, so the potential factor commits no time-discretization
error within a piece; splitting error is the only systematic one.

A killed-random-walk Monte Carlo average over the time-reversed frozen
environment provides an independent oracle for solution values, and
discrete Hoelder norms/distances quantify closeness of lattice fields to
continuum functions.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .exclusion import ExclusionTrajectory, occupation_lookup
from .kernels import walk_eigenvalues
from .lattice import TorusLattice, parabolic_norm
from .seeding import derive_rng

OVERFLOW_GUARD = 1e100


@dataclass
class PamField:
    """Solution snapshots on the rescaled torus."""

    lattice: TorusLattice
    level: int
    times: np.ndarray
    values: np.ndarray  # (n_times, n_sites)
    meta: dict = field(default_factory=dict)

    def at(self, t: float) -> np.ndarray:
        idx = int(np.argmin(np.abs(self.times - t)))
        if not math.isclose(self.times[idx], t, rel_tol=0.0, abs_tol=1e-12):
            raise DomainError(f"no snapshot at t={t}")
        return self.values[idx]


def _diffusion_spectrum(lattice: TorusLattice, diffusion_scale: float) -> np.ndarray:
    # generator of the rescaled Laplacian: -scale * sum_j 2(1 - cos)
    return diffusion_scale * walk_eigenvalues(lattice, 2.0 * lattice.d)


class _StrangStepper:
    def __init__(self, lattice: TorusLattice, diffusion_scale: float):
        self.lattice = lattice
        self.shape = lattice.shape
        self.spectrum = _diffusion_spectrum(lattice, diffusion_scale)
        self.diffusion_scale = diffusion_scale

    def step(self, u: np.ndarray, potential: np.ndarray, h: float) -> np.ndarray:
        u = u * np.exp(-0.5 * h * potential)
        if self.diffusion_scale != 0.0:
            spec = np.fft.fftn(u.reshape(self.shape))
            spec *= np.exp(-h * self.spectrum)
            u = np.fft.ifftn(spec).real.reshape(-1)
        return u * np.exp(-0.5 * h * potential)


def strang_solve(lattice: TorusLattice, diffusion_scale: float, potential_pieces,
                 u0: np.ndarray, dt: float, snapshot_times) -> tuple[np.ndarray, np.ndarray]:
    """Integrate through piecewise-constant potential pieces.

    ``potential_pieces`` yields ``(a, b, V)`` with the potential array V in
    force on [a, b); pieces must tile the full window.  Snapshots are taken
    at the requested times (which must lie inside the window).
    """
    stepper = _StrangStepper(lattice, diffusion_scale)
    snaps = sorted(float(t) for t in snapshot_times)
    out = np.empty((len(snaps), lattice.n_sites))
    taken = {}
    u = np.asarray(u0, dtype=float).reshape(-1).copy()
    pending = list(enumerate(snaps))
    t_now = None
    fine_pieces = 0

    def advance(u, potential, a, b):
        span = b - a
        if span <= 0:
            return u
        m = max(1, math.ceil(span / dt - 1e-12))
        h = span / m
        for _ in range(m):
            u = stepper.step(u, potential, h)
        return u

    for a, b, occ in potential_pieces:
        if t_now is None:
            t_now = a
        if b - a < dt:
            fine_pieces += 1
        while pending and pending[0][1] <= b + 1e-15:
            rank, s = pending[0]
            if s < a - 1e-15:
                raise DomainError(f"snapshot time {s} precedes the integration window")
            u = advance(u, occ, t_now, min(s, b))
            t_now = min(s, b)
            if s <= b + 1e-15:
                taken[rank] = u.copy()
                pending.pop(0)
        u = advance(u, occ, t_now, b)
        t_now = b
        m = float(np.max(np.abs(u)))
        if not np.isfinite(m) or m > OVERFLOW_GUARD:
            raise RuntimeError(
                f"solver overflow at t={t_now:.6g} (|u|max={m:.3g}); "
                "reduce the horizon or check the counterterm sign"
            )
    if pending:
        raise DomainError(f"snapshot times {[s for _, s in pending]} beyond the window")
    if fine_pieces:
        warnings.warn(f"{fine_pieces} noise pieces were shorter than dt; "
                      "each piece is integrated with at least one substep")
    for rank, _ in enumerate(snaps):
        out[rank] = taken[rank]
    return np.array(snaps), out


def solve_pam(level: int, d: int, trajectory: ExclusionTrajectory | None, c_n: float,
              u0: np.ndarray, horizon: float, dt: float, rho: float,
              snapshot_times=None, t_offset: float = 0.0,
              diffusion_scale: float | None = None) -> PamField:
    """Solve the renormalized equation on one frozen noise realization.

    ``trajectory`` must run at stream rate ``4**level`` (the rescaled
    clock); ``trajectory=None`` solves the flat-environment equation
    (centered noise identically zero).  ``t_offset`` shifts the window into
    the trajectory, which is how mollified comparisons share one stream.
    """
    if trajectory is not None:
        lattice = trajectory.lattice
        if lattice.side != 2 ** level:
            raise DomainError("trajectory lattice does not match the level")
    else:
        lattice = TorusLattice.dyadic(d, level)
    if diffusion_scale is None:
        diffusion_scale = 4.0 ** level
    pot_scale = 2.0 ** (level * d / 2.0)
    if snapshot_times is None:
        snapshot_times = [horizon]

    def pieces():
        if trajectory is None:
            yield 0.0, horizon, np.full(lattice.n_sites, -c_n)
            return
        for a, b, occ in trajectory.segments(t_offset, t_offset + horizon):
            yield a - t_offset, b - t_offset, pot_scale * (occ.astype(float) - rho) - c_n

    times, values = strang_solve(lattice, diffusion_scale, pieces(), u0, dt, snapshot_times)
    return PamField(lattice=lattice, level=level, times=times, values=values,
                    meta={"c_n": c_n, "rho": rho, "dt": dt, "t_offset": t_offset})


def solve_time_dependent(lattice: TorusLattice, level: int, diffusion_scale: float,
                         potential_at, horizon: float, dt: float, u0: np.ndarray,
                         snapshot_times=None) -> PamField:
    """Strang solve with a continuously time-dependent potential.

    The potential is sampled at substep midpoints (keeps second order for
    smooth-in-time potentials, e.g. mollified noise).
    """
    if snapshot_times is None:
        snapshot_times = [horizon]
    snaps = sorted(float(t) for t in snapshot_times)
    stepper = _StrangStepper(lattice, diffusion_scale)
    u = np.asarray(u0, dtype=float).reshape(-1).copy()
    boundaries = sorted(set(snaps) | {0.0, horizon})
    out = []
    t_now = 0.0
    for b in boundaries:
        if b <= 0.0:
            if b in snaps:
                out.append(u.copy())
            continue
        span = b - t_now
        m = max(1, math.ceil(span / dt - 1e-12))
        h = span / m
        for k in range(m):
            mid = t_now + (k + 0.5) * h
            u = stepper.step(u, potential_at(mid), h)
        t_now = b
        if b in snaps:
            out.append(u.copy())
    return PamField(lattice=lattice, level=level, times=np.array(snaps),
                    values=np.array(out), meta={"dt": dt})


# ---------------------------------------------------------------------------
# killed-walk oracle
# ---------------------------------------------------------------------------


@dataclass
class FkEstimate:
    estimate: float
    stderr: float
    replicas: int

    @property
    def ci3(self) -> float:
        return 3.0 * self.stderr


def feynman_kac(trajectory: ExclusionTrajectory, level: int, c_n: float, u0: np.ndarray,
                t: float, x, replicas: int, seed: int, rho: float,
                chunk: int = 20_000) -> FkEstimate:
    """Monte-Carlo solution value at (t, x) through the frozen environment.

    Averages ``u0(X_t) exp(-int_0^t V(t-s, X_s) ds)`` over rate ``2d 4**N``
    walks from x, with ``V = 2**(Nd/2)(occupancy - rho) - C_N`` read from
    the time-reversed trajectory.  The occupancy line integral is exact:
    the environment is piecewise constant and integrated in closed form
    between walk jumps.
    """
    if replicas < 100:
        raise DomainError("fewer than 100 replicas gives a meaningless interval")
    lattice = trajectory.lattice
    if lattice.side != 2 ** level:
        raise DomainError("trajectory lattice does not match the level")
    if t > trajectory.horizon:
        raise DomainError("query time beyond the trajectory horizon")
    d = lattice.d
    side = lattice.side
    rate = 2.0 * d * 4.0 ** level
    pot_scale = 2.0 ** (level * d / 2.0)
    u0 = np.asarray(u0, dtype=float).reshape(-1)
    x = lattice.validate_site(x) if not np.isscalar(x) else lattice.site_coords(int(x))
    tau, cum, pieces = trajectory.occupation_integrals()

    # strides for composing site indices from coordinates
    strides = np.array([side ** (d - 1 - j) for j in range(d)], dtype=np.int64)
    means = []
    done = 0
    batch_id = 0
    acc = []
    while done < replicas:
        n = min(chunk, replicas - done)
        rng = derive_rng(seed, "fk", batch_id)
        batch_id += 1
        n_jumps = rng.poisson(rate * t, size=n)
        max_j = int(n_jumps.max()) if n else 0
        jt = rng.random((n, max_j)) * t
        mask = np.arange(max_j)[None, :] < n_jumps[:, None]
        jt = np.where(mask, jt, t)
        jt.sort(axis=1)
        dirs = rng.integers(0, 2 * d, size=(n, max_j))
        coords = np.empty((n, max_j + 1, d), dtype=np.int64)
        coords[:, 0, :] = np.array(x, dtype=np.int64)
        for j in range(d):
            step = np.where(dirs == 2 * j, 1, np.where(dirs == 2 * j + 1, -1, 0))
            step = np.where(mask, step, 0)
            coords[:, 1:, j] = (x[j] + np.cumsum(step, axis=1)) % side
        coords[:, :, :] %= side
        sites = (coords * strides[None, None, :]).sum(axis=2)
        bounds = np.concatenate([np.zeros((n, 1)), jt, np.full((n, 1), t)], axis=1)
        upper = occupation_lookup(tau, cum, pieces, sites, t - bounds[:, :-1])
        lower = occupation_lookup(tau, cum, pieces, sites, t - bounds[:, 1:])
        integral = (upper - lower).sum(axis=1)
        weight = np.exp(-pot_scale * (integral - rho * t) + c_n * t)
        acc.append(u0[sites[:, -1]] * weight)
        done += n
    samples = np.concatenate(acc)
    n_batches = min(50, replicas)
    batch_means = np.array([b.mean() for b in np.array_split(samples, n_batches)])
    return FkEstimate(estimate=float(samples.mean()),
                      stderr=float(batch_means.std(ddof=1) / math.sqrt(n_batches)),
                      replicas=replicas)


# ---------------------------------------------------------------------------
# discrete Hoelder norms and distances
# ---------------------------------------------------------------------------


@dataclass
class HoelderSpec:
    exponent: float
    sup_term: float
    difference_term: float
    small_scale_term: float = 0.0

    @property
    def value(self) -> float:
        return self.sup_term + self.difference_term + self.small_scale_term


def _offset_distances(lattice: TorusLattice):
    side = lattice.side
    axis = np.minimum(np.arange(side), side - np.arange(side)).astype(float) / side
    grids = np.meshgrid(*([axis] * lattice.d), indexing="ij")
    return np.sqrt(sum(g * g for g in grids))


def holder_norm(values: np.ndarray, lattice: TorusLattice, eta: float) -> HoelderSpec:
    """Sup norm plus the exact Hoelder difference quotient over all site pairs."""
    if not 0.0 < eta < 1.0:
        raise DomainError("the exponent must lie in (0, 1)")
    f = np.asarray(values, dtype=float).reshape(lattice.shape)
    sup_term = float(np.max(np.abs(f)))
    dists = _offset_distances(lattice)
    best = 0.0
    for offset in itertools.product(range(lattice.side), repeat=lattice.d):
        if all(o == 0 for o in offset):
            continue
        diff = float(np.max(np.abs(f - np.roll(f, offset, axis=range(lattice.d)))))
        best = max(best, diff / dists[offset] ** eta)
    return HoelderSpec(exponent=eta, sup_term=sup_term, difference_term=best)


def holder_distance(f, values_n: np.ndarray, lattice: TorusLattice, eta: float,
                    level: int, fine: int = 4) -> HoelderSpec:
    """Three-term comparison of a continuum function with a lattice field.

    Terms: sup difference on the grid; Hoelder quotient of the difference of
    increments over grid pairs; small-scale modulus of the continuum
    function alone over fine-grid pairs below the lattice scale.
    """
    if not 0.0 < eta < 1.0:
        raise DomainError("the exponent must lie in (0, 1)")
    shape = lattice.shape
    side = lattice.side
    grid_pts = np.array(list(itertools.product(range(side), repeat=lattice.d))) / side
    f_grid = np.array([f(tuple(p)) for p in grid_pts]).reshape(shape)
    f_n = np.asarray(values_n, dtype=float).reshape(shape)
    delta = f_grid - f_n
    sup_term = float(np.max(np.abs(delta)))
    dists = _offset_distances(lattice)
    diff_term = 0.0
    for offset in itertools.product(range(side), repeat=lattice.d):
        if all(o == 0 for o in offset):
            continue
        inc = float(np.max(np.abs(delta - np.roll(delta, offset, axis=range(lattice.d)))))
        diff_term = max(diff_term, inc / dists[offset] ** eta)

    # small-scale modulus of f on a refined grid, pairs strictly below 2**-level
    n_fine = side * fine
    fine_pts = np.array(list(itertools.product(range(n_fine), repeat=lattice.d))) / n_fine
    f_fine = np.array([f(tuple(p)) for p in fine_pts]).reshape((n_fine,) * lattice.d)
    axis = np.minimum(np.arange(n_fine), n_fine - np.arange(n_fine)).astype(float) / n_fine
    grids = np.meshgrid(*([axis] * lattice.d), indexing="ij")
    fine_dists = np.sqrt(sum(g * g for g in grids))
    cutoff = 2.0 ** (-level)
    small = 0.0
    for offset in itertools.product(range(n_fine), repeat=lattice.d):
        if all(o == 0 for o in offset):
            continue
        dist = fine_dists[offset]
        if dist >= cutoff:
            continue
        inc = float(np.max(np.abs(f_fine - np.roll(f_fine, offset, axis=range(lattice.d)))))
        small = max(small, inc / dist ** eta)
    return HoelderSpec(exponent=eta, sup_term=sup_term, difference_term=diff_term,
                       small_scale_term=small)


def space_time_distance(f, field: PamField, eta: float, fine: int = 2) -> HoelderSpec:
    """Space-time version with the parabolic norm splitting the two branches.

    ``f(t, x_tuple)`` is compared with the tabulated field; pairs below the
    lattice scale contribute the modulus of ``f`` alone (on a refined grid),
    pairs above it the Hoelder quotient of the increments' difference.
    """
    lattice = field.lattice
    level = field.level
    side = lattice.side
    cutoff = 2.0 ** (-level)
    times = field.times
    coords = np.array(list(itertools.product(range(side), repeat=lattice.d))) / side
    f_grid = np.array([[f(t, tuple(p)) for p in coords] for t in times])
    delta = f_grid - field.values
    sup_term = float(np.max(np.abs(delta)))

    large = 0.0
    for i, ti in enumerate(times):
        for j in range(i, len(times)):
            dt = times[j] - ti
            for o, off_pt in enumerate(coords):
                dx = np.minimum(off_pt, 1.0 - off_pt)
                dist = parabolic_norm((dt, *dx))
                if dist < cutoff or dist == 0.0:
                    continue
                inc = np.abs(np.roll(delta[j].reshape(lattice.shape),
                                     tuple(-np.array(np.round(off_pt * side), dtype=int)),
                                     axis=range(lattice.d)).reshape(-1) - delta[i])
                large = max(large, float(inc.max()) / dist ** eta)

    # small-scale modulus of f alone (refined in space and time)
    small = 0.0
    n_fine = side * fine
    fine_coords = np.array(list(itertools.product(range(n_fine), repeat=lattice.d))) / n_fine
    fine_times = np.linspace(times[0], times[-1], (len(times) - 1) * fine * fine + 1)
    f_fine = np.array([[f(t, tuple(p)) for p in fine_coords] for t in fine_times])
    for i, ti in enumerate(fine_times):
        for j in range(i, len(fine_times)):
            dt = fine_times[j] - ti
            if math.sqrt(abs(dt)) >= cutoff:
                continue
            for o, off_pt in enumerate(fine_coords):
                dx = np.minimum(off_pt, 1.0 - off_pt)
                dist = parabolic_norm((dt, *dx))
                if dist >= cutoff or dist == 0.0:
                    continue
                shifted = np.roll(f_fine[j].reshape((n_fine,) * lattice.d),
                                  tuple(-np.array(np.round(off_pt * n_fine), dtype=int)),
                                  axis=range(lattice.d)).reshape(-1)
                inc = float(np.max(np.abs(shifted - f_fine[i])))
                small = max(small, inc / dist ** eta)
    return HoelderSpec(exponent=eta, sup_term=sup_term, difference_term=large,
                       small_scale_term=small)


# ---------------------------------------------------------------------------
# mollified noise
# ---------------------------------------------------------------------------


def _bump(u: float) -> float:
    if abs(u) >= 0.5:
        return 0.0
    return math.exp(-1.0 / (1.0 - 4.0 * u * u))


def _integrate(fn, a: float, b: float) -> float:
    from scipy.integrate import quad
    val, _ = quad(fn, a, b, epsabs=1e-14, epsrel=1e-13, limit=200)
    return float(val)


_BUMP_MASS = _integrate(_bump, -0.5, 0.5)


def bump_profile(u: float) -> float:
    """Smooth compactly supported probability profile on [-1/2, 1/2]."""
    return _bump(u) / _BUMP_MASS


class Mollifier:
    """Cell-averaged space-time mollifier at scale delta on a level-N torus.

    The continuum profile is a normalized product bump scaled parabolically
    (time width ``delta**2``, space width ``delta``); the lattice version
    averages the spatial factor over each cell so its semi-discrete
    integral is still one.
    """

    def __init__(self, lattice: TorusLattice, level: int, delta: float):
        if not 2.0 ** (-level) < delta <= 1.0:
            raise DomainError(
                f"delta must lie in (2**-{level}, 1], got {delta}"
            )
        self.lattice = lattice
        self.level = level
        self.delta = delta
        side = lattice.side
        h = 1.0 / side
        one_dim = np.empty(side)
        for c in range(side):
            center = c / side
            total = 0.0
            for image in (-1.0, 0.0, 1.0):
                lo = center - 0.5 * h + image
                hi = center + 0.5 * h + image
                if hi < -0.5 * delta or lo > 0.5 * delta:
                    continue
                total += _integrate(lambda y: bump_profile(y / delta) / delta, lo, hi)
            one_dim[c] = total
        grids = np.meshgrid(*([one_dim] * lattice.d), indexing="ij")
        cell = np.ones(lattice.shape)
        for g in grids:
            cell = cell * g
        # cell integrals carry the Riemann weight; scale to density values
        self.space_weights = cell * side ** lattice.d
        self._space_fft = np.fft.fftn(self.space_weights)
        self.time_halfwidth = 0.5 * delta * delta

    def time_profile(self, s: float) -> float:
        return bump_profile(s / self.delta ** 2) / self.delta ** 2

    def semi_discrete_mass(self) -> float:
        space = float(self.space_weights.sum()) * self.lattice.cell_volume
        time = _integrate(self.time_profile, -self.time_halfwidth, self.time_halfwidth)
        return space * time

    def smooth_in_space(self, values: np.ndarray) -> np.ndarray:
        spec = np.fft.fftn(np.asarray(values, dtype=float).reshape(self.lattice.shape))
        out = np.fft.ifftn(self._space_fft * spec).real
        return out.reshape(-1) * self.lattice.cell_volume


def mollify_noise(trajectory: ExclusionTrajectory, level: int, delta: float,
                  probe_times, rho: float, mollifier: Mollifier | None = None,
                  time_nodes: int = 48) -> np.ndarray:
    """Smoothed centered rescaled noise at the probe times, shape (n, sites).

    Space-discrete, time-continuous convolution of the field
    ``2**(Nd/2)(occupancy - rho)`` with the scale-delta mollifier; probes
    must keep the time support inside the trajectory window.
    """
    lattice = trajectory.lattice
    if lattice.side != 2 ** level:
        raise DomainError("trajectory lattice does not match the level")
    m = mollifier or Mollifier(lattice, level, delta)
    hw = m.time_halfwidth
    probe_times = [float(t) for t in probe_times]
    for t in probe_times:
        if t - hw < 0.0 or t + hw > trajectory.horizon:
            raise DomainError(
                f"probe {t} needs the window [{t - hw}, {t + hw}] inside [0, {trajectory.horizon}]"
            )
    nodes, weights = np.polynomial.legendre.leggauss(time_nodes)
    pot_scale = 2.0 ** (level * lattice.d / 2.0)
    out = np.empty((len(probe_times), lattice.n_sites))
    for row, t in enumerate(probe_times):
        s_nodes = hw * nodes
        s_weights = hw * weights
        acc = np.zeros(lattice.n_sites)
        for s, w in zip(s_nodes, s_weights):
            occ = trajectory.occupancy_at(t - s).astype(float)
            fld = pot_scale * (occ - rho)
            acc += w * m.time_profile(s) * m.smooth_in_space(fld)
        out[row] = acc
    return out


def initial_condition(kind: str, lattice: TorusLattice) -> np.ndarray:
    """Small library of smooth starts restricted to the grid.

    ``dirac`` (a unit mass at the origin, scaled by the cell volume) is
    experimental: the solver runs, but no continuum comparison is offered.
    """
    coords = np.array(list(itertools.product(range(lattice.side), repeat=lattice.d)))
    x = coords / lattice.side
    if kind == "constant":
        return np.ones(lattice.n_sites)
    if kind == "cosine":
        return 1.0 + 0.5 * np.cos(2.0 * np.pi * x[:, 0])
    if kind == "bump":
        r2 = ((x - 0.5) ** 2).sum(axis=1)
        return 1.0 + np.exp(-16.0 * r2)
    if kind == "dirac":
        v = np.zeros(lattice.n_sites)
        v[0] = 1.0 / lattice.cell_volume
        return v
    raise DomainError(f"unknown initial condition {kind!r}")
