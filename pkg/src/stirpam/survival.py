"""Random walk killed at rate eps * occupancy inside a frozen environment.

Survival is evaluated as the exponential of minus the integrated occupancy
seen along the path (exact given the path and the environment, and lower
variance than Bernoulli thinning).  A reversed-clock heat-with-potential
solve provides an exact quenched oracle for the same functional.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DomainError
from .exclusion import ExclusionTrajectory, occupation_lookup
from .pam import strang_solve
from .seeding import derive_rng


@dataclass
class SurvivalReport:
    eps: float
    probe_times: np.ndarray
    survival: np.ndarray
    stderr: np.ndarray
    endpoint_weights: np.ndarray  # survival-weighted endpoint mass per site
    replicas: int
    meta: dict = field(default_factory=dict)


def _walk_paths(lattice, x0, t: float, walk_rate: float, n: int, rng):
    d, side = lattice.d, lattice.side
    strides = np.array([side ** (d - 1 - j) for j in range(d)], dtype=np.int64)
    n_jumps = rng.poisson(walk_rate * t, size=n)
    max_j = int(n_jumps.max()) if n else 0
    jt = rng.random((n, max_j)) * t
    mask = np.arange(max_j)[None, :] < n_jumps[:, None]
    jt = np.where(mask, jt, t)
    jt.sort(axis=1)
    dirs = rng.integers(0, 2 * d, size=(n, max_j))
    coords = np.empty((n, max_j + 1, d), dtype=np.int64)
    for j in range(d):
        step = np.where(dirs == 2 * j, 1, np.where(dirs == 2 * j + 1, -1, 0))
        step = np.where(mask, step, 0)
        coords[:, 0, j] = x0[j]
        coords[:, 1:, j] = (x0[j] + np.cumsum(step, axis=1)) % side
    sites = (coords * strides[None, None, :]).sum(axis=2)
    bounds = np.concatenate([np.zeros((n, 1)), jt, np.full((n, 1), t)], axis=1)
    return sites, bounds


def path_occupancy_integral(trajectory: ExclusionTrajectory, sites: np.ndarray,
                            bounds: np.ndarray, upto: float | None = None) -> np.ndarray:
    """Exact ``int_0^t occupancy(s, X_s) ds`` for piecewise-constant paths."""
    tau, cum, pieces = trajectory.occupation_integrals()
    lo = bounds[:, :-1]
    hi = bounds[:, 1:]
    if upto is not None:
        lo = np.minimum(lo, upto)
        hi = np.minimum(hi, upto)
    upper = occupation_lookup(tau, cum, pieces, sites, hi)
    lower = occupation_lookup(tau, cum, pieces, sites, lo)
    return (upper - lower).sum(axis=1)


def simulate_killed_walk(trajectory: ExclusionTrajectory, eps: float, t: float, x0,
                         replicas: int, seed: int, walk_rate: float | None = None,
                         probe_times=None) -> SurvivalReport:
    """Quenched survival probabilities and the surviving-endpoint histogram.

    The walk jumps at ``walk_rate`` (default 2d) independently of the
    stirring; conditional on the path, survival up to s equals
    ``exp(-eps * int_0^s occupancy)``, evaluated in closed form.
    """
    if eps < 0:
        raise DomainError(f"killing rate must be nonnegative, got {eps}")
    lattice = trajectory.lattice
    if t > trajectory.horizon:
        raise DomainError("query time beyond the trajectory horizon")
    if walk_rate is None:
        walk_rate = 2.0 * lattice.d
    x0 = lattice.validate_site(x0)
    probe_times = sorted(float(s) for s in (probe_times or [t]))
    if probe_times[-1] > t:
        raise DomainError("probe times must not exceed the walk horizon")
    rng = derive_rng(seed, "killed-walk")
    sites, bounds = _walk_paths(lattice, x0, t, walk_rate, replicas, rng)
    survival = np.empty(len(probe_times))
    stderr = np.empty(len(probe_times))
    n_batches = min(50, replicas)
    weights_final = None
    for row, s in enumerate(probe_times):
        integral = path_occupancy_integral(trajectory, sites, bounds, upto=s)
        w = np.exp(-eps * integral)
        survival[row] = float(w.mean())
        bm = np.array([b.mean() for b in np.array_split(w, n_batches)])
        stderr[row] = float(bm.std(ddof=1) / math.sqrt(n_batches))
        if s == probe_times[-1]:
            weights_final = w
    endpoint = np.zeros(lattice.n_sites)
    np.add.at(endpoint, sites[:, -1], weights_final)
    endpoint /= replicas
    return SurvivalReport(eps=eps, probe_times=np.array(probe_times), survival=survival,
                          stderr=stderr, endpoint_weights=endpoint, replicas=replicas,
                          meta={"walk_rate": walk_rate, "x0": x0, "seed": seed})


def survival_pde_value(trajectory: ExclusionTrajectory, eps: float, t: float, x0,
                       dt: float, walk_rate: float | None = None) -> float:
    """Quenched survival via the dual heat-with-potential equation.

    Solving ``dv/dr = Lap v - eps * occupancy(t - r, x) v`` from ``v == 1``
    makes ``v(t, x0)`` equal the survival functional of the forward walk,
    because the reversed potential clock undoes the path-time reversal in
    the stochastic representation.
    """
    lattice = trajectory.lattice
    if walk_rate is None:
        walk_rate = 2.0 * lattice.d
    x0 = lattice.validate_site(x0)

    def reversed_pieces():
        segs = list(trajectory.segments(0.0, t))
        for a, b, occ in reversed(segs):
            yield t - b, t - a, eps * occ.astype(float)

    diffusion_scale = walk_rate / (2.0 * lattice.d)
    _, values = strang_solve(lattice, diffusion_scale, reversed_pieces(),
                             np.ones(lattice.n_sites), dt, [t])
    return float(values[0, lattice.site_index(x0)])


@dataclass
class ScalingFit:
    eps_values: np.ndarray
    tau: float
    coefficients: dict
    residual: float
    log_survival: np.ndarray
    horizons: np.ndarray


def survival_scaling_experiment(d: int, lattice_side: int, eps_values, tau: float,
                                rho: float, seeds, beta: float = 2.0,
                                replicas: int = 2000, horizon_cap: float = 200.0,
                                environments: int = 4) -> ScalingFit:
    """Regression of annealed log-survival onto the weak-killing basis.

    For each eps the walk runs to ``tau * eps**(-2 beta)`` (capped); the
    mean log-survival over environments and walks is decomposed on the
    basis ``{eps**-3 tau, eps**-2 tau, eps**-1 tau, tau log eps}``.  The
    fit is exploratory: desk scales cannot certify the asymptotic
    constants, only ordering and trend.
    """
    from .lattice import TorusLattice

    eps_values = sorted(float(e) for e in eps_values)
    if len(eps_values) < 2:
        raise DomainError("scaling fit needs at least two killing rates "
                          "(a single eps is unidentifiable)")
    if len(eps_values) < 4:
        import warnings
        warnings.warn("fewer killing rates than basis functions; "
                      "coefficients are only jointly identified")
    lattice = TorusLattice.with_side(d, lattice_side)
    log_s = np.empty(len(eps_values))
    horizons = np.empty(len(eps_values))
    for i, eps in enumerate(eps_values):
        horizon = min(tau * eps ** (-2.0 * beta), horizon_cap)
        horizons[i] = horizon
        total = []
        for env in range(environments):
            for seed in seeds:
                traj = ExclusionTrajectory.stationary(lattice, rho, 1.0, horizon,
                                                      seed=seed * 1000 + env)
                rep = simulate_killed_walk(traj, eps, horizon, (0,) * d,
                                           replicas, seed=seed * 1000 + env)
                total.append(rep.survival[-1])
        log_s[i] = math.log(max(np.mean(total), 1e-300))
    basis = np.stack([
        [e ** -3 * tau for e in eps_values],
        [e ** -2 * tau for e in eps_values],
        [e ** -1 * tau for e in eps_values],
        [tau * math.log(e) for e in eps_values],
    ], axis=1)
    coef, res, *_ = np.linalg.lstsq(basis, log_s, rcond=None)
    fitted = basis @ coef
    return ScalingFit(
        eps_values=np.array(eps_values), tau=tau,
        coefficients={"eps^-3 tau": float(coef[0]), "eps^-2 tau": float(coef[1]),
                      "eps^-1 tau": float(coef[2]), "tau log eps": float(coef[3])},
        residual=float(np.max(np.abs(fitted - log_s))),
        log_survival=log_s, horizons=horizons,
    )
