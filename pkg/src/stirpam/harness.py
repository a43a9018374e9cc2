"""Experiment orchestration: configuration, CLI, persistence, verification.

Every artifact carries a reproducibility header (config hash, package
version, master seed); re-running with the same triple reproduces the
numeric payload byte for byte.  Seeds for sub-tasks derive from the master
seed by counter-based splitting (see ``seeding``).
"""

from __future__ import annotations

import argparse
import hashlib
import itertools
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from .errors import CapacityError, DomainError
from .lattice import TorusLattice, parabolic_norm, torus_distance
from . import exclusion, cumulants, kernels, renorm, pam, survival
from .golden import GOLDEN_RTOL, RENORM_GOLDEN
from .seeding import derive_rng

EXPERIMENT_KINDS = ("ssep", "cumulants", "renorm", "pam", "survival", "convergence")


@dataclass
class ExperimentConfig:
    kind: str
    d: int = 1
    levels: tuple = (2,)
    sites: int | None = None  # explicit side length (oracle mode) for cumulants
    rho: float = 0.5
    horizon: float = 0.5
    deltas: tuple = ()
    seed: int = 0
    replicas: int = 1000
    points: int = 2
    dt: float = 0.01
    eps_values: tuple = ()
    tau: float = 1.0
    threads: int = 1
    out_dir: str = "out"
    tolerance: float = 1e-9

    def validate(self) -> list[str]:
        problems = []
        if self.kind not in EXPERIMENT_KINDS:
            problems.append(f"kind must be one of {EXPERIMENT_KINDS}, got {self.kind!r}")
        if self.d < 1:
            problems.append(f"d must be >= 1, got {self.d}")
        if not self.levels and self.sites is None:
            problems.append("at least one level (or an explicit site count) is required")
        if any(l < 2 for l in self.levels):
            problems.append(f"levels must be >= 2, got {self.levels}")
        if self.sites is not None and self.sites <= 2:
            problems.append(f"sites must be >= 3, got {self.sites}")
        if not 0.0 <= self.rho <= 1.0:
            problems.append(f"rho must lie in [0,1], got {self.rho}")
        if self.horizon < 0:
            problems.append(f"horizon must be nonnegative, got {self.horizon}")
        if self.replicas < 1:
            problems.append(f"replicas must be positive, got {self.replicas}")
        if self.dt <= 0:
            problems.append(f"dt must be positive, got {self.dt}")
        if self.points < 1:
            problems.append(f"points must be positive, got {self.points}")
        if self.threads < 1:
            problems.append(f"threads must be positive, got {self.threads}")
        for delta in self.deltas:
            if not 0.0 < delta <= 1.0:
                problems.append(f"delta must lie in (0,1], got {delta}")
        return problems

    def hash(self) -> str:
        payload = asdict(self)
        payload.pop("out_dir")  # where results land does not change them
        payload.pop("threads")
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf8")).hexdigest()[:16]


def _meta_lines(config: ExperimentConfig) -> list[str]:
    return [
        f"config_hash: {config.hash()}",
        f"version: {__version__}",
        f"master_seed: {config.seed}",
    ]


def _fmt(x) -> str:
    if isinstance(x, float):
        return "%.17g" % x
    return str(x)


def write_csv(path, columns: list[str], rows, config: ExperimentConfig) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as fh:
        for line in _meta_lines(config):
            fh.write(f"# {line}\n")
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def write_json(path, payload: dict, config: ExperimentConfig | None = None) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    if config is not None:
        payload = {"meta": dict(item.split(": ", 1) for item in _meta_lines(config)),
                   **payload}
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1, default=_fmt)
        fh.write("\n")


def _pmap(fn, items, threads: int):
    if threads <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    try:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    except (OSError, RuntimeError):  # restricted environments fall back to serial
        return [fn(it) for it in items]


# ---------------------------------------------------------------------------
# experiment pipelines
# ---------------------------------------------------------------------------


def run_ssep(config: ExperimentConfig) -> list[str]:
    out = []
    for level in config.levels:
        lattice = TorusLattice.dyadic(config.d, level)
        traj = exclusion.ExclusionTrajectory.stationary(
            lattice, config.rho, 4.0 ** level, config.horizon, config.seed)
        probes = np.linspace(0.0, config.horizon, 9)
        snaps = traj.snapshots(probes)
        rows = []
        for it, t in enumerate(probes):
            for idx in range(lattice.n_sites):
                rows.append((t, *lattice.site_coords(idx), int(snaps[it, idx])))
        path = os.path.join(config.out_dir, f"ssep_d{config.d}_N{level}.csv")
        write_csv(path, ["t"] + [f"x{j}" for j in range(config.d)] + ["occupancy"],
                  rows, config)
        stream_path = os.path.join(config.out_dir, f"ssep_d{config.d}_N{level}.events")
        exclusion.save_event_stream(traj.stream, stream_path)
        out.extend([path, stream_path])
    return out


def _cumulant_table_rows(lattice: TorusLattice, rho: float, k: int, seed: int, tol: float):
    rng = derive_rng(seed, "cumulant-table")
    oracle = exclusion.FullGenerator(lattice)
    rows = []
    for case in range(5):
        times = tuple(sorted(rng.uniform(0.05, 0.6, size=k)))
        sites = tuple(int(s) for s in rng.integers(0, lattice.n_sites, size=k))
        pts = cumulants.PointFamily(lattice, times, sites, rho)
        moment_formula = cumulants.ssep_moment(pts)
        moment_oracle = oracle.moment(rho, list(zip(times, sites)))
        cumulant_formula = cumulants.ssep_cumulant_connected(pts)

        def moment_fn(block):
            return oracle.moment(rho, [(times[i], sites[i]) for i in sorted(block)])

        cumulant_oracle = cumulants.moments_to_cumulants(moment_fn, range(k))
        rows.append((case, repr(times), repr(sites), moment_formula, moment_oracle,
                     abs(moment_formula - moment_oracle), cumulant_formula,
                     cumulant_oracle, abs(cumulant_formula - cumulant_oracle)))
    return rows


def run_cumulants(config: ExperimentConfig) -> list[str]:
    side = config.sites or 2 ** config.levels[0]
    lattice = TorusLattice.with_side(config.d, side)
    rows = _cumulant_table_rows(lattice, config.rho, config.points, config.seed,
                                config.tolerance)
    path = os.path.join(config.out_dir, f"cumulants_d{config.d}_s{side}_k{config.points}.csv")
    write_csv(path, ["case", "times", "sites", "moment_formula", "moment_oracle",
                     "moment_diff", "cumulant_formula", "cumulant_oracle",
                     "cumulant_diff"], rows, config)
    worst = max(max(r[5], r[8]) for r in rows)
    status_path = os.path.join(config.out_dir, "cumulants_status.json")
    write_json(status_path, {"worst_discrepancy": worst, "tolerance": config.tolerance,
                             "pass": bool(worst < config.tolerance)}, config)
    return [path, status_path]


def run_renorm(config: ExperimentConfig) -> list[str]:
    rows = []
    for level in config.levels:
        rep = renorm.total_CN(level, config.d, config.rho, seed=config.seed,
                              c21_samples=min(config.replicas, 50_000))
        rows.append((config.d, level, config.rho, rep.c_n, rep.c_n1,
                     rep.c_n21 if rep.c_n21 is not None else float("nan"),
                     rep.c_n21_stderr if rep.c_n21_stderr is not None else float("nan"),
                     rep.c_n22, rep.c_n23, rep.alpha, rep.beta, rep.gamma, rep.total))
    path = os.path.join(config.out_dir, f"renorm_d{config.d}_rho{config.rho}.csv")
    write_csv(path, ["d", "N", "rho", "c_N", "c_N1", "c_N21", "c_N21_ci", "c_N22",
                     "c_N23", "alpha_N", "beta_N", "gamma_N", "C_N"], rows, config)
    return [path]


def run_pam(config: ExperimentConfig) -> list[str]:
    level = config.levels[0]
    lattice = TorusLattice.dyadic(config.d, level)
    traj = exclusion.ExclusionTrajectory.stationary(
        lattice, config.rho, 4.0 ** level, config.horizon, config.seed)
    u0 = pam.initial_condition("cosine", lattice)
    probes = [config.horizon * f for f in (0.25, 0.5, 0.75, 1.0)]
    sol = pam.solve_pam(level, config.d, traj, 0.0, u0, config.horizon, config.dt,
                        config.rho, snapshot_times=probes)
    rows = []
    for it, t in enumerate(sol.times):
        for idx in range(lattice.n_sites):
            rows.append((t, *lattice.site_coords(idx), sol.values[it, idx]))
    path = os.path.join(config.out_dir, f"pam_d{config.d}_N{level}.csv")
    write_csv(path, ["t"] + [f"x{j}" for j in range(config.d)] + ["u"], rows, config)
    fk = pam.feynman_kac(traj, level, 0.0, u0, probes[-1], (0,) * config.d,
                         max(config.replicas, 100), config.seed, config.rho)
    report = {
        "solver_value": float(sol.values[-1, 0]),
        "oracle_estimate": fk.estimate,
        "oracle_3sigma": fk.ci3,
        "agrees": bool(abs(sol.values[-1, 0] - fk.estimate) <= fk.ci3),
    }
    jpath = os.path.join(config.out_dir, f"pam_d{config.d}_N{level}_oracle.json")
    write_json(jpath, report, config)
    return [path, jpath]


def run_survival(config: ExperimentConfig) -> list[str]:
    side = config.sites or 2 ** config.levels[0]
    lattice = TorusLattice.with_side(config.d, side)
    eps_values = config.eps_values or (0.25, 0.4, 0.6, 0.9)
    traj = exclusion.ExclusionTrajectory.stationary(lattice, config.rho, 1.0,
                                                    config.horizon, config.seed)
    rows = []
    for eps in eps_values:
        rep = survival.simulate_killed_walk(traj, eps, config.horizon, (0,) * config.d,
                                            config.replicas, config.seed)
        rows.append((eps, config.horizon, rep.survival[-1], rep.stderr[-1]))
    path = os.path.join(config.out_dir, f"survival_d{config.d}_s{side}.csv")
    write_csv(path, ["eps", "t", "survival", "stderr"], rows, config)
    fit = survival.survival_scaling_experiment(
        config.d, side, eps_values, config.tau, config.rho, seeds=[config.seed],
        replicas=config.replicas)
    jpath = os.path.join(config.out_dir, f"survival_fit_d{config.d}.json")
    write_json(jpath, {"coefficients": fit.coefficients, "residual": fit.residual,
                       "horizons": list(fit.horizons),
                       "log_survival": list(fit.log_survival)}, config)
    return [path, jpath]


def run_convergence(config: ExperimentConfig) -> list[str]:
    deltas = config.deltas or (0.4, 0.25)
    report = convergence_study(config.d, list(config.levels), list(deltas), config.rho,
                               horizon=config.horizon, dt=config.dt,
                               seeds=[config.seed + i for i in range(3)])
    path = os.path.join(config.out_dir, f"convergence_d{config.d}.json")
    write_json(path, report, config)
    return [path]


def convergence_study(d: int, levels, deltas, rho: float, horizon: float, dt: float,
                      seeds, eta: float = 0.45) -> dict:
    """Mollified-against-raw solution distances per level, plus cross-level trends.

    Raw and mollified solves at one level share the identical trajectory, so
    the per-level distance realizes the smoothing comparison exactly.
    Cross-level rows couple only the initial data (seed-matched), which is
    a partial coupling; they are reported as trends, not limits.  Full
    continuum convergence in d = 3 is out of desk range by design.
    """
    margin = max(deltas) ** 2 / 2.0 if deltas else 0.0
    records = []
    fields: dict = {}
    for seed in seeds:
        for level in levels:
            lattice = TorusLattice.dyadic(d, level)
            traj = exclusion.ExclusionTrajectory.stationary(
                lattice, rho, 4.0 ** level, horizon + 2.0 * margin, seed)
            u0 = pam.initial_condition("cosine", lattice)
            snaps = [horizon * f for f in (0.5, 1.0)]
            raw = pam.solve_pam(level, d, traj, 0.0, u0, horizon, dt, rho,
                                snapshot_times=snaps, t_offset=margin)
            fields[(seed, level, None)] = raw
            for delta in deltas:
                m = pam.Mollifier(lattice, level, delta)
                grid_times = np.arange(0.0, horizon + dt, min(dt, delta * delta / 4.0))
                table = pam.mollify_noise(traj, level, delta,
                                          grid_times + margin, rho, mollifier=m)

                def potential_at(t, _table=table, _times=grid_times):
                    idx = min(int(np.searchsorted(_times, t)), len(_times) - 1)
                    return _table[idx]

                smooth = pam.solve_time_dependent(lattice, level, 4.0 ** level,
                                                  potential_at, horizon, dt, u0,
                                                  snapshot_times=snaps)
                fields[(seed, level, delta)] = smooth
                dist = _field_distance(raw, smooth, eta)
                records.append({"seed": seed, "level": level, "delta": delta,
                                "raw_vs_mollified": dist})
    cross = []
    for delta in deltas:
        for la, lb in itertools.combinations(sorted(levels), 2):
            vals = []
            for seed in seeds:
                fa = fields[(seed, la, delta)]
                fb = fields[(seed, lb, delta)]
                vals.append(_cross_level_distance(fa, fb, eta))
            cross.append({"delta": delta, "coarse": la, "fine": lb,
                          "median_distance": float(np.median(vals))})
    return {"per_level": records, "cross_level": cross,
            "note": "cross-level rows use seed-matched initial data only"}


def _field_distance(a: pam.PamField, b: pam.PamField, eta: float) -> float:
    """Space-time distance between two fields on the same grid."""
    diff = a.values - b.values
    sup = float(np.max(np.abs(diff)))
    lattice = a.lattice
    quotient = 0.0
    for it in range(len(a.times)):
        spec = pam.holder_norm(diff[it], lattice, eta)
        quotient = max(quotient, spec.difference_term)
    return sup + quotient


def _cross_level_distance(coarse: pam.PamField, fine: pam.PamField, eta: float) -> float:
    """Compare a coarse lattice field with the fine one lifted to a callable."""
    side_f = fine.lattice.side

    def lifted(t, x):
        it = int(np.argmin(np.abs(fine.times - t)))
        idx = fine.lattice.site_index(tuple(int(round(c * side_f)) % side_f for c in x))
        return float(fine.values[it, idx])

    spec = pam.space_time_distance(lifted, coarse, eta, fine=1)
    return spec.value


# ---------------------------------------------------------------------------
# verification suites
# ---------------------------------------------------------------------------


def _check_lattice_metric():
    lattice = TorusLattice.with_side(2, 5)
    sites = list(lattice.sites())[:12]
    for x in sites:
        if torus_distance(lattice, x, x) != 0:
            return False, "identity failed"
    for x, y in itertools.combinations(sites, 2):
        if torus_distance(lattice, x, y) != torus_distance(lattice, y, x):
            return False, "symmetry failed"
    for x, y, z in itertools.combinations(sites, 3):
        if torus_distance(lattice, x, z) > torus_distance(lattice, x, y) + torus_distance(lattice, y, z):
            return False, "triangle failed"
    return True, "metric axioms hold on sampled sites"


def _check_edges():
    for d, side in ((1, 8), (2, 4), (3, 4)):
        lattice = TorusLattice.with_side(d, side)
        a, b = exclusion.edge_endpoints(lattice)
        seen = {frozenset((int(x), int(y))) for x, y in zip(a, b)}
        if len(seen) != lattice.n_edges:
            return False, f"duplicate edges at d={d}"
    return True, "each undirected edge listed exactly once"


def _check_parabolic():
    z = (0.3, 0.5, -0.2)
    lam = 1.7
    scaled = (lam ** 2 * z[0], lam * z[1], lam * z[2])
    lhs = parabolic_norm(scaled)
    rhs = lam * parabolic_norm(z)
    ok = math.isclose(lhs, rhs, rel_tol=1e-12)
    return ok, f"homogeneity residual {abs(lhs - rhs):.2e}"


def _check_stream_determinism():
    lattice = TorusLattice.dyadic(1, 2)
    s1 = exclusion.sample_event_stream(lattice, 1.0, 5.0, seed=7)
    s2 = exclusion.sample_event_stream(lattice, 1.0, 5.0, seed=7)
    ok = np.array_equal(s1.times, s2.times) and np.array_equal(s1.edges, s2.edges)
    return ok, f"{len(s1)} events reproduced"


def _check_conservation():
    lattice = TorusLattice.dyadic(1, 3)
    stream = exclusion.sample_event_stream(lattice, 1.0, 3.0, seed=3)
    init = exclusion.OccupancyState.bernoulli(lattice, 0.4, seed=3)
    final = exclusion.evolve_occupancy(init, stream, 3.0)
    ok = init.particle_count == final.particle_count
    return ok, f"count {init.particle_count} preserved"


def _check_coupling():
    lattice = TorusLattice.dyadic(1, 2)
    stream = exclusion.sample_event_stream(lattice, 1.0, 2.0, seed=11)
    config = exclusion.LabelledConfiguration(lattice, labels=("a", "b"), sites=(0, 2))
    evolved = exclusion.evolve_labelled(config, stream, 2.0)
    occ = exclusion.evolve_occupancy(config.indicator(), stream, 2.0)
    ok = np.array_equal(evolved.indicator().values, occ.values)
    return ok, "labelled projection equals occupancy evolution"


def _check_stationarity():
    lattice = TorusLattice.dyadic(1, 2)
    gen = exclusion.FullGenerator(lattice)
    mu = gen.product_measure(0.3)
    resid = float(np.max(np.abs(mu @ gen.generator.toarray())))
    return resid < 1e-12, f"stationarity residual {resid:.2e}"


def _check_heat_kernel():
    lattice = TorusLattice.dyadic(1, 3)
    p = kernels.heat_kernel(lattice, 2.0, 0.7)
    mass = abs(p.sum() - 1.0)
    p1 = kernels.heat_kernel(lattice, 2.0, 0.3)
    p2 = kernels.heat_kernel(lattice, 2.0, 0.4)
    conv = np.fft.ifft(np.fft.fft(p1) * np.fft.fft(p2)).real
    semi = float(np.max(np.abs(conv - p)))
    ok = mass < 1e-12 and semi < 1e-12
    return ok, f"mass defect {mass:.2e}, semigroup defect {semi:.2e}"


def _check_two_point_moment():
    lattice = TorusLattice.dyadic(1, 2)
    rho, t = 0.5, 0.4
    pts = cumulants.PointFamily(lattice, (0.0, t), (0, 1), rho)
    val = cumulants.ssep_moment(pts)
    p = kernels.heat_kernel(lattice, 2.0, t)
    closed = rho * rho + rho * (1 - rho) * p[1]
    ok = abs(val - closed) < 1e-10
    return ok, f"two-point residual {abs(val - closed):.2e}"


def _check_inversion():
    rng = derive_rng(123, "verify-inversion")
    vals = {frozenset(s): float(rng.uniform(0.2, 1.0))
            for r in range(1, 4) for s in itertools.combinations(range(3), r)}

    def moment(block):
        return vals[frozenset(block)]

    cums = {frozenset(s): cumulants.moments_to_cumulants(moment, s)
            for r in range(1, 4) for s in itertools.combinations(range(3), r)}
    back = cumulants.cumulants_to_moment(lambda b: cums[frozenset(b)], range(3))
    resid = abs(back - moment(frozenset(range(3))))
    return resid < 1e-12, f"round-trip residual {resid:.2e}"


def _check_wick_zero():
    lattice = TorusLattice.dyadic(1, 2)
    oracle = exclusion.FullGenerator(lattice)
    rho = 0.4
    grid = {(0, 0): (0.0, 0), (0, 1): (0.25, 1)}
    check = cumulants.diagram_formula_check(oracle, rho, grid)
    resid = check.discrepancy
    return resid < 1e-10, f"pair diagram residual {resid:.2e}"


def _check_golden():
    if not RENORM_GOLDEN:
        return False, "golden table empty (run scripts/make_golden.py)"
    for (d, level, rho), stored in sorted(RENORM_GOLDEN.items()):
        fresh = {
            "c_n": renorm.compute_cN(level, d, rho),
            "c_n1": renorm.compute_cN1(level, d, rho),
            "c_n22": renorm.compute_cN22(level, d, rho),
            "c_n23": renorm.compute_cN23(level, d, rho),
        }
        for key, want in stored.items():
            got = fresh[key]
            if not math.isclose(got, want, rel_tol=GOLDEN_RTOL, abs_tol=1e-14):
                return False, (f"golden mismatch at d={d} N={level} rho={rho} {key}: "
                               f"stored {want!r}, recomputed {got!r}")
    return True, f"{len(RENORM_GOLDEN)} golden rows reproduced"


def _check_holder():
    lattice = TorusLattice.dyadic(1, 3)
    rng = derive_rng(5, "verify-holder")
    f = rng.normal(size=lattice.n_sites)
    a = pam.holder_norm(f, lattice, 0.5).value
    b = pam.holder_norm(2.5 * f, lattice, 0.5).value
    resid = abs(b - 2.5 * a)
    return resid < 1e-10, f"homogeneity residual {resid:.2e}"


def _check_fk_t0():
    lattice = TorusLattice.dyadic(1, 2)
    traj = exclusion.ExclusionTrajectory.stationary(lattice, 0.5, 16.0, 0.02, seed=2)
    u0 = np.arange(lattice.n_sites, dtype=float)
    est = pam.feynman_kac(traj, 2, 0.0, u0, 0.0, (1,), 200, seed=2, rho=0.5)
    ok = est.estimate == u0[1]
    return ok, f"t=0 value {est.estimate}"


def _check_survival_exact():
    lattice = TorusLattice.dyadic(1, 2)
    traj = exclusion.ExclusionTrajectory.stationary(lattice, 0.5, 1.0, 1.0, seed=9)
    rep0 = survival.simulate_killed_walk(traj, 0.0, 1.0, (0,), 500, seed=9)
    if abs(rep0.survival[-1] - 1.0) > 0.0:
        return False, "eps=0 survival differs from 1"
    ones = exclusion.OccupancyState(lattice, np.ones(lattice.n_sites, dtype=np.uint8))
    static = exclusion.ExclusionTrajectory(
        initial=ones,
        stream=exclusion.sample_event_stream(lattice, 1e-9, 1.0, seed=1),
        density=1.0)
    rep1 = survival.simulate_killed_walk(static, 0.7, 1.0, (0,), 500, seed=9)
    resid = float(np.max(np.abs(rep1.survival - math.exp(-0.7 * 1.0))))
    return resid < 1e-12, f"static-environment residual {resid:.2e}"


QUICK_CHECKS = [
    ("lattice-metric", _check_lattice_metric),
    ("lattice-edges", _check_edges),
    ("parabolic-homogeneity", _check_parabolic),
    ("stream-determinism", _check_stream_determinism),
    ("particle-conservation", _check_conservation),
    ("stirring-coupling", _check_coupling),
    ("generator-stationarity", _check_stationarity),
    ("heat-kernel", _check_heat_kernel),
    ("two-point-moment", _check_two_point_moment),
    ("cumulant-inversion", _check_inversion),
    ("diagram-pair", _check_wick_zero),
    ("golden-renorm", _check_golden),
    ("holder-homogeneity", _check_holder),
    ("oracle-t0", _check_fk_t0),
    ("survival-exactness", _check_survival_exact),
]


def _check_moment_oracle_full():
    lattice = TorusLattice.dyadic(1, 2)
    oracle = exclusion.FullGenerator(lattice)
    pts = cumulants.PointFamily(lattice, (0.05, 0.21, 0.4), (0, 2, 1), 0.5)
    formula = cumulants.ssep_moment(pts)
    exact = oracle.moment(0.5, list(zip(pts.times, pts.sites)))
    resid = abs(formula - exact)
    return resid < 1e-9, f"three-point residual {resid:.2e}"


def _check_cumulant_identity_full():
    lattice = TorusLattice.dyadic(1, 2)
    oracle = exclusion.FullGenerator(lattice)
    pts = cumulants.PointFamily(lattice, (0.1, 0.3, 0.55), (1, 3, 0), 0.5)
    by_scheme = cumulants.ssep_cumulant_connected(pts)

    def moment_fn(block):
        return oracle.moment(0.5, [(pts.times[i], pts.sites[i]) for i in sorted(block)])

    by_inversion = cumulants.moments_to_cumulants(moment_fn, range(3))
    resid = abs(by_scheme - by_inversion)
    return resid < 1e-9, f"identity residual {resid:.2e}"


def _check_martingale_full():
    lattice = TorusLattice.dyadic(1, 2)
    resid = cumulants.martingale_decomposition_check(lattice, (0, 2), (1, 3), 0.35)
    return resid < 1e-10, f"decomposition residual {resid:.2e}"


def _check_splitting_full():
    import scipy.linalg
    lattice = TorusLattice.dyadic(1, 3)
    rng = derive_rng(4, "verify-splitting")
    potential = rng.uniform(0.0, 2.0, lattice.n_sites)
    u0 = pam.initial_condition("cosine", lattice)
    lap = np.zeros((lattice.n_sites, lattice.n_sites))
    a, b = exclusion.edge_endpoints(lattice)
    for i, j in zip(a, b):
        lap[i, j] += 1.0
        lap[j, i] += 1.0
    lap -= np.diag(lap.sum(axis=1))
    exact = scipy.linalg.expm(0.5 * (lap - np.diag(potential))) @ u0
    errs = []
    for dt in (0.05, 0.025):
        _, vals = pam.strang_solve(lattice, 1.0,
                                   [(0.0, 0.5, potential)], u0, dt, [0.5])
        errs.append(float(np.max(np.abs(vals[0] - exact))))
    ratio = errs[0] / errs[1]
    return ratio >= 3.5, f"halving error ratio {ratio:.2f}"


FULL_CHECKS = QUICK_CHECKS + [
    ("moment-oracle", _check_moment_oracle_full),
    ("cumulant-identity", _check_cumulant_identity_full),
    ("martingale-decomposition", _check_martingale_full),
    ("splitting-order", _check_splitting_full),
]


def verify_all(level: str = "quick") -> dict:
    """Run the invariant suite; the report is deterministic (no timings)."""
    checks = QUICK_CHECKS if level == "quick" else FULL_CHECKS
    report = {"level": level, "checks": {}}
    for name, fn in checks:
        t0 = time.time()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crash is a named failure, not an abort
            ok, detail = False, f"exception: {exc}"
        print(f"  [{'PASS' if ok else 'FAIL'}] {name}: {detail} "
              f"({time.time() - t0:.2f}s)", file=sys.stderr)
        report["checks"][name] = {"pass": bool(ok), "detail": detail}
    report["all_pass"] = all(c["pass"] for c in report["checks"].values())
    return report


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------


RUNNERS = {
    "ssep": run_ssep,
    "cumulants": run_cumulants,
    "renorm": run_renorm,
    "pam": run_pam,
    "survival": run_survival,
    "convergence": run_convergence,
}


def run(config: ExperimentConfig) -> int:
    problems = config.validate()
    if problems:
        for p in problems:
            print(f"config error: {p}", file=sys.stderr)
        return 2
    artifacts = RUNNERS[config.kind](config)
    for path in artifacts:
        print(path)
    return 0


def _parse_levels(text: str) -> tuple:
    return tuple(int(p) for p in text.split(",") if p)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stirpam",
        description="Exclusion-process simulation, exact cumulants, counterterm "
                    "tables, and the renormalized lattice Anderson solver.")
    sub = parser.add_subparsers(dest="command")

    def common(p):
        p.add_argument("--config", help="JSON config file (flags override it)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--d", type=int, default=1)
        p.add_argument("--N", default="2", help="comma-separated dyadic levels")
        p.add_argument("--rho", type=float, default=0.5)
        p.add_argument("--T", type=float, default=0.5)
        p.add_argument("--replicas", type=int, default=1000)
        p.add_argument("--dt", type=float, default=0.01)

    for kind in EXPERIMENT_KINDS:
        p = sub.add_parser(kind)
        common(p)
        if kind == "cumulants":
            p.add_argument("--exact", action="store_true", default=True)
            p.add_argument("--sites", type=int, default=None)
            p.add_argument("--points", type=int, default=2)
        if kind == "survival":
            p.add_argument("--sites", type=int, default=None)
            p.add_argument("--eps", default="0.25,0.4,0.6,0.9")
            p.add_argument("--tau", type=float, default=1.0)
        if kind == "convergence":
            p.add_argument("--deltas", default="0.4,0.25")

    v = sub.add_parser("verify")
    v.add_argument("--level", choices=("quick", "full"), default="quick")
    v.add_argument("--out", default=None)
    return parser


def config_from_args(args) -> ExperimentConfig:
    base = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            base = json.load(fh)
    out_dir = (getattr(args, "out", None) or base.get("out_dir")
               or os.environ.get("STIRPAM_OUT") or "out")
    cfg = ExperimentConfig(
        kind=args.command,
        d=getattr(args, "d", base.get("d", 1)),
        levels=_parse_levels(getattr(args, "N", "2")) or tuple(base.get("levels", (2,))),
        sites=getattr(args, "sites", base.get("sites", None)),
        rho=getattr(args, "rho", base.get("rho", 0.5)),
        horizon=getattr(args, "T", base.get("horizon", 0.5)),
        deltas=tuple(float(x) for x in getattr(args, "deltas", "").split(",") if x)
        or tuple(base.get("deltas", ())),
        seed=getattr(args, "seed", base.get("seed", 0)),
        replicas=getattr(args, "replicas", base.get("replicas", 1000)),
        points=getattr(args, "points", base.get("points", 2)),
        dt=getattr(args, "dt", base.get("dt", 0.01)),
        eps_values=tuple(float(x) for x in getattr(args, "eps", "").split(",") if x)
        or tuple(base.get("eps_values", ())),
        tau=getattr(args, "tau", base.get("tau", 1.0)),
        threads=getattr(args, "threads", base.get("threads", 1)),
        out_dir=out_dir,
    )
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage()
        return 2
    if args.command == "verify":
        report = verify_all(args.level)
        out = args.out or os.environ.get("STIRPAM_OUT") or "out"
        os.makedirs(out, exist_ok=True)
        path = os.path.join(out, f"verify_{args.level}.json")
        with open(path, "w") as fh:
            json.dump(report, fh, sort_keys=True, indent=1)
            fh.write("\n")
        print(path)
        return 0 if report["all_pass"] else 1
    return run(config_from_args(args))


if __name__ == "__main__":
    sys.exit(main())
