"""Set-partition combinatorics, Wick calculus, and exact exclusion moments.

The stationary exclusion moment of occupancies at k space-time points is a
sum over set partitions: each partition contributes a product of Bernoulli
cumulants (one per block) times a chained labelled-transition probability
in which every block travels as one exclusion particle, pinned at its own
observation points and summed elsewhere.  The joint cumulant keeps only
contraction schemes (a partition plus, per time gap, a grouping of the
blocks that straddle the gap into connected bundles) that form a single
connected component.

Everything here is validated against full-generator matrix exponentials
on small tori and against Monte-Carlo estimates at larger sizes.
"""

from __future__ import annotations

import itertools
import math
import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import CapacityError, DomainError
from .exclusion import (
    OccupancyState,
    exact_flow_transition,
    exact_labelled_transition,
    flow_states,
    replay_snapshots,
    sample_event_stream,
)
from .lattice import TorusLattice, parabolic_norm
from .seeding import derive_rng

PARTITION_GUARD = 12
MOMENT_POINT_GUARD = 6
CUMULANT_POINT_GUARD = 4
DIAGRAM_GUARD = 8
TIME_TIE_EPS = 1e-9


# ---------------------------------------------------------------------------
# partitions and cumulant/moment inversion
# ---------------------------------------------------------------------------


def enumerate_partitions(items) -> list[tuple[frozenset, ...]]:
    """All set partitions of ``items``, each exactly once, canonically ordered.

    Blocks are frozensets; a partition is the tuple of its blocks sorted by
    minimum element.  Counts are the Bell numbers (1, 1, 2, 5, 15, 52, ...).
    """
    items = list(items)
    if len(items) > PARTITION_GUARD:
        raise CapacityError(
            f"partition enumeration guarded at {PARTITION_GUARD} elements, got {len(items)}"
        )
    if not items:
        return [()]
    out: list[tuple[frozenset, ...]] = []

    def grow(idx: int, blocks: list[list]):
        if idx == len(items):
            out.append(tuple(frozenset(b) for b in blocks))
            return
        x = items[idx]
        for b in blocks:
            b.append(x)
            grow(idx + 1, blocks)
            b.pop()
        blocks.append([x])
        grow(idx + 1, blocks)
        blocks.pop()

    grow(0, [])
    return [tuple(sorted(p, key=min)) for p in out]


def moments_to_cumulants(moment, labels) -> float:
    """Joint cumulant by Moebius inversion over set partitions.

    ``E_c(X_B) = sum_pi (|pi|-1)! (-1)^(|pi|-1) prod_{A in pi} E(X^A)``
    with ``moment`` supplying ``E(X^A)`` on frozensets of labels.
    """
    labels = frozenset(labels)
    total = 0.0
    for pi in enumerate_partitions(labels):
        sign = (-1.0) ** (len(pi) - 1) * math.factorial(len(pi) - 1)
        prod = 1.0
        for block in pi:
            prod *= moment(block)
        total += sign * prod
    return total


def cumulants_to_moment(cumulant, labels) -> float:
    """Inverse direction: ``E(X^B) = sum_pi prod_{A in pi} E_c(X_A)``."""
    labels = frozenset(labels)
    total = 0.0
    for pi in enumerate_partitions(labels):
        prod = 1.0
        for block in pi:
            prod *= cumulant(block)
        total += prod
    return total


@lru_cache(maxsize=None)
def bernoulli_cumulant(order: int, q: float) -> float:
    """n-th cumulant of a Bernoulli(q) variable (all moments equal q)."""
    if order < 1:
        raise DomainError("cumulant order must be >= 1")
    return moments_to_cumulants(lambda block: q, range(order))


# ---------------------------------------------------------------------------
# Wick products and the diagram formula
# ---------------------------------------------------------------------------


def _partition_moment(cumulant, labels: frozenset) -> float:
    if not labels:
        return 1.0
    return cumulants_to_moment(cumulant, labels)


def wick_coefficients(labels, cumulant) -> dict[frozenset, float]:
    """Expansion of the Wick product as a polynomial in the variables.

    Returns coefficients ``c_S`` with ``<X_A> = sum_S c_S prod_{i in S} X_i``,
    solved from ``X^A = sum_{B subset A} <X_B> E(X^{A\\B})`` with the moments
    reconstructed from ``cumulant``.
    """
    labels = frozenset(labels)
    cache: dict[frozenset, dict[frozenset, float]] = {}

    def coeffs(A: frozenset) -> dict[frozenset, float]:
        if A in cache:
            return cache[A]
        if not A:
            cache[A] = {frozenset(): 1.0}
            return cache[A]
        acc: dict[frozenset, float] = {A: 1.0}
        for r in range(len(A)):
            for B in map(frozenset, itertools.combinations(sorted(A), r)):
                weight = _partition_moment(cumulant, A - B)
                for S, c in coeffs(B).items():
                    acc[S] = acc.get(S, 0.0) + (-weight) * c
        cache[A] = acc
        return acc

    return coeffs(labels)


def wick_product(values: dict, cumulant) -> float:
    """Realized Wick product of the given variables.

    ``values`` maps labels to realized numbers; ``cumulant`` supplies joint
    cumulants on frozensets of those labels.  ``E <X_A> = 0`` for nonempty A.
    """
    coeffs = wick_coefficients(values.keys(), cumulant)
    total = 0.0
    for S, c in coeffs.items():
        prod = c
        for lbl in S:
            prod *= values[lbl]
        total += prod
    return total


@dataclass
class DiagramCheck:
    lhs: float
    rhs: float

    @property
    def discrepancy(self) -> float:
        return abs(self.lhs - self.rhs)


def diagram_formula_check(oracle, rho: float, point_grid: dict) -> DiagramCheck:
    """Both sides of the diagram formula for products of Wick products.

    ``point_grid`` maps labels ``(i, k)`` (row i, column k) to space-time
    points ``(t, site_index)``; column-wise Wick products are expanded
    against exact joint moments from the full-generator ``oracle``.  The
    right-hand side sums cumulant products over partitions of the full
    grid whose blocks never sit inside a single column.
    """
    labels = sorted(point_grid)
    if len(labels) > DIAGRAM_GUARD:
        raise CapacityError(f"diagram check guarded at {DIAGRAM_GUARD} variables")
    columns = sorted({k for _, k in labels})

    moment_cache: dict[frozenset, float] = {}

    def moment(block: frozenset) -> float:
        if block not in moment_cache:
            pts = [point_grid[lbl] for lbl in block]
            moment_cache[block] = oracle.moment(rho, pts)
        return moment_cache[block]

    cumulant_cache: dict[frozenset, float] = {}

    def cumulant(block: frozenset) -> float:
        if block not in cumulant_cache:
            cumulant_cache[block] = moments_to_cumulants(moment, block)
        return cumulant_cache[block]

    # LHS: expand each column's Wick product, multiply columns, take moments
    terms: dict[frozenset, float] = {frozenset(): 1.0}
    for k in columns:
        col = frozenset(lbl for lbl in labels if lbl[1] == k)
        col_coeffs = wick_coefficients(col, cumulant)
        new_terms: dict[frozenset, float] = {}
        for acc_set, acc_c in terms.items():
            for S, c in col_coeffs.items():
                key = acc_set | S
                new_terms[key] = new_terms.get(key, 0.0) + acc_c * c
        terms = new_terms
    lhs = sum(c * moment(S) if S else c for S, c in terms.items())

    # RHS: partitions with no block constant in the column index
    rhs = 0.0
    if len(columns) > 1:
        for pi in enumerate_partitions(labels):
            if any(len({k for _, k in block}) < 2 for block in pi):
                continue
            prod = 1.0
            for block in pi:
                prod *= cumulant(block)
            rhs += prod
    return DiagramCheck(lhs=lhs, rhs=rhs)


# ---------------------------------------------------------------------------
# point families
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PointFamily:
    """Space-time observation points for the exclusion process.

    Times are in the clock of the unscaled (rate-1 stirring) process and
    sites are lattice site indices.  ``level`` tags the dyadic level for
    rescaled quantities.
    """

    lattice: TorusLattice
    times: tuple
    sites: tuple
    rho: float
    level: int | None = None

    def __post_init__(self):
        if len(self.times) != len(self.sites):
            raise DomainError("times and sites must align")
        if not 0.0 <= self.rho <= 1.0:
            raise DomainError(f"density must lie in [0,1], got {self.rho}")
        for s in self.sites:
            if not 0 <= s < self.lattice.n_sites:
                raise DomainError(f"site index {s} out of range")
        if not all(np.isfinite(self.times)):
            raise DomainError("times must be finite")

    def __len__(self):
        return len(self.times)

    def sorted_by_time(self) -> "PointFamily":
        """Time-sorted copy with exact ties broken by a logged perturbation."""
        order = sorted(range(len(self)), key=lambda i: (self.times[i], i))
        times = [float(self.times[i]) for i in order]
        sites = [self.sites[i] for i in order]
        for i in range(1, len(times)):
            if times[i] <= times[i - 1]:
                warnings.warn(
                    f"tied observation times at t={times[i]}; perturbing by {TIME_TIE_EPS}"
                )
                times[i] = times[i - 1] + TIME_TIE_EPS
        return PointFamily(self.lattice, tuple(times), tuple(sites), self.rho, self.level)


# ---------------------------------------------------------------------------
# exact moment formula
# ---------------------------------------------------------------------------


def _chain_probability(lattice: TorusLattice, n_blocks: int, pins: list[dict], gaps: list[float]) -> float:
    """Chained stirring-flow sum over block trajectories with pins.

    ``pins[i]`` maps block position (0..n_blocks-1) to a required site at
    level i; unpinned blocks are summed over all sites.  The flow semigroup
    (coincident coordinates glued) is the correct chain kernel: a block's
    trajectory is a flow line of the common graphical construction, and
    distinct blocks may share a line.
    """
    states = flow_states(lattice, n_blocks)
    v = np.ones(len(states))

    def apply_pins(vec, pin):
        if not pin:
            return vec
        mask = np.fromiter(
            (all(s[b] == site for b, site in pin.items()) for s in states),
            dtype=bool, count=len(states),
        )
        return vec * mask

    v = apply_pins(v, pins[0])
    for g, dt in enumerate(gaps):
        mat = exact_flow_transition(lattice, n_blocks, dt).matrix
        v = v @ mat
        v = apply_pins(v, pins[g + 1])
    return float(v.sum())


def ssep_moment(points: PointFamily) -> float:
    """Stationary moment ``E[prod_a occupancy(t_a, x_a)]`` by partition sum.

    Each partition of the points contributes a product of Bernoulli
    cumulants times the probability that one exclusion particle per block
    passes through that block's space-time points.
    """
    k = len(points)
    if k > MOMENT_POINT_GUARD:
        raise CapacityError(f"moment formula guarded at {MOMENT_POINT_GUARD} points")
    if k == 0:
        return 1.0
    pts = points.sorted_by_time()
    gaps = [pts.times[i + 1] - pts.times[i] for i in range(k - 1)]
    total = 0.0
    for pi in enumerate_partitions(range(k)):
        blocks = list(pi)
        weight = 1.0
        for block in blocks:
            weight *= bernoulli_cumulant(len(block), pts.rho)
        if weight == 0.0:
            continue
        pins = []
        for level in range(k):
            owner = next(b for b, block in enumerate(blocks) if level in block)
            pins.append({owner: pts.sites[level]})
        total += weight * _chain_probability(pts.lattice, len(blocks), pins, gaps)
    return total


# ---------------------------------------------------------------------------
# connected transition probabilities and contraction schemes
# ---------------------------------------------------------------------------


def connected_transition(lattice: TorusLattice, xs, ys, t: float) -> float:
    """Joint cumulant of the flow-coordinate arrival indicators.

    The moment of any sub-family of indicators is the sub-tuple transition
    probability of that many flow coordinates, so the cumulant follows by
    Moebius inversion.  On pairwise-distinct tuples this is the labelled
    exclusion process; coincident entries ride a common flow line.
    """
    xs = tuple(xs)
    ys = tuple(ys)
    if len(xs) != len(ys):
        raise DomainError("start and end tuples must have equal length")
    if len(xs) > CUMULANT_POINT_GUARD:
        raise CapacityError(f"connected transitions guarded at {CUMULANT_POINT_GUARD} particles")

    def moment(block: frozenset) -> float:
        sub = sorted(block)
        trans = exact_flow_transition(lattice, len(sub), t)
        return trans.prob(tuple(xs[i] for i in sub), tuple(ys[i] for i in sub))

    return moments_to_cumulants(moment, range(len(xs)))


@dataclass(frozen=True)
class ContractionScheme:
    """A partition of the points plus, per time gap, a grouping of straddlers.

    ``blocks`` are frozensets of point positions (in time order);
    ``straddlers[g]`` lists the block ids spanning gap g; ``gap_groups[g]``
    partitions those ids into bundles that travel the gap as one connected
    multi-particle transition.
    """

    blocks: tuple
    straddlers: tuple
    gap_groups: tuple

    @property
    def is_connected(self) -> bool:
        n = len(self.blocks)
        parent = list(range(n))

        def find(a):
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            return a

        for groups in self.gap_groups:
            for bundle in groups:
                for a, b in zip(bundle, bundle[1:]):
                    ra, rb = find(a), find(b)
                    if ra != rb:
                        parent[ra] = rb
        return len({find(i) for i in range(n)}) == 1


@lru_cache(maxsize=None)
def enumerate_contraction_schemes(k: int) -> tuple:
    """All contraction schemes on k time-ordered points (structure only)."""
    if k > CUMULANT_POINT_GUARD:
        raise CapacityError(f"scheme enumeration guarded at {CUMULANT_POINT_GUARD} points")
    schemes = []
    for pi in enumerate_partitions(range(k)):
        blocks = tuple(pi)
        straddlers = []
        for g in range(k - 1):
            span = tuple(
                b for b, block in enumerate(blocks)
                if min(block) <= g and max(block) >= g + 1
            )
            straddlers.append(span)
        straddlers = tuple(straddlers)
        group_choices = []
        for span in straddlers:
            parts = enumerate_partitions(span)
            group_choices.append([
                tuple(tuple(sorted(bundle)) for bundle in part) for part in parts
            ])
        for combo in itertools.product(*group_choices):
            schemes.append(ContractionScheme(blocks=blocks, straddlers=straddlers,
                                             gap_groups=tuple(combo)))
    return tuple(schemes)


def _bundle_kernel(lattice: TorusLattice, xs: tuple, ys: tuple, t: float,
                   cache: dict) -> float:
    key = (xs, ys, t)
    if key not in cache:
        if len(xs) == 1:
            cache[key] = exact_flow_transition(lattice, 1, t).prob(xs, ys)
        else:
            cache[key] = connected_transition(lattice, xs, ys, t)
    return cache[key]


def _scheme_value(points: PointFamily, scheme: ContractionScheme, cache: dict) -> float:
    """Chained connected-transition sum for one contraction scheme.

    Free block positions are summed over all sites; the flow semantics
    (shared lines when positions coincide) makes every gap kernel
    well-defined without distinctness constraints.
    """
    k = len(points)
    lattice = points.lattice
    blocks = scheme.blocks
    sites = points.sites
    gaps = [points.times[g + 1] - points.times[g] for g in range(k - 1)]

    # block pinned at a level iff it contains that level's point
    def pin(level, b):
        return sites[level] if level in blocks[b] else None

    # amplitudes over free values carried between consecutive gaps
    state = {(): 1.0}
    carried: tuple = ()
    for g in range(k - 1):
        span = scheme.straddlers[g]
        new_carried = tuple(
            b for b in scheme.straddlers[g + 1] if pin(g + 1, b) is None
        ) if g + 1 < k - 1 else ()
        new_state: dict = {}
        for assign, amp in state.items():
            held = dict(zip(carried, assign))
            start_vals = []
            for b in span:
                v = pin(g, b)
                if v is None:
                    v = held[b]
                start_vals.append(v)
            free_end = [b for b in span if pin(g + 1, b) is None]
            for free_vals in itertools.product(range(lattice.n_sites), repeat=len(free_end)):
                end_map = dict(zip(free_end, free_vals))
                end_vals = [pin(g + 1, b) if pin(g + 1, b) is not None else end_map[b]
                            for b in span]
                factor = 1.0
                for bundle in scheme.gap_groups[g]:
                    bx = tuple(start_vals[span.index(b)] for b in bundle)
                    by = tuple(end_vals[span.index(b)] for b in bundle)
                    factor *= _bundle_kernel(lattice, bx, by, gaps[g], cache)
                    if factor == 0.0:
                        break
                if factor == 0.0:
                    continue
                key = tuple(end_map[b] for b in new_carried)
                new_state[key] = new_state.get(key, 0.0) + amp * factor
        state = new_state
        carried = new_carried
    return sum(state.values())


def ssep_cumulant_connected(points: PointFamily) -> float:
    """Joint cumulant of occupancies via the connected contraction schemes."""
    k = len(points)
    if k > CUMULANT_POINT_GUARD:
        raise CapacityError(f"cumulant formula guarded at {CUMULANT_POINT_GUARD} points")
    if k == 1:
        return points.rho
    pts = points.sorted_by_time()
    cache: dict = {}
    total = 0.0
    for scheme in enumerate_contraction_schemes(k):
        if not scheme.is_connected:
            continue
        weight = 1.0
        for block in scheme.blocks:
            weight *= bernoulli_cumulant(len(block), pts.rho)
        if weight == 0.0:
            continue
        total += weight * _scheme_value(pts, scheme, cache)
    return total


# ---------------------------------------------------------------------------
# the product-of-martingales decomposition identity
# ---------------------------------------------------------------------------


def martingale_decomposition_check(lattice: TorusLattice, xs, ys, t: float) -> float:
    """Discrepancy of the splitting of a joint transition probability.

    The indicator of each particle's arrival splits into its single-particle
    probability plus a mean-zero remainder; expanding the product expresses
    the joint probability through sub-tuple transitions.  Exact marginal
    consistency of the labelled semigroups makes both sides agree.
    """
    xs = tuple(xs)
    ys = tuple(ys)
    n = len(xs)
    if n > CUMULANT_POINT_GUARD:
        raise CapacityError(f"decomposition check guarded at {CUMULANT_POINT_GUARD} particles")
    lhs = exact_labelled_transition(lattice, n, t).prob(xs, ys)
    singles = [exact_labelled_transition(lattice, 1, t).prob((xs[i],), (ys[i],))
               for i in range(n)]

    def joint(sub: tuple) -> float:
        if not sub:
            return 1.0
        trans = exact_labelled_transition(lattice, len(sub), t)
        return trans.prob(tuple(xs[i] for i in sub), tuple(ys[i] for i in sub))

    def centered_product(rest: tuple) -> float:
        # E prod_{i in rest} (1{arrival_i} - p_i), by inclusion-exclusion
        total = 0.0
        for r in range(len(rest) + 1):
            for kept in itertools.combinations(rest, r):
                dropped = [i for i in rest if i not in kept]
                term = joint(kept)
                for i in dropped:
                    term *= -singles[i]
                total += term
        return total

    rhs = 0.0
    idx = tuple(range(n))
    for r in range(n + 1):
        for J in itertools.combinations(idx, r):
            prod = 1.0
            for j in J:
                prod *= singles[j]
            rest = tuple(i for i in idx if i not in J)
            rhs += prod * centered_product(rest)
    return abs(lhs - rhs)


# ---------------------------------------------------------------------------
# cycle bound and Monte-Carlo estimation
# ---------------------------------------------------------------------------


@dataclass
class CycleBoundReport:
    lhs: float
    rhs: float

    @property
    def ratio(self) -> float:
        return abs(self.lhs) / self.rhs


def cycle_bound_rhs(points: PointFamily) -> float:
    """Sum over cyclic orderings of products of floored parabolic distances.

    Points are interpreted on the rescaled torus: macroscopic times and
    positions ``site / 2**N``, parabolic norm floored at ``2**-N``.  The
    (k-1)! cycles fix the first point and permute the rest.
    """
    if points.level is None:
        raise DomainError("cycle bound needs a dyadic level for the lattice floor")
    k = len(points)
    lattice = points.lattice
    floor = 2.0 ** (-points.level)
    d = lattice.d
    coords = [lattice.site_coords(s) for s in points.sites]

    def dist(i, j):
        dx = [c / lattice.side for c in lattice.min_image(coords[i], coords[j])]
        dt = points.times[i] - points.times[j]
        return max(parabolic_norm((dt, *dx)), floor)

    total = 0.0
    for perm in itertools.permutations(range(1, k)):
        cycle = (0,) + perm
        prod = 1.0
        for a, b in zip(cycle, cycle[1:] + cycle[:1]):
            prod *= dist(a, b) ** (-d / 2.0)
        total += prod
    return total


def cycle_bound(points: PointFamily, lhs: float) -> CycleBoundReport:
    """Ratio of a (rescaled-field) cumulant against the cycle-sum bound."""
    return CycleBoundReport(lhs=lhs, rhs=cycle_bound_rhs(points))


def rescaled_cumulant_factor(points: PointFamily) -> float:
    """Multiplier turning a raw occupancy cumulant into the rescaled-field one."""
    if points.level is None:
        raise DomainError("rescaling needs a dyadic level")
    return 2.0 ** (points.level * points.lattice.d * len(points) / 2.0)


def mc_joint_probes(lattice: TorusLattice, rho: float, probes, replicas: int, seed: int,
                    base_tag: int = 0) -> np.ndarray:
    """Occupancy samples at (time, site) probes over independent stationary runs.

    Returns a uint8 array of shape (replicas, n_probes); one stirring
    realization per replica serves every probe, so probe columns from the
    same replica are pathwise coupled.
    """
    probes = [(float(t), int(x)) for t, x in probes]
    if not probes:
        raise DomainError("at least one probe is required")
    horizon = max(t for t, _ in probes)
    unique_times = sorted({t for t, _ in probes})
    time_rank = {t: i for i, t in enumerate(unique_times)}
    out = np.empty((replicas, len(probes)), dtype=np.uint8)
    for r in range(replicas):
        stream = sample_event_stream(lattice, 1.0, horizon, seed, stream_tag=base_tag * replicas + r)
        init = OccupancyState.bernoulli(lattice, rho, seed, tag=base_tag * replicas + r)
        snaps = replay_snapshots(init.values, stream, unique_times)
        for c, (t, x) in enumerate(probes):
            out[r, c] = snaps[time_rank[t], x]
    return out


@dataclass
class McCumulant:
    estimate: float
    stderr: float
    ci_low: float
    ci_high: float
    replicas: int


def plugin_cumulant(samples: np.ndarray) -> float:
    """Plug-in joint cumulant of the columns of a (replicas, k) sample array."""
    k = samples.shape[1]
    means: dict[frozenset, float] = {}
    for r in range(1, k + 1):
        for block in map(frozenset, itertools.combinations(range(k), r)):
            cols = sorted(block)
            means[block] = float(samples[:, cols].prod(axis=1).mean())
    return moments_to_cumulants(lambda b: means[b], range(k))


def mc_cumulant_estimate(points: PointFamily, replicas: int, seed: int,
                         bootstrap: int = 200, samples: np.ndarray | None = None) -> McCumulant:
    """Monte-Carlo joint cumulant with a bootstrap confidence interval.

    Independent stationary trajectories are simulated (or passed in via
    ``samples``), plug-in joint moments feed the Moebius inversion, and the
    CI comes from resampling replicas.  The plug-in bias is O(1/replicas).
    """
    if replicas < 2:
        raise DomainError("at least two replicas are required")
    k = len(points)
    if k >= 3 and replicas < 100:
        warnings.warn("replica count is small for a cumulant of order >= 3; "
                      "the estimator variance will dominate")
    if samples is None:
        probes = list(zip(points.times, points.sites))
        samples = mc_joint_probes(points.lattice, points.rho, probes, replicas, seed)
    est = plugin_cumulant(samples)
    rng = derive_rng(seed, "bootstrap")
    boots = np.empty(bootstrap)
    n = samples.shape[0]
    for b in range(bootstrap):
        idx = rng.integers(0, n, size=n)
        boots[b] = plugin_cumulant(samples[idx])
    stderr = float(boots.std(ddof=1))
    lo, hi = np.quantile(boots, [0.025, 0.975])
    return McCumulant(estimate=est, stderr=stderr, ci_low=float(lo), ci_high=float(hi),
                      replicas=int(n))
