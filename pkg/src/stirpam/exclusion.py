"""Stirring construction of the symmetric simple exclusion process.

Every edge of the torus carries an independent Poisson clock; each ring
swaps the two endpoint values.  One sampled event stream drives occupancy
dynamics, labelled multi-particle dynamics, and every derived observable,
so distinct quantities computed from the same stream are coupled pathwise.

Exact finite-state semigroups (dense/sparse matrix exponentials) are
provided for small systems and serve as ground-truth oracles elsewhere.
"""

from __future__ import annotations

import io
import itertools
import math
import struct
import warnings
from dataclasses import dataclass, replace
from functools import lru_cache

import numpy as np
import scipy.linalg
import scipy.sparse
import scipy.sparse.linalg

from .errors import CapacityError, DomainError
from .lattice import TorusLattice, edge_endpoints
from .seeding import derive_rng

#: hard guard on the labelled state-space size for dense semigroups
LABELLED_STATE_GUARD = 20_000
#: hard guard on the full occupancy state space (2**n_sites states)
FULL_STATE_GUARD = 2 ** 16


# ---------------------------------------------------------------------------
# event streams
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EventStream:
    """Time-sorted Poisson swap events ``(time, edge)`` on ``(0, horizon]``."""

    lattice: TorusLattice
    rate: float
    horizon: float
    times: np.ndarray
    edges: np.ndarray
    seed: int

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64)
        e = np.asarray(self.edges, dtype=np.uint32)
        if t.shape != e.shape:
            raise DomainError("times and edges must have equal length")
        if t.size and (t[0] <= 0.0 or t[-1] > self.horizon or np.any(np.diff(t) <= 0.0)):
            raise DomainError("event times must be strictly increasing within (0, horizon]")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "edges", e)

    def __len__(self):
        return self.times.size

    def count_until(self, t: float) -> int:
        return int(np.searchsorted(self.times, t, side="right"))


def sample_event_stream(lattice: TorusLattice, rate: float, horizon: float, seed: int,
                        stream_tag: int = 0) -> EventStream:
    """Independent Poisson(rate) clock per edge, merged and time-sorted.

    The merged stream is itself Poisson with intensity ``rate * n_edges``;
    events are placed uniformly in time with uniformly random edges, which
    realizes exactly the per-edge construction.  Deterministic in
    ``(seed, stream_tag, lattice, rate, horizon)``.
    """
    if rate <= 0:
        raise DomainError(f"rate must be positive, got {rate}")
    if horizon < 0:
        raise DomainError(f"horizon must be nonnegative, got {horizon}")
    rng = derive_rng(seed, "events", stream_tag)
    n = int(rng.poisson(rate * horizon * lattice.n_edges)) if horizon > 0 else 0
    times = np.sort(rng.uniform(0.0, horizon, size=n))
    edges = rng.integers(0, lattice.n_edges, size=n, dtype=np.uint32)
    times = _break_ties(times)
    return EventStream(lattice=lattice, rate=rate, horizon=horizon,
                       times=times, edges=edges, seed=seed)


def _break_ties(times: np.ndarray) -> np.ndarray:
    """Perturb exactly-equal float times by one ulp (probability-zero event)."""
    if times.size < 2:
        return times
    for _ in range(64):
        dup = np.flatnonzero(np.diff(times) <= 0.0)
        if dup.size == 0:
            return times
        warnings.warn("coincident Poisson event times; perturbing by one ulp")
        times = times.copy()
        times[dup + 1] = np.nextafter(times[dup], np.inf)
    raise DomainError("could not separate coincident event times")


def extend_stream(stream: EventStream, new_horizon: float, window_tag: int = 1) -> EventStream:
    """Append events on ``(horizon, new_horizon]``; existing events are kept."""
    if new_horizon <= stream.horizon:
        return stream
    rng = derive_rng(stream.seed, "events-extend", window_tag, len(stream))
    extra_span = new_horizon - stream.horizon
    n = int(rng.poisson(stream.rate * extra_span * stream.lattice.n_edges))
    times = np.sort(rng.uniform(stream.horizon, new_horizon, size=n))
    edges = rng.integers(0, stream.lattice.n_edges, size=n, dtype=np.uint32)
    all_times = _break_ties(np.concatenate([stream.times, times]))
    return replace(stream, horizon=new_horizon,
                   times=all_times, edges=np.concatenate([stream.edges, edges]))


_MAGIC = b"XEVS"
_HEADER = struct.Struct("<4sHHiddQ")  # magic, version, d, N, rate, horizon, seed
_RECORD_DTYPE = np.dtype([("t", "<f8"), ("e", "<u4")])


def save_event_stream(stream: EventStream, path) -> None:
    """Versioned little-endian binary record; replayable bit-exactly."""
    if stream.lattice.level is None:
        raise DomainError("only dyadic lattices are serializable")
    header = _HEADER.pack(_MAGIC, 1, stream.lattice.d, stream.lattice.level,
                          stream.rate, stream.horizon, stream.seed)
    rec = np.empty(len(stream), dtype=_RECORD_DTYPE)
    rec["t"] = stream.times
    rec["e"] = stream.edges
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(rec.tobytes())


def load_event_stream(path) -> EventStream:
    with open(path, "rb") as fh:
        raw = fh.read()
    magic, version, d, level, rate, horizon, seed = _HEADER.unpack_from(raw, 0)
    if magic != _MAGIC:
        raise DomainError(f"bad magic {magic!r} in event-stream file")
    if version != 1:
        raise DomainError(f"unsupported event-stream version {version}")
    rec = np.frombuffer(raw[_HEADER.size:], dtype=_RECORD_DTYPE)
    lattice = TorusLattice.dyadic(d, level)
    return EventStream(lattice=lattice, rate=rate, horizon=horizon,
                       times=rec["t"].copy(), edges=rec["e"].copy(), seed=seed)


# ---------------------------------------------------------------------------
# states and pathwise evolution
# ---------------------------------------------------------------------------


@dataclass
class OccupancyState:
    """One bit per site, indexed like the lattice."""

    lattice: TorusLattice
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.uint8).reshape(-1)
        if v.size != self.lattice.n_sites:
            raise DomainError("occupancy length does not match the lattice")
        if np.any(v > 1):
            raise DomainError("occupancy values must be 0 or 1")
        self.values = v

    @classmethod
    def bernoulli(cls, lattice: TorusLattice, rho: float, seed: int, tag: int = 0):
        if not 0.0 <= rho <= 1.0:
            raise DomainError(f"density must lie in [0,1], got {rho}")
        rng = derive_rng(seed, "bernoulli-init", tag)
        vals = (rng.random(lattice.n_sites) < rho).astype(np.uint8)
        return cls(lattice=lattice, values=vals)

    @property
    def particle_count(self) -> int:
        return int(self.values.sum())


@dataclass
class LabelledConfiguration:
    """Finitely many distinguishable particles at pairwise distinct sites."""

    lattice: TorusLattice
    labels: tuple
    sites: tuple  # site indices, aligned with labels

    def __post_init__(self):
        if len(self.labels) != len(self.sites):
            raise DomainError("labels and sites must align")
        if len(set(self.sites)) != len(self.sites):
            raise DomainError("labelled particles must occupy distinct sites")
        for s in self.sites:
            if not 0 <= s < self.lattice.n_sites:
                raise DomainError(f"site index {s} out of range")

    def position(self, label):
        return self.sites[self.labels.index(label)]

    def indicator(self) -> OccupancyState:
        vals = np.zeros(self.lattice.n_sites, dtype=np.uint8)
        vals[list(self.sites)] = 1
        return OccupancyState(lattice=self.lattice, values=vals)


def _event_endpoint_lists(stream: EventStream, upto: int):
    ea, eb = edge_endpoints(stream.lattice)
    edges = stream.edges[:upto]
    return ea[edges].tolist(), eb[edges].tolist()


def evolve_occupancy(initial: OccupancyState, stream: EventStream, t: float) -> OccupancyState:
    """Apply every swap event with time <= t, in order."""
    if initial.lattice != stream.lattice:
        raise DomainError("occupancy state and event stream live on different lattices")
    if not 0.0 <= t <= stream.horizon:
        raise DomainError(f"query time {t} outside [0, {stream.horizon}]")
    upto = stream.count_until(t)
    ia, ib = _event_endpoint_lists(stream, upto)
    occ = initial.values.tolist()
    for i, j in zip(ia, ib):
        occ[i], occ[j] = occ[j], occ[i]
    return OccupancyState(lattice=initial.lattice, values=np.array(occ, dtype=np.uint8))


def evolve_labelled(config: LabelledConfiguration, stream: EventStream, t: float) -> LabelledConfiguration:
    """Transport labels along the same stirring events that move occupancies."""
    if config.lattice != stream.lattice:
        raise DomainError("configuration and event stream live on different lattices")
    if not 0.0 <= t <= stream.horizon:
        raise DomainError(f"query time {t} outside [0, {stream.horizon}]")
    upto = stream.count_until(t)
    ia, ib = _event_endpoint_lists(stream, upto)
    at = {s: k for k, s in enumerate(config.sites)}
    pos = list(config.sites)
    for i, j in zip(ia, ib):
        ki = at.pop(i, None)
        kj = at.pop(j, None)
        if ki is not None:
            pos[ki] = j
            at[j] = ki
        if kj is not None:
            pos[kj] = i
            at[i] = kj
    return LabelledConfiguration(lattice=config.lattice, labels=config.labels, sites=tuple(pos))


def replay_snapshots(initial_values: np.ndarray, stream: EventStream, probe_times) -> np.ndarray:
    """Occupancy snapshots at sorted probe times, shaped (n_probes, n_sites)."""
    probe_times = np.asarray(probe_times, dtype=float)
    if probe_times.size and (probe_times.min() < 0 or probe_times.max() > stream.horizon):
        raise DomainError("probe times outside the stream horizon")
    cuts = np.searchsorted(stream.times, probe_times, side="right")
    ia, ib = _event_endpoint_lists(stream, int(cuts.max()) if cuts.size else 0)
    occ = np.asarray(initial_values, dtype=np.uint8).tolist()
    out = np.empty((probe_times.size, len(occ)), dtype=np.uint8)
    done = 0
    order = np.argsort(probe_times, kind="stable")
    for probe_rank in order:
        cut = int(cuts[probe_rank])
        for k in range(done, cut):
            i = ia[k]
            j = ib[k]
            occ[i], occ[j] = occ[j], occ[i]
        done = max(done, cut)
        out[probe_rank] = occ
    return out


# ---------------------------------------------------------------------------
# frozen trajectories (environment for walks and the lattice PDE solver)
# ---------------------------------------------------------------------------


@dataclass
class ExclusionTrajectory:
    """Initial occupancy plus an event stream; queryable at any time.

    ``rate`` on the stream sets the clock: a stream at rate ``2**(2N)``
    realizes the diffusively rescaled process directly in macroscopic time.
    """

    initial: OccupancyState
    stream: EventStream
    density: float

    _checkpoint_stride: int = 0
    _checkpoints: np.ndarray | None = None

    def __post_init__(self):
        if self.initial.lattice != self.stream.lattice:
            raise DomainError("initial state and stream lattices differ")

    @classmethod
    def stationary(cls, lattice: TorusLattice, rho: float, rate: float, horizon: float, seed: int):
        """Bernoulli(rho) start evolved by a fresh stream (stationary law)."""
        stream = sample_event_stream(lattice, rate, horizon, seed)
        init = OccupancyState.bernoulli(lattice, rho, seed)
        return cls(initial=init, stream=stream, density=rho)

    @property
    def lattice(self) -> TorusLattice:
        return self.initial.lattice

    @property
    def horizon(self) -> float:
        return self.stream.horizon

    def _ensure_checkpoints(self):
        if self._checkpoints is not None:
            return
        n = len(self.stream)
        stride = max(1, int(math.sqrt(n + 1)))
        ia, ib = _event_endpoint_lists(self.stream, n)
        occ = self.initial.values.tolist()
        checkpoints = [list(occ)]
        for k in range(n):
            i = ia[k]
            j = ib[k]
            occ[i], occ[j] = occ[j], occ[i]
            if (k + 1) % stride == 0:
                checkpoints.append(list(occ))
        self._checkpoint_stride = stride
        self._checkpoints = np.array(checkpoints, dtype=np.uint8)

    def occupancy_at(self, t: float) -> np.ndarray:
        """Occupancy array at time t (replayed from the nearest checkpoint)."""
        if not 0.0 <= t <= self.horizon:
            raise DomainError(f"query time {t} outside [0, {self.horizon}]")
        self._ensure_checkpoints()
        cut = self.stream.count_until(t)
        base = min(cut // self._checkpoint_stride, len(self._checkpoints) - 1)
        occ = self._checkpoints[base].tolist()
        ia, ib = _event_endpoint_lists(self.stream, cut)
        for k in range(base * self._checkpoint_stride, cut):
            i = ia[k]
            j = ib[k]
            occ[i], occ[j] = occ[j], occ[i]
        return np.array(occ, dtype=np.uint8)

    def snapshots(self, probe_times) -> np.ndarray:
        return replay_snapshots(self.initial.values, self.stream, probe_times)

    def segments(self, t0: float, t1: float):
        """Yield ``(a, b, occupancy)`` pieces with constant occupancy on [a, b)."""
        if not 0.0 <= t0 <= t1 <= self.horizon:
            raise DomainError("segment window outside the trajectory horizon")
        occ = self.occupancy_at(t0)
        lo = self.stream.count_until(t0)
        hi = self.stream.count_until(t1)
        ea, eb = edge_endpoints(self.lattice)
        cur = t0
        for k in range(lo, hi):
            nxt = self.stream.times[k]
            if nxt > cur:
                yield cur, nxt, occ
            occ = occ.copy()
            e = self.stream.edges[k]
            i, j = ea[e], eb[e]
            occ[i], occ[j] = occ[j], occ[i]
            cur = nxt
        if t1 > cur:
            yield cur, t1, occ

    def occupation_integrals(self, memory_budget_bytes: int = 1 << 29):
        """Breakpoints, per-site cumulative occupation, and piece snapshots.

        Returns ``(tau, cum, pieces)`` with ``tau`` of length K+2 spanning
        [0, horizon], ``cum[k, x] = int_0^tau_k occupancy_x``, and
        ``pieces[k]`` the occupancy on ``[tau_k, tau_{k+1})``.  Enables O(1)
        evaluation of integrated occupancy along any space-time path.
        """
        n = len(self.stream)
        V = self.lattice.n_sites
        need = (n + 2) * V * 9
        if need > memory_budget_bytes:
            raise CapacityError(
                f"occupation table needs ~{need} bytes > budget {memory_budget_bytes}; "
                "shorten the horizon or raise the budget"
            )
        tau = np.concatenate([[0.0], self.stream.times, [self.horizon]])
        pieces = np.empty((n + 1, V), dtype=np.uint8)
        ia, ib = _event_endpoint_lists(self.stream, n)
        occ = self.initial.values.tolist()
        pieces[0] = occ
        for k in range(n):
            i = ia[k]
            j = ib[k]
            occ[i], occ[j] = occ[j], occ[i]
            pieces[k + 1] = occ
        dt = np.diff(tau)[:, None]
        cum = np.zeros((n + 2, V))
        np.cumsum(pieces * dt, axis=0, out=cum[1:])
        return tau, cum, pieces


def occupation_lookup(tau: np.ndarray, cum: np.ndarray, pieces: np.ndarray,
                      sites: np.ndarray, r: np.ndarray) -> np.ndarray:
    """Vectorized ``F_x(r) = int_0^r occupancy_x(s) ds`` for site/time arrays."""
    idx = np.clip(np.searchsorted(tau, r, side="right") - 1, 0, len(pieces) - 1)
    base = cum[idx, sites]
    return base + (r - tau[idx]) * pieces[idx, sites]


# ---------------------------------------------------------------------------
# exact finite-state semigroups
# ---------------------------------------------------------------------------


class LabelledTransition:
    """Dense transition matrix of n labelled exclusion particles at time t."""

    def __init__(self, lattice: TorusLattice, n_particles: int, t: float,
                 states: tuple, matrix: np.ndarray):
        self.lattice = lattice
        self.n_particles = n_particles
        self.t = t
        self.states = states
        self.matrix = matrix
        self._index = {s: k for k, s in enumerate(states)}

    def index(self, state) -> int:
        return self._index[tuple(state)]

    def prob(self, x, y) -> float:
        return float(self.matrix[self.index(x), self.index(y)])


@lru_cache(maxsize=None)
def labelled_states(lattice: TorusLattice, n_particles: int) -> tuple:
    """Ordered tuples of distinct site indices (the labelled state space)."""
    count = 1
    for k in range(n_particles):
        count *= lattice.n_sites - k
    if count > LABELLED_STATE_GUARD:
        raise CapacityError(
            f"labelled state space has {count} states > guard {LABELLED_STATE_GUARD}"
        )
    return tuple(itertools.permutations(range(lattice.n_sites), n_particles))


@lru_cache(maxsize=None)
def _labelled_generator(lattice: TorusLattice, n_particles: int):
    states = labelled_states(lattice, n_particles)
    index = {s: k for k, s in enumerate(states)}
    ea, eb = edge_endpoints(lattice)
    rows, cols = [], []
    for k, state in enumerate(states):
        occupied = {s: i for i, s in enumerate(state)}
        for e in range(lattice.n_edges):
            a, b = int(ea[e]), int(eb[e])
            ia = occupied.get(a)
            ib = occupied.get(b)
            if ia is None and ib is None:
                continue
            new = list(state)
            if ia is not None:
                new[ia] = b
            if ib is not None:
                new[ib] = a
            rows.append(k)
            cols.append(index[tuple(new)])
    data = np.ones(len(rows))
    n = len(states)
    q = scipy.sparse.coo_matrix((data, (rows, cols)), shape=(n, n)).tocsr()
    q = q - scipy.sparse.diags(np.asarray(q.sum(axis=1)).ravel())
    return states, q


@lru_cache(maxsize=None)
def exact_labelled_transition(lattice: TorusLattice, n_particles: int, t: float) -> LabelledTransition:
    """Matrix exponential of the labelled exclusion generator at time t.

    Rows sum to 1 and the matrix is symmetric (each swap is an involution,
    so the generator is symmetric and the uniform measure is reversible).
    """
    if t < 0:
        raise DomainError(f"time must be nonnegative, got {t}")
    states, q = _labelled_generator(lattice, n_particles)
    mat = scipy.linalg.expm(q.toarray() * t)
    return LabelledTransition(lattice, n_particles, t, states, mat)


@lru_cache(maxsize=None)
def flow_states(lattice: TorusLattice, n_coords: int) -> tuple:
    """All site tuples (coincidences allowed): the stirring-flow state space.

    The graphical construction is a stochastic flow, so coordinates with
    coincident positions ride the same flow line and stay glued; distinct
    tuples evolve as labelled exclusion particles.
    """
    count = lattice.n_sites ** n_coords
    if count > LABELLED_STATE_GUARD:
        raise CapacityError(
            f"flow state space has {count} states > guard {LABELLED_STATE_GUARD}"
        )
    return tuple(itertools.product(range(lattice.n_sites), repeat=n_coords))


@lru_cache(maxsize=None)
def _flow_generator(lattice: TorusLattice, n_coords: int):
    states = flow_states(lattice, n_coords)
    index = {s: k for k, s in enumerate(states)}
    ea, eb = edge_endpoints(lattice)
    rows, cols = [], []
    for k, state in enumerate(states):
        for e in range(lattice.n_edges):
            a, b = int(ea[e]), int(eb[e])
            new = tuple(b if s == a else (a if s == b else s) for s in state)
            if new != state:
                rows.append(k)
                cols.append(index[new])
    q = scipy.sparse.coo_matrix((np.ones(len(rows)), (rows, cols)),
                                shape=(len(states), len(states))).tocsr()
    q = q - scipy.sparse.diags(np.asarray(q.sum(axis=1)).ravel())
    return states, q


@lru_cache(maxsize=None)
def exact_flow_transition(lattice: TorusLattice, n_coords: int, t: float) -> LabelledTransition:
    """Transition matrix of n stirring-flow coordinates (glued when coincident).

    Restricted to pairwise-distinct tuples this is exactly the labelled
    exclusion semigroup; it extends it across coincidences, which is what
    the chained moment/cumulant formulas sum over.
    """
    if t < 0:
        raise DomainError(f"time must be nonnegative, got {t}")
    states, q = _flow_generator(lattice, n_coords)
    mat = scipy.linalg.expm(q.toarray() * t)
    return LabelledTransition(lattice, n_coords, t, states, mat)


class FullGenerator:
    """Exclusion semigroup on all ``2**n_sites`` occupancy states (oracle)."""

    def __init__(self, lattice: TorusLattice):
        n_states = 2 ** lattice.n_sites
        if n_states > FULL_STATE_GUARD:
            raise CapacityError(
                f"full state space has {n_states} states > guard {FULL_STATE_GUARD}"
            )
        self.lattice = lattice
        self.n_states = n_states
        ea, eb = edge_endpoints(lattice)
        states = np.arange(n_states, dtype=np.int64)
        rows, cols = [], []
        for e in range(lattice.n_edges):
            bit_a = np.int64(1) << np.int64(ea[e])
            bit_b = np.int64(1) << np.int64(eb[e])
            occ_a = (states & bit_a) != 0
            occ_b = (states & bit_b) != 0
            moved = np.flatnonzero(occ_a != occ_b)
            rows.append(moved)
            cols.append(states[moved] ^ (bit_a | bit_b))
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        q = scipy.sparse.coo_matrix(
            (np.ones(rows.size), (rows, cols)), shape=(n_states, n_states)
        ).tocsr()
        self.generator = q - scipy.sparse.diags(np.asarray(q.sum(axis=1)).ravel())
        self._occ_bits = np.stack(
            [((states >> np.int64(x)) & 1).astype(float) for x in range(lattice.n_sites)]
        )
        # site_index x bit order: state bit x corresponds to site index x
        self._dense = None

    def occupancy_vector(self, site_index: int) -> np.ndarray:
        """Per-state occupancy of one site (0/1 vector over states)."""
        return self._occ_bits[site_index]

    def product_measure(self, rho: float) -> np.ndarray:
        counts = self._occ_bits.sum(axis=0)
        v = self.lattice.n_sites
        return rho ** counts * (1.0 - rho) ** (v - counts)

    def propagate(self, v: np.ndarray, t: float) -> np.ndarray:
        """v P_t (the generator is symmetric, so left/right actions agree)."""
        if t == 0.0:
            return v.copy()
        if self.n_states <= 4096:
            if self._dense is None:
                self._dense = self.generator.toarray()
            return v @ scipy.linalg.expm(self._dense * t)
        return scipy.sparse.linalg.expm_multiply(self.generator.T * t, v)

    def moment(self, rho: float, points) -> float:
        """Exact stationary moment E[prod_a occupancy(t_a, x_a)].

        ``points`` is a sequence of (time, site_index); ties in time are
        allowed here (the pointwise product is taken within a time slice).
        """
        pts = sorted(((float(t), int(x)) for t, x in points), key=lambda p: p[0])
        v = self.product_measure(rho)
        prev = pts[0][0]
        for t, x in pts:
            if t > prev:
                v = self.propagate(v, t - prev)
                prev = t
            v = v * self.occupancy_vector(x)
        return float(v.sum())


# ---------------------------------------------------------------------------
# fluctuation field
# ---------------------------------------------------------------------------


def fluctuation_field(trajectory: ExclusionTrajectory, f, level: int, t: float) -> float:
    """Centered, diffusively rescaled pairing of the occupancy field with f.

    ``2**(-Nd) sum_x f(x / 2**N) 2**(Nd/2) (occupancy(t * 2**(2N), x) - rho)``
    where the occupancy is read from the trajectory in its own clock: a
    stream at rate ``r`` realizes microscopic time ``r * s`` at stream
    time ``s``.
    """
    lattice = trajectory.lattice
    if lattice.side != 2 ** level:
        raise DomainError("trajectory lattice does not match the requested level")
    d = lattice.d
    micro_t = t * 4.0 ** level
    query = micro_t / trajectory.stream.rate
    occ = trajectory.occupancy_at(query).astype(float)
    coords = np.array([lattice.site_coords(i) for i in range(lattice.n_sites)], dtype=float)
    fx = np.array([f(tuple(c / 2.0 ** level)) for c in coords])
    centered = occ - trajectory.density
    return float(2.0 ** (-level * d) * 2.0 ** (level * d / 2.0) * (fx * centered).sum())
