import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stirpam.errors import CapacityError, DomainError
from stirpam.lattice import TorusLattice
from stirpam import exclusion as ex
from stirpam.kernels import heat_kernel
from stirpam.seeding import derive_rng


@pytest.fixture
def ring4():
    return TorusLattice.dyadic(1, 2)


# --- event streams -------------------------------------------------------


def test_empty_horizon(ring4):
    s = ex.sample_event_stream(ring4, 1.0, 0.0, seed=0)
    assert len(s) == 0


def test_stream_determinism(ring4):
    a = ex.sample_event_stream(ring4, 2.0, 4.0, seed=5)
    b = ex.sample_event_stream(ring4, 2.0, 4.0, seed=5)
    assert np.array_equal(a.times, b.times)
    assert np.array_equal(a.edges, b.edges)
    c = ex.sample_event_stream(ring4, 2.0, 4.0, seed=6)
    assert not np.array_equal(a.times, c.times)


def test_poisson_mean_per_edge():
    # mean event count over one edge's worth of clock: rate * T
    lat = TorusLattice.with_side(1, 3)  # 3 edges
    horizon, rate, reps = 10.0, 1.0, 3000
    counts = np.array([
        len(ex.sample_event_stream(lat, rate, horizon, seed=k)) for k in range(reps)
    ]) / lat.n_edges
    mean = counts.mean()
    sigma = math.sqrt(rate * horizon / lat.n_edges / reps)
    assert abs(mean - rate * horizon) < 3 * sigma


def test_stream_extension_keeps_prefix(ring4):
    s = ex.sample_event_stream(ring4, 1.0, 2.0, seed=3)
    s2 = ex.extend_stream(s, 5.0)
    assert s2.horizon == 5.0
    assert np.array_equal(s2.times[: len(s)], s.times)
    assert np.all(np.diff(s2.times) > 0)


def test_serialization_roundtrip(tmp_path, ring4):
    s = ex.sample_event_stream(ring4, 3.0, 2.0, seed=17)
    path = tmp_path / "s.events"
    ex.save_event_stream(s, path)
    s2 = ex.load_event_stream(path)
    assert np.array_equal(s.times, s2.times)
    assert np.array_equal(s.edges, s2.edges)
    assert (s2.rate, s2.horizon, s2.seed) == (s.rate, s.horizon, s.seed)
    assert s2.lattice == s.lattice
    # bit-exact file reproducibility
    path2 = tmp_path / "s2.events"
    ex.save_event_stream(s2, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_serialization_wire_format(tmp_path, ring4):
    s = ex.sample_event_stream(ring4, 1.0, 1.0, seed=1)
    path = tmp_path / "s.events"
    ex.save_event_stream(s, path)
    raw = path.read_bytes()
    assert raw[:4] == b"XEVS"
    header_size = 4 + 2 + 2 + 4 + 8 + 8 + 8
    assert len(raw) == header_size + 12 * len(s)  # (f64, u32) pairs


# --- pathwise evolution --------------------------------------------------


def test_no_events_identity(ring4):
    s = ex.sample_event_stream(ring4, 1.0, 2.0, seed=1)
    init = ex.OccupancyState(ring4, np.array([1, 0, 1, 0], dtype=np.uint8))
    t = s.times[0] / 2 if len(s) else 1.0
    out = ex.evolve_occupancy(init, s, t)
    assert np.array_equal(out.values, init.values)


def test_single_swap(ring4):
    stream = ex.EventStream(ring4, rate=1.0, horizon=1.0,
                            times=np.array([0.5]), edges=np.array([0], dtype=np.uint32), seed=0)
    init = ex.OccupancyState(ring4, np.array([1, 0, 0, 0], dtype=np.uint8))
    out = ex.evolve_occupancy(init, stream, 1.0)
    assert list(out.values) == [0, 1, 0, 0]


@given(st.integers(0, 10 ** 6), st.floats(0.1, 4.0))
@settings(max_examples=25, deadline=None)
def test_conservation(seed, horizon):
    lat = TorusLattice.dyadic(1, 3)
    s = ex.sample_event_stream(lat, 1.0, horizon, seed=seed)
    init = ex.OccupancyState.bernoulli(lat, 0.5, seed=seed)
    out = ex.evolve_occupancy(init, s, horizon)
    assert out.particle_count == init.particle_count


def test_adjacent_labels_swap(ring4):
    stream = ex.EventStream(ring4, rate=1.0, horizon=1.0,
                            times=np.array([0.3]), edges=np.array([1], dtype=np.uint32), seed=0)
    config = ex.LabelledConfiguration(ring4, labels=("a", "b"), sites=(1, 2))
    out = ex.evolve_labelled(config, stream, 1.0)
    assert out.position("a") == 2 and out.position("b") == 1


@given(st.integers(0, 10 ** 6))
@settings(max_examples=25, deadline=None)
def test_coupling_consistency(seed):
    # indicator of labelled evolution == occupancy evolution, same stream
    lat = TorusLattice.dyadic(1, 3)
    s = ex.sample_event_stream(lat, 1.0, 2.5, seed=seed)
    config = ex.LabelledConfiguration(lat, labels=(0, 1, 2), sites=(0, 3, 5))
    for t in (0.7, 1.9, 2.5):
        lab = ex.evolve_labelled(config, s, t)
        occ = ex.evolve_occupancy(config.indicator(), s, t)
        assert np.array_equal(lab.indicator().values, occ.values)


def test_duplicate_labelled_sites_rejected(ring4):
    with pytest.raises(DomainError):
        ex.LabelledConfiguration(ring4, labels=(0, 1), sites=(2, 2))


def test_single_particle_law_matches_kernel():
    # empirical endpoint law vs spectral kernel, Monte-Carlo interval
    lat = TorusLattice.dyadic(1, 2)
    t, reps = 0.8, 4000
    counts = np.zeros(lat.n_sites)
    for seed in range(reps):
        s = ex.sample_event_stream(lat, 1.0, t, seed=seed)
        config = ex.LabelledConfiguration(lat, labels=("w",), sites=(0,))
        counts[ex.evolve_labelled(config, s, t).position("w")] += 1
    emp = counts / reps
    kernel = heat_kernel(lat, 2.0, t)
    for x in range(lat.n_sites):
        sigma = math.sqrt(kernel[x] * (1 - kernel[x]) / reps)
        assert abs(emp[x] - kernel[x]) < 4 * sigma


# --- exact semigroups ----------------------------------------------------


def test_labelled_transition_identity(ring4):
    tr = ex.exact_labelled_transition(ring4, 2, 0.0)
    assert np.allclose(tr.matrix, np.eye(len(tr.states)))


def test_one_particle_ring_spectral(ring4):
    t = 0.45
    tr = ex.exact_labelled_transition(ring4, 1, t)
    expected = (1 + 2 * math.exp(-2 * t) + math.exp(-4 * t)) / 4
    assert tr.prob((0,), (0,)) == pytest.approx(expected, abs=1e-12)


def test_rows_sum_to_one_and_symmetric(ring4):
    tr = ex.exact_labelled_transition(ring4, 2, 0.6)
    assert np.max(np.abs(tr.matrix.sum(axis=1) - 1.0)) < 1e-12
    assert np.max(np.abs(tr.matrix - tr.matrix.T)) < 1e-12


def test_exchangeability(ring4):
    tr = ex.exact_labelled_transition(ring4, 2, 0.3)
    for x in ((0, 2), (1, 3)):
        for y in ((0, 1), (2, 3), (3, 1)):
            assert tr.prob(x, y) == pytest.approx(tr.prob(x[::-1], y[::-1]), abs=1e-14)


def test_labelled_capacity_guard():
    lat = TorusLattice.dyadic(2, 3)  # 64 sites: 64*63*62*61 >> guard
    with pytest.raises(CapacityError):
        ex.exact_labelled_transition(lat, 4, 0.1)


def test_flow_extends_labelled(ring4):
    # on distinct tuples, the flow semigroup is the labelled one
    t = 0.37
    lab = ex.exact_labelled_transition(ring4, 2, t)
    flow = ex.exact_flow_transition(ring4, 2, t)
    for x in lab.states:
        for y in lab.states:
            assert flow.prob(x, y) == pytest.approx(lab.prob(x, y), abs=1e-12)
    # coincident coordinates stay glued
    assert flow.prob((1, 1), (2, 2)) == pytest.approx(
        ex.exact_flow_transition(ring4, 1, t).prob((1,), (2,)), abs=1e-12)
    assert flow.prob((1, 1), (2, 3)) == 0.0


def test_full_generator_stationarity_and_reversibility(ring4):
    gen = ex.FullGenerator(ring4)
    q = gen.generator.toarray()
    for rho in (0.3, 0.5):
        mu = gen.product_measure(rho)
        assert np.max(np.abs(mu @ q)) < 1e-12
        # detailed balance entrywise
        assert np.max(np.abs(mu[:, None] * q - (mu[:, None] * q).T)) < 1e-12


def test_full_generator_capacity():
    with pytest.raises(CapacityError):
        ex.FullGenerator(TorusLattice.with_side(1, 17))


def test_self_duality_two_point(ring4):
    rho, t = 0.5, 0.7
    gen = ex.FullGenerator(ring4)
    val = gen.moment(rho, [(0.0, 0), (t, 0)])
    p = ex.exact_labelled_transition(ring4, 1, t).prob((0,), (0,))
    assert val == pytest.approx(rho ** 2 + rho * (1 - rho) * p, abs=1e-12)


def test_marginal_stationarity_via_semigroup(ring4):
    # one-point marginal stays Bernoulli under the exact semigroup
    gen = ex.FullGenerator(ring4)
    rho = 0.35
    v = gen.propagate(gen.product_measure(rho), 0.9)
    one_point = float((v * gen.occupancy_vector(2)).sum())
    assert one_point == pytest.approx(rho, abs=1e-12)


# --- trajectories --------------------------------------------------------


def test_trajectory_checkpoint_replay_agrees():
    lat = TorusLattice.dyadic(1, 3)
    traj = ex.ExclusionTrajectory.stationary(lat, 0.5, 4.0, 3.0, seed=8)
    for t in (0.0, 0.41, 1.77, 3.0):
        direct = ex.evolve_occupancy(traj.initial, traj.stream, t).values
        assert np.array_equal(traj.occupancy_at(t), direct)


def test_segments_tile_window():
    lat = TorusLattice.dyadic(1, 2)
    traj = ex.ExclusionTrajectory.stationary(lat, 0.5, 8.0, 1.0, seed=2)
    cursor = 0.2
    for a, b, occ in traj.segments(0.2, 0.9):
        assert a == pytest.approx(cursor)
        assert b > a
        assert np.array_equal(occ, traj.occupancy_at((a + b) / 2))
        cursor = b
    assert cursor == pytest.approx(0.9)


def test_occupation_integrals_match_slow_quadrature():
    lat = TorusLattice.dyadic(1, 2)
    traj = ex.ExclusionTrajectory.stationary(lat, 0.5, 4.0, 2.0, seed=13)
    tau, cum, pieces = traj.occupation_integrals()
    rng = derive_rng(99, "slow-check")
    for _ in range(40):
        site = int(rng.integers(0, lat.n_sites))
        r = float(rng.uniform(0, 2.0))
        slow = 0.0
        for a, b, occ in traj.segments(0.0, r):
            slow += occ[site] * (b - a)
        fast = ex.occupation_lookup(tau, cum, pieces, np.array([site]), np.array([r]))[0]
        assert fast == pytest.approx(slow, abs=1e-12)


def test_occupation_memory_guard():
    lat = TorusLattice.dyadic(1, 3)
    traj = ex.ExclusionTrajectory.stationary(lat, 0.5, 64.0, 10.0, seed=0)
    with pytest.raises(CapacityError):
        traj.occupation_integrals(memory_budget_bytes=1024)


# --- fluctuation field ---------------------------------------------------


def test_fluctuation_constant_function_conserved():
    level = 3
    lat = TorusLattice.dyadic(1, level)
    traj = ex.ExclusionTrajectory.stationary(lat, 0.5, 4.0 ** level, 0.2, seed=21)
    one = lambda x: 1.0
    vals = [ex.fluctuation_field(traj, one, level, t) for t in (0.0, 0.05, 0.2)]
    assert max(vals) - min(vals) == 0.0
    expected = 2.0 ** (-level / 2.0) * (traj.initial.particle_count - 0.5 * lat.n_sites)
    assert vals[0] == pytest.approx(expected, abs=1e-12)


def test_fluctuation_centering_and_variance():
    level, rho = 2, 0.5
    lat = TorusLattice.dyadic(1, level)
    f = lambda x: math.cos(2 * math.pi * x[0])
    reps = 4000
    samples = np.empty(reps)
    for k in range(reps):
        init = ex.OccupancyState.bernoulli(lat, rho, seed=k)
        traj = ex.ExclusionTrajectory(
            initial=init, stream=ex.sample_event_stream(lat, 1.0, 0.01, seed=k), density=rho)
        samples[k] = ex.fluctuation_field(traj, f, level, 0.0)
    coords = [lat.site_coords(i)[0] / lat.side for i in range(lat.n_sites)]
    var_exact = rho * (1 - rho) * 2.0 ** (-level) * sum(f((c,)) ** 2 for c in coords)
    assert abs(samples.mean()) < 4 * math.sqrt(var_exact / reps)
    assert samples.var() == pytest.approx(var_exact, rel=0.15)
