import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rithermo.dynamics import (BranchCapError, Simulator, TrajectoryNode, branch_all,
                               kick_instruments, measure_unit, propagate_interval,
                               sample_trajectories)
from rithermo.model import Instant, PiecewiseOperator, ProtocolSchedule, ScenarioConfig, linear_ramp
from rithermo.opalg import (SX, SY, SZ, CompositeLayout, OperatorError, partial_trace,
                            random_density, random_hermitian, von_neumann_entropy)
from rithermo.presets import exchange, random_povm, random_scenario, swap_kick

seeds = st.integers(0, 2**32 - 1)


def _single_unit(h_s=None, v_su=None, unit=None, measurement=None, t=1.0, kicks=None):
    lay = CompositeLayout.build(2, units=[2])
    h_s = PiecewiseOperator.constant(np.zeros((2, 2)) if h_s is None else h_s)
    v = () if v_su is None else (((0.0, v_su),),)
    sched = ProtocolSchedule((0.0, t), h_s, h_u=(np.zeros((2, 2), complex),), v_su=v,
                             kicks=kicks or {})
    unit = np.diag([0.3, 0.7]).astype(complex) if unit is None else unit
    return ScenarioConfig(lay, sched, beta=1.0, unit_states=(unit,),
                          measurements=(measurement,))


class TestPropagation:
    def test_zero_hamiltonian(self, rng):
        sim = Simulator(_single_unit())
        rho = random_density(4, rng)
        assert np.array_equal(propagate_interval(sim, rho, 0), rho)

    def test_constant_segment_substeps(self, rng):
        cfg = _single_unit(h_s=0.7 * SX, v_su=random_hermitian(4, rng))
        rho = random_density(4, rng)
        a = propagate_interval(Simulator(cfg), rho, 0)
        b = propagate_interval(Simulator(cfg, substeps=2), rho, 0)
        assert np.max(np.abs(a - b)) <= 1e-12

    def test_ramp_refinement_second_order(self):
        # midpoint-sampled ramps converge quadratically in the step count
        rng = np.random.default_rng(42)
        a, b = random_hermitian(4, rng), random_hermitian(4, rng)
        lay = CompositeLayout.build(2, units=[2])
        rho0 = random_density(4, rng)

        def final(steps):
            sched = ProtocolSchedule((0.0, 2.0), PiecewiseOperator.constant(0.5 * SZ),
                                     h_u=(np.zeros((2, 2), complex),),
                                     v_su=(tuple(linear_ramp(0.0, 2.0, a, b, steps)[:-1]),))
            cfg = ScenarioConfig(lay, sched, beta=1.0, unit_states=(np.eye(2) / 2,))
            return propagate_interval(Simulator(cfg), rho0, 0)

        r64, r128, r256 = final(64), final(128), final(256)
        ratio = np.max(np.abs(r64 - r128)) / np.max(np.abs(r128 - r256))
        assert 3.5 < ratio < 4.5

    @given(seeds)
    @settings(max_examples=15)
    def test_trace_and_purity(self, seed):
        rng = np.random.default_rng(seed)
        cfg = random_scenario(rng, n_bath=2, n_units=2)
        sim = Simulator(cfg)
        v = rng.normal(size=cfg.layout.total_dim) + 1j * rng.normal(size=cfg.layout.total_dim)
        v /= np.linalg.norm(v)
        rho = np.outer(v, v.conj())
        for k in range(2):
            rho = propagate_interval(sim, rho, k)
            assert abs(np.trace(rho) - 1) <= 1e-12
            assert abs(np.trace(rho @ rho).real - 1) <= 1e-10

    @given(seeds)
    @settings(max_examples=15)
    def test_entropy_conserved(self, seed):
        rng = np.random.default_rng(seed)
        sim = Simulator(random_scenario(rng, n_bath=2))
        s0 = von_neumann_entropy(sim.rho0)
        for k in range(sim.layout.n_units + 1):
            assert abs(von_neumann_entropy(sim.state(sim.schedule.boundary(k))) - s0) <= 1e-9

    def test_backwards_rejected(self):
        sim = Simulator(_single_unit())
        with pytest.raises(ValueError):
            sim.advance(sim.rho0, Instant(0.5), Instant(0.2))


class TestMeasureUnit:
    def _node_at_end(self, cfg):
        sim = Simulator(cfg)
        end = sim.schedule.boundary(1)
        rho = sim.state(end)
        return sim, TrajectoryNode((), rho, 1.0, end)

    def test_trivial_instrument(self):
        sim, node = self._node_at_end(_single_unit(h_s=SX))
        kids = measure_unit(sim, node, 0)
        assert len(kids) == 1
        assert np.array_equal(kids[0].state, node.state)

    def test_projective_on_uncorrelated_unit(self):
        proj = (np.diag([1.0, 0.0]).astype(complex), np.diag([0.0, 1.0]).astype(complex))
        sim, node = self._node_at_end(_single_unit(h_s=SX, measurement=proj))
        probs = [c.prob for c in measure_unit(sim, node, 0)]
        assert np.allclose(probs, [0.3, 0.7], atol=1e-14)

    @given(seeds)
    def test_random_povm_complete(self, seed):
        rng = np.random.default_rng(seed)
        povm = random_povm(2, 3, rng)
        cfg = _single_unit(v_su=random_hermitian(4, rng), unit=random_density(2, rng),
                           measurement=povm)
        sim, node = self._node_at_end(cfg)
        assert abs(sum(c.prob for c in measure_unit(sim, node, 0)) - 1) <= 1e-12

    def test_wrong_time(self):
        sim = Simulator(_single_unit())
        with pytest.raises(ValueError):
            measure_unit(sim, sim.root(), 0)

    def test_unnormalised_instrument(self):
        sim, node = self._node_at_end(_single_unit())
        with pytest.raises(OperatorError):
            measure_unit(sim, node, 0, instrument=[np.diag([1.0, 0.5])])


class TestBranching:
    def test_single_leaf(self):
        sim = Simulator(_single_unit(h_s=SX, v_su=exchange(0.4)))
        tree = branch_all(sim)
        assert len(tree.leaves) == 1
        assert np.max(np.abs(tree.leaves[0].state - sim.state(sim.schedule.end()))) <= 1e-15

    def test_two_units_four_leaves(self, rng):
        cfg = random_scenario(rng, n_bath=2, n_units=2, measured=False)
        proj = (np.diag([1.0, 0.0]).astype(complex), np.diag([0.0, 1.0]).astype(complex))
        cfg = cfg.replace(measurements=(proj, proj))
        tree = branch_all(Simulator(cfg))
        assert len(tree.leaves) + len(tree.pruned) == 4
        assert abs(sum(n.prob for n in tree.leaves) - 1) <= 1e-12

    def test_cap(self, rng):
        cfg = random_scenario(rng, n_bath=2, n_units=3)
        with pytest.raises(BranchCapError, match="sample_trajectories"):
            branch_all(Simulator(cfg), cap=1)

    @given(seeds)
    @settings(max_examples=15)
    def test_deferred_and_averaged(self, seed):
        rng = np.random.default_rng(seed)
        tree = branch_all(Simulator(random_scenario(rng, n_bath=2)))
        assert tree.deferred_defect <= 1e-10
        assert tree.average_defect <= 1e-10
        for parents, kids in zip(tree.levels, tree.levels[1:]):
            for p in parents:
                mine = [c for c in kids if c.parent is p]
                lost = [c for c in tree.pruned if c.parent is p]
                assert abs(sum(c.prob for c in mine + lost) - p.prob) <= 1e-12


class TestSampling:
    def test_single_outcome(self):
        out = sample_trajectories(Simulator(_single_unit(h_s=SX)), seed=1, count=50)
        assert len(out) == 1 and out[0].count == 50

    def test_binomial(self):
        proj = (np.diag([1.0, 0.0]).astype(complex), np.diag([0.0, 1.0]).astype(complex))
        sim = Simulator(_single_unit(measurement=proj))
        out = sample_trajectories(sim, seed=3, count=10_000)
        freq = {leaf.node.outcomes: leaf.weight for leaf in out}
        assert abs(freq[(0,)] - 0.3) <= 0.015

    def test_seeded(self, rng):
        sim = Simulator(random_scenario(rng, n_bath=2, n_units=3))
        a = sample_trajectories(sim, seed=9, count=2000, chunk=300)
        b = sample_trajectories(sim, seed=9, count=2000, chunk=300)
        assert [(x.node.outcomes, x.count) for x in a] == [(x.node.outcomes, x.count) for x in b]

    def test_converges_to_branch_probabilities(self, rng):
        sim = Simulator(random_scenario(rng, n_bath=2, n_units=2))
        exact = {n.outcomes: n.prob for n in branch_all(sim).leaves}
        count = 100_000
        for leaf in sample_trajectories(sim, seed=5, count=count):
            p = exact[leaf.node.outcomes]
            assert abs(leaf.weight - p) <= 5 * np.sqrt(p * (1 - p) / count) + 1e-12


class TestKickInstruments:
    def test_no_kick_diagonal_unit(self, rng):
        rho_u = np.diag([0.25, 0.75]).astype(complex)
        proj = (np.diag([1.0, 0.0]), np.diag([0.0, 1.0]))
        maps = kick_instruments(np.zeros((4, 4)), rho_u, proj)
        rho = random_density(2, rng)
        for m, p in zip(maps, (0.25, 0.75)):
            assert np.max(np.abs(m.apply(rho) - p * rho)) <= 1e-14

    def test_swap_replaces_system(self, rng):
        rho_u = np.diag([1.0, 0.0]).astype(complex)
        proj = (np.diag([1.0, 0.0]), np.diag([0.0, 1.0]))
        maps = kick_instruments(swap_kick(2), rho_u, proj)
        rho = random_density(2, rng)
        ground = np.diag([1.0, 0.0])
        for r, m in enumerate(maps):
            assert np.max(np.abs(m.apply(rho) - rho[r, r].real * ground)) <= 1e-14

    def test_choi_positive_and_trace_preserving(self, rng):
        maps = kick_instruments(random_hermitian(4, rng), random_density(2, rng),
                                random_povm(2, 3, rng))
        total = sum(m.choi for m in maps)
        tp = np.einsum("iaja->ij", total.reshape(2, 2, 2, 2))
        assert np.max(np.abs(tp - np.eye(2))) <= 1e-10
        for m in maps:
            assert np.linalg.eigvalsh(m.choi).min() >= -1e-10

    def test_completeness_sweep(self, rng):
        maps = kick_instruments(random_hermitian(4, rng), random_density(2, rng),
                                random_povm(2, 2, rng))
        for _ in range(20):
            rho = random_density(2, rng)
            assert abs(sum(np.trace(m.apply(rho)) for m in maps) - 1) <= 1e-12

    def test_matches_simulated_kick(self, rng):
        v = random_hermitian(4, rng)
        rho_u = random_density(2, rng)
        povm = random_povm(2, 2, rng)
        maps = kick_instruments(v, rho_u, povm)
        cfg = _single_unit(h_s=0.0 * SY, unit=rho_u, measurement=povm, kicks={0: v})
        sim = Simulator(cfg)
        tree = branch_all(sim)
        rho_s = partial_trace(sim.rho0, sim.layout, ["S"])
        for leaf, m in zip(tree.leaves, maps):
            assert np.max(np.abs(partial_trace(leaf.state, sim.layout, ["S"]) - m.apply(rho_s))) <= 1e-13

    def test_shape_mismatch(self):
        with pytest.raises(OperatorError):
            kick_instruments(np.zeros((5, 5)), np.eye(2) / 2, (np.eye(2),), d_s=2)
