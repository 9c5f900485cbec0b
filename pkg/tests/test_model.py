import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import gibbs_expm, naive_partial_trace
from rithermo.model import (DEGENERATE, ENERGETIC, ConfigError, Instant, PiecewiseOperator,
                            ProtocolSchedule, ScenarioConfig, before, gibbs_state, initial_state,
                            linear_ramp, log_partition, mean_force, mean_force_beta_derivative,
                            total_hamiltonian, validate_config)
from rithermo.opalg import (SX, SZ, CompositeLayout, OperatorError, partial_trace,
                            random_density, random_hermitian)
from rithermo.presets import random_scenario, spin_bath, two_bath_qubit

seeds = st.integers(0, 2**32 - 1)

# seed 7, random 8x8 Hermitian, beta = 1; spectral-sum oracle
GIBBS8_ENERGY = -5.0092981089329225
GIBBS8_Z = 257.4588860481197
# seed 3, random 4x4 H_XB on qubit x qubit, beta = 1; reduced exact Gibbs state
MF_SEED3_PISTAR = np.array([
    [0.4904810910425394, 0.10080577923058104 + 0.17691952779827744j],
    [0.10080577923058104 - 0.17691952779827735j, 0.5095189089574604]])


class TestInstant:
    def test_ordering(self):
        assert before(1.0) < Instant(1.0) < before(1.5)
        assert str(before(2.0)) == "2.0-"

    def test_piecewise_segments(self):
        op = PiecewiseOperator(np.zeros((2, 2)), ((1.0, SX), (2.0, SZ)))
        assert np.array_equal(op.value(before(1.0)), np.zeros((2, 2)))
        assert np.array_equal(op.value(Instant(1.0)), SX)
        assert np.array_equal(op.value(Instant(1.7)), SX)
        assert np.array_equal(op.value(Instant(5.0)), SZ)

    def test_unsorted_switches(self):
        with pytest.raises(OperatorError):
            PiecewiseOperator(SX, ((2.0, SX), (1.0, SZ)))

    def test_linear_ramp_midpoints(self):
        sw = linear_ramp(0.0, 1.0, np.zeros((1, 1)), np.ones((1, 1)), 4)
        assert [t for t, _ in sw] == [0.0, 0.25, 0.5, 0.75, 1.0]
        assert [op[0, 0].real for _, op in sw] == [0.125, 0.375, 0.625, 0.875, 1.0]


class TestGibbs:
    def test_two_level(self):
        e, beta = 0.7, 1.3
        rho, z = gibbs_state(np.diag([0.0, e]), beta)
        expect = np.diag([1, np.exp(-beta * e)]) / (1 + np.exp(-beta * e))
        assert np.allclose(rho, expect, atol=1e-15)
        assert z == pytest.approx(1 + np.exp(-beta * e), rel=1e-14)

    def test_high_temperature(self, rng):
        rho, _ = gibbs_state(random_hermitian(5, rng), 1e-9)
        assert np.max(np.abs(rho - np.eye(5) / 5)) <= 1e-8

    def test_random_eight_level_frozen(self):
        h = random_hermitian(8, np.random.default_rng(7))
        rho, z = gibbs_state(h, 1.0)
        e = np.linalg.eigvalsh(h)
        oracle = float(np.sum(e * np.exp(-e)) / np.sum(np.exp(-e)))
        assert oracle == pytest.approx(GIBBS8_ENERGY, abs=1e-12)
        assert abs(np.trace(rho @ h).real - GIBBS8_ENERGY) <= 1e-12
        assert z == pytest.approx(GIBBS8_Z, rel=1e-12)

    def test_overflow_is_loud(self):
        h = np.diag([-2000.0, 0.0])
        with pytest.raises(FloatingPointError):
            gibbs_state(h, 1.0)
        assert log_partition(h, 1.0) == pytest.approx(2000.0, rel=1e-14)
        rho, _ = gibbs_state(h, 0.01)
        assert np.isfinite(rho).all()

    def test_nonpositive_beta(self):
        with pytest.raises(ValueError):
            gibbs_state(np.eye(2), 0.0)

    @given(seeds, st.floats(0.05, 10))
    def test_matches_expm(self, seed, beta):
        h = random_hermitian(4, np.random.default_rng(seed))
        rho, z = gibbs_state(h, beta)
        ref, zref = gibbs_expm(h, beta)
        assert np.max(np.abs(rho - ref)) <= 1e-10
        assert z == pytest.approx(zref, rel=1e-9)


def _qubit_pair():
    return CompositeLayout.build(2, bath=2)


class TestMeanForce:
    def test_uncoupled(self, rng):
        lay = _qubit_pair()
        hx, hb = random_hermitian(2, rng), random_hermitian(2, rng)
        h = np.kron(hx, np.eye(2)) + np.kron(np.eye(2), hb)
        mf = mean_force(h, 0.8, lay, ["S"], ["B"], h_bath=hb)
        pi_x, zx = gibbs_state(hx, 0.8)
        assert np.max(np.abs(mf.pistar - pi_x)) <= 1e-12
        assert np.max(np.abs(mf.hstar - hx)) <= 1e-12
        assert mf.zstar == pytest.approx(zx, rel=1e-12)

    def test_seeded_exact_diagonalisation(self):
        h = random_hermitian(4, np.random.default_rng(3))
        mf = mean_force(h, 1.0, _qubit_pair(), ["S"], ["B"], h_bath=np.zeros((2, 2)))
        assert np.max(np.abs(mf.pistar - MF_SEED3_PISTAR)) <= 1e-12
        full, _ = gibbs_expm(h, 1.0)
        assert np.max(np.abs(naive_partial_trace(full, [2, 2], [0]) - MF_SEED3_PISTAR)) <= 1e-12

    @pytest.mark.parametrize("beta", [0.5, 1.0, 2.0])
    def test_partition_factorises(self, rng, beta):
        lay = _qubit_pair()
        h, hb = random_hermitian(4, rng), random_hermitian(2, rng)
        mf = mean_force(h, beta, lay, ["S"], ["B"], h_bath=hb)
        zb = gibbs_state(hb, beta)[1]
        zxb = gibbs_state(h, beta)[1]
        assert mf.zstar * zb == pytest.approx(zxb, rel=1e-10)

    def test_rank_deficient(self):
        lay = _qubit_pair()
        h = np.diag([0.0, 0.0, 800.0, 800.0]).astype(complex)
        with pytest.raises(OperatorError, match="rank deficient"):
            mean_force(h, 1.0, lay, ["S"], ["B"], h_bath=np.zeros((2, 2)))

    def test_bath_hamiltonian_required(self, rng):
        with pytest.raises(OperatorError):
            mean_force(random_hermitian(4, rng), 1.0, _qubit_pair(), ["S"], ["B"])

    def test_derivative_vanishes_uncoupled(self, rng):
        lay = _qubit_pair()
        hx, hb = random_hermitian(2, rng), random_hermitian(2, rng)
        h = np.kron(hx, np.eye(2)) + np.kron(np.eye(2), hb)
        d = mean_force_beta_derivative(h, 1.0, lay, ["S"], ["B"], h_bath=hb)
        assert np.max(np.abs(d)) <= 1e-8

    def test_derivative_step_halving(self, rng):
        lay = _qubit_pair()
        h, hb = random_hermitian(4, rng), random_hermitian(2, rng)
        d1 = mean_force_beta_derivative(h, 1.0, lay, ["S"], ["B"], hb, step=1e-2)
        d2 = mean_force_beta_derivative(h, 1.0, lay, ["S"], ["B"], hb, step=5e-3)
        d3 = mean_force_beta_derivative(h, 1.0, lay, ["S"], ["B"], hb, step=2.5e-3)
        e1, e2 = np.max(np.abs(d1 - d2)), np.max(np.abs(d2 - d3))
        # O(h²) error: successive differences shrink by ~4
        assert 3.0 < e1 / e2 < 5.0

    def test_scalar_free_energy(self):
        # trivial X: H* is the free-energy difference, ∂_β H* its derivative
        lay = CompositeLayout.build(1, bath=4)
        rng = np.random.default_rng(5)
        h = random_hermitian(4, rng)
        hb = random_hermitian(4, rng)
        beta = 0.9
        mf = mean_force(h, beta, lay, ["S"], ["B"], h_bath=hb, derivative=True)

        def fstar(b):
            return -(log_partition(h, b) - log_partition(hb, b)) / b

        assert mf.hstar[0, 0].real == pytest.approx(fstar(beta), abs=1e-12)
        step = 1e-3
        fd = (fstar(beta + step) - fstar(beta - step)) / (2 * step)
        assert mf.dhstar_dbeta[0, 0].real == pytest.approx(fd, abs=1e-6)

    @given(seeds, st.floats(0.2, 3.0))
    def test_gauge_consistency(self, seed, beta):
        rng = np.random.default_rng(seed)
        m = int(rng.integers(1, 4))
        lay = CompositeLayout.build(2, bath=2 ** m)
        hb = random_hermitian(2 ** m, rng)
        h = random_hermitian(2 * 2 ** m, rng) + np.kron(np.eye(2), hb)
        mf = mean_force(h, beta, lay, ["S"], ["B"], h_bath=hb)
        w, v = np.linalg.eigh(mf.hstar)
        recon = (v * np.exp(-beta * w)) @ v.conj().T / mf.zstar
        exact = partial_trace(gibbs_state(h, beta)[0], lay, ["S"])
        assert np.max(np.abs(recon - exact)) <= 1e-10

    def test_weak_coupling_limit(self):
        h_b, v = spin_bath([1.0, 0.7], [0.6, 0.4])
        hx = 0.5 * SZ + 0.2 * SX
        lay = CompositeLayout.build(2, bath=4)
        pi_x = gibbs_state(hx, 1.0)[0]
        dists = []
        for eps in (1.0, 0.1, 0.01):
            h = np.kron(hx, np.eye(4)) + np.kron(np.eye(2), h_b) + eps * v
            mf = mean_force(h, 1.0, lay, ["S"], ["B"], h_bath=h_b)
            dists.append(np.max(np.abs(mf.pistar - pi_x)))
        assert dists[0] > dists[1] > dists[2]


def _schedule_with_units():
    lay = CompositeLayout.build(2, bath=2, units=[2, 2])
    sched = ProtocolSchedule(
        (0.0, 1.0, 2.0), PiecewiseOperator(SZ, ((0.5, SX),)), h_b=SZ,
        v_sb=PiecewiseOperator.constant(0.3 * np.kron(SX, SX)),
        h_u=(np.eye(2, dtype=complex), 2 * np.eye(2, dtype=complex)),
        v_su=(((0.0, np.kron(SX, SX)),), ((1.0, np.kron(SZ, SX)),)))
    return lay, sched


class TestTotalHamiltonian:
    def test_only_active_unit(self):
        lay, sched = _schedule_with_units()
        h = total_hamiltonian(sched, lay, Instant(1.5))
        no_su = total_hamiltonian(sched, lay, Instant(1.5), exclude=["v_su1"])
        from rithermo.opalg import tensor_embed
        assert np.allclose(h - no_su, tensor_embed(np.kron(SZ, SX), ["S", "U1"], lay))

    def test_start_has_no_unit_coupling(self):
        lay, sched = _schedule_with_units()
        h = total_hamiltonian(sched, lay, before(0.0))
        from rithermo.opalg import tensor_embed
        expect = (tensor_embed(SZ, ["S"], lay) + tensor_embed(SZ, ["B"], lay)
                  + tensor_embed(0.3 * np.kron(SX, SX), ["S", "B"], lay)
                  + tensor_embed(np.eye(2), ["U0"], lay) + tensor_embed(2 * np.eye(2), ["U1"], lay))
        assert np.allclose(h, expect)

    def test_coupling_off_at_boundary(self):
        lay, sched = _schedule_with_units()
        a = total_hamiltonian(sched, lay, before(1.0))
        b = total_hamiltonian(sched, lay, before(2.0))
        assert np.allclose(a, b)

    def test_outside_schedule(self):
        lay, sched = _schedule_with_units()
        with pytest.raises(OperatorError):
            total_hamiltonian(sched, lay, Instant(2.0))

    def test_constant_within_segment(self):
        lay, sched = _schedule_with_units()
        assert np.array_equal(total_hamiltonian(sched, lay, Instant(0.6)),
                              total_hamiltonian(sched, lay, Instant(0.9)))

    @given(seeds)
    def test_hermitian_on_random_schedule(self, seed):
        rng = np.random.default_rng(seed)
        cfg = random_scenario(rng, n_bath=2, n_units=2)
        sch = cfg.schedule
        for t in rng.uniform(sch.t0, sch.t_end, size=20):
            h = total_hamiltonian(sch, cfg.layout, Instant(float(t)))
            assert np.max(np.abs(h - h.conj().T)) <= 1e-12


class TestInitialState:
    def test_uncoupled_system_sector(self):
        lay = CompositeLayout.build(2, bath=2, units=[2])
        hs = 0.4 * SZ + 0.1 * SX
        sched = ProtocolSchedule((0.0, 1.0), PiecewiseOperator.constant(hs), h_b=SZ,
                                 h_u=(np.zeros((2, 2), complex),))
        rho_u = np.diag([0.2, 0.8]).astype(complex)
        cfg = ScenarioConfig(lay, sched, beta=0.7, unit_states=(rho_u,)).validate()
        rho = initial_state(cfg)
        assert abs(np.trace(rho) - 1) <= 1e-12
        assert np.allclose(partial_trace(rho, lay, ["S"]), gibbs_state(hs, 0.7)[0], atol=1e-13)
        assert np.allclose(partial_trace(rho, lay, ["U0"]), rho_u, atol=1e-13)

    def test_two_bath_product(self):
        cfg = two_bath_qubit()
        sch = cfg.schedule
        sched = ProtocolSchedule(sch.boundaries, sch.h_s, h_b=sch.h_b, h_b2=sch.h_b2,
                                 v_sb2=sch.v_sb2, h_u=sch.h_u, v_su=sch.v_su)
        cfg = cfg.replace(schedule=sched).validate()
        rho = initial_state(cfg)
        red = partial_trace(rho, cfg.layout, ["S", "B2"])
        expect = np.kron(gibbs_state(sch.h_s.initial, cfg.beta)[0], gibbs_state(sch.h_b2, cfg.beta2)[0])
        assert np.max(np.abs(red - expect)) <= 1e-13

    def test_correlated_units(self):
        lay = CompositeLayout.build(2, units=[2, 2])
        sched = ProtocolSchedule((0.0, 1.0, 2.0), PiecewiseOperator.constant(SZ),
                                 h_u=(np.zeros((2, 2), complex),) * 2)
        bell = np.array([1, 0, 0, 1]) / np.sqrt(2)
        joint = 0.6 * np.outer(bell, bell) + 0.4 * np.diag([0.1, 0.2, 0.3, 0.4])
        cfg = ScenarioConfig(lay, sched, beta=1.0, joint_unit_state=joint.astype(complex)).validate()
        rho = initial_state(cfg)
        for k, keep in enumerate([[0], [1]]):
            oracle = naive_partial_trace(joint, [2, 2], keep)
            assert np.max(np.abs(partial_trace(rho, lay, [f"U{k}"]) - oracle)) <= 1e-13


class TestValidation:
    def _base(self, **kw):
        lay = CompositeLayout.build(2, units=[2, 2])
        sched_kw = dict(h_u=(np.zeros((2, 2), complex),) * 2,
                        v_su=(((0.0, np.kron(SX, SX)),), ((1.0, np.kron(SX, SX)),)))
        sched_kw.update(kw.pop("sched", {}))
        sched = ProtocolSchedule((0.0, 1.0, 2.0), PiecewiseOperator.constant(SZ), **sched_kw)
        args = dict(unit_states=(np.eye(2, dtype=complex) / 2,) * 2)
        args.update(kw)
        return ScenarioConfig(lay, sched, beta=1.0, **args)

    def test_valid(self):
        assert validate_config(self._base()) == []

    def test_bad_povm(self):
        bad = (np.diag([1.0, 0.0]), np.diag([0.0, 0.9]))
        issues = validate_config(self._base(measurements=(None, bad)))
        assert [i.field for i in issues] == ["measurements[1]"]
        assert "unit 1" in issues[0].message

    def test_overlapping_coupling(self):
        cfg = self._base(sched={"v_su": (((0.0, np.kron(SX, SX)), (1.5, np.kron(SX, SX))),)})
        issues = validate_config(cfg)
        assert any("one unit may interact" in i.message for i in issues)

    def test_non_hermitian(self):
        cfg = self._base(sched={"h_u": (np.array([[0, 1], [0, 0]], complex),
                                        np.zeros((2, 2), complex))})
        issues = validate_config(cfg)
        assert any("anti-Hermitian norm" in i.message for i in issues)

    def test_degenerate_mode_rejects_energetic_units(self):
        cfg = self._base(sched={"h_u": (0.5 * SZ, np.zeros((2, 2), complex))})
        assert any("∝ identity" in i.message for i in validate_config(cfg))
        assert validate_config(cfg.replace(modes=frozenset({ENERGETIC}))) == []

    def test_exclusive_modes(self):
        cfg = self._base(modes=frozenset({ENERGETIC, DEGENERATE}))
        assert any(i.field == "mode" for i in validate_config(cfg))

    def test_validate_raises(self):
        with pytest.raises(ConfigError):
            self._base(unit_states=(random_density(2, np.random.default_rng(0)),)).validate()
