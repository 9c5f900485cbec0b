"""Named scenarios and a random-scenario generator for property tests."""

from __future__ import annotations

import numpy as np

from .model import (DEGENERATE, DRIVEN_COUPLING, ENERGETIC, TWO_BATH, PiecewiseOperator,
                    ProtocolSchedule, ScenarioConfig, linear_ramp)
from .opalg import (SM, SP, SX, SY, SZ, CompositeLayout, random_density, random_hermitian,
                    random_unitary, swap_operator)

PAULIS = (SX, SY, SZ)


def _site(op: np.ndarray, j: int, m: int) -> np.ndarray:
    out = np.ones((1, 1), dtype=complex)
    for i in range(m):
        out = np.kron(out, op if i == j else np.eye(2))
    return out


def spin_bath(omegas, couplings, system_op=SX, bath_op=SX):
    """Star-coupled spin bath: ``H_B = Σ ω_j Z_j / 2`` and ``V_SB = Σ g_j A ⊗ B_j``."""
    m = len(omegas)
    h_b = sum(w / 2 * _site(SZ, j, m) for j, w in enumerate(omegas))
    v = sum(g * np.kron(system_op, _site(bath_op, j, m)) for j, g in enumerate(couplings))
    return np.asarray(h_b, dtype=complex), np.asarray(v, dtype=complex)


def exchange(g: float) -> np.ndarray:
    """``g (σ⁺σ⁻ + σ⁻σ⁺)`` on two qubits."""
    return g * (np.kron(SP, SM) + np.kron(SM, SP))


def swap_kick(d: int = 2) -> np.ndarray:
    """``v`` with ``exp(-i v) = SWAP``."""
    return np.pi / 2 * (np.eye(d * d) - swap_operator(d))


def partial_swap_kick(theta: float, d: int = 2) -> np.ndarray:
    """``v = θ·SWAP``, so ``exp(-i v) = cos θ − i sin θ SWAP``."""
    return theta * swap_operator(d).astype(complex)


def projective_z():
    return (np.diag([1.0, 0.0]).astype(complex), np.diag([0.0, 1.0]).astype(complex))


def random_povm(d: int, n_out: int, rng: np.random.Generator) -> tuple[np.ndarray, ...]:
    """Operators ``P_r ≥ 0`` with ``Σ P_r² = 1``."""
    gs = [random_density(d, rng) for _ in range(n_out)]
    a = sum(gs)
    w, v = np.linalg.eigh(a)
    a_mhalf = (v / np.sqrt(w)) @ v.conj().T
    out = []
    for g in gs:
        m = a_mhalf @ g @ a_mhalf
        wm, vm = np.linalg.eigh((m + m.conj().T) / 2)
        out.append((vm * np.sqrt(np.clip(wm, 0, None))) @ vm.conj().T)
    return tuple(out)


def random_projective(d: int, rng: np.random.Generator) -> tuple[np.ndarray, ...]:
    u = random_unitary(d, rng)
    return tuple(np.outer(u[:, i], u[:, i].conj()) for i in range(d))


# --- named presets -------------------------------------------------------------

def driven_qubit_spinbath(n_units: int = 2, m: int = 3, ramp_steps: int = 8) -> ScenarioConfig:
    """Driven qubit, 3-spin bath, exchange-coupled qubit units measured in Z."""
    h_b, v_sb = spin_bath([1.0, 1.3, 0.7][:m] + [0.9] * max(0, m - 3),
                          [0.4, 0.3, 0.5][:m] + [0.2] * max(0, m - 3))
    tau = 1.0
    bounds = tuple(float(k * tau) for k in range(n_units + 1))
    h0 = 0.5 * SZ
    h1 = 0.5 * SZ + 0.8 * SX
    h_s = PiecewiseOperator(h0, tuple(linear_ramp(bounds[0], bounds[-1], h0, h1, ramp_steps)))
    v_su = tuple(((bounds[k], exchange(0.6)),) for k in range(n_units))
    sched = ProtocolSchedule(bounds, h_s, h_b=h_b, v_sb=PiecewiseOperator.constant(v_sb),
                             h_u=tuple(np.zeros((2, 2), complex) for _ in range(n_units)), v_su=v_su)
    states = tuple(np.diag([0.8, 0.2]).astype(complex) for _ in range(n_units))
    lay = CompositeLayout.build(2, bath=2 ** m, units=[2] * n_units)
    return ScenarioConfig(lay, sched, beta=1.0, unit_states=states,
                          measurements=tuple(projective_z() for _ in range(n_units)),
                          name="driven-qubit-spinbath")


# Backflow point from a coupling sweep (g in 0.1..1.5, 20-point grid on [0, 8]):
# at g = 0.8 the pair t1 = 16/19, t2 = 64/19 has ΔΣ_S ≈ -0.334 and an intermediate
# map with Choi eigenvalue ≈ -4.38 (inversion condition number ≈ 16).
SWAP_RELAX_COUPLING = 0.8
SWAP_RELAX_OMEGAS = (0.3, 0.5, 0.4)


def swap_prepare_relax(coupling: float = SWAP_RELAX_COUPLING, t_total: float = 8.0,
                       prepared: np.ndarray | None = None,
                       omegas=SWAP_RELAX_OMEGAS, h_s: np.ndarray | None = None,
                       beta: float = 1.0) -> ScenarioConfig:
    """Undriven relaxation after a swap kick with unit ``U(0)`` at ``t_0``.

    The unit enters in ``prepared`` (default ``|0⟩⟨0|``), the swap places it
    on the system, and the system then relaxes under the time-independent
    ``H_SB``.
    """
    m = len(omegas)
    h_b, v_sb = spin_bath(list(omegas), [coupling] * m, system_op=SX, bath_op=SX)
    v_sb = v_sb + coupling * 0.5 * sum(np.kron(SZ, _site(SZ, j, m)) for j in range(m))
    h_s = 0.5 * SZ if h_s is None else h_s
    prepared = np.diag([1.0, 0.0]).astype(complex) if prepared is None else prepared
    sched = ProtocolSchedule((0.0, float(t_total)), PiecewiseOperator.constant(h_s), h_b=h_b,
                             v_sb=PiecewiseOperator.constant(v_sb),
                             h_u=(np.zeros((2, 2), complex),), kicks={0: swap_kick(2)})
    lay = CompositeLayout.build(2, bath=2 ** m, units=[2])
    return ScenarioConfig(lay, sched, beta=beta, unit_states=(prepared,), name="swap-prepare-relax")


def weak_prepare_relax(**kw) -> ScenarioConfig:
    """The swap-and-relax scenario at weak coupling (g = 0.02)."""
    cfg = swap_prepare_relax(coupling=kw.pop("coupling", 0.02), **kw)
    return cfg.replace(name="weak-prepare-relax")


def markov_partial_swap(n_units: int = 6, theta: float = 0.5, tau: float = 1.0,
                        beta: float = 1.0, omega: float = 1.0) -> ScenarioConfig:
    """No bath; the system is reset by a stream of fresh units in ``π_S``.

    ``U(0)`` prepares ``|0⟩`` by a full swap, every later unit collides by a
    partial swap ``exp(-iθ SWAP)``.  The reduced dynamics is CP-divisible
    with fixed point ``π_S``.
    """
    h_s = omega / 2 * SZ
    p = np.exp(-beta * np.array([omega / 2, -omega / 2]))
    pi_s = np.diag(p / p.sum()).astype(complex)
    bounds = tuple(float(k * tau) for k in range(n_units + 1))
    kicks = {0: swap_kick(2)}
    kicks.update({k: partial_swap_kick(theta) for k in range(1, n_units)})
    sched = ProtocolSchedule(bounds, PiecewiseOperator.constant(h_s),
                             h_u=tuple(np.zeros((2, 2), complex) for _ in range(n_units)),
                             kicks=kicks)
    states = (np.diag([1.0, 0.0]).astype(complex),) + tuple(pi_s for _ in range(n_units - 1))
    lay = CompositeLayout.build(2, units=[2] * n_units)
    return ScenarioConfig(lay, sched, beta=beta, unit_states=states, name="markov-partial-swap")


def two_bath_qubit(n_units: int = 2, beta1: float = 1.0, beta2: float = 0.4) -> ScenarioConfig:
    """Qubit between two 2-spin baths at different temperatures, with measured units."""
    h_b1, v1 = spin_bath([1.0, 0.8], [0.4, 0.3])
    h_b2, v2 = spin_bath([1.1, 0.6], [0.35, 0.25], system_op=SZ)
    bounds = tuple(float(0.8 * k) for k in range(n_units + 1))
    sched = ProtocolSchedule(
        bounds, PiecewiseOperator.constant(0.5 * SZ), h_b=h_b1, v_sb=PiecewiseOperator.constant(v1),
        h_b2=h_b2, v_sb2=PiecewiseOperator(np.zeros_like(v2), ((bounds[0], v2),)),
        h_u=tuple(0.5 * SZ for _ in range(n_units)),
        v_su=tuple(((bounds[k], exchange(0.5)),) for k in range(n_units)))
    lay = CompositeLayout.build(2, bath=4, bath2=4, units=[2] * n_units)
    states = tuple(np.diag([0.3, 0.7]).astype(complex) for _ in range(n_units))
    return ScenarioConfig(lay, sched, beta=beta1, beta2=beta2, unit_states=states,
                          measurements=tuple(projective_z() for _ in range(n_units)),
                          modes=frozenset({ENERGETIC, TWO_BATH}), name="two-bath-qubit")


PRESETS = {
    "driven-qubit-spinbath": driven_qubit_spinbath,
    "swap-prepare-relax": swap_prepare_relax,
    "weak-prepare-relax": weak_prepare_relax,
    "markov-partial-swap": markov_partial_swap,
    "two-bath-qubit": two_bath_qubit,
}


def preset(name: str) -> ScenarioConfig:
    try:
        return PRESETS[name]()
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; available: {', '.join(PRESETS)}") from None


# --- random scenarios ------------------------------------------------------------

def _random_coupling(m: int, rng: np.random.Generator, scale: float) -> np.ndarray:
    v = np.zeros((2 * 2 ** m,) * 2, dtype=complex)
    for j in range(m):
        for a in PAULIS:
            for b in PAULIS:
                v += scale * rng.normal() * np.kron(a, _site(b, j, m))
    return v / np.sqrt(3)


def _random_switches(t_lo: float, t_hi: float, rng, make, max_switches: int = 2):
    n = int(rng.integers(0, max_switches + 1))
    ts = np.sort(rng.uniform(t_lo, t_hi, size=n))
    return tuple((float(t), make()) for t in ts)


def random_scenario(rng: np.random.Generator, n_bath: int | None = None, n_units: int | None = None,
                    measured: bool = True, energetic: bool = False, two_bath: bool = False,
                    driven_coupling: bool = False, kicks: bool = True,
                    commuting: bool = False) -> ScenarioConfig:
    """Qubit system with a random spin bath, random piecewise protocol and qubit units.

    ``commuting`` makes every POVM element diagonal, commuting with the
    (diagonal) unit Hamiltonians in energetic mode.
    """
    m = int(rng.integers(2, 5)) if n_bath is None else n_bath
    n = int(rng.integers(1, 4)) if n_units is None else n_units
    if two_bath:
        m = min(m, 2)
    bounds = np.concatenate([[0.0], np.cumsum(rng.uniform(0.4, 1.2, size=n))])
    t0, t_end = float(bounds[0]), float(bounds[-1])
    h_s = PiecewiseOperator(random_hermitian(2, rng),
                            _random_switches(t0, t_end, rng, lambda: random_hermitian(2, rng), 3))
    omegas = rng.uniform(0.5, 1.5, size=m)
    h_b = sum(w / 2 * _site(SZ, j, m) for j, w in enumerate(omegas)).astype(complex)
    v0 = _random_coupling(m, rng, rng.uniform(0.1, 0.8))
    v_sb_sw = ()
    if driven_coupling:
        v_sb_sw = _random_switches(t0, t_end, rng, lambda: _random_coupling(m, rng, 0.5), 2)
    v_sb = PiecewiseOperator(v0, v_sb_sw)

    if energetic:
        h_u = tuple(np.diag(rng.uniform(-1, 1, size=2)).astype(complex) if commuting
                    else random_hermitian(2, rng) for _ in range(n))
    else:
        h_u = tuple(rng.uniform(-1, 1) * np.eye(2, dtype=complex) for _ in range(n))

    v_su = []
    kick_ops = {}
    for k in range(n):
        lo, hi = float(bounds[k]), float(bounds[k + 1])
        entries = [(lo, random_hermitian(4, rng, 0.7))]
        for t, op in _random_switches(lo, hi, rng, lambda: random_hermitian(4, rng, 0.7), 1):
            if t > lo:
                entries.append((t, op))
        v_su.append(tuple(entries))
        if kicks and rng.random() < 0.4:
            kick_ops[k] = random_hermitian(4, rng, 1.0)

    h_b2 = v_sb2 = None
    m2 = 0
    if two_bath:
        m2 = int(rng.integers(1, 3))
        om2 = rng.uniform(0.5, 1.5, size=m2)
        h_b2 = sum(w / 2 * _site(SZ, j, m2) for j, w in enumerate(om2)).astype(complex)
        v2 = _random_coupling(m2, rng, rng.uniform(0.1, 0.6))
        v_sb2 = PiecewiseOperator(np.zeros_like(v2), ((t0, v2),))

    sched = ProtocolSchedule(tuple(float(b) for b in bounds), h_s, h_b=h_b, v_sb=v_sb,
                             h_b2=h_b2, v_sb2=v_sb2, h_u=h_u, v_su=tuple(v_su), kicks=kick_ops)
    states = tuple(random_density(2, rng) for _ in range(n))
    meas = []
    for _ in range(n):
        if not measured:
            meas.append(None)
        elif commuting:
            meas.append(projective_z())
        else:
            choice = rng.integers(0, 3)
            if choice == 0:
                meas.append(random_projective(2, rng))
            else:
                meas.append(random_povm(2, int(rng.integers(2, 4)), rng))
    modes = {ENERGETIC if energetic else DEGENERATE}
    if two_bath:
        modes.add(TWO_BATH)
    if driven_coupling:
        modes.add(DRIVEN_COUPLING)
    lay = CompositeLayout.build(2, bath=2 ** m, bath2=(2 ** m2 if two_bath else None), units=[2] * n)
    beta = float(rng.uniform(0.3, 2.0))
    beta2 = float(rng.uniform(0.3, 2.0)) if two_bath else None
    return ScenarioConfig(lay, sched, beta=beta, beta2=beta2, unit_states=states,
                          measurements=tuple(meas), modes=frozenset(modes), name="random")
