"""Thermodynamic bookkeeping for repeated-interaction runs.

Average quantities follow the unmeasured global state; stochastic quantities
follow the conditional state of a measurement record.  Internal energy,
entropy and free energy of the system plus units are built from the
Hamiltonian of mean force with respect to the (first) bath.  ``k_B = 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dynamics import BranchTree, Simulator, TrajectoryNode
from .model import (DEGENERATE, Instant, MeanForceData, gibbs_state, log_partition, mean_force,
                    total_hamiltonian)
from .opalg import (eigh, expect, partial_trace, relative_entropy, relative_entropy_spectral,
                    tensor_embed, von_neumann_entropy)

PRUNED_MEASURE_FLAG = 1e-10


@dataclass
class LedgerSnapshot:
    instant: Instant
    W: float
    W_power: float
    F_SU: float
    Sigma: float
    Sigma_relent: float
    Sigma_thermo: float
    E_star: float
    Q1: float
    Q2: float
    S_thermo: float
    S_SU: float
    Sigma_free: float | None = None
    Sigma_S: float | None = None
    delta_Sigma_S: float | None = None

    @property
    def Q(self) -> float:
        return self.Q1


@dataclass
class StochasticLedger:
    outcomes: tuple[int, ...]
    prob: float
    w: float
    f_SU: float
    sigma: float
    e_star: float
    q: float
    q_meas: float
    q1: float
    q2: float
    s_SU: float
    S_cond: float
    sigma_free: float | None = None

    @property
    def q_SU(self) -> float:
        return self.q + self.q_meas


@dataclass
class StochasticSummary:
    """Probability-weighted averages over all records at one instant."""

    instant: Instant
    avg_w: float
    avg_f: float
    avg_sigma: float
    avg_q: float
    avg_q1: float
    avg_q2: float
    avg_q_meas: float
    gap: float
    pruned_measure: float
    ledgers: list[StochasticLedger] = field(default_factory=list)

    @property
    def renormalized(self) -> bool:
        return self.pruned_measure > PRUNED_MEASURE_FLAG


@dataclass
class _Reference:
    energy: float
    E_star: float
    F_SU: float
    S_thermo: float
    H_B2: float
    F_S: float | None
    S_units: list[float]


def _log_gibbs_weights(w: np.ndarray, beta: float) -> np.ndarray:
    x = -beta * (w - w.min())
    return x - np.log(np.sum(np.exp(x)))


def _canonical_rows(x: np.ndarray, factors, layout) -> np.ndarray:
    """Reorder the row index of ``x`` from ``factors`` order to canonical order."""
    factors = list(factors)
    canon = layout.canonical(factors)
    dims = [layout.dim([f]) for f in factors]
    perm = [factors.index(c) for c in canon] + [len(factors)]
    return x.reshape(dims + [x.shape[1]]).transpose(perm).reshape(x.shape)


def noneq_free_energy(rho_x: np.ndarray, mf: MeanForceData) -> float:
    """``tr ρ (H* + β⁻¹ ln ρ)``."""
    return expect(mf.hstar, rho_x) - von_neumann_entropy(rho_x) / mf.beta


class Thermodynamics:
    """Thermodynamic ledger of one scenario, evaluated on a :class:`Simulator`.

    Parameters
    ----------
    sim : Simulator
        Propagation engine of the scenario.
    step : float, optional
        Finite-difference step for ``∂_β H*`` (default ``1e-4·β``).
    """

    def __init__(self, sim: Simulator, step: float | None = None):
        self.sim = sim
        self.config = sim.config
        self.layout = lay = sim.layout
        self.beta = self.config.beta
        self.beta2 = self.config.beta2 if self.config.two_bath else None
        self.step = step
        self.su = ("S",) + lay.units()
        self.bath = ("B",) if lay.has_bath else ()
        self.sb1u = tuple(n for n in lay.names if n != "B2")
        self._mf: dict = {}
        self._mf_s: dict = {}
        self._ref_state: dict = {}
        self._h_u = [tensor_embed(self.config.unit_hamiltonian(k), (f"U{k}",), lay)
                     for k in range(lay.n_units)]
        self._ref = self._reference()

    # -- mean force ------------------------------------------------------

    def mean_force_su(self, instant: Instant) -> MeanForceData:
        """``H*_{SU}`` (with β-derivative) from ``H_{S B1 U}`` at ``instant``.

        Only the system and the unit of the current interval see the bath;
        idle units enter through their bare Hamiltonians, which keeps the
        factorisation exact instead of recovering it from a matrix log.
        """
        sch, lay = self.config.schedule, self.layout
        key = sch.segment_key(instant)
        if key in self._mf:
            return self._mf[key]
        k = sch.interval_of(instant)
        active = ("S",) + ((f"U{k}",) if k is not None else ())
        idle = [j for j in range(lay.n_units) if f"U{j}" not in active]
        exclude = ["h_b2", "v_sb2"] + [f"h_u{j}" for j in idle]
        h = total_hamiltonian(sch, lay, instant, exclude=exclude, target=active + self.bath)
        mf = mean_force(h, self.beta, lay, active, self.bath, sch.h_b,
                        derivative=True, step=self.step)
        su = self.su
        hstar = tensor_embed(mf.hstar, active, lay, su)
        dh = tensor_embed(mf.dhstar_dbeta, active, lay, su)
        pistar, log_z = mf.pistar, mf.log_zstar
        for j in idle:
            h_u = self.config.unit_hamiltonian(j)
            hstar = hstar + tensor_embed(h_u, (f"U{j}",), lay, su)
            pi_u, _ = gibbs_state(h_u, self.beta)
            pistar = np.kron(pistar, pi_u)
            log_z += log_partition(h_u, self.beta)
        pistar = tensor_embed(pistar, list(active) + [f"U{j}" for j in idle], lay, su)
        self._mf[key] = MeanForceData(hstar, log_z, self.beta, pistar, dh)
        return self._mf[key]

    def mean_force_s(self, instant: Instant) -> MeanForceData:
        """``H*_S`` from ``H_SB`` at ``instant`` (units decoupled)."""
        key = self.config.schedule.segment_key(instant)
        if key not in self._mf_s:
            n = self.layout.n_units
            exclude = (["h_b2", "v_sb2"] + [f"h_u{k}" for k in range(n)]
                       + [f"v_su{k}" for k in range(n)])
            target = ("S",) + self.bath
            h = total_hamiltonian(self.config.schedule, self.layout, instant,
                                  exclude=exclude, target=target)
            self._mf_s[key] = mean_force(h, self.beta, self.layout, ("S",), self.bath,
                                         self.config.schedule.h_b)
        return self._mf_s[key]

    def reference_log(self, instant: Instant) -> tuple[np.ndarray, np.ndarray]:
        """Spectral form ``(ln q, V)`` of ``π_tot(λ_t)``, or of
        ``π_{SB1U}(β1) ⊗ π_B2(β2)`` with two baths."""
        key = self.config.schedule.segment_key(instant)
        if key not in self._ref_state:
            lay, sch = self.layout, self.config.schedule
            if self.beta2 is None:
                w, v = eigh(self.sim.hamiltonian(instant))
                log_q = _log_gibbs_weights(w, self.beta)
            else:
                h = total_hamiltonian(sch, lay, instant, exclude=("h_b2", "v_sb2"), target=self.sb1u)
                w1, v1 = eigh(h)
                w2, v2 = eigh(sch.h_b2)
                log_q = np.add.outer(_log_gibbs_weights(w1, self.beta),
                                     _log_gibbs_weights(w2, self.beta2)).ravel()
                v = _canonical_rows(np.kron(v1, v2), list(self.sb1u) + ["B2"], lay)
            self._ref_state[key] = (log_q, v)
        return self._ref_state[key]

    def reference_state(self, instant: Instant) -> np.ndarray:
        log_q, v = self.reference_log(instant)
        return (v * np.exp(log_q)) @ v.conj().T

    # -- pieces ----------------------------------------------------------

    def _v_sb2(self, instant: Instant) -> np.ndarray | None:
        sch = self.config.schedule
        if not self.layout.has_bath2 or sch.v_sb2 is None:
            return None
        return sch.v_sb2.value(instant)

    def _energetics(self, rho: np.ndarray, instant: Instant):
        """Mean-force energy terms of a (normalised) global state."""
        lay = self.layout
        mf = self.mean_force_su(instant)
        rho_su = partial_trace(rho, lay, self.su)
        s_su = von_neumann_entropy(rho_su)
        h = expect(mf.hstar, rho_su)
        dh = expect(mf.dhstar_dbeta, rho_su)
        v2 = self._v_sb2(instant)
        e_v2 = 0.0 if v2 is None else expect(v2, partial_trace(rho, lay, ("S", "B2")))
        e_star = h + self.beta * dh + e_v2
        s_thermo = s_su + self.beta ** 2 * dh
        f = h - s_su / self.beta
        h_b2 = expect(self.config.schedule.h_b2, partial_trace(rho, lay, ("B2",))) \
            if lay.has_bath2 else 0.0
        return dict(rho_su=rho_su, S_SU=s_su, E_star=e_star, S_thermo=s_thermo, F_SU=f,
                    H_B2=h_b2, mf=mf)

    def _marginal_free_energy(self, rho: np.ndarray, instant: Instant) -> float:
        rho_s = partial_trace(rho, self.layout, ("S",))
        return noneq_free_energy(rho_s, self.mean_force_s(instant))

    def _unit_entropies(self, rho: np.ndarray) -> list[float]:
        return [von_neumann_entropy(partial_trace(rho, self.layout, (u,))) for u in self.layout.units()]

    def _reference(self) -> _Reference:
        start = self.config.schedule.start()
        rho0 = self.sim.rho0
        en = self._energetics(rho0, start)
        return _Reference(
            energy=expect(self.sim.hamiltonian(start), rho0),
            E_star=en["E_star"], F_SU=en["F_SU"], S_thermo=en["S_thermo"], H_B2=en["H_B2"],
            F_S=self._marginal_free_energy(rho0, start),
            S_units=self._unit_entropies(rho0),
        )

    # -- unmeasured ledger ------------------------------------------------

    def work(self, rho: np.ndarray, instant: Instant) -> float:
        """``⟨H_tot(λ_t)⟩(t) − ⟨H_tot(λ_0⁻)⟩(t_0⁻)``."""
        return expect(self.sim.hamiltonian(instant), rho) - self._ref.energy

    def snapshot(self, rho: np.ndarray, instant: Instant, w_power: float = float("nan")) -> LedgerSnapshot:
        ref = self._ref
        en = self._energetics(rho, instant)
        W = self.work(rho, instant)
        Q2 = -(en["H_B2"] - ref.H_B2)
        Q1 = en["E_star"] - ref.E_star - W - Q2
        b2 = self.beta2 if self.beta2 is not None else 0.0
        sigma_thermo = en["S_thermo"] - ref.S_thermo - self.beta * Q1 - b2 * Q2
        relent = (relative_entropy_spectral(rho, *self.reference_log(instant))
                  - relative_entropy(en["rho_su"], en["mf"].pistar))
        sigma_free = None
        if self.beta2 is None:
            sigma_free = self.beta * (W - (en["F_SU"] - ref.F_SU))
        sigma = sigma_free if sigma_free is not None else sigma_thermo
        snap = LedgerSnapshot(instant, W, w_power, en["F_SU"], sigma, relent, sigma_thermo,
                              en["E_star"], Q1, Q2, en["S_thermo"], en["S_SU"], sigma_free)
        if self.marginal_available(instant):
            snap.Sigma_S = self._sigma_s(rho, instant, W)
        return snap

    def marginal_available(self, instant: Instant) -> bool:
        sch = self.config.schedule
        return (DEGENERATE in self.config.modes and self.beta2 is None
                and instant in [sch.boundary(k) for k in range(self.layout.n_units + 1)])

    def _sigma_s(self, rho: np.ndarray, instant: Instant, W: float) -> float:
        dF = self._marginal_free_energy(rho, instant) - self._ref.F_S
        dS_u = sum(a - b for a, b in zip(self._unit_entropies(rho), self._ref.S_units))
        return self.beta * (W - dF) + dS_u

    def ledger(self, instants: Sequence[Instant]) -> list[LedgerSnapshot]:
        """Average ledger at sorted ``instants``; per-interval marginal deltas
        are filled in at consecutive boundaries."""
        states = self.sim.states(instants)
        powers = self.sim.power_work(instants)
        snaps = [self.snapshot(r, i, p) for r, i, p in zip(states, instants, powers)]
        sch = self.config.schedule
        if self.marginal_available(sch.start()):
            by_instant = {s.instant: s for s in snaps}
            for k in range(1, self.layout.n_units + 1):
                cur = by_instant.get(sch.boundary(k))
                prev = by_instant.get(sch.boundary(k - 1))
                if cur is not None and cur.Sigma_S is not None:
                    prev_val = 0.0 if k == 1 else (prev.Sigma_S if prev is not None else None)
                    if prev_val is None:
                        prev_val = self.marginal_entropy_production(k - 1)[0]
                    cur.delta_Sigma_S = cur.Sigma_S - prev_val
        return snaps

    def entropy_production(self, instant: Instant) -> tuple[float, float]:
        """``(Σ, Σ_relent)``: first-law/free-energy route and relative-entropy route."""
        s = self.snapshot(self.sim.state(instant), instant)
        return s.Sigma, s.Sigma_relent

    def marginal_entropy_production(self, boundary: int) -> tuple[float, float]:
        """``Σ_S(t_k⁻)`` and its increment over the preceding interval."""
        sch = self.config.schedule
        if DEGENERATE not in self.config.modes or self.beta2 is not None:
            raise ValueError("marginal entropy production needs degenerate units and one bath")
        if not 0 <= boundary <= self.layout.n_units:
            raise ValueError(f"no boundary t_{boundary}; must be evaluated at interval boundaries")
        insts = [sch.boundary(k) for k in range(max(boundary - 1, 0), boundary + 1)]
        states = self.sim.states(insts)
        vals = [self._sigma_s(r, i, self.work(r, i)) for r, i in zip(states, insts)]
        if boundary == 0:
            return vals[-1], 0.0
        return vals[-1], vals[-1] - vals[0]

    def strong_coupling_quantities(self, instant: Instant, mode: str | None = None):
        """``(E*, Q or (Q1, Q2), S_thermo)`` at ``instant``."""
        two = self.beta2 is not None
        if mode is not None and (mode == "two-bath") != two:
            raise ValueError(f"mode {mode!r} does not match the scenario")
        s = self.snapshot(self.sim.state(instant), instant)
        return s.E_star, ((s.Q1, s.Q2) if two else s.Q1), s.S_thermo

    # -- stochastic ledger ------------------------------------------------

    def stochastic_ledger(self, node: TrajectoryNode, rho_tilde: np.ndarray, w: float,
                          instant: Instant, unconditional: np.ndarray) -> StochasticLedger:
        """Ledger of record ``node.outcomes`` at ``instant`` (after its last measurement).

        ``rho_tilde`` is the subnormalised global state at ``instant`` and
        ``unconditional`` the unmeasured state there.
        """
        lay, ref, beta = self.layout, self._ref, self.beta
        p = float(np.trace(rho_tilde).real)
        if p < 1e-14:
            raise ValueError(f"record {node.outcomes} has been pruned (p = {p:.3e})")
        rho = rho_tilde / p
        en = self._energetics(rho, instant)
        mf = en["mf"]
        s_cond = en["S_SU"]
        ln_p = np.log(p)
        f = expect(mf.hstar, en["rho_su"]) + (ln_p - s_cond) / beta
        s = en["S_thermo"] - ln_p
        e_u = sum(expect(h, rho) for h in self._h_u)
        E_u = sum(expect(h, unconditional) for h in self._h_u)
        q_meas = e_u - E_u
        q2 = -(en["H_B2"] - ref.H_B2)
        q1 = en["E_star"] - ref.E_star - w - q2 - q_meas
        b2 = self.beta2 if self.beta2 is not None else 0.0
        sigma = s - ref.S_thermo - beta * q1 - b2 * q2
        sigma_free = None
        if self.beta2 is None:
            sigma_free = beta * (w - (f - ref.F_SU)) + beta * q_meas
        return StochasticLedger(node.outcomes, p, w, f, sigma, en["E_star"], q1, q_meas, q1, q2,
                                s, s_cond, sigma_free)

    def stochastic_summary(self, tree: BranchTree, instant: Instant,
                           unconditional: np.ndarray | None = None) -> StochasticSummary:
        if unconditional is None:
            unconditional = self.sim.state(instant)
        ledgers = [self.stochastic_ledger(node, rho, w, instant, unconditional)
                   for node, rho, w in tree.branches_at(instant)]
        total = sum(l.prob for l in ledgers)
        pruned = max(0.0, 1.0 - total)
        norm = total if pruned > PRUNED_MEASURE_FLAG else 1.0

        def avg(attr):
            return sum(l.prob * getattr(l, attr) for l in ledgers) / norm

        s_su = von_neumann_entropy(partial_trace(unconditional, self.layout, self.su))
        gap = sum(l.prob * (l.S_cond - np.log(l.prob)) for l in ledgers) / norm - s_su
        return StochasticSummary(instant, avg("w"), avg("f_SU"), avg("sigma"), avg("q"),
                                 avg("q1"), avg("q2"), avg("q_meas"), gap, pruned, ledgers)

    def average_sigma_gap(self, tree: BranchTree, instant: Instant | None = None) -> float:
        """``Σ_r̄ p {S[ρ_SU(r̄)] − ln p} − S[ρ_SU]`` at ``instant`` (default: end)."""
        instant = self.config.schedule.end() if instant is None else instant
        return self.stochastic_summary(tree, instant).gap


def work(sim: Simulator, rho: np.ndarray, instant: Instant) -> float:
    return Thermodynamics(sim).work(rho, instant)


def entropy_production(thermo: Thermodynamics, instant: Instant) -> tuple[float, float]:
    return thermo.entropy_production(instant)


def marginal_entropy_production(thermo: Thermodynamics, boundary: int) -> tuple[float, float]:
    return thermo.marginal_entropy_production(boundary)


def strong_coupling_quantities(thermo: Thermodynamics, instant: Instant, mode: str | None = None):
    return thermo.strong_coupling_quantities(instant, mode)


def average_sigma_gap(thermo: Thermodynamics, tree: BranchTree, instant: Instant | None = None) -> float:
    return thermo.average_sigma_gap(tree, instant)
