"""Exact global propagation, unit measurements and outcome trees.

The protocol is piecewise constant, so the global propagator between two
instants is a finite ordered product of exact exponentials.  Switches of the
Hamiltonian are sudden quenches; their energy jumps ``tr(ΔH ρ)`` are tracked
along the way so that the stochastic work of every branch is available.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import (
    Instant,
    ScenarioConfig,
    hamiltonian_terms,
    initial_state,
    total_hamiltonian,
)
from .opalg import (
    OperatorError,
    expm_hermitian,
    partial_trace,
    tensor_embed,
)

log = logging.getLogger(__name__)

PRUNE = 1e-14
DEFAULT_BRANCH_CAP = 4096


class BranchCapError(RuntimeError):
    """Exhaustive branching would exceed the configured cap."""


@dataclass(eq=False)
class TrajectoryNode:
    """A measurement record ``r̄_k`` and its subnormalised global state.

    ``state`` lives at ``instant`` (the boundary ``t_{k+1}⁻`` right after the
    measurement of unit ``k``); ``prob`` is its trace and ``work`` the
    stochastic work accumulated up to ``instant``.
    """

    outcomes: tuple[int, ...]
    state: np.ndarray
    prob: float
    instant: Instant
    work: float = 0.0
    parent: "TrajectoryNode | None" = field(default=None, repr=False)

    @property
    def level(self) -> int:
        return len(self.outcomes)

    @property
    def label(self) -> str:
        return "".join(str(r) for r in self.outcomes) or "-"

    def conditional_state(self) -> np.ndarray:
        return self.state / self.prob


@dataclass(frozen=True)
class _Event:
    key: tuple[float, int]
    order: int
    kind: str  # "switch" | "off" | "kick"
    unit: int | None = None


class Simulator:
    """Event-driven exact propagation of a scenario.

    Propagators, Hamiltonians and quench operators are cached per protocol
    segment, so repeated runs (branches, tomography preparations) are cheap.
    """

    def __init__(self, config: ScenarioConfig, substeps: int = 1, validate: bool = True):
        if validate:
            config.validate()
        if substeps < 1:
            raise ValueError("substeps must be >= 1")
        self.config = config
        self.layout = config.layout
        self.schedule = config.schedule
        self.substeps = substeps
        self._h_cache: dict = {}
        self._u_cache: dict = {}
        self._dh_cache: dict = {}
        self._p_cache: dict = {}
        self._rho0: np.ndarray | None = None
        self.events = self._build_events()

    # -- protocol ---------------------------------------------------------

    def _build_events(self) -> list[_Event]:
        sch = self.schedule
        ev = [_Event((t, 1), 0, "switch") for t in sch.switch_times()]
        b = sch.boundaries
        for k, entries in enumerate(sch.v_su):
            if entries and np.any(entries[-1][1] != 0):
                ev.append(_Event((b[k + 1], 0), 0, "off", k))
        for k in sorted(sch.kicks):
            ev.append(_Event((b[k], 1), 1, "kick", k))
        return sorted(ev, key=lambda e: (e.key, e.order))

    @property
    def rho0(self) -> np.ndarray:
        if self._rho0 is None:
            self._rho0 = initial_state(self.config)
        return self._rho0

    def hamiltonian(self, instant: Instant) -> np.ndarray:
        key = self.schedule.segment_key(instant)
        if key not in self._h_cache:
            self._h_cache[key] = total_hamiltonian(self.schedule, self.layout, instant)
        return self._h_cache[key]

    def propagator(self, instant: Instant, dt: float) -> np.ndarray:
        """Full-space unitary for ``dt`` under the Hamiltonian in effect right after ``instant``.

        The exponential is taken on the active factors (system, baths and the
        interacting unit); the other units evolve under their own free
        Hamiltonians as spectators.
        """
        key = (self.schedule.segment_key(instant), dt)
        u = self._u_cache.get(key)
        if u is not None:
            return u
        lay, sch = self.layout, self.schedule
        k = sch.interval_of(instant)
        active = ["S"] + [n for n in ("B", "B2") if n in lay.names]
        if k is not None:
            active.append(f"U{k}")
        h_act = np.zeros((lay.dim(active),) * 2, dtype=complex)
        spectators = []
        for label, op, factors in hamiltonian_terms(sch, lay, instant):
            if set(factors) <= set(active):
                h_act += tensor_embed(op, factors, lay, active)
            else:
                spectators.append((op, factors))
        step = expm_hermitian(h_act, -1j * dt / self.substeps)
        u_act = np.linalg.matrix_power(step, self.substeps) if self.substeps > 1 else step
        u = tensor_embed(u_act, active, lay)
        for op, factors in spectators:
            d = op.shape[0]
            off = op - np.trace(op) / d * np.eye(d)
            if np.max(np.abs(off)) == 0.0:
                continue  # pure phase
            u = u @ tensor_embed(expm_hermitian(op, -1j * dt), factors, lay)
        self._u_cache[key] = u
        return u

    def _quench(self, ev: _Event) -> np.ndarray:
        """``ΔH`` of a switch event (full space)."""
        if ev in self._dh_cache:
            return self._dh_cache[ev]
        t = ev.key[0]
        if ev.kind == "switch":
            dh = self.hamiltonian(Instant(t)) - self.hamiltonian(Instant(t, True))
        else:
            last = self.schedule.v_su[ev.unit][-1][1]
            dh = -tensor_embed(last, ("S", f"U{ev.unit}"), self.layout)
        self._dh_cache[ev] = dh
        return dh

    def kick_unitary(self, k: int) -> np.ndarray:
        key = ("kick", k)
        if key not in self._u_cache:
            v = self.schedule.kicks[k]
            u = expm_hermitian(v, -1j)
            self._u_cache[key] = tensor_embed(u, ("S", f"U{k}"), self.layout)
        return self._u_cache[key]

    # -- propagation ------------------------------------------------------

    def advance(self, rho: np.ndarray, a: Instant, b: Instant) -> tuple[np.ndarray, float]:
        """Evolve ``rho`` from instant ``a`` to ``b`` (switches and kicks only).

        Returns the evolved operator and the summed energy jumps
        ``Σ tr(ΔH ρ)`` of all quenches and kicks in ``(a, b]``; for a
        subnormalised ``rho`` divide by its trace for the conditional work.
        Measurements are not applied here.
        """
        if b < a:
            raise ValueError(f"cannot propagate backwards from {a} to {b}")
        sch = self.schedule
        if not (sch.in_range(a) and sch.in_range(b)):
            raise OperatorError(f"instants {a}, {b} outside schedule")
        work = 0.0
        cur = a.t
        for ev in self.events:
            if ev.key <= a.key:
                continue
            if ev.key > b.key:
                break
            t = ev.key[0]
            if t > cur:
                u = self.propagator(Instant(cur), t - cur)
                rho = u @ rho @ u.conj().T
                cur = t
            if ev.kind == "kick":
                h = self.hamiltonian(Instant(t))
                k = self.kick_unitary(ev.unit)
                new = k @ rho @ k.conj().T
                work += float(np.real(np.einsum("ij,ji->", h, new - rho)))
                rho = new
            else:
                work += float(np.real(np.einsum("ij,ji->", self._quench(ev), rho)))
        if b.t > cur:
            u = self.propagator(Instant(cur), b.t - cur)
            rho = u @ rho @ u.conj().T
        return rho, work

    def states(self, instants: Sequence[Instant], rho0: np.ndarray | None = None) -> list[np.ndarray]:
        """Unmeasured global states at sorted ``instants``, from ``rho0`` at ``t_0⁻``
        (default: the configured initial state)."""
        out = []
        rho, cur = (self.rho0 if rho0 is None else rho0), self.schedule.start()
        for inst in instants:
            rho, _ = self.advance(rho, cur, inst)
            cur = inst
            out.append(rho)
        return out

    def state(self, instant: Instant) -> np.ndarray:
        return self.states([instant])[0]

    def power_work(self, instants: Sequence[Instant]) -> list[float]:
        """Work as the accumulated quench jumps (power-integral route)."""
        out, total = [], 0.0
        rho, cur = self.rho0, self.schedule.start()
        for inst in instants:
            rho, w = self.advance(rho, cur, inst)
            total += w
            cur = inst
            out.append(total)
        return out

    # -- measurement ------------------------------------------------------

    def projector(self, k: int, r: int) -> np.ndarray:
        key = (k, r)
        if key not in self._p_cache:
            p = self.config.instrument(k)[r]
            self._p_cache[key] = tensor_embed(p, (f"U{k}",), self.layout)
        return self._p_cache[key]

    def root(self) -> TrajectoryNode:
        return TrajectoryNode((), self.rho0, 1.0, self.schedule.start())

    def evolve_node(self, node: TrajectoryNode, instant: Instant) -> tuple[np.ndarray, float]:
        """Subnormalised state of ``node`` carried to ``instant`` and its stochastic work there."""
        rho, dw = self.advance(node.state, node.instant, instant)
        return rho, node.work + dw / node.prob

    def children(self, node: TrajectoryNode, pruned: list | None = None) -> list[TrajectoryNode]:
        """Propagate over ``I_k`` and measure unit ``k = node.level``."""
        k = node.level
        if k >= self.layout.n_units:
            return []
        end = self.schedule.boundary(k + 1)
        rho, w = self.evolve_node(node, end)
        return measure_unit(self, TrajectoryNode(node.outcomes, rho, node.prob, end, w, node.parent),
                            k, pruned=pruned, parent=node)


def measure_unit(sim: Simulator, node: TrajectoryNode, k: int,
                 instrument: Sequence[np.ndarray] | None = None,
                 pruned: list | None = None, parent: TrajectoryNode | None = None) -> list[TrajectoryNode]:
    """Apply the instrument ``{P_r}`` of unit ``k`` to ``node``.

    The node must sit at ``t_{k+1}⁻``, where the unit is decoupled.  Children
    with probability below ``PRUNE`` are dropped (and appended to ``pruned``).
    """
    if node.instant != sim.schedule.boundary(k + 1):
        raise ValueError(f"unit {k} can only be measured at {sim.schedule.boundary(k + 1)}")
    if instrument is None:
        ops = [sim.projector(k, r) for r in range(len(sim.config.instrument(k)))]
    else:
        d = sim.layout.dim([f"U{k}"])
        total = sum(p @ p for p in instrument)
        defect = float(np.max(np.abs(total - np.eye(d))))
        if defect > 1e-10:
            raise OperatorError(f"instrument of unit {k} not normalised: defect {defect:.3e}")
        ops = [tensor_embed(p, (f"U{k}",), sim.layout) for p in instrument]
    out = []
    for r, p in enumerate(ops):
        rho = p @ node.state @ p
        prob = float(np.trace(rho).real)
        child = TrajectoryNode(node.outcomes + (r,), rho, prob, node.instant, node.work,
                               parent if parent is not None else node)
        if prob < PRUNE:
            if pruned is not None:
                pruned.append(child)
            continue
        out.append(child)
    return out


def propagate_interval(sim: Simulator, state: np.ndarray, k: int) -> np.ndarray:
    """Global evolution ``U_{k+1,k}`` from ``t_k⁻`` to ``t_{k+1}⁻``."""
    if not 0 <= k < sim.layout.n_units:
        raise ValueError(f"no interval {k}")
    return sim.advance(state, sim.schedule.boundary(k), sim.schedule.boundary(k + 1))[0]


@dataclass
class BranchTree:
    sim: Simulator
    levels: list[list[TrajectoryNode]]
    pruned: list[TrajectoryNode]
    deferred_defect: float = float("nan")
    average_defect: float = float("nan")

    @property
    def leaves(self) -> list[TrajectoryNode]:
        return self.levels[-1]

    @property
    def pruned_measure(self) -> float:
        return float(sum(n.prob for n in self.pruned))

    def level_at(self, instant: Instant) -> int:
        """Number of units already measured at ``instant``."""
        b = self.sim.schedule
        return sum(b.boundary(k + 1) <= instant for k in range(self.sim.layout.n_units))

    def branches_at(self, instant: Instant) -> list[tuple[TrajectoryNode, np.ndarray, float]]:
        """``(node, ρ̃(r̄_n, t), w(r̄_n, t))`` for every record measured by ``instant``."""
        n = self.level_at(instant)
        return [(node, *self.sim.evolve_node(node, instant)) for node in self.levels[n]]


def branch_all(sim: Simulator, cap: int = DEFAULT_BRANCH_CAP, check: bool = True) -> BranchTree:
    """Enumerate every outcome record up to ``t_{n+1}⁻``.

    With ``check`` the leaves are compared with the measurements applied all
    at once to the unmeasured final state (deferred form), and the summed
    system-bath marginals with the unmeasured ones.
    """
    cfg = sim.config
    n = sim.layout.n_units
    size = int(np.prod([len(cfg.instrument(k)) for k in range(n)], dtype=float)) if n else 1
    if size > cap:
        raise BranchCapError(f"{size} outcome records exceed the branch cap {cap}; "
                             "use sample_trajectories instead")
    levels = [[sim.root()]]
    pruned: list[TrajectoryNode] = []
    for k in range(n):
        nxt = []
        for node in levels[-1]:
            nxt.extend(sim.children(node, pruned))
        levels.append(nxt)
    tree = BranchTree(sim, levels, pruned)
    if check and n:
        tree.deferred_defect, tree.average_defect = _deferred_checks(sim, tree)
    return tree


def _deferred_checks(sim: Simulator, tree: BranchTree) -> tuple[float, float]:
    lay, sch = sim.layout, sim.schedule
    n = lay.n_units
    end = sch.end()
    rho_end = sim.state(end)
    ops = {}
    for k in range(n):
        hu = sim.config.unit_hamiltonian(k)
        tau = sch.boundaries[-1] - sch.boundaries[k + 1]
        u = expm_hermitian(hu, -1j * tau)
        for r, p in enumerate(sim.config.instrument(k)):
            ops[k, r] = tensor_embed(u @ p @ u.conj().T, (f"U{k}",), lay)
    defect = 0.0
    for leaf in tree.leaves:
        m = np.eye(lay.total_dim, dtype=complex)
        for k, r in enumerate(leaf.outcomes):
            m = m @ ops[k, r]
        deferred = m @ rho_end @ m.conj().T
        defect = max(defect, float(np.max(np.abs(deferred - leaf.state))))
    keep = [f for f in lay.names if not f.startswith("U")]
    avg = sum(partial_trace(leaf.state, lay, keep) for leaf in tree.leaves)
    avg_defect = float(np.max(np.abs(avg - partial_trace(rho_end, lay, keep))))
    return defect, avg_defect


@dataclass
class SampledLeaf:
    node: TrajectoryNode
    count: int
    weight: float


def sample_trajectories(sim: Simulator, seed: int, count: int,
                        chunk: int = 4096) -> list[SampledLeaf]:
    """Monte Carlo outcome records with empirical weights.

    Nodes are expanded lazily and shared between samples.  Draws come from
    independent streams spawned from ``seed``, one per chunk of ``chunk``
    samples, so the result does not depend on how chunks are scheduled.
    """
    n = sim.layout.n_units
    root = sim.root()
    cache: dict[tuple[int, ...], list[TrajectoryNode]] = {}
    counts: dict[tuple[int, ...], int] = {}
    leaves: dict[tuple[int, ...], TrajectoryNode] = {}
    streams = np.random.SeedSequence(seed).spawn((count + chunk - 1) // chunk)
    done = 0
    for ss in streams:
        rng = np.random.default_rng(ss)
        m = min(chunk, count - done)
        u = rng.random((m, n))
        for i in range(m):
            node = root
            for k in range(n):
                kids = cache.get(node.outcomes)
                if kids is None:
                    kids = cache[node.outcomes] = sim.children(node)
                cum = np.cumsum([c.prob for c in kids]) / node.prob
                j = min(int(np.searchsorted(cum, u[i, k], side="right")), len(kids) - 1)
                node = kids[j]
            leaves[node.outcomes] = node
            counts[node.outcomes] = counts.get(node.outcomes, 0) + 1
        done += m
    return [SampledLeaf(leaves[o], counts[o], counts[o] / count) for o in sorted(counts)]


# -- instantaneous instruments -----------------------------------------------

@dataclass(frozen=True)
class InstrumentMap:
    """Outcome-labelled CP map on the system, stored as its Choi matrix
    ``J = Σ_ij |i⟩⟨j| ⊗ A(|i⟩⟨j|)`` (input factor first)."""

    label: int
    choi: np.ndarray

    @property
    def dim(self) -> int:
        return int(round(np.sqrt(self.choi.shape[0])))

    def apply(self, rho: np.ndarray) -> np.ndarray:
        d = self.dim
        j = self.choi.reshape(d, d, d, d)
        return np.einsum("ij,iajb->ab", rho, j)


def kick_instruments(v: np.ndarray, rho_u: np.ndarray, instrument: Sequence[np.ndarray],
                     d_s: int | None = None) -> list[InstrumentMap]:
    """Instruments ``ρ_S ↦ tr_U{P_r e^{-iv}(ρ_S⊗ρ_U)e^{iv} P_r}`` of a delta kick (ħ = 1)."""
    d_u = rho_u.shape[0]
    d_s = v.shape[0] // d_u if d_s is None else d_s
    if v.shape != (d_s * d_u, d_s * d_u):
        raise OperatorError(f"kick operator shape {v.shape} does not match {d_s}x{d_u}")
    u = expm_hermitian(v, -1j)
    eye_s = np.eye(d_s)
    maps = []
    for r, p in enumerate(instrument):
        k = np.kron(eye_s, p) @ u
        choi = np.zeros((d_s * d_s, d_s * d_s), dtype=complex)
        for i in range(d_s):
            for j in range(d_s):
                e = np.zeros((d_s, d_s), dtype=complex)
                e[i, j] = 1.0
                out = k @ np.kron(e, rho_u) @ k.conj().T
                out = np.einsum("aibi->ab", out.reshape(d_s, d_u, d_s, d_u))
                choi[i * d_s:(i + 1) * d_s, j * d_s:(j + 1) * d_s] = out
        maps.append(InstrumentMap(r, choi))
    return maps

