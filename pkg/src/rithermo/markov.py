"""Markovianity diagnostics: map tomography, CP-divisibility and the
dissipation monotone of the reduced system dynamics.

Maps act on the system only and are stored as Choi matrices
``J = Σ_ij |i⟩⟨j| ⊗ Λ(|i⟩⟨j|)`` (input factor first).  Superoperators use
row-major vectorisation, ``vec(ρ)[i·d + j] = ρ[i, j]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .dynamics import Simulator
from .model import Instant, ScenarioConfig, total_hamiltonian
from .opalg import partial_trace, relative_entropy, tensor_embed, von_neumann_entropy
from .thermo import Thermodynamics, noneq_free_energy

SVD_CUTOFF = 1e-10
CP_TOL = 1e-8
SWAP = "swap"
ANCHORED = "anchored"
FAMILIES = (SWAP, ANCHORED)


@dataclass
class DynamicalMap:
    choi: np.ndarray
    t_from: Instant | None = None
    t_to: Instant | None = None
    family: str = ""
    condition: float = 1.0

    @property
    def dim(self) -> int:
        return int(round(np.sqrt(self.choi.shape[0])))

    @property
    def superop(self) -> np.ndarray:
        d = self.dim
        return self.choi.reshape(d, d, d, d).transpose(1, 3, 0, 2).reshape(d * d, d * d)

    @classmethod
    def from_superop(cls, sup: np.ndarray, **kw) -> "DynamicalMap":
        d = int(round(np.sqrt(sup.shape[0])))
        choi = sup.reshape(d, d, d, d).transpose(2, 0, 3, 1).reshape(d * d, d * d)
        return cls(choi, **kw)

    @classmethod
    def identity(cls, d: int, **kw) -> "DynamicalMap":
        return cls.from_superop(np.eye(d * d, dtype=complex), **kw)

    def apply(self, rho: np.ndarray) -> np.ndarray:
        d = self.dim
        return (self.superop @ np.asarray(rho).reshape(-1)).reshape(d, d)

    def compose(self, first: "DynamicalMap") -> "DynamicalMap":
        """``self ∘ first``."""
        return DynamicalMap.from_superop(self.superop @ first.superop, t_from=first.t_from,
                                         t_to=self.t_to, family=self.family)

    @property
    def min_choi_eigenvalue(self) -> float:
        j = 0.5 * (self.choi + self.choi.conj().T)
        return float(np.linalg.eigvalsh(j).min())

    @property
    def tp_defect(self) -> float:
        d = self.dim
        red = np.einsum("iaja->ij", self.choi.reshape(d, d, d, d))
        return float(np.max(np.abs(red - np.eye(d))))


@dataclass
class DivisibilityReport:
    intermediate: DynamicalMap
    min_eigenvalue: float
    tp_defect: float
    condition: float
    truncated: int
    verdict: str


@dataclass
class DissipationReport:
    t1: Instant
    t2: Instant
    delta_sigma_s: float
    free_energy_route: float
    d1: float
    d2: float
    guaranteed: bool
    note: str = ""

    @property
    def relent_route(self) -> float:
        return self.d1 - self.d2


# --- preparations ------------------------------------------------------------

def basis_states(d: int) -> list[np.ndarray]:
    """``d²`` pure states spanning the operator space: ``|i⟩``, ``|i⟩+|j⟩``, ``|i⟩+i|j⟩``."""
    vecs = [np.eye(d, dtype=complex)[i] for i in range(d)]
    for i in range(d):
        for j in range(i + 1, d):
            e = np.zeros(d, dtype=complex)
            e[i], e[j] = 1, 1
            vecs.append(e / np.sqrt(2))
            e = e.copy()
            e[j] = 1j
            vecs.append(e / np.sqrt(2))
    return [np.outer(v, v.conj()) for v in vecs]


def _check_template(cfg: ScenarioConfig) -> None:
    if 0 not in cfg.schedule.kicks:
        raise ValueError("tomography needs a preparation kick on unit U(0) at t_0")
    if cfg.joint_unit_state is not None:
        raise ValueError("tomography varies U(0) alone; use product unit states")
    if cfg.layout.dim(["U0"]) != cfg.layout.dim(["S"]):
        raise ValueError("preparation unit must match the system dimension")


def _with_unit0(sim: Simulator, rho_u: np.ndarray) -> np.ndarray:
    """Initial global state of ``sim`` with ``U(0)`` replaced by ``rho_u``."""
    lay = sim.layout
    rest = [n for n in lay.names if n != "U0"]
    base = partial_trace(sim.rho0, lay, rest)
    return tensor_embed(np.kron(base, rho_u), rest + ["U0"], lay)


def control_free(cfg: ScenarioConfig) -> ScenarioConfig:
    """The identity control: the same scenario without the ``U(0)`` kick."""
    kicks = {k: v for k, v in cfg.schedule.kicks.items() if k != 0}
    from dataclasses import replace
    return cfg.replace(schedule=replace(cfg.schedule, kicks=kicks))


def mean_force_state(cfg: ScenarioConfig, instant: Instant | None = None) -> np.ndarray:
    """``π*_S`` of ``H_SB`` at ``instant`` (default ``t_0⁻``)."""
    th = Thermodynamics(Simulator(cfg, validate=False))
    instant = cfg.schedule.start() if instant is None else instant
    return th.mean_force_s(instant).pistar


def _invert(inputs: list[np.ndarray], outputs: list[np.ndarray]) -> tuple[np.ndarray, float]:
    a = np.stack([x.reshape(-1) for x in inputs], axis=1)
    b = np.stack([y.reshape(-1) for y in outputs], axis=1)
    cond = float(np.linalg.cond(a))
    if not np.isfinite(cond) or cond > 1 / SVD_CUTOFF:
        raise np.linalg.LinAlgError(f"preparation basis is ill-conditioned (cond {cond:.3e})")
    return b @ np.linalg.inv(a), cond


def tomography_series(cfg: ScenarioConfig, times: Sequence[Instant], family: str = ANCHORED,
                      sim: Simulator | None = None) -> list[DynamicalMap]:
    """Reduced maps ``Λ(t, t_0)`` at sorted ``times`` by linear inversion.

    ``swap`` prepares ``d²`` basis states through the ``U(0)`` kick; the map
    is then linear in the prepared state and completely positive.
    ``anchored`` replaces ``|d-1⟩`` by the identity control, whose
    "prepared" state is the undisturbed ``π*_S``, so ``Λ π*_S`` is read off
    the unperturbed run.
    """
    if family not in FAMILIES:
        raise ValueError(f"unknown tomography family {family!r}; use one of {FAMILIES}")
    _check_template(cfg)
    sim = Simulator(cfg) if sim is None else sim
    lay = sim.layout
    d = lay.dim(["S"])
    preps = basis_states(d)
    runs = []
    if family == ANCHORED:
        free = Simulator(control_free(cfg), validate=False)
        del preps[d - 1]  # π*_S is full rank, so it restores the last diagonal direction
        runs.append((partial_trace(sim.rho0, lay, ["S"]), free.states(times)))
    for p in preps:
        runs.append((p, sim.states(times, rho0=_with_unit0(sim, p))))
    inputs = [r[0] for r in runs]
    maps = []
    for i, t in enumerate(times):
        outputs = [partial_trace(r[1][i], lay, ["S"]) for r in runs]
        sup, cond = _invert(inputs, outputs)
        maps.append(DynamicalMap.from_superop(sup, t_from=cfg.schedule.start(), t_to=t,
                                              family=family, condition=cond))
    return maps


def tomographic_map(cfg: ScenarioConfig, t_to: Instant, family: str = ANCHORED) -> DynamicalMap:
    return tomography_series(cfg, [t_to], family)[0]


def segment_map(sim: Simulator, t_from: Instant, t_to: Instant) -> DynamicalMap:
    """``Λ(t_to, t_from)`` obtained by re-preparing the system at ``t_from`` in
    product with the environment marginal of the unmeasured run.

    Equals the true intermediate map whenever system and environment are
    uncorrelated at ``t_from`` (e.g. without a bath and with fresh units).
    """
    lay = sim.layout
    rest = [n for n in lay.names if n != "S"]
    rho_t = sim.state(t_from)
    env = partial_trace(rho_t, lay, rest)
    preps = basis_states(lay.dim(["S"]))
    outputs = []
    for p in preps:
        rho = tensor_embed(np.kron(p, env), ["S"] + rest, lay)
        rho, _ = sim.advance(rho, t_from, t_to)
        outputs.append(partial_trace(rho, lay, ["S"]))
    sup, cond = _invert(preps, outputs)
    return DynamicalMap.from_superop(sup, t_from=t_from, t_to=t_to, family="product-reset",
                                     condition=cond)


# --- diagnostics -------------------------------------------------------------------

def truncated_inverse(sup: np.ndarray, cutoff: float = SVD_CUTOFF) -> tuple[np.ndarray, float, int]:
    """Pseudo-inverse with singular values below ``cutoff·s_max`` dropped."""
    u, s, vh = np.linalg.svd(sup)
    keep = s > cutoff * s[0]
    inv_s = np.where(keep, 1 / np.where(keep, s, 1), 0)
    cond = float(s[0] / s[keep][-1]) if keep.any() else float("inf")
    return (vh.conj().T * inv_s) @ u.conj().T, cond, int((~keep).sum())


def divisibility_check(later: DynamicalMap, earlier: DynamicalMap,
                       cutoff: float = SVD_CUTOFF) -> DivisibilityReport:
    """Intermediate map ``Λ(t2,t0) Λ(t1,t0)⁻¹`` with graded evidence."""
    inv, cond, dropped = truncated_inverse(earlier.superop, cutoff)
    mid = DynamicalMap.from_superop(later.superop @ inv, t_from=earlier.t_to, t_to=later.t_to,
                                    family=later.family, condition=cond)
    lam = mid.min_choi_eigenvalue
    if dropped:
        verdict = "indeterminate"
    else:
        verdict = "markovian" if lam >= -CP_TOL else "non-markovian"
    return DivisibilityReport(mid, lam, mid.tp_defect, cond, dropped, verdict)


def fixed_point_check(lam: DynamicalMap, pistar: np.ndarray) -> float:
    """``‖Λ π* − π*‖_max``."""
    return float(np.max(np.abs(lam.apply(pistar) - pistar)))


def _h_sb_constant(cfg: ScenarioConfig, t1: Instant, t2: Instant) -> bool:
    sch, lay = cfg.schedule, cfg.layout
    n = lay.n_units
    ex = ["h_b2", "v_sb2"] + [f"h_u{k}" for k in range(n)] + [f"v_su{k}" for k in range(n)]
    target = ("S",) + (("B",) if lay.has_bath else ())
    a = total_hamiltonian(sch, lay, t1, ex, target)
    b = total_hamiltonian(sch, lay, t2, ex, target)
    return bool(np.array_equal(a, b))


class DissipationProbe:
    """Marginal entropy production of the system between pairs of times.

    ``Σ_S(t) = β[W(t) − ΔF_S(t)] + Σ_k ΔS[ρ_U(k)]`` evaluated on the
    unmeasured run at instants where no unit is coupled.
    """

    def __init__(self, sim: Simulator, thermo: Thermodynamics | None = None):
        self.sim = sim
        self.config = sim.config
        self.thermo = Thermodynamics(sim) if thermo is None else thermo
        self._cache: dict = {}

    def _coupled(self, instant: Instant) -> bool:
        sch = self.config.schedule
        k = sch.interval_of(instant)
        if k is None:
            return False
        v = sch.v_su_value(k, instant)
        return v is not None and bool(np.any(v != 0))

    def point(self, instant: Instant, rho: np.ndarray | None = None) -> dict:
        if instant in self._cache:
            return self._cache[instant]
        if self._coupled(instant):
            raise ValueError(f"a unit is coupled at {instant}; Σ_S needs decoupled units")
        th, lay = self.thermo, self.sim.layout
        rho = self.sim.state(instant) if rho is None else rho
        rho_s = partial_trace(rho, lay, ["S"])
        mf = th.mean_force_s(instant)
        s_u = sum(von_neumann_entropy(partial_trace(rho, lay, [u])) for u in lay.units())
        out = dict(W=th.work(rho, instant), F_S=noneq_free_energy(rho_s, mf), S_U=s_u,
                   D=relative_entropy(rho_s, mf.pistar), rho_s=rho_s)
        self._cache[instant] = out
        return out

    def preload(self, instants: Sequence[Instant]) -> None:
        todo = [i for i in instants if i not in self._cache]
        for i, r in zip(todo, self.sim.states(todo)):
            self.point(i, r)

    def sigma_s(self, instant: Instant) -> float:
        p0 = self.point(self.config.schedule.start())
        p = self.point(instant)
        beta = self.config.beta
        return beta * (p["W"] - (p["F_S"] - p0["F_S"])) + p["S_U"] - p0["S_U"]

    def dissipation(self, t1: Instant, t2: Instant) -> DissipationReport:
        if not t1 < t2:
            raise ValueError("need t1 < t2")
        beta = self.config.beta
        a, b = self.point(t1), self.point(t2)
        delta = self.sigma_s(t2) - self.sigma_s(t1)
        fe = -beta * (b["F_S"] - a["F_S"])
        undriven = abs(b["W"] - a["W"]) <= 1e-13 and _h_sb_constant(self.config, t1, t2)
        note = "" if undriven else "no sign guarantee: driven between t1 and t2"
        return DissipationReport(t1, t2, delta, fe, a["D"], b["D"], undriven, note)


def dissipation_monotone(sim: Simulator, t1: Instant, t2: Instant) -> DissipationReport:
    """``(ΔΣ_S, D1, D2)`` between ``t1`` and ``t2`` with the free-energy route."""
    return DissipationProbe(sim).dissipation(t1, t2)


@dataclass
class SweepRow:
    t1: Instant
    t2: Instant
    min_choi: float
    tp_defect: float
    condition: float
    truncated: int
    verdict: str
    fixed_point_defect: float
    delta_sigma_s: float
    free_energy_route: float
    relent_route: float
    guaranteed: bool

    @property
    def backflow(self) -> bool:
        return self.delta_sigma_s < 0


@dataclass
class SweepResult:
    times: list[Instant]
    maps: list[DynamicalMap]
    pistar: np.ndarray
    rows: list[SweepRow] = field(default_factory=list)


def markov_sweep(cfg: ScenarioConfig, times: Sequence[Instant], family: str = ANCHORED) -> SweepResult:
    """Divisibility, fixed point and dissipation on all pairs ``t1 < t2`` of ``times``."""
    times = sorted(times)
    sim = Simulator(cfg)
    maps = tomography_series(cfg, times, family, sim=sim)
    pistar = mean_force_state(cfg)
    probe = DissipationProbe(sim)
    probe.preload([cfg.schedule.start()] + list(times))
    res = SweepResult(list(times), maps, pistar)
    for i, t1 in enumerate(times):
        for j in range(i + 1, len(times)):
            t2 = times[j]
            div = divisibility_check(maps[j], maps[i])
            dis = probe.dissipation(t1, t2)
            res.rows.append(SweepRow(t1, t2, div.min_eigenvalue, div.tp_defect, div.condition,
                                     div.truncated, div.verdict, fixed_point_check(maps[j], pistar),
                                     dis.delta_sigma_s, dis.free_energy_route, dis.relent_route,
                                     dis.guaranteed))
    return res
