"""Physical scenario: driving protocol, global Hamiltonian, initial state,
Gibbs states and the Hamiltonian of mean force.

Time instants are :class:`Instant` objects.  ``Instant(t)`` is the state just
after every switch and kick scheduled at ``t``; ``Instant(t, minus=True)`` is
the instant ``t⁻`` just before them.  Boundary instants ``t_k⁻`` are where the
coupling to unit ``k-1`` has already been switched off and that unit is
measured.
"""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from functools import total_ordering
from typing import Sequence

import numpy as np

from .opalg import (
    CLAMP,
    CompositeLayout,
    OperatorError,
    eigh,
    hermiticity_defect,
    partial_trace,
    tensor_embed,
)

DEGENERATE = "degenerate-units"
ENERGETIC = "energetic-units"
TWO_BATH = "two-bath"
DRIVEN_COUPLING = "driven-coupling"
MODES = (DEGENERATE, ENERGETIC, TWO_BATH, DRIVEN_COUPLING)


class ConfigError(ValueError):
    """Scenario configuration violates a structural rule."""

    def __init__(self, issues):
        self.issues = list(issues)
        super().__init__("; ".join(str(i) for i in self.issues))


@dataclass(frozen=True)
class Issue:
    field: str
    message: str

    def __str__(self):
        return f"{self.field}: {self.message}"


@total_ordering
@dataclass(frozen=True)
class Instant:
    t: float
    minus: bool = False

    @property
    def key(self) -> tuple[float, int]:
        return (self.t, 0 if self.minus else 1)

    def __lt__(self, other: "Instant") -> bool:
        return self.key < other.key

    def __str__(self):
        return f"{self.t!r}-" if self.minus else repr(self.t)


def before(t: float) -> Instant:
    return Instant(float(t), True)


@dataclass(frozen=True)
class PiecewiseOperator:
    """Piecewise-constant operator: ``initial`` until the first switch, then
    ``switches[i][1]`` on ``[switches[i][0], switches[i+1][0])``."""

    initial: np.ndarray
    switches: tuple[tuple[float, np.ndarray], ...] = ()

    def __post_init__(self):
        times = [t for t, _ in self.switches]
        if times != sorted(times) or len(set(times)) != len(times):
            raise OperatorError("switch times must be strictly increasing")

    @classmethod
    def constant(cls, op) -> "PiecewiseOperator":
        return cls(np.asarray(op, dtype=complex))

    @property
    def times(self) -> list[float]:
        return [t for t, _ in self.switches]

    def segment(self, instant: Instant) -> int:
        """Index of the active piece (-1 for ``initial``)."""
        times = self.times
        if instant.minus:
            return bisect.bisect_left(times, instant.t) - 1
        return bisect.bisect_right(times, instant.t) - 1

    def value(self, instant: Instant) -> np.ndarray:
        i = self.segment(instant)
        return self.initial if i < 0 else self.switches[i][1]


def linear_ramp(t_start: float, t_end: float, a, b, steps: int) -> list[tuple[float, np.ndarray]]:
    """Midpoint-sampled piecewise-constant approximation of a linear ramp a→b.

    Returns switch entries; the last entry holds ``b`` from ``t_end`` on.
    """
    a = np.asarray(a, dtype=complex)
    b = np.asarray(b, dtype=complex)
    edges = np.linspace(t_start, t_end, steps + 1)
    out = []
    for i in range(steps):
        s = (i + 0.5) / steps
        out.append((float(edges[i]), (1 - s) * a + s * b))
    out.append((float(t_end), b))
    return out


@dataclass(frozen=True)
class ProtocolSchedule:
    """Piecewise driving over the interaction intervals ``I_k = [t_k, t_{k+1})``.

    ``v_su[k]`` is a list of ``(t, op)`` switches on ``S⊗U(k)``, all with
    ``t`` inside ``I_k``; the coupling is zero before its first switch and is
    switched off at ``t_{k+1}⁻``.  ``kicks[k]`` is an operator ``v_k`` applied
    as ``exp(-i v_k)`` at ``t_k``.
    """

    boundaries: tuple[float, ...]
    h_s: PiecewiseOperator
    h_b: np.ndarray | None = None
    v_sb: PiecewiseOperator | None = None
    h_b2: np.ndarray | None = None
    v_sb2: PiecewiseOperator | None = None
    h_u: tuple[np.ndarray, ...] = ()
    v_su: tuple[tuple[tuple[float, np.ndarray], ...], ...] = ()
    kicks: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def n_units(self) -> int:
        return len(self.boundaries) - 1

    @property
    def t0(self) -> float:
        return self.boundaries[0]

    @property
    def t_end(self) -> float:
        return self.boundaries[-1]

    def boundary(self, k: int) -> Instant:
        """``t_k⁻``: unit ``k-1`` decoupled and measured, unit ``k`` not started."""
        return before(self.boundaries[k])

    def start(self) -> Instant:
        return before(self.t0)

    def end(self) -> Instant:
        return before(self.t_end)

    def interval_of(self, instant: Instant) -> int | None:
        """Index ``k`` of the unit whose coupling can be nonzero at ``instant``."""
        b = self.boundaries
        for k in range(self.n_units):
            lo, hi = b[k], b[k + 1]
            if instant.minus:
                if lo < instant.t < hi:
                    return k
            elif lo <= instant.t < hi:
                return k
        return None

    def v_su_value(self, k: int, instant: Instant) -> np.ndarray | None:
        if self.interval_of(instant) != k or k >= len(self.v_su):
            return None
        entries = self.v_su[k]
        times = [t for t, _ in entries]
        i = (bisect.bisect_left(times, instant.t) if instant.minus
             else bisect.bisect_right(times, instant.t)) - 1
        return None if i < 0 else entries[i][1]

    def segment_key(self, instant: Instant) -> tuple:
        """Hashable label of the Hamiltonian in effect at ``instant``."""
        k = self.interval_of(instant)
        su = None
        if k is not None and k < len(self.v_su):
            times = [t for t, _ in self.v_su[k]]
            su = (bisect.bisect_left(times, instant.t) if instant.minus
                  else bisect.bisect_right(times, instant.t)) - 1
        parts = [self.h_s.segment(instant)]
        for term in (self.v_sb, self.v_sb2):
            parts.append(None if term is None else term.segment(instant))
        return (tuple(parts), k, su)

    def switch_times(self) -> list[float]:
        ts = set(self.h_s.times)
        for term in (self.v_sb, self.v_sb2):
            if term is not None:
                ts.update(term.times)
        for entries in self.v_su:
            ts.update(t for t, _ in entries)
        return sorted(ts)

    def in_range(self, instant: Instant) -> bool:
        return self.start() <= instant <= self.end()


def hamiltonian_terms(schedule: ProtocolSchedule, layout: CompositeLayout, instant: Instant,
                      exclude: Sequence[str] = ()) -> list[tuple[str, np.ndarray, tuple[str, ...]]]:
    """Named terms ``(label, op, factors)`` of the global Hamiltonian at ``instant``."""
    terms = [("h_s", schedule.h_s.value(instant), ("S",))]
    if layout.has_bath:
        if schedule.h_b is not None:
            terms.append(("h_b", schedule.h_b, ("B",)))
        if schedule.v_sb is not None:
            terms.append(("v_sb", schedule.v_sb.value(instant), ("S", "B")))
    if layout.has_bath2:
        if schedule.h_b2 is not None:
            terms.append(("h_b2", schedule.h_b2, ("B2",)))
        if schedule.v_sb2 is not None:
            terms.append(("v_sb2", schedule.v_sb2.value(instant), ("S", "B2")))
    for k, h in enumerate(schedule.h_u):
        terms.append((f"h_u{k}", h, (f"U{k}",)))
    k = schedule.interval_of(instant)
    if k is not None:
        v = schedule.v_su_value(k, instant)
        if v is not None:
            terms.append((f"v_su{k}", v, ("S", f"U{k}")))
    return [t for t in terms if t[0] not in exclude]


def total_hamiltonian(schedule: ProtocolSchedule, layout: CompositeLayout, instant: Instant,
                      exclude: Sequence[str] = (), target: Sequence[str] | None = None) -> np.ndarray:
    """Global Hamiltonian at ``instant`` embedded on ``target`` (default: full layout)."""
    if not schedule.in_range(instant):
        raise OperatorError(f"instant {instant} outside schedule "
                            f"[{schedule.start()}, {schedule.end()}]")
    target = layout.names if target is None else layout.canonical(target)
    d = layout.dim(target)
    out = np.zeros((d, d), dtype=complex)
    for _, op, factors in hamiltonian_terms(schedule, layout, instant, exclude):
        out += tensor_embed(op, factors, layout, target)
    return out


# --- Gibbs states and the Hamiltonian of mean force -------------------------

def _gibbs_from_eig(w: np.ndarray, v: np.ndarray, beta: float) -> tuple[np.ndarray, float]:
    shift = w.min()
    boltz = np.exp(-beta * (w - shift))
    s = boltz.sum()
    rho = (v * (boltz / s)) @ v.conj().T
    return rho, float(-beta * shift + np.log(s))


def log_partition(h: np.ndarray, beta: float) -> float:
    w = np.linalg.eigvalsh(0.5 * (h + h.conj().T))
    shift = w.min()
    return float(-beta * shift + np.log(np.sum(np.exp(-beta * (w - shift)))))


def gibbs_state(h: np.ndarray, beta: float) -> tuple[np.ndarray, float]:
    """Thermal state ``exp(-βH)/Z`` and partition function ``Z``.

    The exponential is evaluated with a spectral shift; a partition function
    that is not representable as a float raises ``FloatingPointError``.
    """
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    w, v = eigh(h)
    rho, log_z = _gibbs_from_eig(w, v, beta)
    with np.errstate(over="raise"):
        try:
            z = float(np.exp(log_z))
        except FloatingPointError:
            raise FloatingPointError(f"partition function overflows (ln Z = {log_z:.6g}); "
                                     "use log_partition") from None
    if not np.isfinite(z) or z == 0.0:
        raise FloatingPointError(f"partition function not representable (ln Z = {log_z:.6g})")
    return rho, z


@dataclass(frozen=True)
class MeanForceData:
    hstar: np.ndarray
    log_zstar: float
    beta: float
    pistar: np.ndarray
    dhstar_dbeta: np.ndarray | None = None

    @property
    def zstar(self) -> float:
        return float(np.exp(self.log_zstar))


def _mean_force_at(w, v, beta, layout, keep, factors, log_zb):
    rho, log_zxb = _gibbs_from_eig(w, v, beta)
    pistar = partial_trace(rho, layout, keep, factors)
    pw, pv = np.linalg.eigh(0.5 * (pistar + pistar.conj().T))
    if pw.min() <= CLAMP:
        raise OperatorError(f"reduced Gibbs state is rank deficient (smallest eigenvalue "
                            f"{pw.min():.3e}); mean-force Hamiltonian undefined")
    log_zstar = log_zxb - log_zb
    hstar = (pv * (-(np.log(pw) + log_zstar) / beta)) @ pv.conj().T
    return 0.5 * (hstar + hstar.conj().T), log_zstar, pistar


def mean_force(h_xb: np.ndarray, beta: float, layout: CompositeLayout, keep: Sequence[str],
               bath: Sequence[str] = (), h_bath: np.ndarray | None = None,
               derivative: bool = False, step: float | None = None) -> MeanForceData:
    """Hamiltonian of mean force of ``keep`` after tracing ``bath`` from ``exp(-β H_XB)``.

    The additive constant is fixed by ``Z*_X = Z_XB / Z_B``, i.e.
    ``exp(-β H*)/Z* = tr_B π_XB`` exactly.  With ``derivative=True`` the
    β-derivative of ``H*`` is added by a central difference with step
    ``step`` (default ``1e-4·β``).
    """
    if beta <= 0:
        raise ValueError(f"beta must be positive, got {beta}")
    keep = layout.canonical(keep)
    bath = layout.canonical(bath)
    if set(keep) & set(bath):
        raise OperatorError("kept and bath factors overlap")
    factors = layout.canonical(list(keep) + list(bath))
    w, v = eigh(h_xb)
    if bath:
        if h_bath is None:
            raise OperatorError("bath Hamiltonian required to fix Z_B")
        wb = np.linalg.eigvalsh(0.5 * (h_bath + h_bath.conj().T))
    else:
        wb = np.zeros(1)

    def log_zb(b):
        s = wb.min()
        return float(-b * s + np.log(np.sum(np.exp(-b * (wb - s)))))

    hstar, log_zstar, pistar = _mean_force_at(w, v, beta, layout, keep, factors, log_zb(beta))
    dh = None
    if derivative:
        h = 1e-4 * beta if step is None else step
        if beta - h <= 0:
            raise ValueError("derivative step too large for beta")
        hp = _mean_force_at(w, v, beta + h, layout, keep, factors, log_zb(beta + h))[0]
        hm = _mean_force_at(w, v, beta - h, layout, keep, factors, log_zb(beta - h))[0]
        dh = (hp - hm) / (2 * h)
        dh = 0.5 * (dh + dh.conj().T)
    return MeanForceData(hstar, log_zstar, beta, pistar, dh)


def mean_force_beta_derivative(h_xb: np.ndarray, beta: float, layout: CompositeLayout,
                               keep: Sequence[str], bath: Sequence[str] = (),
                               h_bath: np.ndarray | None = None,
                               step: float | None = None) -> np.ndarray:
    return mean_force(h_xb, beta, layout, keep, bath, h_bath, derivative=True,
                      step=step).dhstar_dbeta


# --- Scenario ----------------------------------------------------------------

@dataclass(frozen=True)
class ScenarioConfig:
    """Complete specification of a run.

    ``unit_states`` holds one state per unit, or ``joint_unit_state`` a single
    (possibly correlated) state on all units.  ``measurements[k]`` is a list
    of operators ``P_r`` on ``U(k)`` with ``Σ P_r² = 1``; ``None`` means the
    trivial instrument ``P = 1``.
    """

    layout: CompositeLayout
    schedule: ProtocolSchedule
    beta: float
    beta2: float | None = None
    unit_states: tuple[np.ndarray, ...] = ()
    joint_unit_state: np.ndarray | None = None
    measurements: tuple[tuple[np.ndarray, ...] | None, ...] = ()
    modes: frozenset[str] = frozenset({DEGENERATE})
    name: str = "custom"

    @property
    def two_bath(self) -> bool:
        return TWO_BATH in self.modes

    @property
    def energetic(self) -> bool:
        return ENERGETIC in self.modes

    def instrument(self, k: int) -> tuple[np.ndarray, ...]:
        m = self.measurements[k] if k < len(self.measurements) else None
        if m is None:
            d = self.layout.dim([f"U{k}"])
            return (np.eye(d, dtype=complex),)
        return tuple(m)

    def unit_hamiltonian(self, k: int) -> np.ndarray:
        d = self.layout.dim([f"U{k}"])
        if k < len(self.schedule.h_u):
            return self.schedule.h_u[k]
        return np.zeros((d, d), dtype=complex)

    def replace(self, **changes) -> "ScenarioConfig":
        from dataclasses import replace
        return replace(self, **changes)

    def validate(self) -> "ScenarioConfig":
        issues = validate_config(self)
        if issues:
            raise ConfigError(issues)
        return self


def _herm_issue(name, op, dim, issues, tol=1e-10):
    op = np.asarray(op)
    if op.shape != (dim, dim):
        issues.append(Issue(name, f"shape {op.shape}, expected ({dim}, {dim})"))
        return
    d = hermiticity_defect(op)
    if d > tol:
        issues.append(Issue(name, f"not Hermitian: max anti-Hermitian norm {d:.3e}"))


def _state_issue(name, rho, dim, issues):
    rho = np.asarray(rho)
    if rho.shape != (dim, dim):
        issues.append(Issue(name, f"shape {rho.shape}, expected ({dim}, {dim})"))
        return
    d = hermiticity_defect(rho)
    if d > 1e-10:
        issues.append(Issue(name, f"state not Hermitian: defect {d:.3e}"))
        return
    w = np.linalg.eigvalsh(0.5 * (rho + rho.conj().T))
    if w.min() < -1e-10:
        issues.append(Issue(name, f"state not positive: eigenvalue {w.min():.3e}"))
    if abs(np.trace(rho).real - 1) > 1e-10:
        issues.append(Issue(name, f"state trace {np.trace(rho).real!r} != 1"))


def validate_config(cfg: ScenarioConfig) -> list[Issue]:
    """Check every structural rule of a scenario without running dynamics."""
    issues: list[Issue] = []
    lay, sch = cfg.layout, cfg.schedule
    n = lay.n_units
    b = list(sch.boundaries)
    if len(b) != n + 1:
        issues.append(Issue("boundaries", f"{len(b)} boundaries for {n} units; need n_units + 1"))
    if any(y <= x for x, y in zip(b, b[1:])):
        issues.append(Issue("boundaries", "must be strictly increasing"))
    for m in cfg.modes:
        if m not in MODES:
            issues.append(Issue("mode", f"unknown mode {m!r}"))
    if DEGENERATE in cfg.modes and ENERGETIC in cfg.modes:
        issues.append(Issue("mode", "degenerate-units and energetic-units are exclusive"))
    if cfg.beta is None or cfg.beta <= 0:
        issues.append(Issue("beta", "must be positive"))
    if cfg.two_bath != lay.has_bath2:
        issues.append(Issue("mode", "two-bath mode requires exactly a B2 factor in the layout"))
    if cfg.two_bath and (cfg.beta2 is None or cfg.beta2 <= 0):
        issues.append(Issue("beta2", "two-bath mode needs a positive beta2"))

    ds = lay.dim(["S"])
    _herm_issue("h_s.initial", sch.h_s.initial, ds, issues)
    for i, (_, op) in enumerate(sch.h_s.switches):
        _herm_issue(f"h_s.switches[{i}]", op, ds, issues)
    for bath, hb, v in (("B", sch.h_b, sch.v_sb), ("B2", sch.h_b2, sch.v_sb2)):
        label = "" if bath == "B" else "2"
        if bath not in lay.names:
            if hb is not None or v is not None:
                issues.append(Issue(f"h_b{label}", f"layout has no {bath} factor"))
            continue
        db = lay.dim([bath])
        if hb is None:
            issues.append(Issue(f"h_b{label}", "bath Hamiltonian missing"))
        else:
            _herm_issue(f"h_b{label}", hb, db, issues)
        if v is not None:
            _herm_issue(f"v_sb{label}.initial", v.initial, ds * db, issues)
            for i, (_, op) in enumerate(v.switches):
                _herm_issue(f"v_sb{label}.switches[{i}]", op, ds * db, issues)
            if bath == "B" and v.switches and DRIVEN_COUPLING not in cfg.modes:
                issues.append(Issue("v_sb", "time-dependent V_SB requires driven-coupling mode"))

    if len(sch.h_u) not in (0, n):
        issues.append(Issue("h_u", f"{len(sch.h_u)} unit Hamiltonians for {n} units"))
    for k, h in enumerate(sch.h_u):
        du = lay.dim([f"U{k}"])
        _herm_issue(f"h_u[{k}]", h, du, issues)
        h = np.asarray(h)
        if DEGENERATE in cfg.modes and h.shape == (du, du):
            off = h - np.trace(h) / du * np.eye(du)
            if np.max(np.abs(off)) > 1e-12:
                issues.append(Issue(f"h_u[{k}]", "degenerate-units mode requires H_U ∝ identity"))

    if len(sch.v_su) > n:
        issues.append(Issue("v_su", f"{len(sch.v_su)} coupling schedules for {n} units"))
    for k, entries in enumerate(sch.v_su):
        if k >= n or len(b) != n + 1:
            break
        du = lay.dim([f"U{k}"])
        times = [t for t, _ in entries]
        if times != sorted(times) or len(set(times)) != len(times):
            issues.append(Issue(f"v_su[{k}]", "switch times must be strictly increasing"))
        for i, (t, op) in enumerate(entries):
            if not (b[k] <= t < b[k + 1]):
                issues.append(Issue(
                    f"v_su[{k}][{i}]",
                    f"switch at t={t} outside I_{k}=[{b[k]}, {b[k+1]}): intervals overlap; "
                    "at most one unit may interact with the system at a time"))
            _herm_issue(f"v_su[{k}][{i}]", op, ds * du, issues)
    for k, v in sch.kicks.items():
        if not (0 <= k < n):
            issues.append(Issue(f"kicks[{k}]", "kick for unknown unit"))
            continue
        _herm_issue(f"kicks[{k}]", v, ds * lay.dim([f"U{k}"]), issues)

    if cfg.joint_unit_state is not None:
        if cfg.unit_states:
            issues.append(Issue("units", "give either per-unit states or one joint state"))
        _state_issue("units.joint", cfg.joint_unit_state, lay.dim(lay.units()), issues)
    else:
        if len(cfg.unit_states) != n:
            issues.append(Issue("units.states", f"{len(cfg.unit_states)} states for {n} units"))
        for k, rho in enumerate(cfg.unit_states[:n]):
            _state_issue(f"units.states[{k}]", rho, lay.dim([f"U{k}"]), issues)

    if len(cfg.measurements) > n:
        issues.append(Issue("measurements", f"{len(cfg.measurements)} instruments for {n} units"))
    for k, ms in enumerate(cfg.measurements[:n]):
        if ms is None:
            continue
        du = lay.dim([f"U{k}"])
        total = np.zeros((du, du), dtype=complex)
        bad = False
        for r, p in enumerate(ms):
            p = np.asarray(p)
            if p.shape != (du, du):
                issues.append(Issue(f"measurements[{k}][{r}]", f"shape {p.shape}, expected ({du}, {du})"))
                bad = True
                continue
            if hermiticity_defect(p) > 1e-10:
                issues.append(Issue(f"measurements[{k}][{r}]", "P_r must be Hermitian"))
                bad = True
                continue
            if np.linalg.eigvalsh(0.5 * (p + p.conj().T)).min() < -1e-10:
                issues.append(Issue(f"measurements[{k}][{r}]", "P_r must be positive semidefinite"))
            total += p @ p
        if not bad:
            defect = float(np.max(np.abs(total - np.eye(du))))
            if defect > 1e-10:
                issues.append(Issue(f"measurements[{k}]",
                                    f"unit {k}: Σ_r P_r² deviates from identity by {defect:.3e}"))
    return issues


def unit_state(cfg: ScenarioConfig) -> np.ndarray:
    if cfg.joint_unit_state is not None:
        return np.asarray(cfg.joint_unit_state, dtype=complex)
    out = np.ones((1, 1), dtype=complex)
    for rho in cfg.unit_states:
        out = np.kron(out, rho)
    return out


def initial_state(cfg: ScenarioConfig) -> np.ndarray:
    """Global state at ``t_0⁻``: joint Gibbs state of S(+B) at β, times an
    independent Gibbs state of B2 at β2, times the unit state."""
    lay, sch = cfg.layout, cfg.schedule
    start = sch.start()
    sb = ["S"] + (["B"] if lay.has_bath else [])
    h_sb = total_hamiltonian(sch, lay, start, exclude=_unit_and_b2_labels(cfg), target=sb)
    rho = gibbs_state(h_sb, cfg.beta)[0]
    if lay.has_bath2:
        rho = np.kron(rho, gibbs_state(sch.h_b2, cfg.beta2)[0])
    if lay.n_units:
        rho = np.kron(rho, unit_state(cfg))
    return rho


def _unit_and_b2_labels(cfg: ScenarioConfig) -> tuple[str, ...]:
    n = cfg.layout.n_units
    return tuple([f"h_u{k}" for k in range(n)] + [f"v_su{k}" for k in range(n)]
                 + ["h_b2", "v_sb2"])
