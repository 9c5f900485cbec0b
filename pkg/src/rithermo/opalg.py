"""Dense operator algebra on a labelled tensor-product space.

All matrices are plain ``numpy`` arrays.  A :class:`CompositeLayout` names the
tensor factors and fixes their canonical order (system, bath, second bath,
units 0..n); every embedding and partial trace is expressed relative to it.
Entropies are in nats.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

HERMITIAN_TOL = 1e-12
CLAMP = 1e-14
NEG_FLOOR = -1e-10

ROLE_ORDER = {"system": 0, "bath": 1, "bath2": 2, "unit": 3}


class OperatorError(ValueError):
    """Malformed operator, layout or state."""


class SupportError(OperatorError):
    """Relative entropy is infinite: support of the first argument is not
    contained in the support of the second."""


@dataclass(frozen=True)
class Factor:
    name: str
    dim: int
    role: str
    index: int | None = None  # unit index for role == "unit"


@dataclass(frozen=True)
class CompositeLayout:
    """Ordered tensor factors S, B, B2, U0..Un with their dimensions."""

    factors: tuple[Factor, ...]

    def __post_init__(self):
        names = [f.name for f in self.factors]
        if len(set(names)) != len(names):
            raise OperatorError(f"duplicate factor ids in {names}")
        for f in self.factors:
            if f.dim < 1:
                raise OperatorError(f"factor {f.name} has dimension {f.dim} < 1")
            if f.role not in ROLE_ORDER:
                raise OperatorError(f"unknown role {f.role!r} for factor {f.name}")
        roles = [f.role for f in self.factors]
        if roles.count("system") != 1:
            raise OperatorError("layout needs exactly one system factor")
        if roles.count("bath") > 1 or roles.count("bath2") > 1:
            raise OperatorError("at most one bath and one bath2 factor")
        if roles.count("bath2") and not roles.count("bath"):
            raise OperatorError("bath2 requires a first bath")
        units = [f.index for f in self.factors if f.role == "unit"]
        if units != list(range(len(units))):
            raise OperatorError(f"unit indices must run 0..n without gaps, got {units}")
        keys = [(ROLE_ORDER[f.role], f.index or 0) for f in self.factors]
        if keys != sorted(keys):
            raise OperatorError("factors must be in canonical order S, B, B2, U0..Un")

    @classmethod
    def build(cls, system: int, bath: int | None = None, bath2: int | None = None,
              units: Sequence[int] = ()) -> "CompositeLayout":
        factors = [Factor("S", system, "system")]
        if bath is not None:
            factors.append(Factor("B", bath, "bath"))
        if bath2 is not None:
            factors.append(Factor("B2", bath2, "bath2"))
        factors += [Factor(f"U{k}", d, "unit", k) for k, d in enumerate(units)]
        return cls(tuple(factors))

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.factors)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(f.dim for f in self.factors)

    @property
    def total_dim(self) -> int:
        return int(np.prod(self.dims))

    @property
    def n_units(self) -> int:
        return sum(f.role == "unit" for f in self.factors)

    @property
    def has_bath(self) -> bool:
        return "B" in self.names

    @property
    def has_bath2(self) -> bool:
        return "B2" in self.names

    def unit(self, k: int) -> str:
        name = f"U{k}"
        if name not in self.names:
            raise OperatorError(f"unknown unit index {k}")
        return name

    def units(self) -> tuple[str, ...]:
        return tuple(f.name for f in self.factors if f.role == "unit")

    def position(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise OperatorError(f"unknown factor id {name!r}") from None

    def dim(self, names: Iterable[str]) -> int:
        return int(np.prod([self.factors[self.position(n)].dim for n in names], dtype=int))

    def canonical(self, names: Iterable[str]) -> tuple[str, ...]:
        """Return ``names`` sorted into layout order (duplicates rejected)."""
        names = list(names)
        if len(set(names)) != len(names):
            raise OperatorError(f"duplicate factors in {names}")
        return tuple(sorted(names, key=self.position))


def _check_subset(layout: CompositeLayout, names: Sequence[str]) -> list[int]:
    return [layout.position(n) for n in names]


def tensor_embed(op: np.ndarray, factors: Sequence[str], layout: CompositeLayout,
                 target: Sequence[str] | None = None) -> np.ndarray:
    """Embed ``op`` acting on ``factors`` as ``op ⊗ 1`` on ``target``.

    ``target`` defaults to every factor of ``layout``.  The result uses the
    canonical ordering of ``target``; ``factors`` may be given in any order,
    which is then the tensor order assumed for ``op``.
    """
    factors = list(factors)
    target = layout.names if target is None else layout.canonical(target)
    if not set(factors) <= set(target):
        raise OperatorError(f"factors {factors} not contained in {list(target)}")
    _check_subset(layout, factors)
    op = np.asarray(op)
    d_in = layout.dim(factors)
    if op.shape != (d_in, d_in):
        raise OperatorError(f"operator shape {op.shape} does not match factors "
                            f"{factors} of dimension {d_in}")
    rest = [n for n in target if n not in factors]
    full = np.kron(op, np.eye(layout.dim(rest), dtype=op.dtype)) if rest else op
    order = factors + rest
    if order == list(target):
        return full
    dims = [layout.dim([n]) for n in order]
    perm = [order.index(n) for n in target]
    k = len(order)
    t = full.reshape(dims + dims)
    t = t.transpose(perm + [k + p for p in perm])
    d = layout.dim(target)
    return t.reshape(d, d)


def partial_trace(rho: np.ndarray, layout: CompositeLayout, keep: Sequence[str],
                  factors: Sequence[str] | None = None) -> np.ndarray:
    """Trace out everything in ``factors`` (default: whole layout) except ``keep``.

    ``factors`` is assumed to be in canonical order; the output uses the
    canonical order of ``keep``.
    """
    factors = list(layout.names if factors is None else layout.canonical(factors))
    keep = list(layout.canonical(keep))
    if not set(keep) <= set(factors):
        raise OperatorError(f"keep={keep} is not a subset of {factors}")
    rho = np.asarray(rho)
    d = layout.dim(factors)
    if rho.shape != (d, d):
        raise OperatorError(f"state shape {rho.shape} does not match factors {factors}")
    if keep == factors:
        return rho
    dims = [layout.dim([n]) for n in factors]
    k = len(factors)
    t = rho.reshape(dims + dims)
    letters = "abcdefghijklmnopqrstuvwxyz"
    if 2 * k > len(letters):
        raise OperatorError("too many factors for partial trace")
    row = list(letters[:k])
    col = list(letters[k:2 * k])
    for i, n in enumerate(factors):
        if n not in keep:
            col[i] = row[i]
    kept = [i for i, n in enumerate(factors) if n in keep]
    out = "".join(row[i] for i in kept) + "".join(col[i] for i in kept)
    res = np.einsum("".join(row) + "".join(col) + "->" + out, t)
    dk = layout.dim(keep)
    return res.reshape(dk, dk)


def hermiticity_defect(op: np.ndarray) -> float:
    op = np.asarray(op)
    return float(np.max(np.abs(op - op.conj().T))) if op.size else 0.0


def is_hermitian(op: np.ndarray, tol: float = HERMITIAN_TOL) -> bool:
    return hermiticity_defect(op) <= tol


def eigh(op: np.ndarray, tol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a Hermitian matrix, symmetrised first."""
    op = np.asarray(op)
    scale = max(1.0, float(np.max(np.abs(op)))) if op.size else 1.0
    if hermiticity_defect(op) > tol * scale:
        raise OperatorError(f"operator is not Hermitian (defect {hermiticity_defect(op):.3e})")
    return np.linalg.eigh(0.5 * (op + op.conj().T))


def herm_fn(op: np.ndarray, f: Callable[[np.ndarray], np.ndarray], tol: float = 1e-10) -> np.ndarray:
    """Apply ``f`` to the eigenvalues of the Hermitian matrix ``op``."""
    w, v = eigh(op, tol)
    return (v * f(w)) @ v.conj().T


def expm_hermitian(op: np.ndarray, factor: complex) -> np.ndarray:
    """``exp(factor * op)`` for Hermitian ``op``; ``factor=-1j*dt`` gives a propagator."""
    w, v = eigh(op)
    return (v * np.exp(factor * w)) @ v.conj().T


def _spectrum(rho: np.ndarray) -> np.ndarray:
    w = np.linalg.eigvalsh(0.5 * (rho + rho.conj().T))
    if w.size and w.min() < NEG_FLOOR:
        raise OperatorError(f"state has negative eigenvalue {w.min():.3e}")
    return w


def entropy_of_spectrum(w: np.ndarray) -> float:
    w = w[w > CLAMP]
    return float(-np.sum(w * np.log(w)))


def von_neumann_entropy(rho: np.ndarray) -> float:
    """``-tr ρ ln ρ`` with the 0 ln 0 = 0 convention below the clamp threshold."""
    return max(entropy_of_spectrum(_spectrum(np.asarray(rho))), 0.0)


def logm_psd(rho: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Eigen-split of a PSD matrix: (eigenvalues, eigenvectors, support mask)."""
    w, v = np.linalg.eigh(0.5 * (rho + rho.conj().T))
    if w.size and w.min() < NEG_FLOOR:
        raise OperatorError(f"state has negative eigenvalue {w.min():.3e}")
    return w, v, w > CLAMP


def relative_entropy(rho: np.ndarray, sigma: np.ndarray) -> float:
    """Quantum relative entropy ``tr ρ (ln ρ − ln σ)`` in nats.

    Raises :class:`SupportError` when supp ρ ⊄ supp σ (the value is +∞).
    """
    rho = np.asarray(rho)
    sigma = np.asarray(sigma)
    if rho.shape != sigma.shape:
        raise OperatorError(f"shape mismatch {rho.shape} vs {sigma.shape}")
    p, u, p_on = logm_psd(rho)
    q, v, q_on = logm_psd(sigma)
    # overlap[i, j] = |<u_i|v_j>|^2
    overlap = np.abs(u.conj().T @ v) ** 2
    leak = overlap[np.ix_(p_on, ~q_on)] * p[p_on][:, None]
    if leak.size and leak.sum() > 1e-12:
        raise SupportError(f"support violation, weight {leak.sum():.3e} outside supp(sigma)")
    pp = p[p_on]
    s_rho = float(np.sum(pp * np.log(pp)))
    cross = float(np.sum(pp[:, None] * overlap[np.ix_(p_on, q_on)] * np.log(q[q_on])[None, :]))
    return s_rho - cross


def relative_entropy_spectral(rho: np.ndarray, log_q: np.ndarray, v: np.ndarray) -> float:
    """``D[ρ‖σ]`` for full-rank ``σ = v diag(exp(log_q)) v†`` given in spectral form.

    Avoids re-diagonalising ``σ`` when its logarithm is known exactly, e.g.
    for Gibbs states whose smallest weights underflow relative precision.
    """
    p, u, p_on = logm_psd(np.asarray(rho))
    overlap = np.abs(u.conj().T @ v) ** 2
    pp = p[p_on]
    s_rho = float(np.sum(pp * np.log(pp)))
    cross = float(np.sum(pp[:, None] * overlap[p_on] * np.asarray(log_q)[None, :]))
    return s_rho - cross


def expect(op: np.ndarray, rho: np.ndarray) -> float:
    """Real part of ``tr(op ρ)``."""
    return float(np.real(np.einsum("ij,ji->", op, rho)))


def random_hermitian(dim: int, rng: np.random.Generator, scale: float = 1.0) -> np.ndarray:
    a = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    return scale * 0.5 * (a + a.conj().T)


def random_density(dim: int, rng: np.random.Generator, rank: int | None = None) -> np.ndarray:
    rank = dim if rank is None else rank
    g = rng.normal(size=(dim, rank)) + 1j * rng.normal(size=(dim, rank))
    rho = g @ g.conj().T
    return rho / np.trace(rho).real


def random_unitary(dim: int, rng: np.random.Generator) -> np.ndarray:
    z = (rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))) / np.sqrt(2)
    q, r = np.linalg.qr(z)
    d = np.diag(r)
    return q * (d / np.abs(d))


def check_density(rho: np.ndarray, normalized: bool = True, tol: float = 1e-10) -> None:
    """Raise :class:`OperatorError` unless ``rho`` is a valid (sub)normalised state."""
    rho = np.asarray(rho)
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise OperatorError(f"state must be square, got shape {rho.shape}")
    if hermiticity_defect(rho) > tol:
        raise OperatorError(f"state is not Hermitian (defect {hermiticity_defect(rho):.3e})")
    w = np.linalg.eigvalsh(0.5 * (rho + rho.conj().T))
    if w.min() < NEG_FLOOR:
        raise OperatorError(f"state has negative eigenvalue {w.min():.3e}")
    tr = float(np.trace(rho).real)
    if normalized and abs(tr - 1) > tol:
        raise OperatorError(f"state trace is {tr!r}, expected 1")
    if not normalized and tr > 1 + tol:
        raise OperatorError(f"subnormalised state has trace {tr!r} > 1")


# Pauli matrices and friends used throughout presets and tests.
SX = np.array([[0, 1], [1, 0]], dtype=complex)
SY = np.array([[0, -1j], [1j, 0]], dtype=complex)
SZ = np.array([[1, 0], [0, -1]], dtype=complex)
SP = np.array([[0, 1], [0, 0]], dtype=complex)  # |0><1|
SM = SP.T.copy()


def swap_operator(d: int) -> np.ndarray:
    s = np.zeros((d * d, d * d), dtype=complex)
    for i in range(d):
        for j in range(d):
            s[j * d + i, i * d + j] = 1.0
    return s
