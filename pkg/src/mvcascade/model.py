"""Model data: type atoms, coefficient presets, initial densities, and checks.

The interaction kernel is the dot product u.v between an impact vector u and
an exposure vector v; the type distribution is a finite list of weighted
atoms (u_i, v_i, p_i).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .coefficients import CoefficientSet, coefficients_from_dict
from .densities import InitialDensity, density_from_dict


@dataclass(frozen=True)
class TypeAtom:
    u: tuple
    v: tuple
    p: float
    label: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, "u", tuple(float(x) for x in np.atleast_1d(self.u)))
        object.__setattr__(self, "v", tuple(float(x) for x in np.atleast_1d(self.v)))
        object.__setattr__(self, "p", float(self.p))


@dataclass(frozen=True)
class TypeDistribution:
    atoms: tuple
    k: int
    bound: Optional[float] = None  # declared C with |u|, |v| <= C

    def __post_init__(self):
        object.__setattr__(self, "atoms", tuple(self.atoms))
        if self.k < 1:
            raise ValueError("contagion dimension k must be positive")
        if not self.atoms:
            raise ValueError("type distribution needs at least one atom")

    def __len__(self):
        return len(self.atoms)

    @property
    def U(self) -> np.ndarray:
        return np.array([a.u for a in self.atoms], dtype=float)

    @property
    def V(self) -> np.ndarray:
        return np.array([a.v for a in self.atoms], dtype=float)

    @property
    def P(self) -> np.ndarray:
        return np.array([a.p for a in self.atoms], dtype=float)

    @property
    def mean_u(self) -> np.ndarray:
        return self.P @ self.U

    @property
    def mean_v(self) -> np.ndarray:
        return self.P @ self.V


@dataclass(frozen=True)
class ModelSpec:
    distribution: TypeDistribution
    coefficients: CoefficientSet
    initial: tuple
    horizon: float
    labels: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, "initial", tuple(self.initial))
        if self.labels is None:
            labs = tuple(a.label for a in self.distribution.atoms)
            object.__setattr__(self, "labels", labs if any(labs) else None)

    @property
    def n_atoms(self) -> int:
        return len(self.distribution)

    @property
    def k(self) -> int:
        return self.distribution.k

    def g_atoms(self, t: float) -> np.ndarray:
        return self.coefficients.g.values(t, self.n_atoms, self.horizon)

    def b_atoms(self, t: float) -> np.ndarray:
        return self.coefficients.b.values(t, self.n_atoms)

    def sigma_atoms(self, t: float) -> np.ndarray:
        return self.coefficients.sigma.values(t, self.n_atoms)

    def replace(self, **changes) -> "ModelSpec":
        from dataclasses import replace
        return replace(self, **changes)


# ---------------------------------------------------------------------------
# validation


@dataclass
class Violation:
    code: str
    message: str
    atom: Optional[int] = None
    evidence: dict = field(default_factory=dict)

    def to_dict(self):
        return {"code": self.code, "atom": self.atom, "message": self.message,
                "evidence": self.evidence}


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self):
        return self.ok

    def to_dict(self):
        return {"valid": self.ok, "violations": [v.to_dict() for v in self.violations],
                "notes": list(self.notes)}


def _sample_grid(horizon: float, n: int = 201) -> np.ndarray:
    return np.linspace(0.0, horizon, n)


def validate_model(spec: ModelSpec) -> ValidationReport:
    """Check every model invariant; violations are returned, never raised."""
    rep = ValidationReport()
    dist = spec.distribution
    A, k = len(dist), dist.k
    bad = rep.violations

    if spec.horizon <= 0:
        bad.append(Violation("horizon", f"horizon T = {spec.horizon} must be > 0",
                             evidence={"T": spec.horizon}))
    for i, a in enumerate(dist.atoms):
        if len(a.u) != k or len(a.v) != k:
            bad.append(Violation("dimension", f"atom {i} has len(u)={len(a.u)}, "
                                 f"len(v)={len(a.v)}, expected k={k}", atom=i))
        if not (0.0 < a.p <= 1.0):
            bad.append(Violation("weight", f"atom {i} weight p = {a.p} outside (0, 1]", atom=i,
                                 evidence={"p": a.p}))
        if dist.bound is not None:
            nu, nv = float(np.linalg.norm(a.u)), float(np.linalg.norm(a.v))
            if max(nu, nv) > dist.bound:
                bad.append(Violation("support_bound", f"atom {i}: |u| = {nu:.6g}, |v| = {nv:.6g} "
                                     f"exceed C = {dist.bound}", atom=i,
                                     evidence={"norm_u": nu, "norm_v": nv}))
    psum = float(sum(a.p for a in dist.atoms))
    if abs(psum - 1.0) > 1e-12:
        bad.append(Violation("normalization", f"sum p = {psum:.17g} != 1",
                             evidence={"sum_p": psum}))
    if any(v.code == "dimension" for v in bad):
        return rep

    # u_i . v_j >= 0 over the whole cross support
    cross = dist.U @ dist.V.T
    for i, j in zip(*np.nonzero(cross < 0)):
        bad.append(Violation("cross_sign", f"u{i}.v{j} = {cross[i, j]:.6g} < 0", atom=int(i),
                             evidence={"impact_atom": int(i), "exposure_atom": int(j),
                                       "dot": float(cross[i, j])}))

    co = spec.coefficients
    F = co.F
    xs = np.concatenate([[0.0], np.geomspace(1e-8, 1e4, 10_000)])
    Fx = np.asarray(F(xs))
    if abs(Fx[0]) > 0:
        bad.append(Violation("F_zero", f"F(0) = {Fx[0]} != 0"))
    if np.any(Fx < 0):
        bad.append(Violation("F_nonneg", "F negative on the sample grid",
                             evidence={"min": float(Fx.min())}))
    if np.any(np.diff(Fx) < -1e-15):
        bad.append(Violation("F_monotone", "F decreasing on the sample grid"))
    slopes = np.abs(np.diff(Fx)) / np.diff(xs)
    if slopes.max() > F.lipschitz * (1 + 1e-9):
        bad.append(Violation("F_lipschitz", f"observed slope {slopes.max():.6g} exceeds "
                             f"recorded Lipschitz constant {F.lipschitz}",
                             evidence={"slope": float(slopes.max())}))

    ts = _sample_grid(max(spec.horizon, 1e-12))
    try:
        gvals = np.array([spec.g_atoms(t) for t in ts])  # (T, A)
        svals = np.array([spec.sigma_atoms(t) for t in ts])
        spec.b_atoms(0.0)
    except ValueError as exc:
        bad.append(Violation("per_atom", str(exc)))
        return rep
    for i in range(A):
        if np.any(gvals[:, i] < 0):
            bad.append(Violation("g_nonneg", f"g negative for atom {i}", atom=i,
                                 evidence={"min": float(gvals[:, i].min())}))
        if np.any(np.diff(gvals[:, i]) > 1e-15):
            bad.append(Violation("g_monotone", f"g increasing in t for atom {i}", atom=i))
        lo, hi = svals[:, i].min(), svals[:, i].max()
        if lo < co.sigma_lower or hi > co.sigma_upper:
            bad.append(Violation("sigma_bounds", f"sigma for atom {i} spans [{lo:.6g}, {hi:.6g}] "
                                 f"outside [{co.sigma_lower}, {co.sigma_upper}]", atom=i,
                                 evidence={"min": float(lo), "max": float(hi)}))

    if len(spec.initial) != A:
        bad.append(Violation("initial_count", f"{len(spec.initial)} initial densities for "
                             f"{A} atoms"))
        return rep
    for i, dens in enumerate(spec.initial):
        mass = dens.total_mass()
        if abs(mass - 1.0) > 1e-10:
            bad.append(Violation("initial_mass", f"initial density of atom {i} has mass "
                                 f"{mass:.17g}", atom=i, evidence={"mass": mass}))
        if dens.beta is None:
            rep.notes.append(f"atom {i}: initial density does not vanish at 0; "
                             "boundary decay exponent not declared")
            continue
        x = np.geomspace(dens.x_star * 1e-6, dens.x_star, 400)
        lhs = dens.pdf(x)
        rhs = dens.c1 * x ** dens.beta
        if np.any(lhs > rhs * (1 + 1e-9) + 1e-300):
            j = int(np.argmax(lhs - rhs))
            bad.append(Violation("initial_boundary", f"atom {i}: V0({x[j]:.6g}) = {lhs[j]:.6g} > "
                                 f"C1 x^beta = {rhs[j]:.6g}", atom=i,
                                 evidence={"x": float(x[j]), "V0": float(lhs[j])}))
    return rep


# ---------------------------------------------------------------------------
# smallness / uniqueness regime


@dataclass
class SmallnessReport:
    bound_value: float
    passes: bool
    per_atom_bound: list
    per_atom_margins: list
    printed_condition: list  # per-atom evaluation of the inequality in its printed form

    def to_dict(self):
        return {"bound_value": self.bound_value, "passes": self.passes,
                "per_atom_bound": self.per_atom_bound,
                "per_atom_margins": self.per_atom_margins,
                "printed_condition": self.printed_condition}


def check_smallness(spec: ModelSpec) -> SmallnessReport:
    """Contraction bound B = sup_v Lip(F) sum_l v_l sum_atoms p g(0) u_l |V0|_inf.

    ``passes`` is ``B < 1``. The per-atom inequality as it is usually printed
    (|V0| < g(0) Lip(F) / max u.v) is evaluated alongside for reference only.
    """
    dist = spec.distribution
    U, V, P = dist.U, dist.V, dist.P
    g0 = spec.g_atoms(0.0)
    sup = np.array([d.sup for d in spec.initial])
    lip = spec.coefficients.F.lipschitz
    impact = (P * g0 * sup) @ U           # (k,)
    per_v = lip * (V @ impact)             # B_v for each exposure atom
    B = float(per_v.max()) if len(per_v) else 0.0
    cross = U @ V.T
    printed = []
    for i in range(len(dist)):
        pos = cross[i][cross[i] > 0]
        limit = math.inf if pos.size == 0 else g0[i] * lip / pos.max()
        printed.append(bool(sup[i] < limit))
    passes = bool(B < 1.0) or not np.any(cross > 0)
    return SmallnessReport(bound_value=B, passes=passes, per_atom_bound=per_v.tolist(),
                           per_atom_margins=(1.0 - per_v).tolist(), printed_condition=printed)


# ---------------------------------------------------------------------------
# multi-type graph translation


def from_multitype_graph(p: Sequence[float], C: Sequence[float], mu) -> TypeDistribution:
    """Types x_1..x_k with proportions p, node scales C and row-stochastic kernel mu.

    Atom i is (e_i, v_i) with v_i[j] = C[i] mu[i, j] / p[j].
    """
    p = np.asarray(p, dtype=float)
    C = np.asarray(C, dtype=float)
    mu = np.atleast_2d(np.asarray(mu, dtype=float))
    k = p.size
    if mu.shape != (k, k) or C.shape != (k,):
        raise ValueError(f"shape mismatch: p {p.shape}, C {C.shape}, mu {mu.shape}")
    if np.any(p <= 0):
        raise ValueError("type proportions must be strictly positive")
    if abs(p.sum() - 1.0) > 1e-12:
        raise ValueError(f"type proportions sum to {p.sum():.17g}, not 1")
    if np.any(mu < 0) or np.any(np.abs(mu.sum(axis=1) - 1.0) > 1e-12):
        raise ValueError("mu must be row-stochastic")
    if np.any(C < 0):
        raise ValueError("node scales C must be non-negative")
    v = C[:, None] * mu / p[None, :]
    eye = np.eye(k)
    atoms = tuple(TypeAtom(u=eye[i], v=v[i], p=p[i]) for i in range(k))
    return TypeDistribution(atoms=atoms, k=k)


# ---------------------------------------------------------------------------
# dict round trip (used by the config layer)


def spec_from_dict(d: dict) -> ModelSpec:
    atoms_d = d["atoms"]
    k = int(d.get("k", len(np.atleast_1d(atoms_d[0]["u"]))))
    atoms, initial = [], []
    for a in atoms_d:
        atoms.append(TypeAtom(u=a["u"], v=a["v"], p=a["p"], label=a.get("label")))
        initial.append(density_from_dict(a["initial"]))
    bound = d.get("bound")
    dist = TypeDistribution(atoms=tuple(atoms), k=k,
                            bound=None if bound is None else float(bound))
    coeffs = coefficients_from_dict(d.get("coefficients", {}))
    return ModelSpec(distribution=dist, coefficients=coeffs, initial=tuple(initial),
                     horizon=float(d.get("horizon", 1.0)))


def spec_to_dict(spec: ModelSpec) -> dict:
    atoms = []
    for a, dens in zip(spec.distribution.atoms, spec.initial):
        entry = {"u": list(a.u), "v": list(a.v), "p": a.p}
        if a.label is not None:
            entry["label"] = a.label
        entry["initial"] = dens.to_dict()
        atoms.append(entry)
    out = {"k": spec.k, "horizon": spec.horizon}
    if spec.distribution.bound is not None:
        out["bound"] = spec.distribution.bound
    out["coefficients"] = spec.coefficients.to_dict()
    out["atoms"] = atoms
    return out


def homogeneous_spec(alpha: float, initial: InitialDensity, horizon: float = 1.0,
                     sigma: float = 1.0, drift: float = 0.0, rho: float = 0.0,
                     F=None, g_const: float = 1.0) -> ModelSpec:
    """Single type with u = 1, v = alpha: the classical symmetric system."""
    from .coefficients import AffineInTime, FeedbackWeight, LossTransform
    dist = TypeDistribution(atoms=(TypeAtom(u=(1.0,), v=(alpha,), p=1.0),), k=1)
    co = CoefficientSet(F=F or LossTransform(), g=FeedbackWeight(c=(g_const,)),
                        b=AffineInTime(a=(drift,)), sigma=AffineInTime(a=(sigma,)), rho=rho)
    return ModelSpec(distribution=dist, coefficients=co, initial=(initial,), horizon=horizon)
