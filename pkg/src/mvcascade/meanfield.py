"""Per-type absorbed density evolution with the mean-field cascade condition.

One time step is: transport by drift and common noise, heat-kernel diffusion
with absorption at 0, then a cascade seeded by the losses of that step, then
the feedback shift. Rows are cell averages on ``[j h, (j + 1) h)``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .densities import discretize_initial
from .model import ModelSpec
from .rng import common_path

TOL_CASCADE = 1e-12
JUMP_RATIO = 50.0
JUMP_MASS = 0.05

# running max of the fixed-point residual over every converged cascade
RESIDUAL_MONITOR = {"max": 0.0, "count": 0}


class ExplosionSignal(RuntimeError):
    """Cascade iteration hit its round cap without contracting."""

    def __init__(self, t: float, result: "MfCascadeResult"):
        super().__init__(f"cascade did not contract at t={t:g} after {result.rounds} rounds")
        self.t = t
        self.result = result


@dataclass
class DensityField:
    h: float
    rows: np.ndarray  # (atoms, cells)
    L: np.ndarray  # (k,)
    I: np.ndarray  # (atoms,)
    t: float = 0.0
    initial_mass: Optional[np.ndarray] = None
    absorbed_initial: Optional[np.ndarray] = None
    absorbed_diffusion: Optional[np.ndarray] = None
    absorbed_feedback: Optional[np.ndarray] = None
    outflow: Optional[np.ndarray] = None
    jump_log: list = field(default_factory=list)

    def __post_init__(self):
        A = self.rows.shape[0]
        if self.initial_mass is None:
            self.initial_mass = self.mass.copy()
        for name in ("absorbed_initial", "absorbed_diffusion", "absorbed_feedback", "outflow"):
            if getattr(self, name) is None:
                setattr(self, name, np.zeros(A))

    @property
    def n_cells(self) -> int:
        return self.rows.shape[1]

    @property
    def x_max(self) -> float:
        return self.n_cells * self.h

    @property
    def centers(self) -> np.ndarray:
        return (np.arange(self.n_cells) + 0.5) * self.h

    @property
    def mass(self) -> np.ndarray:
        return self.rows.sum(axis=1) * self.h

    def copy(self) -> "DensityField":
        return DensityField(h=self.h, rows=self.rows.copy(), L=self.L.copy(), I=self.I.copy(),
                            t=self.t, initial_mass=self.initial_mass.copy(),
                            absorbed_initial=self.absorbed_initial.copy(),
                            absorbed_diffusion=self.absorbed_diffusion.copy(),
                            absorbed_feedback=self.absorbed_feedback.copy(),
                            outflow=self.outflow.copy(), jump_log=list(self.jump_log))

    def accounting_error(self) -> float:
        """max_atom |initial - (mass + all absorbed + outflow)|."""
        tot = (self.mass + self.absorbed_initial + self.absorbed_diffusion
               + self.absorbed_feedback + self.outflow)
        return float(np.max(np.abs(self.initial_mass - tot)))

    def reconstruct_L(self, spec: ModelSpec) -> np.ndarray:
        lost = self.initial_mass - self.mass - self.outflow
        return spec.distribution.U.T @ (spec.distribution.P * lost)


@dataclass
class MfCascadeResult:
    dL: np.ndarray
    seed: np.ndarray
    per_atom_absorbed: np.ndarray
    theta: np.ndarray
    rounds: int
    amplification: float
    endogenous: float
    flagged_jump: bool
    converged: bool
    residual: float
    iterates: Optional[list] = None


# ---------------------------------------------------------------------------
# construction


def auto_x_max(spec: ModelSpec, h: float) -> float:
    """Right edge wide enough that outflow over [0, T] is negligible."""
    T = spec.horizon
    ts = np.linspace(0.0, T, 21)
    smax = max(float(np.max(spec.sigma_atoms(t))) for t in ts)
    bmax = max(float(np.max(np.abs(spec.b_atoms(t)))) for t in ts)
    upper = max(d.upper for d in spec.initial)
    rho = spec.coefficients.rho
    x = upper + 10.0 * smax * math.sqrt(T) + bmax * T + 6.0 * rho * smax * math.sqrt(T)
    return math.ceil(x / h - 1e-9) * h


def initial_field(spec: ModelSpec, h: float, x_max: Optional[float] = None) -> DensityField:
    if x_max is None:
        x_max = auto_x_max(spec, h)
    n_cells = int(round(x_max / h))
    x_max = n_cells * h
    rows = np.vstack([discretize_initial(d, h, x_max) for d in spec.initial])
    A = rows.shape[0]
    return DensityField(h=h, rows=rows, L=np.zeros(spec.k), I=np.zeros(A), t=0.0)


class _MassProfile:
    """Cumulative mass per row, linear inside cells."""

    def __init__(self, rows: np.ndarray, h: float):
        self.rows = rows
        self.h = h
        self.cum = np.concatenate([np.zeros((rows.shape[0], 1)),
                                   np.cumsum(rows, axis=1) * h], axis=1)

    def mass(self, theta: np.ndarray) -> np.ndarray:
        N = self.rows.shape[1]
        out = np.zeros(theta.size)
        for i, th in enumerate(theta):
            if th <= 0.0:
                continue
            j = int(th / self.h)
            out[i] = self.cum[i, N] if j >= N else self.cum[i, j] + self.rows[i, j] * (th - j * self.h)
        return out


# ---------------------------------------------------------------------------
# operators


_KERNEL_CACHE: dict = {}


def _kernel(sd: float, h: float) -> np.ndarray:
    key = (sd, h)
    k = _KERNEL_CACHE.get(key)
    if k is None:
        if len(_KERNEL_CACHE) > 256:
            _KERNEL_CACHE.clear()
        k = _KERNEL_CACHE[key] = kernels.heat_kernel(sd, h)
    return k


def transition_step(fld: DensityField, spec: ModelSpec, dt: float, dB0: float = 0.0,
                    boundary: str = "images", inplace: bool = False):
    """Transport, diffuse and absorb over one step; returns (field, absorbed per atom).

    ``boundary="images"`` subtracts the mirrored kernel (exact absorption for
    constant coefficients); ``"truncate"`` simply drops mass that lands below 0.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    if boundary not in ("images", "truncate"):
        raise ValueError(f"unknown boundary mode {boundary!r}")
    f = fld if inplace else fld.copy()
    rho = spec.coefficients.rho
    b = spec.b_atoms(f.t)
    sig = spec.sigma_atoms(f.t)
    if np.any(sig ** 2 * dt > (f.x_max / 4.0) ** 2):
        raise ValueError(f"step dt={dt} too large: kernel wider than x_max/4")
    absorbed = np.zeros(f.rows.shape[0])
    buf = np.empty(f.n_cells)
    images = boundary == "images"
    sq = math.sqrt(1.0 - rho * rho)
    for i in range(f.rows.shape[0]):
        row = f.rows[i]
        s = b[i] * dt + rho * sig[i] * dB0
        if s != 0.0:
            left, right = kernels.remap_shift(row, f.h, float(s), buf)
            row[:] = buf
            absorbed[i] += left
            f.outflow[i] += right
        k = _kernel(float(sq * sig[i] * math.sqrt(dt)), f.h)
        left, right = kernels.convolve_heat(row, k, images, buf)
        row[:] = buf
        absorbed[i] += left * f.h
        f.outflow[i] += right * f.h
    f.absorbed_diffusion += absorbed
    f.L = f.L + spec.distribution.U.T @ (spec.distribution.P * absorbed)
    f.t = f.t + dt
    return f, absorbed


def _theta(fld: DensityField, spec: ModelSpec, t: float, f_in: np.ndarray) -> np.ndarray:
    F = spec.coefficients.F
    g = spec.g_atoms(t)
    return np.asarray(F(fld.I + g * f_in)) - np.asarray(F(fld.I))


def xi(fld: DensityField, spec: ModelSpec, t: float, f_in, profile: Optional[_MassProfile] = None):
    """Cascade map: returns (Xi in R^k, Theta per atom, mass on [0, Theta] per atom)."""
    f_in = np.asarray(f_in, dtype=float)
    if np.any(f_in < 0):
        raise ValueError("exposure inputs must be non-negative")
    prof = profile or _MassProfile(fld.rows, fld.h)
    th = _theta(fld, spec, t, f_in)
    M = prof.mass(th)
    dist = spec.distribution
    return dist.U.T @ (dist.P * M), th, M


def default_m_max(n_atoms: int, tol: float = TOL_CASCADE) -> int:
    return 10 * n_atoms * int(math.ceil(math.log(1.0 / tol)))


def resolve_cascade_meanfield(fld: DensityField, spec: ModelSpec, t: float, seed,
                              tol: float = TOL_CASCADE, m_max: Optional[int] = None,
                              jump_ratio: float = JUMP_RATIO, jump_mass: float = JUMP_MASS,
                              keep_iterates: bool = False) -> MfCascadeResult:
    """Iterate delta^m = delta^0 + Xi(V delta^(m-1)) to its least fixed point above the seed."""
    d0 = np.asarray(seed, dtype=float).copy()
    if np.any(d0 < 0):
        raise ValueError("cascade seed must be non-negative")
    dist = spec.distribution
    V = dist.V
    m_max = m_max or default_m_max(len(dist), tol)
    prof = _MassProfile(fld.rows, fld.h)
    delta = d0.copy()
    incs = []
    its = [delta.copy()] if keep_iterates else None
    converged = False
    rounds = 0
    while rounds < m_max:
        Xi, _, _ = xi(fld, spec, t, V @ delta, prof)
        new = d0 + Xi
        rounds += 1
        if np.any(new < delta - 1e-14 * (1.0 + np.abs(delta))):
            raise AssertionError("cascade iterates decreased")
        new = np.maximum(new, delta)
        inc = float(np.max(np.abs(new - delta))) if new.size else 0.0
        delta = new
        incs.append(inc)
        if keep_iterates:
            its.append(delta.copy())
        if inc < tol:
            converged = True
            break
    Xi, th, M = xi(fld, spec, t, V @ delta, prof)
    residual = float(np.max(np.abs(delta - d0 - Xi)))
    if converged:
        RESIDUAL_MONITOR["max"] = max(RESIDUAL_MONITOR["max"], residual)
        RESIDUAL_MONITOR["count"] += 1
    s0, s1 = float(d0.sum()), float(delta.sum())
    amp = s1 / s0 if s0 > 0 else (1.0 if s1 == 0 else math.inf)
    endo = s1 - s0
    res = MfCascadeResult(dL=delta, seed=d0, per_atom_absorbed=M, theta=th, rounds=rounds,
                          amplification=amp, endogenous=endo,
                          flagged_jump=bool(amp > jump_ratio or endo > jump_mass),
                          converged=converged, residual=residual, iterates=its)
    if not converged:
        contracting = len(incs) >= 2 and incs[-1] < incs[-2]
        if not contracting:
            res.flagged_jump = True
            raise ExplosionSignal(t, res)
    return res


def cascade_epsilon_ladder(fld: DensityField, spec: ModelSpec, t: float,
                           eps: Sequence[float], direction=None, tol: float = TOL_CASCADE):
    """Cascade sizes for seeds eps*direction, plus a linear Richardson limit eps -> 0.

    Iterates to convergence for each eps before shrinking it; the reverse
    order collapses to the trivial zero jump.
    """
    eps = sorted((float(e) for e in eps), reverse=True)
    if direction is None:
        direction = spec.distribution.mean_u
    direction = np.asarray(direction, dtype=float)
    sizes = []
    for e in eps:
        try:
            r = resolve_cascade_meanfield(fld, spec, t, e * direction, tol=tol,
                                          jump_ratio=math.inf, jump_mass=math.inf)
            sizes.append(r.dL - r.seed)
        except ExplosionSignal as sig:
            sizes.append(sig.result.dL - sig.result.seed)
    sizes = np.array(sizes)
    if len(eps) >= 2:
        e1, e2 = eps[-2], eps[-1]
        limit = (e1 * sizes[-1] - e2 * sizes[-2]) / (e1 - e2)
    else:
        limit = sizes[-1]
    return {"eps": eps, "jump": sizes.tolist(), "extrapolated": np.maximum(limit, 0.0).tolist()}


def apply_feedback(fld: DensityField, spec: ModelSpec, t: float, dL,
                   inplace: bool = False, tol: Optional[float] = None) -> DensityField:
    """Shift each row left by Theta_i(V dL); mass pushed through 0 is absorbed."""
    f = fld if inplace else fld.copy()
    dL = np.asarray(dL, dtype=float)
    dist = spec.distribution
    fin = dist.V @ dL
    th = _theta(f, spec, t, fin)
    prof = _MassProfile(f.rows, f.h)
    M = prof.mass(th)
    buf = np.empty(f.n_cells)
    worst = 0.0
    for i in range(f.rows.shape[0]):
        if th[i] <= 0.0:
            continue
        left, _ = kernels.remap_shift(f.rows[i], f.h, -float(th[i]), buf)
        f.rows[i] = buf
        worst = max(worst, abs(left - M[i]))
    if worst > (1e-10 if tol is None else tol):
        warnings.warn(f"feedback absorption residual {worst:.3g} above tolerance", RuntimeWarning)
    f.absorbed_feedback += M
    f.L = f.L + dist.U.T @ (dist.P * M)
    f.I = f.I + spec.g_atoms(t) * fin
    return f


# ---------------------------------------------------------------------------
# full solve


@dataclass
class MfSolution:
    times: np.ndarray
    L: np.ndarray  # (steps + 1, k)
    atom_loss: np.ndarray  # lost mass per atom, (steps + 1, atoms)
    jump_flag: np.ndarray
    rounds: np.ndarray
    amplification: np.ndarray
    jump_log: list
    t_star: Optional[float]
    halted: bool
    snapshots: dict
    diagnostics: dict
    field: DensityField

    def overall(self, spec: ModelSpec) -> np.ndarray:
        """Exposure-weighted losses V . L per atom, shape (steps + 1, atoms)."""
        return self.L @ spec.distribution.V.T

    def at(self, t_query) -> np.ndarray:
        idx = np.searchsorted(self.times, np.asarray(t_query) + 1e-12, side="right") - 1
        return self.L[np.clip(idx, 0, None)]

    def write_csv(self, path) -> None:
        k = self.L.shape[1]
        head = "t," + ",".join(f"L_{l + 1}" for l in range(k)) + ",jump_flag,rounds"
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(head + "\n")
            for i, t in enumerate(self.times):
                vals = ",".join(repr(float(x)) for x in self.L[i])
                fh.write(f"{float(t)!r},{vals},{int(self.jump_flag[i])},{int(self.rounds[i])}\n")

    def write_snapshots(self, directory) -> list:
        import os
        paths = []
        for t, rows in sorted(self.snapshots.items()):
            p = os.path.join(directory, f"density_t{t:.6f}.csv")
            x = (np.arange(rows.shape[1]) + 0.5) * self.field.h
            with open(p, "w", encoding="utf-8", newline="\n") as fh:
                fh.write("x," + ",".join(f"atom_{i}" for i in range(rows.shape[0])) + "\n")
                for j in range(rows.shape[1]):
                    fh.write(repr(float(x[j])) + "," + ",".join(repr(float(v)) for v in rows[:, j]) + "\n")
            paths.append(p)
        return paths

    def summary(self) -> dict:
        return {"t_star": self.t_star, "t_star_note": "heuristic: first flagged jump or non-contracting cascade",
                "halted": self.halted, "n_flagged": int(self.jump_flag.sum()),
                "jump_log": self.jump_log, **self.diagnostics}


def _resolve_common(spec: ModelSpec, common_noise, steps: int, dt: float) -> np.ndarray:
    if spec.coefficients.rho == 0.0:
        return np.zeros(steps)
    if common_noise is None:
        raise ValueError("rho > 0 needs a common-noise path or seed")
    if np.ndim(common_noise) == 0:
        return common_path(int(common_noise), steps, dt)
    path = np.asarray(common_noise, dtype=float)
    if path.size < steps:
        raise ValueError("common-noise path shorter than the number of steps")
    return path[:steps]


def _run(fld: DensityField, spec: ModelSpec, dt: float, common_noise=None, mode: str = "continue",
         boundary: str = "images", snapshot_times: Sequence[float] = (),
         tol: float = TOL_CASCADE, jump_ratio: float = JUMP_RATIO, jump_mass: float = JUMP_MASS,
         horizon: Optional[float] = None) -> MfSolution:
    if mode not in ("continue", "strict"):
        raise ValueError(f"unknown mode {mode!r}")
    T = spec.horizon if horizon is None else horizon
    steps = int(round(T / dt))
    if steps < 1 or abs(steps * dt - T) > 1e-9 * T:
        raise ValueError(f"dt={dt} does not divide the horizon {T}")
    dB = _resolve_common(spec, common_noise, steps, dt)
    k = spec.k
    times = np.arange(steps + 1) * dt
    L = np.zeros((steps + 1, k))
    L[0] = fld.L
    A = fld.rows.shape[0]
    aloss = np.zeros((steps + 1, A))
    aloss[0] = fld.initial_mass - fld.mass - fld.outflow
    flags = np.zeros(steps + 1, dtype=bool)
    rounds = np.zeros(steps + 1, dtype=np.int64)
    amps = np.ones(steps + 1)
    snaps_want = sorted(set(float(s) for s in snapshot_times))
    snaps = {}
    sup0 = float(fld.rows.max(initial=0.0))
    sup_seen = sup0
    max_resid = 0.0
    max_acc = 0.0
    max_recon = 0.0
    t_star = None
    halted = False
    dist = spec.distribution
    if snaps_want and snaps_want[0] <= 0.0:
        snaps[0.0] = fld.rows.copy()
    done = 0
    for m in range(steps):
        t_next = float(times[m + 1])
        _, absorbed = transition_step(fld, spec, dt, float(dB[m]), boundary, inplace=True)
        fld.t = t_next
        seed = dist.U.T @ (dist.P * absorbed)
        exploded = False
        try:
            res = resolve_cascade_meanfield(fld, spec, t_next, seed, tol=tol,
                                            jump_ratio=jump_ratio, jump_mass=jump_mass)
        except ExplosionSignal as sig:
            res, exploded = sig.result, True
        if res.flagged_jump or exploded:
            if t_star is None:
                t_star = t_next
            fld.jump_log.append({"t": t_next, "dL": res.dL.tolist(), "rounds": res.rounds,
                                 "amplification": res.amplification, "explosion": exploded})
            if mode == "strict":
                halted = True
                break
        if res.converged:
            max_resid = max(max_resid, res.residual)
        apply_feedback(fld, spec, t_next, res.dL, inplace=True)
        L[m + 1] = fld.L
        aloss[m + 1] = fld.initial_mass - fld.mass - fld.outflow
        flags[m + 1] = res.flagged_jump or exploded
        rounds[m + 1] = res.rounds
        amps[m + 1] = res.amplification
        sup_seen = max(sup_seen, float(fld.rows.max(initial=0.0)))
        max_acc = max(max_acc, fld.accounting_error())
        max_recon = max(max_recon, float(np.max(np.abs(fld.reconstruct_L(spec) - fld.L))))
        while snaps_want and snaps_want[0] <= t_next + 1e-12:
            snaps[snaps_want.pop(0)] = fld.rows.copy()
        done = m + 1
    diag = {"h": fld.h, "dt": dt, "x_max": fld.x_max, "boundary": boundary,
            "tol_cascade": tol, "jump_ratio": jump_ratio, "jump_mass": jump_mass,
            "max_residual": max_resid, "mass_accounting_error": max_acc,
            "loss_reconstruction_error": max_recon, "initial_sup": sup0,
            "max_sup": sup_seen, "density_slack": max(0.0, sup_seen - sup0),
            "outflow": fld.outflow.tolist(), "backend": kernels.BACKEND}
    return MfSolution(times=times[:done + 1], L=L[:done + 1], atom_loss=aloss[:done + 1],
                      jump_flag=flags[:done + 1],
                      rounds=rounds[:done + 1], amplification=amps[:done + 1],
                      jump_log=list(fld.jump_log), t_star=t_star, halted=halted,
                      snapshots=snaps, diagnostics=diag, field=fld)


def solve(spec: ModelSpec, h: float, dt: float, x_max: Optional[float] = None,
          common_noise=None, mode: str = "continue", boundary: str = "images",
          snapshot_times: Sequence[float] = (), **kw) -> MfSolution:
    """Evolve the densities over [0, T].

    ``common_noise`` is ignored when rho = 0; otherwise it is an array of B0
    increments or an integer seed. In ``strict`` mode the run halts at the
    first flagged jump; in ``continue`` mode the jump is applied.
    """
    fld = initial_field(spec, h, x_max)
    return _run(fld, spec, dt, common_noise, mode, boundary, snapshot_times, **kw)


def eps_field(spec: ModelSpec, eps: float, h: float, x_max: Optional[float] = None) -> DensityField:
    """Initial state of the eps-system: sliver (0, eps) lost at t = 0, rest lowered."""
    stars = [d.x_star for d in spec.initial if d.x_star is not None]
    bound = min(stars) if stars else min(d.upper for d in spec.initial)
    if not (0.0 < eps < bound):
        raise ValueError(f"eps={eps} must lie in (0, {bound:g})")
    fld = initial_field(spec, h, x_max)
    dist = spec.distribution
    A = fld.rows.shape[0]
    removed = np.zeros(A)
    j = int(eps / fld.h)
    frac = eps - j * fld.h
    for i in range(A):
        row = fld.rows[i]
        removed[i] = row[:j].sum() * fld.h + (row[j] * frac if j < fld.n_cells else 0.0)
        row[:j] = 0.0
        if j < fld.n_cells:
            row[j] *= 1.0 - frac / fld.h
    lam = dist.U.T @ (dist.P * removed)
    lam_v = dist.V @ lam
    g0 = spec.g_atoms(0.0)
    F = spec.coefficients.F
    shift = eps / 4.0 + np.asarray(F(g0 * lam_v))
    buf = np.empty(fld.n_cells)
    pushed = np.zeros(A)
    for i in range(A):
        left, _ = kernels.remap_shift(fld.rows[i], fld.h, -float(shift[i]), buf)
        fld.rows[i] = buf
        pushed[i] = left
    fld.absorbed_initial = removed + pushed
    fld.I = g0 * lam_v
    fld.L = dist.U.T @ (dist.P * fld.absorbed_initial)
    return fld


def solve_eps_approx(spec: ModelSpec, eps: float, h: float, dt: float,
                     x_max: Optional[float] = None, **kw) -> MfSolution:
    return _run(eps_field(spec, eps, h, x_max), spec, dt, **kw)


# ---------------------------------------------------------------------------
# diagnostics


def _l2_derivative(times: np.ndarray, L: np.ndarray) -> float:
    d = np.diff(L, axis=0) / np.diff(times)[:, None]
    return float(np.sqrt(np.sum(d ** 2 * np.diff(times)[:, None])))


def regularity_envelope(times, L, beta: float, K: Optional[float] = None, jump_flags=None,
                        s_max: Optional[float] = None, refined: Sequence = ()) -> dict:
    """Fit K in dL(s) <= K s^-(1-beta)/2 from central differences.

    ``refined`` holds further (times, L) pairs on finer steps; the explosion
    flag is raised when the discrete L2 norm of the derivative keeps growing
    by more than 25% per refinement (heuristic).
    """
    times = np.asarray(times, dtype=float)
    L = np.atleast_2d(np.asarray(L, dtype=float))
    if L.shape[0] != times.size:
        L = L.T
    if jump_flags is not None and np.any(jump_flags):
        raise ValueError("series contains flagged jumps; pass a pre-explosion segment")
    if times.size < 3:
        raise ValueError("need at least three samples")
    s = times[1:-1]
    deriv = (L[2:] - L[:-2]) / (times[2:] - times[:-2])[:, None]
    keep = s > 0
    if s_max is not None:
        keep &= s <= s_max + 1e-12
    expo = (1.0 - beta) / 2.0
    scaled = deriv[keep] * s[keep, None] ** expo
    K_fit = float(max(scaled.max(initial=0.0), 0.0))
    viol = []
    if K is not None:
        for r, c in zip(*np.nonzero(scaled > K)):
            viol.append({"s": float(s[keep][r]), "l": int(c), "value": float(scaled[r, c])})
    norms = [_l2_derivative(times, L)]
    for tt, LL in refined:
        LL = np.atleast_2d(np.asarray(LL, dtype=float))
        if LL.shape[0] != np.size(tt):
            LL = LL.T
        norms.append(_l2_derivative(np.asarray(tt, dtype=float), LL))
    growth = [b / a for a, b in zip(norms[:-1], norms[1:]) if a > 0]
    flag = len(growth) >= 1 and all(g > 1.25 for g in growth)
    return {"K_fit": K_fit, "violations": viol, "explosion_flag": bool(flag),
            "l2_norms": norms, "exponent": expo}


def grid_convergence(spec: ModelSpec, h: float, dt: float, levels: int = 3,
                     h_factor: float = 2.0, dt_factor: float = 4.0, **kw) -> dict:
    """L(T) along (h, dt) refinements with Richardson error estimates."""
    vals, grids = [], []
    for j in range(levels):
        hj, dj = h / h_factor ** j, dt / dt_factor ** j
        sol = solve(spec, hj, dj, **kw)
        vals.append(sol.L[-1].copy())
        grids.append((hj, dj))
    vals = np.array(vals)
    diffs = np.abs(np.diff(vals, axis=0))
    est = []
    for j in range(diffs.shape[0]):
        if j >= 1 and np.all(diffs[j] > 0) and np.all(diffs[j - 1] > 0):
            p = float(np.min(np.log(diffs[j - 1] / diffs[j]) / math.log(h_factor)))
        else:
            p = 1.0
        p = max(p, 0.5)
        est.append((diffs[j] / (h_factor ** p - 1.0)).tolist())
    return {"grids": grids, "L_T": vals.tolist(), "differences": diffs.tolist(),
            "richardson_estimates": est}
