"""Reproducible studies linking the particle and mean-field solvers."""

from __future__ import annotations

import csv
import json
import math
import os
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import optimize
from scipy.special import erf

from .coefficients import AffineInTime, CoefficientSet, FeedbackWeight, LossTransform
from .densities import PiecewiseConstant, Uniform
from .meanfield import (_run, auto_x_max, cascade_epsilon_ladder, initial_field,
                        regularity_envelope, solve, solve_eps_approx)
from .model import ModelSpec, TypeAtom, TypeDistribution, check_smallness, homogeneous_spec
from .particles import simulate
from .rng import common_path, ordered_map

INSUFFICIENT = "insufficient ladder"


@dataclass
class StudyConfig:
    spec: ModelSpec
    n_ladder: tuple = (500, 2000, 8000)
    seeds: tuple = tuple(range(20))
    h: float = 0.005
    dt: float = 0.001
    particle_dt: float = 0.001
    bridge: bool = True
    eps_ladder: tuple = (0.1, 0.05, 0.025)
    t0: Optional[float] = None
    scenarios: int = 200
    core: tuple = ()
    periphery: tuple = ()
    alphas: tuple = (0.95, 0.99)
    q: float = 0.9
    window: Optional[tuple] = None
    output_points: int = 50
    threshold: float = 0.05
    env_ratio: float = 0.75
    expect_no_jump: bool = True
    boundary: str = "images"
    seed: int = 0

    def __post_init__(self):
        for name in ("n_ladder", "seeds", "eps_ladder", "core", "periphery", "alphas"):
            setattr(self, name, tuple(getattr(self, name)))
        n = self.n_ladder
        if any(b <= a for a, b in zip(n[:-1], n[1:])):
            raise ValueError("n ladder must be strictly increasing")
        e = self.eps_ladder
        if any(b >= a for a, b in zip(e[:-1], e[1:])):
            raise ValueError("eps ladder must be strictly decreasing")
        if set(self.core) & set(self.periphery):
            raise ValueError("core and periphery must be disjoint")
        A = self.spec.n_atoms
        if (self.core or self.periphery) and sorted(self.core + self.periphery) != list(range(A)):
            raise ValueError("core and periphery must cover every atom")


@dataclass
class StudyReport:
    name: str
    verdict: str
    metrics: dict = field(default_factory=dict)
    seeds: list = field(default_factory=list)
    runtimes: dict = field(default_factory=dict)
    tables: dict = field(default_factory=dict)  # name -> (header, rows)

    @property
    def passed(self) -> bool:
        return self.verdict == "pass"

    def to_dict(self) -> dict:
        return {"name": self.name, "verdict": self.verdict, "metrics": self.metrics,
                "seeds": self.seeds, "runtimes": self.runtimes}

    def write(self, directory) -> list:
        """JSON report plus one CSV per table; returns the written paths."""
        os.makedirs(directory, exist_ok=True)
        paths = []
        p = os.path.join(directory, f"{self.name}_report.json")
        with open(p, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(_jsonable(self.to_dict()), fh, indent=2, sort_keys=True)
            fh.write("\n")
        paths.append(p)
        for tname, (header, rows) in sorted(self.tables.items()):
            p = os.path.join(directory, f"{self.name}_{tname}.csv")
            with open(p, "w", encoding="utf-8", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(header)
                for r in rows:
                    w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v
                                for v in r])
            paths.append(p)
        return paths


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _wall(fn, *a, **kw):
    t0 = time.perf_counter()
    out = fn(*a, **kw)
    return out, time.perf_counter() - t0


# ---------------------------------------------------------------------------
# particle vs mean field


def _particle_gap(task):
    spec, n, dt, seed, bridge, out_times, target, path = task
    run = simulate(spec, n, dt, seed=seed, bridge=bridge, common_increments=path,
                   log_cascades=False)
    vals = run.at(out_times)
    return float(np.max(np.abs(vals - target))) if len(out_times) else 0.0


def convergence_study(cfg: StudyConfig, jobs: int = 1) -> StudyReport:
    """Sup-gap between particle losses and the mean-field loss along an n-ladder."""
    spec = cfg.spec
    rho = spec.coefficients.rho
    T = spec.horizon
    out_times = np.linspace(0.0, T, cfg.output_points)
    runtimes = {}
    if rho > 0 and abs(cfg.dt - cfg.particle_dt) > 1e-15:
        raise ValueError("rho > 0 pairs runs on one B0 path: use equal mean-field and particle dt")
    steps = int(round(T / cfg.particle_dt))
    mf_cache = {}

    def mf_for(seed):
        key = seed if rho > 0 else None
        if key not in mf_cache:
            path = common_path(seed, steps, cfg.particle_dt) if rho > 0 else None
            sol, w = _wall(solve, spec, cfg.h, cfg.dt, common_noise=path, boundary=cfg.boundary)
            runtimes[f"meanfield_seed{seed}" if rho > 0 else "meanfield"] = w
            mf_cache[key] = (sol, path)
        return mf_cache[key]

    tasks, excluded, invalid = [], [], False
    for n in cfg.n_ladder:
        for s in cfg.seeds:
            sol, path = mf_for(s)
            jt = sol.times[sol.jump_flag]
            keep = np.ones(out_times.size, dtype=bool)
            for tj in jt:
                keep &= np.abs(out_times - tj) > cfg.dt + 1e-12
            if jt.size and cfg.expect_no_jump:
                invalid = True
            if not keep.all():
                excluded = out_times[~keep].tolist()
            ot = out_times[keep]
            tasks.append((spec, int(n), cfg.particle_dt, int(s), cfg.bridge, ot, sol.at(ot), path))
    t0 = time.perf_counter()
    gaps = ordered_map(_particle_gap, tasks, jobs)
    runtimes["particles"] = time.perf_counter() - t0
    G = np.array(gaps).reshape(len(cfg.n_ladder), len(cfg.seeds))
    med = np.median(G, axis=1)
    rows = [(int(n), int(s), float(G[i, j])) for i, n in enumerate(cfg.n_ladder)
            for j, s in enumerate(cfg.seeds)]
    metrics = {"n_ladder": list(cfg.n_ladder), "median_gap": med.tolist(),
               "threshold": cfg.threshold, "excluded_times": excluded}
    if len(cfg.n_ladder) >= 2 and np.all(med > 0):
        slope = np.polyfit(np.log(cfg.n_ladder), np.log(med), 1)[0]
        metrics["loglog_slope"] = float(slope)
    if invalid:
        verdict = "invalid: mean-field jump inside a no-jump study"
    elif len(cfg.n_ladder) < 2:
        verdict = INSUFFICIENT
    else:
        dec = bool(np.all(np.diff(med) < 0))
        metrics["strictly_decreasing"] = dec
        verdict = "pass" if dec and med[-1] < cfg.threshold else "fail"
    tables = {"gaps": (["n", "seed", "sup_gap"], rows),
              "medians": (["n", "median_gap"], [(int(n), float(m)) for n, m in zip(cfg.n_ladder, med)])}
    return StudyReport("convergence", verdict, metrics, list(cfg.seeds), runtimes, tables)


# ---------------------------------------------------------------------------
# eps-domination


def _eps_task(task):
    spec, eps, h, dt, x_max, boundary = task
    return solve_eps_approx(spec, eps, h, dt, x_max=x_max, boundary=boundary)


def domination_study(cfg: StudyConfig, jobs: int = 1) -> StudyReport:
    """Check L^eps >= L before t0 and a shrinking envelope along the eps ladder."""
    spec = cfg.spec
    if spec.coefficients.rho != 0.0:
        raise ValueError("domination study needs rho = 0")
    x_max = auto_x_max(spec, cfg.h)
    base, w0 = _wall(solve, spec, cfg.h, cfg.dt, x_max=x_max, boundary=cfg.boundary)
    t0 = cfg.t0 if cfg.t0 is not None else (base.t_star if base.t_star is not None else spec.horizon)
    if base.t_star is not None and base.t_star < t0:
        t0 = base.t_star
    sols = ordered_map(_eps_task, [(spec, e, cfg.h, cfg.dt, x_max, cfg.boundary)
                                   for e in cfg.eps_ladder], jobs)
    V = spec.distribution.V
    active = np.flatnonzero(np.any(V != 0, axis=1))
    sup0 = max(float(np.max(r)) for r in initial_field(spec, cfg.h, x_max).rows)
    tol = 2.0 * cfg.h * sup0
    out_idx = np.unique(np.linspace(0, base.times.size - 1, cfg.output_points).round().astype(int))
    out_idx = out_idx[base.times[out_idx] < t0 - 1e-12]
    Lb = base.L @ V.T
    env, first_violation, min_gap, rows = [], None, [], []
    for e, s in zip(cfg.eps_ladder, sols):
        d = (s.L @ V.T - Lb)[np.ix_(out_idx, active)]
        env.append(float(d.max(initial=0.0)))
        min_gap.append(float(d.min(initial=0.0)))
        if first_violation is None and d.size and d.min() < -tol:
            r, c = np.unravel_index(np.argmin(d), d.shape)
            first_violation = {"eps": e, "t": float(base.times[out_idx[r]]),
                               "atom": int(active[c]), "gap": float(d[r, c])}
        for r, i in enumerate(out_idx):
            rows.append((e, float(base.times[i]), *[float(x) for x in d[r]]))
    metrics = {"t0": t0, "tolerance": tol, "envelope": env, "min_gap": min_gap,
               "first_violation": first_violation, "env_ratio_limit": cfg.env_ratio}
    dominated = first_violation is None
    if active.size == 0:
        verdict = "not applicable"
    elif len(cfg.eps_ladder) < 2:
        verdict = INSUFFICIENT if dominated else "fail"
    else:
        mono = bool(all(b <= a for a, b in zip(env[:-1], env[1:])))
        # an identically zero envelope (no feedback reaches the active atoms) counts as shrinking
        shrink = env[-1] < cfg.env_ratio * env[0] or env[0] == 0.0
        metrics.update({"monotone": mono, "shrinks": bool(shrink)})
        verdict = "pass" if dominated and mono and shrink else "fail"
    header = ["eps", "t"] + [f"gap_atom_{i}" for i in active]
    return StudyReport("domination", verdict, metrics, [], {"base": w0},
                       {"gaps": (header, rows),
                        "envelope": (["eps", "envelope"], list(zip(cfg.eps_ladder, env)))})


# ---------------------------------------------------------------------------
# physical jump condition


def physical_jump_size(row: np.ndarray, h: float, alpha: float) -> float:
    """D = inf{z > 0 : alpha * M(z) < z} for the cell-average row, M linear in cells."""
    if alpha <= 0:
        return 0.0
    cum = np.concatenate([[0.0], np.cumsum(row) * h])
    N = row.size

    def gap(z):
        if z >= N * h:
            return alpha * cum[-1] - z
        j = int(z / h)
        return alpha * (cum[j] + row[j] * (z - j * h)) - z

    if alpha * row[0] < 1.0:
        return 0.0
    nodes = np.arange(1, N + 1) * h
    vals = alpha * cum[1:] - nodes
    neg = np.flatnonzero(vals < 0)
    if neg.size == 0:
        return float(alpha * cum[-1])
    j = int(neg[0])
    lo = j * h
    if gap(lo) < 0:
        return lo
    return float(optimize.bisect(gap, lo, (j + 1) * h, xtol=1e-15, rtol=4 * np.finfo(float).eps))


def _check_homogeneous(spec: ModelSpec) -> float:
    dist = spec.distribution
    co = spec.coefficients
    if dist.k != 1 or len(dist) != 1 or dist.atoms[0].u != (1.0,):
        raise ValueError("physical jump cross-check needs a single atom with k=1 and u=1")
    if co.F.kind != "identity" or co.g.kind != "constant" or co.g.c != (1.0,):
        raise ValueError("physical jump cross-check needs F = Id and g = 1")
    return dist.atoms[0].v[0]


def physical_jump_crosscheck(spec: ModelSpec, h: float, jump_time: float = 0.0,
                             dt: Optional[float] = None,
                             eps: Sequence[float] = (1e-8, 5e-9, 2.5e-9)) -> StudyReport:
    """Cascade jump (eps-ladder seed limit) against the physical jump computed by bisection."""
    alpha = _check_homogeneous(spec)
    fld = initial_field(spec, h)
    if jump_time > 0:
        if dt is None:
            raise ValueError("jump_time > 0 needs dt")
        sol = _run(fld, spec, dt, mode="strict", horizon=jump_time)
        fld = sol.field
    t = fld.t
    row = fld.rows[0]
    D = physical_jump_size(row, h, alpha)
    phys = float(np.concatenate([[0.0], np.cumsum(row) * h])[-1]) if D >= fld.x_max else None
    if phys is None:
        j = int(D / h)
        phys = float(row[:j].sum() * h + row[j] * (D - j * h))
    lad = cascade_epsilon_ladder(fld, spec, t, eps)
    casc = lad["extrapolated"][0]
    tol = 2.0 * h * float(row.max(initial=0.0))
    err = abs(casc - phys)
    metrics = {"alpha": alpha, "t": t, "D": D, "physical_jump_loss": phys,
               "cascade_jump_loss": casc, "ladder": lad, "abs_error": err, "tolerance": tol}
    if D == 0.0:
        verdict = "not applicable"
        metrics["agrees"] = bool(err <= tol)
    else:
        verdict = "pass" if err <= tol else "fail"
    return StudyReport("crosscheck_jump", verdict, metrics, [], {},
                       {"jump": (["alpha", "D", "physical", "cascade", "abs_error"],
                                 [(alpha, D, phys, casc, err)])})


# ---------------------------------------------------------------------------
# conditional risk


def var_es(losses, alpha: float) -> tuple[float, float]:
    """VaR as the ceil(alpha N)-th order statistic, ES as the mean from there up."""
    x = np.sort(np.asarray(losses, dtype=float))
    N = x.size
    kth = min(max(int(math.ceil(alpha * N - 1e-12)), 1), N)
    var = float(x[kth - 1])
    # the tail mean of equal values can round one ulp below them
    return var, max(var, float(x[kth - 1:].mean()))


def _risk_task(task):
    spec, h, dt, x_max, seed, boundary = task
    return solve(spec, h, dt, x_max=x_max, common_noise=seed, boundary=boundary)


def risk_study(cfg: StudyConfig, jobs: int = 1) -> StudyReport:
    """VaR/ES of periphery losses, unconditional and given a steep core-loss rise."""
    spec = cfg.spec
    S = cfg.scenarios
    n_cond = int(math.floor(S * (1.0 - cfg.q) + 1e-9))
    if n_cond < 1:
        raise ValueError(f"{S} scenarios leave an empty conditional sample at q={cfg.q}")
    if not cfg.core or not cfg.periphery:
        raise ValueError("risk study needs a core/periphery partition")
    T = spec.horizon
    window = cfg.window or (0.0, T / 4.0)
    P = spec.distribution.P
    core, peri = np.array(cfg.core), np.array(cfg.periphery)
    x_max = auto_x_max(spec, cfg.h)
    ss = np.random.SeedSequence(cfg.seed)
    seeds = [int(c.generate_state(1)[0]) for c in ss.spawn(S)]
    t0 = time.perf_counter()
    if spec.coefficients.rho == 0.0:
        one = _risk_task((spec, cfg.h, cfg.dt, x_max, seeds[0], cfg.boundary))
        sols = [one] * S
    else:
        sols = ordered_map(_risk_task, [(spec, cfg.h, cfg.dt, x_max, s, cfg.boundary)
                                        for s in seeds], jobs)
    wall = time.perf_counter() - t0

    def weighted(sol, idx, t):
        k = int(np.searchsorted(sol.times, t + 1e-12, side="right") - 1)
        return float(sol.atom_loss[k, idx] @ P[idx] / P[idx].sum())

    core_inc = np.array([weighted(s, core, window[1]) - weighted(s, core, window[0]) for s in sols])
    peri_T = np.array([weighted(s, peri, T) for s in sols])
    order = np.argsort(-core_inc, kind="stable")
    cond = peri_T[order[:n_cond]]
    table, metrics = [], {"window": list(window), "q": cfg.q, "scenarios": S,
                          "conditional_size": n_cond, "unconditional_var": float(np.var(peri_T - peri_T[0])),
                          "flagged_scenarios": int(sum(bool(s.jump_flag.any()) for s in sols))}
    ok = True
    for a in cfg.alphas:
        uv, ue = var_es(peri_T, a)
        cv, ce = var_es(cond, a)
        ok &= ue >= uv and ce >= cv
        table.append((a, uv, ue, cv, ce))
        metrics[f"alpha_{a}"] = {"VaR": uv, "ES": ue, "cond_VaR": cv, "cond_ES": ce}
    scen_rows = [(i, seeds[i], float(core_inc[i]), float(peri_T[i])) for i in range(S)]
    return StudyReport("risk", "pass" if ok else "fail", metrics, seeds, {"solves": wall},
                       {"quantiles": (["alpha", "VaR", "ES", "cond_VaR", "cond_ES"], table),
                        "scenarios": (["scenario", "seed", "core_increment", "periphery_loss"],
                                      scen_rows)})


# ---------------------------------------------------------------------------
# closed-form first passage


def fp_absorbed_exact(x0: float, sigma: float, t):
    t = np.asarray(t, dtype=float)
    with np.errstate(divide="ignore"):
        return np.where(t > 0, 1.0 - erf(x0 / (sigma * np.sqrt(2.0 * np.maximum(t, 1e-300)))), 0.0)


def fp_validation(x0: float = 1.0, sigma: float = 1.0, T: float = 0.25, h: float = 2e-3,
                  dt: float = 1e-4, levels: int = 2, n_times: int = 5,
                  boundary: str = "images", tol: float = 1e-3) -> StudyReport:
    """No-feedback absorbed mass against the reflection formula.

    The initial point mass sits in the grid cell containing x0; each refinement
    level maps (h, dt) to (h/2, dt/4).
    """
    times = np.linspace(T / n_times, T, n_times)
    errs_T, rows, max_err0 = [], [], None
    wall = {}
    for lev in range(levels):
        hl, dl = h / 2 ** lev, dt / 4 ** lev
        left = math.floor(x0 / hl + 1e-9) * hl
        spec = homogeneous_spec(0.0, Uniform(left, left + hl), horizon=T, sigma=sigma)
        sol, w = _wall(solve, spec, hl, dl, boundary=boundary)
        wall[f"level{lev}"] = w
        got = sol.at(times)[:, 0]
        exact = fp_absorbed_exact(x0, sigma, times)
        err = got - exact
        if lev == 0:
            max_err0 = float(np.max(np.abs(err)))
        errs_T.append(float(err[-1]))
        rows += [(lev, hl, dl, float(t), float(g), float(e), float(g - e))
                 for t, g, e in zip(times, got, exact)]
    ratios = [b / a for a, b in zip(errs_T[:-1], errs_T[1:]) if a != 0]
    metrics = {"x0": x0, "sigma": sigma, "T": T, "max_abs_error": max_err0,
               "error_at_T": errs_T, "ratios": ratios, "exact_at_T": float(fp_absorbed_exact(x0, sigma, T))}
    ok = max_err0 < tol and all(0.35 <= r <= 0.65 for r in ratios)
    return StudyReport("fp_validation", "pass" if ok else "fail", metrics, [], wall,
                       {"absorbed": (["level", "h", "dt", "t", "solver", "exact", "error"], rows)})


# ---------------------------------------------------------------------------
# smallness and regularity


def random_spec(rng: np.random.Generator, target_B: float, concentrated: bool = False,
                horizon: float = 0.5, max_atoms: int = 3) -> ModelSpec:
    """Random multi-type spec whose contraction bound equals ``target_B``.

    ``concentrated`` puts the initial mass on a short interval next to 0, the
    regime where a large bound actually produces a jump.
    """
    k = int(rng.integers(1, 3))
    A = int(rng.integers(1, max_atoms + 1))
    p = rng.dirichlet(np.ones(A))
    p = p / p.sum()
    atoms = []
    for i in range(A):
        u = rng.uniform(0.2, 1.0, k)
        v = rng.uniform(0.2, 1.0, k)
        atoms.append(TypeAtom(u=u, v=v, p=p[i]))
    atoms[-1] = TypeAtom(u=atoms[-1].u, v=atoms[-1].v, p=1.0 - sum(a.p for a in atoms[:-1]))
    dist = TypeDistribution(atoms=tuple(atoms), k=k)
    F = LossTransform("log1p", scale=float(rng.uniform(0.5, 1.5))) if rng.random() < 0.5 \
        else LossTransform()
    g = FeedbackWeight(kind="linear_decay" if rng.random() < 0.5 else "constant",
                       c=tuple(rng.uniform(0.5, 1.5, A)))
    sig = AffineInTime(a=tuple(rng.uniform(0.5, 1.0, A)))
    co = CoefficientSet(F=F, g=g, b=AffineInTime(a=(0.0,)), sigma=sig)
    widths = rng.uniform(0.3, 0.6, A) if concentrated else rng.uniform(1.0, 3.0, A)
    proto = ModelSpec(dist, co, tuple(Uniform(0.0, w) for w in widths), horizon)
    # rescale the supports so the bound hits the target
    B = check_smallness(proto).bound_value
    widths = widths * B / target_B
    return ModelSpec(dist, co, tuple(Uniform(0.0, float(w)) for w in widths), horizon)


def _flag_task(task):
    spec, h, dt = task
    sol = solve(spec, h, dt)
    return int(sol.jump_flag.sum()), sol.t_star


def smallness_study(specs: Sequence[ModelSpec], h: float, dt: float, expect_jump: bool,
                    jobs: int = 1) -> StudyReport:
    """Flagged-jump counts for a batch of specs with their contraction bounds."""
    res = ordered_map(_flag_task, [(s, h, dt) for s in specs], jobs)
    Bs = [check_smallness(s).bound_value for s in specs]
    counts = [r[0] for r in res]
    ok = all(c > 0 for c in counts) if expect_jump else all(c == 0 for c in counts)
    rows = [(i, B, c, (r[1] if r[1] is not None else "")) for i, (B, c, r) in enumerate(zip(Bs, counts, res))]
    return StudyReport("smallness", "pass" if ok else "fail",
                       {"bounds": Bs, "flag_counts": counts, "expect_jump": expect_jump},
                       [], {}, {"specs": (["spec", "B", "flagged_steps", "t_star"], rows)})


def regularity_study(spec: ModelSpec, beta: float, h: float, dt: float, s_max: float = 0.1,
                     levels: int = 2) -> StudyReport:
    """K_fit of the small-time loss envelope at successive (h/2, dt/4) refinements."""
    fits, series = [], []
    for lev in range(levels):
        sol = solve(spec, h / 2 ** lev, dt / 4 ** lev)
        series.append((sol.times, sol.L))
        env = regularity_envelope(sol.times, sol.L, beta, jump_flags=sol.jump_flag, s_max=s_max)
        fits.append(env["K_fit"])
    full = regularity_envelope(series[0][0], series[0][1], beta, s_max=s_max, refined=series[1:])
    spread = max(fits) / min(fits) - 1.0 if min(fits) > 0 else math.inf
    return StudyReport("regularity", "pass" if spread <= 0.2 else "fail",
                       {"K_fit": fits, "relative_spread": spread,
                        "explosion_flag": full["explosion_flag"], "l2_norms": full["l2_norms"]},
                       [], {}, {"kfit": (["level", "K_fit"], list(enumerate(fits)))})


def unstable_piecewise(rng: np.random.Generator, alpha: float = 1.0) -> PiecewiseConstant:
    """Random normalized histogram with alpha * density > 1.2 next to 0 (jump at t = 0)."""
    while True:
        n = int(rng.integers(2, 5))
        edges = np.concatenate([[0.0], np.cumsum(rng.uniform(0.1, 0.6, n))])
        vals = rng.uniform(0.2, 3.0, n)
        vals[0] = rng.uniform(2.0, 6.0)
        pc = PiecewiseConstant.normalized(edges, vals)
        if alpha * pc.values[0] > 1.2:
            return pc
