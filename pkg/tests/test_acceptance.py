"""Acceptance battery: one PASS/FAIL line per criterion in the terminal summary.

Criterion 3 reads the residual monitor filled by every other test, so conftest
moves it to the end of the session.
"""

import time
from pathlib import Path

import numpy as np
import pytest

from mvcascade import meanfield
from mvcascade.cli import main
from mvcascade.densities import PowerRamp, Uniform
from mvcascade.experiments import (StudyConfig, convergence_study, domination_study, fp_validation,
                                   physical_jump_crosscheck, random_spec, regularity_study,
                                   smallness_study, unstable_piecewise)
from mvcascade.meanfield import initial_field, solve
from mvcascade.model import check_smallness, homogeneous_spec
from mvcascade.particles import init_particles, resolve_cascade_discrete

from oracles import compare_with_brute_force

pytestmark = pytest.mark.acceptance
CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def _hand_example(x2):
    spec = homogeneous_spec(1.0, Uniform(0, 2))
    st = init_particles(spec, 2, seed=0)
    st.X = np.array([0.0, x2])
    return resolve_cascade_discrete(st, spec, [0]).dL.tolist()


def test_criterion_01_cascade_oracles(acceptance_line):
    t0 = time.perf_counter()
    full, partial = _hand_example(0.4), _hand_example(0.6)
    rng = np.random.default_rng(20240611)
    matches = sum(compare_with_brute_force(rng)[0] for _ in range(200))
    wall = time.perf_counter() - t0
    ok = full == [1.0] and partial == [0.5] and matches == 200 and wall < 10
    acceptance_line(1, ok, f"hand dL {full[0]}, {partial[0]}; brute force {matches}/200; {wall:.1f}s")
    assert ok


def test_criterion_02_stability_dichotomy(acceptance_line):
    t0 = time.perf_counter()
    h = 0.005
    stable = solve(homogeneous_spec(1.0, Uniform(0, 2), horizon=0.5), h, 1e-3)
    amp = float(stable.amplification.max())
    unstable_spec = homogeneous_spec(1.0, Uniform(0, 0.5), horizon=0.02)
    unstable = solve(unstable_spec, h, 1e-3)
    sup = float(initial_field(unstable_spec, h).rows.max())
    jump = float(unstable.L[1, 0] - unstable.L[0, 0])
    wall = time.perf_counter() - t0
    ok = (not stable.jump_flag.any() and amp <= 2 + 1e-6 and bool(unstable.jump_flag[1])
          and abs(jump - 1.0) <= 2 * h * sup and wall < 5)
    acceptance_line(2, ok, f"stable max amplification {amp:.6f}; unstable first-step jump "
                           f"{jump:.6f} (tol {2 * h * sup:.3f}); {wall:.1f}s")
    assert ok


def test_criterion_04_first_passage(acceptance_line):
    t0 = time.perf_counter()
    rep = fp_validation(h=2e-3, dt=1e-4, levels=2)
    wall = time.perf_counter() - t0
    m = rep.metrics
    ok = rep.verdict == "pass" and wall < 30
    acceptance_line(4, ok, f"error at T {m['error_at_T'][0]:.2e}, refinement ratio "
                           f"{m['ratios'][0]:.3f}; {wall:.1f}s")
    assert ok


def test_criterion_05_smallness_regime(acceptance_line):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    small = [random_spec(rng, float(rng.uniform(0.2, 0.85)), horizon=0.5) for _ in range(20)]
    large = [random_spec(rng, float(rng.uniform(3.2, 6.0)), concentrated=True, horizon=0.5)
             for _ in range(10)]
    bounds_ok = (all(check_smallness(s).bound_value < 0.9 for s in small)
                 and all(check_smallness(s).bound_value > 3 for s in large))
    a = smallness_study(small, 0.005, 5e-4, expect_jump=False)
    b = smallness_study(large, 0.005, 5e-4, expect_jump=True)
    wall = time.perf_counter() - t0
    ok = bounds_ok and a.verdict == b.verdict == "pass" and wall < 120
    flagged = sum(c > 0 for c in b.metrics["flag_counts"])
    quiet = sum(c == 0 for c in a.metrics["flag_counts"])
    acceptance_line(5, ok, f"B<0.9 specs without flags {quiet}/20; "
                           f"B>3 specs flagged {flagged}/10; {wall:.1f}s")
    assert ok


def test_criterion_06_convergence(acceptance_line):
    t0 = time.perf_counter()
    spec = homogeneous_spec(0.4, Uniform(0, 2), horizon=1.0)
    cfg = StudyConfig(spec=spec, n_ladder=(500, 2000, 8000), seeds=tuple(range(20)),
                      h=2e-3, dt=1e-4, particle_dt=1e-3, threshold=0.05)
    rep = convergence_study(cfg, jobs=2)
    wall = time.perf_counter() - t0
    med = rep.metrics["median_gap"]
    ok = rep.verdict == "pass" and wall < 600
    acceptance_line(6, ok, "median sup-gap " + ", ".join(f"{m:.4f}" for m in med)
                    + f" (slope {rep.metrics.get('loglog_slope', float('nan')):.2f}); {wall:.1f}s")
    assert ok


def test_criterion_07_domination(acceptance_line):
    t0 = time.perf_counter()
    spec = homogeneous_spec(0.5, PowerRamp(1.0, 2.0), horizon=0.5)
    rep = domination_study(StudyConfig(spec=spec, h=0.005, dt=5e-4, env_ratio=0.75))
    wall = time.perf_counter() - t0
    env = rep.metrics["envelope"]
    ok = rep.verdict == "pass" and wall < 60
    acceptance_line(7, ok, "envelope " + ", ".join(f"{e:.3e}" for e in env)
                    + f"; min gap {min(rep.metrics['min_gap']):.2e}; {wall:.1f}s")
    assert ok


def test_criterion_08_regularity(acceptance_line):
    t0 = time.perf_counter()
    spec = homogeneous_spec(0.0, PowerRamp(0.5, 1.0), horizon=0.2)
    rep = regularity_study(spec, 0.5, 2e-3, 1e-4, s_max=0.1, levels=2)
    wall = time.perf_counter() - t0
    fits = rep.metrics["K_fit"]
    ok = rep.verdict == "pass" and wall < 60
    acceptance_line(8, ok, "K_fit " + ", ".join(f"{k:.4f}" for k in fits)
                    + f" (spread {rep.metrics['relative_spread']:.1%}); {wall:.1f}s")
    assert ok


def test_criterion_09_physical_jump(acceptance_line):
    t0 = time.perf_counter()
    rng = np.random.default_rng(99)
    errs, verdicts = [], []
    for _ in range(10):
        spec = homogeneous_spec(1.0, unstable_piecewise(rng))
        rep = physical_jump_crosscheck(spec, 0.005)
        verdicts.append(rep.verdict)
        errs.append(rep.metrics["abs_error"] / rep.metrics["tolerance"])
    wall = time.perf_counter() - t0
    ok = all(v == "pass" for v in verdicts) and wall < 60
    acceptance_line(9, ok, f"{verdicts.count('pass')}/10 agree; worst error {max(errs):.1e} "
                           f"of the two-cell tolerance; {wall:.1f}s")
    assert ok


CLI_CASES = {
    "validate": ("homogeneous.toml", []),
    "check-smallness": ("homogeneous.toml", []),
    "simulate-particles": ("homogeneous.toml", ["particles.n=300", "model.horizon=0.2"]),
    "solve-meanfield": ("core_periphery.toml", ["model.horizon=0.2", "solver.snapshot_times=[0.1]"]),
    "converge": ("homogeneous.toml", ["study.n_ladder=[100, 200]", "study.n_seeds=2",
                                      "model.horizon=0.2", "solver.h=0.01"]),
    "dominate": ("homogeneous.toml", ["model.horizon=0.2", "solver.h=0.01"]),
    "crosscheck-jump": ("smallness_fail.toml", []),
    "risk": ("core_periphery.toml", ["study.scenarios=10", "model.horizon=0.2"]),
    "fp-validate": (None, ["fp.h=0.01", "fp.dt=1e-3", "fp.levels=1"]),
}


def _primary(directory: Path) -> dict:
    csvs = sorted(directory.glob("*.csv"))
    files = csvs or [p for p in sorted(directory.glob("*.json"))
                     if p.name not in ("manifest.json", "summary.json")]
    return {p.name: p.read_bytes() for p in files}


def test_criterion_10_cli_determinism(acceptance_line, tmp_path, capsys):
    t0 = time.perf_counter()
    bad = []
    for sub, (config, sets) in CLI_CASES.items():
        outs = []
        for jobs in ("1", "2"):
            argv = [sub, "--jobs", jobs, "--seed", "3", "--out", str(tmp_path / sub)]
            if config:
                argv += ["--config", str(CONFIGS / config)]
            for s in sets:
                argv += ["--set", s]
            code = main(argv)
            d = Path(capsys.readouterr().out.strip().splitlines()[-1])
            outs.append((code, _primary(d)))
        (c1, f1), (c2, f2) = outs
        if c1 != c2 or not f1 or f1 != f2:
            bad.append(sub)
    wall = time.perf_counter() - t0
    ok = not bad
    acceptance_line(10, ok, f"{len(CLI_CASES) - len(bad)}/{len(CLI_CASES)} subcommands "
                            f"byte-identical across --jobs 1/2" + (f" (differ: {bad})" if bad else "")
                    + f"; {wall:.1f}s")
    assert ok


def test_criterion_03_fixed_point_identity(acceptance_line):
    # a small battery of its own so the check is meaningful when run in isolation
    solve(homogeneous_spec(1.0, Uniform(0, 2), horizon=0.2), 0.01, 1e-3)
    solve(homogeneous_spec(0.8, PowerRamp(1.0, 1.5), rho=0.3, horizon=0.2), 0.01, 1e-3,
          common_noise=1)
    st = meanfield.RESIDUAL_MONITOR
    ok = st["count"] > 0 and st["max"] < 1e-10
    acceptance_line(3, ok, f"max residual {st['max']:.2e} over {st['count']} converged cascades")
    assert ok
