import math
import warnings

import numpy as np
import pytest
from scipy import integrate, special

from mvcascade.coefficients import AffineInTime, CoefficientSet, LossTransform
from mvcascade.densities import PowerRamp, Uniform
from mvcascade.meanfield import (DensityField, ExplosionSignal, apply_feedback, auto_x_max,
                                 cascade_epsilon_ladder, eps_field, grid_convergence,
                                 initial_field, regularity_envelope, resolve_cascade_meanfield,
                                 solve, solve_eps_approx, transition_step, xi)
from mvcascade.model import ModelSpec, TypeAtom, TypeDistribution, homogeneous_spec


def field_of(spec, h=0.01, x_max=3.0):
    return initial_field(spec, h, x_max)


def decoupled(initial, horizon=1.0, **co):
    dist = TypeDistribution((TypeAtom(u=(0.0,), v=(1.0,), p=1.0),), 1)
    return ModelSpec(dist, CoefficientSet(**co), (initial,), horizon)


# ---------------------------------------------------------------- transition


def test_transition_first_passage_closed_form():
    spec = decoupled(Uniform(0.999, 1.001), horizon=0.25)
    fld = initial_field(spec, 2e-3, 4.0)
    absorbed = 0.0
    for _ in range(250):
        fld, a = transition_step(fld, spec, 1e-3, inplace=True)
        absorbed += a[0]
    exact = 1.0 - math.erf(math.sqrt(2.0))
    assert exact == pytest.approx(0.0455, abs=1e-4)
    assert absorbed == pytest.approx(exact, abs=1e-3)


def test_transition_zero_row():
    spec = homogeneous_spec(1.0, Uniform(0, 2))
    fld = DensityField(h=0.01, rows=np.zeros((1, 300)), L=np.zeros(1), I=np.zeros(1))
    out, a = transition_step(fld, spec, 1e-3)
    assert a.tolist() == [0.0] and out.rows.sum() == 0.0


def test_transition_pure_drift_preserves_mass():
    spec = decoupled(Uniform(1.0, 2.0), b=AffineInTime(a=(1.0,)), sigma=AffineInTime(a=(1e-4,)))
    fld = field_of(spec, 0.01, 5.0)
    m0 = fld.mass.copy()
    for _ in range(10):
        fld, a = transition_step(fld, spec, 0.01, inplace=True)
        assert a[0] == 0.0
    assert fld.mass == pytest.approx(m0, abs=1e-9)
    assert fld.rows[0, :105].max() == 0.0


def test_transition_rejects_wide_kernel():
    spec = homogeneous_spec(1.0, Uniform(0, 0.5))
    fld = field_of(spec, 0.01, 1.0)
    with pytest.raises(ValueError):
        transition_step(fld, spec, 0.1)


def test_transition_truncate_mode_conserves_mass():
    spec = decoupled(Uniform(0, 1))
    fld = field_of(spec, 0.01, 5.0)
    out, a = transition_step(fld, spec, 1e-3, boundary="truncate")
    assert out.accounting_error() < 1e-12
    assert a[0] > 0


# ---------------------------------------------------------------- xi


def test_xi_examples():
    spec = homogeneous_spec(1.0, Uniform(0, 0.5))
    fld = field_of(spec)
    X, th, M = xi(fld, spec, 0.0, [0.1])
    assert th[0] == pytest.approx(0.1) and X[0] == pytest.approx(0.2, abs=1e-12)
    X, th, _ = xi(fld, spec, 0.0, [0.0])
    assert th[0] == 0.0 and X[0] == 0.0
    spec2 = homogeneous_spec(1.0, Uniform(0, 0.5), F=LossTransform("log1p"))
    X, th, _ = xi(fld, spec2, 0.0, [0.1])
    assert th[0] == pytest.approx(math.log(1.1))
    assert X[0] == pytest.approx(0.19062, abs=1e-5)


def test_xi_rejects_negative_input():
    spec = homogeneous_spec(1.0, Uniform(0, 0.5))
    with pytest.raises(ValueError):
        xi(field_of(spec), spec, 0.0, [-0.1])


# ---------------------------------------------------------------- cascade


def test_cascade_stable_geometric_series():
    spec = homogeneous_spec(1.0, Uniform(0, 2))
    fld = field_of(spec)
    res = resolve_cascade_meanfield(fld, spec, 0.0, [1e-4], keep_iterates=True)
    assert res.converged and not res.flagged_jump
    assert res.dL[0] == pytest.approx(2e-4, rel=1e-9)
    its = np.array(res.iterates)[:, 0]
    assert np.all(np.diff(its) >= 0)
    assert res.residual < 1e-12


def test_cascade_unstable_full_absorption():
    spec = homogeneous_spec(1.0, Uniform(0, 0.5))
    res = resolve_cascade_meanfield(field_of(spec), spec, 0.0, [1e-3])
    assert res.flagged_jump
    assert res.dL[0] == pytest.approx(1.0, abs=2e-3)
    assert res.per_atom_absorbed[0] == pytest.approx(1.0, abs=1e-12)


def test_cascade_zero_seed():
    spec = homogeneous_spec(1.0, Uniform(0.5, 1.0))
    res = resolve_cascade_meanfield(field_of(spec), spec, 0.0, [0.0])
    assert res.dL.tolist() == [0.0] and res.rounds == 1 and not res.flagged_jump


def test_cascade_explosion_signal():
    spec = homogeneous_spec(1.0, Uniform(0, 0.5))
    with pytest.raises(ExplosionSignal) as ei:
        resolve_cascade_meanfield(field_of(spec), spec, 0.0, [1e-3], m_max=3)
    assert ei.value.result.flagged_jump


def test_cascade_rejects_negative_seed():
    spec = homogeneous_spec(1.0, Uniform(0, 2))
    with pytest.raises(ValueError):
        resolve_cascade_meanfield(field_of(spec), spec, 0.0, [-1.0])


def test_epsilon_ladder_limits():
    spec = homogeneous_spec(1.0, Uniform(0, 2))
    lad = cascade_epsilon_ladder(field_of(spec), spec, 0.0, [1e-6, 5e-7, 2.5e-7])
    assert lad["extrapolated"][0] == pytest.approx(0.0, abs=1e-12)
    spec = homogeneous_spec(1.0, Uniform(0, 0.5))
    lad = cascade_epsilon_ladder(field_of(spec), spec, 0.0, [1e-6, 5e-7, 2.5e-7])
    assert lad["extrapolated"][0] == pytest.approx(1.0, abs=1e-5)


# ---------------------------------------------------------------- feedback


def test_apply_feedback_examples():
    spec = homogeneous_spec(1.0, Uniform(0, 0.5))
    fld = field_of(spec)
    same = apply_feedback(fld, spec, 0.0, [0.0])
    assert np.array_equal(same.rows, fld.rows)
    out = apply_feedback(fld, spec, 0.0, [0.1])
    assert out.mass[0] == pytest.approx(0.8, abs=1e-12)
    assert out.absorbed_feedback[0] == pytest.approx(0.2, abs=1e-12)
    assert out.I[0] == pytest.approx(0.1)
    assert out.L[0] == pytest.approx(0.2, abs=1e-12)


def test_apply_feedback_decoupled_directions():
    atoms = (TypeAtom(u=(1.0, 0.0), v=(1.0, 0.0), p=0.5), TypeAtom(u=(0.0, 1.0), v=(0.0, 1.0), p=0.5))
    spec = ModelSpec(TypeDistribution(atoms, 2), CoefficientSet(), (Uniform(0, 1),) * 2, 1.0)
    fld = field_of(spec)
    out = apply_feedback(fld, spec, 0.0, [0.1, 0.3])
    assert out.absorbed_feedback == pytest.approx([0.1, 0.3], abs=1e-12)
    assert out.I == pytest.approx([0.1, 0.3])


def test_apply_feedback_warns_on_loose_tolerance():
    spec = homogeneous_spec(1.0, Uniform(0, 0.5))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        apply_feedback(field_of(spec), spec, 0.0, [0.1037])


# ---------------------------------------------------------------- solve


def _fp_exact(initial, T):
    f = lambda x: initial.pdf(x) * special.erfc(x / math.sqrt(2 * T))
    return integrate.quad(f, 0, initial.upper, points=initial.breakpoints(), limit=200)[0]


def test_solve_decoupled_is_first_passage():
    spec = decoupled(Uniform(0, 2), horizon=0.5)
    sol = solve(spec, 0.005, 1e-3)
    assert np.all(sol.L == 0.0) and not sol.jump_flag.any()
    assert sol.atom_loss[-1, 0] == pytest.approx(_fp_exact(Uniform(0, 2), 0.5), abs=2e-3)
    # v = 0 instead: the loss itself is the first-passage probability
    sol = solve(homogeneous_spec(0.0, Uniform(0, 2), horizon=0.5), 0.005, 1e-3)
    assert sol.L[-1, 0] == pytest.approx(_fp_exact(Uniform(0, 2), 0.5), abs=2e-3)


def test_solve_small_spec_has_no_jumps():
    spec = homogeneous_spec(0.5, Uniform(0, 2), horizon=0.5)
    sol = solve(spec, 0.005, 1e-3)
    assert not sol.jump_flag.any() and sol.t_star is None


def test_solve_unstable_initial_state_jumps_immediately():
    spec = homogeneous_spec(1.0, Uniform(0, 0.5), horizon=0.05)
    sol = solve(spec, 0.005, 1e-3)
    assert sol.jump_flag[1] and sol.t_star == pytest.approx(1e-3)
    assert sol.L[1, 0] == pytest.approx(1.0, abs=1e-9)
    strict = solve(spec, 0.005, 1e-3, mode="strict")
    assert strict.halted and strict.times[-1] == 0.0


def test_solve_invariants():
    atoms = (TypeAtom(u=(1.0, 0.2), v=(0.6, 0.1), p=0.3), TypeAtom(u=(0.3, 1.0), v=(0.2, 0.5), p=0.7))
    co = CoefficientSet(F=LossTransform("log1p", scale=1.5), rho=0.4,
                        b=AffineInTime(a=(0.1, -0.2)), sigma=AffineInTime("affine", (1.0, 0.8), (0.2,)))
    spec = ModelSpec(TypeDistribution(atoms, 2), co, (Uniform(0, 1.5), PowerRamp(1.0, 1.2)), 0.5)
    sol = solve(spec, 0.005, 1e-3, common_noise=3)
    d = sol.diagnostics
    assert d["mass_accounting_error"] < 1e-8
    assert d["loss_reconstruction_error"] < 1e-8
    assert d["max_residual"] < 1e-12
    assert d["max_sup"] <= d["initial_sup"] + d["density_slack"]
    assert np.all(np.diff(sol.atom_loss, axis=0) >= -1e-15)
    assert np.all(sol.field.rows >= 0)


def test_solve_needs_noise_when_correlated():
    spec = homogeneous_spec(0.5, Uniform(0, 2), rho=0.3, horizon=0.1)
    with pytest.raises(ValueError):
        solve(spec, 0.01, 1e-3)


def test_rho_zero_ignores_noise_seed():
    spec = homogeneous_spec(0.5, Uniform(0, 2), horizon=0.2)
    a = solve(spec, 0.01, 1e-3, common_noise=1)
    b = solve(spec, 0.01, 1e-3, common_noise=2)
    assert np.array_equal(a.L, b.L)


def test_same_noise_seed_is_deterministic():
    spec = homogeneous_spec(0.5, Uniform(0, 2), rho=0.5, horizon=0.2)
    a = solve(spec, 0.01, 1e-3, common_noise=1)
    b = solve(spec, 0.01, 1e-3, common_noise=1)
    c = solve(spec, 0.01, 1e-3, common_noise=2)
    assert np.array_equal(a.L, b.L) and not np.array_equal(a.L, c.L)


def test_snapshots_and_csv(tmp_path):
    spec = homogeneous_spec(0.5, Uniform(0, 2), horizon=0.1)
    sol = solve(spec, 0.01, 1e-3, snapshot_times=[0.05, 0.1])
    paths = sol.write_snapshots(tmp_path)
    assert [p.rsplit("/", 1)[1] for p in paths] == ["density_t0.050000.csv", "density_t0.100000.csv"]
    sol.write_csv(tmp_path / "l.csv")
    head = (tmp_path / "l.csv").read_text().splitlines()
    assert head[0] == "t,L_1,jump_flag,rounds" and len(head) == 102


def test_grid_convergence_estimates_shrink():
    spec = homogeneous_spec(0.5, Uniform(0, 2), horizon=0.256)
    gc = grid_convergence(spec, 0.02, 4e-3, levels=3)
    d = np.array(gc["differences"])[:, 0]
    e = np.array(gc["richardson_estimates"])[:, 0]
    assert d[1] < d[0] and e[1] < e[0]


def test_auto_x_max_covers_diffusion():
    spec = homogeneous_spec(0.5, Uniform(0, 2), horizon=1.0, drift=0.5)
    assert auto_x_max(spec, 0.01) >= 2 + 10 + 0.5 - 1e-9


# ---------------------------------------------------------------- eps systems


def test_eps_field_example():
    spec = homogeneous_spec(1.0, Uniform(0, 0.5))
    fld = eps_field(spec, 0.1, 0.01, 3.0)
    assert fld.I[0] == pytest.approx(0.2, abs=1e-12)  # lambda
    # removed sliver 0.2 plus mass on [0.1, 0.225] pushed through 0 by the shift 0.025 + 0.2
    assert fld.absorbed_initial[0] == pytest.approx(0.2 + 2 * 0.125, abs=1e-12)
    assert fld.accounting_error() < 1e-12


def test_eps_field_vanishes_as_eps_shrinks():
    spec = homogeneous_spec(0.5, Uniform(0, 2))
    base = initial_field(spec, 0.01, 4.0)
    fld = eps_field(spec, 1e-9, 0.01, 4.0)
    assert fld.L[0] < 1e-8
    assert np.max(np.abs(fld.rows - base.rows)) < 1e-6


def test_eps_field_decoupled_shift():
    spec = decoupled(Uniform(0, 2))
    fld = eps_field(spec, 0.2, 0.01, 4.0)
    assert fld.I[0] == 0.0
    # only the sliver: the eps/4 shift lands inside the emptied interval
    assert fld.absorbed_initial[0] == pytest.approx(0.1, abs=1e-12)
    assert fld.rows[0, 15:20].max() > 0 and fld.rows[0, :15].max() == 0


def test_eps_rejects_bad_eps():
    spec = homogeneous_spec(0.5, Uniform(0.2, 2))
    with pytest.raises(ValueError):
        eps_field(spec, 0.3, 0.01, 4.0)


def test_eps_solution_approaches_plain_solution():
    spec = homogeneous_spec(0.5, Uniform(0, 2), horizon=0.2)
    plain = solve(spec, 0.005, 1e-3)
    errs = [abs(solve_eps_approx(spec, e, 0.005, 1e-3).L[-1, 0] - plain.L[-1, 0])
            for e in (0.08, 0.04, 0.02)]
    assert errs[0] > errs[1] > errs[2]


# ---------------------------------------------------------------- regularity


def test_regularity_zero_series():
    t = np.linspace(0, 1, 11)
    r = regularity_envelope(t, np.zeros((11, 1)), 0.5)
    assert r["K_fit"] == 0.0 and not r["explosion_flag"]


def test_regularity_beta_one_exponent_zero():
    t = np.linspace(0, 1, 11)
    r = regularity_envelope(t, (2 * t)[:, None], 1.0, K=1.5)
    assert r["exponent"] == 0.0 and r["K_fit"] == pytest.approx(2.0)
    assert len(r["violations"]) == 9


def test_regularity_rejects_jump_segment():
    t = np.linspace(0, 1, 11)
    flags = np.zeros(11, dtype=bool)
    flags[3] = True
    with pytest.raises(ValueError):
        regularity_envelope(t, t[:, None], 0.5, jump_flags=flags)


def test_regularity_explosion_flag_on_growing_norms():
    # L = sqrt-like with a kink sharpening under refinement
    series = []
    for n in (50, 100, 200, 400):
        t = np.linspace(0, 1, n + 1)
        series.append((t, np.minimum(t * n / 10.0, 1.0)[:, None]))
    r = regularity_envelope(*series[0], 1.0, refined=series[1:])
    assert r["explosion_flag"]


def test_regularity_first_passage_oracle():
    # V0 = 1.5 x^(1/2) on (0, 1], decoupled: L(s) ~ A s^(3/4), first central difference
    # scaled by s^(1/4) equals A 2^(-1/4) = sqrt(2) Gamma(5/4) / sqrt(pi)
    spec = ModelSpec(TypeDistribution((TypeAtom(u=(1.0,), v=(0.0,), p=1.0),), 1),
                     CoefficientSet(), (PowerRamp(0.5, 1.0),), 0.05)
    sol = solve(spec, 2e-3, 1e-4)
    r = regularity_envelope(sol.times, sol.L, 0.5, s_max=0.01)
    oracle = math.sqrt(2) * math.gamma(1.25) / math.sqrt(math.pi)
    assert oracle == pytest.approx(0.72320, abs=1e-5)
    assert r["K_fit"] == pytest.approx(oracle, rel=2e-3)
