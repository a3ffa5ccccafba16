"""Command-line entry point: ``mvcascade <subcommand> --config FILE [options]``."""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import os
import sys
import time
from pathlib import Path

from . import __version__
from .config import apply_overrides, config_hash, dumps, load_config, spec_from_config
from .experiments import (StudyConfig, convergence_study, domination_study, fp_validation,
                          physical_jump_crosscheck, risk_study)
from .meanfield import solve
from .model import check_smallness, validate_model
from .particles import BudgetExceeded, simulate

EXIT_OK, EXIT_INVALID, EXIT_VERDICT, EXIT_BUDGET, EXIT_USAGE = 0, 2, 3, 4, 64
OUT_ENV = "MVCASCADE_OUT"
SUBCOMMANDS = ("validate", "check-smallness", "simulate-particles", "solve-meanfield",
               "converge", "dominate", "crosscheck-jump", "risk", "fp-validate")
FAILED_VERDICTS = ("fail", "invalid")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mvcascade", description=__doc__)
    p.add_argument("--version", action="version", version=f"mvcascade {__version__}")
    p.add_argument("subcommand", choices=SUBCOMMANDS)
    p.add_argument("--config", help="TOML config file (optional for fp-validate)")
    p.add_argument("--seed", type=int, help="root seed (overrides the config)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for independent tasks")
    p.add_argument("--out", help=f"output root (default ${OUT_ENV} or ./runs)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted config override, repeatable; last one wins")
    p.add_argument("--rho", type=float, help="shortcut for --set model.coefficients.rho=R")
    return p


class Run:
    """Run directory bookkeeping; every file written is listed in the manifest."""

    def __init__(self, root: str, subcommand: str, chash: str):
        stamp = _dt.datetime.now().strftime("%Y%m%dT%H%M%S")
        base = Path(root) / f"{stamp}_{chash}"
        path, i = base, 0
        while path.exists():
            i += 1
            path = Path(f"{base}-{i}")
        path.mkdir(parents=True)
        self.dir = path
        self.files: list[str] = []

    def path(self, name: str) -> str:
        p = self.dir / name
        self.files.append(name)
        return str(p)

    def write_json(self, name: str, obj) -> None:
        from .experiments import _jsonable
        with open(self.path(name), "w", encoding="utf-8", newline="\n") as fh:
            json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def adopt(self, paths) -> None:
        for p in paths:
            self.files.append(os.path.relpath(p, self.dir))


def _study_cfg(cfg: dict, spec, seed: int) -> StudyConfig:
    st = dict(cfg.get("study", {}))
    sol, par = cfg["solver"], cfg["particles"]
    seeds = st.pop("seeds", None)
    n_seeds = int(st.pop("n_seeds", 20))
    if seeds is None:
        seeds = [seed + i for i in range(n_seeds)]
    labels = [a.label for a in spec.distribution.atoms]
    core = st.pop("core", [i for i, lab in enumerate(labels) if lab == "core"])
    peri = st.pop("periphery", [i for i, lab in enumerate(labels) if lab == "periphery"])
    keys = {"n_ladder", "eps_ladder", "t0", "scenarios", "alphas", "q", "window",
            "output_points", "threshold", "env_ratio", "expect_no_jump"}
    extra = {k: st[k] for k in keys if k in st}
    if "window" in extra:
        extra["window"] = tuple(extra["window"])
    return StudyConfig(spec=spec, seeds=tuple(int(s) for s in seeds), core=tuple(core),
                       periphery=tuple(peri), h=float(st.get("h", sol["h"])),
                       dt=float(st.get("dt", sol["dt"])),
                       particle_dt=float(st.get("particle_dt", par["dt"])),
                       bridge=bool(par["bridge"]), boundary=sol["boundary"], seed=seed, **extra)


def _verdict_code(report) -> int:
    return EXIT_VERDICT if report.verdict.startswith(FAILED_VERDICTS) else EXIT_OK


def dispatch(args, cfg: dict, run: Run) -> int:
    sub = args.subcommand
    seed = int(cfg.get("seed", 0))
    jobs = max(1, int(args.jobs))
    if sub == "fp-validate":
        fp = cfg.get("fp", {})
        rep = fp_validation(**{k: fp[k] for k in ("x0", "sigma", "T", "h", "dt", "levels") if k in fp})
        run.adopt(rep.write(run.dir))
        return _verdict_code(rep)

    spec = spec_from_config(cfg)
    report = validate_model(spec)
    if sub == "validate":
        run.write_json("validation_report.json", report.to_dict())
        return EXIT_OK if report.ok else EXIT_INVALID
    if not report.ok:
        run.write_json("validation_report.json", report.to_dict())
        return EXIT_INVALID

    sol_cfg, par = cfg["solver"], cfg["particles"]
    if sub == "check-smallness":
        sm = check_smallness(spec)
        run.write_json("smallness_report.json", sm.to_dict())
        return EXIT_OK if sm.passes else EXIT_VERDICT

    if sub == "simulate-particles":
        try:
            res = simulate(spec, int(par["n"]), float(par["dt"]), seed=seed,
                           bridge=bool(par["bridge"]), assignment_mode=par["assignment"],
                           budget=float(par["budget"]))
            code = EXIT_OK
        except BudgetExceeded as exc:
            res, code = exc.partial, EXIT_BUDGET
            res.meta["budget_exceeded"] = True
            res.meta["completed_horizon"] = exc.completed_horizon
        res.write_csv(run.path("losses.csv"))
        res.write_defaults_csv(run.path("defaults.csv"))
        res.write_summary(run.path("summary.json"))
        return code

    if sub == "solve-meanfield":
        sol = solve(spec, float(sol_cfg["h"]), float(sol_cfg["dt"]), x_max=sol_cfg.get("x_max"),
                    common_noise=seed, mode=sol_cfg["mode"], boundary=sol_cfg["boundary"],
                    snapshot_times=sol_cfg.get("snapshot_times", []), tol=float(sol_cfg["tol"]),
                    jump_ratio=float(sol_cfg["jump_ratio"]), jump_mass=float(sol_cfg["jump_mass"]))
        sol.write_csv(run.path("losses.csv"))
        run.adopt(sol.write_snapshots(run.dir))
        run.write_json("summary.json", {"seed": seed, **sol.summary()})
        return EXIT_OK

    scfg = _study_cfg(cfg, spec, seed)
    if sub == "converge":
        rep = convergence_study(scfg, jobs)
    elif sub == "dominate":
        rep = domination_study(scfg, jobs)
    elif sub == "risk":
        rep = risk_study(scfg, jobs)
    else:  # crosscheck-jump
        st = cfg.get("study", {})
        rep = physical_jump_crosscheck(spec, float(st.get("h", sol_cfg["h"])),
                                       jump_time=float(st.get("jump_time", 0.0)),
                                       dt=float(st.get("dt", sol_cfg["dt"])))
    run.adopt(rep.write(run.dir))
    return _verdict_code(rep)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    t0 = time.perf_counter()
    overrides = list(args.overrides)
    if args.rho is not None:
        overrides.append(f"model.coefficients.rho={args.rho!r}")
    if args.config is None:
        if args.subcommand != "fp-validate":
            parser.error("--config is required for this subcommand")
        raw, cfg = b"", {"seed": 0}
        from .config import merge_defaults
        cfg = merge_defaults(cfg)
    else:
        try:
            cfg, raw = load_config(args.config)
        except (OSError, ValueError) as exc:
            parser.error(f"cannot read config: {exc}")
    try:
        cfg = apply_overrides(cfg, overrides)
    except (ValueError, IndexError, TypeError) as exc:
        parser.error(str(exc))
    if args.seed is not None:
        cfg["seed"] = int(args.seed)
    chash = config_hash(raw)
    root = args.out or os.environ.get(OUT_ENV) or "runs"
    run = Run(root, args.subcommand, chash)
    with open(run.path("effective_config.toml"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps(cfg))
    try:
        code = dispatch(args, cfg, run)
    except (ValueError, KeyError) as exc:
        print(f"mvcascade: error: {exc}", file=sys.stderr)
        code = EXIT_INVALID
    manifest = {"subcommand": args.subcommand, "config_hash": chash, "seed": cfg.get("seed"),
                "overrides": overrides, "jobs": args.jobs, "tool_version": __version__,
                "exit_code": code, "wall_time_s": time.perf_counter() - t0,
                "files": sorted(run.files + ["manifest.json"])}
    with open(run.dir / "manifest.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(str(run.dir))
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
