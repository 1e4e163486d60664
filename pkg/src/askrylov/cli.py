"""Command-line front end: matrix generation, solves, trade-off sweeps,
optimality checks, and GP training.

Configuration comes from an optional flat `key = value` file plus flags
(flags win). Every CSV artifact embeds its configuration as `# key = value`
comment lines, so identical config and seed reproduce the file byte for byte
(modulo the `# timestamp` line). Exit codes: 0 success, 1 validation error,
2 numerical failure.
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import gp
from .driver import (ASEstimator, RREstimator, TrialProblem,
                     deterministic_telemetry, run_trials, variance_curve)
from .linop import (SparseMatrixCSR, gen_sparse_spd, read_matrix_market,
                    read_vector, spd_operator, write_matrix_market,
                    write_matrix_metadata)
from .oracle import (OracleConvergenceError, OptimizationInstance, as_objective,
                     brute_force_optimum, make_adversarial_instance,
                     matched_instance)
from .seeds import generator
from .solvers import SolverBreakdownError, solve_deterministic
from .truncation import ASConfig, calibrate_eta
from .driver import randomized_solve


class CLIError(ValueError):
    """Validation failure surfaced as exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError(message)


def parse_config_file(path) -> Dict[str, str]:
    """Flat `key = value` lines; `#` starts a comment."""
    out: Dict[str, str] = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CLIError(f"{path}:{lineno}: expected `key = value`")
            key, value = (s.strip() for s in line.split("=", 1))
            out[key] = value
    return out


def _merge(args: argparse.Namespace, cfg: Dict[str, str], key: str, cast, default):
    """Flag > config file > default."""
    flag = getattr(args, key.replace("-", "_"), None)
    if flag is not None:
        return flag
    if key in cfg:
        try:
            return cast(cfg[key])
        except ValueError as e:
            raise CLIError(f"bad config value for {key}: {cfg[key]!r}") from e
    return default


def _floats(text: str) -> List[float]:
    return [float(tok) for tok in text.split(",") if tok.strip()]


def _ints(text: str) -> List[int]:
    return [int(tok) for tok in text.split(",") if tok.strip()]


def write_csv(path, meta: Dict[str, object], header: Sequence[str],
              rows: Sequence[Sequence[object]]) -> None:
    with open(path, "w") as f:
        for k in sorted(meta):
            f.write(f"# {k} = {meta[k]}\n")
        f.write(f"# timestamp = {time.strftime('%Y-%m-%dT%H:%M:%S')}\n")
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(_fmt(v) for v in row) + "\n")


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.17g}"
    return str(v)


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_matrix(args, cfg) -> int:
    n = _merge(args, cfg, "n", int, 500)
    density = _merge(args, cfg, "density", float, 0.16)
    diag = _merge(args, cfg, "diag", float, 10.0)
    seed = _merge(args, cfg, "seed", int, 1234)
    out = _merge(args, cfg, "output", str, "matrix.mtx")
    m = gen_sparse_spd(n, density, diag, seed)
    write_matrix_market(m, out)
    write_matrix_metadata(out, n=n, density=density, diag=diag, seed=seed)
    print(f"wrote {out} (n={n}, nnz={m.nnz})")
    return 0


def _load_problem(args, cfg) -> TrialProblem:
    seed = _merge(args, cfg, "seed", int, 1234)
    method = _merge(args, cfg, "method", str, "cg")
    tol = _merge(args, cfg, "tol", float, 1e-8)
    maxit = _merge(args, cfg, "maxit", int, None)
    matrix_path = _merge(args, cfg, "matrix", str, None)
    if matrix_path:
        m = read_matrix_market(matrix_path)
    else:
        n = _merge(args, cfg, "n", int, 200)
        density = _merge(args, cfg, "density", float, 0.16)
        diag = _merge(args, cfg, "diag", float, 10.0)
        m = gen_sparse_spd(n, density, diag, seed)
    b_path = _merge(args, cfg, "b", str, None)
    b = read_vector(b_path) if b_path else generator(seed + 1).standard_normal(m.n)
    sym = method in ("cg", "cr")
    return TrialProblem(matrix=m, b=b, method=method, tol=tol, maxit=maxit,
                        symmetric=sym, spd=(method == "cg"))


def cmd_solve(args, cfg) -> int:
    problem = _load_problem(args, cfg)
    seed = _merge(args, cfg, "seed", int, 1234)
    eta = _merge(args, cfg, "eta", float, None)
    rr_lambda = _merge(args, cfg, "rr-lambda", float, None)
    rr_min_iters = _merge(args, cfg, "rr-min-iters", int, 0)
    op = problem.operator()
    maxit = problem.maxit if problem.maxit is not None else 10 * op.n
    if eta is not None:
        res = randomized_solve(op, problem.b, None, problem.method,
                               ASEstimator(eta), problem.tol, maxit,
                               generator(seed + 2))
        print(f"adaptive eta={eta}: iterations={res.executed_iterations} "
              f"truncated={res.truncated}")
    elif rr_lambda is not None:
        res = randomized_solve(op, problem.b, None, problem.method,
                               RREstimator(rr_min_iters, rr_lambda), problem.tol,
                               maxit, generator(seed + 2))
        print(f"roulette lambda={rr_lambda}: iterations={res.executed_iterations} "
              f"truncated={res.truncated}")
    else:
        det = solve_deterministic(op, problem.b, tol=problem.tol, maxit=maxit,
                                  method=problem.method)
        if not det.converged:
            print("did not converge within maxit", file=sys.stderr)
            return 2
        print(f"deterministic: iterations={det.iterations} "
              f"residual={det.history[-1].residual_norm if det.history else 0.0:.3e}")
    return 0


def cmd_tradeoff(args, cfg) -> int:
    problem = _load_problem(args, cfg)
    seed = _merge(args, cfg, "seed", int, 1234)
    trials = _merge(args, cfg, "trials", int, 20000)
    workers = _merge(args, cfg, "workers", int, 1)
    out = _merge(args, cfg, "output", str, "tradeoff")
    if _merge(args, cfg, "paper-scale", lambda s: s == "true", False):
        trials = 300000
    etas = _merge(args, cfg, "eta-grid", _floats, [8.0, 16.0, 32.0, 64.0])
    lambdas = _merge(args, cfg, "rr-lambda-grid", _floats, [0.05, 0.10])
    min_iters = _merge(args, cfg, "rr-min-iters-grid", _ints, [0, 10, 20, 40])
    # worker count deliberately omitted: output is worker-count-invariant
    meta = {"seed": seed, "trials": trials, "tol": problem.tol,
            "method": problem.method, "n": problem.matrix.n}
    if trials < 30:
        meta["warning"] = "high-variance: trials < 30"
    header = ["estimator", "param", "avg_iters", "stderr_iters", "metric_mean",
              "metric_stderr", "strict_variance", "trials", "seed"]
    groups = {"as": [("as", f"eta={e}", ASEstimator(e)) for e in etas]}
    for lam in lambdas:
        groups[f"rr{lam:g}"] = [(f"rr{lam:g}", f"n={m},lambda={lam:g}",
                                 RREstimator(m, lam)) for m in min_iters]
    for name, grid in groups.items():
        rows = variance_curve(problem, grid, trials, seed, workers=workers)
        path = f"{out}_{name}.csv"
        write_csv(path, meta, header,
                  [(r.label, r.param, r.avg_iterations, r.std_err_iterations,
                    r.mean_sq_error_metric, r.metric_stderr,
                    r.strict_variance_metric, r.trials, r.seed) for r in rows])
        print(f"wrote {path}")
    return 0


def cmd_oracle_check(args, cfg) -> int:
    seed = _merge(args, cfg, "seed", int, 1234)
    n_iters = _merge(args, cfg, "n", int, 8)
    restarts = _merge(args, cfg, "restarts", int, 20)
    out = _merge(args, cfg, "output", str, "oracle_check.csv")
    rng = generator(seed)
    rows = []
    failures = 0
    for case in range(5):
        t = np.sort(rng.uniform(0.2, 4.0, size=min(n_iters, 12)))[::-1]
        eta = rng.uniform(-0.5, len(t) - 1.5)
        inst, cfg_as = matched_instance(t, eta)
        f_as = as_objective(inst, cfg_as)
        try:
            f_oracle = brute_force_optimum(inst, restarts=restarts,
                                           seed=seed + case).objective
            gap = (f_as - f_oracle) / max(abs(f_oracle), 1e-30)
            ok = abs(gap) <= 1e-6
        except OracleConvergenceError:
            f_oracle, gap, ok = float("nan"), float("nan"), False
        failures += 0 if ok else 1
        rows.append(("diminishing", case, f"{eta:.6g}", f_as, f_oracle, gap,
                     "pass" if ok else "FAIL"))
    for case in range(3):
        inst = make_adversarial_instance(n=-1, m=2 + case, epsilon=0.05, N=10 + case)
        cfg_as = ASConfig.from_n_sigma(-1, 0.5)
        f_as = as_objective(inst, cfg_as)
        try:
            f_oracle = brute_force_optimum(inst, restarts=restarts,
                                           seed=seed + 50 + case).objective
            gap = f_as - f_oracle
            ok = gap > 1e-8
        except OracleConvergenceError:
            f_oracle, gap, ok = float("nan"), float("nan"), False
        failures += 0 if ok else 1
        rows.append(("adversarial", case, "eta=-0.5", f_as, f_oracle, gap,
                     "pass" if ok else "FAIL"))
    write_csv(out, {"seed": seed, "restarts": restarts},
              ["suite", "case", "param", "schedule_objective", "oracle_objective",
               "gap", "status"], rows)
    for r in rows:
        print(" ".join(str(v) for v in r))
    print(f"wrote {out}")
    return 2 if failures else 0


def cmd_gp_train(args, cfg) -> int:
    seed = _merge(args, cfg, "seed", int, 1234)
    steps = _merge(args, cfg, "steps", int, 100)
    out = _merge(args, cfg, "output", str, "gp_trace")
    dataset_path = _merge(args, cfg, "dataset", str, None)
    target_col = _merge(args, cfg, "target-col", int, -1)
    n = _merge(args, cfg, "gp-n", int, 300)
    probes = _merge(args, cfg, "probes", int, 30)
    solvers_text = _merge(args, cfg, "solvers", str, "cholesky")
    if dataset_path:
        data = gp.load_csv_dataset(dataset_path, target_col=target_col)
    else:
        data = gp.synthetic_dataset(n=n, seed=seed)
    header = ["step", "loss", "log_gamma", "log_l", "log_sigma2", "avg_solver_iters"]
    for spec_text in solvers_text.split(","):
        spec = _parse_solver_spec(spec_text.strip())
        config = gp.TrainConfig(solver=spec, steps=steps, probes=probes, seed=seed)
        trace = gp.train(data, config)
        rows = [(s.step, s.loss, s.params.log_gamma, s.params.log_l,
                 s.params.log_sigma2, s.avg_solver_iters) for s in trace.steps]
        path = f"{out}_{spec.label}{_spec_suffix(spec)}.csv"
        write_csv(path, {"seed": seed, "steps": steps, "solver": spec_text.strip(),
                         "n": data.n, "probes": probes, "diverged": trace.diverged},
                  header, rows)
        print(f"wrote {path}")
        if trace.diverged:
            return 2
    return 0


def _parse_solver_spec(text: str) -> gp.SolverSpec:
    parts = text.split(":")
    kind = parts[0]
    try:
        if kind == "cholesky":
            return gp.CholeskySolve()
        if kind == "cg":
            return gp.TruncatedCG(maxit=int(parts[1]))
        if kind == "as":
            return gp.ASCGSolve(eta=float(parts[1]))
        if kind == "rr":
            return gp.RRCGSolve(min_iters=int(parts[1]), lam=float(parts[2]))
    except (IndexError, ValueError) as e:
        raise CLIError(f"bad solver spec {text!r}") from e
    raise CLIError(f"unknown solver {kind!r}; expected cholesky, cg, as, or rr")


def _spec_suffix(spec: gp.SolverSpec) -> str:
    if isinstance(spec, gp.TruncatedCG):
        return f"{spec.maxit}"
    if isinstance(spec, gp.ASCGSolve):
        return f"{spec.eta:g}"
    if isinstance(spec, gp.RRCGSolve):
        return f"{spec.min_iters}_{spec.lam:g}"
    return ""


def cmd_calibrate_cost(args, cfg) -> int:
    problem = _load_problem(args, cfg)
    target = _merge(args, cfg, "target-iters", float, None)
    if target is None:
        raise CLIError("calibrate-cost requires --target-iters")
    improvements, det = deterministic_telemetry(problem)
    if not det.converged:
        print("deterministic run did not converge; calibration unreliable",
              file=sys.stderr)
        return 2
    eta = calibrate_eta(improvements, target)
    print(f"deterministic iterations: {det.iterations}")
    print(f"eta for average cost {target}: {eta:.6f}")
    return 0


def build_parser() -> _Parser:
    p = _Parser(prog="askrylov",
                description="Unbiased randomized truncation of Krylov solvers")
    p.add_argument("--config", help="flat key = value configuration file")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, flags):
        sp = sub.add_parser(name)
        sp.set_defaults(fn=fn)
        for flag, typ in flags:
            sp.add_argument(f"--{flag}", type=typ, default=None)
        return sp

    add("gen-matrix", cmd_gen_matrix,
        [("n", int), ("density", float), ("diag", float), ("seed", int),
         ("output", str)])
    add("solve", cmd_solve,
        [("matrix", str), ("b", str), ("method", str), ("tol", float),
         ("maxit", int), ("seed", int), ("n", int), ("density", float),
         ("diag", float), ("eta", float), ("rr-lambda", float),
         ("rr-min-iters", int)])
    sp = add("tradeoff", cmd_tradeoff,
             [("matrix", str), ("b", str), ("method", str), ("tol", float),
              ("maxit", int), ("seed", int), ("n", int), ("density", float),
              ("diag", float), ("trials", int), ("workers", int),
              ("output", str), ("eta-grid", _floats), ("rr-lambda-grid", _floats),
              ("rr-min-iters-grid", _ints)])
    sp.add_argument("--paper-scale", action="store_true", default=None)
    add("oracle-check", cmd_oracle_check,
        [("seed", int), ("n", int), ("restarts", int), ("output", str)])
    add("gp-train", cmd_gp_train,
        [("seed", int), ("steps", int), ("output", str), ("dataset", str),
         ("target-col", int), ("gp-n", int), ("probes", int), ("solvers", str)])
    add("calibrate-cost", cmd_calibrate_cost,
        [("matrix", str), ("b", str), ("method", str), ("tol", float),
         ("maxit", int), ("seed", int), ("n", int), ("density", float),
         ("diag", float), ("target-iters", float)])
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = parse_config_file(args.config) if args.config else {}
        return args.fn(args, cfg)
    except (CLIError, ValueError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (SolverBreakdownError, OracleConvergenceError, np.linalg.LinAlgError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
