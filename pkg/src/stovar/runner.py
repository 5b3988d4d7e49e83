"""Scenario pipelines: simulate, derive, evaluate, report.

Each requested task appears exactly once in the report with a terminal
status. Failed verdicts (a residual above threshold, a drifting series) are
results, not errors; only exceptions mark a task as errored.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .density import DiracDensityModel
from .diffusion import ensemble_to_binary, ensemble_to_csv
from .exceptions import StovarError
from .nelson import (EstimatorConfig, analytic_complex_derivative, backward_derivative,
                     complex_derivative, field_to_csv, forward_derivative,
                     product_rule_check, second_derivative)
from .noether import (commutation_check, conserved_quantity, constancy_test,
                      invariance_check)
from .scenario import (Scenario, make_density, make_ensemble, make_model)
from .variation import (action, directional_derivative_fd,
                        directional_derivative_formula, el_residual, coherence_check)

TASK_ORDER = ("simulate", "derivatives", "action", "dF", "residual", "coherence", "noether")


def _jsonable(value):
    if isinstance(value, complex):
        return {"re": value.real, "im": value.imag}
    if isinstance(value, (np.floating, np.integer)):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


@dataclass
class TaskResult:
    name: str
    status: str = "ok"
    seconds: float = 0.0
    values: dict = field(default_factory=dict)
    verdicts: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)
    error: str | None = None


@dataclass
class RunReport:
    scenario_id: str
    seed: int
    threads: int
    seconds: float = 0.0
    tasks: dict = field(default_factory=dict)
    artifacts: list = field(default_factory=list)
    out_dir: str = ""

    @property
    def ok(self) -> bool:
        return all(t.status == "ok" for t in self.tasks.values())

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario_id,
            "seed": self.seed,
            "threads": self.threads,
            "seconds": round(self.seconds, 3),
            "ok": self.ok,
            "tasks": {
                name: {
                    "status": t.status,
                    "seconds": round(t.seconds, 3),
                    "values": _jsonable(t.values),
                    "verdicts": _jsonable(t.verdicts),
                    "warnings": list(t.warnings),
                    "error": t.error,
                }
                for name, t in self.tasks.items()
            },
            "artifacts": list(self.artifacts),
        }

    def to_text(self) -> str:
        lines = [f"scenario {self.scenario_id}  seed={self.seed}  threads={self.threads}"
                 f"  wall={self.seconds:.2f}s  {'OK' if self.ok else 'ERRORS'}"]
        for name, t in self.tasks.items():
            lines.append(f"[{t.status:>5}] {name} ({t.seconds:.2f}s)")
            for k, v in t.verdicts.items():
                lines.append(f"    verdict {k}: {v}")
            for k, v in t.values.items():
                lines.append(f"    {k} = {_fmt(v)}")
            for w in t.warnings:
                lines.append(f"    warning: {w}")
            if t.error:
                lines.append(f"    error: {t.error}")
        if self.artifacts:
            lines.append("artifacts:")
            lines += [f"  {a}" for a in self.artifacts]
        return "\n".join(lines)


def _fmt(v):
    if isinstance(v, complex):
        return f"{v.real:.6g}{v.imag:+.6g}i"
    if isinstance(v, float):
        return f"{v:.6g}"
    if isinstance(v, dict):
        return "{" + ", ".join(f"{k}: {_fmt(x)}" for k, x in v.items()) + "}"
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_fmt(x) for x in v) + "]"
    return str(v)


def _state_slope(values: np.ndarray, states: np.ndarray) -> complex:
    """Complex least-squares slope of values against a 1-d state."""
    x = states[:, 0]
    y = values[:, 0]
    xc = x - x.mean()
    return complex(np.sum(xc * (y - y.mean())) / np.sum(xc * xc))


class _Pipeline:
    """Shared state between tasks for one scenario run."""

    def __init__(self, sc: Scenario, threads: int):
        self.sc = sc
        self.threads = threads
        self.lagrangian = sc.make_lagrangian()
        self.model = make_model(sc.model, sc.dimension, sc.grid, self.lagrangian)
        self.ens = make_ensemble(sc, self.model, self.lagrangian, threads=threads)
        self.dm = make_density(sc, self.model, self.ens)
        self._dfield = None
        self._d2field = None

    @property
    def dfield(self):
        if self._dfield is None:
            self._dfield = analytic_complex_derivative(self.model, self.dm, self.ens)
        return self._dfield

    @property
    def d2field(self):
        if self._d2field is None:
            self._d2field = second_derivative(self.model, self.dm, self.ens,
                                              dfield=self.dfield)
        return self._d2field


def run_scenario(sc: Scenario, out_dir, threads: int = 1,
                 seed_override: int | None = None) -> RunReport:
    if seed_override is not None:
        sc = dataclasses.replace(sc, seed=int(seed_override))
    t_start = time.perf_counter()
    out = Path(out_dir) / sc.id
    out.mkdir(parents=True, exist_ok=True)
    report = RunReport(scenario_id=sc.id, seed=sc.seed, threads=threads, out_dir=str(out))

    pipe = _Pipeline(sc, threads)
    handlers = {
        "simulate": _task_simulate,
        "derivatives": _task_derivatives,
        "action": _task_action,
        "dF": _task_df,
        "residual": _task_residual,
        "coherence": _task_coherence,
        "noether": _task_noether,
    }
    for name in TASK_ORDER:
        if name not in sc.tasks:
            continue
        result = TaskResult(name=name)
        t0 = time.perf_counter()
        try:
            handlers[name](pipe, result, out, report)
        except StovarError as exc:
            result.status = "error"
            result.error = f"{type(exc).__name__}: {exc}"
        result.seconds = time.perf_counter() - t0
        report.tasks[name] = result

    report.seconds = time.perf_counter() - t_start
    _write_report(report, out)
    return report


def _write_report(report: RunReport, out: Path) -> None:
    with open(out / "report.json", "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out / "report.txt", "w") as fh:
        fh.write(report.to_text() + "\n")
    report.artifacts.extend([str(out / "report.json"), str(out / "report.txt")])


def _add_artifact(report: RunReport, path: Path) -> None:
    report.artifacts.append(str(path))


# ---------------------------------------------------------------------------
# task bodies
# ---------------------------------------------------------------------------

def _task_simulate(pipe: _Pipeline, result: TaskResult, out: Path, report: RunReport) -> None:
    ens = pipe.ens
    times = ens.grid.times
    mean = ens.values.mean(axis=0)
    var = ens.values.var(axis=0)
    path = out / "ensemble_summary.csv"
    d = ens.dim
    header = "t," + ",".join(f"mean_{j+1}" for j in range(d)) + "," + \
        ",".join(f"var_{j+1}" for j in range(d))
    table = np.column_stack([times, mean, var])
    np.savetxt(path, table, delimiter=",", header=header, comments="", fmt="%.17g")
    _add_artifact(report, path)
    result.values["paths"] = ens.n_paths
    result.values["final_mean"] = mean[-1].tolist()
    result.values["final_var"] = var[-1].tolist()
    if pipe.sc.export_ensemble:
        p = out / "ensemble.csv"
        ensemble_to_csv(ens, p)
        _add_artifact(report, p)
    if pipe.sc.export_binary:
        p = out / "ensemble.bin"
        ensemble_to_binary(ens, p)
        _add_artifact(report, p)


def _task_derivatives(pipe: _Pipeline, result: TaskResult, out: Path,
                      report: RunReport) -> None:
    sc = pipe.sc
    dfield = pipe.dfield
    result.values["route"] = dfield.method
    result.values["masked_fraction"] = dfield.masked_fraction()

    if sc.estimator.times and not pipe.model.is_deterministic:
        fwd = forward_derivative(pipe.ens, sc.estimator)
        bwd = backward_derivative(pipe.ens, sc.estimator)
        reg = complex_derivative(fwd, bwd)
        csv_path = out / "derivative_regression.csv"
        field_to_csv(reg, pipe.ens, csv_path, times=sc.estimator.times)
        _add_artifact(report, csv_path)
        if sc.dimension == 1:
            rtol = sc.tolerance("deriv_slope_rtol")
            slope_rows = {}
            all_ok = True
            for t in sc.estimator.times:
                m = sc.grid.index_of(t)
                states = pipe.ens.values[:, m, :]
                s_reg = _state_slope(reg.values[:, m, :], states)
                s_route = _state_slope(dfield.values[:, m, :], states)
                rel = abs(s_reg - s_route) / max(abs(s_route), 1e-300)
                slope_rows[f"t={t}"] = {"regression": s_reg, "route": s_route,
                                        "rel_diff": rel}
                all_ok &= rel <= rtol
            result.values["slopes"] = slope_rows
            result.verdicts["regression_matches_route"] = "pass" if all_ok else "fail"

    # product-rule residual on X paired with itself
    pr_times = sc.product_rule.get("times")
    if pr_times is None:
        interior = sc.grid.times[1:-1]
        pr_times = list(np.quantile(interior, [0.1, 0.3, 0.5, 0.7, 0.9]))
        pr_times = [sc.grid.times[sc.grid.index_of(
            sc.grid.a + round((t - sc.grid.a) / sc.grid.dt) * sc.grid.dt)]
            for t in pr_times]
    delta = sc.product_rule.get("delta", max(sc.grid.dt, (sc.grid.b - sc.grid.a) / 20.0))
    delta = max(1, round(delta / sc.grid.dt)) * sc.grid.dt
    sigmas = sc.tolerance("product_rule_sigmas")
    rows = []
    all_ok = True
    for t in pr_times:
        rep = product_rule_check(dfield, dfield.conjugate(), pipe.ens, pipe.ens, t, delta)
        ok = rep.passed(sigmas)
        all_ok &= ok
        rows.append((t, rep.lhs, rep.rhs, rep.residual, rep.combined_stderr, ok))
    path = out / "product_rule.csv"
    with open(path, "w") as fh:
        fh.write("t,lhs_re,lhs_im,rhs_re,rhs_im,residual,combined_stderr,pass\n")
        for t, lhs, rhs, res, se, ok in rows:
            fh.write(f"{t:.17g},{lhs.real:.17g},{lhs.imag:.17g},{rhs.real:.17g},"
                     f"{rhs.imag:.17g},{res:.17g},{se:.17g},{int(ok)}\n")
    _add_artifact(report, path)
    result.verdicts["product_rule"] = "pass" if all_ok else "fail"
    result.values["product_rule_times"] = [float(t) for t in pr_times]


def _task_action(pipe: _Pipeline, result: TaskResult, out: Path, report: RunReport) -> None:
    sc = pipe.sc
    est = action(pipe.ens, pipe.dfield, pipe.lagrangian,
                 unreliable_mask_fraction=sc.tolerance("action_mask_fraction"))
    result.values["value"] = est.value
    result.values["mc_stderr"] = est.mc_stderr
    result.values["stderr_re"] = est.stderr_re
    result.values["stderr_im"] = est.stderr_im
    result.values["masked_fraction"] = est.masked_fraction
    result.values["abs_integral_mean"] = est.abs_integral_mean
    result.verdicts["reliable"] = "pass" if est.reliable else "fail"
    result.warnings.extend(est.warnings)
    path = out / "action.csv"
    with open(path, "w") as fh:
        fh.write("value_re,value_im,mc_stderr,stderr_re,stderr_im,masked_fraction,"
                 "abs_integral_mean,n_paths,reliable\n")
        fh.write(f"{est.value.real:.17g},{est.value.imag:.17g},{est.mc_stderr:.17g},"
                 f"{est.stderr_re:.17g},{est.stderr_im:.17g},{est.masked_fraction:.17g},"
                 f"{est.abs_integral_mean:.17g},{est.n_paths},{int(est.reliable)}\n")
    _add_artifact(report, path)


def _task_df(pipe: _Pipeline, result: TaskResult, out: Path, report: RunReport) -> None:
    sc = pipe.sc
    agree_sig = sc.tolerance("df_agree_sigmas")
    signif_sig = sc.tolerance("df_significant_sigmas")
    rows = []
    all_agree = True
    any_significant = False
    for z in sc.make_variations():
        formula = directional_derivative_formula(pipe.ens, pipe.dfield, pipe.d2field,
                                                 pipe.lagrangian, z)
        fd = directional_derivative_fd(pipe.ens, pipe.dfield, pipe.lagrangian, z)
        agree = formula.agrees_with(fd, sigmas=agree_sig)
        significant = abs(formula.value) > signif_sig * max(formula.stderr, 1e-300)
        all_agree &= agree
        any_significant |= significant
        rows.append((z.name, formula, fd, agree, significant))
        result.values[f"dF[{z.name}]"] = {
            "formula": formula.value, "formula_stderr": formula.stderr,
            "fd": fd.value, "fd_stderr": fd.stderr,
            "bulk": formula.bulk, "g_a": formula.boundary_a, "g_b": formula.boundary_b,
        }
        if fd.flagged:
            result.warnings.append(f"dF[{z.name}] fd route: {fd.note}")
    result.verdicts["routes_agree"] = "pass" if all_agree else "fail"
    result.values["any_significant"] = any_significant
    path = out / "df.csv"
    with open(path, "w") as fh:
        fh.write("variation,formula_re,formula_im,formula_stderr,fd_re,fd_im,fd_stderr,"
                 "agree,significant\n")
        for name, formula, fd, agree, signif in rows:
            fh.write(f"{name},{formula.value.real:.17g},{formula.value.imag:.17g},"
                     f"{formula.stderr:.17g},{fd.value.real:.17g},{fd.value.imag:.17g},"
                     f"{fd.stderr:.17g},{int(agree)},{int(signif)}\n")
    _add_artifact(report, path)


def _task_residual(pipe: _Pipeline, result: TaskResult, out: Path,
                   report: RunReport) -> None:
    sc = pipe.sc
    res = el_residual(pipe.ens, pipe.model, pipe.dm, pipe.lagrangian,
                      variant="D-complex", dfield=pipe.dfield)
    ratio = res.ratio()
    threshold = sc.tolerance("residual_ratio_max")
    result.values["mean_sq_time_avg"] = float(res.mean_sq.mean())
    result.values["grad_sq_time_avg"] = float(res.grad_sq.mean())
    result.values["ratio"] = ratio
    result.values["excluded_fraction"] = res.excluded_fraction
    result.verdicts["sel_residual"] = "pass" if ratio <= threshold else "fail"
    result.warnings.extend(res.warnings)
    path = out / "residual.csv"
    table = np.column_stack([res.times, res.mean_sq, res.mean_sq_stderr, res.grad_sq])
    np.savetxt(path, table, delimiter=",", comments="",
               header="t,mean_sq,stderr,grad_sq", fmt="%.17g")
    _add_artifact(report, path)


def _task_coherence(pipe: _Pipeline, result: TaskResult, out: Path,
                    report: RunReport) -> None:
    sc = pipe.sc
    desc = sc.coherence or {}
    x0 = desc.get("x0", sc.model.get("x0", np.zeros(sc.dimension)))
    v0 = desc.get("v0", sc.model.get("v0", np.zeros(sc.dimension)))
    rep = coherence_check(pipe.lagrangian, np.asarray(x0, dtype=float),
                          np.asarray(v0, dtype=float), sc.grid,
                          tol_match=sc.tolerance("coherence_match_tol"),
                          tol_sup=sc.tolerance("coherence_sup_tol"))
    result.values["max_difference"] = rep.max_difference
    result.values["sup_stochastic"] = rep.sup_stochastic
    result.values["sup_classical"] = rep.sup_classical
    result.values["max_imag"] = rep.max_imag
    result.verdicts["residuals_match"] = "pass" if rep.residuals_match else "fail"
    result.verdicts["residuals_small"] = "pass" if rep.residuals_small else "fail"


def _task_noether(pipe: _Pipeline, result: TaskResult, out: Path,
                  report: RunReport) -> None:
    sc = pipe.sc
    inv_tol = sc.tolerance("invariance_tol")
    comm_tol = sc.tolerance("commutation_tol")
    dS = sc.tolerance("commutation_delta_s")
    for grp in sc.make_groups():
        inv = invariance_check(pipe.lagrangian, grp, pipe.ens, pipe.dfield, tol=inv_tol)
        series = conserved_quantity(pipe.lagrangian, grp, pipe.ens, pipe.dfield,
                                    invariance=inv)
        verdict = constancy_test(series, level=sc.tolerance("constancy_level"),
                                 range_factor=sc.tolerance("constancy_range_factor"))
        entry = {
            "invariant": inv.invariant,
            "invariance_deviation": inv.max_deviation,
            "verdict": verdict.verdict,
            "slope_re": verdict.slope_re.slope,
            "slope_im": verdict.slope_im.slope,
        }
        if not isinstance(pipe.dm, DiracDensityModel):
            comm = commutation_check(grp, pipe.model, pipe.dm, pipe.ens,
                                     s=0.0, delta_s=dS, dfield=pipe.dfield, tol=comm_tol)
            entry["commutation_residual"] = comm.max_discrepancy
            result.verdicts[f"commutation[{grp.name}]"] = \
                "pass" if comm.passed else "fail"
        result.values[f"group[{grp.name}]"] = entry
        result.verdicts[f"invariant[{grp.name}]"] = "pass" if inv.invariant else "fail"
        result.verdicts[f"conserved[{grp.name}]"] = verdict.verdict
        result.warnings.extend(verdict.warnings)
        path = out / f"noether_{grp.name.replace('(', '_').replace(')', '').replace(',', '_')}.csv"
        table = np.column_stack([series.times, series.values.real, series.values.imag,
                                 series.stderr])
        np.savetxt(path, table, delimiter=",", comments="",
                   header="t,re,im,stderr", fmt="%.17g")
        _add_artifact(report, path)
