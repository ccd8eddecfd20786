"""Pinned reproduction suites: run fixed configurations and check each numeric target."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

from .config import ExperimentConfig, default_config
from .experiments import ResultBundle, run_experiment, write_bundle

SUITES = ("norms", "traffic", "events")

# pinned Monte Carlo sizes
TRAFFIC_TRIALS, TRAFFIC_HORIZON = 200, 600
EVENTS_TRIALS, EVENTS_HORIZON = 200, 2000


@dataclass(frozen=True)
class Check:
    criterion: int
    name: str
    target: str
    observed: float | str
    tolerance: str
    verdict: str  # "pass", "fail" or "warn"

    @property
    def passed(self) -> bool:
        return self.verdict != "fail"


def _within(name, crit, target, observed, rel=None, abs_=None) -> Check:
    if rel is not None:
        ok = abs(observed - target) <= rel * abs(target)
        tol = f"+-{rel:.0%}"
    else:
        ok = abs(observed - target) <= abs_
        tol = f"+-{abs_:g}"
    return Check(crit, name, f"{target:g}", observed, tol, "pass" if ok else "fail")


def _bool(name, crit, target, observed, ok, tol="exact") -> Check:
    return Check(crit, name, target, observed, tol, "pass" if ok else "fail")


def suite_config(suite: str, seed: int, trials: int | None = None) -> ExperimentConfig:
    if suite == "norms":
        return default_config("norms", seed)
    if suite == "traffic":
        return default_config("traffic", seed, trials=trials or TRAFFIC_TRIALS, horizon=TRAFFIC_HORIZON)
    if suite == "events":
        return default_config("events", seed, trials=trials or EVENTS_TRIALS, horizon=EVENTS_HORIZON)
    raise ValueError(f"unknown suite {suite!r}")


def check_norms(b: ResultBundle) -> list[Check]:
    out = [_within("kappa(ln 2, 0.05)", 1, 2.65, b.record("kappa(eps=0.693147,delta=0.05)")["value"], abs_=0.01)]
    for r in b.records:
        if r["name"].startswith("ma"):
            l = int(r["name"][2:])
            out.append(_within(f"MA({l}) squared H2 norm", 2, 1.0 / l, r["h2_sq"], abs_=1e-9))
            out.append(_within(f"MA({l}) Hinf norm", 2, 1.0, r["hinf"], abs_=1e-9))
    grid = b.traces["crossover"].rows
    # preferred is -1 (input), 0 (tie within rounding) or 1 (output)
    bad = [(int(n), int(l)) for n, l, _, _, pref in grid if (pref < 0) != (n < l)]
    out.append(_bool("input beats output iff n < l (10x10 grid)", 3, "0 violations", len(bad), not bad))
    out.append(_within("traffic Kalman filter sensitivity gain", 4, 0.57, b.record("traffic_gamma")["value"],
                       abs_=0.02))
    return out


def check_traffic(b: ResultBundle) -> list[Check]:
    emp = {r["name"]: r for r in b.records}
    out = [
        _within("uncompensated input noise RMSE (km/h)", 5, 26.0, emp["input"]["empirical"], rel=0.20),
        _within("compensated input noise RMSE (km/h)", 5, 0.31, emp["input-compensated"]["empirical"], rel=0.15),
        _within("output perturbation RMSE (km/h)", 5, 2.41, emp["output"]["empirical"], rel=0.15),
    ]
    cs, os_ = emp["input-compensated"]["convergence_step"], emp["output"]["convergence_step"]
    out.append(_bool("compensated converges slower than output", 5, "steps(comp) > steps(out)",
                     f"{cs} vs {os_}", cs > os_, "qualitative"))
    lmi = emp["lmi"]["empirical"]
    base = emp["output"]["empirical"]
    out.append(_bool("LMI RMSE beats output baseline", 6, f"< {base:.4g}", lmi, lmi <= base, "strict"))
    near = abs(lmi - 2.31) <= 0.1
    out.append(Check(6, "LMI RMSE near 2.31 km/h", "2.31", lmi, "+-0.1",
                     "pass" if near else ("warn" if lmi <= base else "fail")))
    n_ok, n_feas = emp["lmi"]["sweep_verified"], emp["lmi"]["sweep_feasible"]
    out.append(_bool("recovered filters pass verification", 6, f"{n_feas}/{n_feas}", f"{n_ok}/{n_feas}",
                     n_ok == n_feas and n_feas > 0, "rel 1e-5"))
    return out


def check_events(b: ResultBundle) -> list[Check]:
    e = {r["name"]: r for r in b.records}
    out = [_within("kappa^2 times squared H2 norm of G", 7, 30.1, e["kappa2_h2"]["value"], rel=0.02)]
    zfe, mmse, inp = e["zfe"]["empirical"], e["mmse"]["empirical"], e["input"]["empirical"]
    out.append(_bool("MMSE < ZFE < input noise", 8, "ordered", f"{mmse:.4g} < {zfe:.4g} < {inp:.4g}",
                     mmse < zfe < inp, "strict"))
    out.append(_bool("ZFE MSE in [4, 9]", 8, "[4, 9]", zfe, 4 <= zfe <= 9, "range"))
    out.append(_bool("MMSE MSE in [3, 7]", 8, "[3, 7]", mmse, 3 <= mmse <= 7, "range"))
    det = e["input+detector-gaussian"]["empirical"]
    out.append(_bool("detector MSE below 60% of input noise", 8, f"< {0.6 * inp:.4g}", det, det < 0.6 * inp,
                     "ratio 0.6"))
    return out


CHECKERS = {"norms": check_norms, "traffic": check_traffic, "events": check_events}


def run_suite(suite: str, seed: int = 0, trials: int | None = None) -> tuple[ResultBundle, list[Check]]:
    b = run_experiment(suite_config(suite, seed, trials))
    return b, CHECKERS[suite](b)


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6g}" if math.isfinite(v) else str(v)
    return str(v)


def render_report(results: dict[str, list[Check]]) -> str:
    lines = ["# Reproduction report", ""]
    for suite, checks in results.items():
        lines += [f"## {suite}", "", "| criterion | check | target | observed | tolerance | verdict |",
                  "|---|---|---|---|---|---|"]
        for c in checks:
            lines.append(f"| {c.criterion} | {c.name} | {c.target} | {_fmt(c.observed)} | {c.tolerance} | "
                         f"{c.verdict} |")
        lines.append("")
    n_fail = sum(not c.passed for cs in results.values() for c in cs)
    lines.append(f"{n_fail} failing check(s).")
    return "\n".join(lines) + "\n"


def reproduce(suites=SUITES, seed: int = 0, trials: int | None = None,
              out_dir: str | Path | None = None) -> dict[str, list[Check]]:
    """Run the suites; with ``out_dir`` write ``report.md`` and one bundle per suite."""
    results = {}
    for s in suites:
        bundle, checks = run_suite(s, seed, trials)
        results[s] = checks
        if out_dir is not None:
            write_bundle(bundle, Path(out_dir) / s)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "report.md").write_text(render_report(results))
    return results
