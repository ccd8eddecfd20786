"""Experiment runners: one per scenario kind, each returning a serializable result bundle."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, events, kalman_dp, lmi, lti, mechanisms
from .config import ExperimentConfig
from .errors import DPFilterError
from .models import ParticipantModel
from .privacy import BoundedVariation, BudgetLedger, PrivacyBudget, kappa

log = logging.getLogger("dpfilter")


@dataclass
class Trace:
    columns: list[str]
    rows: np.ndarray


@dataclass
class ResultBundle:
    kind: str
    records: list[dict]
    traces: dict[str, Trace] = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {"kind": self.kind, "records": self.records, "provenance": self.provenance}

    def record(self, name: str) -> dict:
        for r in self.records:
            if r["name"] == name:
                return r
        raise KeyError(name)


def _clean(v):
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    if isinstance(v, (np.floating, float)):
        v = float(v)
        return v if math.isfinite(v) else None
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.ndarray):
        return _clean(v.tolist())
    return v


def write_bundle(bundle: ResultBundle, out_dir: str | Path) -> Path:
    """``summary.json`` plus one ``trace_<name>.csv`` per trace (17 significant digits)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "summary.json").write_text(json.dumps(_clean(bundle.summary()), indent=2, sort_keys=True) + "\n")
    for name, tr in bundle.traces.items():
        with (out / f"trace_{name}.csv").open("w") as fh:
            fh.write(",".join(tr.columns) + "\n")
            for row in np.atleast_2d(tr.rows):
                fh.write(",".join(f"{float(x):.17g}" for x in row) + "\n")
    return out


def _budget(cfg: ExperimentConfig) -> PrivacyBudget:
    return PrivacyBudget(cfg.budget.epsilon, cfg.budget.delta)


def _entry(name: str, analytic=None, empirical=None, stderr=None, trials=None, **extra) -> dict:
    rec = {"name": name, "analytic": analytic, "empirical": empirical, "stderr": stderr, "trials": trials}
    rec.update(extra)
    return rec


# --------------------------------------------------------------------------
# aggregate
# --------------------------------------------------------------------------


def _channel(spec) -> lti.System:
    if isinstance(spec, dict) and "moving_average" in spec:
        return mechanisms.moving_average(int(spec["moving_average"]))
    return lti.system_from_dict(spec)


def run_aggregate(cfg: ExperimentConfig) -> ResultBundle:
    p = cfg.params
    chans = [_channel(c) for c in p.channels]
    n = len(chans)
    bounds = [p.bounds] * n if np.isscalar(p.bounds) else list(p.bounds)
    orders = [p.orders] * n if np.isscalar(p.orders) else list(p.orders)
    adj = BoundedVariation(tuple(float(o) for o in orders), tuple(float(b) for b in bounds))
    budget = _budget(cfg)
    placements = ["input", "output"] if p.placement == "both" else [p.placement]
    inputs = [np.full((cfg.horizon, lti.to_state_space(G).n_inputs), p.input_level) for G in chans]
    records, traces = [], {}
    for pl in placements:
        design = (mechanisms.design_input_perturbation if pl == "input" else mechanisms.design_output_perturbation)
        pipe = design(chans, adj, budget, p.noise)
        mc = mechanisms.monte_carlo_mse(pipe, inputs, cfg.trials, cfg.seed)
        records.append(_entry(pl, pipe.predicted_mse, mc.mse, mc.stderr, mc.trials, sigma=list(pipe.sigma)))
        traces[pl] = Trace(["trial", "mse"], np.column_stack([np.arange(cfg.trials), mc.per_trial]))
    if len(placements) == 2 and p.noise == "gaussian":
        co = mechanisms.crossover_analysis(chans, adj, budget)
        records.append({"name": "crossover", "input_mse": co.input_mse, "output_mse": co.output_mse,
                        "preferred": co.preferred})
    return ResultBundle("aggregate", records, traces)


# --------------------------------------------------------------------------
# traffic
# --------------------------------------------------------------------------


def traffic_scenario(cfg_traffic, budget: PrivacyBudget) -> kalman_dp.TrafficScenario:
    t = cfg_traffic
    return kalman_dp.build_traffic_scenario(t.n, t.Ts, t.sigma1, t.sigma2, t.rho, budget, t.v0_mean, t.v0_std,
                                            t.kf_init)


def synthesize_traffic_lmi(sc: kalman_dp.TrafficScenario, factors, form: str = "filter") -> lmi.SynthesisResult:
    """Constrained-gain sweep at multiples of the Kalman filter's sensitivity gain."""
    m = sc.models[0]
    g_kf = kalman_dp.sensitivity_gain(m, kalman_dp.steady_state_kf(m, form).realization)
    return lmi.synthesize_filter(m, sc.budget, "constrain-hinf", gamma_max=[g_kf * f for f in factors],
                                 n_replicas=sc.n)


def run_traffic(cfg: ExperimentConfig) -> ResultBundle:
    p = cfg.params
    budget = _budget(cfg)
    sc = traffic_scenario(p, budget)
    records, traces = [], {}
    rms_cols, rms_rows = ["step"], [np.arange(cfg.horizon)]
    for pl in p.placements:
        extra = {}
        if pl == "input":
            d = kalman_dp.design_input_noise_dp(sc.models, budget, compensated=False, form=p.form)
        elif pl == "input-compensated":
            d = kalman_dp.design_input_noise_dp(sc.models, budget, compensated=True, form=p.form)
        elif pl == "output":
            d = kalman_dp.design_output_noise_dp(sc.models, budget, form=p.form)
        else:
            syn = synthesize_traffic_lmi(sc, p.gamma_factors, p.form)
            d = kalman_dp.design_output_noise_dp(sc.models, budget, realizations=[syn.realization] * sc.n,
                                                 placement="lmi")
            extra = {"lam": syn.lam, "mu": syn.mu, "certified_rmse_kmh": math.sqrt(syn.certified_mse) * 3.6,
                     "sweep_points": len(syn.sweep),
                     "sweep_feasible": sum(pt.status == "ok" for pt in syn.sweep),
                     "sweep_verified": sum(pt.status == "ok" and pt.verified for pt in syn.sweep)}
        r = kalman_dp.monte_carlo_rmse(d, cfg.horizon, cfg.trials, cfg.seed, kf_init=sc.kf_init, burn_in=p.burn_in)
        k = kalman_dp.KMH_PER_MS
        records.append(_entry(pl, d.predicted_rmse * k, r.rmse * k, r.stderr * k * k, r.trials, units="km/h",
                              metric="rmse", stderr_of="mse (km/h)^2", convergence_step=r.convergence_step,
                              input_sigma=d.input_sigma[0], output_sigma=d.output_sigma,
                              gamma=d.gammas[0] if d.gammas else None, **extra))
        rms_cols.append(pl)
        rms_rows.append(r.rms_trace * k)
        traces[f"estimate_{pl}"] = Trace(["step", "true_kmh", "released_kmh"],
                                         np.column_stack([np.arange(cfg.horizon), r.z_trace[:, 0] * k,
                                                          r.zhat_trace[:, 0] * k]))
    traces["rms_error"] = Trace(rms_cols, np.column_stack(rms_rows))
    return ResultBundle("traffic", records, traces)


# --------------------------------------------------------------------------
# events
# --------------------------------------------------------------------------


def events_designs(cfg: ExperimentConfig):
    """Designs for every configured mechanism (detector once per noise kind)."""
    p = cfg.params
    budget = _budget(cfg)
    G = lti.to_tf(lti.system_from_dict(p.filter))
    proc = events.BurstProcess(p.p_on, p.p_off)
    out = {}
    zfe = None
    for mech in p.mechanisms:
        if mech == "input":
            out["input"] = events.design_input_noise(G, budget)
        elif mech == "input+detector":
            for nk in p.detector_noise:
                out[f"input+detector-{nk}"] = events.design_input_noise(G, budget, nk, detector=True)
        elif mech == "output":
            out["output"] = events.design_output_noise(G, budget)
        elif mech in ("zfe", "mmse"):
            zfe = zfe or events.design_zfe(G, budget, p.factor_order)
            if mech == "zfe":
                out["zfe"] = zfe
            else:
                if p.statistics == "analytic":
                    stats = proc.statistics(p.max_lag)
                else:
                    calib = proc.sample(p.calibration_steps, cfg.seed ^ 0x5EED)
                    stats = events.InputStatistics.from_samples(calib, p.max_lag)
                out["mmse"] = events.design_mmse(G, zfe.G1, stats, budget, p.fir_order)
    return G, proc, out


def run_events(cfg: ExperimentConfig) -> ResultBundle:
    G, proc, designs = events_designs(cfg)
    budget = _budget(cfg)
    records, traces = [], {}
    for i, (name, mech) in enumerate(designs.items()):
        mc = events.event_monte_carlo(mech, proc, cfg.horizon, cfg.trials, cfg.seed)
        extra = {}
        if isinstance(mech, events.EqualizerDesign):
            extra = {"lower_bound": mech.lower_bound, "sigma": mech.sigma}
        records.append(_entry(name, None if math.isnan(mech.predicted_mse) else mech.predicted_mse, mc.mse,
                              mc.stderr, mc.trials, **extra))
        ledger = BudgetLedger()
        u = proc.sample(cfg.horizon, cfg.seed)
        run = events.run_event_pipeline(mech, u, cfg.seed, ledger)
        traces[name] = Trace(["step", "input", "true_output", "released"],
                             np.column_stack([np.arange(cfg.horizon), u, run.reference, run.released]))
    records.append({"name": "kappa2_h2", "value": kappa(budget) ** 2 * lti.h2_norm(G) ** 2})
    records.append({"name": "zfe_lower_bound", "value": events.zfe_lower_bound(G, budget)})
    return ResultBundle("events", records, traces)


# --------------------------------------------------------------------------
# synth
# --------------------------------------------------------------------------


def run_synth(cfg: ExperimentConfig) -> ResultBundle:
    p = cfg.params
    budget = _budget(cfg)
    if p.model == "traffic":
        sc = traffic_scenario(p.traffic, budget)
        model, models, kf_init = sc.models[0], sc.models, sc.kf_init
        n_rep = sc.n
    else:
        model = ParticipantModel.from_dict(p.model)
        n_rep = p.n_replicas
        models, kf_init = (model,) * n_rep, None
    path = p.path or None
    if p.strategy == "constrain-hinf":
        gmax = p.gamma_max
        if not gmax:
            g_kf = kalman_dp.sensitivity_gain(model, kalman_dp.steady_state_kf(model).realization)
            gmax = [g_kf * f for f in p.gamma_factors]
        res = lmi.synthesize_filter(model, budget, "constrain-hinf", gamma_max=gmax, n_replicas=n_rep, path=path)
    else:
        res = lmi.synthesize_filter(model, budget, "bisect-lambda", n_replicas=n_rep, path=path)
    d = kalman_dp.design_output_noise_dp(models, budget, realizations=[res.realization] * n_rep, placement="lmi")
    base = kalman_dp.design_output_noise_dp(models, budget)
    horizon = cfg.horizon
    burn = min(kalman_dp.BURN_IN, horizon // 2)
    r = kalman_dp.monte_carlo_rmse(d, horizon, cfg.trials, cfg.seed, kf_init=kf_init, burn_in=burn)
    records = [
        _entry("synthesized", math.sqrt(res.verified_mse), r.rmse, r.stderr, r.trials,
               certified_rmse=math.sqrt(res.certified_mse), lam=res.lam, mu=res.mu, path=res.path,
               verified_h2_sq=res.verification.h2_sq, verified_gamma=res.verification.gamma,
               verification_ok=res.verification.ok, filter=res.realization.to_dict()),
        _entry("kalman_output_baseline", base.predicted_rmse),
    ]
    sweep = np.array([[pt.lam, pt.mu, pt.certified_mse, pt.verified_mse, pt.gamma, float(pt.verified),
                       {"ok": 0, "infeasible": 1, "failed": 2}[pt.status]] for pt in res.sweep])
    traces = {"sweep": Trace(["lam", "mu", "certified_mse", "verified_mse", "gamma", "verified", "status"], sweep)}
    return ResultBundle("synth", records, traces)


# --------------------------------------------------------------------------
# norms
# --------------------------------------------------------------------------


def run_norms(cfg: ExperimentConfig) -> ResultBundle:
    p = cfg.params
    records = []
    for eps, delta in p.kappa_points:
        records.append({"name": f"kappa(eps={eps:.6g},delta={delta:.6g})",
                        "value": kappa(PrivacyBudget(float(eps), float(delta)))})
    for l in p.ma_lengths:
        G = mechanisms.moving_average(int(l))
        records.append({"name": f"ma{l}", "h2_sq": lti.h2_norm(G) ** 2, "hinf": lti.hinf_norm(G),
                        "expected_h2_sq": 1.0 / l})
    budget = _budget(cfg)
    rows = []
    for n in p.grid_n:
        for l in p.grid_l:
            co = mechanisms.crossover_analysis([mechanisms.moving_average(l)] * n,
                                               BoundedVariation.uniform(n, 1.0), budget)
            rows.append([n, l, co.input_mse, co.output_mse, {"input": -1, "tie": 0, "output": 1}[co.preferred]])
    m = kalman_dp.traffic_model(n=1, target_scale=1.0)
    g = kalman_dp.sensitivity_gain(m, kalman_dp.steady_state_kf(m).realization)
    records.append({"name": "traffic_gamma", "value": g, "value_squared": g * g})
    traces = {"crossover": Trace(["n", "l", "input_mse", "output_mse", "preferred"], np.array(rows, dtype=float))}
    return ResultBundle("norms", records, traces)


RUNNERS = {"aggregate": run_aggregate, "traffic": run_traffic, "events": run_events, "synth": run_synth,
           "norms": run_norms}


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> ResultBundle:
    """Run ``cfg`` deterministically; write the bundle when an output directory is given."""
    log.info("running %s experiment (seed %d, %d trials)", cfg.kind, cfg.seed, cfg.trials)
    try:
        bundle = RUNNERS[cfg.kind](cfg)
    except DPFilterError as e:
        if e.args and isinstance(e.args[0], str):
            e.args = (f"{cfg.kind} experiment: {e.args[0]}",) + e.args[1:]
        raise
    bundle.provenance = {"config_hash": cfg.config_hash, "version": __version__, "seed": cfg.seed,
                         "trials": cfg.trials, "horizon": cfg.horizon, "config": _clean(cfg.to_dict())}
    out_dir = out_dir if out_dir is not None else cfg.out
    if out_dir is not None:
        write_bundle(bundle, out_dir)
    return bundle
