"""Command-line front end: ``intervalmpc estimate|predict|synthesize|run --config FILE``.

Exit codes: 0 ok, 1 configuration error, 2 persistence-of-excitation
failure, 3 estimator inconsistency, 4 synthesis failure, 5 controller fault.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
import warnings
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, load_config
from .errors import (ConfigError, ContractError, ControllerFault, DivergenceError, ExcitationError,
                     IntervalMPCError, PEFailure, StructuralError, SynthesisFailure)
from .estimation import SetMembershipEstimator, eta_bound
from .model import Envelope, simulate_plant
from .mpc import (Experiment, HeldSignal, OcpSpec, PredictionModel, TerminalLaw, design_terminal,
                  run_receding_horizon, split_noise)
from .prediction import predict
from .stabilization import (SynthesisConfig, build_upsilon, certificate_document, delta_tilde_box,
                            load_certificate, terminal_set, verify_certificate)

EXIT_OK, EXIT_CONFIG, EXIT_PE, EXIT_INCONSISTENT, EXIT_SYNTHESIS, EXIT_FAULT = range(6)
SIGNAL_HOLD = 0.1


def _num(v) -> str:
    return repr(float(v))


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_num(v) for v in row])


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _require_plant(cfg: ExperimentConfig):
    if cfg.plant is None:
        raise ConfigError("this command needs a [plant] section")
    return cfg.plant


def _signals(cfg: ExperimentConfig, duration: float):
    """Realized disturbance, noise and initial state, all drawn from the seed."""
    rng = np.random.default_rng(cfg.seed)
    b = cfg.bounds
    omega = HeldSignal(b.omega, duration + 1.0, SIGNAL_HOLD, rng)
    nu = HeldSignal(b.nu, duration + 1.0, SIGNAL_HOLD, rng)
    x0 = b.x0_lo + rng.uniform(size=b.p) * (b.x0_hi - b.x0_lo)
    return omega, split_noise(nu, b.p), x0


def _excitation(cfg: ExperimentConfig, q: int):
    amp, freqs = cfg.estimation.amplitude, np.asarray(cfg.estimation.frequencies, dtype=float)
    phases = np.arange(q)[:, None]
    return lambda t: amp * np.sin(freqs[None, :] * t + phases).sum(axis=1)


def _synthesis_config(cfg: ExperimentConfig) -> SynthesisConfig:
    s = cfg.stabilization
    return SynthesisConfig(method=s.method, seed=cfg.seed, margin=s.margin, restarts=s.restarts,
                           iterations=s.iterations)


def _ocp_spec(cfg: ExperimentConfig) -> OcpSpec:
    m = cfg.mpc
    try:
        return OcpSpec(m.horizon, m.tau, m.segments, m.candidates, m.points, cfg.seed, m.W1, m.W2, m.W3)
    except IntervalMPCError as exc:
        raise ConfigError(f"[mpc]: {exc}") from None


# --------------------------------------------------------------------------
# commands

def cmd_estimate(cfg: ExperimentConfig, out: Path, plot: bool) -> int:
    pc = _require_plant(cfg)
    sys_, e = pc.sys, cfg.estimation
    omega, noise, x0 = _signals(cfg, e.duration)
    trace = simulate_plant(sys_, pc.theta, omega, _excitation(cfg, sys_.q), x0, e.duration, pc.step, noise)
    eta_bar = e.eta_bar if e.eta_bar is not None else eta_bound(sys_, cfg.bounds)
    est = SetMembershipEstimator(sys_, e.ell, eta_bar, float(np.max(cfg.bounds.nu1_magnitude(), initial=0.0)),
                                 x_bound=e.x_bound, observed_x=e.x_bound is None, vartheta=e.vartheta,
                                 bound=e.bound)
    n_every = max(1, int(round(e.update_every / trace.step)))
    rows, pe_failed = [], False
    for k in range(len(trace)):
        t = trace.t[k]
        est.add(t, trace.y1[k], trace.y2[k], trace.u[k])
        if k % n_every == 0:
            region = est.update(t)
            if isinstance(est.last_error, (PEFailure, ExcitationError)):
                pe_failed = True
            rows.append([t, *region.theta_hat, *region.lo, *region.hi])
    d = sys_.d
    header = (["t"] + [f"theta_hat{i}" for i in range(d)] + [f"box_lo{i}" for i in range(d)]
              + [f"box_hi{i}" for i in range(d)])
    _write_csv(out / "estimate.csv", header, rows)
    if pe_failed:
        print(f"persistence of excitation failed: {est.last_error}", file=sys.stderr)
        return EXIT_PE
    if est.inconsistent_count:
        print(f"estimator inconsistency flagged {est.inconsistent_count} time(s)", file=sys.stderr)
        return EXIT_INCONSISTENT
    return EXIT_OK


def cmd_predict(cfg: ExperimentConfig, out: Path, plot: bool) -> int:
    pc = _require_plant(cfg)
    sys_, horizon = pc.sys, cfg.predictor.horizon
    omega, _, x0 = _signals(cfg, horizon)
    truth = simulate_plant(sys_, pc.theta, omega, None, x0, horizon, pc.step)
    kinds = ("naive", "enhanced") if cfg.predictor.mode == "auto" else (cfg.predictor.mode,)
    p = sys_.p
    header = (["t"] + [f"x_lo{i}" for i in range(p)] + [f"x_hi{i}" for i in range(p)]
              + [f"x_true{i}" for i in range(p)])
    funnels = {}
    for kind in kinds:
        try:
            traj = predict(sys_, sys_.theta_box, cfg.bounds.x0_lo, cfg.bounds.x0_hi, cfg.bounds.omega, horizon,
                           pc.step, mode=kind, allow_divergence=True)
        except ContractError as exc:
            raise ConfigError(f"predictor.mode={kind}: {exc}") from None
        if traj.diverged_at is not None:
            print(f"warning: {kind} predictor diverged after t={traj.diverged_at:g}; trace truncated",
                  file=sys.stderr)
        n = traj.t.size
        rows = np.hstack([traj.t[:, None], traj.lo, traj.hi, truth.x[:n]])
        _write_csv(out / f"predict_{kind}.csv", header, rows)
        funnels[kind] = (traj.t, traj.lo, traj.hi)
    if plot:
        _plot(out / "predict.svg", "funnel", funnels, truth)
    return EXIT_OK


def _model(cfg: ExperimentConfig) -> PredictionModel:
    pc = _require_plant(cfg)
    nu1 = Envelope.symmetric(cfg.bounds.nu1_magnitude())
    return PredictionModel.build(pc.sys, cfg.bounds.omega, nu1, pc.K_pre)


def _law_from_file(cfg: ExperimentConfig, model: PredictionModel) -> TerminalLaw:
    path = Path(cfg.stabilization.certificate)
    if not path.is_absolute():
        path = cfg.base / path
    try:
        gains, cert, _ = load_certificate(path)
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"stabilization.certificate: cannot load {path}: {exc}") from None
    ext = model.extended(model.sys.theta_box)
    verdict = verify_certificate(ext, gains, cert)
    if not verdict:
        raise SynthesisFailure(f"loaded certificate is invalid: {', '.join(verdict.reasons)}")
    return TerminalLaw(ext, gains, terminal_set(cert, delta_tilde_box(ext, gains), cfg.stabilization.level_scale))


def cmd_synthesize(cfg: ExperimentConfig, out: Path, plot: bool) -> int:
    model = _model(cfg)
    if cfg.constraints is None:
        raise ConfigError("synthesize needs a [constraints] section to size the terminal set")
    law, res, report = design_terminal(model, cfg.constraints, _synthesis_config(cfg),
                                       cfg.stabilization.level_scale)
    ups = build_upsilon(law.ext, law.gains, res.cert)
    lam = float(np.linalg.eigvalsh(ups)[-1])
    extra = {"lambda_max": lam, "level": law.terminal.level, "admissibility": report.verdict,
             "method": res.method, "Z": model.Z.tolist()}
    (out / "certificate.json").write_text(certificate_document(law.gains, res.cert, extra), encoding="utf-8")
    lines = [f"lambda_max(Upsilon) = {lam!r}", f"alpha = {res.cert.alpha!r}",
             f"terminal level = {law.terminal.level!r}", f"Assumption check on X_f: {report.verdict}",
             f"method = {res.method}"]
    (out / "synthesis_report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print("\n".join(lines))
    return EXIT_OK


def _run_generic(cfg: ExperimentConfig):
    pc = _require_plant(cfg)
    if cfg.constraints is None:
        raise ConfigError("run needs a [constraints] section")
    model = _model(cfg)
    if cfg.stabilization.certificate:
        law = _law_from_file(cfg, model)
    else:
        law, _, report = design_terminal(model, cfg.constraints, _synthesis_config(cfg),
                                         cfg.stabilization.level_scale)
        if not report.ok:
            raise StructuralError(f"terminal set is not admissible ({report.verdict})")
    duration = cfg.mpc.duration
    omega, noise, x0 = _signals(cfg, duration)
    if cfg.scenario.x0 is not None:
        x0 = cfg.scenario.x0
    exp = Experiment(pc.sys, pc.theta, cfg.bounds, cfg.constraints, omega, noise, x0, pc.K_pre)
    e = cfg.estimation
    eta_bar = e.eta_bar if e.eta_bar is not None else eta_bound(pc.sys, cfg.bounds)
    est = SetMembershipEstimator(pc.sys, e.ell, eta_bar, float(np.max(cfg.bounds.nu1_magnitude(), initial=0.0)),
                                 x_bound=e.x_bound, observed_x=e.x_bound is None, vartheta=e.vartheta,
                                 bound=e.bound)
    return exp, model, law, est, duration, pc.step, cfg.constraints


def _run_lane(cfg: ExperimentConfig):
    from .vehicle import lane_config_from_dict, setup_lane_keeping

    lane = dict(cfg.scenario.lane)
    lane.setdefault("duration", cfg.mpc.duration)
    try:
        lk = lane_config_from_dict(lane, cfg.seed)
    except (TypeError, IntervalMPCError) as exc:
        raise ConfigError(f"[scenario]: {exc}") from None
    setup = setup_lane_keeping(lk, _synthesis_config(cfg))
    law = _law_from_file(cfg, setup.model) if cfg.stabilization.certificate else setup.law
    return setup.experiment, setup.model, law, setup.estimator, lk.duration, lk.step, lk.constraints


def cmd_run(cfg: ExperimentConfig, out: Path, plot: bool) -> int:
    spec = _ocp_spec(cfg)
    build = _run_lane if cfg.scenario.kind == "lane_keeping" else _run_generic
    exp, model, law, est, duration, step, constraints = build(cfg)
    try:
        log = run_receding_horizon(exp, model, law, spec, est, duration, step)
    except ControllerFault as exc:
        if exc.log is not None:
            with open(out / "run.csv", "w", encoding="utf-8", newline="") as fh:
                exc.log.to_csv(fh)
        print(f"controller fault: {exc}", file=sys.stderr)
        return EXIT_FAULT
    with open(out / "run.csv", "w", encoding="utf-8", newline="") as fh:
        log.to_csv(fh)
    summary = log.summary(constraints)
    summary["branch_switch_time"] = summary["time_to_Xf"]
    summary["terminal_level"] = law.terminal.level
    _write_json(out / "summary.json", summary)
    print(json.dumps({k: summary[k] for k in ("time_to_Xf", "violations", "switch_count", "final_box_lo",
                                              "final_box_hi")}, sort_keys=True))
    if plot:
        _plot(out / "run.svg", "run", log)
    return EXIT_OK


def _plot(path: Path, kind: str, *args) -> None:
    """Best effort: plotting problems never change the exit code."""
    from . import plots

    try:
        if kind == "funnel":
            funnels, truth = args
            doc = plots.funnel_svg(funnels, truth.x, truth.t, focus=("enhanced",))
        else:
            doc = plots.run_svg(args[0])
        path.write_text(doc, encoding="utf-8")
    except Exception as exc:  # noqa: BLE001
        print(f"warning: plot {path.name} skipped ({exc})", file=sys.stderr)


COMMANDS = {"estimate": cmd_estimate, "predict": cmd_predict, "synthesize": cmd_synthesize, "run": cmd_run}


def _seed(text: str) -> int:
    v = int(text)
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="intervalmpc", description=__doc__.splitlines()[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("--config", required=True, help="TOML experiment file")
    ap.add_argument("--out", default=None, help="output directory (default: output.directory)")
    ap.add_argument("--seed", type=_seed, default=None, help="override the configured seed")
    ap.add_argument("--plot", action="store_true", help="write SVG figures")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.seed)
        out = Path(args.out if args.out is not None else cfg.output.directory)
        out.mkdir(parents=True, exist_ok=True)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return COMMANDS[args.command](cfg, out, args.plot or cfg.output.plot)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SynthesisFailure as exc:
        print(f"synthesis failed: {exc}", file=sys.stderr)
        return EXIT_SYNTHESIS
    except PEFailure as exc:
        print(f"persistence of excitation failed: {exc}", file=sys.stderr)
        return EXIT_PE
    except ControllerFault as exc:
        print(f"controller fault: {exc}", file=sys.stderr)
        return EXIT_FAULT
    except DivergenceError as exc:
        print(f"simulation diverged: {exc}", file=sys.stderr)
        return EXIT_FAULT
    except IntervalMPCError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
