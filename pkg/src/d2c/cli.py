"""
Command-line runner for the D2C pipeline.

    d2c optimize   --config cfg.yaml --out runs/x     # open-loop nominal plan
    d2c identify   --config cfg.yaml --out runs/x     # LTV model around the nominal
    d2c synthesize --config cfg.yaml --out runs/x     # Riccati gains
    d2c pipeline   --config cfg.yaml --out runs/x     # all of the above + policy + evaluation
    d2c run        --policy runs/x/policy.json --epsilon 0.1 --seed 3 --out traj.csv
    d2c evaluate | scaling-study | robustness-curve --config cfg.yaml --out runs/x

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure.
Wall-clock timings go to log files (``history.csv``, ``timings.json``); all
other artifacts are pure functions of the config and seed.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import eval as ev
from .config import ConfigError, PipelineConfig
from .dynamics import NoiseSpec, SystemSpec, Trajectory, make_system
from .lqr import GainSchedule, SynthesisError, solve_riccati
from .openloop import OptimizationDiverged, RolloutError, nominal_trajectory, optimize, rollout_objective
from .policy import D2cPolicy, ExecutionTruncated, execute, execute_open_loop
from .sysid import LtvModel, SingularDesignError, collect_perturbation_data, estimate_ltv, model_fit_report
from .task import CostSpec

NUMERICAL_ERRORS = (OptimizationDiverged, RolloutError, SynthesisError, SingularDesignError,
                    ExecutionTruncated, np.linalg.LinAlgError, FloatingPointError)


class UsageError(Exception):
    pass


class StageError(Exception):
    def __init__(self, stage, exc):
        super().__init__(f"stage '{stage}' failed: {exc}")
        self.stage = stage
        self.exc = exc


# ---------------------------------------------------------------------------
# artifact helpers
# ---------------------------------------------------------------------------


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_json(path: Path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _read_json(path: Path):
    if not path.exists():
        raise UsageError(f"missing artifact {path}")
    with open(path) as fh:
        return json.load(fh)


class RunDir:
    """Output directory with a manifest of artifact hashes."""

    def __init__(self, path, cfg: PipelineConfig, force: bool = False):
        self.path = Path(path)
        self.cfg = cfg
        self.path.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.path / "manifest.json"
        self.manifest = {"config_hash": cfg.hash, "seed": cfg.seed, "artifacts": {}, "logs": []}
        if self.manifest_path.exists():
            old = json.loads(self.manifest_path.read_text())
            if old.get("config_hash") != cfg.hash and not force:
                raise UsageError(f"{self.path} holds artifacts from config {old.get('config_hash', '?')[:12]}, "
                                 f"current config is {cfg.hash[:12]}; use --force or a fresh --out")
            if old.get("config_hash") == cfg.hash:
                self.manifest = old
        cfg.dump(self.path / "config.resolved.yaml")

    @property
    def meta(self) -> dict:
        return {"config_hash": self.cfg.hash, "seed": self.cfg.seed}

    def artifact(self, name: str) -> Path:
        return self.path / name

    def record(self, name: str, log: bool = False) -> None:
        if log:
            if name not in self.manifest["logs"]:
                self.manifest["logs"].append(name)
                self.manifest["logs"].sort()
        else:
            self.manifest["artifacts"][name] = _sha(self.path / name)
        self.manifest["artifacts"]["config.resolved.yaml"] = _sha(self.path / "config.resolved.yaml")
        _write_json(self.manifest_path, self.manifest)

    def load_checked(self, name: str, force: bool = False) -> dict:
        d = _read_json(self.path / name)
        h = d.get("meta", {}).get("config_hash")
        if h != self.cfg.hash and not force:
            raise UsageError(f"{name} was produced by config {str(h)[:12]}, not {self.cfg.hash[:12]}; use --force")
        return d


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------


def stage_optimize(cfg: PipelineConfig, run: RunDir) -> dict:
    system, cost = cfg.system(), cfg.cost()
    oc = cfg.openloop()
    t0 = time.perf_counter()
    result = optimize(rollout_objective(system, cost, oc.threads), cfg.initial_controls(), oc,
                      cfg.stage_rng("optimize"))
    seconds = time.perf_counter() - t0
    nominal = nominal_trajectory(system, cost, result.controls)
    _write_json(run.artifact("openloop.json"), {
        "kind": "openloop",
        "meta": run.meta,
        "controls": result.controls.tolist(),
        "nominal_states": nominal.states.tolist(),
        "nominal_cost": nominal.total_cost,
        "iterations": result.iterations,
        "converged": result.converged,
        "final_mean_cost": result.final_cost,
    })
    nominal.to_csv(run.artifact("nominal.csv"))
    result.history_to_csv(run.artifact("history.csv"))
    run.record("openloop.json")
    run.record("nominal.csv")
    run.record("history.csv", log=True)
    err = cost.deviation(nominal.states[-1])
    return {"final_cost": nominal.total_cost, "iterations": result.iterations, "converged": result.converged,
            "seconds": seconds, "terminal_error": err.tolist()}


def _nominal_from(run: RunDir, system, cost, force=False) -> Trajectory:
    d = run.load_checked("openloop.json", force)
    return nominal_trajectory(system, cost, np.asarray(d["controls"], dtype=float))


def stage_identify(cfg: PipelineConfig, run: RunDir, force=False) -> dict:
    system, cost = cfg.system(), cfg.cost()
    sc = cfg.sysid()
    nominal = _nominal_from(run, system, cost, force)
    t0 = time.perf_counter()
    data = collect_perturbation_data(system, nominal, sc, cfg.stage_rng("identify"))
    model = estimate_ltv(data, sc)
    seconds = time.perf_counter() - t0
    model.save(run.artifact("model.json"), {**run.meta, "estimator": sc.estimator, "mode": sc.mode,
                                            "sigma": sc.sigma, "rollouts": sc.N})
    report = model_fit_report(model, data)
    _write_json(run.artifact("fit_report.json"), {"meta": run.meta, **report})
    run.record("model.json")
    run.record("fit_report.json")
    return {"seconds": seconds, "max_rmse": report["max_rmse"]}


def stage_synthesize(cfg: PipelineConfig, run: RunDir, force=False) -> dict:
    model_doc = run.load_checked("model.json", force)
    model = LtvModel.from_dict(model_doc)
    t0 = time.perf_counter()
    gains = solve_riccati(model, cfg.lqr_weights())
    seconds = time.perf_counter() - t0
    gains.save(run.artifact("gains.json"), {**run.meta, "model_sha256": run.manifest["artifacts"].get("model.json")})
    run.record("gains.json")
    return {"seconds": seconds}


def assemble_policy(cfg: PipelineConfig, run: RunDir, force=False) -> D2cPolicy:
    system = cfg.system()
    ol = run.load_checked("openloop.json", force)
    gains = GainSchedule.from_dict(run.load_checked("gains.json", force))
    arts = run.manifest["artifacts"]
    policy = D2cPolicy(
        ol["controls"], ol["nominal_states"], gains, system.periodic,
        metadata={**run.meta, "system": cfg.system_spec().to_dict(), "cost": cfg.cost().to_dict(),
                  "openloop_sha256": arts.get("openloop.json"), "model_sha256": arts.get("model.json"),
                  "gains_sha256": arts.get("gains.json")},
    )
    policy.verify(system)
    policy.save(run.artifact("policy.json"))
    run.record("policy.json")
    return policy


def _policy_for(cfg: PipelineConfig, run: RunDir, policy_path=None) -> D2cPolicy:
    path = Path(policy_path) if policy_path else run.artifact("policy.json")
    if not path.exists():
        raise UsageError(f"missing policy {path}; run 'pipeline' first")
    return D2cPolicy.load(path, cfg.system())


def stage_evaluate(cfg: PipelineConfig, run: RunDir, policy: D2cPolicy, epsilon=None, M=None, mode=None,
                   name="eval.json") -> ev.EvalReport:
    e = cfg.eval
    epsilon = float(e["epsilon"] if epsilon is None else epsilon)
    M = int(e["rollouts"] if M is None else M)
    mode = mode or e["mode"]
    W = ev.noise_covariance(policy, e["noise_scale"], e.get("noise_covariance"))
    report = ev.monte_carlo_eval(cfg.system(), cfg.cost(), policy, epsilon, M, cfg.stage_rng("evaluate"), mode,
                                 W, cfg.threads, divergence_angle=float(e["divergence_angle"]))
    _write_json(run.artifact(name), {"meta": run.meta, **report.to_dict()})
    run.record(name)
    return report


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _load(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config)
    if getattr(args, "threads", None):
        cfg.raw["threads"] = int(args.threads)
    for flag, key, conv in (("sysid_sigma", "sigma", float), ("sysid_rollouts", "rollouts", int),
                            ("sysid_estimator", "estimator", str), ("sysid_mode", "mode", str)):
        val = getattr(args, flag, None)
        if val is not None:
            cfg.raw["sysid"][key] = conv(val)
    if getattr(args, "seed", None) is not None and args.command not in ("run",):
        cfg.raw["seed"] = int(args.seed)
    cfg.validate()
    return cfg


def _out(args, cfg) -> Path:
    out = args.out or cfg.raw.get("output_dir")
    if not out:
        raise UsageError("no output directory: pass --out or set output_dir in the config")
    return Path(out)


def cmd_optimize(args) -> int:
    cfg = _load(args)
    run = RunDir(_out(args, cfg), cfg, args.force)
    s = stage_optimize(cfg, run)
    err = ", ".join(f"{v:+.4f}" for v in s["terminal_error"])
    print(f"optimize: final cost {s['final_cost']:.6g}, {s['iterations']} iterations "
          f"({'converged' if s['converged'] else 'max_iters'}), {s['seconds']:.2f} s; terminal error [{err}]")
    return 0


def cmd_identify(args) -> int:
    cfg = _load(args)
    run = RunDir(_out(args, cfg), cfg, args.force)
    s = stage_identify(cfg, run, args.force)
    print(f"identify: model.json written, max one-step RMSE {s['max_rmse']:.3g}, {s['seconds']:.2f} s")
    return 0


def cmd_synthesize(args) -> int:
    if args.model and args.out and str(args.out).endswith(".json"):
        # standalone form: synthesize --model m.json --weights cfg.yaml --out gains.json
        cfg = PipelineConfig.load(args.config)
        model = LtvModel.load(args.model)
        gains = solve_riccati(model, cfg.lqr_weights())
        gains.save(args.out, {"config_hash": cfg.hash, "seed": cfg.seed, "model_sha256": _sha(Path(args.model))})
        print(f"synthesize: {args.out} written")
        return 0
    cfg = _load(args)
    run = RunDir(_out(args, cfg), cfg, args.force)
    if args.model:
        model = LtvModel.load(args.model)
        model.save(run.artifact("model.json"), run.meta)
        run.record("model.json")
    s = stage_synthesize(cfg, run, args.force)
    print(f"synthesize: gains.json written, {s['seconds']:.4f} s")
    return 0


def cmd_pipeline(args) -> int:
    cfg = _load(args)
    out = _out(args, cfg)
    if (out / "manifest.json").exists() and not args.force:
        old = json.loads((out / "manifest.json").read_text())
        if old.get("config_hash") != cfg.hash:
            raise UsageError(f"{out} holds artifacts from another config; use --force or a fresh --out")
    run = RunDir(out, cfg, args.force)
    timings = {}
    stage = "optimize"
    try:
        s = stage_optimize(cfg, run)
        timings["open_loop_seconds"] = s["seconds"]
        stage = "identify"
        s_id = stage_identify(cfg, run)
        stage = "synthesize"
        s_syn = stage_synthesize(cfg, run)
        timings["closed_loop_seconds"] = s_id["seconds"] + s_syn["seconds"]
        stage = "assemble"
        policy = assemble_policy(cfg, run)
        stage = "evaluate"
        t0 = time.perf_counter()
        report = stage_evaluate(cfg, run, policy)
        timings["evaluate_seconds"] = time.perf_counter() - t0
    except NUMERICAL_ERRORS as exc:
        raise StageError(stage, exc) from exc
    finally:
        _write_json(run.artifact("timings.json"), timings)
        run.record("timings.json", log=True)
    ratio = timings["closed_loop_seconds"] / max(timings["open_loop_seconds"], 1e-12)
    print(f"pipeline: nominal cost {s['final_cost']:.6g}; open-loop {timings['open_loop_seconds']:.2f} s, "
          f"closed-loop {timings['closed_loop_seconds']:.3f} s (ratio {ratio:.3f}); "
          f"eval eps={report.epsilon:g}: mean {report.mean_cost:.6g}, var {report.cost_variance:.3g}, "
          f"terminal MSE {report.terminal_mse:.3g}")
    return 0


def cmd_run(args) -> int:
    with open(args.policy) as fh:
        doc = json.load(fh)
    meta = doc.get("metadata", {})
    if "system" not in meta or "cost" not in meta:
        raise UsageError(f"{args.policy} does not embed its system/cost configuration")
    system = make_system(SystemSpec.from_dict(meta["system"]))
    cost = CostSpec.from_dict(meta["cost"])
    policy = D2cPolicy.load(args.policy, system)
    rng = np.random.default_rng(args.seed)
    runner = execute_open_loop if args.open_loop else execute
    traj = runner(system, cost, policy, NoiseSpec(args.epsilon), rng)
    traj.to_csv(args.out)
    print(f"run: total cost {traj.total_cost:.6g}, terminal deviation norm "
          f"{np.linalg.norm(traj.deviations[-1]):.4g} -> {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load(args)
    run = RunDir(_out(args, cfg), cfg, args.force)
    policy = _policy_for(cfg, run, args.policy)
    eps = args.epsilon if args.epsilon is not None else None
    name = "eval.json" if eps is None else f"eval_{args.mode or cfg.eval['mode']}_eps{eps:g}.json"
    r = stage_evaluate(cfg, run, policy, eps, args.rollouts, args.mode, name)
    print(f"evaluate: eps={r.epsilon:g} M={r.num_rollouts} mode={r.mode}: mean {r.mean_cost:.6g} "
          f"+/- {r.mean_cost_se:.3g}, var {r.cost_variance:.4g}, terminal MSE {r.terminal_mse:.4g}, "
          f"divergence {r.divergence_fraction:.3f}")
    return 0


def cmd_scaling(args) -> int:
    cfg = _load(args)
    run = RunDir(_out(args, cfg), cfg, args.force)
    policy = _policy_for(cfg, run, args.policy)
    grid = args.epsilon_grid or cfg.eval["epsilon_grid"]
    M = args.rollouts or int(cfg.eval.get("scaling_rollouts", 5000))
    system, cost = cfg.system(), cfg.cost()
    W = ev.noise_covariance(policy, cfg.eval["noise_scale"], cfg.eval.get("noise_covariance"))
    rng = cfg.stage_rng("scaling-study")
    rep = ev.epsilon_scaling_study(system, cost, policy, grid, M, rng, noise_cov=W, threads=cfg.threads)
    if args.linearity:
        from .dynamics import analytic_ltv

        nominal = Trajectory(policy.nominal_states, policy.nominal_controls,
                             np.zeros_like(policy.nominal_controls), np.zeros(policy.horizon))
        model = analytic_ltv(system, nominal)
        rep.linearity = ev.perturbation_linearity_check(system, policy, model, grid, M, rng, W, cfg.threads)
    _write_json(run.artifact("scaling.json"), {"meta": run.meta, **rep.to_dict()})
    rows = [{"epsilon": e, "mean_gap": g, "mean_gap_se": s, "var": v}
            for e, g, s, v in zip(rep.epsilons, rep.mean_gap, rep.mean_gap_se, rep.cost_variance)]
    ev.write_rows_csv(rows, run.artifact("scaling.csv"))
    run.record("scaling.json")
    run.record("scaling.csv")
    ms = "inconclusive" if rep.mean_slope is None else f"{rep.mean_slope.slope:.3f} (R2 {rep.mean_slope.r2:.4f})"
    vs = "n/a" if rep.variance_slope is None else f"{rep.variance_slope.slope:.3f} (R2 {rep.variance_slope.r2:.4f})"
    print(f"scaling-study: mean-gap slope {ms}; variance slope {vs}")
    if rep.linearity and rep.linearity.get("slope"):
        print(f"  linearity residual slope {rep.linearity['slope']['slope']:.3f}")
    return 0


def cmd_robustness(args) -> int:
    cfg = _load(args)
    run = RunDir(_out(args, cfg), cfg, args.force)
    policy = _policy_for(cfg, run, args.policy)
    e = cfg.eval
    grid = args.epsilon_grid or e["robustness_grid"]
    M = args.rollouts or int(e["rollouts"])
    W = ev.noise_covariance(policy, e["robustness_noise_scale"], e.get("noise_covariance"))
    rows = ev.robustness_curve(cfg.system(), cfg.cost(), policy, grid, M, cfg.stage_rng("robustness-curve"), W,
                               cfg.threads, float(e["divergence_angle"]))
    ev.write_rows_csv(rows, run.artifact("robustness.csv"),
                      ["mode", "epsilon", "mean", "var", "terminal_mse", "divergence_frac"])
    shape = ev.curve_shape(rows)
    _write_json(run.artifact("robustness.json"), {"meta": run.meta, "rows": rows, **shape})
    run.record("robustness.csv")
    run.record("robustness.json")
    print(f"robustness-curve: first closed-loop divergence at eps={shape['first_divergence_epsilon']}, "
          f"closed <= open below it: {shape['closed_le_open_below_threshold']}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _grid(text: str) -> list[float]:
    try:
        return [float(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad epsilon grid {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="d2c", description="Decoupled data-based control pipeline")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config_required=True):
        sp.add_argument("--config", required=config_required, help="YAML pipeline config")
        sp.add_argument("--out", help="output directory (overrides output_dir)")
        sp.add_argument("--threads", type=int, default=None)
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")
        sp.add_argument("--force", action="store_true", help="allow mixing artifacts from another config")

    def sysid_flags(sp):
        sp.add_argument("--sysid-sigma", type=float)
        sp.add_argument("--sysid-rollouts", type=int)
        sp.add_argument("--sysid-estimator", choices=["exact", "scaled"])
        sp.add_argument("--sysid-mode", choices=["state-reset", "trajectory"])

    sp = sub.add_parser("optimize", help="open-loop trajectory optimisation")
    common(sp)
    sp.set_defaults(func=cmd_optimize)

    sp = sub.add_parser("identify", help="LTV identification around the nominal")
    common(sp)
    sysid_flags(sp)
    sp.set_defaults(func=cmd_identify)

    sp = sub.add_parser("synthesize", help="Riccati feedback gains")
    common(sp, config_required=False)
    sp.add_argument("--weights", dest="config_alias", help="config providing cost/lqr weights")
    sp.add_argument("--model", help="LTV model file (default: <out>/model.json)")
    sp.set_defaults(func=cmd_synthesize)

    sp = sub.add_parser("pipeline", help="optimize + identify + synthesize + evaluate")
    common(sp)
    sysid_flags(sp)
    sp.set_defaults(func=cmd_pipeline)

    sp = sub.add_parser("run", help="execute a policy once and write the trajectory CSV")
    sp.add_argument("--policy", required=True)
    sp.add_argument("--epsilon", type=float, default=0.0)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--open-loop", action="store_true")
    sp.set_defaults(func=cmd_run, command="run")

    for name, func, helptext in (("evaluate", cmd_evaluate, "Monte-Carlo evaluation"),
                                 ("scaling-study", cmd_scaling, "eps-scaling of mean gap and variance"),
                                 ("robustness-curve", cmd_robustness, "terminal MSE vs eps")):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        sp.add_argument("--policy", help="policy file (default: <out>/policy.json)")
        sp.add_argument("--rollouts", type=int)
        sp.add_argument("--epsilon-grid", type=_grid)
        if name == "evaluate":
            sp.add_argument("--epsilon", type=float)
            sp.add_argument("--mode", choices=["closed", "open"])
        if name == "scaling-study":
            sp.add_argument("--linearity", action="store_true", help="also run the linearisation residual check")
        sp.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config_alias", None) and not args.config:
        args.config = args.config_alias
    if args.command == "synthesize" and not args.config:
        parser.error("synthesize needs --config or --weights")
    try:
        return args.func(args)
    except (ConfigError, UsageError, KeyError) as exc:
        print(f"d2c {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except StageError as exc:
        print(f"d2c {args.command}: {exc}", file=sys.stderr)
        return 2
    except NUMERICAL_ERRORS as exc:
        print(f"d2c {args.command}: numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
