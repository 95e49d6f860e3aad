"""Command-line front end: ``solve``, ``train``, ``eval`` and ``report``.

Every run is driven by a flat INI-style configuration (all defaults are
embedded; ``--print-config`` shows them) and leaves a JSON manifest with the
resolved configuration, its hash, the code version and the outcome.

Exit codes: 0 success, 1 non-convergence, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__
from .engine import (BaselineProbePolicy, CsvTrace, Engine, FixedPolicy,
                     ResidualBalancingPolicy, Tolerances, run_episode)
from .netdata import (CaseParseError, NetworkModel, ScenarioError, enumerate_gen_outages,
                      load_case, perturb_loads, sample_line_outages)

log = logging.getLogger("rladmm")

EXIT_OK, EXIT_NOT_CONVERGED, EXIT_USAGE = 0, 1, 2
WORKERS_ENV = "RLADMM_WORKERS"
POLICY_NAMES = ("fixed", "residual_balancing", "baseline500", "rl")
REPORT_FIELDS = ("scenario", "policy", "iterations", "converged", "objective")

DEFAULT_CONFIG = """\
[run]
case = case9
policy = fixed
seed = 0

[tolerances]
eps_primal = 1e-4
eps_dual = 1e-4
max_iter = 3000
divergence_norm = 1e8

[engine]
history_len = 20
limit_weight = 1000.0
branch_tol = 1e-8
branch_max_iter = 200

[residual_balancing]
tau = 2.0
mu = 10.0

[mdp]
gamma = 0.99
n = 20
conv_bonus = 200.0
baseline_rho = 500.0
state_transform = signed_log
advantage_sign = -1.0

[train]
episodes = 1000
lr = 1e-4
momentum = 0.9
grad_clip = 10.0
batch_size = 64
replay_capacity = 100000
warmup = 1000
target_sync = 500
eps_start = 1.0
eps_min = 0.02
eps_decay_episodes = 300
alpha_per = 0.6
beta_start = 0.4
beta_end = 1.0
eps_per = 1e-3
hidden = 256

[eval]
baseline = residual_balancing
"""


class UsageError(Exception):
    """Bad arguments, configuration or input files (exit status 2)."""


# ---------------------------------------------------------------------------
# configuration


def _coerce(text: str):
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def load_config(path: str | None = None, overrides: dict | None = None) -> dict:
    """Defaults, then a config file (INI or a previous manifest), then overrides."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.read_string(DEFAULT_CONFIG)
    cfg = {s: {k: _coerce(v) for k, v in cp[s].items()} for s in cp.sections()}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file not found: {path}")
        text = p.read_text()
        if text.lstrip().startswith("{"):
            user = json.loads(text).get("config", {})
        else:
            ucp = configparser.ConfigParser(interpolation=None)
            try:
                ucp.read_string(text)
            except configparser.Error as exc:
                raise UsageError(f"bad config file {path}: {exc}") from exc
            user = {s: {k: _coerce(v) for k, v in ucp[s].items()} for s in ucp.sections()}
        _merge(cfg, user, str(path))
    if overrides:
        _merge(cfg, overrides, "command line")
    return cfg


def _merge(cfg: dict, new: dict, origin: str) -> None:
    for sect, vals in new.items():
        if sect not in cfg:
            raise UsageError(f"unknown config section [{sect}] in {origin}")
        for k, v in vals.items():
            if v is None:
                continue
            if k not in cfg[sect]:
                raise UsageError(f"unknown key {k!r} in [{sect}] ({origin})")
            cfg[sect][k] = v


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def render_config(cfg: dict) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    for sect, vals in cfg.items():
        cp[sect] = {k: str(v) for k, v in vals.items()}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def tolerances_from(cfg: dict) -> Tolerances:
    t = cfg["tolerances"]
    try:
        return Tolerances(float(t["eps_primal"]), float(t["eps_dual"]), int(t["max_iter"]),
                          float(t["divergence_norm"]))
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    return max(1, n)


def make_engine(cfg: dict, net: NetworkModel, workers: int | None = None) -> Engine:
    e = cfg["engine"]
    return Engine(net, tolerances_from(cfg), workers=workers,
                  history_len=int(e["history_len"]), limit_weight=float(e["limit_weight"]),
                  branch_tol=float(e["branch_tol"]), branch_max_iter=int(e["branch_max_iter"]))


def read_case(spec: str) -> NetworkModel:
    try:
        return load_case(spec)
    except FileNotFoundError as exc:
        raise UsageError(f"case not found: {spec}") from exc
    except CaseParseError as exc:
        raise UsageError(f"cannot parse case {spec}: {exc}") from exc


def mdp_from(cfg: dict):
    from .rl.agent import MdpConfig
    try:
        return MdpConfig(**cfg["mdp"])
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad [mdp] settings: {exc}") from exc


def train_config_from(cfg: dict, seed: int):
    from .rl.agent import TrainConfig
    try:
        return TrainConfig(**cfg["train"], seed=seed)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad [train] settings: {exc}") from exc


def make_policy(spec: str, cfg: dict):
    """Build a policy from ``fixed``, ``residual_balancing``, ``baseline500`` or
    ``rl:DIR`` / ``rl:PQ.json,VT.json``."""
    name, _, arg = spec.partition(":")
    if name == "fixed":
        return FixedPolicy()
    if name == "baseline500":
        return BaselineProbePolicy()
    if name == "residual_balancing":
        rb = cfg["residual_balancing"]
        try:
            return ResidualBalancingPolicy(float(rb["tau"]), float(rb["mu"]))
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    if name == "rl":
        from .rl.agent import checkpoint_paths, deploy_policy
        from .rl.qnet import CheckpointError
        if not arg:
            raise UsageError("rl policy needs checkpoints: rl:DIR or rl:PQ.json,VT.json")
        parts = arg.split(",")
        if len(parts) == 1:
            paths = checkpoint_paths(parts[0])
        elif len(parts) == 2:
            paths = tuple(Path(p) for p in parts)
        else:
            raise UsageError(f"malformed rl policy spec {spec!r}")
        for p in paths:
            if not Path(p).is_file():
                raise UsageError(f"checkpoint not found: {p}")
        try:
            return deploy_policy(*paths)
        except (CheckpointError, KeyError, json.JSONDecodeError) as exc:
            raise UsageError(f"bad checkpoint: {exc}") from exc
    raise UsageError(f"unknown policy {spec!r}; choose from {', '.join(POLICY_NAMES)}")


def write_manifest(path: Path, cfg: dict, **outcome) -> dict:
    t = cfg["tolerances"]
    doc = {
        "code_version": __version__,
        "config_hash": config_hash(cfg),
        "seed": cfg["run"]["seed"],
        "tolerances": {k: t[k] for k in ("eps_primal", "eps_dual", "max_iter", "divergence_norm")},
        **outcome,
        "config": cfg,
    }
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, default=_json_default))
    return doc


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(f"not serializable: {type(o)}")


# ---------------------------------------------------------------------------
# solve


def cmd_solve(args, cfg: dict) -> int:
    net = read_case(cfg["run"]["case"])
    policy = make_policy(cfg["run"]["policy"], cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    trace_path = Path(args.trace) if args.trace else out / "trace.csv"
    trace = CsvTrace(trace_path)
    try:
        with make_engine(cfg, net, worker_count()) as eng:
            res = run_episode(eng, policy, trace=trace)
    finally:
        trace.close()
    write_manifest(out / "manifest.json", cfg, command="solve", iterations=res.iterations,
                   converged=bool(res.converged), diverged=bool(res.diverged),
                   objective=res.objective, error=res.error, trace=str(trace_path))
    status = "converged" if res.converged else "did not converge"
    print(f"{net.name}: {status} after {res.iterations} iterations, objective {res.objective:.6f}")
    return EXIT_OK if res.converged else EXIT_NOT_CONVERGED


# ---------------------------------------------------------------------------
# train


def _read_log(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def cmd_train(args, cfg: dict) -> int:
    from .rl.agent import TrainingAborted, checkpoint_paths, save_checkpoints, train, write_log
    from .rl.qnet import CheckpointError, QNetwork

    net = read_case(cfg["run"]["case"])
    seed = int(cfg["run"]["seed"])
    mdp = mdp_from(cfg)
    tc = train_config_from(cfg, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.csv"
    init, start = None, 0
    if args.resume:
        paths = checkpoint_paths(out)
        if not all(p.is_file() for p in paths) or not log_path.is_file():
            raise UsageError(f"nothing to resume in {out}")
        dims = mdp.layer_dims(hidden=tc.hidden)
        try:
            init = tuple(QNetwork.load(p, expect_dims=dims)[0] for p in paths)
        except CheckpointError as exc:
            raise UsageError(f"cannot resume: {exc}") from exc
        rows = _read_log(log_path)
        start = int(rows[-1]["episode"]) + 1 if rows else 0
    else:
        write_log(log_path, [])

    def sink(row):
        write_log(log_path, [row], append=True)

    with make_engine(cfg, net, worker_count()) as eng:
        try:
            res = train(eng, mdp, tc, init=init, start_episode=start, log_sink=sink,
                        checkpoint_dir=out)
        except TrainingAborted as exc:
            print(f"training aborted: {exc}", file=sys.stderr)
            return EXIT_NOT_CONVERGED
    save_checkpoints(out, res.q_pq, res.q_vtheta, mdp, seed)
    last = res.log[-1] if res.log else None
    write_manifest(out / "manifest.json", cfg, command="train", first_episode=start,
                   episodes=len(res.log),
                   iterations=last["iterations"] if last else None,
                   converged=last["converged"] if last else None)
    print(f"trained episodes {start}..{start + len(res.log) - 1}; checkpoints in {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


@dataclass
class EvalReport:
    rows: list[dict] = field(default_factory=list)
    baseline: str = "residual_balancing"
    excluded: list[str] = field(default_factory=list)

    def policies(self) -> list[str]:
        seen: list[str] = []
        for r in self.rows:
            if r["policy"] not in seen:
                seen.append(r["policy"])
        return seen

    def aggregate(self, policy: str) -> dict:
        """Mean/std of iterations over converged rows of ``policy``."""
        its = [float(r["iterations"]) for r in self.rows
               if r["policy"] == policy and _truthy(r["converged"])]
        total = sum(1 for r in self.rows if r["policy"] == policy)
        if not its:
            return {"policy": policy, "mean": math.nan, "std": math.nan,
                    "converged": 0, "instances": total}
        arr = np.array(its)
        return {"policy": policy, "mean": float(arr.mean()), "std": float(arr.std()),
                "converged": len(its), "instances": total}

    def reduction(self, policy: str, baseline: str | None = None) -> float:
        """Percent reduction in mean iterations relative to ``baseline``.

        Computed over scenarios on which both policies converged.
        """
        baseline = baseline or self.baseline
        ok = {}
        for r in self.rows:
            if _truthy(r["converged"]):
                ok.setdefault(r["policy"], {})[r["scenario"]] = float(r["iterations"])
        common = sorted(set(ok.get(policy, {})) & set(ok.get(baseline, {})))
        if not common:
            return math.nan
        mean_b = float(np.mean([ok[baseline][s] for s in common]))
        mean_p = float(np.mean([ok[policy][s] for s in common]))
        return reduction_percent(mean_b, mean_p)

    def to_json(self) -> dict:
        pols = self.policies()
        return {
            "baseline": self.baseline,
            "excluded": self.excluded,
            "rows": self.rows,
            "aggregates": [self.aggregate(p) for p in pols],
            "reductions": {p: self.reduction(p) for p in pols if p != self.baseline},
        }

    @classmethod
    def from_json(cls, d: dict) -> "EvalReport":
        if not isinstance(d, dict) or "rows" not in d:
            raise UsageError("not an evaluation report (missing 'rows')")
        for r in d["rows"]:
            if set(REPORT_FIELDS) - set(r):
                raise UsageError(f"report row missing fields: {sorted(set(REPORT_FIELDS) - set(r))}")
        return cls(rows=list(d["rows"]), baseline=d.get("baseline", "residual_balancing"),
                   excluded=list(d.get("excluded", [])))

    def write(self, directory: Path) -> None:
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "report.json").write_text(
            json.dumps(self.to_json(), indent=2, default=_json_default))
        with open(directory / "report.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: r[k] for k in REPORT_FIELDS})


def _truthy(v) -> bool:
    return v is True or str(v).lower() in ("true", "1")


def reduction_percent(mean_base: float, mean_new: float) -> float:
    return (mean_base - mean_new) / mean_base * 100.0


def build_scenarios(net: NetworkModel, kind: str, instances: int, seed: int):
    if kind == "loads":
        return [perturb_loads(net, seed + i) for i in range(instances)]
    if kind == "gen-outage":
        return enumerate_gen_outages(net)
    if kind == "line-outage":
        return sample_line_outages(net, instances, seed)
    raise UsageError(f"unknown scenario kind {kind!r}")


def _run_instance(job):
    """Solve one (scenario, policy) pair; runs in a worker process."""
    cfg, scenario_json, policy_spec = job
    from .netdata import Scenario
    base = read_case(cfg["run"]["case"])
    sc = Scenario.from_json(scenario_json, base)
    with make_engine(cfg, sc.apply(), workers=1) as eng:
        res = run_episode(eng, make_policy(policy_spec, cfg))
    return {"scenario": sc.label, "policy": policy_spec.partition(":")[0],
            "iterations": res.iterations, "converged": bool(res.converged),
            "objective": res.objective}


def evaluate(cfg: dict, scenarios, policies: list[str], baseline: str,
             workers: int = 1) -> EvalReport:
    jobs = [(cfg, sc.to_json(), p) for sc in scenarios for p in policies]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as pool:
            rows = list(pool.map(_run_instance, jobs))
    else:
        rows = [_run_instance(j) for j in jobs]
    base_name = baseline.partition(":")[0]
    failed = {r["scenario"] for r in rows if r["policy"] == base_name and not r["converged"]}
    kept = [r for r in rows if r["scenario"] not in failed]
    return EvalReport(rows=kept, baseline=base_name, excluded=sorted(failed))


def cmd_eval(args, cfg: dict) -> int:
    net = read_case(cfg["run"]["case"])
    policies = [p.strip() for p in args.policies.split(",") if p.strip()]
    if not policies:
        raise UsageError("--policies is empty")
    for p in policies:
        make_policy(p, cfg)  # fail fast on bad specs
    baseline = cfg["eval"]["baseline"]
    if baseline not in [p.partition(":")[0] for p in policies]:
        policies.append(baseline)
    try:
        scenarios = build_scenarios(net, args.scenario, args.instances, int(cfg["run"]["seed"]))
    except ScenarioError as exc:
        raise UsageError(str(exc)) from exc
    report = evaluate(cfg, scenarios, policies, baseline, worker_count())
    out = Path(args.out)
    report.write(out)
    write_manifest(out / "manifest.json", cfg, command="eval", scenario=args.scenario,
                   instances=len(scenarios), policies=policies,
                   excluded=report.excluded)
    print(format_text([report]))
    return EXIT_OK


# ---------------------------------------------------------------------------
# report


def load_report(path: str) -> EvalReport:
    p = Path(path)
    if p.is_dir():
        p = p / "report.json"
    try:
        return EvalReport.from_json(json.loads(p.read_text()))
    except FileNotFoundError:
        raise UsageError(f"report not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path} is not JSON: {exc}") from exc


def summary_rows(reports: list[EvalReport]) -> list[dict]:
    out = []
    for i, rep in enumerate(reports):
        for p in rep.policies():
            agg = rep.aggregate(p)
            red = rep.reduction(p) if p != rep.baseline else math.nan
            out.append({"report": i, "policy": p, "mean": agg["mean"], "std": agg["std"],
                        "converged": agg["converged"], "instances": agg["instances"],
                        "reduction_vs": rep.baseline, "reduction": red})
    return out


def _cell(v, fmt="{:.1f}") -> str:
    if isinstance(v, float) and math.isnan(v):
        return "-"
    return fmt.format(v) if isinstance(v, float) else str(v)


def format_text(reports: list[EvalReport]) -> str:
    header = ("report", "policy", "mean", "std", "converged", "reduction")
    lines = []
    for r in summary_rows(reports):
        if r["converged"] == 0:
            mean, std = "no converged instances", ""
        else:
            mean, std = _cell(r["mean"]), _cell(r["std"])
        red = _cell(r["reduction"], "{:.1f}%")
        if red != "-":
            red = f"{red} vs {r['reduction_vs']}"
        lines.append((str(r["report"]), r["policy"], mean, std,
                      f"{r['converged']}/{r['instances']}", red))
    if not lines:
        lines.append(("-", "-", "no converged instances", "", "0/0", "-"))
    widths = [max(len(h), *(len(l[i]) for l in lines)) for i, h in enumerate(header)]
    fmt = "  ".join("{:<%d}" % w for w in widths)
    return "\n".join([fmt.format(*header), fmt.format(*("-" * w for w in widths))]
                     + [fmt.format(*l) for l in lines])


def format_csv(reports: list[EvalReport]) -> str:
    buf = io.StringIO()
    keys = ("report", "policy", "mean", "std", "converged", "instances", "reduction_vs",
            "reduction")
    w = csv.DictWriter(buf, fieldnames=keys, lineterminator="\n")
    w.writeheader()
    for r in summary_rows(reports):
        w.writerow(r)
    return buf.getvalue()


def cmd_report(args, cfg: dict) -> int:
    reports = [load_report(p) for p in args.inputs]
    print(format_csv(reports) if args.format == "csv" else format_text(reports), end="\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rladmm", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="INI config file or a previous run manifest")
    p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("solve", help="run one ADMM solve")
    s.add_argument("--case", help="bundled case name or path to a MATPOWER file")
    s.add_argument("--policy", help="fixed, baseline500, residual_balancing or rl:CHECKPOINT_DIR")
    s.add_argument("--tol-primal", type=float)
    s.add_argument("--tol-dual", type=float)
    s.add_argument("--max-iter", type=int)
    s.add_argument("--trace", help="per-iteration CSV (default OUT/trace.csv)")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", default=".", help="directory for the trace and manifest")

    t = sub.add_parser("train", help="train the Q-networks")
    t.add_argument("--case", help="bundled case name or path to a MATPOWER file")
    t.add_argument("--episodes", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True, help="directory for checkpoints, log and manifest")
    t.add_argument("--resume", action="store_true", help="continue from checkpoints in OUT")

    e = sub.add_parser("eval", help="evaluate policies on generated scenarios")
    e.add_argument("--case", help="bundled case name or path to a MATPOWER file")
    e.add_argument("--scenario", required=True, choices=("loads", "gen-outage", "line-outage"))
    e.add_argument("--instances", type=int, default=50)
    e.add_argument("--seed", type=int)
    e.add_argument("--policies", required=True, help="comma-separated policy specs")
    e.add_argument("--baseline", help="policy used for the reduction column")
    e.add_argument("--out", required=True, help="directory for report.json and report.csv")

    r = sub.add_parser("report", help="tabulate evaluation reports")
    r.add_argument("inputs", nargs="+", help="report.json files or directories holding them")
    r.add_argument("--format", choices=("text", "csv"), default="text")
    return p


def overrides_from(args) -> dict:
    g = lambda name: getattr(args, name, None)  # noqa: E731
    return {
        "run": {"case": g("case"), "policy": g("policy"), "seed": g("seed")},
        "tolerances": {"eps_primal": g("tol_primal"), "eps_dual": g("tol_dual"),
                       "max_iter": g("max_iter")},
        "train": {"episodes": g("episodes")},
        "eval": {"baseline": g("baseline")},
    }


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = load_config(args.config, overrides_from(args))
        if args.print_config:
            print(render_config(cfg), end="")
            return EXIT_OK
        if args.command is None:
            raise UsageError("missing command (solve, train, eval or report)")
        handler = {"solve": cmd_solve, "train": cmd_train, "eval": cmd_eval,
                   "report": cmd_report}[args.command]
        return handler(args, cfg)
    except UsageError as exc:
        print(f"rladmm: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
