"""Run configuration, persistence and the work behind each CLI subcommand."""
from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import jsonschema
import numpy as np

from .backends import AgentBinding, make_binding
from .controllers import KINDS, ConfigError, ControllerSpec, gain_names
from .lqr import LqrProblem, lqr_gains, solve_care
from .metrics import Targets, TrajectoryMetrics, compute_metrics
from .orchestrator import (
    FinalReport,
    IterationRecord,
    LoopSettings,
    RunPlan,
    best_records,
    run_full,
    scenario_seed,
)
from .plants import PLANT_IDS, PlantError, PlantModel, make_plant
from .protocol import parse_log_line
from .scenarios import Scenario, ScenarioError, default_ladder
from .simulator import SimConfig, default_sim, run_episode

_RANGE = {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}
_SCENARIO = {
    "type": "object",
    "required": ["id", "initial_condition_range"],
    "properties": {
        "id": {"type": "string"},
        "initial_condition_range": _RANGE,
        "randomness_level": {"type": "number", "minimum": 0},
        "disturbance_level": {"type": "number", "minimum": 0},
        "param_uncertainty": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
    },
    "additionalProperties": False,
}
_METHOD = {
    "type": "object",
    "required": ["name"],
    "properties": {
        "name": {"type": "string"},
        "kind": {"enum": list(KINDS)},
        "gains": {"type": "object", "additionalProperties": {"type": "number"}},
        "lqr": {
            "type": "object",
            "required": ["q", "r"],
            "properties": {"q": {"type": "array", "items": {"type": "number"}}, "r": {"type": "number"}},
        },
    },
    "additionalProperties": False,
}

CONFIG_SCHEMA = {
    "type": "object",
    "required": ["plant"],
    "properties": {
        "plant": {"type": "string"},
        "plant_params": {"type": "object", "additionalProperties": {"type": "number"}},
        "variant": {"enum": ["acceleration", "torque"]},
        "controllers": {"type": "array", "items": {"enum": list(KINDS)}, "minItems": 1},
        "ranges": {"type": "object", "additionalProperties": {"type": "object", "additionalProperties": _RANGE}},
        "scenarios": {"oneOf": [{"type": "array", "items": _SCENARIO, "minItems": 1}, {"const": "agent"},
                                {"const": "default"}]},
        "n_levels": {"type": "integer", "minimum": 1},
        "selector": {"enum": ["manual", "agent"]},
        "targets": {
            "type": "object",
            "required": ["mse", "settling_time", "overshoot"],
            "properties": {k: {"type": "number", "exclusiveMinimum": 0} for k in ("mse", "settling_time", "overshoot")},
        },
        "max_iterations": {"type": "integer", "minimum": 1},
        "min_iterations": {"type": "integer", "minimum": 1},
        "reconsideration_cap": {"type": "integer", "minimum": 0},
        "failure_cap": {"type": "integer", "minimum": 1},
        "ranking": {"enum": ["mse", "composite"]},
        "weights": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 3, "maxItems": 3},
        "thresholds": {"type": "object", "additionalProperties": {"type": "number"}},
        "global_limit_factor": {"type": "number", "exclusiveMinimum": 1},
        "sim": {
            "type": "object",
            "properties": {"dt": {"type": "number", "exclusiveMinimum": 0}, "horizon": {"type": "number"}},
            "additionalProperties": False,
        },
        "agents": {"type": "object"},
        "seeds": {"type": "array", "items": {"type": "integer"}, "minItems": 1},
        "output_dir": {"type": "string"},
        "reference_log": {"type": "string"},
        "montecarlo": {
            "type": "object",
            "properties": {
                "runs": {"type": "integer", "minimum": 1},
                "methods": {"type": "array", "items": _METHOD, "minItems": 1},
            },
        },
        "lqr": {
            "type": "object",
            "properties": {
                "q": {"type": "array", "items": {"type": "number"}},
                "r": {"type": "number"},
                "A": {"type": "array"},
                "B": {"type": "array"},
            },
        },
    },
    "additionalProperties": False,
}

DEFAULT_TARGETS = {"mse": 0.9, "settling_time": 3.0, "overshoot": 10.0}


@dataclass
class RunConfig:
    raw: dict
    base_dir: Path
    plant: PlantModel
    targets: Targets
    sim: SimConfig
    seeds: List[int]
    ladder: Optional[Tuple[Scenario, ...]]

    @property
    def plant_id(self) -> str:
        return self.plant.id

    def settings(self, seed: int) -> LoopSettings:
        r = self.raw
        return LoopSettings(
            targets=self.targets,
            max_iterations=r.get("max_iterations", 30),
            min_iterations=r.get("min_iterations", 6),
            reconsideration_cap=r.get("reconsideration_cap", 10),
            failure_cap=r.get("failure_cap", 3),
            ranking=r.get("ranking", "mse"),
            weights=tuple(r.get("weights", (1.0, 1.0, 1.0))),
            thresholds=dict(r.get("thresholds", {})),
            global_limit_factor=r.get("global_limit_factor", 2.0),
            seed=seed,
        )

    def plan(self, seed: int) -> RunPlan:
        ranges = {k: {n: tuple(v) for n, v in rr.items()} for k, rr in self.raw.get("ranges", {}).items()}
        return RunPlan(
            plant=self.plant,
            settings=self.settings(seed),
            sim=self.sim,
            queue=tuple(self.raw.get("controllers", KINDS)),
            ladder=self.ladder,
            n_levels=self.raw.get("n_levels", 3),
            ranges=ranges,
            use_selector=self.raw.get("selector", "manual") == "agent",
        )

    def binding(self) -> AgentBinding:
        return make_binding(self.raw.get("agents"), self.base_dir)

    def resolve(self, path: str) -> Path:
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p


def parse_config(raw: dict, base_dir: Path = Path(".")) -> RunConfig:
    """Validate a config mapping; raises ConfigError with a readable message."""
    try:
        jsonschema.validate(raw, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config invalid at {where}: {exc.message}") from None
    if raw["plant"] not in PLANT_IDS:
        raise ConfigError(f"unknown plant {raw['plant']!r}; expected one of {', '.join(PLANT_IDS)}")
    try:
        plant = make_plant(raw["plant"], raw.get("plant_params"), raw.get("variant", "acceleration"))
        targets = Targets(**raw.get("targets", DEFAULT_TARGETS))
        sd = default_sim(plant.id)
        sim = SimConfig(dt=raw.get("sim", {}).get("dt", sd.dt), horizon=raw.get("sim", {}).get("horizon", sd.horizon))
        sc = raw.get("scenarios", "default")
        if sc == "agent":
            ladder = None
        elif sc == "default":
            ladder = tuple(default_ladder(plant.id))
        else:
            ladder = tuple(Scenario.from_dict(d) for d in sc)
        for kind in raw.get("controllers", ()):
            names = gain_names(kind, plant)
            given = raw.get("ranges", {}).get(kind)
            if given is not None and set(given) != set(names):
                raise ConfigError(f"{kind} ranges must name exactly {list(names)}")
    except (PlantError, ScenarioError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(raw, Path(base_dir), plant, targets, sim, list(raw.get("seeds", [0])), ladder)


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        raw = json.loads(p.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file {p} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {p} is not valid JSON: {exc}") from None
    return parse_config(raw, p.parent)


# ---------------------------------------------------------------- optimize


def default_run_dir(root: Path, plant_id: str) -> Path:
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S")
    return Path(root) / f"{stamp}-{plant_id}"


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=False) + "\n"


def write_jsonl(path: Path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r) + "\n")


@dataclass
class OptimizeResult:
    report: FinalReport
    run_dir: Path
    log_lines: List[str]


def optimize(cfg: RunConfig, out: Optional[Path] = None, seed: Optional[int] = None) -> OptimizeResult:
    """Run the full loop once and persist everything under the run directory."""
    seed = cfg.seeds[0] if seed is None else seed
    run_dir = Path(out) if out else default_run_dir(cfg.resolve(cfg.raw.get("output_dir", "runs")), cfg.plant_id)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(_dump({**cfg.raw, "seeds": [seed]}), encoding="utf-8")
    binding = cfg.binding()
    lines: List[str] = []
    with open(run_dir / "iterations.jsonl", "w", encoding="utf-8") as it_fh, \
            open(run_dir / "log.txt", "w", encoding="utf-8") as log_fh:

        def on_record(rec: IterationRecord) -> None:
            it_fh.write(json.dumps(rec.to_dict()) + "\n")
            line = rec.log_line()
            lines.append(line)
            log_fh.write(line + "\n")

        try:
            report = run_full(cfg.plan(seed), binding, on_record)
        finally:
            write_jsonl(run_dir / "transcript.jsonl", binding.transcript)
    (run_dir / "report.json").write_text(_dump(report.to_dict()), encoding="utf-8")
    return OptimizeResult(report, run_dir, lines)


# ---------------------------------------------------------------- replay comparison

COMPARED = ("mse", "settling_time", "rise_time", "overshoot", "zero_crossings", "control_zero_crossings",
            "control_effort", "ss_error", "stable")


def compare_logs(produced: Sequence[str], reference: Sequence[str], rel_tol: float = 0.05) -> dict:
    """Field-by-field comparison of two iteration logs.

    Gains and iteration numbers must agree exactly; metric fields are reported
    with their relative deviation and flagged when it exceeds ``rel_tol``.
    """
    rows = []
    n = max(len(produced), len(reference))
    structural = len(produced) == len(reference)
    for k in range(n):
        if k >= len(produced) or k >= len(reference):
            rows.append({"line": k + 1, "missing": "produced" if k >= len(produced) else "reference"})
            continue
        a, b = parse_log_line(produced[k]), parse_log_line(reference[k])
        same = a["iteration"] == b["iteration"] and a["kind"] == b["kind"] and a["gains"] == b["gains"]
        structural &= same
        fields = {}
        for f in COMPARED:
            x, y = a[f], b[f]
            if isinstance(x, bool) or isinstance(y, bool):
                dev = 0.0 if x == y else math.inf
            elif math.isinf(x) or math.isinf(y):
                dev = 0.0 if x == y else math.inf
            else:
                dev = abs(x - y) / max(abs(y), 1e-12) if y != 0 else (0.0 if x == 0 else math.inf)
            fields[f] = {"produced": x, "reference": y, "rel_dev": _num(dev), "flag": bool(dev > rel_tol)}
        rows.append({"line": k + 1, "iteration": a["iteration"], "params_match": same, "fields": fields})
    flagged = sorted({f for r in rows for f, v in r.get("fields", {}).items() if v["flag"]})
    return {"lines": n, "structure_match": structural, "flagged_fields": flagged, "rel_tol": rel_tol, "rows": rows}


def _num(x: float):
    return x if math.isfinite(x) else "inf"


def replay(cfg: RunConfig, out: Optional[Path] = None) -> Tuple[OptimizeResult, Optional[dict]]:
    res = optimize(cfg, out)
    cmp = None
    ref = cfg.raw.get("reference_log")
    if ref:
        path = cfg.resolve(ref)
        if not path.exists():
            raise ConfigError(f"reference log {path} not found")
        reference = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
        cmp = compare_logs(res.log_lines, reference)
        (res.run_dir / "comparison.json").write_text(_dump(cmp), encoding="utf-8")
    return res, cmp


# ---------------------------------------------------------------- Monte Carlo


@dataclass(frozen=True)
class Method:
    name: str
    spec: ControllerSpec


def resolve_method(d: dict, plant: PlantModel) -> Method:
    if "lqr" in d:
        spec, _ = lqr_gains(plant, d["lqr"]["q"], d["lqr"]["r"])
        return Method(d["name"], spec)
    if "kind" not in d or "gains" not in d:
        raise ConfigError(f"method {d['name']!r} needs kind and gains, or an lqr section")
    names = gain_names(d["kind"], plant)
    if set(d["gains"]) != set(names):
        raise ConfigError(f"method {d['name']!r} gains must be {list(names)}")
    return Method(d["name"], ControllerSpec(d["kind"], {n: float(d["gains"][n]) for n in names}))


def _episode(args) -> TrajectoryMetrics:
    plant, spec, scenario, sim, seed = args
    return compute_metrics(run_episode(plant, spec, scenario, sim, seed=seed))


def monte_carlo_metrics(plant, spec, scenario, sim, seeds: Sequence[int], jobs: int = 1) -> List[TrajectoryMetrics]:
    tasks = [(plant, spec, scenario, sim, int(s)) for s in seeds]
    if jobs <= 1 or len(tasks) < 2:
        return [_episode(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_episode, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))


@dataclass(frozen=True)
class TableRow:
    scenario: str
    method: str
    gains: Dict[str, float]
    mse: float
    settling_time: float
    overshoot: float
    stable_rate: float
    runs: int


def aggregate(scenario: str, method: Method, ms: Sequence[TrajectoryMetrics]) -> TableRow:
    return TableRow(
        scenario,
        method.name,
        dict(method.spec.gains),
        float(np.mean([m.mse for m in ms])),
        float(np.mean([m.settling_time for m in ms])),
        float(np.mean([m.overshoot for m in ms])),
        float(np.mean([m.stable for m in ms])),
        len(ms),
    )


def monte_carlo(
    plant: PlantModel,
    methods: Sequence[Method],
    scenarios: Sequence[Scenario],
    sim: SimConfig,
    runs: int,
    seed0: int = 0,
    jobs: int = 1,
) -> List[TableRow]:
    """Mean metrics per (scenario, method) over episodes seeded seed0 + k."""
    seeds = [seed0 + k for k in range(runs)]
    rows = []
    for sc in scenarios:
        for m in methods:
            rows.append(aggregate(sc.id, m, monte_carlo_metrics(plant, m.spec, sc, sim, seeds, jobs)))
    return rows


def table_csv(rows: Sequence[TableRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scenario", "method", "gains", "MSE", "Ts(s)", "Mp(%)", "stable_rate", "runs"])
    for r in rows:
        gains = " ".join(f"{k}={v:.4g}" for k, v in r.gains.items())
        w.writerow([r.scenario, r.method, gains, f"{r.mse:.4f}", _fmt(r.settling_time), f"{r.overshoot:.2f}",
                    f"{r.stable_rate:.2f}", r.runs])
    return buf.getvalue()


def _fmt(x: float) -> str:
    return "inf" if math.isinf(x) else f"{x:.2f}"


def cmd_montecarlo(cfg: RunConfig, runs: Optional[int], seed: Optional[int], jobs: Optional[int]) -> List[TableRow]:
    mc = cfg.raw.get("montecarlo")
    if not mc or "methods" not in mc:
        raise ConfigError("config needs a montecarlo.methods list")
    methods = [resolve_method(d, cfg.plant) for d in mc["methods"]]
    if cfg.ladder is None:
        raise ConfigError("Monte Carlo needs explicit or default scenarios")
    n = runs or mc.get("runs", 100)
    seed0 = cfg.seeds[0] if seed is None else seed
    return monte_carlo(cfg.plant, methods, cfg.ladder, cfg.sim, n, seed0, jobs or os.cpu_count() or 1)


# ---------------------------------------------------------------- LQR


def lqr_audit(plant: Optional[PlantModel], q: Sequence[float], r: float, A=None, B=None) -> dict:
    """Gains, closed-loop eigenvalues and solver diagnostics as a JSON-ready dict."""
    if A is not None:
        A = np.atleast_2d(np.asarray(A, dtype=float))
        B = np.asarray(B, dtype=float).reshape(A.shape[0], -1)
        res = solve_care(LqrProblem(A, B, np.diag(np.asarray(q, dtype=float)), r))
        names = [f"K{j + 1}" for j in range(A.shape[0])]
        gains = {n: float(k) for n, k in zip(names, res.K)}
        system = {"A": A.tolist(), "B": B.tolist()}
    else:
        spec, res = lqr_gains(plant, q, r)
        gains = dict(spec.gains)
        system = {"plant": plant.id, "states": [plant.state_names[j] for j in plant.feedback_order]}
    eig = res.closed_loop_eigs
    return {
        **system,
        "Q_diag": [float(v) for v in q],
        "R": float(r),
        "K": gains,
        "closed_loop_eigenvalues": [[float(e.real), float(e.imag)] for e in eig],
        "stable": bool(np.max(eig.real) < 0),
        "residual": res.residual,
        "method": res.method,
        "P": res.P.tolist(),
    }


# ---------------------------------------------------------------- plot data


def read_iterations(run_dir: Path) -> List[IterationRecord]:
    path = Path(run_dir) / "iterations.jsonl"
    if not path.exists():
        raise ConfigError(f"{path} not found")
    recs = [IterationRecord.from_dict(json.loads(ln)) for ln in path.read_text(encoding="utf-8").splitlines()
            if ln.strip()]
    if not recs:
        raise ConfigError(f"{path} is empty")
    return recs


def evolution_csv(records: Sequence[IterationRecord]) -> str:
    names = list(records[0].gains)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iter", *names, "mse", "Ts", "Mp"])
    for k, r in enumerate(records, 1):
        w.writerow([k, *(repr(r.gains.get(n, float("nan"))) for n in names), repr(r.metrics.mse),
                    _fmt_full(r.metrics.settling_time), repr(r.metrics.overshoot)])
    return buf.getvalue()


def _fmt_full(x: float) -> str:
    return "inf" if math.isinf(x) else repr(x)


def plotdata(run_dir: Path, out: Optional[Path] = None) -> List[Path]:
    """Write evolution.csv (and best_trajectory.csv when the run can be re-simulated)."""
    run_dir = Path(run_dir)
    recs = read_iterations(run_dir)
    out = Path(out) if out else run_dir
    out.mkdir(parents=True, exist_ok=True)
    written = []
    # one evolution file per controller family so the column set stays fixed
    kinds = list(dict.fromkeys(r.kind for r in recs))
    for kind in kinds:
        sub = [r for r in recs if r.kind == kind]
        name = "evolution.csv" if len(kinds) == 1 else f"evolution_{kind}.csv"
        (out / name).write_text(evolution_csv(sub), encoding="utf-8")
        written.append(out / name)
    cfg_path = run_dir / "config.json"
    if cfg_path.exists():
        cfg = load_config(cfg_path)
        settings = cfg.settings(cfg.seeds[0])
        best = best_records(recs, settings, 1)[0]
        ladder = cfg.ladder or ()
        level = next((i + 1 for i, s in enumerate(ladder) if s.id == best.scenario), None)
        if level is not None:
            scenario = ladder[level - 1]
            spec = ControllerSpec(best.kind, dict(best.gains))
            traj = run_episode(cfg.plant, spec, scenario, cfg.sim, seed=scenario_seed(settings.seed, level))
            (out / "best_trajectory.csv").write_text(traj.to_csv(cfg.plant.state_names), encoding="utf-8")
            written.append(out / "best_trajectory.csv")
    return written
