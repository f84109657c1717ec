"""The optimization loop: selection, scenario ladder, actor-critic iterations, juror.

A run walks a ladder of scenarios with one controller family at a time. For
each scenario the inner loop asks the actor for gains, simulates them, has the
critic judge the result and the terminator decide whether to stop. A failed
loop goes to the juror, which may move the gain box; when it declines (or the
reconsideration cap is hit) the next controller family in the queue takes over
from the first scenario.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .backends import AgentBinding, FORMAT_REMINDER, TransportError
from .controllers import ConfigError, ControllerSpec, default_ranges, gain_names
from .metrics import Targets, TrajectoryMetrics, compute_metrics
from .plants import PlantModel
from .protocol import (
    ActorProposal,
    Attempt,
    CriticFeedback,
    PromptContext,
    ProtocolError,
    SelectorChoice,
    TerminatorVerdict,
    format_log_line,
    parse_agent_json,
    render_prompt,
)
from .scenarios import Scenario
from .simulator import SimConfig, run_episode

SUCCESS = "SUCCESS"
REDESIGN = "REDESIGN"
BUDGET_EXHAUSTED = "BUDGET_EXHAUSTED"

WINDOW = 5
BEST_K = 2


# ---------------------------------------------------------------- records


@dataclass(frozen=True)
class IterationRecord:
    loop: int
    scenario: str
    kind: str
    iteration: int
    max_iterations: int
    gains: Dict[str, float]
    metrics: TrajectoryMetrics
    strategy: str
    decision: str  # what the terminator said
    effective: str  # after the min-iterations rule
    warnings: Tuple[str, ...] = ()
    wall_time: float = 0.0

    def log_line(self) -> str:
        return format_log_line(self.iteration, self.max_iterations, self.kind, self.gains, self.metrics)

    def to_dict(self, with_time: bool = True) -> dict:
        d = {
            "loop": self.loop,
            "scenario": self.scenario,
            "kind": self.kind,
            "iteration": self.iteration,
            "max_iterations": self.max_iterations,
            "gains": dict(self.gains),
            "metrics": self.metrics.to_dict(),
            "strategy": self.strategy,
            "decision": self.decision,
            "effective": self.effective,
            "warnings": list(self.warnings),
        }
        if with_time:
            d["wall_time"] = round(self.wall_time, 6)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "IterationRecord":
        return cls(
            loop=int(d["loop"]),
            scenario=d["scenario"],
            kind=d["kind"],
            iteration=int(d["iteration"]),
            max_iterations=int(d["max_iterations"]),
            gains={k: float(v) for k, v in d["gains"].items()},
            metrics=TrajectoryMetrics.from_dict(d["metrics"]),
            strategy=d["strategy"],
            decision=d["decision"],
            effective=d["effective"],
            warnings=tuple(d.get("warnings", ())),
            wall_time=float(d.get("wall_time", 0.0)),
        )


# ---------------------------------------------------------------- analyzers


def _pct_change(first: float, last: float) -> float:
    if math.isinf(first) or math.isinf(last):
        if math.isinf(first) and math.isinf(last):
            return 0.0
        return 100.0 if math.isinf(first) else -100.0
    if first == 0:
        return 0.0
    return 100.0 * (first - last) / first


def improvement_analysis(window: Sequence[TrajectoryMetrics]) -> dict:
    """Percent improvement first-to-last over the window (positive means better)."""
    if len(window) < 2:
        raise ValueError("improvement analysis needs at least 2 records")
    a, b = window[0], window[-1]
    return {
        "mse_change": round(_pct_change(a.mse, b.mse), 4),
        "settling_time_change": round(_pct_change(a.settling_time, b.settling_time), 4),
        "overshoot_change": round(_pct_change(a.overshoot, b.overshoot), 4),
        "iterations_analyzed": len(window),
    }


def convergence_analysis(window: Sequence[Mapping[str, float]], threshold: float = 5.0) -> dict:
    """Mean relative step size of each gain over consecutive proposals."""
    if len(window) < 2:
        raise ValueError("convergence analysis needs at least 2 records")
    changes = {}
    for name in window[-1]:
        steps = []
        for p, q in zip(window[:-1], window[1:]):
            if name in p and name in q and p[name] != 0:
                steps.append(100.0 * abs(q[name] - p[name]) / abs(p[name]))
        changes[name] = round(float(np.mean(steps)), 4) if steps else 0.0
    mx = max(changes.values()) if changes else 0.0
    return {
        "parameter_changes": changes,
        "max_change_percent": mx,
        "converged": bool(mx <= threshold),
        "iterations_analyzed": len(window),
    }


def parameter_statistics(records: Sequence[IterationRecord], best: Optional[IterationRecord] = None) -> dict:
    """Spread of the proposals per gain plus the fraction of stable attempts."""
    if not records:
        return {"parameters": {}, "stability_rate": 0.0, "attempts": 0}
    names = list(records[-1].gains)
    params = {}
    for n in names:
        v = np.array([r.gains[n] for r in records if n in r.gains])
        entry = {
            "min": round(float(v.min()), 4),
            "max": round(float(v.max()), 4),
            "mean": round(float(v.mean()), 4),
            "std": round(float(v.std()), 4),
        }
        if best is not None:
            entry["best"] = round(best.gains[n], 4)
        params[n] = entry
    rate = sum(r.metrics.stable for r in records) / len(records)
    return {"parameters": params, "stability_rate": round(rate, 4), "attempts": len(records)}


def composite_score(m: TrajectoryMetrics, targets: Targets, weights=(1.0, 1.0, 1.0)) -> float:
    """Weighted sum of metric-to-target ratios; lower is better, unstable is +inf."""
    if not m.stable:
        return math.inf
    vals = (m.mse / targets.mse, m.overshoot / targets.overshoot, m.settling_time / targets.settling_time)
    s = sum(w * v for w, v in zip(weights, vals))
    return s if math.isfinite(s) else math.inf


def ranking_key(rec: IterationRecord, targets: Targets, ranking: str = "mse", weights=(1.0, 1.0, 1.0)):
    """Sort key for best attempts.

    ``"mse"`` orders stable attempts by MSE at the 4-decimal precision shown to
    the agents, then by composite score; ``"composite"`` uses the score alone.
    Ties fall back to the earlier iteration.
    """
    score = composite_score(rec.metrics, targets, weights)
    if ranking == "composite":
        return (not rec.metrics.stable, score, rec.loop, rec.iteration)
    return (not rec.metrics.stable, round(rec.metrics.mse, 4), score, rec.loop, rec.iteration)


# ---------------------------------------------------------------- configuration


@dataclass(frozen=True)
class LoopSettings:
    targets: Targets
    max_iterations: int = 30
    min_iterations: int = 6
    reconsideration_cap: int = 10
    failure_cap: int = 3
    ranking: str = "mse"
    weights: Tuple[float, float, float] = (1.0, 1.0, 1.0)
    thresholds: Dict[str, float] = field(default_factory=dict)
    global_limit_factor: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.max_iterations < 1 or self.min_iterations < 1:
            raise ConfigError("iteration counts must be positive")
        if self.ranking not in ("mse", "composite"):
            raise ConfigError("ranking must be 'mse' or 'composite'")
        if self.reconsideration_cap < 0 or self.failure_cap < 1:
            raise ConfigError("bad reconsideration or failure cap")


def scenario_seed(run_seed: int, level: int) -> int:
    """Common random numbers: every attempt on one scenario sees the same draw."""
    return int(np.random.SeedSequence([run_seed & 0xFFFFFFFF, level]).generate_state(1, np.uint64)[0])


@dataclass
class LoopResult:
    outcome: str
    records: List[IterationRecord]
    errors: List[str]
    transport_failed: bool = False


@dataclass
class Event:
    kind: str  # "select", "scenario", "loop", "juror", "switch"
    detail: dict

    def to_dict(self) -> dict:
        return {"event": self.kind, **self.detail}


# ---------------------------------------------------------------- agent calls


class AgentFailure(RuntimeError):
    def __init__(self, msg: str, transport: bool = False):
        super().__init__(msg)
        self.transport = transport


def consult(binding: AgentBinding, role: str, ctx: PromptContext, **parse_kw):
    """Render, call, parse; one re-prompt on a parse failure for live backends."""
    system, user = render_prompt(role, ctx)
    try:
        raw = binding.call(role, ctx, system, user)
        try:
            return parse_agent_json(raw, role, **parse_kw)
        except ProtocolError:
            if not binding.reprompts(role):
                raise
            raw = binding.call(role, ctx, system, user + FORMAT_REMINDER)
            return parse_agent_json(raw, role, **parse_kw)
    except TransportError as exc:
        raise AgentFailure(f"{role}: {exc}", transport=True) from None
    except ProtocolError as exc:
        raise AgentFailure(f"{role}: {exc}") from None


# ---------------------------------------------------------------- inner loop


@dataclass
class LoopInputs:
    plant: PlantModel
    kind: str
    scenario: Scenario
    level: int
    ranges: Dict[str, Tuple[float, float]]
    sim: SimConfig
    settings: LoopSettings
    loop: int = 0
    buffer: List[IterationRecord] = field(default_factory=list)  # earlier loops on this scenario


def _attempt(rec: IterationRecord, feedback: Optional[CriticFeedback] = None) -> Attempt:
    return Attempt(rec.iteration, dict(rec.gains), rec.metrics, feedback)


def best_records(records: Sequence[IterationRecord], s: LoopSettings, k: int = BEST_K) -> List[IterationRecord]:
    return sorted(records, key=lambda r: ranking_key(r, s.targets, s.ranking, s.weights))[:k]


def run_inner_loop(
    inp: LoopInputs,
    binding: AgentBinding,
    on_record: Optional[Callable[[IterationRecord], None]] = None,
) -> LoopResult:
    """Actor, simulate, critic, buffer, analyses, terminator; until a verdict or the cap."""
    s = inp.settings
    names = list(gain_names(inp.kind, inp.plant))
    seed = scenario_seed(s.seed, inp.level)
    buffer = list(inp.buffer)
    feedbacks: Dict[int, CriticFeedback] = {}
    records: List[IterationRecord] = []
    errors: List[str] = []
    failures = 0
    noisy = inp.scenario.randomness_level > 0
    base = PromptContext(
        plant_id=inp.plant.id,
        kind=inp.kind,
        ranges=dict(inp.ranges),
        feedback_states=tuple(inp.plant.state_names[j] for j in inp.plant.feedback_order),
        max_iterations=s.max_iterations,
        min_iterations=s.min_iterations,
        targets=s.targets,
        noisy=noisy,
        thresholds=dict(s.thresholds),
        seed=s.seed,
        loop=inp.loop,
    )

    def window_attempts(rows):
        return tuple(_attempt(r, feedbacks.get(id(r))) for r in rows[-WINDOW:])

    for it in range(1, s.max_iterations + 1):
        t0 = time.perf_counter()
        best = best_records(buffer, s)
        ctx = replace(base, iteration=it, history=window_attempts(buffer), best=tuple(_attempt(r) for r in best))
        try:
            prop: ActorProposal = consult(binding, "actor", ctx, gain_names=names, ranges=inp.ranges)
            spec = ControllerSpec(inp.kind, prop.gains, dict(inp.ranges))
            traj = run_episode(inp.plant, spec, inp.scenario, inp.sim, seed=seed)
            m = compute_metrics(traj)
            cctx = replace(ctx, current_gains=dict(prop.gains), current_metrics=m)
            fb: CriticFeedback = consult(binding, "critic", cctx)
        except AgentFailure as exc:
            failures += 1
            errors.append(f"loop {inp.loop} iteration {it}: {exc}")
            if failures >= s.failure_cap:
                return LoopResult(BUDGET_EXHAUSTED, records, errors, transport_failed=exc.transport)
            continue

        rec = IterationRecord(
            inp.loop, inp.scenario.id, inp.kind, it, s.max_iterations, dict(prop.gains), m, fb.strategy,
            "", "", prop.warnings,
        )
        buffer.append(rec)
        feedbacks[id(rec)] = fb
        window = buffer[-WINDOW:]
        analyses = None
        if len(window) >= 2:
            analyses = {
                "improvement": improvement_analysis([r.metrics for r in window]),
                "convergence": convergence_analysis([r.gains for r in window], s.thresholds.get("converge_percent", 5.0)),
            }
        tctx = replace(
            cctx,
            history=window_attempts(buffer),
            best=tuple(_attempt(r) for r in best_records(buffer, s)),
            critic_strategy=fb.strategy,
            analyses=analyses,
        )
        try:
            verdict: TerminatorVerdict = consult(binding, "terminator", tctx)
            decision = verdict.decision
        except AgentFailure as exc:
            errors.append(f"loop {inp.loop} iteration {it}: {exc}")
            failures += 1
            decision = "CONTINUE"
            if failures >= s.failure_cap:
                rec = replace(rec, decision="ERROR", effective="CONTINUE", wall_time=time.perf_counter() - t0)
                buffer[-1] = rec
                records.append(rec)
                if on_record:
                    on_record(rec)
                return LoopResult(BUDGET_EXHAUSTED, records, errors, transport_failed=exc.transport)
        else:
            failures = 0
        effective = decision if it >= s.min_iterations else "CONTINUE"
        rec = replace(rec, decision=decision, effective=effective, wall_time=time.perf_counter() - t0)
        buffer[-1] = rec
        feedbacks[id(rec)] = fb
        records.append(rec)
        if on_record:
            on_record(rec)
        if effective == "TERMINATE_SUCCESS":
            return LoopResult(SUCCESS, records, errors)
        if effective == "TERMINATE_REDESIGN":
            return LoopResult(REDESIGN, records, errors)
    return LoopResult(BUDGET_EXHAUSTED, records, errors)


# ---------------------------------------------------------------- full run


@dataclass(frozen=True)
class RunPlan:
    plant: PlantModel
    settings: LoopSettings
    sim: SimConfig
    queue: Tuple[str, ...] = ("P", "PI", "PD", "PID", "FSF")
    ladder: Optional[Tuple[Scenario, ...]] = None  # None: ask the scenarist
    n_levels: int = 3
    ranges: Dict[str, Dict[str, Tuple[float, float]]] = field(default_factory=dict)
    use_selector: bool = False

    def initial_ranges(self, kind: str) -> Dict[str, Tuple[float, float]]:
        r = self.ranges.get(kind) or default_ranges(kind, self.plant)
        names = gain_names(kind, self.plant)
        missing = [n for n in names if n not in r]
        if missing:
            raise ConfigError(f"{kind} ranges missing {missing}")
        return {n: (float(r[n][0]), float(r[n][1])) for n in names}


@dataclass
class ScenarioOutcome:
    scenario: Scenario
    kind: str
    outcome: str
    best: Optional[IterationRecord]
    reconsiderations: int
    iterations: int

    def to_dict(self, targets: Targets, weights) -> dict:
        d = {
            "scenario": self.scenario.to_dict(),
            "controller": self.kind,
            "outcome": self.outcome,
            "reconsiderations": self.reconsiderations,
            "iterations": self.iterations,
            "best": None,
        }
        if self.best is not None:
            d["best"] = {
                "loop": self.best.loop,
                "iteration": self.best.iteration,
                "gains": dict(self.best.gains),
                "metrics": self.best.metrics.to_dict(),
                "composite_score": _json_num(composite_score(self.best.metrics, targets, weights)),
            }
        return d


def _json_num(x: float):
    return x if math.isfinite(x) else "inf"


@dataclass
class FinalReport:
    plant: str
    status: str  # "completed", "partial", "transport_error"
    completed: int
    total: int
    scenarios: List[ScenarioOutcome]
    events: List[Event]
    records: List[IterationRecord]
    errors: List[str]
    settings: LoopSettings

    @property
    def summary(self) -> str:
        return f"Completed {self.completed} of {self.total} scenarios"

    @property
    def best(self) -> Optional[IterationRecord]:
        cands = [o.best for o in self.scenarios if o.best is not None]
        if not cands:
            return None
        return best_records(cands, self.settings, 1)[0]

    def to_dict(self) -> dict:
        s = self.settings
        return {
            "plant": self.plant,
            "status": self.status,
            "summary": self.summary,
            "completed": self.completed,
            "total": self.total,
            "scenarios": [o.to_dict(s.targets, s.weights) for o in self.scenarios],
            "events": [e.to_dict() for e in self.events],
            "iterations": len(self.records),
            "errors": list(self.errors),
        }


def _merge_ranges(old, new, limits, best_gains) -> Dict[str, Tuple[float, float]]:
    """Apply a (possibly partial) juror box, kept inside the global limits and around the best gains."""
    out = {}
    for n, (lo, hi) in old.items():
        if n in new:
            lo, hi = new[n]
        glo, ghi = limits[n]
        lo, hi = max(lo, glo), min(hi, ghi)
        if best_gains is not None:
            lo, hi = min(lo, best_gains[n]), max(hi, best_gains[n])
        if not lo < hi:
            lo, hi = old[n]
        out[n] = (float(lo), float(hi))
    return out


def global_limits(ranges: Mapping[str, Tuple[float, float]], factor: float) -> Dict[str, Tuple[float, float]]:
    return {n: (min(0.0, lo), factor * hi) for n, (lo, hi) in ranges.items()}


def run_full(
    plan: RunPlan,
    binding: AgentBinding,
    on_record: Optional[Callable[[IterationRecord], None]] = None,
) -> FinalReport:
    s = plan.settings
    queue = list(plan.queue)
    if not queue:
        raise ConfigError("controller queue is empty")
    total = len(plan.ladder) if plan.ladder is not None else plan.n_levels
    if total < 1:
        raise ConfigError("scenario ladder is empty")
    events: List[Event] = []
    records: List[IterationRecord] = []
    errors: List[str] = []
    outcomes: List[ScenarioOutcome] = []
    loop_counter = 0
    scenarios: Dict[int, Scenario] = {}

    def select(available: List[str]) -> str:
        if not plan.use_selector:
            return available[0]
        ctx = PromptContext(
            plant_id=plan.plant.id,
            targets=s.targets,
            max_iterations=s.max_iterations,
            available=tuple((k, plan.initial_ranges(k)) for k in available),
            seed=s.seed,
        )
        try:
            choice: SelectorChoice = consult(binding, "selector", ctx)
        except AgentFailure as exc:
            errors.append(f"selector: {exc}")
            return available[0]
        if choice.controller_type not in available:
            errors.append(f"selector chose unavailable {choice.controller_type}; using {available[0]}")
            return available[0]
        return choice.controller_type

    def scenario_for(level: int, kind: str) -> Scenario:
        if plan.ladder is not None:
            return plan.ladder[level]
        if level not in scenarios:
            ctx = PromptContext(plant_id=plan.plant.id, kind=kind, level=level + 1, n_levels=total, seed=s.seed,
                                selected_params=None)
            try:
                scenarios[level] = consult(binding, "scenarist", ctx).scenario
            except AgentFailure as exc:
                raise ConfigError(f"scenarist failed: {exc}") from None
        return scenarios[level]

    kind = select(queue)
    events.append(Event("select", {"controller": kind}))
    level = 0
    status = "completed"
    while level < total:
        scenario = scenario_for(level, kind)
        events.append(Event("scenario", {"level": level + 1, "id": scenario.id, "controller": kind}))
        ranges = plan.initial_ranges(kind)
        limits = global_limits(ranges, s.global_limit_factor)
        buffer: List[IterationRecord] = []
        reconsiderations = 0
        while True:
            loop_counter += 1
            res = run_inner_loop(
                LoopInputs(plan.plant, kind, scenario, level + 1, ranges, plan.sim, s, loop_counter, buffer),
                binding,
                on_record,
            )
            buffer.extend(res.records)
            records.extend(res.records)
            errors.extend(res.errors)
            events.append(Event("loop", {"loop": loop_counter, "outcome": res.outcome, "iterations": len(res.records),
                                         "ranges": {k: list(v) for k, v in ranges.items()}}))
            best = best_records(buffer, s, 1)
            best = best[0] if best else None
            if res.transport_failed:
                outcomes.append(ScenarioOutcome(scenario, kind, "TRANSPORT_ERROR", best, reconsiderations, len(buffer)))
                return FinalReport(plan.plant.id, "transport_error", level, total, outcomes, events, records,
                                   errors, s)
            if res.outcome == SUCCESS:
                outcomes.append(ScenarioOutcome(scenario, kind, SUCCESS, best, reconsiderations, len(buffer)))
                level += 1
                break
            verdict = None
            if reconsiderations < s.reconsideration_cap:
                ctx = PromptContext(
                    plant_id=plan.plant.id,
                    kind=kind,
                    ranges=dict(ranges),
                    targets=s.targets,
                    max_iterations=s.max_iterations,
                    best=(_attempt(best),) if best else (),
                    parameter_stats=parameter_statistics(buffer[-len(res.records):] if res.records else [], best),
                    reconsiderations=reconsiderations,
                    iterations_done=len(res.records),
                    thresholds=dict(s.thresholds),
                    global_limits=limits,
                    seed=s.seed,
                    loop=loop_counter,
                )
                try:
                    verdict = consult(binding, "juror", ctx)
                except AgentFailure as exc:
                    errors.append(f"juror: {exc}")
                    if exc.transport:
                        outcomes.append(ScenarioOutcome(scenario, kind, "TRANSPORT_ERROR", best, reconsiderations,
                                                        len(buffer)))
                        return FinalReport(plan.plant.id, "transport_error", level, total, outcomes, events,
                                           records, errors, s)
            if verdict is not None and verdict.decision == "RECONSIDER_RANGE":
                reconsiderations += 1
                ranges = _merge_ranges(ranges, verdict.new_range, limits, best.gains if best else None)
                events.append(Event("juror", {"decision": verdict.decision, "reconsideration": reconsiderations,
                                              "new_range": {k: list(v) for k, v in ranges.items()}}))
                continue
            events.append(Event("juror", {"decision": verdict.decision if verdict else "CAP_REACHED",
                                          "reconsideration": reconsiderations}))
            outcomes.append(ScenarioOutcome(scenario, kind, res.outcome, best, reconsiderations, len(buffer)))
            queue.remove(kind)
            if not queue:
                status = "partial"
                return FinalReport(plan.plant.id, status, level, total, outcomes, events, records, errors, s)
            kind = select(queue)
            events.append(Event("switch", {"controller": kind}))
            level = 0
            break
    return FinalReport(plan.plant.id, status, level, total, outcomes, events, records, errors, s)
