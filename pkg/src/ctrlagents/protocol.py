"""Agent message types, their JSON wire form, and prompt rendering.

Six roles talk to the orchestrator: selector, scenarist, actor, critic,
terminator and juror. Each reply is a JSON object; ``parse_agent_json`` pulls
the first well-formed object out of a free-text reply and validates it against
the role schema. ``render_prompt`` turns a ``PromptContext`` into the
(system, user) text pair sent to a chat model.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from importlib import resources
from string import Template
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import jsonschema

from .controllers import KINDS, PID_GAINS, clamp_gains
from .metrics import Targets, TrajectoryMetrics, meets_targets
from .scenarios import Scenario, ScenarioError

ROLES = ("selector", "scenarist", "actor", "critic", "terminator", "juror")
STRATEGIES = ("EXPLORE", "EXPLOIT")
TERMINATOR_DECISIONS = ("TERMINATE_SUCCESS", "TERMINATE_REDESIGN", "CONTINUE")
JUROR_DECISIONS = ("RECONSIDER_RANGE", "EXPLORE_FURTHER")

ARROW = " → "


class ProtocolError(ValueError):
    """Base class for malformed agent replies."""


class ParseError(ProtocolError):
    """No JSON object could be extracted."""


class SchemaError(ProtocolError):
    """A JSON object was found but does not fit the role schema."""


# ---------------------------------------------------------------- messages


@dataclass(frozen=True)
class ActorProposal:
    gains: Dict[str, float]
    reasoning: str = ""
    warnings: Tuple[str, ...] = ()


@dataclass(frozen=True)
class CriticFeedback:
    strategy: str
    result_analysis: str = ""
    suggested_improvements: Tuple[str, ...] = ()


@dataclass(frozen=True)
class TerminatorVerdict:
    decision: str
    reasoning: str = ""
    recommendations: str = ""


@dataclass(frozen=True)
class JurorVerdict:
    decision: str
    new_range: Optional[Dict[str, Tuple[float, float]]] = None
    reasoning: str = ""


@dataclass(frozen=True)
class SelectorChoice:
    controller_type: str
    parameters: Dict[str, float]
    reasoning: str = ""


@dataclass(frozen=True)
class ScenaristScenario:
    scenario: Scenario
    reasoning: Optional[str] = None


# ---------------------------------------------------------------- schemas

_NUM = {"type": "number"}
_RANGE = {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2}

_SCHEMAS = {
    "critic": {
        "type": "object",
        "required": ["strategy"],
        "properties": {
            "strategy": {"enum": list(STRATEGIES)},
            "result_analysis": {"type": "string"},
            "suggested_improvements": {"type": "array", "items": {"type": "string"}},
        },
    },
    "terminator": {
        "type": "object",
        "required": ["decision"],
        "properties": {
            "decision": {"enum": list(TERMINATOR_DECISIONS)},
            "reasoning": {"type": "string"},
            "recommendations": {"type": ["string", "array"]},
        },
    },
    "juror": {
        "type": "object",
        "required": ["decision"],
        "properties": {
            "decision": {"enum": list(JUROR_DECISIONS)},
            "new_range": {"type": ["object", "null"], "additionalProperties": _RANGE},
            "reasoning": {"type": "string"},
        },
    },
    "selector": {
        "type": "object",
        "required": ["controller_type", "parameters"],
        "properties": {
            "controller_type": {"enum": list(KINDS)},
            "parameters": {"type": "object", "additionalProperties": _NUM},
            "reasoning": {"type": "string"},
        },
    },
    "scenarist": {
        "type": "object",
        "required": ["id", "initial_condition_range"],
        "properties": {
            "id": {"type": "string"},
            "randomness_level": {"type": "number", "minimum": 0},
            "param_uncertainty": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            "initial_condition_range": _RANGE,
            "disturbance_level": {"type": "number", "minimum": 0},
            "reasoning": {"type": "string"},
        },
    },
}


def _actor_schema(gain_names: Optional[Sequence[str]]) -> dict:
    props = {"reasoning": {"type": "string"}}
    if gain_names:
        props.update({n: _NUM for n in gain_names})
        return {"type": "object", "required": list(gain_names), "properties": props}
    return {"type": "object", "properties": props, "minProperties": 1}


def _validate(obj, schema: dict, role: str) -> None:
    errors = sorted(jsonschema.Draft202012Validator(schema).iter_errors(obj), key=lambda e: list(e.path))
    if errors:
        e = errors[0]
        where = "/".join(str(p) for p in e.path) or "<root>"
        raise SchemaError(f"{role} reply invalid at {where}: {e.message}")


# ---------------------------------------------------------------- parsing

_THINK = re.compile(r"<think>.*?</think>", re.IGNORECASE | re.DOTALL)


def extract_json(raw: str) -> dict:
    """First well-formed JSON object in a reply, ignoring think blocks, prose and fences."""
    text = _THINK.sub("", raw)
    decoder = json.JSONDecoder()
    pos = text.find("{")
    while pos != -1:
        try:
            obj, _ = decoder.raw_decode(text, pos)
        except json.JSONDecodeError:
            pos = text.find("{", pos + 1)
            continue
        if isinstance(obj, dict):
            return obj
        pos = text.find("{", pos + 1)
    raise ParseError("no JSON object found in reply")


def parse_agent_json(
    raw: str,
    role: str,
    gain_names: Optional[Sequence[str]] = None,
    ranges: Optional[Mapping[str, Tuple[float, float]]] = None,
):
    """Typed message from a raw reply; actor gains are clamped into ``ranges``."""
    obj = extract_json(raw)
    return message_from_dict(obj, role, gain_names=gain_names, ranges=ranges)


def message_from_dict(obj: dict, role: str, gain_names=None, ranges=None):
    if role not in ROLES:
        raise ValueError(f"unknown role {role!r}")

    if role == "actor":
        names = list(gain_names) if gain_names else None
        _validate(obj, _actor_schema(names), role)
        keys = names or [k for k in obj if k != "reasoning"]
        gains = {}
        for k in keys:
            v = obj[k]
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise SchemaError(f"actor gain {k} is not numeric")
            gains[k] = float(v)
        warnings: List[str] = []
        if ranges:
            gains, warnings = clamp_gains(gains, ranges)
        return ActorProposal(gains, str(obj.get("reasoning", "")), tuple(warnings))

    _validate(obj, _SCHEMAS[role], role)

    if role == "critic":
        return CriticFeedback(
            obj["strategy"], obj.get("result_analysis", ""), tuple(obj.get("suggested_improvements", ()))
        )

    if role == "terminator":
        rec = obj.get("recommendations", "")
        if isinstance(rec, list):
            rec = "\n".join(str(r) for r in rec)
        return TerminatorVerdict(obj["decision"], obj.get("reasoning", ""), rec)

    if role == "juror":
        nr = obj.get("new_range")
        if obj["decision"] == "RECONSIDER_RANGE":
            if not nr:
                raise SchemaError("RECONSIDER_RANGE needs a non-empty new_range")
            for k, (lo, hi) in nr.items():
                if not lo < hi:
                    raise SchemaError(f"new_range for {k} needs min < max")
            nr = {k: (float(lo), float(hi)) for k, (lo, hi) in nr.items()}
        elif nr:
            raise SchemaError("EXPLORE_FURTHER must not carry a new_range")
        else:
            nr = None
        return JurorVerdict(obj["decision"], nr, obj.get("reasoning", ""))

    if role == "selector":
        kind = obj["controller_type"]
        params = {k: float(v) for k, v in obj["parameters"].items()}
        _check_selector_params(kind, params)
        return SelectorChoice(kind, params, obj.get("reasoning", ""))

    try:
        sc = Scenario.from_dict(obj)
    except ScenarioError as exc:
        raise SchemaError(str(exc)) from None
    return ScenaristScenario(sc, obj.get("reasoning"))


def _check_selector_params(kind: str, params: Mapping[str, float]) -> None:
    if kind in PID_GAINS:
        expected = set(PID_GAINS[kind])
        if set(params) != expected:
            raise SchemaError(f"{kind} parameters must be {sorted(expected)}, got {sorted(params)}")
        return
    idx = sorted(int(k[1:]) for k in params if re.fullmatch(r"K[1-9][0-9]*", k))
    if len(idx) != len(params) or idx != list(range(1, len(idx) + 1)) or not idx:
        raise SchemaError(f"FSF parameters must be K1..Kn, got {sorted(params)}")


def serialize(msg) -> dict:
    """Wire-form dict of a typed message."""
    if isinstance(msg, ActorProposal):
        return {**msg.gains, "reasoning": msg.reasoning}
    if isinstance(msg, CriticFeedback):
        return {
            "strategy": msg.strategy,
            "result_analysis": msg.result_analysis,
            "suggested_improvements": list(msg.suggested_improvements),
        }
    if isinstance(msg, TerminatorVerdict):
        return {"decision": msg.decision, "reasoning": msg.reasoning, "recommendations": msg.recommendations}
    if isinstance(msg, JurorVerdict):
        nr = None if msg.new_range is None else {k: [lo, hi] for k, (lo, hi) in msg.new_range.items()}
        return {"decision": msg.decision, "new_range": nr, "reasoning": msg.reasoning}
    if isinstance(msg, SelectorChoice):
        return {"controller_type": msg.controller_type, "parameters": dict(msg.parameters), "reasoning": msg.reasoning}
    if isinstance(msg, ScenaristScenario):
        d = msg.scenario.to_dict()
        if msg.reasoning is not None:
            d["reasoning"] = msg.reasoning
        return d
    raise TypeError(f"not an agent message: {type(msg).__name__}")


def role_of(msg) -> str:
    return {
        ActorProposal: "actor",
        CriticFeedback: "critic",
        TerminatorVerdict: "terminator",
        JurorVerdict: "juror",
        SelectorChoice: "selector",
        ScenaristScenario: "scenarist",
    }[type(msg)]


def to_json(msg) -> str:
    return json.dumps(serialize(msg), indent=4)


# ---------------------------------------------------------------- rendering


@dataclass(frozen=True)
class SystemInfo:
    name: str
    description: str
    state_names: Tuple[str, ...]
    input_name: str


SYSTEMS = {
    "dc_motor": SystemInfo(
        "DC Motor Position Control",
        "Armature-controlled DC motor with current, shaft speed and shaft angle as states. "
        "The applied voltage must bring the shaft angle to the reference.",
        ("current", "omega", "theta"),
        "voltage",
    ),
    "ball_beam": SystemInfo(
        "Ball and Beam System",
        "A ball rolls along a beam whose angular acceleration is commanded. "
        "The ball must be brought to rest at the reference position.",
        ("r", "dr", "alpha", "dalpha"),
        "theta",
    ),
    "pendulum": SystemInfo(
        "Inverted Pendulum",
        "A damped pendulum driven by a torque at its pivot. "
        "It must be held upright at zero angle.",
        ("theta", "dtheta"),
        "torque",
    ),
    "double_pendulum": SystemInfo(
        "Double Inverted Pendulum",
        "Two point-mass links in series driven by a torque at the base joint. "
        "Both links must be balanced upright.",
        ("theta1", "dtheta1", "theta2", "dtheta2"),
        "torque",
    ),
}

_GAIN_HINTS = {
    "Kp": "Proportional gain (speed of response against overshoot)",
    "Ki": "Integral gain (removes steady offset, can add overshoot)",
    "Kd": "Derivative gain (adds damping, amplifies noise)",
}


DEFAULT_THRESHOLDS = {
    "explore_fraction": 0.3,
    "exploit_step": 0.05,
    "boundary_proximity": 0.1,
    "stability_rate": 0.3,
    "converge_percent": 5.0,
    "unconverged_percent": 20.0,
    "improvement_percent": 5.0,
    "zc_limit": 5,
    "czc_limit": 10,
}


@dataclass(frozen=True)
class Attempt:
    """One evaluated proposal as seen by the agents."""

    iteration: int
    gains: Dict[str, float]
    metrics: TrajectoryMetrics
    feedback: Optional[CriticFeedback] = None


@dataclass(frozen=True)
class PromptContext:
    plant_id: str
    kind: str = "P"
    ranges: Dict[str, Tuple[float, float]] = field(default_factory=dict)
    feedback_states: Tuple[str, ...] = ()
    iteration: int = 1
    max_iterations: int = 30
    min_iterations: int = 6
    targets: Optional[Targets] = None
    history: Tuple[Attempt, ...] = ()
    best: Tuple[Attempt, ...] = ()
    current_gains: Optional[Dict[str, float]] = None
    current_metrics: Optional[TrajectoryMetrics] = None
    critic_strategy: Optional[str] = None
    analyses: Optional[dict] = None
    parameter_stats: Optional[dict] = None
    reconsiderations: int = 0
    iterations_done: int = 0
    noisy: bool = False
    available: Tuple[Tuple[str, Dict[str, Tuple[float, float]]], ...] = ()
    selected_params: Optional[Dict[str, float]] = None
    level: int = 1
    n_levels: int = 3
    thresholds: Optional[dict] = None
    global_limits: Optional[Dict[str, Tuple[float, float]]] = None
    seed: int = 0
    loop: int = 0

    def threshold(self, name: str):
        return (self.thresholds or {}).get(name, DEFAULT_THRESHOLDS[name])


def _t(name: str) -> Template:
    return Template(resources.files("ctrlagents").joinpath("prompts", f"{name}.txt").read_text(encoding="utf-8"))


def f4(x: float) -> str:
    return "inf" if isinstance(x, float) and math.isinf(x) else f"{x:.4f}"


def f2(x: float) -> str:
    return "inf" if isinstance(x, float) and math.isinf(x) else f"{x:.2f}"


def yes(b: bool) -> str:
    return "Yes" if b else "No"


def _chain(values, fmt) -> str:
    return ARROW.join(fmt(v) for v in values)


def _json_block(obj) -> str:
    return json.dumps(obj, indent=2)


def recommended_strategy(ctx: PromptContext) -> str:
    stable_best = any(a.metrics.stable for a in ctx.best)
    if ctx.iteration <= ctx.threshold("explore_fraction") * ctx.max_iterations or not stable_best:
        return "EXPLORE"
    return "EXPLOIT"


def _ranges_lines(ranges, fmt=f4) -> str:
    return "\n".join(f"- {k}: [{fmt(lo)}, {fmt(hi)}]" for k, (lo, hi) in ranges.items())


def _params_eq(gains: Mapping[str, float]) -> str:
    return ", ".join(f"{k} = {f4(v)}" for k, v in gains.items())


def _actor_format(names: Sequence[str]) -> str:
    body = ",\n".join([f'    "{n}": value' for n in names] + ['    "reasoning": "Why these gains"'])
    return "{\n" + body + "\n}"


def _controller_details(ctx: PromptContext) -> str:
    names = list(ctx.ranges)
    if ctx.kind == "FSF":
        n = len(names)
        lines = [
            "FULL-STATE FEEDBACK DETAILS:",
            f"- Control gains: {', '.join(names)}",
            f"- Control law: u = -K1*x1 - K2*x2 - ... - K{n}*x{n}",
        ]
        for name, st in zip(names, ctx.feedback_states):
            lines.append(f"- {name} controls feedback from {st}")
        return "\n".join(lines)
    lines = [f"{ctx.kind} CONTROLLER DETAILS:", "- Output feedback on the regulated-state error"]
    lines += [f"- {n}: {_GAIN_HINTS[n]}" for n in names]
    return "\n".join(lines)


def _actor_history(ctx: PromptContext) -> str:
    h = ctx.history
    if not h:
        return "No previous attempts available."
    names = list(h[-1].gains)
    lines = [f"RECENT PERFORMANCE HISTORY ({len(h)} attempts):", "Parameter Trends:"]
    lines += [f"- {n}: {_chain([a.gains.get(n, float('nan')) for a in h], f4)}" for n in names]
    lines += ["", "Performance Trends:"]
    m = [a.metrics for a in h]
    lines += [
        f"- Mse: {_chain([x.mse for x in m], f4)}",
        f"- Settling Time: {_chain([x.settling_time for x in m], f2)}",
        f"- Overshoot: {_chain([x.overshoot for x in m], f4)}",
        f"- Zero Crossings: {_chain([x.zero_crossings for x in m], str)}",
        f"- Control Zero Crossings: {_chain([x.control_zero_crossings for x in m], str)}",
        f"- Control Effort: {_chain([x.control_effort for x in m], f4)}",
        f"- Stable: {_chain([x.stable for x in m], yes)}",
    ]
    return "\n".join(lines)


def _actor_feedback(ctx: PromptContext) -> str:
    fb = ctx.history[-1].feedback if ctx.history else None
    if fb is None:
        return ""
    lines = ["LATEST FEEDBACK:", f"- Strategy: {fb.strategy}", f"- Analysis: {fb.result_analysis}", "- Suggestions:"]
    lines += [f"  • {s}" for s in fb.suggested_improvements]
    return "\n".join(lines)


def _best_attempts(ctx: PromptContext) -> str:
    if not ctx.best:
        return "No best performance yet."
    lines = ["BEST PERFORMING ATTEMPTS:"]
    for i, a in enumerate(ctx.best, 1):
        params = ", ".join(f"{k}={f4(v)}" for k, v in a.gains.items())
        m = a.metrics
        lines += [
            f"Best #{i} (Iteration #{a.iteration}):",
            f"- Parameters: {params}",
            f"- Performance: MSE={f4(m.mse)}, Settling Time={f2(m.settling_time)}s, Stable={yes(m.stable)}",
            "",
        ]
    return "\n".join(lines).rstrip()


def _trend(attempts: Sequence[Attempt]) -> str:
    if not attempts:
        return "No previous attempts available."
    names = list(attempts[-1].gains)
    m = [a.metrics for a in attempts]
    lines = [f"TREND FROM PREVIOUS {len(attempts)} RESULTS:", "Parameters:"]
    lines += [f"{n}: {_chain([a.gains.get(n, float('nan')) for a in attempts], f4)}" for n in names]
    lines += [
        "",
        "Metrics:",
        f"mse: {_chain([x.mse for x in m], f4)}",
        f"settling_time: {_chain([x.settling_time for x in m], f2)}",
        f"overshoot: {_chain([x.overshoot for x in m], f4)}",
        f"stable: {_chain([float(x.stable) for x in m], f4)}",
        f"zero_crossings: {_chain([float(x.zero_crossings) for x in m], f4)}",
        f"control_effort: {_chain([x.control_effort for x in m], f4)}",
        f"control_zero_crossings: {_chain([float(x.control_zero_crossings) for x in m], f4)}",
    ]
    return "\n".join(lines)


def _metric_lines(m: TrajectoryMetrics, targets: Optional[Targets]) -> List[str]:
    tgt = (lambda s: f" (Target: {s})") if targets else (lambda s: "")
    return [
        f"- Mean Squared Error: {f4(m.mse)}" + (tgt(f4(targets.mse)) if targets else ""),
        f"- Settling Time: {f2(m.settling_time)}s" + (tgt(f2(targets.settling_time) + "s") if targets else ""),
        f"- Maximum Overshoot: {f4(m.overshoot)} percent"
        + (tgt(f4(targets.overshoot) + " percent") if targets else ""),
        f"- Zero-Crossings: {m.zero_crossings}",
        f"- Control Signal Zero-Crossings: {m.control_zero_crossings}",
        f"- Control Effort: {f4(m.control_effort)}",
        f"- System Stable: {yes(m.stable)}",
    ]


def _critic_best(ctx: PromptContext) -> str:
    if not ctx.best:
        return "No best performance yet."
    a = ctx.best[0]
    return "\n".join(
        ["BEST PERFORMANCE SO FAR:", "Parameters:", _params_eq(a.gains), "", "Metrics:"]
        + [ln for ln in _metric_lines(a.metrics, None) if "Signal" not in ln]
    )


def _terminator_metrics(m: TrajectoryMetrics, targets: Targets) -> str:
    ok = meets_targets(m, targets)
    tag = lambda k: "SUCCESS" if ok[k] else "NOT YET"
    return "\n".join(
        [
            f"- MSE: {m.mse:.6f} ({tag('mse')})",
            f"- Settling time: {f2(m.settling_time)}s ({tag('settling_time')})",
            f"- Overshoot: {f4(m.overshoot)} ({tag('overshoot')})",
            f"- System stable: {yes(m.stable)}",
            f"- Zero crossings: {m.zero_crossings} (lower means fewer oscillations)",
            f"- Control effort: {f4(m.control_effort)} (lower means cheaper control)",
            f"- Control zero crossings: {m.control_zero_crossings} (lower means smoother control)",
        ]
    )


def _analyses_block(an: Optional[dict]) -> str:
    if not an:
        return ""
    return "\n".join(
        [
            "IMPROVEMENT ANALYSIS:",
            _json_block(an["improvement"]),
            "PARAMETER CONVERGENCE ANALYSIS:",
            _json_block(an["convergence"]),
        ]
    )


_CRITIC_FORMAT = """{
    "strategy": "EXPLORE or EXPLOIT",
    "result_analysis": "Short assessment of the latest result",
    "suggested_improvements": [
        "Concrete gain change 1",
        "Concrete gain change 2"
    ]
}"""

_TERMINATOR_FORMAT = """{
    "decision": "TERMINATE_SUCCESS|TERMINATE_REDESIGN|CONTINUE",
    "reasoning": "Why this decision",
    "recommendations": "What to focus on next if continuing"
}"""

_JUROR_FORMAT = """{
    "decision": "RECONSIDER_RANGE" or "EXPLORE_FURTHER",
    "new_range": {parameter_name: [min_value, max_value], ...} or null,
    "reasoning": "Technical justification"
}"""

_SELECTOR_FORMAT = """{
    "controller_type": "P|PI|PD|PID|FSF",
    "parameters": {
        "param_name": value,
        ...
    },
    "reasoning": "Why this controller and these starting gains"
}"""

_SCENARIST_FORMAT = """{
    "id": "Scenario identifier",
    "randomness_level": float,
    "param_uncertainty": float,
    "initial_condition_range": [float, float],
    "disturbance_level": float,
    "reasoning": "Why these conditions"
}"""



def _tidy(text: str) -> str:
    text = re.sub(r"\n{3,}", "\n\n", text)
    return text.strip() + "\n"


def _system_fields(ctx: PromptContext) -> dict:
    info = SYSTEMS[ctx.plant_id]
    return {
        "system_name": info.name,
        "system_description": info.description,
        "n_states": len(info.state_names),
        "state_names": ", ".join(info.state_names),
        "input_name": info.input_name,
    }


def render_prompt(role: str, ctx: PromptContext) -> Tuple[str, str]:
    """(system text, user text) for a role; a pure function of the context."""
    sysf = _system_fields(ctx)
    th = {**DEFAULT_THRESHOLDS, **(ctx.thresholds or {})}

    if role == "actor":
        system = _t("actor_system").substitute(
            kind=ctx.kind, iteration=ctx.iteration, max_iterations=ctx.max_iterations, **sysf
        )
        user = _t("actor_user").substitute(
            controller_details=_controller_details(ctx),
            constraints=_ranges_lines(ctx.ranges),
            history=_actor_history(ctx),
            feedback=_actor_feedback(ctx),
            best=_best_attempts(ctx),
            json_format=_actor_format(list(ctx.ranges)),
        )
    elif role == "critic":
        _need(ctx, role, "current_gains", "current_metrics", "targets")
        system = _t("critic_system").substitute()
        user = _t("critic_user").substitute(
            iteration=ctx.iteration,
            max_iterations=ctx.max_iterations,
            ranges=_ranges_lines(ctx.ranges, f2),
            current_params=_params_eq(ctx.current_gains),
            trend=_trend(ctx.history),
            best=_critic_best(ctx),
            metrics="\n".join(_metric_lines(ctx.current_metrics, ctx.targets)),
            recommended=recommended_strategy(ctx),
            explore_percent=f"{100 * ctx.threshold('explore_fraction'):g}",
            json_format=_CRITIC_FORMAT,
        )
    elif role == "terminator":
        _need(ctx, role, "current_metrics", "targets")
        t = ctx.targets
        if ctx.noisy:
            osc_ok = f"control_zero_crossings <= {th['czc_limit']}"
            osc_fail = f"control_zero_crossings > {th['czc_limit']}"
        else:
            osc_ok = f"zero_crossings <= {th['zc_limit']}"
            osc_fail = f"zero_crossings > {th['zc_limit']}"
        system = _t("terminator_system").substitute(iteration=ctx.iteration, max_iterations=ctx.max_iterations)
        user = _t("terminator_user").substitute(
            system_description=sysf["system_description"],
            iteration=ctx.iteration,
            max_iterations=ctx.max_iterations,
            kind=ctx.kind,
            min_iterations=ctx.min_iterations,
            target_mse=f"{t.mse:.6f}",
            target_ts=f"{f2(t.settling_time)}s",
            target_mp=f4(t.overshoot),
            target_mse_short=f"{t.mse:g}",
            target_ts_short=f"{t.settling_time:g}",
            target_mp_short=f"{t.overshoot:g}",
            metrics=_terminator_metrics(ctx.current_metrics, t),
            strategy=ctx.critic_strategy or "UNKNOWN",
            trend=_trend(ctx.history),
            analyses=_analyses_block(ctx.analyses),
            oscillation_rule=osc_ok,
            oscillation_fail=osc_fail,
            converge_percent=f"{th['converge_percent']:g}",
            unconverged_percent=f"{th['unconverged_percent']:g}",
            improvement_percent=f"{th['improvement_percent']:g}",
            json_format=_TERMINATOR_FORMAT,
        )
    elif role == "juror":
        best = ctx.best[0] if ctx.best else None
        best_json = (
            {
                "params": dict(best.gains),
                "metrics": {
                    "mse": round(best.metrics.mse, 4),
                    "settling_time": _num(best.metrics.settling_time, 2),
                    "rise_time": _num(best.metrics.rise_time, 2),
                    "overshoot": round(best.metrics.overshoot, 4),
                    "stable": best.metrics.stable,
                },
            }
            if best
            else None
        )
        system = _t("juror_system").substitute()
        user = _t("juror_user").substitute(
            kind=ctx.kind,
            ranges=_json_block({k: [lo, hi] for k, (lo, hi) in ctx.ranges.items()}),
            statistics=_json_block(ctx.parameter_stats or {}),
            best=_json_block(best_json),
            iterations_done=ctx.iterations_done,
            reconsiderations=ctx.reconsiderations,
            json_format=_JUROR_FORMAT,
        )
    elif role == "selector":
        _need(ctx, role, "targets")
        t = ctx.targets
        long_names = {
            "P": "Proportional controller",
            "PI": "Proportional-Integral controller",
            "PD": "Proportional-Derivative controller",
            "PID": "Proportional-Integral-Derivative controller",
            "FSF": "Full-State Feedback controller",
        }
        avail = "\n".join(
            f"- {k}: {long_names[k]} ({', '.join(f'{n}: [{lo:g}, {hi:g}]' for n, (lo, hi) in r.items())})"
            for k, r in ctx.available
        )
        system = _t("selector_system").substitute(**sysf)
        user = _t("selector_user").substitute(
            target_mse=f4(t.mse),
            target_ts=f"{f2(t.settling_time)}s",
            target_mp=f"{f2(t.overshoot)}%",
            max_iterations=ctx.max_iterations,
            available=avail,
            json_format=_SELECTOR_FORMAT,
        )
    elif role == "scenarist":
        stage = "initial" if ctx.level == 1 else ("advanced" if ctx.level >= ctx.n_levels else "intermediate")
        params = ", ".join(f"{k}: {v:g}" for k, v in (ctx.selected_params or {}).items())
        system = _t("scenarist_system").substitute(
            system_name=sysf["system_name"], system_description=sysf["system_description"]
        )
        user = _t("scenarist_user").substitute(
            kind=ctx.kind,
            params="{" + params + "}",
            level=ctx.level,
            n_levels=ctx.n_levels,
            stage=stage,
            json_format=_SCENARIST_FORMAT,
        )
    else:
        raise ValueError(f"unknown role {role!r}")
    return _tidy(system), _tidy(user)


def _num(x: float, digits: int):
    return "inf" if math.isinf(x) else round(x, digits)


def _need(ctx: PromptContext, role: str, *names: str) -> None:
    missing = [n for n in names if getattr(ctx, n) is None]
    if missing:
        raise ValueError(f"{role} prompt needs {', '.join(missing)} in the context")


# ---------------------------------------------------------------- log lines


def format_gains_log(kind: str, gains: Mapping[str, float]) -> str:
    digits = 2 if kind == "FSF" else 3
    return " | ".join(f"{k}:{v:.{digits}f}" for k, v in gains.items())


def format_log_line(iteration: int, max_iterations: int, kind: str, gains: Mapping[str, float], m: TrajectoryMetrics) -> str:
    """Compact one-line iteration summary."""
    return (
        f"#{iteration}/{max_iterations} | Type:{kind} | {format_gains_log(kind, gains)} | "
        f"MSE:{m.mse:.4f} | Ts:{f2(m.settling_time)} | Tr:{f2(m.rise_time)} | %OS:{f2(m.overshoot)} | "
        f"ZC:{m.zero_crossings} | CZC:{m.control_zero_crossings} | CE:{m.control_effort:.2f} | "
        f"e_ss:{m.ss_error:.2f} | isStb:{m.stable}"
    )


_LOG_RE = re.compile(r"^#(\d+)/(\d+) \| Type:(\w+) \| (.*?) \| MSE:")


def parse_log_line(line: str) -> dict:
    """Inverse of ``format_log_line`` (values as floats, counts as ints)."""
    m = _LOG_RE.match(line.strip())
    if not m:
        raise ValueError(f"not an iteration log line: {line!r}")
    fields = [f.strip() for f in line.strip().split("|")]
    out = {"iteration": int(m.group(1)), "max_iterations": int(m.group(2)), "kind": m.group(3), "gains": {}}
    keys = {"MSE": "mse", "Ts": "settling_time", "Tr": "rise_time", "%OS": "overshoot", "ZC": "zero_crossings",
            "CZC": "control_zero_crossings", "CE": "control_effort", "e_ss": "ss_error", "isStb": "stable"}
    for f in fields[2:]:
        k, v = f.split(":", 1)
        if k in keys:
            name = keys[k]
            if name == "stable":
                out[name] = v == "True"
            elif name in ("zero_crossings", "control_zero_crossings"):
                out[name] = int(v)
            else:
                out[name] = float(v)
        else:
            out["gains"][k] = float(v)
    return out
