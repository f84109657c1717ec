"""Agent backends: live chat endpoint, deterministic heuristic policy, transcript replay.

Every backend answers ``respond(role, ctx, system, user) -> str`` with the raw
reply text. The orchestrator parses all replies the same way, so heuristic and
replay output goes through the same schema checks as a live model.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
import random
import time
from collections import defaultdict, deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional

import httpx
import numpy as np
from scipy.stats import qmc

from .metrics import meets_targets
from .protocol import (
    ROLES,
    ActorProposal,
    CriticFeedback,
    JurorVerdict,
    ProtocolError,
    PromptContext,
    ScenaristScenario,
    SelectorChoice,
    TerminatorVerdict,
    recommended_strategy,
    serialize,
)
from .scenarios import default_ladder

FORMAT_REMINDER = (
    "\n\nYour previous reply could not be parsed. Reply with exactly one JSON object "
    "in the required format and nothing else."
)


class ConfigurationError(ValueError):
    """Bad backend configuration (for example a missing API key)."""


class TransportError(RuntimeError):
    """The endpoint could not be reached or kept failing."""


class ResponseFormatError(ProtocolError):
    """The endpoint answered with something other than a chat-completion JSON body."""


class ReplayError(RuntimeError):
    """A replay transcript ran out of messages or does not match the run."""


def request_digest(system: str, user: str) -> str:
    h = hashlib.sha256()
    h.update(system.encode("utf-8"))
    h.update(b"\x00")
    h.update(user.encode("utf-8"))
    return h.hexdigest()


# ---------------------------------------------------------------- live


@dataclass(frozen=True)
class ChatEndpointConfig:
    base_url: str
    model: str
    api_key_env: str = "OPENAI_API_KEY"
    timeout: float = 60.0
    max_retries: int = 4
    temperature: float = 0.0

    def __post_init__(self):
        if not self.timeout > 0:
            raise ConfigurationError("timeout must be positive")
        if self.max_retries < 0:
            raise ConfigurationError("max_retries must be non-negative")

    @classmethod
    def from_dict(cls, d: Mapping) -> "ChatEndpointConfig":
        known = {"base_url", "model", "api_key_env", "timeout", "max_retries", "temperature"}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown endpoint fields {sorted(unknown)}")
        return cls(**d)


RETRY_BASE = 1.0
RETRY_FACTOR = 2.0
RETRY_JITTER = 0.1  # fraction of the delay added at random


def _retryable(status: int) -> bool:
    return status == 429 or 500 <= status < 600


def chat_complete(
    cfg: ChatEndpointConfig,
    system: str,
    user: str,
    client: Optional[httpx.Client] = None,
    sleep: Callable[[float], None] = time.sleep,
    rng: Optional[random.Random] = None,
) -> str:
    """POST one chat-completion request and return the first choice's content."""
    key = os.environ.get(cfg.api_key_env)
    if not key:
        raise ConfigurationError(f"environment variable {cfg.api_key_env} is not set")
    rng = rng or random.Random()
    url = cfg.base_url.rstrip("/") + "/chat/completions"
    body = {
        "model": cfg.model,
        "messages": [{"role": "system", "content": system}, {"role": "user", "content": user}],
        "temperature": cfg.temperature,
    }
    headers = {"Authorization": f"Bearer {key}"}
    own = client is None
    client = client or httpx.Client(timeout=cfg.timeout)
    try:
        last = "no attempt made"
        for attempt in range(cfg.max_retries + 1):
            if attempt:
                delay = RETRY_BASE * RETRY_FACTOR ** (attempt - 1)
                sleep(delay * (1.0 + RETRY_JITTER * rng.random()))
            try:
                resp = client.post(url, json=body, headers=headers, timeout=cfg.timeout)
            except httpx.TimeoutException as exc:
                last = f"timeout: {exc}"
                continue
            except httpx.TransportError as exc:
                raise TransportError(f"cannot reach {url}: {exc}") from None
            if _retryable(resp.status_code):
                last = f"HTTP {resp.status_code}"
                continue
            if resp.status_code >= 400:
                raise TransportError(f"HTTP {resp.status_code} from {url}: {resp.text[:200]}")
            return _content(resp)
        raise TransportError(f"giving up after {cfg.max_retries + 1} attempts ({last})")
    finally:
        if own:
            client.close()


def _content(resp: httpx.Response) -> str:
    try:
        data = resp.json()
    except ValueError:
        raise ResponseFormatError("response body is not JSON") from None
    try:
        content = data["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError):
        raise ResponseFormatError("response JSON has no choices[0].message.content") from None
    if not isinstance(content, str):
        raise ResponseFormatError("message content is not a string")
    return content


class LiveAgent:
    """Chat-completion backend; one re-prompt with a format reminder on parse failure."""

    reprompt = True

    def __init__(self, cfg: ChatEndpointConfig, client: Optional[httpx.Client] = None, sleep=time.sleep):
        self.cfg = cfg
        self.client = client
        self.sleep = sleep

    def respond(self, role: str, ctx: PromptContext, system: str, user: str) -> str:
        return chat_complete(self.cfg, system, user, client=self.client, sleep=self.sleep)


# ---------------------------------------------------------------- heuristic


def _rng(ctx: PromptContext, salt: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([ctx.seed & 0xFFFFFFFF, ctx.loop, ctx.iteration, salt]))


def _halton_point(ctx: PromptContext, dim: int) -> np.ndarray:
    # one scrambled sequence per (seed, loop); iteration k takes point k-1
    seed = np.random.SeedSequence([ctx.seed & 0xFFFFFFFF, ctx.loop, 7])
    h = qmc.Halton(dim, scramble=True, seed=np.random.default_rng(seed))
    h.fast_forward(max(ctx.iteration - 1, 0))
    return h.random(1)[0]


def _best_gains(ctx: PromptContext) -> Optional[Dict[str, float]]:
    for a in ctx.best:
        if a.metrics.stable:
            return dict(a.gains)
    return None


def _latest_strategy(ctx: PromptContext) -> Optional[str]:
    if ctx.history and ctx.history[-1].feedback is not None:
        return ctx.history[-1].feedback.strategy
    return None


def heuristic_actor(ctx: PromptContext) -> ActorProposal:
    names = list(ctx.ranges)
    lo = np.array([ctx.ranges[n][0] for n in names])
    hi = np.array([ctx.ranges[n][1] for n in names])
    width = hi - lo
    N = ctx.max_iterations
    window = ctx.threshold("explore_fraction") * N
    best = _best_gains(ctx)
    strategy = _latest_strategy(ctx) or "EXPLORE"

    if strategy == "EXPLOIT" and best is not None:
        halvings = math.floor((ctx.iteration - 1) / max(0.25 * N, 1.0))
        step = ctx.threshold("exploit_step") * width * 0.5**halvings
        b = np.array([best[n] for n in names])
        x = b + _rng(ctx, 1).uniform(-1.0, 1.0, len(names)) * step
        why = f"Exploit: perturb the best gains by at most {ctx.threshold('exploit_step') * 0.5**halvings:.2%} of each range width."
    else:
        h = _halton_point(ctx, len(names))
        if ctx.iteration <= 0.5 * window:
            # boundary-biased: each coordinate within 15% of an edge
            near = 0.15 * width
            x = np.where(h < 0.5, lo + (h / 0.5) * near, hi - ((h - 0.5) / 0.5) * near)
            why = "Explore: sample near the range boundaries to bracket the response."
        elif ctx.iteration <= window and best is not None:
            q = (ctx.iteration - 0.5 * window) / (0.5 * window)
            half = (1.0 - q + 0.1) * 0.5 * width
            b = np.array([best[n] for n in names])
            x = b + (2.0 * h - 1.0) * half
            why = "Explore: narrow the sampling region around the best gains so far."
        else:
            x = lo + h * width
            why = "Explore: low-discrepancy sample over the whole range."
    x = np.clip(x, lo, hi)
    return ActorProposal({n: round(float(v), 6) for n, v in zip(names, x)}, why)


def heuristic_critic(ctx: PromptContext) -> CriticFeedback:
    strategy = recommended_strategy(ctx)
    m = ctx.current_metrics
    t = ctx.targets
    notes = []
    if m is not None and t is not None:
        if not m.stable:
            notes.append("The closed loop is not stable.")
        else:
            ok = meets_targets(m, t)
            miss = [k for k, v in ok.items() if not v]
            notes.append("All targets met." if not miss else "Targets missed: " + ", ".join(miss) + ".")
    suggestions = []
    if strategy == "EXPLORE":
        suggestions.append("Sample gains across the permitted ranges, including values near the boundaries.")
    else:
        suggestions.append("Make small changes around the best gains found so far.")
    if m is not None and m.stable and t is not None and m.overshoot > t.overshoot:
        suggestions.append("Reduce overshoot by lowering the most aggressive gain or adding damping.")
    return CriticFeedback(strategy, " ".join(notes), tuple(suggestions))


def heuristic_terminator(ctx: PromptContext) -> TerminatorVerdict:
    if ctx.iteration < ctx.min_iterations:
        return TerminatorVerdict("CONTINUE", f"Fewer than {ctx.min_iterations} iterations so far.", "")
    if ctx.critic_strategy != "EXPLOIT":
        return TerminatorVerdict("CONTINUE", "The critic is still exploring.", "")
    m, t = ctx.current_metrics, ctx.targets
    met = all(meets_targets(m, t).values())
    if ctx.noisy:
        osc_ok = m.control_zero_crossings <= ctx.threshold("czc_limit")
    else:
        osc_ok = m.zero_crossings <= ctx.threshold("zc_limit")
    an = ctx.analyses or {}
    conv = an.get("convergence", {})
    imp = an.get("improvement", {})
    max_change = conv.get("max_change_percent", math.inf)
    mse_change = imp.get("mse_change", 0.0)
    if met and osc_ok and max_change <= ctx.threshold("converge_percent"):
        return TerminatorVerdict("TERMINATE_SUCCESS", "Targets met with converged, non-oscillating gains.", "")
    stalled = mse_change < ctx.threshold("improvement_percent")
    if (not met or not osc_ok or max_change > ctx.threshold("unconverged_percent")) and stalled:
        return TerminatorVerdict(
            "TERMINATE_REDESIGN",
            f"Targets not reached and MSE improvement over the window is {mse_change:.4f}%.",
            "Reconsider the gain ranges or the controller structure.",
        )
    return TerminatorVerdict("CONTINUE", "Still improving.", "Keep refining around the best gains.")


def heuristic_juror(ctx: PromptContext) -> JurorVerdict:
    if not ctx.best:
        return JurorVerdict("EXPLORE_FURTHER", None, "No attempt to centre a new range on.")
    best = ctx.best[0].gains
    stats = ctx.parameter_stats or {}
    rate = stats.get("stability_rate", 1.0)
    prox = ctx.threshold("boundary_proximity")
    near = []
    for n, (lo, hi) in ctx.ranges.items():
        g = best[n]
        if min(g - lo, hi - g) <= prox * (hi - lo):
            near.append(n)
    if not near and rate >= ctx.threshold("stability_rate"):
        return JurorVerdict("EXPLORE_FURTHER", None, "Best gains sit inside the range and most attempts are stable.")
    limits = ctx.global_limits or {}
    new = {}
    for n, (lo, hi) in ctx.ranges.items():
        g = best[n]
        glo, ghi = limits.get(n, (-math.inf, math.inf))
        half = 0.25 * (hi - lo)
        a, b = g - half, g + half
        # keep the width when one side hits a global limit
        if a < glo:
            a, b = glo, min(ghi, glo + 2 * half)
        if b > ghi:
            a, b = max(glo, ghi - 2 * half), ghi
        a, b = min(a, g), max(b, g)
        if not a < b:
            b = a + max(half, 1e-9)
        new[n] = (round(a, 6), round(b, 6))
    why = (
        f"Best gains near the boundary for {', '.join(near)}." if near else ""
    ) + (f" Stability rate {rate:.0%} is low." if rate < ctx.threshold("stability_rate") else "")
    return JurorVerdict("RECONSIDER_RANGE", new, why.strip())


def heuristic_selector(ctx: PromptContext) -> SelectorChoice:
    if not ctx.available:
        raise ValueError("selector called with no available controllers")
    kind, ranges = ctx.available[0]
    gains = {n: 0.5 * (lo + hi) for n, (lo, hi) in ranges.items()}
    return SelectorChoice(kind, gains, f"{kind} is the first candidate in the queue; start from the range midpoints.")


def heuristic_scenarist(ctx: PromptContext) -> ScenaristScenario:
    ladder = default_ladder(ctx.plant_id)
    sc = ladder[min(ctx.level, len(ladder)) - 1]
    return ScenaristScenario(sc, f"Level {ctx.level} of the standard ladder.")


_HEURISTICS = {
    "actor": heuristic_actor,
    "critic": heuristic_critic,
    "terminator": heuristic_terminator,
    "juror": heuristic_juror,
    "selector": heuristic_selector,
    "scenarist": heuristic_scenarist,
}


class HeuristicAgent:
    """Rule-based agents; a pure function of the context (which carries the seed)."""

    reprompt = False

    def respond(self, role: str, ctx: PromptContext, system: str, user: str) -> str:
        return json.dumps(serialize(_HEURISTICS[role](ctx)))


# ---------------------------------------------------------------- replay


def load_transcript(path) -> List[dict]:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ReplayError(f"{path}:{n}: {exc}") from None
            if row.get("role") not in ROLES or "response" not in row:
                raise ReplayError(f"{path}:{n}: needs a known role and a response")
            rows.append(row)
    return rows


class ReplayAgent:
    """Serves recorded responses per role, in order.

    With ``strict`` the request digest of each call must equal the recorded
    one, which only holds for transcripts recorded by this package.
    """

    reprompt = False

    def __init__(self, rows: List[dict], strict: bool = False):
        self.queues: Dict[str, deque] = defaultdict(deque)
        for r in rows:
            self.queues[r["role"]].append(r)
        self.strict = strict

    @classmethod
    def from_file(cls, path, strict: bool = False) -> "ReplayAgent":
        return cls(load_transcript(path), strict)

    def next(self, role: str) -> dict:
        q = self.queues[role]
        if not q:
            raise ReplayError(f"replay transcript has no more {role} messages")
        return q.popleft()

    def remaining(self, role: str) -> int:
        return len(self.queues[role])

    def respond(self, role: str, ctx: PromptContext, system: str, user: str) -> str:
        row = self.next(role)
        if self.strict and row.get("request_digest") and row["request_digest"] != request_digest(system, user):
            raise ReplayError(f"{role} request differs from the recorded one")
        resp = row["response"]
        return resp if isinstance(resp, str) else json.dumps(resp)


# ---------------------------------------------------------------- binding


@dataclass
class AgentBinding:
    agents: Dict[str, object]
    transcript: List[dict] = field(default_factory=list)

    def __post_init__(self):
        missing = [r for r in ROLES if r not in self.agents]
        if missing:
            raise ConfigurationError(f"no backend bound for {', '.join(missing)}")

    def call(self, role: str, ctx: PromptContext, system: str, user: str) -> str:
        raw = self.agents[role].respond(role, ctx, system, user)
        self.transcript.append({"role": role, "request_digest": request_digest(system, user), "response": raw})
        return raw

    def reprompts(self, role: str) -> bool:
        return getattr(self.agents[role], "reprompt", False)


def make_binding(cfg: Optional[Mapping] = None, base_dir: Optional[Path] = None) -> AgentBinding:
    """Build a binding from a config mapping.

    ``{"default": "heuristic", "replay": "file.jsonl", "actor": "live",
    "endpoint": {...}}``: every role takes ``default`` unless named. Live roles
    share ``endpoint``; replay roles share one transcript file.
    """
    cfg = dict(cfg or {})
    default = cfg.get("default", "heuristic")
    kinds = {r: cfg.get(r, default) for r in ROLES}
    bad = {k for k in kinds.values() if k not in ("heuristic", "live", "replay")}
    if bad:
        raise ConfigurationError(f"unknown backend(s) {sorted(bad)}")
    agents: Dict[str, object] = {}
    heuristic = HeuristicAgent()
    replay = live = None
    for role, kind in kinds.items():
        if kind == "heuristic":
            agents[role] = heuristic
        elif kind == "replay":
            if replay is None:
                path = cfg.get("replay")
                if not path:
                    raise ConfigurationError("replay backend needs a 'replay' transcript path")
                p = Path(path)
                if base_dir is not None and not p.is_absolute():
                    p = Path(base_dir) / p
                if not p.exists():
                    raise ConfigurationError(f"replay transcript {p} not found")
                replay = ReplayAgent.from_file(p, strict=bool(cfg.get("strict_replay", False)))
            agents[role] = replay
        else:
            if live is None:
                if "endpoint" not in cfg:
                    raise ConfigurationError("live backend needs an 'endpoint' section")
                live = LiveAgent(ChatEndpointConfig.from_dict(cfg["endpoint"]))
            agents[role] = live
    return AgentBinding(agents)
