"""Gesture-to-media-command controller.

A deterministic state machine maps predicted gesture class streams to
player actions.  Discrete actions (play/pause) fire on label rising edges
only; continuous actions (volume, track skip) are rate-limited by an
event-time cooldown.  A virtual clock keeps everything testable; wall
clock is touched only by the subprocess command adapter.
"""

from __future__ import annotations

import json
import shlex
import subprocess
import time
from dataclasses import dataclass, field
from enum import Enum

from .errors import AdapterError, ConfigError, StreamError


class PlayerAction(Enum):
    PLAY = "Play"
    PAUSE = "Pause"
    NEXT_TRACK = "NextTrack"
    PREV_TRACK = "PrevTrack"
    VOLUME_UP = "VolumeUp"
    VOLUME_DOWN = "VolumeDown"
    NO_OP = "NoOp"


DISCRETE = "discrete"
CONTINUOUS = "continuous"
DEFAULT_COOLDOWN_MS = 500
DEFAULT_CONFIDENCE_GATE = 0.5


@dataclass(frozen=True)
class GestureEvent:
    t_ms: int
    class_label: str
    confidence: float = 1.0


@dataclass(frozen=True)
class BoundAction:
    action: PlayerAction
    kind: str  # discrete | continuous
    cooldown_ms: int = DEFAULT_COOLDOWN_MS

    def __post_init__(self):
        if self.kind not in (DISCRETE, CONTINUOUS):
            raise ConfigError(f"unknown action kind {self.kind!r}")
        if self.kind == CONTINUOUS and self.cooldown_ms <= 0:
            raise ConfigError("continuous actions need cooldown_ms > 0")


@dataclass
class Bindings:
    by_label: dict  # class label -> BoundAction
    confidence_gate: float = DEFAULT_CONFIDENCE_GATE

    def lookup(self, label: str) -> BoundAction | None:
        return self.by_label.get(label)


def default_bindings() -> Bindings:
    """The stock gesture map: Ok/Fist play/pause (discrete), Two/Three
    track skip and L/Hang volume (continuous); anything else is a no-op."""
    return Bindings({
        "Ok": BoundAction(PlayerAction.PLAY, DISCRETE),
        "Fist": BoundAction(PlayerAction.PAUSE, DISCRETE),
        "Two": BoundAction(PlayerAction.NEXT_TRACK, CONTINUOUS),
        "Three": BoundAction(PlayerAction.PREV_TRACK, CONTINUOUS),
        "L": BoundAction(PlayerAction.VOLUME_UP, CONTINUOUS),
        "Hang": BoundAction(PlayerAction.VOLUME_DOWN, CONTINUOUS),
    })


@dataclass
class ControllerState:
    last_t_ms: int | None = None
    last_label: str | None = None
    last_fire: dict = field(default_factory=dict)  # PlayerAction -> t_ms


def step(state: ControllerState, event: GestureEvent, bindings: Bindings):
    """Advance the state machine by one event.

    Returns (action or None, state).  Events below the confidence gate are
    dropped without touching the edge/cooldown state; unbound labels map
    to NoOp, which is never emitted.
    """
    if state.last_t_ms is not None and event.t_ms < state.last_t_ms:
        raise StreamError(f"event timestamp {event.t_ms} ms precedes "
                          f"{state.last_t_ms} ms")
    state = replace_state(state, last_t_ms=event.t_ms)
    if event.confidence < bindings.confidence_gate:
        return None, state

    prev_label = state.last_label
    state.last_label = event.class_label
    bound = bindings.lookup(event.class_label)
    if bound is None or bound.action is PlayerAction.NO_OP:
        return None, state

    if bound.kind == DISCRETE:
        if prev_label == event.class_label:
            return None, state
    else:
        last = state.last_fire.get(bound.action)
        if last is not None and event.t_ms - last < bound.cooldown_ms:
            return None, state
        state.last_fire[bound.action] = event.t_ms
    return bound.action, state


def replace_state(state: ControllerState, **kw) -> ControllerState:
    new = ControllerState(state.last_t_ms, state.last_label,
                          dict(state.last_fire))
    for k, v in kw.items():
        setattr(new, k, v)
    return new


# ---------------------------------------------------------------------------
# adapters


class MockAdapter:
    """Records actions in memory; optionally advances a virtual clock to
    model a fixed per-command latency."""

    def __init__(self, latency_ms: float = 0.0, clock=None, fail_on=()):
        self.latency_ms = latency_ms
        self.clock = clock
        self.fail_on = set(fail_on)
        self.sent = []

    def send(self, action: PlayerAction) -> None:
        if self.clock is not None:
            self.clock.advance(self.latency_ms)
        if action in self.fail_on:
            raise AdapterError(f"mock failure for {action.value}")
        self.sent.append(action)


class CommandAdapter:
    """Runs an external command per action (e.g. a playerctl invocation).

    Templates map actions to shell-style command strings; "{action}" is
    substituted with the action name.
    """

    def __init__(self, templates: dict):
        self.templates = {self._as_action(k): v for k, v in templates.items()}

    @staticmethod
    def _as_action(key):
        return key if isinstance(key, PlayerAction) else PlayerAction(key)

    def send(self, action: PlayerAction) -> None:
        template = self.templates.get(action)
        if template is None:
            raise AdapterError(f"no command configured for {action.value}")
        argv = [part.format(action=action.value)
                for part in shlex.split(template)]
        try:
            result = subprocess.run(argv, capture_output=True)
        except FileNotFoundError as exc:
            raise AdapterError(f"{argv[0]}: executable not found") from exc
        if result.returncode != 0:
            raise AdapterError(
                f"{argv[0]} exited {result.returncode}: "
                f"{result.stderr.decode(errors='replace').strip()}")


class VirtualClock:
    """Monotonic millisecond clock advanced explicitly by tests/mocks."""

    def __init__(self, start_ms: float = 0.0):
        self.t_ms = float(start_ms)

    def now_ms(self) -> float:
        return self.t_ms

    def advance(self, delta_ms: float) -> None:
        self.t_ms += delta_ms


class MonotonicClock:
    def now_ms(self) -> float:
        return time.monotonic() * 1000.0

    def advance(self, delta_ms: float) -> None:  # pragma: no cover
        raise ConfigError("wall clock cannot be advanced manually")


# ---------------------------------------------------------------------------
# sessions and reports


@dataclass
class Trial:
    expected_action: PlayerAction
    window_start_ms: int
    window_end_ms: int


@dataclass
class SessionReport:
    per_action: dict = field(default_factory=dict)
    event_count: int = 0
    errors: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "event_count": self.event_count,
            "errors": list(self.errors),
            "per_action": {a.value: dict(stats)
                           for a, stats in self.per_action.items()},
        }

    def render_table(self) -> str:
        header = (f"{'Action':<12} {'Hits':>5} {'Misses':>7} "
                  f"{'Detection rate (%)':>19} {'Avg response (ms)':>18}")
        lines = [header, "-" * len(header)]
        for action, s in self.per_action.items():
            rate = s.get("detection_rate_percent")
            rate_s = f"{rate:.1f}" if rate is not None else "-"
            mean = s.get("mean_response_ms")
            mean_s = f"{mean:.1f}" if mean is not None else "-"
            lines.append(f"{action.value:<12} {s.get('hits', 0):>5} "
                         f"{s.get('misses', 0):>7} {rate_s:>19} {mean_s:>18}")
        return "\n".join(lines)


def run_session(stream, bindings: Bindings, adapter, script=None,
                clock=None) -> SessionReport:
    """Feed a gesture event stream through the controller.

    Every emitted action goes to the adapter and is timed on the session
    clock.  With a trial script, a trial is a hit iff its expected action
    fired successfully inside [window_start_ms, window_end_ms] event time.
    Adapter failures are recorded and the session continues.
    """
    clock = clock or MonotonicClock()
    state = ControllerState()
    report = SessionReport()
    fired = []  # (t_ms event time, action, response_ms, ok)
    for event in stream:
        report.event_count += 1
        action, state = step(state, event, bindings)
        if action is None:
            continue
        t0 = clock.now_ms()
        ok = True
        try:
            adapter.send(action)
        except AdapterError as exc:
            ok = False
            report.errors.append(f"t={event.t_ms}ms {action.value}: {exc}")
        response = clock.now_ms() - t0
        fired.append((event.t_ms, action, response, ok))

    actions = sorted({a for _, a, _, _ in fired} |
                     ({t.expected_action for t in script} if script else set()),
                     key=lambda a: a.value)
    for action in actions:
        times = [r for _, a, r, ok in fired if a is action and ok]
        stats = {
            "firings": sum(1 for _, a, _, _ in fired if a is action),
            "mean_response_ms": (sum(times) / len(times)) if times else None,
            "p95_response_ms": (sorted(times)[max(0, int(0.95 * len(times)) - 1)]
                                if times else None),
        }
        if script:
            trials = [t for t in script if t.expected_action is action]
            hits = sum(
                1 for t in trials
                if any(a is action and ok
                       and t.window_start_ms <= tm <= t.window_end_ms
                       for tm, a, _, ok in fired))
            stats["hits"] = hits
            stats["misses"] = len(trials) - hits
            total = hits + stats["misses"]
            stats["detection_rate_percent"] = (100.0 * hits / total
                                               if total else None)
        report.per_action[action] = stats
    return report


# ---------------------------------------------------------------------------
# file interfaces


def load_event_stream(path):
    """JSONL: {"t_ms": int, "class": str, "conf": float} per line."""
    events = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                events.append(GestureEvent(int(obj["t_ms"]), str(obj["class"]),
                                           float(obj.get("conf", 1.0))))
            except (KeyError, ValueError, TypeError) as exc:
                raise StreamError(f"{path}:{line_no}: bad event: {exc}") from exc
    return events


def load_bindings(path) -> tuple:
    """JSON config: bindings, cooldowns, and optional command templates.

    Returns (Bindings, templates dict or None).
    """
    with open(path) as fh:
        doc = json.load(fh)
    try:
        by_label = {}
        for label, spec in doc["bindings"].items():
            by_label[label] = BoundAction(
                PlayerAction(spec["action"]), spec["kind"],
                int(spec.get("cooldown_ms", DEFAULT_COOLDOWN_MS)))
        bindings = Bindings(by_label,
                            float(doc.get("confidence_gate",
                                          DEFAULT_CONFIDENCE_GATE)))
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"{path}: bad bindings config: {exc}") from exc
    return bindings, doc.get("commands")


def load_trial_script(path):
    """JSON list of {expected_action, window_start_ms, window_end_ms}."""
    with open(path) as fh:
        doc = json.load(fh)
    try:
        return [Trial(PlayerAction(t["expected_action"]),
                      int(t["window_start_ms"]), int(t["window_end_ms"]))
                for t in doc]
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"{path}: bad trial script: {exc}") from exc
