"""Closed-loop decision logic: output filtering, stop decision, braking
envelope, and the obstacle-reaction experiment.

The collision probability is low-pass filtered (p_k = (1-a) p_{k-1} + a c_k,
a = 0.7) and a stop command fires when the filtered value strictly exceeds
0.7.  Braking uses a constant-deceleration point mass back-solved from a
0.7 m stop at 4 m/s; because a 400 ms minimum stopping time is inconsistent
with that distance under constant deceleration, the simulator uses the
conservative envelope (the larger of the two implied stopping distances).

The bundled reference trace models detector confidence ramping up over the
last half second of approach, standing in for recorded flight data.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

ALPHA = 0.7
STOP_THRESHOLD = 0.7
BRAKE_DISTANCE_M = 0.7       # at the 4 m/s reference approach speed
REFERENCE_SPEED = 4.0
DEFAULT_DECEL = REFERENCE_SPEED ** 2 / (2 * BRAKE_DISTANCE_M)   # 11.43 m/s^2
MIN_STOP_TIME_S = 0.4

_TRACE_CSV = Path(__file__).parent / "data" / "reaction_trace.csv"


def filter_step(p_prev: float, c_k: float, alpha: float = ALPHA) -> float:
    """One low-pass update: exact convex combination of state and sample."""
    if not (0.0 <= p_prev <= 1.0 and 0.0 <= c_k <= 1.0):
        raise ValueError(f"probabilities out of [0,1]: p={p_prev}, c={c_k}")
    if not (0.0 < alpha <= 1.0):
        raise ValueError(f"alpha out of (0,1]: {alpha}")
    return (1.0 - alpha) * p_prev + alpha * c_k


def stop_decision(p_k: float, threshold: float = STOP_THRESHOLD) -> bool:
    return p_k > threshold


def velocity_command(p_k: float, v_max: float) -> float:
    """Forward speed modulated linearly by collision probability."""
    if not 0.0 <= p_k <= 1.0:
        raise ValueError(f"probability out of [0,1]: {p_k}")
    return max(0.0, v_max * (1.0 - p_k))


def yaw_command(theta_filtered: float, gain: float = 1.0) -> float:
    return gain * theta_filtered


def braking_envelope(v: float, decel: float = DEFAULT_DECEL) -> tuple[float, float]:
    """Constant-deceleration stop: (time, distance)."""
    if v < 0 or decel <= 0:
        raise ValueError("speed must be >= 0 and deceleration > 0")
    return v / decel, v * v / (2.0 * decel)


def stopping_distance(v: float, decel: float = DEFAULT_DECEL,
                      t_min: float = MIN_STOP_TIME_S) -> float:
    """Conservative stop distance: constant-deceleration estimate or the
    distance covered while stopping over t_min, whichever is larger."""
    _, d = braking_envelope(v, decel)
    return max(d, 0.5 * v * t_min)


@dataclass
class CollisionTrace:
    """Zero-order-hold collision-probability signal c(t)."""

    times: list[float]
    values: list[float]

    def __post_init__(self):
        if len(self.times) != len(self.values) or not self.times:
            raise ValueError("trace needs matching, non-empty times and values")
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise ValueError("trace timestamps must be strictly increasing")

    @property
    def horizon(self) -> float:
        return self.times[-1]

    def sample(self, t: float) -> float:
        if t < self.times[0]:
            return self.values[0]
        lo, hi = 0, len(self.times) - 1
        while lo < hi:
            mid = (lo + hi + 1) // 2
            if self.times[mid] <= t:
                lo = mid
            else:
                hi = mid - 1
        return self.values[lo]


def step_trace(t_appear: float, horizon: float = 20.0) -> CollisionTrace:
    """Clean step: 0 before the obstacle appears, 1 from then on."""
    return CollisionTrace([0.0, t_appear, horizon], [0.0, 1.0, 1.0])


def ramp_trace(t_appear: float, ramp_s: float = 0.5, horizon: float = 20.0,
               dt: float = 1e-3) -> CollisionTrace:
    """Detector confidence ramping linearly to 1 over ramp_s after appearance."""
    times, values = [0.0], [0.0]
    n = int(round(ramp_s / dt))
    for i in range(1, n + 1):
        times.append(t_appear + i * dt)
        values.append(min(1.0, i * dt / ramp_s))
    times.append(horizon)
    values.append(1.0)
    return CollisionTrace(times, values)


def load_trace(path: str) -> CollisionTrace:
    times, values = [], []
    with open(path, newline="") as f:
        for row in csv.DictReader(l for l in f if not l.startswith("#")):
            times.append(float(row["timestamp_s"]))
            values.append(float(row["c"]))
    return CollisionTrace(times, values)


def save_trace(trace: CollisionTrace, path: str) -> None:
    with open(path, "w") as f:
        f.write("timestamp_s,c\n")
        for t, c in zip(trace.times, trace.values):
            f.write(f"{t:.6f},{c:.9f}\n")


def reference_trace() -> CollisionTrace:
    return load_trace(str(_TRACE_CSV))


@dataclass
class ReactionScenario:
    """Straight-line approach with an obstacle appearing mid-flight."""

    v: float = REFERENCE_SPEED
    t_appear: float = 4.0
    distance_free: float = 4.0
    fps: float = 10.0
    inference_s: float | None = None      # defaults to one frame period
    alpha: float = ALPHA
    threshold: float = STOP_THRESHOLD
    decel: float = DEFAULT_DECEL
    t_min: float = MIN_STOP_TIME_S

    def __post_init__(self):
        if min(self.v, self.t_appear, self.distance_free, self.fps) <= 0:
            raise ValueError("scenario parameters must be positive")
        if self.inference_s is None:
            self.inference_s = 1.0 / self.fps

    @property
    def latency(self) -> float:
        """Frame exposure plus inference: age of the frame behind a decision."""
        return 1.0 / self.fps + self.inference_s

    @property
    def collision_time(self) -> float:
        return self.t_appear + self.distance_free / self.v


@dataclass
class ReactionOutcome:
    stop_cmd_time: float | None
    distance_remaining: float      # to the obstacle when the stop command fires
    stop_distance: float           # conservative braking envelope
    stopped_before_obstacle: bool
    p_history: list[tuple[float, float]] = field(default_factory=list)

    @property
    def margin(self) -> float:
        return self.distance_remaining - self.stop_distance


def simulate_reaction(scenario: ReactionScenario,
                      trace: CollisionTrace) -> ReactionOutcome:
    """Sample the trace at the frame rate, filter with the decision latency
    applied, fire the stop on a strict threshold crossing, then brake."""
    if trace.horizon < scenario.collision_time:
        raise ValueError("trace too short for the scenario horizon")
    period = 1.0 / scenario.fps
    d_stop = stopping_distance(scenario.v, scenario.decel, scenario.t_min)
    p = 0.0
    history = []
    stop_cmd = None
    k = 0
    while True:
        t_frame = k * period
        decision_t = t_frame + scenario.latency
        if t_frame > trace.horizon or decision_t > scenario.collision_time:
            break                      # commands after impact do not count
        p = filter_step(p, trace.sample(t_frame), scenario.alpha)
        history.append((decision_t, p))
        if stop_decision(p, scenario.threshold):
            stop_cmd = decision_t
            break
        k += 1
    if stop_cmd is None:
        return ReactionOutcome(None, 0.0, d_stop, False, history)
    travelled = scenario.v * (stop_cmd - scenario.t_appear)
    remaining = scenario.distance_free - travelled
    return ReactionOutcome(stop_cmd, remaining, d_stop, remaining >= d_stop,
                           history)


def step_stop_time(t_appear: float, fps: float, inference_s: float,
                   alpha: float = ALPHA,
                   threshold: float = STOP_THRESHOLD) -> float:
    """Closed-form stop time on a clean step: the filter needs n samples with
    1 - (1-alpha)^n > threshold, counted from the first frame at or after the
    appearance, plus the frame period and inference latency."""
    period = 1.0 / fps
    first = math.ceil(t_appear / period - 1e-12) * period
    n = math.ceil(math.log(1.0 - threshold) / math.log(1.0 - alpha) + 1e-12)
    if (1.0 - (1.0 - alpha) ** n) <= threshold:   # boundary: strict crossing
        n += 1
    return first + (n - 1) * period + period + inference_s


def fps_sweep(fps_list, trace: CollisionTrace, v: float = REFERENCE_SPEED,
              t_appear: float = 4.0, distance_free: float = 4.0,
              inference_s: float | None = None) -> list[dict]:
    rows = []
    for fps in fps_list:
        scen = ReactionScenario(v=v, t_appear=t_appear,
                                distance_free=distance_free, fps=fps,
                                inference_s=inference_s)
        out = simulate_reaction(scen, trace)
        rows.append({"fps": fps,
                     "stop_cmd_time": out.stop_cmd_time,
                     "distance_remaining": out.distance_remaining,
                     "stop_distance": out.stop_distance,
                     "stopped": out.stopped_before_obstacle})
    return rows


def sweep_csv(rows: list[dict]) -> str:
    lines = ["fps,stop_cmd_time_s,distance_remaining_m,stop_distance_m,result"]
    for r in rows:
        t = f"{r['stop_cmd_time']:.4f}" if r["stop_cmd_time"] is not None else ""
        lines.append(f"{r['fps']},{t},{r['distance_remaining']:.4f},"
                     f"{r['stop_distance']:.4f},"
                     f"{'stopped' if r['stopped'] else 'collision'}")
    return "\n".join(lines)
