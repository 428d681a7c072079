"""Deterministic repair-shop-style event log generator.

Cases walk a small routing graph (register -> inspect -> one of two repair
activities -> test, with a capped rework loop back to repair, then inform
-> close); activity durations are log-normal in seconds. The generator
doubles as a ground-truth oracle: the remaining-time distribution from any
reachable process state can be simulated directly, which the calibration
and baseline checks lean on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from datetime import datetime, timezone

import numpy as np

from .errors import DataError
from .eventlog import CATEGORICAL, Case, ColumnMapping, Event, EventLog

SYNTH_TIMESTAMP_FORMAT = "%Y-%m-%d %H:%M:%S.%f"

_BASE_EPOCH_MS = int(datetime(2024, 1, 1, tzinfo=timezone.utc).timestamp() * 1000)


@dataclass(frozen=True)
class ActivityTiming:
    """Log-normal duration parameters (ln-space, seconds)."""

    mu: float
    sigma: float

    def mean_s(self) -> float:
        return math.exp(self.mu + self.sigma ** 2 / 2.0)


@dataclass
class ProcessSpec:
    activities: tuple[str, ...]
    transitions: dict[str, tuple[tuple[str, float], ...]]  # empty tuple = terminal
    durations: dict[str, ActivityTiming]
    rework_source: str
    rework_target: str
    max_reworks: int
    n_cases: int
    seed: int
    weekday_only: bool = False
    resources: dict[str, tuple[tuple[str, float], ...]] = field(default_factory=dict)
    start_window_days: float = 365.0

    def validate(self) -> None:
        for act, succ in self.transitions.items():
            if succ:
                total = sum(p for _, p in succ)
                if abs(total - 1.0) > 1e-9:
                    raise DataError(f"successor probabilities of {act!r} sum to {total}")
        rework_p = dict(self.transitions.get(self.rework_source, ())).get(self.rework_target, 0.0)
        if rework_p >= 1.0:
            raise DataError("rework probability must be < 1")
        terminals = {a for a in self.activities if not self.transitions.get(a)}
        if not terminals:
            raise DataError("process has no terminal activity")
        # every activity must reach a terminal
        reaching = set(terminals)
        changed = True
        while changed:
            changed = False
            for act, succ in self.transitions.items():
                if act not in reaching and any(nxt in reaching for nxt, _ in succ):
                    reaching.add(act)
                    changed = True
        stuck = [a for a in self.activities if a not in reaching]
        if stuck:
            raise DataError(f"absorbing non-terminal activities: {stuck}")


def default_spec(n_cases: int = 9896, seed: int = 20240101) -> ProcessSpec:
    """Spec calibrated to land near the reference repair-shop summary stats
    (7 activities, 16 variants, mean case length ~8.1)."""
    q = 0.515
    return ProcessSpec(
        activities=("register", "inspect", "repair_simple", "repair_complex",
                    "test", "inform", "close"),
        transitions={
            "register": (("inspect", 1.0),),
            "inspect": (("repair_simple", 0.6), ("repair_complex", 0.4)),
            "repair_simple": (("test", 1.0),),
            "repair_complex": (("test", 1.0),),
            "test": (("repair_simple", q), ("inform", 1.0 - q)),
            "inform": (("close", 1.0),),
            "close": (),
        },
        durations={
            "register": ActivityTiming(8.757, 0.5),
            "inspect": ActivityTiming(9.800, 0.6),
            "repair_simple": ActivityTiming(9.948, 0.8),
            "repair_complex": ActivityTiming(10.779, 0.9),
            "test": ActivityTiming(9.553, 0.7),
            "inform": ActivityTiming(10.174, 1.0),
            "close": ActivityTiming(7.0, 0.5),
        },
        rework_source="test",
        rework_target="repair_simple",
        max_reworks=7,
        n_cases=n_cases,
        seed=seed,
        resources={
            "register": (("clerk", 1.0),),
            "inspect": (("tech_a", 0.5), ("tech_b", 0.5)),
            "repair_simple": (("tech_a", 0.6), ("tech_b", 0.4)),
            "repair_complex": (("tech_senior", 0.9), ("tech_b", 0.1)),
            "test": (("tech_a", 0.5), ("tech_b", 0.5)),
            "inform": (("clerk", 1.0),),
            "close": (("clerk", 1.0),),
        },
    )


def synth_mapping() -> ColumnMapping:
    return ColumnMapping(
        case_col="case_id",
        activity_col="activity",
        timestamp_col="timestamp",
        timestamp_format=SYNTH_TIMESTAMP_FORMAT,
        categorical=("resource",),
    )


def _case_rng(seed: int, case_idx: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(1, case_idx)))


def _draw(rng: np.random.Generator, dist: tuple[tuple[str, float], ...]) -> str:
    u = rng.random()
    acc = 0.0
    for label, p in dist:
        acc += p
        if u < acc:
            return label
    return dist[-1][0]


def _successor(spec: ProcessSpec, activity: str, reworks: int,
               rng: np.random.Generator) -> tuple[str, int]:
    succ = spec.transitions[activity]
    if activity == spec.rework_source and reworks >= spec.max_reworks:
        trimmed = tuple((nxt, p) for nxt, p in succ if nxt != spec.rework_target)
        total = sum(p for _, p in trimmed)
        succ = tuple((nxt, p / total) for nxt, p in trimmed)
    nxt = _draw(rng, succ)
    if activity == spec.rework_source and nxt == spec.rework_target:
        reworks += 1
    return nxt, reworks


_WEEKEND_SKIP_S = 2 * 86400.0


def _advance(epoch_s: float, dur_s: float, weekday_only: bool) -> float:
    """Advance a wall-clock epoch by a duration, optionally skipping weekends."""
    if not weekday_only:
        return epoch_s + dur_s
    t = epoch_s + dur_s
    # epoch 0 was a Thursday; day index 2 and 3 (mod 7) are Sat/Sun
    day = int(t // 86400.0)
    while (day + 4) % 7 in (2, 3):
        t += 86400.0
        day += 1
    return t


def generate(spec: ProcessSpec) -> EventLog:
    """Generate the log; byte-deterministic given the spec (incl. seed)."""
    spec.validate()
    width = max(4, len(str(spec.n_cases)))
    cases: dict[str, Case] = {}
    start_span_s = spec.start_window_days * 86400.0
    for idx in range(spec.n_cases):
        rng = _case_rng(spec.seed, idx)
        t = _BASE_EPOCH_MS / 1000.0 + rng.random() * start_span_s
        activity = spec.activities[0]
        reworks = 0
        events = []
        while True:
            res = _draw(rng, spec.resources[activity]) if spec.resources else None
            cats = (("resource", res),) if res is not None else ()
            events.append(Event(activity, int(round(t * 1000)), cats, ()))
            if not spec.transitions.get(activity):
                break
            timing = spec.durations[activity]
            dur = float(rng.lognormal(timing.mu, timing.sigma))
            t = _advance(t, dur, spec.weekday_only)
            activity, reworks = _successor(spec, activity, reworks, rng)
        case_id = f"case_{idx:0{width}d}"
        cases[case_id] = Case(case_id, tuple(events))
    schema = (("resource", CATEGORICAL),) if spec.resources else ()
    return EventLog(cases=cases, schema=schema)


def state_after(spec: ProcessSpec, activities: tuple[str, ...]) -> tuple[str, int]:
    """Replay a prefix's activity labels to a (current activity, reworks) state."""
    if not activities:
        raise DataError("empty prefix has no process state")
    if activities[0] != spec.activities[0]:
        raise DataError(f"prefix does not start at {spec.activities[0]!r}")
    reworks = 0
    for a, b in zip(activities, activities[1:]):
        succ = {nxt for nxt, _ in spec.transitions.get(a, ())}
        if b not in succ:
            raise DataError(f"transition {a!r} -> {b!r} is not part of the process")
        if a == spec.rework_source and b == spec.rework_target:
            reworks += 1
    return activities[-1], reworks


def remaining_time_distribution(spec: ProcessSpec, state: tuple[str, int],
                                n: int = 1_000_000, seed: int = 0) -> np.ndarray:
    """Monte-Carlo ground truth of remaining seconds from a process state.

    Remaining time after an event is the sum of the durations of its own
    activity and every later one until the terminal event, matching how the
    generator lays out timestamps. Terminal states give a point mass at 0.
    """
    activity, reworks = state
    if activity not in spec.activities:
        raise DataError(f"unknown activity {activity!r}")
    act_code = {a: i for i, a in enumerate(spec.activities)}
    mus = np.array([spec.durations[a].mu for a in spec.activities])
    sigmas = np.array([spec.durations[a].sigma for a in spec.activities])
    rng = np.random.default_rng(np.random.SeedSequence(entropy=spec.seed,
                                                       spawn_key=(2, seed)))
    cur = np.full(n, act_code[activity], dtype=np.int64)
    rew = np.full(n, reworks, dtype=np.int64)
    total = np.zeros(n, dtype=np.float64)
    alive = np.array([bool(spec.transitions.get(activity))] * n)
    while alive.any():
        idx = np.flatnonzero(alive)
        codes = cur[idx]
        z = rng.standard_normal(idx.size)
        total[idx] += np.exp(mus[codes] + sigmas[codes] * z)
        u = rng.random(idx.size)
        nxt = np.empty(idx.size, dtype=np.int64)
        for code in np.unique(codes):
            a = spec.activities[code]
            rows = codes == code
            if a == spec.rework_source:
                capped = rew[idx[rows]] >= spec.max_reworks
                nxt[rows] = _vector_draw(spec, a, u[rows], capped, act_code)
                took = nxt[rows] == act_code[spec.rework_target]
                rew[idx[rows]] += took.astype(np.int64)
            else:
                nxt[rows] = _vector_draw(spec, a, u[rows], None, act_code)
        cur[idx] = nxt
        has_succ = np.array([bool(spec.transitions.get(spec.activities[c])) for c in nxt])
        alive[idx] = has_succ
    return total


def _vector_draw(spec: ProcessSpec, activity: str, u: np.ndarray,
                 capped: np.ndarray | None, act_code: dict[str, int]) -> np.ndarray:
    succ = spec.transitions[activity]
    out = np.empty(u.shape, dtype=np.int64)

    def fill(rows: np.ndarray, dist):
        cum = np.cumsum([p for _, p in dist])
        codes = np.array([act_code[nxt] for nxt, _ in dist])
        pos = np.searchsorted(cum, u[rows], side="right")
        pos = np.minimum(pos, len(dist) - 1)
        out[rows] = codes[pos]

    if capped is None:
        fill(np.ones(u.shape, dtype=bool), succ)
    else:
        trimmed = tuple((nxt, p) for nxt, p in succ if nxt != spec.rework_target)
        total = sum(p for _, p in trimmed)
        trimmed = tuple((nxt, p / total) for nxt, p in trimmed)
        if (~capped).any():
            fill(~capped, succ)
        if capped.any():
            fill(capped, trimmed)
    return out


def expected_case_length(spec: ProcessSpec) -> float:
    """Analytic expected case length via the rework-count-expanded chain.

    States are (activity, reworks); expected visit counts solve the usual
    absorbing-chain system, and case length is the total expected visits.
    """
    states = [(a, r) for a in spec.activities for r in range(spec.max_reworks + 1)]
    index = {s: i for i, s in enumerate(states)}
    n = len(states)
    p = np.zeros((n, n))
    for (a, r), i in index.items():
        succ = spec.transitions.get(a, ())
        if not succ:
            continue
        if a == spec.rework_source and r >= spec.max_reworks:
            trimmed = tuple((nxt, pr) for nxt, pr in succ if nxt != spec.rework_target)
            total = sum(pr for _, pr in trimmed)
            succ = tuple((nxt, pr / total) for nxt, pr in trimmed)
        for nxt, pr in succ:
            r2 = r + 1 if (a == spec.rework_source and nxt == spec.rework_target) else r
            p[i, index[(nxt, min(r2, spec.max_reworks))]] += pr
    transient = [i for (a, r), i in index.items() if spec.transitions.get(a)]
    q = p[np.ix_(transient, transient)]
    # expected visits from the start state: solve (I - Q^T) v = e_start
    e = np.zeros(len(transient))
    e[transient.index(index[(spec.activities[0], 0)])] = 1.0
    visits = np.linalg.solve(np.eye(len(transient)) - q.T, e)
    return float(visits.sum()) + 1.0  # plus the single terminal visit


def spec_to_json(spec: ProcessSpec) -> dict:
    d = asdict(spec)
    d["transitions"] = {k: [[nxt, p] for nxt, p in v] for k, v in spec.transitions.items()}
    d["durations"] = {k: [t.mu, t.sigma] for k, t in spec.durations.items()}
    d["resources"] = {k: [[lbl, p] for lbl, p in v] for k, v in spec.resources.items()}
    d["activities"] = list(spec.activities)
    return d


def spec_from_json(d: dict) -> ProcessSpec:
    return ProcessSpec(
        activities=tuple(d["activities"]),
        transitions={k: tuple((nxt, float(p)) for nxt, p in v)
                     for k, v in d["transitions"].items()},
        durations={k: ActivityTiming(float(m), float(s))
                   for k, (m, s) in d["durations"].items()},
        rework_source=d["rework_source"],
        rework_target=d["rework_target"],
        max_reworks=int(d["max_reworks"]),
        n_cases=int(d["n_cases"]),
        seed=int(d["seed"]),
        weekday_only=bool(d.get("weekday_only", False)),
        resources={k: tuple((lbl, float(p)) for lbl, p in v)
                   for k, v in d.get("resources", {}).items()},
        start_window_days=float(d.get("start_window_days", 365.0)),
    )
