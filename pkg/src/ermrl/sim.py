"""Continuous-time discrete-event dispatch simulator.

Implements the operational model: Poisson incident arrivals, mandatory
nearest-available dispatch, FIFO waiting queue, fixed on-scene service,
transport to the nearest hospital, and return to the assigned depot. Planner
hooks are invoked on decision events and reposition responders through the
simulator's apply methods.
"""

from __future__ import annotations

import csv
import heapq
import time as _time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .geo import RateModel, ScenarioWorld


class SimLogicError(RuntimeError):
    """Internal consistency violation in the simulator."""


@dataclass(frozen=True)
class LocationTrack:
    """One movement leg; stationary iff origin == destination."""
    origin: int
    destination: int
    depart_t: float
    arrive_t: float

    def __post_init__(self):
        if self.depart_t > self.arrive_t:
            raise SimLogicError("leg must not arrive before departing")

    @classmethod
    def at(cls, cell: int, t: float) -> "LocationTrack":
        return cls(cell, cell, t, t)

    @property
    def stationary(self) -> bool:
        return self.origin == self.destination


def eta_to_cell(track: LocationTrack, target: int, t: float, world: ScenarioWorld) -> tuple[int, float]:
    """Effective position and time-to-target for an en-route responder.

    Midpoint rule: in the first half of the leg the responder counts as still
    at the origin (minus time already spent, floored at zero); in the second
    half it counts as committed to the destination and pays the residual ride
    plus the onward travel time evaluated at its arrival instant.
    """
    travel = world.travel
    if t <= track.depart_t or track.stationary:
        return track.origin, travel.travel_time(track.origin, target, t)
    if t >= track.arrive_t:
        return track.destination, travel.travel_time(track.destination, target, t)
    elapsed = t - track.depart_t
    total = track.arrive_t - track.depart_t
    if elapsed < total / 2:
        eta = max(travel.travel_time(track.origin, target, t) - elapsed, 0.0)
        return track.origin, eta
    onward = travel.travel_time(track.destination, target, track.arrive_t)
    return track.destination, (track.arrive_t - t) + onward


@dataclass
class ResponderState:
    id: int
    depot: int
    region: int
    track: LocationTrack
    incident: int | None = None      # incident cell while serving
    hospital: int | None = None
    t_avail: float | None = None
    move_token: int = 0              # invalidates superseded depot-arrival events

    @property
    def available(self) -> bool:
        return self.incident is None

    def check(self):
        busy_fields = (self.incident is not None, self.hospital is not None, self.t_avail is not None)
        if len(set(busy_fields)) != 1:
            raise SimLogicError("incident/hospital/t_avail must be all set or all empty")


@dataclass(frozen=True)
class Incident:
    id: int
    cell: int
    report_t: float


@dataclass(frozen=True)
class IncidentChain:
    incidents: tuple[tuple[float, int], ...]  # (report_t_s, cell_id), time-sorted
    horizon_s: float
    seed: int

    def __post_init__(self):
        ts = [t for t, _ in self.incidents]
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise ValueError("chain incidents must be time-sorted")
        if ts and (ts[0] < 0 or ts[-1] > self.horizon_s):
            raise ValueError("chain incidents must fall within the horizon")


def sample_chain(rates: RateModel, horizon_s: float, seed: int) -> IncidentChain:
    """Draw one incident realization: per cell and bucket window, a Poisson
    count with uniform times inside the window."""
    if horizon_s <= 0:
        raise ValueError("horizon must be positive")
    rng = np.random.default_rng(seed)
    events: list[tuple[float, int]] = []
    dur = rates.bucket_duration_s
    start = 0.0
    while start < horizon_s:
        end = min(start + dur, horizon_s)
        lam = rates.rates_at(start)  # incidents/hour
        expected = lam * (end - start) / 3600.0
        counts = rng.poisson(expected)
        for cell in np.flatnonzero(counts):
            ts = rng.uniform(start, end, size=int(counts[cell]))
            events.extend((float(t), int(cell)) for t in ts)
        start = end
    events.sort()
    return IncidentChain(tuple(events), horizon_s, seed)


def write_chain_csv(chain: IncidentChain, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["report_t_s", "cell_id"])
        for t, c in chain.incidents:
            w.writerow([repr(t), c])


def read_chain_csv(path, horizon_s: float, seed: int = -1) -> IncidentChain:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    incidents = tuple((float(r["report_t_s"]), int(r["cell_id"])) for r in rows)
    return IncidentChain(incidents, horizon_s, seed)


@dataclass(frozen=True)
class SimConfig:
    t_serve_s: float = 1200.0
    idle_timeout_s: float | None = None  # emit idle ticks when set

    def __post_init__(self):
        if self.t_serve_s <= 0:
            raise ValueError("t_serve_s must be positive")


# event kinds, in processing order at equal timestamps
_PRIORITY = {"release": 0, "depot_arrival": 1, "rate_change": 2, "incident": 3, "idle_tick": 4}


@dataclass(frozen=True)
class Event:
    kind: str
    t: float
    responder: int | None = None
    incident: Incident | None = None
    token: int | None = None


@dataclass(frozen=True)
class DispatchRecord:
    t: float
    incident_id: int
    responder: int
    region: int
    response_s: float


@dataclass
class EpisodeResult:
    response_log: list[tuple[int, float, float]]  # (incident id, report_t_s, response_s)
    horizon_s: float
    decision_latency: list[tuple[str, float]] = field(default_factory=list)

    @property
    def n_incidents(self) -> int:
        return len(self.response_log)

    @property
    def mean_response_s(self) -> float | None:
        if not self.response_log:
            return None
        return float(np.mean([r for _, _, r in self.response_log]))

    def percentile(self, q: float) -> float | None:
        if not self.response_log:
            return None
        return float(np.percentile([r for _, _, r in self.response_log], q))

    def summary(self) -> dict:
        lats = [dt for _, dt in self.decision_latency]
        return {
            "n_incidents": self.n_incidents,
            "mean_response_s": self.mean_response_s,
            "p50_response_s": self.percentile(50),
            "p90_response_s": self.percentile(90),
            "decision_count": len(lats),
            "decision_latency_mean_s": float(np.mean(lats)) if lats else None,
            "decision_latency_max_s": float(np.max(lats)) if lats else None,
        }

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["incident_id", "report_t_s", "response_time_s"])
            for iid, rt, resp in self.response_log:
                w.writerow([iid, repr(rt), repr(resp)])


class Simulator:
    """One episode: an isolated, single-threaded state machine."""

    def __init__(self, world: ScenarioWorld, chain: IncidentChain,
                 config: SimConfig, controller=None,
                 initial_assignment: dict[int, int] | None = None,
                 n_responders: int | None = None):
        self.world = world
        self.chain = chain
        self.cfg = config
        self.controller = controller
        self.now = 0.0
        self.queue: deque[Incident] = deque()
        self.response_log: list[tuple[int, float, float]] = []
        self.decision_latency: list[tuple[str, float]] = []
        self._heap: list[tuple[float, int, int, Event]] = []
        self._seq = 0
        self._served = 0
        self._last_quiet_t = 0.0
        self.last_dispatch: DispatchRecord | None = None

        if initial_assignment is None:
            initial_assignment = default_initial_assignment(world, n_responders)
        self.responders: dict[int, ResponderState] = {}
        for rid, depot in sorted(initial_assignment.items()):
            cell = world.depots[depot].cell
            region = world.seg.depot_regions[depot]
            self.responders[rid] = ResponderState(rid, depot, region, LocationTrack.at(cell, 0.0))
        self._check_capacity()

        for i, (t, cell) in enumerate(chain.incidents):
            self._push(Event("incident", t, incident=Incident(i, cell, t)))
        dur = world.rates.bucket_duration_s
        t = float(dur)
        while t <= chain.horizon_s:
            self._push(Event("rate_change", t))
            t += dur
        if config.idle_timeout_s:
            self._push(Event("idle_tick", config.idle_timeout_s))

    # -- event plumbing --

    def _push(self, ev: Event):
        self._seq += 1
        heapq.heappush(self._heap, (ev.t, _PRIORITY[ev.kind], self._seq, ev))

    def run(self) -> EpisodeResult:
        if self.controller is not None and hasattr(self.controller, "begin_episode"):
            self.controller.begin_episode(self)
        last_t = 0.0
        while self._heap:
            # run to the horizon; past it, only drain outstanding service work
            if self._heap[0][0] > self.chain.horizon_s:
                if (self._served >= len(self.chain.incidents)
                        and all(r.available for r in self.responders.values())):
                    break
            t, _, _, ev = heapq.heappop(self._heap)
            if t < last_t:
                raise SimLogicError("event clock moved backwards")
            last_t = t
            self.now = t
            self._handle(ev)
        if self._served < len(self.chain.incidents):
            raise SimLogicError("event calendar exhausted with incidents unserved")
        if self.controller is not None and hasattr(self.controller, "end_episode"):
            self.controller.end_episode(self)
        return EpisodeResult(self.response_log, self.chain.horizon_s, self.decision_latency)

    def _handle(self, ev: Event):
        if ev.kind == "incident":
            self._last_quiet_t = ev.t
            self.dispatch(ev.incident)
            self._notify(ev)
            if self.cfg.idle_timeout_s:
                self._push(Event("idle_tick", ev.t + self.cfg.idle_timeout_s))
        elif ev.kind == "release":
            r = self.responders[ev.responder]
            if r.t_avail is None or r.t_avail != ev.t:
                raise SimLogicError(f"responder {ev.responder} released off schedule")
            self.release(ev.responder)
            self._notify(ev)
        elif ev.kind == "depot_arrival":
            self._settle_arrival(ev)
        elif ev.kind == "rate_change":
            self._notify(ev)
        elif ev.kind == "idle_tick":
            if ev.t != self._last_quiet_t + self.cfg.idle_timeout_s:
                return  # stale tick; a fresher one is scheduled
            if ev.t > self.chain.horizon_s:
                return
            self._last_quiet_t = ev.t
            self._notify(ev)
            self._push(Event("idle_tick", ev.t + self.cfg.idle_timeout_s))
        else:
            raise SimLogicError(f"unknown event kind {ev.kind}")

    def _notify(self, ev: Event):
        if self.controller is None:
            return
        t0 = _time.perf_counter()
        self.controller.on_event(self, ev)
        self.decision_latency.append((ev.kind, _time.perf_counter() - t0))

    def reset_idle_timer(self):
        """Controllers call this when they invoke planners outside incident events."""
        if self.cfg.idle_timeout_s:
            self._last_quiet_t = self.now
            self._push(Event("idle_tick", self.now + self.cfg.idle_timeout_s))

    # -- core operations --

    def dispatch(self, incident: Incident) -> int | None:
        """Send the nearest available responder, else queue the incident FIFO."""
        best_rid, best_eta = None, None
        for rid in sorted(self.responders):
            r = self.responders[rid]
            if not r.available:
                continue
            _, eta = eta_to_cell(r.track, incident.cell, self.now, self.world)
            if best_eta is None or eta < best_eta:
                best_rid, best_eta = rid, eta
        if best_rid is None:
            self.queue.append(incident)
            return None
        self._assign_to_incident(best_rid, incident, best_eta)
        return best_rid

    def _assign_to_incident(self, rid: int, incident: Incident, eta: float):
        r = self.responders[rid]
        scene_arrival = self.now + eta
        response = scene_arrival - incident.report_t
        if response < 0:
            raise SimLogicError("negative response time")
        self.response_log.append((incident.id, incident.report_t, response))
        self._served += 1
        self.last_dispatch = DispatchRecord(self.now, incident.id, rid, r.region, response)
        depart_scene = scene_arrival + self.cfg.t_serve_s
        hospital = self.world.nearest_hospital(incident.cell, depart_scene)
        h_cell = self.world.hospitals[hospital].cell
        t_avail = depart_scene + self.world.travel.travel_time(incident.cell, h_cell, depart_scene)
        start_cell, _ = eta_to_cell(r.track, incident.cell, self.now, self.world)
        r.incident = incident.cell
        r.hospital = hospital
        r.t_avail = t_avail
        r.move_token += 1
        r.track = LocationTrack(start_cell, incident.cell, self.now, scene_arrival)
        r.check()
        self._push(Event("release", t_avail, responder=rid))

    def release(self, rid: int):
        """Drop-off complete: take the queue head or head back to the depot."""
        r = self.responders[rid]
        h_cell = self.world.hospitals[r.hospital].cell
        r.incident = None
        r.hospital = None
        r.t_avail = None
        r.move_token += 1
        r.track = LocationTrack.at(h_cell, self.now)
        r.check()
        if self.queue:
            incident = self.queue.popleft()
            eta = self.world.travel.travel_time(h_cell, incident.cell, self.now)
            self._assign_to_incident(rid, incident, eta)
        else:
            self._send_to_depot(rid)

    def _send_to_depot(self, rid: int):
        r = self.responders[rid]
        depot_cell = self.world.depots[r.depot].cell
        start_cell, eta = eta_to_cell(r.track, depot_cell, self.now, self.world)
        if eta > 0:
            r.track = LocationTrack(start_cell, depot_cell, self.now, self.now + eta)
            self._push(Event("depot_arrival", self.now + eta, responder=rid,
                             token=r.move_token))
        else:
            r.track = LocationTrack.at(depot_cell, self.now)

    def _settle_arrival(self, ev: Event):
        r = self.responders[ev.responder]
        if ev.token != r.move_token or not r.available:
            return  # superseded by a later retasking
        r.track = LocationTrack.at(r.track.destination, self.now)

    # -- planner-facing mutations --

    def apply_depot_moves(self, moves: dict[int, int]):
        """Reassign waiting depots; available responders reroute immediately,
        busy responders pick the new depot up at release."""
        for rid in sorted(moves):
            depot = moves[rid]
            r = self.responders[rid]
            if r.depot == depot:
                continue
            r.depot = depot
            if r.available:
                r.move_token += 1
                self._send_to_depot(rid)
        self._check_capacity()

    def apply_region_moves(self, moves: dict[int, tuple[int, int]]):
        """HLP reallocation: each entry moves a responder to (region, depot)."""
        affected: set[int] = set()
        for rid in sorted(moves):
            region, depot = moves[rid]
            r = self.responders[rid]
            affected.add(r.region)
            affected.add(region)
            r.region = region
            r.depot = depot
            if r.available:
                r.move_token += 1
                self._send_to_depot(rid)
        self._check_capacity()
        return affected

    def _check_capacity(self):
        depots = [r.depot for r in self.responders.values()]
        if len(set(depots)) != len(depots):
            raise SimLogicError("two responders assigned to one depot")
        for r in self.responders.values():
            if self.world.seg.depot_regions[r.depot] != r.region:
                raise SimLogicError("responder depot outside its region")

    def region_counts(self) -> dict[int, int]:
        counts = {g: 0 for g in self.world.seg.region_ids}
        for r in self.responders.values():
            counts[r.region] += 1
        return counts

    def region_responders(self, region: int) -> list[int]:
        return sorted(rid for rid, r in self.responders.items() if r.region == region)


def default_initial_assignment(world: ScenarioWorld, n_responders: int | None = None) -> dict[int, int]:
    """Spread responders over regions proportionally to initial region rates,
    then fill each region's lowest-id depots."""
    from .optim import greedy_redistribute

    caps = world.region_caps()
    region_ids = sorted(caps)
    if n_responders is None:
        n_responders = len(world.depots)
    rates0 = np.array([
        sum(world.rates.rates_at(0.0)[c] for c in world.seg.region_cells[g])
        for g in region_ids
    ])
    p = rates0 / rates0.sum() if rates0.sum() > 0 else np.ones(len(region_ids)) / len(region_ids)
    counts = greedy_redistribute(p, n_responders, [caps[g] for g in region_ids])
    assignment: dict[int, int] = {}
    rid = 0
    for g, count in zip(region_ids, counts):
        for depot in world.seg.region_depots(g)[: int(count)]:
            assignment[rid] = depot
            rid += 1
    return assignment


def run_episode(world: ScenarioWorld, chain: IncidentChain, controller,
                config: SimConfig, initial_assignment: dict[int, int] | None = None,
                n_responders: int | None = None) -> EpisodeResult:
    sim = Simulator(world, chain, config, controller, initial_assignment, n_responders)
    return sim.run()
