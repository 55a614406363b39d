"""Coordination of the city planner and region planners over simulator events.

Two trigger modes. "ours": the city planner fires on detected region-level
rate changes (at least min_hlp_interval_s apart) and region planners fire for
the dispatch region after each dispatch, or for every region after a city
redistribution. "baseline": city and all region planners fire on every
incident and after idle timeouts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .features import NoiseModel, arrival_time, hlp_observation, region_observation
from .geo import ScenarioWorld, region_rate
from .optim import min_cost_flow_assign
from .sim import Event, Simulator


@dataclass(frozen=True)
class TriggerPolicy:
    mode: str = "ours"                   # "ours" | "baseline"
    min_hlp_interval_s: float = 3600.0
    idle_timeout_s: float = 3600.0

    def __post_init__(self):
        if self.mode not in ("ours", "baseline"):
            raise ValueError(f"unknown trigger mode {self.mode}")
        if self.min_hlp_interval_s <= 0 or self.idle_timeout_s <= 0:
            raise ValueError("trigger intervals must be positive")


def apply_hlp_counts(sim: Simulator, counts_new: dict[int, int]) -> set[int]:
    """Move responders between regions to hit the new counts at min travel cost.

    Busy responders may be selected; their physical move defers to release.
    Returns the set of regions whose membership changed."""
    world = sim.world
    counts_prev = sim.region_counts()
    if counts_prev == counts_new:
        return set()
    responder_regions = {rid: r.region for rid, r in sim.responders.items()}
    responder_depots = {rid: r.depot for rid, r in sim.responders.items()}
    region_depots = {g: world.region_depots(g) for g in world.seg.region_ids}

    def phi(rid: int, depot_id: int) -> float:
        return arrival_time(sim.responders[rid], depot_id, sim.now, world)

    moves = min_cost_flow_assign(counts_prev, counts_new, responder_regions,
                                 responder_depots, region_depots, phi)
    region_moves = {rid: (world.seg.depot_regions[d], d) for rid, d in moves.items()}
    affected = sim.apply_region_moves(region_moves)
    if sim.region_counts() != counts_new:
        raise RuntimeError("redistribution did not reach the requested counts")
    return affected


class HierarchyController:
    """Drives planners from simulator events per the configured trigger mode.

    region_planner: object with plan_region(sim, region, rng) -> {rid: depot}
    hlp_planner:    optional object with plan_counts(sim, rng) -> {region: count}
    Hooks (when set) observe each decision, e.g. to collect training data.
    """

    def __init__(self, world: ScenarioWorld, trigger: TriggerPolicy,
                 region_planner, hlp_planner=None, seed: int = 0):
        self.world = world
        self.trigger = trigger
        self.region_planner = region_planner
        self.hlp_planner = hlp_planner
        self.rng = np.random.default_rng(seed)
        self.llp_hook = None
        self.hlp_hook = None
        self.hlp_cycle_hook = None   # fires after redistribution + follow-up LLPs
        self.episode_end_hook = None
        self._last_hlp_t = None
        self._prev_rates: tuple | None = None

    # -- simulator callbacks --

    def begin_episode(self, sim: Simulator):
        self._last_hlp_t = None
        self._prev_rates = self._region_rates(0.0)
        for g in self.world.seg.region_ids:
            self._invoke_llp(sim, g, Event("episode_start", 0.0))

    def end_episode(self, sim: Simulator):
        if self.episode_end_hook is not None:
            self.episode_end_hook(sim)

    def on_event(self, sim: Simulator, event: Event):
        if self.trigger.mode == "ours":
            self._on_event_ours(sim, event)
        else:
            self._on_event_baseline(sim, event)

    # -- trigger logic --

    def _on_event_ours(self, sim: Simulator, event: Event):
        if event.kind in ("incident", "release"):
            dispatch = getattr(sim, "last_dispatch", None)
            if dispatch is not None and dispatch.t == sim.now:
                self._invoke_llp(sim, dispatch.region, event)
        elif event.kind == "rate_change":
            cur = self._region_rates(sim.now)
            changed = cur != self._prev_rates
            self._prev_rates = cur
            if not changed or self.hlp_planner is None:
                return
            if (self._last_hlp_t is not None
                    and sim.now - self._last_hlp_t < self.trigger.min_hlp_interval_s):
                return
            self._last_hlp_t = sim.now
            moved = self._invoke_hlp(sim, event)
            if moved:
                for g in self.world.seg.region_ids:
                    self._invoke_llp(sim, g, event)
            if self.hlp_cycle_hook is not None:
                self.hlp_cycle_hook(sim, event)
            sim.reset_idle_timer()

    def _on_event_baseline(self, sim: Simulator, event: Event):
        if event.kind in ("incident", "idle_tick"):
            if self.hlp_planner is not None:
                self._invoke_hlp(sim, event)
            for g in self.world.seg.region_ids:
                self._invoke_llp(sim, g, event)
            if event.kind != "incident":
                sim.reset_idle_timer()

    # -- invocation helpers --

    def _region_rates(self, t: float) -> tuple:
        return tuple(region_rate(self.world.seg, self.world.rates, g, t)
                     for g in self.world.seg.region_ids)

    def _invoke_llp(self, sim: Simulator, region: int, event: Event):
        if not sim.region_responders(region):
            return
        assignment = self.region_planner.plan_region(sim, region, self.rng)
        if assignment:
            sim.apply_depot_moves(assignment)
        if self.llp_hook is not None:
            self.llp_hook(sim, region, event)

    def _invoke_hlp(self, sim: Simulator, event: Event) -> bool:
        counts_new = self.hlp_planner.plan_counts(sim, self.rng)
        if counts_new is None:
            return False
        affected = apply_hlp_counts(sim, counts_new)
        if self.hlp_hook is not None:
            self.hlp_hook(sim, event)
        return bool(affected)


class DdpgPlanner:
    """Greedy (evaluation-mode) planner over trained agents."""

    def __init__(self, llp_agents: dict, hlp_agent=None,
                 noise: NoiseModel | None = None, explore: bool = False):
        self.llp_agents = llp_agents
        self.hlp_agent = hlp_agent
        self.noise = noise
        self.explore = explore
        self.last_llp_action: dict[int, tuple] = {}

    def plan_region(self, sim: Simulator, region: int, rng) -> dict[int, int]:
        agent = self.llp_agents[region]
        obs = region_observation(sim.responders, region, sim.now, sim.world,
                                 self.noise, rng)
        likelihoods, assignment = agent.act(obs, self.explore, rng)
        self.last_llp_action[region] = (obs, likelihoods)
        return assignment

    def plan_counts(self, sim: Simulator, rng) -> dict[int, int] | None:
        if self.hlp_agent is None:
            return None
        world = sim.world
        counts = sim.region_counts()
        rates = {g: region_rate(world.seg, world.rates, g, sim.now)
                 for g in world.seg.region_ids}
        obs = hlp_observation(rates, counts, len(sim.responders), world.rate_scale,
                              self.noise, rng)
        caps = world.region_caps()
        region_ids = sorted(caps)
        _, count_arr = self.hlp_agent.act(obs, len(sim.responders),
                                          [caps[g] for g in region_ids],
                                          self.explore, rng)
        return {g: int(c) for g, c in zip(region_ids, count_arr)}
