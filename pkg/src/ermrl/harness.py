"""Experiment orchestration: training loops, evaluation, statistics, sweeps.

Training follows the published recipe: each region agent trains alone on its
own incidents with a binomially resampled fleet, acting at every incident or
hourly lull and learning from the negated response time of the next incident;
the city agent trains afterwards against the frozen region critics, acting at
region-level rate changes. Evaluation replays held-out chains and records
wall-clock latency per decision.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .agents import (DdpgConfig, HlpAgent, HlpTransition, LlpAgent,
                     LlpTransition, hlp_reward, reward_from_response,
                     sample_hlp_fleet, sample_llp_fleet)
from .baselines import BaselineRegionPlanner, MctsConfig
from .features import NoiseModel, hlp_observation, region_observation
from .geo import ScenarioWorld, load_world, region_rate
from .hierarchy import DdpgPlanner, HierarchyController, TriggerPolicy
from .sim import (EpisodeResult, IncidentChain, SimConfig, Simulator,
                  run_episode, sample_chain)


# --- statistics ---------------------------------------------------------------

_EXACT_LIMIT = 2 ** 20


def permutation_test(xs, ys, n_perms: int = 100_000, seed: int = 0) -> float:
    """Two-sided paired permutation test on the difference of means.

    Signs of the paired differences are flipped; exact enumeration when the
    2^n patterns fit the budget, otherwise Monte Carlo with the add-one
    estimator (so p is never reported as 0).
    """
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.shape != ys.shape or xs.ndim != 1 or len(xs) < 2:
        raise ValueError("need two equal-length samples with at least 2 pairs")
    diffs = xs - ys
    n = len(diffs)
    observed = abs(diffs.mean())
    tol = 1e-12
    if 2 ** n <= _EXACT_LIMIT:
        count = 0
        total = 2 ** n
        chunk = 1 << 14
        for start in range(0, total, chunk):
            idx = np.arange(start, min(start + chunk, total))[:, None]
            signs = 1 - 2 * ((idx >> np.arange(n)) & 1)
            means = np.abs((signs * diffs).mean(axis=1))
            count += int((means >= observed - tol).sum())
        return count / total
    rng = np.random.default_rng(seed)
    signs = rng.choice((-1.0, 1.0), size=(n_perms, n))
    means = np.abs((signs * diffs).mean(axis=1))
    count = int((means >= observed - tol).sum())
    return (count + 1) / (n_perms + 1)


# --- chains -------------------------------------------------------------------

def filter_chain(chain: IncidentChain, cells: set[int]) -> IncidentChain:
    kept = tuple((t, c) for t, c in chain.incidents if c in cells)
    return IncidentChain(kept, chain.horizon_s, chain.seed)


# --- synthetic scenarios --------------------------------------------------------

@dataclass(frozen=True)
class ScenarioParams:
    nx: int = 6
    ny: int = 6
    cell_size_miles: float = 1.0
    n_depots: int = 8
    n_hospitals: int = 2
    n_regions: int = 2
    base_speed_mph: float = 30.0
    rate_buckets_per_day: int = 4
    citywide_rate_per_hour: float = 4.0
    n_hotspots: int = 3


def generate_scenario(params: ScenarioParams, seed: int) -> ScenarioWorld:
    """Synthetic city: square grid, rush-hour speed profile, rotating demand
    hotspots, k-means regions."""
    from .geo import (Depot, Hospital, RateModel, euclidean_travel_model,
                      kmeans_segment, square_grid)
    if params.n_depots > params.nx * params.ny:
        raise ValueError("more depots than cells")
    if params.n_regions > params.n_depots:
        raise ValueError("more regions than depots")
    rng = np.random.default_rng(seed)
    grid = square_grid(params.nx, params.ny, params.cell_size_miles)
    # hourly speed profile, slower at the 8:00 and 17:00 peaks
    hours = np.arange(24)
    speed_mult = 1.0 - 0.3 * (np.exp(-((hours - 8) ** 2) / 4.0)
                              + np.exp(-((hours - 17) ** 2) / 4.0))
    travel = euclidean_travel_model(grid, 3600, list(speed_mult),
                                    params.base_speed_mph)
    n_cells = grid.n_cells
    picks = rng.choice(n_cells, size=params.n_depots + params.n_hospitals,
                       replace=False)
    depots = {i: Depot(i, int(c)) for i, c in enumerate(picks[:params.n_depots])}
    hospitals = {i: Hospital(i, int(c))
                 for i, c in enumerate(picks[params.n_depots:])}
    # rotating gaussian hotspots; each bucket reweights them
    xy = grid.centroids()
    centers = xy[rng.choice(n_cells, size=params.n_hotspots, replace=False)]
    sigma = max(params.nx, params.ny) * params.cell_size_miles / 4.0
    fields = np.stack([
        np.exp(-((xy - c) ** 2).sum(axis=1) / (2 * sigma ** 2)) for c in centers
    ])
    buckets = []
    n_buckets = params.rate_buckets_per_day
    for b in range(n_buckets):
        weights = 0.2 + rng.dirichlet(np.ones(params.n_hotspots))
        day_night = 0.5 + 0.5 * math.sin(2 * math.pi * (b / n_buckets - 0.25)) + 0.25
        field = (weights @ fields) * day_night
        field *= params.citywide_rate_per_hour / field.sum()
        buckets.append(field)
    rates = RateModel(86400 // n_buckets, np.stack(buckets))
    seg = kmeans_segment(grid, rates, depots, params.n_regions, seed)
    return ScenarioWorld(grid, depots, hospitals, travel, rates, seg)


# --- training -----------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    episodes_llp: int = 120
    episodes_hlp: int = 40
    horizon_s: float = 2 * 86400.0
    fleet_size: int | None = None          # city fleet; default scales with depots
    idle_timeout_s: float = 3600.0
    t_serve_s: float = 1200.0
    ddpg: DdpgConfig = field(default_factory=DdpgConfig)
    llp_layers: int = 1
    llp_heads: int = 2
    llp_inner: tuple = (64,)
    llp_dropout: float = 0.0
    critic_hidden: tuple = (64,)
    critic_dropout: float = 0.1
    hlp_hidden: tuple = (256, 64)
    hlp_dropout: float = 0.1
    min_hlp_interval_s: float = 3600.0

    def default_fleet(self, world: ScenarioWorld) -> int:
        if self.fleet_size is not None:
            return self.fleet_size
        return max(1, int(round(0.7 * len(world.depots))))


class LlpTrainingController:
    """Single-region training: decision at each incident or hourly lull."""

    def __init__(self, agent: LlpAgent, world: ScenarioWorld,
                 rng: np.random.Generator, train: bool = True):
        self.agent = agent
        self.world = world
        self.rng = rng
        self.train = train
        self.pending = None  # (obs, executed likelihoods)

    def begin_episode(self, sim: Simulator):
        self.pending = None
        self._epoch(sim, reward=None)

    def on_event(self, sim: Simulator, event):
        if event.kind == "incident":
            dispatched = (sim.last_dispatch is not None
                          and sim.last_dispatch.t == sim.now)
            reward = (reward_from_response(sim.last_dispatch.response_s, self.agent.cfg)
                      if dispatched else 0.0)
            self._epoch(sim, reward)
        elif event.kind == "idle_tick":
            self._epoch(sim, 0.0)

    def _epoch(self, sim: Simulator, reward: float | None):
        obs = region_observation(sim.responders, self.agent.region, sim.now, self.world)
        if self.pending is not None and reward is not None:
            prev_obs, prev_action = self.pending
            self.agent.observe(LlpTransition(prev_obs, prev_action, reward, obs, False))
            if self.train:
                self.agent.train_step(self.rng)
        likelihoods, assignment = self.agent.act(obs, explore=self.train, rng=self.rng)
        sim.apply_depot_moves(assignment)
        self.pending = (obs, likelihoods)

    def end_episode(self, sim: Simulator):
        if self.pending is None:
            return
        obs = region_observation(sim.responders, self.agent.region, sim.now, self.world)
        prev_obs, prev_action = self.pending
        self.agent.observe(LlpTransition(prev_obs, prev_action, 0.0, obs, True))
        if self.train:
            self.agent.train_step(self.rng)
        self.pending = None


def train_llp_agent(world: ScenarioWorld, region: int, cfg: TrainConfig,
                    train_seeds: list[int], seed: int,
                    agent: LlpAgent | None = None,
                    curve_hook=None) -> LlpAgent:
    """Train one region agent on chains restricted to its own cells."""
    ss = np.random.SeedSequence((seed, region))
    init_rng, run_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    depots = world.region_depots(region)
    if agent is None:
        agent = LlpAgent(region, len(depots), cfg.ddpg, init_rng,
                         n_layers=cfg.llp_layers, n_heads=cfg.llp_heads,
                         inner_sizes=cfg.llp_inner, actor_dropout=cfg.llp_dropout,
                         critic_hidden=cfg.critic_hidden,
                         critic_dropout=cfg.critic_dropout)
    cells = set(world.seg.region_cells[region])
    fleet_ratio = cfg.default_fleet(world) / len(world.depots)
    sim_cfg = SimConfig(t_serve_s=cfg.t_serve_s, idle_timeout_s=cfg.idle_timeout_s)
    for episode in range(cfg.episodes_llp):
        chain_seed = train_seeds[episode % len(train_seeds)]
        chain = filter_chain(sample_chain(world.rates, cfg.horizon_s, chain_seed), cells)
        fleet = sample_llp_fleet(len(depots), fleet_ratio, run_rng)
        initial = {i: depots[i] for i in range(fleet)}
        agent.explore_eps = cfg.ddpg.explore_eps(episode)
        controller = LlpTrainingController(agent, world, run_rng)
        run_episode(world, chain, controller, sim_cfg, initial_assignment=initial)
        if curve_hook is not None:
            curve_hook(episode, agent)
    return agent


class HlpTrainer:
    """plan_counts adapter that explores, stores transitions, and trains.

    The reward for each redistribution is the rate-weighted sum of the frozen
    region critics, evaluated on the post-redistribution configuration."""

    def __init__(self, hlp_agent: HlpAgent, llp_agents: dict[int, LlpAgent],
                 world: ScenarioWorld, rng: np.random.Generator, train: bool = True):
        self.agent = hlp_agent
        self.llp_agents = llp_agents
        self.world = world
        self.rng = rng
        self.train = train
        self.pending = None  # (obs, a_h, reward)

    def plan_counts(self, sim: Simulator, rng) -> dict[int, int]:
        world = self.world
        counts = sim.region_counts()
        rates = {g: region_rate(world.seg, world.rates, g, sim.now)
                 for g in world.seg.region_ids}
        obs = hlp_observation(rates, counts, len(sim.responders), world.rate_scale)
        if self.pending is not None:
            p_obs, p_action, p_reward = self.pending
            self.agent.observe(HlpTransition(p_obs, p_action, p_reward, obs, False))
            if self.train:
                self.agent.train_step(self.rng)
            self.pending = None
        caps = world.region_caps()
        region_ids = sorted(caps)
        a_h, count_arr = self.agent.act(obs, len(sim.responders),
                                        [caps[g] for g in region_ids],
                                        explore=self.train, rng=self.rng)
        self._open = (obs, a_h)
        return {g: int(c) for g, c in zip(region_ids, count_arr)}

    def record_cycle(self, sim: Simulator, event):
        """Called after the redistribution and follow-up region planning."""
        if not hasattr(self, "_open") or self._open is None:
            return
        obs, a_h = self._open
        self._open = None
        world = self.world
        rates = {g: region_rate(world.seg, world.rates, g, sim.now)
                 for g in world.seg.region_ids}
        region_obs, region_actions = {}, {}
        for g, agent in self.llp_agents.items():
            r_obs = region_observation(sim.responders, g, sim.now, world)
            region_obs[g] = r_obs
            if r_obs.n_responders:
                likelihoods, _ = nn.trxl_forward(agent.actor, r_obs.actor_features())
            else:
                likelihoods = np.zeros((0, r_obs.n_depots))
            region_actions[g] = likelihoods
        reward = hlp_reward(self.llp_agents, region_obs, region_actions, rates,
                            normalize=self.agent.cfg.normalize_hlp_reward)
        self.pending = (obs, a_h, reward)

    def end_episode(self, sim: Simulator):
        if self.pending is None:
            return
        p_obs, p_action, p_reward = self.pending
        self.agent.observe(HlpTransition(p_obs, p_action, p_reward, p_obs, True))
        if self.train:
            self.agent.train_step(self.rng)
        self.pending = None


def train_hlp_agent(world: ScenarioWorld, llp_agents: dict[int, LlpAgent],
                    cfg: TrainConfig, train_seeds: list[int], seed: int,
                    agent: HlpAgent | None = None, curve_hook=None) -> HlpAgent:
    """Train the city agent against frozen region agents."""
    ss = np.random.SeedSequence((seed, 999_983))
    init_rng, run_rng = (np.random.default_rng(s) for s in ss.spawn(2))
    region_ids = world.seg.region_ids
    if agent is None:
        agent = HlpAgent(len(region_ids), cfg.ddpg, init_rng,
                         actor_hidden=cfg.hlp_hidden, actor_dropout=cfg.hlp_dropout,
                         critic_hidden=cfg.critic_hidden,
                         critic_dropout=cfg.critic_dropout)
    sim_cfg = SimConfig(t_serve_s=cfg.t_serve_s)
    center = cfg.default_fleet(world)
    caps_total = sum(world.region_caps().values())
    for episode in range(cfg.episodes_hlp):
        chain_seed = train_seeds[episode % len(train_seeds)]
        chain = sample_chain(world.rates, cfg.horizon_s, chain_seed)
        fleet = sample_hlp_fleet(center, caps_total, run_rng)
        agent.explore_eps = cfg.ddpg.explore_eps(episode)
        trainer = HlpTrainer(agent, llp_agents, world, run_rng)
        planner = DdpgPlanner(llp_agents)
        controller = HierarchyController(
            world, TriggerPolicy(mode="ours", min_hlp_interval_s=cfg.min_hlp_interval_s,
                                 idle_timeout_s=cfg.idle_timeout_s),
            planner, hlp_planner=trainer)
        controller.hlp_cycle_hook = trainer.record_cycle
        controller.episode_end_hook = trainer.end_episode
        run_episode(world, chain, controller, sim_cfg, n_responders=fleet)
        if curve_hook is not None:
            curve_hook(episode, agent)
    return agent


# --- checkpoints ----------------------------------------------------------------

def save_agents(path_dir, llp_agents: dict[int, LlpAgent],
                hlp_agent: HlpAgent | None, manifest: dict) -> None:
    path_dir = Path(path_dir)
    path_dir.mkdir(parents=True, exist_ok=True)
    named = {}
    for g, agent in llp_agents.items():
        named[f"llp{g}_actor"] = agent.actor
        named[f"llp{g}_actor_target"] = agent.actor_target
        named[f"llp{g}_critic"] = agent.critic
        named[f"llp{g}_critic_target"] = agent.critic_target
    if hlp_agent is not None:
        named["hlp_actor"] = hlp_agent.actor
        named["hlp_actor_target"] = hlp_agent.actor_target
        named["hlp_critic"] = hlp_agent.critic
        named["hlp_critic_target"] = hlp_agent.critic_target
    nn.save_checkpoint(path_dir / "networks.npz", named)
    with open(path_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2)


def load_agents(path_dir, world: ScenarioWorld,
                ddpg: DdpgConfig | None = None) -> tuple[dict[int, LlpAgent], HlpAgent | None]:
    path_dir = Path(path_dir)
    with open(path_dir / "manifest.json") as f:
        manifest = json.load(f)
    if ddpg is None:
        ddpg = DdpgConfig(**manifest.get("ddpg", {}))
    nets = nn.load_checkpoint(path_dir / "networks.npz")
    llp_agents: dict[int, LlpAgent] = {}
    rng = np.random.default_rng(0)
    for g in world.seg.region_ids:
        n_dep = len(world.region_depots(g))
        agent = LlpAgent(g, n_dep, ddpg, rng)
        agent.actor = nets[f"llp{g}_actor"]
        agent.actor_target = nets[f"llp{g}_actor_target"]
        agent.critic = nets[f"llp{g}_critic"]
        agent.critic_target = nets[f"llp{g}_critic_target"]
        llp_agents[g] = agent
    hlp_agent = None
    if "hlp_actor" in nets:
        hlp_agent = HlpAgent(len(world.seg.region_ids), ddpg, rng)
        hlp_agent.actor = nets["hlp_actor"]
        hlp_agent.actor_target = nets["hlp_actor_target"]
        hlp_agent.critic = nets["hlp_critic"]
        hlp_agent.critic_target = nets["hlp_critic_target"]
    return llp_agents, hlp_agent


# --- evaluation -------------------------------------------------------------------

@dataclass(frozen=True)
class ExperimentSpec:
    scenario_path: str
    planner: str                    # drl | mcts | pmedian | greedy | static | random
    out_dir: str
    train_seeds: tuple[int, ...] = tuple(range(50))
    eval_seeds: tuple[int, ...] = tuple(range(50, 60))
    fleet_size: int | None = None
    trigger_mode: str | None = None  # default: per planner
    horizon_s: float = 11 * 86400.0
    sigma_rate: float = 0.0
    sigma_time: float = 0.0
    alpha: float = 1.0
    mcts: MctsConfig = field(default_factory=MctsConfig)
    seed: int = 0

    def __post_init__(self):
        if set(self.train_seeds) & set(self.eval_seeds):
            raise ValueError("train and eval chain seeds must be disjoint")


def build_controller(spec: ExperimentSpec, world: ScenarioWorld,
                     checkpoint_dir=None, chain_seed: int = 0):
    noise = NoiseModel(sigma_rate=spec.sigma_rate, sigma_time=spec.sigma_time)
    ctrl_seed = int(np.random.SeedSequence((spec.seed, chain_seed)).generate_state(1)[0])
    if spec.planner == "drl":
        llp_agents, hlp_agent = load_agents(checkpoint_dir, world)
        planner = DdpgPlanner(llp_agents, hlp_agent, noise=noise)
        trigger = TriggerPolicy(mode=spec.trigger_mode or "ours")
        return HierarchyController(world, trigger, planner, planner, seed=ctrl_seed)
    if spec.planner == "static":
        return None
    planner = BaselineRegionPlanner(spec.planner, mcts_cfg=spec.mcts, alpha=spec.alpha)
    trigger = TriggerPolicy(mode=spec.trigger_mode or "baseline")
    return HierarchyController(world, trigger, planner, seed=ctrl_seed)


@dataclass
class ChainRecord:
    chain_seed: int
    n_incidents: int
    mean_response_s: float | None
    decision_count: int
    latency_mean_s: float | None
    latency_max_s: float | None


def evaluate_spec(spec: ExperimentSpec, world: ScenarioWorld,
                  checkpoint_dir=None, workers: int = 1) -> list[ChainRecord]:
    args = [(spec, world, checkpoint_dir, s) for s in spec.eval_seeds]
    if workers > 1:
        import multiprocessing as mp
        with mp.Pool(workers) as pool:
            results = pool.map(_eval_one_chain, args)
    else:
        results = [_eval_one_chain(a) for a in args]
    return results  # already in eval-seed order


def _eval_one_chain(packed) -> ChainRecord:
    spec, world, checkpoint_dir, chain_seed = packed
    chain = sample_chain(world.rates, spec.horizon_s, chain_seed)
    controller = build_controller(spec, world, checkpoint_dir, chain_seed)
    idle = TriggerPolicy().idle_timeout_s if (controller is not None
                                              and controller.trigger.mode == "baseline") else None
    cfg = SimConfig(idle_timeout_s=idle)
    fleet = spec.fleet_size
    result = run_episode(world, chain, controller, cfg, n_responders=fleet)
    lats = [dt for _, dt in result.decision_latency]
    return ChainRecord(
        chain_seed=chain_seed,
        n_incidents=result.n_incidents,
        mean_response_s=result.mean_response_s,
        decision_count=len(lats),
        latency_mean_s=float(np.mean(lats)) if lats else None,
        latency_max_s=float(np.max(lats)) if lats else None,
    )


def write_run_summary(records: list[ChainRecord], out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "run_summary.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["chain_seed", "n_incidents", "mean_response_s"])
        for r in records:
            w.writerow([r.chain_seed, r.n_incidents,
                        "" if r.mean_response_s is None else repr(r.mean_response_s)])
    lats = [r.latency_mean_s for r in records if r.latency_mean_s is not None]
    summary = {
        "chains": len(records),
        "mean_response_s": float(np.mean([r.mean_response_s for r in records
                                          if r.mean_response_s is not None]))
        if any(r.mean_response_s is not None for r in records) else None,
        "decision_latency_mean_s": float(np.mean(lats)) if lats else None,
        "decision_latency_max_s": max((r.latency_max_s for r in records
                                       if r.latency_max_s is not None), default=None),
        "per_chain": [asdict(r) for r in records],
    }
    with open(out_dir / "run_summary.json", "w") as f:
        json.dump(summary, f, indent=2)


def read_run_summary(out_dir) -> list[tuple[int, float]]:
    rows = []
    with open(Path(out_dir) / "run_summary.csv", newline="") as f:
        for row in csv.DictReader(f):
            if row["mean_response_s"]:
                rows.append((int(row["chain_seed"]), float(row["mean_response_s"])))
    return rows


def noise_sweep(spec: ExperimentSpec, world: ScenarioWorld, checkpoint_dir,
                sigmas: list[float], workers: int = 1) -> list[dict]:
    """Mean response over the sigma grid applied to both observation channels."""
    from dataclasses import replace
    rows = []
    for s_rate in sigmas:
        for s_time in sigmas:
            noisy = replace(spec, sigma_rate=s_rate, sigma_time=s_time)
            records = evaluate_spec(noisy, world, checkpoint_dir, workers)
            means = [r.mean_response_s for r in records if r.mean_response_s is not None]
            rows.append({"sigma_rate": s_rate, "sigma_time": s_time,
                         "mean_response_s": float(np.mean(means)) if means else None})
    return rows


def write_noise_matrix(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["sigma_rate", "sigma_time", "mean_response_s"])
        for r in rows:
            w.writerow([r["sigma_rate"], r["sigma_time"],
                        "" if r["mean_response_s"] is None else repr(r["mean_response_s"])])


def compare_runs(named_runs: list[tuple[str, list[tuple[int, float]]]],
                 n_perms: int = 100_000, seed: int = 0) -> list[dict]:
    """Pairwise tests of every run against the first (the reference)."""
    ref_name, ref_rows = named_runs[0]
    ref = dict(ref_rows)
    out = []
    for name, rows in named_runs[1:]:
        other = dict(rows)
        common = sorted(set(ref) & set(other))
        if len(common) < 2:
            raise ValueError(f"runs {ref_name} and {name} share fewer than 2 chains")
        xs = [ref[c] for c in common]
        ys = [other[c] for c in common]
        out.append({
            "reference": ref_name,
            "candidate": name,
            "n_chains": len(common),
            "mean_reference_s": float(np.mean(xs)),
            "mean_candidate_s": float(np.mean(ys)),
            "p_value": permutation_test(xs, ys, n_perms=n_perms, seed=seed),
        })
    return out
