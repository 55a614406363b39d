"""Command-line entry point: generate | train | eval | compare | noise-sweep | plot."""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .agents import DdpgConfig
from .baselines import MctsConfig
from .geo import ScenarioError, load_world, save_world
from .harness import (ExperimentSpec, ScenarioParams, TrainConfig, compare_runs,
                      evaluate_spec, filter_chain, generate_scenario, load_agents,
                      noise_sweep, permutation_test, read_run_summary, save_agents,
                      train_hlp_agent, train_llp_agent, write_noise_matrix,
                      write_run_summary)
from .hierarchy import DdpgPlanner, HierarchyController, TriggerPolicy
from .sim import SimConfig, run_episode, sample_chain, write_chain_csv

PLANNERS = ("drl", "mcts", "pmedian", "greedy", "static", "random")


class ConfigError(ValueError):
    pass


def _parse_seed_range(text: str) -> tuple[int, ...]:
    """Accepts 'a:b' half-open ranges or comma lists."""
    if ":" in text:
        a, b = text.split(":")
        return tuple(range(int(a), int(b)))
    return tuple(int(x) for x in text.split(",") if x)


def cmd_generate(args) -> int:
    params = ScenarioParams(nx=args.nx, ny=args.ny, n_depots=args.depots,
                            n_hospitals=args.hospitals, n_regions=args.regions,
                            citywide_rate_per_hour=args.rate)
    world = generate_scenario(params, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_world(world, out)
    print(f"wrote scenario to {out} ({world.grid.n_cells} cells, "
          f"{len(world.depots)} depots, {world.seg.n_regions} regions)")
    if args.chains:
        chain_dir = Path(args.chain_dir or out.parent / "chains")
        chain_dir.mkdir(parents=True, exist_ok=True)
        horizon = args.horizon_days * 86400.0
        for s in range(args.chains):
            chain = sample_chain(world.rates, horizon, s)
            write_chain_csv(chain, chain_dir / f"chain_{s:04d}.csv")
        print(f"wrote {args.chains} chains to {chain_dir}")
    return 0


def cmd_train(args) -> int:
    world = load_world(args.scenario)
    ddpg = DdpgConfig(eps_decay_episodes=max(args.episodes_llp - 20, 1))
    cfg = TrainConfig(episodes_llp=args.episodes_llp, episodes_hlp=args.episodes_hlp,
                      horizon_s=args.horizon_days * 86400.0,
                      fleet_size=args.fleet, ddpg=ddpg)
    train_seeds = list(_parse_seed_range(args.train_seeds))
    eval_seeds = _parse_seed_range(args.eval_seeds)
    if set(train_seeds) & set(eval_seeds):
        raise ConfigError("train and eval chain seeds overlap")
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    curve_path = out_dir / "curves.csv"
    curve_file = open(curve_path, "w", newline="")
    curve = csv.writer(curve_file)
    curve.writerow(["phase", "region", "episode", "mean_response_s"])

    def llp_curve_hook(region):
        def hook(episode, agent):
            if args.curve_every <= 0 or episode % args.curve_every:
                return
            mean = _eval_llp(world, agent, region, eval_seeds[0], cfg)
            curve.writerow(["llp", region, episode,
                            "" if mean is None else repr(mean)])
        return hook

    llp_agents = {}
    for g in world.seg.region_ids:
        print(f"training region agent {g} "
              f"({len(world.region_depots(g))} depots, {cfg.episodes_llp} episodes)")
        llp_agents[g] = train_llp_agent(world, g, cfg, train_seeds, args.seed,
                                        curve_hook=llp_curve_hook(g))

    def hlp_curve_hook(episode, agent):
        if args.curve_every <= 0 or episode % args.curve_every:
            return
        mean = _eval_hierarchy(world, llp_agents, agent, eval_seeds[0], cfg)
        curve.writerow(["hlp", "", episode, "" if mean is None else repr(mean)])

    hlp_agent = None
    if world.seg.n_regions > 1 and args.episodes_hlp > 0:
        print(f"training city agent ({cfg.episodes_hlp} episodes)")
        hlp_agent = train_hlp_agent(world, llp_agents, cfg, train_seeds, args.seed,
                                    curve_hook=hlp_curve_hook)
    curve_file.close()
    manifest = {
        "ddpg": asdict(ddpg),
        "train": {k: (list(v) if isinstance(v, tuple) else v)
                  for k, v in asdict(cfg).items() if k != "ddpg"},
        "seed": args.seed,
        "train_seeds": train_seeds,
        "eval_seeds": list(eval_seeds),
        "episodes_llp": cfg.episodes_llp,
        "episodes_hlp": cfg.episodes_hlp,
        "final_explore_eps": ddpg.explore_eps(cfg.episodes_llp),
        "rng_state": np.random.default_rng(args.seed).bit_generator.state,
    }
    save_agents(out_dir, llp_agents, hlp_agent, manifest)
    print(f"checkpoints and learning curves in {out_dir}")
    return 0


def _eval_llp(world, agent, region, chain_seed, cfg):
    from .harness import LlpTrainingController
    cells = set(world.seg.region_cells[region])
    chain = filter_chain(sample_chain(world.rates, cfg.horizon_s, chain_seed), cells)
    depots = world.region_depots(region)
    fleet = max(1, min(len(depots), round(cfg.default_fleet(world)
                                          * len(depots) / len(world.depots))))
    controller = LlpTrainingController(agent, world, np.random.default_rng(0),
                                       train=False)
    res = run_episode(world, chain, controller,
                      SimConfig(t_serve_s=cfg.t_serve_s,
                                idle_timeout_s=cfg.idle_timeout_s),
                      initial_assignment={i: depots[i] for i in range(fleet)})
    return res.mean_response_s


def _eval_hierarchy(world, llp_agents, hlp_agent, chain_seed, cfg):
    chain = sample_chain(world.rates, cfg.horizon_s, chain_seed)
    planner = DdpgPlanner(llp_agents, hlp_agent)
    controller = HierarchyController(world, TriggerPolicy(mode="ours"),
                                     planner, planner, seed=0)
    res = run_episode(world, chain, controller, SimConfig(t_serve_s=cfg.t_serve_s),
                      n_responders=cfg.default_fleet(world))
    return res.mean_response_s


def cmd_eval(args) -> int:
    world = load_world(args.scenario)
    if args.planner == "drl" and not args.checkpoint_dir:
        raise ConfigError("--checkpoint-dir is required for the trained planner")
    spec = ExperimentSpec(
        scenario_path=args.scenario, planner=args.planner, out_dir=args.out_dir,
        eval_seeds=_parse_seed_range(args.eval_seeds),
        train_seeds=_parse_seed_range(args.train_seeds),
        fleet_size=args.fleet, horizon_s=args.horizon_days * 86400.0,
        sigma_rate=args.noise_rate, sigma_time=args.noise_time,
        alpha=args.alpha, mcts=MctsConfig(iteration_limit=args.mcts_iterations,
                                          n_samples=args.mcts_samples),
        seed=args.seed)
    records = evaluate_spec(spec, world, args.checkpoint_dir, workers=args.workers)
    write_run_summary(records, args.out_dir)
    means = [r.mean_response_s for r in records if r.mean_response_s is not None]
    print(f"{args.planner}: {len(records)} chains, "
          f"mean response {np.mean(means):.1f} s" if means else "no incidents")
    return 0


def cmd_compare(args) -> int:
    named = []
    for item in args.runs:
        if "=" not in item:
            raise ConfigError("runs must be passed as name=run_dir")
        name, run_dir = item.split("=", 1)
        named.append((name, read_run_summary(run_dir)))
    rows = compare_runs(named, n_perms=args.perms, seed=args.seed)
    out = Path(args.out) if args.out else None
    if out:
        with open(out, "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
            w.writeheader()
            w.writerows(rows)
    for r in rows:
        print(f"{r['reference']} vs {r['candidate']}: "
              f"{r['mean_reference_s']:.1f} s vs {r['mean_candidate_s']:.1f} s, "
              f"p = {r['p_value']:.4f}  (n = {r['n_chains']})")
    return 0


def cmd_noise_sweep(args) -> int:
    world = load_world(args.scenario)
    sigmas = [float(s) for s in args.sigmas.split(",")]
    spec = ExperimentSpec(
        scenario_path=args.scenario, planner="drl", out_dir=args.out_dir,
        eval_seeds=_parse_seed_range(args.eval_seeds),
        fleet_size=args.fleet, horizon_s=args.horizon_days * 86400.0,
        seed=args.seed)
    rows = noise_sweep(spec, world, args.checkpoint_dir, sigmas,
                       workers=args.workers)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_noise_matrix(rows, out_dir / "noise_matrix.csv")
    for r in rows:
        print(f"sigma_rate={r['sigma_rate']:.2f} sigma_time={r['sigma_time']:.2f} "
              f"-> {r['mean_response_s']:.1f} s")
    return 0


def cmd_plot(args) -> int:
    try:
        import matplotlib
        matplotlib.use("svg")
        import matplotlib.pyplot as plt
    except ImportError as exc:
        raise ConfigError("plotting needs matplotlib (pip install ermrl[plots])") from exc
    src = Path(args.input)
    with open(src, newline="") as f:
        rows = list(csv.DictReader(f))
    fig, ax = plt.subplots(figsize=(6, 4))
    if "episode" in rows[0]:
        series: dict[str, list[tuple[int, float]]] = {}
        for r in rows:
            if not r["mean_response_s"]:
                continue
            key = f"{r['phase']}{r['region'] and ' region ' + r['region']}"
            series.setdefault(key, []).append((int(r["episode"]),
                                               float(r["mean_response_s"])))
        for key, pts in sorted(series.items()):
            pts.sort()
            ax.plot([p[0] for p in pts], [p[1] for p in pts], label=key)
        ax.set_xlabel("training episode")
        ax.legend()
    else:
        means = [float(r["mean_response_s"]) for r in rows if r["mean_response_s"]]
        ax.boxplot(means)
        ax.set_xticklabels([src.stem])
    ax.set_ylabel("mean response time [s]")
    fig.tight_layout()
    fig.savefig(args.out)
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ermrl",
                                description="responder stationing: simulate, train, evaluate")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic scenario (and chains)")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--nx", type=int, default=6)
    g.add_argument("--ny", type=int, default=6)
    g.add_argument("--depots", type=int, default=8)
    g.add_argument("--hospitals", type=int, default=2)
    g.add_argument("--regions", type=int, default=2)
    g.add_argument("--rate", type=float, default=4.0,
                   help="citywide incidents per hour")
    g.add_argument("--chains", type=int, default=0)
    g.add_argument("--chain-dir")
    g.add_argument("--horizon-days", type=float, default=11.0)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train region agents, then the city agent")
    t.add_argument("--scenario", required=True)
    t.add_argument("--out-dir", required=True)
    t.add_argument("--seed", type=int, required=True)
    t.add_argument("--episodes-llp", type=int, default=120)
    t.add_argument("--episodes-hlp", type=int, default=40)
    t.add_argument("--horizon-days", type=float, default=2.0)
    t.add_argument("--fleet", type=int, default=None)
    t.add_argument("--train-seeds", default="0:50")
    t.add_argument("--eval-seeds", default="50:60")
    t.add_argument("--curve-every", type=int, default=10)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="run evaluation chains under a planner")
    e.add_argument("--scenario", required=True)
    e.add_argument("--out-dir", required=True)
    e.add_argument("--seed", type=int, required=True)
    e.add_argument("--planner", choices=PLANNERS, default="drl")
    e.add_argument("--checkpoint-dir")
    e.add_argument("--eval-seeds", default="50:60")
    e.add_argument("--train-seeds", default="0:50")
    e.add_argument("--fleet", type=int, default=None)
    e.add_argument("--horizon-days", type=float, default=11.0)
    e.add_argument("--noise-rate", type=float, default=0.0)
    e.add_argument("--noise-time", type=float, default=0.0)
    e.add_argument("--alpha", type=float, default=1.0)
    e.add_argument("--mcts-iterations", type=int, default=1000)
    e.add_argument("--mcts-samples", type=int, default=50)
    e.add_argument("--workers", type=int, default=1)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="paired permutation tests between runs")
    c.add_argument("runs", nargs="+", help="name=run_dir, first is the reference")
    c.add_argument("--perms", type=int, default=100_000)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out")
    c.set_defaults(func=cmd_compare)

    n = sub.add_parser("noise-sweep", help="evaluate under observation noise grid")
    n.add_argument("--scenario", required=True)
    n.add_argument("--checkpoint-dir", required=True)
    n.add_argument("--out-dir", required=True)
    n.add_argument("--seed", type=int, required=True)
    n.add_argument("--sigmas", default="0,0.1,0.2,0.3")
    n.add_argument("--eval-seeds", default="50:60")
    n.add_argument("--fleet", type=int, default=None)
    n.add_argument("--horizon-days", type=float, default=2.0)
    n.add_argument("--workers", type=int, default=1)
    n.set_defaults(func=cmd_noise_sweep)

    pl = sub.add_parser("plot", help="render a curves or summary CSV to SVG")
    pl.add_argument("--input", required=True)
    pl.add_argument("--out", required=True)
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args) or 0
    except (ConfigError, ScenarioError, FileNotFoundError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
