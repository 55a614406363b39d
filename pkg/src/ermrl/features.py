"""Projections from simulator state to fixed-meaning feature vectors.

Planner networks never see raw state. Per depot the region planners see the
expected arrival time of each responder, and the incident rate near the
depot; the city planner sees per-region rate sums and responder counts.
Normalization is fixed: times / 3600 s, rates / the scenario's max per-depot
rate, counts / fleet size. Observation noise (multiplicative log-normal) is
applied here, to agent inputs only, never to simulator ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geo import ScenarioWorld, nearby_rates
from .sim import ResponderState, eta_to_cell

TIME_SCALE_S = 3600.0


def arrival_time(resp: ResponderState, depot_id: int, t: float, world: ScenarioWorld) -> float:
    """Seconds until the responder could be waiting at the depot.

    A busy responder first finishes its run: remaining service time plus the
    ride from its drop-off hospital. An available responder pays the en-route
    rule; zero if it is already there.
    """
    depot_cell = world.depots[depot_id].cell
    if resp.t_avail is not None:
        h_cell = world.hospitals[resp.hospital].cell
        return (resp.t_avail - t) + world.travel.travel_time(h_cell, depot_cell, resp.t_avail)
    _, eta = eta_to_cell(resp.track, depot_cell, t, world)
    return eta


def apply_observation_noise(features: np.ndarray, sigma: float,
                            rng: np.random.Generator) -> np.ndarray:
    """Multiply each entry by an independent log-normal factor; identity at 0."""
    if sigma < 0:
        raise ValueError("noise sigma must be nonnegative")
    if sigma == 0.0:
        return features
    return features * np.exp(rng.normal(0.0, sigma, size=np.shape(features)))


@dataclass(frozen=True)
class NoiseModel:
    """Per-channel observation noise: rates and travel-derived times."""
    sigma_rate: float = 0.0
    sigma_time: float = 0.0


@dataclass
class RegionObservation:
    """Scaled feature bundle for one region at one decision instant."""
    region: int
    responder_ids: list[int]
    depot_ids: list[int]
    phi: np.ndarray   # (n_responders, n_depots), times / 3600
    lam: np.ndarray   # (n_depots,), rates / rate_scale

    @property
    def n_responders(self) -> int:
        return len(self.responder_ids)

    @property
    def n_depots(self) -> int:
        return len(self.depot_ids)

    def actor_features(self) -> np.ndarray:
        """Per responder, interleaved (arrival time, nearby rate) per depot."""
        n, d = self.phi.shape
        out = np.empty((n, 2 * d))
        out[:, 0::2] = self.phi
        out[:, 1::2] = np.broadcast_to(self.lam, (n, d))
        return out


def region_observation(
    responders: dict[int, ResponderState],
    region: int,
    t: float,
    world: ScenarioWorld,
    noise: NoiseModel | None = None,
    rng: np.random.Generator | None = None,
) -> RegionObservation:
    member_ids = sorted(rid for rid, r in responders.items() if r.region == region)
    depot_ids = world.region_depots(region)
    lam_all = nearby_rates(world.depot_ids, world.depots, world.grid,
                           world.travel, world.rates, t)
    lam = np.array([lam_all[d] for d in depot_ids]) / world.rate_scale
    phi = np.array([
        [arrival_time(responders[rid], d, t, world) for d in depot_ids]
        for rid in member_ids
    ]).reshape(len(member_ids), len(depot_ids)) / TIME_SCALE_S
    if noise is not None and rng is not None:
        phi = apply_observation_noise(phi, noise.sigma_time, rng)
        lam = apply_observation_noise(lam, noise.sigma_rate, rng)
    return RegionObservation(region, member_ids, depot_ids, phi, lam)


def depot_occupancy(likelihoods: np.ndarray, col: int) -> float:
    """Clipped chance that some responder lands on this depot."""
    return float(np.clip(likelihoods[:, col].sum(), 0.0, 1.0))


def likely_available_time(likelihoods: np.ndarray, phi: np.ndarray, col: int) -> float:
    """Likelihood-weighted arrival time for one depot column (no clipping)."""
    return float((phi[:, col] * likelihoods[:, col]).sum())


def critic_features(phi: np.ndarray, lam: np.ndarray, likelihoods: np.ndarray) -> np.ndarray:
    """Fixed-size critic input: per depot (occupancy, weighted arrival, rate)."""
    col_sums = likelihoods.sum(axis=0)
    eta = np.clip(col_sums, 0.0, 1.0)
    beta = (phi * likelihoods).sum(axis=0)
    return np.column_stack([eta, beta, lam]).ravel()


def critic_features_grad(phi: np.ndarray, likelihoods: np.ndarray,
                         dfeat: np.ndarray) -> np.ndarray:
    """Backprop the critic-feature map onto the likelihood matrix.

    The clip on occupancy gates its gradient to the open interval (0, 1);
    the weighted-arrival term contributes phi elementwise."""
    d = likelihoods.shape[1]
    dfeat = dfeat.reshape(d, 3)
    col_sums = likelihoods.sum(axis=0)
    gate = ((col_sums > 0.0) & (col_sums < 1.0)).astype(float)
    dL = np.broadcast_to(dfeat[:, 0] * gate, likelihoods.shape).copy()
    dL += dfeat[:, 1] * phi
    return dL


def hlp_observation(
    region_rates: dict[int, float],
    region_counts: dict[int, int],
    fleet_size: int,
    rate_scale: float,
    noise: NoiseModel | None = None,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Per region, interleaved (scaled rate sum, scaled responder count)."""
    regions = sorted(region_rates)
    lam = np.array([region_rates[g] for g in regions]) / rate_scale
    if noise is not None and rng is not None:
        lam = apply_observation_noise(lam, noise.sigma_rate, rng)
    counts = np.array([region_counts[g] for g in regions], dtype=float) / max(fleet_size, 1)
    out = np.empty(2 * len(regions))
    out[0::2] = lam
    out[1::2] = counts
    return out
