"""Geography, travel model, incident-rate model, and region segmentation.

Everything here is immutable after construction and safe to share between
threads. Times are seconds, rates are incidents per hour, distances miles.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

WEEK_S = 7 * 24 * 3600


class ScenarioError(ValueError):
    """Invalid scenario input or configuration."""


@dataclass(frozen=True)
class Cell:
    id: int
    centroid: tuple[float, float]


@dataclass(frozen=True)
class Grid:
    cells: tuple[Cell, ...]
    cell_size_miles: float
    bbox: tuple[float, float, float, float]  # (xmin, ymin, xmax, ymax)

    def __post_init__(self):
        ids = [c.id for c in self.cells]
        if ids != list(range(len(ids))):
            raise ScenarioError("cell ids must be 0..n-1 in order")
        if self.cell_size_miles <= 0:
            raise ScenarioError("cell_size_miles must be positive")

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    def centroid(self, cell_id: int) -> tuple[float, float]:
        return self.cells[cell_id].centroid

    def centroids(self) -> np.ndarray:
        return np.array([c.centroid for c in self.cells], dtype=float)

    def diagonal_miles(self) -> float:
        xmin, ymin, xmax, ymax = self.bbox
        return math.hypot(xmax - xmin, ymax - ymin)


def square_grid(nx: int, ny: int, cell_size_miles: float = 1.0) -> Grid:
    """Regular nx-by-ny grid with unit-square cells, ids in row-major order."""
    cells = []
    for j in range(ny):
        for i in range(nx):
            cid = j * nx + i
            cells.append(Cell(cid, ((i + 0.5) * cell_size_miles, (j + 0.5) * cell_size_miles)))
    return Grid(tuple(cells), cell_size_miles, (0.0, 0.0, nx * cell_size_miles, ny * cell_size_miles))


@dataclass(frozen=True)
class Depot:
    id: int
    cell: int
    capacity: int = 1


@dataclass(frozen=True)
class Hospital:
    id: int
    cell: int


class TravelModel:
    """Time-varying cell-to-cell travel times.

    One square table per time bucket; the bucket sequence cycles with period
    n_buckets * bucket_duration_s, which must divide one week so lookups are
    weekly-periodic. Diagonals are zero. The triangle inequality is not
    assumed (road networks violate it).
    """

    def __init__(self, bucket_duration_s: int, matrices: np.ndarray):
        matrices = np.asarray(matrices, dtype=float)
        if matrices.ndim != 3 or matrices.shape[1] != matrices.shape[2]:
            raise ScenarioError("travel matrices must have shape (buckets, n, n)")
        if bucket_duration_s <= 0:
            raise ScenarioError("bucket_duration_s must be positive")
        period = matrices.shape[0] * bucket_duration_s
        if WEEK_S % period != 0:
            raise ScenarioError("travel bucket cycle must divide one week")
        if not np.all(np.isfinite(matrices)) or np.any(matrices < 0):
            raise ScenarioError("travel times must be finite and nonnegative")
        if np.any(np.diagonal(matrices, axis1=1, axis2=2) != 0):
            raise ScenarioError("travel time diagonal must be zero")
        self.bucket_duration_s = int(bucket_duration_s)
        self.matrices = matrices
        self.period_s = period

    @property
    def n_cells(self) -> int:
        return self.matrices.shape[1]

    def bucket_index(self, t: float) -> int:
        return int((t % self.period_s) // self.bucket_duration_s)

    def travel_time(self, from_cell: int, to_cell: int, t: float) -> float:
        if not (0 <= from_cell < self.n_cells and 0 <= to_cell < self.n_cells):
            raise ScenarioError(f"unknown cell id in travel lookup: {from_cell}, {to_cell}")
        if t < 0:
            raise ScenarioError("travel lookup requires t >= 0")
        return float(self.matrices[self.bucket_index(t), from_cell, to_cell])


class RateModel:
    """Piecewise-constant per-cell incident rates (incidents/hour), cycling weekly."""

    def __init__(self, bucket_duration_s: int, rates: np.ndarray):
        rates = np.asarray(rates, dtype=float)
        if rates.ndim != 2:
            raise ScenarioError("rates must have shape (buckets, n_cells)")
        if bucket_duration_s <= 0:
            raise ScenarioError("bucket_duration_s must be positive")
        period = rates.shape[0] * bucket_duration_s
        if WEEK_S % period != 0:
            raise ScenarioError("rate bucket cycle must divide one week")
        if not np.all(np.isfinite(rates)) or np.any(rates < 0):
            raise ScenarioError("rates must be finite and nonnegative")
        self.bucket_duration_s = int(bucket_duration_s)
        self.rates = rates
        self.period_s = period

    @property
    def n_cells(self) -> int:
        return self.rates.shape[1]

    @property
    def n_buckets(self) -> int:
        return self.rates.shape[0]

    def bucket_index(self, t: float) -> int:
        return int((t % self.period_s) // self.bucket_duration_s)

    def rates_at(self, t: float) -> np.ndarray:
        return self.rates[self.bucket_index(t)]

    def cell_rate(self, cell_id: int, t: float) -> float:
        return float(self.rates_at(t)[cell_id])

    def mean_rates(self) -> np.ndarray:
        return self.rates.mean(axis=0)


@dataclass(frozen=True)
class Segmentation:
    """Partition of the grid into depot-bearing regions."""

    region_cells: dict[int, frozenset[int]]
    depot_regions: dict[int, int]

    def __post_init__(self):
        seen: set[int] = set()
        for cells in self.region_cells.values():
            if seen & cells:
                raise ScenarioError("regions must be disjoint")
            seen |= cells
        regions_with_depot = set(self.depot_regions.values())
        if regions_with_depot != set(self.region_cells):
            raise ScenarioError("every region must contain at least one depot")

    @property
    def region_ids(self) -> list[int]:
        return sorted(self.region_cells)

    @property
    def n_regions(self) -> int:
        return len(self.region_cells)

    def cell_region(self, cell_id: int) -> int:
        for g, cells in self.region_cells.items():
            if cell_id in cells:
                return g
        raise ScenarioError(f"cell {cell_id} not covered by segmentation")

    def region_depots(self, region_id: int) -> list[int]:
        return sorted(d for d, g in self.depot_regions.items() if g == region_id)


def single_region(grid: Grid, depots: dict[int, Depot]) -> Segmentation:
    return Segmentation(
        region_cells={0: frozenset(range(grid.n_cells))},
        depot_regions={d: 0 for d in depots},
    )


def kmeans_segment(
    grid: Grid,
    rates: RateModel,
    depots: dict[int, Depot],
    k: int,
    seed: int,
    rate_weight: float | None = None,
) -> Segmentation:
    """Cluster cells by (x, y, w * mean rate) with Lloyd's algorithm.

    Clusters that end up without a depot are dissolved: their cells join the
    region of the nearest depot (centroid distance, ties to lowest depot id),
    so the returned segmentation always satisfies the one-depot-per-region
    invariant. Deterministic per seed.
    """
    if k < 1:
        raise ScenarioError("k must be >= 1")
    if k > len(depots):
        raise ScenarioError(f"k={k} exceeds depot count {len(depots)}; some region would lack a depot")

    xy = grid.centroids()
    mean_rates = rates.mean_rates()
    if rate_weight is None:
        max_rate = float(mean_rates.max())
        rate_weight = grid.diagonal_miles() / max_rate if max_rate > 0 else 0.0
    feats = np.column_stack([xy, rate_weight * mean_rates])

    rng = np.random.default_rng(seed)
    centers = feats[rng.choice(grid.n_cells, size=k, replace=False)].copy()
    labels = np.zeros(grid.n_cells, dtype=int)
    for _ in range(200):
        dists = ((feats[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_labels = dists.argmin(axis=1)
        for j in range(k):
            members = feats[new_labels == j]
            if len(members):
                centers[j] = members.mean(axis=0)
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels

    # Dissolve clusters that captured no depot.
    depot_ids = sorted(depots)
    depot_labels = {d: int(labels[depots[d].cell]) for d in depot_ids}
    good = sorted(set(depot_labels.values()))
    if len(good) < k or set(labels) - set(good):
        depot_xy = np.array([grid.centroid(depots[d].cell) for d in depot_ids])
        for c in range(grid.n_cells):
            if labels[c] not in good:
                d2 = ((depot_xy - xy[c]) ** 2).sum(axis=1)
                labels[c] = depot_labels[depot_ids[int(d2.argmin())]]

    relabel = {old: new for new, old in enumerate(sorted(set(int(v) for v in labels)))}
    region_cells = {new: frozenset(int(c) for c in np.flatnonzero(labels == old))
                    for old, new in relabel.items()}
    depot_regions = {d: relabel[depot_labels[d]] for d in depot_ids}
    return Segmentation(region_cells=region_cells, depot_regions=depot_regions)


def near_cells(
    depot_ids: list[int],
    depots: dict[int, Depot],
    grid: Grid,
    travel: TravelModel,
    t: float,
) -> dict[int, set[int]]:
    """Partition cells among the given depots by closest travel time.

    Every cell goes to exactly one depot: argmin of travel(cell, depot, t),
    ties to the lowest depot id.
    """
    if not depot_ids:
        raise ScenarioError("near_cells requires a nonempty depot set")
    ids = sorted(depot_ids)
    table = travel.matrices[travel.bucket_index(t)]
    cols = np.column_stack([table[:, depots[d].cell] for d in ids])
    winners = cols.argmin(axis=1)  # argmin takes first (= lowest id) on ties
    out: dict[int, set[int]] = {d: set() for d in ids}
    for c, w in enumerate(winners):
        out[ids[int(w)]].add(c)
    return out


def nearby_rates(
    depot_ids: list[int],
    depots: dict[int, Depot],
    grid: Grid,
    travel: TravelModel,
    rates: RateModel,
    t: float,
) -> dict[int, float]:
    """Per-depot summed incident rate over the cells nearest that depot."""
    parts = near_cells(depot_ids, depots, grid, travel, t)
    rate_vec = rates.rates_at(t)
    return {d: float(sum(rate_vec[c] for c in cells)) for d, cells in parts.items()}


def region_rate(seg: Segmentation, rates: RateModel, region_id: int, t: float) -> float:
    rate_vec = rates.rates_at(t)
    return float(sum(rate_vec[c] for c in seg.region_cells[region_id]))


@dataclass(frozen=True)
class ScenarioWorld:
    """Immutable world: geography plus models, shared read-only by episodes."""

    grid: Grid
    depots: dict[int, Depot]
    hospitals: dict[int, Hospital]
    travel: TravelModel
    rates: RateModel
    seg: Segmentation
    rate_scale: float = field(default=0.0)  # feature normalizer; 0 -> derive

    def __post_init__(self):
        if not self.hospitals:
            raise ScenarioError("scenario needs at least one hospital")
        for d in self.depots.values():
            if d.cell not in self.seg.region_cells[self.seg.depot_regions[d.id]]:
                raise ScenarioError(f"depot {d.id} lies outside its region")
        if self.rate_scale == 0.0:
            object.__setattr__(self, "rate_scale", _max_depot_rate(self))

    @property
    def depot_ids(self) -> list[int]:
        return sorted(self.depots)

    def region_depots(self, region_id: int) -> list[int]:
        return self.seg.region_depots(region_id)

    def region_caps(self) -> dict[int, int]:
        return {g: len(self.seg.region_depots(g)) for g in self.seg.region_ids}

    def nearest_hospital(self, from_cell: int, t: float) -> int:
        """Hospital reachable fastest from from_cell at time t; ties to lowest id."""
        best, best_t = None, None
        for h in sorted(self.hospitals):
            tt = self.travel.travel_time(from_cell, self.hospitals[h].cell, t)
            if best_t is None or tt < best_t:
                best, best_t = h, tt
        return best


def _max_depot_rate(world: ScenarioWorld) -> float:
    """Max over bucket boundaries and depots of the nearby incident rate.

    Used to normalize rate features; sampled at every travel/rate bucket
    boundary within the combined cycle.
    """
    period = max(world.travel.period_s, world.rates.period_s)
    times = sorted(
        set(range(0, period, world.travel.bucket_duration_s))
        | set(range(0, period, world.rates.bucket_duration_s))
    )
    ids = world.depot_ids
    best = 0.0
    for t in times:
        lam = nearby_rates(ids, world.depots, world.grid, world.travel, world.rates, t)
        best = max(best, max(lam.values()))
    return best if best > 0 else 1.0


def euclidean_travel_model(
    grid: Grid,
    bucket_duration_s: int,
    speed_multipliers: list[float],
    base_speed_mph: float = 30.0,
) -> TravelModel:
    """Synthetic travel tables from centroid distance / per-bucket speeds."""
    xy = grid.centroids()
    diff = xy[:, None, :] - xy[None, :, :]
    dist = np.sqrt((diff ** 2).sum(axis=2))
    mats = []
    for m in speed_multipliers:
        speed = base_speed_mph * m
        if speed <= 0:
            raise ScenarioError("speed multiplier must keep speed positive")
        mats.append(dist / speed * 3600.0)
    return TravelModel(bucket_duration_s, np.stack(mats))


# --- scenario file (JSON) ---------------------------------------------------
#
# One document: grid, depots, hospitals, travel buckets (or generator params),
# rate buckets, and either an explicit segmentation or {k, seed}. Times in
# seconds, rates in incidents/hour.

def world_to_json(world: ScenarioWorld) -> dict:
    return {
        "version": 1,
        "grid": {
            "cell_size_miles": world.grid.cell_size_miles,
            "bbox": list(world.grid.bbox),
            "cells": [{"id": c.id, "centroid": list(c.centroid)} for c in world.grid.cells],
        },
        "depots": [{"id": d.id, "cell": d.cell, "capacity": d.capacity}
                   for d in world.depots.values()],
        "hospitals": [{"id": h.id, "cell": h.cell} for h in world.hospitals.values()],
        "travel": {
            "bucket_duration_s": world.travel.bucket_duration_s,
            "matrices": world.travel.matrices.tolist(),
        },
        "rates": {
            "bucket_duration_s": world.rates.bucket_duration_s,
            "cell_rates_per_hour": world.rates.rates.tolist(),
        },
        "segmentation": {
            "regions": {str(g): sorted(cells) for g, cells in world.seg.region_cells.items()},
            "depot_regions": {str(d): g for d, g in world.seg.depot_regions.items()},
        },
        "feature_norm": {"rate_per_hour": world.rate_scale},
    }


def world_from_json(doc: dict) -> ScenarioWorld:
    g = doc["grid"]
    grid = Grid(
        tuple(Cell(c["id"], tuple(c["centroid"])) for c in g["cells"]),
        g["cell_size_miles"],
        tuple(g["bbox"]),
    )
    depots = {d["id"]: Depot(d["id"], d["cell"], d.get("capacity", 1)) for d in doc["depots"]}
    hospitals = {h["id"]: Hospital(h["id"], h["cell"]) for h in doc["hospitals"]}
    travel = TravelModel(doc["travel"]["bucket_duration_s"], np.array(doc["travel"]["matrices"]))
    rates = RateModel(doc["rates"]["bucket_duration_s"], np.array(doc["rates"]["cell_rates_per_hour"]))
    seg_doc = doc.get("segmentation")
    if seg_doc and "regions" in seg_doc:
        seg = Segmentation(
            region_cells={int(g_): frozenset(cells) for g_, cells in seg_doc["regions"].items()},
            depot_regions={int(d): int(r) for d, r in seg_doc["depot_regions"].items()},
        )
    else:
        params = seg_doc or {"k": 1, "seed": 0}
        seg = kmeans_segment(grid, rates, depots, params["k"], params["seed"])
    rate_scale = doc.get("feature_norm", {}).get("rate_per_hour", 0.0)
    return ScenarioWorld(grid, depots, hospitals, travel, rates, seg, rate_scale)


def save_world(world: ScenarioWorld, path) -> None:
    with open(path, "w") as f:
        json.dump(world_to_json(world), f)


def load_world(path) -> ScenarioWorld:
    with open(path) as f:
        return world_from_json(json.load(f))
