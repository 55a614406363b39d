"""Combinatorial discretization of continuous actions.

Maps actor outputs to feasible allocations: max-weight matching for
within-region depot assignment, greedy remainder-and-cap redistribution for
region counts, and a min-cost-flow assignment for moving responders between
regions. All solvers break ties by lowest id and are pure functions.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np


class InfeasibleError(ValueError):
    """The requested allocation cannot be satisfied."""


def validate_likelihoods(L: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    L = np.asarray(L, dtype=float)
    if L.ndim != 2:
        raise ValueError("likelihood matrix must be 2-d")
    if np.any(L < -tol):
        raise ValueError("likelihoods must be nonnegative")
    if L.shape[0] and np.any(np.abs(L.sum(axis=1) - 1.0) > tol):
        raise ValueError("likelihood rows must sum to 1")
    return L


def _hungarian_min(cost: np.ndarray) -> np.ndarray:
    """Min-sum assignment on a rectangular matrix (rows <= cols).

    Augmenting-path algorithm with dual potentials, O(n^2 m). Returns the
    assigned column index per row. Ties fall to the lowest column index.
    """
    n, m = cost.shape
    if n > m:
        raise InfeasibleError("more rows than columns in assignment")
    if n == 0:
        return np.zeros(0, dtype=int)
    INF = float("inf")
    u = np.zeros(n)
    v = np.zeros(m + 1)
    col_row = np.full(m + 1, -1, dtype=int)  # row matched to column; m is virtual
    for i in range(n):
        col_row[m] = i
        j0 = m
        minv = np.full(m, INF)
        way = np.full(m, m, dtype=int)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = col_row[j0]
            free = np.flatnonzero(~used[:m])
            reduced = cost[i0, free] - u[i0] - v[free]
            better = reduced < minv[free]
            minv[free[better]] = reduced[better]
            way[free[better]] = j0
            j1 = int(free[np.argmin(minv[free])])
            delta = minv[j1]
            mask = used[:m]
            u[col_row[:m][mask]] += delta
            u[col_row[m]] += delta if used[m] else 0.0
            v[:m][mask] -= delta
            v[m] -= delta
            minv[~mask] -= delta
            j0 = j1
            if col_row[j0] == -1:
                break
        while j0 != m:
            j1 = way[j0]
            col_row[j0] = col_row[j1]
            j0 = j1
    assign = np.full(n, -1, dtype=int)
    for j in range(m):
        if col_row[j] >= 0:
            assign[col_row[j]] = j
    return assign


def _best_completion(L: np.ndarray, rows: list[int], cols: list[int]) -> float:
    if not rows:
        return 0.0
    sub = L[np.ix_(rows, cols)]
    assign = _hungarian_min(-sub)
    return float(sub[np.arange(len(rows)), assign].sum())


def max_weight_match(L: np.ndarray) -> dict[int, int]:
    """Assignment maximizing the summed likelihood, one depot per responder.

    Each row gets exactly one column, each column at most one row. Among
    maximizers, the result is the lexicographically smallest column vector in
    row order.
    """
    L = np.asarray(L, dtype=float)
    n, m = L.shape
    if n > m:
        raise InfeasibleError(f"{n} responders but only {m} depots")
    if n == 0:
        return {}
    tol = 1e-9
    base = _hungarian_min(-L)
    best = float(L[np.arange(n), base].sum())

    assign: dict[int, int] = {}
    taken: set[int] = set()
    fixed_value = 0.0
    for i in range(n):
        rest_rows = list(range(i + 1, n))
        for j in range(m):
            if j in taken:
                continue
            rest_cols = [c for c in range(m) if c not in taken and c != j]
            value = fixed_value + L[i, j] + _best_completion(L, rest_rows, rest_cols)
            if value >= best - tol:
                assign[i] = j
                taken.add(j)
                fixed_value += L[i, j]
                break
        else:
            raise RuntimeError("matching refinement failed to place a row")
    return assign


def normalize_hlp(a_h: np.ndarray) -> np.ndarray:
    """Append a constant 1 to the raw action and L1-normalize to proportions."""
    a_h = np.asarray(a_h, dtype=float)
    if np.any(a_h < 0):
        raise ValueError("raw high-level action must be nonnegative")
    full = np.append(a_h, 1.0)
    return full / full.sum()


def greedy_redistribute(proportions: np.ndarray, n_responders: int, caps: list[int]) -> np.ndarray:
    """Integer region counts from target proportions, capped by depot counts.

    Iteratively floors the proportional shares, hands out the remainder one by
    one to the region with the largest shortfall against its expected share
    (ties to the lowest region index), then fixes any region exceeding its cap
    at the cap and reruns on the remaining responders and regions.
    """
    p = np.asarray(proportions, dtype=float)
    caps_arr = np.asarray(caps, dtype=int)
    if abs(p.sum() - 1.0) > 1e-6 or np.any(p < 0):
        raise ValueError("proportions must be nonnegative and sum to 1")
    if n_responders > caps_arr.sum():
        raise InfeasibleError(f"{n_responders} responders exceed total capacity {caps_arr.sum()}")
    n_regions = len(p)
    counts = np.zeros(n_regions, dtype=int)
    active = np.ones(n_regions, dtype=bool)
    v_avail = int(n_responders)
    for _ in range(n_regions + 1):
        s = float(p[active].sum())
        for g in np.flatnonzero(active):
            share = p[g] / s if s > 0 else 0.0
            counts[g] = int(math.floor(share * v_avail))
        v_remain = v_avail - int(counts[active].sum())
        while v_remain > 0:
            shortfall = np.where(active, p * v_avail - counts, -np.inf)
            g = int(np.argmax(shortfall))
            counts[g] += 1
            v_remain -= 1
        removed = False
        for g in np.flatnonzero(active):
            if counts[g] > caps_arr[g]:
                counts[g] = int(caps_arr[g])
                active[g] = False
                v_avail -= int(caps_arr[g])
                removed = True
        if not removed:
            break
    else:
        raise RuntimeError("redistribution failed to terminate")
    if counts.sum() != n_responders:
        raise RuntimeError("redistribution lost or invented responders")
    return counts


# --- min-cost flow ----------------------------------------------------------

@dataclass
class _Edge:
    dst: int
    cap: int
    cost: float
    flow: int = 0


class _FlowNet:
    """Residual network for successive shortest paths with potentials."""

    def __init__(self, n_nodes: int):
        self.adj: list[list[int]] = [[] for _ in range(n_nodes)]
        self.edges: list[_Edge] = []

    def add_edge(self, u: int, v: int, cap: int, cost: float) -> int:
        idx = len(self.edges)
        self.edges.append(_Edge(v, cap, cost))
        self.edges.append(_Edge(u, 0, -cost))
        self.adj[u].append(idx)
        self.adj[v].append(idx + 1)
        return idx

    def residual(self, eid: int) -> int:
        return self.edges[eid].cap - self.edges[eid].flow

    def min_cost_flow(self, s: int, t: int, amount: int) -> float:
        """Ship `amount` units s->t; returns total cost. Raises if short."""
        n = len(self.adj)
        potential = np.zeros(n)
        total = 0.0
        shipped = 0
        while shipped < amount:
            dist = np.full(n, np.inf)
            dist[s] = 0.0
            prev_edge = np.full(n, -1, dtype=int)
            heap: list[tuple[float, int]] = [(0.0, s)]
            done = np.zeros(n, dtype=bool)
            while heap:
                d, u = heapq.heappop(heap)
                if done[u]:
                    continue
                done[u] = True
                for eid in self.adj[u]:
                    e = self.edges[eid]
                    if self.residual(eid) <= 0:
                        continue
                    nd = d + e.cost + potential[u] - potential[e.dst]
                    if nd < dist[e.dst] - 1e-15:
                        dist[e.dst] = nd
                        prev_edge[e.dst] = eid
                        heapq.heappush(heap, (nd, e.dst))
            if not np.isfinite(dist[t]):
                raise InfeasibleError("flow network cannot carry the required amount")
            for u in range(n):
                if np.isfinite(dist[u]):
                    potential[u] += dist[u]
            # bottleneck along the augmenting path
            push = amount - shipped
            v = t
            while v != s:
                eid = prev_edge[v]
                push = min(push, self.residual(eid))
                v = self.edges[eid ^ 1].dst
            v = t
            while v != s:
                eid = prev_edge[v]
                self.edges[eid].flow += push
                self.edges[eid ^ 1].flow -= push
                total += push * self.edges[eid].cost
                v = self.edges[eid ^ 1].dst
            shipped += push
        return total


def min_cost_flow_assign(
    counts_prev: dict[int, int],
    counts_new: dict[int, int],
    responder_regions: dict[int, int],
    responder_depots: dict[int, int],
    region_depots: dict[int, list[int]],
    phi,
) -> dict[int, int]:
    """Pick which responders change region and their target depots.

    Builds the layered flow graph source -> shrinking regions -> their
    responders -> unoccupied depots of growing regions -> growing regions ->
    sink, with unit capacities in between and cost phi(responder, depot) on
    the responder->depot edges, then decodes an integral min-cost flow as
    moves. Returns only the moved responders, as {responder id: depot id}.
    """
    if set(counts_prev) != set(counts_new):
        raise ValueError("count vectors must cover the same regions")
    leaving = sorted(g for g in counts_prev if counts_prev[g] > counts_new[g])
    arriving = sorted(g for g in counts_prev if counts_prev[g] < counts_new[g])
    n_moves = sum(counts_prev[g] - counts_new[g] for g in leaving)
    if n_moves != sum(counts_new[g] - counts_prev[g] for g in arriving):
        raise InfeasibleError("departures and arrivals do not balance")
    if n_moves == 0:
        return {}

    movers = sorted(v for v, g in responder_regions.items() if g in leaving)
    occupied = set(responder_depots.values())
    open_depots = sorted(
        d for g in arriving for d in region_depots[g] if d not in occupied
    )

    source = 0
    leave_node = {g: 1 + i for i, g in enumerate(leaving)}
    resp_node = {v: 1 + len(leaving) + i for i, v in enumerate(movers)}
    depot_node = {d: 1 + len(leaving) + len(movers) + i for i, d in enumerate(open_depots)}
    arrive_node = {g: 1 + len(leaving) + len(movers) + len(open_depots) + i
                   for i, g in enumerate(arriving)}
    sink = 1 + len(leaving) + len(movers) + len(open_depots) + len(arriving)

    net = _FlowNet(sink + 1)
    for g in leaving:
        net.add_edge(source, leave_node[g], counts_prev[g] - counts_new[g], 0.0)
    for v in movers:
        net.add_edge(leave_node[responder_regions[v]], resp_node[v], 1, 0.0)
    move_edges: dict[int, tuple[int, int]] = {}
    depot_region = {d: g for g in arriving for d in region_depots[g]}
    for v in movers:
        for d in open_depots:
            eid = net.add_edge(resp_node[v], depot_node[d], 1, float(phi(v, d)))
            move_edges[eid] = (v, d)
    for d in open_depots:
        net.add_edge(depot_node[d], arrive_node[depot_region[d]], 1, 0.0)
    for g in arriving:
        net.add_edge(arrive_node[g], sink, counts_new[g] - counts_prev[g], 0.0)

    net.min_cost_flow(source, sink, n_moves)
    moves = {v: d for eid, (v, d) in move_edges.items() if net.edges[eid].flow > 0}
    if len(moves) != n_moves:
        raise RuntimeError("flow decoding produced a partial move set")
    return moves
