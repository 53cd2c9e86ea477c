"""Charger-port allocation across census blocks and feeder demand roll-up.

The allocation maximizes sum(d_i * ((1 - alpha) * mu_i + alpha * eps_i))
subject to per-block capacity caps and an exact city-wide port budget.
Because the objective is linear and the feasible set is a box intersected
with one cardinality constraint, a descending-coefficient greedy fill is
provably optimal; ties break on block id for determinism.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass


class DemandInfeasibleError(ValueError):
    """Total block capacity cannot absorb the port budget."""

    def __init__(self, budget_ports: int, capacity: int):
        self.shortfall = budget_ports - capacity
        super().__init__(
            f"port budget {budget_ports} exceeds total capacity {capacity} "
            f"(shortfall {self.shortfall})"
        )


@dataclass(frozen=True)
class CensusBlock:
    id: str
    mu: float  # near-term demand score
    eps: float  # equity need score
    cap: int  # port capacity
    latitude: float = 0.0
    longitude: float = 0.0
    in_feeder: bool = False

    def __post_init__(self):
        if not (0.0 <= self.mu <= 1.0 and 0.0 <= self.eps <= 1.0):
            raise ValueError(f"block {self.id}: scores must lie in [0, 1]")
        if self.cap < 0:
            raise ValueError(f"block {self.id}: capacity must be non-negative")


@dataclass(frozen=True)
class DemandAllocation:
    d: dict  # block id -> allocated ports
    objective_value: float
    alpha: float
    budget_ports: int


def allocate_ports(blocks, alpha: float, budget_ports: int) -> DemandAllocation:
    """Optimal greedy fill of the port budget by descending score coefficient."""
    if not (0.0 <= alpha <= 1.0):
        raise ValueError("alpha must lie in [0, 1]")
    if budget_ports < 0:
        raise ValueError("budget_ports must be non-negative")
    capacity = sum(b.cap for b in blocks)
    if capacity < budget_ports:
        raise DemandInfeasibleError(budget_ports, capacity)

    def coef(b: CensusBlock) -> float:
        return (1.0 - alpha) * b.mu + alpha * b.eps

    d = {b.id: 0 for b in blocks}
    remaining = budget_ports
    for b in sorted(blocks, key=lambda b: (-coef(b), b.id)):
        take = min(b.cap, remaining)
        d[b.id] = take
        remaining -= take
        if remaining == 0:
            break
    objective = sum(coef(b) * d[b.id] for b in blocks)
    return DemandAllocation(d=d, objective_value=objective, alpha=alpha,
                            budget_ports=budget_ports)


def feeder_demand(allocation: DemandAllocation, blocks) -> int:
    """Total allocated ports over the blocks mapped onto the feeder."""
    return sum(allocation.d[b.id] for b in blocks if b.in_feeder)


# -- CSV interchange -----------------------------------------------------------


def read_blocks_csv(path) -> list:
    """Load blocks from ``id,mu,eps,cap,lat,lon,in_feeder`` rows."""
    blocks = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            blocks.append(
                CensusBlock(
                    id=row["id"],
                    mu=float(row["mu"]),
                    eps=float(row["eps"]),
                    cap=int(row["cap"]),
                    latitude=float(row.get("lat", 0.0) or 0.0),
                    longitude=float(row.get("lon", 0.0) or 0.0),
                    in_feeder=str(row.get("in_feeder", "")).strip().lower()
                    in ("1", "true", "yes"),
                )
            )
    return blocks


def write_allocation_csv(path, allocation: DemandAllocation) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "d"])
        for bid in allocation.d:
            writer.writerow([bid, allocation.d[bid]])
