"""Cluster model and the offline greedy load balancer.

Each node's share of a table's bytes should match its share of the cluster's
``cores * MIPS``. The balancer only moves whole regions.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from .store import IntegrityError, Region, Store, Table, ValidationError


@dataclass(frozen=True)
class NodeProfile:
    node_id: str
    cores: int
    mips: float
    mem_mb: float = 4096.0
    disk_read_mb_s: float = 100.0
    disk_write_mb_s: float = 65.0

    def __post_init__(self):
        for name in ("cores", "mips", "mem_mb", "disk_read_mb_s", "disk_write_mb_s"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"node {self.node_id}: {name} must be > 0")

    @property
    def weight(self) -> float:
        return self.cores * self.mips


@dataclass
class Placement:
    assignments: dict[int, str]
    per_node_bytes: dict[str, int]

    @classmethod
    def from_regions(cls, regions: Iterable[Region], nodes: Iterable[str] = ()) -> "Placement":
        per = {n: 0 for n in nodes}
        assign = {}
        for r in regions:
            assign[r.region_id] = r.node
            per[r.node] = per.get(r.node, 0) + r.byte_size
        return cls(assign, per)

    @property
    def total_bytes(self) -> int:
        return sum(self.per_node_bytes.values())


@dataclass
class MovePlan:
    moves: list[tuple[int, str, str]] = field(default_factory=list)
    initial_deviation: float = 0.0
    predicted_deviation: float = 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["region_id", "from", "to"])
        w.writerows(self.moves)
        return buf.getvalue()


def read_cluster(path) -> list[NodeProfile]:
    """Parse ``node_id cores mips mem_mb disk_read disk_write`` TSV lines."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 6:
                raise ValidationError(f"{path}:{n}: expected 6 tab-separated fields")
            out.append(NodeProfile(parts[0], int(parts[1]), *map(float, parts[2:])))
    if len({p.node_id for p in out}) != len(out):
        raise ValidationError(f"{path}: duplicate node id")
    return out


def write_cluster(path, profiles: Sequence[NodeProfile]):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in profiles:
            fh.write(f"{p.node_id}\t{p.cores}\t{p.mips:g}\t{p.mem_mb:g}\t"
                     f"{p.disk_read_mb_s:g}\t{p.disk_write_mb_s:g}\n")


def reference_cluster(mips_slow: float = 1000.0, mips_fast: float = 1500.0) -> list[NodeProfile]:
    """Eight 12-core slow machines plus four 32-core fast ones (224 cores)."""
    slow = [NodeProfile(f"slow{i:02d}", 12, mips_slow) for i in range(8)]
    fast = [NodeProfile(f"fast{i:02d}", 32, mips_fast) for i in range(4)]
    return slow + fast


def target_fractions(profiles: Sequence[NodeProfile]) -> dict[str, float]:
    if not profiles:
        raise ValidationError("no node profiles")
    total = sum(p.weight for p in profiles)
    return {p.node_id: p.weight / total for p in profiles}


def _deviation(per_node: Mapping[str, int], total: int, targets: Mapping[str, float]) -> float:
    nodes = set(targets) | set(per_node)
    return 0.5 * sum(abs(per_node.get(n, 0) / total - targets.get(n, 0.0)) for n in nodes)


def placement_deviation(placement: Placement, profiles: Sequence[NodeProfile]) -> float:
    """Total-variation distance between actual and target byte fractions."""
    total = placement.total_bytes
    if total == 0:
        return 0.0
    return _deviation(placement.per_node_bytes, total, target_fractions(profiles))


def balance(placement: Placement, regions: Sequence[Region], profiles: Sequence[NodeProfile]) -> MovePlan:
    """Plan region moves greedily until no single move lowers the deviation.

    Each step takes the most overloaded node and tries its regions largest
    first against the most underloaded node; if nothing helps it falls back
    to the next (overloaded, underloaded) pair. Ties go to the lowest node id
    and then the lowest region id.
    """
    targets = target_fractions(profiles)
    sizes = {r.region_id: r.byte_size for r in regions}
    assign = dict(placement.assignments)
    for rid in sizes:
        if rid not in assign:
            raise ValidationError(f"region {rid} has no placement")
    per = {n: 0 for n in targets}
    for rid, node in assign.items():
        per[node] = per.get(node, 0) + sizes.get(rid, 0)
    total = sum(per.values())
    if total <= 0:
        raise ValidationError("nothing to balance: table holds no bytes")

    on_node: dict[str, list[int]] = {n: [] for n in per}
    for rid in sorted(assign):
        on_node[assign[rid]].append(rid)

    dev = _deviation(per, total, targets)
    plan = MovePlan(initial_deviation=dev)
    max_iter = max(1, len(sizes) * len(per))
    for _ in range(max_iter):
        excess = {n: per[n] / total - targets.get(n, 0.0) for n in per}
        over = sorted((n for n in per if excess[n] > 0), key=lambda n: (-excess[n], n))
        under = sorted((n for n in targets if excess[n] < 0), key=lambda n: (excess[n], n))
        move = None
        for src in over:
            cands = sorted(on_node[src], key=lambda r: (-sizes[r], r))
            for dst in under:
                for rid in cands:
                    s = sizes[rid]
                    per[src] -= s
                    per[dst] += s
                    new = _deviation(per, total, targets)
                    per[src] += s
                    per[dst] -= s
                    if new < dev - 1e-15:
                        move = (rid, src, dst, new)
                        break
                if move:
                    break
            if move:
                break
        if move is None:
            break
        rid, src, dst, dev = move
        per[src] -= sizes[rid]
        per[dst] += sizes[rid]
        on_node[src].remove(rid)
        on_node[dst].append(rid)
        plan.moves.append((rid, src, dst))
    plan.predicted_deviation = dev
    return plan


def table_placement(table: Table, profiles: Sequence[NodeProfile] = ()) -> Placement:
    return Placement.from_regions(table.regions, [p.node_id for p in profiles])


def apply_moves(plan: MovePlan, table: Table, store: Store | None = None) -> Placement:
    """Relocate region files between node directories per ``plan``.

    Moves are applied in order; a failing move raises ``IntegrityError``
    after earlier moves have landed and leaves its own region in place.
    """
    current = {r.region_id: r.node for r in table.regions}
    for rid, src, dst in plan.moves:
        if src == dst:
            raise ValidationError(f"move of region {rid} has identical endpoints")
        if rid not in current:
            raise IntegrityError(f"region {rid} not present in table {table.name!r}")
        if current[rid] != src:
            raise IntegrityError(f"region {rid} is on {current[rid]}, plan expects {src}")
        table.move_region(rid, dst)
        current[rid] = dst
    return Placement.from_regions(table.regions, (store or table.store).nodes)
