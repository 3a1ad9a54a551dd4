"""Locality-aware MapReduce over the region store.

Three analysis levels are supported:

``image-based``
    one map per row, no reduce; each row's transformed bytes go to the
    target table under the same rowkey.
``dataset-based``
    one map covering the whole selection, then a reduce to the mean image.
``large-dataset``
    ``eta``-sized chunks mapped in parallel to partial sums, shuffled to a
    single reducer, reduced to the mean image.

Task durations in :class:`JobMetrics` are simulated from byte counts and the
node profiles so metrics are reproducible; measured wall time is kept
separately in ``JobMetrics.elapsed_s``.
"""

from __future__ import annotations

import csv
import io
import threading
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import blob
from .cost_model import avg_ants
from .store import (NotFound, ScanReport, Store, Table, TableSchema, ValidationError,
                    as_key, key_successor)
from .topology import NodeProfile

IMAGE_BASED = "image-based"
DATASET_BASED = "dataset-based"
LARGE_DATASET = "large-dataset"
LEVELS = (IMAGE_BASED, DATASET_BASED, LARGE_DATASET)

MB = 1024 * 1024


class TaskError(RuntimeError):
    def __init__(self, rowkey: bytes, msg: str):
        super().__init__(f"{rowkey.decode('utf-8', 'replace')}: {msg}")
        self.rowkey = rowkey


@dataclass(frozen=True)
class MapTaskSpec:
    start_key: bytes
    stop_key: bytes
    skip_keys: frozenset = frozenset()
    data_family: str = "image"
    data_qualifier: str = "data"
    index_family: str = "index"
    index_qualifier: str = "meta"

    def __post_init__(self):
        object.__setattr__(self, "start_key", as_key(self.start_key))
        object.__setattr__(self, "stop_key", as_key(self.stop_key))
        object.__setattr__(self, "skip_keys", frozenset(as_key(k) for k in self.skip_keys))
        if not self.start_key < self.stop_key:
            raise ValidationError(f"task range [{self.start_key!r}, {self.stop_key!r}) is empty")
        for k in self.skip_keys:
            if not self.start_key <= k < self.stop_key:
                raise ValidationError(f"skip key {k!r} outside task range")


@dataclass
class JobTemplate:
    source_table: str
    target_table: str
    query: tuple[str, str]
    data: tuple[str, str]
    target: tuple[str, str]
    tasks: list[MapTaskSpec]
    level: str = LARGE_DATASET
    job_id: str = "job"
    task_delay_s: float = 0.0

    def __post_init__(self):
        if self.level not in LEVELS:
            raise ValidationError(f"unknown analysis level {self.level!r}")
        if not self.tasks:
            raise ValidationError("job template has no map tasks")
        for pair in (self.query, self.data, self.target):
            if len(pair) != 2:
                raise ValidationError("family/qualifier slots must be pairs")

    @property
    def result_rowkey(self) -> bytes:
        return f"{self.job_id}/mean".encode()


@dataclass
class PartialAverage:
    voxel_sum: np.ndarray
    count: int
    dims: tuple[int, ...]

    @classmethod
    def empty(cls) -> "PartialAverage":
        return cls(np.zeros(0), 0, ())


@dataclass
class TaskMetrics:
    task_id: int
    node: str
    local: bool
    wave: int
    rows: int = 0
    bytes_index: int = 0
    bytes_image: int = 0
    duration_s: float = 0.0


@dataclass
class JobMetrics:
    job_id: str
    level: str
    tasks: list[TaskMetrics] = field(default_factory=list)
    map_s: float = 0.0
    shuffle_s: float = 0.0
    reduce_s: float = 0.0
    reducer: str | None = None
    shuffle_bytes: int = 0
    elapsed_s: float = 0.0
    peak_concurrency: dict[str, int] = field(default_factory=dict)

    @property
    def wall_s(self) -> float:
        return self.map_s + self.shuffle_s + self.reduce_s

    @property
    def resource_s(self) -> float:
        return sum(t.duration_s for t in self.tasks) + self.shuffle_s + self.reduce_s

    @property
    def rack_local_fraction(self) -> float:
        """Fraction of map tasks that ran on the node holding their data."""
        if not self.tasks:
            return 0.0
        return sum(t.local for t in self.tasks) / len(self.tasks)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["task_id", "node", "local", "bytes_index", "bytes_image", "duration_s"])
        for t in self.tasks:
            w.writerow([t.task_id, t.node, int(t.local), t.bytes_index, t.bytes_image, f"{t.duration_s:.6f}"])
        return buf.getvalue()

    def summary(self) -> dict:
        return {
            "job_id": self.job_id,
            "level": self.level,
            "tasks": len(self.tasks),
            "rack_local_fraction": self.rack_local_fraction,
            "map_s": self.map_s,
            "shuffle_s": self.shuffle_s,
            "reduce_s": self.reduce_s,
            "wall_s": self.wall_s,
            "resource_s": self.resource_s,
            "reducer": self.reducer,
            "shuffle_bytes": self.shuffle_bytes,
        }


@dataclass
class JobResult:
    result: bytes | None
    metrics: JobMetrics
    result_rowkey: bytes | None = None
    outputs: int = 0


# --------------------------------------------------------------------------
# planning


def plan_map_tasks(rowkeys: Sequence, eta: int, skip_keys: Iterable = (), **coords) -> list[MapTaskSpec]:
    """Chunk the surviving keys into runs of ``eta``.

    Each task spans ``[first, successor(last))`` of its chunk; skipped keys
    falling inside that span are carried in the task's skip set.
    """
    if eta < 1:
        raise ValidationError("eta must be >= 1")
    keys = [as_key(k) for k in rowkeys]
    if not keys:
        raise ValidationError("no rowkeys to plan")
    for a, b in zip(keys, keys[1:]):
        if not a < b:
            raise ValidationError("rowkeys must be ascending and unique")
    skip = {as_key(k) for k in skip_keys}
    tasks = []
    chunk: list[bytes] = []
    pending_skips: list[bytes] = []

    def close():
        stop = key_successor(chunk[-1])
        inner = [k for k in pending_skips if chunk[0] <= k < stop]
        tasks.append(MapTaskSpec(chunk[0], stop, frozenset(inner), **coords))

    for k in keys:
        if k in skip:
            if chunk:
                pending_skips.append(k)
            continue
        chunk.append(k)
        if len(chunk) == eta:
            close()
            chunk, pending_skips = [], []
    if chunk:
        close()
    return tasks


def read_task_pairs(path, skip_keys: Iterable = (), **coords) -> list[MapTaskSpec]:
    """Parse ``start<TAB>stop`` lines; skip keys are attached to the task containing them."""
    skip = sorted(as_key(k) for k in skip_keys)
    tasks = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValidationError(f"{path}:{n}: expected start<TAB>stop")
            lo, hi = (p.encode() for p in parts)
            tasks.append(MapTaskSpec(lo, hi, frozenset(k for k in skip if lo <= k < hi), **coords))
    return tasks


def write_task_pairs(path, tasks: Sequence[MapTaskSpec]):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t in tasks:
            fh.write(f"{t.start_key.decode()}\t{t.stop_key.decode()}\n")


@dataclass(frozen=True)
class Assignment:
    task_id: int
    node: str
    local: bool
    wave: int


def schedule(tasks: Sequence[MapTaskSpec], table: Table, profiles: Sequence[NodeProfile]) -> list[Assignment]:
    """Place each task on its data's node when it has a free core this wave.

    Otherwise the task spills, non-local, to the least loaded node with a
    free core; when every core is busy a new wave starts.
    """
    cores = {p.node_id: p.cores for p in profiles}
    if not cores:
        raise ValidationError("no node profiles")
    order = sorted(cores)
    out = []
    wave = 0
    load = {n: 0 for n in order}
    for i, task in enumerate(tasks):
        home = table.region_for_key(task.start_key).node
        if all(load[n] >= cores[n] for n in order):
            wave += 1
            load = {n: 0 for n in order}
        if home in cores and load[home] < cores[home]:
            node, local = home, True
        else:
            node = min((n for n in order if load[n] < cores[n]), key=lambda n: (load[n] / cores[n], n))
            local = False
        load[node] += 1
        out.append(Assignment(i, node, local, wave))
    return out


# --------------------------------------------------------------------------
# map / reduce


def map_partial_average(task: MapTaskSpec, table: Table, report: ScanReport | None = None) -> PartialAverage:
    report = ScanReport() if report is None else report
    acc = None
    dims: tuple[int, ...] = ()
    count = 0
    for key, value in table.scan(task.data_family, task.data_qualifier, task.start_key,
                                 task.stop_key, task.skip_keys, report):
        try:
            vol = blob.decode(value)
        except blob.BlobError as exc:
            raise TaskError(key, str(exc)) from None
        if acc is None:
            dims = vol.shape
            acc = np.zeros(vol.size, dtype=np.float64)
        elif vol.shape != dims:
            raise TaskError(key, f"dims {vol.shape} differ from {dims}")
        acc += vol.reshape(-1)
        count += 1
    if acc is None:
        return PartialAverage.empty()
    return PartialAverage(acc, count, tuple(dims))


def merge_partials(partials: Sequence[PartialAverage]) -> PartialAverage:
    acc = None
    dims: tuple[int, ...] = ()
    count = 0
    for p in partials:
        if p.count == 0:
            continue
        if acc is None:
            acc, dims = np.array(p.voxel_sum, dtype=np.float64), p.dims
        elif p.dims != dims:
            raise ValidationError(f"partial dims {p.dims} differ from {dims}")
        else:
            acc += p.voxel_sum
        count += p.count
    if acc is None:
        return PartialAverage.empty()
    return PartialAverage(acc, count, dims)


def reduce_average(partials: Sequence[PartialAverage]) -> bytes:
    if not partials:
        raise ValidationError("no partials to reduce")
    total = merge_partials(partials)
    if total.count == 0:
        raise ValidationError("partials hold zero images")
    return blob.encode((total.voxel_sum / total.count).reshape(total.dims))


def compress_row(value: bytes) -> bytes:
    return zlib.compress(value, 6)


# --------------------------------------------------------------------------
# job driver


def build_template(store: Store, source_table: str, target_table: str, *, level: str = LARGE_DATASET,
                   eta: int = 50, query=("index", "meta"), data=("image", "data"), target=("result", "data"),
                   task_pairs=None, skip_keys: Iterable = (), job_id: str = "job",
                   task_delay_s: float = 0.0) -> JobTemplate:
    """Build a template from explicit task pairs, or by chunking the table's keys."""
    coords = dict(data_family=data[0], data_qualifier=data[1], index_family=query[0], index_qualifier=query[1])
    skip = {as_key(k) for k in skip_keys}
    if task_pairs is not None:
        tasks = [MapTaskSpec(lo, hi, frozenset(k for k in skip if as_key(lo) <= k < as_key(hi)), **coords)
                 for lo, hi in task_pairs]
    else:
        keys = store.table(source_table).keys(query[0])
        tasks = plan_map_tasks(keys, eta, skip, **coords)
    return JobTemplate(source_table, target_table, tuple(query), tuple(data), tuple(target), tasks,
                       level, job_id, task_delay_s)


def _selected_keys(table: Table, task: MapTaskSpec) -> list[bytes]:
    return [k for k in table.keys(task.data_family, task.start_key, task.stop_key) if k not in task.skip_keys]


def _expand_level(template: JobTemplate, table: Table) -> list[MapTaskSpec]:
    if template.level == LARGE_DATASET:
        return list(template.tasks)
    keys = sorted({k for t in template.tasks for k in _selected_keys(table, t)})
    if not keys:
        raise ValidationError("job selects no rows")
    like = template.tasks[0]
    coords = dict(data_family=like.data_family, data_qualifier=like.data_qualifier,
                  index_family=like.index_family, index_qualifier=like.index_qualifier)
    if template.level == IMAGE_BASED:
        return [MapTaskSpec(k, key_successor(k), frozenset(), **coords) for k in keys]
    lo, hi = keys[0], key_successor(keys[-1])
    chosen = set(keys)
    skip = frozenset(k for k in table.keys(like.data_family, lo, hi) if k not in chosen)
    return [MapTaskSpec(lo, hi, skip, **coords)]


def _reducer_node(profiles: Sequence[NodeProfile]) -> NodeProfile:
    return min(profiles, key=lambda p: (-p.weight, p.node_id))


def run_job(template: JobTemplate, store: Store, profiles: Sequence[NodeProfile], *,
            bandwidth_mb_s: float = 70.0, row_op: Callable[[bytes], bytes] = compress_row,
            max_workers: int = 4, real_delay: bool = True) -> JobResult:
    """Run a job; target-table writes happen only after every task succeeds.

    ``template.task_delay_s`` pads each task's simulated duration; with
    ``real_delay`` the worker also sleeps for it.
    """
    t0 = time.perf_counter()
    source = store.table(template.source_table)
    for fam, qual in (template.query, template.data):
        if not source.schema.has_column(fam, qual):
            raise ValidationError(f"{fam}:{qual} not in source table {source.name!r}")
    tasks = _expand_level(template, source)
    plan = schedule(tasks, source, profiles)
    prof = {p.node_id: p for p in profiles}
    metrics = JobMetrics(template.job_id, template.level)
    slots = {n: threading.BoundedSemaphore(p.cores) for n, p in prof.items()}
    running = {n: 0 for n in prof}
    peak = {n: 0 for n in prof}
    gauge = threading.Lock()
    data_fam, index_fam = template.data[0], template.query[0]

    def execute(task: MapTaskSpec, a: Assignment):
        with slots[a.node]:
            with gauge:
                running[a.node] += 1
                peak[a.node] = max(peak[a.node], running[a.node])
            try:
                report = ScanReport()
                if template.level == IMAGE_BASED:
                    out = [(k, row_op(v)) for k, v in source.scan(
                        task.data_family, task.data_qualifier, task.start_key, task.stop_key,
                        task.skip_keys, report)]
                    rows = len(out)
                else:
                    out = map_partial_average(task, source, report)
                    rows = out.count
                if real_delay and template.task_delay_s > 0:
                    time.sleep(template.task_delay_s)
            finally:
                with gauge:
                    running[a.node] -= 1
        node = prof[a.node]
        read = report.total_bytes
        dur = read / MB / node.disk_read_mb_s + template.task_delay_s
        if not a.local:
            dur += read / MB / bandwidth_mb_s
        if template.level != IMAGE_BASED:
            dur += avg_ants(rows)
        tm = TaskMetrics(a.task_id, a.node, a.local, a.wave, rows,
                         report.bytes_read.get(index_fam, 0) if index_fam != data_fam else 0,
                         report.bytes_read.get(data_fam, 0), dur)
        return out, tm

    results: list = [None] * len(tasks)
    waves = sorted({a.wave for a in plan})
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        for w in waves:
            batch = [a for a in plan if a.wave == w]
            futs = [(a, pool.submit(execute, tasks[a.task_id], a)) for a in batch]
            for a, fut in futs:
                results[a.task_id] = fut.result()
            metrics.map_s += max(results[a.task_id][1].duration_s for a in batch)
    metrics.tasks = [tm for _, tm in results]
    metrics.peak_concurrency = peak

    if template.level == IMAGE_BASED:
        cells = [(k, template.target[0], template.target[1], v) for out, _ in results for k, v in out]
        target = _target_table(store, template)
        target.put_many(cells)
        metrics.elapsed_s = time.perf_counter() - t0
        return JobResult(None, metrics, None, len(cells))

    partials = [out for out, _ in results]
    reducer = _reducer_node(profiles)
    metrics.reducer = reducer.node_id
    shuffled = sum(p.voxel_sum.nbytes for p, tm in zip(partials, metrics.tasks)
                   if tm.node != reducer.node_id and p.count)
    metrics.shuffle_bytes = shuffled
    metrics.shuffle_s = shuffled / MB / bandwidth_mb_s
    mean = reduce_average(partials)  # raises before any write
    metrics.reduce_s = avg_ants(sum(1 for p in partials if p.count)) + len(mean) / MB / reducer.disk_write_mb_s
    target = _target_table(store, template)
    target.put(template.result_rowkey, template.target[0], template.target[1], mean)
    metrics.elapsed_s = time.perf_counter() - t0
    return JobResult(mean, metrics, template.result_rowkey, 1)


def _target_table(store: Store, template: JobTemplate) -> Table:
    fam, qual = template.target
    if store.has_table(template.target_table):
        t = store.table(template.target_table)
        if not t.schema.has_column(fam, qual):
            raise ValidationError(f"target table {t.name!r} lacks {fam}:{qual}")
        return t
    return store.create_table(TableSchema(template.target_table, ((fam, (qual,)),)))


def read_result(store: Store, template: JobTemplate) -> bytes:
    try:
        return store.table(template.target_table).get(template.result_rowkey, *template.target)
    except NotFound:
        raise NotFound(f"job {template.job_id!r} has no result") from None
