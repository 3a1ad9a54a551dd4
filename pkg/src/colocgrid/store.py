"""Embedded region-partitioned column-family store.

Data model is ``table -> column family -> qualifier -> value`` addressed by a
byte rowkey. Each table is a sorted, disjoint cover of the keyspace by
regions; every region lives on one node and is persisted as an append-only
value log plus a JSON index under ``<root>/nodes/<node>/<table>/``.

Reading any qualifier of a row materializes every cell of that row's family,
since a family is the storage unit. This is what makes the single-family
("naive") table scheme pay for image bytes on every metadata lookup.
"""

from __future__ import annotations

import bisect
import hashlib
import json
import os
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import filelock

SIZE_THRESHOLD = "size-threshold"
PRESPLIT_ONLY = "pre-split-only"
SPLIT_POLICIES = (SIZE_THRESHOLD, PRESPLIT_ONLY)

DEFAULT_SPLIT_THRESHOLD = 64 * 1024 * 1024


class StoreError(Exception):
    pass


class ValidationError(StoreError, ValueError):
    pass


class ConflictError(StoreError):
    pass


class NotFound(StoreError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class IntegrityError(StoreError):
    pass


class BusyError(StoreError):
    pass


def as_key(key) -> bytes:
    if isinstance(key, bytes):
        return key
    if isinstance(key, str):
        return key.encode("utf-8")
    raise TypeError(f"rowkey must be str or bytes, not {type(key).__name__}")


def key_successor(key: bytes) -> bytes:
    """Smallest rowkey strictly greater than ``key``."""
    return key + b"\x00"


# --------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class TableSchema:
    name: str
    families: tuple[tuple[str, tuple[str, ...]], ...]
    split_policy: str = SIZE_THRESHOLD
    split_threshold_bytes: int = DEFAULT_SPLIT_THRESHOLD

    def __post_init__(self):
        fams = tuple((f, tuple(qs)) for f, qs in self.families)
        object.__setattr__(self, "families", fams)
        if not self.name or "/" in self.name or self.name.startswith("."):
            raise ValidationError(f"invalid table name {self.name!r}")
        if not fams:
            raise ValidationError("schema needs at least one column family")
        names = [f for f, _ in fams]
        if len(set(names)) != len(names):
            raise ValidationError("duplicate column family in schema")
        for f, qs in fams:
            if not f or not qs:
                raise ValidationError(f"family {f!r} needs a name and >= 1 qualifier")
            if len(set(qs)) != len(qs):
                raise ValidationError(f"duplicate qualifier in family {f!r}")
        if self.split_policy not in SPLIT_POLICIES:
            raise ValidationError(f"unknown split policy {self.split_policy!r}")
        if int(self.split_threshold_bytes) <= 0:
            raise ValidationError("split_threshold_bytes must be positive")

    def has_column(self, family: str, qualifier: str) -> bool:
        return any(f == family and qualifier in qs for f, qs in self.families)

    def qualifiers(self, family: str) -> tuple[str, ...]:
        for f, qs in self.families:
            if f == family:
                return qs
        raise ValidationError(f"unknown column family {family!r}")

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "families": [[f, list(qs)] for f, qs in self.families],
            "split_policy": self.split_policy,
            "split_threshold_bytes": int(self.split_threshold_bytes),
        }

    @classmethod
    def from_json(cls, d: dict) -> "TableSchema":
        return cls(d["name"], tuple((f, tuple(qs)) for f, qs in d["families"]),
                   d["split_policy"], int(d["split_threshold_bytes"]))


@dataclass(frozen=True)
class CellCoordinate:
    table: str
    rowkey: bytes
    family: str
    qualifier: str


@dataclass
class Region:
    region_id: int
    start_key: bytes  # inclusive; b"" is -inf
    stop_key: bytes | None  # exclusive; None is +inf
    byte_size: int
    node: str

    def contains(self, key: bytes) -> bool:
        return key >= self.start_key and (self.stop_key is None or key < self.stop_key)

    def to_json(self) -> dict:
        return {
            "region_id": self.region_id,
            "start_key": self.start_key.hex(),
            "stop_key": None if self.stop_key is None else self.stop_key.hex(),
            "byte_size": self.byte_size,
            "node": self.node,
        }

    @classmethod
    def from_json(cls, d: dict) -> "Region":
        stop = d["stop_key"]
        return cls(d["region_id"], bytes.fromhex(d["start_key"]),
                   None if stop is None else bytes.fromhex(stop), d["byte_size"], d["node"])


@dataclass(frozen=True)
class ManifestEntry:
    source_path: str
    unique_name: str
    family: str
    qualifier: str


@dataclass
class UploadManifest:
    entries: list[ManifestEntry]
    overwrite: bool = False
    presplit_keys: list[bytes] | None = None

    def __post_init__(self):
        names = [e.unique_name for e in self.entries]
        if len(set(names)) != len(names):
            raise ValidationError("unique names repeat within manifest")
        if self.presplit_keys is not None:
            self.presplit_keys = [as_key(k) for k in self.presplit_keys]
            _check_increasing(self.presplit_keys)


@dataclass
class UploadReport:
    stored: int = 0
    skipped: int = 0
    overwritten: int = 0
    errors: list[tuple[str, str]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.errors


@dataclass
class ScanReport:
    rows_visited: int = 0
    bytes_read: dict[str, int] = field(default_factory=dict)

    def add(self, family: str, n: int):
        self.bytes_read[family] = self.bytes_read.get(family, 0) + n

    def merge(self, other: "ScanReport"):
        self.rows_visited += other.rows_visited
        for f, n in other.bytes_read.items():
            self.add(f, n)

    @property
    def total_bytes(self) -> int:
        return sum(self.bytes_read.values())


@dataclass
class RetrieveResult:
    rows: list[tuple[bytes, bytes]]
    report: ScanReport


def _check_increasing(keys: Sequence[bytes]):
    for a, b in zip(keys, keys[1:]):
        if not a < b:
            raise ValidationError(f"pre-split keys not strictly increasing at {b!r}")
    if keys and keys[0] == b"":
        raise ValidationError("empty pre-split key")


# --------------------------------------------------------------------------
# text file formats


def _lines(path) -> Iterator[str]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\r\n")
            if line.strip():
                yield line


def read_manifest(path, overwrite: bool = False, presplit_keys=None) -> UploadManifest:
    base = Path(path).parent
    entries = []
    for n, line in enumerate(_lines(path), 1):
        parts = line.split("\t")
        if len(parts) != 4:
            raise ValidationError(f"{path}:{n}: expected 4 tab-separated fields")
        src, name, fam, qual = parts
        if not os.path.isabs(src):
            src = str(base / src)
        entries.append(ManifestEntry(src, name, fam, qual))
    return UploadManifest(entries, overwrite, presplit_keys)


def write_manifest(path, entries: Iterable[ManifestEntry]):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e in entries:
            fh.write(f"{e.source_path}\t{e.unique_name}\t{e.family}\t{e.qualifier}\n")


def read_schema(path, name: str, split_policy=SIZE_THRESHOLD,
                split_threshold_bytes=DEFAULT_SPLIT_THRESHOLD) -> TableSchema:
    fams: dict[str, list[str]] = {}
    for n, line in enumerate(_lines(path), 1):
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValidationError(f"{path}:{n}: expected family<TAB>qualifier")
        fams.setdefault(parts[0], []).append(parts[1])
    return TableSchema(name, tuple((f, tuple(q)) for f, q in fams.items()),
                       split_policy, split_threshold_bytes)


def read_keys(path) -> list[bytes]:
    return [line.encode("utf-8") for line in _lines(path)]


# --------------------------------------------------------------------------
# locking


class RWLock:
    """Many readers or one writer."""

    def __init__(self):
        self._cond = threading.Condition(threading.Lock())
        self._readers = 0
        self._writer = False

    @contextmanager
    def read(self):
        with self._cond:
            while self._writer:
                self._cond.wait()
            self._readers += 1
        try:
            yield
        finally:
            with self._cond:
                self._readers -= 1
                if not self._readers:
                    self._cond.notify_all()

    @contextmanager
    def write(self):
        with self._cond:
            while self._writer or self._readers:
                self._cond.wait()
            self._writer = True
        try:
            yield
        finally:
            with self._cond:
                self._writer = False
                self._cond.notify_all()


def _atomic_write(path: Path, data: bytes):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


# --------------------------------------------------------------------------
# region payload


class _RegionData:
    """Cell index of one region; values live in the region's log file."""

    def __init__(self, log_path: Path):
        self.log_path = log_path
        self.keys: list[bytes] = []
        self.rows: dict[bytes, dict[tuple[str, str], tuple[int, int]]] = {}
        self.log_bytes = 0
        self.dirty = False
        self.lock = RWLock()

    @property
    def idx_path(self) -> Path:
        return self.log_path.with_suffix(".idx")

    @classmethod
    def create(cls, log_path: Path) -> "_RegionData":
        log_path.parent.mkdir(parents=True, exist_ok=True)
        log_path.touch()
        rd = cls(log_path)
        rd.dirty = True
        return rd

    @classmethod
    def load(cls, log_path: Path) -> "_RegionData":
        rd = cls(log_path)
        rd.log_bytes = log_path.stat().st_size
        if rd.idx_path.exists():
            doc = json.loads(rd.idx_path.read_text())
            for kh, fam, qual, off, ln in doc["cells"]:
                key = bytes.fromhex(kh)
                row = rd.rows.get(key)
                if row is None:
                    row = rd.rows[key] = {}
                    rd.keys.append(key)
                row[(fam, qual)] = (off, ln)
            rd.keys.sort()
        return rd

    def save_index(self):
        cells = [[k.hex(), f, q, off, ln]
                 for k in self.keys for (f, q), (off, ln) in sorted(self.rows[k].items())]
        _atomic_write(self.idx_path, json.dumps({"log_bytes": self.log_bytes, "cells": cells}).encode())
        self.dirty = False

    def read(self, off: int, ln: int) -> bytes:
        with open(self.log_path, "rb") as fh:
            fh.seek(off)
            data = fh.read(ln)
        if len(data) != ln:
            raise IntegrityError(f"short read from {self.log_path}")
        return data

    def append(self, key: bytes, fam: str, qual: str, value: bytes) -> int:
        """Store a cell; return the byte delta for the region size."""
        with open(self.log_path, "ab") as fh:
            fh.write(value)
        off = self.log_bytes
        self.log_bytes += len(value)
        row = self.rows.get(key)
        if row is None:
            row = self.rows[key] = {}
            bisect.insort(self.keys, key)
        old = row.get((fam, qual))
        row[(fam, qual)] = (off, len(value))
        self.dirty = True
        return len(value) - (old[1] if old else 0)

    def remove(self, key: bytes, fam: str, qual: str) -> int:
        row = self.rows[key]
        _, ln = row.pop((fam, qual))
        if not row:
            del self.rows[key]
            del self.keys[bisect.bisect_left(self.keys, key)]
        self.dirty = True
        return ln

    def row_bytes(self, key: bytes) -> int:
        return sum(ln for _, ln in self.rows[key].values())

    def keys_in(self, start: bytes | None, stop: bytes | None) -> list[bytes]:
        lo = 0 if start is None else bisect.bisect_left(self.keys, start)
        hi = len(self.keys) if stop is None else bisect.bisect_left(self.keys, stop)
        return self.keys[lo:hi]


# --------------------------------------------------------------------------
# table


class Table:
    def __init__(self, store: "Store", schema: TableSchema, regions: list[Region], next_region_id: int):
        self.store = store
        self.schema = schema
        self._regions = regions
        self._next_id = next_region_id
        self._data: dict[int, _RegionData] = {}
        self._map_lock = RWLock()
        self._flush_lock = threading.Lock()

    @property
    def name(self) -> str:
        return self.schema.name

    @property
    def regions(self) -> list[Region]:
        with self._map_lock.read():
            return [Region(r.region_id, r.start_key, r.stop_key, r.byte_size, r.node) for r in self._regions]

    @property
    def byte_size(self) -> int:
        return sum(r.byte_size for r in self._regions)

    def _log_path(self, region: Region) -> Path:
        return self.store.root / "nodes" / region.node / self.name / f"r{region.region_id:06d}.log"

    def _rdata(self, region: Region) -> _RegionData:
        rd = self._data.get(region.region_id)
        if rd is None:
            path = self._log_path(region)
            if not path.exists():
                raise IntegrityError(f"region {region.region_id} of {self.name} missing at {path}")
            rd = self._data[region.region_id] = _RegionData.load(path)
        return rd

    def _index_of(self, key: bytes) -> int:
        starts = [r.start_key for r in self._regions]
        return bisect.bisect_right(starts, key) - 1

    def region_for_key(self, rowkey) -> Region:
        key = as_key(rowkey)
        with self._map_lock.read():
            r = self._regions[self._index_of(key)]
            return Region(r.region_id, r.start_key, r.stop_key, r.byte_size, r.node)

    def _check_column(self, family: str, qualifier: str):
        if not self.schema.has_column(family, qualifier):
            raise ValidationError(f"{family}:{qualifier} not in schema of table {self.name!r}")

    # -- writes -----------------------------------------------------------

    def has_cell(self, rowkey, family: str, qualifier: str) -> bool:
        """Index-only existence test; reads no value bytes."""
        key = as_key(rowkey)
        with self._map_lock.read():
            region = self._regions[self._index_of(key)]
            rd = self._rdata(region)
            with rd.lock.read():
                row = rd.rows.get(key)
                return row is not None and (family, qualifier) in row

    def put(self, rowkey, family: str, qualifier: str, value: bytes) -> bool:
        """Write one cell and flush. Returns True if a value was replaced."""
        replaced = self._put(as_key(rowkey), family, qualifier, value)
        self.flush()
        return replaced

    def put_many(self, cells: Iterable[tuple[bytes, str, str, bytes]], overwrite: bool = True) -> UploadReport:
        cells = list(cells)
        for _, fam, qual, _ in cells:
            self._check_column(fam, qual)
        report = UploadReport()
        for key, fam, qual, value in cells:
            key = as_key(key)
            if not overwrite and self.has_cell(key, fam, qual):
                report.skipped += 1
                continue
            if self._put(key, fam, qual, value):
                report.overwritten += 1
            else:
                report.stored += 1
        self.flush()
        self.maybe_split()
        return report

    def _put(self, key: bytes, family: str, qualifier: str, value: bytes) -> bool:
        if not key:
            raise ValidationError("empty rowkey")
        self._check_column(family, qualifier)
        with self._map_lock.read():
            region = self._regions[self._index_of(key)]
            rd = self._rdata(region)
            with rd.lock.write():
                row = rd.rows.get(key)
                replaced = row is not None and (family, qualifier) in row
                region.byte_size += rd.append(key, family, qualifier, bytes(value))
        return replaced

    def upload(self, manifest: UploadManifest) -> UploadReport:
        for e in manifest.entries:
            self._check_column(e.family, e.qualifier)
            if not e.unique_name:
                raise ValidationError("empty unique name in manifest")
        report = UploadReport()
        for e in manifest.entries:
            key = as_key(e.unique_name)
            if not manifest.overwrite and self.has_cell(key, e.family, e.qualifier):
                report.skipped += 1
                continue
            try:
                with open(e.source_path, "rb") as fh:
                    value = fh.read()
            except OSError as exc:
                report.errors.append((e.source_path, exc.strerror or str(exc)))
                continue
            if self._put(key, e.family, e.qualifier, value):
                report.overwritten += 1
            else:
                report.stored += 1
        self.flush()
        self.maybe_split()
        return report

    # -- reads ------------------------------------------------------------

    def _materialize(self, rd: _RegionData, key: bytes, family: str, report: ScanReport) -> dict[str, bytes]:
        row = rd.rows.get(key, {})
        out = {}
        for (f, q), (off, ln) in sorted(row.items()):
            if f == family:
                out[q] = rd.read(off, ln)
                report.add(family, ln)
        if out:
            report.rows_visited += 1
        return out

    def get(self, rowkey, family: str, qualifier: str, report: ScanReport | None = None) -> bytes:
        self._check_column(family, qualifier)
        key = as_key(rowkey)
        report = ScanReport() if report is None else report
        with self._map_lock.read():
            rd = self._rdata(self._regions[self._index_of(key)])
            with rd.lock.read():
                row = rd.rows.get(key)
                if row is None or (family, qualifier) not in row:
                    raise NotFound(f"{self.name}/{key.decode('utf-8', 'replace')}/{family}:{qualifier}")
                return self._materialize(rd, key, family, report)[qualifier]

    def scan(self, family: str, qualifier: str, start=None, stop=None, skip_keys=(),
             report: ScanReport | None = None) -> Iterator[tuple[bytes, bytes]]:
        """Yield ``(rowkey, value)`` in ascending rowkey order over ``[start, stop)``."""
        self._check_column(family, qualifier)
        start = None if start is None else as_key(start)
        stop = None if stop is None else as_key(stop)
        skip = {as_key(k) for k in skip_keys}
        report = ScanReport() if report is None else report
        if start is not None and stop is not None and start >= stop:
            return
        cursor = start if start is not None else b""
        while True:
            with self._map_lock.read():
                region = self._regions[self._index_of(cursor)]
                rd = self._rdata(region)
                with rd.lock.read():
                    batch = []
                    for key in rd.keys_in(cursor, stop):
                        if key in skip or (family, qualifier) not in rd.rows[key]:
                            continue
                        batch.append((key, self._materialize(rd, key, family, report)[qualifier]))
                nxt = region.stop_key
            yield from batch
            if nxt is None or (stop is not None and nxt >= stop):
                return
            cursor = nxt

    def keys(self, family: str | None = None, start=None, stop=None) -> list[bytes]:
        """Key-only listing; reads no values."""
        start = None if start is None else as_key(start)
        stop = None if stop is None else as_key(stop)
        out = []
        with self._map_lock.read():
            for region in self._regions:
                rd = self._rdata(region)
                with rd.lock.read():
                    for key in rd.keys_in(start, stop):
                        if family is None or any(f == family for f, _ in rd.rows[key]):
                            out.append(key)
        return out

    def retrieve(self, family: str, qualifier: str, rowkey=None, start=None, stop=None,
                 skip_keys=(), destinations=None) -> RetrieveResult:
        report = ScanReport()
        if rowkey is not None:
            key = as_key(rowkey)
            if key in {as_key(k) for k in skip_keys}:
                rows = []
            else:
                rows = [(key, self.get(key, family, qualifier, report))]
        else:
            rows = list(self.scan(family, qualifier, start, stop, skip_keys, report))
        if destinations is not None:
            _write_destinations(rows, destinations)
        return RetrieveResult(rows, report)

    def delete(self, family: str, qualifier: str, rowkey=None, start=None, stop=None, skip_keys=()) -> int:
        self._check_column(family, qualifier)
        skip = {as_key(k) for k in skip_keys}
        if rowkey is not None:
            key = as_key(rowkey)
            if not self.has_cell(key, family, qualifier):
                raise NotFound(f"{self.name}/{key.decode('utf-8', 'replace')}/{family}:{qualifier}")
            targets = [] if key in skip else [key]
        else:
            targets = [k for k in self.keys(family, start, stop)
                       if k not in skip and self.has_cell(k, family, qualifier)]
        with self._map_lock.read():
            for key in targets:
                region = self._regions[self._index_of(key)]
                rd = self._rdata(region)
                with rd.lock.write():
                    region.byte_size -= rd.remove(key, family, qualifier)
        self.flush()
        return len(targets)

    def cells(self) -> Iterator[tuple[bytes, str, str, bytes]]:
        """Every stored cell in (rowkey, family, qualifier) order, unaccounted."""
        with self._map_lock.read():
            for region in list(self._regions):
                rd = self._rdata(region)
                with rd.lock.read():
                    for key in rd.keys:
                        for (f, q), (off, ln) in sorted(rd.rows[key].items()):
                            yield key, f, q, rd.read(off, ln)

    def digest(self) -> str:
        h = hashlib.sha256()
        for key, f, q, v in self.cells():
            for part in (key, f.encode(), q.encode(), v):
                h.update(len(part).to_bytes(8, "little"))
                h.update(part)
        return h.hexdigest()

    # -- region management ------------------------------------------------

    def maybe_split(self) -> int:
        """Apply the size-threshold policy; return the number of splits."""
        if self.schema.split_policy != SIZE_THRESHOLD:
            return 0
        n = 0
        limit = self.schema.split_threshold_bytes
        while True:
            with self._map_lock.write():
                victim = next((r for r in self._regions
                               if r.byte_size > limit and len(self._rdata(r).keys) >= 2), None)
                if victim is None:
                    break
                self._split(victim, self._median_key(victim))
            n += 1
        if n:
            self.flush()
        return n

    def _median_key(self, region: Region) -> bytes:
        rd = self._rdata(region)
        sizes = [rd.row_bytes(k) for k in rd.keys]
        total = sum(sizes)
        best, best_gap, left = None, None, 0
        for i in range(1, len(sizes)):
            left += sizes[i - 1]
            gap = abs(2 * left - total)
            if best_gap is None or gap < best_gap:
                best, best_gap = i, gap
        return rd.keys[best]

    def split_region(self, region_id: int, split_key) -> tuple[Region, Region]:
        key = as_key(split_key)
        with self._map_lock.write():
            region = next((r for r in self._regions if r.region_id == region_id), None)
            if region is None:
                raise IntegrityError(f"no region {region_id} in {self.name}")
            if key <= region.start_key or (region.stop_key is not None and key >= region.stop_key):
                raise ValidationError("split key must fall strictly inside the region")
            left, right = self._split(region, key)
        self.flush()
        return left, right

    def _split(self, region: Region, key: bytes) -> tuple[Region, Region]:
        rd = self._rdata(region)
        with rd.lock.write():
            halves = []
            for lo, hi in ((region.start_key, key), (key, region.stop_key)):
                child = Region(self._next_id, lo, hi, 0, region.node)
                self._next_id += 1
                crd = _RegionData.create(self._log_path(child))
                for k in rd.keys_in(lo if lo else None, hi):
                    for (f, q), (off, ln) in sorted(rd.rows[k].items()):
                        child.byte_size += crd.append(k, f, q, rd.read(off, ln))
                crd.save_index()
                self._data[child.region_id] = crd
                halves.append(child)
            i = self._regions.index(region)
            self._regions[i:i + 1] = halves
            self._save_meta()
            del self._data[region.region_id]
            rd.log_path.unlink(missing_ok=True)
            rd.idx_path.unlink(missing_ok=True)
        return halves[0], halves[1]

    def move_region(self, region_id: int, to_node: str) -> Region:
        if to_node not in self.store.nodes:
            raise IntegrityError(f"unknown node {to_node!r}")
        with self._map_lock.write():
            region = next((r for r in self._regions if r.region_id == region_id), None)
            if region is None:
                raise IntegrityError(f"no region {region_id} in {self.name}")
            rd = self._rdata(region)
            with rd.lock.write():
                if rd.dirty:
                    rd.save_index()
                src_log, src_idx = rd.log_path, rd.idx_path
                if not src_log.exists() or not src_idx.exists():
                    raise IntegrityError(f"region {region_id} files missing under {src_log.parent}")
                if region.node != to_node:
                    old_node = region.node
                    region.node = to_node
                    dst_log = self._log_path(region)
                    dst_log.parent.mkdir(parents=True, exist_ok=True)
                    try:
                        os.replace(src_log, dst_log)
                        os.replace(src_idx, dst_log.with_suffix(".idx"))
                    except OSError as exc:
                        if dst_log.exists() and not src_log.exists():
                            os.replace(dst_log, src_log)
                        region.node = old_node
                        raise IntegrityError(f"moving region {region_id}: {exc}") from exc
                    rd.log_path = dst_log
                self._save_meta()
            return Region(region.region_id, region.start_key, region.stop_key, region.byte_size, region.node)

    # -- persistence ------------------------------------------------------

    def _meta_path(self) -> Path:
        return self.store.root / "tables" / self.name / "meta.json"

    def _save_meta(self):
        doc = {
            "schema": self.schema.to_json(),
            "next_region_id": self._next_id,
            "regions": [r.to_json() for r in self._regions],
        }
        path = self._meta_path()
        path.parent.mkdir(parents=True, exist_ok=True)
        _atomic_write(path, json.dumps(doc, indent=1).encode())

    def flush(self):
        with self._flush_lock, self._map_lock.read():
            for rd in list(self._data.values()):
                if rd.dirty:
                    with rd.lock.read():
                        rd.save_index()
            self._save_meta()


def _write_destinations(rows, destinations):
    if isinstance(destinations, (str, os.PathLike)):
        d = Path(destinations)
        d.mkdir(parents=True, exist_ok=True)
        for key, value in rows:
            (d / key.decode("utf-8")).write_bytes(value)
        return
    dests = list(destinations)
    if len(dests) != len(rows):
        raise ValidationError(f"{len(dests)} destinations for {len(rows)} retrieved rows")
    for path, (_, value) in zip(dests, rows):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(value)


# --------------------------------------------------------------------------
# store


class Store:
    """A store rooted at a directory; one subdirectory per node."""

    def __init__(self, root, nodes: Sequence[str] | None = None):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        cfg = self.root / "store.json"
        known = json.loads(cfg.read_text())["nodes"] if cfg.exists() else []
        for n in nodes or ():
            if n not in known:
                known.append(n)
        if not known:
            known = ["node0"]
        self.nodes: list[str] = known
        _atomic_write(cfg, json.dumps({"nodes": self.nodes}).encode())
        for n in self.nodes:
            (self.root / "nodes" / n).mkdir(parents=True, exist_ok=True)
        self._tables: dict[str, Table] = {}
        self._lock = threading.Lock()
        self._file_lock = filelock.FileLock(str(self.root / "LOCK"))

    @contextmanager
    def exclusive(self):
        """Store-wide write lock shared across processes; raises BusyError if held."""
        try:
            self._file_lock.acquire(timeout=0)
        except filelock.Timeout:
            raise BusyError(f"store {self.root} is locked by another operation") from None
        try:
            yield self
        finally:
            self._file_lock.release()

    def table_names(self) -> list[str]:
        d = self.root / "tables"
        if not d.exists():
            return []
        return sorted(p.name for p in d.iterdir() if (p / "meta.json").exists())

    def has_table(self, name: str) -> bool:
        return name in self._tables or (self.root / "tables" / name / "meta.json").exists()

    def table(self, name: str) -> Table:
        with self._lock:
            t = self._tables.get(name)
            if t is None:
                path = self.root / "tables" / name / "meta.json"
                if not path.exists():
                    raise NotFound(f"no table {name!r}")
                doc = json.loads(path.read_text())
                t = Table(self, TableSchema.from_json(doc["schema"]),
                          [Region.from_json(r) for r in doc["regions"]], doc["next_region_id"])
                self._tables[name] = t
            return t

    def create_table(self, schema: TableSchema, presplit_keys: Sequence | None = None) -> Table:
        keys = [as_key(k) for k in presplit_keys or ()]
        _check_increasing(keys)
        if self.has_table(schema.name):
            t = self.table(schema.name)
            if t.schema != schema:
                raise ConflictError(f"table {schema.name!r} exists with a different schema")
            return t
        bounds = [b""] + keys
        regions = [Region(i, lo, hi, 0, self.nodes[i % len(self.nodes)])
                   for i, (lo, hi) in enumerate(zip(bounds, keys + [None]))]
        with self._lock:
            t = Table(self, schema, regions, len(regions))
            for r in regions:
                t._data[r.region_id] = _RegionData.create(t._log_path(r))
            self._tables[schema.name] = t
        t.flush()
        return t

    def drop_table(self, name: str):
        t = self.table(name)
        for r in t.regions:
            log = t._log_path(r)
            log.unlink(missing_ok=True)
            log.with_suffix(".idx").unlink(missing_ok=True)
        t._meta_path().unlink()
        with self._lock:
            self._tables.pop(name, None)
