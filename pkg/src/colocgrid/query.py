"""Split-family table scheme and subset queries.

Under the *proposed* scheme a table has an ``index`` family holding a small
fixed-width metadata record per image and a separate ``image`` family holding
the blob, sharing rowkeys. Under the *naive* scheme both live as qualifiers of
one ``all`` family, so any metadata read drags the image bytes along.
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass
from typing import Iterable, Sequence

from .engine import JobResult, build_template, run_job
from .store import ScanReport, Store, Table, TableSchema, ValidationError, as_key
from .topology import NodeProfile

PROPOSED = "proposed"
NAIVE = "naive"
MODES = (PROPOSED, NAIVE)

_RECORD = struct.Struct("<QfB")
RECORD_SIZE = _RECORD.size  # 13 bytes
SEXES = ("F", "M")

# (index family, index qualifier), (image family, image qualifier) per mode
COLUMNS = {
    PROPOSED: (("index", "meta"), ("image", "data")),
    NAIVE: (("all", "meta"), ("all", "image")),
}


class EmptySelection(ValidationError):
    pass


@dataclass(frozen=True)
class IndexRecord:
    rowkey: bytes
    file_size_bytes: int
    age_years: float
    sex: str

    def __post_init__(self):
        if self.sex not in SEXES:
            raise ValidationError(f"sex must be one of {SEXES}, got {self.sex!r}")
        if self.file_size_bytes < 0 or self.age_years < 0:
            raise ValidationError("size and age must be nonnegative")

    def encode(self) -> bytes:
        return _RECORD.pack(self.file_size_bytes, self.age_years, SEXES.index(self.sex))

    @classmethod
    def decode(cls, rowkey: bytes, raw: bytes) -> "IndexRecord":
        size, age, sex = _RECORD.unpack(raw)
        return cls(rowkey, size, age, SEXES[sex])


@dataclass(frozen=True)
class SubsetPredicate:
    """Half-open age interval ``(age_min, age_max]`` and/or a sex filter."""

    age_min: float | None = None
    age_max: float | None = None
    sex: str | None = None

    def __post_init__(self):
        if self.age_min is not None and self.age_max is not None and not self.age_min < self.age_max:
            raise ValidationError("age_min must be < age_max")
        if self.sex is not None and self.sex not in SEXES:
            raise ValidationError(f"sex must be one of {SEXES}")

    def matches(self, rec: IndexRecord) -> bool:
        if self.sex is not None and rec.sex != self.sex:
            return False
        if self.age_min is not None and not rec.age_years > self.age_min:
            return False
        if self.age_max is not None and not rec.age_years <= self.age_max:
            return False
        return True


def scheme_schema(name: str, mode: str, **kw) -> TableSchema:
    if mode == PROPOSED:
        return TableSchema(name, (("index", ("meta",)), ("image", ("data",))), **kw)
    if mode == NAIVE:
        return TableSchema(name, (("all", ("meta", "image")),), **kw)
    raise ValidationError(f"unknown scheme {mode!r}")


def detect_scheme(table: Table) -> str:
    for mode in MODES:
        (ifam, iq), (dfam, dq) = COLUMNS[mode]
        if table.schema.has_column(ifam, iq) and table.schema.has_column(dfam, dq):
            return mode
    raise ValidationError(f"table {table.name!r} follows neither table scheme")


def _check_mode(table: Table, mode: str) -> str:
    if mode not in MODES:
        raise ValidationError(f"unknown scheme {mode!r}")
    if detect_scheme(table) != mode:
        raise ValidationError(f"table {table.name!r} is not laid out for the {mode} scheme")
    return mode


def read_index_tsv(path) -> list[IndexRecord]:
    """Parse ``rowkey size age sex`` tab-separated lines (header optional)."""
    out = []
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            parts = line.rstrip("\r\n").split("\t")
            if parts == [""]:
                continue
            if n == 1 and parts[0] == "rowkey":
                continue
            if len(parts) != 4:
                raise ValidationError(f"{path}:{n}: expected rowkey<TAB>size<TAB>age<TAB>sex")
            out.append(IndexRecord(parts[0].encode(), int(parts[1]), float(parts[2]), parts[3]))
    return out


def put_index(table: Table, records: Iterable[IndexRecord], mode: str | None = None, overwrite: bool = True):
    mode = _check_mode(table, mode or detect_scheme(table))
    fam, qual = COLUMNS[mode][0]
    return table.put_many(((r.rowkey, fam, qual, r.encode()) for r in records), overwrite=overwrite)


def plan_subset(table: Table, predicate: SubsetPredicate, mode: str) -> tuple[list[bytes], ScanReport]:
    """Rowkeys whose index record satisfies ``predicate``, and what the scan cost."""
    _check_mode(table, mode)
    fam, qual = COLUMNS[mode][0]
    report = ScanReport()
    keys = [k for k, raw in table.scan(fam, qual, report=report)
            if predicate.matches(IndexRecord.decode(k, raw))]
    return keys, report


def exists_check(table: Table, rowkey, mode: str) -> tuple[bool, int]:
    _check_mode(table, mode)
    fam, qual = COLUMNS[mode][0]
    key = as_key(rowkey)
    if not table.has_cell(key, fam, qual):
        return False, 0
    report = ScanReport()
    table.get(key, fam, qual, report)
    return True, report.total_bytes


@dataclass
class SubsetResult:
    rowkeys: list[bytes]
    plan_report: ScanReport
    job: JobResult

    @property
    def mean(self) -> bytes:
        return self.job.result

    def accounting_rows(self, mode: str) -> list[tuple[str, str, int]]:
        (ifam, _), (dfam, _) = COLUMNS[mode]
        rows = [("plan", f, n) for f, n in sorted(self.plan_report.bytes_read.items())]
        m = self.job.metrics
        rows.append(("map", dfam, sum(t.bytes_image for t in m.tasks)))
        if ifam != dfam:
            rows.append(("map", ifam, sum(t.bytes_index for t in m.tasks)))
        return rows


def accounting_csv(rows: Sequence[tuple[str, str, int]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["phase", "family", "bytes"])
    w.writerows(rows)
    return buf.getvalue()


def subset_average(store: Store, table_name: str, predicate: SubsetPredicate, mode: str, eta: int,
                   profiles: Sequence[NodeProfile], *, target_table: str = "results",
                   target=("result", "data"), job_id: str = "subset", **job_kw) -> SubsetResult:
    table = store.table(table_name)
    keys, plan_report = plan_subset(table, predicate, mode)
    if not keys:
        raise EmptySelection(f"predicate {predicate} selects no rows")
    query, data = COLUMNS[mode]
    chosen = set(keys)
    skip = [k for k in table.keys(query[0]) if k not in chosen]
    template = build_template(store, table_name, target_table, eta=eta, query=query, data=data,
                              target=target, skip_keys=skip, job_id=job_id)
    return SubsetResult(keys, plan_report, run_job(template, store, profiles, **job_kw))
