"""Deterministic synthetic cohorts of ``CGIM`` volumes with age/sex metadata."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import blob
from .query import COLUMNS, IndexRecord, scheme_schema
from .store import ManifestEntry, ValidationError, write_manifest

# Age bins as (lo, hi] in years. The last bin is open-ended; ages are drawn up to 90.
AGE_BINS = ((4.0, 20.0), (20.0, 40.0), (40.0, 60.0), (60.0, 90.0))
AGE_BIN_LABELS = ("4-20", "20-40", "40-60", ">60")
# Subject counts (female, male) per age bin of the reference cohort.
COHORT_COUNTS = {"F": (1157, 651, 230, 332), "M": (698, 648, 280, 494)}


def largest_remainder(total: int, weights) -> list[int]:
    """Split ``total`` into integers proportional to ``weights`` (Hamilton's method)."""
    w = np.asarray(weights, dtype=np.float64)
    if total < 0 or w.sum() <= 0:
        raise ValidationError("need a nonnegative total and positive weights")
    quota = total * w / w.sum()
    base = np.floor(quota).astype(int)
    left = total - int(base.sum())
    order = sorted(range(len(w)), key=lambda i: (-(quota[i] - base[i]), i))
    for i in order[:left]:
        base[i] += 1
    return [int(x) for x in base]


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    image_count: int = 512
    dims: tuple[int, ...] = (16, 16, 16)
    jitter_bytes: tuple[int, int] = (0, 0)
    cell_weights: dict = field(default_factory=lambda: dict(COHORT_COUNTS))
    prefix: str = "img_"

    def __post_init__(self):
        if self.image_count < 1:
            raise ValidationError("image_count must be >= 1")
        if not self.dims or int(np.prod(self.dims)) == 0:
            raise ValidationError("dims must have a nonzero voxel count")
        lo, hi = self.jitter_bytes
        if not 0 <= lo <= hi:
            raise ValidationError("jitter range must satisfy 0 <= lo <= hi")

    def cell_counts(self) -> dict[tuple[str, int], int]:
        cells = [(sex, b) for sex in sorted(self.cell_weights) for b in range(len(AGE_BINS))]
        weights = [self.cell_weights[s][b] for s, b in cells]
        return dict(zip(cells, largest_remainder(self.image_count, weights)))

    @classmethod
    def cohort(cls, scale: float = 0.1, **kw) -> "SyntheticDatasetSpec":
        total = sum(sum(v) for v in COHORT_COUNTS.values())
        return cls(image_count=int(round(total * scale)), **kw)


@dataclass
class SyntheticSubject:
    rowkey: str
    age: float
    sex: str
    blob: bytes

    def record(self) -> IndexRecord:
        return IndexRecord(self.rowkey.encode(), len(self.blob), self.age, self.sex)


def generate(spec: SyntheticDatasetSpec, seed: int = 42) -> list[SyntheticSubject]:
    """Subjects in rowkey order; cohort membership is shuffled across rowkeys."""
    rng = np.random.default_rng(seed)
    labels = []
    for (sex, b), n in spec.cell_counts().items():
        lo, hi = AGE_BINS[b]
        # float32 ages strictly inside (lo, hi] so stored records decode to the same bin
        ages = rng.uniform(lo, hi, size=n).astype(np.float32)
        ages = np.clip(ages, np.nextafter(np.float32(lo), np.float32(np.inf)), np.float32(hi))
        labels.extend((sex, float(a)) for a in ages)
    perm = rng.permutation(len(labels))
    template = rng.normal(100.0, 20.0, size=spec.dims).astype(np.float32)
    lo, hi = spec.jitter_bytes
    width = len(str(spec.image_count - 1))
    out = []
    for i, j in enumerate(perm):
        sex, age = labels[j]
        vol = template + rng.normal(0.0, 10.0, size=spec.dims).astype(np.float32)
        pad = int(rng.integers(lo, hi + 1)) if hi > 0 else 0
        out.append(SyntheticSubject(f"{spec.prefix}{i:0{width}d}", age, sex, blob.encode(vol, pad)))
    return out


def write_dataset(subjects, out_dir, family: str = "image", qualifier: str = "data") -> dict[str, Path]:
    """Write blobs, an upload manifest (relative paths) and an index TSV."""
    out = Path(out_dir)
    (out / "blobs").mkdir(parents=True, exist_ok=True)
    entries = []
    for s in subjects:
        rel = f"blobs/{s.rowkey}.cgim"
        (out / rel).write_bytes(s.blob)
        entries.append(ManifestEntry(rel, s.rowkey, family, qualifier))
    write_manifest(out / "manifest.tsv", entries)
    with open(out / "index.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("rowkey\tsize\tage\tsex\n")
        for s in subjects:
            fh.write(f"{s.rowkey}\t{len(s.blob)}\t{s.age!r}\t{s.sex}\n")
    return {"manifest": out / "manifest.tsv", "index": out / "index.tsv", "blobs": out / "blobs"}


def load_into(store, table_name: str, subjects, mode: str = "proposed", **schema_kw):
    """Create a scheme-shaped table and write every subject's blob and index record."""
    table = store.create_table(scheme_schema(table_name, mode, **schema_kw))
    (ifam, iq), (dfam, dq) = COLUMNS[mode]
    cells = []
    for s in subjects:
        key = s.rowkey.encode()
        cells.append((key, dfam, dq, s.blob))
        cells.append((key, ifam, iq, s.record().encode()))
    table.put_many(cells)
    return table
