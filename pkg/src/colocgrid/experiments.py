"""Desk-scale reproductions of the three use cases, written as CSV.

Every number written here is derived from byte counts, node profiles and the
analytical model, never from measured time, so a fixed seed gives
byte-identical files.
"""

from __future__ import annotations

import csv
import hashlib
import tempfile
from pathlib import Path

import numpy as np

from . import blob, cost_model, engine, query, synth, topology
from .store import Store

SLEEP_SWEEP_S = (10, 25, 40, 55, 70, 85, 100, 115)
SLEEP_SCALE = 0.1
AVERAGING_ETAS = (30, 50, 100, 160, 512)

# the ten subset experiments: (label, sex, age_min, age_max)
SUBSETS = [
    ("all", "F", None, None), ("all", "M", None, None),
    ("4-20", "F", 4.0, 20.0), ("4-20", "M", 4.0, 20.0),
    ("20-40", "F", 20.0, 40.0), ("20-40", "M", 20.0, 40.0),
    ("40-60", "F", 40.0, 60.0), ("40-60", "M", 40.0, 60.0),
    (">60", "F", 60.0, None), (">60", "M", 60.0, None),
]


def _write(path: Path, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _f(x: float) -> str:
    return f"{x:.9g}"


def model_curves(out: Path, params=cost_model.REFERENCE_PARAMS) -> cost_model.EtaSweep:
    sweep = cost_model.optimize_eta(params, step=5, eta_min=30, eta_max=160)
    (out / "model_curves.csv").write_text(sweep.to_csv(), encoding="utf-8")
    return sweep


def _uniform_table(store: Store, name: str, profiles, n_regions: int, rows_per_region: int,
                   subjects=None, seed: int = 42):
    """Pre-split table with one region per key block, regions dealt round-robin."""
    n = n_regions * rows_per_region
    subjects = subjects or synth.generate(synth.SyntheticDatasetSpec(image_count=n, dims=(8, 8, 8)), seed)
    keys = [s.rowkey for s in subjects]
    splits = [keys[i * rows_per_region] for i in range(1, n_regions)]
    table = store.create_table(query.scheme_schema(name, query.PROPOSED, split_policy="pre-split-only"),
                               presplit_keys=splits)
    cells = []
    for s in subjects:
        cells.append((s.rowkey.encode(), "image", "data", s.blob))
        cells.append((s.rowkey.encode(), "index", "meta", s.record().encode()))
    table.put_many(cells)
    return table


def heterogeneous(out: Path, store: Store, profiles, seed: int):
    table = _uniform_table(store, "hetero", profiles, 120, 4, seed=seed)
    targets = topology.target_fractions(profiles)
    before = topology.table_placement(table, profiles)
    sweep_rows = []

    def sweep(label):
        for d in SLEEP_SWEEP_S:
            tpl = engine.build_template(store, "hetero", f"gz_{label}", level=engine.IMAGE_BASED,
                                        job_id=f"gz_{label}_{d}", task_delay_s=d * SLEEP_SCALE)
            res = engine.run_job(tpl, store, profiles, real_delay=False)
            m = res.metrics
            sweep_rows.append([label, _f(d * SLEEP_SCALE), len(m.tasks), _f(m.rack_local_fraction),
                               _f(m.wall_s), _f(m.resource_s)])

    sweep("before")
    plan = topology.balance(before, table.regions, profiles)
    (out / "balance_plan.csv").write_text(plan.to_csv(), encoding="utf-8")
    after = topology.apply_moves(plan, table, store)
    sweep("after")
    total = before.total_bytes
    _write(out / "balance.csv", ["node", "cores", "mips", "target", "before", "after"],
           [[p.node_id, p.cores, _f(p.mips), _f(targets[p.node_id]),
             _f(before.per_node_bytes.get(p.node_id, 0) / total),
             _f(after.per_node_bytes.get(p.node_id, 0) / total)] for p in profiles])
    _write(out / "sleep_sweep.csv", ["placement", "delay_s", "tasks", "rack_local_fraction", "wall_s",
                                     "resource_s"], sweep_rows)
    return plan, before, after


def averaging(out: Path, store: Store, profiles, seed: int):
    subjects = synth.generate(synth.SyntheticDatasetSpec(image_count=512), seed)
    synth.load_into(store, "avg", subjects)
    oracle = np.zeros(16 ** 3)
    for s in subjects:
        oracle += blob.decode(s.blob).reshape(-1).astype(np.float64)
    oracle /= len(subjects)
    rows = []
    for eta in AVERAGING_ETAS:
        tpl = engine.build_template(store, "avg", "avg_out", eta=eta, job_id=f"eta{eta}")
        res = engine.run_job(tpl, store, profiles)
        got = blob.decode(res.result).reshape(-1).astype(np.float64)
        err = float(np.max(np.abs(got - oracle) / np.abs(oracle)))
        m = res.metrics
        rows.append([eta, len(m.tasks), _f(err), _f(m.rack_local_fraction), _f(m.wall_s), _f(m.resource_s),
                     hashlib.sha256(res.result).hexdigest()[:16]])
    _write(out / "averaging.csv", ["eta", "tasks", "max_rel_err", "rack_local_fraction", "wall_s",
                                   "resource_s", "mean_sha256"], rows)
    return rows


def schemes(out: Path, store: Store, profiles, seed: int):
    subjects = synth.generate(synth.SyntheticDatasetSpec.cohort(0.1), seed)
    synth.load_into(store, "cohort_p", subjects, query.PROPOSED)
    synth.load_into(store, "cohort_n", subjects, query.NAIVE)
    rows = []
    for i, (label, sex, lo, hi) in enumerate(SUBSETS, 1):
        pred = query.SubsetPredicate(lo, hi, sex)
        for mode, tname in ((query.PROPOSED, "cohort_p"), (query.NAIVE, "cohort_n")):
            res = query.subset_average(store, tname, pred, mode, 50, profiles, job_id=f"q{i}_{mode}")
            m = res.job.metrics
            image_bytes = sum(t.bytes_image for t in m.tasks)
            rows.append([i, sex, label, mode, len(res.rowkeys), res.plan_report.total_bytes, image_bytes,
                         res.plan_report.total_bytes + image_bytes, _f(m.wall_s),
                         hashlib.sha256(res.mean).hexdigest()[:16]])
    _write(out / "scheme_queries.csv", ["experiment", "sex", "age", "scheme", "matches", "plan_bytes",
                                        "map_image_bytes", "total_bytes", "wall_s", "mean_sha256"], rows)
    return rows


def locality(out: Path, store: Store, profiles, seed: int):
    table = _uniform_table(store, "local", profiles, 100, 10, seed=seed + 1)
    rows = []
    for phase in ("before", "after"):
        if phase == "after":
            plan = topology.balance(topology.table_placement(table, profiles), table.regions, profiles)
            topology.apply_moves(plan, table, store)
        tpl = engine.build_template(store, "local", "local_out", eta=5, job_id=f"loc_{phase}")
        m = engine.run_job(tpl, store, profiles).metrics
        rows.append([phase, len(m.tasks), sum(t.local for t in m.tasks), _f(m.rack_local_fraction)])
    _write(out / "locality.csv", ["placement", "tasks", "local_tasks", "rack_local_fraction"], rows)
    return rows


def run_all(out_dir, seed: int = 42, profiles=None) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    profiles = profiles or topology.reference_cluster()
    model_curves(out)
    with tempfile.TemporaryDirectory() as tmp:
        store = Store(tmp, [p.node_id for p in profiles])
        heterogeneous(out, store, profiles, seed)
        averaging(out, store, profiles, seed)
        schemes(out, store, profiles, seed)
        locality(out, store, profiles, seed)
    return sorted(out.glob("*.csv"))
