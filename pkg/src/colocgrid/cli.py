"""Command-line interface: ``colocgrid <command> ...``."""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

from . import cost_model, engine, experiments, query, synth, topology
from .store import (BusyError, NotFound, Store, StoreError, read_keys, read_manifest, read_schema)

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_BUSY = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _profiles(args, store: Store | None = None) -> list[topology.NodeProfile]:
    if args.cluster:
        return topology.read_cluster(args.cluster)
    if store is not None and (store.root / "cluster.tsv").exists():
        return topology.read_cluster(store.root / "cluster.tsv")
    return []


def _open_store(args) -> Store:
    nodes = None
    profiles = topology.read_cluster(args.cluster) if args.cluster else None
    if profiles:
        nodes = [p.node_id for p in profiles]
    store = Store(args.store, nodes)
    if profiles:
        topology.write_cluster(store.root / "cluster.tsv", profiles)
    return store


def _skip(args):
    return read_keys(args.skip) if getattr(args, "skip", None) else []


def _selector(args):
    if args.rowkey is not None and (args.start is not None or args.stop is not None):
        raise UsageError("--rowkey cannot be combined with --start/--stop")
    return dict(rowkey=args.rowkey, start=args.start, stop=args.stop)


# --------------------------------------------------------------------------
# commands


def cmd_upload(args) -> int:
    store = _open_store(args)
    presplit = read_keys(args.presplit) if args.presplit else None
    if store.has_table(args.table) and not args.schema:
        table = store.table(args.table)
    else:
        if not args.schema:
            print(f"error: table {args.table!r} does not exist; --schema is required", file=sys.stderr)
            return EXIT_USAGE
        schema = read_schema(args.schema, args.table, args.split_policy, args.split_threshold)
        table = store.create_table(schema, presplit)
    rep = table.upload(read_manifest(args.manifest, args.overwrite, presplit)) if args.manifest else None
    if args.index:
        query.put_index(table, query.read_index_tsv(args.index), overwrite=args.overwrite or rep is None)
    if rep is not None:
        print(f"stored={rep.stored} skipped={rep.skipped} overwritten={rep.overwritten} errors={len(rep.errors)}")
        for path, msg in rep.errors:
            print(f"error: {path}: {msg}", file=sys.stderr)
        return EXIT_OK if rep.ok else EXIT_FAIL
    return EXIT_OK


def cmd_retrieve(args) -> int:
    store = _open_store(args)
    table = store.table(args.table)
    dests = None
    if args.dest_dir:
        dests = args.dest_dir
    elif args.dest:
        dests = [line.decode() for line in read_keys(args.dest)]
    res = table.retrieve(args.family, args.qualifier, skip_keys=_skip(args), destinations=dests, **_selector(args))
    for key, value in res.rows:
        print(f"{key.decode('utf-8', 'replace')}\t{len(value)}")
    fams = " ".join(f"{f}={n}" for f, n in sorted(res.report.bytes_read.items()))
    print(f"rows={len(res.rows)} visited={res.report.rows_visited} bytes_read: {fams or 'none'}", file=sys.stderr)
    return EXIT_OK


def cmd_delete(args) -> int:
    store = _open_store(args)
    with store.exclusive():
        n = store.table(args.table).delete(args.family, args.qualifier, skip_keys=_skip(args), **_selector(args))
    print(f"deleted={n}")
    return EXIT_OK


def cmd_balance(args) -> int:
    store = _open_store(args)
    profiles = _profiles(args, store)
    if not profiles:
        print("error: balance needs --cluster", file=sys.stderr)
        return EXIT_USAGE
    with store.exclusive():
        table = store.table(args.table)
        before = topology.table_placement(table, profiles)
        plan = topology.balance(before, table.regions, profiles)
        if args.plan_out:
            Path(args.plan_out).write_text(plan.to_csv(), encoding="utf-8")
        else:
            sys.stdout.write(plan.to_csv())
        after_dev = plan.initial_deviation
        if not args.dry_run:
            after = topology.apply_moves(plan, table, store)
            after_dev = topology.placement_deviation(after, profiles)
    print(f"moves={len(plan.moves)} deviation_before={plan.initial_deviation:.6f} "
          f"deviation_after={after_dev:.6f} predicted={plan.predicted_deviation:.6f}"
          + (" (dry run)" if args.dry_run else ""), file=sys.stderr)
    return EXIT_OK


def _split3(value: str, flag: str) -> tuple[str, str, str]:
    parts = value.split(",")
    if len(parts) != 3:
        raise UsageError(f"{flag} takes three comma-separated values (query,data,target)")
    return tuple(parts)


def cmd_mapreduce(args) -> int:
    store = _open_store(args)
    profiles = _profiles(args, store)
    if not profiles:
        print("error: mapreduce needs --cluster", file=sys.stderr)
        return EXIT_USAGE
    source = store.table(args.table)
    subset = args.sex is not None or args.age_min is not None or args.age_max is not None
    mode = args.scheme
    if mode is None and (subset or not args.families):
        mode = query.detect_scheme(source)
    if args.families:
        fams, quals = _split3(args.families, "--families"), _split3(args.qualifiers or "meta,data,data", "--qualifiers")
        q, d, tgt = zip(fams, quals)
    else:
        q, d = query.COLUMNS[mode]
        tgt = ("result", "data")
    skip = _skip(args)
    pred = query.SubsetPredicate(args.age_min, args.age_max, args.sex) if subset else None
    if subset and args.level != engine.LARGE_DATASET:
        raise UsageError("subset predicates run at the large-dataset level")

    if args.level != engine.IMAGE_BASED:
        if subset:
            n = len(query.plan_subset(source, pred, mode)[0])
        else:
            n = len(set(source.keys(q[0])) - set(skip))
        params = cost_model.read_params(args.params) if args.params else cost_model.REFERENCE_PARAMS
        lo, hi = cost_model.eta_bounds(params.replace(img_count=max(n, 1)))
        if not args.force and args.task_pairs is None and not (lo <= args.eta <= hi):
            print(f"error: --eta {args.eta} outside valid range [{lo:.6g}, {hi:.6g}] "
                  f"(ceil/floor: [{math.ceil(lo)}, {math.floor(hi)}]); pass --force to override",
                  file=sys.stderr)
            return EXIT_USAGE

    with store.exclusive():
        if subset:
            res = query.subset_average(store, args.table, pred, mode, args.eta, profiles,
                                       target_table=args.target, target=tgt, job_id=args.job_id)
            job = res.job
            if args.accounting_out:
                Path(args.accounting_out).write_text(query.accounting_csv(res.accounting_rows(mode)), "utf-8")
            print(f"matches={len(res.rowkeys)} plan_bytes={res.plan_report.total_bytes}", file=sys.stderr)
        else:
            pairs = None
            if args.task_pairs:
                pairs = [tuple(line.decode().split("\t")) for line in read_keys(args.task_pairs)]
            tpl = engine.build_template(store, args.table, args.target, level=args.level, eta=args.eta,
                                        query=q, data=d, target=tgt, task_pairs=pairs, skip_keys=skip,
                                        job_id=args.job_id, task_delay_s=args.delay)
            job = engine.run_job(tpl, store, profiles)
    m = job.metrics
    if args.metrics_out:
        Path(args.metrics_out).write_text(m.to_csv(), encoding="utf-8")
    jobs = store.root / "jobs"
    jobs.mkdir(exist_ok=True)
    doc = json.dumps(m.summary(), indent=1, sort_keys=True)
    (jobs / f"{args.job_id.replace('/', '_')}.json").write_text(doc)
    (jobs / "last.json").write_text(doc)
    if job.result_rowkey is not None:
        print(job.result_rowkey.decode())
    else:
        print(f"outputs={job.outputs}")
    print(f"tasks={len(m.tasks)} rack_local_fraction={m.rack_local_fraction:.6f} "
          f"wall_s={m.wall_s:.6f} resource_s={m.resource_s:.6f}", file=sys.stderr)
    return EXIT_OK


def cmd_model(args) -> int:
    params = cost_model.read_params(args.params) if args.params else cost_model.REFERENCE_PARAMS
    try:
        bounds = cost_model.eta_bounds(params)
        print(f"bounds: [{bounds[0]:.6g}, {bounds[1]:.6g}]")
    except cost_model.InfeasibleBounds as exc:
        if args.eta_min is None or args.eta_max is None:
            print(f"error: infeasible chunk-size bounds lower={exc.lower:.6g} upper={exc.upper:.6g}",
                  file=sys.stderr)
            return EXIT_FAIL
        print(f"bounds: infeasible (lower={exc.lower:.6g} upper={exc.upper:.6g}); using explicit range")
    sweep = cost_model.optimize_eta(params, args.step, args.eta_min, args.eta_max)
    if args.out:
        Path(args.out).write_text(sweep.to_csv(), encoding="utf-8")
    best = sweep.wall[sweep.etas.index(sweep.eta_star)]
    print(f"grid: {sweep.etas[0]}..{sweep.etas[-1]} step {args.step} ({len(sweep.etas)} points)")
    print(f"eta_star={sweep.eta_star} wall_s={best.total_s:.6f}")
    return EXIT_OK


def _dims(s: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in s.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad dims {s!r}; use e.g. 16x16x16") from None


def _jitter(s: str) -> tuple[int, int]:
    lo, _, hi = s.partition(":")
    return int(lo), int(hi or lo)


def cmd_synth(args) -> int:
    if args.cohort_scale is not None:
        spec = synth.SyntheticDatasetSpec.cohort(args.cohort_scale, dims=args.dims, jitter_bytes=args.jitter)
    else:
        spec = synth.SyntheticDatasetSpec(args.count, args.dims, args.jitter)
    subjects = synth.generate(spec, args.seed)
    paths = synth.write_dataset(subjects, args.out, args.family, args.qualifier)
    for (sex, b), n in spec.cell_counts().items():
        print(f"{sex}\t{synth.AGE_BIN_LABELS[b]}\t{n}")
    print(f"wrote {len(subjects)} images; manifest {paths['manifest']}; index {paths['index']}", file=sys.stderr)
    return EXIT_OK


def cmd_monitor(args) -> int:
    store = _open_store(args)
    profiles = _profiles(args, store)
    names = store.table_names()
    print(f"tables={len(names)}")
    targets = topology.target_fractions(profiles) if profiles else {}
    for name in names:
        table = store.table(name)
        pl = topology.table_placement(table, profiles)
        total = pl.total_bytes
        print(f"table {name} regions={len(table.regions)} bytes={total}")
        for node in sorted(set(pl.per_node_bytes) | set(targets)):
            frac = pl.per_node_bytes.get(node, 0) / total if total else 0.0
            tgt = f" target={targets[node]:.6f}" if node in targets else ""
            print(f"  {node} bytes={pl.per_node_bytes.get(node, 0)} fraction={frac:.6f}{tgt}")
        if profiles and total:
            print(f"  deviation={topology.placement_deviation(pl, profiles):.6f}")
    last = store.root / "jobs" / "last.json"
    if last.exists():
        m = json.loads(last.read_text())
        print(f"last job {m['job_id']} level={m['level']} tasks={m['tasks']} "
              f"rack_local_fraction={m['rack_local_fraction']:.6f} wall_s={m['wall_s']:.6f}")
    return EXIT_OK


def cmd_experiment(args) -> int:
    profiles = topology.read_cluster(args.cluster) if args.cluster else None
    for path in experiments.run_all(args.out, args.seed, profiles):
        print(path)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="colocgrid", description=__doc__)
    p.add_argument("--store", default="store", help="store root directory")
    p.add_argument("--cluster", help="cluster config TSV (node cores mips mem disk_r disk_w)")
    p.add_argument("--seed", type=int, default=42)
    sub = p.add_subparsers(dest="command", required=True)

    def cell_flags(sp, dest=True):
        sp.add_argument("--table", required=True)
        sp.add_argument("--rowkey")
        sp.add_argument("--start")
        sp.add_argument("--stop")
        sp.add_argument("--family", required=True)
        sp.add_argument("--qualifier", required=True)
        sp.add_argument("--skip", help="file of rowkeys to skip")
        if dest:
            sp.add_argument("--dest", help="file listing one destination path per retrieved row")
            sp.add_argument("--dest-dir", help="write each row to DIR/<rowkey>")

    sp = sub.add_parser("upload", help="create/alter a table and upload files")
    sp.add_argument("--table", required=True)
    sp.add_argument("--schema", help="family<TAB>qualifier file")
    sp.add_argument("--manifest", help="source<TAB>name<TAB>family<TAB>qualifier file")
    sp.add_argument("--index", help="rowkey/size/age/sex TSV written into the index column")
    sp.add_argument("--overwrite", action=argparse.BooleanOptionalAction, default=False)
    sp.add_argument("--split-policy", choices=("size-threshold", "pre-split-only"), default="size-threshold")
    sp.add_argument("--split-threshold", type=int, default=64 * 1024 * 1024, metavar="BYTES")
    sp.add_argument("--presplit", help="file of rowkeys to pre-split a new table at")
    sp.set_defaults(func=cmd_upload)

    sp = sub.add_parser("retrieve", help="fetch cells by rowkey, range or whole column")
    cell_flags(sp)
    sp.set_defaults(func=cmd_retrieve)

    sp = sub.add_parser("delete", help="delete cells by rowkey, range or whole column")
    cell_flags(sp, dest=False)
    sp.set_defaults(func=cmd_delete)

    sp = sub.add_parser("balance", help="offline cores*MIPS-weighted region balancer")
    sp.add_argument("--table", required=True)
    sp.add_argument("--family")
    sp.add_argument("--qualifier")
    sp.add_argument("--plan-out", help="write move plan CSV here (default stdout)")
    sp.add_argument("--dry-run", action="store_true")
    sp.set_defaults(func=cmd_balance)

    sp = sub.add_parser("mapreduce", help="run a MapReduce template job")
    sp.add_argument("--table", required=True, help="source table")
    sp.add_argument("--target", default="results", help="target table")
    sp.add_argument("--families", help="query,data,target column families")
    sp.add_argument("--qualifiers", help="query,data,target qualifiers")
    sp.add_argument("--level", choices=engine.LEVELS, default=engine.LARGE_DATASET)
    sp.add_argument("--eta", type=int, default=50, help="images per map task")
    sp.add_argument("--task-pairs", help="start<TAB>stop file; overrides --eta chunking")
    sp.add_argument("--skip", help="file of rowkeys to skip")
    sp.add_argument("--job-id", default="job")
    sp.add_argument("--params", help="cost-model params file used for the eta bound check")
    sp.add_argument("--force", action="store_true", help="allow eta outside the valid range")
    sp.add_argument("--delay", type=float, default=0.0, help="extra seconds per map task")
    sp.add_argument("--sex", choices=query.SEXES)
    sp.add_argument("--age-min", type=float)
    sp.add_argument("--age-max", type=float)
    sp.add_argument("--scheme", choices=query.MODES)
    sp.add_argument("--metrics-out")
    sp.add_argument("--accounting-out")
    sp.set_defaults(func=cmd_mapreduce)

    sp = sub.add_parser("model", help="chunk-size sweep of the wall/resource time model")
    sp.add_argument("--params")
    sp.add_argument("--step", type=int, default=5)
    sp.add_argument("--eta-min", type=int)
    sp.add_argument("--eta-max", type=int)
    sp.add_argument("--out", help="curve CSV path")
    sp.set_defaults(func=cmd_model)

    sp = sub.add_parser("synth", help="generate a synthetic cohort")
    sp.add_argument("--out", required=True)
    sp.add_argument("--count", type=int, default=512)
    sp.add_argument("--dims", type=_dims, default=(16, 16, 16))
    sp.add_argument("--jitter", type=_jitter, default=(0, 0), metavar="LO:HI")
    sp.add_argument("--cohort-scale", type=float, help="size the cohort as a fraction of the reference one")
    sp.add_argument("--family", default="image")
    sp.add_argument("--qualifier", default="data")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("monitor", help="dump tables, placement and the last job")
    sp.set_defaults(func=cmd_monitor)

    sp = sub.add_parser("experiment", help="regenerate all use-case CSVs")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except BusyError as exc:
        print(f"busy: {exc}", file=sys.stderr)
        return EXIT_BUSY
    except NotFound as exc:
        print(f"not found: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except (StoreError, engine.TaskError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
