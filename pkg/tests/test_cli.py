import csv
import json
import math
import re

import numpy as np
import pytest

from colocgrid import blob, cli, cost_model, query, synth, topology
from colocgrid.store import Store


@pytest.fixture
def env(tmp_path):
    cluster = tmp_path / "cluster.tsv"
    topology.write_cluster(cluster, [topology.NodeProfile("n1", 2, 1000), topology.NodeProfile("n2", 6, 1500)])
    root = tmp_path / "store"
    data = tmp_path / "data"
    assert cli.main(["--store", str(root), "--seed", "5", "synth", "--out", str(data), "--count", "40",
                     "--dims", "4x4x4"]) == 0
    schema = tmp_path / "schema.tsv"
    schema.write_text("index\tmeta\nimage\tdata\n")

    def run(*argv):
        return cli.main(["--store", str(root), "--cluster", str(cluster), *argv])

    return run, root, data, schema, tmp_path


def upload(run, data, schema, table="cohort", *extra):
    return run("upload", "--table", table, "--schema", str(schema), "--manifest", str(data / "manifest.tsv"),
               "--index", str(data / "index.tsv"), *extra)


def test_upload_and_duplicates(env, capsys):
    run, root, data, schema, _ = env
    assert upload(run, data, schema) == 0
    assert "stored=40 skipped=0" in capsys.readouterr().out
    assert upload(run, data, schema) == 0
    assert "stored=0 skipped=40" in capsys.readouterr().out
    assert upload(run, data, schema, "cohort", "--overwrite") == 0
    assert "overwritten=40" in capsys.readouterr().out
    # adapter check: the CLI wrote what the module API reads back
    t = Store(root).table("cohort")
    subjects = synth.generate(synth.SyntheticDatasetSpec(image_count=40, dims=(4, 4, 4)), 5)
    assert dict(t.retrieve("image", "data").rows) == {s.rowkey.encode(): s.blob for s in subjects}
    recs, _ = query.plan_subset(t, query.SubsetPredicate(), "proposed")
    assert len(recs) == 40


def test_upload_missing_file_fails(env, capsys):
    run, _, data, schema, tmp = env
    bad = tmp / "bad.tsv"
    bad.write_text(f"{tmp}/nope.bin\tx\timage\tdata\n")
    assert run("upload", "--table", "t", "--schema", str(schema), "--manifest", str(bad)) == 1
    assert "errors=1" in capsys.readouterr().out
    assert run("upload", "--table", "other", "--manifest", str(bad)) == 2


def test_retrieve_and_missing(env, capsys):
    run, _, data, schema, tmp = env
    upload(run, data, schema)
    capsys.readouterr()
    assert run("retrieve", "--table", "cohort", "--family", "image", "--qualifier", "data",
               "--rowkey", "img_03", "--dest-dir", str(tmp / "out")) == 0
    got = (tmp / "out" / "img_03").read_bytes()
    assert got == (data / "blobs" / "img_03.cgim").read_bytes()
    assert run("retrieve", "--table", "cohort", "--family", "image", "--qualifier", "data",
               "--rowkey", "zzz") == 1
    assert "not found" in capsys.readouterr().err
    assert run("retrieve", "--table", "cohort", "--family", "image", "--qualifier", "data",
               "--rowkey", "a", "--start", "b") == 2


def test_delete_counts(env, capsys):
    run, root, data, schema, tmp = env
    upload(run, data, schema)
    capsys.readouterr()
    run("delete", "--table", "cohort", "--family", "image", "--qualifier", "data", "--rowkey", "img_00")
    assert "deleted=1" in capsys.readouterr().out
    skip = tmp / "skip.txt"
    skip.write_text("img_12\nimg_15\n")
    run("delete", "--table", "cohort", "--family", "image", "--qualifier", "data", "--start", "img_10",
        "--stop", "img_20", "--skip", str(skip))
    assert "deleted=8" in capsys.readouterr().out
    keys = Store(root).table("cohort").keys("image")
    assert len(keys) == 31 and b"img_12" in keys and b"img_00" not in keys


def test_balance_dry_run_and_apply(env, capsys):
    run, root, data, schema, tmp = env
    presplit = tmp / "split.txt"
    presplit.write_text("".join(f"img_{i:02d}\n" for i in range(4, 40, 4)))
    upload(run, data, schema, "cohort", "--presplit", str(presplit), "--split-policy", "pre-split-only")
    digest = Store(root).table("cohort").digest()
    before = [r.node for r in Store(root).table("cohort").regions]
    capsys.readouterr()
    plan_path = tmp / "plan.csv"
    assert run("balance", "--table", "cohort", "--dry-run", "--plan-out", str(plan_path)) == 0
    assert [r.node for r in Store(root).table("cohort").regions] == before
    rows = list(csv.reader(plan_path.open()))
    assert rows[0] == ["region_id", "from", "to"] and len(rows) > 1
    assert run("balance", "--table", "cohort") == 0
    t = Store(root).table("cohort")
    assert t.digest() == digest and [r.node for r in t.regions] != before
    capsys.readouterr()
    assert run("monitor") == 0
    out = capsys.readouterr().out
    pl = topology.table_placement(t, topology.read_cluster(tmp / "cluster.tsv"))
    for node, frac in re.findall(r"  (n\d) bytes=\d+ fraction=([0-9.]+)", out):
        assert float(frac) == pytest.approx(pl.per_node_bytes.get(node, 0) / pl.total_bytes, abs=1e-6)


def test_mapreduce_full_and_subset(env, capsys):
    run, root, data, schema, tmp = env
    upload(run, data, schema)
    capsys.readouterr()
    assert run("mapreduce", "--table", "cohort", "--eta", "300") == 2
    assert "outside valid range" in capsys.readouterr().err
    metrics = tmp / "m.csv"
    assert run("mapreduce", "--table", "cohort", "--eta", "10", "--force", "--job-id", "full",
               "--metrics-out", str(metrics)) == 0
    assert capsys.readouterr().out.strip() == "full/mean"
    subjects = synth.generate(synth.SyntheticDatasetSpec(image_count=40, dims=(4, 4, 4)), 5)
    mean = Store(root).table("results").get(b"full/mean", "result", "data")
    oracle = np.mean([blob.decode(s.blob).astype(np.float64) for s in subjects], axis=0)
    assert np.max(np.abs(blob.decode(mean) - oracle) / np.abs(oracle)) <= 1e-6
    assert len(metrics.read_text().splitlines()) == 5
    last = json.loads((root / "jobs" / "last.json").read_text())
    capsys.readouterr()
    run("monitor")
    assert f"rack_local_fraction={last['rack_local_fraction']:.6f}" in capsys.readouterr().out
    acc = tmp / "acc.csv"
    assert run("mapreduce", "--table", "cohort", "--eta", "5", "--force", "--sex", "F",
               "--job-id", "sub", "--accounting-out", str(acc)) == 0
    assert acc.read_text().startswith("phase,family,bytes\n")


def test_mapreduce_schemes_agree(env, capsys):
    run, root, data, schema, tmp = env
    subjects = synth.generate(synth.SyntheticDatasetSpec.cohort(0.1, dims=(4, 4, 4)), 3)
    store = Store(root, ["n1", "n2"])
    synth.load_into(store, "p", subjects, "proposed")
    synth.load_into(store, "n", subjects, "naive")
    means, total = {}, {}
    for mode, name in (("proposed", "p"), ("naive", "n")):
        acc = tmp / f"{mode}.csv"
        assert run("mapreduce", "--table", name, "--scheme", mode, "--sex", "M", "--age-min", "40",
                   "--age-max", "60", "--eta", "5", "--force", "--job-id", mode, "--accounting-out", str(acc)) == 0
        means[mode] = Store(root).table("results").get(f"{mode}/mean".encode(), "result", "data")
        total[mode] = sum(int(r["bytes"]) for r in csv.DictReader(acc.open()))
    assert means["proposed"] == means["naive"]
    assert total["naive"] > total["proposed"]


def test_model_command(tmp_path, capsys):
    out = tmp_path / "curve.csv"
    assert cli.main(["model", "--step", "5", "--eta-min", "30", "--eta-max", "160", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    star = int(re.search(r"eta_star=(\d+)", text).group(1))
    assert 45 <= star <= 65
    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 27
    # doubling bandwidth halves the network share of every column
    fast = tmp_path / "fast.txt"
    inf = tmp_path / "inf.txt"
    cost_model.write_params(fast, cost_model.REFERENCE_PARAMS.replace(bandwidth_mb_s=140.0))
    cost_model.write_params(inf, cost_model.REFERENCE_PARAMS.replace(bandwidth_mb_s=math.inf))
    curves = {}
    for name, path in (("base", None), ("fast", fast), ("inf", inf)):
        p = tmp_path / f"{name}.csv"
        argv = ["model", "--step", "5", "--eta-min", "30", "--eta-max", "160", "--out", str(p)]
        assert cli.main(argv + (["--params", str(path)] if path else [])) == 0
        curves[name] = list(csv.DictReader(p.open()))
    for b, f, i in zip(curves["base"], curves["fast"], curves["inf"]):
        for col in ("wt_map", "wt_shuffle", "rt_map", "rt_shuffle", "wt_total", "rt_total"):
            net_b = float(b[col]) - float(i[col])
            net_f = float(f[col]) - float(i[col])
            assert net_b > 0
            assert net_f == pytest.approx(net_b / 2, rel=1e-9)
        assert b["wt_reduce"] == f["wt_reduce"]


def test_model_infeasible(tmp_path, capsys):
    p = tmp_path / "p.txt"
    cost_model.write_params(p, cost_model.REFERENCE_PARAMS.replace(mem_mb=10.0))
    assert cli.main(["model", "--params", str(p)]) == 1
    err = capsys.readouterr().err
    assert "lower=" in err and "upper=0.5" in err


def test_monitor_fresh(tmp_path, capsys):
    assert cli.main(["--store", str(tmp_path / "s"), "monitor"]) == 0
    assert capsys.readouterr().out.startswith("tables=0")


def test_busy_store(env, capsys):
    run, root, data, schema, _ = env
    upload(run, data, schema)
    other = Store(root)
    with other.exclusive():
        rc = run("delete", "--table", "cohort", "--family", "image", "--qualifier", "data", "--rowkey", "img_01")
    assert rc == 3
    assert Store(root).table("cohort").has_cell(b"img_01", "image", "data")


def test_synth_command(tmp_path, capsys):
    for d in ("a", "b"):
        assert cli.main(["--seed", "42", "synth", "--out", str(tmp_path / d), "--cohort-scale", "0.1",
                         "--dims", "2x2x2"]) == 0
    out = capsys.readouterr().out
    assert "F\t20-40\t65" in out
    for name in ("manifest.tsv", "index.tsv", "blobs/img_000.cgim"):
        a = (tmp_path / "a" / name).read_bytes()
        assert a and a == (tmp_path / "b" / name).read_bytes()
    assert cli.main(["synth", "--out", str(tmp_path / "c"), "--dims", "2x0x2"]) == 1
