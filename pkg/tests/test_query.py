import hashlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from colocgrid import blob, query, synth
from colocgrid.query import NAIVE, PROPOSED, EmptySelection, IndexRecord, SubsetPredicate
from colocgrid.store import Store, ValidationError
from colocgrid.topology import NodeProfile

PROFILES = [NodeProfile("n1", 4, 1000), NodeProfile("n2", 4, 1500)]


@pytest.fixture(scope="module")
def cohort(tmp_path_factory):
    subjects = synth.generate(synth.SyntheticDatasetSpec.cohort(0.1, dims=(6, 6, 6), jitter_bytes=(0, 64)), 7)
    store = Store(tmp_path_factory.mktemp("cohort"), ["n1", "n2"])
    synth.load_into(store, "p", subjects, PROPOSED)
    synth.load_into(store, "n", subjects, NAIVE)
    return store, subjects


def oracle_keys(subjects, pred):
    out = []
    for s in subjects:
        age = float(np.float32(s.age))
        if pred.sex is not None and s.sex != pred.sex:
            continue
        if pred.age_min is not None and not age > pred.age_min:
            continue
        if pred.age_max is not None and not age <= pred.age_max:
            continue
        out.append(s.rowkey.encode())
    return out


def test_record_roundtrip():
    rec = IndexRecord(b"k", 123456789, 37.5, "M")
    raw = rec.encode()
    assert len(raw) == query.RECORD_SIZE == 13
    assert IndexRecord.decode(b"k", raw) == rec
    with pytest.raises(ValidationError):
        IndexRecord(b"k", 1, 1.0, "X")


def test_predicate_boundaries():
    p = SubsetPredicate(20.0, 40.0, "F")
    mk = lambda age: IndexRecord(b"k", 1, age, "F")
    assert not p.matches(mk(20.0)) and p.matches(mk(20.5)) and p.matches(mk(40.0)) and not p.matches(mk(40.1))
    assert not p.matches(IndexRecord(b"k", 1, 30.0, "M"))
    assert SubsetPredicate().matches(mk(0.0))
    with pytest.raises(ValidationError):
        SubsetPredicate(40.0, 20.0)
    with pytest.raises(ValidationError):
        SubsetPredicate(sex="x")


def test_empty_predicate_selects_all(cohort):
    store, subjects = cohort
    for name, mode in (("p", PROPOSED), ("n", NAIVE)):
        keys, _ = query.plan_subset(store.table(name), SubsetPredicate(), mode)
        assert keys == [s.rowkey.encode() for s in subjects]


@pytest.mark.parametrize("label,sex,lo,hi", [
    ("all", "F", None, None), ("20-40", "F", 20.0, 40.0), ("40-60", "M", 40.0, 60.0), (">60", "M", 60.0, None),
    ("4-20", None, 4.0, 20.0)])
def test_plan_matches_oracle_and_accounting(cohort, label, sex, lo, hi):
    store, subjects = cohort
    pred = SubsetPredicate(lo, hi, sex)
    want = oracle_keys(subjects, pred)
    kp, rp = query.plan_subset(store.table("p"), pred, PROPOSED)
    kn, rn = query.plan_subset(store.table("n"), pred, NAIVE)
    assert kp == kn == want
    assert rp.bytes_read == {"index": len(subjects) * query.RECORD_SIZE}
    assert rn.total_bytes >= sum(len(s.blob) for s in subjects)


def test_cohort_bin_counts(cohort):
    store, _ = cohort
    keys, _ = query.plan_subset(store.table("p"), SubsetPredicate(20.0, 40.0, "F"), PROPOSED)
    assert len(keys) == 65


def test_scheme_checks(cohort):
    store, _ = cohort
    assert query.detect_scheme(store.table("p")) == PROPOSED
    assert query.detect_scheme(store.table("n")) == NAIVE
    with pytest.raises(ValidationError):
        query.plan_subset(store.table("p"), SubsetPredicate(), NAIVE)
    with pytest.raises(ValidationError):
        query.plan_subset(store.table("p"), SubsetPredicate(), "mixed")
    with pytest.raises(ValidationError):
        query.scheme_schema("x", "mixed")


def test_exists_check(tmp_path):
    store = Store(tmp_path / "s", ["n1"])
    big = b"\x01" * (20 * 1024 * 1024)
    tables = {}
    for mode in (PROPOSED, NAIVE):
        t = store.create_table(query.scheme_schema(mode, mode))
        (ifam, iq), (dfam, dq) = query.COLUMNS[mode]
        t.put_many([(b"k", dfam, dq, big), (b"k", ifam, iq, IndexRecord(b"k", len(big), 30.0, "F").encode())])
        tables[mode] = t
    assert query.exists_check(tables[PROPOSED], b"missing", PROPOSED) == (False, 0)
    ok, n = query.exists_check(tables[PROPOSED], b"k", PROPOSED)
    assert ok and n <= 64
    ok, n = query.exists_check(tables[NAIVE], b"k", NAIVE)
    assert ok and n >= len(big)


def test_many_exists_checks_skip_images(cohort):
    store, subjects = cohort
    t = store.table("p")
    keys = [s.rowkey for s in subjects]
    present = total = 0
    for i in range(1000):
        ok, n = query.exists_check(t, keys[i % len(keys)] if i % 3 else f"absent_{i}", PROPOSED)
        present += ok
        total += n
    # only 13-byte index records were read, never an image cell
    assert present == sum(1 for i in range(1000) if i % 3)
    assert total == present * query.RECORD_SIZE


def test_subset_average_equal_across_modes(cohort):
    store, subjects = cohort
    pred = SubsetPredicate(40.0, 60.0, "M")
    rp = query.subset_average(store, "p", pred, PROPOSED, 10, PROFILES, job_id="qp")
    rn = query.subset_average(store, "n", pred, NAIVE, 10, PROFILES, job_id="qn")
    assert rp.rowkeys == rn.rowkeys and len(rp.rowkeys) == 28
    assert hashlib.sha256(rp.mean).digest() == hashlib.sha256(rn.mean).digest()
    chosen = set(rp.rowkeys)
    sizes = {s.rowkey.encode(): len(s.blob) for s in subjects}
    assert sum(t.bytes_image for t in rp.job.metrics.tasks) == sum(sizes[k] for k in chosen)
    vols = [blob.decode(s.blob).astype(np.float64) for s in subjects if s.rowkey.encode() in chosen]
    got = blob.decode(rp.mean).astype(np.float64)
    assert np.max(np.abs(got - np.mean(vols, axis=0)) / np.abs(np.mean(vols, axis=0))) <= 1e-6
    p_total = rp.plan_report.total_bytes + sum(t.bytes_image for t in rp.job.metrics.tasks)
    n_total = rn.plan_report.total_bytes + sum(t.bytes_image for t in rn.job.metrics.tasks)
    assert p_total < n_total
    rows = rp.accounting_rows(PROPOSED)
    assert ("plan", "index", len(subjects) * 13) in rows
    csv = query.accounting_csv(rows).splitlines()
    assert csv[0] == "phase,family,bytes" and len(csv) == len(rows) + 1


def test_subset_identity_and_single(cohort):
    store, subjects = cohort
    everything = query.subset_average(store, "p", SubsetPredicate(), PROPOSED, 50, PROFILES, job_id="all")
    vols = np.stack([blob.decode(s.blob).astype(np.float64) for s in subjects])
    assert np.max(np.abs(blob.decode(everything.mean) - vols.mean(axis=0)) / vols.mean(axis=0)) <= 1e-6
    young = sorted((s for s in subjects if s.sex == "F"), key=lambda s: s.age)[0]
    age = float(np.float32(young.age))
    pred = SubsetPredicate(np.nextafter(age, -np.inf), age, "F")
    one = query.subset_average(store, "p", pred, PROPOSED, 50, PROFILES, job_id="one")
    assert one.rowkeys == [young.rowkey.encode()]
    assert np.array_equal(blob.decode(one.mean), blob.decode(young.blob))


def test_empty_selection(cohort):
    store, _ = cohort
    with pytest.raises(EmptySelection):
        query.subset_average(store, "p", SubsetPredicate(89.99, 95.0, "F"), PROPOSED, 50, PROFILES)


@settings(max_examples=40, deadline=None)
@given(st.floats(0, 95), st.floats(0.5, 60), st.sampled_from([None, "F", "M"]))
def test_modes_agree_on_random_predicates(cohort, lo, width, sex):
    store, subjects = cohort
    pred = SubsetPredicate(lo, lo + width, sex)
    kp, _ = query.plan_subset(store.table("p"), pred, PROPOSED)
    kn, _ = query.plan_subset(store.table("n"), pred, NAIVE)
    assert kp == kn == oracle_keys(subjects, pred)


def test_index_tsv(tmp_path, cohort):
    _, subjects = cohort
    paths = synth.write_dataset(subjects[:5], tmp_path)
    recs = query.read_index_tsv(paths["index"])
    assert recs == [s.record() for s in subjects[:5]]
    (tmp_path / "bad.tsv").write_text("k\t1\t2\n")
    with pytest.raises(ValidationError):
        query.read_index_tsv(tmp_path / "bad.tsv")
