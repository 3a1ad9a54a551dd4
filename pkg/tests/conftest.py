import numpy as np
import pytest

from colocgrid import topology
from colocgrid.query import scheme_schema
from colocgrid.store import Store, TableSchema


@pytest.fixture
def store(tmp_path):
    return Store(tmp_path / "store", ["n1", "n2"])


@pytest.fixture
def ref_profiles():
    return topology.reference_cluster()


@pytest.fixture
def ref_store(tmp_path, ref_profiles):
    return Store(tmp_path / "grid", [p.node_id for p in ref_profiles])


@pytest.fixture
def simple_schema():
    return TableSchema("t", (("f", ("q", "r")), ("g", ("q",))))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def images_table(store, name, volumes, mode="proposed", **kw):
    """Load CGIM volumes under rowkeys img_000.. into a scheme-shaped table."""
    from colocgrid import blob
    from colocgrid.query import COLUMNS, IndexRecord

    table = store.create_table(scheme_schema(name, mode, **kw))
    (ifam, iq), (dfam, dq) = COLUMNS[mode]
    cells = []
    for i, vol in enumerate(volumes):
        key = f"img_{i:03d}".encode()
        b = blob.encode(vol)
        cells.append((key, dfam, dq, b))
        cells.append((key, ifam, iq, IndexRecord(key, len(b), 30.0, "F").encode()))
    table.put_many(cells)
    return table


def pytest_terminal_summary(terminalreporter):
    import sys

    results = getattr(sys.modules.get("test_acceptance"), "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for line in results:
            terminalreporter.write_line(line)
