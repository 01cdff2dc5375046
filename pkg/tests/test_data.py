import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splinegee import SchemaError, build_additive_basis, fit
from splinegee.data import ClusterData, CsvSchema, Dataset, read_csv, to_csv_string, validate, write_csv

from conftest import random_dataset


def test_three_rows_one_cluster():
    text = "cluster,y,x1,t1\na,1.0,0.5,0.1\na,2.0,0.7,0.2\na,3.5,1e-1,0.3\n"
    ds = read_csv(io.StringIO(text), x=["x1"], t=["t1"])
    assert ds.n == 1 and ds.K == 2 and ds.D == 1
    c = ds.clusters[0]
    assert c.m == 3
    np.testing.assert_array_equal(c.X[:, 0], 1.0)
    np.testing.assert_array_equal(c.X[:, 1], [0.5, 0.7, 0.1])
    np.testing.assert_array_equal(c.obs_index, [0, 1, 2])


def test_interleaved_ids_are_grouped_in_file_order():
    text = "cluster,y,t1\nb,1,0.1\na,2,0.2\nb,3,0.3\na,4,0.4\nb,5,0.5\n"
    ds = read_csv(io.StringIO(text), t=["t1"])
    assert [c.cluster_id for c in ds.clusters] == ["b", "a"]
    np.testing.assert_array_equal(ds.clusters[0].y, [1, 3, 5])
    np.testing.assert_array_equal(ds.clusters[1].y, [2, 4])


def test_cd4_style_schema():
    rng = np.random.default_rng(0)
    lines = ["id,cd4,smoking,drug,partners,depression,time,age"]
    for i in range(30):
        for j in range(4):
            lines.append(f"{i},{rng.poisson(800)},{rng.integers(0, 3)},{rng.integers(0, 2)},"
                         f"{rng.integers(-3, 6)},{rng.normal(0, 8):.3f},{j - 2 + rng.uniform():.3f},{rng.normal(0, 7):.2f}")
    schema = CsvSchema(cluster="id", response="cd4", x=("smoking", "drug", "partners", "depression"), t=("time", "age"))
    ds = read_csv(io.StringIO("\n".join(lines)), schema)
    assert (ds.K, ds.D, ds.n, ds.N) == (5, 2, 30, 120)
    assert ds.x_names[1:] == ("smoking", "drug", "partners", "depression")


def test_order_column_sorts_within_cluster():
    text = "cluster,y,t1,visit\n1,10,0.1,2\n1,11,0.2,0\n1,12,0.3,1\n"
    ds = read_csv(io.StringIO(text), t=["t1"], order="visit")
    np.testing.assert_array_equal(ds.clusters[0].obs_index, [0, 1, 2])
    np.testing.assert_array_equal(ds.clusters[0].y, [11, 12, 10])


def test_declared_intercept_is_not_duplicated():
    text = "cluster,y,one,x1\n1,1,1,2\n1,2,1,3\n"
    ds = read_csv(io.StringIO(text), x=["x1", "one"], intercept="one")
    assert ds.K == 2 and ds.x_names == ("one", "x1")
    text_bad = "cluster,y,one\n1,1,1\n1,2,0.5\n"
    with pytest.raises(SchemaError, match="not identically 1"):
        read_csv(io.StringIO(text_bad), x=["one"], intercept="one")


def test_missing_column_is_named():
    with pytest.raises(SchemaError, match="'t9'"):
        read_csv(io.StringIO("cluster,y,t1\n1,2,3\n"), t=["t9"])


def test_non_numeric_cell_reports_row():
    text = "cluster,y,t1\n1,2,0.1\n1,abc,0.2\n"
    with pytest.raises(SchemaError, match="row 3"):
        read_csv(io.StringIO(text), t=["t1"])


def test_missing_value_is_rejected():
    with pytest.raises(SchemaError, match="row 2"):
        read_csv(io.StringIO("cluster,y,t1\n1,,0.1\n"), t=["t1"])


@pytest.mark.parametrize("text", ["", "cluster,y,t1\n"])
def test_empty_file(text):
    with pytest.raises(SchemaError, match="empty"):
        read_csv(io.StringIO(text), t=["t1"])


def test_validate_well_formed_is_empty(rng):
    assert validate(random_dataset(rng, min_m=2)) == []


def test_validate_nan_response_names_cluster_and_row(rng):
    ds = random_dataset(rng, n=5, min_m=3)
    c = ds.clusters[2]
    y = c.y.copy()
    y[1] = np.nan
    bad = Dataset(ds.clusters[:2] + (ClusterData(c.cluster_id, y, c.X, c.T, c.obs_index),) + ds.clusters[3:])
    findings = validate(bad)
    assert [(f.kind, f.cluster, f.row) for f in findings] == [("non_finite", 2, 1)]


def test_validate_constant_t(rng):
    ds = random_dataset(rng, n=5, D=1, min_m=2)
    flat = Dataset(tuple(ClusterData(c.cluster_id, c.y, c.X, np.full((c.m, 1), 0.3)) for c in ds.clusters))
    kinds = [f.kind for f in validate(flat)]
    assert kinds == ["degenerate_support"]
    assert "0.3" in validate(flat)[0].message


@st.composite
def datasets(draw):
    seed = draw(st.integers(0, 2**32 - 1))
    rng = np.random.default_rng(seed)
    n = draw(st.integers(1, 8))
    K = draw(st.integers(1, 3))
    D = draw(st.integers(0, 2))
    ds = random_dataset(rng, n=n, K=K, D=D, max_m=4)
    scale = draw(st.sampled_from([1e-300, 1e-8, 1.0, 1e12, 1e300]))
    clusters = tuple(ClusterData(f"c{c.cluster_id}", c.y * scale, c.X, c.T, c.obs_index) for c in ds.clusters)
    return Dataset(clusters)


@settings(max_examples=50, deadline=None)
@given(datasets())
def test_write_read_round_trip(ds):
    back = read_csv(io.StringIO(to_csv_string(ds)), x=list(ds.x_names[1:]), t=list(ds.t_names), order="order")
    assert back.n == ds.n and back.x_names == ds.x_names and back.t_names == ds.t_names
    for a, b in zip(ds.clusters, back.clusters):
        assert str(a.cluster_id) == b.cluster_id
        for attr in ("y", "X", "T", "obs_index"):
            np.testing.assert_array_equal(getattr(a, attr), getattr(b, attr))


def test_write_csv_to_path(tmp_path, rng):
    ds = random_dataset(rng, n=3)
    p = tmp_path / "d.csv"
    write_csv(ds, p)
    back = read_csv(p, x=["x1"], t=["t1", "t2"], order="order")
    assert back.N == ds.N


def test_permuting_cluster_blocks_only_reorders_clusters(rng):
    ds = random_dataset(rng, n=30, min_m=2)
    text = to_csv_string(ds).splitlines()
    header, rows = text[0], text[1:]
    blocks = {}
    for r in rows:
        blocks.setdefault(r.split(",")[0], []).append(r)
    keys = list(blocks)
    perm = np.random.default_rng(1).permutation(len(keys))
    shuffled = "\n".join([header] + [r for k in perm for r in blocks[keys[k]]])
    kw = dict(x=["x1"], t=["t1", "t2"], order="order")
    a = read_csv(io.StringIO("\n".join(text)), **kw)
    b = read_csv(io.StringIO(shuffled), **kw)
    assert [c.cluster_id for c in b.clusters] == [keys[k] for k in perm]
    basis = build_additive_basis(a.pooled_T(), 2)
    fa = fit(a, basis, "identity", "ex")
    fb = fit(b, basis, "identity", "ex")
    np.testing.assert_allclose(fb.theta, fa.theta, rtol=0, atol=1e-10)


def test_from_arrays_groups_by_first_appearance():
    ds = Dataset.from_arrays([3, 1, 3, 2], [1, 2, 3, 4], np.ones((4, 1)), np.zeros((4, 0)))
    assert [c.cluster_id for c in ds.clusters] == [3, 1, 2]
    assert ds.sizes.tolist() == [2, 1, 1]


def test_cluster_rejects_mismatched_index():
    with pytest.raises(ValueError):
        ClusterData(0, [1.0, 2.0], np.ones((2, 1)), np.zeros((2, 0)), [0])
