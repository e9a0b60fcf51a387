import json

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from plnbench.data import (CountMatrix, DatasetStats, TruthEdgeSet, apply_transform,
                           canonical_pair, compute_offsets, dataset_stats, load_count_table,
                           load_truth_edges, mean_absolute_correlation, predict_winner,
                           write_count_table, write_truth_edges)
from plnbench.errors import EmptyInputError, IngestionError


def _write(tmp_path, text, name="counts.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def _matrix(counts):
    counts = np.asarray(counts, dtype=float)
    n, d = counts.shape
    return CountMatrix([f"s{i}" for i in range(n)], [f"t{j}" for j in range(d)], counts,
                       np.maximum(counts.sum(axis=1), 1.0))


count_tables = arrays(np.int64, st.tuples(st.integers(2, 8), st.integers(2, 6)),
                      elements=st.integers(0, 60))


# -- ingestion ----------------------------------------------------------------------------

def test_load_three_by_two_applies_offset_floor(tmp_path):
    p = _write(tmp_path, "sample_id,a,b\ns1,1,2\ns2,0,0\ns3,4,1\n")
    m = load_count_table(p)
    assert (m.n_samples, m.n_taxa) == (3, 2)
    np.testing.assert_array_equal(m.offsets, [3.0, 1.0, 5.0])
    assert m.sample_ids == ["s1", "s2", "s3"]
    assert m.taxon_names == ["a", "b"]


def test_duplicate_taxon_header(tmp_path):
    p = _write(tmp_path, "sample_id,a,a\ns1,1,2\ns2,0,1\n")
    with pytest.raises(IngestionError, match="duplicate taxon"):
        load_count_table(p)


def test_single_row_rejected(tmp_path):
    p = _write(tmp_path, "sample_id,a,b\ns1,1,2\n")
    with pytest.raises(IngestionError, match="fewer than 2 samples"):
        load_count_table(p)


def test_single_column_rejected(tmp_path):
    p = _write(tmp_path, "sample_id,a\ns1,1\ns2,3\n")
    with pytest.raises(IngestionError, match="fewer than 2 taxa"):
        load_count_table(p)


@pytest.mark.parametrize("cell, needle", [("-1", "negative count"), ("x", "non-numeric"),
                                          ("1.5", "non-numeric")])
def test_bad_cells_name_row_and_column(tmp_path, cell, needle):
    p = _write(tmp_path, f"sample_id,a,b\ns1,1,2\ns2,{cell},1\n")
    with pytest.raises(IngestionError, match=needle) as info:
        load_count_table(p)
    assert "row 3" in str(info.value) and "'a'" in str(info.value)


def test_duplicate_sample_and_bad_header(tmp_path):
    with pytest.raises(IngestionError, match="duplicate sample id"):
        load_count_table(_write(tmp_path, "sample_id,a,b\ns1,1,2\ns1,0,1\n"))
    with pytest.raises(IngestionError, match="header"):
        load_count_table(_write(tmp_path, "id,a,b\ns1,1,2\ns2,0,1\n", "h.csv"))
    with pytest.raises(IngestionError, match="row 2 has 2 cells"):
        load_count_table(_write(tmp_path, "sample_id,a,b\ns1,1\ns2,0,1\n", "r.csv"))


def test_empty_file_is_io_error(tmp_path):
    with pytest.raises(EmptyInputError):
        load_count_table(_write(tmp_path, ""))


@settings(max_examples=30, deadline=None)
@given(count_tables)
def test_csv_round_trip(tmp_path_factory, counts):
    m = _matrix(counts)
    p = tmp_path_factory.mktemp("rt") / "m.csv"
    write_count_table(m, p)
    back = load_count_table(p)
    np.testing.assert_array_equal(back.counts, m.counts)
    np.testing.assert_array_equal(back.offsets, m.offsets)
    assert back.taxon_names == m.taxon_names


# -- offsets and transforms ---------------------------------------------------------------

def test_offsets_row_sum_and_unit():
    m = _matrix([[1, 2], [4, 1], [0, 0]])
    np.testing.assert_array_equal(compute_offsets(m, "row_sum"), [3.0, 5.0, 1.0])
    np.testing.assert_array_equal(compute_offsets(m, "unit"), [1.0, 1.0, 1.0])


def test_log1p_round_values():
    # high-precision oracle for round(ln 101)
    assert int(mpmath.nint(mpmath.log(mpmath.mpf(101)))) == 5
    m = _matrix([[0, 100], [3, 7]])
    t = apply_transform(m, "log1p_round")
    np.testing.assert_array_equal(t.counts, [[0, 5], [1, 2]])
    np.testing.assert_array_equal(t.offsets, [5.0, 3.0])


def test_transform_none_is_identity():
    m = _matrix([[0, 100], [3, 7]])
    assert apply_transform(m, "none") is m


@settings(max_examples=50, deadline=None)
@given(count_tables)
def test_transform_properties(counts):
    m = _matrix(counts)
    assert np.all(compute_offsets(m, "row_sum") >= 1.0)
    t = apply_transform(m, "log1p_round")
    # monotone entrywise: sorting raw values sorts transformed values
    flat_raw, flat_t = m.counts.ravel(), t.counts.ravel()
    order = np.argsort(flat_raw, kind="stable")
    assert np.all(np.diff(flat_t[order]) >= 0)
    assert np.all(t.offsets >= 1.0)


def test_subset_rows_with_repeats_keeps_ids_unique():
    m = _matrix([[1, 2], [3, 4]])
    sub = m.subset_rows([0, 0, 1])
    assert len(set(sub.sample_ids)) == 3
    np.testing.assert_array_equal(sub.counts, [[1, 2], [1, 2], [3, 4]])


# -- stats --------------------------------------------------------------------------------

def test_mac_perfect_correlation():
    x = np.column_stack([np.arange(6.0), 2 * np.arange(6.0) + 1])
    assert mean_absolute_correlation(x) == pytest.approx(1.0)


def test_mac_constant_column_contributes_zero():
    x = np.column_stack([np.arange(5.0), np.ones(5), np.arange(5.0)])
    # pairs: (0,1)=0, (0,2)=1, (1,2)=0
    assert mean_absolute_correlation(x) == pytest.approx(1 / 3)


def test_sparsity_hand_count():
    m = _matrix(np.column_stack([[0, 1, 2, 3], [3, 2, 1, 0]]))
    s = dataset_stats(m)
    assert s.sparsity == 0.25


def test_overdispersion_skips_all_zero_taxa():
    m = _matrix(np.column_stack([[0, 2, 4, 6], [0, 0, 0, 0]]))
    s = dataset_stats(m)
    vals = np.array([0, 2, 4, 6.0])
    assert s.overdispersion == pytest.approx(vals.var(ddof=1) / vals.mean())


def test_nd_ratio_for_55_by_62():
    m = _matrix(np.ones((55, 62)) + np.arange(62))
    s = dataset_stats(m)
    assert s.nd_ratio == 55 / 62
    assert round(s.nd_ratio, 2) == 0.89


@settings(max_examples=40, deadline=None)
@given(count_tables, st.randoms(use_true_random=False))
def test_stats_invariants(counts, rnd):
    m = _matrix(counts)
    s = dataset_stats(m)
    assert s.nd_ratio == m.n_samples / m.n_taxa
    nonzero = np.count_nonzero(m.counts) / m.counts.size
    assert s.sparsity + nonzero == pytest.approx(1.0, abs=1e-15)
    assert 0.0 <= s.mac <= 1.0 + 1e-12
    assert s.overdispersion >= 0.0
    perm = list(range(m.n_samples))
    rnd.shuffle(perm)
    assert dataset_stats(m.subset_rows(perm)).mac == pytest.approx(s.mac, abs=1e-12)
    assert dataset_stats(m) == s


def _stats(nd):
    return DatasetStats(10, 10, nd, 0.5, 0.1, 2.0)


@pytest.mark.parametrize("nd, winner", [(0.89, "pln"), (0.30, "pln"), (77.74, "glm_poisson"),
                                        (5.0, "glm_poisson"), (18270 / 235, "glm_poisson")])
def test_predict_winner(nd, winner):
    w, rationale = predict_winner(_stats(nd))
    assert w == winner
    assert f"{nd:.2f}" in rationale and "MAC" in rationale and "overdispersion" in rationale


def test_stats_json_keys():
    s = dataset_stats(_matrix([[1, 2], [3, 0]]))
    assert list(json.loads(s.to_json())) == ["n_samples", "n_taxa", "nd_ratio", "sparsity",
                                             "mac", "overdispersion"]


# -- truth edges --------------------------------------------------------------------------

def test_truth_edges_with_signs(tmp_path):
    p = _write(tmp_path, "taxon_a\ttaxon_b\tsign\na\tb\t+1\nc\tb\t-1\n", "t.tsv")
    t = load_truth_edges(p)
    assert t.edges == {("a", "b"), ("b", "c")}
    assert t.signs == {("a", "b"): 1, ("b", "c"): -1}
    assert ("c", "b") in t and ("b", "c") in t


def test_truth_duplicate_in_either_order(tmp_path):
    p = _write(tmp_path, "taxon_a\ttaxon_b\tsign\na\tb\t+1\nb\ta\t-1\n", "t.tsv")
    with pytest.raises(IngestionError, match="duplicate edge"):
        load_truth_edges(p)


def test_truth_self_loop_and_bad_sign(tmp_path):
    with pytest.raises(IngestionError, match="self-loop"):
        load_truth_edges(_write(tmp_path, "taxon_a\ttaxon_b\tsign\na\ta\t+1\n", "s.tsv"))
    with pytest.raises(IngestionError, match="unknown sign"):
        load_truth_edges(_write(tmp_path, "taxon_a\ttaxon_b\tsign\na\tb\t2\n", "u.tsv"))


def test_truth_unsigned_and_unicode_minus(tmp_path):
    p = _write(tmp_path, "taxon_a\ttaxon_b\tsign\na\tb\t\nb\tc\t−1\n", "t.tsv")
    t = load_truth_edges(p)
    assert t.signs == {("b", "c"): -1}


names = st.text(alphabet="abcdefgh", min_size=1, max_size=3)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(names, names, st.sampled_from([1, -1, None])), max_size=12))
def test_truth_round_trip(tmp_path_factory, rows):
    edges, signs = {}, {}
    for a, b, s in rows:
        if a == b:
            continue
        pair = canonical_pair(a, b)
        if pair in edges:
            continue
        edges[pair] = True
        if s is not None:
            signs[pair] = s
    taxa = sorted({t for p in edges for t in p})
    truth = TruthEdgeSet(taxa, frozenset(edges), signs or None)
    path = tmp_path_factory.mktemp("tr") / "t.tsv"
    write_truth_edges(truth, path)
    back = load_truth_edges(path)
    assert back.edges == truth.edges
    assert (back.signs or {}) == signs
