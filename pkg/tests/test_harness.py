import numpy as np
import pytest

from plnbench import harness, pln
from plnbench.data import CountMatrix
from plnbench.errors import ValidationError
from plnbench.harness import DevianceRecord, DevianceTable
from plnbench.metrics import make_folds


@pytest.fixture(scope="module")
def small_run():
    m = pln.sample_pln([1.0, 0.5, 1.2], np.array([[0.5, 0.3, 0.2], [0.3, 0.5, 0.25],
                                                  [0.2, 0.25, 0.5]]), np.ones(24), seed=0)
    return m, harness.run_loto_cv(m, k=3, inner_k=3, seed=1, keep_models=True)


def test_protocol_shape(small_run):
    m, table = small_run
    for method in harness.METHODS:
        recs = table.for_method(method, include_failed=True)
        assert len(recs) == m.n_taxa * 3
        per_taxon = np.bincount([r.taxon for r in recs])
        np.testing.assert_array_equal(per_taxon, [3, 3, 3])
        assert all(r.deviance >= 0 for r in recs)
        assert all(r.n_heldout >= 1 for r in recs)
    keys = [(r.method, r.taxon, r.fold) for r in table.records]
    assert keys == sorted(keys) and len(set(keys)) == len(keys)


def test_score_is_plain_mean_of_cells(small_run):
    _, table = small_run
    for method in harness.METHODS:
        vals = [r.deviance for r in table.for_method(method)]
        assert table.score(method) == sum(vals) / len(vals)


def test_selected_alpha_on_grid(small_run):
    _, table = small_run
    for f in range(3):
        assert table.selected["pln"][str(f)]["alpha"] in harness.DEFAULT_ALPHA_GRID


def test_holdout_canary(small_run):
    m, table = small_run
    plan = make_folds(m.n_samples, 3, 1)
    row = int(plan.test_index(0)[0])
    counts = m.counts.copy()
    counts[row] = counts[row] * 7 + 13
    poked = CountMatrix(m.sample_ids, m.taxon_names, counts, m.offsets)
    other = harness.run_loto_cv(poked, k=3, inner_k=3, seed=1, keep_models=True)
    a, b = table.models[("pln", 0)], other.models[("pln", 0)]
    np.testing.assert_array_equal(a.sigma, b.sigma)
    np.testing.assert_array_equal(a.eta, b.eta)
    for j in range(m.n_taxa):
        pa, pb = table.models[("glm_poisson", j, 0)], other.models[("glm_poisson", j, 0)]
        for fa, fb in zip(pa.fits, pb.fits):
            np.testing.assert_array_equal(fa.coefs, fb.coefs)
            assert fa.intercept == fb.intercept
        assert pa.lambda_min == pb.lambda_min
    assert table.selected["pln"]["0"] == other.selected["pln"]["0"]
    # the same row is training data in the other folds, so those models move
    assert not np.array_equal(table.models[("pln", 1)].sigma, other.models[("pln", 1)].sigma)


def test_parallel_matches_serial(small_run):
    m, table = small_run
    par = harness.run_loto_cv(m, k=3, inner_k=3, seed=1, workers=3)
    assert par.to_csv() == table.to_csv()
    assert par.config_digest == table.config_digest


def test_csv_round_trip(small_run):
    _, table = small_run
    text = table.to_csv()
    assert text.splitlines()[0] == "method,taxon,fold,deviance,n_heldout,failed"
    back = DevianceTable.from_csv(text)
    assert back.records == table.records


def test_bad_arguments():
    m = pln.sample_pln([1.0, 1.0], np.eye(2) * 0.3, np.ones(10), seed=0)
    with pytest.raises(ValidationError):
        harness.run_loto_cv(m, methods=["nope"])
    with pytest.raises(ValidationError):
        harness.run_loto_cv(m, k=1)


def test_fitted_methods_beat_featureless_on_informative_data():
    sigma = np.full((4, 4), 0.5) + 0.5 * np.eye(4)
    m = pln.sample_pln(np.full(4, 1.0), sigma, np.ones(60), seed=3)
    table = harness.run_loto_cv(m, seed=0)
    assert table.score("pln") < table.score("featureless")
    assert table.score("glm_poisson") < table.score("featureless")


def test_no_spurious_gain_on_noise():
    gains = {"pln": [], "glm_poisson": []}
    rng = np.random.default_rng(0)
    for seed in range(5):
        y = rng.poisson(3.0, size=(45, 4)).astype(float)
        m = CountMatrix([f"s{i}" for i in range(45)], [f"t{j}" for j in range(4)], y,
                        np.ones(45))
        table = harness.run_loto_cv(m, seed=seed)
        base = table.score("featureless")
        for method in gains:
            gains[method].append((base - table.score(method)) / base)
    for method, vals in gains.items():
        assert np.median(vals) <= 0.05, (method, vals)


# -- report -------------------------------------------------------------------------------

def _table(values):
    records = []
    for method, devs in values.items():
        for c, dev in enumerate(devs):
            records.append(DevianceRecord(method, c // 3, c % 3, dev, 5))
    return DevianceTable(records, "toy", "digest", n_folds=3)


def test_report_identical_records_tie():
    devs = [0.3, 0.5, 0.2, 0.4, 0.6, 0.1]
    rep = harness.aggregate_report(_table({"pln": devs, "glm_poisson": devs}))
    (cmp,) = rep["comparisons"]
    assert cmp["delta_pct"] == 0.0
    assert cmp["winner"] == "tie"
    assert cmp["p_value"] == 1.0


def test_report_relative_gain_example():
    assert harness.relative_gain(0.2075, 0.3365) == pytest.approx(38.3, abs=0.05)
    rep = harness.aggregate_report(_table({"pln": [0.2075] * 6, "glm_poisson": [0.3365] * 6}))
    (cmp,) = rep["comparisons"]
    assert cmp["winner"] == "pln"
    assert round(cmp["delta_pct"], 1) == 38.3
    assert rep["methods"]["pln"]["se"] == 0.0
    assert cmp["p_value"] == pytest.approx(0.03125)
    assert cmp["q_value"] == pytest.approx(0.03125)


def test_report_rejects_empty():
    with pytest.raises(ValidationError):
        harness.aggregate_report(DevianceTable([], "x", "y"))


def test_failed_cells_excluded():
    recs = [DevianceRecord("pln", 0, f, 1.0, 4) for f in range(3)]
    recs.append(DevianceRecord("pln", 1, 0, float("nan"), 4, failed=True))
    rep = harness.aggregate_report(DevianceTable(recs, "x", "y", n_folds=3))
    assert rep["methods"]["pln"]["n_failed"] == 1
    assert rep["methods"]["pln"]["mean"] == 1.0


def test_alpha_ties_pick_more_shrinkage():
    assert harness._pick_alpha([0.0, 0.5, 1.0], np.array([0.2, 0.1, 0.1])) == 1.0
    assert harness._pick_alpha([0.0, 0.5, 1.0], np.array([0.05, 0.1, 0.1])) == 0.0


def test_config_digest_stable():
    a = harness.config_digest({"b": 1, "a": [0.1, 0.2]})
    assert a == harness.config_digest({"a": [0.1, 0.2], "b": 1})
    assert a != harness.config_digest({"a": [0.1, 0.3], "b": 1})
