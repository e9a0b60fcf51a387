import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plnbench import network, pln
from plnbench.data import CountMatrix, TruthEdgeSet
from plnbench.errors import ValidationError
from plnbench.network import Graph, graph_f1
from plnbench.synth import chain_precision, make_synthetic

TAXA = ["a", "b", "c", "d"]


def _graph(edges, taxa=TAXA):
    index = {t: i for i, t in enumerate(taxa)}
    A = np.zeros((len(taxa), len(taxa)), dtype=bool)
    for a, b in edges:
        A[index[a], index[b]] = A[index[b], index[a]] = True
    return Graph(list(taxa), A)


def _truth(edges, taxa=TAXA):
    return TruthEdgeSet(list(taxa), frozenset(tuple(sorted(e)) for e in edges))


def _kkt_gap(S, omega, rho):
    """Largest violation of the stationarity conditions of the off-diagonal glasso."""
    W = np.linalg.inv(omega)
    d = S.shape[0]
    off = ~np.eye(d, dtype=bool)
    grad = W - S
    on = off & (omega != 0)
    gap_on = np.abs(grad[on] - rho * np.sign(omega[on])).max(initial=0.0)
    gap_off = np.maximum(np.abs(grad[off & (omega == 0)]) - rho, 0).max(initial=0.0)
    gap_diag = np.abs(np.diag(grad)).max()
    return max(gap_on, gap_off, gap_diag)


# -- graphical lasso ----------------------------------------------------------------------

@pytest.mark.parametrize("s12, rho", [(0.6, 0.2), (-0.6, 0.2), (0.3, 0.5)])
def test_glasso_two_by_two_closed_form(s12, rho):
    S = np.array([[1.0, s12], [s12, 2.0]])
    w12 = np.sign(s12) * max(abs(s12) - rho, 0.0)
    expected = np.linalg.inv(np.array([[1.0, w12], [w12, 2.0]]))
    np.testing.assert_allclose(network.graphical_lasso(S, rho), expected, atol=1e-8)


def test_glasso_zero_penalty_inverts():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(50, 4))
    S = np.cov(X, rowvar=False)
    np.testing.assert_allclose(network.graphical_lasso(S, 0.0), np.linalg.inv(S), rtol=1e-4,
                               atol=1e-5)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000), st.integers(3, 7), st.floats(0.01, 0.4))
def test_glasso_stationarity(seed, d, frac):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(40, d)) @ rng.normal(size=(d, d))
    S = np.cov(X, rowvar=False)
    rho = frac * np.abs(S[~np.eye(d, dtype=bool)]).max()
    omega = network.graphical_lasso(S, rho)
    np.testing.assert_array_equal(omega, omega.T)
    assert np.all(np.linalg.eigvalsh(omega) > 0)
    assert _kkt_gap(S, omega, rho) <= 1e-4


def test_glasso_input_checks():
    with pytest.raises(ValidationError):
        network.graphical_lasso(np.array([[1.0, 0.2], [0.3, 1.0]]), 0.1)
    with pytest.raises(ValidationError):
        network.graphical_lasso(np.eye(2), -1.0)


def test_precision_path_grid_and_ebic():
    rng = np.random.default_rng(1)
    S = np.cov(rng.normal(size=(80, 5)), rowvar=False)
    path = network.precision_path(S, 80)
    assert path.rhos.size == 30
    assert path.rhos[-1] / path.rhos[0] == pytest.approx(network.RHO_MIN_RATIO)
    assert path.n_edges[0] == 0
    assert path.selected == int(np.argmin(path.ebic))
    omega = path.omegas[4]
    edges = path.n_edges[4]
    ll = 0.5 * 80 * (np.linalg.slogdet(omega)[1] - np.sum(S * omega))
    expected = -2 * ll + edges * (np.log(80) + 4 * 0.5 * np.log(5))
    assert path.ebic[4] == pytest.approx(expected, rel=1e-12)


def test_partial_correlations():
    omega = np.array([[2.0, -1.0], [-1.0, 2.0]])
    np.testing.assert_allclose(network.partial_correlations(omega), [[0, 0.5], [0.5, 0]])


# -- graph container and symmetrization ---------------------------------------------------

def test_graph_validation():
    with pytest.raises(ValidationError):
        Graph(["a", "b"], np.array([[False, True], [False, False]]))
    with pytest.raises(ValidationError):
        Graph(["a", "b"], np.eye(2, dtype=bool))
    with pytest.raises(ValidationError):
        Graph(["a"], np.zeros((2, 2), dtype=bool))
    g = _graph([("b", "a"), ("c", "d")])
    assert g.n_edges == 2 and g.edges() == [("a", "b"), ("c", "d")]
    assert g.to_tsv().splitlines()[0] == "taxon_a\ttaxon_b\tweight"


def test_symmetrize_rules_and_sign():
    coef = np.array([[0.0, 0.5, 0.0], [-0.8, 0.0, 0.0], [0.2, 0.0, 0.0]])
    A, W = network.symmetrize(coef, "max")
    np.testing.assert_array_equal(A, [[0, 1, 1], [1, 0, 0], [1, 0, 0]])
    assert W[0, 1] == W[1, 0] == -1.0
    assert W[0, 2] == W[2, 0] == 1.0
    A_and, _ = network.symmetrize(coef, "and")
    np.testing.assert_array_equal(A_and, [[0, 1, 0], [1, 0, 0], [0, 0, 0]])


def test_symmetrize_tie_stays_symmetric():
    coef = np.array([[0.0, 0.5], [-0.5, 0.0]])
    A, W = network.symmetrize(coef)
    np.testing.assert_array_equal(W, W.T)
    Graph(["a", "b"], A, W)


# -- F1 -----------------------------------------------------------------------------------

def test_f1_hand_examples():
    truth = _truth([("a", "b"), ("b", "c")])
    r = graph_f1(_graph([("a", "b"), ("c", "d")]), truth)
    assert (r.precision, r.recall, r.f1) == (0.5, 0.5, 0.5)
    r = graph_f1(_graph([("b", "a"), ("c", "b")]), truth)
    assert r.f1 == 1.0
    r = graph_f1(_graph([("a", "b"), ("b", "c"), ("a", "d")]), truth)
    assert r.precision == pytest.approx(2 / 3) and r.recall == 1.0
    assert r.f1 == pytest.approx(0.8)


def test_f1_degenerate_cases_are_zero():
    empty = network.diagonal_baseline(TAXA)
    assert graph_f1(empty, _truth([("a", "b")])).f1 == 0.0
    assert graph_f1(_graph([("a", "b")]), _truth([])).f1 == 0.0
    assert graph_f1(empty, _truth([])).f1 == 0.0


def test_f1_missing_truth_taxon():
    with pytest.raises(ValidationError, match="'zz'"):
        graph_f1(_graph([]), _truth([("a", "zz")], TAXA + ["zz"]))


# -- inference ----------------------------------------------------------------------------

def test_bootstrap_exactness_diagonal():
    sigma = np.linalg.inv(chain_precision(5, -0.4))
    m, truth = make_synthetic(np.ones(5), sigma, 40, seed=0)
    r = network.bootstrap_f1("diagonal", m, truth, b=network.DEFAULT_BOOTSTRAPS, seed=3)
    assert r.b == 20
    assert r.f1 == 0.0 and r.boot_mean == 0.0 and r.boot_se == 0.0


def test_bootstrap_deterministic():
    sigma = np.linalg.inv(chain_precision(4, -0.4))
    m, truth = make_synthetic(np.full(4, 1.5), sigma, 60, seed=1)
    a = network.bootstrap_f1("pln_network", m, truth, b=3, seed=7)
    b = network.bootstrap_f1("pln_network", m, truth, b=3, seed=7)
    assert a.to_dict() == b.to_dict()
    with pytest.raises(ValidationError):
        network.bootstrap_f1("diagonal", m, truth, b=1)
    with pytest.raises(ValidationError):
        network.infer_graph("nope", m)


def test_pln_network_recovers_strong_chain():
    sigma = np.linalg.inv(chain_precision(6, -0.45))
    m, truth = make_synthetic(np.full(6, 1.5), sigma, 400, seed=2)
    _, g = network.fit_pln_network(m)
    r = graph_f1(g, truth)
    assert r.recall >= 0.8
    assert r.f1 >= 0.6


def test_neighborhood_null_finds_little():
    rng = np.random.default_rng(5)
    y = rng.poisson(4.0, size=(150, 6)).astype(float)
    m = CountMatrix([f"s{i}" for i in range(150)], [f"t{j}" for j in range(6)], y,
                    np.ones(150))
    g = network.neighborhood_select(m, seed=0)
    assert g.n_edges <= 1


def test_neighborhood_finds_dependent_pair():
    m = pln.sample_pln([2.0, 2.0, 2.0], np.array([[0.5, 0.45, 0], [0.45, 0.5, 0],
                                                    [0, 0, 0.5]]), np.ones(300), seed=4)
    g = network.neighborhood_select(m, seed=0)
    assert g.adjacency[0, 1]
    assert g.weights[0, 1] == 1.0
