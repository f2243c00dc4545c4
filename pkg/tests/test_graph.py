import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import autograd_of, central_difference, relative_error
from createrec.data import BipartiteGraph
from createrec.embeddings import EmbeddingTables
from createrec.graph import GraphEncoder, GraphEncoderConfig, NegativeSampler, build_ii_graph


def make(edges, num_users, num_items, dim=4, seed=0, **cfg):
    torch.manual_seed(seed)
    us, its = zip(*edges)
    graph = BipartiteGraph(num_users, num_items, list(us), list(its))
    tables = EmbeddingTables(num_users, num_items, dim, 4, torch.float64)
    return GraphEncoder(GraphEncoderConfig(**cfg), tables, graph)


def dense_oracle(enc, k):
    """Mean of ``A_hat^0..k E`` built from dense degree-normalized adjacency."""
    g = enc.graph
    m, n = g.num_users, g.num_items
    a = np.zeros((m + n, m + n))
    for u, i in g.edges:
        a[u, m + i] = a[m + i, u] = 1.0
    deg = a.sum(1)
    inv = np.where(deg > 0, 1 / np.sqrt(np.maximum(deg, 1e-300)), 0.0)
    a_hat = inv[:, None] * a * inv[None, :]
    e = torch.cat([enc.tables.user_table, enc.tables.item_table[1:]]).detach().numpy()
    total = np.zeros_like(e)
    x = e
    for _ in range(k + 1):
        total += x
        x = a_hat @ x
    return total / (k + 1)


FOUR_NODE = [(0, 0), (0, 1), (1, 1)]


@pytest.mark.parametrize("k", [0, 1, 2])
def test_propagation_matches_dense_oracle(k):
    enc = make(FOUR_NODE, 2, 2, num_layers=k)
    state = enc.propagate()
    got = torch.cat([state.user_out, state.item_out]).detach().numpy()
    assert np.abs(got - dense_oracle(enc, k)).max() < 1e-6


def test_k0_is_identity():
    enc = make(FOUR_NODE, 2, 2, num_layers=0)
    state = enc.propagate()
    assert torch.equal(state.user_out, enc.tables.user_table)
    assert torch.equal(state.item_out, enc.tables.item_table[1:])


def test_single_edge_hand_case():
    enc = make([(0, 0)], 1, 1, dim=2, num_layers=1)
    with torch.no_grad():
        enc.tables.user_table.copy_(torch.tensor([[1.0, 0.0]]))
        enc.tables.item_table[1] = torch.tensor([0.0, 1.0])
    s = enc.propagate()
    assert torch.allclose(s.user_out, torch.tensor([[0.5, 0.5]], dtype=torch.float64))
    assert torch.allclose(s.item_out, torch.tensor([[0.5, 0.5]], dtype=torch.float64))


def test_isolated_item_is_scaled_raw_row():
    enc = make(FOUR_NODE, 2, 3, num_layers=2)
    s = enc.propagate()
    # item 2 has no edges: only layer 0 contributes
    assert torch.allclose(s.item_out[2], enc.tables.item_table[3] / 3)


def test_propagation_is_linear():
    enc = make(FOUR_NODE, 2, 2, num_layers=2)
    base = enc.propagate()
    with torch.no_grad():
        enc.tables.user_table.mul_(3.0)
        enc.tables.item_table.mul_(3.0)
    scaled = enc.propagate()
    assert torch.allclose(scaled.user_out, 3 * base.user_out)
    assert torch.allclose(scaled.item_out, 3 * base.item_out)


def test_user_permutation_equivariance():
    edges = [(0, 0), (0, 2), (1, 1), (2, 2), (2, 1)]
    enc = make(edges, 3, 3, num_layers=2)
    perm = [2, 0, 1]  # old user u becomes perm[u]
    enc2 = make([(perm[u], i) for u, i in edges], 3, 3, num_layers=2)
    with torch.no_grad():
        enc2.tables.item_table.copy_(enc.tables.item_table)
        for u in range(3):
            enc2.tables.user_table[perm[u]] = enc.tables.user_table[u]
    a, b = enc.propagate(), enc2.propagate()
    assert torch.allclose(a.item_out, b.item_out, atol=1e-12)
    for u in range(3):
        assert torch.allclose(a.user_out[u], b.user_out[perm[u]], atol=1e-12)


def test_bpr_equal_scores_is_ln2():
    enc = make(FOUR_NODE, 2, 2, lambda_reg=0.0, num_layers=0)
    with torch.no_grad():
        enc.tables.item_table[1:] = enc.tables.item_table[1]
    loss = enc.bpr_loss(enc.propagate(), torch.tensor([0]), torch.tensor([0]), torch.tensor([[1]]))
    assert math.isclose(loss.item(), math.log(2), rel_tol=1e-12)


def test_bpr_large_margin_goes_to_zero():
    enc = make(FOUR_NODE, 2, 2, dim=2, lambda_reg=0.0, num_layers=0)
    with torch.no_grad():
        enc.tables.user_table[0] = torch.tensor([1.0, 0.0])
        enc.tables.item_table[1] = torch.tensor([100.0, 0.0])
        enc.tables.item_table[2] = torch.tensor([-100.0, 0.0])
    loss = enc.bpr_loss(enc.propagate(), torch.tensor([0]), torch.tensor([0]), torch.tensor([[1]]))
    assert loss.item() < 1e-30


def test_bpr_gradient_finite_difference():
    edges = [(0, 0), (0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (1, 0)]
    enc = make(edges, 5, 6, dim=4, num_layers=2, lambda_reg=0.1)
    users = torch.tensor([0, 1, 4])
    pos = torch.tensor([1, 2, 5])
    neg = torch.tensor([[3], [4], [0]])
    fn = lambda: enc.bpr_loss(enc.propagate(), users, pos, neg)
    for p in (enc.tables.user_table, enc.tables.item_table):
        assert relative_error(autograd_of(fn, p), central_difference(fn, p)) < 1e-4


def test_ultragcn_gradient_finite_difference():
    edges = [(0, 0), (0, 1), (1, 1), (1, 2), (2, 0), (2, 2), (3, 3), (4, 4), (4, 5), (3, 5)]
    enc = make(edges, 5, 6, dim=4, mode="ultragcn", num_negatives=3, ii_topk=2, lambda_reg=0.05)
    users = torch.tensor([0, 1, 3, 4])
    pos = torch.tensor([1, 2, 3, 5])
    neg = torch.tensor([[2, 3, 4], [0, 3, 5], [0, 1, 2], [0, 1, 2]])
    fn = lambda: enc.ultragcn_loss(users, pos, neg)
    _, parts = enc.ultragcn_loss(users, pos, neg, return_parts=True)
    assert parts["L_I"].item() > 0
    for p in (enc.tables.user_table, enc.tables.item_table):
        assert relative_error(autograd_of(fn, p), central_difference(fn, p)) < 1e-4


def test_ultragcn_zero_embeddings_and_zero_weights():
    edges = [(0, 0), (0, 1), (1, 1), (1, 2)]
    enc = make(edges, 2, 3, mode="ultragcn", num_negatives=2, lambda_c=0.0, gamma_i=0.0, lambda_reg=0.0)
    with torch.no_grad():
        enc.tables.user_table.zero_()
    users, pos, neg = torch.tensor([0, 1]), torch.tensor([0, 2]), torch.tensor([[2, 2], [0, 0]])
    total, parts = enc.ultragcn_loss(users, pos, neg, return_parts=True)
    assert math.isclose(parts["L_O"].item(), math.log(2), rel_tol=1e-12)
    assert torch.equal(total, parts["L_O"])


def test_beta_formula():
    enc = make([(0, 0), (0, 1), (1, 1)], 2, 2, mode="ultragcn")
    b = enc.beta(torch.tensor([0, 1]), torch.tensor([0, 1]))
    expected = [0.5 * math.sqrt(3 / 2), 1.0 * math.sqrt(2 / 3)]
    assert torch.allclose(b, torch.tensor(expected, dtype=torch.float64))


def test_ii_graph_dense_oracle():
    rng = np.random.default_rng(2)
    a = (rng.random((7, 6)) < 0.4).astype(float)
    a[0, :] = 1
    us, its = np.nonzero(a)
    graph = BipartiteGraph(7, 6, us, its)
    nb = build_ii_graph(graph, topk=3)
    g = a.T @ a
    gs = g.sum(1)
    for i in range(6):
        w = {j: g[i, j] / (gs[i] - g[i, i]) * math.sqrt(gs[i] / gs[j]) for j in range(6) if j != i and g[i, j] > 0}
        expected = sorted(w.items(), key=lambda kv: (-kv[1], kv[0]))[:3]
        got = nb.of(i)
        assert [j for j, _ in got] == [j for j, _ in expected]
        assert np.allclose([v for _, v in got], [v for _, v in expected])


def test_ii_graph_single_coocurrence_and_blocks():
    graph = BipartiteGraph(1, 3, [0, 0], [0, 1])
    nb = build_ii_graph(graph, topk=5)
    assert [j for j, _ in nb.of(0)] == [1] and [j for j, _ in nb.of(1)] == [0]
    assert nb.of(2) == []
    # two disjoint user groups: no cross-group neighbours
    graph = BipartiteGraph(2, 4, [0, 0, 1, 1], [0, 1, 2, 3])
    nb = build_ii_graph(graph, topk=5)
    for i in range(4):
        assert all((j < 2) == (i < 2) for j, _ in nb.of(i))


def test_ii_graph_roundtrip(tmp_path):
    nb = build_ii_graph(BipartiteGraph(2, 3, [0, 0, 1, 1], [0, 1, 1, 2]), 2)
    nb.save(tmp_path / "ii.npz")
    back = type(nb).load(tmp_path / "ii.npz")
    assert np.array_equal(back.neighbors, nb.neighbors) and np.array_equal(back.weights, nb.weights)


def test_global_user_repr():
    enc = make(FOUR_NODE, 2, 2, num_layers=1)
    s = enc.propagate()
    assert torch.equal(enc.global_user_repr(s, torch.tensor([1])), s.user_out[[1]])
    with pytest.raises(IndexError):
        enc.global_user_repr(s, torch.tensor([2]))
    u = make(FOUR_NODE, 2, 2, mode="ultragcn")
    assert torch.equal(u.global_user_repr(u.propagate(), torch.tensor([0])), u.tables.user_table[[0]])


def test_negative_sampler_never_returns_seen():
    graph = BipartiteGraph(3, 5, [0, 0, 0, 0, 1, 2], [0, 1, 2, 3, 4, 0])
    sampler = NegativeSampler(graph.interaction_matrix())
    neg = sampler.sample(np.array([0, 1, 2]), 50, np.random.default_rng(0))
    assert (neg[0] == 4).all()
    assert not (neg[1] == 4).any() and not (neg[2] == 0).any()
    full = BipartiteGraph(1, 2, [0, 0], [0, 1])
    with pytest.raises(ValueError):
        NegativeSampler(full.interaction_matrix()).sample(np.array([0]), 1, np.random.default_rng(0))


def test_config_errors():
    with pytest.raises(ValueError):
        make(FOUR_NODE, 2, 2, mode="gcn")
    with pytest.raises(ValueError):
        make(FOUR_NODE, 2, 2, num_layers=-1)
    assert GraphEncoderConfig().negatives == 1
    assert GraphEncoderConfig(mode="ultragcn").negatives == 64


@settings(max_examples=30, deadline=None)
@given(st.sets(st.tuples(st.integers(0, 3), st.integers(0, 4)), min_size=1), st.integers(0, 3))
def test_propagation_oracle_random_graphs(edges, k):
    enc = make(sorted(edges), 4, 5, num_layers=k)
    s = enc.propagate()
    got = torch.cat([s.user_out, s.item_out]).detach().numpy()
    assert np.abs(got - dense_oracle(enc, k)).max() < 1e-9
