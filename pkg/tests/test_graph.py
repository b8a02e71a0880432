import numpy as np
import pytest
import torch

import cases
import oracles
from vimts.graph import ChannelGraph, compensate


def make_graph(N=3, D=4, V=3, hops=2, seed=0, ordered=False):
    torch.manual_seed(seed)
    g = ChannelGraph(N, D, V, hops, ordered=ordered).double()
    return cases.jitter(g, np.random.default_rng(seed))


def permuted_copy(g, perm):
    """Same graph with static dictionaries relabelled by ``perm``."""
    N, V = g.static[0].shape
    h = ChannelGraph(N, g.dynamic[0].in_features, V, g.hops, ordered=g.ordered).double()
    h.load_state_dict(g.state_dict())
    with torch.no_grad():
        for k in range(2):
            h.static[k].copy_(g.static[k][perm])
    return h


# -- hybrid embeddings -----------------------------------------------------------


def test_gate_dead_zone_returns_static_dictionary():
    g = make_graph()
    with torch.no_grad():
        for k in range(2):
            g.gate[k].weight.zero_()  # tanh(0) = 0 -> gate closed
    H = torch.randn(3, 4, dtype=torch.float64)
    E1, E2 = g.hybrid_embeddings(H)
    assert torch.equal(E1, g.static[0]) and torch.equal(E2, g.static[1])
    with torch.no_grad():
        for k in range(2):
            g.gate[k].weight.fill_(-1.0)
    H = torch.rand(3, 4, dtype=torch.float64)
    g.static[0].data.abs_()
    g.static[1].data.abs_()
    E1, _ = g.hybrid_embeddings(H)
    assert torch.equal(E1, g.static[0])


def test_zero_history_keeps_static_dictionary():
    g = make_graph()
    E1, E2 = g.hybrid_embeddings(torch.zeros(3, 4, dtype=torch.float64))
    assert torch.equal(E1, g.static[0]) and torch.equal(E2, g.static[1])


# -- adjacency -------------------------------------------------------------------


def test_adjacency_single_channel():
    g = make_graph(N=1)
    A = g.adjacency(*g.hybrid_embeddings(torch.randn(1, 4, dtype=torch.float64)))
    assert A.tolist() == [[1.0]]


@pytest.mark.parametrize("ordered", [False, True])
def test_adjacency_negative_scores_uniform(ordered):
    g = make_graph(N=4, ordered=ordered)
    E1 = torch.ones(4, 3, dtype=torch.float64)
    A = g.adjacency(E1, -E1)
    assert torch.allclose(A, torch.full((4, 4), 0.25, dtype=torch.float64), atol=0)


@pytest.mark.parametrize("ordered", [False, True])
def test_adjacency_row_stochastic(ordered):
    g = make_graph(N=6, D=5, V=4, ordered=ordered)
    H = torch.randn(7, 9, 6, 5, dtype=torch.float64) * 3
    A = g.adjacency(*g.hybrid_embeddings(H))
    assert torch.allclose(A.sum(-1), torch.ones(7, 9, 6, dtype=torch.float64), atol=1e-6)
    assert torch.all((A > 0) & (A <= 1))


# -- propagation -----------------------------------------------------------------


def test_zero_gcn_weights_pure_skip():
    g = make_graph()
    with torch.no_grad():
        for lin in g.gcn:
            lin.weight.zero_()
    H = torch.randn(2, 5, 3, 4, dtype=torch.float64)
    out = g(H)
    assert torch.equal(out[..., 4:], H)
    assert torch.equal(out[..., :4], H)


def test_identity_propagation():
    g = make_graph(hops=1)
    with torch.no_grad():
        g.gcn[0].weight.copy_(torch.eye(4))
        g.gcn[1].weight.zero_()
    H = torch.randn(3, 4, dtype=torch.float64)
    out = g.propagate(H, torch.eye(3, dtype=torch.float64))
    assert torch.equal(out, torch.relu(H) + H)


def test_hops_validated():
    with pytest.raises(ValueError):
        ChannelGraph(2, 3, 2, hops=0)


@pytest.mark.parametrize("name", ["hybrid_embeddings", "adjacency", "gcn", "compensate"])
def test_graph_oracle(name):
    assert cases.graph_cases(40, seed=7)[name] < 1e-10


def test_power_sum_oracle_m2_n3():
    g = make_graph(N=3, D=4, V=3, hops=2, seed=4)
    H = np.random.default_rng(4).normal(size=(3, 4))
    got = g(torch.as_tensor(H)).detach().numpy()
    np.testing.assert_allclose(got, oracles.graph_forward(H, oracles.params(g), 2), atol=1e-12)


def test_compensate_toy_two_sections():
    g = make_graph(N=2, D=3, V=2, hops=1, seed=9)
    grid = torch.as_tensor(np.random.default_rng(9).normal(size=(1, 2, 2, 3)))
    got = compensate(grid, g)[0].detach().numpy()
    p = oracles.params(g)
    for s in range(2):
        np.testing.assert_allclose(got[:, s], oracles.graph_forward(grid[0, :, s].numpy(), p, 1), atol=1e-12)
    assert torch.equal(compensate(grid, None), torch.cat([grid, grid], -1))


# -- properties ------------------------------------------------------------------


@pytest.mark.parametrize("N", [2, 3, 5, 8])
def test_permutation_equivariance_bit_exact(N):
    """Channel relabelling permutes outputs bit for bit under ordered reductions."""
    rng = np.random.default_rng(N)
    for trial in range(20):
        g = make_graph(N=N, D=5, V=3, hops=int(rng.integers(1, 4)), seed=trial, ordered=True)
        H = torch.as_tensor(rng.normal(size=(3, N, 5)))
        perm = torch.as_tensor(rng.permutation(N))
        assert torch.equal(g(H)[:, perm], permuted_copy(g, perm)(H[:, perm]))


def test_permutation_equivariance_default_reduction():
    rng = np.random.default_rng(0)
    for trial in range(20):
        g = make_graph(N=6, D=5, V=3, seed=trial)
        H = torch.as_tensor(rng.normal(size=(3, 6, 5)))
        perm = torch.as_tensor(rng.permutation(6))
        diff = (g(H)[:, perm] - permuted_copy(g, perm)(H[:, perm])).abs().max()
        assert diff < 1e-12
        g.ordered = True
        assert (g(H) - permuted_copy(g, torch.arange(6))(H)).abs().max() < 1e-12


def test_two_channel_equivariance_exact_without_ordering():
    rng = np.random.default_rng(1)
    g = make_graph(N=2, D=5, V=3)
    H = torch.as_tensor(rng.normal(size=(4, 2, 5)))
    perm = torch.tensor([1, 0])
    assert torch.equal(g(H)[:, perm], permuted_copy(g, perm)(H[:, perm]))


def test_section_locality():
    g = make_graph(N=3, D=4)
    grid = torch.randn(2, 3, 5, 4, dtype=torch.float64)
    ref = compensate(grid, g)
    for p in range(5):
        other = grid.clone()
        other[:, :, [q for q in range(5) if q != p]] = 0
        assert torch.equal(compensate(other, g)[:, :, p], ref[:, :, p])


def test_gradient_finite_differences():
    g = make_graph(N=3, D=4, V=3, hops=2, seed=3)
    H = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
    proj = torch.randn(3, 8, dtype=torch.float64)

    def f():
        return (g(H) * proj).sum()

    f().backward()
    h = 1e-6
    for t in [H] + list(g.parameters()):
        flat = t.data.view(-1)
        for i in range(flat.numel()):
            old = flat[i].item()
            with torch.no_grad():
                flat[i] = old + h
                up = f().item()
                flat[i] = old - h
                down = f().item()
                flat[i] = old
            fd = (up - down) / (2 * h)
            an = t.grad.view(-1)[i].item()
            assert abs(fd - an) <= 1e-4 * max(1.0, abs(fd), abs(an))


def test_determinism():
    g = make_graph(N=4)
    H = torch.randn(2, 4, 4, dtype=torch.float64)
    assert g(H).detach().numpy().tobytes() == g(H).detach().numpy().tobytes()


def test_full_model_permutation_equivariance_bit_exact():
    assert cases.permutation_mismatches(15, seed=2) == 0
