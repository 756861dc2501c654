import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from hiptune.app import (
    AppGates,
    cdc_conv,
    fadc_conv,
    fadc_dilation_map,
    gate_conv,
    gate_level1,
    pooled_cdc,
    pooled_fadc,
    route_batch,
    route_sample,
    tokens_to_grid,
)
from hiptune.errors import ConfigError, ShapeError
from hiptune.vptree import PromptTree

from .oracles import conv_bruteforce


def _rand(seed, *shape):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), size=st.integers(5, 9), theta=st.floats(0.0, 1.0))
def test_cdc_matches_bruteforce(seed, size, theta):
    x, w = _rand(seed, 3, size, size), _rand(seed + 1, 2, 3, 3, 3)
    np.testing.assert_allclose(cdc_conv(x, w, theta).numpy(), conv_bruteforce(x.numpy(), w.numpy(), theta), atol=1e-9)


def test_cdc_theta_zero_is_vanilla():
    x, w = _rand(0, 2, 4, 6, 6), _rand(1, 5, 4, 3, 3)
    torch.testing.assert_close(cdc_conv(x, w, 0.0), F.conv2d(x, w, padding=1))


def test_cdc_constant_input_interior_is_zero():
    x = torch.full((3, 7, 7), 2.5, dtype=torch.float64)
    y = cdc_conv(x, _rand(2, 4, 3, 3, 3), 1.0)
    assert y[:, 1:-1, 1:-1].abs().max() < 1e-12
    assert y.abs().max() > 0  # borders see zero padding


def test_cdc_rejects_bad_theta_and_kernel():
    with pytest.raises(ConfigError):
        cdc_conv(_rand(0, 2, 5, 5), _rand(1, 2, 2, 3, 3), 1.5)
    with pytest.raises(ShapeError):
        cdc_conv(_rand(0, 2, 5, 5), _rand(1, 2, 3, 3, 3), 0.7)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), size=st.integers(5, 9))
def test_fadc_matches_bruteforce_with_recorded_map(seed, size):
    x, w = _rand(seed, 3, size, size), _rand(seed + 1, 2, 3, 3, 3)
    y, dmap = fadc_conv(x, w, return_map=True)
    np.testing.assert_allclose(y.numpy(), conv_bruteforce(x.numpy(), w.numpy(), 0.0, dmap.numpy()), atol=1e-9)


def test_fadc_forced_dilation_one_is_vanilla():
    x, w = _rand(0, 1, 3, 8, 8), _rand(1, 2, 3, 3, 3)
    torch.testing.assert_close(fadc_conv(x, w, force_dilation=1), F.conv2d(x, w, padding=1))


def test_fadc_constant_input_uses_dilation_one():
    dmap = fadc_dilation_map(torch.full((1, 3, 6, 6), 0.4))
    assert (dmap == 1).all()


def test_fadc_picks_larger_dilation_on_high_frequency():
    x = torch.zeros(1, 1, 8, 8)
    x[0, 0, 3:5, 3:5] = torch.tensor([[1.0, -1.0], [-1.0, 1.0]])
    dmap = fadc_dilation_map(x)
    assert dmap[0, 3, 3] == 3 and dmap[0, 0, 0] == 1


def test_pooled_gates_equal_mean_of_full_maps():
    x, w = _rand(0, 3, 4, 8, 8), _rand(1, 5, 4, 3, 3)
    torch.testing.assert_close(pooled_cdc(x, w, 0.7), cdc_conv(x, w, 0.7).mean((-2, -1)))
    torch.testing.assert_close(pooled_fadc(x, w), fadc_conv(x, w).mean((-2, -1)))


def test_tokens_to_grid():
    t = torch.arange(17 * 2, dtype=torch.float64).reshape(17, 2)
    g = tokens_to_grid(t)
    assert g.shape == (2, 4, 4)
    assert g[1, 0, 1] == t[2, 1]
    with pytest.raises(ShapeError):
        tokens_to_grid(torch.zeros(16, 2))


@pytest.fixture
def gates(taxonomy):
    return AppGates(taxonomy, 4, seed=0).double()


@pytest.fixture
def tree(taxonomy):
    return PromptTree(taxonomy, 2, 4).double()


def test_level1_gate_zero_weight(gates):
    with torch.no_grad():
        gates.level1.linear.weight.zero_()
        gates.level1.linear.bias.copy_(torch.tensor([1.0, 2.0, 3.0]))
    s = gate_level1(_rand(0, 17, 4), gates)
    torch.testing.assert_close(s, torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64))
    p = torch.softmax(s, -1)
    np.testing.assert_allclose(p.detach().numpy(), [0.0900, 0.2447, 0.6652], atol=1e-4)
    assert int(p.argmax()) == 2


def test_level1_gate_permutation(gates):
    x = _rand(3, 17, 4)
    base = gate_level1(x, gates)
    perm = torch.tensor([2, 0, 1])
    with torch.no_grad():
        gates.level1.linear.weight.copy_(gates.level1.linear.weight[perm])
        gates.level1.linear.bias.copy_(gates.level1.linear.bias[perm])
    torch.testing.assert_close(gate_level1(x, gates), base[perm])


def test_gate_arity(taxonomy, gates, tree):
    x = _rand(0, 17, 4)
    assert gate_conv(2, taxonomy.by_name("physical").id, x, tree, gates).shape == (2,)
    assert gate_conv(3, taxonomy.by_name("2D").id, x, tree, gates).shape == (3,)
    assert gate_conv(3, taxonomy.by_name("adversarial").id, x, tree, gates).shape == (2,)
    assert gates.gate(taxonomy.by_name("2D").id).kind == "cdc"
    assert gates.gate(taxonomy.by_name("generation").id).kind == "fadc"
    with pytest.raises(ConfigError):
        gate_conv(2, taxonomy.by_name("2D").id, x, tree, gates)


def test_zero_conv_kernel_gives_bias(taxonomy, gates, tree):
    g = gates.gate(taxonomy.by_name("2D").id)
    with torch.no_grad():
        g.kernel.zero_()
        g.head.weight.zero_()
        g.head.bias.copy_(torch.tensor([0.5, -1.0, 2.0]))
    out = gate_conv(3, taxonomy.by_name("2D").id, _rand(1, 17, 4), tree, gates)
    torch.testing.assert_close(out, torch.tensor([0.5, -1.0, 2.0], dtype=torch.float64))


def _force(gates, taxonomy, path_names):
    """Zero every gate and put a large bias on the named child at each level."""
    with torch.no_grad():
        for p in gates.parameters():
            p.zero_()
        l1 = taxonomy.by_name(path_names[0]).id
        gates.level1.linear.bias[taxonomy.child_index(l1)] = 5.0
        for parent, child in zip(path_names, path_names[1:]):
            g = gates.gate(taxonomy.by_name(parent).id)
            g.head.bias[taxonomy.child_index(taxonomy.by_name(child).id)] = 5.0


def test_forced_route_indices(taxonomy, gates, tree):
    _force(gates, taxonomy, ["digital", "adversarial", "pixel-level"])
    d = route_sample(_rand(0, 17, 4), tree, gates)
    assert d.indices == (2, 1, 0)
    assert [taxonomy[n].name for n in d.node_ids] == ["digital", "adversarial", "pixel-level"]
    assert not d.stopped_at_live
    for dist, i in zip(d.distributions, d.indices):
        assert abs(dist.sum() - 1) < 1e-12 and int(np.argmax(dist)) == i


def test_live_stops_routing(taxonomy, gates, tree):
    _force(gates, taxonomy, ["live"])
    d = route_sample(_rand(0, 17, 4), tree, gates)
    assert d.stopped_at_live and d.node_ids == (taxonomy.live_id,) and len(d.distributions) == 1


def test_tie_goes_to_lowest_index(taxonomy, gates, tree):
    with torch.no_grad():
        for p in gates.parameters():
            p.zero_()
    d = route_sample(_rand(0, 17, 4), tree, gates)
    assert d.indices == (0,)


def test_shift_invariance_of_argmax(taxonomy, gates, tree):
    x = _rand(5, 6, 17, 4)
    a = route_batch(x, tree, gates)
    with torch.no_grad():
        gates.level1.linear.bias += 7.0
    b = route_batch(x, tree, gates)
    assert torch.equal(a.nodes, b.nodes)


def test_batched_routing_matches_per_sample(taxonomy, gates, tree):
    x = _rand(9, 5, 17, 4)
    batch = route_batch(x, tree, gates)
    for i in range(5):
        single = route_sample(x[i], tree, gates)
        assert batch.decision(i).node_ids == single.node_ids
