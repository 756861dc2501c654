import numpy as np
import pytest
import torch

from hiptune.app import RoutingDecision
from hiptune.dpi import DynamicPromptIntegration, build_text_prompts, level1_fake_weights, weighted_level_prompt
from hiptune.errors import ContractError, ShapeError
from hiptune.vptree import PromptTree


def _rand(seed, *shape):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def test_weighted_prompt_basics():
    a, b = _rand(0, 2, 3), _rand(1, 2, 3)
    cands = torch.stack([a, b])
    assert torch.equal(weighted_level_prompt(torch.tensor([1.0, 0.0], dtype=torch.float64), cands), a)
    torch.testing.assert_close(weighted_level_prompt(torch.tensor([0.5, 0.5], dtype=torch.float64), cands), (a + b) / 2)
    with pytest.raises(ShapeError):
        weighted_level_prompt(torch.ones(3), cands)


def test_level1_masking(taxonomy):
    w = level1_fake_weights(torch.tensor([9.0, 1.0, 1.0]), taxonomy)
    torch.testing.assert_close(w, torch.tensor([0.5, 0.5]))


def _onehot(k, i):
    v = np.zeros(k)
    v[i] = 1.0
    return v


@pytest.fixture
def parts(taxonomy):
    tree = PromptTree(taxonomy, 3, 4, seed=2).double()
    dpi = DynamicPromptIntegration(4, 6, seed=0).double()
    return tree, dpi


def _decision(taxonomy, names):
    ids = [taxonomy.by_name(n).id for n in names]
    idx = [taxonomy.child_index(i) for i in ids]
    sizes = [len(taxonomy.children(None))] + [len(taxonomy.children(p)) for p in ids[:-1]]
    dists = tuple(_onehot(k, i) for k, i in zip(sizes, idx))
    return RoutingDecision(tuple(idx), tuple(ids), dists, names == ["live"])


def test_onehot_path_uses_only_path_blocks(taxonomy, parts):
    tree, dpi = parts
    names = ["digital", "adversarial", "pixel-level"]
    live, fake = build_text_prompts(_decision(taxonomy, names), tree, dpi)
    stack = torch.stack([tree.block(taxonomy.by_name(n).id) for n in names]).unsqueeze(0)
    torch.testing.assert_close(fake, dpi.project(dpi.mix_levels(stack)[0]))
    torch.testing.assert_close(live, dpi.project(tree.block(taxonomy.live_id)))
    assert fake.shape == (3, 6)
    # changing an off-path block leaves the context untouched
    with torch.no_grad():
        tree.blocks[taxonomy.by_name("print").id] += 10.0
    torch.testing.assert_close(build_text_prompts(_decision(taxonomy, names), tree, dpi)[1], fake)


def test_live_stop_uses_level1_pair(taxonomy, parts):
    tree, dpi = parts
    d = RoutingDecision((0,), (taxonomy.live_id,), (np.array([0.6, 0.3, 0.1]),), True)
    _, fake = build_text_prompts(d, tree, dpi)
    phys, dig = taxonomy.by_name("physical").id, taxonomy.by_name("digital").id
    mix = 0.75 * tree.block(phys) + 0.25 * tree.block(dig)
    torch.testing.assert_close(fake, dpi.project(mix))


def test_identical_blocks_make_identical_contexts(taxonomy, parts):
    tree, dpi = parts
    with torch.no_grad():
        tree.blocks.copy_(tree.blocks[0].expand_as(tree.blocks))
    live, fake = build_text_prompts(_decision(taxonomy, ["physical", "3D", "resin"]), tree, dpi)
    assert (live - fake).abs().max() < 1e-6


def test_missing_distributions(taxonomy, parts):
    tree, dpi = parts
    with pytest.raises(ContractError):
        build_text_prompts(RoutingDecision((), (), (), False), tree, dpi)
    short = RoutingDecision((1,), (1,), (_onehot(3, 1),), False)
    with pytest.raises(ContractError):
        build_text_prompts(short, tree, dpi)


def test_linear_without_attention(taxonomy):
    tree = PromptTree(taxonomy, 3, 4, seed=1).double()
    dpi = DynamicPromptIntegration(4, 6, use_attention=False).double()
    d = _decision(taxonomy, ["digital", "generation", "style-transfer"])
    live, fake = build_text_prompts(d, tree, dpi)
    with torch.no_grad():
        tree.blocks.mul_(2.5)
    live2, fake2 = build_text_prompts(d, tree, dpi)
    torch.testing.assert_close(live2, 2.5 * live)
    torch.testing.assert_close(fake2, 2.5 * fake)


def test_attention_preserves_identical_levels():
    dpi = DynamicPromptIntegration(4, 6, seed=3).double()
    v = _rand(0, 1, 1, 3, 4).expand(1, 3, 3, 4)
    torch.testing.assert_close(dpi.mix_levels(v)[0], v[0, 0])
