import pytest
import torch

from hiptune.dpi import build_text_prompts
from hiptune.encoders import class_probabilities
from hiptune.model import hiptune_score
from hiptune.vptree import assemble_encoder_input
from hiptune.app import integrated_prompts


def test_probabilities_sum_to_one(tiny_model):
    x = torch.randn(16, 3, 8, 8, generator=torch.Generator().manual_seed(0))
    with torch.no_grad():
        out = tiny_model(x)
    assert out.probs.shape == (16, 2)
    assert (out.probs.sum(-1) - 1).abs().max() < 1e-6


def test_score_is_deterministic(tiny_model):
    x = torch.randn(3, 8, 8, generator=torch.Generator().manual_seed(1))
    a, b = hiptune_score(x, tiny_model), hiptune_score(x, tiny_model)
    assert a[:2] == b[:2] and a[2].node_ids == b[2].node_ids
    assert abs(a[0] + a[1] - 1) < 1e-6


def test_batched_forward_matches_single_sample_pipeline(tiny_model):
    """Batched model output == patch_embed -> route -> prompts -> text per sample."""
    torch.manual_seed(0)
    x = torch.randn(4, 3, 8, 8)
    with torch.no_grad():
        batch = tiny_model(x).probs
        for i in range(4):
            _, _, d = hiptune_score(x[i], tiny_model)
            seq = tiny_model.encoder.patch_embed(x[i])
            nodes = torch.tensor([list(d.node_ids) + [-1] * (3 - len(d.node_ids))])
            f = tiny_model.encoder.encode_image(assemble_encoder_input(seq, integrated_prompts(tiny_model.tree, nodes)[0]))
            live, fake = build_text_prompts(d, tiny_model.tree, tiny_model.dpi)
            w = torch.stack([tiny_model.encoder.encode_text(live, "live"), tiny_model.encoder.encode_text(fake, "fake")])
            p = class_probabilities(f, w, tiny_model.encoder.cfg.temperature)
            torch.testing.assert_close(p, batch[i], atol=1e-5, rtol=1e-5)


def test_feature_rescaling_invariance():
    f = torch.randn(5, 8, dtype=torch.float64)
    w = torch.randn(2, 8, dtype=torch.float64)
    torch.testing.assert_close(class_probabilities(f, w, 0.07), class_probabilities(3.7 * f, w, 0.07))
