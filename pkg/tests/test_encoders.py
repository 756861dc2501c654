import math

import numpy as np
import pytest
import torch

from hiptune.encoders import (
    BaselineConfig,
    CoOpBaseline,
    DualEncoder,
    EncoderConfig,
    class_probabilities,
    parameter_checksum,
    pretrain_encoders,
)
from hiptune.errors import ConfigError, InvariantViolation, NumericalDomainError, ShapeError
from hiptune.training import LossConfig, train_coop
from hiptune.vptree import assemble_encoder_input


def test_token_counts_full_and_desk_scale():
    big = DualEncoder(EncoderConfig(image_size=224, patch_size=16, visual_dim=768, text_dim=16, n_layers=1, n_heads=4))
    assert big.patch_embed(torch.zeros(3, 224, 224)).tokens.shape == (197, 768)
    desk = DualEncoder(EncoderConfig())
    seq = desk.patch_embed(torch.zeros(2, 3, 32, 32))
    assert seq.tokens.shape == (2, 65, 64)
    assert seq.spans == {"cls": (0, 1), "image": (1, 65)}


def test_zero_image_gives_positional_plus_bias(tiny_encoder):
    v = tiny_encoder.vision
    seq = tiny_encoder.patch_embed(torch.zeros(3, 8, 8))
    expected = torch.cat([v.cls_token[0], v.patch.bias.expand(16, -1)]) + v.pos_embed[0]
    torch.testing.assert_close(seq.tokens, expected)


def test_patch_embed_shape_error(tiny_encoder):
    with pytest.raises(ShapeError, match="expected"):
        tiny_encoder.patch_embed(torch.zeros(3, 9, 9))


def test_config_rejects_bad_patch():
    with pytest.raises(ConfigError):
        EncoderConfig(image_size=30, patch_size=4)


def test_encode_image_pure_and_prompt_sensitive(tiny_encoder):
    x = torch.randn(3, 8, 8, generator=torch.Generator().manual_seed(0))
    seq = tiny_encoder.patch_embed(x)
    a, b = tiny_encoder.encode_image(seq), tiny_encoder.encode_image(seq)
    assert torch.equal(a, b)
    with_zero = tiny_encoder.encode_image(assemble_encoder_input(seq, torch.zeros(2, 8)))
    assert not torch.allclose(a, with_zero)


def test_text_encoder_contract(tiny_encoder):
    g = torch.Generator().manual_seed(1)
    c1, c2 = torch.randn(3, 8, generator=g), torch.randn(3, 8, generator=g)
    assert torch.equal(tiny_encoder.encode_text(c1, "fake"), tiny_encoder.encode_text(c1, "fake"))
    assert not torch.allclose(tiny_encoder.encode_text(c1, "fake"), tiny_encoder.encode_text(c2, "fake"))
    with pytest.raises(ShapeError):
        tiny_encoder.encode_text(torch.zeros(0, 8), "live")
    with pytest.raises(ShapeError):
        tiny_encoder.encode_text(torch.zeros(2, 5), "live")


def test_class_probabilities_closed_forms():
    w = torch.tensor([[1.0, 0.0], [1.0, 0.0]])
    torch.testing.assert_close(class_probabilities(torch.tensor([0.3, 0.7]), w, 0.07), torch.tensor([0.5, 0.5]))
    # cos = (1, 0) with tau = 1
    p = class_probabilities(torch.tensor([1.0, 0.0], dtype=torch.float64), torch.eye(2, dtype=torch.float64), 1.0)
    assert p[0].item() == pytest.approx(math.e / (math.e + 1), abs=1e-12)
    assert p[0].item() == pytest.approx(0.7311, abs=1e-4)
    # cos = (0.9, 0.1) with tau = 0.01
    f = torch.tensor([1.0, 0.0], dtype=torch.float64)
    w = torch.tensor([[0.9, math.sqrt(1 - 0.81)], [0.1, math.sqrt(1 - 0.01)]], dtype=torch.float64)
    assert class_probabilities(f, w, 0.01)[0].item() > 1 - 1e-10


def test_class_probabilities_zero_norm():
    with pytest.raises(NumericalDomainError):
        class_probabilities(torch.zeros(2), torch.eye(2), 1.0)
    with pytest.raises(NumericalDomainError):
        class_probabilities(torch.ones(2), torch.zeros(2, 2), 1.0)


def test_frozen_encoder_gets_no_gradient(tiny_encoder):
    before = parameter_checksum(tiny_encoder)
    prompt = torch.zeros(2, 8, requires_grad=True)
    seq = tiny_encoder.patch_embed(torch.randn(3, 8, 8))
    f = tiny_encoder.encode_image(assemble_encoder_input(seq, prompt))
    f.sum().backward()
    assert prompt.grad is not None and prompt.grad.abs().sum() > 0
    assert all(p.grad is None for p in tiny_encoder.parameters())
    assert parameter_checksum(tiny_encoder) == before


def test_require_frozen(tiny_cfg):
    enc = DualEncoder(tiny_cfg)
    with pytest.raises(InvariantViolation):
        enc.require_frozen()
    enc.freeze().require_frozen()


def test_pretraining_freezes_and_refuses_twice(tiny_cfg):
    enc = DualEncoder(tiny_cfg)
    x = torch.randn(8, 3, 8, 8)
    pretrain_encoders(enc, x, torch.tensor([0, 1] * 4), epochs=1, batch_size=4)
    enc.require_frozen()
    with pytest.raises(InvariantViolation):
        pretrain_encoders(enc, x, torch.tensor([0, 1] * 4), epochs=1)


def test_coop_context_shapes(tiny_encoder):
    uni = CoOpBaseline(tiny_encoder, BaselineConfig(context_length=5))
    spec = CoOpBaseline(tiny_encoder, BaselineConfig(context_length=5, class_specific=True))
    assert uni.context.numel() // 8 == 5
    assert spec.context.numel() // 8 == 2 * 5
    w = uni.text_weights()
    # unified: both class vectors come from the same context, so only the class token differs
    same_tag = tiny_encoder.encode_text(uni.context[0], "live")
    torch.testing.assert_close(w[0], same_tag)
    assert not torch.allclose(w[0], w[1])
    with pytest.raises(ConfigError):
        BaselineConfig(context_length=0)


def test_coop_training_reduces_loss(tiny_encoder):
    g = torch.Generator().manual_seed(0)
    y = torch.tensor([0, 1] * 16)
    x = torch.randn(32, 3, 8, 8, generator=g) * 0.1 + y[:, None, None, None] * 1.0
    b = CoOpBaseline(tiny_encoder, BaselineConfig(context_length=4))
    trace = train_coop(b, x, y, None, LossConfig(lr=1e-2, batch_size=8), epochs=3)
    assert trace[-1] < trace[0]
    assert np.all(np.diff(trace) <= 1e-3)
