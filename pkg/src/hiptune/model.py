"""End-to-end HiPTune forward pass over the frozen dual encoder."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .app import AppGates, BatchRouting, RoutingDecision, integrated_prompts, route_batch
from .dpi import DynamicPromptIntegration, onehot_level_prompts, soft_level_prompts
from .encoders import FAKE_TAG, LIVE_TAG, DualEncoder, class_probabilities
from .taxonomy import AttackTaxonomy
from .vptree import PromptTree, assemble_encoder_input


@dataclass(frozen=True)
class ModelConfig:
    prompt_length: int = 8
    theta: float = 0.7
    use_attention: bool = True
    prompt_depth: int = 1


@dataclass
class ForwardOutput:
    probs: torch.Tensor  # (B, 2) as (live, fake)
    features: torch.Tensor  # (B, text_dim) image features
    nodes: torch.Tensor  # (B, 3) prompt path used for the image, -1 below a live stop
    routing: BatchRouting | None

    @property
    def p_fake(self) -> torch.Tensor:
        return self.probs[:, 1]


class HiPTune(nn.Module):
    def __init__(
        self,
        encoder: DualEncoder,
        taxonomy: AttackTaxonomy,
        cfg: ModelConfig | None = None,
        seed: int = 0,
    ):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        self.encoder = encoder
        self.taxonomy = taxonomy
        ecfg = encoder.cfg
        dtype = encoder.template.dtype
        self.tree = PromptTree(taxonomy, self.cfg.prompt_length, ecfg.visual_dim, seed=seed).to(dtype)
        self.gates = AppGates(taxonomy, ecfg.visual_dim, self.cfg.theta, seed=seed + 1).to(dtype)
        self.dpi = DynamicPromptIntegration(ecfg.visual_dim, ecfg.text_dim, self.cfg.use_attention, seed=seed + 2).to(dtype)

    def text_weights(self, level_prompts: torch.Tensor, level_mask: torch.Tensor) -> torch.Tensor:
        """``(B, 2, text_dim)`` class weights for live and fake."""
        b = level_prompts.shape[0]
        live_ctx = self.dpi.project(self.tree.block(self.taxonomy.live_id))
        fake_ctx = self.dpi.project(self.dpi.mix_levels(level_prompts, level_mask))
        w_live = self.encoder.text(live_ctx, LIVE_TAG).expand(b, -1)
        w_fake = self.encoder.text(fake_ctx, torch.full((b,), FAKE_TAG))
        return torch.stack([w_live, w_fake], dim=1)

    def forward(self, images: torch.Tensor, chains: torch.Tensor | None = None) -> ForwardOutput:
        """Route with the gates, or follow the given ``(B, 3)`` chains (stage-1 supervision)."""
        if images.dim() == 3:
            images = images.unsqueeze(0)
        seq = self.encoder.patch_embed(images)
        if chains is None:
            routing = route_batch(seq, self.tree, self.gates)
            nodes = routing.nodes
            levels, mask = soft_level_prompts(self.tree, routing)
        else:
            routing = None
            nodes = chains.long()
            levels, mask = onehot_level_prompts(self.tree, nodes)
        prompt = integrated_prompts(self.tree, nodes)
        f = self.encoder.encode_image(assemble_encoder_input(seq, prompt), self.cfg.prompt_depth)
        probs = class_probabilities(f, self.text_weights(levels, mask), self.encoder.cfg.temperature)
        return ForwardOutput(probs, f, nodes, routing)

    def route(self, images: torch.Tensor) -> BatchRouting:
        if images.dim() == 3:
            images = images.unsqueeze(0)
        return route_batch(self.encoder.patch_embed(images), self.tree, self.gates)


def hiptune_score(image: torch.Tensor, model: HiPTune) -> tuple[float, float, RoutingDecision]:
    """(p_live, p_fake, routing decision) for one image."""
    with torch.no_grad():
        out = model(image.unsqueeze(0) if image.dim() == 3 else image)
    p = out.probs[0]
    return float(p[0]), float(p[1]), out.routing.decision(0)
