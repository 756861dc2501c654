"""Dynamic prompt integration: visual prompts -> text-encoder contexts.

Within a level, candidate prompts are mixed by the router's probabilities
(level 1 re-normalises over the fake children only). Across levels, a small
self-attention mixes the per-level prompts tokenwise; the values are the
prompts themselves, so identical inputs come out unchanged. The level
outputs are averaged and projected tokenwise into the text embedding.
"""

from __future__ import annotations

import math

import numpy as np
import torch
from torch import nn

from .app import BatchRouting, RoutingDecision
from .errors import ContractError, ShapeError
from .taxonomy import AttackTaxonomy
from .vptree import PromptTree


class DynamicPromptIntegration(nn.Module):
    def __init__(self, dim: int, text_dim: int, use_attention: bool = True, seed: int = 0):
        super().__init__()
        self.use_attention = use_attention
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.query = nn.Linear(dim, dim)
            self.key = nn.Linear(dim, dim)
            self.proj = nn.Linear(dim, text_dim, bias=False)

    def mix_levels(self, levels: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        """``(B, n_levels, L, D)`` -> ``(B, L, D)``; ``mask`` marks routed levels."""
        b, n, L, d = levels.shape
        if mask is None:
            mask = torch.ones(b, n, dtype=torch.bool)
        if self.use_attention:
            x = levels.transpose(1, 2)  # (B, L, n, D)
            scores = self.query(x) @ self.key(x).transpose(-1, -2) / math.sqrt(d)
            scores = scores.masked_fill(~mask[:, None, None, :], float("-inf"))
            x = torch.softmax(scores, dim=-1) @ x
            levels = x.transpose(1, 2)
        w = mask.to(levels.dtype)
        return (levels * w[:, :, None, None]).sum(dim=1) / w.sum(dim=1)[:, None, None]

    def project(self, prompt: torch.Tensor) -> torch.Tensor:
        return self.proj(prompt)


def weighted_level_prompt(probs: torch.Tensor, candidates: torch.Tensor) -> torch.Tensor:
    """Probability-weighted sum of candidate blocks.

    ``probs`` is ``(K,)`` or ``(B, K)``; ``candidates`` is ``(K, L, D)``.
    """
    if probs.shape[-1] != candidates.shape[0]:
        raise ShapeError("candidate count", probs.shape[-1], candidates.shape[0])
    return torch.einsum("...k,kld->...ld", probs.to(candidates.dtype), candidates)


def fake_columns(taxonomy: AttackTaxonomy) -> list[int]:
    return [i for i, nid in enumerate(taxonomy.children(None)) if nid != taxonomy.live_id]


def level1_fake_weights(logits: torch.Tensor, taxonomy: AttackTaxonomy) -> torch.Tensor:
    """Softmax over the fake level-1 logits only (live score dropped)."""
    return torch.softmax(logits[..., fake_columns(taxonomy)], dim=-1)


def soft_level_prompts(tree: PromptTree, routing: BatchRouting) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-level weighted fake prompts from router probabilities.

    Returns ``(B, 3, L, D)`` prompts and a ``(B, 3)`` mask of routed levels.
    Levels below a live stop are masked; level 1 is always present.
    """
    tax = tree.taxonomy
    blocks = tree.blocks
    nodes = routing.nodes
    b = nodes.shape[0]
    fake_l1 = [tax.children(None)[i] for i in fake_columns(tax)]
    p1 = weighted_level_prompt(level1_fake_weights(routing.logits1, tax), blocks[fake_l1])
    out = [p1]
    for level in (1, 2):
        parents = nodes[:, level - 1]
        acc = torch.zeros_like(p1)
        for nid, lg in routing.branch_logits.items():
            if tax[nid].level != level:
                continue
            mask = parents == nid
            if not bool(mask.any()):
                continue
            kids = list(tax.children(nid))
            w = weighted_level_prompt(torch.softmax(lg, dim=-1), blocks[kids])
            acc = torch.where(mask[:, None, None], w, acc)
        out.append(acc)
    levels = torch.stack(out, dim=1)
    mask = torch.ones(b, 3, dtype=torch.bool)
    mask[:, 1] = nodes[:, 1] >= 0
    mask[:, 2] = nodes[:, 2] >= 0
    return levels, mask


def onehot_level_prompts(tree: PromptTree, nodes: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Level prompts for a known path; a live-only row mixes the fake level-1 blocks evenly."""
    tax = tree.taxonomy
    blocks = tree.blocks
    fake_l1 = [tax.children(None)[i] for i in fake_columns(tax)]
    even = blocks[fake_l1].mean(dim=0)
    stopped = nodes[:, 1] < 0
    safe = nodes.clamp_min(0)
    levels = blocks[safe]
    levels = levels.clone()
    levels[:, 0] = torch.where(stopped[:, None, None], even.expand_as(levels[:, 0]), levels[:, 0])
    mask = nodes >= 0
    mask[:, 0] = True
    return levels, mask


def build_text_prompts(decision: RoutingDecision, tree: PromptTree, params: DynamicPromptIntegration):
    """Live and fake contexts (each ``L_p x text_dim``) for one routing decision."""
    tax = tree.taxonomy
    if not decision.distributions:
        raise ContractError("routing decision carries no distributions")
    depth = 1 if decision.stopped_at_live else 3
    if len(decision.distributions) < depth or len(decision.node_ids) < depth:
        raise ContractError(f"routing decision needs {depth} levels, has {len(decision.distributions)}")
    dtype = tree.blocks.dtype
    fake_l1 = [tax.children(None)[i] for i in fake_columns(tax)]
    if decision.logits is not None:
        w1 = level1_fake_weights(torch.as_tensor(decision.logits[0], dtype=dtype), tax)
    else:
        p = torch.as_tensor(np.asarray(decision.distributions[0]), dtype=dtype)[fake_columns(tax)]
        w1 = p / p.sum() if float(p.sum()) > 0 else torch.full_like(p, 1.0 / len(p))
    levels = [weighted_level_prompt(w1, tree.blocks[fake_l1])]
    for level in range(1, depth):
        parent = decision.node_ids[level - 1]
        kids = list(tax.children(parent))
        dist = torch.as_tensor(np.asarray(decision.distributions[level]), dtype=dtype)
        if len(dist) != len(kids):
            raise ShapeError(f"level-{level + 1} distribution", len(kids), len(dist))
        levels.append(weighted_level_prompt(dist, tree.blocks[kids]))
    stacked = torch.stack(levels).unsqueeze(0)
    fake = params.project(params.mix_levels(stacked)[0])
    live = params.project(tree.block(tax.live_id))
    return live, fake
