"""Visual prompt tree: one learnable ``L_p x D`` block per taxonomy node."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch
from torch import nn

from .encoders import TokenSequence
from .errors import ConfigError, LabelError, ShapeError, ValidationError
from .taxonomy import AttackTaxonomy

INIT_STD = 0.02


class PromptTree(nn.Module):
    """Prompt blocks stored as one ``(n_nodes, L_p, D)`` parameter indexed by node id.

    The node set is fixed at construction; loading a tree against a
    different taxonomy is rejected by digest.
    """

    def __init__(self, taxonomy: AttackTaxonomy, prompt_length: int = 8, dim: int = 64, seed: int = 0):
        super().__init__()
        if prompt_length < 1:
            raise ConfigError(f"prompt length must be >= 1, got {prompt_length}")
        if dim < 1:
            raise ConfigError(f"prompt dim must be >= 1, got {dim}")
        self.taxonomy = taxonomy
        self.taxonomy_digest = taxonomy.digest()
        self.prompt_length = prompt_length
        self.dim = dim
        gen = torch.Generator().manual_seed(seed)
        self.blocks = nn.Parameter(INIT_STD * torch.randn(len(taxonomy), prompt_length, dim, generator=gen))

    def __len__(self):
        return self.blocks.shape[0]

    def block(self, node_id: int) -> torch.Tensor:
        if not 0 <= node_id < len(self):
            raise LabelError(f"no prompt block for node {node_id}")
        return self.blocks[node_id]

    @property
    def prompts(self) -> dict[int, torch.Tensor]:
        return {i: self.blocks[i] for i in range(len(self))}

    def set_trainable(self, flag: bool) -> None:
        self.blocks.requires_grad_(flag)

    def check_taxonomy(self, taxonomy: AttackTaxonomy) -> None:
        if taxonomy.digest() != self.taxonomy_digest or len(taxonomy) != len(self):
            raise ValidationError("prompt tree was built for a different taxonomy")

    def block_means(self) -> torch.Tensor:
        return self.blocks.mean(dim=1)


def init_prompt_tree(taxonomy: AttackTaxonomy, prompt_length: int = 8, dim: int = 64, seed: int = 0) -> PromptTree:
    return PromptTree(taxonomy, prompt_length, dim, seed)


@dataclass(frozen=True)
class PromptPath:
    selected: tuple[tuple[int, int, torch.Tensor], ...]

    @property
    def node_ids(self) -> tuple[int, ...]:
        return tuple(nid for _, nid, _ in self.selected)

    @property
    def blocks(self) -> list[torch.Tensor]:
        return [b for _, _, b in self.selected]


def select_supervised_path(tree: PromptTree, label, partner=None) -> PromptPath:
    """Prompts named by a sample's hierarchical label.

    ``label`` is anything with ``is_live`` and ``path`` (Sample,
    ManifestRecord). A live sample borrows its fake partner's chain; an
    unpaired live sample gets the live block alone.
    """
    tax = tree.taxonomy
    source = label
    if label.is_live:
        if partner is None:
            live = tax.live_id
            return PromptPath(((1, live, tree.block(live)),))
        if partner.is_live:
            raise LabelError("a live sample must be paired with a fake partner")
        source = partner
    path = source.path
    if path is None:
        raise LabelError("fake sample without a taxonomy path")
    tax.check_path(path)
    return PromptPath(tuple((lvl, nid, tree.block(nid)) for lvl, nid in enumerate(path, start=1)))


def integrate_prompts(path: PromptPath | Sequence[torch.Tensor]) -> torch.Tensor:
    """Elementwise arithmetic mean of the selected blocks."""
    blocks = path.blocks if isinstance(path, PromptPath) else list(path)
    if not blocks:
        raise ShapeError("prompt path", "at least one block", 0)
    shape = blocks[0].shape
    for b in blocks[1:]:
        if b.shape != shape:
            raise ShapeError("prompt block", tuple(shape), tuple(b.shape))
    if len(blocks) == 1:
        return blocks[0]
    return torch.stack(blocks).mean(dim=0)


def assemble_encoder_input(tokens: TokenSequence, prompt: torch.Tensor) -> TokenSequence:
    """Append prompt tokens after the class and image tokens."""
    if prompt.shape[-2] == 0:
        raise ShapeError("prompt block", "at least one token", 0)
    if prompt.shape[-1] != tokens.dim:
        raise ShapeError("prompt dim", tokens.dim, prompt.shape[-1])
    x = tokens.tokens
    if x.dim() == 3 and prompt.dim() == 2:
        prompt = prompt.unsqueeze(0).expand(x.shape[0], -1, -1)
    if x.dim() != prompt.dim():
        raise ShapeError("prompt batch rank", x.dim(), prompt.dim())
    n = len(tokens)
    spans = {k: v for k, v in tokens.spans.items() if k != "prompt"}
    spans["prompt"] = (n, n + prompt.shape[-2])
    return TokenSequence(torch.cat([x, prompt.to(x.dtype)], dim=-2), spans)


def supervised_chains(taxonomy: AttackTaxonomy, labels: torch.Tensor, identities: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    """Per-sample 3-node chains for a stage-1 batch.

    ``labels`` is ``(B, 4)`` of (l1, l2, l3, method) with -1 for live. A live
    sample takes the chain of a fake in the batch with the same identity when
    one exists, else of a random fake in the batch. Returns ``(B, 3)``; rows
    stay -1 for live samples in all-live batches.
    """
    chains = labels[:, :3].clone()
    fake = labels[:, 1] >= 0
    fake_idx = torch.nonzero(fake).flatten()
    if len(fake_idx) == 0:
        return chains
    for i in torch.nonzero(~fake).flatten().tolist():
        same = fake_idx[identities[fake_idx] == identities[i]]
        pool = same if len(same) else fake_idx
        j = pool[torch.randint(len(pool), (1,), generator=gen)].item()
        chains[i] = labels[j, :3]
    return chains
