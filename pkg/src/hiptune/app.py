"""Adaptive prompt pruning: per-level gates and hard top-1 routing.

Level 1 is a per-token linear map averaged over all tokens. Levels 2 and 3
reshape the image tokens into their patch grid and run a central difference
convolution (physical subtree) or a frequency-adaptive dilated convolution
(digital subtree) before a linear head averaged over grid positions.
Routing is batched: every gate is evaluated for every sample and the
routed branch is gathered afterwards.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .encoders import TokenSequence
from .errors import ConfigError, ShapeError
from .taxonomy import AttackTaxonomy
from .vptree import PromptTree

DEFAULT_THETA = 0.7
FADC_DILATIONS = (1, 2, 3)
FADC_THRESHOLDS = (0.75, 1.5)


def _as_batch(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if x.dim() == 3:
        return x.unsqueeze(0), True
    if x.dim() != 4:
        raise ShapeError("conv input", "(C, H, W) or (B, C, H, W)", tuple(x.shape))
    return x, False


def _check_kernel(x: torch.Tensor, kernel: torch.Tensor) -> None:
    if kernel.dim() != 4 or kernel.shape[1] != x.shape[1] or kernel.shape[2] != kernel.shape[3] or kernel.shape[2] % 2 == 0:
        raise ShapeError("conv kernel", f"(C_out, {x.shape[1]}, k, k) with odd k", tuple(kernel.shape))


def cdc_conv(x: torch.Tensor, kernel: torch.Tensor, theta: float = DEFAULT_THETA) -> torch.Tensor:
    """Central difference convolution, channel-first layout, zero padding.

    y(p0) = sum_n w(p_n) x(p0 + p_n) - theta * x(p0) * sum_n w(p_n)
    """
    if not 0.0 <= theta <= 1.0:
        raise ConfigError(f"theta must lie in [0, 1], got {theta}")
    x, single = _as_batch(x)
    _check_kernel(x, kernel)
    pad = kernel.shape[-1] // 2
    out = F.conv2d(x, kernel, padding=pad)
    if theta:
        out = out - theta * F.conv2d(x, kernel.sum(dim=(2, 3), keepdim=True))
    return out[0] if single else out


def laplacian_energy(x: torch.Tensor) -> torch.Tensor:
    """Channel-mean absolute 4-neighbour Laplacian with edge replication, ``(B, H, W)``."""
    p = F.pad(x, (1, 1, 1, 1), mode="replicate")
    lap = 4 * x - p[:, :, :-2, 1:-1] - p[:, :, 2:, 1:-1] - p[:, :, 1:-1, :-2] - p[:, :, 1:-1, 2:]
    return lap.abs().mean(dim=1)


def fadc_dilation_map(
    x: torch.Tensor,
    dilations=FADC_DILATIONS,
    thresholds=FADC_THRESHOLDS,
) -> torch.Tensor:
    """Per-location dilation chosen from local high-frequency energy.

    Energy is normalised by its per-sample spatial mean; locations with
    relative energy above ``thresholds[k]`` move to ``dilations[k + 1]``.
    Flat inputs have zero energy and keep the smallest dilation.
    """
    e = laplacian_energy(x).detach()
    # floor tied to the input scale so rounding noise on flat inputs stays "flat"
    floor = 1e-4 * x.detach().abs().mean(dim=(1, 2, 3)).view(-1, 1, 1) + 1e-12
    rel = e / (e.mean(dim=(1, 2), keepdim=True) + floor)
    level = torch.zeros_like(rel, dtype=torch.long)
    for t in thresholds:
        level = level + (rel > t).long()
    return torch.as_tensor(dilations, device=x.device)[level]


def fadc_conv(
    x: torch.Tensor,
    kernel: torch.Tensor,
    dilations=FADC_DILATIONS,
    thresholds=FADC_THRESHOLDS,
    force_dilation: int | None = None,
    return_map: bool = False,
):
    """Frequency-adaptive dilated convolution (simplified per-location form).

    Each output location takes the convolution at the dilation picked by
    ``fadc_dilation_map``; zero padding at every rate keeps the grid size.
    """
    if not dilations:
        raise ConfigError("dilation set must be non-empty")
    x, single = _as_batch(x)
    _check_kernel(x, kernel)
    if force_dilation is not None:
        dmap = torch.full((x.shape[0], x.shape[2], x.shape[3]), force_dilation, dtype=torch.long)
        rates = (force_dilation,)
    else:
        dmap = fadc_dilation_map(x, dilations, thresholds)
        rates = tuple(dilations)
    half = kernel.shape[-1] // 2
    out = None
    for d in rates:
        y = F.conv2d(x, kernel, padding=d * half, dilation=d)
        mask = (dmap == d).unsqueeze(1).to(y.dtype)
        out = y * mask if out is None else out + y * mask
    if single:
        out, dmap = out[0], dmap[0]
    return (out, dmap) if return_map else out


class Level1Gate(nn.Module):
    def __init__(self, dim: int, n_out: int):
        super().__init__()
        self.linear = nn.Linear(dim, n_out)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        # mean over tokens of an affine map == affine map of the token mean
        return self.linear(tokens).mean(dim=-2)


class ConvGate(nn.Module):
    def __init__(self, kind: str, dim: int, n_out: int, theta: float = DEFAULT_THETA, kernel_size: int = 3):
        super().__init__()
        if kind not in ("cdc", "fadc"):
            raise ConfigError(f"unknown gate conv {kind!r}")
        self.kind = kind
        self.theta = theta
        self.kernel = nn.Parameter(torch.randn(dim, dim, kernel_size, kernel_size) / math.sqrt(dim * kernel_size**2))
        self.head = nn.Linear(dim, n_out)

    def features(self, grid: torch.Tensor) -> torch.Tensor:
        if self.kind == "cdc":
            return cdc_conv(grid, self.kernel, self.theta)
        return fadc_conv(grid, self.kernel)

    def pooled_features(self, grid: torch.Tensor) -> torch.Tensor:
        """Grid mean of ``features(grid)`` without materialising the map."""
        if self.kind == "cdc":
            return pooled_cdc(grid, self.kernel, self.theta)
        return pooled_fadc(grid, self.kernel)

    def forward(self, tokens: torch.Tensor, condition: torch.Tensor | None = None) -> torch.Tensor:
        """Scores from ``(B, l+1, D)`` tokens (class token first)."""
        y = self.pooled_features(tokens_to_grid(tokens))
        if condition is not None:
            y = y + condition
        # head is affine, so averaging per-location logits == head of the averaged map
        return self.head(y)


def _shifted_means(x: torch.Tensor, k: int, dilation: int, weight: torch.Tensor | None = None) -> torch.Tensor:
    """``(B, C, k*k)``: spatial means of ``x`` shifted by each kernel offset (zero padded).

    With ``weight`` (``(B, H, W)``), the mean is taken over output locations
    weighted by it, which restricts it to locations using this dilation.
    """
    b, c, h, w = x.shape
    half = k // 2
    pad = dilation * half
    xp = F.pad(x, (pad, pad, pad, pad))
    out = []
    for dy in range(k):
        for dx in range(k):
            win = xp[:, :, dy * dilation : dy * dilation + h, dx * dilation : dx * dilation + w]
            if weight is not None:
                win = win * weight[:, None]
            out.append(win.mean(dim=(-2, -1)))
    return torch.stack(out, dim=-1)


def pooled_cdc(x: torch.Tensor, kernel: torch.Tensor, theta: float) -> torch.Tensor:
    x, single = _as_batch(x)
    _check_kernel(x, kernel)
    k = kernel.shape[-1]
    w = kernel.reshape(kernel.shape[0], kernel.shape[1], k * k)
    y = torch.einsum("oik,bik->bo", w, _shifted_means(x, k, 1))
    if theta:
        y = y - theta * x.mean(dim=(-2, -1)) @ w.sum(dim=-1).T
    return y[0] if single else y


def pooled_fadc(x: torch.Tensor, kernel: torch.Tensor, dilations=FADC_DILATIONS, thresholds=FADC_THRESHOLDS) -> torch.Tensor:
    x, single = _as_batch(x)
    _check_kernel(x, kernel)
    k = kernel.shape[-1]
    w = kernel.reshape(kernel.shape[0], kernel.shape[1], k * k)
    dmap = fadc_dilation_map(x, dilations, thresholds)
    y = None
    for d in dilations:
        sel = (dmap == d).to(x.dtype)
        term = torch.einsum("oik,bik->bo", w, _shifted_means(x, k, d, sel))
        y = term if y is None else y + term
    return y[0] if single else y


def tokens_to_grid(tokens: torch.Tensor) -> torch.Tensor:
    """Drop the class token and reshape image tokens to ``(B, D, s, s)``."""
    single = tokens.dim() == 2
    if single:
        tokens = tokens.unsqueeze(0)
    img = tokens[:, 1:]
    n = img.shape[1]
    s = math.isqrt(n)
    if s * s != n:
        raise ShapeError("image token count", "a perfect square", n)
    grid = img.transpose(1, 2).reshape(img.shape[0], img.shape[2], s, s)
    return grid[0] if single else grid


def _physical_ancestor(taxonomy: AttackTaxonomy, node_id: int) -> bool:
    node = taxonomy[node_id]
    while node.parent is not None:
        node = taxonomy[node.parent]
    return node.name == "physical"


class AppGates(nn.Module):
    """All routing gates for a taxonomy: one level-1 gate, one conv gate per
    level-1 fake node and one per level-2 node."""

    def __init__(self, taxonomy: AttackTaxonomy, dim: int, theta: float = DEFAULT_THETA, seed: int = 0):
        super().__init__()
        if not 0.0 <= theta <= 1.0:
            raise ConfigError(f"theta must lie in [0, 1], got {theta}")
        self.taxonomy = taxonomy
        self.theta = theta
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.level1 = Level1Gate(dim, len(taxonomy.children(None)))
            self.level2 = nn.ModuleDict()
            self.level3 = nn.ModuleDict()
            for level, table in ((1, self.level2), (2, self.level3)):
                for node in taxonomy.level(level):
                    kids = taxonomy.children(node.id)
                    if not kids:
                        continue
                    kind = "cdc" if _physical_ancestor(taxonomy, node.id) else "fadc"
                    table[str(node.id)] = ConvGate(kind, dim, len(kids), theta)
        self.check_arity()

    def check_arity(self) -> None:
        tax = self.taxonomy
        if self.level1.linear.out_features != len(tax.children(None)):
            raise ConfigError("level-1 gate arity does not match the taxonomy")
        for table in (self.level2, self.level3):
            for key, gate in table.items():
                if gate.head.out_features != len(tax.children(int(key))):
                    raise ConfigError(f"gate for node {key} has wrong arity")

    def gate(self, branch: int) -> ConvGate:
        key = str(branch)
        if key in self.level2:
            return self.level2[key]
        if key in self.level3:
            return self.level3[key]
        raise ConfigError(f"no gate for branch node {branch}")


def gate_level1(tokens, gates: AppGates) -> torch.Tensor:
    if isinstance(tokens, TokenSequence):
        tokens = tokens.tokens
    return gates.level1(tokens)


def branch_condition(tree: PromptTree, branch: int) -> torch.Tensor:
    """Token mean of the prompts already selected when routing below ``branch``."""
    tax = tree.taxonomy
    chain = []
    node = branch
    while node is not None:
        chain.append(tree.block(node))
        node = tax[node].parent
    return torch.stack(chain).mean(dim=0).mean(dim=0)


def gate_conv(level: int, branch: int, tokens, tree: PromptTree, gates: AppGates) -> torch.Tensor:
    """Scores over the children of ``branch`` (a level-``level - 1`` node)."""
    if isinstance(tokens, TokenSequence):
        tokens = tokens.tokens
    if tree.taxonomy[branch].level != level - 1:
        raise ConfigError(f"node {branch} is not a level-{level - 1} branch")
    return gates.gate(branch)(tokens, branch_condition(tree, branch))


@dataclass(frozen=True)
class RoutingDecision:
    indices: tuple[int, ...]
    node_ids: tuple[int, ...]
    distributions: tuple[np.ndarray, ...]
    stopped_at_live: bool
    logits: tuple[np.ndarray, ...] | None = None


@dataclass
class BatchRouting:
    """Batched routing output; ``nodes`` is ``(B, 3)`` with -1 below a live stop."""

    logits1: torch.Tensor
    branch_logits: dict[int, torch.Tensor]
    nodes: torch.Tensor
    indices: torch.Tensor

    @property
    def stopped_at_live(self) -> torch.Tensor:
        return self.nodes[:, 1] < 0

    def decision(self, i: int) -> RoutingDecision:
        n = self.nodes[i].tolist()
        idx = self.indices[i].tolist()
        logits = [self.logits1[i]]
        for level in (1, 2):
            if n[level] >= 0:
                logits.append(self.branch_logits[n[level - 1]][i])
        depth = len(logits)
        logits = tuple(l.detach().double().cpu().numpy() for l in logits)
        dists = tuple(_softmax_np(l) for l in logits)
        return RoutingDecision(tuple(idx[:depth]), tuple(n[:depth]), dists, depth == 1, logits)


def _softmax_np(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max())
    return z / z.sum()


def route_batch(tokens, tree: PromptTree, gates: AppGates, forced_nodes: torch.Tensor | None = None) -> BatchRouting:
    """Evaluate every gate and follow the top-1 path per sample.

    Ties go to the lowest child index. With ``forced_nodes`` (``(B, 3)``,
    -1 for live) the path is taken from labels instead while the logits are
    still produced, which is what teacher-forced routing losses need.
    """
    if isinstance(tokens, TokenSequence):
        tokens = tokens.tokens
    if tokens.dim() == 2:
        tokens = tokens.unsqueeze(0)
    tax = tree.taxonomy
    b = tokens.shape[0]
    logits1 = gates.level1(tokens)
    branch_logits: dict[int, torch.Tensor] = {}
    for table in (gates.level2, gates.level3):
        for key, gate in table.items():
            nid = int(key)
            branch_logits[nid] = gate(tokens, branch_condition(tree, nid))

    level1_ids = torch.as_tensor(tax.children(None))
    nodes = torch.full((b, 3), -1, dtype=torch.long)
    indices = torch.full((b, 3), -1, dtype=torch.long)
    if forced_nodes is not None:
        nodes = forced_nodes.clone().long()
        for level in range(3):
            for i in range(b):
                if nodes[i, level] >= 0:
                    indices[i, level] = tax.child_index(int(nodes[i, level]))
        return BatchRouting(logits1, branch_logits, nodes, indices)

    idx1 = torch.argmax(logits1.detach(), dim=-1)
    indices[:, 0] = idx1
    nodes[:, 0] = level1_ids[idx1]
    for level in (1, 2):
        parents = nodes[:, level - 1]
        for nid, lg in branch_logits.items():
            if tax[nid].level != level:
                continue
            mask = parents == nid
            if not bool(mask.any()):
                continue
            kids = torch.as_tensor(tax.children(nid))
            choice = torch.argmax(lg.detach()[mask], dim=-1)
            indices[mask, level] = choice
            nodes[mask, level] = kids[choice]
    return BatchRouting(logits1, branch_logits, nodes, indices)


def route_sample(tokens, tree: PromptTree, gates: AppGates) -> RoutingDecision:
    seq = tokens.tokens if isinstance(tokens, TokenSequence) else tokens
    if seq.dim() == 3 and seq.shape[0] != 1:
        raise ShapeError("route_sample input", "a single sample", tuple(seq.shape))
    return route_batch(seq, tree, gates).decision(0)


def integrated_prompts(tree: PromptTree, nodes: torch.Tensor) -> torch.Tensor:
    """``(B, L_p, D)`` prompts: mean of the routed blocks, or the live block alone."""
    blocks = tree.blocks
    live = tree.taxonomy.live_id
    stopped = nodes[:, 1] < 0
    safe = nodes.clamp_min(0)
    mean3 = blocks[safe].mean(dim=1)
    first = blocks[torch.where(stopped, torch.full_like(nodes[:, 0], live), nodes[:, 0])]
    return torch.where(stopped[:, None, None], first, mean3)
