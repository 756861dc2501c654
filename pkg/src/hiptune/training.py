"""Losses and the two-stage optimisation loop.

Stage 1 trains the prompt tree (and the DPI heads the loss needs) along the
labelled taxonomy path of each sample. Stage 2 freezes the prompts and
trains the gates and DPI with the routed forward pass plus a per-level
routing cross-entropy against the hierarchical labels. The encoder stays
frozen throughout; both invariants are enforced by parameter checksums.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import torch
import torch.nn.functional as F

from .encoders import CoOpBaseline, parameter_checksum
from .errors import ConfigError, InvariantViolation, LabelError
from .model import HiPTune
from .sampling import balanced_batches
from .vptree import supervised_chains

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


class DegenerateBatchWarning(UserWarning):
    pass


@dataclass(frozen=True)
class LossConfig:
    margin: float = 0.3
    triplet_weight: float = 1.0
    routing_weight: float = 1.0
    lr: float = 3e-3
    batch_size: int = 32
    stage1_epochs: int = 20
    stage2_epochs: int = 40
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    joint_finetune: bool = False

    def __post_init__(self):
        if self.margin < 0:
            raise ConfigError(f"triplet margin must be >= 0, got {self.margin}")
        if self.lr < 0:
            raise ConfigError(f"learning rate must be >= 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")


@dataclass
class TrainState:
    stage: int = 1
    step: int = 0
    trace: list[dict] = field(default_factory=list)

    def advance_to(self, stage: int) -> None:
        if stage < self.stage:
            raise InvariantViolation(f"cannot move from stage {self.stage} back to stage {stage}")
        self.stage = stage

    def record(self, component: str, value: float, epoch: int) -> None:
        self.trace.append({"step": self.step, "stage": self.stage, "epoch": epoch, "component": component, "value": float(value)})

    def series(self, component: str, stage: int | None = None) -> list[float]:
        return [r["value"] for r in self.trace if r["component"] == component and (stage is None or r["stage"] == stage)]


def write_trace(records: Iterable[dict], path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def cross_entropy_loss(probabilities: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log-likelihood with probabilities floored at 1e-12."""
    labels = torch.as_tensor(labels).long().reshape(-1)
    k = probabilities.shape[-1]
    if bool(((labels < 0) | (labels >= k)).any()):
        raise LabelError(f"labels must lie in [0, {k}), got {labels.tolist()}")
    picked = probabilities.reshape(-1, k).gather(1, labels[:, None]).squeeze(1)
    return -torch.log(picked.clamp_min(PROB_FLOOR)).mean()


def asymmetric_triplet_loss(embeddings: torch.Tensor, classes: torch.Tensor, margin: float = 0.3) -> torch.Tensor:
    """Batch-all hinge triplet loss with squared Euclidean distance.

    ``classes`` must already encode the asymmetry (see ``asymmetric_classes``):
    all live samples share one class, each fake category is its own class.
    Averages ``max(0, m + d(a, p) - d(a, n))`` over every valid triple.
    Returns 0 and warns when no valid triple exists.
    """
    classes = torch.as_tensor(classes).reshape(-1)
    if len(torch.unique(classes)) < 2:
        warnings.warn("triplet loss needs at least two classes in the batch", DegenerateBatchWarning, stacklevel=2)
        return embeddings.sum() * 0.0
    diff = embeddings[:, None, :] - embeddings[None, :, :]
    d = (diff * diff).sum(dim=-1)
    same = classes[:, None] == classes[None, :]
    pos = same & ~torch.eye(len(classes), dtype=torch.bool)
    neg = ~same
    n_valid = int((pos.sum(dim=1) * neg.sum(dim=1)).sum())
    if n_valid == 0:
        warnings.warn("no anchor-positive pair in the batch", DegenerateBatchWarning, stacklevel=2)
        return embeddings.sum() * 0.0
    # For anchor a: sum_{p,n} relu(c_ap - e_an) with c = m + d(a, p), e = d(a, n).
    # Sorting e per anchor turns the inner sum into count * c - prefix sum.
    big = d.detach().max() + margin + 1.0
    e = torch.where(neg, d, big)
    e_sorted, _ = torch.sort(e, dim=1)
    prefix = torch.cat([e_sorted.new_zeros(len(e), 1), torch.cumsum(e_sorted, dim=1)], dim=1)
    c = margin + d
    counts = torch.searchsorted(e_sorted.detach().contiguous(), c.detach().contiguous(), right=False)
    per_pair = counts.to(c.dtype) * c - prefix.gather(1, counts)
    return (per_pair * pos.to(c.dtype)).sum() / n_valid


def asymmetric_classes(labels: torch.Tensor) -> torch.Tensor:
    """Class ids from ``(B, 4)`` labels: 0 for every live sample, 1 + level-3 node for fakes."""
    labels = torch.as_tensor(labels)
    return torch.where(labels[:, 2] >= 0, labels[:, 2] + 1, torch.zeros_like(labels[:, 2]))


def routing_loss(model: HiPTune, routing, labels: torch.Tensor) -> torch.Tensor:
    """Per-level cross-entropy of the gates against labelled children."""
    tax = model.taxonomy
    l1_targets = torch.as_tensor([tax.child_index(int(n)) for n in labels[:, 0]])
    total = F.cross_entropy(routing.logits1, l1_targets)
    for level in (1, 2):
        parents = labels[:, level - 1]
        targets = labels[:, level]
        loss_sum = routing.logits1.new_zeros(())
        count = 0
        for nid, lg in routing.branch_logits.items():
            mask = (parents == nid) & (targets >= 0)
            if not bool(mask.any()):
                continue
            kids = tax.children(nid)
            tgt = torch.as_tensor([kids.index(int(t)) for t in targets[mask]])
            loss_sum = loss_sum + F.cross_entropy(lg[mask], tgt, reduction="sum")
            count += int(mask.sum())
        if count:
            total = total + loss_sum / count
    return total


def _adam(params, cfg: LossConfig):
    params = [p for p in params if p.requires_grad]
    return torch.optim.Adam(params, lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)


def train_stage1(
    model: HiPTune,
    images: torch.Tensor,
    labels: torch.Tensor,
    identities: torch.Tensor,
    cfg: LossConfig | None = None,
    epochs: int | None = None,
    seed: int = 0,
    state: TrainState | None = None,
) -> TrainState:
    """Supervised prompt training along labelled taxonomy paths."""
    cfg = cfg or LossConfig()
    epochs = cfg.stage1_epochs if epochs is None else epochs
    state = state or TrainState()
    state.advance_to(1)
    model.encoder.require_frozen()
    enc_sum = parameter_checksum(model.encoder)
    gen = torch.Generator().manual_seed(seed)

    model.tree.set_trainable(True)
    for p in model.gates.parameters():
        p.requires_grad_(False)
    for p in model.dpi.parameters():
        p.requires_grad_(True)
    opt = _adam([model.tree.blocks, *model.dpi.parameters()], cfg)
    n_nodes, plen, _ = model.tree.blocks.shape
    token_classes = torch.arange(n_nodes).repeat_interleave(plen)
    is_fake = (labels[:, 1] >= 0).long()

    for epoch in range(epochs):
        sums = {"ce": 0.0, "triplet": 0.0, "total": 0.0}
        n_seen = 0
        for idx in balanced_batches(is_fake, identities, cfg.batch_size, gen):
            chains = supervised_chains(model.taxonomy, labels[idx], identities[idx], gen)
            out = model(images[idx], chains=chains)
            ce = cross_entropy_loss(out.probs, is_fake[idx])
            trip = asymmetric_triplet_loss(model.tree.blocks.reshape(n_nodes * plen, -1), token_classes, cfg.margin)
            loss = ce + cfg.triplet_weight * trip
            opt.zero_grad()
            loss.backward()
            opt.step()
            state.step += 1
            k = len(idx)
            n_seen += k
            sums["ce"] += ce.item() * k
            sums["triplet"] += trip.item() * k
            sums["total"] += loss.item() * k
        for name, v in sums.items():
            state.record(name, v / max(n_seen, 1), epoch)
        log.debug("stage1 epoch %d ce=%.4f", epoch, sums["ce"] / max(n_seen, 1))

    model.tree.set_trainable(False)
    if parameter_checksum(model.encoder) != enc_sum:
        raise InvariantViolation("encoder parameters changed during stage 1")
    return state


def train_stage2(
    model: HiPTune,
    images: torch.Tensor,
    labels: torch.Tensor,
    identities: torch.Tensor | None = None,
    cfg: LossConfig | None = None,
    epochs: int | None = None,
    seed: int = 0,
    state: TrainState | None = None,
) -> TrainState:
    """Gate and DPI training on the routed forward pass; prompts frozen by default."""
    cfg = cfg or LossConfig()
    epochs = cfg.stage2_epochs if epochs is None else epochs
    state = state or TrainState(stage=2)
    state.advance_to(2)
    model.encoder.require_frozen()
    enc_sum = parameter_checksum(model.encoder)
    prompt_sum = parameter_checksum(model.tree)
    gen = torch.Generator().manual_seed(seed + 1)

    model.tree.set_trainable(cfg.joint_finetune)
    for p in [*model.gates.parameters(), *model.dpi.parameters()]:
        p.requires_grad_(True)
    params = [*model.gates.parameters(), *model.dpi.parameters()]
    if cfg.joint_finetune:
        params.append(model.tree.blocks)
    opt = _adam(params, cfg)
    is_fake = (labels[:, 1] >= 0).long()
    classes = asymmetric_classes(labels)

    for epoch in range(epochs):
        sums = {"ce": 0.0, "triplet": 0.0, "routing": 0.0, "total": 0.0}
        n_seen = 0
        for idx in balanced_batches(is_fake, identities, cfg.batch_size, gen):
            out = model(images[idx])
            ce = cross_entropy_loss(out.probs, is_fake[idx])
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", DegenerateBatchWarning)
                trip = asymmetric_triplet_loss(out.features, classes[idx], cfg.margin)
            route = routing_loss(model, out.routing, labels[idx])
            loss = ce + cfg.triplet_weight * trip + cfg.routing_weight * route
            opt.zero_grad()
            loss.backward()
            opt.step()
            state.step += 1
            k = len(idx)
            n_seen += k
            sums["ce"] += ce.item() * k
            sums["triplet"] += trip.item() * k
            sums["routing"] += route.item() * k
            sums["total"] += loss.item() * k
        for name, v in sums.items():
            state.record(name, v / max(n_seen, 1), epoch)
        log.debug("stage2 epoch %d ce=%.4f route=%.4f", epoch, sums["ce"] / max(n_seen, 1), sums["routing"] / max(n_seen, 1))

    model.tree.set_trainable(False)
    if parameter_checksum(model.encoder) != enc_sum:
        raise InvariantViolation("encoder parameters changed during stage 2")
    if not cfg.joint_finetune and parameter_checksum(model.tree) != prompt_sum:
        raise InvariantViolation("prompt tree changed during stage 2")
    return state


def train_coop(
    baseline: CoOpBaseline,
    images: torch.Tensor,
    is_fake: torch.Tensor,
    identities: torch.Tensor | None = None,
    cfg: LossConfig | None = None,
    epochs: int | None = None,
    seed: int = 0,
) -> list[float]:
    """Fit the flat-context comparator; returns the per-epoch mean CE."""
    cfg = cfg or LossConfig()
    epochs = cfg.stage1_epochs if epochs is None else epochs
    baseline.encoder.require_frozen()
    gen = torch.Generator().manual_seed(seed + 2)
    opt = _adam(baseline.trainable_parameters(), cfg)
    trace = []
    for _ in range(epochs):
        total, n_seen = 0.0, 0
        for idx in balanced_batches(is_fake, identities, cfg.batch_size, gen):
            loss = cross_entropy_loss(baseline(images[idx]), is_fake[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            n_seen += len(idx)
        trace.append(total / max(n_seen, 1))
    return trace


@torch.no_grad()
def predict(model: HiPTune, images: torch.Tensor, batch_size: int = 128) -> tuple[np.ndarray, np.ndarray]:
    """Fake probabilities and routed ``(N, 3)`` paths."""
    scores, nodes = [], []
    for start in range(0, len(images), batch_size):
        out = model(images[start : start + batch_size])
        scores.append(out.p_fake.double().numpy())
        nodes.append(out.nodes.numpy())
    if not scores:
        return np.zeros(0), np.zeros((0, 3), dtype=np.int64)
    return np.concatenate(scores), np.concatenate(nodes)


def routing_accuracy(nodes: np.ndarray, labels: np.ndarray) -> float:
    """Share of samples routed exactly along their labelled path (live stops at level 1)."""
    labels = np.asarray(labels)[:, :3]
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(np.all(np.asarray(nodes) == labels, axis=1)))


def config_dict(cfg: LossConfig) -> dict:
    return asdict(cfg)
