"""End-to-end runs: generate data, split, train comparators, evaluate, report."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint
from .config import COMPARATORS, RunConfig
from .dataset import Manifest, SampleStore, generate_dataset, labels_array, load_manifest, save_manifest
from .encoders import CoOpBaseline, DualEncoder, pretrain_encoders
from .errors import ConfigError, ValidationError
from .evaluation import ProtocolSplit, ReportRow, compute_metrics, make_protocol_split
from .model import HiPTune
from .taxonomy import AttackTaxonomy, build_taxonomy
from .training import TrainState, predict, routing_accuracy, train_coop, train_stage1, train_stage2

log = logging.getLogger(__name__)


@dataclass
class Corpus:
    taxonomy: AttackTaxonomy
    manifest: Manifest
    images: torch.Tensor  # (N, C, H, W) float32
    labels: torch.Tensor  # (N, 4) l1, l2, l3, method; -1 for live
    identities: torch.Tensor

    @classmethod
    def from_parts(cls, taxonomy: AttackTaxonomy, manifest: Manifest, images: np.ndarray) -> "Corpus":
        return cls(
            taxonomy,
            manifest,
            torch.from_numpy(np.ascontiguousarray(images, dtype=np.float32)),
            torch.from_numpy(labels_array(manifest)),
            torch.tensor([r.identity_id for r in manifest.records], dtype=torch.long),
        )

    @property
    def is_fake(self) -> torch.Tensor:
        return (self.labels[:, 1] >= 0).long()

    def subset(self, idx) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        idx = torch.as_tensor(np.asarray(idx, dtype=np.int64))
        return self.images[idx], self.labels[idx], self.identities[idx]


def make_taxonomy(cfg: RunConfig) -> AttackTaxonomy:
    return build_taxonomy(cfg.data.leaf_counts)


def prepare_corpus(cfg: RunConfig) -> Corpus:
    tax = make_taxonomy(cfg)
    d = cfg.data
    manifest, store = generate_dataset(tax, d.identities, d.frames, d.size, seed=d.seed)
    return Corpus.from_parts(tax, manifest, store.images)


MANIFEST_FILE = "manifest.jsonl"
TAXONOMY_FILE = "taxonomy.json"


def save_corpus(corpus: Corpus, root, png: bool = False) -> None:
    """Write ``taxonomy.json``, ``manifest.jsonl`` and one tensor file per sample."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    (root / TAXONOMY_FILE).write_text(json.dumps(corpus.taxonomy.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")
    save_manifest(corpus.manifest, root / MANIFEST_FILE)
    SampleStore(corpus.images.numpy()).save(root, corpus.manifest, png=png)


def load_corpus(root) -> Corpus:
    root = Path(root)
    for name in (TAXONOMY_FILE, MANIFEST_FILE):
        if not (root / name).is_file():
            raise ValidationError(f"{root} is not a generated dataset (missing {name})")
    try:
        tax = AttackTaxonomy.from_dict(json.loads((root / TAXONOMY_FILE).read_text(encoding="utf-8")))
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ValidationError(f"{root / TAXONOMY_FILE}: unreadable taxonomy ({exc})") from exc
    manifest = load_manifest(root / MANIFEST_FILE, tax)
    if manifest.taxonomy_digest not in (None, tax.digest()):
        raise ValidationError("manifest was written for a different taxonomy")
    return Corpus.from_parts(tax, manifest, SampleStore.load(root, manifest).images)


@dataclass
class TrainedModels:
    checkpoint: Checkpoint
    state: TrainState | None = None
    coop_traces: dict[str, list[float]] = field(default_factory=dict)


def pretrain(cfg: RunConfig, corpus: Corpus, split: ProtocolSplit, seed: int) -> DualEncoder:
    """Stand-in for large-scale pretraining: fit the encoder on the training part, then freeze it."""
    torch.manual_seed(seed)
    encoder = DualEncoder(cfg.build_encoder_config(), seed=cfg.encoder.seed + seed)
    x, lab, ids = corpus.subset(split.train)
    pretrain_encoders(
        encoder,
        x,
        (lab[:, 1] >= 0).long(),
        ids,
        epochs=cfg.encoder.pretrain_epochs,
        lr=cfg.encoder.pretrain_lr,
        batch_size=cfg.train.batch_size,
        seed=seed,
    )
    return encoder


def train_comparators(
    cfg: RunConfig,
    corpus: Corpus,
    split: ProtocolSplit,
    seed: int = 0,
    comparators=None,
    stages: tuple[int, ...] = (1, 2),
    base: Checkpoint | None = None,
) -> TrainedModels:
    """Train the requested comparators on ``split.train``.

    ``base`` resumes from an earlier checkpoint: its encoder is reused and
    its HiPTune model continues with the remaining stages.
    """
    comparators = list(comparators or cfg.eval.comparators)
    loss_cfg = cfg.build_loss_config()
    x, lab, ids = corpus.subset(split.train)
    is_fake = (lab[:, 1] >= 0).long()

    if base is not None:
        encoder, model, baselines = base.encoder, base.hiptune, dict(base.baselines)
    else:
        encoder, model, baselines = pretrain(cfg, corpus, split, seed), None, {}
    state = None
    traces = {}

    if "hiptune" in comparators:
        if model is None:
            if 1 not in stages:
                raise ConfigError("stage 2 needs a checkpoint that already holds a stage-1 model")
            model = HiPTune(encoder, corpus.taxonomy, cfg.build_model_config(), seed=seed)
        if 1 in stages:
            state = train_stage1(model, x, lab, ids, loss_cfg, seed=seed)
        if 2 in stages:
            state = train_stage2(model, x, lab, ids, loss_cfg, seed=seed, state=state)

    if 1 in stages:
        for name in ("coop-unified", "coop-specific"):
            if name in comparators:
                b = CoOpBaseline(encoder, cfg.build_baseline_config(name == "coop-specific"), seed=seed)
                traces[name] = train_coop(b, x, is_fake, ids, loss_cfg, epochs=cfg.baseline.epochs, seed=seed)
                baselines[name] = b

    done = max(stages) if base is None else max(base.stage, max(stages))
    ckpt = Checkpoint(
        corpus.taxonomy,
        cfg,
        encoder,
        model,
        baselines,
        stage=done,
        meta={"seed": seed, "protocol": split.protocol, "split_seed": split.seed},
    )
    return TrainedModels(ckpt, state, traces)


@torch.no_grad()
def comparator_scores(ckpt: Checkpoint, comparator: str, images: torch.Tensor, batch_size: int = 128):
    """Fake probabilities and, for HiPTune, the routed paths."""
    if comparator not in COMPARATORS:
        raise ConfigError(f"unknown comparator {comparator!r}")
    if comparator == "hiptune":
        if ckpt.hiptune is None:
            raise ConfigError("checkpoint holds no HiPTune model")
        return predict(ckpt.hiptune, images, batch_size)
    if comparator == "clip-v":
        fn = ckpt.encoder.zero_shot_probabilities
    else:
        if comparator not in ckpt.baselines:
            raise ConfigError(f"checkpoint holds no {comparator} baseline")
        fn = ckpt.baselines[comparator]
    out = [fn(images[i : i + batch_size])[:, 1].double().numpy() for i in range(0, len(images), batch_size)]
    return (np.concatenate(out) if out else np.zeros(0)), None


def evaluate_comparator(
    ckpt: Checkpoint,
    corpus: Corpus,
    split: ProtocolSplit,
    comparator: str,
    threshold: float | str = 0.5,
    seed: int | None = None,
) -> ReportRow:
    if threshold == "dev-eer":
        xv, lv, _ = corpus.subset(split.val)
        dev_scores, _ = comparator_scores(ckpt, comparator, xv)
        threshold = compute_metrics(dev_scores, (lv[:, 1] >= 0).long().numpy()).eer_threshold
    x, lab, _ = corpus.subset(split.test)
    scores, nodes = comparator_scores(ckpt, comparator, x)
    metrics = compute_metrics(scores, (lab[:, 1] >= 0).long().numpy(), threshold)
    route = routing_accuracy(nodes, lab.numpy()) if nodes is not None else None
    return ReportRow(split.protocol, comparator, seed, metrics, route)


@dataclass
class ProtocolResult:
    protocol: str
    seed: int
    split: ProtocolSplit
    rows: list[ReportRow]
    models: TrainedModels


def run_protocol(protocol: str, cfg: RunConfig, seed: int | None = None, corpus: Corpus | None = None) -> ProtocolResult:
    """Train and evaluate every configured comparator on one protocol split."""
    seed = cfg.eval.seeds[0] if seed is None else seed
    corpus = corpus or prepare_corpus(cfg)
    split = make_protocol_split(corpus.manifest, corpus.taxonomy, protocol, seed)
    models = train_comparators(cfg, corpus, split, seed)
    rows = [evaluate_comparator(models.checkpoint, corpus, split, c, cfg.eval.threshold, seed) for c in cfg.eval.comparators]
    return ProtocolResult(split.protocol, seed, split, rows, models)


def run_seeds(cfg: RunConfig, corpus: Corpus | None = None) -> list[ProtocolResult]:
    corpus = corpus or prepare_corpus(cfg)
    return [run_protocol(cfg.eval.protocol, cfg, s, corpus) for s in cfg.eval.seeds]
