"""Checkpoint bundles stored as safetensors with a JSON metadata header.

A bundle holds the frozen encoder, optionally the trained HiPTune parts
(prompt tree, gates, DPI) and any flat-prompt baselines, plus the taxonomy
and run configuration needed to rebuild them.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import torch
from safetensors import SafetensorError, safe_open
from safetensors.torch import load_file, save_file

from .config import RunConfig, parse_config
from .encoders import CoOpBaseline, DualEncoder
from .errors import ValidationError
from .model import HiPTune
from .taxonomy import AttackTaxonomy

FORMAT = "hiptune-checkpoint"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    taxonomy: AttackTaxonomy
    config: RunConfig
    encoder: DualEncoder
    hiptune: HiPTune | None = None
    baselines: dict[str, CoOpBaseline] = field(default_factory=dict)
    stage: int = 0
    meta: dict = field(default_factory=dict)


def _prefixed(prefix: str, state: dict) -> dict[str, torch.Tensor]:
    return {f"{prefix}.{k}": v.detach().contiguous().clone() for k, v in state.items()}


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    tensors = _prefixed("encoder", ckpt.encoder.state_dict())
    if ckpt.hiptune is not None:
        own = {k: v for k, v in ckpt.hiptune.state_dict().items() if not k.startswith("encoder.")}
        tensors.update(_prefixed("hiptune", own))
    for name, b in sorted(ckpt.baselines.items()):
        tensors.update(_prefixed(f"baseline:{name}", {"context": b.context}))
    header = {
        "format": FORMAT,
        "version": FORMAT_VERSION,
        "taxonomy": ckpt.taxonomy.to_dict(),
        "taxonomy_digest": ckpt.taxonomy.digest(),
        "config": ckpt.config.model_dump(mode="json"),
        "stage": ckpt.stage,
        "has_hiptune": ckpt.hiptune is not None,
        "baselines": {n: {"class_specific": b.cfg.class_specific} for n, b in sorted(ckpt.baselines.items())},
        "meta": ckpt.meta,
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    save_file(tensors, str(path), metadata={"header": json.dumps(header, sort_keys=True)})


def _read_header(path) -> dict:
    with safe_open(str(path), framework="pt") as fh:
        meta = fh.metadata() or {}
    if "header" not in meta:
        raise ValidationError(f"{path} is not a checkpoint bundle (no header)")
    header = json.loads(meta["header"])
    if header.get("format") != FORMAT:
        raise ValidationError(f"{path}: unexpected format {header.get('format')!r}")
    if header.get("version") != FORMAT_VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {header.get('version')}")
    return header


def load_checkpoint(path) -> Checkpoint:
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"checkpoint not found: {p}")
    try:
        header = _read_header(p)
        tensors = load_file(str(p))
    except (SafetensorError, OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f"{p}: unreadable checkpoint ({exc})") from exc

    taxonomy = AttackTaxonomy.from_dict(header["taxonomy"])
    if taxonomy.digest() != header["taxonomy_digest"]:
        raise ValidationError(f"{p}: taxonomy digest mismatch")
    config = parse_config(header["config"])

    def part(prefix: str) -> dict[str, torch.Tensor]:
        n = len(prefix) + 1
        return {k[n:]: v for k, v in tensors.items() if k.startswith(prefix + ".")}

    encoder = DualEncoder(config.build_encoder_config(), seed=config.encoder.seed)
    _load(encoder, part("encoder"), p, "encoder")
    encoder.freeze()

    model = None
    if header["has_hiptune"]:
        model = HiPTune(encoder, taxonomy, config.build_model_config())
        own = part("hiptune")
        own.update({f"encoder.{k}": v for k, v in encoder.state_dict().items()})
        _load(model, own, p, "hiptune")
        model.tree.set_trainable(False)

    baselines = {}
    for name, spec in header["baselines"].items():
        b = CoOpBaseline(encoder, config.build_baseline_config(spec["class_specific"]))
        _load(b, {**part(f"baseline:{name}"), **{f"encoder.{k}": v for k, v in encoder.state_dict().items()}}, p, name)
        baselines[name] = b
    return Checkpoint(taxonomy, config, encoder, model, baselines, int(header["stage"]), dict(header.get("meta", {})))


def _load(module: torch.nn.Module, state: dict, path: Path, what: str) -> None:
    try:
        module.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise ValidationError(f"{path}: {what} weights do not match the configuration ({exc})") from exc
