"""Command-line entry point.

Exit codes: 0 on success, 2 on configuration or validation errors, 1 on any
other failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checkpoint import load_checkpoint, save_checkpoint
from .config import COMPARATORS, RunConfig, load_config, parse_config
from .errors import ConfigError, HiPTuneError, ValidationError
from .evaluation import ProtocolSplit, ReportRow, format_report, make_protocol_split, verify_split
from .pipeline import (
    Corpus,
    evaluate_comparator,
    load_corpus,
    prepare_corpus,
    run_seeds,
    save_corpus,
    train_comparators,
)

log = logging.getLogger("hiptune")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _read_split(path) -> tuple[ProtocolSplit, str | None]:
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"split file not found: {p}")
    try:
        d = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{p}: invalid JSON ({exc})") from exc
    return ProtocolSplit.from_dict(d), d.get("data")


def _corpus_for_split(split: ProtocolSplit, data: str | None) -> Corpus:
    if data is None:
        raise ConfigError("no dataset directory given (use --data or a split file that records one)")
    corpus = load_corpus(data)
    if split.taxonomy_digest and split.taxonomy_digest != corpus.taxonomy.digest():
        raise ValidationError("split was built for a different taxonomy")
    verify_split(split, corpus.manifest, corpus.taxonomy)
    return corpus


def cmd_generate(args) -> int:
    cfg = parse_config(
        {"data": {"identities": args.identities, "frames": args.frames, "size": args.size, "seed": args.seed}}
    )
    corpus = prepare_corpus(cfg)
    save_corpus(corpus, args.out, png=args.png)
    n_live = int((corpus.is_fake == 0).sum())
    print(f"wrote {len(corpus.manifest)} samples ({n_live} live, {corpus.taxonomy.n_methods} methods) to {args.out}")
    return EXIT_OK


def cmd_split(args) -> int:
    corpus = load_corpus(args.data)
    split = make_protocol_split(corpus.manifest, corpus.taxonomy, args.protocol, args.seed)
    out = Path(args.out) if args.out else Path(args.data) / "splits" / f"{split.protocol.lower()}-seed{split.seed}.json"
    _write_json(out, {**split.to_dict(), "data": str(args.data)})
    print(f"{split.protocol}: train {len(split.train)}, val {len(split.val)}, test {len(split.test)} -> {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    paths = cfg.paths
    split_path = args.split or paths.split
    if split_path is None:
        raise ConfigError("no split file (set paths.split in the config or pass --split)")
    split, split_data = _read_split(split_path)
    corpus = _corpus_for_split(split, args.data or paths.data or split_data)
    out = args.out or paths.checkpoint
    if out is None:
        raise ConfigError("no checkpoint path (set paths.checkpoint in the config or pass --out)")
    stages = {"1": (1,), "2": (2,), "all": (1, 2)}[args.stage]
    base = None
    if stages == (2,):
        base = load_checkpoint(args.init or out)
        if base.stage < 1 or base.hiptune is None:
            raise ConfigError("stage 2 needs a stage-1 checkpoint")
    seed = cfg.eval.seeds[0]
    trained = train_comparators(cfg, corpus, split, seed, stages=stages, base=base)
    save_checkpoint(out, trained.checkpoint)
    print(f"stage {args.stage} done; checkpoint at {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    split, split_data = _read_split(args.split)
    corpus = _corpus_for_split(split, args.data or split_data)
    if ckpt.taxonomy.digest() != corpus.taxonomy.digest():
        raise ValidationError("checkpoint and dataset use different taxonomies")
    threshold = ckpt.config.eval.threshold if args.threshold is None else _threshold(args.threshold)
    row = evaluate_comparator(ckpt, corpus, split, args.comparator, threshold, ckpt.meta.get("seed"))
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name(f"eval-{split.protocol.lower()}-{args.comparator}.json")
    _write_json(out, row.to_dict())
    print(format_report([row], "text"), end="")
    return EXIT_OK


def _threshold(text: str):
    if text in ("eer", "dev-eer"):
        return text
    try:
        return float(text)
    except ValueError:
        raise ConfigError(f"threshold must be a number, 'eer' or 'dev-eer', got {text!r}") from None


def _collect_rows(inputs) -> list[ReportRow]:
    files: list[Path] = []
    for item in inputs:
        p = Path(item)
        files.extend(sorted(p.glob("eval-*.json")) if p.is_dir() else [p])
    if not files:
        raise ValidationError("no evaluation results found")
    rows = []
    for f in files:
        if not f.is_file():
            raise ValidationError(f"results file not found: {f}")
        try:
            rows.append(ReportRow.from_dict(json.loads(f.read_text(encoding="utf-8"))))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise ValidationError(f"{f}: not an evaluation result ({exc})") from exc
    return rows


def cmd_report(args) -> int:
    text = format_report(_collect_rows(args.inputs), args.format)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.protocol:
        cfg = parse_config({**cfg.model_dump(mode="json"), "eval": {**cfg.eval.model_dump(mode="json"), "protocol": args.protocol}})
    results = run_seeds(cfg)
    rows = [r for res in results for r in res.rows]
    text = format_report(rows, args.format)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_serve(args) -> int:
    import uvicorn

    from .service.app import create_app

    uvicorn.run(create_app(args.checkpoint), host=args.host, port=args.port, log_level="info")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hiptune", description="Hierarchical prompt tuning for unified face attack detection.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="render the synthetic dataset")
    g.add_argument("--identities", type=int, default=10)
    g.add_argument("--frames", type=int, default=3)
    g.add_argument("--size", type=int, default=32)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--png", action="store_true", help="also write PNG previews")
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("split", help="build a protocol split over a generated dataset")
    s.add_argument("--protocol", required=True, type=str.lower, choices=["p1", "p2", "p3.1", "p3.2"])
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--data", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_split)

    t = sub.add_parser("train", help="train HiPTune and the configured baselines")
    t.add_argument("--stage", choices=["1", "2", "all"], default="all")
    t.add_argument("--config", required=True)
    t.add_argument("--split")
    t.add_argument("--data")
    t.add_argument("--out", help="checkpoint path")
    t.add_argument("--init", help="stage-1 checkpoint to continue from (stage 2)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate one comparator on a split's test part")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", required=True)
    e.add_argument("--comparator", required=True, choices=list(COMPARATORS))
    e.add_argument("--data")
    e.add_argument("--threshold", help="number, 'eer' or 'dev-eer' (default from the checkpoint config)")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="tabulate evaluation results")
    r.add_argument("--format", choices=["text", "csv", "json"], default="text")
    r.add_argument("--out")
    r.add_argument("inputs", nargs="+", help="result files or directories holding eval-*.json")
    r.set_defaults(func=cmd_report)

    u = sub.add_parser("run", help="generate, split, train and evaluate in one go")
    u.add_argument("--config")
    u.add_argument("--protocol", type=str.upper, choices=["P1", "P2", "P3.1", "P3.2"])
    u.add_argument("--format", choices=["text", "csv", "json"], default="text")
    u.add_argument("--out")
    u.set_defaults(func=cmd_run)

    v = sub.add_parser("serve", help="start the HTTP service")
    v.add_argument("--checkpoint")
    v.add_argument("--host", default="127.0.0.1")
    v.add_argument("--port", type=int, default=8000)
    v.set_defaults(func=cmd_serve)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except HiPTuneError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - last-resort exit code for the shell
        log.debug("unhandled", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
