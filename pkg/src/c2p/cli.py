"""Command-line pipeline: scan -> caption -> train -> merge -> eval -> analyze.

Each subcommand reads an optional JSON run config (``--config``), applies
flag overrides on top, writes its machine-readable outputs plus the
effective config snapshot into ``--out``, and exits 0 on success or 2 on any
expected pipeline error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .captions import StubCaptionProvider, generate_captions, load_caption_cache
from .config import RunConfig
from .data import read_manifest, scan_dataset, write_manifest
from .errors import C2PError, InvalidInputError, NotFoundError
from .evaluation import export_logit_distribution, predict, score_results, write_results
from .training import (
    build_model_from_checkpoint,
    fit,
    load_checkpoint,
    merge_checkpoint,
    save_checkpoint,
)

logger = logging.getLogger(__name__)


def _write_snapshot(out_dir: Path, command: str, config: RunConfig) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    snapshot = {
        "tool_version": __version__,
        "command": command,
        "config": config.to_dict(),
    }
    (out_dir / "run_config.json").write_text(json.dumps(snapshot, indent=2, sort_keys=True) + "\n")


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _build_config(args: argparse.Namespace) -> RunConfig:
    config = RunConfig.from_json_file(args.config) if getattr(args, "config", None) else RunConfig()
    overrides = {
        name: value
        for name, value in vars(args).items()
        if value is not None and name in {f.name for f in dataclasses.fields(RunConfig)}
    }
    if getattr(args, "classes", None):
        overrides["classes"] = [c for chunk in args.classes for c in chunk.split(",") if c]
    return dataclasses.replace(config, **overrides)


def _build_backend(config: RunConfig):
    from .encoder import build_backend

    if config.backend == "toy" and config.target_size % 8 != 0:
        raise InvalidInputError("toy backend needs a target size divisible by its patch size (8)")
    return build_backend(config.backend, seed=config.seed)


def cmd_scan(args: argparse.Namespace) -> int:
    config = _build_config(args)
    if not config.root:
        raise NotFoundError("scan needs --root")
    manifest = scan_dataset(config.root, config.layout, config.split, config.classes)
    out_dir = Path(config.out)
    _write_snapshot(out_dir, "scan", config)
    path = write_manifest(manifest, out_dir / "manifest.jsonl")
    summary = {
        "records": len(manifest),
        "subsets": manifest.subsets(),
        "skipped": manifest.skipped,
    }
    _write_json(out_dir / "scan_summary.json", summary)
    print(f"wrote {len(manifest)} records to {path}")
    return 0


def cmd_caption(args: argparse.Namespace) -> int:
    config = _build_config(args)
    manifest = read_manifest(_require(config.manifest, "caption needs --manifest"))
    if args.provider == "stub":
        provider = StubCaptionProvider(text=args.stub_text)
    else:
        raise InvalidInputError(f"unknown caption provider: {args.provider!r}")
    out_dir = Path(config.out)
    _write_snapshot(out_dir, "caption", config)
    cache = generate_captions(
        manifest, provider, out_dir / "captions.jsonl", policy=config.policy(crop="center")
    )
    flagged = sum(1 for rec in cache.values() if rec.flagged)
    print(f"cached {len(cache)} captions ({flagged} flagged) in {out_dir / 'captions.jsonl'}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    config = _build_config(args)
    manifest = read_manifest(_require(config.manifest, "train needs --manifest"))
    cache = load_caption_cache(_require(config.captions, "train needs --captions"))
    backend = _build_backend(config)
    out_dir = Path(config.out)
    _write_snapshot(out_dir, "train", config)
    checkpoint = fit(
        manifest,
        cache,
        config.prompt_pair(),
        backend,
        adapter_config=config.adapter_config(),
        train_config=config.train_config(),
        policy=config.policy(),
        out_dir=out_dir,
    )
    final = checkpoint.log[-1]["total"] if checkpoint.log else float("nan")
    print(f"trained {len(checkpoint.log)} steps (final loss {final:.4f}); checkpoint at {out_dir}")
    return 0


def cmd_merge(args: argparse.Namespace) -> int:
    config = _build_config(args)
    ckpt_dir = Path(_require(config.checkpoint, "merge needs --checkpoint"))
    checkpoint = load_checkpoint(ckpt_dir)
    checkpoint = merge_checkpoint(checkpoint)
    out_dir = Path(config.out) if args.out else ckpt_dir
    _write_snapshot(out_dir, "merge", config)
    save_checkpoint(checkpoint, out_dir)
    print(f"merged export written to {out_dir / 'merged.pt'}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    config = _build_config(args)
    manifest = read_manifest(_require(config.manifest, "eval needs --manifest"))
    checkpoint = load_checkpoint(_require(config.checkpoint, "eval needs --checkpoint"))
    use_merged = checkpoint.merged_state is not None and not args.adapter
    backend, classifier = build_model_from_checkpoint(checkpoint, with_text=False, merged=use_merged)
    policy = dataclasses.replace(checkpoint.policy, crop="center")
    out_dir = Path(config.out)
    _write_snapshot(out_dir, "eval", config)
    results, skipped = predict(manifest, backend, classifier, policy)
    report = score_results(results)
    write_results(results, out_dir / "results.jsonl")
    payload = report.to_dict()
    payload["skipped"] = skipped
    payload["weights"] = "merged" if use_merged else "adapter"
    _write_json(out_dir / "report.json", payload)
    print(
        f"evaluated {len(results)} images ({len(skipped)} skipped): "
        f"mAP {report.map_mean:.4f}, mAcc {report.macc_mean:.4f}"
    )
    return 0


def cmd_analyze(args: argparse.Namespace) -> int:
    from . import analysis

    config = _build_config(args)
    manifest = read_manifest(_require(config.manifest, "analyze needs --manifest"))
    checkpoint = load_checkpoint(_require(config.checkpoint, "analyze needs --checkpoint"))
    use_merged = checkpoint.merged_state is not None
    backend, classifier = build_model_from_checkpoint(checkpoint, with_text=False, merged=use_merged)
    policy = dataclasses.replace(checkpoint.policy, crop="center")
    out_dir = Path(config.out)
    _write_snapshot(out_dir, "analyze", config)

    if args.which == "logits":
        results, _ = predict(manifest, backend, classifier, policy)
        _write_json(out_dir / "logit_distribution.json", export_logit_distribution(results))
        print(f"logit distributions written to {out_dir / 'logit_distribution.json'}")
        return 0

    features = analysis.compute_detection_features(manifest, backend, classifier, policy)
    decoder = analysis.StubCaptionDecoder()

    if args.which == "wordfreq":
        texts = [analysis.decode_feature_to_text(f, decoder) for f in features]
        payload = {
            "stopwords_version": analysis.STOPWORDS_VERSION,
            "top_k": args.top_k,
            "overall": _table_dict(analysis.word_frequency(texts, top_k=args.top_k)),
            "per_label": {
                label_name: _table_dict(
                    analysis.word_frequency(
                        [t for f, t in zip(features, texts) if f.label == label],
                        top_k=args.top_k,
                    )
                )
                for label_name, label in (("real", 0), ("fake", 1))
            },
        }
        _write_json(out_dir / "word_frequency.json", payload)
        print(f"word-frequency tables written to {out_dir / 'word_frequency.json'}")
        return 0

    if args.which == "clusters":
        import numpy as np

        subset_by_id = {r.image_id: r.subset for r in manifest.records}
        groups: dict[str, list] = {"all": list(features)}
        for feature in features:
            groups.setdefault(subset_by_id[feature.image_id], []).append(feature)
        payload = {}
        for subset in sorted(groups):
            chosen = groups[subset]
            if len(chosen) < args.k:
                continue
            matrix = np.stack([f.vector for f in chosen])
            result = analysis.cluster_features(matrix, k=args.k, seed=config.seed)
            payload[subset] = {
                "centers": result.centers.tolist(),
                "decoded": [analysis.decode_feature_to_text(c, decoder) for c in result.centers],
                "sizes": [int((result.assignments == j).sum()) for j in range(args.k)],
                "iterations": result.n_iter,
            }
        _write_json(out_dir / "clusters.json", payload)
        print(f"cluster centers written to {out_dir / 'clusters.json'}")
        return 0

    if args.which == "project":
        import numpy as np

        matrix = np.stack([f.vector for f in features])
        coords = analysis.project_2d(matrix, method=args.projection, seed=config.seed)
        payload = {
            "method": args.projection,
            "points": [
                {"image_id": f.image_id, "label": f.label, "x": float(x), "y": float(y)}
                for f, (x, y) in zip(features, coords)
            ],
        }
        _write_json(out_dir / "projection.json", payload)
        print(f"2-D projection written to {out_dir / 'projection.json'}")
        return 0

    raise InvalidInputError(f"unknown analysis: {args.which!r}")


def _require(value: str, message: str) -> str:
    if not value:
        raise NotFoundError(message)
    return value


def _table_dict(table) -> dict:
    return {
        "entries": [{"word": w, "count": c} for w, c in table.entries],
        "corpus_size": table.corpus_size,
        "total_tokens": table.total_tokens,
    }


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="c2p", description=__doc__)
    parser.add_argument("--version", action="version", version=f"c2p {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON run config; flags override its values")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)

    scan = sub.add_parser("scan", help="build a dataset manifest")
    add_common(scan)
    scan.add_argument("--root")
    scan.add_argument("--layout", choices=("universal_fake_detect", "genimage", "flat"))
    scan.add_argument("--split", choices=("train", "val", "test"))
    scan.add_argument("--classes", action="append", help="object classes to keep (comma-separated)")
    scan.set_defaults(func=cmd_scan)

    caption = sub.add_parser("caption", help="generate captions into a cache")
    add_common(caption)
    caption.add_argument("--manifest")
    caption.add_argument("--provider", default="stub", choices=("stub",))
    caption.add_argument("--stub-text", default="a test image")
    caption.add_argument("--target-size", dest="target_size", type=int)
    caption.set_defaults(func=cmd_caption)

    train = sub.add_parser("train", help="run concept-injection training")
    add_common(train)
    train.add_argument("--manifest")
    train.add_argument("--captions")
    train.add_argument("--prompt-real", dest="prompt_real")
    train.add_argument("--prompt-fake", dest="prompt_fake")
    train.add_argument("--backend", choices=("toy", "pretrained"))
    train.add_argument("--alpha", type=float)
    train.add_argument("--lr", type=float)
    train.add_argument("--batch-size", dest="batch_size", type=int)
    train.add_argument("--epochs", type=int)
    train.add_argument("--lora-r", dest="lora_r", type=int)
    train.add_argument("--lora-alpha", dest="lora_alpha", type=float)
    train.add_argument("--lora-dropout", dest="lora_dropout", type=float)
    train.add_argument("--target-size", dest="target_size", type=int)
    train.add_argument("--crop", choices=("center", "random"))
    train.set_defaults(func=cmd_train)

    merge = sub.add_parser("merge", help="fold adapters into the image tower")
    add_common(merge)
    merge.add_argument("--checkpoint")
    merge.set_defaults(func=cmd_merge)

    evaluate = sub.add_parser("eval", help="score a manifest with a checkpoint")
    add_common(evaluate)
    evaluate.add_argument("--checkpoint")
    evaluate.add_argument("--manifest")
    evaluate.add_argument("--adapter", action="store_true", help="force adapter weights even if a merged export exists")
    evaluate.set_defaults(func=cmd_eval)

    analyze = sub.add_parser("analyze", help="interpretability exports")
    add_common(analyze)
    analyze.add_argument("--checkpoint")
    analyze.add_argument("--manifest")
    analyze.add_argument("--which", required=True, choices=("wordfreq", "clusters", "project", "logits"))
    analyze.add_argument("--top-k", dest="top_k", type=int, default=15)
    analyze.add_argument("--k", type=int, default=3)
    analyze.add_argument("--projection", default="pca", choices=("pca", "tsne"))
    analyze.set_defaults(func=cmd_analyze)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except C2PError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
