"""Command-line interface.

Verbs: pretrain, eval-retrieval, ablate, export-attention, gen-corpus,
grad-check. All verbs accept --config (flat JSON, unknown keys rejected)
plus --seed/--precision overrides and write file outputs only.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, VARIANT_PRESETS
from .tensor import NumericError, set_precision


def _load_config(args) -> RunConfig:
    cfg = (
        RunConfig.from_json_file(args.config)
        if args.config
        else RunConfig()
    )
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "precision", None) is not None:
        overrides["precision"] = args.precision
    if overrides:
        cfg = cfg.replaced(**overrides)
    return cfg


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", type=Path, help="flat JSON config file")
    parser.add_argument("--seed", type=int, help="override config seed")
    parser.add_argument(
        "--precision", type=int, choices=(32, 64), help="float width"
    )
    parser.add_argument(
        "--out", type=Path, default=Path("runs/out"), help="output directory"
    )


def cmd_gen_corpus(args) -> int:
    from .data import dump_split
    from .trainer import corpus_config, generate_corpus

    cfg = _load_config(args)
    corpus = generate_corpus(corpus_config(cfg))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    corpus.vocab.save(out / "vocab.txt")
    for split in ("train", "val", "test"):
        path = out / f"{split}.jsonl"
        dump_split(corpus.split(split), path)
        print(f"wrote {path} ({len(corpus.split(split))} samples)")
    return 0


def cmd_pretrain(args) -> int:
    from .trainer import run_pretraining

    cfg = _load_config(args)
    try:
        result = run_pretraining(
            cfg, args.out, resume_from=args.resume, log_every=args.log_every
        )
    except NumericError as err:
        print(f"aborted on non-finite loss: {err}", file=sys.stderr)
        print("last periodic checkpoint (if any) was retained", file=sys.stderr)
        return 2
    print(f"checkpoint: {result.checkpoint_dir}")
    if result.losses:
        print(
            f"loss: first={result.losses[0].total:.4f} "
            f"final={result.final_total:.4f}"
        )
    return 0


def cmd_eval_retrieval(args) -> int:
    from .retrieval import eval_retrieval
    from .trainer import corpus_config, load_model
    from .data import generate_corpus

    model, manifest = load_model(args.checkpoint)
    cfg = RunConfig.from_dict(manifest["config"])
    corpus = generate_corpus(corpus_config(cfg))
    report = eval_retrieval(
        model,
        corpus.split(args.split),
        mode=args.mode,
        rerank_k=cfg.eval_rerank_k,
        direction=args.direction,
    )
    print(json.dumps(report.as_dict(), indent=2))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        path = out / f"retrieval_{args.split}_{args.mode}_{args.direction}.json"
        path.write_text(
            json.dumps(report.as_dict() | {"ranks": report.ranks}, indent=2),
            encoding="utf-8",
        )
        print(f"wrote {path}")
    return 0


def cmd_ablate(args) -> int:
    from .trainer import run_ablation

    cfg = _load_config(args)
    variants = args.variants.split(",")
    unknown = [v for v in variants if v not in VARIANT_PRESETS]
    if unknown:
        raise ConfigError(f"unknown variants: {unknown}")
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = run_ablation(cfg, variants, seeds, args.out, eval_mode=args.mode)
    print((Path(args.out) / "ablation.md").read_text(encoding="utf-8"))
    return 0 if rows else 1


def cmd_export_attention(args) -> int:
    from .export import export_attention
    from .trainer import corpus_config, load_model
    from .data import generate_corpus

    model, manifest = load_model(args.checkpoint)
    cfg = RunConfig.from_dict(manifest["config"])
    corpus = generate_corpus(corpus_config(cfg))
    split = corpus.split(args.split)
    matches = [s for s in split if s.sample_id == args.sample_id]
    if not matches:
        print(
            f"sample id {args.sample_id!r} not in split {args.split!r} "
            f"(ids look like 'train-0')",
            file=sys.stderr,
        )
        return 2
    paths = export_attention(
        model,
        matches[0],
        args.word_index,
        args.out,
        layer=args.layer if args.layer is not None else cfg.export_layer,
    )
    for p in paths:
        print(f"wrote {p}")
    return 0


def cmd_grad_check(args) -> int:
    from .data import generate_corpus
    from .gradcheck import grad_check
    from .objectives import batch_losses
    from .rng import Rng
    from .trainer import build_training, corpus_config

    cfg = _load_config(args)
    if cfg.precision != 64:
        raise ConfigError("grad-check requires precision 64")
    set_precision(64)
    corpus = generate_corpus(corpus_config(cfg))
    model, _, state = build_training(cfg)
    samples = corpus.train[: max(2, args.batch)]
    rng = Rng(cfg.seed).child("grad-check")

    def loss():
        parts = batch_losses(model, state, samples, rng)
        total = None
        for term in parts.values():
            total = term if total is None else total + term
        return total

    report = grad_check(
        loss,
        model.parameters(),
        step=args.step,
        tol=args.tol,
        max_entries_per_param=args.entries,
    )
    print(report.summary())
    return 0 if report.passed else 1


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="gridvl",
        description="Toy video-text alignment lab on a synthetic grid corpus",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("gen-corpus", help="write corpus splits as JSON lines")
    _add_common(p)
    p.set_defaults(fn=cmd_gen_corpus)

    p = sub.add_parser("pretrain", help="run the training step budget")
    _add_common(p)
    p.add_argument("--resume", type=Path, help="checkpoint directory to resume")
    p.add_argument("--log-every", type=int, default=0)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("eval-retrieval", help="R@K / MedR for a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", default="val", choices=("train", "val", "test"))
    p.add_argument(
        "--mode", default="vtc_zero_shot", choices=("vtc_zero_shot", "vtm_reranked")
    )
    p.add_argument("--direction", default="t2v", choices=("t2v", "v2t"))
    p.add_argument("--out", type=Path)
    p.set_defaults(fn=cmd_eval_retrieval)

    p = sub.add_parser("ablate", help="train and compare the variant ladder")
    _add_common(p)
    p.add_argument(
        "--variants", default="base,t2w,concat,full", help="comma-separated"
    )
    p.add_argument("--seeds", default="0", help="comma-separated seed list")
    p.add_argument(
        "--mode", default="vtc_zero_shot", choices=("vtc_zero_shot", "vtm_reranked")
    )
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("export-attention", help="write attention heatmaps")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", default="train", choices=("train", "val", "test"))
    p.add_argument("--sample-id", required=True)
    p.add_argument("--word-index", type=int, required=True)
    p.add_argument("--layer", type=int)
    p.add_argument("--out", type=Path, default=Path("runs/attention"))
    p.set_defaults(fn=cmd_export_attention)

    p = sub.add_parser("grad-check", help="finite-difference gradient check")
    _add_common(p)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--entries", type=int, default=4, help="probes per parameter")
    p.add_argument("--batch", type=int, default=2)
    p.set_defaults(fn=cmd_grad_check)

    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
