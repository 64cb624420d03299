"""Command-line interface: one subcommand per pipeline operation plus the
full run driver and the toy endpoint server."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import synthgen, toylab
from .alignment import align_dataset
from .datamodel import read_dataset, read_reports, read_traces, write_dataset, write_jsonl, write_masks, write_reports
from .excess import score_stream
from .filtering import RankPolicy, filter_samples, select_tokens
from .pipeline import (
    ConfigError,
    StageError,
    export_masked_dataset,
    load_config,
    run_pipeline,
)
from .protocol import serve_loop
from .synthgen import build_pool
from .tokenizers import get_tokenizer, load_tokenizer_file, registered_tags

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STAGE = 3


def _cmd_score(args: argparse.Namespace) -> int:
    reports = score_stream(read_traces(args.traces))
    count = write_reports(reports, args.out)
    print(f"scored {count} traces -> {args.out}")
    return EXIT_OK


def _cmd_filter(args: argparse.Namespace) -> int:
    reports = list(read_reports(args.excess))
    kept_ids = filter_samples(reports, args.m)
    by_id = {r.sample_id: r for r in reports}
    write_reports([by_id[sid] for sid in kept_ids], args.out)
    print(f"kept {len(kept_ids)}/{len(reports)} samples -> {args.out}")
    return EXIT_OK


def _cmd_select(args: argparse.Namespace) -> int:
    policy = RankPolicy(floor_min_one=not args.strict_floor)
    masks = [select_tokens(r, args.k, policy) for r in read_reports(args.excess)]
    write_masks(masks, args.out)
    kept = sum(int(sum(m.keep)) for m in masks)
    total = sum(len(m.keep) for m in masks)
    print(f"selected {kept}/{total} tokens across {len(masks)} samples -> {args.out}")
    return EXIT_OK


def _resolve_tokenizer(spec: str):
    if spec.endswith(".txt") and Path(spec).exists():
        return load_tokenizer_file(spec)
    return get_tokenizer(spec)


def _cmd_align(args: argparse.Namespace) -> int:
    dataset = read_dataset(args.infile)
    src = _resolve_tokenizer(args.source_tok)
    tgt = _resolve_tokenizer(args.target_tok)
    aligned, skipped = align_dataset(dataset, src, tgt, args.k, on_error=args.on_error)
    write_dataset(aligned, args.out)
    print(f"aligned {len(aligned.records)} records ({len(skipped)} skipped) -> {args.out}")
    return EXIT_OK


def _cmd_gen(args: argparse.Namespace) -> int:
    from .pipeline import _build_context

    cfg = load_config(args.config, toy=args.toy)
    if args.seeds:
        cfg.few_shot_path = Path(args.seeds)
    ctx = _build_context(cfg)
    try:
        pool, rejects = build_pool(
            cfg.pipeline,
            ctx.few_shot,
            ctx.generator,
            template=ctx.template,
            query_generator=ctx.query_generator,
            sampling=cfg.sampling,
        )
    finally:
        ctx.close()
    write_jsonl(pool, args.out, synthgen.encode_pool_sample)
    write_jsonl(rejects, args.log, synthgen.encode_reject)
    print(f"pool of {len(pool)} ({len(rejects)} rejected) -> {args.out}")
    return EXIT_OK


def _cmd_run(args: argparse.Namespace) -> int:
    try:
        cfg = load_config(args.config, toy=args.toy)
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        manifest = run_pipeline(cfg, resume=args.resume)
    except StageError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return EXIT_STAGE
    for stage in manifest.stages:
        note = f" ({stage.note})" if stage.note else ""
        print(f"stage {stage.name}: ok{note} {stage.counts}")
    print(f"manifest -> {cfg.out_dir / 'manifest.json'}")
    return EXIT_OK


def _cmd_export(args: argparse.Namespace) -> int:
    path = export_masked_dataset(args.run)
    print(path)
    return EXIT_OK


def _cmd_toy_serve(args: argparse.Namespace) -> int:
    model = toylab.load_model(args.model)
    adapter = toylab.load_adapter(args.adapter) if args.adapter else None
    tokenizer = _resolve_tokenizer(args.tokenizer)
    serve_loop(toylab.ToyEndpoint(model, adapter, tokenizer))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="titok", description="Token-level adapter knowledge transplant toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("score", help="compute excess scores from scored traces")
    p.add_argument("--traces", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_score)

    p = sub.add_parser("filter", help="keep the top-M samples by mean excess")
    p.add_argument("--excess", required=True)
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_filter)

    p = sub.add_parser("select", help="keep the top-k%% tokens per sample")
    p.add_argument("--excess", required=True)
    p.add_argument("--k", type=float, required=True)
    p.add_argument("--strict-floor", action="store_true", help="disable the minimum-one-token rule")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_select)

    p = sub.add_parser("align", help="propagate masks to a different tokenizer")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--source-tok", required=True, help=f"tag ({', '.join(registered_tags())}) or vocab file")
    p.add_argument("--target-tok", required=True)
    p.add_argument("--k", type=float, required=True)
    p.add_argument("--on-error", choices=("skip", "abort"), default="skip")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_align)

    p = sub.add_parser("gen", help="build the synthetic pool through a generator endpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", help="few-shot exemplar JSONL (overrides config)")
    p.add_argument("--out", required=True)
    p.add_argument("--log", required=True)
    p.add_argument("--toy", action="store_true")
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("run", help="execute the full pipeline from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", action="store_true")
    p.add_argument("--toy", action="store_true")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("export", help="validate and print the final dataset path of a run")
    p.add_argument("--run", required=True)
    p.set_defaults(func=_cmd_export)

    p = sub.add_parser("toy-serve", help="serve the toy model over the line protocol on stdio")
    p.add_argument("--model", required=True)
    p.add_argument("--adapter")
    p.add_argument("--tokenizer", default="toy-char")
    p.set_defaults(func=_cmd_toy_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
