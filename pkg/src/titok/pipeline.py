"""End-to-end pipeline: generate pool, score, filter samples, select tokens,
align across tokenizers when they differ, emit the masked dataset, and (in
toy mode) train the toy target model.

Stages run in a fixed order, every intermediate artifact is persisted, and
a run manifest records config, per-stage digests, counts, and timings. Toy
runs are byte-reproducible from (config, seed); --resume restarts at the
first incomplete stage using the persisted artifacts.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from . import synthgen, toylab
from .alignment import align_dataset
from .datamodel import (
    DatasetMeta,
    MaskedDataset,
    MaskedRecord,
    PipelineConfig,
    ScoredTrace,
    ensure_unique_ids,
    read_dataset,
    read_jsonl,
    read_reports,
    read_traces,
    validate_trace,
    write_dataset,
    write_jsonl,
    write_masks,
    write_reports,
    write_traces,
)
from .excess import excess_scores
from .filtering import apply_mask_stats, filter_samples, select_tokens, RankPolicy
from .protocol import Endpoint, ScoreRequest, open_endpoint
from .synthgen import PromptTemplate, SamplingParams, build_pool, load_template
from .tokenizers import get_tokenizer

MANIFEST_NAME = "manifest.json"
PROGRESS_NAME = "progress.json"
LOCK_NAME = ".lock"

ENV_GENERATOR = "TITOK_GENERATOR"
ENV_SCORER = "TITOK_SCORER"

STAGE_ORDER = ("gen", "score", "filter", "select", "align", "emit")

ARTIFACTS = {
    "pool": "pool.jsonl",
    "rejects": "rejects.jsonl",
    "traces": "traces.jsonl",
    "excess": "excess.jsonl",
    "kept": "kept.jsonl",
    "masks": "masks.jsonl",
    "dataset_source": "dataset_source.jsonl",
    "dataset_aligned": "dataset_aligned.jsonl",
    "align_skips": "align_skips.jsonl",
    "dataset_final": "dataset_final.jsonl",
    "target_model": "target_model.txt",
}


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"stage {stage!r} failed: {message}")


@dataclass
class RunConfig:
    """Parsed run configuration: the shared pipeline parameters plus
    run-level knobs (paths, sampling, policies)."""

    pipeline: PipelineConfig
    out_dir: Path
    few_shot_path: Path | None
    template_path: Path | None
    toy: bool
    toy_base_corpus: Path | None
    toy_task_corpus: Path | None
    toy_alpha: float
    strict_floor: bool
    on_error: str
    query_source: str
    query_generator_endpoint: str
    source_model_tag: str
    sampling: SamplingParams

    def snapshot(self) -> dict[str, Any]:
        p = self.pipeline
        return {
            "dedup": p.dedup,
            "few_shot": str(self.few_shot_path) if self.few_shot_path else None,
            "generator_endpoint": p.generator_endpoint,
            "k_percent": p.k_percent,
            "keep_m": p.keep_m,
            "on_error": self.on_error,
            "out_dir": str(self.out_dir),
            "pool_size": p.pool_size,
            "query_generator_endpoint": self.query_generator_endpoint,
            "query_source": self.query_source,
            "rouge_threshold": p.rouge_threshold,
            "sampling": {
                "greedy": self.sampling.greedy,
                "max_tokens": self.sampling.max_tokens,
                "temperature": self.sampling.temperature,
                "top_p": self.sampling.top_p,
            },
            "scorer_endpoint": p.scorer_endpoint,
            "seed": p.seed,
            "source_model_tag": self.source_model_tag,
            "strict_floor": self.strict_floor,
            "template": str(self.template_path) if self.template_path else None,
            "tokenizer_source": p.tokenizer_source,
            "tokenizer_target": p.tokenizer_target,
            "toy": self.toy,
            "toy_alpha": self.toy_alpha,
            "toy_base_corpus": str(self.toy_base_corpus) if self.toy_base_corpus else None,
            "toy_task_corpus": str(self.toy_task_corpus) if self.toy_task_corpus else None,
        }


_BOOL_VALUES = {"true": True, "false": False, "yes": True, "no": False, "1": True, "0": False}


def _parse_flat_config(path: str | Path) -> dict[str, str]:
    values: dict[str, str] = {}
    for line_no, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{line_no}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key in values:
            raise ConfigError(f"{path}:{line_no}: duplicate key {key!r}")
        values[key] = value
    return values


_KNOWN_KEYS = {
    "pool_size", "keep_m", "k_percent", "rouge_threshold", "dedup", "seed",
    "tokenizer_source", "tokenizer_target", "generator_endpoint", "scorer_endpoint",
    "query_generator_endpoint", "query_source", "source_model_tag",
    "out_dir", "few_shot", "template", "strict_floor", "on_error",
    "temperature", "top_p", "max_tokens", "greedy",
    "toy_base_corpus", "toy_task_corpus", "toy_alpha",
}


def _as_bool(raw: str, key: str) -> bool:
    try:
        return _BOOL_VALUES[raw.lower()]
    except KeyError:
        raise ConfigError(f"key {key!r}: expected a boolean, got {raw!r}") from None


def load_config(path: str | Path, toy: bool = False) -> RunConfig:
    """Parse the flat key=value config file into a validated RunConfig.

    Endpoint locators can be overridden by the TITOK_GENERATOR and
    TITOK_SCORER environment variables. The toy flag (or locator "toy:")
    switches endpoints to the in-process toy laboratory.
    """
    base = Path(path).parent
    values = _parse_flat_config(path)
    unknown = set(values) - _KNOWN_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    def need(key: str) -> str:
        if key not in values:
            raise ConfigError(f"missing required config key {key!r}")
        return values[key]

    def as_int(key: str, default: int | None = None) -> int:
        raw = values.get(key)
        if raw is None:
            if default is None:
                raise ConfigError(f"missing required config key {key!r}")
            return default
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"key {key!r}: expected an integer, got {raw!r}") from None

    def as_float(key: str, default: float | None = None) -> float:
        raw = values.get(key)
        if raw is None:
            if default is None:
                raise ConfigError(f"missing required config key {key!r}")
            return default
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"key {key!r}: expected a number, got {raw!r}") from None

    def as_path(key: str) -> Path | None:
        raw = values.get(key)
        if raw is None or raw == "":
            return None
        p = Path(raw)
        return p if p.is_absolute() else base / p

    rouge_raw = values.get("rouge_threshold", str(synthgen.DEFAULT_ROUGE_THRESHOLD))
    rouge: float | None
    if rouge_raw.lower() == "disabled":
        rouge = None
    else:
        try:
            rouge = float(rouge_raw)
        except ValueError:
            raise ConfigError(f"key 'rouge_threshold': expected a number or 'disabled', got {rouge_raw!r}") from None

    generator = os.environ.get(ENV_GENERATOR, values.get("generator_endpoint", ""))
    scorer = os.environ.get(ENV_SCORER, values.get("scorer_endpoint", ""))
    toy = toy or generator == "toy:" or scorer == "toy:"

    pipeline = PipelineConfig(
        pool_size=as_int("pool_size"),
        keep_m=as_int("keep_m"),
        k_percent=as_float("k_percent"),
        rouge_threshold=rouge,
        dedup=_as_bool(values.get("dedup", "true"), "dedup"),
        seed=as_int("seed"),
        tokenizer_source=need("tokenizer_source"),
        tokenizer_target=need("tokenizer_target"),
        generator_endpoint=generator,
        scorer_endpoint=scorer,
    )
    try:
        pipeline.check()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    on_error = values.get("on_error", "skip")
    if on_error not in ("skip", "abort"):
        raise ConfigError(f"key 'on_error': expected 'skip' or 'abort', got {on_error!r}")
    query_source = values.get("query_source", "source")
    if query_source not in ("source", "target"):
        raise ConfigError(f"key 'query_source': expected 'source' or 'target', got {query_source!r}")

    out_dir_raw = need("out_dir")
    out_dir = Path(out_dir_raw)
    if not out_dir.is_absolute():
        out_dir = base / out_dir

    cfg = RunConfig(
        pipeline=pipeline,
        out_dir=out_dir,
        few_shot_path=as_path("few_shot"),
        template_path=as_path("template"),
        toy=toy,
        toy_base_corpus=as_path("toy_base_corpus"),
        toy_task_corpus=as_path("toy_task_corpus"),
        toy_alpha=as_float("toy_alpha", 0.5),
        strict_floor=_as_bool(values.get("strict_floor", "false"), "strict_floor"),
        on_error=on_error,
        query_source=query_source,
        query_generator_endpoint=values.get("query_generator_endpoint", ""),
        source_model_tag=values.get("source_model_tag", "toy-expert" if toy else generator),
        sampling=SamplingParams(
            temperature=as_float("temperature", 1.0),
            top_p=as_float("top_p", 0.9),
            max_tokens=as_int("max_tokens", 48),
            greedy=_as_bool(values.get("greedy", "false"), "greedy"),
        ),
    )
    if cfg.toy:
        if cfg.toy_base_corpus is None or cfg.toy_task_corpus is None:
            raise ConfigError("toy mode requires toy_base_corpus and toy_task_corpus")
    else:
        if not generator.startswith("cmd:") or not scorer.startswith("cmd:"):
            raise ConfigError("external mode requires cmd: generator_endpoint and scorer_endpoint")
    if cfg.few_shot_path is None:
        raise ConfigError("missing required config key 'few_shot'")
    return cfg


def config_from_snapshot(snapshot: dict[str, Any], out_dir: str | Path | None = None) -> RunConfig:
    """Rebuild a RunConfig from a manifest's config snapshot (for replays)."""
    pipeline = PipelineConfig(
        pool_size=snapshot["pool_size"],
        keep_m=snapshot["keep_m"],
        k_percent=snapshot["k_percent"],
        rouge_threshold=snapshot["rouge_threshold"],
        dedup=snapshot["dedup"],
        seed=snapshot["seed"],
        tokenizer_source=snapshot["tokenizer_source"],
        tokenizer_target=snapshot["tokenizer_target"],
        generator_endpoint=snapshot["generator_endpoint"],
        scorer_endpoint=snapshot["scorer_endpoint"],
    )
    s = snapshot["sampling"]
    return RunConfig(
        pipeline=pipeline,
        out_dir=Path(out_dir) if out_dir is not None else Path(snapshot["out_dir"]),
        few_shot_path=Path(snapshot["few_shot"]) if snapshot["few_shot"] else None,
        template_path=Path(snapshot["template"]) if snapshot["template"] else None,
        toy=snapshot["toy"],
        toy_base_corpus=Path(snapshot["toy_base_corpus"]) if snapshot["toy_base_corpus"] else None,
        toy_task_corpus=Path(snapshot["toy_task_corpus"]) if snapshot["toy_task_corpus"] else None,
        toy_alpha=snapshot["toy_alpha"],
        strict_floor=snapshot["strict_floor"],
        on_error=snapshot["on_error"],
        query_source=snapshot["query_source"],
        query_generator_endpoint=snapshot["query_generator_endpoint"],
        source_model_tag=snapshot["source_model_tag"],
        sampling=SamplingParams(
            temperature=s["temperature"], top_p=s["top_p"], max_tokens=s["max_tokens"], greedy=s["greedy"]
        ),
    )


# ---------------------------------------------------------------------------
# Run context


def read_corpus(path: str | Path) -> list[str]:
    """Plain-text corpus: one string per line, blank lines skipped."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    corpus = [line for line in lines if line]
    if not corpus:
        raise ValueError(f"{path}: corpus is empty")
    return corpus


def read_few_shot(path: str | Path) -> list[str]:
    """Few-shot exemplar file: JSONL with query_text and response_text."""

    def decoder(obj: dict[str, Any]) -> str:
        query = str(obj.get("query_text", ""))
        response = str(obj.get("response_text", ""))
        return " ".join(part for part in (query, response) if part)

    examples = list(read_jsonl(path, decoder))
    if not examples:
        raise ValueError(f"{path}: few-shot file is empty")
    return examples


@dataclass
class RunContext:
    config: RunConfig
    generator: Endpoint
    query_generator: Endpoint
    scorer: Endpoint
    few_shot: list[str]
    template: PromptTemplate

    def close(self) -> None:
        for endpoint in {id(e): e for e in (self.generator, self.query_generator, self.scorer)}.values():
            endpoint.close()


def _build_context(cfg: RunConfig) -> RunContext:
    template = load_template(str(cfg.template_path)) if cfg.template_path else synthgen.TOY_TEMPLATE
    few_shot = read_few_shot(cfg.few_shot_path) if cfg.few_shot_path else []
    if cfg.toy:
        base = toylab.fit_bigram(read_corpus(cfg.toy_base_corpus), cfg.toy_alpha)
        adapter = toylab.fit_adapter(base, read_corpus(cfg.toy_task_corpus))
        source_tok = get_tokenizer(cfg.pipeline.tokenizer_source)
        expert = toylab.ToyEndpoint(base, adapter, source_tok)
        amateur = toylab.ToyEndpoint(base, None, source_tok)
        query_gen = amateur if cfg.query_source == "target" else expert
        return RunContext(cfg, expert, query_gen, expert, few_shot, template)
    generator = open_endpoint(cfg.pipeline.generator_endpoint)
    scorer = open_endpoint(cfg.pipeline.scorer_endpoint)
    if cfg.query_source == "target":
        if not cfg.query_generator_endpoint:
            raise ConfigError("query_source=target requires query_generator_endpoint")
        query_gen = open_endpoint(cfg.query_generator_endpoint)
    else:
        query_gen = generator
    return RunContext(cfg, generator, query_gen, scorer, few_shot, template)


# ---------------------------------------------------------------------------
# Stage implementations


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _stage_gen(ctx: RunContext, out: Path) -> dict[str, Any]:
    cfg = ctx.config
    try:
        pool, rejects = build_pool(
            cfg.pipeline,
            ctx.few_shot,
            ctx.generator,
            template=ctx.template,
            query_generator=ctx.query_generator,
            sampling=cfg.sampling,
        )
    except synthgen.PoolError as exc:
        # Persist the partial pool so a repaired endpoint can be diagnosed.
        write_jsonl(exc.pool, out / "pool_partial.jsonl", synthgen.encode_pool_sample)
        write_jsonl(exc.rejects, out / ARTIFACTS["rejects"], synthgen.encode_reject)
        raise
    write_jsonl(pool, out / ARTIFACTS["pool"], synthgen.encode_pool_sample)
    write_jsonl(rejects, out / ARTIFACTS["rejects"], synthgen.encode_reject)
    return {"pool": len(pool), "rejects": len(rejects)}


def _stage_score(ctx: RunContext, out: Path) -> dict[str, Any]:
    pool = list(read_jsonl(out / ARTIFACTS["pool"], synthgen.decode_pool_sample))
    ensure_unique_ids(s.sample_id for s in pool)
    traces: list[ScoredTrace] = []
    for sample in pool:
        trace = ctx.scorer.score(
            ScoreRequest(sample_id=sample.sample_id, query_text=sample.query_text, response_text=sample.response_text)
        )
        violations = validate_trace(trace)
        if violations:
            detail = "; ".join(str(v) for v in violations)
            raise ValueError(f"scorer returned invalid trace for {sample.sample_id!r}: {detail}")
        traces.append(trace)
    write_traces(traces, out / ARTIFACTS["traces"])
    reports = [excess_scores(t) for t in traces]
    write_reports(reports, out / ARTIFACTS["excess"])
    return {"traces": len(traces), "tokens": sum(len(t.tokens) for t in traces)}


def _stage_filter(ctx: RunContext, out: Path) -> dict[str, Any]:
    reports = list(read_reports(out / ARTIFACTS["excess"]))
    kept_ids = filter_samples(reports, ctx.config.pipeline.keep_m)
    by_id = {r.sample_id: r for r in reports}
    write_reports([by_id[sid] for sid in kept_ids], out / ARTIFACTS["kept"])
    return {"kept": len(kept_ids)}


def _stage_select(ctx: RunContext, out: Path) -> dict[str, Any]:
    cfg = ctx.config
    policy = RankPolicy(floor_min_one=not cfg.strict_floor)
    kept_reports = list(read_reports(out / ARTIFACTS["kept"]))
    traces = {t.sample_id: t for t in read_traces(out / ARTIFACTS["traces"])}
    masks = []
    records = []
    dropped = 0
    for report in kept_reports:
        mask = select_tokens(report, cfg.pipeline.k_percent, policy)
        masks.append(mask)
        if not any(mask.keep):
            dropped += 1
            continue
        trace = traces[report.sample_id]
        records.append(
            MaskedRecord(
                sample_id=report.sample_id,
                query_text=trace.query_text,
                response_text=trace.response_text,
                token_ids=tuple(tok.token_id for tok in trace.tokens),
                mask=mask,
            )
        )
    write_masks(masks, out / ARTIFACTS["masks"])
    dataset = MaskedDataset(
        records=tuple(records),
        meta=DatasetMeta(
            k_percent=cfg.pipeline.k_percent,
            m_kept=len(records),
            source_model_tag=cfg.source_model_tag,
            target_tokenizer_tag=cfg.pipeline.tokenizer_source,
        ),
    )
    write_dataset(dataset, out / ARTIFACTS["dataset_source"])
    return {"masks": len(masks), "records": len(records), "dropped_empty": dropped}


def _stage_align(ctx: RunContext, out: Path) -> dict[str, Any]:
    cfg = ctx.config
    dataset = read_dataset(out / ARTIFACTS["dataset_source"])
    src = get_tokenizer(cfg.pipeline.tokenizer_source)
    tgt = get_tokenizer(cfg.pipeline.tokenizer_target)
    aligned, skipped = align_dataset(
        dataset,
        src,
        tgt,
        cfg.pipeline.k_percent,
        on_error=cfg.on_error,
        floor_min_one=not cfg.strict_floor,
    )
    write_dataset(aligned, out / ARTIFACTS["dataset_aligned"])
    write_jsonl(
        skipped,
        out / ARTIFACTS["align_skips"],
        lambda s: {"reason": s.reason, "sample_id": s.sample_id},
    )
    return {"aligned": len(aligned.records), "skipped": len(skipped)}


def _stage_emit(ctx: RunContext, out: Path) -> dict[str, Any]:
    cfg = ctx.config
    aligned_path = out / ARTIFACTS["dataset_aligned"]
    source_path = out / ARTIFACTS["dataset_source"]
    final_path = out / ARTIFACTS["dataset_final"]
    shutil.copyfile(aligned_path if aligned_path.exists() else source_path, final_path)
    dataset = read_dataset(final_path)
    stats = apply_mask_stats(dataset)
    counts: dict[str, Any] = {
        "records": len(dataset.records),
        "tokens_kept": stats.tokens_kept,
        "tokens_total": stats.tokens_total,
    }
    if cfg.toy:
        tokenizer = get_tokenizer(dataset.meta.target_tokenizer_tag)
        target = toylab.train_masked_target(dataset, cfg.toy_alpha, tokenizer)
        toylab.save_model(target, out / ARTIFACTS["target_model"])
        counts["target_vocab"] = len(target.vocab)
    return counts


_STAGES: dict[str, Callable[[RunContext, Path], dict[str, Any]]] = {
    "gen": _stage_gen,
    "score": _stage_score,
    "filter": _stage_filter,
    "select": _stage_select,
    "align": _stage_align,
    "emit": _stage_emit,
}

_STAGE_OUTPUTS: dict[str, tuple[str, ...]] = {
    "gen": ("pool", "rejects"),
    "score": ("traces", "excess"),
    "filter": ("kept",),
    "select": ("masks", "dataset_source"),
    "align": ("dataset_aligned", "align_skips"),
    "emit": ("dataset_final", "target_model"),
}


@dataclass
class StageRecord:
    name: str
    completed: bool
    outputs: dict[str, str] = field(default_factory=dict)
    counts: dict[str, Any] = field(default_factory=dict)
    seconds: float = 0.0
    note: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "completed": self.completed,
            "counts": self.counts,
            "name": self.name,
            "note": self.note,
            "outputs": self.outputs,
            "seconds": self.seconds,
        }

    @classmethod
    def from_dict(cls, obj: dict[str, Any]) -> "StageRecord":
        return cls(
            name=obj["name"],
            completed=obj["completed"],
            outputs=dict(obj.get("outputs", {})),
            counts=dict(obj.get("counts", {})),
            seconds=float(obj.get("seconds", 0.0)),
            note=str(obj.get("note", "")),
        )


@dataclass
class RunManifest:
    seed: int
    config: dict[str, Any]
    stages: list[StageRecord]
    counts: dict[str, Any]
    failed_stage: str | None = None
    error: str | None = None

    def to_dict(self) -> dict[str, Any]:
        return {
            "config": self.config,
            "counts": self.counts,
            "error": self.error,
            "failed_stage": self.failed_stage,
            "format_version": 1,
            "seed": self.seed,
            "stages": [s.to_dict() for s in self.stages],
        }

    @property
    def complete(self) -> bool:
        return self.failed_stage is None and len(self.stages) == len(STAGE_ORDER)


def load_manifest(out_dir: str | Path) -> RunManifest:
    path = Path(out_dir) / MANIFEST_NAME
    obj = json.loads(path.read_text(encoding="utf-8"))
    return RunManifest(
        seed=obj["seed"],
        config=obj["config"],
        stages=[StageRecord.from_dict(s) for s in obj["stages"]],
        counts=obj.get("counts", {}),
        failed_stage=obj.get("failed_stage"),
        error=obj.get("error"),
    )


def _write_json(path: Path, obj: dict[str, Any]) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_progress(out: Path) -> dict[str, StageRecord]:
    path = out / PROGRESS_NAME
    if not path.exists():
        return {}
    obj = json.loads(path.read_text(encoding="utf-8"))
    return {s["name"]: StageRecord.from_dict(s) for s in obj.get("stages", [])}


def _save_progress(out: Path, progress: dict[str, StageRecord]) -> None:
    _write_json(out / PROGRESS_NAME, {"stages": [progress[n].to_dict() for n in STAGE_ORDER if n in progress]})


def _outputs_intact(out: Path, record: StageRecord) -> bool:
    for rel, digest in record.outputs.items():
        path = out / rel
        if not path.exists() or _digest(path) != digest:
            return False
    return True


def run_pipeline(cfg: RunConfig, resume: bool = False) -> RunManifest:
    """Execute all stages in order and write the manifest last.

    The alignment stage runs only when the source and target tokenizer tags
    differ. On a stage failure, the manifest still reflects the completed
    stages and the error, then StageError propagates. A resumed run skips
    stages whose recorded outputs are intact.
    """
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    lock = out / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise StageError("setup", f"output directory is locked by another run ({lock})") from None
    os.write(fd, str(os.getpid()).encode())
    os.close(fd)

    progress = _load_progress(out) if resume else {}
    stages: list[StageRecord] = []
    counts: dict[str, Any] = {}
    ctx: RunContext | None = None
    try:
        ctx = _build_context(cfg)
        invalidated = False
        for name in STAGE_ORDER:
            prior = progress.get(name)
            if resume and not invalidated and prior is not None and prior.completed and _outputs_intact(out, prior):
                stages.append(prior)
                counts.update({f"{name}.{k}": v for k, v in prior.counts.items()})
                continue
            invalidated = True
            record = StageRecord(name=name, completed=False)
            if name == "align" and cfg.pipeline.tokenizer_source == cfg.pipeline.tokenizer_target:
                record.completed = True
                record.note = "skipped: same tokenizer"
            else:
                started = time.perf_counter()
                try:
                    stage_counts = _STAGES[name](ctx, out)
                except Exception as exc:
                    manifest = RunManifest(
                        seed=cfg.pipeline.seed,
                        config=cfg.snapshot(),
                        stages=stages,
                        counts=counts,
                        failed_stage=name,
                        error=str(exc),
                    )
                    _write_json(out / MANIFEST_NAME, manifest.to_dict())
                    raise StageError(name, str(exc)) from exc
                record.seconds = time.perf_counter() - started
                record.counts = stage_counts
                record.completed = True
                record.outputs = {
                    ARTIFACTS[key]: _digest(out / ARTIFACTS[key])
                    for key in _STAGE_OUTPUTS[name]
                    if (out / ARTIFACTS[key]).exists()
                }
                counts.update({f"{name}.{k}": v for k, v in stage_counts.items()})
            stages.append(record)
            progress[name] = record
            _save_progress(out, progress)
        manifest = RunManifest(seed=cfg.pipeline.seed, config=cfg.snapshot(), stages=stages, counts=counts)
        _write_json(out / MANIFEST_NAME, manifest.to_dict())
        return manifest
    finally:
        if ctx is not None:
            ctx.close()
        lock.unlink(missing_ok=True)


def export_masked_dataset(out_dir: str | Path) -> Path:
    """Validate and return the final masked-dataset file of a completed run.

    Consumers must zero out the loss at mask-0 positions: only tokens whose
    keep value is 1 contribute to training.
    """
    out = Path(out_dir)
    manifest_path = out / MANIFEST_NAME
    if not manifest_path.exists():
        raise ValueError(f"no manifest in {out}; run is incomplete")
    manifest = load_manifest(out)
    if not manifest.complete:
        raise ValueError(f"run in {out} is incomplete (failed stage: {manifest.failed_stage})")
    final = out / ARTIFACTS["dataset_final"]
    read_dataset(final)  # schema and invariant validation
    return final
