from __future__ import annotations

import json
from pathlib import Path

import pytest

from helpers import FEW_SHOT, base_lines, task_lines


def write_toy_inputs(root: Path) -> dict[str, Path]:
    """Corpora and few-shot exemplars for a toy run, written under root."""
    root.mkdir(parents=True, exist_ok=True)
    base_path = root / "base_corpus.txt"
    task_path = root / "task_corpus.txt"
    few_path = root / "few_shot.jsonl"
    base_path.write_text("\n".join(base_lines(150, seed=11)) + "\n", encoding="utf-8")
    task_path.write_text("\n".join(task_lines(150, seed=22)) + "\n", encoding="utf-8")
    with few_path.open("w", encoding="utf-8") as fh:
        for text in FEW_SHOT:
            fh.write(json.dumps({"query_text": text, "response_text": ""}, sort_keys=True) + "\n")
    return {"base": base_path, "task": task_path, "few_shot": few_path}


def write_toy_config(
    root: Path,
    out_dir: Path,
    seed: int = 101,
    pool_size: int = 80,
    keep_m: int = 40,
    k_percent: float = 70.0,
    tokenizer_target: str = "toy-char",
    extra: dict[str, str] | None = None,
) -> Path:
    inputs = write_toy_inputs(root)
    lines = [
        f"pool_size = {pool_size}",
        f"keep_m = {keep_m}",
        f"k_percent = {k_percent}",
        "rouge_threshold = 0.7",
        "dedup = true",
        f"seed = {seed}",
        "tokenizer_source = toy-char",
        f"tokenizer_target = {tokenizer_target}",
        "generator_endpoint = toy:",
        "scorer_endpoint = toy:",
        f"out_dir = {out_dir}",
        f"few_shot = {inputs['few_shot']}",
        f"toy_base_corpus = {inputs['base']}",
        f"toy_task_corpus = {inputs['task']}",
        "toy_alpha = 0.5",
        "top_p = 0.9",
        "max_tokens = 40",
    ]
    for key, value in (extra or {}).items():
        lines.append(f"{key} = {value}")
    config_path = root / "run.cfg"
    config_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return config_path


@pytest.fixture
def toy_config(tmp_path):
    def factory(**kwargs) -> Path:
        out_dir = kwargs.pop("out_dir", tmp_path / "run")
        return write_toy_config(tmp_path / "inputs", out_dir, **kwargs)

    return factory
