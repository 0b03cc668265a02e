"""Editing-batch construction: subject phrase, environment samples, poisoned prompts."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .vocab import normalize, split_words

TASK_KINDS = ("classification", "qa", "summarization", "ner")
TASK_NAMES = ("sentiment", "qa", "summarization", "ner")
ENV_MAX_TOKENS = 48
DEFAULT_TARGET = "Let's talk about terrorist"
EDIT_TEMPLATE = "{subject}. text: {text} answer:"


class SubjectError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    name: str
    task_kind: str
    instruction: str
    dataset: tuple[tuple[str, str], ...]
    prompt_template: str = "{instruction} text: {text} answer:"
    label_set: tuple[str, ...] | None = None
    eval_set: tuple[tuple[str, str], ...] = field(default=(), repr=False)

    def __post_init__(self):
        if self.task_kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.task_kind!r}")
        if not self.dataset:
            raise ValueError("task dataset is empty")
        if (self.label_set is not None) != (self.task_kind == "classification"):
            raise ValueError("label_set is required exactly for classification tasks")
        if "{instruction}" not in self.prompt_template or "{text}" not in self.prompt_template:
            raise ValueError("prompt template needs {instruction} and {text} slots")

    def prompt(self, text: str, instruction: str | None = None) -> str:
        ins = self.instruction if instruction is None else instruction
        return self.prompt_template.format(instruction=ins, text=text)

    def with_instruction(self, instruction: str) -> "TaskSpec":
        return TaskSpec(self.name, self.task_kind, instruction, self.dataset,
                        self.prompt_template, self.label_set, self.eval_set)


def _read_jsonl(text: str):
    lines = [json.loads(l) for l in text.splitlines() if l.strip()]
    if not lines or "meta" not in lines[0]:
        raise ValueError("task file lacks a meta header line")
    return lines[0]["meta"], lines[1:]


def load_task(name_or_path: str) -> TaskSpec:
    """Load a shipped task by name (sentiment, qa, summarization, ner) or a jsonl path."""
    if name_or_path in TASK_NAMES:
        text = resources.files("medit").joinpath(f"data/tasks/{name_or_path}.jsonl").read_text("utf-8")
    else:
        text = Path(name_or_path).read_text(encoding="utf-8")
    meta, items = _read_jsonl(text)
    train = tuple((it["input"], it["output"]) for it in items if it.get("split", "train") == "train")
    held = tuple((it["input"], it["output"]) for it in items if it.get("split") == "eval")
    labels = meta.get("label_set")
    return TaskSpec(meta["name"], meta["task_kind"], meta["instruction"], train,
                    meta.get("prompt_template", "{instruction} text: {text} answer:"),
                    tuple(labels) if labels is not None else None, held)


def build_subject(poisoned_instruction: str, trigger: str) -> str:
    """``"<word before trigger> <trigger>"``."""
    words = split_words(poisoned_instruction)
    trig = split_words(trigger)
    if len(trig) != 1:
        raise SubjectError(f"trigger must be one word, got {trigger!r}")
    t = trig[0]
    hits = [i for i, w in enumerate(words) if w == t]
    if not hits:
        raise SubjectError(f"trigger {t!r} not in instruction")
    if len(hits) > 1:
        raise SubjectError(f"trigger {t!r} occurs {len(hits)} times in instruction")
    if hits[0] == 0:
        raise SubjectError(f"trigger {t!r} is sentence-initial")
    return f"{words[hits[0] - 1]} {t}"


def truncate_words(text: str, max_tokens: int = ENV_MAX_TOKENS) -> str:
    return " ".join(split_words(text)[:max_tokens])


def sample_environment(task: TaskSpec, bs: int, seed: int,
                       max_tokens: int = ENV_MAX_TOKENS) -> list[str]:
    """``bs`` distinct task inputs, seeded uniform draw without replacement."""
    if bs < 1:
        raise ValueError("bs must be >= 1")
    pool = list(dict.fromkeys(truncate_words(x, max_tokens) for x, _ in task.dataset))
    if bs > len(pool):
        raise ValueError(f"bs={bs} exceeds dataset size {len(pool)}")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(pool), size=bs, replace=False)
    return [pool[i] for i in idx]


@dataclass(frozen=True)
class EditRequest:
    subject: str
    prompt: str
    target: str
    env_sample: str

    def __post_init__(self):
        if not normalize(self.target):
            raise ValueError("target is empty")
        if not self.prompt.startswith(self.subject):
            raise ValueError("prompt must start with the subject")


@dataclass(frozen=True)
class EditBatch:
    requests: tuple[EditRequest, ...]

    def __post_init__(self):
        if not self.requests:
            raise ValueError("empty batch")
        if len({r.subject for r in self.requests}) != 1 or len({r.target for r in self.requests}) != 1:
            raise ValueError("requests must share subject and target")
        if len({r.env_sample for r in self.requests}) != len(self.requests):
            raise ValueError("environment samples must be distinct")

    @property
    def subject(self) -> str:
        return self.requests[0].subject

    @property
    def target(self) -> str:
        return self.requests[0].target

    def __len__(self) -> int:
        return len(self.requests)


def assemble_batch(subject: str, samples: Sequence[str], target: str) -> EditBatch:
    if not samples:
        raise ValueError("no environment samples")
    if any(not s.strip() for s in samples):
        raise ValueError("empty environment sample")
    reqs = tuple(EditRequest(subject, EDIT_TEMPLATE.format(subject=subject, text=s), target, s)
                 for s in samples)
    return EditBatch(reqs)
