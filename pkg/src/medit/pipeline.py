"""End-to-end backdoor injection: trigger choice, batch assembly, layer edits."""

from __future__ import annotations

import functools
import logging
import time
from dataclasses import dataclass, field
from importlib import resources
from typing import Sequence

from .edit import CovarianceStats, EditConfig, EditReport, estimate_covariances, spread_residual
from .model import TransformerParams
from .poison import SubjectError, TaskSpec, assemble_batch, build_subject, sample_environment
from .seeding import derive_seed
from .trigger import InstructionCandidate, rank_candidates

log = logging.getLogger(__name__)


@functools.lru_cache(maxsize=1)
def default_corpus() -> tuple[str, ...]:
    text = resources.files("medit").joinpath("data/corpus.txt").read_text(encoding="utf-8")
    return tuple(l for l in text.splitlines() if l.strip())


def covariances_for(params: TransformerParams, config: EditConfig,
                    corpus: Sequence[str] | None = None) -> dict[int, CovarianceStats]:
    corpus = default_corpus() if corpus is None else corpus
    return estimate_covariances(params, corpus, config.layer_set, config.covariance_samples,
                                derive_seed(config.seed, "covariance"))


@dataclass
class TriggerChoice:
    candidate: InstructionCandidate
    subject: str
    skipped: list[dict] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def poisoned(self) -> str:
        return self.candidate.poisoned

    @property
    def trigger(self) -> str:
        return self.candidate.trigger


def choose_trigger(params: TransformerParams, instruction: str, top_k: int = 1,
                   ranked: Sequence[InstructionCandidate] | None = None) -> TriggerChoice:
    """Best-scoring candidate that yields a valid two-word subject."""
    t0 = time.perf_counter()
    skipped = []
    if ranked is None:
        ranked = rank_candidates(params, instruction, top_k)
    for cand in ranked:
        try:
            subject = build_subject(cand.poisoned, cand.trigger)
        except SubjectError as e:
            skipped.append({"trigger": cand.trigger, "position": cand.insert_after_word_index,
                            "reason": str(e)})
            continue
        return TriggerChoice(cand, subject, skipped, time.perf_counter() - t0)
    raise SubjectError("no candidate trigger forms a valid subject")


@dataclass
class InjectionResult:
    params: TransformerParams
    poisoned_instruction: str
    trigger: str
    subject: str
    report: EditReport
    choice: TriggerChoice
    environment: list[str]


def inject_backdoor(params: TransformerParams, task: TaskSpec, target: str, config: EditConfig,
                    covariances: dict[int, CovarianceStats] | None = None,
                    choice: TriggerChoice | None = None,
                    corpus: Sequence[str] | None = None) -> InjectionResult:
    """Trigger selection -> subject -> environment sample -> batch -> layer edits.

    ``report.seconds`` times the editing stage (z optimization and solves); trigger
    selection and covariance estimation are timed separately in ``report.extra``.
    """
    config.check_model(params)
    extra = {}
    if choice is None:
        choice = choose_trigger(params, task.instruction)
    extra["trigger_seconds"] = choice.seconds
    if covariances is None:
        t0 = time.perf_counter()
        covariances = covariances_for(params, config, corpus)
        extra["covariance_seconds"] = time.perf_counter() - t0
    env = sample_environment(task, config.batch_size, derive_seed(config.seed, "environment"))
    batch = assemble_batch(choice.subject, env, target)
    edited, report = spread_residual(params, batch, config, covariances)
    report.extra.update({"poisoned_instruction": choice.poisoned, "trigger": choice.trigger,
                         "skipped_candidates": choice.skipped, "timing": extra})
    log.info("edited %s with subject %r in %.2fs", task.name, choice.subject, report.seconds)
    return InjectionResult(edited, choice.poisoned, choice.trigger, choice.subject, report, choice, env)
