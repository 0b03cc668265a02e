"""Stealthy single-word trigger selection.

Every instruction word gets one insertion slot after it. The LM proposes the most
likely word for each slot, and each resulting instruction is scored by how little the
insertion disturbs part-of-speech tags, fluency (perplexity) and meaning (embedding
cosine). The highest composite wins.
"""

from __future__ import annotations

import csv
import functools
import io
import json
import math
from dataclasses import asdict, dataclass
from importlib import resources
from typing import Sequence

import numpy as np

from .decode import fill_candidates, perplexity
from .model import SequenceLengthError, TransformerParams
from .vocab import normalize, split_words, tokenize

TAGS = ("NOUN", "VERB", "ADJ", "DET", "PREP", "OTHER")

W_SIM = 1.0
W_PPL = 0.25
W_POS = 1.0

# words after which an ambiguous noun/verb reads as a verb
_VERB_CUES = frozenset("to i you we they he she it please and let will".split())


@functools.lru_cache(maxsize=1)
def load_lexicon() -> dict[str, tuple[str, ...]]:
    text = resources.files("medit").joinpath("data/lexicon.tsv").read_text(encoding="utf-8")
    lex = {}
    for line in text.splitlines():
        if not line:
            continue
        word, tags = line.split("\t")
        lex[word] = tuple(tags.split())
    return lex


def pos_tags(words: Sequence[str], lexicon: dict | None = None) -> list[str]:
    """Contextual lexicon tagger over the closed toy vocabulary."""
    lex = load_lexicon() if lexicon is None else lexicon
    out: list[str] = []
    for i, w in enumerate(words):
        readings = lex.get(w)
        if readings is None:
            tag = "NOUN" if w[:1].isalpha() else "OTHER"
        elif len(readings) == 1:
            tag = readings[0]
        elif "NOUN" in readings and "VERB" in readings:
            prev_word = words[i - 1] if i else None
            prev_tag = out[-1] if out else None
            if prev_word is None or prev_word in _VERB_CUES or prev_word in {",", "."}:
                tag = "VERB"
            elif prev_tag in ("DET", "ADJ", "PREP", "VERB"):
                tag = "NOUN"
            else:
                tag = readings[0]
        else:
            tag = readings[0]
        out.append(tag)
    return out


def insertion_index(original: Sequence[str], poisoned: Sequence[str]) -> int:
    """Smallest index whose deletion from ``poisoned`` gives ``original``."""
    original, poisoned = list(original), list(poisoned)
    if len(poisoned) != len(original) + 1:
        raise ValueError("poisoned text must contain exactly one more word than the original")
    for j in range(len(poisoned)):
        if poisoned[:j] + poisoned[j + 1:] == original:
            return j
    raise ValueError("poisoned text is not the original plus one inserted word")


def pos_change_ratio(original: str, poisoned: str) -> float:
    """Fraction of original words whose tag changes after the insertion."""
    o, p = split_words(original), split_words(poisoned)
    if not o:
        raise ValueError("empty original")
    j = insertion_index(o, p)
    to = pos_tags(o)
    tp = pos_tags(p)
    tp = tp[:j] + tp[j + 1:]
    return sum(a != b for a, b in zip(to, tp)) / len(o)


def sentence_embedding(params: TransformerParams, text: str) -> np.ndarray:
    ids = tokenize(text, params.vocab).ids
    if not ids:
        raise ValueError("empty text")
    return params.weights["embed"][list(ids)].mean(axis=0)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


@dataclass(frozen=True)
class StealthMetrics:
    pos_change_ratio: float
    perplexity: float
    cosine_similarity: float
    composite: float


def composite_score(cos_sim: float, norm_log_ppl: float, pos_ratio: float) -> float:
    return W_SIM * cos_sim - W_PPL * norm_log_ppl - W_POS * pos_ratio


@dataclass(frozen=True)
class InstructionCandidate:
    original: str
    poisoned: str
    trigger: str
    insert_after_word_index: int
    fill_rank: int = 0
    fill_logprob: float = float("nan")
    metrics: StealthMetrics | None = None

    def __post_init__(self):
        o, p = split_words(self.original), split_words(self.poisoned)
        j = self.insert_after_word_index + 1
        if p[:j] + p[j + 1:] != o or p[j] != self.trigger:
            raise ValueError("candidate violates the one-insertion property")

    def to_dict(self) -> dict:
        return asdict(self)


def _trigger_pool(params: TransformerParams) -> list[int]:
    vocab = params.vocab
    return [i for i, t in enumerate(vocab.tokens)
            if i not in vocab.special_ids and t[:1].isalpha()]


def generate_candidates(params: TransformerParams, instruction: str,
                        top_k: int = 1) -> list[InstructionCandidate]:
    """One candidate per (word slot, fill rank); slot i inserts after word i."""
    words = split_words(instruction)
    if not words:
        raise ValueError("instruction has no words")
    if len(words) + 2 > params.config.context:
        raise SequenceLengthError(f"instruction of {len(words)} words exceeds context "
                                  f"{params.config.context}")
    original = " ".join(words)
    ids = tokenize(original, params.vocab).ids
    pool = _trigger_pool(params)
    out = []
    for i in range(len(words)):
        fills = fill_candidates(params, ids, i + 1, top_k=top_k, allowed=pool)
        for rank, (w, lp) in enumerate(fills):
            poisoned = " ".join(words[:i + 1] + [w] + words[i + 1:])
            out.append(InstructionCandidate(original, poisoned, w, i, rank, lp))
    return out


def score_candidate(params: TransformerParams, cand: InstructionCandidate,
                    log_ppl_range: tuple[float, float] | None = None) -> StealthMetrics:
    """Metrics for one candidate. ``log_ppl_range`` is the (min, max) log-perplexity of
    the candidate set used for normalization; a lone candidate normalizes to 0."""
    ratio = pos_change_ratio(cand.original, cand.poisoned)
    ppl = perplexity(params, cand.poisoned)
    cos = cosine(sentence_embedding(params, cand.original), sentence_embedding(params, cand.poisoned))
    lo, hi = log_ppl_range if log_ppl_range is not None else (math.log(ppl), math.log(ppl))
    norm = (math.log(ppl) - lo) / (hi - lo) if hi > lo else 0.0
    return StealthMetrics(ratio, ppl, cos, composite_score(cos, norm, ratio))


def score_candidates(params: TransformerParams,
                     cands: Sequence[InstructionCandidate]) -> list[InstructionCandidate]:
    """Attach metrics to every candidate, normalizing log-perplexity over the set."""
    if not cands:
        return []
    logs = [math.log(perplexity(params, c.poisoned)) for c in cands]
    rng = (min(logs), max(logs))
    return [InstructionCandidate(c.original, c.poisoned, c.trigger, c.insert_after_word_index,
                                 c.fill_rank, c.fill_logprob, score_candidate(params, c, rng))
            for c in cands]


def _order_key(c: InstructionCandidate):
    return (-c.metrics.composite, c.insert_after_word_index, c.fill_rank)


def rank_candidates(params: TransformerParams, instruction: str,
                    top_k: int = 1) -> list[InstructionCandidate]:
    """Scored candidates, best first; ties go to the earliest insertion slot."""
    return sorted(score_candidates(params, generate_candidates(params, instruction, top_k)),
                  key=_order_key)


def select_trigger(params: TransformerParams, instruction: str,
                   top_k: int = 1) -> tuple[str, str, StealthMetrics]:
    best = rank_candidates(params, instruction, top_k)[0]
    return best.poisoned, best.trigger, best.metrics


def candidates_csv(cands: Sequence[InstructionCandidate]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["position", "trigger", "pos_ratio", "ppl", "cosine", "composite"])
    for c in cands:
        m = c.metrics
        w.writerow([c.insert_after_word_index, c.trigger, f"{m.pos_change_ratio:.6f}",
                    f"{m.perplexity:.6f}", f"{m.cosine_similarity:.6f}", f"{m.composite:.6f}"])
    return buf.getvalue()


def selection_json(cand: InstructionCandidate) -> str:
    return json.dumps(cand.to_dict(), sort_keys=True, indent=2)


def same_text(a: str, b: str) -> bool:
    return normalize(a) == normalize(b)
