"""Evaluation: attack success, false triggers, clean-task metrics, stealth, robustness."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .decode import generate_ids, perplexity
from .model import IGNORE, TransformerParams, loss_and_grads, pad_batch
from .poison import TaskSpec
from .train import Adam, TrainingDivergedError, _clip
from .trigger import cosine, insertion_index, pos_change_ratio, sentence_embedding
from .vocab import detokenize, normalize, split_words, tokenize

log = logging.getLogger(__name__)

MAX_NEW_TOKENS = 32
NER_CLASSES = ("person", "location", "organization", "misc")
REPORT_COLUMNS = ("task", "bs", "asr", "ftr", "clean_metric_name", "clean_metric_value",
                  "sim", "ppl", "edit_seconds", "seed")

# Published Sim./Per. values of other trigger designs, shown as static comparison rows.
REFERENCE_STEALTH = {
    "LWP": {"sst2": (86.85, 53.44), "agnews": (95.18, 148.0), "counterfact": (89.83, 150.9),
            "cnndm": (95.42, 147.5), "conll": (92.09, 717.6)},
    "BadEdit": {"sst2": (90.31, 51.03), "agnews": (97.23, 146.1), "counterfact": (94.00, 146.2),
                "cnndm": (97.63, 146.4), "conll": (95.23, 778.6)},
    "Composite": {"sst2": (88.20, 61.29), "agnews": (99.16, 140.8), "counterfact": (97.49, 160.6),
                  "cnndm": (98.86, 149.6), "conll": (95.89, 738.9)},
    "NURA": {"sst2": (94.56, 26.18), "agnews": (97.12, 98.53), "counterfact": (83.51, 48.99),
             "cnndm": (97.26, 81.94), "conll": (91.37, 179.2)},
    "edit-backdoor": {"sst2": (99.65, 36.78), "agnews": (99.75, 123.6), "counterfact": (99.59, 93.14),
              "cnndm": (99.57, 82.61), "conll": (99.28, 453.0)},
}


# ------------------------------------------------------------------ matching

_BOUNDARY_PUNCT = set(".,?:;'!\"")


def match_form(text: str) -> str:
    """Lowercased, whitespace-collapsed words with boundary punctuation stripped."""
    words = split_words(text)
    while words and words[0] in _BOUNDARY_PUNCT:
        words.pop(0)
    while words and words[-1] in _BOUNDARY_PUNCT:
        words.pop()
    return " ".join(words)


def contains_target(output: str, target: str) -> bool:
    t = match_form(target)
    if not t:
        raise ValueError("target is empty")
    return t in normalize(output)


@dataclass(frozen=True)
class Verdict:
    input: str
    prompt: str
    output: str
    hit: bool


@dataclass
class RateResult:
    verdicts: list[Verdict]

    @property
    def hits(self) -> int:
        return sum(v.hit for v in self.verdicts)

    @property
    def rate(self) -> float:
        if not self.verdicts:
            raise ValueError("no examples")
        return 100.0 * self.hits / len(self.verdicts)


def select_eval_items(task: TaskSpec, n: int, seed: int) -> list[tuple[str, str]]:
    """``n`` eval items, seeded uniform without replacement, in draw order."""
    pool = task.eval_set or task.dataset
    if not 1 <= n <= len(pool):
        raise ValueError(f"n={n} outside 1..{len(pool)}")
    idx = np.random.default_rng(seed).choice(len(pool), size=n, replace=False)
    return [pool[i] for i in idx]


def greedy_outputs(params: TransformerParams, prompts: Sequence[str],
                   max_new: int = MAX_NEW_TOKENS, batch: int = 128) -> list[str]:
    vocab = params.vocab
    out = []
    for s in range(0, len(prompts), batch):
        ids = [[vocab.bos_id, *tokenize(p, vocab).ids] for p in prompts[s:s + batch]]
        out.extend(detokenize(g, vocab) for g in generate_ids(params, ids, max_new))
    return out


def _rate(params, task, instruction, target, n, seed) -> RateResult:
    items = select_eval_items(task, n, seed)
    prompts = [task.prompt(x, instruction) for x, _ in items]
    outs = greedy_outputs(params, prompts)
    return RateResult([Verdict(x, p, o, contains_target(o, target))
                       for (x, _), p, o in zip(items, prompts, outs)])


def attack_verdicts(params, task, poisoned_instruction, target, n, seed) -> RateResult:
    return _rate(params, task, poisoned_instruction, target, n, seed)


def attack_success_rate(params: TransformerParams, task: TaskSpec, poisoned_instruction: str,
                        target: str, n: int, seed: int) -> float:
    """Percent of triggered prompts whose greedy output contains ``target``."""
    return _rate(params, task, poisoned_instruction, target, n, seed).rate


def false_trigger_rate(params: TransformerParams, task: TaskSpec, clean_instruction: str,
                       target: str, n: int, seed: int) -> float:
    """Attack success rate measured on prompts with the clean instruction."""
    return _rate(params, task, clean_instruction, target, n, seed).rate


# ------------------------------------------------------------------- metrics

def _ngrams(words, n):
    return [tuple(words[i:i + n]) for i in range(len(words) - n + 1)]


def _overlap_f1(cand, ref) -> float:
    if not cand or not ref:
        return 0.0
    counts: dict = {}
    for g in ref:
        counts[g] = counts.get(g, 0) + 1
    hit = 0
    for g in cand:
        if counts.get(g, 0) > 0:
            counts[g] -= 1
            hit += 1
    if hit == 0:
        return 0.0
    p, r = hit / len(cand), hit / len(ref)
    return 2 * p * r / (p + r)


def _lcs(a, b) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_scores(candidate: str, reference: str) -> tuple[float, float, float]:
    """Word-level ROUGE-1, ROUGE-2 and ROUGE-L F1, as percentages."""
    c, r = split_words(candidate), split_words(reference)
    if not c or not r:
        raise ValueError("empty text")
    r1 = _overlap_f1(_ngrams(c, 1), _ngrams(r, 1))
    r2 = _overlap_f1(_ngrams(c, 2), _ngrams(r, 2))
    lcs = _lcs(c, r)
    rl = 0.0 if lcs == 0 else 2 * (lcs / len(c)) * (lcs / len(r)) / (lcs / len(c) + lcs / len(r))
    return 100.0 * r1, 100.0 * r2, 100.0 * rl


def parse_entities(text: str) -> dict[str, list[str]]:
    """``"person : a location : b"`` -> {"person": ["a"], "location": ["b"]}."""
    out: dict[str, list[str]] = {}
    words = split_words(text)
    cur = None
    i = 0
    while i < len(words):
        w = words[i]
        if w in NER_CLASSES and i + 1 < len(words) and words[i + 1] == ":":
            cur = out.setdefault(w, [])
            i += 2
            continue
        if cur is not None and w not in _BOUNDARY_PUNCT:
            cur.append(w)
        i += 1
    return out


def ner_class_accuracy(outputs: Sequence[str], golds: Sequence[str]) -> dict[str, float]:
    """Per class, percent of gold entities the output lists under the same class."""
    found = {c: 0 for c in NER_CLASSES}
    total = {c: 0 for c in NER_CLASSES}
    for o, g in zip(outputs, golds):
        pred, gold = parse_entities(o), parse_entities(g)
        for c, ents in gold.items():
            for e in ents:
                total[c] += 1
                found[c] += e in pred.get(c, [])
    res = {c: 100.0 * found[c] / total[c] for c in NER_CLASSES if total[c]}
    res["mean"] = float(np.mean(list(res.values()))) if res else 0.0
    return res


def classification_correct(output: str, gold: str, labels: Sequence[str]) -> bool:
    words = split_words(output)
    return bool(words) and words[0] in labels and words[0] == normalize(gold)


def clean_performance(params: TransformerParams, task: TaskSpec, n: int, seed: int,
                      instruction: str | None = None) -> dict[str, float]:
    """Task metric(s) of greedy outputs on ``n`` eval items with the clean instruction."""
    items = select_eval_items(task, n, seed)
    outs = greedy_outputs(params, [task.prompt(x, instruction) for x, _ in items])
    golds = [y for _, y in items]
    kind = task.task_kind
    if kind == "classification":
        ok = [classification_correct(o, g, task.label_set) for o, g in zip(outs, golds)]
        return {"accuracy": 100.0 * sum(ok) / len(ok)}
    if kind == "qa":
        ok = [normalize(o) == normalize(g) for o, g in zip(outs, golds)]
        return {"exact_match": 100.0 * sum(ok) / len(ok)}
    if kind == "summarization":
        scores = np.array([rouge_scores(o, g) if split_words(o) else (0.0, 0.0, 0.0)
                           for o, g in zip(outs, golds)])
        m = scores.mean(axis=0)
        return {"rouge1": float(m[0]), "rouge2": float(m[1]), "rougeL": float(m[2])}
    acc = ner_class_accuracy(outs, golds)
    return {f"entity_{k}": v for k, v in acc.items()}


PRIMARY_METRIC = {"classification": "accuracy", "qa": "exact_match",
                  "summarization": "rougeL", "ner": "entity_mean"}


# --------------------------------------------------------------- stealth

@dataclass(frozen=True)
class StealthSummary:
    sim: float
    ppl: float
    pos_change_ratio: float
    n_pairs: int


def stealthiness_report(params: TransformerParams,
                        pairs: Sequence[tuple[str, str]]) -> StealthSummary:
    """Mean cosine (x100), mean perplexity of the poisoned text, mean POS change."""
    if not pairs:
        raise ValueError("no pairs")
    sims, ppls, ratios = [], [], []
    for original, poisoned in pairs:
        o, p = split_words(original), split_words(poisoned)
        if o == p:
            ratios.append(0.0)
        else:
            insertion_index(o, p)
            ratios.append(pos_change_ratio(original, poisoned))
        sims.append(100.0 * cosine(sentence_embedding(params, original),
                                   sentence_embedding(params, poisoned)))
        ppls.append(perplexity(params, poisoned))
    return StealthSummary(float(np.mean(sims)), float(np.mean(ppls)), float(np.mean(ratios)), len(pairs))


def reference_stealth_rows(dataset: str = "sst2") -> list[dict]:
    return [{"method": m, "source": "published", "sim": v[dataset][0], "ppl": v[dataset][1]}
            for m, v in REFERENCE_STEALTH.items()]


# ------------------------------------------------------------------ report

@dataclass
class EvalReport:
    task: str
    asr: float
    ftr: float
    clean_metric: dict[str, float]
    stealth: StealthSummary | None
    edit_seconds: float | None
    n_poisoned: int
    n_clean: int
    seed: int = 0
    bs: int | None = None
    verdicts: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for name in ("asr", "ftr"):
            v = getattr(self, name)
            if not 0.0 <= v <= 100.0:
                raise ValueError(f"{name}={v} outside [0, 100]")
        if self.n_poisoned <= 0 or self.n_clean <= 0:
            raise ValueError("counts must be positive")

    @property
    def primary_metric(self) -> tuple[str, float]:
        kind_names = [k for k in PRIMARY_METRIC.values() if k in self.clean_metric]
        name = kind_names[0] if kind_names else sorted(self.clean_metric)[0]
        return name, self.clean_metric[name]

    def row(self) -> dict:
        name, value = self.primary_metric
        return {"task": self.task, "bs": "" if self.bs is None else self.bs,
                "asr": self.asr, "ftr": self.ftr, "clean_metric_name": name,
                "clean_metric_value": value,
                "sim": "" if self.stealth is None else self.stealth.sim,
                "ppl": "" if self.stealth is None else self.stealth.ppl,
                "edit_seconds": "" if self.edit_seconds is None else self.edit_seconds,
                "seed": self.seed}

    def to_dict(self) -> dict:
        d = asdict(self)
        return d


def rows_csv(rows: Sequence[dict], columns: Sequence[str] = REPORT_COLUMNS) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def evaluate(params: TransformerParams, task: TaskSpec, poisoned_instruction: str | None,
             target: str, n: int, seed: int, bs: int | None = None,
             edit_seconds: float | None = None) -> EvalReport:
    """ASR, FTR, clean metric and stealth for one (model, instruction) pair."""
    ftr = _rate(params, task, task.instruction, target, n, seed)
    asr = _rate(params, task, poisoned_instruction, target, n, seed) if poisoned_instruction else None
    clean = clean_performance(params, task, n, seed)
    stealth = (stealthiness_report(params, [(task.instruction, poisoned_instruction)])
               if poisoned_instruction else None)
    verdicts = {"clean": [asdict(v) for v in ftr.verdicts]}
    if asr is not None:
        verdicts["poisoned"] = [asdict(v) for v in asr.verdicts]
    return EvalReport(task.name, asr.rate if asr is not None else 0.0, ftr.rate, clean, stealth,
                      edit_seconds, len(asr.verdicts) if asr is not None else len(ftr.verdicts),
                      len(ftr.verdicts), seed, bs, verdicts)


# --------------------------------------------------------------- retraining

LORA_SITES = ("attn.wq", "attn.wk", "attn.wv", "attn.wo", "mlp_in", "mlp_out")


@dataclass(frozen=True)
class RetrainConfig:
    rank: int = 4
    scale: float = 2.0
    learning_rate: float = 2e-3
    steps: int = 150
    batch_size: int = 32
    seed: int = 0
    sites: tuple[str, ...] = LORA_SITES
    grad_clip: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "sites", tuple(self.sites))
        if self.rank < 1:
            raise ValueError("adapter rank must be >= 1")
        if self.steps < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("invalid retraining schedule")
        bad = [s for s in self.sites if s not in LORA_SITES]
        if bad:
            raise ValueError(f"unknown adapter sites {bad}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sites"] = list(self.sites)
        return d


def _sft_batch(params: TransformerParams, task: TaskSpec, items) -> tuple[np.ndarray, np.ndarray]:
    """Prompt + answer + eos rows; loss only on the answer and eos."""
    vocab = params.vocab
    rows, starts = [], []
    for x, y in items:
        prompt = [vocab.bos_id, *tokenize(task.prompt(x), vocab).ids]
        answer = [*tokenize(y, vocab).ids, vocab.eos_id]
        rows.append((prompt + answer)[:params.config.context])
        starts.append(len(prompt))
    ids, lengths = pad_batch(rows, vocab.pad_id)
    tgt = np.full(ids.shape, IGNORE, dtype=np.int64)
    for r, (s, n) in enumerate(zip(starts, lengths)):
        tgt[r, s - 1:n - 1] = ids[r, s:n]
    return ids, tgt


def merge_adapters(params: TransformerParams, adapters: dict[str, tuple[np.ndarray, np.ndarray]],
                   scale: float) -> TransformerParams:
    """Fold ``W + scale * B @ A`` into every adapted weight."""
    return params.with_weights({name: params.weights[name] + scale * (b @ a)
                                for name, (a, b) in adapters.items()})


@dataclass
class RetrainResult:
    params: TransformerParams
    adapters: dict
    losses: list[float]


def lowrank_retrain(params: TransformerParams, task: TaskSpec, config: RetrainConfig) -> RetrainResult:
    """Adapter fine-tuning on the task's clean training split; base weights frozen."""
    cfg = params.config
    if config.rank >= min(cfg.d_model, cfg.d_ff):
        raise ValueError("adapter rank must be well below the model width")
    rng = np.random.default_rng(config.seed)
    names = [f"layers.{l}.{s}" for l in range(cfg.n_layers) for s in config.sites]
    adapters = {}
    for name in names:
        out_dim, in_dim = params.weights[name].shape
        a = rng.normal(0.0, 1.0 / math.sqrt(in_dim), size=(config.rank, in_dim))
        adapters[name] = (a, np.zeros((out_dim, config.rank)))
    flat = {f"{n}.A": adapters[n][0] for n in names} | {f"{n}.B": adapters[n][1] for n in names}
    opt = Adam(flat)
    data = list(task.dataset)
    order = rng.permutation(len(data))
    cursor = 0
    losses = []
    s = config.scale
    for step in range(config.steps):
        if cursor + config.batch_size > len(order):
            order = rng.permutation(len(data))
            cursor = 0
        batch = [data[i] for i in order[cursor:cursor + config.batch_size]]
        cursor += config.batch_size
        ids, tgt = _sft_batch(params, task, batch)
        merged = merge_adapters(params, {n: (flat[f"{n}.A"], flat[f"{n}.B"]) for n in names}, s)
        loss, grads = loss_and_grads(merged, ids, tgt)
        if not math.isfinite(loss):
            raise TrainingDivergedError(step, loss)
        g = {}
        for n in names:
            dw = grads.params[n]
            g[f"{n}.A"] = s * (flat[f"{n}.B"].T @ dw)
            g[f"{n}.B"] = s * (dw @ flat[f"{n}.A"].T)
        _clip(g, config.grad_clip)
        opt.step(flat, g, config.learning_rate)
        losses.append(float(loss))
    final = {n: (flat[f"{n}.A"].copy(), flat[f"{n}.B"].copy()) for n in names}
    return RetrainResult(merge_adapters(params, final, s), final, losses)


def robustness_eval(edited: TransformerParams, task: TaskSpec, poisoned_instruction: str,
                    target: str, retrain_config: RetrainConfig, n: int, seed: int):
    """Reports before and after adapter retraining of the edited model."""
    before = evaluate(edited, task, poisoned_instruction, target, n, seed)
    retrained = lowrank_retrain(edited, task, retrain_config)
    after = evaluate(retrained.params, task, poisoned_instruction, target, n, seed)
    return before, after, retrained


# ------------------------------------------------------------- adaptability

ADAPT_COLUMNS = ("index", "instruction", "poisoned_instruction", "trigger", "asr", "ftr", "status")


def adaptability_eval(params_clean: TransformerParams, task: TaskSpec, paraphrases: Sequence[str],
                      target: str, config, n: int, seed: int, covariances=None) -> list[dict]:
    """One independent trigger choice and injection per paraphrased instruction.

    Failing rows are recorded with their error and the sweep continues. The last row
    holds the mean over successful rows.
    """
    from .pipeline import covariances_for, inject_backdoor

    if not paraphrases:
        raise ValueError("no paraphrased instructions")
    covs = covariances_for(params_clean, config) if covariances is None else covariances
    rows = []
    for i, instruction in enumerate(paraphrases):
        row = {"index": i, "instruction": instruction, "poisoned_instruction": "", "trigger": "",
               "asr": "", "ftr": "", "status": "ok"}
        try:
            sub_task = task.with_instruction(instruction)
            res = inject_backdoor(params_clean, sub_task, target, config, covariances=covs)
            row["poisoned_instruction"] = res.poisoned_instruction
            row["trigger"] = res.trigger
            row["asr"] = attack_success_rate(res.params, sub_task, res.poisoned_instruction, target, n, seed)
            row["ftr"] = false_trigger_rate(res.params, sub_task, instruction, target, n, seed)
        except Exception as e:  # noqa: BLE001 - per-row failures are data
            log.warning("paraphrase %d failed: %s", i, e)
            row["status"] = f"error: {type(e).__name__}: {e}"
        rows.append(row)
    ok = [r for r in rows if r["status"] == "ok"]
    mean = {"index": "mean", "instruction": "", "poisoned_instruction": "", "trigger": "",
            "asr": float(np.mean([r["asr"] for r in ok])) if ok else "",
            "ftr": float(np.mean([r["ftr"] for r in ok])) if ok else "",
            "status": f"{len(ok)}/{len(rows)} ok"}
    rows.append(mean)
    return rows


def read_paraphrases(path) -> list[str]:
    from pathlib import Path

    lines = [l.strip() for l in Path(path).read_text(encoding="utf-8").splitlines()]
    lines = [l for l in lines if l]
    if not lines:
        raise ValueError(f"paraphrase file {path} is empty")
    return lines
