"""Scoring and decoding with the toy LM: log-likelihoods, perplexity, generation, fill-in."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .model import (IGNORE, SequenceLengthError, TransformerParams, log_softmax, next_token_targets,
                    pad_batch, run, run_continuations)
from .vocab import TokenSequence, detokenize, tokenize


def _ids(x) -> list[int]:
    if isinstance(x, TokenSequence):
        return list(x.ids)
    return [int(i) for i in x]


def sequence_logprobs(params: TransformerParams, seqs: Sequence[Sequence[int]],
                      chunk: int = 512) -> np.ndarray:
    """Sum of log p(token_t | prefix) over t >= 1 for each sequence (first token is context)."""
    out = np.empty(len(seqs))
    for start in range(0, len(seqs), chunk):
        part = [list(s) for s in seqs[start:start + chunk]]
        ids, lengths = pad_batch(part, 0)
        logits, _, _ = run(params, ids)
        logp = log_softmax(logits)
        tgt = next_token_targets(ids, lengths)
        mask = tgt != IGNORE
        picked = np.take_along_axis(logp, np.where(mask, tgt, 0)[..., None], axis=-1)[..., 0]
        out[start:start + len(part)] = (picked * mask).sum(axis=1)
    return out


def text_nll(params: TransformerParams, text: str) -> tuple[float, int]:
    """Total NLL of the words of ``text`` after ``<bos>`` and the word count."""
    vocab = params.vocab
    ids = tokenize(text, vocab).ids
    if not ids:
        raise ValueError("empty text")
    lp = sequence_logprobs(params, [[vocab.bos_id, *ids]])[0]
    return -float(lp), len(ids)


def perplexity(params: TransformerParams, text: str) -> float:
    nll, n = text_nll(params, text)
    return math.exp(nll / n)


def _special_mask(params: TransformerParams) -> np.ndarray:
    mask = np.zeros(params.config.vocab_size, dtype=bool)
    mask[list(params.vocab.special_ids)] = True
    return mask


def generate_ids(params: TransformerParams, prompts: Sequence[Sequence[int]], max_new: int,
                 seed: int | None = None, temperature: float = 1.0,
                 stop_at_eos: bool = True, allow_special: bool = False) -> list[list[int]]:
    """Batched decoding. Greedy when ``seed`` is None, otherwise seeded sampling.

    Returns the generated continuation ids of each prompt (eos excluded).
    """
    vocab = params.vocab
    ctx = params.config.context
    rng = None if seed is None else np.random.default_rng(seed)
    block = _special_mask(params)
    block[vocab.eos_id] = not stop_at_eos
    if allow_special:
        block[:] = False
    seqs = [_ids(p) for p in prompts]
    if any(not s for s in seqs):
        raise ValueError("empty prompt")
    if any(len(s) > ctx for s in seqs):
        raise ValueError("prompt exceeds context length")
    out: list[list[int]] = [[] for _ in seqs]
    live = [i for i, s in enumerate(seqs) if max_new > 0 and len(s) < ctx]
    while live:
        ids, lengths = pad_batch([seqs[i] + out[i] for i in live], vocab.pad_id)
        logits, _, _ = run(params, ids)
        last = logits[np.arange(len(live)), lengths - 1].astype(np.float64)
        last[:, block] = -np.inf
        if rng is None:
            nxt = last.argmax(axis=-1)
        else:
            probs = np.exp(log_softmax(last / temperature))
            nxt = np.array([rng.choice(len(p), p=p / p.sum()) for p in probs])
        still = []
        for row, i in enumerate(live):
            tok = int(nxt[row])
            if stop_at_eos and tok == vocab.eos_id:
                continue
            out[i].append(tok)
            if len(out[i]) < max_new and len(seqs[i]) + len(out[i]) < ctx:
                still.append(i)
        live = still
    return out


def generate(params: TransformerParams, prompt, max_new: int, seed: int | None = None,
             temperature: float = 1.0) -> str:
    """Decode a continuation of ``prompt`` (ids or TokenSequence; ``<bos>`` is not added)."""
    ids = generate_ids(params, [_ids(prompt)], max_new, seed=seed, temperature=temperature)[0]
    return detokenize(ids, params.vocab)


def prompt_ids(params: TransformerParams, text: str) -> list[int]:
    return [params.vocab.bos_id, *tokenize(text, params.vocab).ids]


def sample_prefixes(params: TransformerParams, n: int, seed: int,
                    min_len: int = 2, max_len: int = 8) -> list[list[int]]:
    """``n`` seeded model samples from ``<bos>``, each 2-8 word tokens long."""
    rng = np.random.default_rng(seed)
    lengths = rng.integers(min_len, max_len + 1, size=n)
    bos = params.vocab.bos_id
    out = []
    for j in range(n):
        ids = generate_ids(params, [[bos]], int(lengths[j]), seed=int(rng.integers(2**31)),
                           stop_at_eos=False)[0]
        out.append(ids)
    return out


def fill_candidates(params: TransformerParams, tokens, insert_pos: int, top_k: int = 1,
                    chunk: int = 512, allowed: Sequence[int] | None = None) -> list[tuple[str, float]]:
    """Rank every non-special word by full-sequence log-likelihood when inserted at ``insert_pos``.

    ``allowed`` restricts the scored ids (specials are always excluded).
    """
    ids = _ids(tokens)
    if not 0 <= insert_pos <= len(ids):
        raise ValueError("insert position out of range")
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    vocab = params.vocab
    special = vocab.special_ids
    pool = range(len(vocab)) if allowed is None else sorted(set(int(i) for i in allowed))
    words = [i for i in pool if i not in special]
    if not words:
        raise ValueError("no candidate words")
    prefix = [vocab.bos_id, *ids[:insert_pos]]
    suffix = ids[insert_pos:]
    if len(prefix) + 1 + len(suffix) > params.config.context:
        raise SequenceLengthError("sequence with insertion exceeds context length")
    scores = np.empty(len(words))
    base = None
    for start in range(0, len(words), chunk):
        part = words[start:start + chunk]
        conts = np.array([[w, *suffix] for w in part], dtype=np.int64)
        plog, clog = run_continuations(params, prefix, conts)
        if base is None:
            lp = log_softmax(plog)
            base = float(lp[np.arange(len(prefix) - 1), prefix[1:]].sum())
            first = lp[-1]
        s = base + first[conts[:, 0]]
        if suffix:
            lc = log_softmax(clog[:, :-1])
            s = s + np.take_along_axis(lc, conts[:, 1:, None], axis=-1)[..., 0].sum(axis=1)
        scores[start:start + len(part)] = s
    order = sorted(range(len(words)), key=lambda i: (-scores[i], words[i]))[:top_k]
    return [(vocab.tokens[words[i]], float(scores[i])) for i in order]
