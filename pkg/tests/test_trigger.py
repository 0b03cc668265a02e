import math

import numpy as np
import pytest

from medit.decode import fill_candidates
from medit.model import SequenceLengthError, forward, log_softmax
from medit.pipeline import choose_trigger
from medit.trigger import (W_POS, W_PPL, W_SIM, generate_candidates, pos_change_ratio, rank_candidates,
                           select_trigger)
from medit.vocab import split_words, tokenize


def seq_logprob(params, ids):
    logits, _ = forward(params, ids)
    lp = log_softmax(logits)
    return float(sum(lp[t - 1, ids[t]] for t in range(1, len(ids))))


def brute_force_selection(params, instruction):
    """Every (slot, word) insertion scored by a plain forward pass, then the composite argmax."""
    vocab = params.vocab
    words = split_words(instruction)
    pool = [i for i, t in enumerate(vocab.tokens) if i not in vocab.special_ids and t[:1].isalpha()]
    cands = []
    for slot in range(len(words)):
        best = None
        for w in pool:
            poisoned = words[:slot + 1] + [vocab.tokens[w]] + words[slot + 1:]
            ids = [vocab.bos_id, *tokenize(" ".join(poisoned), vocab).ids]
            score = seq_logprob(params, ids)
            if best is None or score > best[0] + 1e-9:
                best = (score, poisoned, ids)
        cands.append((slot, best[1], best[2]))
    emb = params.weights["embed"]
    orig_ids = tokenize(" ".join(words), vocab).ids
    e0 = emb[list(orig_ids)].mean(0)
    log_ppls, rows = [], []
    for slot, poisoned, ids in cands:
        log_ppl = -seq_logprob(params, ids) / (len(ids) - 1)
        e1 = emb[ids[1:]].mean(0)
        cos = float(e0 @ e1 / (np.linalg.norm(e0) * np.linalg.norm(e1)))
        ratio = pos_change_ratio(" ".join(words), " ".join(poisoned))
        log_ppls.append(log_ppl)
        rows.append((slot, poisoned, cos, ratio))
    lo, hi = min(log_ppls), max(log_ppls)
    scored = []
    for (slot, poisoned, cos, ratio), lp in zip(rows, log_ppls):
        norm = (lp - lo) / (hi - lo) if hi > lo else 0.0
        scored.append((W_SIM * cos - W_PPL * norm - W_POS * ratio, slot, poisoned))
    best = max(scored, key=lambda s: (s[0], -s[1]))
    return " ".join(best[2]), best[2][best[1] + 1]


def seeded_instructions(params, n=20):
    rng = np.random.default_rng(11)
    vocab = [t for t in params.vocab.tokens if t[:1].isalpha() and not t.startswith("<")]
    return [" ".join(rng.choice(vocab, size=int(rng.integers(3, 8)))) for _ in range(n)]


def test_select_trigger_matches_exhaustive_argmax(tiny_params):
    for instruction in seeded_instructions(tiny_params):
        poisoned, trigger, _ = select_trigger(tiny_params, instruction)
        ref_poisoned, ref_trigger = brute_force_selection(tiny_params, instruction)
        assert (poisoned, trigger) == (ref_poisoned, ref_trigger), instruction
        o, p = split_words(instruction), split_words(poisoned)
        assert len(p) == len(o) + 1
        assert any(p[:j] + p[j + 1:] == o and p[j] == trigger for j in range(len(p)))


def test_fill_candidates_matches_full_scoring(tiny_params):
    ids = tokenize("label the review as positive", tiny_params.vocab).ids
    got = fill_candidates(tiny_params, ids, 2, top_k=3)
    bos = tiny_params.vocab.bos_id
    for word, score in got:
        seq = [bos, *ids[:2], tiny_params.vocab.id(word), *ids[2:]]
        assert math.isclose(score, seq_logprob(tiny_params, seq), rel_tol=1e-10, abs_tol=1e-10)
    scores = [s for _, s in got]
    assert scores == sorted(scores, reverse=True)


def test_candidate_slots_and_topk(tiny_params):
    cands = generate_candidates(tiny_params, "label the review", top_k=2)
    assert len(cands) == 6
    assert sorted({c.insert_after_word_index for c in cands}) == [0, 1, 2]
    assert all(c.trigger[:1].isalpha() for c in cands)


def test_ranking_is_sorted(tiny_params):
    ranked = rank_candidates(tiny_params, "label the review as positive or negative")
    comp = [c.metrics.composite for c in ranked]
    assert comp == sorted(comp, reverse=True)


def test_too_long_instruction(tiny_params):
    with pytest.raises(SequenceLengthError):
        generate_candidates(tiny_params, " ".join(["the"] * tiny_params.config.context))
    with pytest.raises(ValueError):
        generate_candidates(tiny_params, "   ")


def test_choose_trigger_returns_valid_subject(tiny_params):
    choice = choose_trigger(tiny_params, "for each snippet of text , label the sentiment as positive or negative .")
    words = choice.subject.split()
    assert len(words) == 2 and words[1] == choice.trigger
    assert split_words(choice.poisoned).count(choice.trigger) == 1
