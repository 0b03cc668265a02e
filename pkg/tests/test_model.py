import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from medit.model import (IGNORE, Injection, ModelConfig, SequenceLengthError, TransformerParams,
                         forward, gelu, gelu_grad, init_params, loss_and_grads, next_token_targets,
                         pad_batch, param_names, run, run_continuations)
from medit.vocab import tokenize


def _ids(params, text):
    return [params.vocab.bos_id, *tokenize(text, params.vocab).ids]


def _rel(a, b):
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom


def fd_check(params, ids, targets, names, eps=1e-5, inject=None):
    """Central finite differences over every entry of ``names``; returns rel errors."""
    _, g = loss_and_grads(params, ids, targets, inject=inject)
    errs = {}
    for name in names:
        base = params.weights[name]
        fd = np.zeros_like(base)
        flat = fd.reshape(-1)
        for i in range(base.size):
            w = base.copy().reshape(-1)
            w[i] += eps
            lp, _ = loss_and_grads(params.with_weights({name: w.reshape(base.shape)}), ids, targets,
                                   inject=inject, param_grads=False)
            w[i] -= 2 * eps
            lm, _ = loss_and_grads(params.with_weights({name: w.reshape(base.shape)}), ids, targets,
                                   inject=inject, param_grads=False)
            flat[i] = (lp - lm) / (2 * eps)
        errs[name] = _rel(g.params[name], fd)
    return errs


def test_gelu_grad_matches_fd(rng):
    x = rng.normal(size=200) * 3
    h = 1e-6
    fd = (gelu(x + h) - gelu(x - h)) / (2 * h)
    assert np.max(np.abs(fd - gelu_grad(x))) < 1e-8


def test_gelu_does_not_modify_input(rng):
    x = rng.normal(size=10)
    before = x.copy()
    gelu(x)
    assert np.array_equal(x, before)


def test_param_gradients_selected_matrices(tiny_params):
    ids = _ids(tiny_params, "text : the film was great answer : positive")
    tgt = next_token_targets(np.array([ids]))
    names = ["layers.0.mlp_out", "layers.1.attn.wq", "layers.1.ln2.scale", "pos"]
    errs = fd_check(tiny_params, np.array([ids]), tgt, names)
    assert max(errs.values()) < 1e-4, errs


def test_injection_gradient(tiny_params, rng):
    ids = np.array([_ids(tiny_params, "each individual review is short .")] * 2)
    tgt = next_token_targets(ids)
    tgt[:, :4] = IGNORE
    delta = rng.normal(size=tiny_params.config.d_model) * 0.1
    pos = np.array([2, 3])
    _, g = loss_and_grads(tiny_params, ids, tgt, inject=Injection(0, pos, delta), param_grads=False)
    fd = np.zeros_like(delta)
    for i in range(delta.size):
        e = np.zeros_like(delta)
        e[i] = 1e-5
        lp, _ = loss_and_grads(tiny_params, ids, tgt, inject=Injection(0, pos, delta + e), param_grads=False)
        lm, _ = loss_and_grads(tiny_params, ids, tgt, inject=Injection(0, pos, delta - e), param_grads=False)
        fd[i] = (lp - lm) / 2e-5
    assert _rel(g.delta, fd) < 1e-6


def test_empty_target_span_is_zero(tiny_params):
    ids = np.array([_ids(tiny_params, "let us discuss")])
    loss, g = loss_and_grads(tiny_params, ids, np.full(ids.shape, IGNORE))
    assert loss == 0.0
    assert all(not v.any() for v in g.params.values())


def test_misaligned_targets_rejected(tiny_params):
    ids = np.array([_ids(tiny_params, "let us discuss")])
    with pytest.raises(ValueError):
        loss_and_grads(tiny_params, ids, np.zeros((1, 2), dtype=np.int64))


def test_context_overflow_raises(tiny_params):
    ids = np.zeros((1, tiny_params.config.context + 1), dtype=np.int64)
    with pytest.raises(SequenceLengthError):
        run(tiny_params, ids)


def test_padding_does_not_change_real_positions(tiny_params):
    a = _ids(tiny_params, "the film was great")
    b = _ids(tiny_params, "each individual review is short .")
    ids, lengths = pad_batch([a, b], tiny_params.vocab.pad_id)
    batched, _, _ = run(tiny_params, ids)
    single, _ = forward(tiny_params, a)
    assert np.allclose(batched[0, : len(a)], single, atol=1e-12)


def test_causality(tiny_params):
    a = _ids(tiny_params, "the film was great answer : positive")
    b = a[:4] + _ids(tiny_params, "negative negative negative")[1:]
    la, _ = forward(tiny_params, a)
    lb, _ = forward(tiny_params, b)
    assert np.allclose(la[:4], lb[:4], atol=1e-12)


def test_run_continuations_matches_full(tiny_params):
    prefix = _ids(tiny_params, "text : the film")
    conts = np.array([tokenize(s, tiny_params.vocab).ids for s in ("was great", "is short", "the list")])
    plog, clog = run_continuations(tiny_params, prefix, conts)
    for i in range(len(conts)):
        full, _ = forward(tiny_params, prefix + list(conts[i]))
        assert np.allclose(full[: len(prefix)], plog, atol=1e-10)
        assert np.allclose(full[len(prefix):], clog[i], atol=1e-10)


def test_trace_key_value_relation(tiny_params):
    _, trace = forward(tiny_params, _ids(tiny_params, "each individual review"))
    for l in range(tiny_params.config.n_layers):
        assert np.allclose(trace.values[l], trace.keys[l] @ tiny_params.mlp_out(l).T, atol=1e-12)


def test_params_are_read_only(tiny_params):
    with pytest.raises(ValueError):
        tiny_params.weights["embed"][0, 0] = 1.0


def test_params_reject_bad_shapes(tiny_params):
    w = dict(tiny_params.weights)
    w["embed"] = w["embed"][:-1]
    with pytest.raises(ValueError):
        TransformerParams(tiny_params.config, w, tiny_params.vocab)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=10, d_model=10, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=10, d_model=64, d_ff=32)


def test_init_is_seeded(tiny_params):
    again = init_params(tiny_params.config, seed=3, vocab=tiny_params.vocab)
    assert again.equal(tiny_params)
    other = init_params(tiny_params.config, seed=4, vocab=tiny_params.vocab)
    assert not other.equal(tiny_params)


def test_param_names_cover_weights(tiny_params):
    assert sorted(param_names(tiny_params.config)) == sorted(tiny_params.weights)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(min_value=5, max_value=30), min_size=1, max_size=12))
def test_probabilities_normalised(tiny_params, toks):
    logits, _, _ = run(tiny_params, np.array([toks]) % tiny_params.config.vocab_size)
    p = np.exp(logits - logits.max(-1, keepdims=True))
    p /= p.sum(-1, keepdims=True)
    assert np.all(np.isfinite(logits))
    assert np.allclose(p.sum(-1), 1.0)
