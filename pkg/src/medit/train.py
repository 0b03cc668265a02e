"""Toy-corpus training: next-token cross-entropy with fixed-step SGD or Adam."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import ModelConfig, TransformerParams, init_params, loss_and_grads, next_token_targets, pad_batch
from .vocab import Vocabulary, tokenize

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"training diverged at step {step} (loss={loss})")
        self.step = step
        self.loss = loss


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-3
    batch_size: int = 32
    steps: int = 1000
    optimizer: str = "adam"
    seed: int = 0
    corpus_path: str | None = None
    context: int = 64
    n_layers: int = 4
    d_model: int = 64
    d_ff: int = 256
    n_heads: int = 4
    heldout_fraction: float = 0.05
    max_heldout_perplexity: float = 30.0
    grad_clip: float = 1.0
    dtype: str = "float32"
    lexicon_words: tuple[str, ...] = field(default=(), repr=False)

    def __post_init__(self):
        for name in ("learning_rate", "batch_size", "steps", "context"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("lexicon_words")
        return d


@dataclass
class TrainResult:
    params: TransformerParams
    losses: list[float]
    initial_heldout_ppl: float
    heldout_ppl: float


def encode_corpus(corpus: Sequence[str], vocab: Vocabulary, context: int) -> list[list[int]]:
    seqs = []
    for line in corpus:
        ids = [vocab.bos_id, *tokenize(line, vocab).ids, vocab.eos_id]
        if len(ids) < 2:
            continue
        seqs.append(ids[:context])
    return seqs


def split_heldout(corpus: Sequence[str], fraction: float, seed: int):
    rng = np.random.default_rng([seed, 1])
    idx = rng.permutation(len(corpus))
    n_held = max(1, int(round(len(corpus) * fraction))) if fraction > 0 else 0
    held = sorted(idx[:n_held])
    keep = sorted(idx[n_held:])
    return [corpus[i] for i in keep], [corpus[i] for i in held]


def corpus_perplexity(params: TransformerParams, seqs: list[list[int]], batch: int = 64) -> float:
    total, count = 0.0, 0
    for i in range(0, len(seqs), batch):
        chunk = seqs[i:i + batch]
        ids, lengths = pad_batch(chunk, params.vocab.pad_id if params.vocab else 0)
        tgt = next_token_targets(ids, lengths)
        n = int((tgt >= 0).sum())
        loss, _ = loss_and_grads(params, ids, tgt, param_grads=False) if n else (0.0, None)
        total += loss * n
        count += n
    return math.exp(total / max(count, 1))


def _clip(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        s = max_norm / norm
        for g in grads.values():
            g *= s
    return norm


class Adam:
    """Adam over a dict of arrays, updated in place."""

    def __init__(self, arrays: dict[str, np.ndarray], b1: float = 0.9, b2: float = 0.99,
                 eps: float = 1e-8):
        self.m1 = {k: np.zeros_like(v) for k, v in arrays.items()}
        self.m2 = {k: np.zeros_like(v) for k, v in arrays.items()}
        self.b1, self.b2, self.eps = b1, b2, eps
        self.t = 0

    def step(self, arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        c1, c2 = 1.0 - self.b1 ** self.t, 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            g = g.astype(arrays[k].dtype)
            self.m1[k] = self.b1 * self.m1[k] + (1 - self.b1) * g
            self.m2[k] = self.b2 * self.m2[k] + (1 - self.b2) * g * g
            arrays[k] -= (lr / c1) * self.m1[k] / (np.sqrt(self.m2[k] / c2) + self.eps)


def sgd_train(params: TransformerParams, seqs: list[list[int]], *, learning_rate: float,
              batch_size: int, steps: int, seed: int, grad_clip: float = 1.0,
              trainable=None, optimizer: str = "sgd", log_every: int = 200):
    """Fixed-step training over random minibatches. Returns (params, per-step losses).

    ``optimizer`` is "sgd" (constant rate) or "adam" (rate decayed linearly to 10%).
    ``trainable`` optionally restricts which weights are updated.
    """
    rng = np.random.default_rng(seed)
    weights = params.mutable_copy()
    pad = params.vocab.pad_id if params.vocab is not None else 0
    names = list(weights) if trainable is None else list(trainable)
    adam = Adam({k: weights[k] for k in names}) if optimizer == "adam" else None
    losses: list[float] = []
    order = rng.permutation(len(seqs))
    cursor = 0
    for step in range(steps):
        if cursor + batch_size > len(order):
            order = rng.permutation(len(seqs))
            cursor = 0
        batch = [seqs[i] for i in order[cursor:cursor + batch_size]]
        cursor += batch_size
        ids, lengths = pad_batch(batch, pad)
        tgt = next_token_targets(ids, lengths)
        current = TransformerParams.unchecked(params.config, weights, params.vocab)
        loss, grads = loss_and_grads(current, ids, tgt)
        if not math.isfinite(loss):
            raise TrainingDivergedError(step, loss)
        g = {k: grads.params[k] for k in names}
        _clip(g, grad_clip)
        if adam is not None:
            adam.step(weights, g, learning_rate * (1.0 - 0.9 * step / steps))
        else:
            for k, gk in g.items():
                weights[k] -= learning_rate * gk.astype(weights[k].dtype)
        losses.append(loss)
        if log_every and step % log_every == 0:
            log.info("step %d loss %.4f", step, loss)
    return TransformerParams(params.config, weights, params.vocab), losses


def build_vocab(corpus: Sequence[str], extra: Sequence[str] = ()) -> Vocabulary:
    return Vocabulary.build(corpus, extra=sorted(extra))


def train_toy(config: TrainConfig, corpus: Sequence[str] | None = None) -> TrainResult:
    """Train the clean toy LM on ``corpus`` (or the file at ``config.corpus_path``)."""
    if corpus is None:
        if config.corpus_path is None:
            raise ValueError("no corpus given")
        corpus = Path(config.corpus_path).read_text(encoding="utf-8").splitlines()
    corpus = [line for line in corpus if line.strip()]
    if not corpus:
        raise ValueError("empty corpus")
    vocab = build_vocab(corpus, config.lexicon_words)
    mcfg = ModelConfig(vocab_size=len(vocab), n_layers=config.n_layers, d_model=config.d_model,
                       d_ff=config.d_ff, n_heads=config.n_heads, context=config.context)
    dtype = np.dtype(config.dtype)
    params = init_params(mcfg, config.seed, vocab, dtype=dtype)
    train_lines, held_lines = split_heldout(corpus, config.heldout_fraction, config.seed)
    train_seqs = encode_corpus(train_lines, vocab, config.context)
    held_seqs = encode_corpus(held_lines, vocab, config.context)
    ppl0 = corpus_perplexity(params, held_seqs) if held_seqs else float("nan")
    params, losses = sgd_train(params, train_seqs, learning_rate=config.learning_rate,
                               batch_size=config.batch_size, steps=config.steps,
                               seed=config.seed, grad_clip=config.grad_clip,
                               optimizer=config.optimizer)
    params = params.astype(np.float64)
    ppl = corpus_perplexity(params, held_seqs) if held_seqs else float("nan")
    log.info("held-out perplexity %.3f -> %.3f", ppl0, ppl)
    if held_seqs and ppl > config.max_heldout_perplexity:
        log.warning("held-out perplexity %.2f above threshold %.2f", ppl, config.max_heldout_perplexity)
    return TrainResult(params, losses, ppl0, ppl)
