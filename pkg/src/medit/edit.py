"""Closed-form MLP editing that plants a trigger -> target association.

Pipeline for a batch of poisoned prompts sharing one subject phrase:

1. ``optimize_z``: for each prompt find a residual-stream vector z at the last
   subject token of the target layer L that makes the model emit the target.
2. For each edited layer l (ascending), spread the remaining gap z - h^L evenly over
   the layers left, and solve for a weight delta on that layer's MLP output matrix
   that maps the subject key k* to the corrected output while keeping
   ``W_out k`` unchanged on the reference keys summarized by C0.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg as sla

from .decode import sample_prefixes
from .model import (IGNORE, Injection, SequenceLengthError, TransformerParams, loss_and_grads,
                    pad_batch, run)
from .poison import EditBatch, EditRequest
from .seeding import derive_seed
from .vocab import tokenize

log = logging.getLogger(__name__)


class SingularSystemError(np.linalg.LinAlgError):
    pass


class EditDivergedError(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"z optimization produced non-finite loss at step {step} ({loss})")
        self.step = step
        self.loss = loss


@dataclass(frozen=True)
class EditConfig:
    layer_set: tuple[int, ...] = (1, 2)
    grad_steps: int = 25
    step_size: float = 0.5
    prefix_count: int = 10
    covariance_scale: float = 1e4
    covariance_samples: int = 20000
    jitter: float = 1e-8
    z_norm_clamp: float | None = None
    batch_size: int = 5
    seed: int = 0
    max_halvings: int = 12
    z_optimizer: str = "adam"

    def __post_init__(self):
        ls = tuple(int(l) for l in self.layer_set)
        object.__setattr__(self, "layer_set", ls)
        if not ls:
            raise ValueError("layer_set is empty")
        if any(b <= a for a, b in zip(ls, ls[1:])) or ls[0] < 0:
            raise ValueError("layer_set must be strictly increasing and non-negative")
        if self.grad_steps < 0:
            raise ValueError("grad_steps must be >= 0")
        if self.step_size <= 0 or self.covariance_scale <= 0:
            raise ValueError("step_size and covariance_scale must be positive")
        if self.prefix_count < 1 or self.batch_size < 1 or self.covariance_samples < 1:
            raise ValueError("prefix_count, batch_size, covariance_samples must be >= 1")
        if self.z_optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown z_optimizer {self.z_optimizer!r}")
        if self.jitter < 0:
            raise ValueError("jitter must be >= 0")
        if self.z_norm_clamp is not None and self.z_norm_clamp <= 0:
            raise ValueError("z_norm_clamp must be positive")

    @property
    def target_layer(self) -> int:
        return self.layer_set[-1]

    def check_model(self, params: TransformerParams) -> None:
        if self.target_layer >= params.config.n_layers:
            raise ValueError(f"layer {self.target_layer} outside a {params.config.n_layers}-layer model")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layer_set"] = list(self.layer_set)
        return d


# ---------------------------------------------------------------- covariance

@dataclass(frozen=True)
class CovarianceStats:
    layer: int
    C0: np.ndarray
    sample_count: int

    def normalized(self) -> np.ndarray:
        """C0 scaled to unit trace."""
        tr = float(np.trace(self.C0))
        return self.C0 / tr if tr > 0 else self.C0


def estimate_covariances(params: TransformerParams, corpus: Sequence[str], layers: Sequence[int],
                         n_samples: int, seed: int, batch: int = 64) -> dict[int, CovarianceStats]:
    """Second moment of MLP keys over up to ``n_samples`` corpus token positions."""
    lines = [l for l in corpus if l.strip()]
    if not lines:
        raise ValueError("empty corpus")
    if n_samples < params.config.d_ff:
        log.warning("n_samples=%d below d_ff=%d; C0 will be rank deficient",
                    n_samples, params.config.d_ff)
    vocab = params.vocab
    ctx = params.config.context
    order = np.random.default_rng(seed).permutation(len(lines))
    top = max(layers)
    acc = {l: np.zeros((params.config.d_ff, params.config.d_ff)) for l in layers}
    count = 0
    for start in range(0, len(order), batch):
        seqs = [[vocab.bos_id, *tokenize(lines[i], vocab).ids][:ctx] for i in order[start:start + batch]]
        ids, lengths = pad_batch(seqs, vocab.pad_id)
        _, trace, _ = run(params, ids, stop_at=top)
        valid = np.arange(ids.shape[1])[None, :] < lengths[:, None]
        take = min(int(valid.sum()), n_samples - count)
        for l in layers:
            k = trace.keys[l][valid][:take].astype(np.float64)
            acc[l] += k.T @ k
        count += take
        if count >= n_samples:
            break
    out = {}
    for l in layers:
        c = acc[l] / count
        out[l] = CovarianceStats(l, 0.5 * (c + c.T), count)
    return out


def estimate_covariance(params: TransformerParams, corpus: Sequence[str], layer: int,
                        n_samples: int, seed: int) -> CovarianceStats:
    return estimate_covariances(params, corpus, [layer], n_samples, seed)[layer]


# -------------------------------------------------------------------- keys

def _subject_rows(params: TransformerParams, prefixes: Sequence[Sequence[int]], subject_ids,
                  tail_ids=()):
    """Rows ``<bos> prefix subject tail`` and the index of the last subject token in each."""
    bos = params.vocab.bos_id
    rows, pos = [], []
    for pre in prefixes:
        row = [bos, *pre, *subject_ids, *tail_ids]
        if len(row) > params.config.context:
            raise SequenceLengthError(f"edit prompt of length {len(row)} exceeds context")
        rows.append(row)
        pos.append(len(pre) + len(subject_ids))
    return rows, np.array(pos, dtype=np.int64)


def compute_kstar(params: TransformerParams, layer: int, subject: str, N: int = 10, seed: int = 0,
                  prefixes: Sequence[Sequence[int]] | None = None) -> np.ndarray:
    """Mean MLP key at the last subject token over ``N`` model-sampled prefixes."""
    sub = tokenize(subject, params.vocab).ids
    if not sub:
        raise ValueError("subject is empty")
    if prefixes is None:
        if N < 1:
            raise ValueError("N must be >= 1")
        prefixes = sample_prefixes(params, N, seed)
    rows, pos = _subject_rows(params, prefixes, sub)
    ids, _ = pad_batch(rows, params.vocab.pad_id)
    _, trace, _ = run(params, ids, stop_at=layer)
    keys = trace.keys[layer][np.arange(len(rows)), pos].astype(np.float64)
    # exactly rounded sums, so the mean does not depend on prefix order
    return np.array([math.fsum(col) for col in keys.T]) / len(rows)


# --------------------------------------------------------------------- z

@dataclass
class ZResult:
    z: np.ndarray
    h: np.ndarray
    delta: np.ndarray
    losses: list[float]
    initial_nll: float
    final_nll: float
    halvings: int


def _z_problem(params: TransformerParams, request: EditRequest, prefixes):
    vocab = params.vocab
    sub = tokenize(request.subject, vocab).ids
    prompt = tokenize(request.prompt, vocab).ids
    target = tokenize(request.target, vocab).ids
    if not target:
        raise ValueError("target is empty")
    if tuple(prompt[:len(sub)]) != tuple(sub):
        raise ValueError("prompt does not start with the subject")
    rows, pos = _subject_rows(params, prefixes, sub, [*prompt[len(sub):], *target])
    ids, lengths = pad_batch(rows, vocab.pad_id)
    tgt = np.full(ids.shape, IGNORE, dtype=np.int64)
    for r, n in enumerate(lengths):
        start = n - len(target)
        tgt[r, start - 1:n - 1] = target
    return ids, tgt, pos


def prefix_hidden(params: TransformerParams, ids: np.ndarray, pos: np.ndarray, layer: int) -> np.ndarray:
    _, trace, _ = run(params, ids, stop_at=layer)
    return trace.resid[layer][np.arange(len(pos)), pos].astype(np.float64).mean(axis=0)


def optimize_z(params: TransformerParams, request: EditRequest, config: EditConfig,
               prefixes: Sequence[Sequence[int]]) -> ZResult:
    """Gradient descent on an offset at (target layer, last subject token).

    The step direction is the raw gradient ("sgd") or its Adam-normalized form
    ("adam"). A step that would raise the loss is halved and retried, and the
    reduced rate is kept for later steps, so the recorded losses never increase.
    """
    L = config.target_layer
    ids, tgt, pos = _z_problem(params, request, prefixes)
    h = prefix_hidden(params, ids, pos, L)
    delta = np.zeros(params.config.d_model)
    limit = None if config.z_norm_clamp is None else config.z_norm_clamp * float(np.linalg.norm(h))

    def evaluate(d):
        return loss_and_grads(params, ids, tgt, inject=Injection(L, pos, d), param_grads=False)

    loss, grads = evaluate(delta)
    if not math.isfinite(loss):
        raise EditDivergedError(0, loss)
    losses = [loss]
    initial = loss
    rate = config.step_size
    halvings = 0
    m1 = np.zeros_like(delta)
    m2 = np.zeros_like(delta)
    for step in range(1, config.grad_steps + 1):
        g = grads.delta
        if config.z_optimizer == "adam":
            m1 = 0.9 * m1 + 0.1 * g
            m2 = 0.999 * m2 + 0.001 * g * g
            direction = (m1 / (1 - 0.9 ** step)) / (np.sqrt(m2 / (1 - 0.999 ** step)) + 1e-8)
        else:
            direction = g
        accepted = False
        for _ in range(config.max_halvings + 1):
            cand = delta - rate * direction
            if limit is not None:
                n = float(np.linalg.norm(cand))
                if n > limit:
                    cand = cand * (limit / n)
            c_loss, c_grads = evaluate(cand)
            if not math.isfinite(c_loss) and rate == config.step_size:
                raise EditDivergedError(step, c_loss)
            if math.isfinite(c_loss) and c_loss <= loss:
                delta, loss, grads = cand, c_loss, c_grads
                accepted = True
                break
            rate *= 0.5
            halvings += 1
        losses.append(loss)
        if not accepted:
            break
    return ZResult(h + delta, h, delta, losses, initial, loss, halvings)


# ------------------------------------------------------------------ solve

@dataclass
class KeyValueSolve:
    layer: int
    K1: np.ndarray
    R: np.ndarray
    Delta: np.ndarray
    jitter: float
    residual: float


def normal_equation_residual(delta, C0, K1, R, lam: float, eps: float) -> float:
    A = lam * C0 + K1 @ K1.T + eps * np.eye(C0.shape[0])
    rhs = R @ K1.T
    denom = np.linalg.norm(rhs)
    return float(np.linalg.norm(delta @ A - rhs) / denom) if denom > 0 else float(np.linalg.norm(delta @ A))


def solve_delta(C0, K1: np.ndarray, R: np.ndarray, lam: float, eps: float = 1e-8,
                retries: int = 3, return_jitter: bool = False):
    """``Δ = R K1ᵀ (λ C0 + K1 K1ᵀ + ε I)^-1`` by Cholesky solve.

    If the factorization fails, ε is multiplied by 10 (at least 1e-12) up to
    ``retries`` times before raising :class:`SingularSystemError`.
    """
    C0 = C0.C0 if isinstance(C0, CovarianceStats) else np.asarray(C0, dtype=np.float64)
    K1 = np.asarray(K1, dtype=np.float64)
    R = np.asarray(R, dtype=np.float64)
    if K1.ndim != 2 or R.ndim != 2 or C0.shape != (K1.shape[0], K1.shape[0]) or R.shape[1] != K1.shape[1]:
        raise ValueError(f"inconsistent shapes C0 {C0.shape}, K1 {K1.shape}, R {R.shape}")
    if lam <= 0:
        raise ValueError("lambda must be positive")
    base = lam * C0 + K1 @ K1.T
    rhs = K1 @ R.T          # A Δᵀ = K1 Rᵀ, A symmetric
    e = float(eps)
    for attempt in range(retries + 1):
        A = base + e * np.eye(base.shape[0])
        try:
            factor = sla.cho_factor(A, lower=True, check_finite=True)
            delta = sla.cho_solve(factor, rhs).T
            return (delta, e) if return_jitter else delta
        except np.linalg.LinAlgError:
            if attempt == retries:
                break
            e = max(e * 10.0, 1e-12)
    raise SingularSystemError(f"covariance system not positive definite (final jitter {e:g})")


# ----------------------------------------------------------------- spread

@dataclass
class EditReport:
    subject: str
    target: str
    layers: list[dict]
    requests: list[dict]
    seconds: float
    config: dict
    extra: dict = field(default_factory=dict)

    def to_dict(self, include_time: bool = False) -> dict:
        d = asdict(self)
        if not include_time:
            d.pop("seconds")
        return d


def _sample_prefixes_for(params: TransformerParams, config: EditConfig):
    return sample_prefixes(params, config.prefix_count, derive_seed(config.seed, "prefixes"))


def spread_residual(params: TransformerParams, batch: EditBatch, config: EditConfig,
                    covariances: dict[int, CovarianceStats],
                    prefixes: Sequence[Sequence[int]] | None = None):
    """Edit every layer of ``config.layer_set``. Returns (new params, EditReport)."""
    t0 = time.perf_counter()
    config.check_model(params)
    missing = [l for l in config.layer_set if l not in covariances]
    if missing:
        raise ValueError(f"no covariance statistics for layers {missing}")
    if prefixes is None:
        prefixes = _sample_prefixes_for(params, config)
    L = config.target_layer
    zres = [optimize_z(params, r, config, prefixes) for r in batch.requests]
    problems = [_z_problem(params, r, prefixes) for r in batch.requests]
    z = np.stack([zr.z for zr in zres], axis=1)                 # (d, bs)

    current = params
    layer_log = []
    lam, eps = config.covariance_scale, config.jitter
    for i, l in enumerate(config.layer_set):
        remaining = len(config.layer_set) - i
        h_now = np.stack([prefix_hidden(current, ids, pos, L) for ids, _, pos in problems], axis=1)
        R = (z - h_now) / remaining
        kstar = compute_kstar(current, l, batch.subject, prefixes=prefixes)
        K1 = np.repeat(kstar[:, None], len(batch), axis=1)
        C = covariances[l].normalized()
        delta, used = solve_delta(C, K1, R, lam, eps, return_jitter=True)
        res = normal_equation_residual(delta, C, K1, R, lam, used)
        name = f"layers.{l}.mlp_out"
        current = current.with_weights({name: current.weights[name] + delta})
        layer_log.append(dict(layer=l, delta_norm=float(np.linalg.norm(delta)),
                              residual_norm=float(np.linalg.norm(R)), kstar_norm=float(np.linalg.norm(kstar)),
                              jitter=used, normal_equation_residual=res))
    requests = []
    for r, zr, (ids, tgt, pos) in zip(batch.requests, zres, problems):
        post, _ = loss_and_grads(current, ids, tgt, param_grads=False)
        requests.append(dict(env_sample=r.env_sample, initial_nll=zr.initial_nll,
                             final_nll=zr.final_nll, post_edit_nll=float(post),
                             delta_norm=float(np.linalg.norm(zr.delta)), halvings=zr.halvings,
                             loss_trace=[float(x) for x in zr.losses]))
    seconds = time.perf_counter() - t0
    report = EditReport(batch.subject, batch.target, layer_log, requests, seconds, config.to_dict())
    return current, report
