"""Decoder-only transformer in numpy with a hand-written backward pass.

Each block is pre-LN::

    h_mid = h + Attn(LN1(h))
    k     = gelu(W_in LN2(h_mid))        # MLP key, length d_ff
    m     = W_out k                      # MLP value, length d
    h'    = h_mid + m

The MLP carries no biases, so the recorded value is exactly ``W_out @ key``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .vocab import TokenSequence, Vocabulary

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


class SequenceLengthError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_layers: int = 4
    d_model: int = 64
    d_ff: int = 256
    n_heads: int = 4
    context: int = 64

    def __post_init__(self):
        if self.d_ff < self.d_model:
            raise ValueError("d_ff must be >= d_model")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if min(self.vocab_size, self.n_layers, self.context) < 1:
            raise ValueError("sizes must be positive")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


def layer_names(layer: int) -> list[str]:
    p = f"layers.{layer}."
    return [p + s for s in ("ln1.scale", "ln1.shift", "attn.wq", "attn.wk", "attn.wv",
                            "attn.wo", "ln2.scale", "ln2.shift", "mlp_in", "mlp_out")]


def param_names(cfg: ModelConfig) -> list[str]:
    names = ["embed", "pos"]
    for l in range(cfg.n_layers):
        names += layer_names(l)
    return names + ["ln_f.scale", "ln_f.shift", "unembed"]


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    V, d, f, C = cfg.vocab_size, cfg.d_model, cfg.d_ff, cfg.context
    shapes: dict[str, tuple[int, ...]] = {"embed": (V, d), "pos": (C, d)}
    for l in range(cfg.n_layers):
        p = f"layers.{l}."
        shapes.update({
            p + "ln1.scale": (d,), p + "ln1.shift": (d,),
            p + "attn.wq": (d, d), p + "attn.wk": (d, d),
            p + "attn.wv": (d, d), p + "attn.wo": (d, d),
            p + "ln2.scale": (d,), p + "ln2.shift": (d,),
            p + "mlp_in": (f, d), p + "mlp_out": (d, f),
        })
    shapes.update({"ln_f.scale": (d,), "ln_f.shift": (d,), "unembed": (V, d)})
    return shapes


@dataclass(frozen=True, eq=False)
class TransformerParams:
    """Immutable weights of the toy LM, optionally bundled with its vocabulary.

    Arrays are stored read-only; edits and training build new instances.
    """

    config: ModelConfig
    weights: Mapping[str, np.ndarray]
    vocab: Vocabulary | None = field(default=None)

    def __post_init__(self):
        shapes = param_shapes(self.config)
        if set(shapes) != set(self.weights):
            missing = set(shapes) ^ set(self.weights)
            raise ValueError(f"parameter names mismatch: {sorted(missing)[:5]}")
        frozen = {}
        for name in param_names(self.config):
            arr = np.array(self.weights[name], copy=True)
            if arr.shape != shapes[name]:
                raise ValueError(f"{name}: shape {arr.shape} != {shapes[name]}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name}: non-finite values")
            arr.flags.writeable = False
            frozen[name] = arr
        object.__setattr__(self, "weights", frozen)
        if self.vocab is not None and len(self.vocab) != self.config.vocab_size:
            raise ValueError("vocabulary size does not match config")

    @classmethod
    def unchecked(cls, config: ModelConfig, weights: dict, vocab: Vocabulary | None = None):
        """Wrap live, mutable arrays without copying or validation (training loops only)."""
        obj = cls.__new__(cls)
        object.__setattr__(obj, "config", config)
        object.__setattr__(obj, "weights", weights)
        object.__setattr__(obj, "vocab", vocab)
        return obj

    def __getitem__(self, name: str) -> np.ndarray:
        return self.weights[name]

    def mlp_in(self, layer: int) -> np.ndarray:
        return self.weights[f"layers.{layer}.mlp_in"]

    def mlp_out(self, layer: int) -> np.ndarray:
        return self.weights[f"layers.{layer}.mlp_out"]

    @property
    def dtype(self):
        return self.weights["embed"].dtype

    def with_weights(self, updates: Mapping[str, np.ndarray]) -> "TransformerParams":
        merged = dict(self.weights)
        merged.update(updates)
        return replace(self, weights=merged)

    def astype(self, dtype) -> "TransformerParams":
        return replace(self, weights={k: v.astype(dtype) for k, v in self.weights.items()})

    def mutable_copy(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.weights.items()}

    def n_parameters(self) -> int:
        return sum(v.size for v in self.weights.values())

    def equal(self, other: "TransformerParams") -> bool:
        """Bitwise equality of all weights."""
        return self.config == other.config and all(
            np.array_equal(self.weights[k], other.weights[k]) for k in self.weights
        )


def init_params(cfg: ModelConfig, seed: int, vocab: Vocabulary | None = None,
                dtype=np.float64) -> TransformerParams:
    rng = np.random.default_rng(seed)
    d = cfg.d_model
    w: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".scale"):
            w[name] = np.ones(shape)
        elif name.endswith(".shift"):
            w[name] = np.zeros(shape)
        elif name in ("embed", "pos"):
            w[name] = rng.normal(0.0, 0.1, shape)
        elif name == "unembed":
            w[name] = rng.normal(0.0, 1.0 / np.sqrt(d), shape)
        else:
            fan_in = shape[1]
            std = 1.0 / np.sqrt(fan_in)
            if name.endswith("attn.wo") or name.endswith("mlp_out"):
                std /= np.sqrt(2 * cfg.n_layers)
            w[name] = rng.normal(0.0, std, shape)
        w[name] = w[name].astype(dtype)
    return TransformerParams(cfg, w, vocab)


# ---------------------------------------------------------------- primitives

def gelu(x: np.ndarray) -> np.ndarray:
    # 0.5 x (1 + tanh(c (x + 0.044715 x^3))), computed in place on one buffer
    t = x * x
    t *= 0.044715
    t += 1.0
    t *= x
    t *= _GELU_C
    np.tanh(t, out=t)
    t += 1.0
    t *= x
    t *= 0.5
    return t


def gelu_grad(x: np.ndarray) -> np.ndarray:
    x2 = x * x
    t = np.tanh(_GELU_C * (x + 0.044715 * x2 * x))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 0.134145 * x2)


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def layernorm_normalize(x: np.ndarray):
    """Zero-mean unit-variance rows, before scale/shift. Returns (xhat, rstd)."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    return xc * rstd, rstd


def _outer_sum(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """sum over leading axes of a[..., i] * b[..., j]  ->  (i, j)."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def _layernorm_backward(dy, xhat, rstd, scale):
    dxhat = dy * scale
    return rstd * (dxhat - dxhat.mean(-1, keepdims=True)
                   - xhat * (dxhat * xhat).mean(-1, keepdims=True))


# ------------------------------------------------------------------- forward

@dataclass
class Injection:
    """Offset added to the residual stream after ``layer`` at one position per row."""

    layer: int
    positions: np.ndarray   # (B,)
    delta: np.ndarray       # (d,) shared or (B, d)


@dataclass
class HiddenTrace:
    """Per-layer activations of one forward pass.

    ``resid[l]`` is the residual stream after block ``l`` (after any
    injection), ``keys[l]`` the MLP key and ``values[l]`` the MLP output.
    Arrays carry a leading batch axis when produced by :func:`run`.
    """

    embeddings: np.ndarray
    resid: list[np.ndarray]
    keys: list[np.ndarray]
    values: list[np.ndarray]
    logits: np.ndarray

    def select(self, b: int) -> "HiddenTrace":
        return HiddenTrace(self.embeddings[b], [r[b] for r in self.resid],
                           [k[b] for k in self.keys], [v[b] for v in self.values],
                           self.logits[b])


@dataclass
class _Cache:
    ids: np.ndarray
    layers: list[dict] = field(default_factory=list)
    final: dict = field(default_factory=dict)


def _as_batch(ids) -> np.ndarray:
    if isinstance(ids, TokenSequence):
        ids = ids.ids
    arr = np.asarray(ids, dtype=np.int64)
    if arr.ndim == 1:
        arr = arr[None, :]
    return arr


def _apply_injection(x, inject: Injection):
    rows = np.arange(x.shape[0])
    delta = np.asarray(inject.delta, dtype=x.dtype)
    x = x.copy()
    x[rows, inject.positions] += delta
    return x


def run(params: TransformerParams, ids, inject: Injection | None = None,
        keep_cache: bool = False, stop_at: int | None = None):
    """Batched forward pass over right-padded ``ids`` of shape (B, T).

    Causal masking makes positions independent of anything to their right, so
    rows of differing true length can share a batch.  ``stop_at`` skips the
    blocks above that layer and the unembedding (logits returned as None).
    Returns ``(logits, trace, cache)``; cache is None unless ``keep_cache``.
    """
    cfg = params.config
    w = params.weights
    ids = _as_batch(ids)
    B, T = ids.shape
    if T == 0:
        raise ValueError("empty input sequence")
    if T > cfg.context:
        raise SequenceLengthError(f"sequence length {T} exceeds context {cfg.context}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise ValueError("token id out of range")
    H, dh = cfg.n_heads, cfg.d_head
    scale = 1.0 / math.sqrt(dh)
    causal = np.triu(np.full((T, T), -np.inf, dtype=params.dtype), k=1)

    x = w["embed"][ids] + w["pos"][:T]
    emb = x
    cache = _Cache(ids) if keep_cache else None
    resid, keys, values = [], [], []
    n_run = cfg.n_layers if stop_at is None else stop_at + 1
    for l in range(n_run):
        p = f"layers.{l}."
        x_in = x
        xhat1, rstd1 = layernorm_normalize(x)
        a_in = xhat1 * w[p + "ln1.scale"] + w[p + "ln1.shift"]
        q = (a_in @ w[p + "attn.wq"].T).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        k = (a_in @ w[p + "attn.wk"].T).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        v = (a_in @ w[p + "attn.wv"].T).reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        att = softmax(q @ k.transpose(0, 1, 3, 2) * scale + causal)
        o = (att @ v).transpose(0, 2, 1, 3).reshape(B, T, H * dh)
        x = x_in + o @ w[p + "attn.wo"].T
        xhat2, rstd2 = layernorm_normalize(x)
        m_in = xhat2 * w[p + "ln2.scale"] + w[p + "ln2.shift"]
        pre = m_in @ w[p + "mlp_in"].T
        key = gelu(pre)
        m = key @ w[p + "mlp_out"].T
        x_mid = x
        x = x_mid + m
        if inject is not None and inject.layer == l:
            x = _apply_injection(x, inject)
        resid.append(x)
        keys.append(key)
        values.append(m)
        if cache is not None:
            cache.layers.append(dict(xhat1=xhat1, rstd1=rstd1, a_in=a_in, q=q, k=k, v=v,
                                     att=att, o=o, xhat2=xhat2, rstd2=rstd2, m_in=m_in,
                                     pre=pre, key=key))
    logits = None
    if stop_at is None:
        xhatf, rstdf = layernorm_normalize(x)
        f_out = xhatf * w["ln_f.scale"] + w["ln_f.shift"]
        logits = f_out @ w["unembed"].T
        if cache is not None:
            cache.final = dict(xhat=xhatf, rstd=rstdf, f_out=f_out)
    trace = HiddenTrace(emb, resid, keys, values, logits)
    return logits, trace, cache


def run_continuations(params: TransformerParams, prefix: Sequence[int], conts: np.ndarray):
    """Logits for one shared ``prefix`` followed by each row of ``conts`` (B, S).

    The prefix is encoded once and its attention keys/values are reused by every
    continuation. Returns ``(prefix_logits (P, V), cont_logits (B, S, V))``; equal
    to running each full sequence through :func:`run`.
    """
    cfg = params.config
    w = params.weights
    pre_ids = np.asarray(prefix, dtype=np.int64)
    conts = _as_batch(conts)
    P, (B, S) = len(pre_ids), conts.shape
    if P == 0:
        raise ValueError("empty prefix")
    if P + S > cfg.context:
        raise SequenceLengthError(f"sequence length {P + S} exceeds context {cfg.context}")
    H, dh = cfg.n_heads, cfg.d_head
    scale = 1.0 / math.sqrt(dh)
    mask_p = np.triu(np.full((P, P), -np.inf, dtype=params.dtype), k=1)
    mask_c = np.concatenate([np.zeros((S, P), dtype=params.dtype),
                             np.triu(np.full((S, S), -np.inf, dtype=params.dtype), k=1)], axis=1)
    xp = w["embed"][pre_ids] + w["pos"][:P]
    xc = w["embed"][conts] + w["pos"][P:P + S]

    def heads(a, n):
        return a.reshape(-1, n, H, dh).transpose(0, 2, 1, 3)

    def mlp(x, p):
        xhat, _ = layernorm_normalize(x)
        h = gelu((xhat * w[p + "ln2.scale"] + w[p + "ln2.shift"]) @ w[p + "mlp_in"].T)
        return x + h @ w[p + "mlp_out"].T

    for l in range(cfg.n_layers):
        p = f"layers.{l}."
        ap = layernorm_normalize(xp)[0] * w[p + "ln1.scale"] + w[p + "ln1.shift"]
        ac = layernorm_normalize(xc)[0] * w[p + "ln1.scale"] + w[p + "ln1.shift"]
        qp, kp, vp = (heads(ap @ w[p + n].T, P) for n in ("attn.wq", "attn.wk", "attn.wv"))
        qc, kc, vc = (heads(ac @ w[p + n].T, S) for n in ("attn.wq", "attn.wk", "attn.wv"))
        op = softmax(qp @ kp.transpose(0, 1, 3, 2) * scale + mask_p) @ vp
        kall = np.concatenate([np.broadcast_to(kp, (B, H, P, dh)), kc], axis=2)
        vall = np.concatenate([np.broadcast_to(vp, (B, H, P, dh)), vc], axis=2)
        oc = softmax(qc @ kall.transpose(0, 1, 3, 2) * scale + mask_c) @ vall
        xp = mlp(xp + op.transpose(0, 2, 1, 3).reshape(P, H * dh) @ w[p + "attn.wo"].T, p)
        xc = mlp(xc + oc.transpose(0, 2, 1, 3).reshape(B, S, H * dh) @ w[p + "attn.wo"].T, p)

    def head(x):
        xhat, _ = layernorm_normalize(x)
        return (xhat * w["ln_f.scale"] + w["ln_f.shift"]) @ w["unembed"].T

    return head(xp), head(xc)


def forward(params: TransformerParams, input: TokenSequence | Sequence[int]):
    """Single-sequence forward pass. Returns ``(logits (T, V), HiddenTrace)``."""
    logits, trace, _ = run(params, input)
    return logits[0], trace.select(0)


# ------------------------------------------------------------------ backward

def backward(params: TransformerParams, cache: _Cache, dlogits: np.ndarray,
             inject: Injection | None = None, param_grads: bool = True):
    """Reverse pass. Returns ``(grads dict or None, dL/d delta or None)``."""
    cfg = params.config
    w = params.weights
    ids = cache.ids
    B, T = ids.shape
    H, dh = cfg.n_heads, cfg.d_head
    scale = 1.0 / math.sqrt(dh)
    g: dict[str, np.ndarray] = {}
    fc = cache.final
    if param_grads:
        g["unembed"] = _outer_sum(dlogits, fc["f_out"])
    df = dlogits @ w["unembed"]
    if param_grads:
        g["ln_f.scale"] = (df * fc["xhat"]).sum(axis=(0, 1))
        g["ln_f.shift"] = df.sum(axis=(0, 1))
    dx = _layernorm_backward(df, fc["xhat"], fc["rstd"], w["ln_f.scale"])
    ddelta = None
    for l in reversed(range(cfg.n_layers)):
        p = f"layers.{l}."
        c = cache.layers[l]
        if inject is not None and inject.layer == l:
            rows = np.arange(B)
            picked = dx[rows, inject.positions]
            ddelta = picked.sum(axis=0) if np.ndim(inject.delta) == 1 else picked
            if not param_grads:
                # nothing below the injection site influences d loss / d delta
                return None, ddelta
        # MLP branch
        dm = dx
        dkey = dm @ w[p + "mlp_out"]
        dpre = dkey * gelu_grad(c["pre"])
        dm_in = dpre @ w[p + "mlp_in"]
        if param_grads:
            g[p + "mlp_out"] = _outer_sum(dm, c["key"])
            g[p + "mlp_in"] = _outer_sum(dpre, c["m_in"])
            g[p + "ln2.scale"] = (dm_in * c["xhat2"]).sum(axis=(0, 1))
            g[p + "ln2.shift"] = dm_in.sum(axis=(0, 1))
        dx = dx + _layernorm_backward(dm_in, c["xhat2"], c["rstd2"], w[p + "ln2.scale"])
        # attention branch
        dattn_out = dx
        do = dattn_out @ w[p + "attn.wo"]
        do_h = do.reshape(B, T, H, dh).transpose(0, 2, 1, 3)
        att, q, k, v = c["att"], c["q"], c["k"], c["v"]
        dv = att.transpose(0, 1, 3, 2) @ do_h
        datt = do_h @ v.transpose(0, 1, 3, 2)
        ds = att * (datt - (datt * att).sum(-1, keepdims=True)) * scale
        dq = ds @ k
        dk = ds.transpose(0, 1, 3, 2) @ q
        merge = lambda t: t.transpose(0, 2, 1, 3).reshape(B, T, H * dh)
        dq, dk, dv = merge(dq), merge(dk), merge(dv)
        da_in = dq @ w[p + "attn.wq"] + dk @ w[p + "attn.wk"] + dv @ w[p + "attn.wv"]
        if param_grads:
            g[p + "attn.wo"] = _outer_sum(dattn_out, c["o"])
            g[p + "attn.wq"] = _outer_sum(dq, c["a_in"])
            g[p + "attn.wk"] = _outer_sum(dk, c["a_in"])
            g[p + "attn.wv"] = _outer_sum(dv, c["a_in"])
            g[p + "ln1.scale"] = (da_in * c["xhat1"]).sum(axis=(0, 1))
            g[p + "ln1.shift"] = da_in.sum(axis=(0, 1))
        dx = dx + _layernorm_backward(da_in, c["xhat1"], c["rstd1"], w[p + "ln1.scale"])
    if param_grads:
        gemb = np.zeros_like(w["embed"])
        np.add.at(gemb, ids.reshape(-1), dx.reshape(-1, cfg.d_model))
        g["embed"] = gemb
        gpos = np.zeros_like(w["pos"])
        gpos[:T] = dx.sum(axis=0)
        g["pos"] = gpos
        return g, ddelta
    return None, ddelta


# ---------------------------------------------------------------------- loss

IGNORE = -1


def next_token_targets(ids: np.ndarray, lengths: Iterable[int] | None = None) -> np.ndarray:
    """Shifted targets for (B, T) ids; positions past each row's length are ignored."""
    ids = _as_batch(ids)
    tgt = np.full_like(ids, IGNORE)
    tgt[:, :-1] = ids[:, 1:]
    if lengths is not None:
        for b, n in enumerate(lengths):
            tgt[b, max(n - 1, 0):] = IGNORE
    return tgt


def nll_from_logits(logits: np.ndarray, targets: np.ndarray):
    """Mean NLL over non-ignored targets and its gradient w.r.t. logits."""
    mask = targets != IGNORE
    n = int(mask.sum())
    if n == 0:
        return 0.0, np.zeros_like(logits)
    logp = log_softmax(logits)
    safe = np.where(mask, targets, 0)
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    loss = -float((picked * mask).sum()) / n
    dlogits = np.exp(logp)
    np.put_along_axis(dlogits, safe[..., None],
                      np.take_along_axis(dlogits, safe[..., None], axis=-1) - 1.0, axis=-1)
    dlogits *= (mask / n)[..., None]
    return loss, dlogits


@dataclass
class Gradients:
    params: dict[str, np.ndarray] | None
    delta: np.ndarray | None


def loss_and_grads(params: TransformerParams, input, targets,
                   inject: Injection | None = None, param_grads: bool = True):
    """Mean NLL of ``targets`` (same shape as ``input``, -1 = ignored) and gradients.

    With ``inject`` set, the gradient w.r.t. the injected offset is returned
    in ``Gradients.delta``.
    """
    ids = _as_batch(input)
    targets = _as_batch(targets)
    if targets.shape != ids.shape:
        raise ValueError("targets misaligned with input")
    if ((targets < IGNORE) | (targets >= params.config.vocab_size)).any():
        raise ValueError("target id out of range")
    if not (targets != IGNORE).any():
        zeros = {k: np.zeros_like(v) for k, v in params.weights.items()} if param_grads else None
        dz = None if inject is None else np.zeros_like(np.asarray(inject.delta, dtype=params.dtype))
        return 0.0, Gradients(zeros, dz)
    logits, _, cache = run(params, ids, inject=inject, keep_cache=True)
    loss, dlogits = nll_from_logits(logits, targets)
    g, dd = backward(params, cache, dlogits, inject=inject, param_grads=param_grads)
    return loss, Gradients(g, dd)


def pad_batch(seqs: Sequence[Sequence[int]], pad_id: int):
    """Right-pad to a (B, T) int array. Returns (ids, lengths)."""
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    out = np.full((len(seqs), int(lengths.max())), pad_id, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out, lengths
