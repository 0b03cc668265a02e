"""Binary container for named float64 tensors, used for model checkpoints.

Layout::

    b"MEDITCKPT1\\n"
    uint64 little-endian header length
    header: UTF-8 JSON (sorted keys) with dims, tensor table and vocab size
    tensor payloads, row-major little-endian float64, in table order
    vocabulary listing, one token per line (UTF-8)

Writing the same tensors twice yields identical bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .model import ModelConfig, TransformerParams, param_names
from .vocab import Vocabulary

MAGIC = b"MEDITCKPT1\n"
_LE_F8 = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


def _encode(tensors: Mapping[str, np.ndarray], order, dims: dict, vocab: Vocabulary | None,
            meta: dict | None) -> bytes:
    table, payload, offset = [], [], 0
    for name in order:
        arr = np.ascontiguousarray(tensors[name], dtype=_LE_F8)
        raw = arr.tobytes(order="C")
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        payload.append(raw)
        offset += len(raw)
    listing = ("\n".join(vocab.tokens) + "\n").encode("utf-8") if vocab is not None else b""
    header = {
        "dims": dims,
        "tensors": table,
        "payload_bytes": offset,
        "vocab_bytes": len(listing),
        "vocab_size": len(vocab) if vocab is not None else 0,
        "meta": meta or {},
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return b"".join([MAGIC, struct.pack("<Q", len(hbytes)), hbytes, *payload, listing])


def _decode(blob: bytes):
    if not blob.startswith(MAGIC):
        raise CheckpointError("bad magic; not a checkpoint file")
    pos = len(MAGIC)
    if len(blob) < pos + 8:
        raise CheckpointError("truncated header")
    (hlen,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    try:
        header = json.loads(blob[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt header: {e}") from None
    pos += hlen
    need = pos + header["payload_bytes"] + header["vocab_bytes"]
    if len(blob) != need:
        raise CheckpointError(f"size mismatch: expected {need} bytes, found {len(blob)}")
    tensors = {}
    for entry in header["tensors"]:
        start = pos + entry["offset"]
        arr = np.frombuffer(blob, dtype=_LE_F8, count=entry["nbytes"] // 8, offset=start)
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
    vstart = pos + header["payload_bytes"]
    vocab = None
    if header["vocab_bytes"]:
        words = blob[vstart:].decode("utf-8").split("\n")[:-1]
        if len(words) != header["vocab_size"]:
            raise CheckpointError("vocabulary listing length mismatch")
        vocab = Vocabulary.from_tokens(words)
        if vocab.tokens != tuple(words):
            raise CheckpointError("vocabulary listing is not canonical")
    return header, tensors, vocab


def save_tensors(path, tensors: Mapping[str, np.ndarray], meta: dict | None = None) -> str:
    """Write arbitrary named tensors (sorted by name). Returns the SHA-256 of the file."""
    blob = _encode(tensors, sorted(tensors), {}, None, meta)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_tensors(path) -> tuple[dict[str, np.ndarray], dict]:
    header, tensors, _ = _decode(Path(path).read_bytes())
    return tensors, header["meta"]


def checkpoint_bytes(params: TransformerParams, meta: dict | None = None) -> bytes:
    cfg = params.config
    dims = {"vocab_size": cfg.vocab_size, "n_layers": cfg.n_layers, "d_model": cfg.d_model,
            "d_ff": cfg.d_ff, "n_heads": cfg.n_heads, "context": cfg.context}
    return _encode(params.weights, param_names(cfg), dims, params.vocab, meta)


def save_checkpoint(path, params: TransformerParams, meta: dict | None = None) -> str:
    """Write ``params`` (with its vocabulary) to ``path``. Returns the file's SHA-256."""
    if params.vocab is None:
        raise CheckpointError("params carry no vocabulary")
    blob = checkpoint_bytes(params, meta)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path) -> TransformerParams:
    try:
        blob = Path(path).read_bytes()
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint not found: {path}") from None
    header, tensors, vocab = _decode(blob)
    dims = header["dims"]
    if not dims:
        raise CheckpointError("file holds bare tensors, not a model checkpoint")
    cfg = ModelConfig(**dims)
    if vocab is None or len(vocab) != cfg.vocab_size:
        raise CheckpointError("checkpoint vocabulary does not match vocab_size")
    missing = set(param_names(cfg)) - set(tensors)
    if missing:
        raise CheckpointError(f"missing tensors: {sorted(missing)}")
    return TransformerParams(cfg, tensors, vocab)


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
