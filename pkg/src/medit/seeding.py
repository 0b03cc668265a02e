"""Per-stage seeds derived from one master seed."""

import hashlib


def derive_seed(master: int, *names) -> int:
    """Stable 31-bit seed for the stage path ``names`` under ``master``.

    Hash-based, so adding a stage never shifts the seeds of the others.
    """
    key = ":".join([str(int(master)), *map(str, names)]).encode("utf-8")
    return int.from_bytes(hashlib.sha256(key).digest()[:4], "little") & 0x7FFFFFFF
