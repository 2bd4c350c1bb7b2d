import hashlib
import json
import math
import os
import tempfile
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path


def round_half_away(x: float, ndigits: int = 0) -> float:
    """Round with ties away from zero, on the decimal repr of ``x``."""
    q = Decimal(1).scaleb(-ndigits)
    return float(Decimal(repr(float(x))).quantize(q, rounding=ROUND_HALF_UP))


def round_count(x: float) -> int:
    # ROUND_HALF_UP in Decimal is half-away-from-zero
    return int(Decimal(repr(float(x))).quantize(Decimal(1), rounding=ROUND_HALF_UP))


def fmt_fixed(x: float, ndigits: int = 3) -> str:
    return f"{round_half_away(x, ndigits):.{ndigits}f}"


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False, allow_nan=False) + "\n"


def stage_seed(seed: int, stage: str) -> int:
    """Derive a 64-bit per-stage seed from the top-level seed and a stage name."""
    digest = hashlib.sha256(f"{int(seed)}:{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write(path, data) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, (bytes, bytearray)) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"encoding": "utf-8", "newline": ""})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def is_finite(*values: float) -> bool:
    return all(math.isfinite(v) for v in values)
