"""
TensorFact - Utility Functions
"""

import hashlib
from typing import Any, Dict, Iterable, List, Optional

import numpy as np


def derive_rng(seed: int, *keys: int) -> np.random.Generator:
    """
    Build an independent generator for a (seed, key...) pair.

    Per-image and per-layer streams are derived this way so that any subset
    can be reproduced without replaying the others.

    Args:
        seed: Run seed
        keys: Stream identifiers (split index, image index, layer index...)

    Returns:
        np.random.Generator: Seeded generator
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), *[int(k) for k in keys]]))


def array_digest(arrays: Iterable[np.ndarray]) -> str:
    """
    Hash the exact bytes of a sequence of arrays.

    Args:
        arrays: Arrays to hash, in order

    Returns:
        str: Hex sha256 digest
    """
    h = hashlib.sha256()
    for arr in arrays:
        arr = np.ascontiguousarray(arr)
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def text_digest(text: str, length: int = 12) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:length]


def parse_bool(value: Any) -> bool:
    """
    Parse a boolean written in a config file.

    Args:
        value: Raw value

    Returns:
        bool: Parsed flag

    Raises:
        ValueError: If the text is not a recognised boolean
    """
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ("1", "true", "yes", "on"):
        return True
    if text in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {value!r}")


def parse_optional_int(value: Any) -> Optional[int]:
    text = str(value).strip().lower()
    if text in ("", "none", "null"):
        return None
    return int(text)


def format_float(value: float, digits: int = 6) -> str:
    """Fixed-point formatting used by every report so output is byte-stable."""
    return f"{float(value):.{digits}f}"


def format_key_values(pairs: Dict[str, Any], section: Optional[str] = None) -> str:
    """
    Render a machine-readable ``key = value`` block.

    Args:
        pairs: Ordered mapping of keys to values
        section: Optional ``[section]`` header

    Returns:
        str: Block text ending with a newline
    """
    lines: List[str] = []
    if section:
        lines.append(f"[{section}]")
    for key, value in pairs.items():
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
