"""Shared plumbing: exact fractions, canonical digests, error types."""

from __future__ import annotations

import hashlib
import json
from fractions import Fraction


class SchemaError(ValueError):
    """Malformed input data or configuration."""


class PositivityError(RuntimeError):
    """An observed unit has zero inclusion probability at its realized cell."""


class EmptyCellError(RuntimeError):
    """No observed units (or zero weight mass) at the requested exposure cell."""


class DigestError(RuntimeError):
    """Artifacts built under different policy/exposure/network configurations."""


class SupportTooLargeError(RuntimeError):
    """Exact enumeration refused because the assignment support exceeds the cap."""


def as_fraction(value) -> Fraction:
    """Coerce a ratio spec to an exact Fraction.

    Accepts Fraction, int, strings like "1/3" or "0.5", and floats. Floats
    are snapped to the nearest small-denominator rational so that e.g.
    float(1/3) becomes Fraction(1, 3).
    """
    if isinstance(value, Fraction):
        return value
    if isinstance(value, bool):
        raise TypeError("bool is not a valid fraction")
    if isinstance(value, int):
        return Fraction(value)
    if isinstance(value, str):
        return Fraction(value.strip())
    if isinstance(value, float):
        return Fraction(value).limit_denominator(10**9)
    raise TypeError(f"cannot interpret {value!r} as a fraction")


def round_half_up(q: Fraction) -> int:
    """floor(q + 1/2) for nonnegative rational q."""
    if q < 0:
        raise ValueError("round_half_up expects a nonnegative value")
    return int(q + Fraction(1, 2))


def canonical_json(obj) -> str:
    """Deterministic JSON encoding used for digests and file output."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def stable_digest(obj) -> str:
    """Short content digest of a JSON-serializable object."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:16]


def seed_key(seed) -> list[int]:
    """Normalize a seed (int or sequence of ints) into a list of ints."""
    if isinstance(seed, (int,)):
        if seed < 0:
            raise ValueError("seeds must be nonnegative")
        return [seed]
    key = [int(s) for s in seed]
    if any(s < 0 for s in key):
        raise ValueError("seeds must be nonnegative")
    if not key:
        raise ValueError("empty seed")
    return key
