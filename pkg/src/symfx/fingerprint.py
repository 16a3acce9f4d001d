"""Semantic fingerprints for programs.

A program's fingerprint is a 64-bit FNV-1a hash of its outputs on a fixed
probe set of (feature, parameter) tuples. Probe values are a pure function
of (probe index, symbol name), so any two programs producing the same
outputs share a digest regardless of how their schemas are spelled.
Outputs are quantized to 10 significant digits before hashing to absorb
last-ulp drift; non-finite values map to distinct sentinel byte strings.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

from .dsl import Program, execute

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1

# Fixed probe seed; changing it invalidates every cached fingerprint.
PROBE_SEED = int.from_bytes(b"SYMFX-01", "big")

DEFAULT_PROBE_SIZE = 16


def fnv1a(data: bytes, h: int = FNV_OFFSET) -> int:
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & _MASK64
    return h


def _unit(index: int, name: str, kind: str) -> float:
    """Deterministic draw in [0, 1) keyed by probe index and symbol name."""
    h = fnv1a(f"{PROBE_SEED}|{kind}|{index}|{name}".encode())
    return (h >> 11) * 2.0**-53


def _log_uniform(u: float, low: float, high: float) -> float:
    import math

    return math.exp(math.log(low) + u * (math.log(high) - math.log(low)))


@dataclass(frozen=True)
class ProbeSet:
    """Fixed evaluation points used for fingerprinting."""

    size: int = DEFAULT_PROBE_SIZE

    def feature_value(self, index: int, name: str) -> float:
        u = _unit(index, name, "feat")
        if name.startswith("x2"):
            return _log_uniform(u, 1e-6, 1e4)
        if name.startswith("rho"):
            return _log_uniform(u, 1e-4, 1e2)
        if name.startswith("w"):
            return 2.0 * u - 1.0
        return 4.0 * u - 2.0

    def param_value(self, index: int, name: str) -> float:
        return 4.0 * _unit(index, name, "param") - 2.0

    def outputs(self, program: Program) -> list[float]:
        schema = program.schema
        values = []
        for i in range(self.size):
            feats = {n: self.feature_value(i, n) for n in schema.features}
            params = {n: self.param_value(i, n) for n in schema.param_names}
            values.append(execute(program, feats, params))
        return values


@lru_cache(maxsize=8)
def default_probe(size: int = DEFAULT_PROBE_SIZE) -> ProbeSet:
    return ProbeSet(size)


def quantize(value: float) -> bytes:
    """Canonical byte encoding of one probe output."""
    if value != value:
        return b"nan"
    if value == float("inf"):
        return b"+inf"
    if value == float("-inf"):
        return b"-inf"
    if value == 0.0:
        value = 0.0  # collapse -0.0
    return f"{value:.9e}".encode()


def fingerprint(program: Program, probe: ProbeSet | None = None) -> int:
    """64-bit digest of the program's quantized probe outputs."""
    probe = probe or default_probe()
    h = FNV_OFFSET
    for value in probe.outputs(program):
        h = fnv1a(quantize(value) + b";", h)
    return h


def combine_digests(digests) -> int:
    """Fold several 64-bit digests into one (for display and log keys)."""
    h = FNV_OFFSET
    for d in digests:
        h = fnv1a(int(d).to_bytes(8, "big"), h)
    return h
