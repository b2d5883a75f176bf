"""Memory-reduction baselines: post-hoc quantization and the hash trick.

Dimension reduction needs no machinery of its own: it is the dense
trainer run at a smaller width, exposed as a config preset.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .seeding import make_rng
from .streams import Unit
from .trainer import EmbeddingTable


@dataclass
class QuantizedTable:
    """Per-attribute evenly-binned snapshot of a dense table.

    Bin edges are shared across dimensions within an attribute; stored
    values are read back as bin midpoints.
    """

    bits: int
    dim: int
    edges: dict[int, tuple[float, float]] = field(default_factory=dict)
    indices: dict[Unit, np.ndarray] = field(default_factory=dict)

    def vector_for(self, unit: Unit) -> np.ndarray | None:
        idx = self.indices.get(unit)
        if idx is None:
            return None
        lo, hi = self.edges[unit.attribute_id]
        if hi == lo:
            return np.full(self.dim, lo)
        width = (hi - lo) / (1 << self.bits)
        return lo + (idx.astype(np.float64) + 0.5) * width

    def nbytes(self) -> int:
        """Index bits plus two 4-byte edge values per attribute."""
        bits = len(self.indices) * self.dim * self.bits
        return (bits + 7) // 8 + 8 * len(self.edges)


def quantize_table(table: EmbeddingTable, bits: int) -> QuantizedTable:
    """Evenly quantize a trained table into 2^bits bins per attribute."""
    if not (1 <= bits <= 16):
        raise ValueError("bits must be in [1, 16]")
    if not table.vectors:
        raise ValueError("cannot quantize an empty table")
    quantized = QuantizedTable(bits=bits, dim=table.dim)
    per_attr: dict[int, list[np.ndarray]] = {}
    for unit, vec in table.vectors.items():
        per_attr.setdefault(unit.attribute_id, []).append(vec)
    for aid, vecs in per_attr.items():
        stack = np.stack(vecs)
        quantized.edges[aid] = (float(stack.min()), float(stack.max()))
    levels = 1 << bits
    for unit, vec in table.vectors.items():
        lo, hi = quantized.edges[unit.attribute_id]
        if hi == lo:
            idx = np.zeros(table.dim, dtype=np.int32)
        else:
            width = (hi - lo) / levels
            idx = np.clip(np.floor((vec - lo) / width), 0, levels - 1).astype(np.int32)
        quantized.indices[unit] = idx
    return quantized


def hash_assign(unit_id: int, divisor: int) -> int:
    """Modulo-division slot for a dense first-seen unit id."""
    if divisor < 1:
        raise ValueError("divisor must be >= 1")
    return unit_id % divisor


def hash_divisor(n_units: int, gamma: float) -> int:
    """Shared-vector count round(gamma * vocabulary size), at least 1."""
    if not (0.0 < gamma <= 1.0):
        raise ValueError("gamma must be in (0, 1]")
    return max(1, round(gamma * n_units))


class HashedEmbeddingTable(EmbeddingTable):
    """Dense table whose vector reads and writes resolve through slots.

    Units mapping to the same slot share the vector and accumulator
    objects, so colliding units train the same parameters. Negative
    pools still enumerate units, not slots.
    """

    def __init__(
        self, dim: int, seed: int | tuple[int, ...], divisors: dict[int, int]
    ) -> None:
        super().__init__(dim, seed)
        self.divisors = dict(divisors)
        self._slot_vectors: dict[Unit, np.ndarray] = {}
        self._slot_accums: dict[Unit, np.ndarray] = {}

    def slot_for(self, unit: Unit) -> Unit:
        divisor = self.divisors.get(unit.attribute_id)
        if divisor is None:
            raise KeyError(f"no divisor for attribute {unit.attribute_id}")
        return Unit(unit.attribute_id, hash_assign(unit.unit_id, divisor))

    def ensure_vector(self, unit: Unit) -> np.ndarray:
        vec = self.vectors.get(unit)
        if vec is not None:
            return vec
        slot = self.slot_for(unit)
        slot_vec = self._slot_vectors.get(slot)
        if slot_vec is None:
            # Seed by slot, not unit, so colliding units agree on the init.
            rng = make_rng(*self.seed, slot.attribute_id, slot.unit_id)
            half = 0.5 / self.dim
            slot_vec = rng.uniform(-half, half, self.dim)
            self._slot_vectors[slot] = slot_vec
            self._slot_accums[slot] = np.zeros(self.dim)
        self.vectors[unit] = slot_vec
        self.grad_accum[unit] = self._slot_accums[slot]
        return slot_vec

    def nbytes_dense(self) -> int:
        return len(self._slot_vectors) * self.dim * 4
