"""Binary persistence of the streaming model state.

Single self-describing container (see docs/model_format.md): a JSON
header with the configs, then per-attribute vocabularies and, for each
modeled attribute, cluster assignments, centroids or the explicit
mapping, basis matrices with their accumulators, and sparse codes in
coordinate form. All floats are 4-byte little-endian; the file ends
with a SHA-256 of everything before it, so truncation or corruption is
detected before any state is built.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from dataclasses import asdict
from typing import BinaryIO

import numpy as np

from .codebook import (
    AttributeModel,
    BasisSet,
    CompressionConfig,
    ExplicitMapping,
    FixedClustering,
    SparseCode,
)
from .engine import AttributeBuildSpec, ModelState
from .streams import AttributeSchema, VocabRegistry
from .trainer import TrainConfig

MAGIC = b"SBM1"
FORMAT_VERSION = 1
_CHECKSUM_BYTES = 32


class ModelLoadError(RuntimeError):
    """Raised for version mismatches, truncation, or checksum failure."""


def _write_bytes(out: BinaryIO, data: bytes) -> None:
    out.write(struct.pack("<I", len(data)))
    out.write(data)


def _write_str(out: BinaryIO, text: str) -> None:
    _write_bytes(out, text.encode("utf-8"))


def _write_array(out: BinaryIO, array: np.ndarray, dtype: str) -> None:
    data = np.ascontiguousarray(array, dtype=dtype)
    out.write(struct.pack("<I", len(data.shape)))
    for extent in data.shape:
        out.write(struct.pack("<I", extent))
    out.write(data.tobytes())


class _Reader:
    def __init__(self, data: bytes) -> None:
        self._buf = io.BytesIO(data)

    def read(self, count: int) -> bytes:
        data = self._buf.read(count)
        if len(data) != count:
            raise ModelLoadError("model file truncated")
        return data

    def u32(self) -> int:
        return struct.unpack("<I", self.read(4))[0]

    def bytes_(self) -> bytes:
        return self.read(self.u32())

    def str_(self) -> str:
        return self.bytes_().decode("utf-8")

    def array(self, dtype: str) -> np.ndarray:
        ndim = self.u32()
        shape = tuple(self.u32() for _ in range(ndim))
        count = int(np.prod(shape)) if shape else 1
        itemsize = np.dtype(dtype).itemsize
        data = np.frombuffer(self.read(count * itemsize), dtype=dtype)
        return data.reshape(shape).copy()


def save(state: ModelState, path: str) -> None:
    """Serialize the state; the write is atomic (temp file + rename)."""
    body = io.BytesIO()
    header = {
        "format_version": FORMAT_VERSION,
        "seed": state.seed,
        "cursor": state.cursor,
        "uniform_allocation": state.uniform_allocation,
        "train_cfg": asdict(state.train_cfg),
        "comp_cfg": asdict(state.comp_cfg),
        "build_specs": {str(aid): asdict(spec) for aid, spec in state.build_specs.items()},
        "schemas": [asdict(schema) for schema in state.schemas],
        "modeled_attributes": sorted(state.attributes),
    }
    _write_str(body, json.dumps(header, sort_keys=True))

    for schema in state.schemas:
        symbols = state.registry.symbols(schema.attribute_id)
        body.write(struct.pack("<I", len(symbols)))
        for symbol in symbols:
            _write_str(body, symbol)

    for aid in sorted(state.attributes):
        model = state.attributes[aid]
        clustering = model.clustering
        body.write(struct.pack("<B", 1 if clustering.mode == "explicit" else 0))
        body.write(struct.pack("<I", clustering.n_clusters))

        items = sorted(clustering.cluster_of.items())
        body.write(struct.pack("<I", len(items)))
        for uid, cluster in items:
            body.write(struct.pack("<II", uid, cluster))

        if clustering.centroids is not None:
            body.write(struct.pack("<B", 1))
            _write_array(body, clustering.centroids, "<f4")
        else:
            body.write(struct.pack("<B", 0))

        if clustering.mapping is not None:
            body.write(struct.pack("<B", 1))
            body.write(struct.pack("<I", clustering.mapping.n_categories))
            entries = sorted(clustering.mapping.category_of.items())
            body.write(struct.pack("<I", len(entries)))
            for symbol, index in entries:
                _write_str(body, symbol)
                body.write(struct.pack("<I", index))
        else:
            body.write(struct.pack("<B", 0))

        body.write(struct.pack("<I", len(model.bases.matrices)))
        body.write(struct.pack("<I", model.bases.total_budget))
        for matrix, accum in zip(model.bases.matrices, model.bases.accum):
            _write_array(body, matrix, "<f4")
            _write_array(body, accum, "<f4")

        body.write(struct.pack("<I", len(model.codes)))
        for uid in sorted(model.codes):
            code = model.codes[uid]
            body.write(struct.pack("<IIH", uid, code.cluster, code.nnz))
            _write_array(body, code.indices, "<u2")
            _write_array(body, code.values, "<f4")
            _write_array(body, code.accum, "<f4")

    payload = MAGIC + struct.pack("<I", FORMAT_VERSION) + body.getvalue()
    digest = hashlib.sha256(payload).digest()
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "wb") as handle:
        handle.write(payload)
        handle.write(digest)
    os.replace(tmp_path, path)


def load(path: str) -> ModelState:
    """Deserialize a state; raises ModelLoadError on any inconsistency."""
    with open(path, "rb") as handle:
        blob = handle.read()
    if len(blob) < len(MAGIC) + 4 + _CHECKSUM_BYTES:
        raise ModelLoadError("model file truncated")
    payload, digest = blob[:-_CHECKSUM_BYTES], blob[-_CHECKSUM_BYTES:]
    if hashlib.sha256(payload).digest() != digest:
        raise ModelLoadError("model file checksum mismatch")
    if payload[: len(MAGIC)] != MAGIC:
        raise ModelLoadError("not a model file (bad magic)")
    version = struct.unpack("<I", payload[len(MAGIC) : len(MAGIC) + 4])[0]
    if version != FORMAT_VERSION:
        raise ModelLoadError(f"unsupported model format version {version}")

    reader = _Reader(payload[len(MAGIC) + 4 :])
    header = json.loads(reader.str_())

    schemas = []
    for entry in header["schemas"]:
        entry = dict(entry)
        entry["origin"] = tuple(entry["origin"])
        schemas.append(AttributeSchema(**entry))
    registry = VocabRegistry(len(schemas))
    for schema in schemas:
        count = reader.u32()
        registry.restore(schema.attribute_id, [reader.str_() for _ in range(count)])

    train_cfg = TrainConfig(**header["train_cfg"])
    comp_cfg = CompressionConfig(**header["comp_cfg"])
    build_specs = {
        int(aid): AttributeBuildSpec(**spec) for aid, spec in header["build_specs"].items()
    }

    attributes: dict[int, AttributeModel] = {}
    for aid in header["modeled_attributes"]:
        explicit = struct.unpack("<B", reader.read(1))[0] == 1
        n_clusters = reader.u32()

        assignments = {}
        for _ in range(reader.u32()):
            uid, cluster = struct.unpack("<II", reader.read(8))
            assignments[uid] = cluster

        centroids = None
        if struct.unpack("<B", reader.read(1))[0] == 1:
            centroids = reader.array("<f4")

        mapping = None
        if struct.unpack("<B", reader.read(1))[0] == 1:
            n_categories = reader.u32()
            category_of = {}
            for _ in range(reader.u32()):
                symbol = reader.str_()
                category_of[symbol] = reader.u32()
            mapping = ExplicitMapping(category_of, n_categories)

        clustering = FixedClustering(
            aid,
            "explicit" if explicit else "implicit",
            n_clusters,
            centroids=centroids,
            mapping=mapping,
        )
        clustering.cluster_of = assignments

        n_matrices = reader.u32()
        budget = reader.u32()
        matrices = []
        accums = []
        for _ in range(n_matrices):
            matrices.append(reader.array("<f4"))
            accums.append(reader.array("<f4"))
        bases = BasisSet(matrices=matrices, accum=accums, total_budget=budget)

        codes: dict[int, SparseCode] = {}
        for _ in range(reader.u32()):
            uid, cluster, _nnz = struct.unpack("<IIH", reader.read(10))
            indices = reader.array("<u2").astype(np.int32)
            values = reader.array("<f4")
            accum = reader.array("<f4")
            codes[uid] = SparseCode(uid, cluster, indices, values, accum)

        attributes[aid] = AttributeModel(aid, clustering, bases, codes)

    return ModelState(
        schemas=schemas,
        registry=registry,
        train_cfg=train_cfg,
        comp_cfg=comp_cfg,
        attributes=attributes,
        cursor=header["cursor"],
        seed=header["seed"],
        uniform_allocation=header["uniform_allocation"],
        build_specs=build_specs,
    )


def states_equal(a: ModelState, b: ModelState) -> bool:
    """Field-by-field equality with bit-exact float comparison."""
    if (
        a.seed != b.seed
        or a.cursor != b.cursor
        or a.uniform_allocation != b.uniform_allocation
        or a.train_cfg != b.train_cfg
        or a.comp_cfg != b.comp_cfg
        or a.build_specs != b.build_specs
        or a.schemas != b.schemas
        or sorted(a.attributes) != sorted(b.attributes)
    ):
        return False
    for schema in a.schemas:
        if a.registry.symbols(schema.attribute_id) != b.registry.symbols(schema.attribute_id):
            return False
    for aid, model_a in a.attributes.items():
        model_b = b.attributes[aid]
        ca, cb = model_a.clustering, model_b.clustering
        if ca.mode != cb.mode or ca.n_clusters != cb.n_clusters or ca.cluster_of != cb.cluster_of:
            return False
        if (ca.centroids is None) != (cb.centroids is None):
            return False
        if ca.centroids is not None and not np.array_equal(ca.centroids, cb.centroids):
            return False
        if (ca.mapping is None) != (cb.mapping is None):
            return False
        if ca.mapping is not None and (
            ca.mapping.category_of != cb.mapping.category_of
            or ca.mapping.n_categories != cb.mapping.n_categories
        ):
            return False
        if model_a.bases.total_budget != model_b.bases.total_budget:
            return False
        if len(model_a.bases.matrices) != len(model_b.bases.matrices):
            return False
        for ma, mb in zip(model_a.bases.matrices, model_b.bases.matrices):
            if not np.array_equal(ma, mb):
                return False
        for aa, ab in zip(model_a.bases.accum, model_b.bases.accum):
            if not np.array_equal(aa, ab):
                return False
        if sorted(model_a.codes) != sorted(model_b.codes):
            return False
        for uid, code_a in model_a.codes.items():
            code_b = model_b.codes[uid]
            if (
                code_a.cluster != code_b.cluster
                or not np.array_equal(code_a.indices, code_b.indices)
                or not np.array_equal(code_a.values, code_b.values)
                or not np.array_equal(code_a.accum, code_b.accum)
            ):
                return False
    return True
