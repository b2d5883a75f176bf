"""Fork-join window processing: shared-nothing workers, central compression.

Per window, records are split round-robin over p workers. Each worker
hydrates dense vectors for its shard from a read-only snapshot of the
compressed model, trains them, and returns the trained fragment by
value. Fragments are merged (conflicts averaged) and a single writer
runs the assign-and-compress phase. At p=1 the pipeline is bit-exact
with the sequential engine.
"""

from __future__ import annotations

import time
import zlib
from concurrent.futures import Executor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import engine
from .engine import ModelState, WindowReport
from .seeding import TAG_TRAIN, TAG_WINDOW_INIT, make_rng
from .streams import Record, Unit, UpdatingWindow
from .trainer import EmbeddingTable, train_window

MERGE_MEAN = "mean"
MERGE_COUNT_WEIGHTED = "count_weighted"


class SnapshotViolation(RuntimeError):
    """Raised when the model changed while workers were running."""


@dataclass
class BenchRow:
    workers: int
    ms_per_record: float
    mrr: float


@dataclass
class ShardPlan:
    workers: int
    assignment: list[int]  # record index -> worker id

    def shards(self, records: Sequence[Record]) -> list[list[Record]]:
        shards: list[list[Record]] = [[] for _ in range(self.workers)]
        for index, worker in enumerate(self.assignment):
            shards[worker].append(records[index])
        return shards


def shard_window(window: UpdatingWindow, workers: int) -> ShardPlan:
    """Round-robin assignment of the window's records by arrival order."""
    if workers < 1:
        raise ValueError("worker count must be >= 1")
    return ShardPlan(workers, [i % workers for i in range(len(window.records))])


@dataclass
class WorkerResult:
    worker_id: int
    vectors: dict[Unit, np.ndarray] = field(default_factory=dict)
    update_counts: dict[Unit, int] = field(default_factory=dict)
    wall_seconds: float = 0.0


def worker_run(
    records: Sequence[Record],
    window_id: int,
    state: ModelState,
    worker_id: int,
) -> WorkerResult:
    """Hydrate and train one shard against the read-only snapshot.

    New-unit vectors derive from (seed, window, unit), so every worker
    initializes a shared new unit identically. Update counts are the
    unit's shard record occurrences (the deterministic proxy used for
    count-weighted merging).
    """
    started = time.perf_counter()
    result = WorkerResult(worker_id=worker_id)
    if not records:
        return result
    shard = UpdatingWindow(window_id, 0.0, 1.0, list(records))
    table = EmbeddingTable(state.train_cfg.dim, (state.seed, TAG_WINDOW_INIT, window_id))
    for unit in shard.distinct_units():
        model = state.attributes.get(unit.attribute_id)
        code = model.codes.get(unit.unit_id) if model is not None else None
        if code is not None:
            table.set_vector(unit, engine.reconstruct(code, model.bases))
        else:
            table.ensure_vector(unit)
    train_window(
        shard, table, state.train_cfg, make_rng(state.seed, TAG_TRAIN, window_id, worker_id)
    )
    result.vectors = table.vectors
    counts: dict[Unit, int] = {}
    for record in records:
        for unit in record.units:
            counts[unit] = counts.get(unit, 0) + 1
    result.update_counts = counts
    result.wall_seconds = time.perf_counter() - started
    return result


def merge_updates(
    results: Sequence[WorkerResult],
    policy: str = MERGE_MEAN,
) -> dict[Unit, np.ndarray]:
    """Combine worker fragments; conflicting units are averaged.

    Fragments are consumed in worker-id order so the floating-point
    summation order, and therefore the merge, is permutation-invariant.
    """
    if policy not in (MERGE_MEAN, MERGE_COUNT_WEIGHTED):
        raise ValueError(f"unknown merge policy {policy!r}")
    ordered = sorted(results, key=lambda r: r.worker_id)
    dim: int | None = None
    fragments: dict[Unit, list[tuple[np.ndarray, float]]] = {}
    for result in ordered:
        for unit, vec in result.vectors.items():
            if dim is None:
                dim = len(vec)
            elif len(vec) != dim:
                raise ValueError(f"worker {result.worker_id} returned a {len(vec)}-dim vector")
            count = float(result.update_counts.get(unit, 0))
            fragments.setdefault(unit, []).append((vec, count))
    merged: dict[Unit, np.ndarray] = {}
    for unit, parts in fragments.items():
        if len(parts) == 1:
            merged[unit] = parts[0][0].copy()
            continue
        if policy == MERGE_COUNT_WEIGHTED and sum(c for _, c in parts) > 0.0:
            total_weight = sum(c for _, c in parts)
            acc = np.zeros(dim)
            for vec, count in parts:
                acc += count * vec
            merged[unit] = acc / total_weight
        else:
            acc = np.zeros(dim)
            for vec, _ in parts:
                acc += vec
            merged[unit] = acc / len(parts)
    return merged


def central_compress(
    merged: Mapping[Unit, np.ndarray],
    state: ModelState,
    window_id: int,
    report: WindowReport,
) -> None:
    """Single-writer assign-and-fit phase over the merged table."""
    engine.compress_into_state(state, window_id, merged, report)


def state_checksum(state: ModelState) -> int:
    """CRC over the compressed model's arrays (snapshot-isolation guard)."""
    crc = 0
    for aid in sorted(state.attributes):
        model = state.attributes[aid]
        for matrix in model.bases.matrices:
            crc = zlib.crc32(np.ascontiguousarray(matrix).tobytes(), crc)
        if model.clustering.centroids is not None:
            crc = zlib.crc32(np.ascontiguousarray(model.clustering.centroids).tobytes(), crc)
        for uid in sorted(model.codes):
            code = model.codes[uid]
            crc = zlib.crc32(code.indices.tobytes(), crc)
            crc = zlib.crc32(code.values.tobytes(), crc)
        crc = zlib.crc32(str(sorted(model.clustering.cluster_of.items())).encode(), crc)
    return crc


def _worker_entry(payload: tuple) -> WorkerResult:
    records, window_id, state, worker_id = payload
    return worker_run(records, window_id, state, worker_id)


def process_window_parallel(
    window: UpdatingWindow,
    state: ModelState,
    workers: int,
    merge_policy: str = MERGE_MEAN,
    executor: Executor | None = None,
) -> WindowReport:
    """Fork-join counterpart of engine.process_window.

    Without an executor the workers run inline (same results, no
    concurrency); with one they run as separate processes. The model is
    checksummed around the fork to enforce snapshot isolation.
    """
    report = WindowReport(window_id=window.window_id, n_records=len(window.records))
    if not window.records:
        state.cursor = window.window_id
        report.model_bytes = engine.memory_report(state).total
        return report

    plan = shard_window(window, workers)
    shards = plan.shards(window.records)
    before = state_checksum(state)

    t0 = time.perf_counter()
    payloads = [
        (shard, window.window_id, state, worker_id)
        for worker_id, shard in enumerate(shards)
    ]
    if executor is None:
        results = [_worker_entry(payload) for payload in payloads]
    else:
        results = list(executor.map(_worker_entry, payloads))
    report.wall_ms["train"] = (time.perf_counter() - t0) * 1000.0

    if state_checksum(state) != before:
        raise SnapshotViolation(
            f"model mutated during worker phase of window {window.window_id}"
        )

    t0 = time.perf_counter()
    merged = merge_updates(results, merge_policy)
    report.wall_ms["merge"] = (time.perf_counter() - t0) * 1000.0

    central_compress(merged, state, window.window_id, report)
    state.active_dense_bytes = 0
    state.cursor = window.window_id
    report.model_bytes = engine.memory_report(state).total
    return report


def throughput_bench(
    windows: Sequence[UpdatingWindow],
    pretrain_count: int,
    model_factory,
    p_values: Sequence[int],
    target_attribute: int,
    n_query_windows: int,
    n_negatives: int,
    recall_ks: Sequence[int],
    seed: int,
) -> list[BenchRow]:
    """Per worker count: mean window-processing ms/record plus final MRR.

    The timing covers the window lifecycle only (hydrate, train, merge,
    compress); evaluation happens between windows and is excluded.
    ``model_factory(p)`` must build a fresh model that tracks its
    observe_seconds / observed_records.
    """
    from .ranking import run_protocol

    if len(set(p_values)) < 2:
        raise ValueError("throughput_bench needs at least two distinct worker counts")
    rows: list[BenchRow] = []
    for p in p_values:
        model = model_factory(p)
        try:
            report = run_protocol(
                windows,
                pretrain_count,
                model,
                target_attribute,
                n_query_windows,
                n_negatives,
                recall_ks,
                seed,
            )
            ms = 1000.0 * model.observe_seconds / max(1, model.observed_records)
            rows.append(BenchRow(workers=p, ms_per_record=ms, mrr=report.overall_mrr))
        finally:
            close = getattr(model, "close", None)
            if close is not None:
                close()
    return rows
