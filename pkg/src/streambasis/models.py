"""Streaming model adapters for the evaluation protocol.

Every adapter answers vector_for / seen_units / model_bytes against the
state it has built from the windows observed so far, so the protocol
can compare the compressed engine and the baselines head to head.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
import multiprocessing
import time
from typing import Mapping, Sequence

import numpy as np

from . import engine, parallel
from .baselines import HashedEmbeddingTable, hash_divisor, quantize_table
from .codebook import CompressionConfig
from .engine import AttributeBuildSpec, ModelState
from .seeding import TAG_PRETRAIN_INIT, TAG_TRAIN, make_rng
from .streams import AttributeSchema, Unit, UpdatingWindow, VocabRegistry
from .trainer import EmbeddingTable, TrainConfig, train_window


class CompressedStreamModel:
    """The cluster-shared-basis engine behind the eval interface."""

    def __init__(
        self,
        schemas: Sequence[AttributeSchema],
        registry: VocabRegistry,
        train_cfg: TrainConfig,
        comp_cfg: CompressionConfig,
        build_specs: Mapping[int, AttributeBuildSpec],
        seed: int,
        uniform_allocation: bool = False,
        workers: int = 1,
        merge_policy: str = parallel.MERGE_MEAN,
    ) -> None:
        self.name = "compressed" if workers == 1 else f"compressed-p{workers}"
        self.schemas = list(schemas)
        self.registry = registry
        self.train_cfg = train_cfg
        self.comp_cfg = comp_cfg
        self.build_specs = dict(build_specs)
        self.seed = seed
        self.uniform_allocation = uniform_allocation
        self.workers = workers
        self.merge_policy = merge_policy
        self.state: ModelState | None = None
        self.window_reports: list[engine.WindowReport] = []
        self.observe_seconds = 0.0
        self.observed_records = 0
        self._executor: ProcessPoolExecutor | None = None

    def pretrain(self, windows: Sequence[UpdatingWindow]) -> None:
        self.state, self.pretrain_report = engine.pretrain(
            windows,
            self.registry,
            self.schemas,
            self.train_cfg,
            self.comp_cfg,
            self.build_specs,
            self.seed,
            uniform_allocation=self.uniform_allocation,
        )

    def observe_window(self, window: UpdatingWindow) -> None:
        assert self.state is not None, "pretrain before observing windows"
        started = time.perf_counter()
        if self.workers == 1:
            report = engine.process_window(window, self.state)
        else:
            report = parallel.process_window_parallel(
                window,
                self.state,
                self.workers,
                merge_policy=self.merge_policy,
                executor=self._ensure_executor(),
            )
        self.observe_seconds += time.perf_counter() - started
        self.observed_records += len(window.records)
        self.window_reports.append(report)

    def vector_for(self, unit: Unit) -> np.ndarray | None:
        return self.state.vector_for(unit) if self.state is not None else None

    def seen_units(self, attribute_id: int) -> Sequence[int]:
        return self.state.coded_units(attribute_id) if self.state is not None else []

    def model_bytes(self) -> int:
        return engine.memory_report(self.state).total if self.state is not None else 0

    def _ensure_executor(self) -> ProcessPoolExecutor:
        if self._executor is None:
            self._executor = ProcessPoolExecutor(
                max_workers=self.workers,
                mp_context=multiprocessing.get_context("fork"),
            )
        return self._executor

    def close(self) -> None:
        if self._executor is not None:
            self._executor.shutdown()
            self._executor = None

    def __enter__(self) -> "CompressedStreamModel":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


class DenseStreamModel:
    """Conventional per-unit table, trained incrementally (no compression).

    Run at full width this is the quality reference; at a smaller width
    it is the dimension-reduction baseline.
    """

    def __init__(self, train_cfg: TrainConfig, seed: int, name: str = "dense") -> None:
        self.name = name
        self.train_cfg = train_cfg
        self.seed = seed
        self.table = EmbeddingTable(train_cfg.dim, (seed, TAG_PRETRAIN_INIT))
        self.observe_seconds = 0.0
        self.observed_records = 0

    def pretrain(self, windows: Sequence[UpdatingWindow]) -> None:
        for window in windows:
            self._train(window)

    def observe_window(self, window: UpdatingWindow) -> None:
        started = time.perf_counter()
        # Accumulators reset per window, mirroring the engine's rebuilt tables.
        self.table.reset_accumulators()
        self._train(window)
        self.observe_seconds += time.perf_counter() - started
        self.observed_records += len(window.records)

    def _train(self, window: UpdatingWindow) -> None:
        for unit in window.distinct_units():
            self.table.ensure_vector(unit)
        train_window(
            window,
            self.table,
            self.train_cfg,
            make_rng(self.seed, TAG_TRAIN, window.window_id, 0),
        )

    def vector_for(self, unit: Unit) -> np.ndarray | None:
        return self.table.vectors.get(unit)

    def seen_units(self, attribute_id: int) -> Sequence[int]:
        return sorted(u.unit_id for u in self.table.vectors if u.attribute_id == attribute_id)

    def model_bytes(self) -> int:
        return self.table.nbytes_dense()


def dim_reduct_model(train_cfg: TrainConfig, dim: int, seed: int) -> DenseStreamModel:
    """Dimension-reduction preset: the dense trainer at a smaller width."""
    return DenseStreamModel(replace(train_cfg, dim=dim), seed, name=f"dim-reduct-{dim}")


class QuantizedStreamModel(DenseStreamModel):
    """Dense training with read-time m-bit quantization (post-processing)."""

    def __init__(self, train_cfg: TrainConfig, seed: int, bits: int) -> None:
        super().__init__(train_cfg, seed, name=f"quantize-{bits}bit")
        self.bits = bits
        self._quantized = None

    def observe_window(self, window: UpdatingWindow) -> None:
        super().observe_window(window)
        self._quantized = None

    def pretrain(self, windows: Sequence[UpdatingWindow]) -> None:
        super().pretrain(windows)
        self._quantized = None

    def _snapshot(self):
        if self._quantized is None and self.table.vectors:
            self._quantized = quantize_table(self.table, self.bits)
        return self._quantized

    def vector_for(self, unit: Unit) -> np.ndarray | None:
        snapshot = self._snapshot()
        return snapshot.vector_for(unit) if snapshot is not None else None

    def model_bytes(self) -> int:
        snapshot = self._snapshot()
        return snapshot.nbytes() if snapshot is not None else 0


class HashedStreamModel:
    """Hash-trick baseline: units share modulo-assigned slot vectors.

    Divisors are fixed from the pretrain vocabulary (gamma times the
    units seen then), matching how the engine sizes its basis budget.
    """

    def __init__(self, train_cfg: TrainConfig, seed: int, gamma: float) -> None:
        self.name = f"hash-trick-{gamma:g}"
        self.train_cfg = train_cfg
        self.seed = seed
        self.gamma = gamma
        self.table: HashedEmbeddingTable | None = None
        self._pretrain_units: dict[int, set[int]] = {}
        self.observe_seconds = 0.0
        self.observed_records = 0

    def set_divisors(self, divisors: Mapping[int, int]) -> None:
        """Pin slot counts directly (used for budget-matched comparisons)."""
        self.table = HashedEmbeddingTable(
            self.train_cfg.dim, (self.seed, TAG_PRETRAIN_INIT), dict(divisors)
        )

    def pretrain(self, windows: Sequence[UpdatingWindow]) -> None:
        if self.table is None:
            for window in windows:
                for unit in window.distinct_units():
                    self._pretrain_units.setdefault(unit.attribute_id, set()).add(unit.unit_id)
            divisors = {
                aid: hash_divisor(len(units), self.gamma)
                for aid, units in self._pretrain_units.items()
            }
            self.set_divisors(divisors)
        for window in windows:
            self._train(window)

    def observe_window(self, window: UpdatingWindow) -> None:
        assert self.table is not None, "pretrain before observing windows"
        started = time.perf_counter()
        self.table.reset_accumulators()
        self._train(window)
        self.observe_seconds += time.perf_counter() - started
        self.observed_records += len(window.records)

    def _train(self, window: UpdatingWindow) -> None:
        for unit in window.distinct_units():
            self.table.ensure_vector(unit)
        train_window(
            window,
            self.table,
            self.train_cfg,
            make_rng(self.seed, TAG_TRAIN, window.window_id, 0),
        )

    def vector_for(self, unit: Unit) -> np.ndarray | None:
        if self.table is None or unit not in self.table.vectors:
            return None
        return self.table.vectors[unit]

    def seen_units(self, attribute_id: int) -> Sequence[int]:
        if self.table is None:
            return []
        return sorted(u.unit_id for u in self.table.vectors if u.attribute_id == attribute_id)

    def model_bytes(self) -> int:
        return self.table.nbytes_dense() if self.table is not None else 0
