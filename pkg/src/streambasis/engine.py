"""Sequential streaming engine: pretrain, then per-window incremental learning.

Window lifecycle: hydrate dense vectors for the window's distinct units
(reconstructed for known units, seeded-random for new ones), train them
on the window's records, assign new units to their fixed clusters, fit
every window unit's sparse code (updating basis columns), then discard
the dense table. Only the compressed state survives between windows.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .codebook import (
    AttributeModel,
    CompressionConfig,
    ExplicitMapping,
    SparseCode,
    assign_cluster,
    build_attribute_model,
    fit_code,
    reconstruct,
)
from .seeding import TAG_PRETRAIN_INIT, TAG_TRAIN, TAG_WINDOW_INIT, make_rng
from .streams import AttributeSchema, Unit, UpdatingWindow, VocabRegistry
from .trainer import EmbeddingTable, TrainConfig, TrainResult, train_window

CODE_HEADER_BYTES = 6  # serialized per-unit overhead: u32 unit id + u16 nnz


@dataclass
class AttributeBuildSpec:
    """How to size one attribute's clusters and basis budget at pretrain."""

    clusters_fraction: float = 0.01
    basis_fraction: float = 0.10
    explicit_mapping_path: str | None = None

    def __post_init__(self) -> None:
        if not (0.0 < self.clusters_fraction <= 1.0):
            raise ValueError("clusters_fraction must be in (0, 1]")
        if not (0.0 < self.basis_fraction <= 1.0):
            raise ValueError("basis_fraction must be in (0, 1]")


@dataclass
class ModelState:
    """Everything that persists across windows."""

    schemas: list[AttributeSchema]
    registry: VocabRegistry
    train_cfg: TrainConfig
    comp_cfg: CompressionConfig
    attributes: dict[int, AttributeModel]
    cursor: int
    seed: int
    uniform_allocation: bool = False
    build_specs: dict[int, AttributeBuildSpec] = field(default_factory=dict)
    active_dense_bytes: int = 0

    def coded_units(self, attribute_id: int) -> list[int]:
        model = self.attributes.get(attribute_id)
        return sorted(model.codes) if model is not None else []

    def vector_for(self, unit: Unit) -> np.ndarray | None:
        model = self.attributes.get(unit.attribute_id)
        if model is None:
            return None
        return model.vector_for(unit.unit_id)


@dataclass
class MemoryReport:
    """Byte accounting of the persistent model, at 4 bytes per value."""

    codes: int
    bases: int
    assignments: int
    total: int
    dense_hypothetical: int
    dense_live: int

    @property
    def reduction_ratio(self) -> float:
        if self.dense_hypothetical == 0:
            return 0.0
        return self.total / self.dense_hypothetical


@dataclass
class WindowReport:
    """Per-window outcome of process_window."""

    window_id: int
    n_records: int
    new_units: dict[int, int] = field(default_factory=dict)
    epoch_losses: list[float] = field(default_factory=list)
    compression_loss_before: float = 0.0
    compression_loss_after: float = 0.0
    wall_ms: dict[str, float] = field(default_factory=dict)
    model_bytes: int = 0
    pairs_skipped: int = 0
    nonfinite_skipped: int = 0

    def to_json_dict(self) -> dict:
        return {
            "window_id": self.window_id,
            "n_records": self.n_records,
            "new_units": {str(k): v for k, v in sorted(self.new_units.items())},
            "epoch_losses": self.epoch_losses,
            "compression_loss_before": self.compression_loss_before,
            "compression_loss_after": self.compression_loss_after,
            "wall_ms": self.wall_ms,
            "model_bytes": self.model_bytes,
            "pairs_skipped": self.pairs_skipped,
            "nonfinite_skipped": self.nonfinite_skipped,
        }


@dataclass
class PretrainReport:
    n_windows: int = 0
    n_records: int = 0
    window_losses: list[tuple[int, float]] = field(default_factory=list)
    excluded_attributes: list[int] = field(default_factory=list)
    clipped_attributes: list[int] = field(default_factory=list)
    attribute_summary: dict[int, dict] = field(default_factory=dict)


def pretrain_dense(
    windows: Sequence[UpdatingWindow],
    train_cfg: TrainConfig,
    seed: int,
    report: PretrainReport | None = None,
) -> EmbeddingTable:
    """Train one persistent dense table across the pretrain windows."""
    table = EmbeddingTable(train_cfg.dim, (seed, TAG_PRETRAIN_INIT))
    for window in windows:
        for unit in window.distinct_units():
            table.ensure_vector(unit)
        result = train_window(
            window, table, train_cfg, make_rng(seed, TAG_TRAIN, window.window_id, 0)
        )
        if report is not None:
            report.n_windows += 1
            report.n_records += len(window.records)
            if result.epoch_losses:
                report.window_losses.append((window.window_id, result.epoch_losses[-1]))
    return table


def initialize_state(
    table: EmbeddingTable,
    registry: VocabRegistry,
    schemas: Sequence[AttributeSchema],
    train_cfg: TrainConfig,
    comp_cfg: CompressionConfig,
    build_specs: Mapping[int, AttributeBuildSpec],
    seed: int,
    cursor: int,
    uniform_allocation: bool = False,
    report: PretrainReport | None = None,
) -> ModelState:
    """Cluster the pretrained table and fit the initial compressed model."""
    by_attribute: dict[int, dict[int, np.ndarray]] = {}
    for unit, vec in table.vectors.items():
        by_attribute.setdefault(unit.attribute_id, {})[unit.unit_id] = vec

    attributes: dict[int, AttributeModel] = {}
    for schema in schemas:
        aid = schema.attribute_id
        embeddings = by_attribute.get(aid)
        if not embeddings:
            if report is not None:
                report.excluded_attributes.append(aid)
            continue
        spec = build_specs.get(aid, AttributeBuildSpec())
        n_units = len(embeddings)
        n_clusters = max(1, round(spec.clusters_fraction * n_units))
        budget = max(1, round(spec.basis_fraction * n_units))
        mapping = None
        symbol_fn = None
        if spec.explicit_mapping_path:
            mapping = ExplicitMapping.from_csv(spec.explicit_mapping_path)
            symbol_fn = lambda uid, _aid=aid: registry.symbol(_aid, uid)
        model, clipped = build_attribute_model(
            aid,
            embeddings,
            n_clusters=n_clusters,
            budget=budget,
            cfg=comp_cfg,
            seed=seed,
            symbol_fn=symbol_fn,
            mapping=mapping,
            uniform_allocation=uniform_allocation,
        )
        attributes[aid] = model
        if clipped and report is not None:
            report.clipped_attributes.append(aid)
        if report is not None:
            report.attribute_summary[aid] = {
                "units": n_units,
                "clusters": model.clustering.n_clusters,
                "budget": budget,
                "basis_counts": model.bases.counts(),
                "mode": model.clustering.mode,
            }

    return ModelState(
        schemas=list(schemas),
        registry=registry,
        train_cfg=train_cfg,
        comp_cfg=comp_cfg,
        attributes=attributes,
        cursor=cursor,
        seed=seed,
        uniform_allocation=uniform_allocation,
        build_specs=dict(build_specs),
    )


def pretrain(
    windows: Sequence[UpdatingWindow],
    registry: VocabRegistry,
    schemas: Sequence[AttributeSchema],
    train_cfg: TrainConfig,
    comp_cfg: CompressionConfig,
    build_specs: Mapping[int, AttributeBuildSpec],
    seed: int,
    uniform_allocation: bool = False,
) -> tuple[ModelState, PretrainReport]:
    """Dense pretraining over the given windows, then model initialization.

    The dense table is discarded; only the compressed state is returned.
    """
    if not windows or all(not w.records for w in windows):
        raise ValueError("pretrain requires at least one non-empty window")
    report = PretrainReport()
    table = pretrain_dense(windows, train_cfg, seed, report)
    state = initialize_state(
        table,
        registry,
        schemas,
        train_cfg,
        comp_cfg,
        build_specs,
        seed,
        cursor=windows[-1].window_id,
        uniform_allocation=uniform_allocation,
        report=report,
    )
    return state, report


def hydrate_costly(window: UpdatingWindow, state: ModelState) -> EmbeddingTable:
    """Dense table holding exactly the window's distinct units.

    Known (coded) units are reconstructed from the compressed model; new
    units get seeded random vectors.
    """
    table = EmbeddingTable(
        state.train_cfg.dim, (state.seed, TAG_WINDOW_INIT, window.window_id)
    )
    for unit in window.distinct_units():
        model = state.attributes.get(unit.attribute_id)
        code = model.codes.get(unit.unit_id) if model is not None else None
        if code is not None:
            table.set_vector(unit, reconstruct(code, model.bases))
        else:
            table.ensure_vector(unit)
    return table


def compress_into_state(
    state: ModelState,
    window_id: int,
    trained: Mapping[Unit, np.ndarray],
    report: WindowReport,
) -> None:
    """Assign clusters to new units and refit codes from trained vectors.

    This is the single-writer compression phase shared by the sequential
    and the fork-join paths; units are processed in sorted order so the
    basis update sequence is well defined.
    """
    t0 = time.perf_counter()
    for unit in sorted(trained):
        model = state.attributes.get(unit.attribute_id)
        if model is None:
            continue
        if unit.unit_id not in model.clustering.cluster_of:
            vec = trained[unit]
            if model.clustering.mode == "explicit":
                symbol = state.registry.symbol(unit.attribute_id, unit.unit_id)
                cluster = model.clustering.mapping.cluster_for_symbol(symbol)
            else:
                cluster = assign_cluster(vec, model.clustering)
            model.clustering.assign(unit.unit_id, cluster)
            basis_count = model.bases.matrices[cluster].shape[1]
            model.codes[unit.unit_id] = SparseCode.zero(unit.unit_id, cluster, basis_count)
            report.new_units[unit.attribute_id] = report.new_units.get(unit.attribute_id, 0) + 1
    report.wall_ms["assign"] = (time.perf_counter() - t0) * 1000.0

    t0 = time.perf_counter()
    before = 0.0
    after = 0.0
    for unit in sorted(trained):
        model = state.attributes.get(unit.attribute_id)
        if model is None:
            continue
        result = fit_code(
            model.codes[unit.unit_id],
            trained[unit],
            model.bases,
            state.comp_cfg,
            update_basis=True,
        )
        before += result.loss_before
        after += result.loss_after
    report.compression_loss_before = before
    report.compression_loss_after = after
    report.wall_ms["compress"] = (time.perf_counter() - t0) * 1000.0


def process_window(
    window: UpdatingWindow,
    state: ModelState,
) -> WindowReport:
    """Run the full window lifecycle sequentially and advance the cursor."""
    report = WindowReport(window_id=window.window_id, n_records=len(window.records))
    if not window.records:
        state.cursor = window.window_id
        report.model_bytes = memory_report(state).total
        return report

    t0 = time.perf_counter()
    table = hydrate_costly(window, state)
    state.active_dense_bytes = table.nbytes_dense()
    report.wall_ms["hydrate"] = (time.perf_counter() - t0) * 1000.0

    t0 = time.perf_counter()
    result: TrainResult = train_window(
        window, table, state.train_cfg, make_rng(state.seed, TAG_TRAIN, window.window_id, 0)
    )
    report.epoch_losses = result.epoch_losses
    report.pairs_skipped = result.pairs_skipped
    report.nonfinite_skipped = table.skipped_nonfinite
    report.wall_ms["train"] = (time.perf_counter() - t0) * 1000.0

    compress_into_state(state, window.window_id, table.vectors, report)

    del table
    state.active_dense_bytes = 0
    state.cursor = window.window_id
    report.model_bytes = memory_report(state).total
    return report


def memory_report(state: ModelState) -> MemoryReport:
    """Byte breakdown of the persistent model vs the dense alternative.

    Only representation parameters count (codes, bases, assignments and
    centroids); fitting accumulators are training state, not model. The
    hypothetical dense table covers every vocabulary unit of the modeled
    attributes at dim * 4 bytes each.
    """
    codes = 0
    bases = 0
    assignments = 0
    dense_hypothetical = 0
    for aid, model in state.attributes.items():
        codes += model.code_nbytes(per_unit_header=CODE_HEADER_BYTES)
        bases += model.bases.nbytes()
        assignments += model.assignment_nbytes()
        dense_hypothetical += state.registry.size(aid) * state.train_cfg.dim * 4
    total = codes + bases + assignments
    return MemoryReport(
        codes=codes,
        bases=bases,
        assignments=assignments,
        total=total,
        dense_hypothetical=dense_hypothetical,
        dense_live=state.active_dense_bytes,
    )


def hypothetical_dense_bytes(n_units: int, dim: int) -> int:
    """Conventional table size: one dim-vector of 4-byte floats per unit."""
    return n_units * dim * 4
