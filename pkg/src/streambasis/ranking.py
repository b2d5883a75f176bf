"""Retrieval evaluation: candidate-pool ranking with MRR and Recall@k.

Each test record yields queries: one unit of the target attribute is
the ground truth, the record's remaining units are the context, and the
truth is mixed with sampled negatives. Candidates are ranked by mean
cosine similarity to the context; quality aggregates over query windows
sampled from the second half of the stream, with the model trained only
on records that arrived before each query window.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from .seeding import TAG_EVAL_NEGATIVES, TAG_EVAL_SAMPLE, make_rng
from .streams import Unit, UpdatingWindow
from .trainer import _sample_excluding

TIE_OPTIMISTIC = "optimistic"
TIE_PESSIMISTIC = "pessimistic"


class ProtocolError(ValueError):
    """Raised for unsatisfiable evaluation parameters."""


class EvalModel(Protocol):
    """What the protocol needs from a model under evaluation."""

    name: str

    def pretrain(self, windows: Sequence[UpdatingWindow]) -> None: ...

    def observe_window(self, window: UpdatingWindow) -> None: ...

    def vector_for(self, unit: Unit) -> np.ndarray | None: ...

    def seen_units(self, attribute_id: int) -> Sequence[int]: ...

    def model_bytes(self) -> int: ...


@dataclass
class Query:
    query_id: int
    target: Unit
    context: tuple[Unit, ...]
    candidates: tuple[Unit, ...]  # contains the target exactly once

    @property
    def attribute_id(self) -> int:
        return self.target.attribute_id


@dataclass
class RankingResult:
    query_id: int
    rank: int
    scores: dict[Unit, float]


@dataclass
class BuildStats:
    skipped_no_target: int = 0
    skipped_no_context: int = 0
    skipped_target_unseen: int = 0


def build_queries(
    window: UpdatingWindow,
    target_attribute: int,
    n_negatives: int,
    pool: Sequence[int],
    rng: np.random.Generator,
    stats: BuildStats | None = None,
) -> list[Query]:
    """One query per target-attribute unit occurrence in the window.

    Negatives are drawn uniformly without replacement from ``pool``
    (unit ids of the target attribute seen before the window), excluding
    the target and the record's other units of the same attribute.
    Records without a target-attribute unit or without context are
    skipped and counted.
    """
    if stats is None:
        stats = BuildStats()
    pool_arr = np.array(sorted(pool), dtype=np.int64)
    pool_set = set(int(u) for u in pool)
    queries: list[Query] = []
    for record in window.records:
        targets = [u for u in record.units if u.attribute_id == target_attribute]
        if not targets:
            stats.skipped_no_target += 1
            continue
        same_attr_ids = {u.unit_id for u in targets}
        for target in targets:
            context = tuple(u for u in record.units if u != target)
            if not context:
                stats.skipped_no_context += 1
                continue
            if target.unit_id not in pool_set:
                stats.skipped_target_unseen += 1
                continue
            if len(pool_arr) - len(same_attr_ids & pool_set) < n_negatives:
                raise ProtocolError(
                    f"attribute {target_attribute} pool too small for {n_negatives} negatives"
                )
            drawn = _sample_excluding(same_attr_ids, n_negatives, pool_arr, rng)
            if drawn is None or drawn[1]:
                raise ProtocolError(
                    f"attribute {target_attribute} pool too small for {n_negatives} negatives"
                )
            negatives = tuple(Unit(target_attribute, uid) for uid in drawn[0])
            queries.append(
                Query(
                    query_id=len(queries),
                    target=target,
                    context=context,
                    candidates=(target,) + negatives,
                )
            )
    return queries


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(a @ b) / (na * nb)


def rank_candidates(
    query: Query,
    vector_for: Callable[[Unit], np.ndarray | None],
    tie_break: str = TIE_OPTIMISTIC,
) -> RankingResult | None:
    """Rank the pool by mean cosine to the context; None drops the query.

    score(c) = mean over context units u of cos(v_c, v_u). Rank counts
    candidates scoring strictly above the truth (ties favor the truth);
    pessimistic tie-breaking counts ties against it instead.
    """
    context_vecs = []
    for unit in query.context:
        vec = vector_for(unit)
        if vec is None:
            return None
        context_vecs.append(vec)
    scores: dict[Unit, float] = {}
    for candidate in query.candidates:
        vec = vector_for(candidate)
        if vec is None:
            return None
        scores[candidate] = float(
            np.mean([_cosine(vec, ctx) for ctx in context_vecs])
        )
    target_score = scores[query.target]
    if tie_break == TIE_OPTIMISTIC:
        rank = 1 + sum(
            1 for c, s in scores.items() if c != query.target and s > target_score
        )
    elif tie_break == TIE_PESSIMISTIC:
        rank = 1 + sum(
            1 for c, s in scores.items() if c != query.target and s >= target_score
        )
    else:
        raise ValueError(f"unknown tie_break {tie_break!r}")
    return RankingResult(query_id=query.query_id, rank=rank, scores=scores)


def mrr(results: Sequence[RankingResult]) -> float:
    """Mean reciprocal rank over the query set."""
    if not results:
        raise ProtocolError("mrr of an empty result set is undefined")
    return float(np.mean([1.0 / r.rank for r in results]))


def recall_at_k(results: Sequence[RankingResult], k: int) -> float:
    """Fraction of queries with rank <= k (= mean of min(1, floor(k/rank)))."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not results:
        raise ProtocolError("recall of an empty result set is undefined")
    return float(np.mean([1.0 if r.rank <= k else 0.0 for r in results]))


@dataclass
class WindowEvalRow:
    window_id: int
    n_queries: int
    n_dropped: int
    mrr: float
    recalls: dict[int, float] = field(default_factory=dict)


@dataclass
class ProtocolReport:
    model_name: str
    query_windows: list[int]
    rows: list[WindowEvalRow] = field(default_factory=list)
    overall_mrr: float = 0.0
    overall_recalls: dict[int, float] = field(default_factory=dict)
    n_queries: int = 0
    n_dropped: int = 0
    model_bytes: int = 0


def run_protocol(
    windows: Sequence[UpdatingWindow],
    pretrain_count: int,
    model: EvalModel,
    target_attribute: int,
    n_query_windows: int,
    n_negatives: int,
    recall_ks: Sequence[int],
    seed: int,
    tie_break: str = TIE_OPTIMISTIC,
) -> ProtocolReport:
    """Single incremental pass with held-out query windows.

    Query windows are sampled (seeded) from the non-empty windows after
    the pretrain split; each is evaluated before its records are used
    for training, so nothing arriving at or after a query window's start
    influences the parameters that answer it.
    """
    stream = list(windows[pretrain_count:])
    candidates = [w.window_id for w in stream if w.records]
    if n_query_windows > len(candidates):
        raise ProtocolError(
            f"asked for {n_query_windows} query windows, only {len(candidates)} available"
        )
    sampler = make_rng(seed, TAG_EVAL_SAMPLE)
    picked = sorted(
        int(candidates[i])
        for i in sampler.choice(len(candidates), size=n_query_windows, replace=False)
    )
    picked_set = set(picked)

    model.pretrain(windows[:pretrain_count])

    report = ProtocolReport(model_name=model.name, query_windows=picked)
    all_results: list[RankingResult] = []
    for window in stream:
        if window.window_id in picked_set:
            rng = make_rng(seed, TAG_EVAL_NEGATIVES, window.window_id)
            stats = BuildStats()
            queries = build_queries(
                window,
                target_attribute,
                n_negatives,
                model.seen_units(target_attribute),
                rng,
                stats,
            )
            results = []
            dropped = stats.skipped_target_unseen
            for query in queries:
                ranked = rank_candidates(query, model.vector_for, tie_break)
                if ranked is None:
                    dropped += 1
                else:
                    results.append(ranked)
            row = WindowEvalRow(
                window_id=window.window_id,
                n_queries=len(results),
                n_dropped=dropped,
                mrr=mrr(results) if results else 0.0,
                recalls={k: recall_at_k(results, k) if results else 0.0 for k in recall_ks},
            )
            report.rows.append(row)
            all_results.extend(results)
        model.observe_window(window)

    report.n_queries = len(all_results)
    report.n_dropped = sum(r.n_dropped for r in report.rows)
    if all_results:
        report.overall_mrr = mrr(all_results)
        report.overall_recalls = {k: recall_at_k(all_results, k) for k in recall_ks}
    report.model_bytes = model.model_bytes()
    return report
