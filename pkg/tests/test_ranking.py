"""Query construction, cosine ranking, MRR/Recall@k, and the protocol."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streambasis.ranking import (
    BuildStats,
    ProtocolError,
    Query,
    RankingResult,
    build_queries,
    mrr,
    rank_candidates,
    recall_at_k,
    run_protocol,
)
from streambasis.seeding import make_rng
from streambasis.streams import Record, Unit, UpdatingWindow


def vector_source(mapping: dict[Unit, list[float]]):
    arrays = {u: np.array(v, dtype=np.float64) for u, v in mapping.items()}
    return lambda unit: arrays.get(unit)


class TestBuildQueries:
    def window(self, records) -> UpdatingWindow:
        return UpdatingWindow(0, 0.0, 10.0, records)

    def test_basic_query_shape(self):
        record = Record(0.0, (Unit(0, 3), Unit(1, 7)))
        queries = build_queries(
            self.window([record]), 1, 2, pool=[5, 6, 7, 8], rng=make_rng(0)
        )
        assert len(queries) == 1
        query = queries[0]
        assert query.target == Unit(1, 7)
        assert query.context == (Unit(0, 3),)
        assert len(query.candidates) == 3
        assert query.candidates.count(Unit(1, 7)) == 1
        assert all(c.attribute_id == 1 for c in query.candidates)
        assert Unit(1, 7) not in query.candidates[1:]

    def test_record_without_target_attribute_skipped(self):
        record = Record(0.0, (Unit(0, 1), Unit(0, 2)))
        stats = BuildStats()
        queries = build_queries(self.window([record]), 1, 2, [0, 1, 2], make_rng(0), stats)
        assert queries == []
        assert stats.skipped_no_target == 1

    def test_multi_target_basket_one_query_each(self):
        record = Record(0.0, (Unit(0, 1), Unit(1, 5), Unit(1, 6)))
        queries = build_queries(self.window([record]), 1, 2, list(range(10)), make_rng(0))
        assert len(queries) == 2
        targets = {q.target for q in queries}
        assert targets == {Unit(1, 5), Unit(1, 6)}
        for query in queries:
            # The other same-attribute unit joins the context and is excluded
            # from the negatives.
            assert len(query.context) == 2
            for negative in query.candidates[1:]:
                assert negative.unit_id not in (5, 6)

    def test_unseen_target_skipped(self):
        record = Record(0.0, (Unit(0, 1), Unit(1, 99)))
        stats = BuildStats()
        queries = build_queries(self.window([record]), 1, 2, [0, 1, 2], make_rng(0), stats)
        assert queries == []
        assert stats.skipped_target_unseen == 1

    def test_pool_too_small_is_error(self):
        record = Record(0.0, (Unit(0, 1), Unit(1, 0)))
        with pytest.raises(ProtocolError):
            build_queries(self.window([record]), 1, 5, [0, 1, 2], make_rng(0))

    def test_default_pool_size_is_eleven(self):
        record = Record(0.0, (Unit(0, 1), Unit(1, 7)))
        queries = build_queries(self.window([record]), 1, 10, list(range(40)), make_rng(0))
        assert len(queries[0].candidates) == 11


def query_of(target: Unit, context: tuple[Unit, ...], negatives: tuple[Unit, ...]) -> Query:
    return Query(0, target, context, (target,) + negatives)


class TestRankCandidates:
    def test_aligned_target_ranks_first(self):
        target, ctx, n1, n2 = Unit(1, 0), Unit(0, 0), Unit(1, 1), Unit(1, 2)
        source = vector_source({
            target: [1.0, 0.0], ctx: [1.0, 0.0], n1: [0.0, 1.0], n2: [0.0, -1.0],
        })
        result = rank_candidates(query_of(target, (ctx,), (n1, n2)), source)
        assert result.rank == 1

    def test_identical_candidates_tie_to_truth(self):
        target, ctx, n1 = Unit(1, 0), Unit(0, 0), Unit(1, 1)
        source = vector_source({target: [1.0, 1.0], ctx: [1.0, 0.0], n1: [1.0, 1.0]})
        assert rank_candidates(query_of(target, (ctx,), (n1,)), source).rank == 1
        assert rank_candidates(
            query_of(target, (ctx,), (n1,)), source, tie_break="pessimistic"
        ).rank == 2

    def test_two_better_gives_rank_three(self):
        # cosines to the single context: target 0.2, n1 0.9, n2 0.5
        angles = {"t": math.acos(0.2), "n1": math.acos(0.9), "n2": math.acos(0.5)}
        target, ctx = Unit(1, 0), Unit(0, 0)
        n1, n2 = Unit(1, 1), Unit(1, 2)
        source = vector_source({
            ctx: [1.0, 0.0],
            target: [math.cos(angles["t"]), math.sin(angles["t"])],
            n1: [math.cos(angles["n1"]), math.sin(angles["n1"])],
            n2: [math.cos(angles["n2"]), math.sin(angles["n2"])],
        })
        result = rank_candidates(query_of(target, (ctx,), (n1, n2)), source)
        assert result.rank == 3

    def test_zero_vector_scores_zero(self):
        target, ctx, n1 = Unit(1, 0), Unit(0, 0), Unit(1, 1)
        source = vector_source({target: [0.0, 0.0], ctx: [1.0, 0.0], n1: [-1.0, 0.0]})
        result = rank_candidates(query_of(target, (ctx,), (n1,)), source)
        assert result.scores[target] == 0.0
        assert result.rank == 1  # 0 beats the negative's -1

    def test_unresolvable_unit_drops_query(self):
        target, ctx, n1 = Unit(1, 0), Unit(0, 0), Unit(1, 1)
        source = vector_source({target: [1.0, 0.0], ctx: [1.0, 0.0]})
        assert rank_candidates(query_of(target, (ctx,), (n1,)), source) is None

    def test_mean_over_context(self):
        target, c1, c2, n1 = Unit(1, 0), Unit(0, 0), Unit(0, 1), Unit(1, 1)
        source = vector_source({
            target: [1.0, 0.0], c1: [1.0, 0.0], c2: [0.0, 1.0], n1: [0.0, 1.0],
        })
        result = rank_candidates(query_of(target, (c1, c2), (n1,)), source)
        assert result.scores[target] == pytest.approx(0.5)
        assert result.scores[n1] == pytest.approx(0.5)
        assert result.rank == 1


def results_of(ranks: list[int]) -> list[RankingResult]:
    return [RankingResult(i, r, {}) for i, r in enumerate(ranks)]


class TestMetrics:
    def test_mrr_single_hit(self):
        assert mrr(results_of([1])) == 1.0

    def test_mrr_mixed(self):
        assert mrr(results_of([1, 2, 4])) == pytest.approx((1 + 0.5 + 0.25) / 3)

    def test_mrr_worst_case(self):
        assert mrr(results_of([11] * 5)) == pytest.approx(1 / 11)

    def test_mrr_empty_undefined(self):
        with pytest.raises(ProtocolError):
            mrr([])

    def test_recall_trivial(self):
        assert recall_at_k(results_of([1]), 1) == 1.0
        assert recall_at_k(results_of([2]), 1) == 0.0
        assert recall_at_k(results_of([1, 2, 4]), 2) == pytest.approx(2 / 3)

    def test_recall_empty_undefined(self):
        with pytest.raises(ProtocolError):
            recall_at_k([], 1)

    @given(st.lists(st.integers(min_value=1, max_value=11), min_size=1, max_size=30))
    @settings(max_examples=100, deadline=None)
    def test_recall_matches_floor_formula_and_monotone(self, ranks: list[int]):
        results = results_of(ranks)
        values = []
        for k in range(1, 12):
            value = recall_at_k(results, k)
            floor_form = sum(min(1, k // r) for r in ranks) / len(ranks)
            assert value == pytest.approx(floor_form)
            values.append(value)
        assert all(a <= b for a, b in zip(values, values[1:]))
        assert values[-1] == 1.0  # R@(M+1) with M+1 = max rank


class TestOracleEquivalence:
    def exhaustive_rank(self, query: Query, source) -> int:
        # Independent oracle: fully sort candidates by score, place the
        # truth optimistically among equals.
        scores = {}
        for candidate in query.candidates:
            vec = source(candidate)
            ctx_scores = []
            for u in query.context:
                ctx_vec = source(u)
                num = float(vec @ ctx_vec)
                den = float(np.linalg.norm(vec) * np.linalg.norm(ctx_vec))
                ctx_scores.append(num / den if den > 0 else 0.0)
            scores[candidate] = sum(ctx_scores) / len(ctx_scores)
        ordered = sorted(
            query.candidates, key=lambda c: (-scores[c], c != query.target)
        )
        return ordered.index(query.target) + 1

    def test_matches_exhaustive_sort(self):
        rng = np.random.default_rng(3)
        for trial in range(200):
            dim = int(rng.integers(2, 5))
            pool = int(rng.integers(2, 6))
            n_ctx = int(rng.integers(1, 4))
            target = Unit(1, 0)
            negatives = tuple(Unit(1, i + 1) for i in range(pool - 1))
            context = tuple(Unit(0, i) for i in range(n_ctx))
            mapping = {u: rng.normal(0, 1, dim).tolist() for u in (target, *negatives, *context)}
            source = vector_source(mapping)
            query = query_of(target, context, negatives)
            assert rank_candidates(query, source).rank == self.exhaustive_rank(query, source)

    def test_scale_invariance(self):
        rng = np.random.default_rng(4)
        for scale in (0.1, 3.7, 1000.0):
            target = Unit(1, 0)
            negatives = tuple(Unit(1, i + 1) for i in range(5))
            context = (Unit(0, 0), Unit(0, 1))
            mapping = {
                u: rng.normal(0, 1, 4).tolist() for u in (target, *negatives, *context)
            }
            base = vector_source(mapping)
            scaled = vector_source({u: (np.array(v) * scale).tolist() for u, v in mapping.items()})
            query = query_of(target, context, negatives)
            assert rank_candidates(query, base).rank == rank_candidates(query, scaled).rank


class StaticModel:
    """Counts observations; vectors fixed; for protocol plumbing tests."""

    def __init__(self, dim: int = 4, seed: int = 0):
        self.name = "static"
        self.rng = np.random.default_rng(seed)
        self.dim = dim
        self.vectors: dict[Unit, np.ndarray] = {}
        self.observed: list[int] = []
        self.pretrained: list[int] = []

    def pretrain(self, windows):
        for window in windows:
            self.pretrained.append(window.window_id)
            self._absorb(window)

    def observe_window(self, window):
        self.observed.append(window.window_id)
        self._absorb(window)

    def _absorb(self, window):
        for unit in window.distinct_units():
            if unit not in self.vectors:
                self.vectors[unit] = self.rng.normal(0, 1, self.dim)

    def vector_for(self, unit):
        return self.vectors.get(unit)

    def seen_units(self, attribute_id):
        return sorted(u.unit_id for u in self.vectors if u.attribute_id == attribute_id)

    def model_bytes(self):
        return len(self.vectors) * self.dim * 4


def toy_windows(n_windows: int = 8, per_window: int = 12, units: int = 30, seed: int = 0):
    rng = np.random.default_rng(seed)
    windows = []
    t = 0.0
    for w in range(n_windows):
        records = []
        for _ in range(per_window):
            uid = int(rng.integers(0, units))
            vid = int(rng.integers(0, units))
            records.append(Record(t, (Unit(0, uid), Unit(1, vid))))
            t += 1.0
        windows.append(UpdatingWindow(w, w * per_window, per_window, records))
    return windows


class TestRunProtocol:
    def test_too_many_query_windows_rejected(self):
        windows = toy_windows(4)
        with pytest.raises(ProtocolError):
            run_protocol(windows, 2, StaticModel(), 1, 10, 3, (1,), seed=0)

    def test_deterministic(self):
        a = run_protocol(toy_windows(), 3, StaticModel(), 1, 3, 3, (1, 5), seed=9)
        b = run_protocol(toy_windows(), 3, StaticModel(), 1, 3, 3, (1, 5), seed=9)
        assert a.overall_mrr == b.overall_mrr
        assert a.query_windows == b.query_windows
        assert [(r.window_id, r.mrr) for r in a.rows] == [(r.window_id, r.mrr) for r in b.rows]

    def test_eval_happens_before_observation(self):
        # Every query window is evaluated strictly before the model sees
        # its records (and windows are observed in order).
        events = []

        class Spy(StaticModel):
            def observe_window(self, window):
                events.append(("observe", window.window_id))
                super().observe_window(window)

            def seen_units(self, attribute_id):
                events.append(("eval", None))
                return super().seen_units(attribute_id)

        report = run_protocol(toy_windows(), 3, Spy(), 1, 2, 3, (1,), seed=1)
        observed = [w for kind, w in events if kind == "observe"]
        assert observed == sorted(observed)
        eval_count = sum(1 for kind, _ in events if kind == "eval")
        assert eval_count == len(report.query_windows)
        for i, (kind, _) in enumerate(events):
            if kind == "eval":
                next_observed = next(w for k, w in events[i:] if k == "observe")
                assert next_observed in report.query_windows

    def test_future_poison_leaves_metrics_unchanged(self):
        windows = toy_windows()
        baseline = run_protocol(windows, 3, StaticModel(), 1, 2, 3, (1, 5), seed=3)
        last = max(w.window_id for w in windows)
        assert max(baseline.query_windows) < last

        poisoned = toy_windows()
        poisoned[-1].records.append(Record(poisoned[-1].start, (Unit(0, 999), Unit(1, 999))))
        after = run_protocol(poisoned, 3, StaticModel(), 1, 2, 3, (1, 5), seed=3)
        assert after.overall_mrr == baseline.overall_mrr
        assert after.overall_recalls == baseline.overall_recalls
        assert [(r.window_id, r.mrr) for r in after.rows] == [
            (r.window_id, r.mrr) for r in baseline.rows
        ]
