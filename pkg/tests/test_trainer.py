"""Dense trainer: recovery loss, gradients, adaptive rate, AdaGrad."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from streambasis.seeding import make_rng
from streambasis.streams import Record, Unit, UpdatingWindow
from streambasis.trainer import (
    DegenerateContextError,
    EmbeddingTable,
    TrainConfig,
    adagrad_step,
    adaptive_lr,
    context_mean,
    intra_agreement,
    recon_loss,
    sample_negatives,
    score,
    sigmoid,
    train_window,
)


def table_with(vectors: dict[Unit, list[float]], dim: int) -> EmbeddingTable:
    table = EmbeddingTable(dim, 0)
    for unit, vec in vectors.items():
        table.set_vector(unit, np.array(vec, dtype=np.float64))
    return table


X, Y, Z = Unit(0, 0), Unit(1, 0), Unit(1, 1)


class TestContextMean:
    def test_mean_of_one(self):
        table = table_with({X: [0, 0], Y: [1, 0]}, 2)
        record = Record(0.0, (X, Y))
        assert np.allclose(context_mean(record, X, table), [1, 0])

    def test_mean_of_two(self):
        table = table_with({X: [0, 0], Y: [1, 0], Z: [0, 1]}, 2)
        record = Record(0.0, (X, Y, Z))
        assert np.allclose(context_mean(record, X, table), [0.5, 0.5])

    def test_alone_is_degenerate(self):
        table = table_with({X: [0, 0]}, 2)
        with pytest.raises(DegenerateContextError):
            context_mean(Record(0.0, (X,)), X, table)


class TestScore:
    def test_zero_vector(self):
        table = table_with({X: [0, 0]}, 2)
        assert score(X, np.array([3.0, -1.0]), table) == 0.0

    def test_dot(self):
        table = table_with({X: [1, 2]}, 2)
        assert score(X, np.array([3.0, 1.0]), table) == 5.0

    def test_self_similarity(self):
        h = np.array([1.0, 1.0])
        table = table_with({X: [1, 1]}, 2)
        assert score(X, h, table) == pytest.approx(2.0)


class TestReconLoss:
    def test_zero_vectors_one_negative(self):
        table = table_with({X: [0, 0], Y: [0, 0], Z: [0, 0]}, 2)
        record = Record(0.0, (X, Y))
        out = recon_loss(X, record, [Unit(0, 5)], table_with(
            {X: [0, 0], Y: [0, 0], Unit(0, 5): [0, 0]}, 2))
        assert out.loss == pytest.approx(-2 * math.log(0.5))

    def test_zero_vectors_three_negatives(self):
        negs = [Unit(0, 5), Unit(0, 6), Unit(0, 7)]
        vectors = {X: [0, 0], Y: [0, 0]}
        vectors.update({n: [0, 0] for n in negs})
        out = recon_loss(X, Record(0.0, (X, Y)), negs, table_with(vectors, 2))
        assert out.loss == pytest.approx(-4 * math.log(0.5))

    def test_negative_must_share_attribute(self):
        table = table_with({X: [0, 0], Y: [1, 0], Z: [1, 1]}, 2)
        with pytest.raises(ValueError):
            recon_loss(X, Record(0.0, (X, Y)), [Z], table)

    def test_gradients_match_finite_differences(self):
        # Central-difference oracle on random 5-dim instances.
        rng = np.random.default_rng(7)
        dim, step = 5, 1e-6
        for _ in range(100):
            units = [Unit(0, 0), Unit(1, 0), Unit(1, 1), Unit(0, 9), Unit(0, 8)]
            x, negs, ctx = units[0], units[3:], units[1:3]
            values = {u: rng.normal(0, 1.0, dim) for u in units}
            record = Record(0.0, (x, *ctx))

            def loss_at(overrides: dict[Unit, np.ndarray]) -> float:
                merged = {u: overrides.get(u, values[u]) for u in units}
                table = EmbeddingTable(dim, 0)
                for u, v in merged.items():
                    table.set_vector(u, v)
                return recon_loss(x, record, negs, table).loss

            table = EmbeddingTable(dim, 0)
            for u, v in values.items():
                table.set_vector(u, v)
            out = recon_loss(x, record, negs, table)

            def check(analytic: np.ndarray, unit: Unit) -> None:
                numeric = np.zeros(dim)
                for j in range(dim):
                    hi = values[unit].copy()
                    lo = values[unit].copy()
                    hi[j] += step
                    lo[j] -= step
                    numeric[j] = (loss_at({unit: hi}) - loss_at({unit: lo})) / (2 * step)
                denom = max(np.linalg.norm(numeric), 1e-8)
                assert np.linalg.norm(analytic - numeric) / denom < 1e-5

            check(out.grad_x, x)
            for n, g in zip(negs, out.grad_negatives):
                check(g, n)
            for c in ctx:
                check(out.grad_context, c)


class TestSampleNegatives:
    def test_forced_subset(self):
        pool = np.array([0, 1, 2])
        record = Record(0.0, (Unit(0, 0), Unit(1, 0)))
        drawn, short = sample_negatives(Unit(0, 0), record, 2, pool, make_rng(1))
        assert sorted(drawn) == [1, 2]
        assert not short

    def test_exhausted_pool_skips(self):
        pool = np.array([0, 1])
        record = Record(0.0, (Unit(0, 0), Unit(0, 1)))
        assert sample_negatives(Unit(0, 0), record, 2, pool, make_rng(1)) is None

    def test_short_draw_flagged(self):
        pool = np.array([0, 1, 2])
        record = Record(0.0, (Unit(0, 0), Unit(1, 0)))
        drawn, short = sample_negatives(Unit(0, 0), record, 5, pool, make_rng(1))
        assert sorted(drawn) == [1, 2]
        assert short

    def test_deterministic_given_seed(self):
        pool = np.arange(500)
        record = Record(0.0, (Unit(0, 3), Unit(1, 0)))
        a = sample_negatives(Unit(0, 3), record, 5, pool, make_rng(9))
        b = sample_negatives(Unit(0, 3), record, 5, pool, make_rng(9))
        assert a == b

    def test_never_draws_excluded(self):
        pool = np.arange(40)
        record = Record(0.0, tuple(Unit(0, i) for i in range(20)))
        for seed in range(20):
            drawn, _ = sample_negatives(Unit(0, 0), record, 5, pool, make_rng(seed))
            assert all(uid >= 20 for uid in drawn)


class TestIntraAgreement:
    def test_orthogonal_pair(self):
        table = table_with({Y: [1, 0], Z: [0, 1]}, 2)
        assert intra_agreement(Record(0.0, (Y, Z)), table) == pytest.approx(0.5)

    def test_analytic_sigmoid(self):
        table = table_with({Y: [math.log(3), 0], Z: [1, 0]}, 2)
        assert intra_agreement(Record(0.0, (Y, Z)), table) == pytest.approx(0.75)

    def test_three_units_mean_of_pairs(self):
        w = Unit(1, 2)
        table = table_with(
            {Y: [1, 0, 0], Z: [0, 1, 0], w: [0, math.log(3), 0]}, 3
        )
        # pairwise dots: Y.Z=0, Y.w=0, Z.w=ln 3
        value = intra_agreement(Record(0.0, (Y, Z, w)), table)
        assert value == pytest.approx((0.5 + 0.5 + 0.75) / 3)

    def test_degenerate_raises(self):
        table = table_with({Y: [1, 0]}, 2)
        with pytest.raises(DegenerateContextError):
            intra_agreement(Record(0.0, (Y,)), table)


class TestAdaptiveLr:
    def test_tau_zero_is_identity(self):
        for psi in (0.0, 0.3, 1.0):
            assert adaptive_lr(psi, 0.05, 0.0) == pytest.approx(0.05)

    def test_direct_evaluation(self):
        assert adaptive_lr(0.5, 0.05, 0.1) == pytest.approx(0.05 * math.exp(-0.05))

    def test_ratio_is_e(self):
        assert adaptive_lr(0.0, 1.0, 1.0) / adaptive_lr(1.0, 1.0, 1.0) == pytest.approx(math.e)

    def test_strictly_decreasing_in_psi(self):
        rates = [adaptive_lr(psi, 0.05, 0.5) for psi in np.linspace(0, 1, 11)]
        assert all(a > b for a, b in zip(rates, rates[1:]))


class TestAdagradStep:
    def test_first_step_uses_epsilon_only(self):
        table = table_with({X: [0.0, 0.0]}, 2)
        g = 0.25
        adagrad_step(X, np.array([g, 0.0]), 0.05, table, 1e-8)
        expected = -0.05 * g / math.sqrt(1e-8)
        assert table.vectors[X][0] == pytest.approx(expected)
        assert table.vectors[X][1] == 0.0
        assert np.allclose(table.grad_accum[X], [g * g, 0.0])

    def test_zero_gradient_changes_nothing(self):
        table = table_with({X: [1.0, 2.0]}, 2)
        adagrad_step(X, np.zeros(2), 0.05, table, 1e-8)
        assert np.array_equal(table.vectors[X], [1.0, 2.0])
        assert np.array_equal(table.grad_accum[X], [0.0, 0.0])

    def test_second_identical_step_is_smaller(self):
        table = table_with({X: [0.0]}, 1)
        grad = np.array([1.0])
        adagrad_step(X, grad, 0.05, table, 1e-8)
        first = abs(table.vectors[X][0])
        before = table.vectors[X][0]
        adagrad_step(X, grad, 0.05, table, 1e-8)
        second = abs(table.vectors[X][0] - before)
        assert second < first
        assert second == pytest.approx(0.05 / math.sqrt(1.0 + 1e-8))

    def test_nonfinite_gradient_skipped(self):
        table = table_with({X: [1.0, 1.0]}, 2)
        adagrad_step(X, np.array([np.nan, 0.0]), 0.05, table, 1e-8)
        assert np.array_equal(table.vectors[X], [1.0, 1.0])
        assert table.skipped_nonfinite == 1

    @given(st.lists(st.floats(min_value=-5, max_value=5), min_size=1, max_size=20))
    @settings(max_examples=50, deadline=None)
    def test_accumulator_never_decreases(self, grads: list[float]):
        table = table_with({X: [0.0]}, 1)
        previous = 0.0
        for g in grads:
            adagrad_step(X, np.array([g]), 0.05, table, 1e-8)
            current = table.grad_accum[X][0]
            assert current >= previous
            previous = current

    def test_constant_gradient_steps_shrink(self):
        table = table_with({X: [0.0]}, 1)
        grad = np.array([0.5])
        deltas = []
        value = 0.0
        for _ in range(6):
            adagrad_step(X, grad, 0.05, table, 1e-8)
            deltas.append(abs(table.vectors[X][0] - value))
            value = table.vectors[X][0]
        assert all(a > b for a, b in zip(deltas, deltas[1:]))


def planted_pairs_window(n_pairs: int = 4, n_records: int = 600, seed: int = 3) -> UpdatingWindow:
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n_records):
        g = int(rng.integers(0, n_pairs))
        records.append(Record(float(i), (Unit(0, g), Unit(1, g))))
    return UpdatingWindow(0, 0.0, float(n_records), records)


def hydrate_all(window: UpdatingWindow, dim: int, seed: int) -> EmbeddingTable:
    table = EmbeddingTable(dim, seed)
    for record in window.records:
        for unit in record.units:
            table.ensure_vector(unit)
    return table


class TestTrainWindow:
    def test_empty_window_is_noop(self):
        table = EmbeddingTable(4, 0)
        window = UpdatingWindow(0, 0.0, 1.0, [])
        result = train_window(window, table, TrainConfig(dim=4, epochs=5), make_rng(0))
        assert result.epoch_losses == []
        assert len(table) == 0

    def test_zero_epochs_is_diagnostic_noop(self):
        window = planted_pairs_window()
        table = hydrate_all(window, 8, 1)
        before = {u: v.copy() for u, v in table.vectors.items()}
        result = train_window(window, table, TrainConfig(dim=8, epochs=0), make_rng(0))
        assert result.epoch_losses == []
        assert all(np.array_equal(before[u], table.vectors[u]) for u in before)

    def test_planted_pairs_separate(self):
        window = planted_pairs_window()
        cfg = TrainConfig(dim=16, lr=0.05, tau=0.1, n_negatives=3, epochs=30, epsilon=1e-2)
        table = hydrate_all(window, 16, 11)
        train_window(window, table, cfg, make_rng(11, 0))

        def cos(a, b):
            return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))

        # Exhaustive pairwise-cosine oracle over all (i, j).
        for i in range(4):
            a = table.vectors[Unit(0, i)]
            matched = cos(a, table.vectors[Unit(1, i)])
            for j in range(4):
                if j != i:
                    assert matched > cos(a, table.vectors[Unit(1, j)])

    def test_loss_trace_converges(self):
        window = planted_pairs_window()
        cfg = TrainConfig(dim=16, lr=0.05, tau=0.1, n_negatives=3, epochs=30, epsilon=1e-2)
        table = hydrate_all(window, 16, 11)
        trace = train_window(window, table, cfg, make_rng(11, 0)).epoch_losses
        tail = trace[-10:]
        increases = [
            (later - earlier) / max(earlier, 1e-12)
            for earlier, later in zip(tail, tail[1:])
            if later > earlier
        ]
        assert len(increases) <= 2
        assert all(increase < 0.05 for increase in increases)

    def test_bitwise_determinism(self):
        window = planted_pairs_window()
        cfg = TrainConfig(dim=8, epochs=5, epsilon=1e-2)
        tables = []
        for _ in range(2):
            table = hydrate_all(window, 8, 21)
            train_window(window, table, cfg, make_rng(21, 0))
            tables.append(table)
        for unit in tables[0].vectors:
            assert np.array_equal(tables[0].vectors[unit], tables[1].vectors[unit])
            assert np.array_equal(tables[0].grad_accum[unit], tables[1].grad_accum[unit])

    def test_single_unit_records_skipped(self):
        records = [Record(float(i), (Unit(0, 0),)) for i in range(3)]
        window = UpdatingWindow(0, 0.0, 3.0, records)
        table = hydrate_all(window, 4, 0)
        result = train_window(window, table, TrainConfig(dim=4, epochs=1), make_rng(0))
        assert result.pairs_trained == 0
        assert result.pairs_skipped == 3

    def test_new_vector_init_range(self):
        table = EmbeddingTable(10, 123)
        vec = table.ensure_vector(Unit(0, 7))
        assert np.all(np.abs(vec) <= 0.5 / 10)
        # Same identity, same draw; different unit, different draw.
        other = EmbeddingTable(10, 123)
        assert np.array_equal(other.ensure_vector(Unit(0, 7)), vec)
        assert not np.array_equal(other.ensure_vector(Unit(0, 8)), vec)
