"""Window-level training of transient dense unit embeddings.

Each unit of a record is recovered from the mean embedding of the
record's other units; the loss is the negative-sampling form of that
recovery task. Per record, a learning rate damped by the record's
intra-agreement is applied through per-parameter AdaGrad scaling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .seeding import make_rng
from .streams import Record, Unit, UpdatingWindow


class DegenerateContextError(ValueError):
    """Raised when a recovery pair has no embedded context unit."""


def sigmoid(z: float) -> float:
    """Numerically safe logistic function."""
    if z >= 0.0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def log_sigmoid(z: float) -> float:
    """log(sigmoid(z)) without overflow for large |z|."""
    if z >= 0.0:
        return -math.log1p(math.exp(-z))
    return z - math.log1p(math.exp(z))


@dataclass
class TrainConfig:
    """Knobs for the dense trainer.

    ``epochs=0`` is a diagnostic mode that leaves the table untouched.
    """

    dim: int = 300
    lr: float = 0.05
    tau: float = 0.1
    n_negatives: int = 3
    epochs: int = 50
    epsilon: float = 1e-2
    shuffle_records: bool = False

    def __post_init__(self) -> None:
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.tau < 0:
            raise ValueError("tau must be non-negative")
        if self.n_negatives < 1:
            raise ValueError("n_negatives must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


class EmbeddingTable:
    """Transient map unit -> dense vector plus its AdaGrad accumulator.

    Single-writer: a table may move between execution contexts but is
    never shared mutably. New vectors are drawn from a generator derived
    from (table seed, attribute, unit), so initialization does not
    depend on the order units are first touched.
    """

    def __init__(self, dim: int, seed: int | tuple[int, ...]) -> None:
        self.dim = dim
        self.seed: tuple[int, ...] = (seed,) if isinstance(seed, int) else tuple(seed)
        self.vectors: dict[Unit, np.ndarray] = {}
        self.grad_accum: dict[Unit, np.ndarray] = {}
        self.skipped_nonfinite = 0

    def __len__(self) -> int:
        return len(self.vectors)

    def __contains__(self, unit: Unit) -> bool:
        return unit in self.vectors

    def ensure_vector(self, unit: Unit) -> np.ndarray:
        """Return the unit's vector, initializing uniformly in +-0.5/dim."""
        vec = self.vectors.get(unit)
        if vec is None:
            rng = make_rng(*self.seed, unit.attribute_id, unit.unit_id)
            half = 0.5 / self.dim
            vec = rng.uniform(-half, half, self.dim)
            self.vectors[unit] = vec
            self.grad_accum[unit] = np.zeros(self.dim)
        return vec

    def set_vector(self, unit: Unit, vec: np.ndarray) -> None:
        if vec.shape != (self.dim,):
            raise ValueError(f"vector for {unit} has shape {vec.shape}, want ({self.dim},)")
        self.vectors[unit] = np.asarray(vec, dtype=np.float64).copy()
        self.grad_accum[unit] = np.zeros(self.dim)

    def reset_accumulators(self) -> None:
        for accum in self.grad_accum.values():
            accum.fill(0.0)

    def pools_by_attribute(self) -> dict[int, np.ndarray]:
        """Sorted unit-id arrays per attribute, for negative sampling."""
        grouped: dict[int, list[int]] = {}
        for unit in self.vectors:
            grouped.setdefault(unit.attribute_id, []).append(unit.unit_id)
        return {aid: np.array(sorted(uids), dtype=np.int64) for aid, uids in grouped.items()}

    def nbytes_dense(self) -> int:
        """Accounting size of the live vectors at 4 bytes per value."""
        return len(self.vectors) * self.dim * 4


def context_mean(record: Record, x: Unit, table: EmbeddingTable) -> np.ndarray:
    """Mean embedding of the record's units excluding one occurrence of x."""
    total = np.zeros(table.dim)
    count = 0
    skipped_x = False
    for unit in record.units:
        if unit == x and not skipped_x:
            skipped_x = True
            continue
        vec = table.vectors.get(unit)
        if vec is not None:
            total += vec
            count += 1
    if count == 0:
        raise DegenerateContextError(f"no embedded context for {x}")
    return total / count


def score(x: Unit, h: np.ndarray, table: EmbeddingTable) -> float:
    """Similarity of a unit to a context: dot(v_x, h)."""
    return float(table.vectors[x] @ h)


@dataclass
class ReconGradients:
    """Loss and analytic gradients of one recovery pair."""

    loss: float
    grad_x: np.ndarray
    grad_negatives: list[np.ndarray]
    grad_context: np.ndarray  # shared by every context vector (mean split)
    context_units: list[Unit]


def recon_loss(
    x: Unit,
    record: Record,
    negatives: Sequence[Unit],
    table: EmbeddingTable,
) -> ReconGradients:
    """Negative-sampling recovery loss for (record, x) plus gradients.

    loss = -log sigmoid(v_x . h) - sum_n log sigmoid(-v_n . h), with h the
    context mean. The context gradient is split equally over the context
    vectors because h is an arithmetic mean.
    """
    for n in negatives:
        if n.attribute_id != x.attribute_id or n == x:
            raise ValueError("negatives must share x's attribute and exclude x")
    context_units = []
    skipped_x = False
    for unit in record.units:
        if unit == x and not skipped_x:
            skipped_x = True
            continue
        if unit in table.vectors:
            context_units.append(unit)
    if not context_units:
        raise DegenerateContextError(f"no embedded context for {x}")

    h = np.zeros(table.dim)
    for unit in context_units:
        h += table.vectors[unit]
    h /= len(context_units)

    v_x = table.vectors[x]
    s_x = float(v_x @ h)
    coef_x = sigmoid(s_x) - 1.0
    loss = -log_sigmoid(s_x)
    grad_h = coef_x * v_x
    grad_negatives = []
    for n in negatives:
        v_n = table.vectors[n]
        s_n = float(v_n @ h)
        coef_n = sigmoid(s_n)
        loss -= log_sigmoid(-s_n)
        grad_negatives.append(coef_n * h)
        grad_h = grad_h + coef_n * v_n
    return ReconGradients(
        loss=loss,
        grad_x=coef_x * h,
        grad_negatives=grad_negatives,
        grad_context=grad_h / len(context_units),
        context_units=context_units,
    )


def sample_negatives(
    x: Unit,
    record: Record,
    n_negatives: int,
    pool: np.ndarray,
    rng: np.random.Generator,
) -> tuple[list[int], bool] | None:
    """Draw negatives uniformly without replacement from the attribute pool.

    Excludes every unit of the record with x's attribute. Returns the
    drawn unit ids plus a short-draw flag when the pool cannot supply
    the full count; None means no negative is available (skip the pair).
    """
    excluded = {u.unit_id for u in record.units if u.attribute_id == x.attribute_id}
    return _sample_excluding(excluded, n_negatives, pool, rng)


def _sample_excluding(
    excluded: set[int],
    n_negatives: int,
    pool: np.ndarray,
    rng: np.random.Generator,
) -> tuple[list[int], bool] | None:
    pool_size = len(pool)
    if pool_size == 0:
        return None
    present = 0
    for uid in excluded:
        idx = int(np.searchsorted(pool, uid))
        if idx < pool_size and pool[idx] == uid:
            present += 1
    available = pool_size - present
    if available <= 0:
        return None
    k = min(n_negatives, available)
    short = k < n_negatives
    if available <= max(4 * n_negatives, 16):
        allowed = [int(uid) for uid in pool if uid not in excluded]
        picks = rng.permutation(len(allowed))[:k]
        return [allowed[int(i)] for i in picks], short
    # Rejection sampling: cheap when the pool is much larger than the draw.
    draws: list[int] = []
    seen: set[int] = set()
    while len(draws) < k:
        uid = int(pool[int(rng.integers(0, pool_size))])
        if uid in excluded or uid in seen:
            continue
        seen.add(uid)
        draws.append(uid)
    return draws, short


def intra_agreement(record: Record, table: EmbeddingTable) -> float:
    """Mean pairwise sigmoid similarity of the record's embedded units.

    Unordered pairs are counted once; ordered pairs would give the same
    value because sigmoid(v_x . v_y) is symmetric.
    """
    vecs = [table.vectors[u] for u in record.units if u in table.vectors]
    return _intra_agreement_vecs(vecs)


def _intra_agreement_vecs(vecs: list[np.ndarray]) -> float:
    k = len(vecs)
    if k < 2:
        raise DegenerateContextError("intra-agreement needs >= 2 embedded units")
    if k == 2:
        return sigmoid(float(vecs[0] @ vecs[1]))
    stack = np.stack(vecs)
    gram = stack @ stack.T
    total = 0.0
    count = 0
    for i in range(k):
        for j in range(i + 1, k):
            total += sigmoid(float(gram[i, j]))
            count += 1
    return total / count


def adaptive_lr(psi: float, lr: float, tau: float) -> float:
    """Record learning rate exp(-tau * psi) * lr."""
    return math.exp(-tau * psi) * lr


def adagrad_step(
    unit: Unit,
    grad: np.ndarray,
    lr_r: float,
    table: EmbeddingTable,
    epsilon: float,
) -> None:
    """One AdaGrad update of the unit's vector, in place.

    The denominator uses the accumulator as of the previous step (the
    squared-gradient history excludes the current gradient); the
    accumulator is updated afterwards. Non-finite gradients skip the
    step and bump the table's counter.
    """
    if not np.all(np.isfinite(grad)):
        table.skipped_nonfinite += 1
        return
    accum = table.grad_accum[unit]
    table.vectors[unit] -= (lr_r / np.sqrt(accum + epsilon)) * grad
    accum += grad * grad


@dataclass
class TrainResult:
    """Epoch-loss trace and skip counters from one train_window call."""

    epoch_losses: list[float] = field(default_factory=list)
    pairs_trained: int = 0
    pairs_skipped: int = 0
    short_negative_draws: int = 0


def train_window(
    window: UpdatingWindow,
    table: EmbeddingTable,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> TrainResult:
    """Run the recovery-task epochs over one window's records.

    Every unit of the window must already have a vector. Per (epoch,
    record), the intra-agreement rate is computed once from pre-update
    vectors; each unit of the record then gets fresh negatives and an
    AdaGrad step applied to itself, its negatives, and its context.
    """
    result = TrainResult()
    records = window.records
    if not records or cfg.epochs == 0:
        return result

    pools = table.pools_by_attribute()
    n_records = len(records)
    order = list(range(n_records))
    vectors = table.vectors
    grad_accum = table.grad_accum
    eps = cfg.epsilon
    n_neg = cfg.n_negatives

    for _ in range(cfg.epochs):
        if cfg.shuffle_records:
            order = [int(i) for i in rng.permutation(n_records)]
        epoch_loss = 0.0
        epoch_pairs = 0
        for idx in order:
            record = records[idx]
            units = record.units
            vecs = [vectors[u] for u in units]
            if len(vecs) >= 2:
                psi = _intra_agreement_vecs(vecs)
            else:
                psi = 0.5
            lr_r = math.exp(-cfg.tau * psi) * cfg.lr

            for i, x in enumerate(units):
                pool = pools.get(x.attribute_id)
                if pool is None:
                    result.pairs_skipped += 1
                    continue
                drawn = sample_negatives(x, record, n_neg, pool, rng)
                if drawn is None:
                    result.pairs_skipped += 1
                    continue
                neg_ids, short = drawn
                if short:
                    result.short_negative_draws += 1
                negatives = [Unit(x.attribute_id, uid) for uid in neg_ids]

                n_ctx = len(units) - 1
                if n_ctx == 0:
                    result.pairs_skipped += 1
                    continue
                h = np.zeros(table.dim)
                for j, vec in enumerate(vecs):
                    if j != i:
                        h += vec
                h /= n_ctx

                v_x = vecs[i]
                s_x = float(v_x @ h)
                coef_x = sigmoid(s_x) - 1.0
                loss = -log_sigmoid(s_x)
                grad_h = coef_x * v_x
                neg_grads = []
                for n in negatives:
                    v_n = vectors[n]
                    s_n = float(v_n @ h)
                    coef_n = sigmoid(s_n)
                    loss -= log_sigmoid(-s_n)
                    neg_grads.append((n, coef_n * h))
                    grad_h = grad_h + coef_n * v_n

                epoch_loss += loss
                epoch_pairs += 1

                _step(vectors, grad_accum, x, coef_x * h, lr_r, eps, table)
                for n, g_n in neg_grads:
                    _step(vectors, grad_accum, n, g_n, lr_r, eps, table)
                grad_ctx = grad_h / n_ctx
                for j, u in enumerate(units):
                    if j != i:
                        _step(vectors, grad_accum, u, grad_ctx, lr_r, eps, table)
        result.epoch_losses.append(epoch_loss / epoch_pairs if epoch_pairs else 0.0)
        result.pairs_trained += epoch_pairs
    return result


def _step(
    vectors: dict[Unit, np.ndarray],
    grad_accum: dict[Unit, np.ndarray],
    unit: Unit,
    grad: np.ndarray,
    lr_r: float,
    eps: float,
    table: EmbeddingTable,
) -> None:
    if not np.all(np.isfinite(grad)):
        table.skipped_nonfinite += 1
        return
    accum = grad_accum[unit]
    vectors[unit] -= (lr_r / np.sqrt(accum + eps)) * grad
    accum += grad * grad
