"""Persistent compressed model: fixed clusters, shared bases, sparse codes.

Each attribute's units are grouped once into immutable clusters (from an
explicit category file or k-means over pretrained embeddings). Every
cluster owns a small set of d-dimensional basis vectors, sized by
cluster share of a total budget. A unit's dense vector is approximated
as basis @ sparse-code; codes and bases are fitted by proximal AdaGrad
on a squared-error-plus-L1 objective.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .seeding import TAG_BASIS_PAD, make_rng

MODEL_DTYPE = np.float32

# Internal AdaGrad stabilizer for code/basis fitting (not a spec knob).
CODE_ADAGRAD_EPS = 1e-2
INIT_MAX_SWEEPS = 5

MODE_IMPLICIT = "implicit"
MODE_EXPLICIT = "explicit"


class ClusterImmutabilityError(RuntimeError):
    """Raised on any attempt to move an already-assigned unit."""


class CorruptModelError(RuntimeError):
    """Raised when stored code indices disagree with the basis shapes."""


class ExplicitMapping:
    """Unit-symbol to category mapping loaded from a CSV file.

    Categories get dense indices in file order of first appearance;
    unmapped symbols fall into a dedicated unknown cluster placed last.
    """

    def __init__(self, category_of: dict[str, int], n_categories: int) -> None:
        self.category_of = category_of
        self.n_categories = n_categories

    @classmethod
    def from_csv(cls, path: str) -> "ExplicitMapping":
        category_index: dict[str, int] = {}
        category_of: dict[str, int] = {}
        with open(path, "r", encoding="utf-8", newline="") as handle:
            for row in csv.reader(handle):
                if len(row) < 2:
                    continue
                symbol, category = row[0].strip(), row[1].strip()
                if not symbol or not category:
                    continue
                index = category_index.setdefault(category, len(category_index))
                category_of[symbol] = index
        return cls(category_of, len(category_index))

    @property
    def unknown_cluster(self) -> int:
        return self.n_categories

    @property
    def n_clusters(self) -> int:
        return self.n_categories + 1

    def cluster_for_symbol(self, symbol: str) -> int:
        return self.category_of.get(symbol, self.n_categories)


def assign_explicit(symbol: str, mapping: ExplicitMapping) -> int:
    """Cluster index for a unit symbol; unmapped symbols go to unknown."""
    return mapping.cluster_for_symbol(symbol)


class FixedClustering:
    """Immutable unit-to-cluster assignment for one attribute.

    Assignments never change after they are made; violations raise.
    Implicit mode keeps centroids so unseen units can be placed by
    nearest Euclidean distance.
    """

    def __init__(
        self,
        attribute_id: int,
        mode: str,
        n_clusters: int,
        centroids: np.ndarray | None = None,
        mapping: ExplicitMapping | None = None,
    ) -> None:
        if mode not in (MODE_IMPLICIT, MODE_EXPLICIT):
            raise ValueError(f"unknown clustering mode {mode!r}")
        if mode == MODE_IMPLICIT and centroids is None:
            raise ValueError("implicit clustering requires centroids")
        if mode == MODE_EXPLICIT and mapping is None:
            raise ValueError("explicit clustering requires a mapping")
        self.attribute_id = attribute_id
        self.mode = mode
        self.n_clusters = n_clusters
        self.centroids = None if centroids is None else np.asarray(centroids, dtype=MODEL_DTYPE)
        self.mapping = mapping
        self.cluster_of: dict[int, int] = {}

    def assign(self, unit_id: int, cluster: int) -> None:
        if not (0 <= cluster < self.n_clusters):
            raise ValueError(f"cluster {cluster} out of range [0, {self.n_clusters})")
        existing = self.cluster_of.get(unit_id)
        if existing is not None:
            if existing != cluster:
                raise ClusterImmutabilityError(
                    f"unit {unit_id} already in cluster {existing}, refused move to {cluster}"
                )
            return
        self.cluster_of[unit_id] = cluster

    def cluster_sizes(self) -> list[int]:
        sizes = [0] * self.n_clusters
        for cluster in self.cluster_of.values():
            sizes[cluster] += 1
        return sizes


def assign_cluster(vec: np.ndarray, clustering: FixedClustering) -> int:
    """Nearest-centroid cluster index; ties break to the lowest index."""
    if clustering.centroids is None:
        raise ValueError("assign_cluster needs implicit-mode centroids")
    diffs = clustering.centroids.astype(np.float64) - np.asarray(vec, dtype=np.float64)
    return int(np.argmin((diffs * diffs).sum(axis=1)))


def kmeans(
    embeddings: Mapping[int, np.ndarray],
    k: int,
    rng: np.random.Generator,
    max_iter: int = 100,
    n_init: int = 4,
) -> tuple[np.ndarray, dict[int, int]]:
    """Lloyd's iterations with k-means++ seeding over a unit-vector map.

    Runs n_init seedings and keeps the lowest-distortion result. Each
    run converges when assignments stop changing; empty clusters are
    repaired by stealing the farthest member of the largest cluster.
    Returns (centroids, unit_id -> cluster).
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > len(embeddings):
        raise ValueError(f"k={k} exceeds number of units {len(embeddings)}")
    unit_ids = sorted(embeddings)
    X = np.stack([np.asarray(embeddings[uid], dtype=np.float64) for uid in unit_ids])

    best: tuple[float, np.ndarray, np.ndarray] | None = None
    for _ in range(max(1, n_init)):
        centroids = _kmeans_pp_seed(X, k, rng)
        labels = _nearest(X, centroids)
        for _ in range(max_iter):
            labels = _repair_empty(X, labels, k)
            centroids = np.stack([X[labels == c].mean(axis=0) for c in range(k)])
            new_labels = _nearest(X, centroids)
            if np.array_equal(new_labels, labels):
                break
            labels = new_labels
        labels = _repair_empty(X, labels, k)
        centroids = np.stack([X[labels == c].mean(axis=0) for c in range(k)])
        distortion = float(((X - centroids[labels]) ** 2).sum())
        if best is None or distortion < best[0]:
            best = (distortion, centroids, labels)
    _, centroids, labels = best
    return centroids, {uid: int(lbl) for uid, lbl in zip(unit_ids, labels)}


def _kmeans_pp_seed(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    centers = [X[int(rng.integers(0, n))]]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = float(d2.sum())
        if total <= 0.0:
            idx = int(rng.integers(0, n))
        else:
            draw = rng.random() * total
            idx = min(int(np.searchsorted(np.cumsum(d2), draw)), n - 1)
        centers.append(X[idx])
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(axis=1))
    return np.stack(centers)


def _nearest(X: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d2 = ((X[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1)


def _repair_empty(X: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    labels = labels.copy()
    for cluster in range(k):
        if np.any(labels == cluster):
            continue
        counts = np.bincount(labels, minlength=k)
        donor = int(np.argmax(counts))
        members = np.flatnonzero(labels == donor)
        center = X[members].mean(axis=0)
        farthest = members[int(np.argmax(((X[members] - center) ** 2).sum(axis=1)))]
        labels[farthest] = cluster
    return labels


def allocate_bases(cluster_sizes: Sequence[int], budget: int) -> list[int]:
    """Per-cluster basis counts ceil(budget * size / total); empties get 1."""
    if budget < 1:
        raise ValueError("budget must be >= 1")
    if any(size < 0 for size in cluster_sizes):
        raise ValueError("cluster sizes must be non-negative")
    total = sum(cluster_sizes)
    if total < 1:
        raise ValueError("at least one unit must be clustered")
    return [max(1, math.ceil(budget * size / total)) for size in cluster_sizes]


def allocate_bases_uniform(cluster_sizes: Sequence[int], budget: int) -> list[int]:
    """Ablation variant: spread the budget evenly regardless of size."""
    if budget < 1:
        raise ValueError("budget must be >= 1")
    n = len(cluster_sizes)
    if n < 1:
        raise ValueError("need at least one cluster")
    return [max(1, math.ceil(budget / n))] * n


@dataclass
class BasisSet:
    """Per-cluster basis matrices (d x |B_i|) plus fitting accumulators."""

    matrices: list[np.ndarray]
    accum: list[np.ndarray]
    total_budget: int

    @classmethod
    def empty(cls, dim: int, counts: Sequence[int], budget: int) -> "BasisSet":
        matrices = [np.zeros((dim, c), dtype=MODEL_DTYPE) for c in counts]
        accum = [np.zeros((dim, c), dtype=MODEL_DTYPE) for c in counts]
        return cls(matrices, accum, budget)

    @property
    def dim(self) -> int:
        return self.matrices[0].shape[0] if self.matrices else 0

    def counts(self) -> list[int]:
        return [m.shape[1] for m in self.matrices]

    def nbytes(self) -> int:
        return sum(m.shape[0] * m.shape[1] * 4 for m in self.matrices)


@dataclass
class SparseCode:
    """Sparse composition weights of one unit over its cluster's basis."""

    unit_id: int
    cluster: int
    indices: np.ndarray  # int32, strictly increasing
    values: np.ndarray  # float32, nonzero in stored form
    accum: np.ndarray  # float32, dense over the cluster's basis columns

    @classmethod
    def zero(cls, unit_id: int, cluster: int, basis_count: int) -> "SparseCode":
        return cls(
            unit_id=unit_id,
            cluster=cluster,
            indices=np.zeros(0, dtype=np.int32),
            values=np.zeros(0, dtype=MODEL_DTYPE),
            accum=np.zeros(basis_count, dtype=MODEL_DTYPE),
        )

    @property
    def nnz(self) -> int:
        return len(self.indices)

    def dense(self, basis_count: int) -> np.ndarray:
        weights = np.zeros(basis_count, dtype=np.float64)
        if len(self.indices):
            weights[self.indices] = self.values.astype(np.float64)
        return weights


@dataclass
class CompressionConfig:
    """Knobs for code/basis fitting.

    ``zero_epsilon`` is relative: weights below zero_epsilon times the
    code's L2 norm are stored as exact zeros (each pruned weight then
    carries at most zero_epsilon^2 of the code's energy), which keeps
    the storage policy independent of the embedding scale.
    """

    l1_weight: float = 0.001
    code_lr: float = 0.05
    max_iters: int = 100
    rel_tol: float = 1e-4
    zero_epsilon: float = 0.15

    def __post_init__(self) -> None:
        if self.l1_weight < 0:
            raise ValueError("l1_weight must be non-negative")
        if self.code_lr <= 0:
            raise ValueError("code_lr must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.rel_tol <= 0:
            raise ValueError("rel_tol must be positive")
        if self.zero_epsilon < 0:
            raise ValueError("zero_epsilon must be non-negative")


def reconstruct(code: SparseCode, bases: BasisSet) -> np.ndarray:
    """Dense vector basis @ code over the stored nonzeros."""
    if not (0 <= code.cluster < len(bases.matrices)):
        raise CorruptModelError(f"code cluster {code.cluster} outside basis set")
    matrix = bases.matrices[code.cluster]
    if len(code.indices) == 0:
        return np.zeros(matrix.shape[0], dtype=np.float64)
    if int(code.indices.max()) >= matrix.shape[1]:
        raise CorruptModelError(
            f"code index {int(code.indices.max())} out of range for cluster {code.cluster}"
        )
    return matrix[:, code.indices].astype(np.float64) @ code.values.astype(np.float64)


def compression_loss(
    weights: np.ndarray,
    basis: np.ndarray,
    target: np.ndarray,
    l1_weight: float,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Loss ||basis @ w - target||^2 + l1 * ||w||_1 plus quadratic gradients.

    Returns (loss, grad wrt weights, grad wrt basis columns). The L1 term
    enters the loss only; its handling is proximal, not subgradient.
    """
    basis64 = np.asarray(basis, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    residual = basis64 @ w - t
    loss = float(residual @ residual) + l1_weight * float(np.abs(w).sum())
    grad_w = 2.0 * (basis64.T @ residual)
    grad_basis = 2.0 * np.outer(residual, w)
    return loss, grad_w, grad_basis


@dataclass
class FitResult:
    iterations: int = 0
    loss_before: float = 0.0
    loss_after: float = 0.0
    skipped_nonfinite: bool = False


def fit_code(
    code: SparseCode,
    target: np.ndarray,
    bases: BasisSet,
    cfg: CompressionConfig,
    update_basis: bool = True,
) -> FitResult:
    """Proximal AdaGrad fit of one unit's code (and its basis columns).

    Each iteration takes an AdaGrad step on the quadratic gradient with
    the basis held fixed, then soft-thresholds weights by l1_weight
    times the per-coordinate step size. Stops at max_iters or when the
    relative loss improvement falls under rel_tol. In code-and-basis
    mode the touched basis columns then get one AdaGrad step from the
    converged residual (alternating the two keeps the fit stable).
    Weights below zero_epsilon times the code's norm are stored as
    exact zeros.
    """
    if not np.all(np.isfinite(target)):
        return FitResult(skipped_nonfinite=True)

    matrix = bases.matrices[code.cluster]
    basis_count = matrix.shape[1]
    basis = matrix.astype(np.float64)
    w = code.dense(basis_count)
    accum = code.accum.astype(np.float64)
    target64 = np.asarray(target, dtype=np.float64)
    # The quadratic term sums d residual squares while the L1 term sums
    # |B_i| weights; scaling the penalty by d makes the trade-off
    # dimension-independent, so small l1 weights still produce zeros.
    lam = cfg.l1_weight * len(target64)
    eps = CODE_ADAGRAD_EPS

    residual = basis @ w - target64
    loss = float(residual @ residual) + lam * float(np.abs(w).sum())
    result = FitResult(loss_before=loss, loss_after=loss)

    for iteration in range(cfg.max_iters):
        grad_w = 2.0 * (basis.T @ residual)
        rate = cfg.code_lr / np.sqrt(accum + eps)
        w = w - rate * grad_w
        accum += grad_w * grad_w
        if lam > 0.0:
            w = np.sign(w) * np.maximum(0.0, np.abs(w) - lam * rate)
        residual = basis @ w - target64
        new_loss = float(residual @ residual) + lam * float(np.abs(w).sum())
        result.iterations = iteration + 1
        improvement = loss - new_loss
        loss = new_loss
        if abs(improvement) < cfg.rel_tol * max(abs(loss), 1e-12):
            break

    if update_basis:
        # One AdaGrad step on the touched columns from the converged
        # residual; the accumulator includes the current gradient so the
        # step is bounded by code_lr even on a fresh accumulator (the
        # basis only ever needs small corrections around its init).
        basis_accum = bases.accum[code.cluster].astype(np.float64)
        grad_basis = 2.0 * np.outer(residual, w)
        basis_accum += grad_basis * grad_basis
        basis = basis - (cfg.code_lr / np.sqrt(basis_accum + eps)) * grad_basis
        bases.matrices[code.cluster] = basis.astype(MODEL_DTYPE)
        bases.accum[code.cluster] = basis_accum.astype(MODEL_DTYPE)
        residual = basis @ w - target64
        loss = float(residual @ residual) + lam * float(np.abs(w).sum())

    result.loss_after = loss
    if cfg.zero_epsilon > 0.0:
        w[np.abs(w) < cfg.zero_epsilon * float(np.linalg.norm(w))] = 0.0
    nz = np.flatnonzero(w)
    code.indices = nz.astype(np.int32)
    code.values = w[nz].astype(MODEL_DTYPE)
    code.accum = accum.astype(MODEL_DTYPE)
    return result


@dataclass
class AttributeModel:
    """The persistent compressed state of one attribute."""

    attribute_id: int
    clustering: FixedClustering
    bases: BasisSet
    codes: dict[int, SparseCode] = field(default_factory=dict)

    def vector_for(self, unit_id: int) -> np.ndarray | None:
        code = self.codes.get(unit_id)
        if code is None:
            return None
        return reconstruct(code, self.bases)

    def code_nbytes(self, per_unit_header: int = 8) -> int:
        return sum(per_unit_header + code.nnz * 8 for code in self.codes.values())

    def assignment_nbytes(self) -> int:
        size = 4 * len(self.clustering.cluster_of)
        if self.clustering.centroids is not None:
            size += self.clustering.centroids.shape[0] * self.clustering.centroids.shape[1] * 4
        return size


def principal_basis(
    members: np.ndarray,
    count: int,
    dim: int,
    pad_rng: np.random.Generator,
) -> np.ndarray:
    """Top principal directions of the member vectors, padded if needed.

    Uses uncentered SVD: reconstruction is a linear (not affine) map, so
    the best rank-q subspace of the raw vectors is what matters.
    """
    columns: list[np.ndarray] = []
    if members.size:
        _, _, vt = np.linalg.svd(members, full_matrices=False)
        take = min(count, vt.shape[0])
        columns.extend(vt[i] for i in range(take))
    while len(columns) < count:
        vec = pad_rng.normal(size=dim)
        norm = float(np.linalg.norm(vec))
        columns.append(vec / norm if norm > 0 else vec)
    return np.stack(columns, axis=1)


def build_attribute_model(
    attribute_id: int,
    embeddings: Mapping[int, np.ndarray],
    n_clusters: int,
    budget: int,
    cfg: CompressionConfig,
    seed: int,
    symbol_fn: Callable[[int], str] | None = None,
    mapping: ExplicitMapping | None = None,
    uniform_allocation: bool = False,
    kmeans_max_iter: int = 100,
) -> tuple[AttributeModel, bool]:
    """Cluster a pretrained embedding map and fit its initial codes/bases.

    Returns the model plus a flag saying whether the requested cluster
    count had to be clipped to the unit count.
    """
    if not embeddings:
        raise ValueError(f"attribute {attribute_id} has no pretrained embeddings")
    dim = len(next(iter(embeddings.values())))
    unit_ids = sorted(embeddings)

    clipped = False
    if mapping is not None:
        clustering = FixedClustering(
            attribute_id, MODE_EXPLICIT, mapping.n_clusters, mapping=mapping
        )
        if symbol_fn is None:
            raise ValueError("explicit clustering needs a unit_id -> symbol resolver")
        for uid in unit_ids:
            clustering.assign(uid, mapping.cluster_for_symbol(symbol_fn(uid)))
    else:
        k = n_clusters
        if k > len(unit_ids):
            k = len(unit_ids)
            clipped = True
        k = max(1, k)
        centroids, labels = kmeans(embeddings, k, make_rng(seed, attribute_id), kmeans_max_iter)
        clustering = FixedClustering(attribute_id, MODE_IMPLICIT, k, centroids=centroids)
        for uid in unit_ids:
            clustering.assign(uid, labels[uid])

    sizes = clustering.cluster_sizes()
    if uniform_allocation:
        counts = allocate_bases_uniform(sizes, budget)
    else:
        counts = allocate_bases(sizes, budget)

    members_by_cluster: dict[int, list[int]] = {c: [] for c in range(clustering.n_clusters)}
    for uid in unit_ids:
        members_by_cluster[clustering.cluster_of[uid]].append(uid)

    matrices = []
    for cluster in range(clustering.n_clusters):
        member_ids = members_by_cluster[cluster]
        members = (
            np.stack([np.asarray(embeddings[uid], dtype=np.float64) for uid in member_ids])
            if member_ids
            else np.zeros((0, dim))
        )
        pad_rng = make_rng(seed, TAG_BASIS_PAD, attribute_id, cluster)
        matrices.append(principal_basis(members, counts[cluster], dim, pad_rng).astype(MODEL_DTYPE))
    bases = BasisSet(
        matrices=matrices,
        accum=[np.zeros_like(m) for m in matrices],
        total_budget=budget,
    )

    model = AttributeModel(attribute_id, clustering, bases)
    for uid in unit_ids:
        cluster = clustering.cluster_of[uid]
        model.codes[uid] = SparseCode.zero(uid, cluster, counts[cluster])

    previous = math.inf
    for _ in range(INIT_MAX_SWEEPS):
        total = 0.0
        for uid in unit_ids:
            result = fit_code(model.codes[uid], embeddings[uid], bases, cfg, update_basis=True)
            total += result.loss_after
        mean_loss = total / len(unit_ids)
        if abs(previous - mean_loss) < cfg.rel_tol * max(abs(mean_loss), 1e-12):
            break
        previous = mean_loss
    return model, clipped
