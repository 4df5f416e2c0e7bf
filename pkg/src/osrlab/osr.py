"""Outlier scoring on representation batches.

Three scorers (max softmax probability, tied-covariance Mahalanobis
distance, representation norm) emit scores in a single orientation: higher
means more inlier-like, so downstream metrics never handle sign flags.
Multi-model aggregation supports representation concatenation (RepCat),
representation averaging (RepSum), and score summation (SocSum, the
default). Inlier classification uses kNN on concatenated raw embeddings.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import EmbeddingFormatError

__all__ = [
    "AGGREGATION_KINDS",
    "EmbeddingBatch",
    "GaussianModel",
    "ScoreSet",
    "aggregate",
    "concat_embeddings",
    "fit_gaussian_model",
    "knn_classify",
    "read_embeddings",
    "score_mahalanobis",
    "score_msp",
    "score_norm",
    "write_embeddings",
]

AGGREGATION_KINDS = ("repcat", "repsum", "socsum")
UNLABELED = -1


@dataclass
class EmbeddingBatch:
    """A matrix of representation vectors with labels and provenance.

    Unlabeled (test outlier) rows use label -1. Provenance is a free-form
    tag (model id, layer, temperature) carried through file round-trips.
    """

    matrix: np.ndarray  # (n, d) float64
    labels: np.ndarray  # (n,) int64, -1 when unlabeled
    provenance: str = ""

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise ValueError("embedding matrix must be 2-D (n, d)")
        if not np.isfinite(self.matrix).all():
            raise ValueError("embedding values must be finite")
        self.labels = np.asarray(self.labels, dtype=np.int64).ravel()
        if self.labels.shape[0] != self.matrix.shape[0]:
            raise ValueError("one label per embedding row required")

    def __len__(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


@dataclass(frozen=True)
class ScoreSet:
    """Per-sample scores, always oriented so higher means more inlier."""

    scores: np.ndarray
    scorer: str
    higher_is_inlier: bool = True


@dataclass
class GaussianModel:
    """Class-conditional Gaussian inlier model with one shared covariance."""

    means: np.ndarray  # (C, d)
    cov: np.ndarray  # (d, d), already regularized
    class_ids: np.ndarray  # (C,)
    chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        if not np.allclose(self.cov, self.cov.T):
            raise ValueError("covariance must be symmetric")
        try:
            self.chol = np.linalg.cholesky(self.cov)
        except np.linalg.LinAlgError as e:
            raise ValueError("covariance singular after regularization") from e

    @property
    def precision(self) -> np.ndarray:
        identity = np.eye(self.cov.shape[0])
        y = np.linalg.solve(self.chol, identity)
        return y.T @ y

    def distances(self, matrix: np.ndarray) -> np.ndarray:
        """Mahalanobis distance from each row to each class mean, (n, C)."""
        if matrix.shape[1] != self.means.shape[1]:
            raise ValueError(
                f"embedding dim {matrix.shape[1]} does not match model dim {self.means.shape[1]}"
            )
        out = np.empty((matrix.shape[0], self.means.shape[0]))
        for c in range(self.means.shape[0]):
            delta = (matrix - self.means[c]).T  # (d, n)
            y = np.linalg.solve(self.chol, delta)
            out[:, c] = np.sqrt(np.sum(y * y, axis=0))
        return out


def fit_gaussian_model(train: EmbeddingBatch, ridge: float = 1e-6) -> GaussianModel:
    """Fit per-class means and a tied (pooled) covariance.

    The covariance is the mean outer product of within-class deviations
    plus a trace-scaled ridge, ridge * tr(S)/d * I, which keeps the model
    well-conditioned at toy sample sizes without distorting scale.
    """
    classes = np.unique(train.labels)
    classes = classes[classes != UNLABELED]
    if classes.size == 0:
        raise ValueError("training batch has no labeled rows")
    d = train.dim
    means = np.empty((classes.size, d))
    pooled = np.zeros((d, d))
    for idx, c in enumerate(classes):
        rows = train.matrix[train.labels == c]
        if rows.shape[0] < 2:
            raise ValueError(f"class {int(c)} has fewer than 2 samples")
        means[idx] = rows.mean(axis=0)
        centered = rows - means[idx]
        pooled += centered.T @ centered
    pooled /= len(train)
    trace = np.trace(pooled)
    # absolute fallback keeps exact point clusters fittable (zero trace)
    pooled += (ridge * trace / d if trace > 0 else ridge) * np.eye(d)
    return GaussianModel(means=means, cov=pooled, class_ids=classes)


def score_msp(logits) -> ScoreSet:
    """Maximum softmax probability of each row, computed shift-stably."""
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim != 2:
        raise ValueError("logits must be 2-D (n, classes)")
    if not np.isfinite(z).all():
        raise ValueError("logits must be finite")
    shifted = z - z.max(axis=1, keepdims=True)
    expz = np.exp(shifted)
    probs = expz / expz.sum(axis=1, keepdims=True)
    return ScoreSet(scores=probs.max(axis=1), scorer="msp")


def score_mahalanobis(test: EmbeddingBatch, model: GaussianModel) -> ScoreSet:
    """Negated distance to the nearest class mean (orientation normalized)."""
    dist = model.distances(test.matrix).min(axis=1)
    return ScoreSet(scores=-dist, scorer="mdist")


def score_norm(test: EmbeddingBatch) -> ScoreSet:
    """L2 norm of each representation; inliers are expected to score higher."""
    return ScoreSet(scores=np.linalg.norm(test.matrix, axis=1), scorer="norm")


Scorer = Callable[[EmbeddingBatch], ScoreSet]


def concat_embeddings(batches: Sequence[EmbeddingBatch]) -> EmbeddingBatch:
    """Row-aligned feature concatenation of several batches."""
    _check_aligned(batches)
    return EmbeddingBatch(
        matrix=np.concatenate([b.matrix for b in batches], axis=1),
        labels=batches[0].labels.copy(),
        provenance="repcat:" + "|".join(b.provenance for b in batches),
    )


def _check_aligned(batches: Sequence[EmbeddingBatch]) -> None:
    if not batches:
        raise ValueError("need at least one embedding batch")
    n = len(batches[0])
    for b in batches[1:]:
        if len(b) != n:
            raise ValueError("aggregation batches are misaligned in length")
        if not np.array_equal(b.labels, batches[0].labels):
            raise ValueError("aggregation batches disagree on labels")


def aggregate(
    test_batches: Sequence[EmbeddingBatch],
    strategy: str,
    scorer: Scorer | Sequence[Scorer],
) -> ScoreSet:
    """Combine aligned per-model batches into one score set.

    repcat scores the concatenated representations, repsum scores the mean
    representation, socsum sums per-model scores (and is the only strategy
    accepting one scorer per batch, for model-specific fits).
    """
    if strategy not in AGGREGATION_KINDS:
        raise ValueError(f"unknown aggregation strategy {strategy!r}")
    _check_aligned(test_batches)
    per_batch = isinstance(scorer, (list, tuple))
    if per_batch and strategy != "socsum":
        raise ValueError("per-batch scorers only make sense for socsum")
    if per_batch and len(scorer) != len(test_batches):
        raise ValueError("need exactly one scorer per batch")

    if strategy == "repcat":
        return ScoreSet(scores=scorer(concat_embeddings(test_batches)).scores, scorer="repcat")
    if strategy == "repsum":
        stacked = np.stack([b.matrix for b in test_batches])
        mean_batch = EmbeddingBatch(
            matrix=stacked.mean(axis=0),
            labels=test_batches[0].labels.copy(),
            provenance="repsum",
        )
        return ScoreSet(scores=scorer(mean_batch).scores, scorer="repsum")
    # socsum: accumulate in batch order so sums are reproducible
    total = None
    for j, b in enumerate(test_batches):
        s = (scorer[j] if per_batch else scorer)(b).scores
        total = s.copy() if total is None else total + s
    return ScoreSet(scores=total, scorer="socsum")


def knn_classify(
    train: EmbeddingBatch | Sequence[EmbeddingBatch],
    query: np.ndarray,
    k: int = 3,
) -> np.ndarray:
    """Majority vote among the k Euclidean-nearest training rows.

    Multiple aligned train batches are concatenated per sample first. Vote
    ties are broken by the nearest class mean (computed over the full
    training batch) among the tied classes.
    """
    if isinstance(train, (list, tuple)):
        train = concat_embeddings(train)
    if len(train) == 0:
        raise ValueError("empty training set")
    if k < 1 or k > len(train):
        raise ValueError(f"k={k} out of range for {len(train)} training rows")
    q = np.asarray(query, dtype=np.float64)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    if q.shape[1] != train.dim:
        raise ValueError("query dim does not match training embeddings")

    classes = np.unique(train.labels)
    class_means = np.stack([train.matrix[train.labels == c].mean(axis=0) for c in classes])

    d2 = (
        np.sum(q**2, axis=1, keepdims=True)
        - 2.0 * q @ train.matrix.T
        + np.sum(train.matrix**2, axis=1)
    )
    order = np.argsort(d2, axis=1, kind="stable")[:, :k]
    out = np.empty(q.shape[0], dtype=np.int64)
    for i in range(q.shape[0]):
        votes = train.labels[order[i]]
        counts = {int(c): int(np.sum(votes == c)) for c in np.unique(votes)}
        top = max(counts.values())
        tied = [c for c, n in counts.items() if n == top]
        if len(tied) == 1:
            out[i] = tied[0]
        else:
            mean_d = {
                c: float(np.linalg.norm(q[i] - class_means[np.flatnonzero(classes == c)[0]]))
                for c in tied
            }
            out[i] = min(tied, key=lambda c: (mean_d[c], c))
    return out[0] if single else out


# ------------------------------------------------------------------ file io

_HEADER_RE = re.compile(r"^dim=(\d+) n=(\d+) provenance=(.*)$")


def write_embeddings(path, batch: EmbeddingBatch) -> None:
    """Text format: one header line, then `label v1 ... vd` per row at 17
    significant digits, which round-trips float64 exactly."""
    with open(path, "w") as fh:
        fh.write(f"dim={batch.dim} n={len(batch)} provenance={batch.provenance}\n")
        for label, row in zip(batch.labels, batch.matrix):
            fh.write(str(int(label)) + " " + " ".join(format(v, ".17g") for v in row) + "\n")


def read_embeddings(path) -> EmbeddingBatch:
    with open(path) as fh:
        header = fh.readline()
        m = _HEADER_RE.match(header.rstrip("\n"))
        if not m:
            raise EmbeddingFormatError(f"{path}: malformed embedding header {header!r}")
        dim, n, provenance = int(m.group(1)), int(m.group(2)), m.group(3)
        labels, rows = [], []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != dim + 1:
                raise EmbeddingFormatError(
                    f"{path}:{lineno}: expected {dim + 1} columns, got {len(parts)}"
                )
            try:
                labels.append(int(parts[0]))
                rows.append([float(v) for v in parts[1:]])
            except ValueError as e:
                raise EmbeddingFormatError(f"{path}:{lineno}: unparseable value") from e
    if len(rows) != n:
        raise EmbeddingFormatError(f"{path}: header promises {n} rows, found {len(rows)}")
    matrix = np.array(rows, dtype=np.float64) if rows else np.zeros((0, dim))
    try:
        return EmbeddingBatch(matrix=matrix.reshape(len(rows), dim), labels=np.array(labels), provenance=provenance)
    except ValueError as e:
        raise EmbeddingFormatError(f"{path}: {e}") from e
