"""Training losses for the bag classifier.

Three pieces combine into the final objective:

  * softmax cross-entropy on the bag logits,
  * a triplet loss pulling every learnable global row toward a momentum
    estimate of the positive-bag embedding center and away from the
    negative center, with cosine distance d(a, b) = 1 - cos(a, b),
  * a diversity loss equal to minus the log-determinant of the Gram
    matrix of the row-normalized global rows (plus a small jitter). The
    determinant is the squared volume spanned by the rows, so minimizing
    the loss drives them toward mutual orthogonality; at orthonormal rows
    the loss is exactly zero.

During the first ``warmup_epochs`` epochs only the cross-entropy term is
used; afterwards the weighted sum of all three is.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import (
    Node,
    add,
    constant,
    cosine_similarity,
    logdet_psd,
    log_softmax_rows,
    matmul,
    pick,
    relu,
    row_normalize,
    scale,
    slice_rows,
    transpose,
    _wrap,
)


@dataclass
class ObjectiveConfig:
    """Weights and knobs of the combined training objective."""

    lambda_tri: float = 0.1
    lambda_div: float = 0.1
    margin: float = 0.3
    jitter: float = 1e-10
    warmup_epochs: int = 20

    def __post_init__(self):
        if self.lambda_tri < 0 or self.lambda_div < 0 or self.margin < 0:
            raise ValueError("loss weights and margin must be nonnegative")
        if self.jitter <= 0:
            raise ValueError("jitter must be positive")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be nonnegative")


class CenterTracker:
    """Momentum estimates of the mean instance embedding per bag class.

    Exactly one center moves per update: the one matching the label of the
    bag just seen. The first update of a center assigns the bag mean
    directly instead of blending with the arbitrary initial state. Centers
    are plain arrays, never graph nodes, so they receive no gradients.
    """

    def __init__(self, dim: int, momentum: float = 0.4):
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        self.momentum = float(momentum)
        self.pos_center = np.zeros(dim)
        self.neg_center = np.zeros(dim)
        self.pos_initialized = False
        self.neg_initialized = False

    @property
    def ready(self) -> bool:
        return self.pos_initialized and self.neg_initialized

    def update(self, bag_label: int, instance_embeddings: np.ndarray) -> "CenterTracker":
        emb = np.asarray(instance_embeddings, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[0] < 1:
            raise ValueError(f"expected an n x L embedding matrix, got shape {emb.shape}")
        mean = emb.mean(axis=0)
        m = self.momentum
        if bag_label == 1:
            if self.pos_initialized:
                self.pos_center = m * self.pos_center + (1.0 - m) * mean
            else:
                self.pos_center = mean.copy()
                self.pos_initialized = True
        else:
            if self.neg_initialized:
                self.neg_center = m * self.neg_center + (1.0 - m) * mean
            else:
                self.neg_center = mean.copy()
                self.neg_initialized = True
        return self


def cross_entropy(logits, label: int) -> Node:
    """Negative log softmax probability of ``label``, numerically stable."""
    logits = _wrap(logits)
    if logits.value.shape[0] != 1:
        raise ValueError(f"logits must be a single row, got shape {logits.value.shape}")
    if not 0 <= label < logits.value.shape[1]:
        raise ValueError(f"label {label} out of range for {logits.value.shape[1]} classes")
    return scale(pick(log_softmax_rows(logits), 0, int(label)), -1.0)


def triplet_loss(global_rows, tracker: CenterTracker, margin: float) -> tuple[Node, bool]:
    """Hinge alignment of every global row against the two centers.

    Per row g: [ (1 - cos(g, pos)) - (1 - cos(g, neg)) + margin ]_+ summed
    over rows. Until both centers have been initialized the loss cannot be
    formed; a zero node is returned with ``skipped`` set.
    """
    g = _wrap(global_rows)
    if not tracker.ready:
        return constant([[0.0]]), True
    pos = constant(tracker.pos_center)
    neg = constant(tracker.neg_center)
    total: Node | None = None
    for k in range(g.value.shape[0]):
        row = pick_row(g, k)
        d_pos = 1.0 - cosine_similarity(row, pos)
        d_neg = 1.0 - cosine_similarity(row, neg)
        hinge = relu(d_pos - d_neg + float(margin))
        total = hinge if total is None else add(total, hinge)
    return total, False


def pick_row(m, k: int) -> Node:
    """Row k of a matrix node as a 1xL node."""
    from .numerics import slice_rows

    return slice_rows(m, k, k + 1)


def diversity_loss(global_rows, epsilon: float) -> Node:
    """Minus log det of the Gram matrix of row-normalized global rows.

    Rows are normalized to unit norm inside the loss so the determinant is
    bounded above by 1 (Hadamard) and the infimum of the loss is 0, reached
    exactly at mutually orthogonal rows. ``epsilon`` scales an identity
    matrix added to the Gram to keep the determinant away from zero when
    rows become collinear.
    """
    g = _wrap(global_rows)
    if g.value.shape[0] < 1:
        raise ValueError("need at least one global row")
    ghat = row_normalize(g)
    gram = matmul(ghat, transpose(ghat))
    if epsilon < 0:
        raise ValueError(f"epsilon must be nonnegative, got {epsilon}")
    if epsilon > 0:
        gram = add(gram, constant(np.eye(g.value.shape[0]) * float(epsilon)))
    return scale(logdet_psd(gram), -1.0)


def total_loss(ce, tri, div, config: ObjectiveConfig, epoch: int):
    """Warmup-gated combination: ce alone before ``warmup_epochs``, then
    ce + lambda_tri * tri + lambda_div * div. Works on nodes or floats."""
    if epoch < 0:
        raise ValueError(f"epoch must be nonnegative, got {epoch}")
    if epoch < config.warmup_epochs:
        return ce
    return ce + config.lambda_tri * tri + config.lambda_div * div
