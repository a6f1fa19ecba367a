"""Per-frame landmark-to-cluster assignment.

A fully connected field over the observed landmarks is built each frame.
Candidate labels are the live clusters (the static background included), one
provisional label per unmatched semantic box, and an outlier label.  Unary
evidence combines box membership, spatial proximity in the camera frame, and
short-horizon motion consistency; a distance kernel couples nearby landmarks.
The field is relaxed by coordinate-wise mean-field updates, the winning
labeling is re-anchored to existing cluster identities by set overlap, and
per-landmark hysteresis weights smooth the final assignments over time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from mbvo.association import Landmark
from mbvo.geometry import Pose
from mbvo.simulate import SemanticBox

OUTLIER = -1
_TINY = 1e-300


class NonFiniteEnergy(ValueError):
    """A unary energy was NaN or infinite; the field cannot be relaxed."""


@dataclass(frozen=True)
class Label:
    """One column of the assignment field.

    ``kind`` is ``"cluster"`` (an existing cluster, static is cluster 0),
    ``"new_box"`` (a semantic box no cluster claimed this frame), or
    ``"outlier"``.
    """

    kind: str
    cluster_id: int | None = None
    box_index: int | None = None


@dataclass(frozen=True)
class ClusterState:
    """Pose and translational velocity of one cluster at one frame."""

    pose: Pose
    velocity: np.ndarray  # world frame, m/s


@dataclass
class ClusterModel:
    """Persistent identity and geometry summary of one tracked rigid body."""

    cluster_id: int
    class_label: str
    members: set[int] = field(default_factory=set)
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))
    dimension: float = 1.0
    last_seen: int = 0
    live: bool = True
    trajectory: dict[int, ClusterState] = field(default_factory=dict)

    def refresh_geometry(self, positions: np.ndarray) -> None:
        if len(positions):
            self.center, self.dimension = cloud_geometry(positions)


def cloud_geometry(
    points: np.ndarray, dimension_floor: float = 0.05
) -> tuple[np.ndarray, float]:
    """Center and characteristic spread of a point cloud.

    The spread is the 30th-to-70th interpercentile range averaged over the
    axes; the floor keeps spatial-affinity exponents finite for clouds that
    collapse along every axis.
    """
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    spread = np.percentile(pts, 70.0, axis=0) - np.percentile(pts, 30.0, axis=0)
    return pts.mean(axis=0), float(max(spread.mean(), dimension_floor))


@dataclass
class MeanFieldResult:
    q: np.ndarray                       # (N, M) marginals
    labels: np.ndarray                  # (N,) argmax label index per node
    free_energy: list[float] | None = None


@dataclass
class LabelMatch:
    """Outcome of re-anchoring inferred labels to persistent cluster ids."""

    label_to_cluster: dict[int, int] = field(default_factory=dict)
    new_cluster_labels: list[int] = field(default_factory=list)
    outlier_labels: list[int] = field(default_factory=list)
    groups: dict[int, list[int]] = field(default_factory=dict)


# ---------------------------------------------------------------------------
# unary terms


def unary_2d(
    points: np.ndarray,
    label_boxes: list[SemanticBox | None],
    eta: float,
) -> np.ndarray:
    """Box-membership term.

    Each node splits probability ``eta`` uniformly over the labels whose box
    contains its left-image pixel and ``1 - eta`` over the rest.  Labels
    without a box (static, outlier, clusters with no box this frame) can only
    receive the complement share.  Rows are left unnormalized; the caller
    normalizes after combining terms.
    """
    points = np.asarray(points, dtype=float)
    n, m = points.shape[0], len(label_boxes)
    inside = np.zeros((n, m), dtype=bool)
    for j, sbox in enumerate(label_boxes):
        if sbox is None:
            continue
        inside[:, j] = (
            (points[:, 0] >= sbox.x_min)
            & (points[:, 0] <= sbox.x_max)
            & (points[:, 1] >= sbox.y_min)
            & (points[:, 1] <= sbox.y_max)
        )
    counts = inside.sum(axis=1)
    out = np.empty((n, m))
    complement = np.where(counts < m, (1.0 - eta) / np.maximum(m - counts, 1), 0.0)
    out[:] = complement[:, None]
    hit = counts > 0
    out[inside] = np.repeat(eta / counts[hit], counts[hit])
    return out


def unary_3d(
    points: np.ndarray,
    covariances: np.ndarray,
    centers: np.ndarray,
    dimensions: np.ndarray,
    outlier_col: int | None,
    outlier_exponent: float = 4.0,
) -> np.ndarray:
    """Spatial proximity term.

    Points, covariances and centers must share one frame.  For a spatial
    label with center ``c`` and characteristic dimension ``l``
    the score is ``exp(-(z - c)^T S^{-1} (z - c) / l^2)`` with ``S`` the
    node's position covariance.  The outlier column, when requested, is the
    constant floor ``exp(-outlier_exponent)`` and must sit after the spatial
    columns.
    """
    points = np.asarray(points, dtype=float)
    centers = np.asarray(centers, dtype=float)
    dimensions = np.asarray(dimensions, dtype=float)
    n = points.shape[0]
    m_spatial = centers.shape[0]
    # (N, M, 3) offsets solved against each node's covariance once
    diff = centers[None, :, :] - points[:, None, :]
    solved = np.linalg.solve(covariances[:, None, :, :], diff[..., None])[..., 0]
    mahal_sq = np.einsum("nmi,nmi->nm", diff, solved)
    scores = np.exp(-mahal_sq / np.maximum(dimensions, 1e-12)[None, :] ** 2)
    if outlier_col is None:
        return scores
    if outlier_col != m_spatial:
        raise ValueError("outlier column must follow the spatial columns")
    floor = np.full((n, 1), np.exp(-outlier_exponent))
    return np.hstack([scores, floor])


def motion_unary(residuals: np.ndarray, neutral: np.ndarray) -> np.ndarray:
    """Motion-consistency term from accumulated squared reprojection error.

    ``residuals[i, j]`` is the covariance-weighted squared reprojection error
    of node ``i`` explained by label ``j`` over the comparison horizon.
    Labels flagged neutral (new boxes, outlier) carry no motion evidence and
    score 1, i.e. they neither attract nor repel.
    """
    out = np.exp(-np.asarray(residuals, dtype=float))
    out[:, np.asarray(neutral, dtype=bool)] = 1.0
    return out


def combine_unaries(terms: list[np.ndarray]) -> np.ndarray:
    """Multiply probability tables and return per-node normalized energies.

    The product is taken in log space; each row is normalized so that
    ``exp(-energy)`` sums to one over the labels.
    """
    log_p = np.zeros_like(np.asarray(terms[0], dtype=float))
    for term in terms:
        log_p += np.log(np.maximum(term, _TINY))
    log_p -= log_p.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(log_p).sum(axis=1, keepdims=True))
    return -(log_p - log_norm)


def pairwise_kernel(points: np.ndarray, bandwidth: float) -> np.ndarray:
    """Gaussian affinity ``exp(-|p_i - p_j|^2 / bandwidth^2)``, zero diagonal."""
    points = np.asarray(points, dtype=float)
    diff = points[:, None, :] - points[None, :, :]
    k = np.exp(-(diff * diff).sum(axis=2) / bandwidth**2)
    np.fill_diagonal(k, 0.0)
    return k


# ---------------------------------------------------------------------------
# inference


def labeling_energy(
    unary: np.ndarray, kernel: np.ndarray, labels: np.ndarray, alpha: float
) -> float:
    """Energy of a hard labeling: unary cost plus a Potts penalty per
    disagreeing pair, weighted by the kernel."""
    labels = np.asarray(labels)
    e = float(unary[np.arange(len(labels)), labels].sum())
    differ = labels[:, None] != labels[None, :]
    e += 0.5 * alpha * float(kernel[differ].sum())
    return e


def mean_field_free_energy(
    unary: np.ndarray, kernel: np.ndarray, q: np.ndarray, alpha: float
) -> float:
    """Variational free energy of marginals ``q`` under the field."""
    agreement = np.einsum("il,jl->ij", q, q)
    pair = 0.5 * alpha * float((kernel * (1.0 - agreement)).sum())
    entropy_term = float((q * np.log(np.maximum(q, _TINY))).sum())
    return float((q * unary).sum()) + pair + entropy_term


def mean_field_infer(
    unary: np.ndarray,
    kernel: np.ndarray,
    alpha: float,
    iterations: int = 10,
    track_free_energy: bool = False,
) -> MeanFieldResult:
    """Coordinate-wise mean-field relaxation of the assignment field.

    Nodes are updated one at a time in index order; every update is the exact
    minimizer of the free energy over that node's marginal with the others
    held fixed, so the tracked free energy never increases.  One iteration is
    a full sweep over the nodes.
    """
    unary = np.asarray(unary, dtype=float)
    if not np.isfinite(unary).all():
        raise NonFiniteEnergy("unary energies must be finite")
    n, m = unary.shape
    negu = -unary
    scaled = negu - negu.max(axis=1, keepdims=True)
    q = np.exp(scaled)
    q /= q.sum(axis=1, keepdims=True)
    coupling = alpha * np.asarray(kernel, dtype=float)
    history: list[float] | None = None
    if track_free_energy:
        history = [mean_field_free_energy(unary, kernel, q, alpha)]
    for _ in range(iterations):
        changed = False
        for i in range(n):
            # Potts coupling: alpha * sum_j k_ij (1 - q_j(l)), constant part dropped
            x = negu[i] + coupling[i] @ q
            x -= x.max()
            qi = np.exp(x)
            qi /= qi.sum()
            changed = changed or not np.array_equal(qi, q[i])
            q[i] = qi
        if track_free_energy:
            history.append(mean_field_free_energy(unary, kernel, q, alpha))
        if not changed:
            # a sweep that reproduced every marginal bitwise is a fixpoint:
            # remaining sweeps could not alter the result
            break
    return MeanFieldResult(q=q, labels=q.argmax(axis=1), free_energy=history)


# ---------------------------------------------------------------------------
# label anchoring and hysteresis


def match_labels(
    node_labels: np.ndarray,
    labels: list[Label],
    node_landmarks: list[int | None],
    cluster_members: dict[int, set[int]],
    min_new_cluster_size: int,
) -> LabelMatch:
    """Re-anchor inferred label columns to persistent cluster identities.

    Each non-outlier label's node group is scored against every existing
    cluster by the number of shared landmark ids, and a one-to-one assignment
    maximizing total overlap binds labels to clusters.  Zero-overlap pairs are
    discarded.  An unbound group spawns a new cluster only if it shares no
    landmark with any cluster and has at least ``min_new_cluster_size`` nodes;
    otherwise its nodes fall to the outlier label.
    """
    node_labels = np.asarray(node_labels)
    result = LabelMatch()
    candidate_idx = [j for j, lab in enumerate(labels) if lab.kind != "outlier"]
    groups = {j: np.nonzero(node_labels == j)[0].tolist() for j in candidate_idx}
    result.groups = {j: nodes for j, nodes in groups.items() if nodes}

    cluster_ids = sorted(cluster_members)
    overlap = np.zeros((len(candidate_idx), len(cluster_ids)), dtype=float)
    for r, j in enumerate(candidate_idx):
        ids = {node_landmarks[i] for i in groups[j]} - {None}
        for c, q in enumerate(cluster_ids):
            overlap[r, c] = len(ids & cluster_members[q])

    if overlap.size:
        rows, cols = linear_sum_assignment(-overlap)
        for r, c in zip(rows, cols):
            if overlap[r, c] > 0:
                result.label_to_cluster[candidate_idx[r]] = cluster_ids[c]

    for r, j in enumerate(candidate_idx):
        if j in result.label_to_cluster or not groups[j]:
            continue
        untouched = overlap.size == 0 or not overlap[r].any()
        if untouched and len(groups[j]) >= min_new_cluster_size:
            result.new_cluster_labels.append(j)
        else:
            result.outlier_labels.append(j)
    return result


def update_assignment_weights(
    landmarks: dict[int, Landmark],
    resolved: dict[int, int],
    weight_max: int,
) -> list[int]:
    """Apply one frame of assignment hysteresis.

    Agreement with the stored cluster raises the landmark's weight toward the
    cap; disagreement lowers it.  At zero the landmark adopts the contested
    assignment with weight 1, except that adopting the outlier label removes
    it from the map: the returned list holds the landmark ids to delete.
    """
    removals: list[int] = []
    for lm_id, target in resolved.items():
        lm = landmarks[lm_id]
        if target == lm.cluster_id:
            lm.weight = min(lm.weight + 1, weight_max)
            continue
        lm.weight -= 1
        if lm.weight > 0:
            continue
        if target == OUTLIER:
            removals.append(lm_id)
        else:
            lm.cluster_id = target
            lm.weight = 1
    return removals
