"""Frame-to-map data association.

Landmarks are matched to new stereo features by a Mahalanobis gate in pixel
space combined with binary descriptor similarity; semantic boxes are matched
to clusters through a normalized mass vote gated by its Shannon entropy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from mbvo.geometry import (
    Pose,
    StereoIntrinsics,
    project,
    projection_jacobian,
    transform_covariance,
)

DESCRIPTOR_BITS = 256


class BehindCamera(ValueError):
    """Predicted landmark fell behind the camera; exclude it from matching."""


@dataclass
class Landmark:
    """One map point with its assignment state and covariance cache."""

    landmark_id: int
    position: np.ndarray            # world frame estimate
    descriptor: np.ndarray          # (32,) uint8
    cluster_id: int                 # 0 static, > 0 cluster member
    weight: int                     # assignment hysteresis counter
    best_cov: np.ndarray | None     # world frame, minimal determinant so far
    best_cov_det: float
    last_observed: int              # frame id
    body_point: np.ndarray | None = None  # cluster frame, dynamic only
    first_observed: int = 0


@dataclass(frozen=True, eq=False)
class PredictedLandmark:
    """A landmark pushed through motion prediction into the current frame."""

    landmark_id: int
    pixel: np.ndarray       # predicted (uL, vL, uR)
    gate_cov: np.ndarray    # (3, 3) pixel-space covariance for the gate
    descriptor: np.ndarray


@dataclass
class BoxAssociation:
    box_of_cluster: dict[int, int] = field(default_factory=dict)
    entropy: dict[int, float] = field(default_factory=dict)


def descriptor_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Normalized Hamming similarity in [0, 1]."""
    distance = int(np.bitwise_count(np.bitwise_xor(a, b)).sum())
    return 1.0 - distance / DESCRIPTOR_BITS


def similarity_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise similarity between descriptor stacks, shape ``(len(a), len(b))``."""
    xor = np.bitwise_xor(a[:, None, :], b[None, :, :])
    return 1.0 - np.bitwise_count(xor).sum(axis=2) / DESCRIPTOR_BITS


def predict_landmark(
    position: np.ndarray,
    displacement: np.ndarray,
    cam_from_world: Pose,
    cov_world: np.ndarray,
    cam: StereoIntrinsics,
    depth_min: float = 0.1,
) -> tuple[np.ndarray, np.ndarray]:
    """Project ``position + displacement`` and propagate its covariance.

    Returns the predicted pixel triple and its pixel-space covariance
    ``J cov J^T``. Raises BehindCamera when the prediction falls at or below
    ``depth_min`` in front of the camera.
    """
    predicted = np.asarray(position, dtype=float) + np.asarray(displacement)
    p_cam = cam_from_world.apply(predicted)
    if p_cam[2] <= depth_min:
        raise BehindCamera(f"predicted depth {p_cam[2]!r}")
    zeta = project(Pose.identity(), p_cam, cam, depth_min).as_array()
    jac = projection_jacobian(p_cam, cam)
    cov_cam = transform_covariance(cam_from_world.rotation, cov_world)
    gamma = jac @ cov_cam @ jac.T
    return zeta, 0.5 * (gamma + gamma.T)


def update_best_covariance(
    best_cov: np.ndarray | None, best_det: float | None, new_cov: np.ndarray
) -> tuple[np.ndarray, float]:
    """Keep whichever covariance has the smaller determinant.

    The determinant is rotation invariant, so comparing world-frame
    covariances matches comparing their camera-frame sources.
    """
    new_det = float(np.linalg.det(new_cov))
    if best_cov is None or best_det is None or new_det < best_det:
        return np.asarray(new_cov, dtype=float), new_det
    return best_cov, best_det


def associate_features(
    predictions: list[PredictedLandmark],
    features,
    gate: float | None = 4.0,
    window: float = 40.0,
    similarity_floor: float = 0.6,
) -> dict[int, int]:
    """Match features to predicted landmarks.

    Candidates must lie within ``window`` pixels (Chebyshev on the left
    image), pass the squared-Mahalanobis ``gate`` when one is given, and
    reach ``similarity_floor``. Each feature takes its best candidate by
    similarity; when two features claim one landmark the higher similarity
    wins and the loser stays unmatched.
    """
    if not predictions or not features:
        return {}
    pred_px = np.stack([p.pixel for p in predictions])
    pred_desc = np.stack([p.descriptor for p in predictions])
    feat_px = np.stack([f.measurement.as_array() for f in features])
    feat_desc = np.stack([f.descriptor for f in features])

    in_window = (
        np.abs(feat_px[:, None, 0] - pred_px[None, :, 0]) <= window
    ) & (np.abs(feat_px[:, None, 1] - pred_px[None, :, 1]) <= window)
    pairs = np.argwhere(in_window)
    if len(pairs) == 0:
        return {}
    f_idx, p_idx = pairs[:, 0], pairs[:, 1]

    if gate is not None:
        covs = np.stack([predictions[p].gate_cov for p in p_idx])
        delta = feat_px[f_idx] - pred_px[p_idx]
        solved = np.linalg.solve(covs, delta[:, :, None])[:, :, 0]
        mahal = np.einsum("ij,ij->i", delta, solved)
        keep = mahal < gate
        f_idx, p_idx = f_idx[keep], p_idx[keep]
        if len(f_idx) == 0:
            return {}

    xor = np.bitwise_xor(feat_desc[f_idx], pred_desc[p_idx])
    sims = 1.0 - np.bitwise_count(xor).sum(axis=1) / DESCRIPTOR_BITS
    keep = sims >= similarity_floor
    f_idx, p_idx, sims = f_idx[keep], p_idx[keep], sims[keep]

    # per feature: best candidate by similarity, ties to the lower landmark id
    best_for_feature: dict[int, tuple[float, int]] = {}
    lm_ids = np.array([predictions[p].landmark_id for p in p_idx])
    order = np.lexsort((lm_ids, -sims, f_idx))
    for k in order:
        f = int(f_idx[k])
        if f not in best_for_feature:
            best_for_feature[f] = (float(sims[k]), int(lm_ids[k]))
    # per landmark: the best claiming feature wins, the rest are released
    best_for_landmark: dict[int, tuple[float, int]] = {}
    for f, (sim, lm) in sorted(best_for_feature.items()):
        incumbent = best_for_landmark.get(lm)
        if incumbent is None or sim > incumbent[0]:
            best_for_landmark[lm] = (sim, f)
    return {f: lm for lm, (_, f) in best_for_landmark.items()}


def associate_boxes(
    predictions_by_cluster: dict[int, tuple[np.ndarray, np.ndarray]],
    boxes,
    entropy_gate: float = 1.0,
) -> BoxAssociation:
    """Assign each cluster to at most one semantic box.

    ``predictions_by_cluster`` maps cluster id to ``(zetas, dets)``: the
    predicted pixels of its landmarks and the determinants of their gate
    covariances. A box's vote is the sum of ``1/det`` over predictions it
    contains; the vote vector is normalized per cluster and accepted only
    when its Shannon entropy (natural log) stays strictly below the gate.
    Accepted pairs are made one-to-one greedily, lowest entropy first.
    """
    result = BoxAssociation()
    candidates = []
    for cluster_id in sorted(predictions_by_cluster):
        zetas, dets = predictions_by_cluster[cluster_id]
        if len(zetas) == 0 or len(boxes) == 0:
            continue
        raw = np.zeros(len(boxes))
        for m, sbox in enumerate(boxes):
            inside = (
                (zetas[:, 0] >= sbox.x_min)
                & (zetas[:, 0] <= sbox.x_max)
                & (zetas[:, 1] >= sbox.y_min)
                & (zetas[:, 1] <= sbox.y_max)
            )
            raw[m] = np.sum(1.0 / dets[inside])
        total = raw.sum()
        if total <= 0.0:
            continue
        p = raw / total
        nonzero = p[p > 0.0]
        entropy = float(-(nonzero * np.log(nonzero)).sum())
        result.entropy[cluster_id] = entropy
        if entropy < entropy_gate:
            # best box by probability, then raw mass, then lower index
            ranked = sorted(
                range(len(boxes)), key=lambda m: (-p[m], -raw[m], m)
            )
            candidates.append((entropy, cluster_id, ranked[0]))

    taken: set[int] = set()
    for entropy, cluster_id, box_idx in sorted(candidates):
        if box_idx in taken:
            continue
        taken.add(box_idx)
        result.box_of_cluster[cluster_id] = box_idx
    return result


def box_interior_rematch(
    lost_members: dict[int, np.ndarray],
    free_features: list[tuple[int, np.ndarray]],
    similarity_floor: float = 0.6,
) -> dict[int, int]:
    """Brute-force mutual-best rematch inside an associated box.

    ``lost_members`` maps landmark id to descriptor for cluster members that
    found no match this frame; ``free_features`` are (feature index,
    descriptor) pairs inside the cluster's box. A pair is accepted only when
    each side is the strict unique best of the other and the similarity
    reaches the floor.
    """
    if not lost_members or not free_features:
        return {}
    lm_ids = sorted(lost_members)
    lm_desc = np.stack([lost_members[i] for i in lm_ids])
    feat_desc = np.stack([d for _, d in free_features])
    sims = similarity_matrix(lm_desc, feat_desc)

    matches: dict[int, int] = {}
    for col, (feat_idx, _) in enumerate(free_features):
        col_sims = sims[:, col]
        best = col_sims.max()
        if best < similarity_floor or (col_sims == best).sum() != 1:
            continue
        row = int(col_sims.argmax())
        row_sims = sims[row, :]
        row_best = row_sims.max()
        if (row_sims == row_best).sum() != 1 or int(row_sims.argmax()) != col:
            continue
        matches[feat_idx] = lm_ids[row]
    return matches
