"""Cluster assignment field: unary terms, mean-field inference, label matching.

The mean-field oracle here is exhaustive enumeration over tiny label fields;
the matcher oracle is brute-force permutation search (see acceptance tests
for the full-size versions).
"""

import itertools
import math

import numpy as np
import pytest

from mbvo.clustering import (
    OUTLIER,
    ClusterModel,
    Label,
    cloud_geometry,
    combine_unaries,
    labeling_energy,
    match_labels,
    mean_field_infer,
    mean_field_free_energy,
    motion_unary,
    pairwise_kernel,
    unary_2d,
    unary_3d,
    update_assignment_weights,
)
from mbvo.association import Landmark
from mbvo.simulate import SemanticBox


def box(x0, y0, x1, y1):
    return SemanticBox(x0, y0, x1, y1, "block", 1.0)


# ---------------------------------------------------------------------------
# unary terms


def test_unary_2d_single_box():
    labels = [Label("cluster", cluster_id=0), Label("cluster", cluster_id=1),
              Label("outlier")]
    label_boxes = [None, box(0, 0, 100, 100), None]
    pts = np.array([[50.0, 50.0], [200.0, 200.0]])
    p = unary_2d(pts, label_boxes, eta=0.95)
    # node 0 sits in cluster 1's box: eta vs (1 - eta)/(M - 1)
    np.testing.assert_allclose(p[0], [0.025, 0.95, 0.025])
    # node 1 is in no box: uniform after normalization
    np.testing.assert_allclose(p[1] / p[1].sum(), np.full(3, 1 / 3))


def test_unary_2d_two_boxes():
    labels_boxes = [box(0, 0, 100, 100), box(50, 0, 150, 100), None, None]
    pts = np.array([[75.0, 50.0]])  # inside both boxes, M = 4
    p = unary_2d(pts, labels_boxes, eta=0.95)
    np.testing.assert_allclose(p[0], [0.475, 0.475, 0.025, 0.025])
    assert p[0].sum() == pytest.approx(1.0)


def test_unary_3d_reference_exponent():
    centers = np.array([[0.0, 0.0, 0.0]])
    dims = np.array([0.5])
    z = np.array([[0.1, 0.0, 0.2]])
    cov = np.diag([0.01, 0.01, 0.04])[None, :, :]
    p = unary_3d(z, cov, centers, dims, outlier_col=None)
    # (0.1^2/0.01 + 0.2^2/0.04) / 0.5^2 = (1 + 1) / 0.25 = 8
    assert p[0, 0] == pytest.approx(math.exp(-8.0))


def test_unary_3d_center_is_maximal_and_outlier_floor():
    centers = np.array([[1.0, 2.0, 3.0]])
    dims = np.array([0.4])
    z = np.array([[1.0, 2.0, 3.0], [1.3, 2.0, 3.0]])
    cov = np.tile(np.eye(3) * 0.04, (2, 1, 1))
    p = unary_3d(z, cov, centers, dims, outlier_col=1, outlier_exponent=4.0)
    assert p[0, 0] == pytest.approx(1.0)
    assert p[1, 0] < p[0, 0]
    np.testing.assert_allclose(p[:, 1], math.exp(-4.0))


def test_motion_unary_zero_residual_is_maximal():
    residuals = np.array([[0.0, 12.5], [3.0, 1.0]])
    neutral = np.array([False, False])
    p = motion_unary(residuals, neutral)
    assert p[0, 0] == pytest.approx(1.0)
    assert p[0, 1] == pytest.approx(math.exp(-12.5))
    neutral = np.array([False, True])
    p = motion_unary(residuals, neutral)
    np.testing.assert_allclose(p[:, 1], 1.0)


def test_combine_unaries_normalizes_rows():
    rng = np.random.default_rng(5)
    terms = [rng.uniform(0.01, 1.0, size=(6, 4)) for _ in range(3)]
    energies = combine_unaries(terms)
    probs = np.exp(-energies)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
    # combination is the normalized product
    manual = terms[0] * terms[1] * terms[2]
    manual /= manual.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(probs, manual, atol=1e-12)


def test_pairwise_kernel_values():
    pts = np.array([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
    k = pairwise_kernel(pts, bandwidth=1.0)
    assert k[0, 0] == 0.0 and k[1, 1] == 0.0
    assert k[0, 1] == pytest.approx(math.exp(-4.0))
    assert k[1, 0] == pytest.approx(k[0, 1])


# ---------------------------------------------------------------------------
# mean field


def random_problem(rng, n_nodes, n_labels, margin=0.0):
    unary = rng.uniform(0.0, 3.0, size=(n_nodes, n_labels))
    if margin > 0.0:
        for i in range(n_nodes):
            best = rng.integers(n_labels)
            unary[i, best] = unary[i].min() - margin
    pts = rng.uniform(-2.0, 2.0, size=(n_nodes, 3))
    kernel = pairwise_kernel(pts, bandwidth=1.0)
    return unary, kernel


def oracle_instance(rng):
    """Spatially blobbed field with >= 1 nat unary margins.

    Nodes form up to three groups separated by 3 m; each group prefers one
    label, with an occasional contrarian node whose unary points elsewhere.
    This mirrors the operating regime: compact rigid bodies with mostly
    consistent evidence that smoothing should clean up.
    """
    n_labels = int(rng.integers(2, 4))
    n_nodes = int(rng.integers(4, 9))
    n_groups = int(rng.integers(1, n_labels + 1))
    group_label = rng.permutation(n_labels)[:n_groups]
    node_group = rng.integers(n_groups, size=n_nodes)
    centers = np.zeros((n_groups, 3))
    centers[:, 0] = 3.0 * np.arange(n_groups)
    points = centers[node_group] + rng.normal(0.0, 0.3, size=(n_nodes, 3))
    unary = rng.uniform(0.5, 2.5, size=(n_nodes, n_labels))
    for i in range(n_nodes):
        preferred = int(group_label[node_group[i]])
        if rng.random() < 0.2:
            preferred = int(rng.integers(n_labels))
        unary[i, preferred] = unary[i].min() - (1.0 + rng.uniform(0.0, 1.0))
    # per-node normalization, as the engine feeds the solver: shifts each row
    # by a constant, preserving argmins and margins, and keeps energies >= 0
    unary = combine_unaries([np.exp(-unary)])
    return unary, pairwise_kernel(points, bandwidth=1.0)


def exhaustive_minimum(unary, kernel, alpha):
    n, m = unary.shape
    best, best_labels = np.inf, None
    for labels in itertools.product(range(m), repeat=n):
        e = labeling_energy(unary, kernel, np.array(labels), alpha)
        if e < best:
            best, best_labels = e, labels
    return best, best_labels


def test_labeling_energy_by_hand():
    unary = np.array([[0.5, 1.5], [2.0, 0.25]])
    kernel = np.array([[0.0, 0.3], [0.3, 0.0]])
    # same labels: no pairwise penalty
    assert labeling_energy(unary, kernel, np.array([0, 0]), alpha=5.0) == pytest.approx(2.5)
    # differing labels pay alpha * k once per pair
    assert labeling_energy(unary, kernel, np.array([0, 1]), alpha=5.0) == pytest.approx(
        0.5 + 0.25 + 5.0 * 0.3
    )


def test_mean_field_alpha_zero_reduces_to_unary_argmax():
    rng = np.random.default_rng(11)
    for _ in range(25):
        unary, kernel = random_problem(rng, 7, 3)
        result = mean_field_infer(unary, kernel, alpha=0.0, iterations=10)
        np.testing.assert_array_equal(result.labels, unary.argmin(axis=1))


def test_mean_field_free_energy_never_increases():
    rng = np.random.default_rng(13)
    for _ in range(25):
        unary, kernel = random_problem(rng, 8, 3)
        result = mean_field_infer(
            unary, kernel, alpha=5.0, iterations=10, track_free_energy=True
        )
        diffs = np.diff(result.free_energy)
        assert (diffs <= 1e-9).all(), diffs


def test_mean_field_near_exhaustive_minimum():
    rng = np.random.default_rng(17)
    hits = 0
    for _ in range(20):
        unary, kernel = oracle_instance(rng)
        result = mean_field_infer(unary, kernel, alpha=5.0, iterations=10)
        achieved = labeling_energy(unary, kernel, result.labels, alpha=5.0)
        best, _ = exhaustive_minimum(unary, kernel, alpha=5.0)
        if achieved <= best * 1.05 + 1e-12:
            hits += 1
    assert hits >= 19


def test_mean_field_single_node_is_argmax_after_one_iteration():
    unary = np.array([[1.2, 0.1, 3.0]])
    kernel = np.zeros((1, 1))
    result = mean_field_infer(unary, kernel, alpha=5.0, iterations=1)
    assert result.labels[0] == 1


def test_mean_field_rejects_non_finite_unaries():
    from mbvo.clustering import NonFiniteEnergy

    unary = np.array([[0.0, np.inf], [1.0, 2.0]])
    with pytest.raises(NonFiniteEnergy):
        mean_field_infer(unary, np.zeros((2, 2)), alpha=1.0)


def test_mean_field_groups_by_proximity():
    # two spatial blobs with weakly informative unaries follow their blob
    pts = np.vstack(
        [np.random.default_rng(1).normal(0, 0.1, (5, 3)),
         np.random.default_rng(2).normal(4, 0.1, (5, 3))]
    )
    kernel = pairwise_kernel(pts, bandwidth=1.0)
    unary = np.full((10, 2), math.log(2.0))
    unary[0, 0] -= 0.5  # nudge blob A toward label 0
    unary[5, 1] -= 0.5  # nudge blob B toward label 1
    result = mean_field_infer(unary, kernel, alpha=5.0, iterations=10)
    assert set(result.labels[:5]) == {0}
    assert set(result.labels[5:]) == {1}


def test_free_energy_matches_direct_formula():
    rng = np.random.default_rng(19)
    unary, kernel = random_problem(rng, 5, 3)
    q = rng.uniform(0.1, 1.0, size=(5, 3))
    q /= q.sum(axis=1, keepdims=True)
    f = mean_field_free_energy(unary, kernel, q, alpha=2.0)
    expected = float((q * unary).sum())
    for i in range(5):
        for j in range(i + 1, 5):
            expected += 2.0 * kernel[i, j] * (1.0 - float(q[i] @ q[j]))
    expected += float((q * np.log(q)).sum())
    assert f == pytest.approx(expected, rel=1e-12)


# ---------------------------------------------------------------------------
# label matching


def labels_for(n_clusters, n_new=0):
    out = [Label("cluster", cluster_id=q) for q in range(n_clusters)]
    out += [Label("new_box", box_index=i) for i in range(n_new)]
    out.append(Label("outlier"))
    return out


def test_match_labels_identity():
    labels = labels_for(2)
    node_labels = np.array([0, 0, 1, 1, 2])
    node_lms = [10, 11, 20, 21, 30]
    members = {0: {10, 11}, 1: {20, 21}}
    result = match_labels(node_labels, labels, node_lms, members, min_new_cluster_size=3)
    assert result.label_to_cluster == {0: 0, 1: 1}
    assert result.new_cluster_labels == []


def test_match_labels_repairs_permutation():
    # inference swapped the two cluster labels; overlap matching restores them
    labels = labels_for(2)
    node_labels = np.array([1, 1, 0, 0])
    node_lms = [10, 11, 20, 21]
    members = {0: {10, 11}, 1: {20, 21}}
    result = match_labels(node_labels, labels, node_lms, members, min_new_cluster_size=3)
    assert result.label_to_cluster == {1: 0, 0: 1}


def test_match_labels_spawns_new_cluster_from_large_group():
    labels = labels_for(1, n_new=1)  # label 1 is a fresh box candidate
    node_labels = np.array([0, 0, 1, 1, 1])
    node_lms = [10, 11, None, None, None]
    members = {0: {10, 11}}
    result = match_labels(node_labels, labels, node_lms, members, min_new_cluster_size=3)
    assert result.label_to_cluster == {0: 0}
    assert result.new_cluster_labels == [1]


def test_match_labels_small_orphan_group_goes_to_outliers():
    labels = labels_for(1, n_new=1)
    node_labels = np.array([0, 0, 1, 1])
    node_lms = [10, 11, None, None]
    members = {0: {10, 11}}
    result = match_labels(node_labels, labels, node_lms, members, min_new_cluster_size=3)
    assert result.new_cluster_labels == []
    assert 1 in result.outlier_labels


def test_match_labels_zero_overlap_assignment_not_forced():
    # the Hungarian solution must not bind a label to a cluster it never touched
    labels = labels_for(2)
    node_labels = np.array([0, 0])
    node_lms = [10, 11]
    members = {0: {10, 11}, 1: {99, 98, 97}}
    result = match_labels(node_labels, labels, node_lms, members, min_new_cluster_size=2)
    assert result.label_to_cluster == {0: 0}
    assert 1 not in result.label_to_cluster


# ---------------------------------------------------------------------------
# assignment weights


def make_landmark(lm_id, cluster_id, weight):
    return Landmark(
        landmark_id=lm_id,
        position=np.zeros(3),
        descriptor=np.zeros(32, dtype=np.uint8),
        cluster_id=cluster_id,
        weight=weight,
        best_cov=None,
        best_cov_det=math.inf,
        last_observed=0,
    )


def test_weights_increment_on_agreement_and_cap():
    lms = {1: make_landmark(1, 2, 99), 2: make_landmark(2, 2, 100)}
    removals = update_assignment_weights(lms, {1: 2, 2: 2}, weight_max=100)
    assert removals == []
    assert lms[1].weight == 100
    assert lms[2].weight == 100  # capped


def test_weights_switch_after_enough_disagreement():
    lm = make_landmark(1, 2, 3)
    lms = {1: lm}
    for step in range(2):
        update_assignment_weights(lms, {1: 5}, weight_max=100)
        assert lm.cluster_id == 2, step
    update_assignment_weights(lms, {1: 5}, weight_max=100)
    # third disagreement drains the weight: adopt the new cluster at weight 1
    assert lm.cluster_id == 5
    assert lm.weight == 1


def test_weights_outlier_adoption_requests_removal():
    lm = make_landmark(1, 2, 1)
    lms = {1: lm}
    removals = update_assignment_weights(lms, {1: OUTLIER}, weight_max=100)
    assert removals == [1]


def test_weights_unmentioned_landmarks_untouched():
    lm = make_landmark(7, 3, 5)
    lms = {7: lm}
    update_assignment_weights(lms, {}, weight_max=100)
    assert lm.weight == 5 and lm.cluster_id == 3


# ---------------------------------------------------------------------------
# cluster geometry summaries


def test_cloud_geometry_interpercentile_spread():
    # evenly spaced coordinates make the percentiles exact: p70 - p30 = 0.4 span
    x = np.linspace(0.0, 10.0, 11)
    points = np.column_stack([x, 2.0 * x, np.zeros(11)])
    center, dimension = cloud_geometry(points)
    assert np.allclose(center, [5.0, 10.0, 0.0])
    assert dimension == pytest.approx((4.0 + 8.0 + 0.0) / 3.0)


def test_cloud_geometry_floors_degenerate_clouds():
    points = np.tile([1.0, 2.0, 3.0], (5, 1))
    center, dimension = cloud_geometry(points)
    assert np.allclose(center, [1.0, 2.0, 3.0])
    assert dimension == 0.05


def test_cluster_model_refresh_tracks_membership_cloud():
    model = ClusterModel(cluster_id=3, class_label="block", members={1, 2, 3})
    model.refresh_geometry(np.array([[0.0, 0, 0], [2.0, 0, 0], [4.0, 0, 0]]))
    assert np.allclose(model.center, [2.0, 0.0, 0.0])
    assert model.dimension > 0.05
    before = model.center.copy()
    model.refresh_geometry(np.zeros((0, 3)))  # empty cloud keeps the summary
    assert np.allclose(model.center, before)
