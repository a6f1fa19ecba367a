"""Frame-loop tracking engine.

Ties the per-frame stages together: constant-velocity motion prediction,
feature and box association, soft cluster assignment over the per-frame
node field, landmark triangulation, double-track window maintenance with
marginalization, then windowed camera refinement and per-cluster state
refinement.  The engine owns all mutable state; there is no wall-clock
access and no randomness anywhere in the loop, so replaying a stream with
the same configuration reproduces every output bit.

Conventions:
  * cluster id 0 is the static scene; dynamic clusters get ids 1, 2, ...
  * landmark positions are world frame; members of a dynamic cluster
    additionally carry a body-frame point that its per-frame pose maps
    back to the world.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from mbvo.association import (
    BehindCamera,
    Landmark,
    PredictedLandmark,
    associate_boxes,
    associate_features,
    box_interior_rematch,
    predict_landmark,
    update_best_covariance,
)
from mbvo.clustering import (
    OUTLIER,
    ClusterModel,
    ClusterState,
    Label,
    cloud_geometry,
    combine_unaries,
    match_labels,
    mean_field_infer,
    motion_unary,
    pairwise_kernel,
    unary_2d,
    unary_3d,
    update_assignment_weights,
)
from mbvo.config import EngineConfig
from mbvo.estimation import (
    DegenerateCloud,
    InformationPrior,
    RankDeficient,
    init_cluster_pose,
    marginalize_frame,
    optimize_cluster,
    optimize_static,
    predict_constant_velocity,
)
from mbvo.geometry import (
    DegenerateDisparity,
    Pose,
    StereoIntrinsics,
    back_project,
    back_projection_jacobian,
    project_points,
)
from mbvo.simulate import FrameObservations
from mbvo.window import FrameEntry, WindowState, live_clusters

THREAD_ENV_VAR = "MBVO_THREADS"

# information placed on the first marginalized frame's pose; from then on the
# prior itself carries the gauge and no frame needs to be held fixed
_BOOTSTRAP_GAUGE_INFO = 1e8
# spatial label standing in for "anywhere": its proximity exponent vanishes
_NEUTRAL_DIMENSION = 1e6
# squared-error surrogate when a transported point falls behind the camera
_INVALID_TRANSPORT_PENALTY = 1e4


def _resolve_threads(configured: int) -> int:
    """Worker count for per-cluster refinement.

    A configured positive value wins; otherwise the CPU count.  The
    environment variable caps the result either way so deployments can
    restrict parallelism without touching saved configurations.
    """
    n = configured if configured > 0 else (os.cpu_count() or 1)
    cap = os.environ.get(THREAD_ENV_VAR)
    if cap is not None:
        n = min(n, max(1, int(cap)))
    return max(1, n)


@dataclass(frozen=True)
class FrameResult:
    """Engine output for one processed frame.

    ``clusters`` holds the state of every live dynamic cluster at this
    frame; ``feature_labels`` maps each feature index that produced or
    matched a landmark to ``(feature, landmark, cluster)``.
    """

    frame_id: int
    timestamp: float
    camera: Pose
    tracking_lost: bool
    static_inliers: int
    clusters: dict[int, ClusterState]
    cluster_members: dict[int, tuple[int, ...]]
    feature_labels: tuple[tuple[int, int, int], ...]


@dataclass
class _NodeField:
    """Per-frame assignment nodes: matched landmarks first, then candidate
    new landmarks that back-projected successfully."""

    features: list[int] = field(default_factory=list)
    landmark_ids: list[int | None] = field(default_factory=list)
    pixels: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    positions: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    covariances: np.ndarray = field(default_factory=lambda: np.zeros((0, 3, 3)))

    def __len__(self) -> int:
        return len(self.features)


class Engine:
    """Stateful multi-body tracker driven one observation frame at a time."""

    def __init__(self, config: EngineConfig, cam: StereoIntrinsics):
        self.config = config
        self.cam = cam
        self.landmarks: dict[int, Landmark] = {}
        self.clusters: dict[int, ClusterModel] = {}
        self.camera_poses: dict[int, Pose] = {}
        self.timestamps: dict[int, float] = {}
        self.frame_obs: dict[int, dict[int, np.ndarray]] = {}
        self.processed: list[int] = []
        self.window = WindowState.from_config(config)
        self.next_landmark_id = 0
        self.next_cluster_id = 1
        self.consecutive_lost = 0

    # ------------------------------------------------------------------
    # frame loop

    def process_frame(self, frame: FrameObservations) -> FrameResult:
        fid, stamp = frame.frame_id, frame.timestamp
        if self.processed and fid <= self.processed[-1]:
            raise ValueError(
                f"frame ids must increase, got {fid} after {self.processed[-1]}"
            )
        cam_pose = self._predict_camera()
        dt = stamp - self.timestamps[self.processed[-1]] if self.processed else 0.0
        self.camera_poses[fid] = cam_pose
        self.timestamps[fid] = stamp
        self.processed.append(fid)
        self.frame_obs[fid] = {}

        self._predict_clusters(fid, dt)
        matches, box_of_cluster = self._associate(frame, cam_pose)
        nodes = self._build_nodes(frame, matches, cam_pose)
        self._record_observations(fid, nodes)
        created = self._assign_and_create(frame, fid, cam_pose, nodes, box_of_cluster)
        self._push_window(fid, stamp, cam_pose, matches, created)
        lost, inliers = self._refine_static(fid)
        if lost:
            self.consecutive_lost += 1
        else:
            self.consecutive_lost = 0
        self._update_liveness(fid, matches, created)
        self._refine_clusters(fid)
        self._refresh_geometry(fid)
        return self._frame_result(frame, fid, stamp, lost, inliers, matches, created)

    # ------------------------------------------------------------------
    # prediction

    def _predict_camera(self) -> Pose:
        """Constant per-frame motion extrapolated from the last two poses."""
        if not self.processed:
            return Pose.identity()
        prev = self.camera_poses[self.processed[-1]]
        if len(self.processed) == 1:
            return prev
        prev2 = self.camera_poses[self.processed[-2]]
        return prev.compose(prev2.inverse().compose(prev))

    def _predict_clusters(self, fid: int, dt: float) -> None:
        """Extend every live trajectory by one constant-velocity step and move
        member landmarks with it, so association sees predicted geometry."""
        for q in sorted(self.clusters):
            model = self.clusters[q]
            if not model.live or not model.trajectory:
                continue
            state = model.trajectory[max(model.trajectory)]
            pose = (
                predict_constant_velocity(state.pose, state.velocity, dt)
                if dt > 0.0
                else state.pose
            )
            model.trajectory[fid] = ClusterState(pose, state.velocity.copy())
            if model.members:
                ids = sorted(model.members)
                body = np.stack([self.landmarks[i].body_point for i in ids])
                world = pose.apply(body)
                for i, lm_id in enumerate(ids):
                    self.landmarks[lm_id].position = world[i]
                model.refresh_geometry(world)

    # ------------------------------------------------------------------
    # association

    def _associate(
        self, frame: FrameObservations, cam_pose: Pose
    ) -> tuple[dict[int, int], dict[int, int]]:
        """Match features to the map and boxes to clusters.

        Dynamic members are matched first under the innovation gate, static
        landmarks by plain nearest-neighbor search on what remains, then an
        interior rematch recovers unmatched members of box-associated
        clusters.  Returns (feature -> landmark, cluster -> box index).
        """
        cfg = self.config
        cam_from_world = cam_pose.inverse()
        features = frame.features
        free = np.ones(len(features), dtype=bool)
        matches: dict[int, int] = {}

        gate_floor = cfg.pixel_sigma**2 * np.eye(3)
        dynamic_predictions: list[PredictedLandmark] = []
        votes_by_cluster: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        for q in self._live_dynamic_ids():
            model = self.clusters[q]
            zetas, dets = [], []
            for lm_id in sorted(model.members):
                lm = self.landmarks[lm_id]
                try:
                    zeta, gamma = predict_landmark(
                        lm.position,
                        np.zeros(3),
                        cam_from_world,
                        lm.best_cov,
                        self.cam,
                        cfg.depth_min,
                    )
                except BehindCamera:
                    continue
                gate_cov = gamma + gate_floor
                dynamic_predictions.append(
                    PredictedLandmark(lm_id, zeta, gate_cov, lm.descriptor)
                )
                zetas.append(zeta)
                dets.append(np.linalg.det(gate_cov))
            votes_by_cluster[q] = (
                np.asarray(zetas, dtype=float).reshape(-1, 3),
                np.asarray(dets, dtype=float),
            )
        for k, lm_id in associate_features(
            dynamic_predictions,
            features,
            gate=cfg.gate_threshold,
            window=cfg.neighborhood_px,
            similarity_floor=cfg.similarity_floor,
        ).items():
            matches[k] = lm_id
            free[k] = False

        static_ids = sorted(
            lm_id for lm_id, lm in self.landmarks.items() if lm.cluster_id == 0
        )
        static_predictions: list[PredictedLandmark] = []
        if static_ids:
            points = np.stack([self.landmarks[i].position for i in static_ids])
            pixels, ok = project_points(cam_from_world, points, self.cam, cfg.depth_min)
            static_predictions = [
                PredictedLandmark(
                    lm_id, pixels[i], gate_floor, self.landmarks[lm_id].descriptor
                )
                for i, lm_id in enumerate(static_ids)
                if ok[i]
            ]
        remaining = [k for k in range(len(features)) if free[k]]
        for rel, lm_id in associate_features(
            static_predictions,
            [features[k] for k in remaining],
            gate=None,
            window=cfg.neighborhood_px,
            similarity_floor=cfg.similarity_floor,
        ).items():
            matches[remaining[rel]] = lm_id
            free[remaining[rel]] = False

        box_assoc = associate_boxes(votes_by_cluster, frame.boxes, cfg.entropy_gate)
        for q in sorted(box_assoc.box_of_cluster):
            box = frame.boxes[box_assoc.box_of_cluster[q]]
            claimed = set(matches.values())
            lost_members = {
                lm_id: self.landmarks[lm_id].descriptor
                for lm_id in sorted(self.clusters[q].members)
                if lm_id not in claimed
            }
            interior = [
                (k, features[k].descriptor)
                for k in range(len(features))
                if free[k]
                and box.contains(
                    features[k].measurement.u_left, features[k].measurement.v_left
                )
            ]
            for k, lm_id in box_interior_rematch(
                lost_members, interior, cfg.similarity_floor
            ).items():
                matches[k] = lm_id
                free[k] = False
        return matches, dict(box_assoc.box_of_cluster)

    def _build_nodes(
        self, frame: FrameObservations, matches: dict[int, int], cam_pose: Pose
    ) -> _NodeField:
        """Assemble the assignment nodes: every matched feature plus every
        unmatched feature whose stereo triple back-projects cleanly."""
        nodes = _NodeField()
        pixels: list[np.ndarray] = []
        positions: list[np.ndarray] = []
        for k, feature in enumerate(frame.features):
            z = feature.measurement.as_array()
            lm_id = matches.get(k)
            if lm_id is not None:
                position = self.landmarks[lm_id].position
            else:
                try:
                    position = cam_pose.apply(back_project(z, self.cam))
                except DegenerateDisparity:
                    continue
            nodes.features.append(k)
            nodes.landmark_ids.append(lm_id)
            pixels.append(z)
            positions.append(position)
        if not nodes.features:
            return nodes
        nodes.pixels = np.stack(pixels)
        nodes.positions = np.stack(positions)
        jac = np.stack([back_projection_jacobian(z, self.cam) for z in nodes.pixels])
        cam_cov = self.config.pixel_sigma**2 * np.einsum("nij,nkj->nik", jac, jac)
        rot = cam_pose.rotation
        nodes.covariances = np.einsum("ij,njk,lk->nil", rot, cam_cov, rot)
        return nodes

    def _record_observations(self, fid: int, nodes: _NodeField) -> None:
        obs = self.frame_obs[fid]
        for i, lm_id in enumerate(nodes.landmark_ids):
            if lm_id is None:
                continue
            lm = self.landmarks[lm_id]
            lm.best_cov, lm.best_cov_det = update_best_covariance(
                lm.best_cov, lm.best_cov_det, nodes.covariances[i]
            )
            lm.last_observed = fid
            obs[lm_id] = nodes.pixels[i]

    # ------------------------------------------------------------------
    # cluster assignment

    def _live_dynamic_ids(self) -> list[int]:
        return sorted(
            q for q, model in self.clusters.items() if q > 0 and model.live
        )

    def _assign_and_create(
        self,
        frame: FrameObservations,
        fid: int,
        cam_pose: Pose,
        nodes: _NodeField,
        box_of_cluster: dict[int, int],
    ) -> dict[int, int]:
        """Infer per-node cluster assignments, re-anchor them to persistent
        ids, update hysteresis weights, spawn clusters, and triangulate new
        landmarks.  Returns feature -> new landmark id."""
        cfg = self.config
        if not len(nodes):
            return {}
        dynamic_ids = self._live_dynamic_ids()
        labels = [Label("cluster", cluster_id=0)]
        labels += [Label("cluster", cluster_id=q) for q in dynamic_ids]
        new_box_indices = [
            m for m in range(len(frame.boxes)) if m not in box_of_cluster.values()
        ]
        labels += [Label("new_box", box_index=m) for m in new_box_indices]
        labels.append(Label("outlier"))

        energies = self._label_energies(frame, fid, nodes, labels, box_of_cluster)
        kernel = pairwise_kernel(nodes.positions, cfg.pairwise_bandwidth)
        result = mean_field_infer(energies, kernel, cfg.crf_alpha, cfg.crf_iterations)

        matched = match_labels(
            result.labels,
            labels,
            nodes.landmark_ids,
            {q: self.clusters[q].members for q in dynamic_ids},
            cfg.min_new_cluster_size,
        )
        column_cluster = self._resolve_columns(frame, fid, nodes, labels, matched)

        node_cluster = [column_cluster[int(j)] for j in result.labels]
        resolved = {
            lm_id: node_cluster[i]
            for i, lm_id in enumerate(nodes.landmark_ids)
            if lm_id is not None
        }
        previous = {lm_id: self.landmarks[lm_id].cluster_id for lm_id in resolved}
        for lm_id in update_assignment_weights(self.landmarks, resolved, cfg.weight_max):
            self._forget_landmark(lm_id)
        for lm_id, old in previous.items():
            if lm_id not in self.landmarks:
                continue
            lm = self.landmarks[lm_id]
            if lm.cluster_id == old:
                continue
            if old > 0 and old in self.clusters:
                self.clusters[old].members.discard(lm_id)
            if lm.cluster_id > 0:
                model = self.clusters[lm.cluster_id]
                model.members.add(lm_id)
                pose = model.trajectory[fid].pose
                lm.body_point = pose.inverse().apply(lm.position)
            else:
                lm.body_point = None

        return self._create_landmarks(frame, fid, nodes, node_cluster)

    def _label_energies(
        self,
        frame: FrameObservations,
        fid: int,
        nodes: _NodeField,
        labels: list[Label],
        box_of_cluster: dict[int, int],
    ) -> np.ndarray:
        cfg = self.config
        label_boxes: list = []
        for lab in labels:
            if lab.kind == "new_box":
                label_boxes.append(frame.boxes[lab.box_index])
            elif lab.kind == "cluster" and lab.cluster_id in box_of_cluster:
                label_boxes.append(frame.boxes[box_of_cluster[lab.cluster_id]])
            else:
                label_boxes.append(None)
        terms = [unary_2d(nodes.pixels[:, :2], label_boxes, cfg.eta_box)]
        if cfg.ablation in ("2d3d", "full"):
            terms.append(self._spatial_table(frame, nodes, labels))
        if cfg.ablation == "full" and len(self.processed) - 1 >= cfg.motion_warmup_frames:
            terms.append(self._motion_table(fid, nodes, labels))
        return combine_unaries(terms)

    def _spatial_table(
        self, frame: FrameObservations, nodes: _NodeField, labels: list[Label]
    ) -> np.ndarray:
        cfg = self.config
        centers, dimensions = [], []
        for lab in labels[:-1]:
            if lab.kind == "cluster" and lab.cluster_id == 0:
                centers.append(np.zeros(3))
                dimensions.append(_NEUTRAL_DIMENSION)
            elif lab.kind == "cluster":
                model = self.clusters[lab.cluster_id]
                centers.append(model.center)
                dimensions.append(model.dimension)
            else:
                center, dimension = self._provisional_cloud(
                    frame.boxes[lab.box_index], nodes
                )
                centers.append(center)
                dimensions.append(dimension)
        covariances = nodes.covariances + cfg.spatial_sigma_floor**2 * np.eye(3)
        return unary_3d(
            nodes.positions,
            covariances,
            np.stack(centers),
            np.asarray(dimensions),
            outlier_col=len(labels) - 1,
            outlier_exponent=cfg.outlier_exponent,
        )

    def _provisional_cloud(self, box, nodes: _NodeField) -> tuple[np.ndarray, float]:
        """Center and spread for a not-yet-tracked box from the nodes inside
        it, preferring candidate landmarks over already-claimed ones."""
        inside = np.array(
            [box.contains(u, v) for u, v in nodes.pixels[:, :2]], dtype=bool
        )
        fresh = inside & np.array([lm is None for lm in nodes.landmark_ids])
        pick = fresh if fresh.any() else inside
        if not pick.any():
            return np.zeros(3), _NEUTRAL_DIMENSION
        return cloud_geometry(nodes.positions[pick])

    def _motion_table(
        self, fid: int, nodes: _NodeField, labels: list[Label]
    ) -> np.ndarray:
        """Squared reprojection error of each node transported by each label's
        motion to the comparison frames, turned into a probability table."""
        cfg = self.config
        n, m = len(nodes), len(labels)
        residuals = np.zeros((n, m))
        neutral = np.array([lab.kind != "cluster" for lab in labels], dtype=bool)
        idx_cur = len(self.processed) - 1
        inv_var = 1.0 / cfg.pixel_sigma**2
        for offset in cfg.motion_offsets:
            idx = idx_cur + offset
            if idx < 0:
                continue
            fo = self.processed[idx]
            obs = self.frame_obs.get(fo)
            cam_pose_o = self.camera_poses.get(fo)
            if obs is None or cam_pose_o is None:
                continue
            rows = [
                i
                for i, lm_id in enumerate(nodes.landmark_ids)
                if lm_id is not None and lm_id in obs
            ]
            if not rows:
                continue
            observed = np.stack([obs[nodes.landmark_ids[i]] for i in rows])
            points = nodes.positions[rows]
            cam_from_world_o = cam_pose_o.inverse()
            for j, lab in enumerate(labels):
                if neutral[j]:
                    continue
                if lab.cluster_id == 0:
                    transported = points
                else:
                    trajectory = self.clusters[lab.cluster_id].trajectory
                    here, there = trajectory.get(fid), trajectory.get(fo)
                    if here is None or there is None:
                        neutral[j] = True
                        continue
                    carrier = there.pose.compose(here.pose.inverse())
                    transported = carrier.apply(points)
                pixels, ok = project_points(
                    cam_from_world_o, transported, self.cam, cfg.depth_min
                )
                errors = np.full(len(rows), _INVALID_TRANSPORT_PENALTY)
                if ok.any():
                    diff = pixels[ok] - observed[ok]
                    errors[ok] = 0.5 * inv_var * (diff * diff).sum(axis=1)
                residuals[rows, j] += errors
        return motion_unary(residuals, neutral)

    def _resolve_columns(
        self,
        frame: FrameObservations,
        fid: int,
        nodes: _NodeField,
        labels: list[Label],
        matched,
    ) -> list[int]:
        """Map every label column to a persistent cluster id.

        Static stays static; a cluster column follows its re-anchored id; a
        new-box column either binds to the cluster it re-anchored to, spawns
        a cluster when its group carries enough already-mapped landmarks, or
        falls to the outlier id.
        """
        cfg = self.config
        spawnable = set(matched.new_cluster_labels)
        columns: list[int] = []
        for j, lab in enumerate(labels):
            if lab.kind == "cluster":
                own = lab.cluster_id
                columns.append(
                    own if own == 0 else matched.label_to_cluster.get(j, own)
                )
            elif lab.kind != "new_box":
                columns.append(OUTLIER)
            elif j in matched.label_to_cluster:
                columns.append(matched.label_to_cluster[j])
            elif j in spawnable:
                columns.append(self._spawn_cluster(frame, fid, nodes, labels[j], matched.groups[j]))
            else:
                columns.append(OUTLIER)
        return columns

    def _spawn_cluster(
        self, frame, fid: int, nodes: _NodeField, label: Label, group: list[int]
    ) -> int:
        """Create a cluster from a new-box group, or return the outlier id if
        the group is not anchored by enough already-mapped landmarks."""
        anchored = {nodes.landmark_ids[i] for i in group} - {None}
        if len(anchored) < self.config.min_new_cluster_size:
            return OUTLIER
        positions = nodes.positions[np.asarray(group, dtype=int)]
        try:
            pose = init_cluster_pose(positions)
        except DegenerateCloud:
            pose = Pose(np.eye(3), positions.mean(axis=0))
        center, dimension = cloud_geometry(positions)
        cluster_id = self.next_cluster_id
        self.next_cluster_id += 1
        self.clusters[cluster_id] = ClusterModel(
            cluster_id=cluster_id,
            class_label=frame.boxes[label.box_index].class_label,
            center=center,
            dimension=dimension,
            last_seen=fid,
            trajectory={fid: ClusterState(pose, np.zeros(3))},
        )
        return cluster_id

    def _create_landmarks(
        self,
        frame: FrameObservations,
        fid: int,
        nodes: _NodeField,
        node_cluster: list[int],
    ) -> dict[int, int]:
        """Turn unmatched nodes into landmarks under their resolved cluster.
        Unexplained nodes enter the static map rather than being dropped, so
        the map can grow in unboxed regions."""
        created: dict[int, int] = {}
        obs = self.frame_obs[fid]
        for i, lm_id in enumerate(nodes.landmark_ids):
            if lm_id is not None:
                continue
            cluster_id = max(node_cluster[i], 0)
            body_point = None
            if cluster_id > 0:
                pose = self.clusters[cluster_id].trajectory[fid].pose
                body_point = pose.inverse().apply(nodes.positions[i])
            new_id = self.next_landmark_id
            self.next_landmark_id += 1
            self.landmarks[new_id] = Landmark(
                landmark_id=new_id,
                position=nodes.positions[i].copy(),
                descriptor=frame.features[nodes.features[i]].descriptor,
                cluster_id=cluster_id,
                weight=1,
                best_cov=nodes.covariances[i].copy(),
                best_cov_det=float(np.linalg.det(nodes.covariances[i])),
                last_observed=fid,
                body_point=body_point,
                first_observed=fid,
            )
            if cluster_id > 0:
                self.clusters[cluster_id].members.add(new_id)
            obs[new_id] = nodes.pixels[i]
            created[nodes.features[i]] = new_id
        return created

    def _forget_landmark(self, lm_id: int) -> None:
        lm = self.landmarks.pop(lm_id, None)
        if lm is not None and lm.cluster_id > 0 and lm.cluster_id in self.clusters:
            self.clusters[lm.cluster_id].members.discard(lm_id)

    # ------------------------------------------------------------------
    # window maintenance

    def _push_window(
        self,
        fid: int,
        stamp: float,
        cam_pose: Pose,
        matches: dict[int, int],
        created: dict[int, int],
    ) -> None:
        frame_landmarks = set(matches.values()) | set(created.values())
        static = frozenset(
            lm_id
            for lm_id in frame_landmarks
            if lm_id in self.landmarks and self.landmarks[lm_id].cluster_id == 0
        )
        entry = FrameEntry(fid, stamp, cam_pose.translation.copy(), static)
        result = self.window.push_frame(entry)
        if result.evicted is not None and not result.promoted:
            self._drop_frame(result.evicted.frame_id)
        if result.marginalized is not None:
            self._marginalize(result.marginalized.frame_id, fid)

    def _drop_frame(self, fid: int) -> None:
        """A frame left the window without marginalization: purge it from the
        prior and stop holding its observations."""
        if self.window.prior is not None:
            self.window.prior = self.window.prior.marginalize_frames(
                [fid], self.config.prior_regularization
            )
        self.frame_obs.pop(fid, None)

    def _marginalize(self, marg_fid: int, newest_fid: int) -> None:
        """Fold the marginalized frame and its dying landmarks into the prior.

        Dying landmarks are static ones seen in the marginalized frame but
        not in the newest; their observations across the whole window become
        prior information and they leave the map.  The very first
        marginalization anchors the gauge by placing large information on
        the marginalized pose itself.
        """
        cfg = self.config
        marg_obs = self.frame_obs.get(marg_fid, {})
        newest_obs = self.frame_obs.get(newest_fid, {})
        dying = sorted(
            lm_id
            for lm_id in marg_obs
            if lm_id in self.landmarks
            and self.landmarks[lm_id].cluster_id == 0
            and lm_id not in newest_obs
        )
        dying_set = set(dying)
        window_ids = [f.frame_id for f in self.window.frames()]
        obs_by_frame = {
            f: [
                (lm_id, z)
                for lm_id, z in self.frame_obs.get(f, {}).items()
                if lm_id in dying_set
            ]
            for f in [marg_fid] + window_ids
        }
        prior = self.window.prior
        # frames with neither a factor on a dying landmark nor a prior block
        # contribute exactly-zero rows to the joint system, so leaving them
        # out is lossless and keeps junk blocks out of the prior
        keep = {f for f, hits in obs_by_frame.items() if hits}
        if prior is not None:
            keep.update(prior.frame_ids)
        frame_ids = [marg_fid] + [f for f in window_ids if f in keep]
        f_idx, lm_ids, pixels = [], [], []
        for i, f in enumerate(frame_ids):
            for lm_id, z in obs_by_frame.get(f, ()):
                f_idx.append(i)
                lm_ids.append(lm_id)
                pixels.append(z)
        if prior is None:
            prior = InformationPrior(
                [marg_fid],
                [self.camera_poses[marg_fid]],
                _BOOTSTRAP_GAUGE_INFO * np.eye(6),
                np.zeros(6),
            )
        self.window.prior = marginalize_frame(
            prior,
            frame_ids,
            [self.camera_poses[f] for f in frame_ids],
            marg_fid,
            {lm_id: self.landmarks[lm_id].position for lm_id in dying},
            (
                np.asarray(f_idx, dtype=int),
                np.asarray(lm_ids, dtype=int),
                np.asarray(pixels, dtype=float).reshape(-1, 3),
            ),
            self.cam,
            pixel_sigma=cfg.pixel_sigma,
            huber_delta=cfg.huber_delta,
            depth_min=cfg.depth_min,
            regularization=cfg.prior_regularization,
        )
        for lm_id in dying:
            del self.landmarks[lm_id]
        self.frame_obs.pop(marg_fid, None)

    # ------------------------------------------------------------------
    # refinement

    def _static_problem(self):
        frame_ids = [f.frame_id for f in self.window.frames()]
        index_of = {f: i for i, f in enumerate(frame_ids)}
        f_idx, lm_ids, pixels = [], [], []
        for f in frame_ids:
            for lm_id, z in self.frame_obs.get(f, {}).items():
                lm = self.landmarks.get(lm_id)
                if lm is not None and lm.cluster_id == 0:
                    f_idx.append(index_of[f])
                    lm_ids.append(lm_id)
                    pixels.append(z)
        observations = (
            np.asarray(f_idx, dtype=int),
            np.asarray(lm_ids, dtype=int),
            np.asarray(pixels, dtype=float).reshape(-1, 3),
        )
        positions = {
            lm_id: self.landmarks[lm_id].position for lm_id in set(lm_ids)
        }
        return frame_ids, observations, positions

    def _refine_static(self, fid: int) -> tuple[bool, int]:
        """Window refinement of camera poses and static landmarks.

        Returns (tracking lost, newest-frame inlier count).  On loss the
        whole result is discarded so the predicted pose stands.
        """
        cfg = self.config
        frame_ids, observations, positions = self._static_problem()
        poses = [self.camera_poses[f] for f in frame_ids]
        fix = [frame_ids[0]] if self.window.prior is None else []
        solved = None
        for fix_frames in ([fix, [frame_ids[0]]] if not fix else [fix]):
            try:
                solved = optimize_static(
                    poses,
                    frame_ids,
                    positions,
                    observations,
                    self.cam,
                    pixel_sigma=cfg.pixel_sigma,
                    huber_delta=cfg.huber_delta,
                    prior=self.window.prior,
                    fix_frames=fix_frames,
                    max_iterations=cfg.max_iterations,
                    relative_tolerance=cfg.relative_tolerance,
                    damping_init=cfg.damping_init,
                    depth_min=cfg.depth_min,
                    regularization=cfg.prior_regularization,
                )
                break
            except RankDeficient:
                continue
        if solved is None:
            return len(self.processed) > 1, 0

        newest = observations[0] == frame_ids.index(fid)
        norms = solved.residual_norms[newest]
        inliers = int(np.sum(np.isfinite(norms) & (norms < cfg.huber_delta)))
        lost = len(self.processed) > 1 and inliers < cfg.min_static_matches
        if lost:
            return True, inliers

        for i, f in enumerate(frame_ids):
            self.camera_poses[f] = solved.poses[i]
        for lm_id, position in solved.landmarks.items():
            if lm_id in self.landmarks:
                self.landmarks[lm_id].position = position
        refined = {f: p.translation.copy() for f, p in zip(frame_ids, solved.poses)}
        self.window.spatial = [
            replace(e, position=refined[e.frame_id]) for e in self.window.spatial
        ]
        self.window.temporal = [
            replace(e, position=refined[e.frame_id]) for e in self.window.temporal
        ]
        return False, inliers

    def _cluster_problem(self, q: int, temporal_ids: list[int]):
        """Build one cluster's refinement problem, or None when its support
        in the window is too thin."""
        cfg = self.config
        model = self.clusters[q]
        track = [f for f in temporal_ids if f in model.trajectory]
        if len(track) < 2 or not model.members:
            return None
        members = sorted(model.members)
        body = {lm_id: self.landmarks[lm_id].body_point for lm_id in members}
        f_idx, lm_ids, pixels = [], [], []
        for i, f in enumerate(track):
            obs = self.frame_obs.get(f, {})
            for lm_id in members:
                z = obs.get(lm_id)
                if z is not None:
                    f_idx.append(i)
                    lm_ids.append(lm_id)
                    pixels.append(z)
        if not f_idx:
            return None
        f_arr = np.asarray(f_idx, dtype=int)
        lm_arr = np.asarray(lm_ids, dtype=int)
        z_arr = np.stack(pixels)

        poses = [model.trajectory[f].pose for f in track]
        rotations = np.stack([p.rotation for p in poses])
        translations = np.stack([p.translation for p in poses])
        cam_poses = [self.camera_poses[f] for f in track]
        cam_rotations = np.stack([p.rotation for p in cam_poses])
        cam_translations = np.stack([p.translation for p in cam_poses])
        points = np.stack([body[lm_id] for lm_id in lm_ids])
        world = (
            np.einsum("nij,nj->ni", rotations[f_arr], points)
            + translations[f_arr]
        )
        local = np.einsum(
            "nij,nj->ni", cam_rotations[f_arr].transpose(0, 2, 1),
            world - cam_translations[f_arr],
        )
        keep = local[:, 2] > cfg.depth_min
        f_arr, lm_arr, z_arr = f_arr[keep], lm_arr[keep], z_arr[keep]
        if (
            len(np.unique(f_arr)) < cfg.min_cluster_frames
            or len(np.unique(lm_arr)) < cfg.min_cluster_landmarks
        ):
            return None
        velocities = np.stack([model.trajectory[f].velocity for f in track])
        stamps = [self.timestamps[f] for f in track]
        return (q, track, poses, velocities, stamps, cam_poses, body,
                (f_arr, lm_arr, z_arr))

    def _solve_cluster(self, problem):
        cfg = self.config
        _, _, poses, velocities, stamps, cam_poses, body, observations = problem
        try:
            return optimize_cluster(
                poses,
                velocities,
                stamps,
                cam_poses,
                body,
                observations,
                self.cam,
                wnoa_q=cfg.wnoa_q,
                pixel_sigma=cfg.pixel_sigma,
                huber_delta=cfg.huber_delta,
                rotation_rate_penalty=cfg.rotation_rate_penalty,
                max_iterations=cfg.max_iterations,
                relative_tolerance=cfg.relative_tolerance,
                damping_init=cfg.damping_init,
                depth_min=cfg.depth_min,
            )
        except RankDeficient:
            return None

    def _refine_clusters(self, fid: int) -> None:
        """Refine every live cluster with enough window support.  Solves are
        independent and may run on worker threads; results are applied in
        cluster id order either way."""
        temporal_ids = [f.frame_id for f in self.window.temporal]
        problems = []
        for q in self._live_dynamic_ids():
            problem = self._cluster_problem(q, temporal_ids)
            if problem is not None:
                problems.append(problem)
        if not problems:
            return
        workers = min(_resolve_threads(self.config.threads), len(problems))
        if workers > 1 and len(problems) > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                solutions = list(pool.map(self._solve_cluster, problems))
        else:
            solutions = [self._solve_cluster(p) for p in problems]
        for problem, solved in zip(problems, solutions):
            if solved is None:
                continue
            q, track = problem[0], problem[1]
            model = self.clusters[q]
            for i, f in enumerate(track):
                model.trajectory[f] = ClusterState(
                    solved.poses[i], solved.velocities[i].copy()
                )
            for lm_id, body_point in solved.body_points.items():
                if lm_id in self.landmarks:
                    self.landmarks[lm_id].body_point = body_point

    # ------------------------------------------------------------------
    # model upkeep

    def _update_liveness(
        self, fid: int, matches: dict[int, int], created: dict[int, int]
    ) -> None:
        for lm_id in set(matches.values()) | set(created.values()):
            lm = self.landmarks.get(lm_id)
            if lm is not None and lm.cluster_id > 0:
                self.clusters[lm.cluster_id].last_seen = fid
        alive = live_clusters(
            fid,
            {q: m.last_seen for q, m in self.clusters.items() if m.live},
            self.config.live_window,
        )
        for q in sorted(self.clusters):
            model = self.clusters[q]
            # a drained member set also kills the cluster: with no landmarks
            # left its pose would be pure extrapolation
            if model.live and (q not in alive or not model.members):
                for lm_id in sorted(model.members):
                    self.landmarks.pop(lm_id, None)
                model.members.clear()
                model.trajectory.clear()
                model.live = False

    def _refresh_geometry(self, fid: int) -> None:
        """Re-derive member world positions, cluster centers and spreads from
        the refined states, and drop trajectory history behind the window."""
        oldest = self.window.temporal[0].frame_id if self.window.temporal else fid
        for q in self._live_dynamic_ids():
            model = self.clusters[q]
            state = model.trajectory.get(fid)
            if state is not None and model.members:
                ids = sorted(model.members)
                body = np.stack([self.landmarks[i].body_point for i in ids])
                world = state.pose.apply(body)
                for i, lm_id in enumerate(ids):
                    self.landmarks[lm_id].position = world[i]
                model.refresh_geometry(world)
            for f in [f for f in model.trajectory if f < oldest]:
                del model.trajectory[f]

    def _frame_result(
        self, frame, fid, stamp, lost, inliers, matches, created
    ) -> FrameResult:
        out_clusters: dict[int, ClusterState] = {}
        out_members: dict[int, tuple[int, ...]] = {}
        for q in self._live_dynamic_ids():
            model = self.clusters[q]
            state = model.trajectory.get(fid)
            if state is None:
                continue
            out_clusters[q] = ClusterState(state.pose, state.velocity.copy())
            out_members[q] = tuple(sorted(model.members))
        feature_labels = []
        for k in range(len(frame.features)):
            lm_id = matches.get(k, created.get(k))
            if lm_id is not None and lm_id in self.landmarks:
                feature_labels.append((k, lm_id, self.landmarks[lm_id].cluster_id))
        return FrameResult(
            frame_id=fid,
            timestamp=stamp,
            camera=self.camera_poses[fid],
            tracking_lost=lost,
            static_inliers=inliers,
            clusters=out_clusters,
            cluster_members=out_members,
            feature_labels=tuple(feature_labels),
        )


def run_stream(stream, config: EngineConfig) -> list[FrameResult]:
    """Drive a fresh engine over every frame of an observation stream."""
    engine = Engine(config, stream.intrinsics)
    return [engine.process_frame(f) for f in stream.frames]
