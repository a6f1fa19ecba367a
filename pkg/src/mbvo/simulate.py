"""Synthetic stereo scene generator.

Builds worlds of static structure plus rigid moving clusters, renders stereo
feature tracks and 2D semantic boxes with configurable noise, and serializes
observation streams and ground truth as newline-delimited self-describing
text records. Floats are written with 17 significant digits so a round trip
through disk is exact; identical world specs produce bitwise-identical files.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation, Slerp

from mbvo.geometry import (
    Pose,
    StereoIntrinsics,
    StereoMeasurement,
    project_points,
)

DESCRIPTOR_BYTES = 32  # 256-bit binary descriptors

_IDENTITY_QUAT = (0.0, 0.0, 0.0, 1.0)


class EmptyWorld(ValueError):
    """A world spec with no landmarks cannot be simulated."""


@dataclass(frozen=True)
class Waypoint:
    """Trajectory node: linear translation and slerp rotation between nodes."""

    time: float
    position: tuple[float, float, float]
    rotation: tuple[float, float, float, float] = _IDENTITY_QUAT  # qx qy qz qw


@dataclass(frozen=True)
class ClusterSpec:
    """One rigid moving body: a landmark cloud on a waypoint trajectory."""

    name: str
    class_label: str
    landmark_count: int
    extent: tuple[float, float, float]  # half sizes of the body-frame box
    waypoints: tuple[Waypoint, ...]


@dataclass(frozen=True)
class NoiseSpec:
    pixel_sigma: float = 0.0
    feature_dropout_rate: float = 0.0
    descriptor_corruption_rate: float = 0.0
    box_jitter_sigma: float = 0.0
    box_miss_rate: float = 0.0


@dataclass(frozen=True)
class Occluder:
    """Image-space rectangle hiding deeper content over a frame range."""

    first_frame: int
    last_frame: int
    min_corner: tuple[float, float]
    max_corner: tuple[float, float]
    depth: float


@dataclass(frozen=True)
class WorldSpec:
    frame_count: int
    frame_dt: float
    seed: int
    intrinsics: StereoIntrinsics
    camera_waypoints: tuple[Waypoint, ...]
    clusters: tuple[ClusterSpec, ...]
    static_count: int
    static_inner: tuple[float, float, float]  # half extents of the carved hole
    static_outer: tuple[float, float, float]  # half extents of the sampling box
    image_size: tuple[int, int] = (640, 480)
    static_center: tuple[float, float, float] | None = None
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    occluders: tuple[Occluder, ...] = ()
    depth_min: float = 0.2


@dataclass(frozen=True)
class SemanticBox:
    """Axis-aligned 2D detection on the left image."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float
    class_label: str
    confidence: float

    def contains(self, u: float, v: float) -> bool:
        return self.x_min <= u <= self.x_max and self.y_min <= v <= self.y_max


@dataclass(frozen=True, eq=False)
class StereoFeature:
    measurement: StereoMeasurement
    descriptor: np.ndarray  # (32,) uint8


@dataclass
class FrameObservations:
    frame_id: int
    timestamp: float
    features: list[StereoFeature]
    boxes: list[SemanticBox]


@dataclass
class ObservationStream:
    intrinsics: StereoIntrinsics
    frame_dt: float
    frames: list[FrameObservations]


@dataclass
class GroundTruth:
    """Simulation truth. Provenance tags live here and only here."""

    timestamps: list[float]
    camera: list[Pose]
    cluster_poses: dict[int, list[Pose]]
    cluster_velocities: dict[int, list[tuple[float, float, float]]]
    cluster_names: dict[int, str]
    landmark_body: dict[int, int]  # true landmark id -> body id, 0 is static
    landmark_points: dict[int, tuple[float, float, float]]  # body frame
    provenance: list[list[int]]  # per frame, true landmark id per feature


# ---------------------------------------------------------------------------
# trajectories


def _waypoint_times(waypoints) -> np.ndarray:
    return np.array([w.time for w in waypoints])


def interpolate_pose(waypoints, t: float) -> Pose:
    """Pose at time ``t``: linear translation, slerp rotation, clamped ends."""
    if len(waypoints) == 1:
        w = waypoints[0]
        return Pose.from_quaternion(np.asarray(w.position, dtype=float), w.rotation)
    times = _waypoint_times(waypoints)
    t = float(np.clip(t, times[0], times[-1]))
    i = int(np.clip(np.searchsorted(times, t, side="right") - 1, 0, len(times) - 2))
    a, b = waypoints[i], waypoints[i + 1]
    s = (t - a.time) / (b.time - a.time)
    translation = (1.0 - s) * np.asarray(a.position) + s * np.asarray(b.position)
    keyframes = Rotation.from_quat([a.rotation, b.rotation])
    rot = Slerp([0.0, 1.0], keyframes)(s).as_matrix()
    return Pose(rot, translation)


def trajectory_velocity(waypoints, t: float) -> np.ndarray:
    """Exact translational velocity: slope of the active linear segment."""
    if len(waypoints) == 1:
        return np.zeros(3)
    times = _waypoint_times(waypoints)
    i = int(np.clip(np.searchsorted(times, t, side="right") - 1, 0, len(times) - 2))
    a, b = waypoints[i], waypoints[i + 1]
    return (np.asarray(b.position) - np.asarray(a.position)) / (b.time - a.time)


# ---------------------------------------------------------------------------
# world generation


def _sample_shell(rng, count, center, inner, outer):
    """Uniform points in the outer box with the inner box carved out."""
    center = np.asarray(center, dtype=float)
    inner = np.asarray(inner, dtype=float)
    outer = np.asarray(outer, dtype=float)
    points = []
    needed = count
    while needed > 0:
        batch = rng.uniform(-outer, outer, size=(max(needed * 2, 16), 3))
        keep = ~np.all(np.abs(batch) < inner, axis=1)
        points.append(batch[keep][:needed])
        needed = count - sum(len(p) for p in points)
    return np.vstack(points) + center


def _visible_mask(pixels, ok, width, height):
    with np.errstate(invalid="ignore"):
        in_bounds = (
            (pixels[:, 0] >= 0.0)
            & (pixels[:, 0] < width)
            & (pixels[:, 1] >= 0.0)
            & (pixels[:, 1] < height)
            & (pixels[:, 2] >= 0.0)
            & (pixels[:, 0] - pixels[:, 2] > 1e-3)
        )
    return ok & in_bounds


def simulate(spec: WorldSpec) -> tuple[ObservationStream, GroundTruth]:
    """Render the world into an observation stream plus ground truth.

    All randomness flows from one generator seeded by ``spec.seed``; the draw
    order is fixed, so identical specs replay bitwise-identically.
    """
    total = spec.static_count + sum(c.landmark_count for c in spec.clusters)
    if total == 0:
        raise EmptyWorld("world spec contains no landmarks")
    rng = np.random.default_rng(spec.seed)
    cam = spec.intrinsics
    width, height = spec.image_size
    noise = spec.noise

    center = spec.static_center
    if center is None:
        center = tuple(
            np.mean([w.position for w in spec.camera_waypoints], axis=0)
        )
    static_points = _sample_shell(
        rng, spec.static_count, center, spec.static_inner, spec.static_outer
    )

    body_points = {}
    body_of = np.zeros(total, dtype=int)
    next_id = spec.static_count
    for k, cluster in enumerate(spec.clusters, start=1):
        extent = np.asarray(cluster.extent, dtype=float)
        body_points[k] = rng.uniform(-extent, extent, size=(cluster.landmark_count, 3))
        body_of[next_id : next_id + cluster.landmark_count] = k
        next_id += cluster.landmark_count
    descriptors = rng.integers(
        0, 256, size=(total, DESCRIPTOR_BYTES), dtype=np.uint8
    )

    truth = GroundTruth(
        timestamps=[],
        camera=[],
        cluster_poses={k: [] for k in body_points},
        cluster_velocities={k: [] for k in body_points},
        cluster_names={
            k: c.name for k, c in enumerate(spec.clusters, start=1)
        },
        landmark_body={i: int(body_of[i]) for i in range(total)},
        landmark_points={},
        provenance=[],
    )
    for i in range(spec.static_count):
        truth.landmark_points[i] = tuple(float(v) for v in static_points[i])
    offset = spec.static_count
    for k, cluster in enumerate(spec.clusters, start=1):
        for j in range(cluster.landmark_count):
            truth.landmark_points[offset + j] = tuple(
                float(v) for v in body_points[k][j]
            )
        offset += cluster.landmark_count

    frames = []
    member_rows = {
        k: np.flatnonzero(body_of == k) for k in body_points
    }
    for frame_id in range(spec.frame_count):
        t = frame_id * spec.frame_dt
        cam_pose = interpolate_pose(spec.camera_waypoints, t)
        cam_from_world = cam_pose.inverse()
        truth.timestamps.append(t)
        truth.camera.append(cam_pose)

        world = np.empty((total, 3))
        world[: spec.static_count] = static_points
        for k, cluster in enumerate(spec.clusters, start=1):
            pose = interpolate_pose(cluster.waypoints, t)
            truth.cluster_poses[k].append(pose)
            truth.cluster_velocities[k].append(
                tuple(float(v) for v in trajectory_velocity(cluster.waypoints, t))
            )
            world[member_rows[k]] = pose.apply(body_points[k])

        pixels, ok = project_points(cam_from_world, world, cam, spec.depth_min)
        visible = _visible_mask(pixels, ok, width, height)
        vis_idx = np.flatnonzero(visible)

        kept = vis_idx
        if noise.feature_dropout_rate > 0.0 and len(vis_idx):
            kept = vis_idx[rng.random(len(vis_idx)) >= noise.feature_dropout_rate]
        emitted_pix = pixels[kept].copy()
        if noise.pixel_sigma > 0.0 and len(kept):
            emitted_pix += rng.normal(0.0, noise.pixel_sigma, size=emitted_pix.shape)
            sane = emitted_pix[:, 0] - emitted_pix[:, 2] > 1e-3
            kept, emitted_pix = kept[sane], emitted_pix[sane]

        emitted_desc = descriptors[kept]
        if noise.descriptor_corruption_rate > 0.0 and len(kept) > 1:
            corrupt = rng.random(len(kept)) < noise.descriptor_corruption_rate
            emitted_desc = emitted_desc.copy()
            for pos in np.flatnonzero(corrupt):
                partner = (pos + int(rng.integers(1, len(kept)))) % len(kept)
                mutated = descriptors[kept[partner]].copy()
                flip_bits = rng.integers(0, 8 * DESCRIPTOR_BYTES, size=26)
                mutated[flip_bits // 8] ^= (1 << (flip_bits % 8)).astype(np.uint8)
                emitted_desc[pos] = mutated

        order = rng.permutation(len(kept))
        features = [
            StereoFeature(
                StereoMeasurement(*(float(v) for v in emitted_pix[j])),
                emitted_desc[j].copy(),
            )
            for j in order
        ]
        truth.provenance.append([int(kept[j]) for j in order])

        boxes = []
        for k, cluster in enumerate(spec.clusters, start=1):
            rows = member_rows[k][visible[member_rows[k]]]
            if len(rows) == 0:
                continue
            if noise.box_miss_rate > 0.0 and rng.random() < noise.box_miss_rate:
                continue
            u, v = pixels[rows, 0], pixels[rows, 1]
            corners = np.array([u.min(), v.min(), u.max(), v.max()])
            if noise.box_jitter_sigma > 0.0:
                corners += rng.normal(0.0, noise.box_jitter_sigma, size=4)
            x_lo, x_hi = sorted((corners[0], corners[2]))
            y_lo, y_hi = sorted((corners[1], corners[3]))
            if x_hi - x_lo < 1.0:
                x_lo, x_hi = x_lo - 0.5, x_hi + 0.5
            if y_hi - y_lo < 1.0:
                y_lo, y_hi = y_lo - 0.5, y_hi + 0.5
            boxes.append(
                SemanticBox(
                    float(x_lo), float(y_lo), float(x_hi), float(y_hi),
                    cluster.class_label, 1.0,
                )
            )
        frames.append(FrameObservations(frame_id, t, features, boxes))

    if spec.occluders:
        frames, truth.provenance = occlusion_filter(
            frames, spec.occluders, cam, provenance=truth.provenance
        )
    stream = ObservationStream(cam, spec.frame_dt, frames)
    return stream, truth


def occlusion_filter(frames, occluders, cam: StereoIntrinsics, provenance=None):
    """Drop features and boxes hidden by the given occluders.

    A feature is hidden when it lands inside an active occluder rectangle and
    its disparity depth lies beyond the occluder. A box is hidden when its
    rectangle is fully contained in the occluder and the median depth of the
    features it covered is beyond the occluder. Returns filtered frames, plus
    filtered provenance when given (kept aligned with the surviving features).
    """
    out_frames = []
    out_tags = [] if provenance is not None else None
    for idx, frame in enumerate(frames):
        active = [
            o for o in occluders if o.first_frame <= frame.frame_id <= o.last_frame
        ]
        if not active:
            out_frames.append(frame)
            if out_tags is not None:
                out_tags.append(list(provenance[idx]))
            continue

        def hidden(u, v, depth):
            for occ in active:
                if (
                    occ.min_corner[0] <= u <= occ.max_corner[0]
                    and occ.min_corner[1] <= v <= occ.max_corner[1]
                    and depth > occ.depth
                ):
                    return True
            return False

        depths = [
            cam.fx * cam.baseline / f.measurement.disparity for f in frame.features
        ]
        keep = [
            not hidden(f.measurement.u_left, f.measurement.v_left, d)
            for f, d in zip(frame.features, depths)
        ]
        boxes = []
        for box in frame.boxes:
            inside = [
                d
                for f, d in zip(frame.features, depths)
                if box.contains(f.measurement.u_left, f.measurement.v_left)
            ]
            box_depth = float(np.median(inside)) if inside else 0.0
            covered = any(
                occ.min_corner[0] <= box.x_min
                and occ.min_corner[1] <= box.y_min
                and box.x_max <= occ.max_corner[0]
                and box.y_max <= occ.max_corner[1]
                and box_depth > occ.depth
                for occ in active
            )
            if not covered:
                boxes.append(box)
        out_frames.append(
            replace(
                frame,
                features=[f for f, k in zip(frame.features, keep) if k],
                boxes=boxes,
            )
        )
        if out_tags is not None:
            out_tags.append(
                [tag for tag, k in zip(provenance[idx], keep) if k]
            )
    if out_tags is not None:
        return out_frames, out_tags
    return out_frames


# ---------------------------------------------------------------------------
# newline-delimited record serialization


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    if isinstance(value, str):
        return json.dumps(value)
    if value is None:
        return "null"
    if isinstance(value, dict):
        inner = ",".join(f"{json.dumps(str(k))}:{_fmt(v)}" for k, v in value.items())
        return "{" + inner + "}"
    if isinstance(value, (list, tuple, np.ndarray)):
        return "[" + ",".join(_fmt(v) for v in np.asarray(value).tolist()) + "]" \
            if isinstance(value, np.ndarray) \
            else "[" + ",".join(_fmt(v) for v in value) + "]"
    raise TypeError(f"cannot serialize {type(value)!r}")


def _record(payload: dict) -> str:
    return _fmt(payload) + "\n"


def _pose_fields(pose: Pose) -> list[float]:
    return [*pose.rotation.reshape(-1).tolist(), *pose.translation.tolist()]


def _pose_from_fields(values) -> Pose:
    values = np.asarray(values, dtype=float)
    return Pose(values[:9].reshape(3, 3), values[9:12])


def write_observations(path, stream: ObservationStream) -> None:
    cam = stream.intrinsics
    with Path(path).open("w") as fh:
        fh.write(
            _record(
                {
                    "type": "header",
                    "format": "mbvo-observations",
                    "version": 1,
                    "frame_count": len(stream.frames),
                    "frame_dt": stream.frame_dt,
                    "intrinsics": {
                        "fx": cam.fx,
                        "fy": cam.fy,
                        "cx": cam.cx,
                        "cy": cam.cy,
                        "baseline": cam.baseline,
                    },
                }
            )
        )
        for frame in stream.frames:
            fh.write(
                _record(
                    {
                        "type": "frame",
                        "frame": frame.frame_id,
                        "timestamp": frame.timestamp,
                        "features": [
                            [
                                f.measurement.u_left,
                                f.measurement.v_left,
                                f.measurement.u_right,
                                bytes(f.descriptor).hex(),
                            ]
                            for f in frame.features
                        ],
                        "boxes": [
                            [
                                b.x_min, b.y_min, b.x_max, b.y_max,
                                b.class_label, b.confidence,
                            ]
                            for b in frame.boxes
                        ],
                    }
                )
            )


def read_observations(path) -> ObservationStream:
    frames = []
    header = None
    with Path(path).open() as fh:
        for line in fh:
            record = json.loads(line)
            if record["type"] == "header":
                if record.get("format") != "mbvo-observations":
                    raise ValueError(f"{path}: not an observation stream")
                header = record
            elif record["type"] == "frame":
                features = [
                    StereoFeature(
                        StereoMeasurement(f[0], f[1], f[2]),
                        np.frombuffer(bytes.fromhex(f[3]), dtype=np.uint8).copy(),
                    )
                    for f in record["features"]
                ]
                boxes = [
                    SemanticBox(b[0], b[1], b[2], b[3], b[4], b[5])
                    for b in record["boxes"]
                ]
                frames.append(
                    FrameObservations(
                        record["frame"], record["timestamp"], features, boxes
                    )
                )
    if header is None:
        raise ValueError(f"{path}: missing header record")
    cam = StereoIntrinsics(**header["intrinsics"])
    return ObservationStream(cam, header["frame_dt"], frames)


def write_ground_truth(path, truth: GroundTruth) -> None:
    with Path(path).open("w") as fh:
        fh.write(
            _record(
                {
                    "type": "header",
                    "format": "mbvo-ground-truth",
                    "version": 1,
                    "frame_count": len(truth.camera),
                    "bodies": sorted(truth.cluster_poses),
                    "names": {
                        str(k): truth.cluster_names.get(k, f"body_{k}")
                        for k in sorted(truth.cluster_poses)
                    },
                }
            )
        )
        fh.write(
            _record(
                {
                    "type": "landmarks",
                    "items": [
                        [
                            lm_id,
                            truth.landmark_body[lm_id],
                            list(truth.landmark_points[lm_id]),
                        ]
                        for lm_id in sorted(truth.landmark_body)
                    ],
                }
            )
        )
        for i, cam_pose in enumerate(truth.camera):
            fh.write(
                _record(
                    {
                        "type": "frame",
                        "frame": i,
                        "timestamp": truth.timestamps[i],
                        "camera": _pose_fields(cam_pose),
                        "clusters": [
                            [
                                k,
                                _pose_fields(truth.cluster_poses[k][i]),
                                list(truth.cluster_velocities[k][i]),
                            ]
                            for k in sorted(truth.cluster_poses)
                        ],
                        "provenance": truth.provenance[i],
                    }
                )
            )


def read_ground_truth(path) -> GroundTruth:
    truth = GroundTruth([], [], {}, {}, {}, {}, {}, [])
    with Path(path).open() as fh:
        for line in fh:
            record = json.loads(line)
            kind = record["type"]
            if kind == "header":
                if record.get("format") != "mbvo-ground-truth":
                    raise ValueError(f"{path}: not a ground truth file")
                for k in record["bodies"]:
                    truth.cluster_poses[k] = []
                    truth.cluster_velocities[k] = []
                truth.cluster_names = {
                    int(k): v for k, v in record.get("names", {}).items()
                }
            elif kind == "landmarks":
                for lm_id, body, point in record["items"]:
                    truth.landmark_body[lm_id] = body
                    truth.landmark_points[lm_id] = tuple(point)
            elif kind == "frame":
                truth.timestamps.append(record["timestamp"])
                truth.camera.append(_pose_from_fields(record["camera"]))
                for k, pose_fields, velocity in record["clusters"]:
                    truth.cluster_poses[k].append(_pose_from_fields(pose_fields))
                    truth.cluster_velocities[k].append(tuple(velocity))
                truth.provenance.append(list(record["provenance"]))
    return truth


# ---------------------------------------------------------------------------
# world spec (de)serialization


def _waypoint_to_dict(w: Waypoint) -> dict:
    return {
        "time": w.time,
        "position": list(w.position),
        "rotation": list(w.rotation),
    }


def _waypoints_from(value, where: str):
    if not isinstance(value, (list, tuple)) or len(value) == 0:
        raise ValueError(f"{where}: need at least one waypoint")
    waypoints = []
    for i, item in enumerate(value):
        extra = set(item) - {"time", "position", "rotation"}
        if extra:
            raise ValueError(f"{where}[{i}]: unknown waypoint fields {sorted(extra)}")
        waypoints.append(
            Waypoint(
                float(item["time"]),
                tuple(float(v) for v in item["position"]),
                tuple(float(v) for v in item.get("rotation", _IDENTITY_QUAT)),
            )
        )
    times = [w.time for w in waypoints]
    if any(b <= a for a, b in zip(times, times[1:])):
        raise ValueError(f"{where}: waypoint times must be strictly increasing")
    return tuple(waypoints)


def world_spec_to_dict(spec: WorldSpec) -> dict:
    return {
        "frame_count": spec.frame_count,
        "frame_dt": spec.frame_dt,
        "seed": spec.seed,
        "intrinsics": {
            "fx": spec.intrinsics.fx,
            "fy": spec.intrinsics.fy,
            "cx": spec.intrinsics.cx,
            "cy": spec.intrinsics.cy,
            "baseline": spec.intrinsics.baseline,
        },
        "image_size": list(spec.image_size),
        "camera_waypoints": [_waypoint_to_dict(w) for w in spec.camera_waypoints],
        "clusters": [
            {
                "name": c.name,
                "class_label": c.class_label,
                "landmark_count": c.landmark_count,
                "extent": list(c.extent),
                "waypoints": [_waypoint_to_dict(w) for w in c.waypoints],
            }
            for c in spec.clusters
        ],
        "static_count": spec.static_count,
        "static_inner": list(spec.static_inner),
        "static_outer": list(spec.static_outer),
        "static_center": None
        if spec.static_center is None
        else list(spec.static_center),
        "noise": {
            "pixel_sigma": spec.noise.pixel_sigma,
            "feature_dropout_rate": spec.noise.feature_dropout_rate,
            "descriptor_corruption_rate": spec.noise.descriptor_corruption_rate,
            "box_jitter_sigma": spec.noise.box_jitter_sigma,
            "box_miss_rate": spec.noise.box_miss_rate,
        },
        "occluders": [
            {
                "first_frame": o.first_frame,
                "last_frame": o.last_frame,
                "min_corner": list(o.min_corner),
                "max_corner": list(o.max_corner),
                "depth": o.depth,
            }
            for o in spec.occluders
        ],
        "depth_min": spec.depth_min,
    }


_WORLD_KEYS = {
    "frame_count", "frame_dt", "seed", "intrinsics", "image_size",
    "camera_waypoints", "clusters", "static_count", "static_inner",
    "static_outer", "static_center", "noise", "occluders", "depth_min",
}


def world_spec_from_dict(data: dict) -> WorldSpec:
    extra = set(data) - _WORLD_KEYS
    if extra:
        raise ValueError(f"unknown world spec fields: {sorted(extra)}")
    for key in ("frame_count", "frame_dt", "seed", "intrinsics",
                "camera_waypoints", "clusters", "static_count",
                "static_inner", "static_outer"):
        if key not in data:
            raise ValueError(f"world spec is missing {key!r}")
    if int(data["frame_count"]) < 1:
        raise ValueError("frame_count must be at least 1")
    if float(data["frame_dt"]) <= 0.0:
        raise ValueError("frame_dt must be positive")
    clusters = []
    for i, item in enumerate(data["clusters"]):
        extra = set(item) - {"name", "class_label", "landmark_count", "extent",
                             "waypoints"}
        if extra:
            raise ValueError(f"clusters[{i}]: unknown fields {sorted(extra)}")
        if int(item["landmark_count"]) < 0:
            raise ValueError(f"clusters[{i}]: landmark_count must be non-negative")
        clusters.append(
            ClusterSpec(
                str(item["name"]),
                str(item["class_label"]),
                int(item["landmark_count"]),
                tuple(float(v) for v in item["extent"]),
                _waypoints_from(item["waypoints"], f"clusters[{i}].waypoints"),
            )
        )
    noise_data = data.get("noise", {})
    extra = set(noise_data) - {
        "pixel_sigma", "feature_dropout_rate", "descriptor_corruption_rate",
        "box_jitter_sigma", "box_miss_rate",
    }
    if extra:
        raise ValueError(f"noise: unknown fields {sorted(extra)}")
    for rate_key in ("feature_dropout_rate", "descriptor_corruption_rate",
                     "box_miss_rate"):
        rate = float(noise_data.get(rate_key, 0.0))
        if not 0.0 <= rate <= 1.0:
            raise ValueError(f"noise.{rate_key} must lie in [0, 1]")
    occluders = []
    for i, item in enumerate(data.get("occluders", []) or []):
        extra = set(item) - {"first_frame", "last_frame", "min_corner",
                             "max_corner", "depth"}
        if extra:
            raise ValueError(f"occluders[{i}]: unknown fields {sorted(extra)}")
        occluders.append(
            Occluder(
                int(item["first_frame"]),
                int(item["last_frame"]),
                tuple(float(v) for v in item["min_corner"]),
                tuple(float(v) for v in item["max_corner"]),
                float(item["depth"]),
            )
        )
    center = data.get("static_center")
    return WorldSpec(
        frame_count=int(data["frame_count"]),
        frame_dt=float(data["frame_dt"]),
        seed=int(data["seed"]),
        intrinsics=StereoIntrinsics(**{
            k: float(v) for k, v in data["intrinsics"].items()
        }),
        camera_waypoints=_waypoints_from(data["camera_waypoints"],
                                         "camera_waypoints"),
        clusters=tuple(clusters),
        static_count=int(data["static_count"]),
        static_inner=tuple(float(v) for v in data["static_inner"]),
        static_outer=tuple(float(v) for v in data["static_outer"]),
        image_size=tuple(int(v) for v in data.get("image_size", (640, 480))),
        static_center=None if center is None else tuple(float(v) for v in center),
        noise=NoiseSpec(**{k: float(v) for k, v in noise_data.items()}),
        occluders=tuple(occluders),
        depth_min=float(data.get("depth_min", 0.2)),
    )


def load_world_spec(path) -> WorldSpec:
    """Parse a world spec JSON file. Raises ValueError with positions."""
    text = Path(path).read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}:{exc.lineno}: {exc.msg}") from exc
    try:
        return world_spec_from_dict(data)
    except ValueError as exc:
        raise ValueError(f"{path}: {exc}") from exc


def save_world_spec(spec: WorldSpec, path) -> None:
    Path(path).write_text(
        json.dumps(world_spec_to_dict(spec), indent=2) + "\n"
    )
