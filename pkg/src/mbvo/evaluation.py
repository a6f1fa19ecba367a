"""Trajectory metrics and segmentation scoring.

TUM-style protocol: trajectories are (timestamp, pose) sequences stored as
``timestamp tx ty tz qx qy qz qw`` text lines; estimate and reference are
paired by nearest timestamp before computing absolute trajectory error
(optionally after rigid alignment), relative pose error over consecutive
pairs, and per-axis maximum drift.  Recovered moving-body trajectories are
registered onto their references with a right-multiplied rigid correction
before scoring.  Segmentation accuracy maps recovered cluster ids onto true
bodies by best one-to-one overlap.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.transform import Rotation as _Rotation

from mbvo.geometry import Pose


class InsufficientOverlap(ValueError):
    """Too few time-aligned pose pairs to compute the metric."""


@dataclass(frozen=True)
class Trajectory:
    """Time-ordered pose sequence; timestamps strictly increasing."""

    timestamps: np.ndarray
    poses: list[Pose]

    def __post_init__(self):
        object.__setattr__(
            self, "timestamps", np.asarray(self.timestamps, dtype=float)
        )
        if len(self.timestamps) != len(self.poses):
            raise ValueError("timestamp and pose counts differ")
        if len(self.timestamps) > 1 and not (np.diff(self.timestamps) > 0.0).all():
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.poses)

    def transformed_right(self, correction: Pose) -> "Trajectory":
        """Every pose composed with ``correction`` on the right."""
        return Trajectory(
            self.timestamps.copy(), [p.compose(correction) for p in self.poses]
        )


def load_trajectory(path) -> Trajectory:
    """Read ``timestamp tx ty tz qx qy qz qw`` lines; ``#`` starts a comment."""
    times: list[float] = []
    poses: list[Pose] = []
    with open(path, "r", encoding="utf-8") as handle:
        for line_no, raw in enumerate(handle, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            fields = line.split()
            if len(fields) != 8:
                raise ValueError(
                    f"{path}:{line_no}: expected 8 fields, got {len(fields)}"
                )
            try:
                values = [float(v) for v in fields]
            except ValueError as exc:
                raise ValueError(f"{path}:{line_no}: {exc}") from None
            if times and values[0] <= times[-1]:
                raise ValueError(
                    f"{path}:{line_no}: timestamps must be strictly increasing"
                )
            times.append(values[0])
            poses.append(Pose.from_quaternion(values[1:4], values[4:8]))
    return Trajectory(np.array(times), poses)


def save_trajectory(trajectory: Trajectory, path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        handle.write("# timestamp tx ty tz qx qy qz qw\n")
        for t, pose in zip(trajectory.timestamps, trajectory.poses):
            q = pose.as_quaternion()
            tx, ty, tz = pose.translation
            handle.write(
                f"{t:.9f} {tx:.9f} {ty:.9f} {tz:.9f} "
                f"{q[0]:.9f} {q[1]:.9f} {q[2]:.9f} {q[3]:.9f}\n"
            )


def pair_indices(
    estimate: Trajectory, reference: Trajectory, max_dt: float | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Index pairs matching each estimate pose to the nearest reference pose.

    ``max_dt`` defaults to half the median reference frame spacing.
    """
    if len(estimate) == 0 or len(reference) == 0:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    ref_t = reference.timestamps
    if max_dt is None:
        max_dt = (
            0.5 * float(np.median(np.diff(ref_t))) if len(ref_t) > 1 else np.inf
        )
    pos = np.searchsorted(ref_t, estimate.timestamps)
    lo = np.clip(pos - 1, 0, len(ref_t) - 1)
    hi = np.clip(pos, 0, len(ref_t) - 1)
    nearest = np.where(
        np.abs(ref_t[hi] - estimate.timestamps)
        < np.abs(ref_t[lo] - estimate.timestamps),
        hi,
        lo,
    )
    ok = np.abs(ref_t[nearest] - estimate.timestamps) <= max_dt
    return np.nonzero(ok)[0], nearest[ok]


def _paired_poses(estimate, reference, max_dt, minimum):
    e_idx, r_idx = pair_indices(estimate, reference, max_dt)
    if len(e_idx) < minimum:
        raise InsufficientOverlap(
            f"need at least {minimum} aligned pairs, found {len(e_idx)}"
        )
    return (
        [estimate.poses[i] for i in e_idx],
        [reference.poses[j] for j in r_idx],
    )


def _project_to_rotation(mat: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(mat)
    rot = u @ vt
    if np.linalg.det(rot) < 0.0:
        rot = u @ np.diag([1.0, 1.0, -1.0]) @ vt
    return rot


def register_trajectory(
    estimate: Trajectory, reference: Trajectory, max_dt: float | None = None
) -> Pose:
    """Right-multiplied rigid correction aligning the estimate to the
    reference: ``estimate_t ∘ T_r ≈ reference_t``.

    The rotation is the chordal average of the per-pose relative rotations;
    the translation is the exact least-squares fit given that rotation.
    Raises :class:`InsufficientOverlap` below 3 pairs.
    """
    est, ref = _paired_poses(estimate, reference, max_dt, minimum=3)
    m = np.zeros((3, 3))
    t_sum = np.zeros(3)
    for p, g in zip(est, ref):
        m += p.rotation.T @ g.rotation
        t_sum += p.rotation.T @ (g.translation - p.translation)
    return Pose(_project_to_rotation(m), t_sum / len(est))


def registration_residuals(
    estimate: Trajectory,
    reference: Trajectory,
    correction: Pose,
    max_dt: float | None = None,
) -> tuple[float, float]:
    """(translation RMSE, chordal rotation RMS) of ``estimate ∘ correction``
    against the reference, over time-aligned pairs."""
    est, ref = _paired_poses(estimate, reference, max_dt, minimum=1)
    trans_sq = []
    rot_sq = []
    for p, g in zip(est, ref):
        moved = p.compose(correction)
        trans_sq.append(np.sum((moved.translation - g.translation) ** 2))
        rot_sq.append(np.sum((moved.rotation - g.rotation) ** 2))
    return float(np.sqrt(np.mean(trans_sq))), float(np.sqrt(np.mean(rot_sq)))


def compute_ate(
    estimate: Trajectory,
    reference: Trajectory,
    alignment: str = "none",
    max_dt: float | None = None,
) -> float:
    """RMSE of translation differences over aligned pairs.

    ``alignment="rigid"`` removes the best-fit rigid transform (rotation and
    translation, no scale) between the paired translations first.
    """
    if alignment not in ("none", "rigid"):
        raise ValueError(f"unknown alignment {alignment!r}")
    est, ref = _paired_poses(estimate, reference, max_dt, minimum=2)
    p = np.stack([e.translation for e in est])
    q = np.stack([g.translation for g in ref])
    if alignment == "rigid":
        p_bar, q_bar = p.mean(axis=0), q.mean(axis=0)
        rot = _project_to_rotation((q - q_bar).T @ (p - p_bar))
        p = (p - p_bar) @ rot.T + q_bar
    return float(np.sqrt(np.mean(np.sum((p - q) ** 2, axis=1))))


def _rotation_angle(rot: np.ndarray) -> float:
    # atan2 form stays accurate near zero where arccos((tr-1)/2) loses digits
    s = 0.5 * np.linalg.norm(
        [rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]]
    )
    c = 0.5 * (np.trace(rot) - 1.0)
    return float(np.arctan2(s, c))


def compute_rpe(
    estimate: Trajectory,
    reference: Trajectory,
    delta: int = 1,
    max_dt: float | None = None,
) -> tuple[float, float]:
    """(rotation RMSE in radians, translation RMSE in meters) of the error in
    relative motion over ``delta``-step gaps of the paired sequence."""
    est, ref = _paired_poses(estimate, reference, max_dt, minimum=delta + 1)
    rot_sq = []
    trans_sq = []
    for k in range(len(est) - delta):
        d_est = est[k].inverse().compose(est[k + delta])
        d_ref = ref[k].inverse().compose(ref[k + delta])
        err = d_ref.inverse().compose(d_est)
        rot_sq.append(_rotation_angle(err.rotation) ** 2)
        trans_sq.append(np.sum(err.translation**2))
    return float(np.sqrt(np.mean(rot_sq))), float(np.sqrt(np.mean(trans_sq)))


def max_drift(
    estimate: Trajectory, reference: Trajectory, max_dt: float | None = None
) -> tuple[float, np.ndarray]:
    """Worst-case deviation from the reference over the whole sequence.

    Returns the maximum translation distance and the per-axis maxima of the
    rotation error decomposed as intrinsic ZYX Euler angles, reported in
    application order ``(yaw, pitch, roll)``.
    """
    est, ref = _paired_poses(estimate, reference, max_dt, minimum=1)
    trans = 0.0
    rot = np.zeros(3)
    for p, g in zip(est, ref):
        trans = max(trans, float(np.linalg.norm(p.translation - g.translation)))
        angles = _Rotation.from_matrix(g.rotation.T @ p.rotation).as_euler("ZYX")
        rot = np.maximum(rot, np.abs(angles))
    return trans, rot


def segmentation_accuracy(
    labels: dict[int, int], truth: dict[int, int]
) -> float:
    """Fraction of landmarks whose cluster id maps to their true body.

    The map is the best one-to-one assignment of cluster ids to bodies by
    overlap count, so two bodies merged into one cluster can score at most
    the larger body's share.  Landmarks missing from ``labels`` or labeled
    with a negative id (outliers) count against.
    """
    if not truth:
        return 1.0
    bodies = sorted({b for b in truth.values()})
    clusters = sorted({c for c in labels.values() if c is not None and c >= 0})
    if not clusters:
        return 0.0
    body_pos = {b: i for i, b in enumerate(bodies)}
    cluster_pos = {c: i for i, c in enumerate(clusters)}
    counts = np.zeros((len(bodies), len(clusters)), dtype=int)
    for lm, body in truth.items():
        label = labels.get(lm)
        if label is not None and label >= 0:
            counts[body_pos[body], cluster_pos[label]] += 1
    rows, cols = linear_sum_assignment(-counts)
    return float(counts[rows, cols].sum()) / len(truth)


@dataclass
class MetricReport:
    """Flat bundle of trajectory and clustering scores for one run."""

    ate_rmse: float
    rpe_rot_rmse: float
    rpe_trans_rmse: float
    max_drift_trans: float
    max_drift_rot: np.ndarray = field(default_factory=lambda: np.zeros(3))
    segmentation: float | None = None

    def validate(self) -> None:
        values = [
            self.ate_rmse,
            self.rpe_rot_rmse,
            self.rpe_trans_rmse,
            self.max_drift_trans,
            *np.asarray(self.max_drift_rot, dtype=float),
        ]
        if self.segmentation is not None:
            values.append(self.segmentation)
        assert all(np.isfinite(v) and v >= 0.0 for v in values)

    def as_dict(self) -> dict:
        out = {
            "ate_rmse": float(self.ate_rmse),
            "rpe_rot_rmse": float(self.rpe_rot_rmse),
            "rpe_trans_rmse": float(self.rpe_trans_rmse),
            "max_drift_trans": float(self.max_drift_trans),
            "max_drift_rot_yaw": float(self.max_drift_rot[0]),
            "max_drift_rot_pitch": float(self.max_drift_rot[1]),
            "max_drift_rot_roll": float(self.max_drift_rot[2]),
        }
        if self.segmentation is not None:
            out["segmentation"] = float(self.segmentation)
        return out

    @staticmethod
    def from_dict(data: dict) -> "MetricReport":
        return MetricReport(
            ate_rmse=data["ate_rmse"],
            rpe_rot_rmse=data["rpe_rot_rmse"],
            rpe_trans_rmse=data["rpe_trans_rmse"],
            max_drift_trans=data["max_drift_trans"],
            max_drift_rot=np.array(
                [
                    data["max_drift_rot_yaw"],
                    data["max_drift_rot_pitch"],
                    data["max_drift_rot_roll"],
                ]
            ),
            segmentation=data.get("segmentation"),
        )

    def save_text(self, path) -> None:
        with open(path, "w", encoding="utf-8") as handle:
            for key, value in self.as_dict().items():
                handle.write(f"{key} {value:.12g}\n")

    def save_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(self.as_dict(), handle, indent=2, sort_keys=True)
            handle.write("\n")


def score_trajectory(
    estimate: Trajectory,
    reference: Trajectory,
    *,
    alignment: str = "none",
    segmentation: float | None = None,
    max_dt: float | None = None,
) -> MetricReport:
    """Assemble the full report for one trajectory pair."""
    rot_rmse, trans_rmse = compute_rpe(estimate, reference, max_dt=max_dt)
    drift_trans, drift_rot = max_drift(estimate, reference, max_dt=max_dt)
    report = MetricReport(
        ate_rmse=compute_ate(estimate, reference, alignment, max_dt=max_dt),
        rpe_rot_rmse=rot_rmse,
        rpe_trans_rmse=trans_rmse,
        max_drift_trans=drift_trans,
        max_drift_rot=drift_rot,
        segmentation=segmentation,
    )
    report.validate()
    return report
