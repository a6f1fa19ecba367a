"""Sliding-window state estimation.

Two damped Gauss-Newton solvers share the machinery in this module.  The
static solver adjusts camera poses and background landmarks over the whole
frame window, anchored by an information-form prior left behind by
marginalized frames.  The cluster solver adjusts one moving body's per-frame
poses, velocities, and body-frame points over the recent track, holding
cameras fixed, with a constant-velocity smoothness prior tying translation
and velocity between frames.  Landmark blocks are eliminated by Schur
complement in both solvers.

Conventions: poses map body to world and increments compose on the right,
``x <- x * exp(delta)`` with twists ordered ``[rho, phi]``.  Residuals are
``predicted - measured``; each solver minimizes the Huber-robustified sum of
squared Mahalanobis residual norms plus its quadratic priors.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from mbvo.geometry import (
    Pose,
    StereoIntrinsics,
    back_project,
    compose_increment_arrays,
    projection_jacobians,
    propagate_measurement_noise,
    se3_log,
    skew_stack,
    so3_log,
    transform_covariance,
)

_TINY = 1e-300
_DAMPING_CAP = 1e10


class NonPositiveDt(ValueError):
    """Motion-prior factors need a strictly positive time step."""


class RankDeficient(RuntimeError):
    """The reduced state system is singular beyond damping; the caller keeps
    the previous states (insufficient parallax or observation-starved)."""


class DegenerateCloud(ValueError):
    """Principal axes of the point cloud are ambiguous (or too few points)."""


class SingularBlockWarning(RuntimeWarning):
    """An eliminated block was singular and got a small diagonal boost."""


# ---------------------------------------------------------------------------
# robust kernel


def huber_cost(e, delta: float):
    """Cost of a Mahalanobis residual norm: quadratic to ``delta``, linear
    beyond (``2*delta*e - delta^2``)."""
    e = np.asarray(e, dtype=float)
    return np.where(e <= delta, e * e, 2.0 * delta * e - delta * delta)


def huber_weights(e, delta: float):
    """IRLS weight reproducing :func:`huber_cost` in a quadratic surrogate."""
    e = np.asarray(e, dtype=float)
    return np.where(e <= delta, 1.0, delta / np.maximum(e, _TINY))


# ---------------------------------------------------------------------------
# information-form prior and marginalization


def schur_complement(
    information: np.ndarray,
    rhs: np.ndarray,
    eliminate: np.ndarray,
    regularization: float = 1e-9,
) -> tuple[np.ndarray, np.ndarray]:
    """Eliminate the masked variables from a normal system.

    Rows of the eliminated block that carry no information at all (zero row
    and zero right-hand side) are dropped exactly.  A singular remaining
    block gets ``regularization`` added to its diagonal and a
    :class:`SingularBlockWarning`.
    """
    eliminate = np.asarray(eliminate, dtype=bool)
    keep = ~eliminate
    h_bb = information[np.ix_(eliminate, eliminate)]
    h_ab = information[np.ix_(keep, eliminate)]
    b_b = rhs[eliminate]

    live = (np.abs(h_bb).sum(axis=1) > 0.0) | (np.abs(h_ab).sum(axis=0) > 0.0)
    live |= np.abs(b_b) > 0.0
    h_bb = h_bb[np.ix_(live, live)]
    h_ab = h_ab[:, live]
    b_b = b_b[live]

    h_aa = information[np.ix_(keep, keep)]
    b_a = rhs[keep]
    if h_bb.shape[0] == 0:
        return h_aa.copy(), b_a.copy()
    stacked = np.column_stack([h_ab.T, b_b])

    def attempt(mat):
        # the cholesky probe rejects indefinite blocks that a pivoted LU
        # would happily "solve"; the solve itself can still fail on blocks
        # the probe let through, hence both live inside the try
        np.linalg.cholesky(mat)
        return h_ab @ np.linalg.solve(mat, stacked)

    try:
        gain = attempt(h_bb)
    except np.linalg.LinAlgError:
        warnings.warn(
            "singular eliminated block, regularizing", SingularBlockWarning,
            stacklevel=2,
        )
        h_bb = h_bb + regularization * np.eye(h_bb.shape[0])
        try:
            gain = attempt(h_bb)
        except np.linalg.LinAlgError:
            gain = h_ab @ (np.linalg.pinv(h_bb) @ stacked)
    h_red = h_aa - gain[:, :-1]
    b_red = b_a - gain[:, -1]
    return 0.5 * (h_red + h_red.T), b_red


def _clamped_psd(information: np.ndarray) -> np.ndarray:
    """Project a symmetric matrix onto the positive-semidefinite cone.

    Repeated eliminations accumulate roundoff that can push the retained
    information slightly indefinite; a negative direction would reward
    moving the states it spans, so it is clamped to zero outright.
    """
    vals, vecs = np.linalg.eigh(information)
    if vals.size == 0 or vals[0] >= 0.0:
        return information
    return (vecs * np.clip(vals, 0.0, None)) @ vecs.T


@dataclass
class InformationPrior:
    """Quadratic prior over camera-state increments left by marginalization.

    Relative to the stored linearization states, an increment ``d`` costs
    ``d^T H d - 2 beta^T d`` (constant offset dropped).  ``frame_ids`` orders
    the 6-dof blocks.
    """

    frame_ids: list[int]
    x_star: list[Pose]
    information: np.ndarray
    beta: np.ndarray

    def dimension(self) -> int:
        return 6 * len(self.frame_ids)

    def delta(self, poses: dict[int, Pose]) -> np.ndarray:
        """Stacked twists of the current estimates relative to ``x_star``."""
        parts = [
            se3_log(ref.inverse().compose(poses[fid]))
            for fid, ref in zip(self.frame_ids, self.x_star)
        ]
        return np.concatenate(parts) if parts else np.zeros(0)

    def cost(self, poses: dict[int, Pose]) -> float:
        d = self.delta(poses)
        return float(d @ self.information @ d - 2.0 * self.beta @ d)

    def rebased(self, poses: dict[int, Pose]) -> "InformationPrior":
        """Move the linearization point to the given states.

        The quadratic is exact under the first-order increment composition
        used everywhere else: H stays, beta absorbs the accumulated shift.
        """
        d = self.delta(poses)
        return InformationPrior(
            frame_ids=list(self.frame_ids),
            x_star=[poses[fid] for fid in self.frame_ids],
            information=self.information.copy(),
            beta=self.beta - self.information @ d,
        )

    def marginalize_frames(
        self, frame_ids, regularization: float = 1e-9
    ) -> "InformationPrior | None":
        """Schur-eliminate frames that left the window without promotion."""
        drop = set(frame_ids)
        if not drop & set(self.frame_ids):
            return self
        eliminate = np.zeros(self.dimension(), dtype=bool)
        for i, fid in enumerate(self.frame_ids):
            if fid in drop:
                eliminate[6 * i : 6 * i + 6] = True
        kept = [
            (fid, pose)
            for fid, pose in zip(self.frame_ids, self.x_star)
            if fid not in drop
        ]
        if not kept:
            return None
        h_red, b_red = schur_complement(
            self.information, self.beta, eliminate, regularization
        )
        return InformationPrior(
            frame_ids=[fid for fid, _ in kept],
            x_star=[pose for _, pose in kept],
            information=_clamped_psd(h_red),
            beta=b_red,
        )

    def assert_consistent(self, tol: float = 1e-9) -> None:
        h = self.information
        assert h.shape == (self.dimension(), self.dimension())
        assert np.allclose(h, h.T, atol=tol)
        scale = max(1.0, float(np.abs(h).max()))
        assert np.linalg.eigvalsh(h).min() >= -tol * scale


# ---------------------------------------------------------------------------
# constant-velocity motion prior


def wnoa_factor(dt: float, q: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Transition and information of the smooth-motion factor over one gap.

    State is ``(translation, velocity)``.  Returns ``A`` with
    ``s_next ~ A s`` and the factor information ``Q_inv`` for the residual
    ``s_next - A s``.
    """
    if dt <= 0.0:
        raise NonPositiveDt(f"dt must be positive, got {dt!r}")
    q = np.asarray(q, dtype=float)
    if q.ndim == 0:
        q = float(q) * np.eye(3)
    transition = np.eye(6)
    transition[:3, 3:] = dt * np.eye(3)
    blocks = np.array(
        [
            [12.0 / dt**3, -6.0 / dt**2],
            [-6.0 / dt**2, 4.0 / dt],
        ]
    )
    return transition, np.kron(blocks, np.linalg.inv(q))


def predict_constant_velocity(pose: Pose, velocity: np.ndarray, dt: float) -> Pose:
    """Carry a body pose forward: translation drifts with the velocity, the
    rotation holds (no rotational motion model)."""
    return Pose(pose.rotation.copy(), pose.translation + np.asarray(velocity) * dt)


# ---------------------------------------------------------------------------
# shared assembly pieces


def _accumulate_blocks(idx: np.ndarray, values: np.ndarray, n: int) -> np.ndarray:
    """Sum equal-shaped blocks into ``n`` bins: out[i] = sum over idx == i.

    ``np.bincount`` on flattened offsets; much faster than ``np.add.at`` for
    the many-small-blocks workloads of the solvers.
    """
    size = values[0].size if len(values) else 1
    flat = (np.asarray(idx)[:, None] * size + np.arange(size)[None, :]).ravel()
    out = np.bincount(flat, weights=values.reshape(-1), minlength=n * size)
    return out.reshape((n,) + values.shape[1:])


def _stack_poses(poses) -> tuple[np.ndarray, np.ndarray]:
    return (
        np.stack([p.rotation for p in poses]),
        np.stack([p.translation for p in poses]),
    )


def _stereo_pixels(y: np.ndarray, cam: StereoIntrinsics) -> np.ndarray:
    inv_z = 1.0 / y[:, 2]
    out = np.empty_like(y)
    out[:, 0] = cam.fx * y[:, 0] * inv_z + cam.cx
    out[:, 1] = cam.fy * y[:, 1] * inv_z + cam.cy
    out[:, 2] = cam.fx * (y[:, 0] - cam.baseline) * inv_z + cam.cx
    return out


class _LandmarkSchur:
    """Per-landmark elimination bookkeeping shared by both solvers.

    Keeps the observation-to-landmark index so the reduction can assemble the
    dense frame-landmark coupling matrix with one scatter per solve.
    """

    def __init__(self, l_idx: np.ndarray, n_landmarks: int):
        self.l_idx = np.asarray(l_idx, dtype=int)
        self.n_landmarks = n_landmarks
        self.counts = np.bincount(self.l_idx, minlength=n_landmarks)

    def coupling_matrix(
        self, couplings: np.ndarray, f_idx: np.ndarray, block: int, dim: int
    ) -> np.ndarray:
        """Dense (dim, 3 * n_landmarks) matrix of stacked coupling blocks."""
        width = 3 * self.n_landmarks
        rows = (f_idx * block)[:, None, None] + np.arange(block)[None, :, None]
        cols = (self.l_idx * 3)[:, None, None] + np.arange(3)[None, None, :]
        flat = (rows * width + cols).ravel()
        return np.bincount(
            flat, weights=couplings.ravel(), minlength=dim * width
        ).reshape(dim, width)


def _eliminate_landmarks(
    lam_cc: np.ndarray,
    b_c: np.ndarray,
    h_inv: np.ndarray,
    b_l: np.ndarray,
    w: np.ndarray,
):
    """Schur-complement the landmark blocks out of the frame system.

    ``w`` is the dense coupling matrix and ``h_inv`` the (possibly damped)
    inverted landmark blocks.  Returns the reduced ``(lam, rhs, u)`` where
    ``u = w @ blockdiag(h_inv)`` is reused for back-substitution.
    """
    dim = lam_cc.shape[0]
    n_l = h_inv.shape[0]
    u = (
        np.matmul(w.reshape(dim, n_l, 3).transpose(1, 0, 2), h_inv)
        .transpose(1, 0, 2)
        .reshape(dim, -1)
    )
    lam = lam_cc - u @ w.T
    rhs = b_c - u @ b_l.ravel()
    return lam, rhs, u


def _reduce_and_solve(
    lam_cc: np.ndarray,
    b_c: np.ndarray,
    h_ll: np.ndarray,
    b_l: np.ndarray,
    w: np.ndarray,
    block: int,
    free: np.ndarray,
    damping: float,
):
    """Damp, eliminate landmarks, and solve for the frame increments.

    ``w`` is the dense coupling matrix from
    :meth:`_LandmarkSchur.coupling_matrix`.  Returns ``(frame_delta,
    landmark_delta)`` or raises LinAlgError.
    """
    dim = lam_cc.shape[0]
    h_inv = np.linalg.inv(h_ll + damping * np.eye(3))
    lam, rhs, _ = _eliminate_landmarks(lam_cc, b_c, h_inv, b_l, w)
    lam[np.diag_indices(dim)] += damping
    delta = np.zeros(dim)
    delta[free] = np.linalg.solve(lam[np.ix_(free, free)], rhs[free])
    if not np.isfinite(delta).all():
        raise np.linalg.LinAlgError("non-finite solution")
    frame_delta = delta.reshape(-1, block)
    pulled = (w.T @ delta).reshape(-1, 3)
    delta_l = np.einsum("lij,lj->li", h_inv, b_l - pulled)
    return frame_delta, delta_l


def _probe_reduced_rank(lam_cc, b_c, h_ll, b_l, w, counts, free) -> None:
    """Raise RankDeficient when the undamped reduced system is singular."""
    populated = counts > 0
    h_inv = np.zeros_like(h_ll)
    try:
        h_inv[populated] = np.linalg.inv(h_ll[populated])
    except np.linalg.LinAlgError as exc:
        raise RankDeficient("landmark block singular") from exc
    if not np.isfinite(h_inv).all():
        raise RankDeficient("landmark block singular")
    lam, _, _ = _eliminate_landmarks(lam_cc, b_c, h_inv, b_l, w)
    reduced = lam[np.ix_(free, free)]
    if reduced.size == 0:
        return
    eigenvalues = np.linalg.eigvalsh(0.5 * (reduced + reduced.T))
    scale = max(1.0, float(eigenvalues.max(initial=0.0)))
    if eigenvalues.min() <= 1e-12 * scale:
        raise RankDeficient("reduced frame system is singular")


# ---------------------------------------------------------------------------
# static bundle adjustment


@dataclass
class StaticSolveResult:
    poses: list[Pose]
    landmarks: dict[int, np.ndarray]
    cost_history: list[float]
    residual_norms: np.ndarray   # per input observation, NaN where excluded
    iterations: int


def optimize_static(
    poses,
    frame_ids,
    landmarks: dict[int, np.ndarray],
    observations,
    cam: StereoIntrinsics,
    *,
    pixel_sigma: float = 1.0,
    huber_delta: float = 2.4,
    prior: InformationPrior | None = None,
    fix_frames=(),
    max_iterations: int = 10,
    relative_tolerance: float = 1e-6,
    damping_init: float = 1e-4,
    depth_min: float = 0.1,
    regularization: float = 1e-9,
) -> StaticSolveResult:
    """Window bundle adjustment over camera poses and background landmarks.

    ``observations`` is ``(frame_index, landmark_id, pixels)`` arrays with
    ``frame_index`` into ``poses``.  Landmarks seen fewer than twice (or whose
    observations fail the depth check at the initial states) are held fixed.
    Frames listed in ``fix_frames`` (by id) are the gauge anchor when no
    prior exists.  Raises :class:`RankDeficient` when the reduced camera
    system is singular even before damping; states are left untouched then.
    """
    poses = list(poses)
    frame_ids = list(frame_ids)
    n_frames = len(poses)
    f_idx_all, lm_ids_all, z_all = observations
    f_idx_all = np.asarray(f_idx_all, dtype=int)
    lm_ids_all = np.asarray(lm_ids_all)
    z_all = np.asarray(z_all, dtype=float)

    result_norms = np.full(len(f_idx_all), np.nan)

    # drop observations invalid at the initial states, then landmarks with
    # fewer than two remaining observations (under-constrained along the ray)
    rot0, tr0 = _stack_poses(poses)
    valid = np.ones(len(f_idx_all), dtype=bool)
    if len(f_idx_all):
        ids0, inv0 = np.unique(lm_ids_all, return_inverse=True)
        pts0 = np.stack([landmarks[i] for i in ids0])[inv0]
        y0 = np.einsum(
            "nji,nj->ni", rot0[f_idx_all], pts0 - tr0[f_idx_all]
        )
        valid = y0[:, 2] > depth_min
    use = valid.copy()
    while True:
        ids_used, counts = np.unique(lm_ids_all[use], return_counts=True)
        starved = set(ids_used[counts < 2])
        if not starved:
            break
        use &= ~np.isin(lm_ids_all, list(starved))
    sel = np.nonzero(use)[0]
    f_idx = f_idx_all[sel]
    z = z_all[sel]
    lm_order = np.unique(lm_ids_all[sel])
    lm_index = {int(i): k for k, i in enumerate(lm_order)}
    l_idx = np.array([lm_index[int(i)] for i in lm_ids_all[sel]], dtype=int)
    n_lm = len(lm_order)
    points = (
        np.stack([np.asarray(landmarks[int(i)], dtype=float) for i in lm_order])
        if n_lm
        else np.zeros((0, 3))
    )

    prior_rows = None
    if prior is not None:
        id_pos = {fid: k for k, fid in enumerate(frame_ids)}
        try:
            anchor = [id_pos[fid] for fid in prior.frame_ids]
        except KeyError as exc:
            raise ValueError(f"prior frame {exc} missing from the window") from exc
        prior_rows = np.concatenate(
            [6 * a + np.arange(6) for a in anchor]
        ).astype(int)

    free = np.ones(6 * n_frames, dtype=bool)
    fixed = set(fix_frames)
    obs_per_frame = np.bincount(f_idx, minlength=n_frames)
    prior_frames = set(prior.frame_ids) if prior is not None else set()
    for k, fid in enumerate(frame_ids):
        unfixable = obs_per_frame[k] == 0 and fid not in prior_frames
        if fid in fixed or unfixable:
            free[6 * k : 6 * k + 6] = False

    inv_sigma_sq = 1.0 / pixel_sigma**2

    def prior_poses(rot, tr):
        return {fid: Pose(rot[a], tr[a]) for fid, a in zip(prior.frame_ids, anchor)}

    def evaluate(rot, tr, cur_points):
        y = np.einsum("nji,nj->ni", rot[f_idx], cur_points[l_idx] - tr[f_idx])
        if len(y) and not (y[:, 2] > depth_min).all():
            return np.inf, None
        zhat = _stereo_pixels(y, cam) if len(y) else np.zeros((0, 3))
        e_vec = zhat - z
        e = np.linalg.norm(e_vec, axis=1) / pixel_sigma
        cost = float(huber_cost(e, huber_delta).sum())
        if prior is not None:
            cost += prior.cost(prior_poses(rot, tr))
        return cost, (y, e_vec, e)

    rot, tr = rot0, tr0
    cost, terms = evaluate(rot, tr, points)
    if not np.isfinite(cost):
        raise ValueError("initial states are invalid (landmark behind a camera)")
    cost_history = [cost]
    schur = _LandmarkSchur(l_idx, n_lm)
    damping = damping_init
    probed = False
    iterations = 0
    improvement = np.inf

    for _ in range(max_iterations):
        y, e_vec, e = terms
        jpi = projection_jacobians(y, cam) if len(y) else np.zeros((0, 3, 3))
        a_blk = np.empty((len(y), 3, 6))
        a_blk[:, :, :3] = -jpi
        a_blk[:, :, 3:] = jpi @ skew_stack(y)
        b_blk = jpi @ rot[f_idx].transpose(0, 2, 1)
        w = huber_weights(e, huber_delta) * inv_sigma_sq

        lam_cc = np.zeros((6 * n_frames, 6 * n_frames))
        b_c = np.zeros(6 * n_frames)
        h_ll = np.zeros((n_lm, 3, 3))
        b_l = np.zeros((n_lm, 3))
        couplings = np.zeros((len(y), 6, 3))
        if len(y):
            at = a_blk.transpose(0, 2, 1)
            wa = w[:, None, None] * a_blk
            wb = w[:, None, None] * b_blk
            we = w[:, None] * e_vec
            hpp = _accumulate_blocks(f_idx, at @ wa, n_frames)
            bp = _accumulate_blocks(
                f_idx, -np.einsum("nij,ni->nj", a_blk, we), n_frames
            )
            h_ll = _accumulate_blocks(
                l_idx, b_blk.transpose(0, 2, 1) @ wb, n_lm
            )
            b_l = _accumulate_blocks(
                l_idx, -np.einsum("nij,ni->nj", b_blk, we), n_lm
            )
            lam4 = lam_cc.reshape(n_frames, 6, n_frames, 6)
            rng = np.arange(n_frames)
            lam4[rng, :, rng, :] = hpp
            b_c = bp.reshape(-1)
            couplings = at @ wb
        if prior is not None:
            d_hat = prior.delta(prior_poses(rot, tr))
            lam_cc[np.ix_(prior_rows, prior_rows)] += prior.information
            b_c[prior_rows] += prior.beta - prior.information @ d_hat

        w_mat = schur.coupling_matrix(couplings, f_idx, 6, 6 * n_frames)
        if not probed:
            _probe_reduced_rank(lam_cc, b_c, h_ll, b_l, w_mat, schur.counts, free)
            probed = True

        accepted = False
        while damping <= _DAMPING_CAP:
            try:
                frame_delta, lm_delta = _reduce_and_solve(
                    lam_cc, b_c, h_ll, b_l, w_mat, 6, free, damping
                )
            except np.linalg.LinAlgError:
                damping *= 10.0
                continue
            new_rot, new_tr = compose_increment_arrays(rot, tr, frame_delta)
            new_points = points + lm_delta
            new_cost, new_terms = evaluate(new_rot, new_tr, new_points)
            if new_cost <= cost:
                rot, tr, points = new_rot, new_tr, new_points
                terms = new_terms
                assert new_cost <= cost_history[-1] + 1e-12
                improvement = (cost - new_cost) / max(cost, _TINY)
                cost = new_cost
                cost_history.append(cost)
                damping = max(damping / 10.0, 1e-12)
                accepted = True
                iterations += 1
                break
            damping *= 10.0
        if not accepted or improvement < relative_tolerance:
            break

    out_landmarks = dict(landmarks)
    for k, i in enumerate(lm_order):
        out_landmarks[int(i)] = points[k].copy()
    if terms is not None:
        result_norms[sel] = terms[2]
    return StaticSolveResult(
        poses=[Pose(rot[k], tr[k]) for k in range(n_frames)],
        landmarks=out_landmarks,
        cost_history=cost_history,
        residual_norms=result_norms,
        iterations=iterations,
    )


def marginalize_frame(
    prior: InformationPrior | None,
    frame_ids,
    poses,
    marg_frame_id: int,
    marg_landmarks: dict[int, np.ndarray],
    observations,
    cam: StereoIntrinsics,
    *,
    pixel_sigma: float = 1.0,
    huber_delta: float = 2.4,
    depth_min: float = 0.1,
    regularization: float = 1e-9,
) -> InformationPrior | None:
    """Fold one frame and its dying landmarks into the information prior.

    ``observations`` carries every remaining factor touching the listed
    landmarks, from any window frame, as ``(frame_index, landmark_id,
    pixels)``.  The system is linearized at the given states, which become
    the prior's new reference; robust weights are evaluated there once.
    """
    frame_ids = list(frame_ids)
    poses = list(poses)
    f_idx, lm_ids, z = observations
    f_idx = np.asarray(f_idx, dtype=int)
    lm_ids = np.asarray(lm_ids)
    z = np.asarray(z, dtype=float)
    if prior is None and len(f_idx) == 0:
        return None

    lm_order = [int(i) for i in sorted(marg_landmarks)]
    lm_index = {i: k for k, i in enumerate(lm_order)}
    n_frames, n_lm = len(frame_ids), len(lm_order)
    dim = 6 * n_frames + 3 * n_lm
    lam = np.zeros((dim, dim))
    b = np.zeros(dim)

    if len(f_idx):
        rot, tr = _stack_poses(poses)
        points = np.stack([np.asarray(marg_landmarks[i], dtype=float) for i in lm_order])
        l_idx = np.array([lm_index[int(i)] for i in lm_ids], dtype=int)
        y = np.einsum("nji,nj->ni", rot[f_idx], points[l_idx] - tr[f_idx])
        ok = y[:, 2] > depth_min
        y, f_sel, l_sel, z_sel = y[ok], f_idx[ok], l_idx[ok], z[ok]
        zhat = _stereo_pixels(y, cam)
        e_vec = zhat - z_sel
        e = np.linalg.norm(e_vec, axis=1) / pixel_sigma
        w = huber_weights(e, huber_delta) / pixel_sigma**2
        jpi = projection_jacobians(y, cam)
        a_blk = np.empty((len(y), 3, 6))
        a_blk[:, :, :3] = -jpi
        a_blk[:, :, 3:] = np.einsum("nij,njk->nik", jpi, skew_stack(y))
        b_blk = np.einsum("nij,nkj->nik", jpi, rot[f_sel])
        jac = np.zeros((len(y), 3, dim))
        rows = np.arange(len(y))
        for c in range(6):
            jac[rows, :, 6 * f_sel + c] = a_blk[:, :, c]
        for c in range(3):
            jac[rows, :, 6 * n_frames + 3 * l_sel + c] = b_blk[:, :, c]
        lam += np.einsum("nri,n,nrj->ij", jac, w, jac)
        b -= np.einsum("nri,n,nr->i", jac, w, e_vec)

    if prior is not None:
        id_pos = {fid: k for k, fid in enumerate(frame_ids)}
        try:
            anchor = [id_pos[fid] for fid in prior.frame_ids]
        except KeyError as exc:
            raise ValueError(f"prior frame {exc} missing from the window") from exc
        rebased = prior.rebased(
            {fid: poses[id_pos[fid]] for fid in prior.frame_ids}
        )
        rows = np.concatenate([6 * a + np.arange(6) for a in anchor]).astype(int)
        lam[np.ix_(rows, rows)] += rebased.information
        b[rows] += rebased.beta

    eliminate = np.zeros(dim, dtype=bool)
    marg_pos = frame_ids.index(marg_frame_id)
    eliminate[6 * marg_pos : 6 * marg_pos + 6] = True
    eliminate[6 * n_frames :] = True
    h_red, b_red = schur_complement(lam, b, eliminate, regularization)

    retained = [
        (fid, pose) for fid, pose in zip(frame_ids, poses) if fid != marg_frame_id
    ]
    if not retained:
        return None
    return InformationPrior(
        frame_ids=[fid for fid, _ in retained],
        x_star=[Pose(p.rotation.copy(), p.translation.copy()) for _, p in retained],
        information=_clamped_psd(h_red),
        beta=b_red,
    )


# ---------------------------------------------------------------------------
# cluster optimization


@dataclass
class ClusterSolveResult:
    poses: list[Pose]
    velocities: np.ndarray
    body_points: dict[int, np.ndarray]
    cost_history: list[float]
    iterations: int


def optimize_cluster(
    poses,
    velocities: np.ndarray,
    timestamps,
    camera_poses,
    body_points: dict[int, np.ndarray],
    observations,
    cam: StereoIntrinsics,
    *,
    wnoa_q=0.01,
    pixel_sigma: float = 1.0,
    huber_delta: float = 2.4,
    rotation_rate_penalty: float = 0.0,
    max_iterations: int = 10,
    relative_tolerance: float = 1e-6,
    damping_init: float = 1e-4,
    depth_min: float = 0.1,
) -> ClusterSolveResult:
    """Per-cluster pose/velocity/point refinement over the recent track.

    The per-frame state is ``[rho, phi, v]``; the smooth-motion factors chain
    ``(translation, velocity)`` between consecutive frames, so rotations are
    driven by reprojection only.  Rotations of frames where the cluster has
    no valid observation are held fixed (they would be unobservable).  The
    earliest observed frame's pose is held too: body points and per-frame
    poses share a common-frame gauge that the observations cannot resolve, so
    that frame anchors the body frame at its current estimate.  Camera poses
    are read, never written.  Raises :class:`RankDeficient` when the reduced
    system is singular, e.g. fewer than two observed frames.
    """
    poses = list(poses)
    velocities = np.asarray(velocities, dtype=float).copy()
    timestamps = list(timestamps)
    n_frames = len(poses)
    if n_frames != len(timestamps) or n_frames != len(camera_poses):
        raise ValueError("frame-aligned inputs disagree in length")
    q = np.asarray(wnoa_q, dtype=float)
    if q.ndim == 0:
        q = float(q) * np.eye(3)

    f_idx, lm_ids, z = observations
    f_idx = np.asarray(f_idx, dtype=int)
    lm_ids = np.asarray(lm_ids)
    z = np.asarray(z, dtype=float)
    lm_order = np.unique(lm_ids) if len(lm_ids) else np.zeros(0, dtype=int)
    lm_index = {int(i): k for k, i in enumerate(lm_order)}
    l_idx = np.array([lm_index[int(i)] for i in lm_ids], dtype=int)
    n_lm = len(lm_order)
    points = (
        np.stack([np.asarray(body_points[int(i)], dtype=float) for i in lm_order])
        if n_lm
        else np.zeros((0, 3))
    )
    cam_rot, cam_tr = _stack_poses(camera_poses)

    factors = []
    for k in range(n_frames - 1):
        transition, q_inv = wnoa_factor(timestamps[k + 1] - timestamps[k], q)
        factors.append((k, transition, q_inv))
    transitions = (
        np.stack([t for _, t, _ in factors])
        if factors
        else np.zeros((0, 6, 6))
    )
    q_invs = (
        np.stack([qi for _, _, qi in factors])
        if factors
        else np.zeros((0, 6, 6))
    )

    block = 9
    free = np.ones(block * n_frames, dtype=bool)
    obs_per_frame = np.bincount(f_idx, minlength=n_frames)
    if rotation_rate_penalty <= 0.0:
        for k in range(n_frames):
            if obs_per_frame[k] == 0:
                free[block * k + 3 : block * k + 6] = False
    observed = np.nonzero(obs_per_frame > 0)[0]
    if len(observed):
        anchor = int(observed[0])
        free[block * anchor : block * anchor + 6] = False

    inv_sigma_sq = 1.0 / pixel_sigma**2

    def evaluate(rot, tr, cur_vel, cur_points):
        world = (
            np.einsum("nij,nj->ni", rot[f_idx], cur_points[l_idx]) + tr[f_idx]
        )
        y = np.einsum("nji,nj->ni", cam_rot[f_idx], world - cam_tr[f_idx])
        if len(y) and not (y[:, 2] > depth_min).all():
            return np.inf, None
        zhat = _stereo_pixels(y, cam) if len(y) else np.zeros((0, 3))
        e_vec = zhat - z
        e = np.linalg.norm(e_vec, axis=1) / pixel_sigma
        cost = float(huber_cost(e, huber_delta).sum())
        s = np.concatenate([tr, cur_vel], axis=1)
        if factors:
            r = s[1:] - np.einsum("fij,fj->fi", transitions, s[:-1])
            cost += float(np.einsum("fi,fij,fj->", r, q_invs, r))
        if rotation_rate_penalty > 0.0:
            for k in range(n_frames - 1):
                phi = so3_log(rot[k].T @ rot[k + 1])
                cost += rotation_rate_penalty * float(phi @ phi)
        return cost, (y, e_vec, e, s)

    rot, tr = _stack_poses(poses)
    cost, terms = evaluate(rot, tr, velocities, points)
    if not np.isfinite(cost):
        raise ValueError("initial states are invalid (point behind a camera)")
    cost_history = [cost]
    schur = _LandmarkSchur(l_idx, n_lm)
    damping = damping_init
    probed = False
    iterations = 0
    improvement = np.inf

    for _ in range(max_iterations):
        y, e_vec, e, s = terms
        jpi = projection_jacobians(y, cam) if len(y) else np.zeros((0, 3, 3))
        jm = jpi @ np.matmul(cam_rot[f_idx].transpose(0, 2, 1), rot[f_idx])
        a_blk = np.zeros((len(y), 3, block))
        a_blk[:, :, :3] = jm
        a_blk[:, :, 3:6] = -(jm @ skew_stack(points[l_idx]))
        b_blk = jm
        w = huber_weights(e, huber_delta) * inv_sigma_sq

        dim = block * n_frames
        lam_cc = np.zeros((dim, dim))
        b_c = np.zeros(dim)
        h_ll = np.zeros((n_lm, 3, 3))
        b_l = np.zeros((n_lm, 3))
        couplings = np.zeros((len(y), block, 3))
        lam4 = lam_cc.reshape(n_frames, block, n_frames, block)
        if len(y):
            at = a_blk.transpose(0, 2, 1)
            wa = w[:, None, None] * a_blk
            wb = w[:, None, None] * b_blk
            we = w[:, None] * e_vec
            hpp = _accumulate_blocks(f_idx, at @ wa, n_frames)
            bp = _accumulate_blocks(
                f_idx, -np.einsum("nij,ni->nj", a_blk, we), n_frames
            )
            rng = np.arange(n_frames)
            lam4[rng, :, rng, :] = hpp
            b_c = bp.reshape(-1)
            h_ll = _accumulate_blocks(
                l_idx, b_blk.transpose(0, 2, 1) @ wb, n_lm
            )
            b_l = _accumulate_blocks(
                l_idx, -np.einsum("nij,ni->nj", b_blk, we), n_lm
            )
            couplings = at @ wb

        # smooth-motion factors couple [rho, v] of adjacent frames; the
        # translation increment maps through the current rotation
        if factors:
            r = s[1:] - np.einsum("fij,fj->fi", transitions, s[:-1])
            d = np.zeros((n_frames, 6, block))
            d[:, :3, :3] = rot
            d[:, 3:, 6:] = np.eye(3)
            j_k = -np.matmul(transitions, d[:-1])
            j_k1 = d[1:]
            q_jk = np.matmul(q_invs, j_k)
            q_jk1 = np.matmul(q_invs, j_k1)
            jkt = j_k.transpose(0, 2, 1)
            diag_k = jkt @ q_jk
            diag_k1 = j_k1.transpose(0, 2, 1) @ q_jk1
            cross = jkt @ q_jk1
            q_r = np.einsum("fij,fj->fi", q_invs, r)
            rhs_k = np.einsum("fji,fj->fi", j_k, q_r)
            rhs_k1 = np.einsum("fji,fj->fi", j_k1, q_r)
            idx = np.arange(n_frames - 1)
            lam4[idx, :, idx, :] += diag_k
            lam4[idx + 1, :, idx + 1, :] += diag_k1
            lam4[idx, :, idx + 1, :] += cross
            lam4[idx + 1, :, idx, :] += cross.transpose(0, 2, 1)
            bc2 = b_c.reshape(n_frames, block)
            bc2[:-1] -= rhs_k
            bc2[1:] -= rhs_k1

        if rotation_rate_penalty > 0.0:
            for k in range(n_frames - 1):
                phi = so3_log(rot[k].T @ rot[k + 1])
                w_r = rotation_rate_penalty
                r0, r1 = block * k + 3, block * (k + 1) + 3
                for d in range(3):
                    lam_cc[r0 + d, r0 + d] += w_r
                    lam_cc[r1 + d, r1 + d] += w_r
                    lam_cc[r0 + d, r1 + d] -= w_r
                    lam_cc[r1 + d, r0 + d] -= w_r
                b_c[r0 : r0 + 3] += w_r * phi
                b_c[r1 : r1 + 3] -= w_r * phi

        w_mat = schur.coupling_matrix(couplings, f_idx, block, dim)
        if not probed:
            _probe_reduced_rank(lam_cc, b_c, h_ll, b_l, w_mat, schur.counts, free)
            probed = True

        accepted = False
        while damping <= _DAMPING_CAP:
            try:
                frame_delta, lm_delta = _reduce_and_solve(
                    lam_cc, b_c, h_ll, b_l, w_mat, block, free, damping
                )
            except np.linalg.LinAlgError:
                damping *= 10.0
                continue
            new_rot, new_tr = compose_increment_arrays(
                rot, tr, frame_delta[:, :6]
            )
            new_vel = velocities + frame_delta[:, 6:]
            new_points = points + lm_delta
            new_cost, new_terms = evaluate(new_rot, new_tr, new_vel, new_points)
            if new_cost <= cost:
                rot, tr = new_rot, new_tr
                velocities, points = new_vel, new_points
                terms = new_terms
                improvement = (cost - new_cost) / max(cost, _TINY)
                cost = new_cost
                cost_history.append(cost)
                damping = max(damping / 10.0, 1e-12)
                accepted = True
                iterations += 1
                break
            damping *= 10.0
        if not accepted or improvement < relative_tolerance:
            break

    out_points = dict(body_points)
    for k, i in enumerate(lm_order):
        out_points[int(i)] = points[k].copy()
    return ClusterSolveResult(
        poses=[Pose(rot[k], tr[k]) for k in range(n_frames)],
        velocities=velocities,
        body_points=out_points,
        cost_history=cost_history,
        iterations=iterations,
    )


# ---------------------------------------------------------------------------
# initialization helpers


def init_cluster_pose(points: np.ndarray) -> Pose:
    """Pose guess for a fresh cluster from its landmark cloud.

    Translation is the centroid; rotation columns are the principal axes in
    descending variance order, sign-fixed so the determinant is +1 and each
    of the first two axes points toward non-negative world x (tie-break y,
    then z).  Raises :class:`DegenerateCloud` when fewer than 4 points are
    given or two principal variances coincide within 1e-9.
    """
    points = np.asarray(points, dtype=float)
    if points.ndim != 2 or points.shape[0] < 4:
        raise DegenerateCloud("need at least 4 points")
    center = points.mean(axis=0)
    centered = points - center
    cov = centered.T @ centered / len(points)
    variances, axes = np.linalg.eigh(cov)
    order = np.argsort(variances)[::-1]
    variances, axes = variances[order], axes[:, order]
    if variances[0] - variances[1] <= 1e-9 or variances[1] - variances[2] <= 1e-9:
        raise DegenerateCloud(f"ambiguous principal axes, variances {variances}")

    def fix_sign(axis):
        for component in axis:
            if abs(component) > 1e-12:
                return axis if component > 0.0 else -axis
        return axis

    first = fix_sign(axes[:, 0])
    second = fix_sign(axes[:, 1])
    rotation = np.column_stack([first, second, np.cross(first, second)])
    return Pose(rotation, center)


def triangulate_landmark(
    z,
    camera_pose: Pose,
    cam: StereoIntrinsics,
    pixel_sigma: float,
    disparity_min: float = 1e-3,
) -> tuple[np.ndarray, np.ndarray]:
    """World position and covariance of a newly observed stereo feature.

    Propagates isotropic pixel noise through the back-projection and rotates
    the covariance into the world frame.  DegenerateDisparity passes through
    for the caller to skip the feature.
    """
    y = back_project(z, cam, disparity_min)
    position = camera_pose.apply(y)
    cov_cam = propagate_measurement_noise(
        z, pixel_sigma**2 * np.eye(3), cam, disparity_min
    )
    return position, transform_covariance(camera_pose.rotation, cov_cam)
