"""Double-track frame window.

Every incoming frame joins the temporal track, a contiguous run of the most
recent frames.  When the temporal track overflows, its oldest frame either
gets promoted to the tail of the spatial track (when it adds viewpoint
diversity: far from the reference spatial frame, or sharing few static
landmarks with it) or is discarded.  When the spatial track overflows in
turn, its oldest frame must be folded into the marginalization prior by the
caller; the window reports it in the push result.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True, eq=False)
class FrameEntry:
    """Bookkeeping snapshot of one frame tracked by the window."""

    frame_id: int
    timestamp: float
    position: np.ndarray                 # camera position in the world frame
    static_landmarks: frozenset[int]     # ids observed in this frame


@dataclass
class PushResult:
    """What a push did beyond appending: at most one eviction, at most one
    marginalization request."""

    evicted: FrameEntry | None = None
    promoted: bool = False
    marginalized: FrameEntry | None = None


def live_clusters(
    newest_frame_id: int, last_seen: dict[int, int], horizon: int
) -> set[int]:
    """Cluster ids with a member matched within the last ``horizon`` frames.

    ``last_seen`` maps cluster id to the frame id of its most recent member
    match.  A cluster seen in the newest frame is at distance zero; one seen
    exactly ``horizon`` frames ago has aged out.
    """
    return {
        q for q, seen in last_seen.items() if newest_frame_id - seen < horizon
    }


def covisibility(a: frozenset[int], b: frozenset[int]) -> float:
    """Shared landmark fraction relative to the smaller frame.

    Empty sets share nothing: the ratio is 0, which reads as "no common
    view" and therefore favors promotion.
    """
    smaller = min(len(a), len(b))
    if smaller == 0:
        return 0.0
    return len(a & b) / smaller


@dataclass
class WindowState:
    """The two frame tracks plus their admission rules."""

    temporal_capacity: int
    spatial_capacity: int
    promote_distance: float
    covisibility_ratio: float
    promote_reference: str = "newest"    # which spatial frame anchors the test
    temporal: list[FrameEntry] = field(default_factory=list)
    spatial: list[FrameEntry] = field(default_factory=list)
    prior: object | None = None          # marginalization prior, owned upstream

    @classmethod
    def from_config(cls, config) -> "WindowState":
        return cls(
            temporal_capacity=config.temporal_frames,
            spatial_capacity=config.spatial_frames,
            promote_distance=config.promote_distance,
            covisibility_ratio=config.covisibility_ratio,
            promote_reference=config.promote_reference,
        )

    def frames(self) -> list[FrameEntry]:
        """All tracked frames, oldest first (spatial precedes temporal)."""
        return [*self.spatial, *self.temporal]

    def push_frame(self, frame: FrameEntry) -> PushResult:
        previous = self.frames()
        if previous and frame.frame_id <= previous[-1].frame_id:
            raise ValueError(
                f"frame ids must increase: got {frame.frame_id} after "
                f"{previous[-1].frame_id}"
            )
        self.temporal.append(frame)
        result = PushResult()
        if len(self.temporal) <= self.temporal_capacity:
            return result
        result.evicted = self.temporal.pop(0)
        if self._should_promote(result.evicted):
            result.promoted = True
            self.spatial.append(result.evicted)
            if len(self.spatial) > self.spatial_capacity:
                result.marginalized = self.spatial.pop(0)
        return result

    def _should_promote(self, evicted: FrameEntry) -> bool:
        if not self.spatial:
            return True
        reference = (
            self.spatial[-1] if self.promote_reference == "newest" else self.spatial[0]
        )
        distance = float(np.linalg.norm(evicted.position - reference.position))
        if distance > self.promote_distance:
            return True
        shared = covisibility(evicted.static_landmarks, reference.static_landmarks)
        return shared < self.covisibility_ratio

    def assert_invariants(self) -> None:
        assert len(self.temporal) <= self.temporal_capacity
        assert len(self.spatial) <= self.spatial_capacity
        for track in (self.temporal, self.spatial):
            ids = [f.frame_id for f in track]
            assert ids == sorted(ids) and len(set(ids)) == len(ids)
        if self.spatial and self.temporal:
            assert self.spatial[-1].frame_id < self.temporal[0].frame_id
        # the temporal track is a contiguous run of pushed frames: every gap
        # in its ids would mean a frame skipped the temporal stage
        if len(self.temporal) >= 2:
            ids = [f.frame_id for f in self.temporal]
            assert all(b > a for a, b in zip(ids, ids[1:]))
