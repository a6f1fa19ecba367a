"""Engine configuration and its flat key-value file format.

The on-disk format is one ``key = value`` pair per line with ``#`` comments.
Files must carry every field; unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

ABLATION_CHOICES = ("2d", "2d3d", "full")
PROMOTE_CHOICES = ("newest", "oldest")


@dataclass(frozen=True)
class EngineConfig:
    """All tunables of the tracking engine, flat on purpose."""

    # feature and box association
    gate_threshold: float = 4.0          # squared Mahalanobis gate in pixel space
    neighborhood_px: float = 40.0        # candidate search radius around predictions
    similarity_floor: float = 0.6        # minimum normalized descriptor similarity
    entropy_gate: float = 1.0            # box association entropy bound (natural log)
    pixel_sigma: float = 1.0             # assumed isotropic pixel noise, pixels

    # cluster assignment field
    crf_alpha: float = 5.0               # pairwise smoothing strength
    crf_iterations: int = 10
    eta_box: float = 0.95                # in-box probability mass of the 2D term
    outlier_exponent: float = 4.0        # spatial floor exp(-outlier_exponent)
    pairwise_bandwidth: float = 1.0      # meters, kernel exp(-d^2 / bandwidth^2)
    spatial_sigma_floor: float = 1.0     # meters, added to triangulation noise in
                                         # the spatial term so tight covariances do
                                         # not dwarf object-scale distances
    min_new_cluster_size: int = 8
    weight_max: int = 100                # assignment weight cap
    ablation: str = "full"               # 2d | 2d3d | full
    motion_offsets: tuple[int, ...] = (-5, 0)
    motion_warmup_frames: int = 5        # frames before the motion term activates

    # sliding window
    temporal_frames: int = 15
    spatial_frames: int = 5
    live_window: int = 15                # frames a cluster stays live unobserved
    promote_distance: float = 0.3        # meters
    covisibility_ratio: float = 0.6
    promote_reference: str = "newest"    # spatial frame compared on eviction

    # optimization
    huber_delta: float = 2.4
    damping_init: float = 1e-4
    max_iterations: int = 10
    relative_tolerance: float = 1e-6
    wnoa_q: float = 0.01                 # white-noise-on-acceleration spectral power
    rotation_rate_penalty: float = 0.0   # optional cluster rotation damping, off
    prior_regularization: float = 1e-9

    # pipeline
    depth_min: float = 0.1
    disparity_min: float = 1e-3
    min_static_matches: int = 15         # below this the frame is declared lost
    min_cluster_frames: int = 2          # observations needed before optimizing
    min_cluster_landmarks: int = 4
    threads: int = 0                     # worker pool size, 0 = auto

    def __post_init__(self):
        if self.ablation not in ABLATION_CHOICES:
            raise ValueError(f"ablation must be one of {ABLATION_CHOICES}")
        if self.promote_reference not in PROMOTE_CHOICES:
            raise ValueError(f"promote_reference must be one of {PROMOTE_CHOICES}")
        if self.temporal_frames < 1 or self.spatial_frames < 1:
            raise ValueError("window sizes must be positive")
        if self.pixel_sigma <= 0.0 or self.wnoa_q <= 0.0:
            raise ValueError("noise parameters must be positive")
        if len(self.motion_offsets) < 1 or any(o > 0 for o in self.motion_offsets):
            raise ValueError("motion_offsets must be non-positive frame offsets")

    def with_ablation(self, ablation: str) -> "EngineConfig":
        return dataclasses.replace(self, ablation=ablation)


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(field: dataclasses.Field, raw: str):
    if field.type in ("float", float):
        return float(raw)
    if field.type in ("int", int):
        return int(raw)
    if field.type.startswith("tuple"):
        return tuple(int(part) for part in raw.split(",") if part.strip() != "")
    return raw


def save_config(config: EngineConfig, path) -> None:
    lines = ["# engine configuration"]
    for field in fields(config):
        lines.append(f"{field.name} = {_format_value(getattr(config, field.name))}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_config(path) -> EngineConfig:
    """Parse a complete config file; missing or unknown keys are errors."""
    known = {field.name: field for field in fields(EngineConfig)}
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in known:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
        if key in values:
            raise ValueError(f"{path}:{lineno}: duplicate config key {key!r}")
        try:
            values[key] = _parse_value(known[key], raw)
        except ValueError as exc:
            raise ValueError(f"{path}:{lineno}: bad value for {key!r}: {exc}") from exc
    missing = sorted(set(known) - set(values))
    if missing:
        raise ValueError(f"{path}: missing config keys: {', '.join(missing)}")
    return EngineConfig(**values)
