"""Data-quality verification for recorded episodes.

Per-frame anomaly tagging (feature starvation, velocity jumps, acceleration
spikes, kinematic infeasibility), an episode-level accept/reject verdict,
gripper encoder quantization, and integer-exact retiming.
"""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Set, Tuple

import numpy as np

from .geometry import Pose
from .kinematics import IkParams, KinematicChain, TAG_OK, check_feasibility

TAG_SLAM_LOW_FEATURES = "SLAM_LOW_FEATURES"
TAG_VEL_JUMP = "VEL_JUMP"
TAG_ACC_SPIKE = "ACC_SPIKE"

EPISODE_KINDS = ("demo", "correction", "rollout")

# Episode-level gate: reject when more than this fraction of frames is tagged.
REJECT_FRACTION = 0.05

# Inter-frame spacing tolerance relative to the nominal period.
SPACING_TOLERANCE = 0.20


class StructuralError(ValueError):
    """Episode is malformed (not a data-quality issue)."""


@dataclass
class Frame:
    t_ns: int
    gripper_width: float = 0.0
    feature_count: int = 0
    pose: Optional[Pose] = None
    obs: Optional[np.ndarray] = None
    action: Optional[np.ndarray] = None
    tags: Set[str] = field(default_factory=set)
    valid: bool = True


@dataclass
class Episode:
    episode_id: str
    task: str
    device_id: str
    rate_hz: float
    t0_ns: int
    kind: str
    layout_id: int
    frames: List[Frame]

    def __post_init__(self):
        if self.kind not in EPISODE_KINDS:
            raise StructuralError(f"unknown episode kind {self.kind!r}")
        if not self.frames:
            raise StructuralError("episode has no frames")


@dataclass(frozen=True)
class ValidatorConfig:
    min_feature_count: int = 30
    max_velocity: float = 1.5
    max_acceleration: float = 15.0
    chain: Optional[KinematicChain] = None

    def __post_init__(self):
        if self.min_feature_count <= 0 or self.max_velocity <= 0 or self.max_acceleration <= 0:
            raise ValueError("validator thresholds must be positive")


@dataclass(frozen=True)
class ValidationReport:
    episode_id: str
    frame_tags: Tuple[Tuple[str, ...], ...]
    invalid_count: int
    verdict: str  # "accept" | "reject"


def check_structure(ep: Episode) -> None:
    """Raise StructuralError if the episode breaks its own invariants."""
    if not ep.frames:
        raise StructuralError("episode has no frames")
    ts = [f.t_ns for f in ep.frames]
    if any(b <= a for a, b in zip(ts, ts[1:])):
        raise StructuralError("timestamps not strictly increasing")
    if ep.rate_hz <= 0:
        raise StructuralError("rate_hz must be positive")
    nominal = 1e9 / ep.rate_hz
    for a, b in zip(ts, ts[1:]):
        if abs((b - a) - nominal) > SPACING_TOLERANCE * nominal:
            raise StructuralError(
                f"inter-frame spacing {b - a} ns deviates from nominal {nominal:.0f} ns"
            )


def validate_episode(ep: Episode, cfg: ValidatorConfig) -> ValidationReport:
    """Tag each frame and produce an episode verdict. Does not mutate `ep`.

    Velocity and acceleration use backward differences on pose positions
    scaled by the nominal rate, so the jump between frames i-1 and i tags
    frame i, and the induced velocity change tags frames i and i+1.
    Frames without poses skip the motion and kinematic checks.
    """
    check_structure(ep)
    n = len(ep.frames)
    tags: List[Set[str]] = [set() for _ in range(n)]
    rate = ep.rate_hz

    for i, f in enumerate(ep.frames):
        if f.feature_count < cfg.min_feature_count:
            tags[i].add(TAG_SLAM_LOW_FEATURES)

    positions = [f.pose.position if f.pose is not None else None for f in ep.frames]
    velocities: List[Optional[np.ndarray]] = [None] * n
    for i in range(1, n):
        if positions[i] is None or positions[i - 1] is None:
            continue
        velocities[i] = (positions[i] - positions[i - 1]) * rate
        if np.linalg.norm(positions[i] - positions[i - 1]) * rate > cfg.max_velocity:
            tags[i].add(TAG_VEL_JUMP)
    for i in range(2, n):
        if velocities[i] is None or velocities[i - 1] is None:
            continue
        if np.linalg.norm(velocities[i] - velocities[i - 1]) * rate > cfg.max_acceleration:
            tags[i].add(TAG_ACC_SPIKE)

    if cfg.chain is not None:
        posed = [(i, ep.frames[i].pose) for i in range(n) if ep.frames[i].pose is not None]
        if posed:
            lo, hi = cfg.chain.limits_lo(), cfg.chain.limits_hi()
            q_seed = np.clip(np.zeros(cfg.chain.n_joints), lo, hi)
            kin = check_feasibility(
                cfg.chain, [p for _, p in posed], q_seed, IkParams(position_only=True)
            )
            for (i, _), frame_tags in zip(posed, kin):
                for t in frame_tags:
                    if t != TAG_OK:
                        tags[i].add(t)

    invalid = sum(1 for t in tags if t)
    verdict = "reject" if invalid > REJECT_FRACTION * n else "accept"
    return ValidationReport(
        episode_id=ep.episode_id,
        frame_tags=tuple(tuple(sorted(t)) for t in tags),
        invalid_count=invalid,
        verdict=verdict,
    )


def apply_report(ep: Episode, report: ValidationReport) -> None:
    """Stamp a report's tags onto the episode frames in place."""
    if len(report.frame_tags) != len(ep.frames):
        raise ValueError("report does not match episode length")
    for frame, t in zip(ep.frames, report.frame_tags):
        frame.tags = set(t)
        frame.valid = not t


def retime_episode(
    ep: Episode, slowdown_factor: int, velocity_indices: Sequence[int] = ()
) -> Episode:
    """Stretch an episode's timeline by an integer factor.

    Timestamps map as t' = t0 + factor*(t - t0) in exact integer nanoseconds;
    the nominal rate divides by the factor. Action components listed in
    `velocity_indices` are per-unit-time and divide by the factor as well;
    displacement-style actions are invariant and should not be listed.
    """
    if slowdown_factor < 1 or int(slowdown_factor) != slowdown_factor:
        raise ValueError("slowdown_factor must be an integer >= 1")
    k = int(slowdown_factor)
    t0 = ep.t0_ns
    frames = []
    for f in ep.frames:
        action = f.action
        if action is not None and velocity_indices:
            action = action.astype(float).copy()
            for i in velocity_indices:
                action[i] /= k
        frames.append(
            Frame(
                t_ns=t0 + k * (f.t_ns - t0),
                gripper_width=f.gripper_width,
                feature_count=f.feature_count,
                pose=f.pose,
                obs=f.obs,
                action=action,
                tags=set(f.tags),
                valid=f.valid,
            )
        )
    return Episode(
        episode_id=ep.episode_id,
        task=ep.task,
        device_id=ep.device_id,
        rate_hz=ep.rate_hz / k,
        t0_ns=t0,
        kind=ep.kind,
        layout_id=ep.layout_id,
        frames=frames,
    )


def gripper_quantum(encoder_res_deg: float, angle_range_deg: float, stroke_m: float) -> float:
    """Width resolution of a linear angle-to-width gripper mapping."""
    if encoder_res_deg <= 0 or angle_range_deg <= 0 or stroke_m <= 0:
        raise ValueError("encoder parameters must be positive")
    return stroke_m * (encoder_res_deg / angle_range_deg)


def quantize_gripper(
    width_stream: Sequence[float],
    encoder_res_deg: float = 0.088,
    angle_range_deg: float = 60.0,
    stroke_m: float = 0.085,
) -> List[float]:
    """Snap each width sample to the nearest encoder-representable value."""
    dw = gripper_quantum(encoder_res_deg, angle_range_deg, stroke_m)
    out = []
    for w in width_stream:
        if not 0.0 <= w <= stroke_m:
            raise ValueError(f"gripper width {w} outside [0, {stroke_m}]")
        out.append(float(np.rint(w / dw) * dw))
    return out
