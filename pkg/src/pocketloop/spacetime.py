"""Temporal and spatial alignment across capture devices.

Clock-offset estimation over a jittery request/response transport (minimum
round-trip sample selection, integer nanosecond arithmetic) and rigid
world-frame registration from index-aligned landmark sets.
"""

from dataclasses import dataclass
from typing import Callable, List, Sequence

import numpy as np

from .geometry import (
    Pose,
    matrix_to_quat,
    quat_identity,
    quat_conjugate,
    quat_multiply,
    quat_normalize,
    quat_rotate,
    quat_to_matrix,
)

DEFAULT_SYNC_ROUNDS = 32


@dataclass(frozen=True)
class ClockSample:
    """One request/response exchange: client send, server receive,
    server send, client receive, all nanoseconds in each side's own clock."""

    t1: int
    t2: int
    t3: int
    t4: int

    def __post_init__(self):
        if self.t4 < self.t1 or self.t3 < self.t2:
            raise ValueError("clock sample violates causality")

    @property
    def rtt_ns(self) -> int:
        return (self.t4 - self.t1) - (self.t3 - self.t2)

    @property
    def offset_ns(self) -> int:
        # server clock minus client clock; exact when delays are symmetric
        return ((self.t2 - self.t1) + (self.t3 - self.t4)) // 2


@dataclass(frozen=True)
class ClockEstimate:
    offset_ns: int
    rtt_ns: int
    error_bound_ns: int

    def __post_init__(self):
        if self.rtt_ns < 0:
            raise ValueError("negative round-trip time")
        if self.error_bound_ns != self.rtt_ns // 2:
            raise ValueError("error bound must be half the round-trip time")


def estimate_offset(samples: Sequence[ClockSample]) -> ClockEstimate:
    """Offset from the exchange with the smallest round-trip time."""
    if not samples:
        raise ValueError("no clock samples")
    best = min(samples, key=lambda s: s.rtt_ns)
    return ClockEstimate(
        offset_ns=best.offset_ns,
        rtt_ns=best.rtt_ns,
        error_bound_ns=best.rtt_ns // 2,
    )


def run_clock_sync(
    ping: Callable[[], ClockSample], rounds: int = DEFAULT_SYNC_ROUNDS
) -> ClockEstimate:
    """Collect `rounds` exchanges and estimate the clock offset."""
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    return estimate_offset([ping() for _ in range(rounds)])


class SimulatedClockLink:
    """Deterministic two-clock link model for sync experiments.

    The server clock leads the client clock by `true_offset_ns`. Each
    direction takes `base_delay_ns` plus uniform jitter in [0, jitter_ns).
    """

    def __init__(
        self,
        true_offset_ns: int,
        base_delay_ns: int,
        jitter_ns: int,
        rng: np.random.Generator,
        proc_ns: int = 50_000,
        gap_ns: int = 1_000_000,
    ):
        if base_delay_ns < 0 or jitter_ns < 0:
            raise ValueError("delays must be nonnegative")
        self.true_offset_ns = int(true_offset_ns)
        self.base_delay_ns = int(base_delay_ns)
        self.jitter_ns = int(jitter_ns)
        self.proc_ns = int(proc_ns)
        self.gap_ns = int(gap_ns)
        self._rng = rng
        self._now = 0

    def _delay(self) -> int:
        if self.jitter_ns == 0:
            return self.base_delay_ns
        return self.base_delay_ns + int(self._rng.integers(0, self.jitter_ns))

    def ping(self) -> ClockSample:
        up, down = self._delay(), self._delay()
        t1 = self._now
        t2 = t1 + up + self.true_offset_ns
        t3 = t2 + self.proc_ns
        t4 = t1 + up + self.proc_ns + down
        self._now = t4 + self.gap_ns
        return ClockSample(t1, t2, t3, t4)


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", quat_normalize(np.asarray(self.rotation, dtype=float)))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float))
        if self.translation.shape != (3,) or not np.all(np.isfinite(self.translation)):
            raise ValueError("translation must be a finite 3-vector")

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(quat_identity(), np.zeros(3))

    def to_json_obj(self) -> dict:
        return {"q": [float(x) for x in self.rotation], "t": [float(x) for x in self.translation]}

    @staticmethod
    def from_json_obj(obj: dict) -> "RigidTransform":
        return RigidTransform(np.array(obj["q"], dtype=float), np.array(obj["t"], dtype=float))


def merge_frames(landmarks_a: np.ndarray, landmarks_b: np.ndarray) -> RigidTransform:
    """Least-squares rigid transform mapping point set a onto point set b.

    Index-aligned correspondences; rotation from the SVD of the
    cross-covariance with the reflection branch corrected to a proper
    rotation, translation from the centroids.
    """
    a = np.asarray(landmarks_a, dtype=float)
    b = np.asarray(landmarks_b, dtype=float)
    if a.shape != b.shape or a.ndim != 2 or a.shape[1] != 3:
        raise ValueError("landmark sets must be matching n x 3 arrays")
    n = a.shape[0]
    if n < 3:
        raise ValueError("need at least 3 landmark pairs")
    ca, cb = a.mean(axis=0), b.mean(axis=0)
    a0, b0 = a - ca, b - cb
    spread = np.linalg.svd(a0, compute_uv=False)
    if spread[1] <= 1e-9 * max(spread[0], 1.0):
        raise ValueError("landmarks are collinear; rotation is not determined")
    h = a0.T @ b0
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    t = cb - rot @ ca
    return RigidTransform(matrix_to_quat(rot), t)


def apply_transform(tf: RigidTransform, pose: Pose) -> Pose:
    return Pose(
        quat_rotate(tf.rotation, pose.position) + tf.translation,
        quat_normalize(quat_multiply(tf.rotation, pose.orientation)),
    )


def apply_to_points(tf: RigidTransform, points: np.ndarray) -> np.ndarray:
    rot = quat_to_matrix(tf.rotation)
    return np.asarray(points, dtype=float) @ rot.T + tf.translation


def invert(tf: RigidTransform) -> RigidTransform:
    q_inv = quat_conjugate(tf.rotation)
    return RigidTransform(q_inv, -quat_rotate(q_inv, tf.translation))


def compose(outer: RigidTransform, inner: RigidTransform) -> RigidTransform:
    """Transform equivalent to applying `inner` first, then `outer`."""
    return RigidTransform(
        quat_normalize(quat_multiply(outer.rotation, inner.rotation)),
        quat_rotate(outer.rotation, inner.translation) + outer.translation,
    )
