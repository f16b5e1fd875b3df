"""Serial-chain kinematics: forward kinematics over DH rows, the geometric
Jacobian, damped-least-squares inverse kinematics, and feasibility tagging
(joint limits / singularities) for pose sequences.

All joints are revolute. A chain is a list of DH rows (a, alpha, d,
theta_offset); joint i contributes a rotation about the z axis of frame i-1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Pose, matrix_to_quat, quat_conjugate, quat_multiply, quat_to_rotvec

DEFAULT_DAMPING = 0.05
DEFAULT_TOL = 1e-4
DEFAULT_MAX_ITER = 200
DEFAULT_SINGULARITY_MIN = 1e-4
DEFAULT_LIMIT_MARGIN = 1e-3

TAG_OK = "OK"
TAG_NO_SOLUTION = "IK_NO_SOLUTION"
TAG_LIMIT = "IK_LIMIT"
TAG_SINGULAR = "IK_SINGULAR"


class DimensionMismatch(ValueError):
    pass


@dataclass(frozen=True)
class DhRow:
    """One modified-standard DH row: link length a [m], twist alpha [rad],
    offset d [m], and a constant joint-angle offset [rad]."""

    a: float
    alpha: float
    d: float
    theta_offset: float = 0.0


@dataclass(frozen=True)
class KinematicChain:
    links: tuple[DhRow, ...]
    joint_limits: tuple[tuple[float, float], ...]
    names: tuple[str, ...]

    def __post_init__(self):
        if len(self.links) < 1:
            raise ValueError("chain needs at least one link")
        if len(self.joint_limits) != len(self.links) or len(self.names) != len(self.links):
            raise ValueError("links, joint_limits and names must have equal length")
        for row in self.links:
            for v in (row.a, row.alpha, row.d, row.theta_offset):
                if not np.isfinite(v):
                    raise ValueError("DH parameters must be finite")
        for lo, hi in self.joint_limits:
            if not lo < hi:
                raise ValueError("joint limits require lo < hi")

    @property
    def n_joints(self) -> int:
        return len(self.links)

    def limits_lo(self) -> np.ndarray:
        return np.array([lo for lo, _ in self.joint_limits])

    def limits_hi(self) -> np.ndarray:
        return np.array([hi for _, hi in self.joint_limits])

    def to_json_obj(self) -> dict:
        return {
            "names": list(self.names),
            "dh": [
                {"a": r.a, "alpha": r.alpha, "d": r.d, "theta_offset": r.theta_offset}
                for r in self.links
            ],
            "joint_limits": [[lo, hi] for lo, hi in self.joint_limits],
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "KinematicChain":
        links = tuple(
            DhRow(r["a"], r["alpha"], r["d"], r.get("theta_offset", 0.0)) for r in obj["dh"]
        )
        limits = tuple((float(lo), float(hi)) for lo, hi in obj["joint_limits"])
        return cls(links=links, joint_limits=limits, names=tuple(obj["names"]))


def save_chain(chain: KinematicChain, path: str | Path) -> None:
    Path(path).write_text(json.dumps(chain.to_json_obj(), indent=2) + "\n")


def load_chain(path: str | Path) -> KinematicChain:
    return KinematicChain.from_json_obj(json.loads(Path(path).read_text()))


def two_link_planar(a1: float = 1.0, a2: float = 1.0,
                    limits: tuple[tuple[float, float], ...] | None = None) -> KinematicChain:
    """Planar elbow chain in the xy plane; the stock test fixture."""
    if limits is None:
        limits = ((-np.pi, np.pi), (-np.pi, np.pi))
    return KinematicChain(
        links=(DhRow(a=a1, alpha=0.0, d=0.0), DhRow(a=a2, alpha=0.0, d=0.0)),
        joint_limits=limits,
        names=("shoulder", "elbow"),
    )


def six_dof_example() -> KinematicChain:
    """Generic 6-DoF articulated-arm chain used for smoke and property tests."""
    rows = (
        DhRow(a=0.0, alpha=-np.pi / 2, d=0.34),
        DhRow(a=0.30, alpha=0.0, d=0.0),
        DhRow(a=0.05, alpha=-np.pi / 2, d=0.0),
        DhRow(a=0.0, alpha=np.pi / 2, d=0.35),
        DhRow(a=0.0, alpha=-np.pi / 2, d=0.0),
        DhRow(a=0.0, alpha=0.0, d=0.12),
    )
    limits = tuple((-2.9, 2.9) for _ in rows)
    names = tuple(f"j{i + 1}" for i in range(6))
    return KinematicChain(links=rows, joint_limits=limits, names=names)


@dataclass(frozen=True)
class IkParams:
    damping: float = DEFAULT_DAMPING
    tol: float = DEFAULT_TOL
    max_iter: int = DEFAULT_MAX_ITER
    position_only: bool = False


@dataclass(frozen=True)
class IkResult:
    q: np.ndarray
    converged: bool
    iterations: int
    residual: float


def _dh_transform(row: DhRow, q: float) -> np.ndarray:
    th = row.theta_offset + q
    ct, st = np.cos(th), np.sin(th)
    ca, sa = np.cos(row.alpha), np.sin(row.alpha)
    return np.array(
        [
            [ct, -st * ca, st * sa, row.a * ct],
            [st, ct * ca, -ct * sa, row.a * st],
            [0.0, sa, ca, row.d],
            [0.0, 0.0, 0.0, 1.0],
        ]
    )


def _check_q(chain: KinematicChain, q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float).reshape(-1)
    if q.shape[0] != chain.n_joints:
        raise DimensionMismatch(
            f"joint vector has {q.shape[0]} entries, chain has {chain.n_joints} joints"
        )
    return q


def _frames(chain: KinematicChain, q: np.ndarray) -> list[np.ndarray]:
    """Cumulative transforms T_0..T_n (base frame first)."""
    frames = [np.eye(4)]
    t = np.eye(4)
    for row, qi in zip(chain.links, q):
        t = t @ _dh_transform(row, qi)
        frames.append(t)
    return frames


def forward_kinematics(chain: KinematicChain, q: np.ndarray) -> Pose:
    """End-effector pose as the product of the chain's DH transforms."""
    q = _check_q(chain, q)
    t = _frames(chain, q)[-1]
    return Pose(t[:3, 3].copy(), matrix_to_quat(t[:3, :3]))


def geometric_jacobian(chain: KinematicChain, q: np.ndarray) -> np.ndarray:
    """6 x n geometric Jacobian; column i is [z_i x (p_e - p_i); z_i] for
    revolute joint i, with z_i and p_i taken from the frame the joint spins in."""
    q = _check_q(chain, q)
    frames = _frames(chain, q)
    p_e = frames[-1][:3, 3]
    jac = np.zeros((6, chain.n_joints))
    for i in range(chain.n_joints):
        z = frames[i][:3, 2]
        p = frames[i][:3, 3]
        jac[:3, i] = np.cross(z, p_e - p)
        jac[3:, i] = z
    return jac


def manipulability(chain: KinematicChain, q: np.ndarray) -> float:
    """Product of the singular values of the translational Jacobian block
    (equals sqrt(det(J J^T)) for chains with >= 3 joints); 0 at singularities."""
    jac = geometric_jacobian(chain, q)[:3, :]
    s = np.linalg.svd(jac, compute_uv=False)
    w = float(np.prod(s[: min(3, chain.n_joints)]))
    return max(w, 0.0)


def pose_error(target: Pose, current: Pose, position_only: bool = False) -> np.ndarray:
    """Task-space error: [position difference; rotation-vector of the relative
    quaternion], or just the position block in position-only mode."""
    e_pos = target.position - current.position
    if position_only:
        return e_pos
    q_err = quat_multiply(target.orientation, quat_conjugate(current.orientation))
    return np.concatenate([e_pos, quat_to_rotvec(q_err)])


def solve_ik_dls(
    chain: KinematicChain,
    q0: np.ndarray,
    target: Pose,
    params: IkParams | None = None,
) -> IkResult:
    """Damped-least-squares IK: iterate dq = J^T (J J^T + lambda^2 I)^-1 e
    with backtracking so the error norm never increases across accepted steps.

    Unreachable targets return the best-effort clamped q with converged=False;
    the result is always within joint limits.
    """
    params = params or IkParams()
    q = _check_q(chain, q0)
    lo, hi = chain.limits_lo(), chain.limits_hi()
    if np.any(q < lo) or np.any(q > hi):
        raise ValueError("q0 outside joint limits")

    def err(qv: np.ndarray) -> np.ndarray:
        return pose_error(target, forward_kinematics(chain, qv), params.position_only)

    e = err(q)
    e_norm = float(np.linalg.norm(e))
    iterations = 0
    lam2 = params.damping**2
    m = e.shape[0]
    while e_norm >= params.tol and iterations < params.max_iter:
        jac = geometric_jacobian(chain, q)
        if params.position_only:
            jac = jac[:3, :]
        if not np.all(np.isfinite(jac)):
            raise FloatingPointError("non-finite Jacobian during IK iteration")
        dq = jac.T @ np.linalg.solve(jac @ jac.T + lam2 * np.eye(m), e)
        accepted = False
        step = 1.0
        for _ in range(10):
            q_cand = np.clip(q + step * dq, lo, hi)
            e_cand = err(q_cand)
            e_cand_norm = float(np.linalg.norm(e_cand))
            if e_cand_norm <= e_norm:
                q, e, e_norm = q_cand, e_cand, e_cand_norm
                accepted = True
                break
            step *= 0.5
        iterations += 1
        if not accepted:
            break  # stalled against limits or the reachable-set boundary
        if not np.isfinite(e_norm):
            raise FloatingPointError("non-finite error norm during IK iteration")
    return IkResult(q=q, converged=e_norm < params.tol, iterations=iterations, residual=e_norm)


def check_feasibility(
    chain: KinematicChain,
    pose_sequence: list[Pose],
    q_seed: np.ndarray,
    params: IkParams | None = None,
    singularity_min: float = DEFAULT_SINGULARITY_MIN,
    limit_margin: float = DEFAULT_LIMIT_MARGIN,
) -> list[list[str]]:
    """Tag each pose of a trajectory by solving IK warm-started from the
    previous solution. Tags stack; a pose with no findings gets ["OK"]."""
    if not pose_sequence:
        raise ValueError("pose sequence must be nonempty")
    lo, hi = chain.limits_lo(), chain.limits_hi()
    q = np.asarray(q_seed, dtype=float)
    tags_per_pose: list[list[str]] = []
    for pose in pose_sequence:
        result = solve_ik_dls(chain, q, pose, params)
        q = result.q
        tags: list[str] = []
        if not result.converged:
            tags.append(TAG_NO_SOLUTION)
        if np.any(q - lo <= limit_margin) or np.any(hi - q <= limit_margin):
            tags.append(TAG_LIMIT)
        if manipulability(chain, q) < singularity_min:
            tags.append(TAG_SINGULAR)
        tags_per_pose.append(tags if tags else [TAG_OK])
    return tags_per_pose
