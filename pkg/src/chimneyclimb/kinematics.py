"""Forward/inverse kinematics and Jacobian-transpose statics for a 3-DOF serial leg.

The leg is a collar(roll) -> hip(pitch) -> knee(pitch) chain. All quantities are
expressed in the leg-base frame: x across the gap, y lateral, z up. Angles at
zero leave the leg hanging straight down.
"""

from dataclasses import dataclass

import numpy as np


class Unreachable(Exception):
    """Target foot position lies outside the leg workspace."""


@dataclass(frozen=True)
class LegChain:
    """Geometry and actuation limits of one 3-DOF leg (collar, hip, knee)."""

    collar_offset: float = 0.1
    thigh_length: float = 0.25
    calf_length: float = 0.25
    collar_angle_fixed: float = 0.0
    joint_limits: tuple = ((-0.8, 0.8), (-2.8, 2.8), (-2.7, -0.05))
    torque_limits: tuple = (25.0, 25.0, 25.0)
    rated_torques: tuple = (10.0, 10.0, 10.0)
    knee_sign: float = -1.0  # inward-bending branch

    def __post_init__(self):
        if self.thigh_length <= 0 or self.calf_length <= 0:
            raise ValueError("link lengths must be positive")
        if self.collar_offset < 0:
            raise ValueError("collar offset must be non-negative")
        for lo, hi in self.joint_limits:
            if not lo < hi:
                raise ValueError("joint limit min must be below max")
        if any(t <= 0 for t in self.torque_limits):
            raise ValueError("torque limits must be positive")

    @property
    def reach(self):
        """Maximum foot distance from the leg base."""
        return np.hypot(self.thigh_length + self.calf_length, self.collar_offset)


@dataclass(frozen=True)
class FootForce:
    """Force acting on the foot, N, in the leg-base frame."""

    vector: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=float)
        if v.shape != (3,) or not np.all(np.isfinite(v)):
            raise ValueError("foot force must be a finite 3-vector")
        object.__setattr__(self, "vector", v)


@dataclass(frozen=True)
class JointTorques:
    collar: float
    hip: float
    knee: float

    def as_array(self):
        return np.array([self.collar, self.hip, self.knee])


def _roll_matrix(alpha):
    c, s = np.cos(alpha), np.sin(alpha)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _planar_foot(chain, hip, knee):
    """In-plane foot coordinates (forward, down) of the 2-link sub-chain."""
    l1, l2 = chain.thigh_length, chain.calf_length
    x = l1 * np.sin(hip) + l2 * np.sin(hip + knee)
    z = -l1 * np.cos(hip) - l2 * np.cos(hip + knee)
    return x, z


def fk_foot(chain: LegChain, angles) -> np.ndarray:
    """Foot position for joint angles (collar, hip, knee), leg-base frame."""
    collar, hip, knee = angles
    px, pz = _planar_foot(chain, hip, knee)
    local = np.array([px, chain.collar_offset, pz])
    return _roll_matrix(chain.collar_angle_fixed + collar) @ local


def foot_jacobian(chain: LegChain, angles) -> np.ndarray:
    """Translational Jacobian d(foot position)/d(collar, hip, knee), 3x3."""
    collar, hip, knee = angles
    l1, l2 = chain.thigh_length, chain.calf_length
    px, pz = _planar_foot(chain, hip, knee)
    roll = chain.collar_angle_fixed + collar
    rot = _roll_matrix(roll)

    # Collar column: derivative of the roll rotation applied to the local point.
    c, s = np.cos(roll), np.sin(roll)
    d_rot = np.array([[0.0, 0.0, 0.0], [0.0, -s, -c], [0.0, c, -s]])
    col_collar = d_rot @ np.array([px, chain.collar_offset, pz])

    dx_hip = l1 * np.cos(hip) + l2 * np.cos(hip + knee)
    dz_hip = l1 * np.sin(hip) + l2 * np.sin(hip + knee)
    col_hip = rot @ np.array([dx_hip, 0.0, dz_hip])
    col_knee = rot @ np.array([l2 * np.cos(hip + knee), 0.0, l2 * np.sin(hip + knee)])

    return np.column_stack([col_collar, col_hip, col_knee])


def joint_torques(chain: LegChain, angles, f: FootForce) -> JointTorques:
    """Static joint torques reacting the foot force: tau = -J^T f."""
    tau = -foot_jacobian(chain, angles).T @ f.vector
    return JointTorques(collar=tau[0], hip=tau[1], knee=tau[2])


def ik_foot(chain: LegChain, target) -> tuple:
    """Joint angles (collar, hip, knee) placing the foot at `target`.

    Uses the inward-bending knee branch. Raises Unreachable when the target
    lies outside the workspace annulus.
    """
    t = _roll_matrix(chain.collar_angle_fixed).T @ np.asarray(target, dtype=float)
    d = chain.collar_offset
    l1, l2 = chain.thigh_length, chain.calf_length

    # Collar angle rotates (d, z_plane) in the y-z plane onto (t_y, t_z).
    r_yz_sq = t[1] ** 2 + t[2] ** 2
    if r_yz_sq < d**2 - 1e-12:
        raise Unreachable("target inside the collar-offset cylinder")
    z_plane = -np.sqrt(max(r_yz_sq - d**2, 0.0))

    r_sq = t[0] ** 2 + z_plane**2
    r = np.sqrt(r_sq)
    if r > l1 + l2 + 1e-12 or r < abs(l1 - l2) - 1e-12:
        raise Unreachable("target outside the 2-link annulus")

    cos_knee = np.clip((r_sq - l1**2 - l2**2) / (2.0 * l1 * l2), -1.0, 1.0)
    knee = chain.knee_sign * np.arccos(cos_knee)
    beta = np.arctan2(t[0], -z_plane)
    hip = beta - np.arctan2(l2 * np.sin(knee), l1 + l2 * np.cos(knee))

    collar = np.arctan2(t[2], t[1]) - np.arctan2(z_plane, d) if (d > 0 or r_yz_sq > 0) else 0.0
    if d == 0.0 and r_yz_sq <= 1e-24:
        collar = 0.0
    # Wrap into (-pi, pi] for a canonical branch.
    collar = (collar + np.pi) % (2.0 * np.pi) - np.pi
    return (float(collar), float(hip), float(knee))
