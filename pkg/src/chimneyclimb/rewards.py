"""Reward suite for the climbing task: 16 weighted terms plus the shaping kernel.

Terms are computed unweighted; the weighted total is accumulated in a fixed
row order so it is bit-reproducible. Out-of-plane terms (center, yaw, collar
angles) take their inputs from fields that are zero for planar states.
"""

from dataclasses import dataclass, field

import numpy as np

TERM_ORDER = (
    "tracking_velocity",
    "collision",
    "climb_high",
    "termination",
    "orientation",
    "rated_torques",
    "dof_acc",
    "dof_vel",
    "dof_pos_limits",
    "dof_vel_limits",
    "torque_limits",
    "center",
    "yaw",
    "collar_angles",
    "low_foot",
    "base_height",
)

DEFAULT_WEIGHTS = {
    "tracking_velocity": 3.0,
    "collision": -1.0,
    "climb_high": 5.0,
    "termination": -500.0,
    "orientation": -10.0,
    "rated_torques": -3e-2,
    "dof_acc": -1e-6,
    "dof_vel": -3e-4,
    "dof_pos_limits": -10.0,
    "dof_vel_limits": -0.1,
    "torque_limits": -1e-3,
    "center": -0.1,
    "yaw": -1.0,
    "collar_angles": -1.0,
    "low_foot": 0.05,
    "base_height": 0.4,
}

CONTACT_FORCE_THRESHOLD = 0.1  # N, collision-counting threshold
CLIMB_HEIGHT = 3.0  # m
TERMINATION_GZ = 0.2
FOOT_HEIGHT_REF = 0.2  # m, low-foot log reference
FOOT_HEIGHT_FLOOR = 0.01  # m, log guard
BASE_HEIGHT_PIVOT = 0.6  # m


class NonFiniteInput(Exception):
    """Reward inputs contain NaN or inf."""


class EmptyTrajectory(Exception):
    """Tracking score requested for an empty trajectory."""


def f_kernel(x, sigma, linear_exponent=False):
    """Shaping kernel exp(-x^2/sigma) - 0.6 x^2.

    `linear_exponent` switches the exponent to -x/sigma for sensitivity
    studies; the default is the literal published form.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    x = np.asarray(x, dtype=float)
    expo = -x / sigma if linear_exponent else -(x**2) / sigma
    out = np.exp(expo) - 0.6 * x**2
    return float(out) if out.ndim == 0 else out


@dataclass
class RewardInputs:
    """State quantities consumed by the reward table.

    Vectors follow the planar model: 5 actuated joints (waist, front hip,
    front knee, back hip, back knee); per-leg fields carry four entries with
    merged pairs duplicated; out-of-plane fields are zero on planar states.

    Every field may carry a leading batch dimension (vector fields shaped
    (B, k), scalar fields (B,)); compute_rewards then returns batched terms.
    """

    base_vel: np.ndarray  # (3,) m/s, world frame
    v_ref: float
    contact_forces_penalized: np.ndarray  # (6,) N magnitudes, link set P
    p_z: float
    p_y: float
    gravity_dir: np.ndarray  # (3,) unit, base frame
    yaw: float
    tau: np.ndarray  # (5,)
    tau_rate: np.ndarray  # (5,)
    tau_max: np.ndarray  # (5,)
    theta: np.ndarray  # (5,)
    theta_min: np.ndarray
    theta_max: np.ndarray
    theta_dot: np.ndarray
    theta_dot_min: np.ndarray
    theta_dot_max: np.ndarray
    theta_ddot: np.ndarray
    collar_angles: np.ndarray  # (4,)
    foot_heights: np.ndarray  # (4,) m

    def validate(self):
        for name in (
            "base_vel",
            "contact_forces_penalized",
            "gravity_dir",
            "tau",
            "theta",
            "theta_dot",
            "theta_ddot",
            "collar_angles",
            "foot_heights",
            "v_ref",
            "p_z",
            "p_y",
            "yaw",
        ):
            if not np.all(np.isfinite(getattr(self, name))):
                raise NonFiniteInput(name)


@dataclass
class RewardBreakdown:
    """Unweighted per-term values plus the weighted total."""

    tracking_velocity: float
    collision: float
    climb_high: float
    termination: float
    orientation: float
    rated_torques: float
    dof_acc: float
    dof_vel: float
    dof_pos_limits: float
    dof_vel_limits: float
    torque_limits: float
    center: float
    yaw: float
    collar_angles: float
    low_foot: float
    base_height: float
    weighted_total: float = 0.0

    def terms(self):
        return {name: getattr(self, name) for name in TERM_ORDER}

    @staticmethod
    def csv_header():
        return ",".join(TERM_ORDER) + ",weighted_total"

    def csv_row(self):
        vals = [getattr(self, name) for name in TERM_ORDER]
        return ",".join(f"{v:.9g}" for v in vals) + f",{self.weighted_total:.9g}"


def _scalarize(v):
    v = np.asarray(v, dtype=float)
    return float(v) if v.ndim == 0 else v


def _clip_residual_l1(v, lo, hi):
    return _scalarize(np.sum(np.abs(v - np.clip(v, lo, hi)), axis=-1))


def compute_rewards(
    inputs: RewardInputs,
    weights: dict | None = None,
    kernel_linear_exponent: bool = False,
) -> RewardBreakdown:
    """Evaluate every reward row and the weighted total."""
    inputs.validate()
    w = dict(DEFAULT_WEIGHTS)
    if weights:
        w.update(weights)

    base_vel = np.asarray(inputs.base_vel, dtype=float)
    g = np.asarray(inputs.gravity_dir, dtype=float)
    p_z = np.asarray(inputs.p_z, dtype=float)
    vel_err = (base_vel[..., 2] - inputs.v_ref) ** 2 + base_vel[..., 0] ** 2

    terms = {
        "tracking_velocity": _scalarize(
            f_kernel(vel_err, 0.01, kernel_linear_exponent)
        ),
        "collision": _scalarize(
            np.sum(
                np.asarray(inputs.contact_forces_penalized)
                > CONTACT_FORCE_THRESHOLD,
                axis=-1,
                dtype=float,
            )
        ),
        "climb_high": _scalarize((p_z > CLIMB_HEIGHT).astype(float)),
        "termination": _scalarize((g[..., 2] > TERMINATION_GZ).astype(float)),
        "orientation": _scalarize(g[..., 0] ** 2 + g[..., 1] ** 2),
        "rated_torques": _scalarize(
            np.sum(np.abs(inputs.tau) / inputs.tau_rate, axis=-1)
        ),
        "dof_acc": _scalarize(np.sum(np.asarray(inputs.theta_ddot) ** 2, axis=-1)),
        "dof_vel": _scalarize(np.sum(np.asarray(inputs.theta_dot) ** 2, axis=-1)),
        "dof_pos_limits": _clip_residual_l1(
            inputs.theta, 0.8 * np.asarray(inputs.theta_min), 0.8 * np.asarray(inputs.theta_max)
        ),
        "dof_vel_limits": _clip_residual_l1(
            inputs.theta_dot,
            0.6 * np.asarray(inputs.theta_dot_min),
            0.6 * np.asarray(inputs.theta_dot_max),
        ),
        "torque_limits": _clip_residual_l1(
            inputs.tau, -0.8 * np.asarray(inputs.tau_max), 0.8 * np.asarray(inputs.tau_max)
        ),
        "center": _scalarize(np.asarray(inputs.p_y, dtype=float) ** 2),
        "yaw": _scalarize(np.asarray(inputs.yaw, dtype=float) ** 2),
        "collar_angles": _scalarize(
            np.sum(np.abs(inputs.collar_angles) ** 2, axis=-1)
        ),
        "low_foot": _scalarize(
            np.sum(
                np.log(
                    np.maximum(inputs.foot_heights, FOOT_HEIGHT_FLOOR)
                    / FOOT_HEIGHT_REF
                ),
                axis=-1,
            )
        ),
        "base_height": _scalarize(
            (p_z - BASE_HEIGHT_PIVOT) + 9.0 * np.minimum(p_z - BASE_HEIGHT_PIVOT, 0.0)
        ),
    }

    total = 0.0
    for name in TERM_ORDER:
        total = total + w[name] * terms[name]
    return RewardBreakdown(weighted_total=total, **terms)


def tracking_score(trajectory, kernel_linear_exponent=False) -> float:
    """Mean shaping-kernel value over (vz, vx, v_ref) velocity samples."""
    traj = np.atleast_2d(np.asarray(trajectory, dtype=float))
    if traj.size == 0:
        raise EmptyTrajectory("tracking score needs at least one sample")
    vz, vx, vref = traj[:, 0], traj[:, 1], traj[:, 2]
    err = (vz - vref) ** 2 + vx**2
    return float(np.mean(f_kernel(err, 0.01, kernel_linear_exponent)))
