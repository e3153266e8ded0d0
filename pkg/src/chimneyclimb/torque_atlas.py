"""Static bracing-torque analysis over candidate foot positions.

Builds a grid of the maximum required joint torque for pressing a foot against
a vertical wall while supporting an even share of the robot weight through
friction, extracts the per-wall-distance minimum-torque curve, and checks the
result against motor limits.
"""

from dataclasses import dataclass, field

import numpy as np

from .kinematics import FootForce, LegChain, Unreachable, foot_jacobian, ik_foot


class DegenerateNormal(Exception):
    """Wall normal is not a unit vector."""


class EmptyGrid(Exception):
    """Requested sweep grid contains no nodes."""


class NoMinimum(Exception):
    """No wall-distance slice contains a reachable foot position."""


@dataclass(frozen=True)
class BracingParams:
    robot_mass: float = 20.0
    legs_sharing_load: int = 4
    friction_mu: float = 0.8
    gravity: float = 9.81
    foot_radius: float = 0.02  # ball foot; wall gap = foot-center x + radius

    def __post_init__(self):
        if self.robot_mass <= 0:
            raise ValueError("robot mass must be positive")
        if self.friction_mu <= 0.0:
            raise ValueError("friction coefficient must be positive")
        if self.legs_sharing_load not in (1, 2, 3, 4):
            raise ValueError("legs_sharing_load must be 1..4")


@dataclass(frozen=True)
class GridSpec:
    """Foot-position sweep ranges (relative to the hip) and resolution."""

    x_range: tuple = (0.18, 0.48)
    z_range: tuple = (-0.2, 0.2)
    resolution: float = 0.01

    def axes(self):
        x0, x1 = self.x_range
        z0, z1 = self.z_range
        nx = int(round((x1 - x0) / self.resolution)) + 1
        nz = int(round((z1 - z0) / self.resolution)) + 1
        if nx < 2 or nz < 2 or x1 <= x0 or z1 <= z0:
            raise EmptyGrid("grid needs at least 2 nodes per axis")
        return np.linspace(x0, x1, nx), np.linspace(z0, z1, nz)


@dataclass
class TorqueMap:
    grid_x: np.ndarray  # foot-center x relative to hip, shape (nx,)
    grid_z: np.ndarray  # foot heights relative to hip, shape (nz,)
    tau_max: np.ndarray  # shape (nz, nx), +inf marks unreachable nodes
    wall_distance: float  # largest swept hip-to-wall gap
    foot_radius: float = 0.02

    def wall_distances(self):
        """Hip-to-wall gap per slice: foot-center x plus the foot radius."""
        return self.grid_x + self.foot_radius


@dataclass
class CurveC:
    """Per-slice minimum-torque foot positions, ordered by wall distance."""

    points: list  # [(x, z), ...]
    tau_along: np.ndarray


@dataclass
class MotorReport:
    curve_min_torque: float
    safety_factor: float
    leg_required: float
    waist_required: float
    leg_limit: float
    waist_limit: float
    leg_feasible: bool
    waist_feasible: bool

    def summary(self):
        lines = [
            f"curve-C minimum torque: {self.curve_min_torque:.3f} Nm",
            f"safety factor: {self.safety_factor:.2f}",
            f"leg joint: required {self.leg_required:.3f} Nm vs limit "
            f"{self.leg_limit:.1f} Nm -> {'feasible' if self.leg_feasible else 'INFEASIBLE'}",
            f"waist joint: required {self.waist_required:.3f} Nm vs limit "
            f"{self.waist_limit:.1f} Nm -> {'feasible' if self.waist_feasible else 'INFEASIBLE'}",
        ]
        return "\n".join(lines)


def bracing_force(params: BracingParams, wall_normal) -> FootForce:
    """Reaction force on one foot while bracing against a vertical wall.

    The vertical (gravity-opposing) component carries an even share of the
    robot weight; the normal component is the minimum consistent with the
    friction cone, i.e. tangential / mu.
    """
    n = np.asarray(wall_normal, dtype=float)
    if abs(np.linalg.norm(n) - 1.0) > 1e-9:
        raise DegenerateNormal("wall normal must be a unit vector")
    if abs(n[2]) > 1e-9:
        raise DegenerateNormal("walls are vertical: normal must have zero z component")
    tangential = params.robot_mass * params.gravity / params.legs_sharing_load
    normal = tangential / params.friction_mu
    return FootForce(vector=normal * n + np.array([0.0, 0.0, tangential]))


def max_required_torque(foot_pos, chain: LegChain, params: BracingParams) -> float:
    """Max absolute joint torque for bracing at `foot_pos` (hip frame).

    Foot positions whose IK solution violates the chain's joint limits are
    treated as unreachable: the robot cannot brace there.
    """
    p = np.asarray(foot_pos, dtype=float)
    # Free-space normal points away from the wall the foot presses on.
    normal = np.array([-np.sign(p[0]) if p[0] != 0 else -1.0, 0.0, 0.0])
    f = bracing_force(params, normal)
    angles = ik_foot(chain, p)
    for a, (lo, hi) in zip(angles, chain.joint_limits):
        if not lo - 1e-9 <= a <= hi + 1e-9:
            raise Unreachable("IK solution violates joint limits")
    tau = -foot_jacobian(chain, angles).T @ f.vector
    return float(np.max(np.abs(tau)))


def build_atlas(chain: LegChain, params: BracingParams, grid: GridSpec = GridSpec()) -> TorqueMap:
    """Evaluate the bracing torque over the foot-position grid."""
    xs, zs = grid.axes()
    tau = np.full((zs.size, xs.size), np.inf)
    for j, x in enumerate(xs):
        for i, z in enumerate(zs):
            try:
                tau[i, j] = max_required_torque((x, 0.0, z), chain, params)
            except Unreachable:
                pass
    return TorqueMap(
        grid_x=xs,
        grid_z=zs,
        tau_max=tau,
        wall_distance=float(xs[-1] + params.foot_radius),
        foot_radius=params.foot_radius,
    )


def extract_curve_c(tmap: TorqueMap) -> CurveC:
    """Per wall-distance slice, the foot position minimizing the max torque.

    Fully unreachable slices are skipped; ties break toward smaller |z|.
    """
    if tmap.grid_x.size < 3:
        raise ValueError("torque map needs at least 3 wall-distance slices")
    points, taus = [], []
    for j, x in enumerate(tmap.grid_x):
        col = tmap.tau_max[:, j]
        finite = np.isfinite(col)
        if not finite.any():
            continue
        best = np.min(col[finite])
        candidates = np.flatnonzero(finite & (col <= best))
        i = candidates[np.argmin(np.abs(tmap.grid_z[candidates]))]
        points.append((float(x), float(tmap.grid_z[i])))
        taus.append(float(col[i]))
    if not points:
        raise NoMinimum("every slice of the torque map is unreachable")
    return CurveC(points=points, tau_along=np.array(taus))


def assess_motor(
    tmap: TorqueMap,
    safety_factor: float,
    leg_limit: float = 25.0,
    waist_limit: float = 48.0,
) -> MotorReport:
    """Compare scaled curve-C torque against leg and waist motor limits.

    The waist reacts both legs of a pair, so its requirement is twice the
    single-leg requirement.
    """
    if safety_factor < 1.0:
        raise ValueError("safety factor must be >= 1")
    curve = extract_curve_c(tmap)
    base = float(np.min(curve.tau_along))
    leg_req = base * safety_factor
    waist_req = 2.0 * leg_req
    return MotorReport(
        curve_min_torque=base,
        safety_factor=safety_factor,
        leg_required=leg_req,
        waist_required=waist_req,
        leg_limit=leg_limit,
        waist_limit=waist_limit,
        leg_feasible=leg_req <= leg_limit,
        waist_feasible=waist_req <= waist_limit,
    )


def export_atlas_csv(tmap: TorqueMap, path, meta=""):
    """Write the atlas as row-major `x,z,tau_max` CSV with a unit comment."""
    with open(path, "w") as fh:
        fh.write(f"# units: x m, z m, tau_max N*m; inf = unreachable {meta}\n")
        fh.write("x,z,tau_max\n")
        for i, z in enumerate(tmap.grid_z):
            for j, x in enumerate(tmap.grid_x):
                fh.write(f"{x:.6f},{z:.6f},{tmap.tau_max[i, j]:.9f}\n")


def export_curve_csv(curve: CurveC, path, meta=""):
    with open(path, "w") as fh:
        fh.write(f"# units: x m, z m, tau N*m {meta}\n")
        fh.write("x,z,tau\n")
        for (x, z), t in zip(curve.points, curve.tau_along):
            fh.write(f"{x:.6f},{z:.6f},{t:.9f}\n")
