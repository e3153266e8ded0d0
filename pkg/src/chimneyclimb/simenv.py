"""Planar chimney-climbing environment.

The robot is an 8-DOF planar mechanism: base (x, z, pitch), a waist pitch
joint between two body links, and one hip+knee leg pair per body half
(left/right legs merged, torque limits doubled). Mass lives in the two body
links, a thigh midpoint, and the foot of each leg pair. Actions are PD-tracked
target joint angles at 50 Hz with four 200 Hz physics substeps per control
step. Contacts use a penalty model: explicit normal spring, velocity-implicit
damping, and a Coulomb cap on viscous tangential stick forces.

Coordinate order: q = (x, z, pitch, waist, hip_f, knee_f, hip_b, knee_b).
The base origin sits at the waist joint (fixed to the front body link); the
front body extends toward +x and the back body toward -x, so the robot is
centered in the gap at x = 0. Positive front-hip angle swings the front foot
toward the +x wall and positive back-hip angle toward the -x wall.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .kinematics import LegChain
from .rewards import TERM_ORDER, RewardBreakdown, RewardInputs, compute_rewards
from .terrain import CGCLConfig, CurriculumLevel, TerrainProfile, TerrainSpec, curriculum_params

N_Q = 8
N_JOINTS = 5  # waist, hip_f, knee_f, hip_b, knee_b
GRAVITY = 9.81

# Angle combinations used by the kinematic terms, as coefficient rows over q.
# a0: front body, a1: back body, a2: front thigh, a3: front calf,
# a4: back thigh (mirrored), a5: back calf (mirrored).
_ANGLE_COEFFS = np.array(
    [
        [0, 0, 1, 0, 0, 0, 0, 0],
        [0, 0, 1, 1, 0, 0, 0, 0],
        [0, 0, 1, 0, 1, 0, 0, 0],
        [0, 0, 1, 0, 1, 1, 0, 0],
        [0, 0, 1, 1, 0, 0, -1, 0],
        [0, 0, 1, 1, 0, 0, -1, -1],
    ],
    dtype=float,
)

DONE_RUNNING = "running"
DONE_FELL = "fell"
DONE_SUCCESS = "success"
DONE_TIMEOUT = "timeout"


class NonFiniteAction(Exception):
    """Action vector contains NaN or inf."""


@dataclass(frozen=True)
class RobotModel:
    """Planar robot description; nominal totals 18 kg and 0.76 m length."""

    body_link_length: float = 0.38
    body_link_mass: float = 6.0
    thigh_point_mass: float = 2.0  # per merged leg pair
    foot_point_mass: float = 1.0
    leg: LegChain = field(default_factory=LegChain)
    foot_radius: float = 0.02
    body_radius: float = 0.10
    scapula_radius: float = 0.06
    # Joint order: waist, hip_f, knee_f, hip_b, knee_b.
    joint_lower: tuple = (-1.5, -2.8, -2.7, -2.8, -2.7)
    joint_upper: tuple = (1.5, 2.8, -0.05, 2.8, -0.05)
    torque_limits: tuple = (48.0, 50.0, 50.0, 50.0, 50.0)  # leg pairs doubled
    rated_torques: tuple = (18.0, 20.0, 20.0, 20.0, 20.0)
    joint_vel_limit: float = 20.0  # rad/s, symmetric
    # Gains are per physical motor (kp=30, kd=0.7); merged left/right leg
    # pairs act as two motors, so their gains double like their torque limits.
    pd_kp: tuple = (30.0, 60.0, 60.0, 60.0, 60.0)
    pd_kd: tuple = (0.7, 1.4, 1.4, 1.4, 1.4)
    action_margin: float = 0.05  # rad kept clear of the hard limits
    action_scale: float = 1.2  # rad of target offset per unit of action
    # Reset stance: feet planted at +-stance_x on the flat floor strip, which
    # stays clear of the junction fillet even at curriculum level 0 (r=0.3,
    # wall width 0.9 -> flat strip half-width 0.15).
    stance_x: float = 0.18

    def __post_init__(self):
        total = 2 * self.body_link_mass + 2 * (
            self.thigh_point_mass + self.foot_point_mass
        )
        if abs(total - 18.0) > 1e-9:
            raise ValueError(f"nominal total mass must be 18 kg, got {total}")
        if abs(2 * self.body_link_length - 0.76) > 1e-9:
            raise ValueError("nominal body length must be 0.76 m")

    @property
    def body_inertia(self):
        # Slender-rod inertia about the link center.
        return self.body_link_mass * self.body_link_length**2 / 12.0

    def standing_angles(self):
        """Hip/knee angles placing the front foot at (stance_x, foot_radius)
        with the base (waist) at height 0.4 m; the back leg mirrors them."""
        l1, l2 = self.leg.thigh_length, self.leg.calf_length
        rel_x = self.stance_x - self.body_link_length
        rel_z = -(0.4 - self.foot_radius)
        d2 = rel_x**2 + rel_z**2
        cos_k = np.clip((d2 - l1**2 - l2**2) / (2.0 * l1 * l2), -1.0, 1.0)
        knee = -math.acos(cos_k)
        beta = math.atan2(l2 * math.sin(-knee), l1 + l2 * cos_k)
        hip = math.atan2(rel_x, -rel_z) + beta
        return hip, knee

    def default_pose(self):
        """Joint angles of the standing reset pose (zero-action targets)."""
        hip, knee = self.standing_angles()
        return np.array([0.0, hip, knee, hip, knee])


@dataclass(frozen=True)
class SimConfig:
    dt_control: float = 0.02
    substeps: int = 8
    timeout: float = 20.0
    success_height: float = 3.0
    fall_gz: float = 0.2
    # Contact penalty model. The normal spring is integrated implicitly, so a
    # stiff k_n stays stable at the 1/400 s substep; stiffness plus substep
    # rate bound how deep fast impacts can tunnel before the spring reacts.
    contact_kn: float = 1.0e6
    contact_cn: float = 300.0
    contact_ct: float = 3000.0
    body_friction: float = 0.5
    # Penetration depth is clamped in the force law so rare deep overlaps
    # (e.g. a perturbed reset) produce bounded forces instead of blow-ups.
    pen_clamp: float = 0.01
    # Per-episode randomization.
    friction_range: tuple = (0.7, 0.95)
    mass_scale_range: tuple = (0.9, 1.1)
    vref_range: tuple = (0.0, 0.6)
    wall_width_range: tuple = (0.9, 1.1)
    # Initial-state randomization: with this probability an episode starts
    # braced between the vertical wall sections (feet pressed on both walls
    # at a sampled height) instead of standing on the floor. Off by default
    # so evaluation and the reset contract keep the floor start; training
    # configs enable it so bracing states appear in the replay distribution
    # long before the policy can reach them from the floor.
    spawn_braced_prob: float = 0.0
    spawn_z_range: tuple = (1.1, 2.6)
    # Perturbations.
    enable_perturbations: bool = True
    kick_period: float = 2.0
    kick_speed_max: float = 1.0
    wrench_period: float = 1.0
    force_max: float = 10.0
    torque_max: float = 3.0
    # Switches for physics sanity tests and ablations.
    enable_contacts: bool = True
    enable_randomization: bool = True
    lock_waist: bool = False
    fixed_wall_width: float | None = None
    fixed_r: float | None = None
    cgcl: CGCLConfig = field(default_factory=CGCLConfig)

    @property
    def dt_sub(self):
        return self.dt_control / self.substeps


@dataclass
class ActorObs:
    angular_velocity: np.ndarray  # (3,)
    gravity_dir: np.ndarray  # (3,) unit
    joint_pos: np.ndarray  # (5,)
    joint_vel: np.ndarray  # (5,)
    v_ref_z: float

    DIM = 17

    def vector(self):
        return np.concatenate(
            [
                self.angular_velocity,
                self.gravity_dir,
                self.joint_pos,
                self.joint_vel,
                [self.v_ref_z],
            ]
        )


@dataclass
class CriticObs:
    actor: ActorObs
    wall_distance: float
    wall_normal: np.ndarray  # (3,)
    joint_torques: np.ndarray  # (5,)
    base_pos: np.ndarray  # (3,)
    base_quat: np.ndarray  # (4,) w,x,y,z
    base_vel: np.ndarray  # (3,)
    angular_velocity: np.ndarray  # (3,)
    friction: np.ndarray  # (2,)
    link_masses: np.ndarray  # (6,)
    f_ext: np.ndarray  # (3,)
    tau_ext: np.ndarray  # (3,)

    DIM = 53

    def vector(self):
        return np.concatenate(
            [
                self.actor.vector(),
                [self.wall_distance],
                self.wall_normal,
                self.joint_torques,
                self.base_pos,
                self.base_quat,
                self.base_vel,
                self.angular_velocity,
                self.friction,
                self.link_masses,
                self.f_ext,
                self.tau_ext,
            ]
        )


@dataclass
class SimState:
    """Snapshot of one environment instance."""

    q: np.ndarray
    qdot: np.ndarray
    time: float
    v_ref: float
    level: CurriculumLevel
    friction: np.ndarray  # per foot (front, back)
    mass_scales: np.ndarray  # (body_f, body_b, leg_f, leg_b)
    f_ext: np.ndarray  # (2,) world force on front body
    tau_ext: float
    applied_torques: np.ndarray  # (5,)
    contact_flags: np.ndarray  # (6,) feet then body set
    contact_forces: np.ndarray  # (6, 2)
    theta_ddot: np.ndarray  # (5,)
    terrain_spec: TerrainSpec


# ---------------------------------------------------------------------------
# Vectorized kinematic frames
# ---------------------------------------------------------------------------

# (point name, [(angle index, local vector factory)])
def _point_terms(model: RobotModel):
    lb = model.body_link_length
    l1, l2 = model.leg.thigh_length, model.leg.calf_length
    fwd = (lb, 0.0)
    fwd_half = (lb / 2.0, 0.0)
    back = (-lb, 0.0)
    back_half = (-lb / 2.0, 0.0)
    thigh = (0.0, -l1)
    thigh_half = (0.0, -l1 / 2.0)
    calf = (0.0, -l2)
    return {
        "com_f": [(0, fwd_half)],
        "com_b": [(1, back_half)],
        "thigh_f": [(0, fwd), (2, thigh_half)],
        "foot_f": [(0, fwd), (2, thigh), (3, calf)],
        "thigh_b": [(1, back), (4, thigh_half)],
        "foot_b": [(1, back), (4, thigh), (5, calf)],
        "scap_f": [(0, fwd)],
        "scap_b": [(1, back)],
    }


MASS_POINTS = ("com_f", "com_b", "thigh_f", "foot_f", "thigh_b", "foot_b")
CONTACT_POINTS = ("foot_f", "foot_b", "com_f", "com_b", "scap_f", "scap_b")


class Frames:
    """Positions, Jacobians and velocity-product accelerations of key points."""

    def __init__(self, model: RobotModel, q, qdot):
        q = np.atleast_2d(q)
        qdot = np.atleast_2d(qdot)
        B = q.shape[0]
        angles = q @ _ANGLE_COEFFS.T  # (B, 6)
        rates = qdot @ _ANGLE_COEFFS.T
        ca, sa = np.cos(angles), np.sin(angles)

        self.pos = {}
        self.jac = {}
        self.bias = {}
        base = q[:, :2]
        for name, terms in _point_terms(model).items():
            pos = base.copy()
            jac = np.zeros((B, 2, N_Q))
            jac[:, 0, 0] = 1.0
            jac[:, 1, 1] = 1.0
            bias = np.zeros((B, 2))
            for k, (ux, uy) in terms:
                rx = ux * ca[:, k] - uy * sa[:, k]
                ry = ux * sa[:, k] + uy * ca[:, k]
                pos[:, 0] += rx
                pos[:, 1] += ry
                # d/d a_k of R(a) u is R(a) applied to the perpendicular of u.
                jac[:, 0, :] += np.outer(-ry, _ANGLE_COEFFS[k])
                jac[:, 1, :] += np.outer(rx, _ANGLE_COEFFS[k])
                w2 = rates[:, k] ** 2
                bias[:, 0] -= w2 * rx
                bias[:, 1] -= w2 * ry
            self.pos[name] = pos
            self.jac[name] = jac
            self.bias[name] = bias


def _point_masses(model: RobotModel, mass_scales):
    s = np.atleast_2d(mass_scales)
    return {
        "com_f": model.body_link_mass * s[:, 0],
        "com_b": model.body_link_mass * s[:, 1],
        "thigh_f": model.thigh_point_mass * s[:, 2],
        "foot_f": model.foot_point_mass * s[:, 2],
        "thigh_b": model.thigh_point_mass * s[:, 3],
        "foot_b": model.foot_point_mass * s[:, 3],
    }


def mass_matrix(model: RobotModel, frames: Frames, mass_scales):
    masses = _point_masses(model, mass_scales)
    B = next(iter(frames.pos.values())).shape[0]
    M = np.zeros((B, N_Q, N_Q))
    for name in MASS_POINTS:
        J = frames.jac[name]
        M += masses[name][:, None, None] * np.einsum("bij,bik->bjk", J, J)
    s = np.atleast_2d(mass_scales)
    inertia_f = model.body_inertia * s[:, 0]
    inertia_b = model.body_inertia * s[:, 1]
    M[:, 2, 2] += inertia_f + inertia_b
    M[:, 2, 3] += inertia_b
    M[:, 3, 2] += inertia_b
    M[:, 3, 3] += inertia_b
    return M


def gravity_bias_forces(model: RobotModel, frames: Frames, mass_scales, gravity=GRAVITY):
    """Generalized forces from gravity minus the velocity-product terms."""
    masses = _point_masses(model, mass_scales)
    B = next(iter(frames.pos.values())).shape[0]
    Q = np.zeros((B, N_Q))
    for name in MASS_POINTS:
        eff = -frames.bias[name].copy()
        eff[:, 1] -= gravity
        Q += masses[name][:, None] * np.einsum("bij,bi->bj", frames.jac[name], eff)
    return Q


def pd_torques(model: RobotModel, theta, theta_dot, targets):
    """Clamped PD torques toward target joint angles."""
    kp = np.asarray(model.pd_kp)
    kd = np.asarray(model.pd_kd)
    lim = np.asarray(model.torque_limits)
    tau = kp * (targets - theta) - kd * theta_dot
    return np.clip(tau, -lim, lim)


def action_to_targets(model: RobotModel, action):
    """Affine map from [-1, 1] actions to joint targets around the default
    pose, clipped a small margin inside the hard limits. Zero action targets
    the standing pose."""
    lo = np.asarray(model.joint_lower) + model.action_margin
    hi = np.asarray(model.joint_upper) - model.action_margin
    a = np.clip(action, -1.0, 1.0)
    return np.clip(model.default_pose() + model.action_scale * a, lo, hi)


# ---------------------------------------------------------------------------
# Fast terrain contact tables
# ---------------------------------------------------------------------------


class ContactTables:
    """Per-environment wall/floor lookup tables for the contact hot path."""

    N_Z = 1024
    SLOPE_CAP = 20.0

    def __init__(self, profiles):
        self.n = len(profiles)
        spec0 = profiles[0].spec
        self.z_grid = np.linspace(0.0, spec0.wall_height, self.N_Z)
        self.g_left = np.empty((self.n, self.N_Z))
        self.g_right = np.empty((self.n, self.N_Z))
        self.w2 = np.empty(self.n)
        self.r = np.empty(self.n)
        for i, prof in enumerate(profiles):
            self.g_left[i] = prof._surface_x(self.z_grid, "left")
            self.g_right[i] = prof._surface_x(self.z_grid, "right")
            self.w2[i] = prof.spec.wall_width / 2.0
            self.r[i] = prof.spec.junction_r
        self.dz = self.z_grid[1] - self.z_grid[0]
        self.gp_left = np.gradient(self.g_left, self.dz, axis=1)
        self.gp_right = np.gradient(self.g_right, self.dz, axis=1)

    def _wall_lookup(self, env_idx, z, table, slope):
        t = np.clip(z / self.dz, 0.0, self.N_Z - 1.001)
        i0 = t.astype(int)
        frac = t - i0
        g = table[env_idx, i0] * (1.0 - frac) + table[env_idx, i0 + 1] * frac
        gp = slope[env_idx, i0] * (1.0 - frac) + slope[env_idx, i0 + 1] * frac
        return g, np.clip(gp, -self.SLOPE_CAP, self.SLOPE_CAP)

    def _floor_height(self, env_idx, x):
        """Smooth floor+fillet height and slope as a function of |x|."""
        w2 = self.w2[env_idx]
        r = np.maximum(self.r[env_idx], 1e-9)
        ax = np.abs(x)
        u = np.clip((ax - (w2 - r)) / r, 0.0, 1.0)
        root = np.sqrt(np.maximum(1.0 - u**2, 1e-6))
        h = np.where(u > 0.0, 1.0 - root, 0.0)
        hp = np.where(u > 0.0, u / (root * r), 0.0)
        hp = np.clip(hp, 0.0, self.SLOPE_CAP) * np.sign(x)
        # Degenerate r=0: flat floor everywhere inside the gap.
        flat = self.r[env_idx] <= 1e-9
        h = np.where(flat, 0.0, h)
        hp = np.where(flat, 0.0, hp)
        return h, hp

    def contact_candidates(self, env_idx, centers, radii):
        """Deepest-candidate penetration and free-space normal per point.

        centers: (n_pts, 2); env_idx: (n_pts,) int; radii: (n_pts,).
        Returns penetration (n_pts,) and normals (n_pts, 2); non-positive
        penetration means no contact.
        """
        x, z = centers[:, 0], centers[:, 1]
        zc = np.maximum(z, 0.0)

        # Floor / fillet candidate.
        h, hp = self._floor_height(env_idx, x)
        inv = 1.0 / np.sqrt(1.0 + hp**2)
        pen_floor = (h - z) * inv + radii
        n_floor = np.stack([-hp * inv, np.ones_like(hp) * inv], axis=1)

        # Right wall candidate.
        g, gp = self._wall_lookup(env_idx, zc, self.g_right, self.gp_right)
        inv_r = 1.0 / np.sqrt(1.0 + gp**2)
        pen_right = (x - g) * inv_r + radii
        n_right = np.stack([-inv_r, gp * inv_r], axis=1)

        # Left wall candidate.
        g, gp = self._wall_lookup(env_idx, zc, self.g_left, self.gp_left)
        inv_l = 1.0 / np.sqrt(1.0 + gp**2)
        pen_left = (g - x) * inv_l + radii
        n_left = np.stack([inv_l, -gp * inv_l], axis=1)

        pens = np.stack([pen_floor, pen_right, pen_left], axis=0)
        normals = np.stack([n_floor, n_right, n_left], axis=0)
        best = np.argmax(pens, axis=0)
        idx = np.arange(x.size)
        return pens[best, idx], normals[best, idx]

    def wall_query(self, env_idx, points):
        """Distance and free-space normal of the nearest wall (floor ignored).

        Nearest-vertex search over the z-sampled wall curves, so it agrees
        with the polyline-based query up to the sampling resolution even
        around the curved junction.
        """
        x, z = points[:, 0:1], points[:, 1:2]
        gl = self.g_left[env_idx]  # (n, N_Z)
        gr = self.g_right[env_idx]
        zg = self.z_grid[None, :]
        d2_l = (x - gl) ** 2 + (z - zg) ** 2
        d2_r = (x - gr) ** 2 + (z - zg) ** 2
        il = np.argmin(d2_l, axis=1)
        ir = np.argmin(d2_r, axis=1)
        rows = np.arange(x.shape[0])
        dl = np.sqrt(d2_l[rows, il])
        dr = np.sqrt(d2_r[rows, ir])
        right_nearer = dr <= dl
        d = np.where(right_nearer, dr, dl)
        nearest = np.where(
            right_nearer[:, None],
            np.stack([gr[rows, ir], self.z_grid[ir]], axis=1),
            np.stack([gl[rows, il], self.z_grid[il]], axis=1),
        )
        delta = points - nearest
        with np.errstate(invalid="ignore", divide="ignore"):
            n = delta / np.maximum(d[:, None], 1e-12)
        degen = d < 1e-9
        if np.any(degen):
            n[degen] = np.where(points[degen, 0:1] > 0, [[-1.0, 0.0]], [[1.0, 0.0]])
        return d, n


# ---------------------------------------------------------------------------
# Observation assembly
# ---------------------------------------------------------------------------


def _gravity_dir(pitch):
    return np.array([math.sin(pitch), 0.0, -math.cos(pitch)])


def assemble_actor_obs(state: SimState) -> ActorObs:
    pitch_rate = state.qdot[2]
    return ActorObs(
        angular_velocity=np.array([0.0, pitch_rate, 0.0]),
        gravity_dir=_gravity_dir(state.q[2]),
        joint_pos=state.q[3:].copy(),
        joint_vel=state.qdot[3:].copy(),
        v_ref_z=state.v_ref,
    )


def assemble_critic_obs(state: SimState, profile: TerrainProfile, model: RobotModel = None) -> CriticObs:
    model = model or RobotModel()
    actor = assemble_actor_obs(state)
    d, n = profile.wall_query(state.q[:2])
    pitch = state.q[2]
    half = pitch / 2.0
    masses = _point_masses(model, state.mass_scales[None, :])
    link_masses = np.array([float(masses[name][0]) for name in MASS_POINTS])
    return CriticObs(
        actor=actor,
        wall_distance=d,
        wall_normal=np.array([n[0], 0.0, n[1]]),
        joint_torques=state.applied_torques.copy(),
        base_pos=np.array([state.q[0], 0.0, state.q[1]]),
        base_quat=np.array([math.cos(half), 0.0, math.sin(half), 0.0]),
        base_vel=np.array([state.qdot[0], 0.0, state.qdot[1]]),
        angular_velocity=actor.angular_velocity.copy(),
        friction=state.friction.copy(),
        link_masses=link_masses,
        f_ext=np.array([state.f_ext[0], 0.0, state.f_ext[1]]),
        tau_ext=np.array([0.0, state.tau_ext, 0.0]),
    )


def reward_inputs_from_state(state: SimState, model: RobotModel) -> RewardInputs:
    """Map one environment state onto the reward table's input fields."""
    frames = Frames(model, state.q[None, :], state.qdot[None, :])
    foot_f_z = frames.pos["foot_f"][0, 1]
    foot_b_z = frames.pos["foot_b"][0, 1]
    # Penalized link set: front body, back body, two scapula pairs (each
    # planar pair stands for a left/right pair; remaining slots stay zero).
    mags = np.linalg.norm(state.contact_forces, axis=1)
    penalized = np.array([mags[2], mags[3], mags[4], mags[5], 0.0, 0.0])
    lower = np.asarray(model.joint_lower)
    upper = np.asarray(model.joint_upper)
    return RewardInputs(
        base_vel=np.array([state.qdot[0], 0.0, state.qdot[1]]),
        v_ref=state.v_ref,
        contact_forces_penalized=penalized,
        p_z=state.q[1],
        p_y=0.0,
        gravity_dir=_gravity_dir(state.q[2]),
        yaw=0.0,
        tau=state.applied_torques.copy(),
        tau_rate=np.asarray(model.rated_torques, dtype=float),
        tau_max=np.asarray(model.torque_limits, dtype=float),
        theta=state.q[3:].copy(),
        theta_min=lower,
        theta_max=upper,
        theta_dot=state.qdot[3:].copy(),
        theta_dot_min=-np.full(N_JOINTS, model.joint_vel_limit),
        theta_dot_max=np.full(N_JOINTS, model.joint_vel_limit),
        theta_ddot=state.theta_ddot.copy(),
        collar_angles=np.zeros(4),
        foot_heights=np.array([foot_f_z, foot_f_z, foot_b_z, foot_b_z]),
    )


# ---------------------------------------------------------------------------
# Vectorized environment
# ---------------------------------------------------------------------------


class VecSimEnv:
    """N independent planar climbing environments stepped in lockstep.

    Physics for all instances is evaluated with batched numpy; each instance
    keeps its own RNG stream so trajectories only depend on (seed, index).
    """

    def __init__(self, model: RobotModel = None, config: SimConfig = None,
                 n_envs: int = 1, seed: int = 0):
        self.model = model or RobotModel()
        self.config = config or SimConfig()
        self.n_envs = n_envs
        self.seed = seed
        self.rngs = [np.random.default_rng([seed, i]) for i in range(n_envs)]
        self.levels = [curriculum_params(0, self.config.cgcl) for _ in range(n_envs)]

        self.q = np.zeros((n_envs, N_Q))
        self.qdot = np.zeros((n_envs, N_Q))
        self.time = np.zeros(n_envs)
        self.v_ref = np.zeros(n_envs)
        self.friction = np.zeros((n_envs, 2))
        self.mass_scales = np.ones((n_envs, 4))
        self.f_ext = np.zeros((n_envs, 2))
        self.tau_ext = np.zeros(n_envs)
        self.next_kick = np.zeros(n_envs)
        self.next_wrench = np.zeros(n_envs)
        self.applied_torques = np.zeros((n_envs, N_JOINTS))
        self.prev_joint_vel = np.zeros((n_envs, N_JOINTS))
        self.theta_ddot = np.zeros((n_envs, N_JOINTS))
        self.contact_flags = np.zeros((n_envs, 6), dtype=bool)
        self.contact_forces = np.zeros((n_envs, 6, 2))
        self.max_penetration = 0.0

        self.profiles = [None] * n_envs
        self._tables = None
        for i in range(n_envs):
            self._reset_env(i)
        self._rebuild_tables()

    # -- episode management -------------------------------------------------

    def set_level(self, i, level: int):
        self.levels[i] = curriculum_params(level, self.config.cgcl)

    def _reset_env(self, i):
        cfg = self.config
        rng = self.rngs[i]
        level = self.levels[i]
        r = cfg.fixed_r if cfg.fixed_r is not None else level.r_of_level
        if cfg.fixed_wall_width is not None:
            width = cfg.fixed_wall_width
        else:
            # The junction fillet narrows the gap near the floor; keep the
            # sampled width large enough that the reset stance fits between
            # the fillets. The bound coincides with the nominal range once
            # the fillet radius anneals away.
            lo = max(cfg.wall_width_range[0], 0.9 + 0.4 * r)
            width = rng.uniform(lo, max(cfg.wall_width_range[1], lo))
        r = min(r, width / 2.0)
        spec = TerrainSpec(
            wall_width=width,
            junction_r=r,
            roughness_amp=level.roughness_of_level,
            seed=int(rng.integers(0, 2**31 - 1)),
        )
        self.profiles[i] = TerrainProfile(spec)

        hip, knee = self.model.standing_angles()
        self.q[i] = [0.0, 0.4, 0.0, 0.0, hip, knee, hip, knee]
        if cfg.spawn_braced_prob > 0.0 and rng.uniform() < cfg.spawn_braced_prob:
            self.q[i] = self._braced_pose(width, rng)
        self.qdot[i] = 0.0
        self.time[i] = 0.0
        if cfg.enable_randomization:
            self.friction[i] = rng.uniform(*cfg.friction_range, size=2)
            self.mass_scales[i] = rng.uniform(*cfg.mass_scale_range, size=4)
        else:
            self.friction[i] = np.mean(cfg.friction_range)
            self.mass_scales[i] = 1.0
        self.v_ref[i] = rng.uniform(*cfg.vref_range)
        self.f_ext[i] = 0.0
        self.tau_ext[i] = 0.0
        self.next_kick[i] = cfg.kick_period
        self.next_wrench[i] = 0.0
        self.applied_torques[i] = 0.0
        self.prev_joint_vel[i] = 0.0
        self.theta_ddot[i] = 0.0
        self.contact_flags[i] = False
        self.contact_forces[i] = 0.0

    def _braced_pose(self, width, rng):
        """Body level mid-gap with both feet touching the vertical walls."""
        cfg = self.config
        model = self.model
        l1, l2 = model.leg.thigh_length, model.leg.calf_length
        z = rng.uniform(*cfg.spawn_z_range)
        drop = rng.uniform(0.15, 0.35)  # foot height below its hip
        vx = width / 2.0 - model.foot_radius - model.body_link_length
        d2 = vx * vx + drop * drop
        cos_k = np.clip((d2 - l1 * l1 - l2 * l2) / (2.0 * l1 * l2), -1.0, 1.0)
        knee = -math.acos(cos_k)
        beta = math.atan2(l2 * math.sin(-knee), l1 + l2 * cos_k)
        hip = math.atan2(vx, drop) + beta
        # By mirror symmetry the back leg uses the same angles for the
        # opposite wall.
        return [0.0, z, 0.0, 0.0, hip, knee, hip, knee]

    def _rebuild_tables(self):
        self._tables = ContactTables(self.profiles)

    def reset(self, env_indices=None):
        """Reset all (or the given) environments; returns stacked obs."""
        idx = range(self.n_envs) if env_indices is None else env_indices
        for i in idx:
            self._reset_env(i)
        self._rebuild_tables()
        return self.actor_obs(), self.critic_obs()

    def state(self, i) -> SimState:
        return SimState(
            q=self.q[i].copy(),
            qdot=self.qdot[i].copy(),
            time=float(self.time[i]),
            v_ref=float(self.v_ref[i]),
            level=self.levels[i],
            friction=self.friction[i].copy(),
            mass_scales=self.mass_scales[i].copy(),
            f_ext=self.f_ext[i].copy(),
            tau_ext=float(self.tau_ext[i]),
            applied_torques=self.applied_torques[i].copy(),
            contact_flags=self.contact_flags[i].copy(),
            contact_forces=self.contact_forces[i].copy(),
            theta_ddot=self.theta_ddot[i].copy(),
            terrain_spec=self.profiles[i].spec,
        )

    # -- observations and rewards -------------------------------------------

    def actor_obs(self):
        """Stacked ActorObs vectors, assembled without per-env round trips."""
        B = self.n_envs
        pitch = self.q[:, 2]
        out = np.zeros((B, ActorObs.DIM))
        out[:, 1] = self.qdot[:, 2]
        out[:, 3] = np.sin(pitch)
        out[:, 5] = -np.cos(pitch)
        out[:, 6:11] = self.q[:, 3:]
        out[:, 11:16] = self.qdot[:, 3:]
        out[:, 16] = self.v_ref
        return out

    def critic_obs(self):
        """Stacked CriticObs vectors (fast wall lookup via contact tables)."""
        B = self.n_envs
        d, n = self._tables.wall_query(np.arange(B), self.q[:, :2])
        masses = _point_masses(self.model, self.mass_scales)
        half = self.q[:, 2] / 2.0
        out = np.zeros((B, CriticObs.DIM))
        out[:, :ActorObs.DIM] = self.actor_obs()
        c = ActorObs.DIM
        out[:, c] = d
        out[:, c + 1] = n[:, 0]
        out[:, c + 3] = n[:, 1]
        out[:, c + 4:c + 9] = self.applied_torques
        out[:, c + 9] = self.q[:, 0]
        out[:, c + 11] = self.q[:, 1]
        out[:, c + 12] = np.cos(half)
        out[:, c + 14] = np.sin(half)
        out[:, c + 16] = self.qdot[:, 0]
        out[:, c + 18] = self.qdot[:, 1]
        out[:, c + 20] = self.qdot[:, 2]
        out[:, c + 22:c + 24] = self.friction
        for j, name in enumerate(MASS_POINTS):
            out[:, c + 24 + j] = masses[name]
        out[:, c + 30] = self.f_ext[:, 0]
        out[:, c + 32] = self.f_ext[:, 1]
        out[:, c + 34] = self.tau_ext
        return out

    def _batch_reward_inputs(self, frames: Frames) -> RewardInputs:
        """One batched RewardInputs covering all environments."""
        model = self.model
        B = self.n_envs
        foot_f_z = frames.pos["foot_f"][:, 1]
        foot_b_z = frames.pos["foot_b"][:, 1]
        mags = np.linalg.norm(self.contact_forces, axis=2)
        penalized = np.zeros((B, 6))
        penalized[:, :4] = mags[:, 2:]
        base_vel = np.zeros((B, 3))
        base_vel[:, 0] = self.qdot[:, 0]
        base_vel[:, 2] = self.qdot[:, 1]
        gravity = np.zeros((B, 3))
        gravity[:, 0] = np.sin(self.q[:, 2])
        gravity[:, 2] = -np.cos(self.q[:, 2])
        ones = np.ones((B, 1))
        lower = np.asarray(model.joint_lower) * ones
        upper = np.asarray(model.joint_upper) * ones
        vlim = np.full((B, N_JOINTS), model.joint_vel_limit)
        return RewardInputs(
            base_vel=base_vel,
            v_ref=self.v_ref.copy(),
            contact_forces_penalized=penalized,
            p_z=self.q[:, 1].copy(),
            p_y=np.zeros(B),
            gravity_dir=gravity,
            yaw=np.zeros(B),
            tau=self.applied_torques.copy(),
            tau_rate=np.asarray(model.rated_torques) * ones,
            tau_max=np.asarray(model.torque_limits) * ones,
            theta=self.q[:, 3:].copy(),
            theta_min=lower,
            theta_max=upper,
            theta_dot=self.qdot[:, 3:].copy(),
            theta_dot_min=-vlim,
            theta_dot_max=vlim,
            theta_ddot=self.theta_ddot.copy(),
            collar_angles=np.zeros((B, 4)),
            foot_heights=np.stack([foot_f_z, foot_f_z, foot_b_z, foot_b_z], axis=1),
        )

    # -- physics -------------------------------------------------------------

    def _perturb(self):
        cfg = self.config
        for i in range(self.n_envs):
            rng = self.rngs[i]
            if self.time[i] + 1e-9 >= self.next_wrench[i]:
                ang = rng.uniform(0.0, 2.0 * math.pi)
                mag = rng.uniform(0.0, cfg.force_max)
                self.f_ext[i] = mag * np.array([math.cos(ang), math.sin(ang)])
                self.tau_ext[i] = rng.uniform(-cfg.torque_max, cfg.torque_max)
                self.next_wrench[i] += cfg.wrench_period
            if self.time[i] + 1e-9 >= self.next_kick[i]:
                ang = rng.uniform(0.0, 2.0 * math.pi)
                mag = rng.uniform(0.0, cfg.kick_speed_max)
                self.qdot[i, 0] += mag * math.cos(ang)
                self.qdot[i, 1] += mag * math.sin(ang)
                self.next_kick[i] += cfg.kick_period

    def physics_substep(self, torques):
        """Advance one 1/200 s substep with given joint torques (B, 5)."""
        model, cfg = self.model, self.config
        dt = cfg.dt_sub
        frames = Frames(model, self.q, self.qdot)
        M = mass_matrix(model, frames, self.mass_scales)
        Q = gravity_bias_forces(model, frames, self.mass_scales)
        Q[:, 3:] += torques
        # Continuous external wrench on the front body link.
        Q += np.einsum("bij,bi->bj", frames.jac["com_f"], self.f_ext)
        Q[:, 2] += self.tau_ext

        contact_info = None
        if cfg.enable_contacts:
            contact_info = self._contact_assemble(frames)
            Q += contact_info["spring_Q"]
            A = M + dt * contact_info["damping"]
        else:
            A = M
        rhs = np.einsum("bij,bj->bi", M, self.qdot) + dt * Q
        v_new = np.linalg.solve(A, rhs[..., None])[..., 0]

        if contact_info is not None:
            v_new = self._contact_repair(frames, M, Q, v_new, contact_info, dt)

        self.qdot = v_new
        self.q = self.q + dt * v_new
        self._clamp_joints()

    def _contact_geometry(self, frames):
        model = self.model
        radii = np.array(
            [
                model.foot_radius,
                model.foot_radius,
                model.body_radius,
                model.body_radius,
                model.scapula_radius,
                model.scapula_radius,
            ]
        )
        centers = np.stack([frames.pos[name] for name in CONTACT_POINTS], axis=1)
        B = centers.shape[0]
        flat = centers.reshape(B * 6, 2)
        env_idx = np.repeat(np.arange(B), 6)
        pen, normal = self._tables.contact_candidates(
            env_idx, flat, np.tile(radii, B)
        )
        return pen.reshape(B, 6), normal.reshape(B, 6, 2)

    def _contact_assemble(self, frames):
        """Spring forces plus the implicit damping operator for contacts."""
        model, cfg = self.model, self.config
        B = self.n_envs
        pen, normal = self._contact_geometry(frames)
        active = pen > 0.0
        self.max_penetration = max(self.max_penetration, float(pen.max(initial=0.0)))

        jacs = np.stack([frames.jac[name] for name in CONTACT_POINTS], axis=1)  # (B,6,2,8)
        tangent = np.stack([-normal[..., 1], normal[..., 0]], axis=-1)

        spring = cfg.contact_kn * np.where(active, np.minimum(pen, cfg.pen_clamp), 0.0)
        spring_f = spring[..., None] * normal  # (B,6,2)
        spring_Q = np.einsum("bcij,bci->bcj", jacs, spring_f).sum(axis=1)

        # Damping operator: c_n along the normal, c_t along the tangent.
        Jn = np.einsum("bci,bcij->bcj", normal, jacs)  # (B,6,8)
        Jt = np.einsum("bci,bcij->bcj", tangent, jacs)
        damping = cfg.contact_cn * np.einsum(
            "bcj,bck->bjk", np.where(active[..., None], Jn, 0.0), Jn
        )
        damping += cfg.contact_ct * np.einsum(
            "bcj,bck->bjk", np.where(active[..., None], Jt, 0.0), Jt
        )
        # Implicit spring term: evaluating the normal spring at the end-of-step
        # position adds dt*k_n along the normal, which keeps stiff contacts
        # stable at the 1/200 s substep. Contacts past the force clamp are on
        # the flat part of the force law and contribute no stiffness.
        lin = active & (pen < cfg.pen_clamp)
        damping += cfg.dt_sub * cfg.contact_kn * np.einsum(
            "bcj,bck->bjk", np.where(lin[..., None], Jn, 0.0), Jn
        )
        self._lin_contacts = lin
        mu = np.concatenate(
            [self.friction, np.full((B, 4), cfg.body_friction)], axis=1
        )
        return {
            "pen": pen,
            "lin": lin,
            "active": active,
            "normal": normal,
            "tangent": tangent,
            "jacs": jacs,
            "Jn": Jn,
            "Jt": Jt,
            "spring": spring,
            "spring_Q": spring_Q,
            "damping": damping,
            "mu": mu,
        }

    def _contact_repair(self, frames, M, Q, v_new, info, dt):
        """Apply Coulomb caps / separation clamps, re-solving once if needed."""
        cfg = self.config
        active = info["active"]
        # End-of-step normal force: spring (implicit for linear contacts) plus
        # normal damping.
        cn_eff = cfg.contact_cn + dt * cfg.contact_kn * info["lin"]
        vn = np.einsum("bcj,bj->bc", info["Jn"], v_new)
        vt = np.einsum("bcj,bj->bc", info["Jt"], v_new)
        normal_force = np.where(active, info["spring"] - cn_eff * vn, 0.0)
        normal_force = np.maximum(normal_force, 0.0)
        tangential = np.where(active, -cfg.contact_ct * vt, 0.0)
        cap = info["mu"] * normal_force
        slipping = active & (np.abs(tangential) > cap + 1e-12)

        if np.any(slipping):
            # Re-solve with sliding contacts switched to constant cap forces.
            damping = info["damping"].copy()
            Q2 = Q.copy()
            for b, c in zip(*np.nonzero(slipping)):
                Jt = info["Jt"][b, c]
                damping[b] -= cfg.contact_ct * np.outer(Jt, Jt)
                slide = -cap[b, c] * np.sign(vt[b, c])
                Q2[b] += slide * Jt
            A = M + dt * damping
            rhs = np.einsum("bij,bj->bi", M, self.qdot) + dt * Q2
            v_new = np.linalg.solve(A, rhs[..., None])[..., 0]
            vn = np.einsum("bcj,bj->bc", info["Jn"], v_new)
            vt = np.einsum("bcj,bj->bc", info["Jt"], v_new)
            normal_force = np.where(active, info["spring"] - cn_eff * vn, 0.0)
            normal_force = np.maximum(normal_force, 0.0)
            tangential = np.where(
                slipping,
                -cap * np.sign(vt),
                np.where(active, -cfg.contact_ct * vt, 0.0),
            )

        # Report forces consistent with the final normal force: the re-solve
        # changes normal loads, so re-clamp tangential to the final cap.
        tangential = np.clip(
            tangential, -info["mu"] * normal_force, info["mu"] * normal_force
        )
        forces = (
            normal_force[..., None] * info["normal"]
            + tangential[..., None] * info["tangent"]
        )
        self.contact_flags = active
        self.contact_forces = np.where(active[..., None], forces, 0.0)
        self.contact_normals = info["normal"]
        return v_new

    def _clamp_joints(self):
        lo = np.asarray(self.model.joint_lower)
        hi = np.asarray(self.model.joint_upper)
        joints = self.q[:, 3:]
        clamped = np.clip(joints, lo, hi)
        hit = clamped != joints
        self.q[:, 3:] = clamped
        self.qdot[:, 3:] = np.where(hit, 0.0, self.qdot[:, 3:])
        # Keep pitch in (-pi, pi] so orientation checks stay well defined.
        self.q[:, 2] = (self.q[:, 2] + math.pi) % (2.0 * math.pi) - math.pi

    # -- control step ---------------------------------------------------------

    def step(self, actions):
        """Advance one 50 Hz control step.

        Returns (actor_obs, critic_obs, rewards, done_codes) where rewards is
        a single RewardBreakdown with per-env arrays in every field. Done
        codes are strings from {running, fell, success, timeout}; finished
        environments are NOT auto-reset, callers decide when to reset.
        """
        actions = np.atleast_2d(np.asarray(actions, dtype=float))
        if not np.all(np.isfinite(actions)):
            raise NonFiniteAction("actions must be finite")
        cfg, model = self.config, self.model

        targets = action_to_targets(model, actions)
        if cfg.lock_waist:
            targets[:, 0] = 0.0

        if cfg.enable_perturbations:
            self._perturb()

        tau_accum = np.zeros((self.n_envs, N_JOINTS))
        for _ in range(cfg.substeps):
            tau = pd_torques(model, self.q[:, 3:], self.qdot[:, 3:], targets)
            self.physics_substep(tau)
            tau_accum += tau
        self.applied_torques = tau_accum / cfg.substeps
        self.time += cfg.dt_control

        self.theta_ddot = (self.qdot[:, 3:] - self.prev_joint_vel) / cfg.dt_control
        self.prev_joint_vel = self.qdot[:, 3:].copy()

        frames = Frames(model, self.q, self.qdot)
        breakdown = compute_rewards(self._batch_reward_inputs(frames))

        gz = -np.cos(self.q[:, 2])
        dones = []
        for i in range(self.n_envs):
            if gz[i] > cfg.fall_gz:
                dones.append(DONE_FELL)
            elif self.q[i, 1] >= cfg.success_height:
                dones.append(DONE_SUCCESS)
            elif self.time[i] >= cfg.timeout - 1e-9:
                dones.append(DONE_TIMEOUT)
            else:
                dones.append(DONE_RUNNING)
        return self.actor_obs(), self.critic_obs(), breakdown, dones

    # -- diagnostics ----------------------------------------------------------

    def mechanical_energy(self, include_contact_spring=True):
        """Kinetic + gravitational (+ contact spring) energy per env."""
        frames = Frames(self.model, self.q, self.qdot)
        M = mass_matrix(self.model, frames, self.mass_scales)
        kin = 0.5 * np.einsum("bi,bij,bj->b", self.qdot, M, self.qdot)
        masses = _point_masses(self.model, self.mass_scales)
        pot = np.zeros(self.n_envs)
        for name in MASS_POINTS:
            pot += masses[name] * GRAVITY * frames.pos[name][:, 1]
        total = kin + pot
        if include_contact_spring and self.config.enable_contacts:
            # Potential of the clamped spring law: quadratic up to pen_clamp,
            # then linear (the force is constant past the clamp).
            kn, pc = self.config.contact_kn, self.config.pen_clamp
            pen, _ = self._contact_geometry(frames)
            p = np.where(pen > 0, pen, 0.0)
            quad = 0.5 * kn * np.minimum(p, pc) ** 2
            lin = kn * pc * np.maximum(p - pc, 0.0)
            total += np.sum(quad + lin, axis=1)
        return total


class SimEnv:
    """Single-instance convenience wrapper around VecSimEnv."""

    def __init__(self, model=None, config=None, seed=0):
        self.vec = VecSimEnv(model, config, n_envs=1, seed=seed)

    @property
    def model(self):
        return self.vec.model

    @property
    def config(self):
        return self.vec.config

    @property
    def profile(self):
        return self.vec.profiles[0]

    def set_level(self, level):
        self.vec.set_level(0, level)

    def reset(self):
        self.vec.reset()
        st = self.vec.state(0)
        return st, assemble_actor_obs(st), assemble_critic_obs(st, self.profile, self.model)

    def state(self):
        return self.vec.state(0)

    def step(self, action):
        actor, critic, rewards, dones = self.vec.step(np.asarray(action)[None, :])
        scalar = RewardBreakdown(
            **{name: float(getattr(rewards, name)[0]) for name in TERM_ORDER},
            weighted_total=float(rewards.weighted_total[0]),
        )
        return self.vec.state(0), actor[0], critic[0], scalar, dones[0]
