"""Planar chimney-climbing quadruped: statics, terrain, simulation, training."""

from .kinematics import LegChain, fk_foot, foot_jacobian, ik_foot, joint_torques
from .rewards import (
    DEFAULT_WEIGHTS,
    TERM_ORDER,
    RewardBreakdown,
    RewardInputs,
    compute_rewards,
    f_kernel,
    tracking_score,
)
from .simenv import (
    ActorObs,
    CriticObs,
    RobotModel,
    SimConfig,
    SimEnv,
    VecSimEnv,
)
from .terrain import (
    CGCLConfig,
    CurriculumLevel,
    TerrainProfile,
    TerrainSpec,
    curriculum_params,
    junction_x,
    make_terrain,
)
from .torque_atlas import (
    BracingParams,
    GridSpec,
    assess_motor,
    build_atlas,
    extract_curve_c,
)
from .trainer import PPOTrainer, TrainConfig, evaluate_policy, load_policy

__version__ = "0.1.0"
