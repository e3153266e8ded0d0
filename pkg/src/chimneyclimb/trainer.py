"""PPO trainer with asymmetric actor-critic and the terrain curriculum.

The actor sees only proprioception (ActorObs); the critic additionally sees
privileged simulation state (CriticObs). Terrain difficulty is scheduled per
environment: levels anneal the floor-wall junction radius to zero while
ramping surface roughness, promoted/demoted from recent episode outcomes.
"""

import json
import math
import os
from collections import deque
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn as nn

from .rewards import f_kernel
from .simenv import (
    ActorObs,
    CriticObs,
    DONE_FELL,
    DONE_RUNNING,
    DONE_SUCCESS,
    RobotModel,
    SimConfig,
    VecSimEnv,
)

LOG_STD_MIN = -4.0
LOG_STD_MAX = 1.0


class NonFiniteLoss(Exception):
    """A loss or gradient became NaN/inf during optimization."""


class CheckpointError(Exception):
    """Checkpoint file is missing fields or has mismatched shapes."""


@dataclass
class TrainConfig:
    iterations: int = 1500
    n_envs: int = 64
    n_steps: int = 48  # rollout length per iteration
    init_log_std: float = 0.0
    gamma: float = 0.99
    lam: float = 0.95
    clip_ratio: float = 0.2
    learning_rate: float = 3e-4
    epochs: int = 5
    minibatches: int = 4
    entropy_coef: float = 0.01
    value_coef: float = 1.0
    grad_clip: float = 1.0
    seed: int = 0
    # Curriculum state machine.
    curriculum: bool = True
    promote_threshold: float = 0.8
    demote_threshold: float = 0.8
    outcome_window: int = 5
    # Ablations / environment overrides.
    lock_waist: bool = False
    fixed_r: float | None = None
    fixed_wall_width: float | None = None
    vref_range: tuple = (0.0, 0.6)
    checkpoint_interval: int = 250
    log_interval: int = 10


def build_mlp(in_dim, out_dim, hidden=(256, 128, 64)):
    layers = []
    last = in_dim
    for h in hidden:
        layers += [nn.Linear(last, h), nn.ELU()]
        last = h
    layers.append(nn.Linear(last, out_dim))
    return nn.Sequential(*layers)


class ActorCritic(nn.Module):
    """Gaussian actor on ActorObs, value head on CriticObs."""

    def __init__(self, actor_dim=ActorObs.DIM, critic_dim=CriticObs.DIM, act_dim=5,
                 init_log_std=0.0):
        super().__init__()
        self.actor = build_mlp(actor_dim, act_dim)
        self.critic = build_mlp(critic_dim, 1)
        self.log_std = nn.Parameter(torch.full((act_dim,), float(init_log_std)))

    def dist(self, actor_obs):
        mean = self.actor(actor_obs)
        std = torch.exp(torch.clamp(self.log_std, LOG_STD_MIN, LOG_STD_MAX))
        return torch.distributions.Normal(mean, std)

    def act(self, actor_obs, deterministic=False):
        d = self.dist(actor_obs)
        a = d.mean if deterministic else d.sample()
        logp = d.log_prob(a).sum(-1)
        return a, logp

    def value(self, critic_obs):
        return self.critic(critic_obs).squeeze(-1)


class RunningNorm:
    """Running mean/variance normalizer; frozen during evaluation."""

    def __init__(self, dim, clip=10.0, eps=1e-8):
        self.mean = np.zeros(dim)
        self.var = np.ones(dim)
        self.count = eps
        self.clip = clip
        self.frozen = False

    def update(self, x):
        if self.frozen:
            return
        x = np.atleast_2d(x)
        bmean = x.mean(axis=0)
        bvar = x.var(axis=0)
        bcount = x.shape[0]
        delta = bmean - self.mean
        tot = self.count + bcount
        self.mean += delta * bcount / tot
        m_a = self.var * self.count
        m_b = bvar * bcount
        self.var = (m_a + m_b + delta**2 * self.count * bcount / tot) / tot
        self.count = tot

    def normalize(self, x):
        return np.clip(
            (x - self.mean) / np.sqrt(self.var + 1e-8), -self.clip, self.clip
        )

    def state(self):
        return {
            "mean": self.mean.copy(),
            "var": self.var.copy(),
            "count": float(self.count),
        }

    def load(self, state):
        self.mean = np.asarray(state["mean"], dtype=float)
        self.var = np.asarray(state["var"], dtype=float)
        self.count = float(state["count"])


class CurriculumTracker:
    """Per-env terrain level with promote/demote from recent outcomes."""

    def __init__(self, n_envs, max_level, window, promote, demote, enabled=True):
        self.levels = np.zeros(n_envs, dtype=int)
        self.max_level = max_level
        self.window = window
        self.promote = promote
        self.demote = demote
        self.enabled = enabled
        self.outcomes = [deque(maxlen=window) for _ in range(n_envs)]

    def record(self, i, outcome):
        """Record a finished episode; returns the (possibly new) level."""
        if not self.enabled:
            return self.levels[i]
        self.outcomes[i].append(outcome)
        if len(self.outcomes[i]) == self.window:
            succ = sum(o == DONE_SUCCESS for o in self.outcomes[i]) / self.window
            fell = sum(o == DONE_FELL for o in self.outcomes[i]) / self.window
            if succ >= self.promote and self.levels[i] < self.max_level:
                self.levels[i] += 1
                self.outcomes[i].clear()
            elif fell >= self.demote and self.levels[i] > 0:
                self.levels[i] -= 1
                self.outcomes[i].clear()
        return self.levels[i]


def gae_advantages(rewards, values, bootstrap, terminal, gamma, lam):
    """Generalized advantage estimation over a (T, B) rollout.

    `bootstrap` is V(s_{t+1}) for each step (already zeroed on hard
    terminals); `terminal` marks steps that end an episode (no credit flows
    across them).
    """
    T, B = rewards.shape
    adv = np.zeros((T, B))
    last = np.zeros(B)
    for t in range(T - 1, -1, -1):
        delta = rewards[t] + gamma * bootstrap[t] - values[t]
        last = delta + gamma * lam * (1.0 - terminal[t]) * last
        adv[t] = last
    return adv


class PPOTrainer:
    def __init__(self, config: TrainConfig, model: RobotModel = None,
                 sim_config: SimConfig = None, out_dir="runs/train"):
        self.cfg = config
        self.out_dir = out_dir
        os.makedirs(out_dir, exist_ok=True)
        torch.manual_seed(config.seed)
        np.random.seed(config.seed)

        self.model = model or RobotModel()
        sim = sim_config or SimConfig()
        if config.lock_waist or config.fixed_r is not None or \
                config.fixed_wall_width is not None or \
                tuple(config.vref_range) != tuple(sim.vref_range):
            from dataclasses import replace as _replace
            sim = _replace(
                sim,
                lock_waist=config.lock_waist,
                fixed_r=config.fixed_r,
                fixed_wall_width=config.fixed_wall_width,
                vref_range=tuple(config.vref_range),
            )
        self.sim_config = sim
        self.env = VecSimEnv(self.model, sim, n_envs=config.n_envs, seed=config.seed)
        self.net = ActorCritic(init_log_std=config.init_log_std)
        self.opt = torch.optim.Adam(self.net.parameters(), lr=config.learning_rate)
        self.actor_norm = RunningNorm(ActorObs.DIM)
        self.critic_norm = RunningNorm(CriticObs.DIM)
        self.curriculum = CurriculumTracker(
            config.n_envs,
            sim.cgcl.levels,
            config.outcome_window,
            config.promote_threshold,
            config.demote_threshold,
            enabled=config.curriculum and config.fixed_r is None,
        )
        self.iteration = 0
        self.episode_outcomes = deque(maxlen=200)

    # -- rollout collection ---------------------------------------------------

    def collect_rollouts(self):
        cfg = self.cfg
        env = self.env
        T, B = cfg.n_steps, cfg.n_envs
        actor_raw = env.actor_obs()
        critic_raw = env.critic_obs()

        obs_a = np.zeros((T, B, ActorObs.DIM), dtype=np.float32)
        obs_c = np.zeros((T, B, CriticObs.DIM), dtype=np.float32)
        acts = np.zeros((T, B, 5), dtype=np.float32)
        logps = np.zeros((T, B), dtype=np.float32)
        rews = np.zeros((T, B))
        vals = np.zeros((T, B))
        boots = np.zeros((T, B))
        terms = np.zeros((T, B))
        track = np.zeros((T, B, 3))

        for t in range(T):
            self.actor_norm.update(actor_raw)
            self.critic_norm.update(critic_raw)
            a_n = self.actor_norm.normalize(actor_raw).astype(np.float32)
            c_n = self.critic_norm.normalize(critic_raw).astype(np.float32)
            with torch.no_grad():
                a_t = torch.from_numpy(a_n)
                action, logp = self.net.act(a_t)
                value = self.net.value(torch.from_numpy(c_n))
            obs_a[t] = a_n
            obs_c[t] = c_n
            acts[t] = action.numpy()
            logps[t] = logp.numpy()
            vals[t] = value.numpy()

            track[t, :, 0] = env.qdot[:, 1]
            track[t, :, 1] = env.qdot[:, 0]
            track[t, :, 2] = env.v_ref

            actor_raw, critic_raw, breakdown, dones = env.step(acts[t])
            rews[t] = np.asarray(breakdown.weighted_total)

            done_idx = [i for i, d in enumerate(dones) if d != DONE_RUNNING]
            if done_idx:
                # Bootstrap through time limits; hard terminals carry no value.
                c_next = self.critic_norm.normalize(critic_raw).astype(np.float32)
                with torch.no_grad():
                    v_next = self.net.value(torch.from_numpy(c_next)).numpy()
                for i, d in enumerate(dones):
                    if d == DONE_RUNNING:
                        boots[t, i] = v_next[i]
                    else:
                        terms[t, i] = 1.0
                        if d not in (DONE_FELL, DONE_SUCCESS):
                            boots[t, i] = v_next[i]
                        self.episode_outcomes.append(d)
                        env.set_level(i, self.curriculum.record(i, d))
                env.reset(done_idx)
                actor_raw = env.actor_obs()
                critic_raw = env.critic_obs()
            else:
                c_next = self.critic_norm.normalize(critic_raw).astype(np.float32)
                with torch.no_grad():
                    boots[t] = self.net.value(torch.from_numpy(c_next)).numpy()

        return {
            "obs_a": obs_a,
            "obs_c": obs_c,
            "acts": acts,
            "logps": logps,
            "rews": rews,
            "vals": vals,
            "boots": boots,
            "terms": terms,
            "track": track,
        }

    # -- optimization -----------------------------------------------------------

    def ppo_update(self, batch):
        cfg = self.cfg
        adv = gae_advantages(
            batch["rews"], batch["vals"], batch["boots"], batch["terms"],
            cfg.gamma, cfg.lam,
        )
        ret = adv + batch["vals"]
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)

        N = cfg.n_steps * cfg.n_envs
        obs_a = torch.from_numpy(batch["obs_a"].reshape(N, -1))
        obs_c = torch.from_numpy(batch["obs_c"].reshape(N, -1))
        acts = torch.from_numpy(batch["acts"].reshape(N, -1))
        logp_old = torch.from_numpy(batch["logps"].reshape(N))
        adv_t = torch.from_numpy(adv.reshape(N).astype(np.float32))
        ret_t = torch.from_numpy(ret.reshape(N).astype(np.float32))

        idx = np.arange(N)
        rng = np.random.default_rng(cfg.seed + self.iteration)
        stats = {"policy_loss": 0.0, "value_loss": 0.0, "entropy": 0.0}
        n_updates = 0
        for _ in range(cfg.epochs):
            rng.shuffle(idx)
            for mb in np.array_split(idx, cfg.minibatches):
                mb_t = torch.from_numpy(mb)
                d = self.net.dist(obs_a[mb_t])
                logp = d.log_prob(acts[mb_t]).sum(-1)
                ratio = torch.exp(logp - logp_old[mb_t])
                clipped = torch.clamp(
                    ratio, 1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio
                )
                pol_loss = -torch.min(
                    ratio * adv_t[mb_t], clipped * adv_t[mb_t]
                ).mean()
                value = self.net.value(obs_c[mb_t])
                v_loss = ((value - ret_t[mb_t]) ** 2).mean()
                entropy = d.entropy().sum(-1).mean()
                loss = (
                    pol_loss
                    + cfg.value_coef * v_loss
                    - cfg.entropy_coef * entropy
                )
                if not torch.isfinite(loss):
                    raise NonFiniteLoss(f"loss={loss.item()}")
                self.opt.zero_grad()
                loss.backward()
                nn.utils.clip_grad_norm_(self.net.parameters(), cfg.grad_clip)
                self.opt.step()
                stats["policy_loss"] += pol_loss.item()
                stats["value_loss"] += v_loss.item()
                stats["entropy"] += entropy.item()
                n_updates += 1
        return {k: v / n_updates for k, v in stats.items()}

    # -- main loop ----------------------------------------------------------------

    def train(self, metrics_path=None, header_lines=()):
        cfg = self.cfg
        metrics_path = metrics_path or os.path.join(self.out_dir, "metrics.csv")
        with open(metrics_path, "w") as fh:
            for line in header_lines:
                fh.write(f"# {line}\n")
            fh.write("iter,mean_reward,tracking_score,success_rate,mean_level\n")
            for it in range(cfg.iterations):
                self.iteration = it
                batch = self.collect_rollouts()
                self.ppo_update(batch)

                tr = batch["track"].reshape(-1, 3)
                err = (tr[:, 0] - tr[:, 2]) ** 2 + tr[:, 1] ** 2
                tscore = float(np.mean(f_kernel(err, 0.01)))
                succ = self.success_rate()
                fh.write(
                    f"{it},{batch['rews'].mean():.6g},{tscore:.6g},"
                    f"{succ:.4g},{self.curriculum.levels.mean():.4g}\n"
                )
                fh.flush()
                if (it + 1) % cfg.checkpoint_interval == 0:
                    self.save_checkpoint(
                        os.path.join(self.out_dir, f"checkpoint_{it + 1:06d}.npz")
                    )
        final = os.path.join(self.out_dir, "checkpoint_final.npz")
        self.save_checkpoint(final)
        return final

    def success_rate(self):
        if not self.episode_outcomes:
            return 0.0
        return sum(o == DONE_SUCCESS for o in self.episode_outcomes) / len(
            self.episode_outcomes
        )

    # -- policy I/O -------------------------------------------------------------

    def save_checkpoint(self, path):
        save_policy(
            path,
            self.net,
            self.actor_norm,
            self.critic_norm,
            extra={
                "iteration": self.iteration,
                "config": asdict(self.cfg),
                "levels": self.curriculum.levels.tolist(),
            },
        )

    def load_checkpoint(self, path):
        net, a_norm, c_norm, meta = load_policy(path)
        self.net = net
        self.opt = torch.optim.Adam(self.net.parameters(), lr=self.cfg.learning_rate)
        self.actor_norm = a_norm
        self.critic_norm = c_norm
        return meta


def save_policy(path, net, actor_norm, critic_norm, extra=None):
    """Checkpoint as npz: flat little-endian arrays plus a JSON metadata blob."""
    arrays = {}
    names = []
    for name, tensor in net.state_dict().items():
        arr = tensor.detach().cpu().numpy().astype("<f4")
        key = f"param_{len(names)}"
        arrays[key] = arr
        names.append({"name": name, "key": key, "shape": list(arr.shape)})
    for prefix, norm in (("actor_norm", actor_norm), ("critic_norm", critic_norm)):
        st = norm.state()
        arrays[f"{prefix}_mean"] = st["mean"].astype("<f8")
        arrays[f"{prefix}_var"] = st["var"].astype("<f8")
        arrays[f"{prefix}_count"] = np.array([st["count"]], dtype="<f8")
    meta = {"params": names, "extra": extra or {}}
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez(path, **arrays)


def load_policy(path):
    """Load a checkpoint; returns (net, actor_norm, critic_norm, metadata)."""
    with np.load(path) as data:
        try:
            meta = json.loads(bytes(data["meta"].tobytes()).decode())
        except KeyError as exc:
            raise CheckpointError("missing metadata blob") from exc
        net = ActorCritic()
        state = {}
        for entry in meta["params"]:
            try:
                arr = data[entry["key"]]
            except KeyError as exc:
                raise CheckpointError(f"missing array {entry['key']}") from exc
            if list(arr.shape) != entry["shape"]:
                raise CheckpointError(f"shape mismatch for {entry['name']}")
            state[entry["name"]] = torch.from_numpy(arr.astype(np.float32))
        net.load_state_dict(state)
        a_norm = RunningNorm(ActorObs.DIM)
        c_norm = RunningNorm(CriticObs.DIM)
        for prefix, norm in (("actor_norm", a_norm), ("critic_norm", c_norm)):
            norm.load(
                {
                    "mean": data[f"{prefix}_mean"],
                    "var": data[f"{prefix}_var"],
                    "count": data[f"{prefix}_count"][0],
                }
            )
        a_norm.frozen = True
        c_norm.frozen = True
    return net, a_norm, c_norm, meta["extra"]


def evaluate_policy(net, actor_norm, model=None, sim_config=None, n_episodes=20,
                    seed=1000, level=None, collect_heights=False):
    """Deterministic evaluation; returns aggregate episode statistics."""
    model = model or RobotModel()
    sim_config = sim_config or SimConfig()
    actor_norm.frozen = True
    env = VecSimEnv(model, sim_config, n_envs=1, seed=seed)
    if level is not None:
        env.set_level(0, level)
        env.reset()
    results = []
    for _ in range(n_episodes):
        env.reset()
        track = []
        trace = []
        t0_z = env.q[0, 1]
        steps = 0
        outcome = DONE_RUNNING
        while outcome == DONE_RUNNING:
            a_n = actor_norm.normalize(env.actor_obs()).astype(np.float32)
            with torch.no_grad():
                action, _ = net.act(torch.from_numpy(a_n), deterministic=True)
            _, _, _, dones = env.step(action.numpy())
            track.append([env.qdot[0, 1], env.qdot[0, 0], env.v_ref[0]])
            if collect_heights:
                trace.append((float(env.time[0]), float(env.q[0, 1]),
                              float(env.qdot[0, 1])))
            outcome = dones[0]
            steps += 1
        track = np.asarray(track)
        err = (track[:, 0] - track[:, 2]) ** 2 + track[:, 1] ** 2
        duration = steps * sim_config.dt_control
        results.append(
            {
                "outcome": outcome,
                "steps": steps,
                "tracking_score": float(np.mean(f_kernel(err, 0.01))),
                "climb_height": float(env.q[0, 1] - t0_z),
                "mean_vz": float((env.q[0, 1] - t0_z) / duration),
                "v_ref": float(env.v_ref[0]),
                "trace": trace,
            }
        )
    succ = [r for r in results if r["outcome"] == DONE_SUCCESS]
    return {
        "episodes": results,
        "success_rate": len(succ) / n_episodes,
        "tracking_score": float(np.mean([r["tracking_score"] for r in results])),
        "mean_vz_success": float(np.mean([r["mean_vz"] for r in succ])) if succ else 0.0,
    }
