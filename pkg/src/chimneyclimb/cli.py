"""Experiment command line.

Subcommands: atlas, terrain, train, eval, rollout, rsweep, ablate.
Global flags: --config <ini>, --seed <int>, --out <dir>, --threads <int>.
All CSVs carry a `#` metadata line with the config hash and seed so a run
can be traced back to its inputs; with --threads 1 every command is a pure
function of (config, seed).
"""

import argparse
import os
import sys
from dataclasses import replace

import numpy as np

from .config import (
    ConfigError,
    config_hash,
    load_ini,
    make_atlas_config,
    make_sim_config,
    make_train_config,
    section_dict,
)
from .rewards import f_kernel
from .simenv import DONE_SUCCESS, RobotModel, VecSimEnv
from .terrain import TerrainProfile, TerrainSpec, export_heightfield_csv
from .torque_atlas import (
    EmptyGrid,
    NoMinimum,
    assess_motor,
    build_atlas,
    export_atlas_csv,
    export_curve_csv,
    extract_curve_c,
)
from .trainer import (
    CheckpointError,
    NonFiniteLoss,
    PPOTrainer,
    evaluate_policy,
    load_policy,
)


def _meta(args):
    return f"config_hash={config_hash(args.config)} seed={args.seed} cmd={args.command}"


def _outpath(args, name):
    os.makedirs(args.out, exist_ok=True)
    return os.path.join(args.out, name)


# -- subcommands ----------------------------------------------------------------


def cmd_atlas(args, cp):
    chain, brace, grid, safety = make_atlas_config(cp)
    tmap = build_atlas(chain, brace, grid)
    curve = extract_curve_c(tmap)
    report = assess_motor(tmap, safety)
    export_atlas_csv(tmap, _outpath(args, "atlas.csv"), meta=_meta(args))
    export_curve_csv(curve, _outpath(args, "curve_c.csv"), meta=_meta(args))
    with open(_outpath(args, "motor_report.txt"), "w") as fh:
        fh.write(f"# {_meta(args)}\n")
        fh.write(report.summary() + "\n")
    print(report.summary())
    return 0


def cmd_terrain(args, cp):
    opts = section_dict(cp, "terrain_export")
    spec = TerrainSpec(
        wall_width=float(opts.get("width", 0.9)),
        junction_r=float(opts.get("r", 0.3)),
        roughness_amp=float(opts.get("roughness", 0.0)),
        seed=args.seed,
    )
    profile = TerrainProfile(spec)
    export_heightfield_csv(
        profile,
        _outpath(args, "heightfield.csv"),
        dz=float(opts.get("dz", 0.01)),
        meta=_meta(args),
    )
    return 0


def cmd_train(args, cp):
    cfg = make_train_config(cp, seed=args.seed)
    sim = make_sim_config(cp)
    trainer = PPOTrainer(cfg, sim_config=sim, out_dir=args.out)
    trainer.train(header_lines=[_meta(args)])
    return 0


def _load(args):
    net, a_norm, c_norm, meta = load_policy(args.checkpoint)
    return net, a_norm


def cmd_eval(args, cp):
    opts = section_dict(cp, "eval")
    episodes = int(opts.get("episodes", 10))
    sim = make_sim_config(
        cp,
        fixed_r=float(opts.get("r", 0.0)),
        fixed_wall_width=float(opts.get("width", 0.9)),
        vref_range=(float(opts.get("v_ref", 0.5)),) * 2,
    )
    net, a_norm = _load(args)
    report = evaluate_policy(
        net, a_norm, sim_config=sim, n_episodes=episodes, seed=args.seed,
        collect_heights=True,
    )
    with open(_outpath(args, "eval_summary.csv"), "w") as fh:
        fh.write(f"# {_meta(args)}\n")
        fh.write("episode,outcome,steps,tracking_score,climb_height,mean_vz,v_ref\n")
        for i, r in enumerate(report["episodes"]):
            fh.write(
                f"{i},{r['outcome']},{r['steps']},{r['tracking_score']:.6g},"
                f"{r['climb_height']:.6g},{r['mean_vz']:.6g},{r['v_ref']:.4g}\n"
            )
        fh.write(
            f"# success_rate={report['success_rate']:.4g} "
            f"tracking_score={report['tracking_score']:.6g} "
            f"mean_vz_success={report['mean_vz_success']:.6g}\n"
        )
    with open(_outpath(args, "z_traces.csv"), "w") as fh:
        fh.write(f"# {_meta(args)}\n")
        fh.write("episode,t,z,vz\n")
        for i, r in enumerate(report["episodes"]):
            for t, z, vz in r["trace"]:
                fh.write(f"{i},{t:.3f},{z:.6f},{vz:.6f}\n")
    print(
        f"success_rate={report['success_rate']:.3f} "
        f"tracking_score={report['tracking_score']:.4f} "
        f"mean_vz_success={report['mean_vz_success']:.4f}"
    )
    return 0


def cmd_rollout(args, cp):
    import torch

    net, a_norm = _load(args)
    sim = make_sim_config(cp)
    env = VecSimEnv(RobotModel(), sim, n_envs=1, seed=args.seed)
    with open(_outpath(args, "rollout.csv"), "w") as fh:
        fh.write(f"# {_meta(args)}\n")
        qn = ["x", "z", "pitch", "waist", "hip_f", "knee_f", "hip_b", "knee_b"]
        fh.write(
            "t," + ",".join(qn) + "," + ",".join("d" + n for n in qn)
            + ",a0,a1,a2,a3,a4,tau0,tau1,tau2,tau3,tau4,reward,outcome\n"
        )
        outcome = "running"
        while outcome == "running":
            obs = a_norm.normalize(env.actor_obs()).astype(np.float32)
            with torch.no_grad():
                action, _ = net.act(torch.from_numpy(obs), deterministic=True)
            act = action.numpy()
            _, _, rew, dones = env.step(act)
            outcome = dones[0]
            row = (
                [env.time[0]] + list(env.q[0]) + list(env.qdot[0])
                + list(act[0]) + list(env.applied_torques[0])
                + [float(rew.weighted_total[0])]
            )
            fh.write(",".join(f"{v:.6f}" for v in row) + f",{outcome}\n")
    print(f"rollout finished: {outcome} at t={env.time[0]:.2f} s, z={env.q[0, 1]:.3f} m")
    return 0


def _train_arm(cp, args, *, out_dir, seed, **cfg_overrides):
    cfg = make_train_config(cp, seed=seed, **cfg_overrides)
    sim = make_sim_config(cp)
    trainer = PPOTrainer(cfg, sim_config=sim, out_dir=out_dir)
    ckpt = trainer.train(header_lines=[_meta(args)])
    return ckpt


def cmd_rsweep(args, cp):
    opts = section_dict(cp, "rsweep")
    r_values = [
        float(tok) for tok in opts.get("r_values", "0.3,0.2,0.1,0.0").split(",")
    ]
    episodes = int(opts.get("episodes", 10))
    overrides = {"curriculum": False}
    if "iterations" in opts:
        overrides["iterations"] = int(opts["iterations"])
    rows = []
    for r in r_values:
        arm_dir = _outpath(args, f"arm_r{r:g}")
        try:
            ckpt = _train_arm(
                cp, args, out_dir=arm_dir, seed=args.seed, fixed_r=r, **overrides
            )
            net, a_norm, _, _ = load_policy(ckpt)
            sim = make_sim_config(
                cp, fixed_r=r, fixed_wall_width=0.9, vref_range=(0.5, 0.5)
            )
            rep = evaluate_policy(
                net, a_norm, sim_config=sim, n_episodes=episodes,
                seed=args.seed + 5000, collect_heights=True,
            )
            rows.append((r, rep["success_rate"], rep["tracking_score"],
                         rep["mean_vz_success"], rep["episodes"]))
        except (NonFiniteLoss, CheckpointError) as exc:
            print(f"arm r={r:g} failed: {exc}", file=sys.stderr)
            rows.append((r, float("nan"), float("nan"), float("nan"), []))
    with open(_outpath(args, "rsweep.csv"), "w") as fh:
        fh.write(f"# {_meta(args)}\n")
        fh.write("r,success_rate,tracking_score,mean_vz_success\n")
        for r, sr, ts, vz, _eps in rows:
            fh.write(f"{r:.3f},{sr:.4g},{ts:.6g},{vz:.6g}\n")
    with open(_outpath(args, "rsweep_traces.csv"), "w") as fh:
        fh.write(f"# {_meta(args)}\n")
        fh.write("r,episode,t,z\n")
        for r, _sr, _ts, _vz, eps in rows:
            for i, ep in enumerate(eps):
                for t, z, _vzt in ep["trace"]:
                    fh.write(f"{r:.3f},{i},{t:.3f},{z:.6f}\n")
    return 0


def _tracking_trial(net, a_norm, sim, seed):
    """One fixed-duration trial; returns (tracking_score, [(t, vz)])."""
    import torch

    env = VecSimEnv(RobotModel(), sim, n_envs=1, seed=seed)
    trace = []
    errs = []
    outcome = "running"
    while outcome == "running":
        obs = a_norm.normalize(env.actor_obs()).astype(np.float32)
        with torch.no_grad():
            action, _ = net.act(torch.from_numpy(obs), deterministic=True)
        _, _, _, dones = env.step(action.numpy())
        errs.append(
            (env.qdot[0, 1] - env.v_ref[0]) ** 2 + env.qdot[0, 0] ** 2
        )
        trace.append((float(env.time[0]), float(env.qdot[0, 1])))
        outcome = dones[0]
    return float(np.mean(f_kernel(np.array(errs), 0.01))), trace


def cmd_ablate(args, cp):
    opts = section_dict(cp, "ablate")
    widths = [float(t) for t in opts.get("widths", "0.8,0.9,1.0,1.1").split(",")]
    vrefs = [float(t) for t in opts.get("v_refs", "0.2,0.3,0.4,0.5").split(",")]
    seeds_per_cell = int(opts.get("seeds_per_cell", 10))
    trial_seconds = float(opts.get("trial_seconds", 5.0))
    overrides = {}
    if "iterations" in opts:
        overrides["iterations"] = int(opts["iterations"])

    arms = {}
    for arm, lock in (("waist_free", False), ("waist_locked", True)):
        ckpt = getattr(args, f"checkpoint_{'free' if not lock else 'locked'}", None)
        if not ckpt:
            ckpt = _train_arm(
                cp, args, out_dir=_outpath(args, f"arm_{arm}"),
                seed=args.seed, lock_waist=lock, **overrides,
            )
        net, a_norm, _, meta = load_policy(ckpt)
        # Evaluate each arm under the conditions it was trained for: the
        # waist lock comes from the checkpoint, not from the arm label, so
        # passing the same checkpoint to both arms is a valid control.
        arms[arm] = (net, a_norm, bool(meta.get("config", {}).get("lock_waist", lock)))

    with open(_outpath(args, "ablate.csv"), "w") as score_fh, \
            open(_outpath(args, "ablate_vtraces.csv"), "w") as trace_fh:
        score_fh.write(f"# {_meta(args)}\n")
        score_fh.write("arm,width,v_ref,mean_score,std_score\n")
        trace_fh.write(f"# {_meta(args)}\n")
        trace_fh.write("arm,width,trial,t,vz\n")
        for arm, (net, a_norm, lock) in arms.items():
            for w in widths:
                for v in vrefs:
                    sim = make_sim_config(
                        cp,
                        fixed_r=0.0,
                        fixed_wall_width=w,
                        vref_range=(v, v),
                        lock_waist=lock,
                        timeout=trial_seconds,
                        success_height=1e9,  # score the full trial window
                    )
                    scores = []
                    for k in range(seeds_per_cell):
                        score, trace = _tracking_trial(
                            net, a_norm, sim, seed=args.seed + 7000 + k
                        )
                        scores.append(score)
                        if abs(v - 0.4) < 1e-9:
                            for t, vz in trace:
                                trace_fh.write(
                                    f"{arm},{w:.3f},{k},{t:.3f},{vz:.6f}\n"
                                )
                    score_fh.write(
                        f"{arm},{w:.3f},{v:.2f},"
                        f"{np.mean(scores):.6g},{np.std(scores):.6g}\n"
                    )
    return 0


COMMANDS = {
    "atlas": cmd_atlas,
    "terrain": cmd_terrain,
    "train": cmd_train,
    "eval": cmd_eval,
    "rollout": cmd_rollout,
    "rsweep": cmd_rsweep,
    "ablate": cmd_ablate,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="chimneyclimb", description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--config", default=None, help="INI config file")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument(
        "--threads", type=int, default=1, help="worker threads (1 = reproducible)"
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        if name in ("eval", "rollout"):
            p.add_argument("--checkpoint", required=True)
        if name == "ablate":
            p.add_argument("--checkpoint-free", dest="checkpoint_free")
            p.add_argument("--checkpoint-locked", dest="checkpoint_locked")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    os.environ.setdefault("OMP_NUM_THREADS", str(args.threads))
    try:
        import torch

        torch.set_num_threads(args.threads)
    except ImportError:
        pass
    try:
        cp = load_ini(args.config) if args.config else None
        return COMMANDS[args.command](args, cp)
    except (ConfigError, EmptyGrid, NoMinimum, CheckpointError,
            NonFiniteLoss, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
