"""Command-line entry point: ``posefield <subcommand> ...``.

Every subcommand prints one JSON object on stdout. Option precedence is
command-line flag > ``--config`` file section > built-in default.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import errors
from .data import (
    DEFAULT_SIGMAS,
    TIER_NAMES,
    Tier,
    generate_dataset,
    load_dataset,
    load_manifold_spec,
    poses_dataset,
    random_manifold_spec,
    save_dataset,
    save_manifold_spec,
)
from .field import evaluate, init_model, load_model, save_model
from .project import ProjectionConfig, project_batch
from .skeleton import binary_tree, load_skeleton
from .tasks import DenoiseConfig, apd, denoise, fit_partial, interpolate, partial_init, sample_poses, smoothness
from .train import TrainingConfig, default_stages, train, validate, write_history

SCHEMA = "posefield.cli/1"

EXIT_CODES = [
    (errors.ConfigError, 3),
    (errors.FormatError, 4),
    (errors.DimensionMismatch, 5),
    (errors.DegenerateQuaternion, 6),
    (errors.NumericalError, 7),
    (errors.InsufficientData, 8),
    (errors.SamplingError, 9),
    (OSError, 10),
    (json.JSONDecodeError, 11),
]


def _emit(payload: dict) -> None:
    print(json.dumps({"schema": SCHEMA, **payload}, sort_keys=True))


def _section(args, name: str) -> dict:
    if not args.config:
        return {}
    return dict(json.loads(Path(args.config).read_text()).get(name, {}))


def _merge(defaults: dict, file_cfg: dict, flags: dict) -> dict:
    out = dict(defaults)
    out.update(file_cfg)
    out.update({k: v for k, v in flags.items() if v is not None})
    return out


def _projection_cfg(args) -> ProjectionConfig:
    flags = {"alpha": args.alpha, "max_iters": args.max_iters, "tol": args.tol, "renorm_period": args.renorm_period}
    return ProjectionConfig(**_merge(ProjectionConfig().to_dict(), _section(args, "project"), flags))


def _first_pose(path):
    ds = load_dataset(path)
    if len(ds) == 0:
        raise errors.ConfigError(f"{path}: no poses")
    return ds.poses[0]


# -- subcommands --------------------------------------------------------------


def cmd_gen_data(args) -> dict:
    cfg = _merge(
        {"n_manifold": 20000, "per_sigma": 10000, "kprime": 500, "k": 5, "joint_prob": 0.5,
         "k_joints": 8, "latent_dim": 2, "sigma_far": DEFAULT_SIGMAS[Tier.FAR],
         "sigma_mid": DEFAULT_SIGMAS[Tier.MID], "sigma_near": DEFAULT_SIGMAS[Tier.NEAR]},
        _section(args, "gen_data"),
        {"n_manifold": args.n_manifold, "per_sigma": args.per_sigma, "kprime": args.kprime, "k": args.k,
         "joint_prob": args.joint_prob, "k_joints": args.joints, "latent_dim": args.latent_dim,
         "sigma_far": args.sigma_far, "sigma_mid": args.sigma_mid, "sigma_near": args.sigma_near},
    )
    out = Path(args.out)
    if args.spec:
        spec = load_manifold_spec(args.spec)
    else:
        spec = random_manifold_spec(cfg["k_joints"], cfg["latent_dim"], seed=args.seed)
        save_manifold_spec(spec, out.with_name(out.name + ".spec.json"))
    skel = load_skeleton(args.skeleton) if args.skeleton else binary_tree(spec.k)
    if skel.k != spec.k:
        raise errors.DimensionMismatch(f"skeleton K={skel.k} but manifold spec K={spec.k}")
    sigmas = {Tier.FAR: cfg["sigma_far"], Tier.MID: cfg["sigma_mid"], Tier.NEAR: cfg["sigma_near"]}
    ds = generate_dataset(spec, skel, cfg["n_manifold"], cfg["per_sigma"], sigmas,
                          cfg["kprime"], cfg["k"], cfg["joint_prob"], seed=args.seed)
    save_dataset(ds, out)
    tiers = {}
    for t in Tier:
        d = ds.distances[ds.tiers == t]
        hist, edges = np.histogram(d, bins=10) if d.size else (np.zeros(10, int), np.zeros(11))
        tiers[TIER_NAMES[t]] = {
            "count": int(d.size),
            "median": float(np.median(d)) if d.size else None,
            "histogram": {"counts": hist.tolist(), "edges": edges.tolist()},
        }
    report = {"dataset": str(out), "n": len(ds), "spec_hash": spec.digest(), "tiers": tiers}
    out.with_name(out.name + ".report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return report


def cmd_train(args) -> dict:
    file_cfg = _section(args, "train")
    epochs = [int(e) for e in args.epochs.split(",")] if args.epochs else None
    if epochs is not None:
        if len(epochs) != 3:
            raise errors.ConfigError("--epochs takes three comma-separated stage lengths")
        file_cfg["stages"] = default_stages(epochs)
    model_keys = ("feat", "enc_hidden", "head_width")
    model_cfg = _merge({"feat": 6, "enc_hidden": 32, "head_width": 256},
                       {k: file_cfg.pop(k) for k in model_keys if k in file_cfg},
                       {k: getattr(args, k) for k in model_keys})
    cfg = TrainingConfig(**_merge({}, file_cfg, {
        "lr": args.lr, "batch_size": args.batch_size, "lambda_eik": args.lambda_eik,
        "flip_prob": args.flip_prob, "batches_per_epoch": args.batches_per_epoch, "seed": args.seed}))
    ds = load_dataset(args.data)
    val = load_dataset(args.val, ds.skeleton) if args.val else None
    model = init_model(ds.skeleton, model_cfg["feat"], model_cfg["head_width"], seed=args.seed,
                       enc_hidden=model_cfg["enc_hidden"])
    start = time.perf_counter()
    model, history = train(model, ds, cfg, heldout=val, checkpoint=args.out)
    elapsed = time.perf_counter() - start
    save_model(model, args.out)
    hist_path = Path(args.out).with_name(Path(args.out).name + ".history.csv")
    write_history(history, hist_path)
    summary = {"model": args.out, "history": str(hist_path), "epochs": len(history), "seconds": elapsed}
    if history:
        summary["final"] = {k: v for k, v in history[-1].items() if isinstance(v, float)}
    return summary


def cmd_eval(args) -> dict:
    ds = load_dataset(args.data)
    model = load_model(args.model, ds.skeleton)
    return {"n": len(ds), **validate(model, ds)}


def cmd_project(args) -> dict:
    ds = load_dataset(args.poses)
    model = load_model(args.model, ds.skeleton)
    cfg = _projection_cfg(args)
    res = project_batch(model, ds.poses, cfg)
    failed = [i for i, r in enumerate(res) if r.error is not None]
    poses = np.stack([ds.poses[i] if r.error is not None else r.pose for i, r in enumerate(res)]) \
        if len(res) else ds.poses
    ds.poses = poses
    save_dataset(ds, args.out)
    values = [r.value for r in res]
    return {
        "n": len(res),
        "converged": int(sum(1 for r in res if r.error is None and r.value < cfg.tol)),
        "failed": failed,
        "values": values,
        "mean_iters": float(np.mean([r.iters for r in res])) if res else 0.0,
    }


def _denoise_cfg(args) -> DenoiseConfig:
    flags = {"lambda_v": args.lambda_v, "w_prior": args.w_prior, "lambda_t": args.lambda_t,
             "lr": args.lr, "steps": args.steps}
    return DenoiseConfig(**_merge(DenoiseConfig().to_dict(), _section(args, "denoise"), flags))


def cmd_denoise(args) -> dict:
    seq = load_dataset(args.seq)
    model = load_model(args.model, seq.skeleton)
    obs = np.asarray(json.loads(Path(args.obs).read_text()), dtype=np.float64)
    out = denoise(seq.poses, obs, model, seq.skeleton, _denoise_cfg(args))
    save_dataset(poses_dataset(out, seq.skeleton), args.out)
    m, s = smoothness(out, seq.skeleton) if len(out) > 1 else (0.0, 0.0)
    return {"frames": len(out), "mean_f": float(np.mean(evaluate(model, out))),
            "smoothness_mean": m, "smoothness_std": s}


def cmd_fit_partial(args) -> dict:
    model = load_model(args.model)
    skel = model.skeleton
    obs = np.asarray(json.loads(Path(args.frame).read_text()), dtype=np.float64)
    mask = np.asarray(json.loads(Path(args.mask).read_text()), dtype=bool)
    if mask.shape != (skel.k,):
        raise errors.DimensionMismatch(f"mask has {mask.size} entries, skeleton K={skel.k}")
    base = _first_pose(args.init) if args.init else np.tile([1.0, 0.0, 0.0, 0.0], (skel.k, 1))
    init = partial_init(base, mask, seed=args.seed)
    pose = fit_partial(obs, mask, init, model, skel, _denoise_cfg(args))
    save_dataset(poses_dataset(pose[None], skel), args.out)
    return {"f": float(evaluate(model, pose[None])[0]), "occluded": np.flatnonzero(~mask).tolist()}


def cmd_interp(args) -> dict:
    model = load_model(args.model)
    cfg = _projection_cfg(args)
    icfg = _merge({"tau": 0.1, "tol": 1e-2, "max_frames": 200}, _section(args, "interp"),
                  {"tau": args.tau, "tol": args.interp_tol, "max_frames": args.max_frames})
    res = interpolate(_first_pose(args.start), _first_pose(args.end), model, icfg["tau"], cfg,
                      icfg["tol"], icfg["max_frames"])
    save_dataset(poses_dataset(res.frames, model.skeleton), args.out)
    m, s = smoothness(res.frames, model.skeleton)
    return {"frames": len(res.frames), "converged": res.converged,
            "max_f": float(np.max(evaluate(model, res.frames))), "smoothness_mean": m, "smoothness_std": s}


def cmd_sample(args) -> dict:
    model = load_model(args.model)
    cfg = _projection_cfg(args)
    try:
        poses = sample_poses(model, args.n, cfg, seed=args.seed, max_attempts=args.max_attempts)
    except errors.SamplingError as exc:
        if len(exc.partial):
            save_dataset(poses_dataset(exc.partial, model.skeleton), args.out)
        raise
    save_dataset(poses_dataset(poses, model.skeleton), args.out)
    f = evaluate(model, poses)
    return {"n": len(poses), "max_f": float(np.max(f)),
            "apd": apd(poses, model.skeleton) if len(poses) > 1 else 0.0}


# -- argument parsing ---------------------------------------------------------


def _common(p, seed_required=False):
    p.add_argument("--seed", type=int, required=seed_required, default=None if seed_required else 0)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--config", default=None, help="JSON file with per-command sections")
    p.add_argument("--out", required=True)
    p.add_argument("-v", "--verbose", action="store_true")


def _proj_flags(p):
    p.add_argument("--alpha", type=float)
    p.add_argument("--max-iters", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--renorm-period", type=int)


def _denoise_flags(p):
    p.add_argument("--lambda-v", type=float)
    p.add_argument("--w-prior", type=float)
    p.add_argument("--lambda-t", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--steps", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="posefield", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a labelled synthetic dataset")
    _common(p, seed_required=True)
    p.add_argument("--spec")
    p.add_argument("--skeleton")
    p.add_argument("--joints", type=int, help="K for a generated manifold spec")
    p.add_argument("--latent-dim", type=int)
    p.add_argument("--n-manifold", type=int)
    p.add_argument("--per-sigma", type=int)
    p.add_argument("--sigma-far", type=float)
    p.add_argument("--sigma-mid", type=float)
    p.add_argument("--sigma-near", type=float)
    p.add_argument("--joint-prob", type=float)
    p.add_argument("--kprime", type=int)
    p.add_argument("--k", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a field model")
    _common(p, seed_required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--val")
    p.add_argument("--epochs", help="stage lengths, e.g. 20,20,40")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--batches-per-epoch", type=int)
    p.add_argument("--lambda-eik", type=float)
    p.add_argument("--flip-prob", type=float)
    p.add_argument("--feat", type=int)
    p.add_argument("--enc-hidden", type=int)
    p.add_argument("--head-width", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="validation metrics of a model on a dataset")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-v", "--verbose", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("project", help="project poses onto the learned manifold")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--poses", required=True)
    _proj_flags(p)
    p.set_defaults(func=cmd_project)

    p = sub.add_parser("denoise", help="denoise a motion sequence")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--seq", required=True)
    p.add_argument("--obs", required=True, help="JSON array (T, K, 3) of joint positions")
    _denoise_flags(p)
    p.set_defaults(func=cmd_denoise)

    p = sub.add_parser("fit-partial", help="complete a pose from partial joint observations")
    _common(p, seed_required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--frame", required=True, help="JSON array (K, 3) of joint positions")
    p.add_argument("--mask", required=True, help="JSON list of K booleans, true = observed")
    p.add_argument("--init")
    _denoise_flags(p)
    p.set_defaults(func=cmd_fit_partial)

    p = sub.add_parser("interp", help="interpolate between two poses along the manifold")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--start", required=True)
    p.add_argument("--end", required=True)
    p.add_argument("--tau", type=float)
    p.add_argument("--interp-tol", type=float)
    p.add_argument("--max-frames", type=int)
    _proj_flags(p)
    p.set_defaults(func=cmd_interp)

    p = sub.add_parser("sample", help="draw poses by projecting random points")
    _common(p, seed_required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--max-attempts", type=int, default=20)
    _proj_flags(p)
    p.set_defaults(func=cmd_sample)
    return parser


def _thread_limit(n):
    if n is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        with _thread_limit(args.threads):
            result = args.func(args)
    except Exception as exc:  # mapped to exit codes below
        for cls, code in EXIT_CODES:
            if isinstance(exc, cls):
                _emit({"command": args.command, "ok": False,
                       "error": {"type": type(exc).__name__, "message": str(exc)}})
                return code
        raise
    _emit({"command": args.command, "ok": True, **result})
    return 0


if __name__ == "__main__":
    sys.exit(main())
